//! Seeded synthetic audio-visual corpora.
//!
//! Every utterance is a phoneme string rendered twice: audio frames embed the
//! phoneme itself, visual frames embed its viseme, so phonemes sharing a
//! viseme are indistinguishable on the visual side. A per-speaker offset is
//! added to both streams, and the visual stream gets more noise.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::numerics::Tensor;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub tag: String,
    /// Spelling of each phoneme, indexed by phoneme id.
    pub graphemes: Vec<String>,
    /// Words as phoneme-id sequences.
    pub words: Vec<Vec<usize>>,
    pub min_words: usize,
    pub max_words: usize,
    pub weight: f64,
}

impl LanguageSpec {
    pub fn spell(&self, word: &[usize]) -> String {
        word.iter().map(|&p| self.graphemes[p].as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub phonemes: Vec<String>,
    /// Phoneme id of the inter-word silence.
    pub silence: usize,
    pub vowels: BTreeSet<usize>,
    pub phoneme_to_viseme: Vec<usize>,
    pub languages: Vec<LanguageSpec>,
    pub n_speakers: usize,
    pub feature_dim: usize,
    pub audio_noise: f32,
    pub visual_noise: f32,
    pub speaker_offset_scale: f32,
    pub frames_per_phoneme: (usize, usize),
    pub silence_frames: (usize, usize),
    pub fps: f32,
    pub seed: u64,
}

const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ə"];
/// Consonants in viseme groups of three (bilabial, alveolar, velar,
/// labiodental, sibilant, postalveolar).
const CONSONANTS: [[&str; 3]; 6] = [
    ["p", "b", "m"],
    ["t", "d", "n"],
    ["k", "g", "ŋ"],
    ["f", "v", "w"],
    ["s", "z", "r"],
    ["ʃ", "ʒ", "l"],
];
const BASE_SPELLING: [&str; 24] = [
    "a", "e", "i", "o", "u", "y", "p", "b", "m", "t", "d", "n", "k", "g", "ng", "f", "v", "w",
    "s", "z", "r", "sh", "zh", "l",
];
const LANGUAGES: [(&str, &[(&str, &str)]); 5] = [
    ("en", &[]),
    ("es", &[("k", "c"), ("ʃ", "ch"), ("ŋ", "ñ")]),
    ("it", &[("k", "c"), ("ʃ", "sc"), ("ə", "è")]),
    ("fr", &[("ʃ", "ch"), ("ʒ", "j"), ("ə", "é"), ("u", "ou")]),
    ("pt", &[("ŋ", "nh"), ("ʃ", "x"), ("ə", "ã")]),
];

impl WorldSpec {
    /// Five languages over 24 phonemes (6 vowels, 18 consonants) plus
    /// silence. Vowels keep their own viseme; consonants collapse three to
    /// one, giving 12 speech visemes and a silence viseme.
    pub fn default_world(seed: u64) -> Self {
        let mut phonemes: Vec<String> = VOWELS.iter().map(|s| s.to_string()).collect();
        let mut phoneme_to_viseme: Vec<usize> = (0..VOWELS.len()).collect();
        for (g, group) in CONSONANTS.iter().enumerate() {
            for c in group {
                phonemes.push(c.to_string());
                phoneme_to_viseme.push(VOWELS.len() + g);
            }
        }
        let silence = phonemes.len();
        phonemes.push("sil".into());
        phoneme_to_viseme.push(VOWELS.len() + CONSONANTS.len());
        let vowels: BTreeSet<usize> = (0..VOWELS.len()).collect();

        let languages = LANGUAGES
            .iter()
            .enumerate()
            .map(|(li, (tag, overrides))| {
                let mut graphemes: Vec<String> =
                    BASE_SPELLING.iter().map(|s| s.to_string()).collect();
                graphemes.push(String::new());
                for (ph, sp) in overrides.iter() {
                    let id = phonemes.iter().position(|p| p == ph).expect("known phoneme");
                    graphemes[id] = sp.to_string();
                }
                let mut rng = seed::rng(seed, "lexicon", li as u64);
                let words = make_lexicon(&mut rng, &vowels, VOWELS.len()..silence, 40);
                LanguageSpec {
                    tag: tag.to_string(),
                    graphemes,
                    words,
                    min_words: 2,
                    max_words: 4,
                    weight: 1.0 / LANGUAGES.len() as f64,
                }
            })
            .collect();

        WorldSpec {
            phonemes,
            silence,
            vowels,
            phoneme_to_viseme,
            languages,
            n_speakers: 20,
            feature_dim: 32,
            audio_noise: 0.1,
            visual_noise: 0.3,
            speaker_offset_scale: 0.3,
            frames_per_phoneme: (2, 4),
            silence_frames: (1, 2),
            fps: 25.0,
            seed,
        }
    }

    pub fn n_phonemes(&self) -> usize {
        self.phonemes.len()
    }

    pub fn n_visemes(&self) -> usize {
        self.phoneme_to_viseme.iter().max().map_or(0, |m| m + 1)
    }

    pub fn n_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn language_index(&self, tag: &str) -> Option<usize> {
        self.languages.iter().position(|l| l.tag == tag)
    }

    /// Viseme ids that are images of vowels.
    pub fn vowel_visemes(&self) -> BTreeSet<usize> {
        self.vowels.iter().map(|&v| self.phoneme_to_viseme[v]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("world spec: {m}")));
        let np = self.phonemes.len();
        if np == 0 || self.phoneme_to_viseme.len() != np {
            return bad(format!(
                "{} phonemes but {} viseme entries",
                np,
                self.phoneme_to_viseme.len()
            ));
        }
        if self.silence >= np {
            return bad("silence phoneme out of range".into());
        }
        if self.vowels.iter().any(|&v| v >= np || v == self.silence) {
            return bad("vowel set must name non-silence phonemes".into());
        }
        let nv = self.n_visemes();
        let mut preimages = vec![0usize; nv];
        for &v in &self.phoneme_to_viseme {
            preimages[v] += 1;
        }
        if preimages.contains(&0) {
            return bad("viseme ids must be contiguous".into());
        }
        if !preimages.iter().any(|&c| c >= 2) {
            return bad("no viseme is shared by two phonemes (no homophenes)".into());
        }
        if !(self.visual_noise >= self.audio_noise) || self.audio_noise < 0.0 {
            return bad(format!(
                "visual noise {} must be >= audio noise {} >= 0",
                self.visual_noise, self.audio_noise
            ));
        }
        if self.n_speakers == 0 || self.feature_dim == 0 || !(self.fps > 0.0) {
            return bad("n_speakers, feature_dim and fps must be positive".into());
        }
        let (lo, hi) = self.frames_per_phoneme;
        let (slo, shi) = self.silence_frames;
        if lo == 0 || lo > hi || slo == 0 || slo > shi {
            return bad("frame-count ranges must satisfy 1 <= min <= max".into());
        }
        if self.languages.is_empty() {
            return bad("at least one language is required".into());
        }
        for l in &self.languages {
            if l.graphemes.len() != np {
                return bad(format!("language {} spells {} of {np} phonemes", l.tag, l.graphemes.len()));
            }
            if l.words.is_empty() || l.min_words == 0 || l.min_words > l.max_words {
                return bad(format!("language {} needs words and 1 <= min_words <= max_words", l.tag));
            }
            if !(l.weight > 0.0) {
                return bad(format!("language {} weight must be positive", l.tag));
            }
            for w in &l.words {
                if w.is_empty() || w.iter().any(|&p| p >= np || p == self.silence) {
                    return bad(format!("language {} has an invalid word {w:?}", l.tag));
                }
                if w.windows(2).any(|p| p[0] == p[1]) {
                    return bad(format!("language {} word {w:?} repeats a phoneme", l.tag));
                }
            }
        }
        Ok(())
    }
}

fn make_lexicon(
    rng: &mut impl Rng,
    vowels: &BTreeSet<usize>,
    consonant_ids: std::ops::Range<usize>,
    n_words: usize,
) -> Vec<Vec<usize>> {
    // each language uses 12 of the consonants and 5 of the vowels
    let mut cons: Vec<usize> = consonant_ids.collect();
    let mut vows: Vec<usize> = vowels.iter().copied().collect();
    shuffle(&mut cons, rng);
    shuffle(&mut vows, rng);
    cons.truncate(12);
    vows.truncate(5);
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(n_words);
    while words.len() < n_words {
        let syllables = rng.random_range(1..=3);
        let mut w = Vec::new();
        for _ in 0..syllables {
            w.push(*cons.choose(rng).unwrap());
            w.push(*vows.choose(rng).unwrap());
        }
        if rng.random_bool(0.3) {
            w.push(*cons.choose(rng).unwrap());
        }
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

fn shuffle<T>(v: &mut [T], rng: &mut impl Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Fixed base vectors for phonemes, visemes and speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub phonemes: Tensor,
    pub visemes: Tensor,
    pub speakers: Tensor,
}

const MAX_PAIR_DOT: f32 = 0.5;

/// Unit-norm random vectors with pairwise |dot| < 0.5, by rejection sampling.
pub fn random_unit_vectors(n: usize, dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    const MAX_TRIES: usize = 10_000;
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut accepted = false;
        for _ in 0..MAX_TRIES {
            let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let ok = rows.iter().all(|r| {
                let d: f32 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                d.abs() < MAX_PAIR_DOT
            });
            if ok {
                rows.push(v);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::config(format!(
                "feature_dim {dim} is too small to place {n} vectors with pairwise |dot| < {MAX_PAIR_DOT} \
                 (stuck at vector {i}); use a larger feature_dim"
            )));
        }
    }
    if n == 0 {
        return Ok(Tensor::zeros([0, dim]));
    }
    Ok(Tensor::from_rows(&rows))
}

pub fn phoneme_embeddings(spec: &WorldSpec) -> Result<Embeddings> {
    let dim = spec.feature_dim;
    Ok(Embeddings {
        phonemes: random_unit_vectors(spec.n_phonemes(), dim, &mut seed::rng(spec.seed, "embed.phoneme", 0))?,
        visemes: random_unit_vectors(spec.n_visemes(), dim, &mut seed::rng(spec.seed, "embed.viseme", 0))?,
        speakers: random_unit_vectors(spec.n_speakers, dim, &mut seed::rng(spec.seed, "embed.speaker", 0))?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: Tensor,
    pub visual: Tensor,
    /// Per-frame phoneme ids.
    pub phonemes: Vec<usize>,
    pub text: String,
    pub speaker: usize,
    pub language: usize,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.phonemes.len()
    }

    pub fn visemes(&self, spec: &WorldSpec) -> Vec<usize> {
        self.phonemes.iter().map(|&p| spec.phoneme_to_viseme[p]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub world: WorldSpec,
    pub utterances: Vec<Utterance>,
}

/// Rebuilds the text from per-frame phoneme labels: runs collapse to one
/// phoneme, silences separate words.
pub fn text_from_phonemes(spec: &WorldSpec, language: usize, frames: &[usize]) -> String {
    let lang = &spec.languages[language];
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut prev = None;
    for &p in frames {
        if prev == Some(p) {
            continue;
        }
        prev = Some(p);
        if p == spec.silence {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else {
            current.push_str(&lang.graphemes[p]);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words.join(" ")
}

fn sample_utterance(spec: &WorldSpec, emb: &Embeddings, index: usize) -> Utterance {
    let mut rng = seed::rng(spec.seed, "utterance", index as u64);
    let total: f64 = spec.languages.iter().map(|l| l.weight).sum();
    let mut pick = rng.random::<f64>() * total;
    let mut language = spec.languages.len() - 1;
    for (i, l) in spec.languages.iter().enumerate() {
        if pick < l.weight {
            language = i;
            break;
        }
        pick -= l.weight;
    }
    let lang = &spec.languages[language];
    let speaker = rng.random_range(0..spec.n_speakers);
    let n_words = rng.random_range(lang.min_words..=lang.max_words);
    let words: Vec<&Vec<usize>> = (0..n_words)
        .map(|_| lang.words.choose(&mut rng).unwrap())
        .collect();

    let mut frames = Vec::new();
    let sil = |rng: &mut rand_chacha::ChaCha8Rng, frames: &mut Vec<usize>| {
        let n = rng.random_range(spec.silence_frames.0..=spec.silence_frames.1);
        frames.extend(std::iter::repeat_n(spec.silence, n));
    };
    sil(&mut rng, &mut frames);
    for w in &words {
        for &p in w.iter() {
            let n = rng.random_range(spec.frames_per_phoneme.0..=spec.frames_per_phoneme.1);
            frames.extend(std::iter::repeat_n(p, n));
        }
        sil(&mut rng, &mut frames);
    }
    let text = words
        .iter()
        .map(|w| lang.spell(w))
        .collect::<Vec<_>>()
        .join(" ");

    let dim = spec.feature_dim;
    let t = frames.len();
    let spk = emb.speakers.row(speaker);
    let an = Normal::new(0.0, spec.audio_noise).unwrap();
    let vn = Normal::new(0.0, spec.visual_noise).unwrap();
    let mut audio = Tensor::zeros([t, dim]);
    let mut visual = Tensor::zeros([t, dim]);
    for (i, &p) in frames.iter().enumerate() {
        let pe = emb.phonemes.row(p);
        let ve = emb.visemes.row(spec.phoneme_to_viseme[p]);
        let a = audio.row_mut(i);
        for j in 0..dim {
            a[j] = pe[j] + spk[j] * spec.speaker_offset_scale + an.sample(&mut rng);
        }
        let v = visual.row_mut(i);
        for j in 0..dim {
            v[j] = ve[j] + spk[j] * spec.speaker_offset_scale + vn.sample(&mut rng);
        }
    }
    Utterance {
        id: format!("utt{index:05}"),
        audio,
        visual,
        phonemes: frames,
        text,
        speaker,
        language,
    }
}

/// Draws `n` utterances. Utterance `i` uses its own derived seed, so output
/// does not depend on thread count.
pub fn generate_corpus(spec: &WorldSpec, n: usize) -> Result<Corpus> {
    spec.validate()?;
    let emb = phoneme_embeddings(spec)?;
    let utterances = (0..n)
        .into_par_iter()
        .map(|i| sample_utterance(spec, &emb, i))
        .collect();
    Ok(Corpus {
        world: spec.clone(),
        utterances,
    })
}

/// Renders visual features into `h × w` 8-bit frames through a fixed random
/// projection. Stands in for raw mouth-region video in throughput tests.
pub fn render_frames(visual: &Tensor, h: usize, w: usize, seed: u64) -> Vec<u8> {
    let dim = visual.cols();
    let mut rng = seed::rng(seed, "render", 0);
    let proj = Tensor::randn([dim, h * w], 1.0 / (dim as f32).sqrt(), &mut rng);
    let mut out = vec![0u8; visual.rows() * h * w];
    let mut px = vec![0.0f32; h * w];
    for r in 0..visual.rows() {
        px.iter_mut().for_each(|p| *p = 0.0);
        for (i, &v) in visual.row(r).iter().enumerate() {
            for (p, &m) in px.iter_mut().zip(proj.row(i)) {
                *p += v * m;
            }
        }
        for (o, &x) in out[r * h * w..(r + 1) * h * w].iter_mut().zip(&px) {
            *o = (255.0 / (1.0 + (-2.0 * x).exp())) as u8;
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    language: String,
    speaker: usize,
    text: String,
    frames: usize,
    audio: String,
    visual: String,
    phonemes: Vec<usize>,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const WORLD_FILE: &str = "world.json";

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let feats = dir.join("feats");
        fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
        let world = serde_json::to_string_pretty(&self.world).expect("world spec serializes");
        crate::io::write_file(&dir.join(WORLD_FILE), world.as_bytes())?;
        let mut manifest = Vec::new();
        for u in &self.utterances {
            let audio = format!("feats/{}.audio.utns", u.id);
            let visual = format!("feats/{}.visual.utns", u.id);
            save_tensor(&dir.join(&audio), &u.audio)?;
            save_tensor(&dir.join(&visual), &u.visual)?;
            let rec = ManifestRecord {
                id: u.id.clone(),
                language: self.world.languages[u.language].tag.clone(),
                speaker: u.speaker,
                text: u.text.clone(),
                frames: u.frames(),
                audio,
                visual,
                phonemes: u.phonemes.clone(),
            };
            serde_json::to_writer(&mut manifest, &rec).expect("record serializes");
            manifest.push(b'\n');
        }
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&manifest).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let wpath = dir.join(WORLD_FILE);
        let world: WorldSpec = serde_json::from_slice(&crate::io::read_file(&wpath)?)
            .map_err(|e| Error::format(&wpath, e.to_string()))?;
        world.validate()?;
        let mpath = dir.join(MANIFEST);
        let file = fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut utterances = Vec::new();
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&mpath, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&mpath, format!("line {}: {e}", ln + 1)))?;
            let language = world.language_index(&rec.language).ok_or_else(|| {
                Error::format(&mpath, format!("line {}: unknown language {}", ln + 1, rec.language))
            })?;
            let audio = load_tensor(&dir.join(&rec.audio))?;
            let visual = load_tensor(&dir.join(&rec.visual))?;
            if audio.rows() != rec.frames || visual.rows() != rec.frames || rec.phonemes.len() != rec.frames {
                return Err(Error::format(
                    &mpath,
                    format!("line {}: stream lengths disagree for {}", ln + 1, rec.id),
                ));
            }
            utterances.push(Utterance {
                id: rec.id,
                audio,
                visual,
                phonemes: rec.phonemes,
                text: rec.text,
                speaker: rec.speaker,
                language,
            });
        }
        Ok(Corpus { world, utterances })
    }

    pub fn feature_path(dir: &Path, id: &str, modality: crate::units::Modality) -> PathBuf {
        dir.join(format!("feats/{id}.{modality}.utns"))
    }

    /// All frames of one modality stacked into an `N × dim` matrix.
    pub fn stacked(&self, modality: crate::units::Modality) -> Tensor {
        let dim = self.world.feature_dim;
        let mut data = Vec::new();
        for u in &self.utterances {
            let t = match modality {
                crate::units::Modality::Audio => &u.audio,
                crate::units::Modality::Visual => &u.visual,
            };
            data.extend_from_slice(t.data());
        }
        let n = data.len() / dim;
        Tensor::new([n, dim], data)
    }

    /// Stacked per-frame phoneme labels matching [`Corpus::stacked`].
    pub fn stacked_phonemes(&self) -> Vec<usize> {
        self.utterances.iter().flat_map(|u| u.phonemes.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(mut spec: WorldSpec) -> WorldSpec {
        spec.audio_noise = 0.0;
        spec.visual_noise = 0.0;
        spec.speaker_offset_scale = 0.0;
        spec
    }

    #[test]
    fn default_world_is_valid() {
        let w = WorldSpec::default_world(1);
        w.validate().unwrap();
        assert_eq!(w.n_phonemes(), 25);
        assert_eq!(w.n_visemes(), 13);
        assert_eq!(w.vowels.len(), 6);
        assert_eq!(w.n_languages(), 5);
    }

    #[test]
    fn noiseless_audio_depends_only_on_phoneme() {
        let spec = quiet(WorldSpec::default_world(3));
        let c = generate_corpus(&spec, 20).unwrap();
        let mut seen: std::collections::HashMap<usize, Vec<f32>> = Default::default();
        for u in &c.utterances {
            for (i, &p) in u.phonemes.iter().enumerate() {
                let row = u.audio.row(i).to_vec();
                assert_eq!(seen.entry(p).or_insert_with(|| row.clone()), &row);
            }
        }
    }

    #[test]
    fn homophenes_share_visual_features() {
        let spec = quiet(WorldSpec::default_world(3));
        let emb = phoneme_embeddings(&spec).unwrap();
        // p and b share the bilabial viseme
        let p = spec.phonemes.iter().position(|x| x == "p").unwrap();
        let b = spec.phonemes.iter().position(|x| x == "b").unwrap();
        assert_eq!(spec.phoneme_to_viseme[p], spec.phoneme_to_viseme[b]);
        assert_eq!(
            emb.visemes.row(spec.phoneme_to_viseme[p]),
            emb.visemes.row(spec.phoneme_to_viseme[b])
        );
        assert_ne!(emb.phonemes.row(p), emb.phonemes.row(b));
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = WorldSpec::default_world(5);
        assert_eq!(generate_corpus(&spec, 30).unwrap(), generate_corpus(&spec, 30).unwrap());
        let other = WorldSpec::default_world(6);
        assert_ne!(generate_corpus(&spec, 5).unwrap(), generate_corpus(&other, 5).unwrap());
    }

    #[test]
    fn text_regenerates_from_frames() {
        let spec = WorldSpec::default_world(7);
        let c = generate_corpus(&spec, 200).unwrap();
        for u in &c.utterances {
            assert_eq!(text_from_phonemes(&spec, u.language, &u.phonemes), u.text);
            assert_eq!(u.audio.rows(), u.frames());
            assert_eq!(u.visual.rows(), u.frames());
        }
    }

    #[test]
    fn language_mix_follows_weights() {
        let spec = WorldSpec::default_world(8);
        let c = generate_corpus(&spec, 1000).unwrap();
        let mut counts = vec![0usize; spec.n_languages()];
        for u in &c.utterances {
            counts[u.language] += 1;
        }
        for (l, &n) in spec.languages.iter().zip(&counts) {
            let freq = n as f64 / 1000.0;
            assert!((freq - l.weight).abs() < 0.05, "{}: {freq}", l.tag);
        }
    }

    #[test]
    fn embeddings_are_unit_and_spread() {
        let spec = WorldSpec::default_world(9);
        let e = phoneme_embeddings(&spec).unwrap();
        for t in [&e.phonemes, &e.visemes, &e.speakers] {
            for i in 0..t.rows() {
                let n: f32 = t.row(i).iter().map(|x| x * x).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
                for j in 0..i {
                    let d: f32 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
                    assert!(d.abs() < 0.5);
                }
            }
        }
        assert_eq!(e, phoneme_embeddings(&spec).unwrap());
    }

    #[test]
    fn two_vectors_in_dim_eight() {
        let t = random_unit_vectors(2, 8, &mut seed::rng(0, "t", 0)).unwrap();
        let d: f32 = t.row(0).iter().zip(t.row(1)).map(|(a, b)| a * b).sum();
        assert!(d.abs() < 0.5);
    }

    #[test]
    fn tiny_dim_is_rejected() {
        let err = random_unit_vectors(3, 1, &mut seed::rng(0, "t", 0)).unwrap_err();
        assert!(err.to_string().contains("larger feature_dim"));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = WorldSpec::default_world(1);
        s.visual_noise = 0.01;
        assert!(s.validate().is_err());
        let mut s = WorldSpec::default_world(1);
        s.phoneme_to_viseme = (0..s.n_phonemes()).collect();
        assert!(s.validate().is_err());
        let mut s = WorldSpec::default_world(1);
        s.languages[0].words.push(vec![6, 6]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&WorldSpec::default_world(2), 6).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }
}
