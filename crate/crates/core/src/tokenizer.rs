//! Shared multilingual BPE vocabulary.
//!
//! Words are prefixed with a boundary marker (`▁`) so decoding restores the
//! exact spacing. Specials occupy ids 0..=3.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const WORD_MARKER: char = '▁';
const VOCAB_HEADER: &str = "#vsu-vocab";
const VOCAB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    index: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(' ').map(|w| {
        let mut s = String::with_capacity(w.len() + 3);
        s.push(WORD_MARKER);
        s.push_str(w);
        s
    })
}

impl Vocabulary {
    fn build(pieces: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(Error::input(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::input(format!("special {s} must have id {i}")));
            }
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Ok(Vocabulary {
            pieces,
            merges,
            index,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Greedy BPE, wrapped in BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        if !text.is_empty() {
            for word in split_words(text) {
                self.encode_word(&word, &mut out);
            }
        }
        out.push(EOS);
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && &parts[i] == l && &parts[i + 1] == r {
                    merged.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        out.extend(parts.iter().map(|p| self.id(p).unwrap_or(UNK)));
    }

    /// Concatenates pieces, turning boundary markers back into spaces.
    /// Specials are dropped.
    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &t in tokens {
            let p = self
                .piece(t)
                .ok_or_else(|| Error::input(format!("token {t} outside vocabulary of {}", self.len())))?;
            if (t as usize) < SPECIALS.len() {
                continue;
            }
            s.push_str(p);
        }
        let s = s.replace(WORD_MARKER, " ");
        Ok(s.strip_prefix(' ').map(str::to_owned).unwrap_or(s))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{VOCAB_HEADER} v{VOCAB_VERSION} size={} merges={}",
            self.pieces.len(),
            self.merges.len()
        );
        for p in &self.pieces {
            let _ = writeln!(s, "{p}");
        }
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format(path, "empty vocabulary file"))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(VOCAB_HEADER) {
            return Err(Error::format(path, "missing vocabulary header"));
        }
        let version = fields
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u16>().ok())
            .ok_or_else(|| Error::format(path, "bad version field"))?;
        if u32::from(version) != VOCAB_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                kind: "vocabulary",
                found: version,
                expected: VOCAB_VERSION as u16,
            });
        }
        let mut count = |key: &str| -> Result<usize> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(key))
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad {key} field")))
        };
        let size = count("size=")?;
        let n_merges = count("merges=")?;
        let pieces: Vec<String> = lines.by_ref().take(size).map(str::to_owned).collect();
        if pieces.len() != size {
            return Err(Error::format(path, "fewer pieces than declared"));
        }
        let merges = lines
            .by_ref()
            .take(n_merges)
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_owned(), b.to_owned()))
                    .ok_or_else(|| Error::format(path, format!("bad merge line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if merges.len() != n_merges {
            return Err(Error::format(path, "fewer merges than declared"));
        }
        Self::build(pieces, merges).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
        Self::from_text(&text, path)
    }
}

/// Learns merges until the vocabulary holds exactly `vocab_size` pieces.
/// Pair-frequency ties go to the lexicographically smallest pair.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocabulary> {
    if corpus.iter().all(|l| l.as_ref().is_empty()) {
        return Err(Error::input("cannot train a vocabulary on an empty corpus"));
    }
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        let line = line.as_ref();
        if line.is_empty() {
            continue;
        }
        for w in split_words(line) {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    let alphabet: std::collections::BTreeSet<char> =
        word_freq.keys().flat_map(|w| w.chars()).collect();
    let base = SPECIALS.len() + alphabet.len();
    if vocab_size < base {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} is below the {} specials + {} characters",
            SPECIALS.len(),
            alphabet.len()
        )));
    }
    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));

    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| (w.chars().map(String::from).collect(), f))
        .collect();
    let mut merges = Vec::new();
    while pieces.len() < vocab_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (parts, f) in &words {
            for w in parts.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        // BTreeMap iterates pairs in lexicographic order; keep the first max.
        let Some((pair, _)) = counts
            .into_iter()
            .fold(None, |best: Option<((&str, &str), usize)>, (p, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((p, c)),
            })
        else {
            return Err(Error::config(format!(
                "corpus supports only {} pieces, vocab_size {vocab_size} requested",
                pieces.len()
            )));
        };
        let (l, r) = (pair.0.to_owned(), pair.1.to_owned());
        let joined = format!("{l}{r}");
        for (parts, _) in &mut words {
            let mut i = 0;
            while i + 1 < parts.len() {
                if parts[i] == l && parts[i + 1] == r {
                    parts[i] = joined.clone();
                    parts.remove(i + 1);
                }
                i += 1;
            }
        }
        if !pieces.contains(&joined) {
            pieces.push(joined);
        }
        merges.push((l, r));
    }
    Vocabulary::build(pieces, merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_merge_on_aaaa() {
        // alphabet {▁, a} + 4 specials = 6
        let v = train_bpe(&["aaaa"], 7).unwrap();
        assert_eq!(v.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn minimum_size_is_character_level() {
        let v = train_bpe(&["abc cab"], 4 + 4).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 8);
        assert!(train_bpe(&["abc"], 5).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(train_bpe::<&str>(&[], 10).is_err());
        assert!(train_bpe(&[""], 10).is_err());
    }

    #[test]
    fn encode_decode_examples() {
        let lines = ["hola mundo", "ciao mondo", "olá mundo"];
        let v = train_bpe(&lines, 30).unwrap();
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), "");
        for l in lines {
            assert_eq!(v.decode(&v.encode(l)).unwrap(), l);
        }
        let id = v.id("▁mundo").or_else(|| v.id("▁m")).unwrap();
        let word = v.piece(id).unwrap().trim_start_matches(WORD_MARKER).to_string();
        assert_eq!(v.encode(&word), vec![BOS, id, EOS]);
        assert!(v.decode(&[999]).is_err());
    }

    #[test]
    fn spacing_is_preserved() {
        let v = train_bpe(&["ab ba"], 9).unwrap();
        for s in [" ab", "ab  ba", "ba "] {
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let v = train_bpe(&["ab"], 7).unwrap();
        let t = v.encode("az");
        assert!(t.contains(&UNK));
    }

    #[test]
    fn text_format_round_trip() {
        let v = train_bpe(&["hello world", "hallo welt"], 25).unwrap();
        let back = Vocabulary::from_text(&v.to_text(), Path::new("v")).unwrap();
        assert_eq!(back, v);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(back.id(s), Some(i as u32));
        }
        let bumped = v.to_text().replacen(" v1 ", " v2 ", 1);
        assert!(matches!(
            Vocabulary::from_text(&bumped, Path::new("v")),
            Err(Error::Version { .. })
        ));
    }
}
