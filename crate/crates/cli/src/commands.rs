use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use vsu::curriculum::{
    accuracy_csv, encode_corpus, evaluate_visual, feature_examples, read_metrics, write_metrics, Example, Strategy,
    TrainOutcome,
};
use vsu::eval::{evaluate_wer, speaker_probe, throughput_bench, BenchItem, ProbeInput, WerReport};
use vsu::io::write_file;
use vsu::model::{Frontend, Model};
use vsu::quantizer::{purity, train_kmeans, Codebook};
use vsu::synth::{generate_corpus, render_frames, Corpus};
use vsu::tokenizer::Vocabulary;
use vsu::units::{load_units, pack, save_units, Modality, UnitStream};

use crate::config::RunConfig;
use crate::{CliError, ConfigArg, LabelKind, ModalityArg, Representation};

type Result<T> = std::result::Result<T, CliError>;

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    let mut c = RunConfig::load_or_default(arg.config.as_deref())?;
    if let Some(s) = arg.seed {
        c.seed = s;
    }
    if c.seed > i64::MAX as u64 {
        return Err(CliError::Config("seed must fit in 63 bits".into()));
    }
    Ok(c)
}

fn or(path: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    path.clone().unwrap_or(default)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    Ok(write_file(path, text.as_bytes())?)
}

fn unit_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.useq"))
}

/// Unit streams for every utterance of `corpus`, in manifest order.
fn load_unit_dir(dir: &Path, corpus: &Corpus) -> Result<(Vec<UnitStream>, u32)> {
    let mut k_seen = None;
    let mut out = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let path = unit_path(dir, &u.id);
        let (mut s, k) = load_units(&path)?;
        if *k_seen.get_or_insert(k) != k {
            return Err(CliError::Data(format!("{}: k={k} differs from the rest of the directory", path.display())));
        }
        s.speaker = u.speaker.to_string();
        out.push(s);
    }
    let k = k_seen.ok_or_else(|| CliError::Data("corpus has no utterances".into()))?;
    Ok((out, k))
}

pub fn gen_data(
    data: &Path,
    arg: &ConfigArg,
    out: Option<PathBuf>,
    train: Option<usize>,
    test: Option<usize>,
) -> Result<()> {
    let mut c = load_config(arg)?;
    if let Some(n) = train {
        c.data.train_utterances = n;
    }
    if let Some(n) = test {
        c.data.test_utterances = n;
    }
    let c = c.resolve()?;
    let out = or(&out, data.join("corpus"));
    let world = c.world();
    let all = generate_corpus(&world, c.data.train_utterances + c.data.test_utterances)?;
    let (train, test) = all.utterances.split_at(c.data.train_utterances);
    for (name, utts) in [("train", train), ("test", test)] {
        Corpus {
            world: world.clone(),
            utterances: utts.to_vec(),
        }
        .save(&out.join(name))?;
    }
    c.write(&out.join("config.toml"))?;
    println!(
        "wrote {} train and {} test utterances to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

pub fn train_quantizer(
    data: &Path,
    arg: &ConfigArg,
    corpus: Option<PathBuf>,
    modality: Modality,
    k: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut c = load_config(arg)?;
    if let Some(k) = k {
        c.quantizer.k = k;
    }
    let c = c.resolve()?;
    let corpus = Corpus::load(&or(&corpus, data.join("corpus/train")))?;
    let out = or(&out, data.join(format!("codebooks/{modality}.ucbk")));
    let cb = train_kmeans(
        &corpus.stacked(modality),
        c.quantizer.k,
        c.quantizer.max_iters,
        c.quantizer_seed(modality),
    )?;
    cb.save(&out)?;
    c.write(&PathBuf::from(format!("{}.config.toml", out.display())))?;
    println!("wrote {modality} codebook k={} dim={} to {}", cb.k, cb.dim, out.display());
    Ok(())
}

pub fn encode_units(data: &Path, corpus: Option<PathBuf>, codebook: &Path, out: &Path) -> Result<()> {
    let corpus = Corpus::load(&or(&corpus, data.join("corpus/train")))?;
    let cb = Codebook::load(codebook)?;
    if cb.dim != corpus.world.feature_dim {
        return Err(CliError::Data(format!(
            "codebook has dim {} but the corpus has {}-dim features",
            cb.dim, corpus.world.feature_dim
        )));
    }
    let modality = codebook_modality(codebook)?;
    let streams = encode_corpus(&corpus, &cb, modality)?;
    let mut frames = 0;
    for (u, s) in corpus.utterances.iter().zip(&streams) {
        save_units(&unit_path(out, &u.id), s, cb.k as u32)?;
        frames += s.len();
    }
    println!(
        "wrote {} {modality} unit files ({frames} frames, k={}) to {}",
        streams.len(),
        cb.k,
        out.display()
    );
    Ok(())
}

/// Codebooks carry no modality tag; it is read from the file stem.
fn codebook_modality(path: &Path) -> Result<Modality> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    for m in [Modality::Audio, Modality::Visual] {
        if stem.contains(m.as_str()) {
            return Ok(m);
        }
    }
    Err(CliError::Config(format!(
        "{}: codebook file name must contain \"audio\" or \"visual\"",
        path.display()
    )))
}

pub fn train_bpe(
    data: &Path,
    arg: &ConfigArg,
    corpus: Option<PathBuf>,
    size: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut c = load_config(arg)?;
    if let Some(s) = size {
        c.tokenizer.vocab_size = s;
    }
    let c = c.resolve()?;
    let corpus = Corpus::load(&or(&corpus, data.join("corpus/train")))?;
    let out = or(&out, data.join("vocab.txt"));
    let texts: Vec<&str> = corpus.utterances.iter().map(|u| u.text.as_str()).collect();
    let vocab = vsu::tokenizer::train_bpe(&texts, c.tokenizer.vocab_size)?;
    vocab.save(&out)?;
    c.write(&PathBuf::from(format!("{}.config.toml", out.display())))?;
    println!("wrote {} pieces to {}", vocab.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Streams {
    /// Paired audio and visual units under the masking policy.
    Av,
    /// Visual units only.
    Visual,
    /// Audio units only.
    Audio,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// [default: DATA_DIR/corpus/train]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// [default: DATA_DIR/units/train/audio]
    #[arg(long)]
    audio_units: Option<PathBuf>,
    /// [default: DATA_DIR/units/train/visual]
    #[arg(long)]
    visual_units: Option<PathBuf>,
    /// [default: DATA_DIR/vocab.txt]
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "av")]
    streams: Streams,
    /// curriculum | scratch_visual | transfer_two_stage | no_mask_av
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: DATA_DIR/runs/pretrain]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn save_run(out: &Path, c: &RunConfig, run: &TrainOutcome) -> Result<()> {
    run.model.save(&out.join("model.ukpt"))?;
    write_metrics(&out.join("metrics.jsonl"), &run.metrics)?;
    let mut csv = Vec::new();
    accuracy_csv(&run.metrics, &mut csv).expect("writes to memory");
    write_file(&out.join("accuracy.csv"), &csv)?;
    c.write(&out.join("config.toml"))?;
    if let Some(last) = run.metrics.last() {
        println!(
            "{} steps, final loss {:.4}, token accuracy {:.3}; wrote {}",
            run.metrics.len(),
            last.loss,
            last.token_accuracy,
            out.display()
        );
    }
    Ok(())
}

pub fn pretrain(data: &Path, a: &PretrainArgs) -> Result<()> {
    let mut c = load_config(&a.cfg)?;
    if let Some(s) = a.strategy {
        c.pretrain.strategy = s;
    }
    if let Some(e) = a.epochs {
        c.pretrain.epochs = e;
    }
    let corpus = Corpus::load(&or(&a.corpus, data.join("corpus/train")))?;
    let vocab = Vocabulary::load(&or(&a.vocab, data.join("vocab.txt")))?;
    c.tokenizer.vocab_size = vocab.len();
    c.model.n_languages = corpus.world.n_languages();
    let load = |dir: &Option<PathBuf>, m: &str| load_unit_dir(&or(dir, data.join(format!("units/train/{m}"))), &corpus);
    let examples = match a.streams {
        Streams::Av => {
            let (au, ka) = load(&a.audio_units, "audio")?;
            let (vu, kv) = load(&a.visual_units, "visual")?;
            c.quantizer.k = ka.max(kv) as usize;
            vsu::curriculum::unit_examples(&corpus, &au, &vu, &vocab)?
        }
        Streams::Visual | Streams::Audio => {
            let (dir, m) = if a.streams == Streams::Audio {
                (&a.audio_units, "audio")
            } else {
                (&a.visual_units, "visual")
            };
            let (u, k) = load(dir, m)?;
            c.quantizer.k = k as usize;
            vsu::curriculum::single_stream_examples(&corpus, &u, &vocab)?
        }
    };
    c.model.k_units = c.quantizer.k;
    c.model.vocab_size = vocab.len();
    let c = c.resolve()?;
    let out = or(&a.out, data.join("runs/pretrain"));
    let run = vsu::curriculum::pretrain(&examples, &c.pretrain, &c.model)?;
    save_run(&out, &c, &run)
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Discrete-frontend checkpoint [default: DATA_DIR/runs/pretrain/model.ukpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// [default: DATA_DIR/corpus/train]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// [default: DATA_DIR/vocab.txt]
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    frozen_steps: Option<usize>,
    /// [default: DATA_DIR/runs/finetune]
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn finetune(data: &Path, a: &FinetuneArgs) -> Result<()> {
    let mut c = load_config(&a.cfg)?;
    if let Some(e) = a.epochs {
        c.finetune.epochs = e;
    }
    if let Some(f) = a.frozen_steps {
        c.finetune.frozen_steps = f;
    }
    let ckpt = Model::load(&or(&a.checkpoint, data.join("runs/pretrain/model.ukpt")))?;
    let corpus = Corpus::load(&or(&a.corpus, data.join("corpus/train")))?;
    let vocab = Vocabulary::load(&or(&a.vocab, data.join("vocab.txt")))?;
    if vocab.len() > ckpt.cfg.vocab_size {
        return Err(CliError::Data(format!(
            "vocabulary has {} pieces but the checkpoint only {}",
            vocab.len(),
            ckpt.cfg.vocab_size
        )));
    }
    c.model = ckpt.cfg.clone();
    c.tokenizer.vocab_size = vocab.len();
    c.quantizer.k = ckpt.cfg.k_units;
    let c = c.resolve()?;
    let examples = feature_examples(&corpus, &vocab);
    let out = or(&a.out, data.join("runs/finetune"));
    let run = vsu::curriculum::finetune(&ckpt, &examples, &c.finetune)?;
    save_run(&out, &c, &run)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// [default: DATA_DIR/runs/finetune/model.ukpt]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// [default: DATA_DIR/corpus/test]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Unit files fed to a discrete model's visual slot
    /// [default: DATA_DIR/units/test/visual].
    #[arg(long)]
    units: Option<PathBuf>,
    /// [default: DATA_DIR/vocab.txt]
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    penalty: Option<f64>,
    /// Metrics log to export as a step/accuracy CSV next to the report.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// [default: DATA_DIR/reports/eval]
    #[arg(long)]
    out: Option<PathBuf>,
}

/// WER plus the teacher-forced visual-only loss.
#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a WerReport,
    loss: f64,
    token_accuracy: f64,
}

pub fn eval(data: &Path, a: &EvalArgs) -> Result<()> {
    let mut c = load_config(&a.cfg)?;
    if let Some(b) = a.beam {
        c.eval.beam = b;
    }
    if let Some(p) = a.penalty {
        c.eval.length_penalty = p;
    }
    let ckpt_path = or(&a.checkpoint, data.join("runs/finetune/model.ukpt"));
    let model = Model::load(&ckpt_path)?;
    let corpus = Corpus::load(&or(&a.corpus, data.join("corpus/test")))?;
    let vocab = Vocabulary::load(&or(&a.vocab, data.join("vocab.txt")))?;
    c.model = model.cfg.clone();
    c.tokenizer.vocab_size = vocab.len();
    c.quantizer.k = model.cfg.k_units;
    let c = c.resolve()?;
    let examples: Vec<Example> = match model.cfg.frontend {
        Frontend::Continuous { .. } => feature_examples(&corpus, &vocab),
        Frontend::Discrete => {
            let (units, _) = load_unit_dir(&or(&a.units, data.join("units/test/visual")), &corpus)?;
            vsu::curriculum::single_stream_examples(&corpus, &units, &vocab)?
        }
    };
    let refs: Vec<String> = corpus.utterances.iter().map(|u| u.text.clone()).collect();
    let langs: Vec<String> = corpus.world.languages.iter().map(|l| l.tag.clone()).collect();
    let report = evaluate_wer(&model, &examples, &refs, &langs, &vocab, &c.eval)?;
    let (loss, token_accuracy) = evaluate_visual(&model, &examples, c.pretrain.batch_frames)?;
    let out = or(&a.out, data.join("reports/eval"));
    write_json(
        &out.join("report.json"),
        &EvalOutput {
            report: &report,
            loss,
            token_accuracy,
        },
    )?;
    let mut text = String::new();
    writeln!(text, "checkpoint {}", ckpt_path.display()).unwrap();
    writeln!(text, "frontend {}", model.cfg.frontend).unwrap();
    writeln!(text, "utterances {}", report.utterances).unwrap();
    writeln!(text, "beam {} length_penalty {}", report.beam, report.length_penalty).unwrap();
    writeln!(text, "wer {:.4}", report.wer).unwrap();
    writeln!(text, "loss {loss:.4} token_accuracy {token_accuracy:.4}").unwrap();
    for (lang, w) in &report.per_language {
        writeln!(text, "wer.{lang} {w:.4}").unwrap();
    }
    write_file(&out.join("report.txt"), text.as_bytes())?;
    if let Some(m) = &a.metrics {
        let mut csv = Vec::new();
        accuracy_csv(&read_metrics(m)?, &mut csv).expect("writes to memory");
        write_file(&out.join("accuracy.csv"), &csv)?;
    }
    c.write(&out.join("config.toml"))?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// [default: DATA_DIR/corpus/train]
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    representation: Representation,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    /// Unit directory when probing units [default: DATA_DIR/units/train/<modality>].
    #[arg(long)]
    units: Option<PathBuf>,
    /// Gaussian noise added to continuous inputs.
    #[arg(long)]
    noise: Option<f32>,
    /// [default: DATA_DIR/reports/probe-<representation>-<modality>.json]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ProbeOutput<'a> {
    representation: &'a str,
    modality: Modality,
    utterances: usize,
    eer: f64,
    train_accuracy: f64,
    trials: usize,
}

pub fn probe_speaker(data: &Path, a: &ProbeArgs) -> Result<()> {
    let mut c = load_config(&a.cfg)?;
    if let Some(n) = a.noise {
        c.probe.noise = n;
    }
    let c = c.resolve()?;
    let modality: Modality = a.modality.into();
    let corpus = Corpus::load(&or(&a.corpus, data.join("corpus/train")))?;
    let (inputs, repr): (Vec<ProbeInput>, &str) = match a.representation {
        Representation::Features => (
            corpus
                .utterances
                .iter()
                .map(|u| {
                    ProbeInput::Features(match modality {
                        Modality::Audio => u.audio.clone(),
                        Modality::Visual => u.visual.clone(),
                    })
                })
                .collect(),
            "features",
        ),
        Representation::Units => {
            let dir = or(&a.units, data.join(format!("units/train/{modality}")));
            let (units, _) = load_unit_dir(&dir, &corpus)?;
            (units.into_iter().map(|s| ProbeInput::Units(s.units)).collect(), "units")
        }
    };
    let speakers: Vec<usize> = corpus.utterances.iter().map(|u| u.speaker).collect();
    let r = speaker_probe(&inputs, &speakers, &c.probe)?;
    let out = or(&a.out, data.join(format!("reports/probe-{repr}-{modality}.json")));
    write_json(
        &out,
        &ProbeOutput {
            representation: repr,
            modality,
            utterances: inputs.len(),
            eer: r.eer,
            train_accuracy: r.train_accuracy,
            trials: r.trials,
        },
    )?;
    c.write(&PathBuf::from(format!("{}.config.toml", out.display())))?;
    println!("{repr} {modality}: EER {:.4} over {} trials", r.eer, r.trials);
    Ok(())
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Unit file directory.
    #[arg(long)]
    units: PathBuf,
    /// Corpus supplying frame labels [default: DATA_DIR/corpus/train].
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "phoneme")]
    labels: LabelKind,
    /// [default: DATA_DIR/reports/units]
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn analyze_units(data: &Path, a: &AnalyzeArgs) -> Result<()> {
    let corpus = Corpus::load(&or(&a.corpus, data.join("corpus/train")))?;
    let (streams, _) = load_unit_dir(&a.units, &corpus)?;
    let world = &corpus.world;
    let mut units = Vec::new();
    let mut labels = Vec::new();
    for (u, s) in corpus.utterances.iter().zip(&streams) {
        if s.len() != u.frames() {
            return Err(CliError::Data(format!("{}: units are not frame-synchronous with the corpus", u.id)));
        }
        units.extend_from_slice(&s.units);
        match a.labels {
            LabelKind::Phoneme => labels.extend_from_slice(&u.phonemes),
            LabelKind::Viseme => labels.extend(u.visemes(world)),
        }
    }
    let (vowels, names): (_, Vec<String>) = match a.labels {
        LabelKind::Phoneme => (world.vowels.clone(), world.phonemes.clone()),
        LabelKind::Viseme => (world.vowel_visemes(), (0..world.n_visemes()).map(|v| format!("V{v}")).collect()),
    };
    let r = purity(&units, &labels, &vowels)?;
    let out = or(&a.out, data.join("reports/units"));
    write_json(&out.join("purity.json"), &r)?;
    let mut csv = String::from("unit,count,label,label_name,vowel\n");
    for (unit, (label, count)) in r.unit_to_label.iter().zip(&r.unit_counts).enumerate() {
        match label {
            Some(l) => writeln!(csv, "{unit},{count},{l},{},{}", names[*l], vowels.contains(l)).unwrap(),
            None => writeln!(csv, "{unit},{count},,,").unwrap(),
        }
    }
    write_file(&out.join("unit_map.csv"), csv.as_bytes())?;
    println!(
        "purity {:.4}, vowel fraction {:.4} over {} frames",
        r.purity,
        r.vowel_fraction,
        units.len()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// [default: DATA_DIR/corpus/train]
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// [default: DATA_DIR/units/train/visual]
    #[arg(long)]
    units: Option<PathBuf>,
    /// [default: DATA_DIR/vocab.txt]
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// [default: DATA_DIR/reports/bench.json]
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bench(data: &Path, a: &BenchArgs) -> Result<()> {
    let mut c = load_config(&a.cfg)?;
    if let Some(s) = a.steps {
        c.bench.steps = s;
    }
    let corpus = Corpus::load(&or(&a.corpus, data.join("corpus/train")))?;
    let (units, k) = load_unit_dir(&or(&a.units, data.join("units/train/visual")), &corpus)?;
    let vocab = Vocabulary::load(&or(&a.vocab, data.join("vocab.txt")))?;
    c.quantizer.k = k as usize;
    c.model.k_units = k as usize;
    c.tokenizer.vocab_size = vocab.len();
    c.model.vocab_size = vocab.len();
    let c = c.resolve()?;
    let b = &c.bench;
    if b.steps == 0 || b.batch_frames == 0 || b.frame_h == 0 || b.frame_w == 0 {
        return Err(CliError::Config("bench settings must be positive".into()));
    }
    let needed = b.steps * b.batch_frames;
    let mut items = Vec::new();
    let mut frames = 0;
    for (i, (u, s)) in corpus.utterances.iter().zip(&units).enumerate() {
        if frames >= needed {
            break;
        }
        items.push(BenchItem {
            units: pack(&s.units, k)?,
            raw: render_frames(&u.visual, b.frame_h, b.frame_w, vsu::seed::derive(c.seed, "render", i as u64)),
            pixels: b.frame_h * b.frame_w,
            language: u.language,
            tokens: vocab.encode(&u.text),
        });
        frames += s.len();
    }
    let report = throughput_bench(&items, &c.model, b.steps, b.batch_frames)?;
    let out = or(&a.out, data.join("reports/bench.json"));
    write_json(&out, &report)?;
    c.write(&PathBuf::from(format!("{}.config.toml", out.display())))?;
    println!(
        "units {:.0} frames/s, raw frames {:.0} frames/s (x{:.2}); {:.3} vs {:.0} bytes/frame",
        report.unit_frames_per_sec,
        report.feature_frames_per_sec,
        report.speedup,
        report.unit_bytes_per_frame,
        report.raw_bytes_per_frame
    );
    Ok(())
}
