//! Training orchestration: masking schedules, unit pretraining, continuous
//! finetuning, and the two-stage transfer baseline.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_frontend_param, mask_positions, EncoderInput, Frontend, Model, ModelConfig, Net, Stream};
use crate::numerics::{adam_step, clip_grad_norm, OptimState, Tensor, TriStageLR};
use crate::seed;
use crate::synth::Corpus;
use crate::tokenizer::{Vocabulary, PAD};
use crate::units::{resample, Modality, UnitStream};

/// Audio masking ratio `p(t)`: 0 up to `start_frac`, linear to 100 at
/// `end_frac`, then 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSchedule {
    pub start_frac: f64,
    pub end_frac: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            start_frac: 0.10,
            end_frac: 0.70,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        let (s, e) = (self.start_frac, self.end_frac);
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&e) || s > e {
            return Err(Error::config(format!(
                "curriculum needs 0 <= start_frac <= end_frac <= 1, got {s} and {e}"
            )));
        }
        Ok(())
    }

    pub fn mask_ratio_at(&self, progress: f64) -> f64 {
        let t = progress.clamp(0.0, 1.0);
        if t >= self.end_frac {
            100.0
        } else if t <= self.start_frac {
            0.0
        } else {
            100.0 * (t - self.start_frac) / (self.end_frac - self.start_frac)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Curriculum,
    ScratchVisual,
    TransferTwoStage,
    NoMaskAv,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curriculum" => Ok(Strategy::Curriculum),
            "scratch_visual" => Ok(Strategy::ScratchVisual),
            "transfer_two_stage" => Ok(Strategy::TransferTwoStage),
            "no_mask_av" => Ok(Strategy::NoMaskAv),
            _ => Err(Error::config(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub epochs: usize,
    /// Maximum total input frames per batch.
    pub batch_frames: usize,
    pub lr: TriStageLR,
    pub clip_norm: f32,
    pub seed: u64,
    pub strategy: Strategy,
    pub schedule: CurriculumSchedule,
    /// Progress fraction where the transfer baseline switches to visual-only.
    pub transfer_split: f64,
    /// Finetuning steps during which only the new frontend trains.
    pub frozen_steps: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            epochs: 20,
            batch_frames: 1024,
            lr: TriStageLR {
                peak_lr: 2e-3,
                ..TriStageLR::default()
            },
            clip_norm: 1.0,
            seed: 0,
            strategy: Strategy::Curriculum,
            schedule: CurriculumSchedule::default(),
            transfer_split: 0.5,
            frozen_steps: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_frames == 0 {
            return Err(Error::config("train.batch_frames must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.transfer_split) {
            return Err(Error::config("train.transfer_split must be in [0, 1]"));
        }
        if !(self.lr.peak_lr >= 0.0) {
            return Err(Error::config("train.lr.peak_lr must be >= 0"));
        }
        self.lr.validate()?;
        self.schedule.validate()
    }

    pub fn mask_ratio(&self, progress: f64) -> f64 {
        match self.strategy {
            Strategy::Curriculum => self.schedule.mask_ratio_at(progress),
            Strategy::ScratchVisual => 100.0,
            Strategy::NoMaskAv => 0.0,
            Strategy::TransferTwoStage => {
                if progress < self.transfer_split {
                    0.0
                } else {
                    100.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Units(Vec<u32>),
    Features(Tensor),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Units(u) => u.len(),
            Source::Features(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stream(&self) -> Stream<'_> {
        match self {
            Source::Units(u) => Stream::Units(u),
            Source::Features(t) => Stream::Features(t),
        }
    }
}

/// One training pair. `tokens` is the full `BOS … EOS` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub audio: Option<Source>,
    pub visual: Source,
    pub language: usize,
    pub tokens: Vec<u32>,
    pub speaker: usize,
}

impl Example {
    pub fn frames(&self) -> usize {
        self.visual.len()
    }

    fn input(&self, masked: Vec<usize>) -> EncoderInput<'_> {
        EncoderInput {
            audio: self.audio.as_ref().map(Source::stream),
            visual: self.visual.stream(),
            language: self.language,
            masked,
        }
    }

    /// Input with the audio stream fully masked.
    pub fn visual_input(&self) -> EncoderInput<'_> {
        EncoderInput::visual_only(self.visual.stream(), self.language)
    }
}

fn aligned(audio: &UnitStream, visual: &UnitStream) -> Result<Vec<u32>> {
    let a = if audio.fps == visual.fps {
        audio.units.clone()
    } else {
        resample(audio, visual.fps)?.units
    };
    if a.len() != visual.units.len() {
        return Err(Error::input(format!(
            "audio stream has {} frames at {} fps, visual has {}",
            a.len(),
            visual.fps,
            visual.units.len()
        )));
    }
    Ok(a)
}

/// Paired audio/visual unit examples. Streams at different rates are
/// resampled to the visual rate.
pub fn unit_examples(
    corpus: &Corpus,
    audio: &[UnitStream],
    visual: &[UnitStream],
    vocab: &Vocabulary,
) -> Result<Vec<Example>> {
    if audio.len() != corpus.utterances.len() || visual.len() != corpus.utterances.len() {
        return Err(Error::input(format!(
            "{} utterances but {} audio and {} visual unit streams",
            corpus.utterances.len(),
            audio.len(),
            visual.len()
        )));
    }
    corpus
        .utterances
        .iter()
        .zip(audio.iter().zip(visual))
        .map(|(u, (a, v))| {
            Ok(Example {
                audio: Some(Source::Units(aligned(a, v)?)),
                visual: Source::Units(v.units.clone()),
                language: u.language,
                tokens: vocab.encode(&u.text),
                speaker: u.speaker,
            })
        })
        .collect()
}

/// Single-stream unit examples: `units` go into the visual slot and the
/// audio slot stays fully masked.
pub fn single_stream_examples(corpus: &Corpus, units: &[UnitStream], vocab: &Vocabulary) -> Result<Vec<Example>> {
    if units.len() != corpus.utterances.len() {
        return Err(Error::input("one unit stream per utterance is required"));
    }
    Ok(corpus
        .utterances
        .iter()
        .zip(units)
        .map(|(u, s)| Example {
            audio: None,
            visual: Source::Units(s.units.clone()),
            language: u.language,
            tokens: vocab.encode(&u.text),
            speaker: u.speaker,
        })
        .collect())
}

/// Continuous visual-feature examples for finetuning and evaluation.
pub fn feature_examples(corpus: &Corpus, vocab: &Vocabulary) -> Vec<Example> {
    corpus
        .utterances
        .iter()
        .map(|u| Example {
            audio: None,
            visual: Source::Features(u.visual.clone()),
            language: u.language,
            tokens: vocab.encode(&u.text),
            speaker: u.speaker,
        })
        .collect()
}

/// Length-bucketed batches holding at most `batch_frames` input frames
/// (a longer example gets a batch of its own). Batch order is shuffled.
pub fn plan_batches(lengths: &[usize], batch_frames: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<(usize, u32, usize)> = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| (l, rng.random::<u32>(), i))
        .collect();
    order.sort_unstable();
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut frames = 0;
    for (l, _, i) in order {
        if !current.is_empty() && frames + l > batch_frames {
            batches.push(std::mem::take(&mut current));
            frames = 0;
        }
        current.push(i);
        frames += l;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    for i in (1..batches.len()).rev() {
        let j = rng.random_range(0..=i);
        batches.swap(i, j);
    }
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub p: f64,
    pub lr: f64,
    pub token_accuracy: f64,
}

pub fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m).expect("metrics serialize");
        out.push(b'\n');
    }
    crate::io::write_file(path, &out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Plot-ready `step,token_accuracy` series.
pub fn accuracy_csv(metrics: &[StepMetrics], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,epoch,p,loss,token_accuracy")?;
    for m in metrics {
        writeln!(out, "{},{},{},{:.6},{:.6}", m.step, m.epoch, m.p, m.loss, m.token_accuracy)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
}

fn targets_of<'e>(batch: &[&'e Example]) -> (Vec<&'e [u32]>, Vec<Option<usize>>) {
    let mut prefixes = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for ex in batch {
        let n = ex.tokens.len();
        prefixes.push(&ex.tokens[..n - 1]);
        targets.extend(
            ex.tokens[1..]
                .iter()
                .map(|&t| if t == PAD { None } else { Some(t as usize) }),
        );
    }
    (prefixes, targets)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_examples(examples: &[Example], model: &Model) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::input("empty training corpus"));
    }
    for (i, ex) in examples.iter().enumerate() {
        if ex.tokens.len() < 2 {
            return Err(Error::input(format!("example {i} has no target tokens")));
        }
        if let Some(a) = &ex.audio {
            if a.len() != ex.visual.len() {
                return Err(Error::input(format!(
                    "example {i}: audio has {} frames, visual has {}",
                    a.len(),
                    ex.visual.len()
                )));
            }
        }
        if ex.frames() > model.cfg.max_len || ex.tokens.len() > model.cfg.max_len + 1 {
            return Err(Error::input(format!("example {i} exceeds max_len {}", model.cfg.max_len)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct StepParams {
    /// Audio masking ratio in percent.
    pub p: f64,
    pub lr: f64,
    pub clip_norm: f32,
    pub dropout_seed: u64,
}

/// One optimizer step on a batch; returns (loss, teacher-forced accuracy).
pub fn train_step(
    model: &mut Model,
    state: &mut OptimState,
    batch: &[&Example],
    sp: StepParams,
    mask_rng: &mut impl Rng,
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, f64)> {
    let inputs: Vec<EncoderInput<'_>> = batch
        .iter()
        .map(|ex| ex.input(mask_positions(ex.frames(), sp.p, mask_rng)))
        .collect();
    let (prefixes, targets) = targets_of(batch);
    let (loss, acc, mut grads) = {
        let mut net = Net::training(model, trainable, sp.dropout_seed);
        let (mem, segs) = net.encode(&inputs)?;
        let logits = net.decode(mem, &segs, &prefixes)?;
        let loss = net
            .g
            .cross_entropy(logits, &targets, model.cfg.label_smoothing, model.cfg.reduction);
        let lv = net.g.value(logits);
        let (mut hit, mut n) = (0usize, 0usize);
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                n += 1;
                hit += usize::from(argmax(lv.row(r)) == *t);
            }
        }
        let value = net.g.value(loss).item();
        let grads = net.g.backward(loss)?.into_params(model.params.len());
        (value, hit as f64 / n.max(1) as f64, grads)
    };
    clip_grad_norm(&mut grads, sp.clip_norm);
    adam_step(&mut model.params, &grads, state, sp.lr as f32)?;
    Ok((f64::from(loss), acc))
}

struct Stage<'c> {
    cfg: &'c TrainRunConfig,
    /// Label mixed into derived seeds, so stages draw independent streams.
    label: &'static str,
    mask: &'c dyn Fn(f64) -> f64,
    trainable: &'c dyn Fn(usize, &str) -> bool,
}

fn run(mut model: Model, examples: &[Example], stage: Stage<'_>) -> Result<TrainOutcome> {
    let cfg = stage.cfg;
    cfg.validate()?;
    check_examples(examples, &model)?;
    let lengths: Vec<usize> = examples.iter().map(Example::frames).collect();
    let plans: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| plan_batches(&lengths, cfg.batch_frames, &mut seed::rng(cfg.seed, stage.label, e as u64)))
        .collect();
    let total: usize = plans.iter().map(Vec::len).sum();
    let mut state = OptimState::new(&model.params);
    let mut metrics = Vec::with_capacity(total);
    let mut step = 0;
    for (epoch, plan) in plans.iter().enumerate() {
        for batch in plan {
            let progress = step as f64 / total as f64;
            let p = (stage.mask)(progress);
            let lr = cfg.lr.lr(progress)?;
            let mut mask_rng = seed::rng(cfg.seed, &format!("{}.mask", stage.label), step as u64);
            let exs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let dropout_seed = seed::derive(cfg.seed, &format!("{}.dropout", stage.label), step as u64);
            let (loss, acc) = train_step(
                &mut model,
                &mut state,
                &exs,
                StepParams {
                    p,
                    lr,
                    clip_norm: cfg.clip_norm,
                    dropout_seed,
                },
                &mut mask_rng,
                |name| (stage.trainable)(step, name),
            )?;
            metrics.push(StepMetrics {
                step,
                epoch,
                loss,
                p,
                lr,
                token_accuracy: acc,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome { model, metrics })
}

/// Unit-to-text pretraining from a fresh model under the configured
/// strategy's masking policy.
pub fn pretrain(examples: &[Example], cfg: &TrainRunConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    if model_cfg.frontend != Frontend::Discrete {
        return Err(Error::config("pretraining needs a discrete frontend"));
    }
    let model = Model::new(model_cfg.clone())?;
    let mask = |t: f64| cfg.mask_ratio(t);
    run(
        model,
        examples,
        Stage {
            cfg,
            label: "pretrain",
            mask: &mask,
            trainable: &|_, _| true,
        },
    )
}

/// Two-stage baseline: full audio-visual input, then visual-only from
/// `cfg.transfer_split` on.
pub fn transfer_pretrain(examples: &[Example], cfg: &TrainRunConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    let cfg = TrainRunConfig {
        strategy: Strategy::TransferTwoStage,
        ..cfg.clone()
    };
    pretrain(examples, &cfg, model_cfg)
}

/// Swaps in a continuous frontend and trains on visual features. For the
/// first `frozen_steps` only the new frontend receives updates.
pub fn finetune(ckpt: &Model, examples: &[Example], cfg: &TrainRunConfig) -> Result<TrainOutcome> {
    if ckpt.cfg.frontend != Frontend::Discrete {
        return Err(Error::config("finetuning starts from a discrete-frontend checkpoint"));
    }
    let dim = match examples.first().map(|e| &e.visual) {
        Some(Source::Features(t)) => t.cols(),
        Some(Source::Units(_)) => return Err(Error::config("finetuning needs continuous features")),
        None => return Err(Error::input("empty training corpus")),
    };
    let model = ckpt.swap_frontend(dim)?;
    let frozen = cfg.frozen_steps;
    let trainable = move |step: usize, name: &str| step >= frozen || is_frontend_param(name);
    run(
        model,
        examples,
        Stage {
            cfg,
            label: "finetune",
            mask: &|_| 100.0,
            trainable: &trainable,
        },
    )
}

/// Teacher-forced mean token loss and accuracy with the audio stream fully
/// masked.
pub fn evaluate_visual(model: &Model, examples: &[Example], batch_frames: usize) -> Result<(f64, f64)> {
    let lengths: Vec<usize> = examples.iter().map(Example::frames).collect();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut frames = 0;
    for i in order {
        if batches.is_empty() || frames + lengths[i] > batch_frames {
            batches.push(Vec::new());
            frames = 0;
        }
        batches.last_mut().unwrap().push(i);
        frames += lengths[i];
    }
    let parts: Vec<(f64, usize, usize)> = batches
        .par_iter()
        .map(|batch| {
            let exs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let inputs: Vec<EncoderInput<'_>> = exs.iter().map(|e| e.visual_input()).collect();
            let (prefixes, targets) = targets_of(&exs);
            let mut net = Net::inference(model);
            let (mem, segs) = net.encode(&inputs)?;
            let logits = net.decode(mem, &segs, &prefixes)?;
            let loss = net
                .g
                .cross_entropy(logits, &targets, 0.0, crate::numerics::Reduction::Sum);
            let lv = net.g.value(logits);
            let mut hit = 0;
            let mut n = 0;
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = t {
                    n += 1;
                    hit += usize::from(argmax(lv.row(r)) == *t);
                }
            }
            Ok((f64::from(net.g.value(loss).item()), hit, n))
        })
        .collect::<Result<_>>()?;
    let (loss, hit, n) = parts
        .iter()
        .fold((0.0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    if n == 0 {
        return Err(Error::input("no target tokens to evaluate"));
    }
    Ok((loss / n as f64, hit as f64 / n as f64))
}

/// Unit stream for one modality of every utterance via a codebook.
pub fn encode_corpus(
    corpus: &Corpus,
    codebook: &crate::quantizer::Codebook,
    modality: Modality,
) -> Result<Vec<UnitStream>> {
    corpus
        .utterances
        .iter()
        .map(|u| {
            let feats = match modality {
                Modality::Audio => &u.audio,
                Modality::Visual => &u.visual,
            };
            let mut s = crate::quantizer::assign(codebook, feats, corpus.world.fps, modality)?;
            s.language = corpus.world.languages[u.language].tag.clone();
            s.speaker = u.speaker.to_string();
            Ok(s)
        })
        .collect()
}
