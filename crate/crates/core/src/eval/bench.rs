use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curriculum::{train_step, Example, Source, StepParams};
use crate::error::{Error, Result};
use crate::model::{Frontend, Model, ModelConfig};
use crate::numerics::{OptimState, Tensor};
use crate::seed;
use crate::units::{unpack, PackedUnits};

/// One utterance in both input encodings.
#[derive(Debug, Clone)]
pub struct BenchItem {
    pub units: PackedUnits,
    /// `frames × pixels` 8-bit frames, row-major.
    pub raw: Vec<u8>,
    pub pixels: usize,
    pub language: usize,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub steps: usize,
    pub frames: usize,
    pub unit_bits: u32,
    pub unit_bytes_per_frame: f64,
    pub raw_bytes_per_frame: f64,
    pub byte_ratio: f64,
    pub unit_frames_per_sec: f64,
    pub feature_frames_per_sec: f64,
    pub speedup: f64,
}

impl BenchReport {
    /// The report with timing fields zeroed.
    pub fn without_timings(&self) -> BenchReport {
        BenchReport {
            unit_frames_per_sec: 0.0,
            feature_frames_per_sec: 0.0,
            speedup: 0.0,
            ..self.clone()
        }
    }
}

fn batches(items: &[BenchItem], batch_frames: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut next = 0;
    for _ in 0..steps {
        let mut b = Vec::new();
        let mut frames = 0;
        loop {
            let n = items[next].units.count;
            if !b.is_empty() && frames + n > batch_frames {
                break;
            }
            b.push(next);
            frames += n;
            next = (next + 1) % items.len();
            if b.len() == items.len() {
                break;
            }
        }
        out.push(b);
    }
    out
}

fn time_pipeline(
    model: &mut Model,
    plan: &[Vec<usize>],
    build: impl Fn(&BenchItem) -> Result<Example>,
    items: &[BenchItem],
) -> Result<f64> {
    let mut state = OptimState::new(&model.params);
    let start = Instant::now();
    for (step, batch) in plan.iter().enumerate() {
        let examples = batch.iter().map(|&i| build(&items[i])).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Example> = examples.iter().collect();
        let sp = StepParams {
            p: 100.0,
            lr: 1e-4,
            clip_norm: 1.0,
            dropout_seed: step as u64,
        };
        train_step(model, &mut state, &refs, sp, &mut seed::rng(0, "bench", step as u64), |_| true)?;
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Trains the same transformer body for `steps` steps on packed visual
/// units and on raw frames, including input decoding, and reports frame
/// throughput and input bytes per frame.
pub fn throughput_bench(
    items: &[BenchItem],
    model_cfg: &ModelConfig,
    steps: usize,
    batch_frames: usize,
) -> Result<BenchReport> {
    let first = items.first().ok_or_else(|| Error::input("bench needs at least one utterance"))?;
    if steps == 0 || batch_frames == 0 {
        return Err(Error::config("bench needs positive steps and batch_frames"));
    }
    let pixels = first.pixels;
    for it in items {
        if it.raw.len() != it.units.count * pixels || it.pixels != pixels {
            return Err(Error::input("raw frames and unit counts disagree"));
        }
    }
    let plan = batches(items, batch_frames, steps);
    let frames: usize = plan.iter().flatten().map(|&i| items[i].units.count).sum();

    let unit_cfg = ModelConfig {
        frontend: Frontend::Discrete,
        ..model_cfg.clone()
    };
    let feat_cfg = ModelConfig {
        frontend: Frontend::Continuous { feature_dim: pixels },
        ..model_cfg.clone()
    };
    let mut unit_model = Model::new(unit_cfg)?;
    let mut feat_model = Model::new(feat_cfg)?;

    let unit_secs = time_pipeline(
        &mut unit_model,
        &plan,
        |it| {
            Ok(Example {
                audio: None,
                visual: Source::Units(unpack(&it.units)?),
                language: it.language,
                tokens: it.tokens.clone(),
                speaker: 0,
            })
        },
        items,
    )?;
    let feat_secs = time_pipeline(
        &mut feat_model,
        &plan,
        |it| {
            let data = it.raw.iter().map(|&b| f32::from(b) / 255.0).collect();
            Ok(Example {
                audio: None,
                visual: Source::Features(Tensor::new([it.units.count, pixels], data)),
                language: it.language,
                tokens: it.tokens.clone(),
                speaker: 0,
            })
        },
        items,
    )?;

    let bits = first.units.bits_per_unit;
    let unit_bytes = f64::from(bits) / 8.0;
    let raw_bytes = pixels as f64;
    let unit_fps = frames as f64 / unit_secs;
    let feat_fps = frames as f64 / feat_secs;
    Ok(BenchReport {
        steps,
        frames,
        unit_bits: bits,
        unit_bytes_per_frame: unit_bytes,
        raw_bytes_per_frame: raw_bytes,
        byte_ratio: unit_bytes / raw_bytes,
        unit_frames_per_sec: unit_fps,
        feature_frames_per_sec: feat_fps,
        speedup: unit_fps / feat_fps,
    })
}
