//! Browser demo: schedule curves, unit compression and homophene purity,
//! each returned to JavaScript as a JSON string.

use serde::Serialize;
use vsu::curriculum::{CurriculumSchedule, Strategy, TrainRunConfig};
use vsu::numerics::TriStageLR;
use vsu::quantizer::{assign, purity, train_kmeans};
use vsu::synth::{generate_corpus, WorldSpec};
use vsu::units::{bits_for, compression_stats, CompressionReport, Modality};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub progress: Vec<f64>,
    pub curriculum: Vec<f64>,
    pub transfer: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Mask ratio of the curriculum and two-stage strategies plus the tri-stage
/// learning rate, sampled at `points` evenly spaced progress values.
pub fn schedule_curves(start_frac: f64, end_frac: f64, transfer_split: f64, peak_lr: f64, points: usize) -> vsu::Result<Curves> {
    if points < 2 {
        return Err(vsu::Error::InvalidInput("need at least two points".into()));
    }
    let cur = TrainRunConfig {
        strategy: Strategy::Curriculum,
        schedule: CurriculumSchedule { start_frac, end_frac },
        lr: TriStageLR {
            peak_lr,
            ..TriStageLR::default()
        },
        transfer_split,
        ..TrainRunConfig::default()
    };
    cur.validate()?;
    let two = TrainRunConfig {
        strategy: Strategy::TransferTwoStage,
        ..cur.clone()
    };
    let progress: Vec<f64> = (0..points).map(|i| i as f64 / (points - 1) as f64).collect();
    let lr = progress.iter().map(|&t| cur.lr.lr(t)).collect::<vsu::Result<_>>()?;
    Ok(Curves {
        curriculum: progress.iter().map(|&t| cur.mask_ratio(t)).collect(),
        transfer: progress.iter().map(|&t| two.mask_ratio(t)).collect(),
        lr,
        progress,
    })
}

/// Bits of one raw frame against one unit from a `k`-entry codebook.
pub fn compression(frame_h: u32, frame_w: u32, bit_depth: u32, k: u32) -> vsu::Result<CompressionReport> {
    if k < 2 {
        return Err(vsu::Error::InvalidInput("codebook needs at least two entries".into()));
    }
    compression_stats(frame_h, frame_w, bit_depth, bits_for(k))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityPurity {
    pub phoneme_purity: f64,
    pub viseme_purity: f64,
    pub vowel_fraction: f64,
    pub units_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HomopheneReport {
    pub k: usize,
    pub frames: usize,
    pub n_phonemes: usize,
    pub n_visemes: usize,
    pub audio: ModalityPurity,
    pub visual: ModalityPurity,
}

/// Clusters both modalities of a small synthetic corpus into `k` units and
/// scores how well the units separate phonemes and visemes. Audio noise is
/// capped at the visual level.
pub fn homophenes(k: usize, utterances: usize, visual_noise: f32, seed: u64) -> vsu::Result<HomopheneReport> {
    let mut world = WorldSpec::default_world(seed);
    world.visual_noise = visual_noise;
    world.audio_noise = world.audio_noise.min(visual_noise);
    let corpus = generate_corpus(&world, utterances)?;
    let phonemes = corpus.stacked_phonemes();
    let visemes: Vec<usize> = phonemes.iter().map(|&p| world.phoneme_to_viseme[p]).collect();
    let score = |m: Modality| -> vsu::Result<ModalityPurity> {
        let feats = corpus.stacked(m);
        let cb = train_kmeans(&feats, k, 20, vsu::seed::derive(seed, "demo-kmeans", u64::from(m.code())))?;
        let units = assign(&cb, &feats, world.fps, m)?.units;
        let p = purity(&units, &phonemes, &world.vowels)?;
        let v = purity(&units, &visemes, &world.vowel_visemes())?;
        Ok(ModalityPurity {
            phoneme_purity: p.purity,
            viseme_purity: v.purity,
            vowel_fraction: p.vowel_fraction,
            units_used: p.unit_counts.iter().filter(|&&c| c > 0).count(),
        })
    };
    Ok(HomopheneReport {
        k,
        frames: phonemes.len(),
        n_phonemes: world.n_phonemes(),
        n_visemes: world.n_visemes(),
        audio: score(Modality::Audio)?,
        visual: score(Modality::Visual)?,
    })
}

fn js<T: Serialize>(r: vsu::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = scheduleCurves)]
pub fn schedule_curves_js(start_frac: f64, end_frac: f64, transfer_split: f64, peak_lr: f64, points: usize) -> Result<String, JsError> {
    js(schedule_curves(start_frac, end_frac, transfer_split, peak_lr, points))
}

#[wasm_bindgen(js_name = compression)]
pub fn compression_js(frame_h: u32, frame_w: u32, bit_depth: u32, k: u32) -> Result<String, JsError> {
    js(compression(frame_h, frame_w, bit_depth, k))
}

#[wasm_bindgen(js_name = homophenes)]
pub fn homophenes_js(k: usize, utterances: usize, visual_noise: f32, seed: u32) -> Result<String, JsError> {
    js(homophenes(k, utterances, visual_noise, u64::from(seed)))
}
