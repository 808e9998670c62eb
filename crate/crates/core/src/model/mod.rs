//! Unit-to-text encoder-decoder with masked audio-visual fusion, plus the
//! continuous-feature front end used for finetuning.

mod net;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{get_tensor, put_tensor, read_file, write_file, Reader, Writer};
use crate::numerics::{ParamStore, Reduction, Tensor};
use crate::seed;
use crate::units::Modality;

pub use net::{EncoderInput, Net, Stream};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Frontend {
    Discrete,
    Continuous { feature_dim: usize },
}

impl fmt::Display for Frontend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Frontend::Discrete => f.write_str("discrete"),
            Frontend::Continuous { feature_dim } => write!(f, "continuous:{feature_dim}"),
        }
    }
}

impl std::str::FromStr for Frontend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "discrete" {
            return Ok(Frontend::Discrete);
        }
        if let Some(d) = s.strip_prefix("continuous:") {
            let feature_dim = d
                .parse()
                .map_err(|_| Error::config(format!("bad feature dim in frontend {s:?}")))?;
            return Ok(Frontend::Continuous { feature_dim });
        }
        Err(Error::config(format!("unknown frontend {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVectorMode {
    Learned,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k_units: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_languages: usize,
    pub max_len: usize,
    pub frontend: Frontend,
    pub dropout: f32,
    pub mask_vector: MaskVectorMode,
    pub label_smoothing: f32,
    pub reduction: Reduction,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k_units: 64,
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 256,
            n_languages: 5,
            max_len: 256,
            frontend: Frontend::Discrete,
            dropout: 0.0,
            mask_vector: MaskVectorMode::Learned,
            label_smoothing: 0.0,
            reduction: Reduction::Mean,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The full-size reference configuration (1024-d, 16 heads, 6+6 layers).
    pub fn reference() -> Self {
        ModelConfig {
            k_units: 1000,
            d_model: 1024,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 16,
            d_ff: 4096,
            vocab_size: 1000,
            max_len: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_units", self.k_units),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("n_languages", self.n_languages),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model.d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("model.label_smoothing must be in [0, 1)"));
        }
        if let Frontend::Continuous { feature_dim: 0 } = self.frontend {
            return Err(Error::config("continuous frontend needs feature_dim > 0"));
        }
        Ok(())
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn to_kv(&self) -> String {
        let reduction = match self.reduction {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        };
        let mask = match self.mask_vector {
            MaskVectorMode::Learned => "learned",
            MaskVectorMode::Zeros => "zeros",
        };
        let mut kv = BTreeMap::new();
        kv.insert("d_ff", self.d_ff.to_string());
        kv.insert("d_model", self.d_model.to_string());
        kv.insert("dropout", self.dropout.to_string());
        kv.insert("frontend", self.frontend.to_string());
        kv.insert("init_seed", self.init_seed.to_string());
        kv.insert("k_units", self.k_units.to_string());
        kv.insert("label_smoothing", self.label_smoothing.to_string());
        kv.insert("mask_vector", mask.to_string());
        kv.insert("max_len", self.max_len.to_string());
        kv.insert("n_dec_layers", self.n_dec_layers.to_string());
        kv.insert("n_enc_layers", self.n_enc_layers.to_string());
        kv.insert("n_heads", self.n_heads.to_string());
        kv.insert("n_languages", self.n_languages.to_string());
        kv.insert("reduction", reduction.to_string());
        kv.insert("vocab_size", self.vocab_size.to_string());
        kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line without '=': {line:?}")))?;
            if kv.insert(k.trim(), v.trim()).is_some() {
                return Err(Error::config(format!("duplicate config key {k}")));
            }
        }
        fn take<T: std::str::FromStr>(kv: &mut BTreeMap<&str, &str>, key: &str) -> Result<T> {
            let v = kv
                .remove(key)
                .ok_or_else(|| Error::config(format!("missing config key {key}")))?;
            v.parse()
                .map_err(|_| Error::config(format!("bad value {v:?} for {key}")))
        }
        let reduction = match take::<String>(&mut kv, "reduction")?.as_str() {
            "sum" => Reduction::Sum,
            "mean" => Reduction::Mean,
            other => return Err(Error::config(format!("unknown reduction {other:?}"))),
        };
        let mask_vector = match take::<String>(&mut kv, "mask_vector")?.as_str() {
            "learned" => MaskVectorMode::Learned,
            "zeros" => MaskVectorMode::Zeros,
            other => return Err(Error::config(format!("unknown mask_vector {other:?}"))),
        };
        let cfg = ModelConfig {
            k_units: take(&mut kv, "k_units")?,
            d_model: take(&mut kv, "d_model")?,
            n_enc_layers: take(&mut kv, "n_enc_layers")?,
            n_dec_layers: take(&mut kv, "n_dec_layers")?,
            n_heads: take(&mut kv, "n_heads")?,
            d_ff: take(&mut kv, "d_ff")?,
            vocab_size: take(&mut kv, "vocab_size")?,
            n_languages: take(&mut kv, "n_languages")?,
            max_len: take(&mut kv, "max_len")?,
            frontend: take::<String>(&mut kv, "frontend")?.parse()?,
            dropout: take(&mut kv, "dropout")?,
            mask_vector,
            label_smoothing: take(&mut kv, "label_smoothing")?,
            reduction,
            init_seed: take(&mut kv, "init_seed")?,
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::config(format!("unknown config key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exactly `floor(t·p/100)` distinct frame indices, sorted.
pub fn mask_positions(t: usize, p: f64, rng: &mut impl Rng) -> Vec<usize> {
    let p = p.clamp(0.0, 100.0);
    let n = ((t as f64 * p / 100.0) + 1e-9).floor() as usize;
    let n = n.min(t);
    if n == t {
        return (0..t).collect();
    }
    let mut rows = sample(rng, t, n).into_vec();
    rows.sort_unstable();
    rows
}

pub fn is_frontend_param(name: &str) -> bool {
    name.starts_with("frontend.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

fn init_param(store: &mut ParamStore, seed: u64, name: &str, shape: [usize; 2], init: Init) {
    let t = match init {
        Init::Normal(std) => Tensor::randn(shape, std, &mut seed::rng(seed, name, 0)),
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
    };
    store.insert(name, t);
}

fn linear(store: &mut ParamStore, seed: u64, name: &str, fan_in: usize, fan_out: usize) {
    let std = 1.0 / (fan_in as f32).sqrt();
    init_param(store, seed, &format!("{name}.w"), [fan_in, fan_out], Init::Normal(std));
    init_param(store, seed, &format!("{name}.b"), [1, fan_out], Init::Zeros);
}

fn norm(store: &mut ParamStore, seed: u64, name: &str, d: usize) {
    init_param(store, seed, &format!("{name}.g"), [1, d], Init::Ones);
    init_param(store, seed, &format!("{name}.b"), [1, d], Init::Zeros);
}

fn attention_block(store: &mut ParamStore, seed: u64, name: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(store, seed, &format!("{name}.{p}"), d, d);
    }
}

fn continuous_frontend(store: &mut ParamStore, seed: u64, feature_dim: usize, d: usize) {
    linear(store, seed, "frontend.audio_proj", feature_dim, d);
    linear(store, seed, "frontend.visual_proj", feature_dim, d);
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let s = cfg.init_seed;
        let mut p = ParamStore::new();
        match cfg.frontend {
            Frontend::Discrete => {
                init_param(&mut p, s, "frontend.audio_embed", [cfg.k_units, d], Init::Normal(1.0));
                init_param(&mut p, s, "frontend.visual_embed", [cfg.k_units, d], Init::Normal(1.0));
                linear(&mut p, s, "frontend.fuse", 2 * d, d);
            }
            Frontend::Continuous { feature_dim } => continuous_frontend(&mut p, s, feature_dim, d),
        }
        match cfg.mask_vector {
            MaskVectorMode::Learned => init_param(&mut p, s, "mask_vector", [1, d], Init::Normal(1.0)),
            MaskVectorMode::Zeros => init_param(&mut p, s, "mask_vector", [1, d], Init::Zeros),
        }
        init_param(&mut p, s, "lang_embed", [cfg.n_languages, d], Init::Normal(1.0));
        for l in 0..cfg.n_enc_layers {
            let n = format!("enc.{l}");
            norm(&mut p, s, &format!("{n}.ln1"), d);
            attention_block(&mut p, s, &format!("{n}.attn"), d);
            norm(&mut p, s, &format!("{n}.ln2"), d);
            linear(&mut p, s, &format!("{n}.ff1"), d, cfg.d_ff);
            linear(&mut p, s, &format!("{n}.ff2"), cfg.d_ff, d);
        }
        norm(&mut p, s, "enc.ln_f", d);
        init_param(&mut p, s, "tok_embed", [cfg.vocab_size, d], Init::Normal(1.0));
        for l in 0..cfg.n_dec_layers {
            let n = format!("dec.{l}");
            norm(&mut p, s, &format!("{n}.ln1"), d);
            attention_block(&mut p, s, &format!("{n}.self_attn"), d);
            norm(&mut p, s, &format!("{n}.ln2"), d);
            attention_block(&mut p, s, &format!("{n}.cross_attn"), d);
            norm(&mut p, s, &format!("{n}.ln3"), d);
            linear(&mut p, s, &format!("{n}.ff1"), d, cfg.d_ff);
            linear(&mut p, s, &format!("{n}.ff2"), cfg.d_ff, d);
        }
        norm(&mut p, s, "dec.ln_f", d);
        linear(&mut p, s, "out", d, cfg.vocab_size);
        Ok(Model { cfg, params: p })
    }

    /// Drops the unit embeddings and fusion layer and attaches fresh
    /// per-modality feature projections. All other parameters carry over.
    pub fn swap_frontend(&self, feature_dim: usize) -> Result<Model> {
        if self.cfg.frontend != Frontend::Discrete {
            return Err(Error::config("model already has a continuous frontend"));
        }
        let mut cfg = self.cfg.clone();
        cfg.frontend = Frontend::Continuous { feature_dim };
        cfg.validate()?;
        let mut params = self.params.clone();
        params.remove_where(is_frontend_param);
        continuous_frontend(&mut params, cfg.init_seed, feature_dim, cfg.d_model);
        Ok(Model { cfg, params })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .by_name(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    /// Per-frame lookup into one modality's unit table.
    pub fn embed_units(&self, units: &[u32], modality: Modality) -> Result<Tensor> {
        let mut net = Net::inference(self);
        let v = net.embed_units(units, modality)?;
        Ok(net.g.value(v).clone())
    }

    /// Encoder input before positional encoding.
    pub fn fuse(&self, input: &EncoderInput<'_>) -> Result<Tensor> {
        let mut net = Net::inference(self);
        let v = net.fuse(input)?;
        Ok(net.g.value(v).clone())
    }

    /// Teacher-forced logits for one example, `len(prefix) × vocab`.
    pub fn forward(&self, input: &EncoderInput<'_>, prefix: &[u32]) -> Result<Tensor> {
        let mut net = Net::inference(self);
        let (mem, segs) = net.encode(std::slice::from_ref(input))?;
        let logits = net.decode(mem, &segs, &[prefix])?;
        Ok(net.g.value(logits).clone())
    }

    /// Encoder output for one example.
    pub fn encode_memory(&self, input: &EncoderInput<'_>) -> Result<Tensor> {
        let mut net = Net::inference(self);
        let (mem, _) = net.encode(std::slice::from_ref(input))?;
        Ok(net.g.value(mem).clone())
    }

    /// Next-token log-probabilities for each prefix against one encoder
    /// memory: `prefixes.len() × vocab`.
    pub fn next_token_logprobs(&self, memory: &Tensor, prefixes: &[&[u32]]) -> Result<Tensor> {
        let mut net = Net::inference(self);
        let mem = net.g.constant(memory.clone());
        let segs = vec![crate::numerics::Segment { start: 0, len: memory.rows() }; prefixes.len()];
        let logits = net.decode(mem, &segs, prefixes)?;
        let lv = net.g.value(logits);
        let v = lv.cols();
        let mut out = Tensor::zeros([prefixes.len(), v]);
        let mut row = 0;
        for (i, p) in prefixes.iter().enumerate() {
            row += p.len();
            let r = lv.row(row - 1);
            let mx = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx + r.iter().map(|x| (x - mx).exp()).sum::<f32>().ln();
            for (o, x) in out.row_mut(i).iter_mut().zip(r) {
                *o = x - lse;
            }
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC)
            .u16(CHECKPOINT_VERSION)
            .str(&self.cfg.to_kv())
            .u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.str(name);
            put_tensor(&mut w, t);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.header(CHECKPOINT_MAGIC, "checkpoint", CHECKPOINT_VERSION)?;
        let cfg = ModelConfig::from_kv(&r.str()?)
            .map_err(|e| r.err(format!("config block: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let t = get_tensor(&mut r)?;
            if params.id(&name).is_some() {
                return Err(r.err(format!("duplicate parameter {name}")));
            }
            params.insert(name, t);
        }
        r.expect_end()?;
        let reference = Model::new(cfg.clone())?;
        for (_, name, t) in reference.params.iter() {
            match params.by_name(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(r.err(format!(
                        "parameter {name} has shape {:?}, config implies {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(r.err(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(r.err("checkpoint has parameters the config does not describe"));
        }
        Ok(Model { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}

/// Loss of `logits` against `targets`; PAD targets are excluded.
pub fn sequence_loss(
    logits: &Tensor,
    targets: &[u32],
    smoothing: f32,
    reduction: Reduction,
) -> Result<f32> {
    if logits.rows() != targets.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let v = logits.cols();
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&y| {
            if y as usize >= v {
                Err(Error::input(format!("target {y} out of range for vocab {v}")))
            } else if y == crate::tokenizer::PAD {
                Ok(None)
            } else {
                Ok(Some(y as usize))
            }
        })
        .collect::<Result<_>>()?;
    let mut g = crate::numerics::Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, &t, smoothing, reduction);
    Ok(g.value(loss).item())
}
