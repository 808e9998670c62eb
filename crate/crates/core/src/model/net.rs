use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Frontend, MaskVectorMode, Model};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Segment, Tensor, Var};
use crate::units::Modality;

/// One modality's input to the encoder.
#[derive(Debug, Clone, Copy)]
pub enum Stream<'a> {
    Units(&'a [u32]),
    Features(&'a Tensor),
}

impl Stream<'_> {
    pub fn len(&self) -> usize {
        match self {
            Stream::Units(u) => u.len(),
            Stream::Features(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct EncoderInput<'a> {
    /// `None` behaves as a fully masked audio stream.
    pub audio: Option<Stream<'a>>,
    pub visual: Stream<'a>,
    pub language: usize,
    /// Audio frames replaced by the mask vector.
    pub masked: Vec<usize>,
}

impl<'a> EncoderInput<'a> {
    pub fn visual_only(visual: Stream<'a>, language: usize) -> Self {
        EncoderInput {
            audio: None,
            visual,
            language,
            masked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.visual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.is_empty()
    }
}

pub fn sinusoid(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros([len, d]);
    for pos in 0..len {
        let row = t.row_mut(pos);
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64 / d as f64) * 10000f64.ln()).exp();
            let a = pos as f64 * freq;
            row[2 * i] = a.sin() as f32;
            row[2 * i + 1] = a.cos() as f32;
        }
    }
    t
}

fn segment_positions(segs: &[Segment], d: usize) -> Tensor {
    let longest = segs.iter().map(|s| s.len).max().unwrap_or(0);
    let table = sinusoid(longest, d);
    let total: usize = segs.iter().map(|s| s.len).sum();
    let mut out = Tensor::zeros([total, d]);
    for s in segs {
        for i in 0..s.len {
            out.row_mut(s.start + i).copy_from_slice(table.row(i));
        }
    }
    out
}

/// Graph builder over a model's parameters.
pub struct Net<'a> {
    pub g: Graph<'a>,
    model: &'a Model,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
    dropout: Option<ChaCha8Rng>,
}

impl<'a> Net<'a> {
    /// Every parameter bound as a constant; no dropout.
    pub fn inference(model: &'a Model) -> Self {
        Net {
            g: Graph::new(),
            model,
            bound: vec![None; model.params.len()],
            trainable: vec![false; model.params.len()],
            dropout: None,
        }
    }

    /// Parameters selected by `trainable` receive gradients; dropout is drawn
    /// from `dropout_seed`.
    pub fn training(model: &'a Model, trainable: impl Fn(&str) -> bool, dropout_seed: u64) -> Self {
        let zero_mask = model.cfg.mask_vector == MaskVectorMode::Zeros;
        let trainable = model
            .params
            .iter()
            .map(|(_, name, _)| trainable(name) && !(zero_mask && name == "mask_vector"))
            .collect();
        Net {
            g: Graph::new(),
            model,
            bound: vec![None; model.params.len()],
            trainable,
            dropout: (model.cfg.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    fn p(&mut self, name: &str) -> Var {
        let id = self
            .model
            .params
            .id(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.model.params.get(id);
        let v = if self.trainable[id.0] {
            self.g.param(id, t)
        } else {
            self.g.frozen(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.g.layer_norm(x, g, b)
    }

    fn drop(&mut self, x: Var) -> Var {
        let rate = self.model.cfg.dropout;
        match self.dropout.as_mut() {
            Some(rng) => self.g.dropout(x, rate, rng),
            None => x,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &mut self,
        x: Var,
        memory: Var,
        q_segs: &[Segment],
        kv_segs: &[Segment],
        name: &str,
        causal: bool,
    ) -> Var {
        let q = self.linear(x, &format!("{name}.q"));
        let k = self.linear(memory, &format!("{name}.k"));
        let v = self.linear(memory, &format!("{name}.v"));
        let heads = self.model.cfg.n_heads;
        let a = self.g.attention(q, k, v, q_segs, kv_segs, heads, causal);
        self.linear(a, &format!("{name}.o"))
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Var {
        let h = self.linear(x, &format!("{name}.ff1"));
        let h = self.g.relu(h);
        self.linear(h, &format!("{name}.ff2"))
    }

    pub fn embed_units(&mut self, units: &[u32], modality: Modality) -> Result<Var> {
        if self.model.cfg.frontend != Frontend::Discrete {
            return Err(Error::config("unit embedding needs a discrete frontend"));
        }
        let k = self.model.cfg.k_units;
        if let Some(&u) = units.iter().find(|&&u| u as usize >= k) {
            return Err(Error::input(format!("unit id {u} out of range for k={k}")));
        }
        let table = match modality {
            Modality::Audio => self.p("frontend.audio_embed"),
            Modality::Visual => self.p("frontend.visual_embed"),
        };
        let ids: Vec<usize> = units.iter().map(|&u| u as usize).collect();
        Ok(self.g.gather(table, &ids))
    }

    fn project(&mut self, s: Stream<'_>, modality: Modality) -> Result<Var> {
        match (s, self.model.cfg.frontend) {
            (Stream::Units(u), Frontend::Discrete) => self.embed_units(u, modality),
            (Stream::Features(f), Frontend::Continuous { feature_dim }) => {
                if f.cols() != feature_dim {
                    return Err(Error::shape(format!(
                        "feature dim {} but frontend expects {feature_dim}",
                        f.cols()
                    )));
                }
                let x = self.g.constant(f.clone());
                let name = match modality {
                    Modality::Audio => "frontend.audio_proj",
                    Modality::Visual => "frontend.visual_proj",
                };
                Ok(self.linear(x, name))
            }
            (_, fe) => Err(Error::config(format!("input stream does not match the {fe} frontend"))),
        }
    }

    /// Masked fusion for one example: `T × d_model`, before positions.
    pub fn fuse(&mut self, input: &EncoderInput<'_>) -> Result<Var> {
        let t = input.len();
        let d = self.model.cfg.d_model;
        if input.language >= self.model.cfg.n_languages {
            return Err(Error::input(format!(
                "language id {} out of range for {} languages",
                input.language, self.model.cfg.n_languages
            )));
        }
        let (audio, masked): (Var, Vec<usize>) = match input.audio {
            Some(a) => {
                if a.len() != t {
                    return Err(Error::shape(format!(
                        "audio has {} frames, visual has {t}",
                        a.len()
                    )));
                }
                if let Some(&r) = input.masked.iter().find(|&&r| r >= t) {
                    return Err(Error::input(format!("mask row {r} out of range for {t} frames")));
                }
                (self.project(a, Modality::Audio)?, input.masked.clone())
            }
            None => (self.g.constant(Tensor::zeros([t, d])), (0..t).collect()),
        };
        let visual = self.project(input.visual, Modality::Visual)?;
        let fill = self.p("mask_vector");
        let audio = self.g.replace_rows(audio, fill, &masked);
        let x = match self.model.cfg.frontend {
            Frontend::Discrete => {
                let cat = self.g.concat_cols(audio, visual);
                self.linear(cat, "frontend.fuse")
            }
            Frontend::Continuous { .. } => self.g.add(audio, visual),
        };
        let table = self.p("lang_embed");
        let lang = self.g.gather(table, &vec![input.language; t]);
        Ok(self.g.add(x, lang))
    }

    /// Encoder over a batch; returns stacked memory rows and their segments.
    pub fn encode(&mut self, inputs: &[EncoderInput<'_>]) -> Result<(Var, Vec<Segment>)> {
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        let mut lengths = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.is_empty() {
                return Err(Error::input("empty input sequence"));
            }
            if inp.len() > cfg.max_len {
                return Err(Error::input(format!(
                    "input of {} frames exceeds max_len {}",
                    inp.len(),
                    cfg.max_len
                )));
            }
            lengths.push(inp.len());
        }
        let segs = Segment::from_lengths(&lengths);
        if inputs.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let parts = inputs.iter().map(|inp| self.fuse(inp)).collect::<Result<Vec<_>>>()?;
        let x = self.g.concat_rows(&parts);
        let pos = self.g.constant(segment_positions(&segs, d));
        let mut x = self.g.add(x, pos);
        x = self.drop(x);
        for l in 0..self.model.cfg.n_enc_layers {
            let n = format!("enc.{l}");
            let h = self.norm(x, &format!("{n}.ln1"));
            let h = self.attend(h, h, &segs, &segs, &format!("{n}.attn"), false);
            let h = self.drop(h);
            x = self.g.add(x, h);
            let h = self.norm(x, &format!("{n}.ln2"));
            let h = self.feed_forward(h, &n);
            let h = self.drop(h);
            x = self.g.add(x, h);
        }
        Ok((self.norm(x, "enc.ln_f"), segs))
    }

    /// Decoder logits for every prefix position, stacked: `Σ len × vocab`.
    /// Prefix `i` cross-attends to `mem_segs[i]`.
    pub fn decode(&mut self, memory: Var, mem_segs: &[Segment], prefixes: &[&[u32]]) -> Result<Var> {
        let cfg = &self.model.cfg;
        let (d, vocab) = (cfg.d_model, cfg.vocab_size);
        if prefixes.len() != mem_segs.len() {
            return Err(Error::shape("one memory segment per prefix"));
        }
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            if p.is_empty() || p.len() > cfg.max_len {
                return Err(Error::input(format!(
                    "prefix length {} outside 1..={}",
                    p.len(),
                    cfg.max_len
                )));
            }
            if let Some(&t) = p.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::input(format!("token {t} out of range for vocab {vocab}")));
            }
            ids.extend(p.iter().map(|&t| t as usize));
            lengths.push(p.len());
        }
        let segs = Segment::from_lengths(&lengths);
        let table = self.p("tok_embed");
        let x = self.g.gather(table, &ids);
        let pos = self.g.constant(segment_positions(&segs, d));
        let mut x = self.g.add(x, pos);
        x = self.drop(x);
        for l in 0..self.model.cfg.n_dec_layers {
            let n = format!("dec.{l}");
            let h = self.norm(x, &format!("{n}.ln1"));
            let h = self.attend(h, h, &segs, &segs, &format!("{n}.self_attn"), true);
            let h = self.drop(h);
            x = self.g.add(x, h);
            let h = self.norm(x, &format!("{n}.ln2"));
            let h = self.attend(h, memory, &segs, mem_segs, &format!("{n}.cross_attn"), false);
            let h = self.drop(h);
            x = self.g.add(x, h);
            let h = self.norm(x, &format!("{n}.ln3"));
            let h = self.feed_forward(h, &n);
            let h = self.drop(h);
            x = self.g.add(x, h);
        }
        let x = self.norm(x, "dec.ln_f");
        Ok(self.linear(x, "out"))
    }
}
