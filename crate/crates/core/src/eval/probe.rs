use rand::seq::IndexedRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{cosine, eer};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, OptimState, ParamStore, Reduction, Segment, Tensor};
use crate::numerics::Graph;
use crate::seed;

/// Per-utterance input to the speaker probe.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeInput {
    /// `T × dim` continuous frames.
    Features(Tensor),
    /// Unit ids, embedded by a learned table of `k` rows.
    Units(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f32,
    /// Fraction of each speaker's utterances used to train the classifier.
    pub train_frac: f64,
    /// Gaussian noise added to continuous inputs.
    pub noise: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            embed_dim: 32,
            hidden: 32,
            epochs: 150,
            lr: 1e-2,
            train_frac: 0.5,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub eer: f64,
    pub train_accuracy: f64,
    pub trials: usize,
}

struct Probe {
    params: ParamStore,
    units: Option<usize>,
}

impl Probe {
    fn new(input_dim: usize, units: Option<usize>, cfg: &ProbeConfig, n_speakers: usize) -> Self {
        let mut p = ParamStore::new();
        let init = |p: &mut ParamStore, name: &str, shape: [usize; 2], std: f32| {
            p.insert(name, Tensor::randn(shape, std, &mut seed::rng(cfg.seed, name, 0)));
        };
        match units {
            Some(k) => init(&mut p, "embed", [k, cfg.embed_dim], 1.0),
            None => init(&mut p, "embed", [input_dim, cfg.embed_dim], 1.0 / (input_dim as f32).sqrt()),
        }
        init(&mut p, "hidden.w", [cfg.embed_dim, cfg.hidden], 1.0 / (cfg.embed_dim as f32).sqrt());
        init(&mut p, "out.w", [cfg.hidden, n_speakers], 1.0 / (cfg.hidden as f32).sqrt());
        p.insert("hidden.b", Tensor::zeros([1, cfg.hidden]));
        p.insert("out.b", Tensor::zeros([1, n_speakers]));
        Probe { params: p, units }
    }

    /// Returns (logits, hidden embeddings) for a batch.
    fn forward<'a>(&'a self, g: &mut Graph<'a>, x: &[&ProbeInput], train: bool) -> (crate::numerics::Var, crate::numerics::Var) {
        let bind = |g: &mut Graph<'a>, name: &str| {
            let id = self.params.id(name).expect("probe parameter");
            if train {
                g.param(id, self.params.get(id))
            } else {
                g.frozen(self.params.get(id))
            }
        };
        let embed = bind(g, "embed");
        let lengths: Vec<usize> = x
            .iter()
            .map(|i| match i {
                ProbeInput::Features(t) => t.rows(),
                ProbeInput::Units(u) => u.len(),
            })
            .collect();
        let segs = Segment::from_lengths(&lengths);
        let e = match self.units {
            Some(_) => {
                let ids: Vec<usize> = x
                    .iter()
                    .flat_map(|i| match i {
                        ProbeInput::Units(u) => u.iter().map(|&v| v as usize).collect::<Vec<_>>(),
                        ProbeInput::Features(_) => unreachable!("checked input kind"),
                    })
                    .collect();
                g.gather(embed, &ids)
            }
            None => {
                let mut data = Vec::new();
                for i in x {
                    if let ProbeInput::Features(t) = i {
                        data.extend_from_slice(t.data());
                    }
                }
                let cols = self.params.by_name("embed").unwrap().rows();
                let rows = data.len() / cols;
                let xv = g.constant(Tensor::new([rows, cols], data));
                g.matmul(xv, embed)
            }
        };
        let pooled = g.segment_mean(e, &segs);
        let hw = bind(g, "hidden.w");
        let hb = bind(g, "hidden.b");
        let h = g.matmul(pooled, hw);
        let h = g.add_bias(h, hb);
        let h = g.relu(h);
        let ow = bind(g, "out.w");
        let ob = bind(g, "out.b");
        let o = g.matmul(h, ow);
        (g.add_bias(o, ob), h)
    }
}

/// Trains a speaker classifier on part of each speaker's utterances, embeds
/// the rest with its hidden layer, and reports the EER of cosine-scored
/// trials: every held-out utterance is paired with one same-speaker and one
/// different-speaker utterance.
pub fn speaker_probe(inputs: &[ProbeInput], speakers: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    if inputs.len() != speakers.len() {
        return Err(Error::input("one speaker label per probe input"));
    }
    let n_speakers = speakers.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut s = speakers.to_vec();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    if distinct < 2 {
        return Err(Error::input("speaker probe needs at least two speakers"));
    }
    let units = match inputs.first() {
        Some(ProbeInput::Units(_)) => {
            let k = inputs
                .iter()
                .map(|i| match i {
                    ProbeInput::Units(u) => Ok(u.iter().max().map_or(0, |&m| m as usize + 1)),
                    ProbeInput::Features(_) => Err(Error::input("mixed probe input kinds")),
                })
                .collect::<Result<Vec<_>>>()?;
            Some(k.into_iter().max().unwrap_or(1))
        }
        _ => None,
    };
    let input_dim = match inputs.first() {
        Some(ProbeInput::Features(t)) => t.cols(),
        _ => 0,
    };
    let mut noisy: Vec<ProbeInput> = Vec::with_capacity(inputs.len());
    for (i, inp) in inputs.iter().enumerate() {
        match inp {
            ProbeInput::Features(t) => {
                if units.is_some() || t.cols() != input_dim {
                    return Err(Error::input("probe inputs must share one kind and width"));
                }
                if t.rows() == 0 {
                    return Err(Error::input(format!("probe input {i} is empty")));
                }
                let mut t = t.clone();
                if cfg.noise > 0.0 {
                    let n = Normal::new(0.0, cfg.noise).map_err(|e| Error::config(e.to_string()))?;
                    let mut rng = seed::rng(cfg.seed, "probe.noise", i as u64);
                    t.data_mut().iter_mut().for_each(|x| *x += n.sample(&mut rng));
                }
                noisy.push(ProbeInput::Features(t));
            }
            ProbeInput::Units(u) => {
                if u.is_empty() {
                    return Err(Error::input(format!("probe input {i} is empty")));
                }
                noisy.push(inp.clone());
            }
        }
    }

    // per-speaker utterance split
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); n_speakers];
    for (i, &s) in speakers.iter().enumerate() {
        by_speaker[s].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, utts) in by_speaker.iter().enumerate() {
        if utts.is_empty() {
            continue;
        }
        if utts.len() < 4 {
            return Err(Error::input(format!(
                "speaker {s} has {} utterances; the probe needs at least 4 per speaker",
                utts.len()
            )));
        }
        let n_train = ((utts.len() as f64 * cfg.train_frac).round() as usize).clamp(1, utts.len() - 2);
        train.extend_from_slice(&utts[..n_train]);
        test.extend_from_slice(&utts[n_train..]);
    }

    let mut probe = Probe::new(input_dim, units, cfg, n_speakers);
    let mut state = OptimState::new(&probe.params);
    let train_x: Vec<&ProbeInput> = train.iter().map(|&i| &noisy[i]).collect();
    let targets: Vec<Option<usize>> = train.iter().map(|&i| Some(speakers[i])).collect();
    let mut train_accuracy = 0.0;
    for _ in 0..cfg.epochs {
        let grads = {
            let mut g = Graph::new();
            let (logits, _) = probe.forward(&mut g, &train_x, true);
            let lv = g.value(logits);
            let hits = targets
                .iter()
                .enumerate()
                .filter(|(r, t)| {
                    let row = lv.row(*r);
                    let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    Some(best) == **t
                })
                .count();
            train_accuracy = hits as f64 / targets.len() as f64;
            let loss = g.cross_entropy(logits, &targets, 0.0, Reduction::Mean);
            g.backward(loss)?.into_params(probe.params.len())
        };
        adam_step(&mut probe.params, &grads, &mut state, cfg.lr)?;
    }

    let test_x: Vec<&ProbeInput> = test.iter().map(|&i| &noisy[i]).collect();
    let mut g = Graph::new();
    let (_, h) = probe.forward(&mut g, &test_x, false);
    let emb = g.value(h);
    let mut rng = seed::rng(cfg.seed, "probe.trials", 0);
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (a, &ia) in test.iter().enumerate() {
        let same: Vec<usize> = (0..test.len())
            .filter(|&b| b != a && speakers[test[b]] == speakers[ia])
            .collect();
        let diff: Vec<usize> = (0..test.len())
            .filter(|&b| speakers[test[b]] != speakers[ia])
            .collect();
        if let (Some(&p), Some(&n)) = (same.choose(&mut rng), diff.choose(&mut rng)) {
            scores.push(cosine(emb.row(a), emb.row(p)));
            labels.push(true);
            scores.push(cosine(emb.row(a), emb.row(n)));
            labels.push(false);
        }
    }
    Ok(ProbeReport {
        eer: eer(&scores, &labels)?,
        train_accuracy,
        trials: scores.len(),
    })
}
