use serde::{Deserialize, Serialize};

use super::graph::ParamId;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter, panicking on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| &self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Removes every parameter whose name satisfies `pred`, keeping order.
    pub fn remove_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let before = self.names.len();
        let (names, tensors): (Vec<_>, Vec<_>) = self
            .names
            .drain(..)
            .zip(self.tensors.drain(..))
            .filter(|(n, _)| !pred(n))
            .unzip();
        self.names = names;
        self.tensors = tensors;
        before - self.names.len()
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimState {
    /// Fresh state with betas (0.9, 0.98) and eps 1e-8.
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.98, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        OptimState {
            m: params.tensors.iter().map(zeros).collect(),
            v: params.tensors.iter().map(zeros).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. Parameters with `None` gradients keep
/// their value and moments.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut OptimState,
    lr: f32,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if lr < 0.0 || !lr.is_finite() {
        return Err(Error::input(format!("adam: learning rate {lr} must be finite and >= 0")));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.tensors[i].shape() {
                return Err(Error::shape(format!(
                    "adam: gradient for {} has shape {:?}, parameter {:?}",
                    params.names[i],
                    g.shape(),
                    params.tensors[i].shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params.tensors[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flatten()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Linear warmup, flat hold, linear decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriStageLR {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub hold_frac: f64,
    pub decay_frac: f64,
    pub init_scale: f64,
    pub final_scale: f64,
}

impl Default for TriStageLR {
    fn default() -> Self {
        TriStageLR {
            peak_lr: 4e-4,
            warmup_frac: 0.1,
            hold_frac: 0.4,
            decay_frac: 0.5,
            init_scale: 0.01,
            final_scale: 0.01,
        }
    }
}

impl TriStageLR {
    pub fn validate(&self) -> Result<()> {
        let total = self.warmup_frac + self.hold_frac + self.decay_frac;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "tri-stage fractions sum to {total}, expected 1"
            )));
        }
        if [self.warmup_frac, self.hold_frac, self.decay_frac]
            .iter()
            .any(|f| *f < 0.0)
        {
            return Err(Error::config("tri-stage fractions must be non-negative"));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(Error::config("peak_lr must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate at `progress ∈ [0, 1]`.
    pub fn lr(&self, progress: f64) -> Result<f64> {
        self.validate()?;
        if !(0.0..=1.0).contains(&progress) {
            return Err(Error::input(format!("progress {progress} outside [0, 1]")));
        }
        let peak = self.peak_lr;
        let warm_end = self.warmup_frac;
        let hold_end = self.warmup_frac + self.hold_frac;
        let lr = if progress < warm_end {
            let t = progress / self.warmup_frac;
            peak * (self.init_scale + (1.0 - self.init_scale) * t)
        } else if progress <= hold_end || self.decay_frac == 0.0 {
            peak
        } else {
            let t = ((progress - hold_end) / self.decay_frac).min(1.0);
            peak * (1.0 + (self.final_scale - 1.0) * t)
        };
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new([2, 2], vec![1.0, -2.0, 3.5, 0.25]));
        let before = p.clone();
        let mut st = OptimState::new(&p);
        let g = vec![Some(Tensor::zeros([2, 2]))];
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // m1 = 0.1, v1 = 0.02; mhat = 1, vhat = 1 → Δ = -lr / (1 + eps)
        let mut p = one_param(0.0);
        let mut st = OptimState::new(&p);
        adam_step(&mut p, &[Some(Tensor::scalar(1.0))], &mut st, 0.1).unwrap();
        let w = p.get(ParamId(0)).item();
        assert!((w - (-0.1 / (1.0 + 1e-8))).abs() < 1e-7, "w = {w}");
    }

    #[test]
    fn adam_second_identical_step_not_larger() {
        let mut p = one_param(0.0);
        let mut st = OptimState::new(&p);
        let g = [Some(Tensor::scalar(1.0))];
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        let w1 = p.get(ParamId(0)).item();
        adam_step(&mut p, &g, &mut st, 0.1).unwrap();
        let w2 = p.get(ParamId(0)).item();
        assert!(((w2 - w1).abs() as f64) <= (w1.abs() as f64) + 1e-9);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = one_param(0.0);
        let mut st = OptimState::new(&p);
        let err = adam_step(&mut p, &[Some(Tensor::zeros([2]))], &mut st, 0.1);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Some(Tensor::new([2], vec![3.0, 4.0])), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-6);
        let after = g[0].as_ref().unwrap().sq_norm().sqrt();
        assert!((after - 1.0).abs() < 1e-5);
    }

    #[test]
    fn tri_stage_examples() {
        let s = TriStageLR::default();
        assert!((s.lr(0.0).unwrap() - 4e-6).abs() < 1e-18);
        assert_eq!(s.lr(s.warmup_frac).unwrap(), s.peak_lr);
        assert_eq!(s.lr(s.warmup_frac + s.hold_frac / 2.0).unwrap(), s.peak_lr);
        assert!((s.lr(1.0).unwrap() - 0.01 * s.peak_lr).abs() < 1e-15);
    }

    #[test]
    fn tri_stage_continuous_at_boundaries() {
        let s = TriStageLR::default();
        for b in [s.warmup_frac, s.warmup_frac + s.hold_frac] {
            let lo = s.lr(b - 1e-13).unwrap();
            let hi = s.lr(b + 1e-13).unwrap();
            assert!((lo - hi).abs() < 1e-12, "jump at {b}: {lo} vs {hi}");
        }
    }

    #[test]
    fn tri_stage_rejects_bad_fractions() {
        let s = TriStageLR {
            hold_frac: 0.5,
            ..Default::default()
        };
        assert!(matches!(s.lr(0.5), Err(Error::Config(_))));
        assert!(TriStageLR::default().lr(1.5).is_err());
    }

    #[test]
    fn tri_stage_piecewise_monotone() {
        let s = TriStageLR::default();
        let lrs: Vec<f64> = (0..=1000).map(|i| s.lr(i as f64 / 1000.0).unwrap()).collect();
        let peak_at = (s.warmup_frac * 1000.0) as usize;
        let hold_end = ((s.warmup_frac + s.hold_frac) * 1000.0) as usize;
        assert!(lrs[..=peak_at].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[peak_at..=hold_end].iter().all(|&x| x == s.peak_lr));
        assert!(lrs[hold_end..].windows(2).all(|w| w[1] <= w[0]));
    }
}
