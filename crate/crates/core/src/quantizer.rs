//! k-means codebooks that turn feature frames into discrete units, and the
//! unit/label purity analysis.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, Reader, Writer};
use crate::numerics::Tensor;
use crate::units::{Modality, UnitStream};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"UCBK";
pub const CODEBOOK_VERSION: u16 = 1;

/// `k` centroids of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub seed: u64,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index and squared distance of the nearest centroid; ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for c in 0..self.k {
            let d = sq_dist(x, self.centroid(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    fn check_dim(&self, features: &Tensor) -> Result<()> {
        if features.cols() != self.dim {
            return Err(Error::shape(format!(
                "features have dim {}, codebook dim {}",
                features.cols(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CODEBOOK_MAGIC)
            .u16(CODEBOOK_VERSION)
            .u32(self.k as u32)
            .u32(self.dim as u32)
            .u64(self.seed)
            .f32s(&self.centroids);
        w.finish()
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.header(CODEBOOK_MAGIC, "codebook", CODEBOOK_VERSION)?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let seed = r.u64()?;
        if k == 0 || dim == 0 {
            return Err(r.err("k and dim must be positive"));
        }
        let centroids = r.f32s(k * dim)?;
        r.expect_end()?;
        Ok(Codebook {
            k,
            dim,
            centroids,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}

/// Codebook plus the inertia measured after each assignment step.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

pub fn train_kmeans(features: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<Codebook> {
    Ok(train_kmeans_traced(features, k, max_iters, seed)?.codebook)
}

/// Lloyd's algorithm from k-means++ seeding. Stops when no assignment
/// changes or after `max_iters` update rounds.
pub fn train_kmeans_traced(
    features: &Tensor,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit> {
    let n = features.rows();
    let dim = features.cols();
    if dim == 0 || features.shape().len() != 2 {
        return Err(Error::input("features must be an N×dim matrix with dim >= 1"));
    }
    if k == 0 {
        return Err(Error::input("k must be >= 1"));
    }
    if n < k {
        return Err(Error::input(format!("{n} feature rows cannot fill k={k} clusters")));
    }
    if k > 1 {
        let first = features.row(0);
        if (1..n).all(|i| features.row(i) == first) {
            return Err(Error::input(format!(
                "degenerate input: all {n} feature rows are identical, cannot form k={k} clusters"
            )));
        }
        let distinct: BTreeSet<Vec<u32>> = (0..n)
            .map(|i| features.row(i).iter().map(|x| x.to_bits()).collect())
            .collect();
        if distinct.len() < k {
            return Err(Error::input(format!(
                "degenerate input: only {} distinct feature rows for k={k}",
                distinct.len()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cb = Codebook {
        k,
        dim,
        centroids: kmeans_plus_plus(features, k, &mut rng),
        seed,
    };

    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let nearest = nearest_all(&cb, features);
        let mut changed = false;
        let mut inertia = 0.0f64;
        for (i, &(c, d)) in nearest.iter().enumerate() {
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
            inertia += f64::from(d);
        }
        trace.push(inertia);
        if !changed {
            converged = true;
            break;
        }
        if iterations == max_iters {
            break;
        }
        iterations += 1;

        // update step
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(features.row(i)) {
                *s += f64::from(*x);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..dim {
                    cb.centroids[c * dim + j] = (sums[c * dim + j] * inv) as f32;
                }
            }
        }
        repair_empty(&mut cb, features, &mut assignment, &counts);
    }

    Ok(KMeansFit {
        codebook: cb,
        inertia_trace: trace,
        iterations,
        converged,
    })
}

fn kmeans_plus_plus(features: &Tensor, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = features.rows();
    let dim = features.cols();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| f64::from(sq_dist(features.row(i), features.row(first))))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            // never reuse an existing centroid
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = features.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(f64::from(sq_dist(features.row(i), &c)));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Moves each empty cluster onto the point that lies farthest from its
/// current centroid, taking that point over.
fn repair_empty(cb: &mut Codebook, features: &Tensor, assignment: &mut [usize], counts: &[usize]) {
    let dim = cb.dim;
    let mut taken = vec![false; assignment.len()];
    for c in 0..cb.k {
        if counts[c] > 0 {
            continue;
        }
        let mut best = None;
        let mut best_d = -1.0f32;
        for (i, &a) in assignment.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = sq_dist(features.row(i), cb.centroid(a));
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        if let Some(i) = best {
            taken[i] = true;
            cb.centroids[c * dim..(c + 1) * dim].copy_from_slice(features.row(i));
        }
    }
}

fn nearest_all(cb: &Codebook, features: &Tensor) -> Vec<(usize, f32)> {
    (0..features.rows())
        .into_par_iter()
        .map(|i| cb.nearest(features.row(i)))
        .collect()
}

/// Maps every frame to its nearest centroid.
pub fn assign(cb: &Codebook, features: &Tensor, fps: f32, modality: Modality) -> Result<UnitStream> {
    cb.check_dim(features)?;
    let units = nearest_all(cb, features)
        .into_iter()
        .map(|(c, _)| c as u32)
        .collect();
    Ok(UnitStream::new(units, fps, modality))
}

/// Sum of squared distances from each frame to its nearest centroid.
pub fn inertia(cb: &Codebook, features: &Tensor) -> Result<f64> {
    cb.check_dim(features)?;
    Ok(nearest_all(cb, features)
        .into_iter()
        .map(|(_, d)| f64::from(d))
        .sum())
}

/// How well units line up with frame labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Majority label per unit; `None` for units that never occur.
    pub unit_to_label: Vec<Option<usize>>,
    pub unit_counts: Vec<usize>,
    /// Fraction of frames whose unit's majority label equals the frame label.
    pub purity: f64,
    /// Fraction of occurring units whose majority label is a vowel.
    pub vowel_fraction: f64,
    /// `joint[u][l]` co-occurrence counts.
    pub joint: Vec<Vec<usize>>,
}

pub fn purity(units: &[u32], labels: &[usize], vowel_set: &BTreeSet<usize>) -> Result<PurityReport> {
    if units.is_empty() {
        return Err(Error::input("purity needs at least one frame"));
    }
    if units.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} units but {} labels",
            units.len(),
            labels.len()
        )));
    }
    let n_units = *units.iter().max().unwrap() as usize + 1;
    let n_labels = labels.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0usize; n_labels]; n_units];
    for (&u, &l) in units.iter().zip(labels) {
        joint[u as usize][l] += 1;
    }
    let mut unit_to_label = Vec::with_capacity(n_units);
    let mut unit_counts = Vec::with_capacity(n_units);
    let mut matched = 0usize;
    let mut used = 0usize;
    let mut vowel_units = 0usize;
    for row in &joint {
        let total: usize = row.iter().sum();
        unit_counts.push(total);
        if total == 0 {
            unit_to_label.push(None);
            continue;
        }
        // first maximum wins → lowest label on ties
        let (best, count) = row
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (l, &c)| if c > acc.1 { (l, c) } else { acc });
        matched += count;
        used += 1;
        if vowel_set.contains(&best) {
            vowel_units += 1;
        }
        unit_to_label.push(Some(best));
    }
    Ok(PurityReport {
        unit_to_label,
        unit_counts,
        purity: matched as f64 / units.len() as f64,
        vowel_fraction: vowel_units as f64 / used as f64,
        joint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn brute_nearest(cb: &Codebook, x: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..cb.k {
            let d: f64 = x
                .iter()
                .zip(cb.centroid(c))
                .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    fn random_features(n: usize, dim: usize, seed: u64) -> Tensor {
        Tensor::randn([n, dim], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_point_single_cluster() {
        let x = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]);
        let cb = train_kmeans(&x, 1, 10, 0).unwrap();
        assert_eq!(cb.centroids, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn two_blobs_recover_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0f32, 0.1).unwrap();
        let mut rows = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { -5.0 } else { 5.0 };
            rows.push(vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]);
        }
        let x = Tensor::from_rows(&rows);
        let exact = |sign: f32| -> Vec<f32> {
            let pts: Vec<&Vec<f32>> = rows.iter().filter(|r| r[0].signum() == sign).collect();
            (0..2)
                .map(|j| pts.iter().map(|r| r[j]).sum::<f32>() / pts.len() as f32)
                .collect()
        };
        let cb = train_kmeans(&x, 2, 100, 1).unwrap();
        for sign in [-1.0f32, 1.0] {
            let m = exact(sign);
            let (c, d) = cb.nearest(&m);
            assert!(d.sqrt() < 0.2, "centroid {c} is {} from blob mean", d.sqrt());
        }
    }

    #[test]
    fn lloyd_inertia_never_increases() {
        let x = random_features(500, 4, 2);
        let fit = train_kmeans_traced(&x, 12, 100, 3).unwrap();
        for w in fit.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6 * w[0], "{} -> {}", w[0], w[1]);
        }
        // trace is the recomputed inertia of the final codebook
        let last = *fit.inertia_trace.last().unwrap();
        let again = inertia(&fit.codebook, &x).unwrap();
        assert!((last - again).abs() <= 1e-9 * last.max(1.0));
    }

    #[test]
    fn errors_on_degenerate_inputs() {
        let same = Tensor::new([4, 2], vec![1.0; 8]);
        let e = train_kmeans(&same, 2, 10, 0).unwrap_err();
        assert!(e.to_string().contains("degenerate"), "{e}");
        assert!(train_kmeans(&random_features(3, 2, 0), 4, 10, 0).is_err());
        // k = 1 on identical points is fine
        assert!(train_kmeans(&same, 1, 10, 0).is_ok());
    }

    #[test]
    fn seeded_training_is_deterministic_and_distinct() {
        let x = random_features(300, 3, 5);
        let a = train_kmeans(&x, 8, 50, 9).unwrap();
        let b = train_kmeans(&x, 8, 50, 9).unwrap();
        assert_eq!(a, b);
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(sq_dist(a.centroid(i), a.centroid(j)) > 0.0);
            }
        }
    }

    #[test]
    fn assign_examples() {
        let cb = Codebook {
            k: 8,
            dim: 1,
            centroids: (0..8).map(|i| i as f32 * 2.0).collect(),
            seed: 0,
        };
        let x = Tensor::new([3, 1], vec![14.0, 5.0, 9.0]);
        // 5.0 is equidistant from 4 and 6 → lower index 2
        let u = assign(&cb, &x, 25.0, Modality::Visual).unwrap();
        assert_eq!(u.units, vec![7, 2, 4]);
        let centres = Tensor::new([8, 1], cb.centroids.clone());
        let u = assign(&cb, &centres, 25.0, Modality::Visual).unwrap();
        assert_eq!(u.units, (0..8).collect::<Vec<u32>>());
        assert!(assign(&cb, &Tensor::zeros([2, 3]), 25.0, Modality::Audio).is_err());
    }

    #[test]
    fn assign_matches_brute_force_scan() {
        let x = random_features(400, 5, 6);
        let cb = train_kmeans(&x, 16, 20, 7).unwrap();
        let probe = random_features(300, 5, 8);
        let u = assign(&cb, &probe, 25.0, Modality::Audio).unwrap();
        for i in 0..probe.rows() {
            assert_eq!(u.units[i] as usize, brute_nearest(&cb, probe.row(i)));
        }
        assert_eq!(assign(&cb, &probe, 25.0, Modality::Audio).unwrap(), u);
    }

    #[test]
    fn inertia_examples() {
        let cb = Codebook {
            k: 2,
            dim: 2,
            centroids: vec![0.0, 0.0, 10.0, 10.0],
            seed: 0,
        };
        let on = Tensor::new([2, 2], vec![0.0, 0.0, 10.0, 10.0]);
        assert_eq!(inertia(&cb, &on).unwrap(), 0.0);
        let off = Tensor::new([1, 2], vec![3.0, 0.0]);
        assert_eq!(inertia(&cb, &off).unwrap(), 9.0);

        let x = random_features(200, 3, 11);
        let cb = train_kmeans(&x, 5, 10, 1).unwrap();
        let brute: f64 = (0..x.rows())
            .map(|i| {
                let c = brute_nearest(&cb, x.row(i));
                x.row(i)
                    .iter()
                    .zip(cb.centroid(c))
                    .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let got = inertia(&cb, &x).unwrap();
        assert!((got - brute).abs() / brute < 1e-6);
    }

    #[test]
    fn purity_examples() {
        let vowels: BTreeSet<usize> = [0].into();
        let r = purity(&[0, 1, 0, 1], &[0, 1, 0, 1], &vowels).unwrap();
        assert_eq!(r.purity, 1.0);
        assert_eq!(r.vowel_fraction, 0.5);

        // unit 0 sees a, a, b
        let r = purity(&[0, 0, 0], &[0, 0, 1], &vowels).unwrap();
        assert_eq!(r.unit_to_label[0], Some(0));
        assert!((r.purity - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.unit_counts.iter().sum::<usize>(), 3);

        assert!(purity(&[], &[], &vowels).is_err());
        assert!(purity(&[0], &[0, 1], &vowels).is_err());
    }

    #[test]
    fn codebook_file_round_trip() {
        let cb = train_kmeans(&random_features(50, 3, 1), 4, 10, 42).unwrap();
        let bytes = cb.encode();
        assert_eq!(Codebook::decode(&bytes, Path::new("m")).unwrap(), cb);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Codebook::decode(&bad, Path::new("m")).is_err());
    }
}
