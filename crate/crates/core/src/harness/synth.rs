//! Synthetic source/target pairs with a controlled domain shift.
//!
//! Classes are Gaussian blobs whose means sit on a circle in the plane.
//! The target domain rotates and translates the means. Both domains are
//! lifted to `dim` dimensions by the same random orthonormal 2-column map.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::dataset::{Dataset, Domain, Split};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n_source: usize,
    pub m_target: usize,
    /// Ambient dimension after lifting.
    pub dim: usize,
    /// Rotation of the target blob means, in degrees.
    pub rotation_deg: f64,
    /// Length of the target translation.
    pub translation: f64,
    /// Per-coordinate noise standard deviation in the plane.
    pub noise: f64,
    /// Radius of the circle carrying the blob means.
    pub radius: f64,
    /// Fraction of each source class tagged `val`.
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            n_source: 800,
            m_target: 800,
            dim: 10,
            rotation_deg: 50.0,
            translation: 2.5,
            noise: 0.35,
            radius: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::Param(format!("need at least 2 classes, got {k}")));
        }
        if self.n_source < k || self.m_target < k {
            return Err(Error::Param(format!(
                "need at least one sample per class (n_source = {}, m_target = {}, K = {k})",
                self.n_source, self.m_target
            )));
        }
        if self.dim < 2 {
            return Err(Error::Param(format!("dim must be >= 2, got {}", self.dim)));
        }
        if !(self.radius > 0.0) || !(self.noise >= 0.0) || !self.translation.is_finite() {
            return Err(Error::Param(
                "radius must be > 0, noise >= 0, translation finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Param(format!(
                "val fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !self.rotation_deg.is_finite() {
            return Err(Error::Param("rotation must be finite".into()));
        }
        // A rotation by a nonzero multiple of the class spacing lands every
        // target blob exactly on a source blob of another class.
        let step = 360.0 / k as f64;
        let turns = self.rotation_deg / step;
        let full = self.rotation_deg / 360.0;
        if (turns - turns.round()).abs() < 1e-9 && (full - full.round()).abs() > 1e-9 {
            return Err(Error::Param(format!(
                "rotation {}° maps class blobs onto each other",
                self.rotation_deg
            )));
        }
        Ok(())
    }
}

/// Orthonormal `dim × 2` lift.
fn random_lift(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut a: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let mut b: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    a.iter_mut().for_each(|v| *v /= na);
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    b.iter_mut().zip(&a).for_each(|(v, u)| *v -= dot * u);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    b.iter_mut().for_each(|v| *v /= nb);
    let mut m = Matrix::zeros(dim, 2);
    for i in 0..dim {
        m[(i, 0)] = a[i];
        m[(i, 1)] = b[i];
    }
    m
}

fn blob_means(spec: &SyntheticSpec, rotation: f64, shift: (f64, f64)) -> Vec<(f64, f64)> {
    (0..spec.num_classes)
        .map(|c| {
            let a = TAU * c as f64 / spec.num_classes as f64 + rotation;
            (
                spec.radius * a.cos() + shift.0,
                spec.radius * a.sin() + shift.1,
            )
        })
        .collect()
}

fn sample_domain(
    spec: &SyntheticSpec,
    n: usize,
    means: &[(f64, f64)],
    lift: &Matrix,
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<i64>) {
    let k = means.len();
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut x = Matrix::zeros(n, spec.dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let (mx, my) = means[c];
        let px = mx + noise.sample(rng);
        let py = my + noise.sample(rng);
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v = lift[(j, 0)] * px + lift[(j, 1)] * py;
        }
        y.push(c as i64);
    }
    (x, y)
}

/// Draws a source dataset (tagged train/val) and an unlabeled target
/// dataset whose hidden truth is kept for scoring.
pub fn gen_synthetic_shift(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lift = random_lift(spec.dim, &mut rng);
    let dir: f64 = rand::Rng::random_range(&mut rng, 0.0..TAU);
    let shift = (spec.translation * dir.cos(), spec.translation * dir.sin());

    let src_means = blob_means(spec, 0.0, (0.0, 0.0));
    let tgt_means = blob_means(spec, spec.rotation_deg.to_radians(), shift);

    let (sx, sy) = sample_domain(spec, spec.n_source, &src_means, &lift, &mut rng);
    let mut splits = vec![Split::Train; spec.n_source];
    for c in 0..spec.num_classes {
        let mut idx: Vec<usize> = (0..spec.n_source).filter(|&i| sy[i] == c as i64).collect();
        idx.shuffle(&mut rng);
        let n_val = (spec.val_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_val] {
            splits[i] = Split::Val;
        }
    }
    let source = Dataset {
        features: sx,
        labels: sy.clone(),
        truth: sy,
        domains: vec![Domain::Source; spec.n_source],
        splits,
        num_classes: spec.num_classes,
    };

    let (tx, ty) = sample_domain(spec, spec.m_target, &tgt_means, &lift, &mut rng);
    let target = Dataset {
        features: tx,
        labels: vec![-1; spec.m_target],
        truth: ty,
        domains: vec![Domain::Target; spec.m_target],
        splits: vec![Split::Unlabeled; spec.m_target],
        num_classes: spec.num_classes,
    };
    Ok((source, target))
}

/// Tags exactly `n` random rows per class as labeled, a stratified
/// `test_fraction` of the rest as held-out test rows, and the remainder as
/// unlabeled. Labeled rows get their ground truth as visible label; all
/// others are hidden (`-1`).
pub fn split_nshot(target: &Dataset, n: usize, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Param(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let truth = target.scoring_labels()?;
    let mut out = target.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4e53_484f_5400_0000);
    for c in 0..target.num_classes {
        let mut idx: Vec<usize> = (0..target.len()).filter(|&i| truth[i] == c).collect();
        if idx.len() < n + 1 {
            return Err(Error::Data(format!(
                "class {c} has {} target samples, need at least {}",
                idx.len(),
                n + 1
            )));
        }
        idx.shuffle(&mut rng);
        let rest = idx.len() - n;
        let n_test = ((test_fraction * rest as f64).round() as usize).min(rest - 1);
        for (pos, &i) in idx.iter().enumerate() {
            out.truth[i] = c as i64;
            if pos < n {
                out.labels[i] = c as i64;
                out.splits[i] = Split::Labeled;
            } else {
                out.labels[i] = -1;
                out.splits[i] = if pos < n + n_test {
                    Split::Test
                } else {
                    Split::Unlabeled
                };
            }
        }
    }
    Ok(out)
}
