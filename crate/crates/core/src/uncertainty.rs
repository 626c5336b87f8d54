//! MC-dropout uncertainty and selection of low-uncertainty propagation seeds.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{argmax, row_entropy};
use crate::model::{mc_dropout_predict, ModelParams};

/// Predictive distribution and its entropy for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub mean_proba: Matrix,
    /// Entropy of each mean prediction, in nats.
    pub entropy: Vec<f64>,
    pub predicted_class: Vec<usize>,
}

impl UncertaintyReport {
    /// Builds a report from already averaged probabilities.
    pub fn from_mean_proba(mean_proba: Matrix) -> Self {
        let entropy = mean_proba.iter_rows().map(row_entropy).collect();
        let predicted_class = mean_proba.iter_rows().map(argmax).collect();
        Self {
            mean_proba,
            entropy,
            predicted_class,
        }
    }

    pub fn len(&self) -> usize {
        self.entropy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy.is_empty()
    }
}

pub fn estimate_uncertainty(
    params: &ModelParams,
    x_unlabeled: &Matrix,
    passes: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<UncertaintyReport> {
    if x_unlabeled.rows() == 0 {
        return Err(Error::Param("uncertainty of an empty batch".into()));
    }
    let mean = mc_dropout_predict(params, x_unlabeled, passes, dropout_rate, seed)?;
    Ok(UncertaintyReport::from_mean_proba(mean))
}

/// One low-uncertainty sample per predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSeeds {
    /// Row indices into the unlabeled batch, ordered by class.
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
}

impl AugmentedSeeds {
    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            classes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// For every class that is predicted at least once, picks the sample with the
/// smallest entropy (ties: lowest index). Classes nobody predicts get no seed.
pub fn select_low_uncertainty(report: &UncertaintyReport, num_classes: usize) -> AugmentedSeeds {
    let mut best: Vec<Option<usize>> = vec![None; num_classes];
    for (i, (&c, &h)) in report
        .predicted_class
        .iter()
        .zip(&report.entropy)
        .enumerate()
    {
        if c >= num_classes {
            continue;
        }
        match best[c] {
            Some(j) if report.entropy[j] <= h => {}
            _ => best[c] = Some(i),
        }
    }
    let mut seeds = AugmentedSeeds::empty();
    for (c, i) in best.into_iter().enumerate() {
        if let Some(i) = i {
            seeds.indices.push(i);
            seeds.classes.push(c);
        }
    }
    seeds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, predict_proba, Activation};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(rows: &[&[f64]]) -> UncertaintyReport {
        UncertaintyReport::from_mean_proba(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn entropy_extremes() {
        let r = report(&[&[0.25; 4], &[0.0, 0.0, 1.0, 0.0]]);
        assert!((r.entropy[0] - 4f64.ln()).abs() < 1e-12);
        assert_eq!(r.entropy[1], 0.0);
        assert_eq!(r.predicted_class, vec![0, 2]);
    }

    #[test]
    fn zero_dropout_matches_deterministic_entropy() {
        let m = init_model(&[3, 6, 4, 3], Activation::Tanh, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x =
            Matrix::from_vec(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let r = estimate_uncertainty(&m, &x, 10, 0.0, 5).unwrap();
        let det = UncertaintyReport::from_mean_proba(predict_proba(&m, &x).unwrap());
        for (a, b) in r.entropy.iter().zip(&det.entropy) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            estimate_uncertainty(&m, &Matrix::zeros(0, 3), 10, 0.5, 5),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn selection_examples() {
        let all_zero = report(&[&[0.9, 0.1], &[0.6, 0.4], &[0.8, 0.2]]);
        let s = select_low_uncertainty(&all_zero, 2);
        assert_eq!(s.indices, vec![0]);
        assert_eq!(s.classes, vec![0]);

        let cover = report(&[
            &[0.8, 0.1, 0.1],
            &[0.1, 0.8, 0.1],
            &[0.1, 0.1, 0.8],
            &[0.4, 0.3, 0.3],
        ]);
        assert_eq!(select_low_uncertainty(&cover, 3).len(), 3);

        let tie = report(&[&[0.3, 0.7], &[0.3, 0.7]]);
        assert_eq!(select_low_uncertainty(&tie, 2).indices, vec![0]);
    }

    proptest! {
        #[test]
        fn selected_seed_is_minimal(rows in 1usize..30, k in 2usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * k).map(|_| rng.random_range(0.01..1.0)).collect();
            let mut m = Matrix::from_vec(rows, k, data).unwrap();
            for i in 0..rows {
                let s: f64 = m.row(i).iter().sum();
                m.row_mut(i).iter_mut().for_each(|v| *v /= s);
            }
            let r = UncertaintyReport::from_mean_proba(m);
            let s = select_low_uncertainty(&r, k);
            prop_assert!(s.len() <= k);
            let covered: std::collections::BTreeSet<_> = r.predicted_class.iter().collect();
            prop_assert_eq!(s.len(), covered.len());
            for (&i, &c) in s.indices.iter().zip(&s.classes) {
                prop_assert_eq!(r.predicted_class[i], c);
                for j in 0..rows {
                    if r.predicted_class[j] == c {
                        prop_assert!(r.entropy[i] <= r.entropy[j]);
                    }
                }
            }
        }
    }
}
