//! Graph label propagation over target-domain features.
//!
//! Nodes are ordered in three contiguous blocks: labeled target samples,
//! augmented (low-uncertainty) samples, and the remaining unlabeled samples.
//! Edge weights are `exp(cos(x_i, x_j))`, sparsified to the `k̂` strongest
//! neighbours per row, symmetrised as `(A + Aᵀ)/2` and normalised as
//! `D^(-1/2) W D^(-1/2)`. The normalisation keeps the spectral radius of
//! `αW` below one, so `(I - αW)` is always invertible.

use std::fmt::Write as _;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{
    cosine_similarity_matrix, matmul, solve_linear, symmetric_normalize, topk_sparsify_rows, Matrix,
};
use crate::losses::argmax;

/// Sizes of the three node blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphLayout {
    pub labeled: usize,
    pub augmented: usize,
    pub unlabeled: usize,
}

impl GraphLayout {
    pub fn len(&self) -> usize {
        self.labeled + self.augmented + self.unlabeled
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labeled_range(&self) -> Range<usize> {
        0..self.labeled
    }

    pub fn augmented_range(&self) -> Range<usize> {
        self.labeled..self.labeled + self.augmented
    }

    pub fn unlabeled_range(&self) -> Range<usize> {
        self.labeled + self.augmented..self.len()
    }

    /// Nodes carrying a seed label.
    pub fn seeded_range(&self) -> Range<usize> {
        0..self.labeled + self.augmented
    }
}

/// Normalised sparse similarity graph plus seed labels.
#[derive(Debug, Clone)]
pub struct PropagationGraph {
    pub features: Matrix,
    pub w_norm: Matrix,
    pub seed_labels: Matrix,
    pub seed_classes: Vec<usize>,
    pub layout: GraphLayout,
    pub k_hat: usize,
}

impl PropagationGraph {
    pub fn num_classes(&self) -> usize {
        self.seed_labels.cols()
    }

    /// Nonzero edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.w_norm.rows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.w_norm[(i, j)];
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

/// Raw similarities `exp(cos(x_i, x_j))` with a zeroed diagonal.
pub fn similarity_weights(features: &Matrix) -> Result<Matrix> {
    let mut w = cosine_similarity_matrix(features)?.map(f64::exp);
    for i in 0..w.rows() {
        w[(i, i)] = 0.0;
    }
    Ok(w)
}

/// Builds the propagation graph.
///
/// `seed_classes` holds one class per seeded node (labeled block followed by
/// augmented block). When `k_hat` is at least the number of other nodes the
/// graph is dense.
pub fn build_graph(
    features: &Matrix,
    layout: GraphLayout,
    seed_classes: &[usize],
    num_classes: usize,
    k_hat: usize,
) -> Result<PropagationGraph> {
    let n = features.rows();
    if layout.len() != n {
        return Err(Error::Shape(format!(
            "layout covers {} nodes, features have {n} rows",
            layout.len()
        )));
    }
    if seed_classes.len() != layout.labeled + layout.augmented {
        return Err(Error::Shape(format!(
            "{} seed classes for {} seeded nodes",
            seed_classes.len(),
            layout.labeled + layout.augmented
        )));
    }
    if k_hat == 0 {
        return Err(Error::Param("k_hat must be at least 1".into()));
    }
    if num_classes == 0 {
        return Err(Error::Param("need at least one class".into()));
    }
    if let Some(c) = seed_classes.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Param(format!(
            "seed class {c} out of range for {num_classes} classes"
        )));
    }

    let w = similarity_weights(features)?;
    let sparse = if n <= 1 {
        Matrix::zeros(n, n)
    } else if k_hat >= n - 1 {
        w
    } else {
        topk_sparsify_rows(&w, k_hat)?
    };
    let mut sym = sparse.clone();
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = 0.5 * (sparse[(i, j)] + sparse[(j, i)]);
        }
    }
    let w_norm = symmetric_normalize(&sym)?;

    let mut y = Matrix::zeros(n, num_classes);
    for (i, &c) in seed_classes.iter().enumerate() {
        y[(i, c)] = 1.0;
    }
    Ok(PropagationGraph {
        features: features.clone(),
        w_norm,
        seed_labels: y,
        seed_classes: seed_classes.to_vec(),
        layout,
        k_hat,
    })
}

/// Output of [`propagate`].
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    /// Propagated scores, one row per node.
    pub z: Matrix,
    /// Class for every node: seeds keep their seed class, the rest take the
    /// row argmax of `z`.
    pub labels: Vec<usize>,
    /// Row max over row sum; 0 for rows with no mass.
    pub confidence: Vec<f64>,
    pub layout: GraphLayout,
}

impl PropagationResult {
    /// Pseudo labels of the unlabeled block.
    pub fn pseudo_labels(&self) -> &[usize] {
        &self.labels[self.layout.unlabeled_range()]
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Param(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Closed-form propagation: solves `(I - αW) Z = Y`.
pub fn propagate(graph: &PropagationGraph, alpha: f64) -> Result<PropagationResult> {
    check_alpha(alpha)?;
    let n = graph.w_norm.rows();
    let mut a = graph.w_norm.scale(-alpha);
    for i in 0..n {
        a[(i, i)] += 1.0;
    }
    let z = solve_linear(&a, &graph.seed_labels).map_err(|e| match e {
        Error::Singular { .. } => Error::Propagation(e.to_string()),
        other => other,
    })?;

    let seeded = graph.layout.seeded_range().end;
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for (i, row) in z.iter_rows().enumerate() {
        let sum: f64 = row.iter().sum();
        let best = argmax(row);
        confidence.push(if sum > 1e-12 { row[best] / sum } else { 0.0 });
        labels.push(if i < seeded {
            graph.seed_classes[i]
        } else {
            best
        });
    }
    Ok(PropagationResult {
        z,
        labels,
        confidence,
        layout: graph.layout,
    })
}

/// Fixed-point iteration `Z ← αWZ + Y` from `Z₀ = Y`, an independent route
/// to the closed form.
pub fn propagate_iterative_oracle(
    graph: &PropagationGraph,
    alpha: f64,
    iters: usize,
) -> Result<Matrix> {
    check_alpha(alpha)?;
    let mut z = graph.seed_labels.clone();
    for _ in 0..iters {
        let mut next = matmul(&graph.w_norm, &z)?.scale(alpha);
        next.add_scaled(&graph.seed_labels, 1.0)?;
        z = next;
    }
    Ok(z)
}

/// Writes the edge list and score matrix as comma-separated text:
/// `edge,i,j,w` lines followed by `z,i,score_0,...` lines.
pub fn write_debug_dump(
    graph: &PropagationGraph,
    result: &PropagationResult,
    path: &Path,
) -> Result<()> {
    let mut s = String::new();
    let l = graph.layout;
    let _ = writeln!(
        s,
        "# nodes={} labeled={} augmented={} unlabeled={} k_hat={}",
        l.len(),
        l.labeled,
        l.augmented,
        l.unlabeled,
        graph.k_hat
    );
    for (i, j, w) in graph.edges() {
        let _ = writeln!(s, "edge,{i},{j},{w:.17e}");
    }
    for (i, row) in result.z.iter_rows().enumerate() {
        let _ = write!(s, "z,{i}");
        for v in row {
            let _ = write!(s, ",{v:.17e}");
        }
        let _ = writeln!(
            s,
            ",label={},conf={:.6}",
            result.labels[i], result.confidence[i]
        );
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
