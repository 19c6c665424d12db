//! Diagnostics over the collaboration graph and trained filters.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::basis::{BasisSet, SignatureBundle};
use crate::collab::{laplacian_of_collab, serialize_rows};
use crate::error::{Error, Result};
use crate::graph::{normalized_laplacian, Graph};
use crate::model::{forward, LocalModel};

/// Largest graph accepted by the dense spectral profile.
pub const PROFILE_MAX_NODES: usize = 2000;
/// Pairs at or above this similarity count as similar.
pub const SIMILARITY_THRESHOLD: f64 = 0.5;

/// Client parameters as node signals on the collaboration graph.
#[derive(Debug, Clone)]
pub struct CollabGraphView {
    /// `M x D`, row `i` is client `i`'s flattened parameters.
    pub theta: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl CollabGraphView {
    pub fn new(theta: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() || w.nrows() != theta.nrows() {
            return Err(Error::Dimension(format!(
                "theta is {:?}, W is {:?}",
                theta.shape(),
                w.shape()
            )));
        }
        Ok(CollabGraphView { theta, w })
    }

    pub fn from_models(models: &[LocalModel], w: DMatrix<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = models.iter().map(LocalModel::flatten).collect();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension(
                "models have different parameter counts".into(),
            ));
        }
        Self::new(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]), w)
    }

    pub fn laplacian(&self) -> DMatrix<f64> {
        laplacian_of_collab(&self.w)
    }

    /// Symmetrized, zero-diagonal weights.
    pub fn symmetric_weights(&self) -> DMatrix<f64> {
        let mut sym = (&self.w + self.w.transpose()) * 0.5;
        sym.fill_diagonal(0.0);
        sym
    }
}

/// `Tr(Θᵀ L Θ) / 2`.
pub fn frequency_component(view: &CollabGraphView) -> f64 {
    let lt = view.laplacian() * &view.theta;
    0.5 * view.theta.dot(&lt)
}

/// `sum_ij W_ij ||θ_i - θ_j||^2` over ordered pairs; equals four times the
/// frequency component.
pub fn heterogeneity(view: &CollabGraphView) -> f64 {
    let sym = view.symmetric_weights();
    let m = view.theta.nrows();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if sym[(i, j)] != 0.0 {
                let diff = view.theta.row(i) - view.theta.row(j);
                total += sym[(i, j)] * diff.norm_squared();
            }
        }
    }
    total
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pairwise similarities from stacked homophily signatures.
pub fn similarity_from_vectors(vectors: &[Vec<f64>]) -> DMatrix<f64> {
    let m = vectors.len();
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            1.0
        } else {
            (1.0 + cosine(&vectors[i], &vectors[j])) / 2.0
        }
    })
}

/// `S_ij = (1 + cos(p̂_i, p̂_j)) / 2` with unit diagonal.
pub fn similarity_matrix(bundles: &[SignatureBundle]) -> DMatrix<f64> {
    let vectors: Vec<Vec<f64>> = bundles.iter().map(SignatureBundle::p_hat).collect();
    similarity_from_vectors(&vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioReport {
    pub r_s: f64,
    pub r_c: f64,
    #[serde(rename = "S", serialize_with = "serialize_rows")]
    pub similarity: DMatrix<f64>,
}

/// Similar and complementary pair fractions over `edges`, or over all
/// unordered pairs when `edges` is `None`.
pub fn ratios(s: &DMatrix<f64>, edges: Option<&[(usize, usize)]>) -> Result<RatioReport> {
    let m = s.nrows();
    let all: Vec<(usize, usize)>;
    let pairs = match edges {
        Some(e) => e,
        None => {
            all = (0..m)
                .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    if pairs.is_empty() {
        return Err(Error::Degenerate(
            "ratios need at least one client pair".into(),
        ));
    }
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= m || j >= m || i == j) {
        return Err(Error::validation(
            "edges",
            format!("invalid client pair ({i},{j})"),
        ));
    }
    let similar = pairs
        .iter()
        .filter(|&&(i, j)| s[(i, j)] >= SIMILARITY_THRESHOLD)
        .count();
    let r_s = similar as f64 / pairs.len() as f64;
    Ok(RatioReport {
        r_s,
        r_c: 1.0 - r_s,
        similarity: s.clone(),
    })
}

/// Filtered-signal energy per Laplacian eigenvalue, ascending in `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralProfile {
    pub points: Vec<(f64, f64)>,
}

impl SpectralProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,magnitude\n");
        for (l, m) in &self.points {
            out.push_str(&format!("{l},{m}\n"));
        }
        out
    }

    /// Share of energy strictly below `lambda`.
    pub fn energy_below(&self, lambda: f64) -> f64 {
        self.points
            .iter()
            .filter(|(l, _)| *l < lambda)
            .map(|(_, m)| m)
            .sum()
    }
}

pub fn spectral_profile(
    model: &LocalModel,
    bases: &BasisSet,
    g: &Graph,
) -> Result<SpectralProfile> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::validation(
            "graph",
            "spectral profile needs at least one node",
        ));
    }
    if n > PROFILE_MAX_NODES {
        return Err(Error::validation(
            "graph",
            format!("{n} nodes exceeds the dense profile limit of {PROFILE_MAX_NODES}"),
        ));
    }
    if bases.num_nodes() != n {
        return Err(Error::Dimension(
            "bases were built for a different graph".into(),
        ));
    }
    let (z, _) = forward(model, bases)?;
    let eig = normalized_laplacian(g).to_dense().symmetric_eigen();
    // Φᵀ Z: row f holds the projections of every column onto eigenvector f
    let coeffs = eig.eigenvectors.transpose() * &z;
    let mut points: Vec<(f64, f64)> = (0..n)
        .map(|f| (eig.eigenvalues[f], coeffs.row(f).norm_squared()))
        .collect();
    let total: f64 = points.iter().map(|p| p.1).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Degenerate("filtered signal has zero energy".into()));
    }
    points.iter_mut().for_each(|p| p.1 /= total);
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(SpectralProfile { points })
}
