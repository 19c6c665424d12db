//! Homophily and heterophily polynomial bases and their SVD signatures.
//!
//! Homophily bases are plain propagation powers `P^k X`. Heterophily bases
//! are unit-norm matrices built so that every pair meets at the same angle
//! `theta = pi/2 (1 - h)`, using a Lanczos-style orthonormal helper sequence.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{estimate_train_homophily, propagation_matrix, Graph, SparseOperator};
use crate::svd::{canonical_sign, right_svd};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_COMPONENTS: usize = 1;
pub const HOMOPHILY_CLIP: (f64, f64) = (0.01, 0.99);

/// Relative size below which a fresh Krylov direction is treated as exhausted.
const KRYLOV_BREAKDOWN: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct BasisSet {
    pub order: usize,
    pub homophily: Vec<DMatrix<f64>>,
    pub heterophily: Vec<DMatrix<f64>>,
    pub theta: f64,
    pub hhat: f64,
    /// `clamp_flags[k]` is set when order `k` could not meet the fixed angle.
    pub clamp_flags: Vec<bool>,
}

impl BasisSet {
    /// Builds both families with the train-edge homophily estimate.
    pub fn build(g: &Graph, order: usize) -> Result<Self> {
        Self::build_with_homophily(g, order, estimate_train_homophily(g))
    }

    pub fn build_with_homophily(g: &Graph, order: usize, hhat: f64) -> Result<Self> {
        let p = propagation_matrix(g);
        let homophily = homophily_bases(&p, g.features(), order);
        let het = heterophily_bases(&p, g.features(), order, hhat)?;
        Ok(BasisSet {
            order,
            homophily,
            heterophily: het.bases,
            theta: het.theta,
            hhat,
            clamp_flags: het.clamp_flags,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.homophily[0].nrows()
    }

    pub fn num_features(&self) -> usize {
        self.homophily[0].ncols()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamp_flags.iter().any(|&f| f)
    }
}

pub fn build_homophily_bases(g: &Graph, order: usize) -> Vec<DMatrix<f64>> {
    homophily_bases(&propagation_matrix(g), g.features(), order)
}

fn homophily_bases(p: &SparseOperator, x: &DMatrix<f64>, order: usize) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(x.clone());
    for k in 1..=order {
        let next = p.apply(&out[k - 1]);
        out.push(next);
    }
    out
}

#[derive(Debug, Clone)]
pub struct HeterophilyBases {
    pub bases: Vec<DMatrix<f64>>,
    pub theta: f64,
    pub clamp_flags: Vec<bool>,
}

/// Angle between heterophily bases for an estimated homophily `hhat`.
pub fn basis_angle(hhat: f64) -> f64 {
    FRAC_PI_2 * (1.0 - hhat.clamp(HOMOPHILY_CLIP.0, HOMOPHILY_CLIP.1))
}

pub fn build_heterophily_bases(g: &Graph, order: usize, hhat: f64) -> Result<HeterophilyBases> {
    heterophily_bases(&propagation_matrix(g), g.features(), order, hhat)
}

fn heterophily_bases(
    p: &SparseOperator,
    x: &DMatrix<f64>,
    order: usize,
    hhat: f64,
) -> Result<HeterophilyBases> {
    let x_norm = x.norm();
    if x_norm == 0.0 || !x_norm.is_finite() {
        return Err(Error::Degenerate(
            "heterophily bases need a nonzero feature matrix".into(),
        ));
    }
    let theta = basis_angle(hhat);
    let cos = theta.cos();

    let u0 = x / x_norm;
    let mut bases = Vec::with_capacity(order + 1);
    let mut clamp_flags = Vec::with_capacity(order + 1);
    clamp_flags.push(false);
    let mut v_prev = u0.clone();
    let mut v_prev2 = DMatrix::zeros(x.nrows(), x.ncols());
    let mut sum = u0.clone();
    bases.push(u0);
    let mut exhausted = false;

    for k in 1..=order {
        let kf = k as f64;
        let mut v = p.apply(&v_prev);
        let raw = v.norm();
        let a = v.dot(&v_prev);
        v -= &v_prev * a;
        let b = v.dot(&v_prev2);
        v -= &v_prev2 * b;
        let vn = v.norm();
        if exhausted || vn <= KRYLOV_BREAKDOWN * raw.max(f64::MIN_POSITIVE) {
            exhausted = true;
            v.fill(0.0);
        } else {
            v /= vn;
        }

        let centroid = &sum / kf;
        let prev = bases.last().expect("order 0 basis present");
        let lead = sum.dot(prev) / (kf * cos);
        let radicand = lead * lead - ((kf - 1.0) * cos + 1.0) / kf;
        let t = radicand.max(0.0).sqrt();
        clamp_flags.push(radicand < 0.0 || exhausted);

        let mut u = centroid + &v * t;
        let un = u.norm();
        u /= un;
        sum += &u;
        bases.push(u);
        v_prev2 = std::mem::replace(&mut v_prev, v);
    }
    Ok(HeterophilyBases {
        bases,
        theta,
        clamp_flags,
    })
}

/// Top-`t` right singular vectors of `b`, each scaled by `sigma_i / ||sigma||`.
pub fn svd_signature(b: &DMatrix<f64>, t: usize) -> Result<Vec<f64>> {
    let limit = b.nrows().min(b.ncols());
    if t == 0 || t > limit {
        return Err(Error::Config(format!(
            "signature components t = {t} must be in 1..={limit}"
        )));
    }
    let svd = right_svd(b)?;
    let total = svd
        .singular_values
        .iter()
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();
    let d = b.ncols();
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t {
        let mut v: Vec<f64> = svd.right_vectors.column(i).iter().copied().collect();
        canonical_sign(&mut v);
        let scale = if total > 0.0 {
            svd.singular_values[i] / total
        } else {
            0.0
        };
        out.extend(v.into_iter().map(|x| x * scale));
    }
    Ok(out)
}

/// Per-order homophily (`p`) and heterophily (`q`) signatures of one client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignatureBundle {
    pub components: usize,
    pub homophily: Vec<Vec<f64>>,
    pub heterophily: Vec<Vec<f64>>,
    pub clamp_flags: Vec<bool>,
}

impl SignatureBundle {
    pub fn order(&self) -> usize {
        self.homophily.len() - 1
    }

    /// Concatenation `[p^0, .., p^K]`.
    pub fn p_hat(&self) -> Vec<f64> {
        self.homophily.concat()
    }

    /// Concatenation `[q^0, .., q^K]`.
    pub fn q_hat(&self) -> Vec<f64> {
        self.heterophily.concat()
    }
}

pub fn client_signatures(bases: &BasisSet, t: usize) -> Result<SignatureBundle> {
    let sign = |list: &[DMatrix<f64>]| -> Result<Vec<Vec<f64>>> {
        list.iter().map(|b| svd_signature(b, t)).collect()
    };
    Ok(SignatureBundle {
        components: t,
        homophily: sign(&bases.homophily)?,
        heterophily: sign(&bases.heterophily)?,
        clamp_flags: bases.clamp_flags.clone(),
    })
}
