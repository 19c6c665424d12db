//! Contextual stochastic block model generator.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Masks};
use crate::rng::{stream_rng, Stream};

pub const TRAIN_FRACTION: f64 = 0.2;
pub const VAL_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsbmParams {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Norm of each class-mean vector.
    pub mu: f64,
    /// Standard deviation of the isotropic feature noise.
    pub sigma_f: f64,
    pub seed: u64,
}

impl CsbmParams {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.c < 2 || self.n < self.c {
            return Err(Error::Config(format!(
                "need n >= c >= 2 (n = {}, c = {})",
                self.n, self.c
            )));
        }
        if self.d < self.c {
            return Err(Error::Config(format!(
                "orthogonal class means need d >= c (d = {}, c = {})",
                self.d, self.c
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!(
                "mu = {} must be finite and >= 0",
                self.mu
            )));
        }
        if !(self.sigma_f > 0.0 && self.sigma_f.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_f = {} must be > 0",
                self.sigma_f
            )));
        }
        Ok(())
    }
}

/// Samples a graph whose homophily is steered by `p_in / p_out`.
pub fn generate_csbm(params: &CsbmParams) -> Result<Graph> {
    params.validate()?;
    let CsbmParams { n, c, d, .. } = *params;

    let mut labels: Vec<usize> = (0..n).map(|v| v % c).collect();
    labels.shuffle(&mut stream_rng(params.seed, Stream::Generation, 0));

    let mut edge_rng = stream_rng(params.seed, Stream::Generation, 1);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] {
                params.p_in
            } else {
                params.p_out
            };
            if edge_rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }

    let noise = Normal::new(0.0, params.sigma_f)
        .map_err(|e| Error::Config(format!("feature noise: {e}")))?;
    let mut feat_rng = stream_rng(params.seed, Stream::Generation, 2);
    let mut features = DMatrix::zeros(n, d);
    for v in 0..n {
        for j in 0..d {
            features[(v, j)] = noise.sample(&mut feat_rng);
        }
        features[(v, labels[v])] += params.mu;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(params.seed, Stream::Masks, 0));
    let n_train = (TRAIN_FRACTION * n as f64).floor() as usize;
    let n_val = (VAL_FRACTION * n as f64).floor() as usize;
    let mut masks = Masks::empty(n);
    for (rank, &v) in order.iter().enumerate() {
        if rank < n_train {
            masks.train[v] = true;
        } else if rank < n_train + n_val {
            masks.val[v] = true;
        } else {
            masks.test[v] = true;
        }
    }

    Graph::new(c, edges, features, labels, masks)
}
