//! Per-client spectral filter model with a linear classifier.
//!
//! The filtered signal is `Z = sum_k w_k (tau H^k + (1 - tau) U^k)` with one
//! scalar coefficient per order, and the logits are `Z W` for a `d x c`
//! classifier matrix `W`. Class probabilities come from a softmax inside the
//! cross-entropy loss.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};
use crate::metrics::{argmax, roc_auc};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_LOCAL_EPOCHS: usize = 1;
pub const DEFAULT_INIT_SCALE: f64 = 0.1;
pub const MAX_STEP_HALVINGS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel {
    /// One filter coefficient per basis order `0..=K`.
    pub coeffs: Vec<f64>,
    /// `d x c` classifier.
    pub w_mlp: DMatrix<f64>,
    pub tau: f64,
}

impl LocalModel {
    /// `w_0 = 1`, higher orders 0, classifier uniform in `(-scale, scale)`.
    pub fn init(order: usize, d: usize, c: usize, tau: f64, init_scale: f64, seed: u64) -> Self {
        let mut coeffs = vec![0.0; order + 1];
        coeffs[0] = 1.0;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let w_mlp = DMatrix::from_fn(d, c, |_, _| {
            if init_scale > 0.0 {
                rng.random_range(-init_scale..init_scale)
            } else {
                0.0
            }
        });
        LocalModel { coeffs, w_mlp, tau }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn num_classes(&self) -> usize {
        self.w_mlp.ncols()
    }

    /// Flattened parameters: coefficients then the row-major classifier.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.coeffs.clone();
        for r in 0..self.w_mlp.nrows() {
            out.extend(self.w_mlp.row(r).iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|x| x.is_finite()) && self.w_mlp.iter().all(|x| x.is_finite())
    }

    fn check(&self, b: &BasisSet) -> Result<()> {
        if b.order != self.order() {
            return Err(Error::Dimension(format!(
                "model order {} vs basis order {}",
                self.order(),
                b.order
            )));
        }
        if b.num_features() != self.w_mlp.nrows() {
            return Err(Error::Dimension(format!(
                "classifier expects {} features, bases have {}",
                self.w_mlp.nrows(),
                b.num_features()
            )));
        }
        Ok(())
    }
}

/// `tau H^k + (1 - tau) U^k` for one order.
pub fn mixed_basis(b: &BasisSet, tau: f64, k: usize) -> DMatrix<f64> {
    &b.homophily[k] * tau + &b.heterophily[k] * (1.0 - tau)
}

/// Returns the filtered signal `Z` and the logits.
pub fn forward(m: &LocalModel, b: &BasisSet) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    m.check(b)?;
    let mut z = DMatrix::zeros(b.num_nodes(), b.num_features());
    for (k, &w) in m.coeffs.iter().enumerate() {
        z += mixed_basis(b, m.tau, k) * w;
    }
    let logits = &z * &m.w_mlp;
    Ok((z, logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub coeffs: Vec<f64>,
    pub mlp: DMatrix<f64>,
}

fn softmax_row(logits: &DMatrix<f64>, r: usize) -> Vec<f64> {
    let max = logits.row(r).max();
    let exp: Vec<f64> = logits.row(r).iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn check_targets(labels: &[usize], mask: &[bool], n: usize, c: usize) -> Result<Vec<usize>> {
    if labels.len() != n || mask.len() != n {
        return Err(Error::Dimension(format!(
            "labels/mask length {}/{} vs {n} nodes",
            labels.len(),
            mask.len()
        )));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("loss needs a nonempty mask".into()));
    }
    if let Some(&i) = rows.iter().find(|&&i| labels[i] >= c) {
        return Err(Error::Dimension(format!(
            "label {} >= {c} classes",
            labels[i]
        )));
    }
    Ok(rows)
}

fn masked_loss(logits: &DMatrix<f64>, labels: &[usize], rows: &[usize]) -> f64 {
    rows.iter()
        .map(|&r| {
            let max = logits.row(r).max();
            let lse = max
                + logits
                    .row(r)
                    .iter()
                    .map(|&x| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            lse - logits[(r, labels[r])]
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Mean masked cross-entropy.
pub fn loss(m: &LocalModel, b: &BasisSet, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let (_, logits) = forward(m, b)?;
    let rows = check_targets(labels, mask, b.num_nodes(), m.num_classes())?;
    Ok(masked_loss(&logits, labels, &rows))
}

/// Mean masked cross-entropy and its analytic gradients.
pub fn loss_and_gradients(
    m: &LocalModel,
    b: &BasisSet,
    labels: &[usize],
    mask: &[bool],
) -> Result<Gradients> {
    let (z, logits) = forward(m, b)?;
    let rows = check_targets(labels, mask, b.num_nodes(), m.num_classes())?;
    let scale = 1.0 / rows.len() as f64;

    // G = (softmax - onehot) / |mask| on masked rows, zero elsewhere
    let mut g = DMatrix::zeros(logits.nrows(), logits.ncols());
    for &r in &rows {
        for (j, p) in softmax_row(&logits, r).into_iter().enumerate() {
            g[(r, j)] = p * scale;
        }
        g[(r, labels[r])] -= scale;
    }

    let grad_mlp = z.transpose() * &g;
    let back = &g * m.w_mlp.transpose();
    let grad_coeffs = (0..m.coeffs.len())
        .map(|k| mixed_basis(b, m.tau, k).dot(&back))
        .collect();
    Ok(Gradients {
        loss: masked_loss(&logits, labels, &rows),
        coeffs: grad_coeffs,
        mlp: grad_mlp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_LOCAL_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            init_scale: DEFAULT_INIT_SCALE,
        }
    }
}

fn step(m: &LocalModel, g: &Gradients, eta: f64) -> LocalModel {
    LocalModel {
        coeffs: m
            .coeffs
            .iter()
            .zip(&g.coeffs)
            .map(|(w, d)| w - eta * d)
            .collect(),
        w_mlp: &m.w_mlp - &g.mlp * eta,
        tau: m.tau,
    }
}

/// Full-batch gradient descent on the train mask.
///
/// A step that raises the loss is halved up to three times and then taken
/// regardless.
pub fn train_local(
    m: &LocalModel,
    b: &BasisSet,
    labels: &[usize],
    train_mask: &[bool],
    cfg: &TrainConfig,
) -> Result<LocalModel> {
    let mut current = m.clone();
    for _ in 0..cfg.epochs {
        let grads = loss_and_gradients(&current, b, labels, train_mask)?;
        let mut eta = cfg.learning_rate;
        let mut next = step(&current, &grads, eta);
        for _ in 0..MAX_STEP_HALVINGS {
            if loss(&next, b, labels, train_mask)? <= grads.loss {
                break;
            }
            eta *= 0.5;
            next = step(&current, &grads, eta);
        }
        if !next.is_finite() {
            return Err(Error::Numerical(
                "training produced non-finite parameters".into(),
            ));
        }
        current = next;
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Present for binary tasks when both classes occur in the mask.
    pub auc: Option<f64>,
    pub loss: f64,
}

pub fn evaluate(m: &LocalModel, b: &BasisSet, labels: &[usize], mask: &[bool]) -> Result<Metrics> {
    let (_, logits) = forward(m, b)?;
    let rows = check_targets(labels, mask, b.num_nodes(), m.num_classes())?;
    let correct = rows
        .iter()
        .filter(|&&r| argmax(logits.row(r).iter().copied()) == labels[r])
        .count();
    let auc = if m.num_classes() == 2 {
        let scores: Vec<f64> = rows
            .iter()
            .map(|&r| logits[(r, 1)] - logits[(r, 0)])
            .collect();
        let positive: Vec<bool> = rows.iter().map(|&r| labels[r] == 1).collect();
        roc_auc(&scores, &positive)
    } else {
        None
    };
    Ok(Metrics {
        accuracy: correct as f64 / rows.len() as f64,
        auc,
        loss: masked_loss(&logits, labels, &rows),
    })
}

/// Serialized model: `{coeffs, w_mlp (row-major), tau, K}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub coeffs: Vec<f64>,
    pub w_mlp: Vec<f64>,
    pub tau: f64,
    #[serde(rename = "K")]
    pub order: usize,
}

impl ModelCheckpoint {
    pub fn from_model(m: &LocalModel) -> Self {
        ModelCheckpoint {
            coeffs: m.coeffs.clone(),
            w_mlp: m.flatten()[m.coeffs.len()..].to_vec(),
            tau: m.tau,
            order: m.order(),
        }
    }

    /// Rebuilds the model for `d` input features.
    pub fn into_model(self, d: usize) -> Result<LocalModel> {
        if self.coeffs.len() != self.order + 1 {
            return Err(Error::validation(
                "coeffs",
                format!("expected K + 1 = {} coefficients", self.order + 1),
            ));
        }
        if d == 0 || !self.w_mlp.len().is_multiple_of(d) || self.w_mlp.is_empty() {
            return Err(Error::validation(
                "w_mlp",
                format!("{} entries do not form a {d}-row matrix", self.w_mlp.len()),
            ));
        }
        let c = self.w_mlp.len() / d;
        Ok(LocalModel {
            coeffs: self.coeffs,
            w_mlp: DMatrix::from_row_slice(d, c, &self.w_mlp),
            tau: self.tau,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Masks};

    fn toy() -> (Graph, BasisSet) {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.2, 0.9]);
        let g = Graph::new(
            2,
            vec![(0, 1), (1, 2), (2, 3)],
            x,
            vec![0, 0, 1, 1],
            Masks::empty(4),
        )
        .unwrap();
        let b = BasisSet::build_with_homophily(&g, 2, 0.5).unwrap();
        (g, b)
    }

    #[test]
    fn zero_coefficients_give_zero_logits() {
        let (_, b) = toy();
        let mut m = LocalModel::init(2, 2, 2, 0.5, 0.1, 1);
        m.coeffs = vec![0.0; 3];
        let (z, logits) = forward(&m, &b).unwrap();
        assert!(z.iter().chain(logits.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn identity_chain_returns_features() {
        let (g, b) = toy();
        let m = LocalModel {
            coeffs: vec![1.0, 0.0, 0.0],
            w_mlp: DMatrix::identity(2, 2),
            tau: 1.0,
        };
        let (_, logits) = forward(&m, &b).unwrap();
        assert_eq!(logits, *g.features());
    }

    #[test]
    fn order_mismatch_is_rejected() {
        let (_, b) = toy();
        let m = LocalModel::init(3, 2, 2, 0.5, 0.1, 1);
        assert!(matches!(forward(&m, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let (g, b) = toy();
        let m = LocalModel {
            coeffs: vec![1.0, 0.0, 0.0],
            w_mlp: DMatrix::zeros(2, 3),
            tau: 0.5,
        };
        let l = loss(&m, &b, &[0, 1, 2, 0], &[true; 4]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let _ = g;
    }

    #[test]
    fn empty_mask_is_an_error() {
        let (g, b) = toy();
        let m = LocalModel::init(2, 2, 2, 0.5, 0.1, 1);
        assert!(loss_and_gradients(&m, &b, g.labels(), &[false; 4]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (g, b) = toy();
        let m = LocalModel::init(2, 2, 2, 0.5, 0.1, 1);
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(
            train_local(&m, &b, g.labels(), &[true; 4], &cfg).unwrap(),
            m
        );
    }

    #[test]
    fn saturated_predictions_have_vanishing_gradients() {
        let (g, b) = toy();
        let m = LocalModel {
            coeffs: vec![1.0, 0.0, 0.0],
            w_mlp: DMatrix::from_row_slice(2, 2, &[200.0, -200.0, -200.0, 200.0]),
            tau: 1.0,
        };
        // label each node with its argmax so the margins are extreme and correct
        let (_, logits) = forward(&m, &b).unwrap();
        let labels: Vec<usize> = (0..4)
            .map(|r| argmax(logits.row(r).iter().copied()))
            .collect();
        let mask = [true, false, true, true];
        let grads = loss_and_gradients(&m, &b, &labels, &mask).unwrap();
        assert!(grads.mlp.norm() <= 1e-6);
        assert!(grads.coeffs.iter().all(|g| g.abs() <= 1e-6));
        let _ = g;
    }

    #[test]
    fn evaluate_examples() {
        let (g, b) = toy();
        let m = LocalModel {
            coeffs: vec![1.0, 0.0, 0.0],
            w_mlp: DMatrix::identity(2, 2),
            tau: 1.0,
        };
        let metrics = evaluate(&m, &b, g.labels(), &[true; 4]).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
        assert_eq!(metrics.auc, Some(1.0));

        let flat = LocalModel {
            w_mlp: DMatrix::zeros(2, 2),
            ..m
        };
        let metrics = evaluate(&flat, &b, g.labels(), &[true; 4]).unwrap();
        assert_eq!(metrics.auc, Some(0.5));
        // ties go to class 0
        assert_eq!(metrics.accuracy, 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = LocalModel::init(2, 3, 4, 0.3, 0.1, 9);
        let ck = ModelCheckpoint::from_model(&m);
        let text = serde_json::to_string(&ck).unwrap();
        assert!(text.contains("\"K\":2"));
        let back: ModelCheckpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_model(3).unwrap(), m);
    }
}
