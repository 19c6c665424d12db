//! Communication rounds: local training, signature upload, collaboration
//! solve, per-order aggregation and best-validation selection.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    client_signatures, BasisSet, SignatureBundle, DEFAULT_COMPONENTS, DEFAULT_ORDER,
};
use crate::collab::{solve_all_orders, CollabSet, CostTerms, DEFAULT_GAMMA, DEFAULT_OUTER_ITERS};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{
    evaluate, train_local, LocalModel, Metrics, TrainConfig, DEFAULT_INIT_SCALE,
    DEFAULT_LEARNING_RATE, DEFAULT_LOCAL_EPOCHS, DEFAULT_TAU,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Fedgsp,
    Uniform,
    SharingOnly,
    ComplementingOnly,
    None,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 5] = [
        AggregationMode::Fedgsp,
        AggregationMode::Uniform,
        AggregationMode::SharingOnly,
        AggregationMode::ComplementingOnly,
        AggregationMode::None,
    ];

    fn cost_terms(self) -> Option<CostTerms> {
        match self {
            AggregationMode::Fedgsp => Some(CostTerms::Both),
            AggregationMode::SharingOnly => Some(CostTerms::SharingOnly),
            AggregationMode::ComplementingOnly => Some(CostTerms::ComplementingOnly),
            AggregationMode::Uniform | AggregationMode::None => None,
        }
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown aggregation mode `{s}`")))
    }
}

fn default_epochs() -> usize {
    DEFAULT_LOCAL_EPOCHS
}
fn default_order() -> usize {
    DEFAULT_ORDER
}
fn default_components() -> usize {
    DEFAULT_COMPONENTS
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_lr() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_init_scale() -> f64 {
    DEFAULT_INIT_SCALE
}
fn default_outer_iters() -> usize {
    DEFAULT_OUTER_ITERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    #[serde(default = "default_epochs")]
    pub local_epochs: usize,
    /// Maximum basis order `K`.
    #[serde(default = "default_order")]
    pub order: usize,
    /// Singular vectors kept per signature.
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub mode: AggregationMode,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    #[serde(default = "default_outer_iters")]
    pub outer_iters: usize,
}

impl FedConfig {
    pub fn new(clients: usize, rounds: usize, mode: AggregationMode, seed: u64) -> Self {
        FedConfig {
            clients,
            rounds,
            local_epochs: DEFAULT_LOCAL_EPOCHS,
            order: DEFAULT_ORDER,
            components: DEFAULT_COMPONENTS,
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed,
            mode,
            init_scale: DEFAULT_INIT_SCALE,
            outer_iters: DEFAULT_OUTER_ITERS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return bad("clients must be >= 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1".into());
        }
        if self.components == 0 {
            return bad("components must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma = {} must be positive", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau = {} must lie in [0, 1]", self.tau));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            ));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale = {} must be >= 0", self.init_scale));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.local_epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            init_scale: self.init_scale,
        }
    }
}

/// Order-`k` coefficients of client `m` become `sum_j W_k[m, j] coeffs[j][k]`.
pub fn aggregate_coefficients(coeffs: &[Vec<f64>], per_order: &[DMatrix<f64>]) -> Vec<Vec<f64>> {
    let m = coeffs.len();
    (0..m)
        .map(|i| {
            per_order
                .iter()
                .enumerate()
                .map(|(k, w)| weighted_sum((0..m).map(|j| (w[(i, j)], coeffs[j][k]))))
                .collect()
        })
        .collect()
}

/// Entrywise `sum_j W[m, j] mlp_j` for every client `m`.
pub fn aggregate_mlp(mlps: &[DMatrix<f64>], w: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let m = mlps.len();
    (0..m)
        .map(|i| {
            let (rows, cols) = mlps[0].shape();
            DMatrix::from_fn(rows, cols, |r, c| {
                weighted_sum((0..m).map(|j| (w[(i, j)], mlps[j][(r, c)])))
            })
        })
        .collect()
}

/// Skips zero weights so a one-hot row copies its source bit for bit.
fn weighted_sum(terms: impl Iterator<Item = (f64, f64)>) -> f64 {
    terms
        .filter(|&(w, _)| w != 0.0)
        .fold(None, |acc: Option<f64>, (w, x)| {
            let term = if w == 1.0 { x } else { w * x };
            Some(acc.map_or(term, |a| a + term))
        })
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub train: Metrics,
    pub val: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientMetrics>,
    /// Mean validation accuracy over clients.
    pub mean_val: f64,
    /// Mean test accuracy over clients.
    pub mean_test: f64,
    /// Outer-iteration objectives per order problem, classifier problem last.
    /// Empty when no collaboration problem was solved this round.
    pub objectives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub config: FedConfig,
    pub best_round: usize,
    pub per_client_test: Vec<Metrics>,
    pub mean_test: f64,
}

struct Client {
    graph: Graph,
    bases: BasisSet,
    signatures: SignatureBundle,
    model: LocalModel,
}

/// Federation state between rounds.
pub struct Federation {
    cfg: FedConfig,
    clients: Vec<Client>,
    round: usize,
    last_collab: Option<CollabSet>,
}

impl Federation {
    pub fn new(cfg: FedConfig, graphs: Vec<Graph>) -> Result<Self> {
        cfg.validate()?;
        if graphs.len() != cfg.clients {
            return Err(Error::Config(format!(
                "config names {} clients but {} graphs were supplied",
                cfg.clients,
                graphs.len()
            )));
        }
        let d = graphs[0].num_features();
        let c = graphs[0].num_classes();
        for (m, g) in graphs.iter().enumerate() {
            if g.num_features() != d || g.num_classes() != c {
                return Err(Error::Config(format!(
                    "client {m} has {} features / {} classes, client 0 has {d} / {c}",
                    g.num_features(),
                    g.num_classes()
                )));
            }
            let masks = g.masks();
            for (name, flags) in [
                ("train", &masks.train),
                ("val", &masks.val),
                ("test", &masks.test),
            ] {
                if !flags.iter().any(|&f| f) {
                    return Err(Error::Config(format!(
                        "client {m} has an empty {name} mask"
                    )));
                }
            }
            if cfg.components > g.num_nodes().min(d) {
                return Err(Error::Config(format!(
                    "client {m}: components = {} exceeds min(n, d) = {}",
                    cfg.components,
                    g.num_nodes().min(d)
                )));
            }
        }

        // shared initial parameters broadcast in round 1
        let init = LocalModel::init(cfg.order, d, c, cfg.tau, cfg.init_scale, cfg.seed);
        let clients = graphs
            .into_par_iter()
            .map(|graph| {
                let bases = BasisSet::build(&graph, cfg.order)?;
                let signatures = client_signatures(&bases, cfg.components)?;
                Ok(Client {
                    graph,
                    bases,
                    signatures,
                    model: init.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            cfg,
            clients,
            round: 0,
            last_collab: None,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn models(&self) -> Vec<LocalModel> {
        self.clients.iter().map(|c| c.model.clone()).collect()
    }

    pub fn bases(&self) -> Vec<&BasisSet> {
        self.clients.iter().map(|c| &c.bases).collect()
    }

    pub fn signatures(&self) -> Vec<SignatureBundle> {
        self.clients.iter().map(|c| c.signatures.clone()).collect()
    }

    /// Collaboration matrices used in the most recent aggregation.
    pub fn last_collab(&self) -> Option<&CollabSet> {
        self.last_collab.as_ref()
    }

    fn aggregate(&mut self) -> Result<Option<CollabSet>> {
        let m = self.clients.len();
        let collab = match self.cfg.mode {
            AggregationMode::None => return Ok(None),
            AggregationMode::Uniform => CollabSet::uniform(m, self.cfg.order),
            mode => {
                let terms = mode.cost_terms().expect("optimized mode");
                let set = solve_all_orders(
                    &self.signatures(),
                    self.cfg.gamma,
                    self.cfg.outer_iters,
                    terms,
                )?;
                let unsettled = set
                    .per_order
                    .iter()
                    .chain([&set.mlp])
                    .filter(|s| !s.converged)
                    .count();
                if unsettled > 0 {
                    log::debug!(
                        "round {}: {unsettled} collaboration problems still moving",
                        self.round
                    );
                }
                set
            }
        };
        let coeffs: Vec<_> = self
            .clients
            .iter()
            .map(|c| c.model.coeffs.clone())
            .collect();
        let mlps: Vec<_> = self.clients.iter().map(|c| c.model.w_mlp.clone()).collect();
        let per_order: Vec<_> = collab.per_order.iter().map(|s| s.w.clone()).collect();
        let new_coeffs = aggregate_coefficients(&coeffs, &per_order);
        let new_mlps = aggregate_mlp(&mlps, &collab.mlp.w);
        for ((client, c), w) in self.clients.iter_mut().zip(new_coeffs).zip(new_mlps) {
            client.model.coeffs = c;
            client.model.w_mlp = w;
        }
        Ok(Some(collab))
    }

    /// Aggregation (from round 2 on), local training and evaluation.
    ///
    /// Signatures are taken from the bases, which training never changes, so
    /// the ones computed at setup serve every round.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        self.round += 1;
        let collab = if self.round > 1 {
            self.aggregate()?
        } else {
            None
        };
        let objectives = match (&collab, self.cfg.mode.cost_terms()) {
            (Some(set), Some(_)) => set
                .per_order
                .iter()
                .chain(std::iter::once(&set.mlp))
                .map(|s| s.objective.clone())
                .collect(),
            _ => Vec::new(),
        };
        if collab.is_some() {
            self.last_collab = collab;
        }

        let train_cfg = self.cfg.train_config();
        let metrics = self
            .clients
            .par_iter_mut()
            .map(|client| {
                let g = &client.graph;
                client.model = train_local(
                    &client.model,
                    &client.bases,
                    g.labels(),
                    &g.masks().train,
                    &train_cfg,
                )?;
                let eval = |mask: &[bool]| evaluate(&client.model, &client.bases, g.labels(), mask);
                Ok(ClientMetrics {
                    train: eval(&g.masks().train)?,
                    val: eval(&g.masks().val)?,
                    test: eval(&g.masks().test)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let m = metrics.len() as f64;
        let record = RoundRecord {
            round: self.round,
            mean_val: metrics.iter().map(|c| c.val.accuracy).sum::<f64>() / m,
            mean_test: metrics.iter().map(|c| c.test.accuracy).sum::<f64>() / m,
            clients: metrics,
            objectives,
        };
        log::debug!(
            "round {}: mean val {:.4}, mean test {:.4}",
            record.round,
            record.mean_val,
            record.mean_test
        );
        Ok(record)
    }
}

/// Picks the round with the highest mean validation accuracy (earliest on ties).
pub fn final_report(cfg: &FedConfig, records: &[RoundRecord]) -> Result<FinalReport> {
    let best = records
        .iter()
        .fold(None::<&RoundRecord>, |best, r| match best {
            Some(b) if b.mean_val >= r.mean_val => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| Error::Config("no rounds were run".into()))?;
    Ok(FinalReport {
        config: cfg.clone(),
        best_round: best.round,
        per_client_test: best.clients.iter().map(|c| c.test.clone()).collect(),
        mean_test: best.mean_test,
    })
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub records: Vec<RoundRecord>,
    pub report: FinalReport,
    pub final_models: Vec<LocalModel>,
}

pub fn run_federation(cfg: &FedConfig, graphs: Vec<Graph>) -> Result<FederationOutcome> {
    let mut fed = Federation::new(cfg.clone(), graphs)?;
    let records = (0..cfg.rounds)
        .map(|_| fed.run_round())
        .collect::<Result<Vec<_>>>()?;
    let report = final_report(cfg, &records)?;
    Ok(FederationOutcome {
        records,
        report,
        final_models: fed.models(),
    })
}
