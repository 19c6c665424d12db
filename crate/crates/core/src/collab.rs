//! Server-side optimization of client collaboration strengths.
//!
//! For signature matrices `P` (homophily) and `Q` (heterophily) with one row
//! per client, the coordinator minimizes
//!
//! ```text
//! sum_ij ( ||R(p_i - p_j)||^2 - ||S(q_i - q_j)||^2 ) w_ij + gamma w_ij^2
//! ```
//!
//! over row-stochastic `W`, with `R = diag(r)` and `S = diag(s)` for `r`, `s`
//! on the simplex. Blocks are updated in turn: `r` and `s` have closed forms
//! (`r_i ∝ 1 / e_i`), and each row of `W` is a Euclidean projection onto the
//! simplex whose threshold is found by a piecewise-linear Newton iteration.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::SignatureBundle;
use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 1.0;
pub const DEFAULT_OUTER_ITERS: usize = 5;
/// Energies at or below this are floored before inversion.
pub const ENERGY_FLOOR: f64 = 1e-12;
pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITERS: usize = 100;
const STABLE_TOL: f64 = 1e-9;

/// Which terms enter the pairwise cost `t_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostTerms {
    #[default]
    Both,
    /// Homophily (sharing) term only.
    SharingOnly,
    /// Heterophily (complementing) term only.
    ComplementingOnly,
}

#[derive(Debug, Clone)]
pub struct CollabProblem {
    /// `M x D`, row `i` is client `i`'s homophily signature.
    pub p: DMatrix<f64>,
    /// `M x D`, row `i` is client `i`'s heterophily signature.
    pub q: DMatrix<f64>,
    pub gamma: f64,
}

impl CollabProblem {
    pub fn new(p: DMatrix<f64>, q: DMatrix<f64>, gamma: f64) -> Result<Self> {
        if p.shape() != q.shape() {
            return Err(Error::Dimension(format!(
                "P is {:?} but Q is {:?}",
                p.shape(),
                q.shape()
            )));
        }
        if p.nrows() == 0 {
            return Err(Error::Dimension(
                "collaboration needs at least one client".into(),
            ));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma = {gamma} must be positive")));
        }
        if p.iter().chain(q.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite signature entry".into()));
        }
        Ok(CollabProblem { p, q, gamma })
    }

    /// Stacks per-client vectors as rows.
    pub fn from_rows(p: &[Vec<f64>], q: &[Vec<f64>], gamma: f64) -> Result<Self> {
        let stack = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>> {
            let dim = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != dim) {
                return Err(Error::Dimension(
                    "signature lengths differ across clients".into(),
                ));
            }
            Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
        };
        Self::new(stack(p)?, stack(q)?, gamma)
    }

    pub fn num_clients(&self) -> usize {
        self.p.nrows()
    }

    pub fn dim(&self) -> usize {
        self.p.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollabSolution {
    /// Row-stochastic `M x M` collaboration matrix.
    #[serde(serialize_with = "serialize_rows")]
    pub w: DMatrix<f64>,
    pub r: Vec<f64>,
    pub s: Vec<f64>,
    /// Objective after each outer iteration.
    pub objective: Vec<f64>,
    /// Final outer iteration moved no entry of `W` by more than 1e-9.
    pub converged: bool,
}

pub(crate) fn serialize_rows<S: serde::Serializer>(
    m: &DMatrix<f64>,
    ser: S,
) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = ser.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        seq.serialize_element(&m.row(r).iter().copied().collect::<Vec<_>>())?;
    }
    seq.end()
}

/// Unnormalized Laplacian of the symmetrized, zero-diagonal collaboration graph.
pub fn laplacian_of_collab(w: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sym = (w + w.transpose()) * 0.5;
    sym.fill_diagonal(0.0);
    let mut l = -&sym;
    for i in 0..sym.nrows() {
        l[(i, i)] = sym.row(i).sum();
    }
    l
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub weights: Vec<f64>,
    /// Every energy was at or below the floor; weights fall back to uniform.
    pub degenerate: bool,
}

/// Minimizer of `sum_i a_i^2 e_i` on the simplex: `a_i ∝ 1 / e_i`.
pub fn attention_from_energies(energies: &[f64]) -> Attention {
    let dim = energies.len();
    if energies.iter().all(|&e| e <= ENERGY_FLOOR) {
        return Attention {
            weights: vec![1.0 / dim as f64; dim],
            degenerate: true,
        };
    }
    let inv: Vec<f64> = energies
        .iter()
        .map(|&e| 1.0 / e.max(ENERGY_FLOOR))
        .collect();
    let total: f64 = inv.iter().sum();
    Attention {
        weights: inv.into_iter().map(|x| x / total).collect(),
        degenerate: false,
    }
}

/// Column energies `x_{:,i}^T L x_{:,i}`.
pub fn column_energies(x: &DMatrix<f64>, laplacian: &DMatrix<f64>) -> Vec<f64> {
    let lx = laplacian * x;
    (0..x.ncols())
        .map(|i| x.column(i).dot(&lx.column(i)))
        .collect()
}

/// Homophily attention `r`.
pub fn update_attention(p: &DMatrix<f64>, laplacian: &DMatrix<f64>) -> Attention {
    attention_from_energies(&column_energies(p, laplacian))
}

/// Heterophily attention `s`; same closed form as `r` with `Q` in place of `P`.
pub fn update_attention_neg(q: &DMatrix<f64>, laplacian: &DMatrix<f64>) -> Attention {
    attention_from_energies(&column_energies(q, laplacian))
}

fn weighted_sq_dist(x: &DMatrix<f64>, weights: &[f64], i: usize, j: usize) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(l, &a)| {
            let diff = a * (x[(i, l)] - x[(j, l)]);
            diff * diff
        })
        .sum()
}

/// `t_ij = ||R(p_i - p_j)||^2 - ||S(q_i - q_j)||^2` for every `j`.
pub fn row_costs(
    problem: &CollabProblem,
    r: &[f64],
    s: &[f64],
    i: usize,
    terms: CostTerms,
) -> Vec<f64> {
    (0..problem.num_clients())
        .map(|j| {
            let share = match terms {
                CostTerms::ComplementingOnly => 0.0,
                _ => weighted_sq_dist(&problem.p, r, i, j),
            };
            let complement = match terms {
                CostTerms::SharingOnly => 0.0,
                _ => weighted_sq_dist(&problem.q, s, i, j),
            };
            share - complement
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonRoot {
    pub b_hat: f64,
    pub iterations: usize,
}

/// Threshold `b` with `sum_j (h_j - b)_+ = 1`, by piecewise-linear Newton.
///
/// For `sum h = 1` this is the root of `(1/M) sum (b - h_j)_+ - b`; the
/// residual used here is that function scaled by `M`, which keeps the same
/// root and iterates.
pub fn newton_b_hat(h: &[f64]) -> Result<NewtonRoot> {
    if h.is_empty() || h.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(
            "threshold search needs finite, nonempty h".into(),
        ));
    }
    let m = h.len() as f64;
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut b = max - 1.0 / m;
    let mut residual = f64::INFINITY;
    for it in 0..NEWTON_MAX_ITERS {
        let (sum, active) = h.iter().fold((0.0, 0usize), |(s, a), &x| {
            if x > b {
                (s + (x - b), a + 1)
            } else {
                (s, a)
            }
        });
        residual = sum - 1.0;
        if residual.abs() <= NEWTON_TOL {
            return Ok(NewtonRoot {
                b_hat: b,
                iterations: it,
            });
        }
        let next = b + residual / active as f64;
        if next == b {
            // exact root of the active piece up to rounding
            return Ok(NewtonRoot {
                b_hat: b,
                iterations: it,
            });
        }
        b = next;
    }
    Err(Error::Numerical(format!(
        "Newton threshold search did not converge in {NEWTON_MAX_ITERS} iterations \
         (residual {residual:.3e})"
    )))
}

/// Optimal row `w_i` for costs `t_i`: the simplex projection of `h`.
pub fn update_w_row(t: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let m = t.len() as f64;
    let mean_term = t.iter().sum::<f64>() / (2.0 * m * gamma);
    let h: Vec<f64> = t
        .iter()
        .map(|&tj| 1.0 / m - tj / (2.0 * gamma) + mean_term)
        .collect();
    let root = newton_b_hat(&h)?;
    Ok(h.iter().map(|&x| (x - root.b_hat).max(0.0)).collect())
}

/// Objective value for fixed `W`, `r`, `s`.
pub fn objective(
    problem: &CollabProblem,
    w: &DMatrix<f64>,
    r: &[f64],
    s: &[f64],
    terms: CostTerms,
) -> f64 {
    (0..problem.num_clients())
        .map(|i| {
            row_costs(problem, r, s, i, terms)
                .iter()
                .enumerate()
                .map(|(j, &t)| t * w[(i, j)] + problem.gamma * w[(i, j)] * w[(i, j)])
                .sum::<f64>()
        })
        .sum()
}

/// Alternating updates of `r`, `s` and `W` from a uniform start.
pub fn solve_collaboration(
    problem: &CollabProblem,
    outer_iters: usize,
    terms: CostTerms,
) -> Result<CollabSolution> {
    let m = problem.num_clients();
    let dim = problem.dim();
    let mut w = DMatrix::from_element(m, m, 1.0 / m as f64);
    let mut r = vec![1.0 / dim as f64; dim];
    let mut s = r.clone();
    let mut trace = Vec::with_capacity(outer_iters);
    let mut converged = false;
    for _ in 0..outer_iters {
        let lap = laplacian_of_collab(&w);
        r = update_attention(&problem.p, &lap).weights;
        s = update_attention_neg(&problem.q, &lap).weights;
        let mut next = DMatrix::zeros(m, m);
        for i in 0..m {
            let row = update_w_row(&row_costs(problem, &r, &s, i, terms), problem.gamma)?;
            for (j, x) in row.into_iter().enumerate() {
                next[(i, j)] = x;
            }
        }
        converged = (&next - &w).abs().max() <= STABLE_TOL;
        w = next;
        trace.push(objective(problem, &w, &r, &s, terms));
    }
    Ok(CollabSolution {
        w,
        r,
        s,
        objective: trace,
        converged,
    })
}

/// One collaboration matrix per basis order plus one for the classifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollabSet {
    pub per_order: Vec<CollabSolution>,
    pub mlp: CollabSolution,
}

impl CollabSet {
    /// Every matrix set to `1/M`.
    pub fn uniform(num_clients: usize, order: usize) -> Self {
        let sol = CollabSolution {
            w: DMatrix::from_element(num_clients, num_clients, 1.0 / num_clients as f64),
            r: Vec::new(),
            s: Vec::new(),
            objective: Vec::new(),
            converged: true,
        };
        CollabSet {
            per_order: vec![sol.clone(); order + 1],
            mlp: sol,
        }
    }
}

/// Solves the per-order problems on `(p^k, q^k)` and the classifier problem on `(p̂, q̂)`.
pub fn solve_all_orders(
    bundles: &[SignatureBundle],
    gamma: f64,
    outer_iters: usize,
    terms: CostTerms,
) -> Result<CollabSet> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Dimension("no client signatures".into()))?;
    let order = first.order();
    if bundles.iter().any(|b| b.order() != order) {
        return Err(Error::Dimension("clients disagree on basis order".into()));
    }

    let mut problems = Vec::with_capacity(order + 2);
    for k in 0..=order {
        let p: Vec<_> = bundles.iter().map(|b| b.homophily[k].clone()).collect();
        let q: Vec<_> = bundles.iter().map(|b| b.heterophily[k].clone()).collect();
        problems.push(CollabProblem::from_rows(&p, &q, gamma)?);
    }
    let p_hat: Vec<_> = bundles.iter().map(SignatureBundle::p_hat).collect();
    let q_hat: Vec<_> = bundles.iter().map(SignatureBundle::q_hat).collect();
    problems.push(CollabProblem::from_rows(&p_hat, &q_hat, gamma)?);

    let mut solved = problems
        .par_iter()
        .map(|p| solve_collaboration(p, outer_iters, terms))
        .collect::<Result<Vec<_>>>()?;
    let mlp = solved.pop().expect("classifier problem present");
    Ok(CollabSet {
        per_order: solved,
        mlp,
    })
}
