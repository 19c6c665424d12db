//! Undirected attributed graphs, normalized operators and homophily measures.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint node splits stored as membership flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Masks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Masks {
    pub fn empty(n: usize) -> Self {
        Masks {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn from_ids(n: usize, train: &[usize], val: &[usize], test: &[usize]) -> Result<Self> {
        let mut masks = Masks::empty(n);
        for (name, ids, flags) in [
            ("masks.train", train, &mut masks.train),
            ("masks.val", val, &mut masks.val),
            ("masks.test", test, &mut masks.test),
        ] {
            for &id in ids {
                if id >= n {
                    return Err(Error::validation(
                        name,
                        format!("node {id} out of range (num_nodes = {n})"),
                    ));
                }
                flags[id] = true;
            }
        }
        masks.check_disjoint()?;
        Ok(masks)
    }

    fn check_disjoint(&self) -> Result<()> {
        for v in 0..self.train.len() {
            let pairs = [
                (self.train[v] && self.val[v], "train/val"),
                (self.train[v] && self.test[v], "train/test"),
                (self.val[v] && self.test[v], "val/test"),
            ];
            for (hit, which) in pairs {
                if hit {
                    return Err(Error::validation(
                        "masks",
                        format!("{which} overlap at node {v}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn ids(flags: &[bool]) -> Vec<usize> {
        flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

/// An undirected, unweighted graph with node features, labels and splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_classes: usize,
    edges: Vec<(usize, usize)>,
    features: DMatrix<f64>,
    labels: Vec<usize>,
    masks: Masks,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph, enforcing edge, label and mask invariants.
    pub fn new(
        num_classes: usize,
        edges: Vec<(usize, usize)>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
        masks: Masks,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(Error::validation(
                "labels",
                format!("expected {n} labels, found {}", labels.len()),
            ));
        }
        if let Some((v, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::validation(
                "labels",
                format!("node {v} has class {y} >= num_classes {num_classes}"),
            ));
        }
        if masks.train.len() != n || masks.val.len() != n || masks.test.len() != n {
            return Err(Error::validation(
                "masks",
                "mask length differs from num_nodes",
            ));
        }
        masks.check_disjoint()?;
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("features", "non-finite feature value"));
        }

        let mut seen = HashSet::with_capacity(edges.len());
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edges {
            if u >= n || v >= n {
                return Err(Error::validation(
                    "edges",
                    format!("edge ({u},{v}) has endpoint >= num_nodes {n}"),
                ));
            }
            if u == v {
                return Err(Error::validation("edges", format!("self-loop at node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::validation(
                    "edges",
                    format!("duplicate edge ({u},{v})"),
                ));
            }
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        Ok(Graph {
            num_classes,
            edges,
            features,
            labels,
            masks,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn masks(&self) -> &Masks {
        &self.masks
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// Returns a copy with the feature matrix replaced (same row count).
    pub fn with_features(&self, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != self.num_nodes() {
            return Err(Error::Dimension(format!(
                "feature rows {} != num_nodes {}",
                features.nrows(),
                self.num_nodes()
            )));
        }
        let mut g = self.clone();
        g.features = features;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        file.into_graph()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphFile::from(self)).expect("graph serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// On-disk graph layout. Field order is the write order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub masks: MaskFile,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl GraphFile {
    pub fn into_graph(self) -> Result<Graph> {
        let n = self.num_nodes;
        if self.features.len() != n {
            return Err(Error::validation(
                "features",
                format!("expected {n} rows, found {}", self.features.len()),
            ));
        }
        let d = self.features.first().map_or(0, Vec::len);
        if let Some(i) = self.features.iter().position(|row| row.len() != d) {
            return Err(Error::validation(
                "features",
                format!(
                    "row {i} has {} columns, expected {d}",
                    self.features[i].len()
                ),
            ));
        }
        let features = DMatrix::from_fn(n, d, |i, j| self.features[i][j]);
        let masks = Masks::from_ids(n, &self.masks.train, &self.masks.val, &self.masks.test)?;
        let edges = self.edges.iter().map(|&[u, v]| (u, v)).collect();
        Graph::new(self.num_classes, edges, features, self.labels, masks)
    }
}

impl From<&Graph> for GraphFile {
    fn from(g: &Graph) -> Self {
        let f = g.features();
        GraphFile {
            num_nodes: g.num_nodes(),
            num_classes: g.num_classes(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            features: (0..f.nrows())
                .map(|i| f.row(i).iter().copied().collect())
                .collect(),
            labels: g.labels().to_vec(),
            masks: MaskFile {
                train: Masks::ids(&g.masks().train),
                val: Masks::ids(&g.masks().val),
                test: Masks::ids(&g.masks().test),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Laplacian,
    Propagation,
}

/// Symmetric sparse operator in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    kind: OperatorKind,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    fn from_graph(g: &Graph, kind: OperatorKind) -> Self {
        let n = g.num_nodes();
        // D^{-1/2} with 0 on isolated nodes
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|v| match g.degree(v) {
                0 => 0.0,
                d => 1.0 / (d as f64).sqrt(),
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for u in 0..n {
            let mut diag_done = kind == OperatorKind::Propagation;
            for &v in g.neighbors(u) {
                if !diag_done && v > u {
                    cols.push(u);
                    vals.push(1.0);
                    diag_done = true;
                }
                let p = inv_sqrt[u] * inv_sqrt[v];
                cols.push(v);
                vals.push(match kind {
                    OperatorKind::Laplacian => -p,
                    OperatorKind::Propagation => p,
                });
            }
            if !diag_done {
                cols.push(u);
                vals.push(1.0);
            }
            row_ptr.push(cols.len());
        }
        SparseOperator {
            kind,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(row, col, value)` triples in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim()).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.row_ptr[row]..self.row_ptr[row + 1];
        match self.cols[range.clone()].binary_search(&col) {
            Ok(k) => self.vals[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Sparse-times-dense product.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.dim(), "operator/matrix row mismatch");
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for c in 0..x.ncols() {
            let xc = x.column(c);
            let mut oc = out.column_mut(c);
            for r in 0..self.dim() {
                let mut acc = 0.0;
                for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                    acc += self.vals[k] * xc[self.cols[k]];
                }
                oc[r] = acc;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (r, c, v) in self.entries() {
            m[(r, c)] = v;
        }
        m
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`; isolated nodes keep a unit diagonal.
pub fn normalized_laplacian(g: &Graph) -> SparseOperator {
    SparseOperator::from_graph(g, OperatorKind::Laplacian)
}

/// `P = D^{-1/2} A D^{-1/2} = I - L`.
pub fn propagation_matrix(g: &Graph) -> SparseOperator {
    SparseOperator::from_graph(g, OperatorKind::Propagation)
}

/// Fraction of edges joining same-label endpoints.
pub fn edge_homophily(g: &Graph) -> Result<f64> {
    if g.num_edges() == 0 {
        return Err(Error::Degenerate(
            "edge homophily needs at least one edge".into(),
        ));
    }
    let y = g.labels();
    let same = g.edges().iter().filter(|&&(u, v)| y[u] == y[v]).count();
    Ok(same as f64 / g.num_edges() as f64)
}

/// Mean same-label neighbor fraction over nodes with at least one neighbor.
pub fn node_homophily(g: &Graph) -> Result<f64> {
    let y = g.labels();
    let mut total = 0.0;
    let mut counted = 0usize;
    for v in 0..g.num_nodes() {
        let nb = g.neighbors(v);
        if nb.is_empty() {
            continue;
        }
        let same = nb.iter().filter(|&&u| y[u] == y[v]).count();
        total += same as f64 / nb.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Degenerate(
            "node homophily needs at least one edge".into(),
        ));
    }
    Ok(total / counted as f64)
}

/// Edge homophily recentered by the degree-weighted class distribution.
pub fn adjusted_homophily(g: &Graph) -> Result<f64> {
    let h_edge = edge_homophily(g)?;
    let mut class_degree = vec![0usize; g.num_classes()];
    for v in 0..g.num_nodes() {
        class_degree[g.labels()[v]] += g.degree(v);
    }
    let two_e = 2.0 * g.num_edges() as f64;
    let expected: f64 = class_degree
        .iter()
        .map(|&d| {
            let p = d as f64 / two_e;
            p * p
        })
        .sum();
    let denom = 1.0 - expected;
    if denom <= 0.0 {
        return Err(Error::Degenerate(
            "all degree mass lies in a single class".into(),
        ));
    }
    Ok((h_edge - expected) / denom)
}

/// Edge homophily restricted to train-train edges; 0.5 when there are none.
pub fn estimate_train_homophily(g: &Graph) -> f64 {
    let train = &g.masks().train;
    let y = g.labels();
    let (mut same, mut total) = (0usize, 0usize);
    for &(u, v) in g.edges() {
        if train[u] && train[v] {
            total += 1;
            if y[u] == y[v] {
                same += 1;
            }
        }
    }
    if total == 0 {
        0.5
    } else {
        same as f64 / total as f64
    }
}
