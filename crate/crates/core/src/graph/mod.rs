//! Node-classification graphs: ingestion, preprocessing, splits and metrics.
//!
//! A [`Graph`] is immutable once built. Edges are symmetrised, every node
//! carries a self-loop, and edges are stored sorted by target so that the
//! incoming edges of node `i` occupy one contiguous range. Segment ops in the
//! blocks rely on that layout only through the `targets` array.

mod io;
mod metrics;
mod sample;
pub mod synthetic;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use io::{convert_linqs, load_dataset, read_raw_dataset, write_raw_dataset, LoadOptions};
pub use metrics::{evaluate, Metric};
pub use sample::sample_subgraph;

use crate::autodiff::{CsrMatrix, Tensor};
use crate::error::{Error, Result};

/// Fractions of labelled nodes assigned to train / validation; the rest is test.
pub const SPLIT_RATIOS: (f64, f64) = (0.6, 0.2);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelArity {
    Single,
    Multi,
}

/// Labels as read from disk, before any split.
#[derive(Clone, Debug, PartialEq)]
pub enum RawLabels {
    /// `None` marks an unlabelled node.
    Single(Vec<Option<usize>>),
    /// Multi-hot rows; `None` marks an unlabelled node.
    Multi(Vec<Option<Vec<bool>>>),
}

impl RawLabels {
    pub fn arity(&self) -> LabelArity {
        match self {
            RawLabels::Single(_) => LabelArity::Single,
            RawLabels::Multi(_) => LabelArity::Multi,
        }
    }

    fn len(&self) -> usize {
        match self {
            RawLabels::Single(v) => v.len(),
            RawLabels::Multi(v) => v.len(),
        }
    }

    fn is_labelled(&self, i: usize) -> bool {
        match self {
            RawLabels::Single(v) => v[i].is_some(),
            RawLabels::Multi(v) => v[i].is_some(),
        }
    }
}

/// A dataset exactly as stored: directed edge list, features, labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub num_nodes: usize,
    pub num_classes: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: CsrMatrix,
    pub labels: RawLabels,
}

/// Training targets in the form the losses consume.
#[derive(Clone, Debug)]
pub enum Labels {
    /// Class index per node (0 for unlabelled nodes, which never appear in a mask).
    Single { classes: usize, index: Arc<[usize]> },
    /// `n × c` matrix of {0, 1}.
    Multi { targets: Arc<Tensor> },
}

impl Labels {
    pub fn num_classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } => *classes,
            Labels::Multi { targets } => targets.cols(),
        }
    }

    pub fn arity(&self) -> LabelArity {
        match self {
            Labels::Single { .. } => LabelArity::Single,
            Labels::Multi { .. } => LabelArity::Multi,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct Graph {
    name: String,
    num_nodes: usize,
    sources: Arc<[usize]>,
    targets: Arc<[usize]>,
    offsets: Vec<usize>,
    reverse: Arc<[usize]>,
    features: Arc<CsrMatrix>,
    labels: Labels,
    labelled: Vec<bool>,
    train: Arc<[usize]>,
    val: Arc<[usize]>,
    test: Arc<[usize]>,
}

impl Graph {
    /// Preprocesses a raw dataset: symmetrise, add self-loops, optionally
    /// row-normalise features, and draw a seeded 6:2:2 split.
    pub fn from_raw(raw: &RawDataset, opts: &LoadOptions) -> Result<Self> {
        let n = raw.num_nodes;
        let labelled: Vec<usize> = (0..n).filter(|&i| raw.labels.is_labelled(i)).collect();
        let mut order = labelled;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.split_seed));
        let (train_n, val_n) = split_sizes(order.len());
        let train = sorted(&order[..train_n]);
        let val = sorted(&order[train_n..train_n + val_n]);
        let test = sorted(&order[train_n + val_n..]);
        let features = if opts.normalise_features {
            raw.features.row_l1_normalised()
        } else {
            raw.features.clone()
        };
        Self::assemble(raw, features, [train, val, test])
    }

    /// Builds a graph with explicit split membership.
    pub fn with_split(raw: &RawDataset, train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        Self::assemble(raw, raw.features.clone(), [sorted(&train), sorted(&val), sorted(&test)])
    }

    fn assemble(raw: &RawDataset, features: CsrMatrix, split: [Vec<usize>; 3]) -> Result<Self> {
        let n = raw.num_nodes;
        if raw.labels.len() != n {
            return Err(Error::Schema(format!("{} label rows for {n} nodes", raw.labels.len())));
        }
        if features.rows() != n {
            return Err(Error::Schema(format!("{} feature rows for {n} nodes", features.rows())));
        }
        let mut pairs = BTreeSet::new();
        for &(u, v) in &raw.edges {
            for idx in [u, v] {
                if idx >= n {
                    return Err(Error::Index {
                        op: "edges",
                        index: idx,
                        bound: n,
                    });
                }
            }
            // keyed (target, source)
            pairs.insert((v, u));
            pairs.insert((u, v));
        }
        for i in 0..n {
            pairs.insert((i, i));
        }
        let mut offsets = vec![0usize; n + 1];
        let mut sources = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for &(t, s) in &pairs {
            offsets[t + 1] += 1;
            sources.push(s);
            targets.push(t);
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let reverse = reverse_index(&sources, &targets, &offsets)?;

        let mut labelled = vec![false; n];
        let mut seen = vec![false; n];
        for part in &split {
            for &i in part {
                if i >= n || !raw.labels.is_labelled(i) {
                    return Err(Error::Schema(format!("split contains unlabelled or unknown node {i}")));
                }
                if seen[i] {
                    return Err(Error::Schema(format!("node {i} appears in more than one split")));
                }
                seen[i] = true;
            }
        }
        for (i, l) in labelled.iter_mut().enumerate() {
            *l = raw.labels.is_labelled(i);
        }
        let labels = match &raw.labels {
            RawLabels::Single(v) => {
                if let Some(bad) = v.iter().flatten().find(|&&c| c >= raw.num_classes) {
                    return Err(Error::Schema(format!("class {bad} out of range for {} classes", raw.num_classes)));
                }
                Labels::Single {
                    classes: raw.num_classes,
                    index: v.iter().map(|c| c.unwrap_or(0)).collect(),
                }
            }
            RawLabels::Multi(v) => {
                let c = raw.num_classes;
                let mut data = vec![0.0; n * c];
                for (i, row) in v.iter().enumerate() {
                    if let Some(bits) = row {
                        if bits.len() != c {
                            return Err(Error::Schema(format!("node {i} has {} label bits, expected {c}", bits.len())));
                        }
                        for (j, &b) in bits.iter().enumerate() {
                            data[i * c + j] = if b { 1.0 } else { 0.0 };
                        }
                    }
                }
                Labels::Multi {
                    targets: Arc::new(Tensor::new(vec![n, c], data)?),
                }
            }
        };
        let [train, val, test] = split;
        Ok(Self {
            name: raw.name.clone(),
            num_nodes: n,
            sources: sources.into(),
            targets: targets.into(),
            offsets,
            reverse: reverse.into(),
            features: Arc::new(features),
            labels,
            labelled,
            train: train.into(),
            val: val.into(),
            test: test.into(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.num_classes()
    }

    /// Source node of every edge.
    pub fn sources(&self) -> &Arc<[usize]> {
        &self.sources
    }

    /// Target node of every edge; non-decreasing.
    pub fn targets(&self) -> &Arc<[usize]> {
        &self.targets
    }

    /// Row offsets of the target-major edge layout (length `n + 1`).
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Index of the reverse edge `(v, u)` for every edge `(u, v)`.
    pub fn reverse(&self) -> &Arc<[usize]> {
        &self.reverse
    }

    /// In-degree, self-loop included.
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.degree(i)).collect()
    }

    pub fn features(&self) -> &Arc<CsrMatrix> {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn is_labelled(&self, i: usize) -> bool {
        self.labelled[i]
    }

    pub fn split(&self, which: Split) -> &Arc<[usize]> {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn mask(&self, which: Split) -> Vec<bool> {
        let mut m = vec![false; self.num_nodes];
        for &i in self.split(which).iter() {
            m[i] = true;
        }
        m
    }

    /// `(source, target)` of every stored edge.
    pub fn edge_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sources.iter().copied().zip(self.targets.iter().copied())
    }
}

fn split_sizes(labelled: usize) -> (usize, usize) {
    let train = (labelled as f64 * SPLIT_RATIOS.0).round() as usize;
    let val = (labelled as f64 * SPLIT_RATIOS.1).round() as usize;
    (train, val.min(labelled - train))
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s
}

fn reverse_index(sources: &[usize], targets: &[usize], offsets: &[usize]) -> Result<Vec<usize>> {
    sources
        .iter()
        .zip(targets)
        .map(|(&s, &t)| {
            // Reverse edge (t -> s) lives in target segment s, sorted by source.
            let seg = &sources[offsets[s]..offsets[s + 1]];
            seg.binary_search(&t)
                .map(|k| offsets[s] + k)
                .map_err(|_| Error::Structure(format!("edge {s}->{t} has no reverse edge")))
        })
        .collect()
}
