//! Seeded citation-style graphs.
//!
//! Nodes belong to classes; edges connect same-class nodes with probability
//! `homophily` and otherwise pick a partner from another class. Endpoints are
//! drawn proportionally to a heavy-tailed per-node weight, which gives the
//! skewed degree profile of citation graphs. Each node is a bag of binary
//! words: a word comes from its class's private topic vocabulary with
//! probability `topic_prob`, otherwise from a Zipf-distributed background
//! over the whole vocabulary.

use std::collections::BTreeSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, LoadOptions, RawDataset, RawLabels};
use crate::autodiff::CsrMatrix;
use crate::error::{Error, Result};

/// Class sizes of the public Cora release.
pub const CORA_CLASS_SIZES: [usize; 7] = [351, 217, 418, 818, 426, 298, 180];
/// Undirected, de-duplicated citation links of the public Cora release.
pub const CORA_UNDIRECTED_EDGES: usize = 5278;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub name: String,
    pub nodes: usize,
    pub features: usize,
    pub classes: usize,
    /// Explicit class sizes; when empty, nodes are spread evenly.
    pub class_sizes: Vec<usize>,
    pub edges: usize,
    pub homophily: f64,
    /// Tail exponent of the endpoint weight distribution.
    pub degree_exponent: f64,
    pub words_min: usize,
    pub words_max: usize,
    pub topic_words: usize,
    pub topic_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "planted".into(),
            nodes: 120,
            features: 48,
            classes: 3,
            class_sizes: Vec::new(),
            edges: 240,
            homophily: 0.85,
            degree_exponent: 2.5,
            words_min: 4,
            words_max: 10,
            topic_words: 8,
            topic_prob: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Matches Cora's node, feature, class and edge counts, class balance,
    /// edge homophily (~0.81) and mean document length (~18 words).
    pub fn cora_like(seed: u64) -> Self {
        Self {
            name: "cora-surrogate".into(),
            nodes: CORA_CLASS_SIZES.iter().sum(),
            features: 1433,
            classes: 7,
            class_sizes: CORA_CLASS_SIZES.to_vec(),
            edges: CORA_UNDIRECTED_EDGES,
            homophily: 0.81,
            degree_exponent: 2.5,
            words_min: 12,
            words_max: 32,
            topic_words: 150,
            topic_prob: 0.14,
            seed,
        }
    }

    fn sizes(&self) -> Vec<usize> {
        if !self.class_sizes.is_empty() {
            return self.class_sizes.clone();
        }
        (0..self.classes)
            .map(|c| self.nodes / self.classes + usize::from(c < self.nodes % self.classes))
            .collect()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<RawDataset> {
    let sizes = spec.sizes();
    let n = spec.nodes;
    if sizes.len() != spec.classes || sizes.iter().sum::<usize>() != n || sizes.iter().any(|&s| s < 2) {
        return Err(Error::Argument("class sizes must cover all nodes with >= 2 per class".into()));
    }
    if spec.topic_words * spec.classes > spec.features || spec.words_min == 0 || spec.words_max < spec.words_min {
        return Err(Error::Argument("vocabulary too small for the topic layout".into()));
    }
    if spec.edges > n * (n - 1) / 4 {
        return Err(Error::Argument("edge budget too dense".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut label: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| vec![c; s]).collect();
    label.shuffle(&mut rng);
    let members: Vec<Vec<usize>> = (0..spec.classes)
        .map(|c| (0..n).filter(|&i| label[i] == c).collect())
        .collect();

    let tail = 1.0 / (spec.degree_exponent - 1.0);
    let weight: Vec<f64> = (0..n)
        .map(|_| (1.0 - rng.gen::<f64>()).powf(-tail).min(60.0))
        .collect();
    let pickers: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| WeightedIndex::new(m.iter().map(|&i| weight[i])).expect("positive weights"))
        .collect();
    let global = WeightedIndex::new(&weight).expect("positive weights");

    let mut edges = BTreeSet::new();
    let partner = |rng: &mut ChaCha8Rng, u: usize| -> usize {
        let class = if rng.gen::<f64>() < spec.homophily {
            label[u]
        } else {
            let other = rng.gen_range(0..spec.classes - 1);
            if other >= label[u] {
                other + 1
            } else {
                other
            }
        };
        members[class][pickers[class].sample(rng)]
    };
    let add = |edges: &mut BTreeSet<(usize, usize)>, u: usize, v: usize| u != v && edges.insert((u.min(v), u.max(v)));
    // One link per node first so that nobody is isolated.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for &u in &order {
        if edges.len() >= spec.edges {
            break;
        }
        while !add(&mut edges, u, partner(&mut rng, u)) {}
    }
    while edges.len() < spec.edges {
        let u = global.sample(&mut rng);
        let v = partner(&mut rng, u);
        add(&mut edges, u, v);
    }

    let mut vocab: Vec<usize> = (0..spec.features).collect();
    vocab.shuffle(&mut rng);
    let topics: Vec<&[usize]> = (0..spec.classes)
        .map(|c| &vocab[c * spec.topic_words..(c + 1) * spec.topic_words])
        .collect();
    let mut background: Vec<usize> = (0..spec.features).collect();
    background.shuffle(&mut rng);
    let zipf = WeightedIndex::new((1..=spec.features).map(|r| 1.0 / r as f64)).expect("positive weights");
    let mut triples = Vec::new();
    for (i, &y) in label.iter().enumerate() {
        let len = rng.gen_range(spec.words_min..=spec.words_max);
        let mut words = BTreeSet::new();
        for _ in 0..len {
            let w = if rng.gen::<f64>() < spec.topic_prob {
                *topics[y].choose(&mut rng).expect("nonempty topic")
            } else {
                background[zipf.sample(&mut rng)]
            };
            words.insert(w);
        }
        triples.extend(words.into_iter().map(|w| (i, w, 1.0)));
    }

    Ok(RawDataset {
        name: spec.name.clone(),
        num_nodes: n,
        num_classes: spec.classes,
        edges: edges.into_iter().collect(),
        features: CsrMatrix::from_triples(n, spec.features, &triples)?,
        labels: RawLabels::Single(label.into_iter().map(Some).collect()),
    })
}

/// Generated and preprocessed with default load options (split seed = spec seed).
pub fn planted_partition(spec: &SyntheticSpec) -> Result<Graph> {
    Graph::from_raw(
        &generate(spec)?,
        &LoadOptions {
            split_seed: spec.seed,
            ..Default::default()
        },
    )
}

/// Fraction of undirected non-loop edges joining same-class nodes.
pub fn edge_homophily(raw: &RawDataset) -> f64 {
    let RawLabels::Single(l) = &raw.labels else {
        return f64::NAN;
    };
    let same = raw.edges.iter().filter(|&&(u, v)| l[u].is_some() && l[u] == l[v]).count();
    same as f64 / raw.edges.len().max(1) as f64
}
