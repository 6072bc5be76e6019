use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, RawDataset, RawLabels, Split};
use crate::error::{Error, Result};

/// Uniform node-induced subgraph of `k` nodes, self-loops re-added.
///
/// Sampled nodes are renumbered in increasing original id; each keeps its
/// split membership. Features are taken as already preprocessed.
pub fn sample_subgraph(g: &Graph, k: usize, seed: u64) -> Result<Graph> {
    let n = g.num_nodes();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("subgraph budget {k} outside 1..={n}")));
    }
    let mut nodes = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    nodes.sort_unstable();
    let mut new_id = vec![usize::MAX; n];
    for (new, &old) in nodes.iter().enumerate() {
        new_id[old] = new;
    }
    let edges = g
        .edge_pairs()
        .filter(|&(s, t)| s != t && new_id[s] != usize::MAX && new_id[t] != usize::MAX)
        .map(|(s, t)| (new_id[s], new_id[t]))
        .collect();
    let labels = match g.labels() {
        super::Labels::Single { index, .. } => RawLabels::Single(
            nodes
                .iter()
                .map(|&i| g.is_labelled(i).then_some(index[i]))
                .collect(),
        ),
        super::Labels::Multi { targets } => RawLabels::Multi(
            nodes
                .iter()
                .map(|&i| g.is_labelled(i).then(|| targets.row(i).iter().map(|&x| x > 0.5).collect()))
                .collect(),
        ),
    };
    let raw = RawDataset {
        name: g.name().to_string(),
        num_nodes: k,
        num_classes: g.num_classes(),
        edges,
        features: g.features().select_rows(&nodes),
        labels,
    };
    let remap = |s: Split| -> Vec<usize> {
        g.split(s)
            .iter()
            .filter(|&&i| new_id[i] != usize::MAX)
            .map(|&i| new_id[i])
            .collect()
    };
    Graph::with_split(&raw, remap(Split::Train), remap(Split::Val), remap(Split::Test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::synthetic::{planted_partition, SyntheticSpec};

    fn graph() -> Graph {
        planted_partition(&SyntheticSpec {
            nodes: 40,
            edges: 60,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn whole_graph_when_k_is_n() {
        let g = graph();
        let s = sample_subgraph(&g, g.num_nodes(), 3).unwrap();
        assert_eq!(s.num_edges(), g.num_edges());
        assert_eq!(s.edge_pairs().collect::<Vec<_>>(), g.edge_pairs().collect::<Vec<_>>());
        assert_eq!(s.split(Split::Train), g.split(Split::Train));
    }

    #[test]
    fn single_node_has_one_self_loop() {
        let s = sample_subgraph(&graph(), 1, 0).unwrap();
        assert_eq!(s.num_nodes(), 1);
        assert_eq!(s.edge_pairs().collect::<Vec<_>>(), vec![(0, 0)]);
    }

    #[test]
    fn deterministic_per_seed_and_bounded() {
        let g = graph();
        let a = sample_subgraph(&g, 15, 7).unwrap();
        let b = sample_subgraph(&g, 15, 7).unwrap();
        assert_eq!(a.edge_pairs().collect::<Vec<_>>(), b.edge_pairs().collect::<Vec<_>>());
        assert_eq!(a.features(), b.features());
        assert!(a.degrees().iter().all(|&d| d >= 1));
        assert!(matches!(sample_subgraph(&g, 41, 0), Err(Error::Argument(_))));
        assert!(matches!(sample_subgraph(&g, 0, 0), Err(Error::Argument(_))));
    }
}
