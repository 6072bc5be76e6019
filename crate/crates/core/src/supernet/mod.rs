//! The searchable network.
//!
//! Every block is hidden→hidden: Linear (two FC layers, ReLU between,
//! expansion `e`) → Attention → Aggregation → Activation. An input projection
//! maps raw features to `hidden`; a classifier maps the last routed state to
//! logits. Consumers `c = 1..=L` are the blocks and `c = L + 1` is the
//! classifier; consumer `c` may read any source `s < c`, where source 0 is
//! the input projection. The immediate predecessor is read directly, older
//! sources through a hidden×hidden shortcut projection.
//!
//! A [`NetworkSpec`] fixes one path. Parameters of all candidates live in a
//! [`ParamStore`] under stable names, so a supernet and a sampled network
//! are the same store viewed through different specs.

mod checkpoint;
mod forward;
mod params;
mod size;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use forward::{block_forward, network_forward, sym_gat_coefficients, BufferEntry, Gates, RunOptions, GAT_SLOPE};
pub use params::{Binder, ParamStore};
pub(crate) use params::key_stream;
pub use size::{buffer_size, model_size, tensor_bytes, CostTables, CostTerm};

use crate::autodiff::{ActivationKind, Aggregation};
use crate::error::{Error, Result};
use crate::quant::{QuantPair, QuantScheme};

pub const EXPANSIONS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Const,
    Gcn,
    Gat,
    SymGat,
    Cos,
    Linear,
    GeneLinear,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 7] = [
        AttentionKind::Const,
        AttentionKind::Gcn,
        AttentionKind::Gat,
        AttentionKind::SymGat,
        AttentionKind::Cos,
        AttentionKind::Linear,
        AttentionKind::GeneLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Const => "const",
            AttentionKind::Gcn => "gcn",
            AttentionKind::Gat => "gat",
            AttentionKind::SymGat => "sym-gat",
            AttentionKind::Cos => "cos",
            AttentionKind::Linear => "linear",
            AttentionKind::GeneLinear => "gene-linear",
        }
    }

    /// Parameter vectors (each of length `hidden`) the mechanism owns.
    pub fn vectors(self) -> &'static [&'static str] {
        match self {
            AttentionKind::Const | AttentionKind::Gcn => &[],
            AttentionKind::Gat | AttentionKind::SymGat => &["a_dst", "a_src"],
            AttentionKind::Cos => &["w1", "w2"],
            AttentionKind::Linear => &["w"],
            AttentionKind::GeneLinear => &["w1", "w2", "g"],
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('_', "-");
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown attention '{s}'")))
    }
}

/// One block's architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchChoice {
    pub attention: AttentionKind,
    pub act: ActivationKind,
    pub aggr: Aggregation,
    pub expansion: usize,
}

impl ArchChoice {
    pub const SPACE_SIZE: usize = 7 * 8 * 3 * 4;

    /// Every per-block architecture, attention-major.
    pub fn space() -> Vec<ArchChoice> {
        let mut out = Vec::with_capacity(Self::SPACE_SIZE);
        for attention in AttentionKind::ALL {
            for act in ActivationKind::ALL {
                for aggr in Aggregation::ALL {
                    for expansion in EXPANSIONS {
                        out.push(ArchChoice {
                            attention,
                            act,
                            aggr,
                            expansion,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !EXPANSIONS.contains(&self.expansion) {
            return Err(Error::Argument(format!("expansion {} not in {EXPANSIONS:?}", self.expansion)));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}/e{}", self.attention, self.act, self.aggr, self.expansion)
    }
}

/// One block's four quantisation decisions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockQuant {
    pub linear: QuantPair,
    pub attention: QuantPair,
    pub aggregation: QuantPair,
    pub router: QuantPair,
}

impl BlockQuant {
    pub fn uniform(pair: QuantPair) -> Self {
        Self {
            linear: pair,
            attention: pair,
            aggregation: pair,
            router: pair,
        }
    }

    pub fn get(&self, kind: QuantSiteKind) -> QuantPair {
        match kind {
            QuantSiteKind::Linear => self.linear,
            QuantSiteKind::Attention => self.attention,
            QuantSiteKind::Aggregation => self.aggregation,
            QuantSiteKind::Router => self.router,
        }
    }

    fn set(&mut self, kind: QuantSiteKind, pair: QuantPair) {
        match kind {
            QuantSiteKind::Linear => self.linear = pair,
            QuantSiteKind::Attention => self.attention = pair,
            QuantSiteKind::Aggregation => self.aggregation = pair,
            QuantSiteKind::Router => self.router = pair,
        }
    }
}

/// Which sources feed each consumer.
///
/// `gates[c - 2][s]` covers consumers `c = 2..=L + 1` and sources `s < c`.
/// Consumer 1 always reads the input projection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    gates: Vec<Vec<bool>>,
}

impl Route {
    pub fn sequential(layers: usize) -> Self {
        Self {
            gates: (2..=layers + 1).map(|c| (0..c).map(|s| s + 1 == c).collect()).collect(),
        }
    }

    pub fn from_gates(layers: usize, gates: Vec<Vec<bool>>) -> Result<Self> {
        let ok = gates.len() == layers && gates.iter().enumerate().all(|(i, g)| g.len() == i + 2);
        if !ok {
            return Err(Error::Argument(format!("route gates do not match {layers} layers")));
        }
        Ok(Self { gates })
    }

    pub fn layers(&self) -> usize {
        self.gates.len()
    }

    pub fn gates(&self) -> &[Vec<bool>] {
        &self.gates
    }

    pub fn gate(&self, source: usize, consumer: usize) -> bool {
        consumer >= 2 && self.gates[consumer - 2][source]
    }

    pub fn set(&mut self, source: usize, consumer: usize, on: bool) {
        self.gates[consumer - 2][source] = on;
    }

    /// Sources read by `consumer`, falling back to the immediate predecessor.
    pub fn inputs(&self, consumer: usize) -> Vec<usize> {
        if consumer <= 1 {
            return vec![0];
        }
        let on: Vec<usize> = (0..consumer).filter(|&s| self.gates[consumer - 2][s]).collect();
        if on.is_empty() {
            vec![consumer - 1]
        } else {
            on
        }
    }

    /// Shortcut projections in use: `(source, consumer)` with `source < consumer - 1`.
    pub fn shortcuts(&self) -> Vec<(usize, usize)> {
        (2..=self.layers() + 1)
            .flat_map(|c| self.inputs(c).into_iter().filter(move |&s| s + 1 < c).map(move |s| (s, c)))
            .collect()
    }
}

/// One fully specified (single-path) network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub in_features: usize,
    pub hidden: usize,
    pub classes: usize,
    pub blocks: Vec<ArchChoice>,
    /// `None` runs in floating point.
    pub quant: Option<Vec<BlockQuant>>,
    pub route: Route,
}

impl NetworkSpec {
    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.hidden == 0 || self.classes == 0 || self.in_features == 0 {
            return Err(Error::Argument("network needs >= 1 block and nonzero widths".into()));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        if let Some(q) = &self.quant {
            if q.len() != self.layers() {
                return Err(Error::Argument(format!("{} quant entries for {} blocks", q.len(), self.layers())));
            }
        }
        if self.route.layers() != self.layers() {
            return Err(Error::Argument("route does not match block count".into()));
        }
        Ok(())
    }

    /// Scheme pair of a quant site, or `None` in float mode.
    pub fn pair(&self, block: usize, kind: QuantSiteKind) -> Option<QuantPair> {
        self.quant.as_ref().map(|q| q[block].get(kind))
    }

    pub fn weight_scheme(&self, block: usize, kind: QuantSiteKind) -> Option<QuantScheme> {
        self.pair(block, kind).map(|p| p.weight)
    }

    pub fn act_scheme(&self, block: usize, kind: QuantSiteKind) -> Option<QuantScheme> {
        self.pair(block, kind).map(|p| p.activation)
    }

    /// Block whose router site quantises the inputs of `consumer`.
    pub fn router_block(&self, consumer: usize) -> usize {
        consumer.min(self.layers()) - 1
    }

    /// Same architecture, every site set to `pair` (or float when `None`).
    pub fn with_uniform_quant(&self, pair: Option<QuantPair>) -> Self {
        let mut s = self.clone();
        s.quant = pair.map(|p| vec![BlockQuant::uniform(p); self.layers()]);
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantSiteKind {
    Linear,
    Attention,
    Aggregation,
    Router,
}

impl QuantSiteKind {
    pub const ALL: [QuantSiteKind; 4] = [
        QuantSiteKind::Linear,
        QuantSiteKind::Attention,
        QuantSiteKind::Aggregation,
        QuantSiteKind::Router,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantSiteKind::Linear => "linear",
            QuantSiteKind::Attention => "attention",
            QuantSiteKind::Aggregation => "aggregation",
            QuantSiteKind::Router => "router",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchSite {
    Attention(usize),
    Activation(usize),
    Aggregation(usize),
    Expansion(usize),
    Route { source: usize, consumer: usize },
}

impl ArchSite {
    pub fn options(self) -> usize {
        match self {
            ArchSite::Attention(_) => AttentionKind::ALL.len(),
            ArchSite::Activation(_) => ActivationKind::ALL.len(),
            ArchSite::Aggregation(_) => Aggregation::ALL.len(),
            ArchSite::Expansion(_) => EXPANSIONS.len(),
            ArchSite::Route { .. } => 2,
        }
    }

    pub fn name(self) -> String {
        match self {
            ArchSite::Attention(k) => format!("block{}.attention", k + 1),
            ArchSite::Activation(k) => format!("block{}.act", k + 1),
            ArchSite::Aggregation(k) => format!("block{}.aggr", k + 1),
            ArchSite::Expansion(k) => format!("block{}.expansion", k + 1),
            ArchSite::Route { source, consumer } => format!("route.{source}_{consumer}"),
        }
    }

    pub fn option_name(self, index: usize) -> String {
        match self {
            ArchSite::Attention(_) => AttentionKind::ALL[index].name().into(),
            ArchSite::Activation(_) => ActivationKind::ALL[index].name().into(),
            ArchSite::Aggregation(_) => Aggregation::ALL[index].name().into(),
            ArchSite::Expansion(_) => EXPANSIONS[index].to_string(),
            ArchSite::Route { .. } => ["off", "on"][index].into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSite {
    pub block: usize,
    pub kind: QuantSiteKind,
}

impl QuantSite {
    pub fn name(self) -> String {
        format!("block{}.q_{}", self.block + 1, self.kind.name())
    }
}

/// Enumeration of every decision site of an `L`-block search space.
///
/// Architecture sites: per block `[attention, act, aggr, expansion]`, then one
/// on/off site per `(source, consumer)` for consumers `2..=L+1`.
/// Quantisation sites: per block `[linear, attention, aggregation, router]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteLayout {
    pub layers: usize,
    pub in_features: usize,
    pub hidden: usize,
    pub classes: usize,
    arch: Vec<ArchSite>,
    quant: Vec<QuantSite>,
}

impl SiteLayout {
    pub fn new(layers: usize, in_features: usize, hidden: usize, classes: usize) -> Result<Self> {
        if layers == 0 || hidden == 0 || classes == 0 || in_features == 0 {
            return Err(Error::Argument("search space needs >= 1 layer and nonzero widths".into()));
        }
        let mut arch = Vec::new();
        for k in 0..layers {
            arch.extend([
                ArchSite::Attention(k),
                ArchSite::Activation(k),
                ArchSite::Aggregation(k),
                ArchSite::Expansion(k),
            ]);
        }
        for consumer in 2..=layers + 1 {
            arch.extend((0..consumer).map(|source| ArchSite::Route { source, consumer }));
        }
        let quant = (0..layers)
            .flat_map(|block| QuantSiteKind::ALL.map(|kind| QuantSite { block, kind }))
            .collect();
        Ok(Self {
            layers,
            in_features,
            hidden,
            classes,
            arch,
            quant,
        })
    }

    pub fn arch_sites(&self) -> &[ArchSite] {
        &self.arch
    }

    pub fn quant_sites(&self) -> &[QuantSite] {
        &self.quant
    }

    pub fn arch_index(&self, site: ArchSite) -> usize {
        match site {
            ArchSite::Attention(k) => 4 * k,
            ArchSite::Activation(k) => 4 * k + 1,
            ArchSite::Aggregation(k) => 4 * k + 2,
            ArchSite::Expansion(k) => 4 * k + 3,
            // consumers 2..c-1 contribute 2 + 3 + ... + (c - 1) sites
            ArchSite::Route { source, consumer } => 4 * self.layers + (consumer * (consumer - 1)) / 2 - 1 + source,
        }
    }

    pub fn quant_index(&self, block: usize, kind: QuantSiteKind) -> usize {
        4 * block + kind as usize
    }

    /// Builds the network selected by per-site option indices.
    pub fn decode(&self, arch: &[usize], quant: Option<&[usize]>) -> Result<NetworkSpec> {
        if arch.len() != self.arch.len() {
            return Err(Error::Contract(format!("{} arch choices for {} sites", arch.len(), self.arch.len())));
        }
        for (site, &i) in self.arch.iter().zip(arch) {
            if i >= site.options() {
                return Err(Error::Index {
                    op: "decode",
                    index: i,
                    bound: site.options(),
                });
            }
        }
        let blocks = (0..self.layers)
            .map(|k| ArchChoice {
                attention: AttentionKind::ALL[arch[4 * k]],
                act: ActivationKind::ALL[arch[4 * k + 1]],
                aggr: Aggregation::ALL[arch[4 * k + 2]],
                expansion: EXPANSIONS[arch[4 * k + 3]],
            })
            .collect();
        let mut route = Route::sequential(self.layers);
        for consumer in 2..=self.layers + 1 {
            for source in 0..consumer {
                let on = arch[self.arch_index(ArchSite::Route { source, consumer })] == 1;
                route.set(source, consumer, on);
            }
        }
        let quant = match quant {
            None => None,
            Some(q) => {
                if q.len() != self.quant.len() {
                    return Err(Error::Contract(format!("{} quant choices for {} sites", q.len(), self.quant.len())));
                }
                let mut out = vec![BlockQuant::uniform(QuantPair::from_index(0)?); self.layers];
                for (site, &i) in self.quant.iter().zip(q) {
                    out[site.block].set(site.kind, QuantPair::from_index(i)?);
                }
                Some(out)
            }
        };
        Ok(NetworkSpec {
            in_features: self.in_features,
            hidden: self.hidden,
            classes: self.classes,
            blocks,
            quant,
            route,
        })
    }

    /// Inverse of [`decode`](Self::decode).
    pub fn encode(&self, spec: &NetworkSpec) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
        if spec.layers() != self.layers {
            return Err(Error::Contract("spec depth differs from layout".into()));
        }
        let mut arch = vec![0; self.arch.len()];
        for (k, b) in spec.blocks.iter().enumerate() {
            arch[4 * k] = AttentionKind::ALL.iter().position(|&a| a == b.attention).unwrap_or(0);
            arch[4 * k + 1] = ActivationKind::ALL.iter().position(|&a| a == b.act).unwrap_or(0);
            arch[4 * k + 2] = Aggregation::ALL.iter().position(|&a| a == b.aggr).unwrap_or(0);
            arch[4 * k + 3] = EXPANSIONS
                .iter()
                .position(|&e| e == b.expansion)
                .ok_or_else(|| Error::Argument(format!("expansion {}", b.expansion)))?;
        }
        for consumer in 2..=self.layers + 1 {
            for source in 0..consumer {
                arch[self.arch_index(ArchSite::Route { source, consumer })] = usize::from(spec.route.gate(source, consumer));
            }
        }
        let quant = spec
            .quant
            .as_ref()
            .map(|q| self.quant.iter().map(|s| q[s.block].get(s.kind).index).collect());
        Ok((arch, quant))
    }
}

#[cfg(test)]
mod layout_tests {
    use super::*;

    #[test]
    fn arch_space_has_672_entries() {
        let space = ArchChoice::space();
        assert_eq!(space.len(), 672);
        assert_eq!(ArchChoice::SPACE_SIZE, 672);
        let unique: std::collections::HashSet<_> = space.iter().collect();
        assert_eq!(unique.len(), 672);
    }

    #[test]
    fn route_fallback_and_shortcuts() {
        let mut r = Route::sequential(3);
        assert_eq!(r.inputs(1), vec![0]);
        assert_eq!(r.inputs(4), vec![3]);
        assert!(r.shortcuts().is_empty());
        r.set(3, 4, false);
        assert_eq!(r.inputs(4), vec![3]);
        r.set(0, 4, true);
        r.set(1, 3, true);
        assert_eq!(r.inputs(4), vec![0]);
        assert_eq!(r.shortcuts(), vec![(1, 3), (0, 4)]);
    }

    #[test]
    fn layout_indices_are_dense_and_decode_roundtrips() {
        let layout = SiteLayout::new(3, 10, 8, 4).unwrap();
        for (i, &site) in layout.arch_sites().iter().enumerate() {
            assert_eq!(layout.arch_index(site), i, "{site:?}");
        }
        assert_eq!(layout.arch_sites().len(), 12 + 2 + 3 + 4);
        assert_eq!(layout.quant_sites().len(), 12);
        for (i, s) in layout.quant_sites().iter().enumerate() {
            assert_eq!(layout.quant_index(s.block, s.kind), i);
        }
        let arch: Vec<usize> = layout.arch_sites().iter().enumerate().map(|(i, s)| i % s.options()).collect();
        let quant: Vec<usize> = (0..12).map(|i| (i * 5) % 17).collect();
        let spec = layout.decode(&arch, Some(&quant)).unwrap();
        spec.validate().unwrap();
        let (a, q) = layout.encode(&spec).unwrap();
        assert_eq!(a, arch);
        assert_eq!(q.unwrap(), quant);
        assert!(layout.decode(&arch[1..], None).is_err());
    }

    #[test]
    fn names_parse() {
        for k in AttentionKind::ALL {
            assert_eq!(k.name().parse::<AttentionKind>().unwrap(), k);
        }
        assert_eq!("sym_gat".parse::<AttentionKind>().unwrap(), AttentionKind::SymGat);
    }
}
