use serde::{Deserialize, Serialize};

use super::params::network_entries;
use super::{ArchSite, AttentionKind, NetworkSpec, QuantSiteKind, SiteLayout, EXPANSIONS};
use crate::graph::Graph;
use crate::quant::{bits_or_float, QuantScheme, FLOAT_BITS, QUANT_PAIRS};

/// Parameter storage in bytes: each tensor at its site's weight bit width,
/// 32 bits per value in float mode.
pub fn model_size(spec: &NetworkSpec) -> f64 {
    network_entries(spec)
        .iter()
        .map(|e| tensor_bytes(e.len(), e.scheme(spec)))
        .sum()
}

/// Bytes for `count` values stored in `scheme` (32-bit float when `None`).
pub fn tensor_bytes(count: usize, scheme: Option<QuantScheme>) -> f64 {
    (count as u64 * u64::from(bits_or_float(scheme))) as f64 / 8.0
}

/// Bytes of every quantised activation tensor held during one inference
/// on `g`: the input projection, each block's input, expanded, linear,
/// per-edge message and aggregated tensors, and every shortcut projection
/// and multi-input router sum.
pub fn buffer_size(spec: &NetworkSpec, g: &Graph) -> f64 {
    let (n, e, h) = (g.num_nodes() as u64, g.num_edges() as u64, spec.hidden as u64);
    let bits = |block: usize, kind: QuantSiteKind| u64::from(bits_or_float(spec.act_scheme(block, kind)));
    let mut total = n * h * bits(0, QuantSiteKind::Linear);
    for c in 1..=spec.layers() + 1 {
        let inputs = spec.route.inputs(c);
        let rb = spec.router_block(c);
        let shortcuts = inputs.iter().filter(|&&s| s + 1 < c).count() as u64;
        total += shortcuts * n * h * bits(rb, QuantSiteKind::Router);
        if inputs.len() > 1 {
            total += n * h * bits(rb, QuantSiteKind::Router);
        }
        if c > spec.layers() {
            break;
        }
        let k = c - 1;
        let x = spec.blocks[k].expansion as u64;
        total += (2 + x) * n * h * bits(k, QuantSiteKind::Linear);
        total += e * h * bits(k, QuantSiteKind::Attention);
        total += n * h * bits(k, QuantSiteKind::Aggregation);
    }
    total as f64 / 8.0
}

pub(crate) fn linear_params(hidden: usize, e: usize) -> usize {
    2 * e * hidden * hidden + e * hidden + hidden
}

pub(crate) fn attention_params(hidden: usize, kind: AttentionKind) -> usize {
    kind.vectors().len() * hidden
}

/// One product term of the quantisation loss: expected parameter count of an
/// architecture site (or a fixed count) times expected weight bits of a
/// quantisation site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTerm {
    /// `None` for parameters that exist in every sampled network.
    pub arch_site: Option<usize>,
    /// Parameter count per option of `arch_site` (one entry when fixed).
    pub params: Vec<f64>,
    pub quant_site: usize,
}

/// Costs aligned with a [`SiteLayout`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTables {
    /// Parameter count per option, per architecture site.
    pub arch: Vec<Vec<f64>>,
    /// Weight bits per option, per quantisation site.
    pub quant: Vec<Vec<f64>>,
    pub terms: Vec<CostTerm>,
}

impl CostTables {
    pub fn new(layout: &SiteLayout) -> Self {
        let h = layout.hidden;
        let arch: Vec<Vec<f64>> = layout
            .arch_sites()
            .iter()
            .map(|&site| match site {
                ArchSite::Expansion(_) => EXPANSIONS.iter().map(|&e| linear_params(h, e) as f64).collect(),
                ArchSite::Attention(_) => AttentionKind::ALL
                    .iter()
                    .map(|&k| attention_params(h, k) as f64)
                    .collect(),
                ArchSite::Route { source, consumer } if source + 1 < consumer => vec![0.0, (h * h) as f64],
                other => vec![0.0; other.options()],
            })
            .collect();
        let bits: Vec<f64> = QUANT_PAIRS.iter().map(|p| f64::from(p.weight.bits())).collect();
        let quant = vec![bits; layout.quant_sites().len()];

        let mut terms = Vec::new();
        let fixed = |params: usize, quant_site: usize| CostTerm {
            arch_site: None,
            params: vec![params as f64],
            quant_site,
        };
        let first = layout.quant_index(0, QuantSiteKind::Linear);
        let last = layout.quant_index(layout.layers - 1, QuantSiteKind::Linear);
        terms.push(fixed(layout.in_features * h + h, first));
        terms.push(fixed(h * layout.classes + layout.classes, last));
        let mut site_term = |site: ArchSite, quant_site: usize| {
            let i = layout.arch_index(site);
            terms.push(CostTerm {
                arch_site: Some(i),
                params: arch[i].clone(),
                quant_site,
            });
        };
        for k in 0..layout.layers {
            site_term(ArchSite::Expansion(k), layout.quant_index(k, QuantSiteKind::Linear));
            site_term(ArchSite::Attention(k), layout.quant_index(k, QuantSiteKind::Attention));
        }
        for consumer in 2..=layout.layers + 1 {
            for source in 0..consumer - 1 {
                let rb = consumer.min(layout.layers) - 1;
                site_term(ArchSite::Route { source, consumer }, layout.quant_index(rb, QuantSiteKind::Router));
            }
        }
        Self { arch, quant, terms }
    }

    /// Bits of the largest candidate network at 32-bit weights.
    pub fn float_ceiling(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| t.params.iter().copied().fold(0.0, f64::max) * f64::from(FLOAT_BITS))
            .sum()
    }

    /// Exact weight bits of a decoded choice; equals `8 * model_size`.
    pub fn bits_of(&self, arch: &[usize], quant: &[usize]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let p = match t.arch_site {
                    Some(i) => t.params[arch[i]],
                    None => t.params[0],
                };
                p * self.quant[t.quant_site][quant[t.quant_site]]
            })
            .sum()
    }
}
