use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentRecord;
use crate::error::{Error, Result};
use crate::quant::{bit_cost, ACTIVATION_BITWIDTHS, WEIGHT_BITWIDTHS};
use crate::supernet::QuantSiteKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteCategory {
    /// Linear sub-blocks and aggregation outputs.
    Hidden,
    Attention,
    /// Router projections of shortcut connections.
    Shortcut,
}

impl SiteCategory {
    pub const ALL: [SiteCategory; 3] = [SiteCategory::Hidden, SiteCategory::Attention, SiteCategory::Shortcut];

    pub fn name(self) -> &'static str {
        match self {
            SiteCategory::Hidden => "hidden",
            SiteCategory::Attention => "attention",
            SiteCategory::Shortcut => "shortcut",
        }
    }
}

/// Counts of chosen bitwidths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub weights: BTreeMap<u32, usize>,
    pub activations: BTreeMap<u32, usize>,
}

impl Default for Histogram {
    fn default() -> Self {
        Self {
            weights: WEIGHT_BITWIDTHS.iter().map(|&b| (b, 0)).collect(),
            activations: ACTIVATION_BITWIDTHS.iter().map(|&b| (b, 0)).collect(),
        }
    }
}

fn bump(map: &mut BTreeMap<u32, usize>, bits: u32) {
    *map.entry(bits).or_insert(0) += 1;
}

fn mode(maps: impl Iterator<Item = BTreeMap<u32, usize>>) -> Option<u32> {
    let mut total: BTreeMap<u32, usize> = BTreeMap::new();
    for m in maps {
        for (b, c) in m {
            *total.entry(b).or_insert(0) += c;
        }
    }
    // ties go to the narrower width
    total
        .into_iter()
        .filter(|&(_, c)| c > 0)
        .fold(None, |best: Option<(u32, usize)>, (b, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((b, c)),
        })
        .map(|(b, _)| b)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    /// Quantised records counted.
    pub runs: usize,
    /// Records without quantisation, skipped.
    pub float_runs: usize,
    /// Sites with quantised weights (sum of all weight histograms).
    pub weight_sites: usize,
    /// Sites with quantised activations (sum of all activation histograms).
    pub activation_sites: usize,
    pub categories: BTreeMap<SiteCategory, Histogram>,
    pub modal_weight_bits: Option<u32>,
    pub modal_activation_bits: Option<u32>,
}

/// Bitwidth histograms over the sites that exist in each record's network.
///
/// Per block: linear weights and activations and the aggregation output are
/// `hidden`; attention messages are `attention`, with attention weights only
/// for kinds that own parameters; the router site is `shortcut` when a
/// shortcut projection uses it.
pub fn cmd_stats(records: &[ExperimentRecord]) -> Result<StatsReport> {
    if records.is_empty() {
        return Err(Error::Argument("statistics need at least one record".into()));
    }
    let mut categories: BTreeMap<SiteCategory, Histogram> =
        SiteCategory::ALL.iter().map(|&c| (c, Histogram::default())).collect();
    let (mut runs, mut float_runs, mut weight_sites, mut activation_sites) = (0, 0, 0, 0);
    for r in records {
        let spec = &r.spec;
        let Some(quant) = &spec.quant else {
            float_runs += 1;
            continue;
        };
        runs += 1;
        let shortcut_blocks: Vec<usize> = spec.route.shortcuts().iter().map(|&(_, c)| spec.router_block(c)).collect();
        for (k, (block, q)) in spec.blocks.iter().zip(quant).enumerate() {
            let mut record = |cat: SiteCategory, kind: QuantSiteKind, weights: bool| {
                let pair = q.get(kind);
                let h = categories.get_mut(&cat).expect("all categories present");
                if weights {
                    bump(&mut h.weights, bit_cost(pair.weight));
                    weight_sites += 1;
                }
                bump(&mut h.activations, pair.activation.bits());
                activation_sites += 1;
            };
            record(SiteCategory::Hidden, QuantSiteKind::Linear, true);
            record(SiteCategory::Attention, QuantSiteKind::Attention, !block.attention.vectors().is_empty());
            record(SiteCategory::Hidden, QuantSiteKind::Aggregation, false);
            if shortcut_blocks.contains(&k) {
                record(SiteCategory::Shortcut, QuantSiteKind::Router, true);
            }
        }
    }
    Ok(StatsReport {
        runs,
        float_runs,
        weight_sites,
        activation_sites,
        modal_weight_bits: mode(categories.values().map(|h| h.weights.clone())),
        modal_activation_bits: mode(categories.values().map(|h| h.activations.clone())),
        categories,
    })
}

impl StatsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `category,kind,bits,count` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["category", "kind", "bits", "count"]).map_err(csv_err)?;
        for (cat, h) in &self.categories {
            for (kind, map) in [("weight", &h.weights), ("activation", &h.activations)] {
                for (bits, count) in map {
                    w.write_record([cat.name(), kind, &bits.to_string(), &count.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
