use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::quant::{QuantPair, QUANT_PAIRS};

/// Largest tolerated metric drop below the float reference (0.5 percentage
/// points of a metric in [0, 1]).
pub const MAX_DROP: f64 = 0.005;

/// Slack for metrics that are ratios of small integers.
const DROP_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridStep {
    pub row: usize,
    pub label: String,
    pub metric: f64,
    /// Reference minus this row's metric.
    pub drop: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    /// Float metric.
    pub reference: f64,
    pub trace: Vec<GridStep>,
    /// Last passing row; `None` keeps the float network.
    pub chosen: Option<QuantPair>,
    pub no_quantisation_passed: bool,
}

/// Walks the search space from the least aggressive row (16) to the most
/// aggressive (0), stopping at the first row whose metric falls more than
/// [`MAX_DROP`] below the float reference and returning the row before it.
///
/// `evaluate(None)` must give the float reference; it is called once per
/// visited row after that.
pub fn cmd_gridsearch(mut evaluate: impl FnMut(Option<QuantPair>) -> Result<f64>) -> Result<GridOutcome> {
    let reference = evaluate(None)?;
    let mut trace = Vec::new();
    let mut chosen = None;
    for pair in QUANT_PAIRS.iter().rev() {
        let metric = evaluate(Some(*pair))?;
        let drop = reference - metric;
        let passed = drop <= MAX_DROP + DROP_EPS;
        trace.push(GridStep {
            row: pair.index,
            label: pair.label(),
            metric,
            drop,
            passed,
        });
        if !passed {
            break;
        }
        chosen = Some(*pair);
    }
    Ok(GridOutcome {
        reference,
        no_quantisation_passed: chosen.is_none(),
        trace,
        chosen,
    })
}
