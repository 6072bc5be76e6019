use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, ExperimentRecord};
use crate::autodiff::{ActivationKind, Aggregation};
use crate::error::{Error, Result};
use crate::graph::{Graph, Metric};
use crate::nas::train::{evaluate_network, train_network, TrainOutcome};
use crate::nas::{EpochLog, Search};
use crate::quant::QuantPair;
use crate::supernet::{buffer_size, model_size, ArchChoice, AttentionKind, Checkpoint, NetworkSpec, Route};

pub struct SearchRun {
    pub record: ExperimentRecord,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn finish(
    g: &Graph,
    command: String,
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    out: &TrainOutcome,
    start: Instant,
) -> ExperimentRecord {
    ExperimentRecord {
        dataset: g.name().to_string(),
        command,
        config: cfg.clone(),
        spec: spec.clone(),
        metric: Metric::for_labels(g.labels()),
        test_metric: out.eval.test,
        val_metric: out.eval.val,
        model_bytes: model_size(spec),
        buffer_bytes: buffer_size(spec, g),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cfg.search.seed,
    }
}

/// Search, then train the chosen network from a fresh initialisation and
/// evaluate it on the test split.
pub fn cmd_search(g: &Graph, cfg: &ExperimentConfig, log: Option<&mut dyn Write>) -> Result<SearchRun> {
    cfg.validate()?;
    let start = Instant::now();
    let result = Search::new(g, cfg.layers, cfg.channels, cfg.search.clone())?.run(log)?;
    let out = train_network(g, &result.spec, &cfg.train_config())?;
    let record = finish(g, "search".into(), cfg, &result.spec, &out, start);
    let checkpoint = Checkpoint::new(result.spec, out.params)?;
    Ok(SearchRun {
        record,
        checkpoint,
        log: result.log,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineModel {
    GraphSage,
    Gat,
    JkNet,
}

/// A fixed reference network; `v2` selects the wider configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Baseline {
    pub model: BaselineModel,
    pub v2: bool,
}

impl Baseline {
    pub const LAYERS: usize = 2;

    pub fn channels(&self) -> usize {
        match (self.model, self.v2) {
            (BaselineModel::Gat, false) => 32,
            (BaselineModel::Gat, true) => 64,
            (BaselineModel::JkNet, false) => 32,
            (BaselineModel::GraphSage, false) => 16,
            (BaselineModel::JkNet | BaselineModel::GraphSage, true) => 512,
        }
    }

    fn block(&self) -> ArchChoice {
        let (attention, act, aggr) = match self.model {
            BaselineModel::Gat => (AttentionKind::Gat, ActivationKind::Elu, Aggregation::Add),
            BaselineModel::GraphSage => (AttentionKind::Const, ActivationKind::Relu, Aggregation::Mean),
            BaselineModel::JkNet => (AttentionKind::Gcn, ActivationKind::Relu, Aggregation::Add),
        };
        ArchChoice {
            attention,
            act,
            aggr,
            expansion: 1,
        }
    }

    /// The network at `quant` on every site (`None` = float).
    pub fn spec(&self, in_features: usize, classes: usize, quant: Option<QuantPair>) -> Result<NetworkSpec> {
        let layers = Self::LAYERS;
        let mut route = Route::sequential(layers);
        if self.model == BaselineModel::JkNet {
            // the classifier reads every block output
            for s in 1..=layers {
                route.set(s, layers + 1, true);
            }
        }
        let spec = NetworkSpec {
            in_features,
            hidden: self.channels(),
            classes,
            blocks: vec![self.block(); layers],
            quant: None,
            route,
        }
        .with_uniform_quant(quant);
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.model {
            BaselineModel::GraphSage => "graphsage",
            BaselineModel::Gat => "gat",
            BaselineModel::JkNet => "jknet",
        };
        write!(f, "{base}{}", if self.v2 { "-v2" } else { "" })
    }
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (base, v2) = match lower.strip_suffix("-v2") {
            Some(b) => (b, true),
            None => (lower.as_str(), false),
        };
        let model = match base {
            "graphsage" | "sage" | "sagenet" => BaselineModel::GraphSage,
            "gat" => BaselineModel::Gat,
            "jknet" => BaselineModel::JkNet,
            _ => {
                return Err(Error::Argument(format!(
                    "unknown baseline '{s}' (expected graphsage, gat or jknet, optionally with -v2)"
                )))
            }
        };
        Ok(Self { model, v2 })
    }
}

/// Trains and evaluates a fixed baseline. Layers and channels come from the
/// baseline; training settings from `cfg`.
pub fn cmd_baseline(
    g: &Graph,
    baseline: Baseline,
    quant: Option<QuantPair>,
    cfg: &ExperimentConfig,
) -> Result<(ExperimentRecord, Checkpoint)> {
    let cfg = ExperimentConfig {
        layers: Baseline::LAYERS,
        channels: baseline.channels(),
        ..cfg.clone()
    };
    cfg.validate()?;
    let start = Instant::now();
    let spec = baseline.spec(g.num_features(), g.num_classes(), quant)?;
    let out = train_network(g, &spec, &cfg.train_config())?;
    let record = finish(g, format!("baseline:{baseline}"), &cfg, &spec, &out, start);
    Ok((record, Checkpoint::new(spec, out.params)?))
}

/// Metrics of a trained checkpoint on a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub metric: Metric,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub model_bytes: f64,
    pub buffer_bytes: f64,
}

pub fn cmd_eval(g: &Graph, ck: &Checkpoint) -> Result<EvalReport> {
    let ev = evaluate_network(&ck.params, g, &ck.spec)?;
    Ok(EvalReport {
        dataset: g.name().to_string(),
        metric: Metric::for_labels(g.labels()),
        train: ev.train,
        val: ev.val,
        test: ev.test,
        model_bytes: model_size(&ck.spec),
        buffer_bytes: buffer_size(&ck.spec, g),
    })
}
