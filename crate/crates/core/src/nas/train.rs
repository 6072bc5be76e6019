use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Adam;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{evaluate, Graph, Labels, Split};
use crate::supernet::{key_stream, network_forward, Binder, NetworkSpec, ParamStore, RunOptions};

/// Cross-entropy for single-label graphs, binary cross-entropy for multi-hot.
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &Labels, rows: Arc<[usize]>) -> Result<Var> {
    match labels {
        Labels::Single { index, .. } => tape.softmax_cross_entropy(logits, index.clone(), rows),
        Labels::Multi { targets } => tape.sigmoid_bce(logits, targets.clone(), rows),
    }
}

/// One optimiser step on the training loss; returns the loss. Only the
/// tensors the network reads are updated.
pub fn train_step(
    store: &mut ParamStore,
    opt: &mut Adam,
    g: &Graph,
    spec: &NetworkSpec,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let logits = network_forward(&mut tape, &mut binder, g, spec, &mut RunOptions::train(dropout, rng))?;
    let loss = task_loss(&mut tape, logits, g.labels(), g.split(Split::Train).clone())?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            epoch: 0,
            state: format!("training loss {value}"),
        });
    }
    tape.backward(loss)?;
    let grads = binder.grads(&tape);
    drop(binder);
    opt.step(store, &grads)?;
    Ok(value)
}

/// Loss and metric of one evaluation pass, per split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub val_loss: f64,
}

/// Eval-mode logits.
pub fn predict(store: &ParamStore, g: &Graph, spec: &NetworkSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(store);
    let logits = network_forward(&mut tape, &mut binder, g, spec, &mut RunOptions::eval())?;
    Ok(tape.value(logits).clone())
}

pub fn evaluate_network(store: &ParamStore, g: &Graph, spec: &NetworkSpec) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(store);
    let logits = network_forward(&mut tape, &mut binder, g, spec, &mut RunOptions::eval())?;
    let loss = task_loss(&mut tape, logits, g.labels(), g.split(Split::Val).clone())?;
    let z = tape.value(logits);
    Ok(Evaluation {
        train: evaluate(z, g.labels(), g.split(Split::Train))?,
        val: evaluate(z, g.labels(), g.split(Split::Val))?,
        test: evaluate(z, g.labels(), g.split(Split::Test))?,
        val_loss: tape.value(loss).item(),
    })
}

/// Training of one fixed network from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: 20,
            lr: 0.005,
            weight_decay: 5e-4,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("training needs at least one epoch".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Argument("learning rate must be positive, weight decay nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub params: ParamStore,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub eval: Evaluation,
}

/// Fresh initialisation, Adam, early stopping on validation metric (ties
/// broken by validation loss), best parameters restored.
pub fn train_network(g: &Graph, spec: &NetworkSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut store = ParamStore::for_network(spec, cfg.seed)?;
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(key_stream("final-train"));
    let mut best = (evaluate_network(&store, g, spec)?, store.clone(), 0usize);
    let mut since = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        train_step(&mut store, &mut opt, g, spec, cfg.dropout, &mut rng).map_err(|e| match e {
            Error::NonFinite { state, .. } => Error::NonFinite { epoch, state },
            other => other,
        })?;
        epochs_run = epoch;
        let ev = evaluate_network(&store, g, spec)?;
        let better = ev.val > best.0.val || (ev.val == best.0.val && ev.val_loss < best.0.val_loss);
        if better {
            best = (ev, store.clone(), epoch);
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.1,
        best_epoch: best.2,
        epochs_run,
        eval: best.0,
    })
}
