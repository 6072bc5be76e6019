use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::controller::{random_choices, sample_choices, Controller, NoiseSchedule};
use super::qloss::{expected_bits, qloss};
use super::train::{task_loss, train_step};
use super::Adam;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{evaluate, Graph, Split};
use crate::quant::QUANT_PAIRS;
use crate::supernet::{
    key_stream, model_size, network_forward, Binder, CostTables, Gates, NetworkSpec, ParamStore, RunOptions, SiteLayout,
};

const ARCH_STREAM: u64 = 1;
const QUANT_STREAM: u64 = 2;

/// Search hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Total search epochs (`M`).
    pub epochs: usize,
    /// Architecture controller updates start after this epoch (`M_a`).
    pub arch_start: usize,
    /// Quantisation controller updates start after this epoch (`M_q`).
    pub quant_start: usize,
    /// Supernet steps per epoch (`K`).
    pub steps: usize,
    /// Initial noise scale.
    pub alpha: f64,
    /// Weight of the quantisation loss.
    pub beta: f64,
    pub lr: f64,
    pub seed: u64,
    pub dropout: f64,
    /// Supernet weight decay; controllers use none.
    pub weight_decay: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            arch_start: 50,
            quant_start: 20,
            steps: 2,
            alpha: 1.0,
            beta: 0.1,
            lr: 0.005,
            seed: 0,
            dropout: 0.5,
            weight_decay: 5e-4,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arch_start > self.epochs || self.quant_start > self.epochs {
            return Err(Error::Argument(format!(
                "controller start epochs ({}, {}) exceed total epochs {}",
                self.arch_start, self.quant_start, self.epochs
            )));
        }
        if self.steps == 0 {
            return Err(Error::Argument("steps per epoch must be at least 1".into()));
        }
        if !(self.beta >= 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Argument("alpha and beta must be nonnegative".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Argument("learning rate must be positive, weight decay nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One line of the search log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's supernet steps.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
    /// Quantisation loss as a fraction of the largest float network.
    pub qloss: f64,
    /// Expected weight bytes under the noise-free controller distributions.
    pub expected_bytes: f64,
    /// Weight bytes of the sampled network.
    pub sampled_bytes: f64,
    pub arch: Vec<String>,
    pub quant: Vec<String>,
    pub arch_warmup: bool,
    pub quant_warmup: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub arch: Vec<usize>,
    pub quant: Vec<usize>,
    pub spec: NetworkSpec,
    pub log: Vec<EpochLog>,
    pub supernet: ParamStore,
}

pub(crate) struct ValidationPass {
    pub val_loss: f64,
    pub val_metric: f64,
    pub qloss: f64,
    pub grads_a: Vec<(String, Vec<f64>)>,
    pub grads_q: Vec<(String, Vec<f64>)>,
}

/// A search in progress, advanced one epoch at a time.
pub struct Search<'g> {
    graph: &'g Graph,
    cfg: SearchConfig,
    layout: SiteLayout,
    costs: CostTables,
    ceiling: f64,
    supernet: ParamStore,
    arch: Controller,
    quant: Controller,
    opt_w: Adam,
    opt_a: Adam,
    opt_q: Adam,
    noise: NoiseSchedule,
    dropout_rng: ChaCha8Rng,
    epoch: usize,
    sampled: Option<(Vec<usize>, Vec<usize>)>,
    log: Vec<EpochLog>,
}

impl<'g> Search<'g> {
    pub fn new(graph: &'g Graph, layers: usize, hidden: usize, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = SiteLayout::new(layers, graph.num_features(), hidden, graph.num_classes())?;
        let costs = CostTables::new(&layout);
        let ceiling = costs.float_ceiling();
        let arch_opts = layout.arch_sites().iter().map(|s| s.options()).collect();
        let quant_opts = vec![QUANT_PAIRS.len(); layout.quant_sites().len()];
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        dropout_rng.set_stream(key_stream("search-dropout"));
        Ok(Self {
            graph,
            supernet: ParamStore::for_supernet(&layout, cfg.seed),
            arch: Controller::new(arch_opts, cfg.seed, "arch")?,
            quant: Controller::new(quant_opts, cfg.seed, "quant")?,
            opt_w: Adam::new(cfg.lr, cfg.weight_decay),
            opt_a: Adam::new(cfg.lr, 0.0),
            opt_q: Adam::new(cfg.lr, 0.0),
            noise: NoiseSchedule {
                alpha: cfg.alpha,
                epochs: cfg.epochs,
                seed: cfg.seed,
            },
            dropout_rng,
            epoch: 0,
            sampled: None,
            log: Vec::new(),
            layout,
            costs,
            ceiling,
            cfg,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &SiteLayout {
        &self.layout
    }

    pub fn costs(&self) -> &CostTables {
        &self.costs
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn supernet(&self) -> &ParamStore {
        &self.supernet
    }

    pub fn arch_controller(&self) -> &Controller {
        &self.arch
    }

    pub fn quant_controller(&self) -> &Controller {
        &self.quant
    }

    /// Choices active during the last completed epoch.
    pub fn sampled(&self) -> Option<(&[usize], &[usize])> {
        self.sampled.as_ref().map(|(a, q)| (a.as_slice(), q.as_slice()))
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    fn warmup_choices(&self, options: &[usize], tag: &str) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(key_stream(&format!("{tag}.{}", self.epoch)));
        random_choices(options, &mut rng)
    }

    fn non_finite(&self, what: &str, value: f64, arch: &[usize], quant: &[usize]) -> Error {
        let state = serde_json::json!({
            "what": what,
            "value": value.to_string(),
            "arch": arch,
            "quant": quant,
            "supernet_finite": self.supernet.is_finite(),
            "arch_logits": self.arch.logits(),
            "quant_logits": self.quant.logits(),
        });
        Error::NonFinite {
            epoch: self.epoch,
            state: state.to_string(),
        }
    }

    /// Runs one epoch: sample, `K` supernet steps, validation, controller updates.
    pub fn step(&mut self) -> Result<&EpochLog> {
        if self.finished() {
            return Err(Error::Contract("search already finished".into()));
        }
        let i = self.epoch;
        let noise_a = self.noise.sample(i, self.arch.options(), ARCH_STREAM);
        let noise_q = self.noise.sample(i, self.quant.options(), QUANT_STREAM);
        let arch_warmup = i <= self.cfg.arch_start;
        let quant_warmup = i <= self.cfg.quant_start;
        let arch = if arch_warmup {
            self.warmup_choices(self.arch.options(), "warmup-arch")
        } else {
            sample_choices(&self.arch.probabilities_values(Some(&noise_a))?)
        };
        let quant = if quant_warmup {
            self.warmup_choices(self.quant.options(), "warmup-quant")
        } else {
            sample_choices(&self.quant.probabilities_values(Some(&noise_q))?)
        };
        let spec = self.layout.decode(&arch, Some(&quant))?;

        let mut train_loss = 0.0;
        for _ in 0..self.cfg.steps {
            let l = train_step(
                &mut self.supernet,
                &mut self.opt_w,
                self.graph,
                &spec,
                self.cfg.dropout,
                &mut self.dropout_rng,
            );
            match l {
                Ok(l) => train_loss += l,
                Err(Error::NonFinite { .. }) => return Err(self.non_finite("train_loss", f64::NAN, &arch, &quant)),
                Err(e) => return Err(e),
            }
        }
        train_loss /= self.cfg.steps as f64;

        let v = self.validation_pass(&spec, &noise_a, &noise_q, Some(self.cfg.beta))?;
        if !v.val_loss.is_finite() || !v.qloss.is_finite() {
            let (what, x) = if v.val_loss.is_finite() { ("qloss", v.qloss) } else { ("val_loss", v.val_loss) };
            return Err(self.non_finite(what, x, &arch, &quant));
        }
        let (grads_a, grads_q) = (v.grads_a, v.grads_q);
        if i > self.cfg.arch_start {
            self.opt_a.step(self.arch.params_mut(), &grads_a)?;
        }
        if i > self.cfg.quant_start {
            self.opt_q.step(self.quant.params_mut(), &grads_q)?;
        }

        let expected = expected_bits(&self.arch.probabilities_values(None)?, &self.quant.probabilities_values(None)?, &self.costs)?;
        let sites = self.layout.arch_sites();
        self.log.push(EpochLog {
            epoch: i,
            train_loss,
            val_loss: v.val_loss,
            val_metric: v.val_metric,
            qloss: v.qloss,
            expected_bytes: expected / 8.0,
            sampled_bytes: model_size(&spec),
            arch: arch.iter().zip(sites).map(|(&c, s)| s.option_name(c)).collect(),
            quant: quant.iter().map(|&c| QUANT_PAIRS[c].label()).collect(),
            arch_warmup,
            quant_warmup,
        });
        self.sampled = Some((arch, quant));
        self.epoch += 1;
        Ok(self.log.last().expect("just pushed"))
    }

    /// Gated validation forward at `spec` and controller gradients of
    /// `L_v + β·L_q` (of `L_v` alone when `beta` is `None`).
    pub(crate) fn validation_pass(
        &self,
        spec: &NetworkSpec,
        noise_a: &[Vec<f64>],
        noise_q: &[Vec<f64>],
        beta: Option<f64>,
    ) -> Result<ValidationPass> {
        let mut tape = Tape::new();
        let mut ba = Binder::new(self.arch.params());
        let mut bq = Binder::new(self.quant.params());
        let pa = self.arch.probabilities(&mut tape, &mut ba, Some(noise_a))?;
        let pq = self.quant.probabilities(&mut tape, &mut bq, Some(noise_q))?;
        let mut bw = Binder::frozen(&self.supernet);
        let mut opts = RunOptions {
            gates: Some(Gates {
                layout: &self.layout,
                arch: &pa,
                quant: &pq,
            }),
            ..RunOptions::eval()
        };
        let logits = network_forward(&mut tape, &mut bw, self.graph, spec, &mut opts)?;
        let val_rows = self.graph.split(Split::Val).clone();
        let lv = task_loss(&mut tape, logits, self.graph.labels(), val_rows.clone())?;
        let val_metric = evaluate(tape.value(logits), self.graph.labels(), &val_rows)?;
        // P_a enters the quantisation loss as a constant.
        let pa_const: Vec<Var> = pa
            .iter()
            .map(|&p| {
                let t: Tensor = tape.value(p).clone();
                tape.constant(t)
            })
            .collect();
        let lq_bits = qloss(&mut tape, &pa_const, &pq, &self.costs)?;
        let lq = tape.scale(lq_bits, 1.0 / self.ceiling);
        let total = match beta {
            Some(b) => {
                let weighted = tape.scale(lq, b);
                tape.add(lv, weighted)?
            }
            None => lv,
        };
        let (val_loss, qloss) = (tape.value(lv).item(), tape.value(lq).item());
        if val_loss.is_finite() && qloss.is_finite() {
            tape.backward(total)?;
        }
        Ok(ValidationPass {
            val_loss,
            val_metric,
            qloss,
            grads_a: ba.grads(&tape),
            grads_q: bq.grads(&tape),
        })
    }

    #[cfg(test)]
    pub(crate) fn supernet_mut(&mut self) -> &mut ParamStore {
        &mut self.supernet
    }

    #[cfg(test)]
    pub(crate) fn noise(&self) -> NoiseSchedule {
        self.noise
    }

    /// Noise-free argmax of both controllers.
    pub fn current_choices(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok((
            sample_choices(&self.arch.probabilities_values(None)?),
            sample_choices(&self.quant.probabilities_values(None)?),
        ))
    }

    /// Runs the remaining epochs, streaming each log line as JSON to `sink`.
    pub fn run(mut self, mut sink: Option<&mut dyn Write>) -> Result<SearchResult> {
        while !self.finished() {
            let line = self.step()?;
            if let Some(w) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, line)?;
                w.write_all(b"\n")?;
            }
        }
        let (arch, quant) = self.current_choices()?;
        let spec = self.layout.decode(&arch, Some(&quant))?;
        Ok(SearchResult {
            arch,
            quant,
            spec,
            log: self.log,
            supernet: self.supernet,
        })
    }
}

pub fn search(g: &Graph, layers: usize, hidden: usize, cfg: SearchConfig) -> Result<SearchResult> {
    Search::new(g, layers, hidden, cfg)?.run(None)
}
