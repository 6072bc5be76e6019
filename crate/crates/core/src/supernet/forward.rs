use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{attention_key, expansion_key, input_keys, route_key};
use super::{ArchSite, AttentionKind, Binder, NetworkSpec, QuantSiteKind, SiteLayout, EXPANSIONS};
use crate::autodiff::{ActivationKind, Aggregation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::quant::{bits_or_float, quantise_var, QuantScheme};

/// Negative slope inside GAT-style scores.
pub const GAT_SLOPE: f64 = 0.2;

/// Controller probability vectors on the same tape as the network.
///
/// Each sampled choice multiplies the tensor it produces by a unit gate on
/// its probability: the forward value is unchanged and the gradient reaches
/// `P[site][choice]`.
#[derive(Clone, Copy)]
pub struct Gates<'a> {
    pub layout: &'a SiteLayout,
    pub arch: &'a [Var],
    pub quant: &'a [Var],
}

/// One activation tensor held between sub-blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub site: String,
    pub elements: usize,
    pub bits: u32,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub dropout: f64,
    /// Dropout is applied only when an rng is supplied.
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub gates: Option<Gates<'a>>,
    pub meter: Option<&'a mut Vec<BufferEntry>>,
}

impl<'a> RunOptions<'a> {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
            ..Self::default()
        }
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => tape.dropout(x, self.dropout, rng),
            _ => x,
        }
    }

    fn act_quant(&mut self, tape: &mut Tape, x: Var, scheme: Option<QuantScheme>, site: impl FnOnce() -> String) -> Result<Var> {
        if let Some(m) = self.meter.as_deref_mut() {
            m.push(BufferEntry {
                site: site(),
                elements: tape.value(x).len(),
                bits: bits_or_float(scheme),
            });
        }
        quantise_var(tape, x, scheme)
    }

    fn arch_gate(&self, tape: &mut Tape, x: Var, site: ArchSite, choice: usize) -> Result<Var> {
        match self.gates {
            Some(g) => {
                let p = g.arch[g.layout.arch_index(site)];
                let u = tape.unit_gate(p, choice)?;
                tape.mul_scalar(x, u)
            }
            None => Ok(x),
        }
    }

    fn quant_gate(&self, tape: &mut Tape, x: Var, spec: &NetworkSpec, block: usize, kind: QuantSiteKind) -> Result<Var> {
        match (self.gates, spec.pair(block, kind)) {
            (Some(g), Some(pair)) => {
                let p = g.quant[g.layout.quant_index(block, kind)];
                let u = tape.unit_gate(p, pair.index)?;
                tape.mul_scalar(x, u)
            }
            _ => Ok(x),
        }
    }
}

fn weight(tape: &mut Tape, binder: &mut Binder, key: &str, scheme: Option<QuantScheme>) -> Result<Var> {
    let w = binder.var(tape, key)?;
    quantise_var(tape, w, scheme)
}

fn position<T: PartialEq>(all: &[T], x: &T) -> usize {
    all.iter().position(|a| a == x).expect("choice drawn from its option list")
}

/// Adds each directed edge's score to the score of its reverse edge.
pub fn sym_gat_coefficients(tape: &mut Tape, scores: Var, reverse: Arc<[usize]>) -> Result<Var> {
    if reverse.len() != tape.value(scores).len() {
        return Err(Error::Structure("reverse index does not cover every edge".into()));
    }
    let back = tape.gather_rows(scores, reverse)?;
    tape.add(scores, back)
}

/// Raw (pre-softmax) per-edge scores; `i` is the edge target, `j` its source.
pub(crate) fn attention_scores(
    tape: &mut Tape,
    binder: &mut Binder,
    g: &Graph,
    h: Var,
    block: usize,
    kind: AttentionKind,
    scheme: Option<QuantScheme>,
) -> Result<Var> {
    let (src, dst) = (g.sources().clone(), g.targets().clone());
    let mut param = |tape: &mut Tape, v: &str| weight(tape, binder, &attention_key(block, kind, v), scheme);
    let gat = |tape: &mut Tape, a_dst: Var, a_src: Var| -> Result<Var> {
        let sd = tape.matvec(h, a_dst)?;
        let ss = tape.matvec(h, a_src)?;
        let sd = tape.gather_rows(sd, dst.clone())?;
        let ss = tape.gather_rows(ss, src.clone())?;
        let e = tape.add(sd, ss)?;
        Ok(tape.leaky_relu(e, GAT_SLOPE))
    };
    match kind {
        AttentionKind::Const => Ok(tape.constant(Tensor::filled(&[g.num_edges()], 1.0))),
        AttentionKind::Gcn => {
            let deg = g.degrees();
            let s = g.edge_pairs().map(|(j, i)| 1.0 / ((deg[i] * deg[j]) as f64).sqrt()).collect();
            Ok(tape.constant(Tensor::vector(s)))
        }
        AttentionKind::Gat => {
            let (a, b) = (param(tape, "a_dst")?, param(tape, "a_src")?);
            gat(tape, a, b)
        }
        AttentionKind::SymGat => {
            let (a, b) = (param(tape, "a_dst")?, param(tape, "a_src")?);
            let e = gat(tape, a, b)?;
            sym_gat_coefficients(tape, e, g.reverse().clone())
        }
        AttentionKind::Cos => {
            let (w1, w2) = (param(tape, "w1")?, param(tape, "w2")?);
            let hi = tape.mul_broadcast(h, w1)?;
            let hj = tape.mul_broadcast(h, w2)?;
            let hi = tape.gather_rows(hi, dst)?;
            let hj = tape.gather_rows(hj, src)?;
            tape.row_dot(hi, hj)
        }
        AttentionKind::Linear => {
            let w = param(tape, "w")?;
            let s = tape.matvec(h, w)?;
            let s = tape.gather_rows(s, src)?;
            Ok(tape.activation(s, ActivationKind::Tanh))
        }
        AttentionKind::GeneLinear => {
            let (w1, w2, wg) = (param(tape, "w1")?, param(tape, "w2")?, param(tape, "g")?);
            let hi = tape.mul_broadcast(h, w1)?;
            let hj = tape.mul_broadcast(h, w2)?;
            let hi = tape.gather_rows(hi, dst)?;
            let hj = tape.gather_rows(hj, src)?;
            let z = tape.add(hi, hj)?;
            let z = tape.activation(z, ActivationKind::Tanh);
            tape.matvec(z, wg)
        }
    }
}

/// One graph block: Linear → Attention → Aggregation → Activation.
pub fn block_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    g: &Graph,
    h_in: Var,
    spec: &NetworkSpec,
    block: usize,
    opts: &mut RunOptions,
) -> Result<Var> {
    let arch = spec.blocks[block];
    if tape.value(h_in).cols() != spec.hidden || tape.value(h_in).rows() != g.num_nodes() {
        return Err(Error::dim(
            "block_forward",
            format!("input {:?}, expected [{}, {}]", tape.shape(h_in), g.num_nodes(), spec.hidden),
        ));
    }
    let name = |s: &str| format!("block{}.{s}", block + 1);
    let lin_w = spec.weight_scheme(block, QuantSiteKind::Linear);
    let lin_a = spec.act_scheme(block, QuantSiteKind::Linear);

    let x = opts.act_quant(tape, h_in, lin_a, || name("input"))?;
    let e = arch.expansion;
    let w1 = weight(tape, binder, &expansion_key(block, e, "fc1.w"), lin_w)?;
    let b1 = weight(tape, binder, &expansion_key(block, e, "fc1.b"), lin_w)?;
    let w2 = weight(tape, binder, &expansion_key(block, e, "fc2.w"), lin_w)?;
    let b2 = weight(tape, binder, &expansion_key(block, e, "fc2.b"), lin_w)?;
    let z = tape.matmul(x, w1)?;
    let z = tape.add_bias(z, b1)?;
    let z = tape.activation(z, ActivationKind::Relu);
    let z = opts.act_quant(tape, z, lin_a, || name("expanded"))?;
    let y = tape.matmul(z, w2)?;
    let y = tape.add_bias(y, b2)?;
    let y = opts.act_quant(tape, y, lin_a, || name("linear"))?;
    let y = opts.arch_gate(tape, y, ArchSite::Expansion(block), position(&EXPANSIONS, &e))?;
    let y = opts.quant_gate(tape, y, spec, block, QuantSiteKind::Linear)?;

    let att_w = spec.weight_scheme(block, QuantSiteKind::Attention);
    let scores = attention_scores(tape, binder, g, y, block, arch.attention, att_w)?;
    let coef = tape.segment_softmax(scores, g.targets().clone())?;
    let coef = opts.arch_gate(
        tape,
        coef,
        ArchSite::Attention(block),
        position(&AttentionKind::ALL, &arch.attention),
    )?;
    let coef = opts.quant_gate(tape, coef, spec, block, QuantSiteKind::Attention)?;
    let msgs = tape.gather_rows(y, g.sources().clone())?;
    let msgs = tape.scale_rows(msgs, coef)?;
    let msgs = opts.act_quant(tape, msgs, spec.act_scheme(block, QuantSiteKind::Attention), || name("messages"))?;

    let agg = tape.segment_aggregate(msgs, g.targets().clone(), arch.aggr, g.num_nodes())?;
    let agg = opts.act_quant(tape, agg, spec.act_scheme(block, QuantSiteKind::Aggregation), || {
        name("aggregated")
    })?;
    let agg = opts.arch_gate(tape, agg, ArchSite::Aggregation(block), position(&Aggregation::ALL, &arch.aggr))?;
    let agg = opts.quant_gate(tape, agg, spec, block, QuantSiteKind::Aggregation)?;

    let out = tape.activation(agg, arch.act);
    opts.arch_gate(tape, out, ArchSite::Activation(block), position(&ActivationKind::ALL, &arch.act))
}

/// Combined input of `consumer` from the states of earlier sources.
fn route_input(
    tape: &mut Tape,
    binder: &mut Binder,
    spec: &NetworkSpec,
    states: &[Var],
    consumer: usize,
    opts: &mut RunOptions,
) -> Result<Var> {
    let sources = spec.route.inputs(consumer);
    let rb = spec.router_block(consumer);
    let (rw, ra) = (
        spec.weight_scheme(rb, QuantSiteKind::Router),
        spec.act_scheme(rb, QuantSiteKind::Router),
    );
    let mut parts = Vec::with_capacity(sources.len());
    let mut projected = false;
    for &s in &sources {
        let mut x = states[s];
        if s + 1 < consumer {
            projected = true;
            let w = weight(tape, binder, &route_key(s, consumer), rw)?;
            x = tape.matmul(x, w)?;
            x = opts.act_quant(tape, x, ra, || format!("route.{s}_{consumer}"))?;
        }
        if consumer >= 2 && spec.route.gate(s, consumer) {
            x = opts.arch_gate(tape, x, ArchSite::Route { source: s, consumer }, 1)?;
        }
        parts.push(x);
    }
    let mut h = if parts.len() == 1 {
        parts[0]
    } else {
        let sum = tape.add_all(&parts)?;
        opts.act_quant(tape, sum, ra, || format!("route.sum_{consumer}"))?
    };
    if projected {
        h = opts.quant_gate(tape, h, spec, rb, QuantSiteKind::Router)?;
    }
    Ok(h)
}

/// Input projection → routed blocks → classifier; returns `n × classes` logits.
pub fn network_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    g: &Graph,
    spec: &NetworkSpec,
    opts: &mut RunOptions,
) -> Result<Var> {
    spec.validate()?;
    if g.num_features() != spec.in_features {
        return Err(Error::dim(
            "network_forward",
            format!("graph has {} features, network expects {}", g.num_features(), spec.in_features),
        ));
    }
    let layers = spec.layers();
    let first_w = spec.weight_scheme(0, QuantSiteKind::Linear);
    let [wk, bk] = input_keys();
    let w = weight(tape, binder, wk, first_w)?;
    let b = weight(tape, binder, bk, first_w)?;
    let x0 = tape.sparse_matmul(g.features().clone(), w)?;
    let x0 = tape.add_bias(x0, b)?;
    let x0 = opts.act_quant(tape, x0, spec.act_scheme(0, QuantSiteKind::Linear), || "input".into())?;
    let mut states = vec![x0];
    for c in 1..=layers {
        let h = route_input(tape, binder, spec, &states, c, opts)?;
        let h = opts.drop(tape, h);
        let out = block_forward(tape, binder, g, h, spec, c - 1, opts)?;
        states.push(out);
    }
    let h = route_input(tape, binder, spec, &states, layers + 1, opts)?;
    let h = opts.drop(tape, h);
    let last_w = spec.weight_scheme(layers - 1, QuantSiteKind::Linear);
    let w = weight(tape, binder, "cls.w", last_w)?;
    let b = weight(tape, binder, "cls.b", last_w)?;
    let logits = tape.matmul(h, w)?;
    tape.add_bias(logits, b)
}
