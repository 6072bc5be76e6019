use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AttentionKind, NetworkSpec, QuantSiteKind, SiteLayout, EXPANSIONS};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::quant::QuantScheme;

pub(crate) const ATTENTION_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    /// Zero-mean uniform with the given standard deviation.
    Small(f64),
}

/// One named parameter tensor of a network and the quant site that governs it.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamEntry {
    pub key: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// `(block, site)` whose weight scheme applies.
    pub site: (usize, QuantSiteKind),
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn scheme(&self, spec: &NetworkSpec) -> Option<QuantScheme> {
        spec.weight_scheme(self.site.0, self.site.1)
    }
}

pub(crate) fn input_keys() -> [&'static str; 2] {
    ["input.w", "input.b"]
}

pub(crate) fn expansion_key(block: usize, e: usize, part: &str) -> String {
    format!("block{}.exp{e}.{part}", block + 1)
}

pub(crate) fn attention_key(block: usize, kind: AttentionKind, vector: &str) -> String {
    format!("block{}.att.{}.{vector}", block + 1, kind.name())
}

pub(crate) fn route_key(source: usize, consumer: usize) -> String {
    format!("route.{source}_{consumer}.w")
}

fn linear_entries(out: &mut Vec<ParamEntry>, block: usize, hidden: usize, e: usize) {
    let site = (block, QuantSiteKind::Linear);
    let wide = e * hidden;
    out.push(ParamEntry {
        key: expansion_key(block, e, "fc1.w"),
        shape: vec![hidden, wide],
        init: Init::Glorot {
            fan_in: hidden,
            fan_out: wide,
        },
        site,
    });
    out.push(ParamEntry {
        key: expansion_key(block, e, "fc1.b"),
        shape: vec![wide],
        init: Init::Zeros,
        site,
    });
    out.push(ParamEntry {
        key: expansion_key(block, e, "fc2.w"),
        shape: vec![wide, hidden],
        init: Init::Glorot {
            fan_in: wide,
            fan_out: hidden,
        },
        site,
    });
    out.push(ParamEntry {
        key: expansion_key(block, e, "fc2.b"),
        shape: vec![hidden],
        init: Init::Zeros,
        site,
    });
}

fn attention_entries(out: &mut Vec<ParamEntry>, block: usize, hidden: usize, kind: AttentionKind) {
    for v in kind.vectors() {
        out.push(ParamEntry {
            key: attention_key(block, kind, v),
            shape: vec![hidden],
            init: Init::Small(ATTENTION_INIT_STD),
            site: (block, QuantSiteKind::Attention),
        });
    }
}

fn route_entry(source: usize, consumer: usize, hidden: usize, layers: usize) -> ParamEntry {
    ParamEntry {
        key: route_key(source, consumer),
        shape: vec![hidden, hidden],
        init: Init::Glorot {
            fan_in: hidden,
            fan_out: hidden,
        },
        site: (consumer.min(layers) - 1, QuantSiteKind::Router),
    }
}

fn io_entries(out: &mut Vec<ParamEntry>, in_features: usize, hidden: usize, classes: usize, layers: usize) {
    let [w, b] = input_keys();
    let first = (0, QuantSiteKind::Linear);
    let last = (layers - 1, QuantSiteKind::Linear);
    out.push(ParamEntry {
        key: w.into(),
        shape: vec![in_features, hidden],
        init: Init::Glorot {
            fan_in: in_features,
            fan_out: hidden,
        },
        site: first,
    });
    out.push(ParamEntry {
        key: b.into(),
        shape: vec![hidden],
        init: Init::Zeros,
        site: first,
    });
    out.push(ParamEntry {
        key: "cls.w".into(),
        shape: vec![hidden, classes],
        init: Init::Glorot {
            fan_in: hidden,
            fan_out: classes,
        },
        site: last,
    });
    out.push(ParamEntry {
        key: "cls.b".into(),
        shape: vec![classes],
        init: Init::Zeros,
        site: last,
    });
}

/// Parameters read by a single-path network.
pub(crate) fn network_entries(spec: &NetworkSpec) -> Vec<ParamEntry> {
    let mut out = Vec::new();
    io_entries(&mut out, spec.in_features, spec.hidden, spec.classes, spec.layers());
    for (k, b) in spec.blocks.iter().enumerate() {
        linear_entries(&mut out, k, spec.hidden, b.expansion);
        attention_entries(&mut out, k, spec.hidden, b.attention);
    }
    for (s, c) in spec.route.shortcuts() {
        out.push(route_entry(s, c, spec.hidden, spec.layers()));
    }
    out
}

/// Parameters of every candidate in a search space.
pub(crate) fn supernet_entries(layout: &SiteLayout) -> Vec<ParamEntry> {
    let mut out = Vec::new();
    io_entries(&mut out, layout.in_features, layout.hidden, layout.classes, layout.layers);
    for k in 0..layout.layers {
        for e in EXPANSIONS {
            linear_entries(&mut out, k, layout.hidden, e);
        }
        for kind in AttentionKind::ALL {
            attention_entries(&mut out, k, layout.hidden, kind);
        }
    }
    for c in 2..=layout.layers + 1 {
        for s in 0..c - 1 {
            out.push(route_entry(s, c, layout.hidden, layout.layers));
        }
    }
    out
}

pub(crate) fn key_stream(key: &str) -> u64 {
    // FNV-1a
    key.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn init_tensor(entry: &ParamEntry, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key_stream(&entry.key));
    let n = entry.len();
    let data = match entry.init {
        Init::Zeros => vec![0.0; n],
        Init::Glorot { fan_in, fan_out } => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        }
        Init::Small(std) => {
            let limit = std * 3f64.sqrt();
            (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
        }
    };
    Tensor::new(entry.shape.clone(), data).expect("shape matches length")
}

/// Named parameter tensors.
///
/// Initial values depend only on `(seed, key)`, so a sampled network
/// initialised directly equals the same keys copied out of a supernet
/// initialised with the same seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn for_network(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self::from_entries(&network_entries(spec), seed))
    }

    pub fn for_supernet(layout: &SiteLayout, seed: u64) -> Self {
        Self::from_entries(&supernet_entries(layout), seed)
    }

    fn from_entries(entries: &[ParamEntry], seed: u64) -> Self {
        Self {
            tensors: entries.iter().map(|e| (e.key.clone(), init_tensor(e, seed))).collect(),
        }
    }

    /// The tensors a single-path network reads, copied out.
    pub fn extract(&self, spec: &NetworkSpec) -> Result<Self> {
        let mut out = Self::new();
        for e in network_entries(spec) {
            let t = self.get(&e.key).ok_or_else(|| Error::Contract(format!("parameter '{}' missing", e.key)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::dim("extract", format!("{}: {:?} vs {:?}", e.key, t.shape(), e.shape)));
            }
            out.insert(e.key, t.clone());
        }
        Ok(out)
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.tensors.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor) {
        self.tensors.insert(key.into(), t);
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Puts store tensors on a tape on first use, once per key.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// Parameters become gradient-carrying leaves.
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Parameters become constants.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn var(&mut self, tape: &mut Tape, key: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(key) {
            return Ok(v);
        }
        let t = self
            .store
            .get(key)
            .ok_or_else(|| Error::Contract(format!("parameter '{key}' missing")))?
            .clone();
        let v = if self.trainable { tape.leaf(t) } else { tape.constant(t) };
        self.bound.insert(key.to_string(), v);
        Ok(v)
    }

    /// Keys touched so far.
    pub fn used(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }

    /// Gradients of every bound key after a backward pass (zeros if untouched).
    pub fn grads(&self, tape: &Tape) -> Vec<(String, Vec<f64>)> {
        self.bound
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (k.clone(), g)
            })
            .collect()
    }
}
