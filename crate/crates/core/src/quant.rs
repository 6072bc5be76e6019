//! Simulated number formats and the joint weight/activation search space.
//!
//! Quantisers run in real arithmetic ("fake quantisation"): values are
//! snapped to what the target format can represent, and the backward pass
//! uses a straight-through estimator restricted to the representable range.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const FLOAT_BITS: u32 = 32;

/// Gradients pass through binary/ternary quantisers only inside `|x| <= 1`.
pub const STE_CLIP: f64 = 1.0;

pub const TERNARY_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuantScheme {
    Binary,
    Ternary,
    /// Signed fixed point; `int_bits` includes the sign bit.
    Fixed { int_bits: u32, frac_bits: u32 },
}

impl QuantScheme {
    pub const fn fixed(int_bits: u32, frac_bits: u32) -> Self {
        QuantScheme::Fixed { int_bits, frac_bits }
    }

    pub fn bits(self) -> u32 {
        bit_cost(self)
    }

    /// Applies the quantiser; returns the quantised values and the mask of
    /// positions where the straight-through gradient is passed.
    pub fn apply(self, x: &[f64]) -> (Vec<f64>, Vec<bool>) {
        match self {
            QuantScheme::Binary => quantise_binary(x),
            QuantScheme::Ternary => quantise_ternary(x),
            QuantScheme::Fixed { int_bits, frac_bits } => quantise_fixed(x, int_bits, frac_bits),
        }
    }
}

/// Storage bits for one value in the given scheme.
pub fn bit_cost(scheme: QuantScheme) -> u32 {
    match scheme {
        QuantScheme::Binary => 1,
        QuantScheme::Ternary => 2,
        QuantScheme::Fixed { int_bits, frac_bits } => int_bits + frac_bits,
    }
}

/// Bits for an optional scheme, where `None` means unquantised 32-bit float.
pub fn bits_or_float(scheme: Option<QuantScheme>) -> u32 {
    scheme.map_or(FLOAT_BITS, bit_cost)
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantScheme::Binary => f.write_str("binary"),
            QuantScheme::Ternary => f.write_str("ternary"),
            QuantScheme::Fixed { int_bits, frac_bits } => write!(f, "fix{int_bits}.{frac_bits}"),
        }
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(QuantScheme::Binary),
            "ternary" => Ok(QuantScheme::Ternary),
            _ => {
                let bad = || Error::Argument(format!("unknown quantisation scheme '{s}'"));
                let body = s.strip_prefix("fix").ok_or_else(bad)?;
                let (i, f) = body.split_once('.').ok_or_else(bad)?;
                let int_bits: u32 = i.parse().map_err(|_| bad())?;
                let frac_bits: u32 = f.parse().map_err(|_| bad())?;
                if int_bits == 0 || int_bits + frac_bits > 32 {
                    return Err(bad());
                }
                Ok(QuantScheme::fixed(int_bits, frac_bits))
            }
        }
    }
}

impl Serialize for QuantScheme {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QuantScheme {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One joint option: a weight format and an activation format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantPair {
    pub index: usize,
    pub weight: QuantScheme,
    pub activation: QuantScheme,
}

impl QuantPair {
    /// Looks up a row of the search space by index.
    pub fn from_index(index: usize) -> Result<Self> {
        QUANT_PAIRS
            .get(index)
            .copied()
            .ok_or_else(|| Error::Argument(format!("quantisation option {index} out of range 0..{}", QUANT_PAIRS.len())))
    }

    /// Parses a row index, the `w4a8` / `w8a8` shorthands, or
    /// `<weight>/<activation>` such as `fix2.2/fix4.4`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Ok(i) = s.parse::<usize>() {
            return Self::from_index(i);
        }
        match s {
            "w4a8" => return Self::from_index(W4A8_INDEX),
            "w8a8" => return Self::from_index(W8A8_INDEX),
            _ => {}
        }
        let (w, a) = s
            .split_once('/')
            .ok_or_else(|| Error::Argument(format!("expected '<weight>/<activation>', got '{s}'")))?;
        let (w, a): (QuantScheme, QuantScheme) = (w.parse()?, a.parse()?);
        QUANT_PAIRS
            .iter()
            .find(|p| p.weight == w && p.activation == a)
            .copied()
            .ok_or_else(|| Error::Argument(format!("'{s}' is not in the quantisation search space")))
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.weight, self.activation)
    }
}

const fn pair(index: usize, weight: QuantScheme, activation: QuantScheme) -> QuantPair {
    QuantPair {
        index,
        weight,
        activation,
    }
}

const FIX2_2: QuantScheme = QuantScheme::fixed(2, 2);
const FIX4_4: QuantScheme = QuantScheme::fixed(4, 4);
const FIX4_8: QuantScheme = QuantScheme::fixed(4, 8);
const FIX8_8: QuantScheme = QuantScheme::fixed(8, 8);
const FIX4_12: QuantScheme = QuantScheme::fixed(4, 12);

/// The 17 joint options, ordered from most to least aggressive.
pub const QUANT_PAIRS: [QuantPair; 17] = [
    pair(0, QuantScheme::Binary, FIX2_2),
    pair(1, QuantScheme::Binary, FIX4_4),
    pair(2, QuantScheme::Ternary, FIX2_2),
    pair(3, QuantScheme::Ternary, FIX4_4),
    pair(4, QuantScheme::Ternary, FIX4_8),
    pair(5, QuantScheme::fixed(1, 3), FIX4_4),
    pair(6, FIX2_2, FIX4_4),
    pair(7, QuantScheme::fixed(1, 5), FIX4_4),
    pair(8, QuantScheme::fixed(3, 3), FIX4_4),
    pair(9, QuantScheme::fixed(2, 4), FIX4_4),
    pair(10, FIX4_4, FIX4_4),
    pair(11, FIX4_4, FIX4_8),
    pair(12, FIX4_4, FIX8_8),
    pair(13, FIX4_8, FIX4_8),
    pair(14, FIX4_12, FIX4_4),
    pair(15, FIX4_12, FIX4_8),
    pair(16, FIX4_12, FIX8_8),
];

/// 4-bit weights (fix2.2) with 8-bit activations (fix4.4).
pub const W4A8_INDEX: usize = 6;
/// 8-bit weights and activations (fix4.4 for both).
pub const W8A8_INDEX: usize = 10;

pub fn quant_search_space() -> Vec<QuantPair> {
    QUANT_PAIRS.to_vec()
}

/// Weight bitwidths a search can pick.
pub const WEIGHT_BITWIDTHS: [u32; 7] = [1, 2, 4, 6, 8, 12, 16];
/// Activation bitwidths a search can pick.
pub const ACTIVATION_BITWIDTHS: [u32; 4] = [4, 8, 12, 16];

/// Inclusive representable range of a fixed-point format.
pub fn fixed_range(int_bits: u32, frac_bits: u32) -> (f64, f64) {
    let step = (-(frac_bits as f64)).exp2();
    let half = ((int_bits as f64) - 1.0).exp2();
    (-half, half - step)
}

/// Round to the nearest multiple of `2^-frac_bits` (ties away from zero),
/// then clamp to the signed range.
pub fn quantise_fixed(x: &[f64], int_bits: u32, frac_bits: u32) -> (Vec<f64>, Vec<bool>) {
    let scale = (frac_bits as f64).exp2();
    let (lo, hi) = fixed_range(int_bits, frac_bits);
    // adding +0.0 turns a rounded -0.0 into the grid's single zero
    let values = x.iter().map(|&v| ((v * scale).round() / scale).clamp(lo, hi) + 0.0).collect();
    let pass = x.iter().map(|&v| v >= lo && v <= hi).collect();
    (values, pass)
}

/// `mean(|x|) · sign(x)`, with `sign(0) = +1`.
pub fn quantise_binary(x: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let alpha = mean_abs(x.iter().copied());
    let values = x.iter().map(|&v| if v >= 0.0 { alpha } else { -alpha }).collect();
    (values, clip_mask(x))
}

/// Zero inside `0.7 · mean(|x|)`, otherwise `±` the mean magnitude of the
/// surviving entries.
pub fn quantise_ternary(x: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let delta = TERNARY_THRESHOLD * mean_abs(x.iter().copied());
    if delta.is_nan() {
        return (vec![f64::NAN; x.len()], clip_mask(x));
    }
    let alpha = mean_abs(x.iter().copied().filter(|v| v.abs() > delta));
    let values = x
        .iter()
        .map(|&v| {
            if v.abs() <= delta {
                0.0
            } else if v > 0.0 {
                alpha
            } else {
                -alpha
            }
        })
        .collect();
    (values, clip_mask(x))
}

fn clip_mask(x: &[f64]) -> Vec<bool> {
    x.iter().map(|v| v.abs() <= STE_CLIP).collect()
}

fn mean_abs(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Records a quantiser on the tape; `None` leaves the value untouched.
pub fn quantise_var(tape: &mut Tape, x: Var, scheme: Option<QuantScheme>) -> Result<Var> {
    match scheme {
        None => Ok(x),
        Some(s) => {
            let (values, pass) = s.apply(tape.value(x).data());
            tape.straight_through(x, values, pass)
        }
    }
}
