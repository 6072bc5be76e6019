use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const ELU_ALPHA: f64 = 1.0;
pub const SOFTPLUS_BETA: f64 = 1.0;

/// Elementwise nonlinearities available to a graph block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    None,
    Sigmoid,
    Tanh,
    Softplus,
    Relu,
    LeakyRelu,
    Relu6,
    Elu,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 8] = [
        ActivationKind::None,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Softplus,
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::Relu6,
        ActivationKind::Elu,
    ];

    pub fn apply(self, x: f64) -> f64 {
        if x.is_nan() {
            return x;
        }
        match self {
            ActivationKind::None => x,
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Softplus => softplus(SOFTPLUS_BETA * x) / SOFTPLUS_BETA,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::LeakyRelu => x.max(0.0) + LEAKY_RELU_SLOPE * x.min(0.0),
            ActivationKind::Relu6 => x.max(0.0).min(6.0),
            ActivationKind::Elu => x.max(0.0) + (ELU_ALPHA * x.exp_m1()).min(0.0),
        }
    }

    /// Derivative at `x`; `y` is `apply(x)`, reused where cheaper.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            ActivationKind::None => 1.0,
            ActivationKind::Sigmoid => y * (1.0 - y),
            ActivationKind::Tanh => 1.0 - y * y,
            ActivationKind::Softplus => sigmoid(SOFTPLUS_BETA * x),
            ActivationKind::Relu => step(x),
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            ActivationKind::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    ELU_ALPHA * x.exp()
                }
            }
        }
    }

    /// Points where the derivative is discontinuous.
    pub fn kinks(self) -> &'static [f64] {
        match self {
            ActivationKind::Relu | ActivationKind::LeakyRelu | ActivationKind::Elu => &[0.0],
            ActivationKind::Relu6 => &[0.0, 6.0],
            _ => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::None => "none",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softplus => "softplus",
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leakyrelu",
            ActivationKind::Relu6 => "relu6",
            ActivationKind::Elu => "elu",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Argument(format!("unknown activation '{s}'")))
    }
}

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
