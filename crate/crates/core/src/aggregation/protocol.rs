use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which rule produced a protocol's weights over groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// Uniform average of the group losses.
    Ltr,
    /// Max group loss minus min group loss.
    Forml,
    /// Max group loss only.
    MetaGdro,
    /// Coefficients from the bargaining game.
    Bargained,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolKind::Ltr => "ltr",
            ProtocolKind::Forml => "forml",
            ProtocolKind::MetaGdro => "gdro",
            ProtocolKind::Bargained => "bargained",
        })
    }
}

impl FromStr for ProtocolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ltr" => Ok(ProtocolKind::Ltr),
            "forml" => Ok(ProtocolKind::Forml),
            "gdro" | "meta-gdro" | "metagdro" => Ok(ProtocolKind::MetaGdro),
            "bargained" | "nbs" => Ok(ProtocolKind::Bargained),
            other => Err(Error::input(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub kind: ProtocolKind,
    pub weights: Vec<f64>,
}

impl Protocol {
    pub fn bargained(alpha: Vec<f64>) -> Self {
        Self {
            kind: ProtocolKind::Bargained,
            weights: alpha,
        }
    }
}

/// Weight vector for a fixed fairness protocol at the given group losses.
///
/// Ties in argmax/argmin go to the lowest group index. FORML with every loss
/// equal returns the zero vector.
pub fn protocol_weights(kind: ProtocolKind, group_losses: &[f64]) -> Result<Protocol> {
    let k = group_losses.len();
    if k == 0 {
        return Err(Error::input("protocol needs at least one group loss"));
    }
    let argmax = (1..k).fold(0, |best, i| {
        if group_losses[i] > group_losses[best] {
            i
        } else {
            best
        }
    });
    let argmin = (1..k).fold(0, |best, i| {
        if group_losses[i] < group_losses[best] {
            i
        } else {
            best
        }
    });
    let mut weights = vec![0.0; k];
    match kind {
        ProtocolKind::Ltr => weights.iter_mut().for_each(|w| *w = 1.0 / k as f64),
        ProtocolKind::Forml => {
            if group_losses[argmax] != group_losses[argmin] {
                weights[argmax] = 1.0;
                weights[argmin] = -1.0;
            }
        }
        ProtocolKind::MetaGdro => weights[argmax] = 1.0,
        ProtocolKind::Bargained => {
            return Err(Error::input(
                "bargained weights come from the bargaining solver, not from group losses",
            ))
        }
    }
    Ok(Protocol { kind, weights })
}
