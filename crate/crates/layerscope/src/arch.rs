//! Architecture strings: `"16C3-16C3-MP-32C3-32C3-MP-32C3-32C3-MP-64FC-10SM"`.
//!
//! Token grammar: `<n>C<k>` (conv, k must be 3), `MP` (2x2/2 max pool),
//! `<n>FC` (fully connected), `D<percent>` (dropout), `<n>SM` (softmax
//! classifier head, exactly once, last). Every conv and fully connected
//! layer gets an implicit ReLU; the softmax head does not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The seven-layer stack used throughout: six convolutions and one fully
/// connected layer ahead of a ten-class softmax head.
pub const VGG7: &str = "16C3-16C3-MP-32C3-32C3-MP-32C3-32C3-MP-64FC-10SM";

/// [`VGG7`] with the dropout layer the deployed stack carries ahead of the
/// fully connected layer.
pub const VGG7_DROPOUT: &str = "16C3-16C3-MP-32C3-32C3-MP-32C3-32C3-MP-D50-64FC-10SM";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// 3x3 convolution with `filters` output channels, stride 1, pad 1.
    Conv { filters: usize },
    /// 2x2 max pool, stride 2.
    MaxPool,
    FullyConnected { units: usize },
    /// Inverted dropout with the given drop probability.
    Dropout { rate: f64 },
    /// Linear map to `classes` logits feeding the softmax/cost computation.
    SoftmaxHead { classes: usize },
}

impl LayerSpec {
    /// True for layers holding trainable parameters.
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. } | LayerSpec::SoftmaxHead { .. }
        )
    }

    /// True for the layers the exposure analysis indexes (conv and fully
    /// connected); the softmax head is excluded.
    pub fn is_measurable(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::FullyConnected { .. })
    }

    /// Neuron count: filters for conv, output units for fully connected.
    pub fn neuron_count(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv { filters } => Some(*filters),
            LayerSpec::FullyConnected { units } => Some(*units),
            LayerSpec::SoftmaxHead { classes } => Some(*classes),
            _ => None,
        }
    }

    /// Short layer code as used in partition-sweep labels.
    pub fn short_code(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "C",
            LayerSpec::MaxPool => "MP",
            LayerSpec::FullyConnected { .. } => "FC",
            LayerSpec::Dropout { .. } => "D",
            LayerSpec::SoftmaxHead { .. } => "SM",
        }
    }
}

fn err(index: usize, token: &str, reason: impl Into<String>) -> Error {
    Error::ArchParse {
        index,
        token: token.to_string(),
        reason: reason.into(),
    }
}

/// Parse an architecture string into ordered layer specs.
pub fn parse_arch(spec: &str) -> Result<Vec<LayerSpec>> {
    let tokens: Vec<&str> = spec.split('-').collect();
    if spec.trim().is_empty() {
        return Err(err(0, "", "empty architecture string"));
    }
    let mut layers = Vec::with_capacity(tokens.len());
    for (index, token) in tokens.iter().enumerate() {
        let t = token.trim();
        let last = index == tokens.len() - 1;
        let layer = parse_token(index, t)?;
        if matches!(layer, LayerSpec::SoftmaxHead { .. }) && !last {
            return Err(err(index, t, "softmax head must be the final layer"));
        }
        if last && !matches!(layer, LayerSpec::SoftmaxHead { .. }) {
            return Err(err(index, t, "architecture must end with a softmax head (<n>SM)"));
        }
        layers.push(layer);
    }
    Ok(layers)
}

fn parse_token(index: usize, t: &str) -> Result<LayerSpec> {
    if t == "MP" {
        return Ok(LayerSpec::MaxPool);
    }
    if let Some(rate_str) = t.strip_prefix('D') {
        let percent: u32 = rate_str
            .parse()
            .map_err(|_| err(index, t, "dropout rate must be an integer percentage"))?;
        if percent >= 100 {
            return Err(err(index, t, "dropout rate must be below 100 percent"));
        }
        return Ok(LayerSpec::Dropout {
            rate: percent as f64 / 100.0,
        });
    }
    if let Some(pos) = t.find(|c: char| !c.is_ascii_digit()) {
        let (num, kind) = t.split_at(pos);
        let n: usize = num
            .parse()
            .map_err(|_| err(index, t, "layer size must be a positive integer"))?;
        if n == 0 {
            return Err(err(index, t, "layer size must be at least 1"));
        }
        match kind {
            "FC" => return Ok(LayerSpec::FullyConnected { units: n }),
            "SM" => return Ok(LayerSpec::SoftmaxHead { classes: n }),
            _ => {
                if let Some(kstr) = kind.strip_prefix('C') {
                    let k: usize = kstr
                        .parse()
                        .map_err(|_| err(index, t, "conv kernel size must be an integer"))?;
                    if k != 3 {
                        return Err(err(index, t, "only 3x3 conv kernels are supported"));
                    }
                    return Ok(LayerSpec::Conv { filters: n });
                }
                return Err(err(index, t, format!("unknown layer kind {kind:?}")));
            }
        }
    }
    Err(err(index, t, "unrecognized token"))
}

/// Reconstruct the canonical string for a spec list.
pub fn arch_to_string(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv { filters } => format!("{filters}C3"),
            LayerSpec::MaxPool => "MP".to_string(),
            LayerSpec::FullyConnected { units } => format!("{units}FC"),
            LayerSpec::Dropout { rate } => format!("D{}", (rate * 100.0).round() as u32),
            LayerSpec::SoftmaxHead { classes } => format!("{classes}SM"),
        })
        .collect::<Vec<_>>()
        .join("-")
}
