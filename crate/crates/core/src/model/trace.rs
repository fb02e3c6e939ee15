use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Which positions a [`CaptureSpec`] selects.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Positions {
    All,
    Set(BTreeSet<usize>),
}

/// Coordinates to record during a forward pass.
///
/// Layer 0 denotes the embeddings; block outputs live at layers `1..=L`.
/// Attention matrices are recorded for every selected layer above 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureSpec {
    pub layers: BTreeSet<usize>,
    pub positions: Positions,
    pub include_attention: bool,
}

impl CaptureSpec {
    /// Everything: all layers, all positions, attention included.
    pub fn all(config: &ModelConfig) -> Self {
        Self {
            layers: (0..=config.num_layers).collect(),
            positions: Positions::All,
            include_attention: true,
        }
    }

    /// Record nothing (logits only).
    pub fn none() -> Self {
        Self {
            layers: BTreeSet::new(),
            positions: Positions::Set(BTreeSet::new()),
            include_attention: false,
        }
    }

    pub fn single(layer: usize, position: usize) -> Self {
        Self {
            layers: [layer].into(),
            positions: Positions::Set([position].into()),
            include_attention: false,
        }
    }

    pub fn layers_at(layers: impl IntoIterator<Item = usize>, positions: Positions) -> Self {
        Self {
            layers: layers.into_iter().collect(),
            positions,
            include_attention: false,
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        if let Some(&l) = self.layers.iter().find(|&&l| l > config.num_layers) {
            return Err(Error::Range(format!(
                "capture layer {l} outside 0..={}",
                config.num_layers
            )));
        }
        if let Positions::Set(set) = &self.positions {
            if let Some(&p) = set.iter().find(|&&p| p >= seq_len) {
                return Err(Error::Range(format!(
                    "capture position {p} outside sequence of length {seq_len}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn wants(&self, layer: usize, position: usize) -> bool {
        self.layers.contains(&layer)
            && match &self.positions {
                Positions::All => true,
                Positions::Set(set) => set.contains(&position),
            }
    }

    pub(crate) fn wants_attention(&self, layer: usize) -> bool {
        self.include_attention && layer >= 1 && self.layers.contains(&layer)
    }
}

/// Hidden states and attention patterns captured from one forward pass.
///
/// `hidden[(l, i)]` is `x_i^l`; `attn_out` and `mlp_out` hold the block
/// outputs `a_i^l`, `m_i^l` for `l >= 1`. `attention[(l, h)]` is the full
/// `S x S` causal pattern of head `h` at layer `l`, rows indexed by query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualTrace {
    pub seq_len: usize,
    pub hidden: BTreeMap<(usize, usize), Array1<f64>>,
    pub attn_out: BTreeMap<(usize, usize), Array1<f64>>,
    pub mlp_out: BTreeMap<(usize, usize), Array1<f64>>,
    pub attention: BTreeMap<(usize, usize), Array2<f64>>,
    /// Coordinate overwritten by a patch, if any; the residual identity does not hold there.
    pub patched: Option<(usize, usize)>,
}

impl ResidualTrace {
    pub fn hidden(&self, layer: usize, position: usize) -> Result<&Array1<f64>> {
        self.hidden
            .get(&(layer, position))
            .ok_or_else(|| Error::Range(format!("hidden state ({layer}, {position}) not captured")))
    }

    pub fn attn_out(&self, layer: usize, position: usize) -> Result<&Array1<f64>> {
        self.attn_out
            .get(&(layer, position))
            .ok_or_else(|| Error::Range(format!("attention output ({layer}, {position}) not captured")))
    }

    pub fn attention(&self, layer: usize, head: usize) -> Result<&Array2<f64>> {
        self.attention
            .get(&(layer, head))
            .ok_or_else(|| Error::Range(format!("attention pattern ({layer}, head {head}) not captured")))
    }

    /// The sub-trace selected by `spec`.
    pub fn restrict(&self, spec: &CaptureSpec) -> Self {
        let keep = |map: &BTreeMap<(usize, usize), Array1<f64>>| {
            map.iter()
                .filter(|((l, i), _)| spec.wants(*l, *i))
                .map(|(k, v)| (*k, v.clone()))
                .collect()
        };
        Self {
            seq_len: self.seq_len,
            hidden: keep(&self.hidden),
            attn_out: keep(&self.attn_out),
            mlp_out: keep(&self.mlp_out),
            attention: self
                .attention
                .iter()
                .filter(|((l, _), _)| spec.wants_attention(*l))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
            patched: self.patched,
        }
    }

    /// First captured `(l, i)` where `x_i^l != x_i^{l-1} + a_i^l + m_i^l` bit-for-bit.
    pub fn residual_identity_violation(&self) -> Option<(usize, usize)> {
        self.hidden
            .iter()
            .filter(|((l, _), _)| *l >= 1)
            .filter(|(key, _)| Some(**key) != self.patched)
            .find_map(|(&(l, i), x)| {
                let prev = self.hidden.get(&(l - 1, i))?;
                let a = self.attn_out.get(&(l, i))?;
                let m = self.mlp_out.get(&(l, i))?;
                let rebuilt = prev + a + m;
                let same = rebuilt.iter().zip(x.iter()).all(|(r, x)| r.to_bits() == x.to_bits());
                (!same).then_some((l, i))
            })
    }

    /// Largest deviation of any attention row sum from 1, or of any entry above the diagonal from 0.
    pub fn attention_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in self.attention.values() {
            for (i, row) in a.rows().into_iter().enumerate() {
                worst = worst.max((row.sum() - 1.0).abs());
                for (j, &v) in row.iter().enumerate() {
                    if !(0.0..=1.0).contains(&v) {
                        worst = worst.max(v.abs().max((v - 1.0).abs()));
                    }
                    if j > i {
                        worst = worst.max(v.abs());
                    }
                }
            }
        }
        worst
    }
}
