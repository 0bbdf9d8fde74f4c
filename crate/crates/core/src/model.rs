//! Decoder-stack shape description and its linear weight matrices.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("model.{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// Shape of a Llama-style decoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub hidden: u64,
    pub intermediate: u64,
    pub layers: u64,
    /// K/V projection width as a fraction of `hidden` (grouped-query attention).
    pub kv_ratio: f64,
    /// LM-head rows; 0 means the stack has no LM head.
    pub vocab: u64,
    #[serde(default = "default_element_bytes")]
    pub element_bytes: u64,
}

fn default_element_bytes() -> u64 {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Ff0,
    Ff1,
    Ff2,
    LmHead,
}

impl MatrixKind {
    pub const DECODER: [MatrixKind; 7] =
        [MatrixKind::Q, MatrixKind::K, MatrixKind::V, MatrixKind::O, MatrixKind::Ff0, MatrixKind::Ff1, MatrixKind::Ff2];

    pub fn label(self) -> &'static str {
        match self {
            MatrixKind::Q => "Q",
            MatrixKind::K => "K",
            MatrixKind::V => "V",
            MatrixKind::O => "O",
            MatrixKind::Ff0 => "FF0",
            MatrixKind::Ff1 => "FF1",
            MatrixKind::Ff2 => "FF2",
            MatrixKind::LmHead => "LM",
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One linear weight matrix of the model, `out_dim x in_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatrixShape {
    /// Decoder layer index; `None` for the LM head.
    pub layer: Option<u64>,
    pub kind: MatrixKind,
    pub out_dim: u64,
    pub in_dim: u64,
}

impl MatrixShape {
    pub fn elements(&self) -> u64 {
        self.out_dim * self.in_dim
    }

    pub fn tag(&self) -> String {
        match self.layer {
            Some(l) => format!("L{l}.{}", self.kind),
            None => self.kind.label().to_string(),
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [("hidden", self.hidden), ("intermediate", self.intermediate)];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::Invalid { field, reason: "must be >= 1".into() });
            }
        }
        if self.element_bytes != 2 {
            return Err(ModelError::Invalid { field: "element_bytes", reason: "only 16-bit elements are supported".into() });
        }
        self.try_kv_dim()?;
        Ok(())
    }

    fn try_kv_dim(&self) -> Result<u64, ModelError> {
        let raw = self.hidden as f64 * self.kv_ratio;
        let rounded = raw.round();
        if !(self.kv_ratio > 0.0 && self.kv_ratio <= 1.0) || (raw - rounded).abs() > 1e-6 || rounded < 1.0 {
            return Err(ModelError::Invalid {
                field: "kv_ratio",
                reason: format!("hidden * kv_ratio = {raw} is not a positive integer <= hidden"),
            });
        }
        Ok(rounded as u64)
    }

    /// K/V projection output width.
    pub fn kv_dim(&self) -> u64 {
        self.try_kv_dim().expect("validated model")
    }

    pub fn layer_matrices(&self, layer: u64) -> [MatrixShape; 7] {
        let (h, i, kv) = (self.hidden, self.intermediate, self.kv_dim());
        let m = |kind, out_dim, in_dim| MatrixShape { layer: Some(layer), kind, out_dim, in_dim };
        [
            m(MatrixKind::Q, h, h),
            m(MatrixKind::K, kv, h),
            m(MatrixKind::V, kv, h),
            m(MatrixKind::O, h, h),
            m(MatrixKind::Ff0, i, h),
            m(MatrixKind::Ff1, i, h),
            m(MatrixKind::Ff2, h, i),
        ]
    }

    pub fn lm_head(&self) -> Option<MatrixShape> {
        (self.vocab > 0).then_some(MatrixShape {
            layer: None,
            kind: MatrixKind::LmHead,
            out_dim: self.vocab,
            in_dim: self.hidden,
        })
    }

    /// Every linear matrix in execution order.
    pub fn matrices(&self) -> Vec<MatrixShape> {
        let mut all: Vec<MatrixShape> = (0..self.layers).flat_map(|l| self.layer_matrices(l)).collect();
        all.extend(self.lm_head());
        all
    }

    pub fn linear_params(&self) -> u64 {
        self.matrices().iter().map(MatrixShape::elements).sum()
    }

    /// Host-friendly (unpadded) weight bytes.
    pub fn host_bytes(&self) -> u64 {
        self.linear_params() * self.element_bytes
    }

    /// One feed-forward matrix, `H x I` elements: the cacheable buffer unit.
    pub fn buffer_unit_elements(&self) -> u64 {
        self.hidden * self.intermediate
    }

    pub fn buffer_unit_bytes(&self) -> u64 {
        self.buffer_unit_elements() * self.element_bytes
    }

    pub fn llama32_1b() -> Self {
        Self {
            name: "llama3.2-1b".into(),
            hidden: 2048,
            intermediate: 8192,
            layers: 16,
            kv_ratio: 0.25,
            vocab: 128_256,
            element_bytes: 2,
        }
    }

    pub fn llama32_3b() -> Self {
        Self {
            name: "llama3.2-3b".into(),
            hidden: 3072,
            intermediate: 8192,
            layers: 28,
            kv_ratio: 1.0 / 3.0,
            vocab: 128_256,
            element_bytes: 2,
        }
    }

    pub fn toy_64() -> Self {
        Self { name: "toy-64".into(), hidden: 64, intermediate: 256, layers: 2, kv_ratio: 0.25, vocab: 512, element_bytes: 2 }
    }
}
