//! Model files: one JSON document tagged `xnn-model/1`.
//!
//! Matrices are stored row-major with explicit shapes. Numbers are written
//! in shortest round-trip form, so save then load is bit-exact.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Encoding;
use crate::error::{Result, XnnError};
use crate::model::{push_row_major, ActivationKind, DenseLayer, LinkKind, NormState, Subnetwork, XnnModel};
use crate::train::Hyperparams;

pub const MODEL_FORMAT: &str = "xnn-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: String,
    p: usize,
    k: usize,
    mu: f64,
    beta: Vec<f64>,
    /// `p x k`, row-major.
    w: Vec<f64>,
    activation: ActivationKind,
    subnets: Vec<Vec<LayerDoc>>,
    norm: Vec<NormState>,
    link: LinkKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyperparams: Option<Hyperparams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    feature_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoding: Option<Encoding>,
}

/// A model together with what is needed to apply it to new files.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub model: XnnModel,
    pub hyperparams: Option<Hyperparams>,
    pub feature_names: Vec<String>,
    /// Set when the training data came from a CSV file with categorical or
    /// scaled columns.
    pub encoding: Option<Encoding>,
}

impl SavedModel {
    pub fn new(model: XnnModel) -> Self {
        Self { model, hyperparams: None, feature_names: Vec::new(), encoding: None }
    }

    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let mut w = Vec::with_capacity(m.w.len());
        push_row_major(&mut w, &m.w);
        let subnets = m
            .subnets
            .iter()
            .map(|s| {
                s.layers
                    .iter()
                    .map(|l| {
                        let mut weights = Vec::with_capacity(l.weights.len());
                        push_row_major(&mut weights, &l.weights);
                        LayerDoc {
                            rows: l.weights.nrows(),
                            cols: l.weights.ncols(),
                            weights,
                            biases: l.biases.iter().copied().collect(),
                        }
                    })
                    .collect()
            })
            .collect();
        let doc = ModelDoc {
            format: MODEL_FORMAT.into(),
            p: m.p(),
            k: m.k(),
            mu: m.mu,
            beta: m.beta.iter().copied().collect(),
            w,
            activation: m.subnets.first().map_or(ActivationKind::Tanh, |s| s.activation),
            subnets,
            norm: m.norm.clone(),
            link: m.link,
            hyperparams: self.hyperparams.clone(),
            feature_names: self.feature_names.clone(),
            encoding: self.encoding.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(text)?;
        if doc.format != MODEL_FORMAT {
            return Err(XnnError::Data(format!("unsupported model format '{}' (expected {MODEL_FORMAT})", doc.format)));
        }
        if doc.w.len() != doc.p * doc.k {
            return Err(XnnError::Shape(format!("W has {} entries for p = {}, k = {}", doc.w.len(), doc.p, doc.k)));
        }
        let subnets = doc
            .subnets
            .iter()
            .map(|layers| {
                let layers = layers
                    .iter()
                    .map(|l| {
                        if l.weights.len() != l.rows * l.cols || l.biases.len() != l.rows {
                            return Err(XnnError::Shape(format!("layer {}x{} has inconsistent arrays", l.rows, l.cols)));
                        }
                        Ok(DenseLayer {
                            weights: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                            biases: DVector::from_column_slice(&l.biases),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Subnetwork::new(layers, doc.activation)
            })
            .collect::<Result<Vec<_>>>()?;
        let model = XnnModel {
            mu: doc.mu,
            beta: DVector::from_column_slice(&doc.beta),
            w: DMatrix::from_row_slice(doc.p, doc.k, &doc.w),
            subnets,
            norm: doc.norm,
            link: doc.link,
        };
        model.validate()?;
        if !doc.feature_names.is_empty() && doc.feature_names.len() != doc.p {
            return Err(XnnError::Shape(format!("{} feature names for p = {}", doc.feature_names.len(), doc.p)));
        }
        Ok(Self { model, hyperparams: doc.hyperparams, feature_names: doc.feature_names, encoding: doc.encoding })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
