//! Splitting a full model into client-side and server-side segments plus an
//! auxiliary classifier on the cut layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LayeredModel;

/// `w = [phi, theta]` with the auxiliary head `h` attached at the cut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPartition {
    pub phi: LayeredModel,
    pub head: LayeredModel,
    pub theta: LayeredModel,
    pub cut_index: usize,
    pub cut_dim: usize,
}

/// Parameter counts consumed by the latency model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSizes {
    pub phi: usize,
    pub head: usize,
    pub theta: usize,
    pub cut_dim: usize,
    pub input_dim: usize,
}

impl ModelPartition {
    pub fn num_classes(&self) -> usize {
        self.theta.output_dim()
    }

    pub fn param_counts(&self) -> PartitionSizes {
        PartitionSizes {
            phi: self.phi.parameter_count(),
            head: self.head.parameter_count(),
            theta: self.theta.parameter_count(),
            cut_dim: self.cut_dim,
            input_dim: self.phi.input_dim(),
        }
    }

    /// `phi` followed by `theta`.
    pub fn reassemble(&self) -> Result<LayeredModel> {
        self.phi.concat(&self.theta)
    }
}

/// Cuts `w` before layer `cut_index` and attaches `head`.
pub fn split_model(w: &LayeredModel, cut_index: usize, head: LayeredModel) -> Result<ModelPartition> {
    let layers = w.num_layers();
    if cut_index == 0 || cut_index >= layers {
        return Err(Error::DegenerateSplit {
            cut: cut_index,
            layers,
        });
    }
    let phi = w.slice(0..cut_index)?;
    let theta = w.slice(cut_index..layers)?;
    let cut_dim = phi.output_dim();
    if head.input_dim() != cut_dim {
        return Err(Error::shape(format!(
            "auxiliary head consumes {} features but the cut layer emits {cut_dim}",
            head.input_dim()
        )));
    }
    if head.output_dim() != theta.output_dim() {
        return Err(Error::shape(format!(
            "auxiliary head emits {} logits, server exit emits {}",
            head.output_dim(),
            theta.output_dim()
        )));
    }
    Ok(ModelPartition {
        phi,
        head,
        theta,
        cut_index,
        cut_dim,
    })
}

/// Architecture of the trainable network and where it is cut.
///
/// The full model is a relu MLP `input -> hidden... -> classes`; layer
/// indices count dense and activation layers alike. The head is an MLP
/// `cut_dim -> head_hidden... -> classes` (a single affine layer by default).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
    pub cut_index: usize,
    #[serde(default)]
    pub head_hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn full_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden);
        dims.push(num_classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().chain(&self.head_hidden).any(|&d| d == 0) {
            return Err(Error::config("partition.model.hidden", "layer widths must be positive"));
        }
        // dense + relu per hidden width, plus the output layer
        let layers = 2 * self.hidden.len() + 1;
        if self.cut_index == 0 || self.cut_index >= layers {
            return Err(Error::config(
                "partition.model.cut_index",
                format!("must lie strictly between 0 and {layers}"),
            ));
        }
        Ok(())
    }

    /// Initializes `w` then the head from `rng`, in that order, and splits.
    pub fn build<R: Rng + ?Sized>(&self, input_dim: usize, num_classes: usize, rng: &mut R) -> Result<ModelPartition> {
        self.validate()?;
        let w = LayeredModel::mlp(&self.full_dims(input_dim, num_classes), rng)?;
        let cut_dim = w.layers()[self.cut_index - 1].out_dim();
        let mut head_dims = vec![cut_dim];
        head_dims.extend(&self.head_hidden);
        head_dims.push(num_classes);
        let head = LayeredModel::mlp(&head_dims, rng)?;
        split_model(&w, self.cut_index, head)
    }
}
