//! Named, layered weight collections.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    /// Kept at full precision by every quantization scheme.
    pub exempt: bool,
}

impl Layer {
    /// ‖θᵢ‖₀, the number of weight elements.
    pub fn element_count(&self) -> usize {
        self.weight.len()
    }
}

/// Ordered layers. The flat tensor order is `weight, bias` per layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    layers: Vec<Layer>,
}

impl ParamSet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("duplicate layer name `{}`", w[0])));
        }
        Ok(ParamSet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    /// Non-exempt layers in order.
    pub fn quantizable(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| !l.exempt)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    /// Flat tensor list in `weight, bias` order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.clone());
            if let Some(b) = &l.bias {
                out.push(b.clone());
            }
        }
        out
    }

    /// Flat positions `(weight, bias)` of each layer.
    pub fn slots(&self) -> Vec<(usize, Option<usize>)> {
        let mut k = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = k;
                k += 1;
                let b = l.bias.as_ref().map(|_| {
                    k += 1;
                    k - 1
                });
                (w, b)
            })
            .collect()
    }

    /// Replace all tensors from a flat list with the same layout.
    pub fn with_tensors(&self, flat: &[Tensor]) -> Result<ParamSet> {
        let mut out = self.clone();
        let mut it = flat.iter();
        for l in out.layers_mut() {
            let mut take = |old: &Tensor| -> Result<Tensor> {
                let t = it.next().ok_or_else(|| Error::config("too few tensors"))?;
                if t.shape() != old.shape() {
                    return Err(Error::Shape {
                        op: "with_tensors",
                        lhs: old.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                Ok(t.clone())
            };
            l.weight = take(&l.weight)?;
            if let Some(b) = &l.bias {
                l.bias = Some(take(b)?);
            }
        }
        if it.next().is_some() {
            return Err(Error::config("too many tensors"));
        }
        Ok(out)
    }

    /// Apply `θ -= update` to the flat layout.
    pub fn apply_update(&mut self, update: &GradMap, scale: f64) {
        let mut it = update.0.iter();
        for l in &mut self.layers {
            l.weight.axpy(-scale, it.next().expect("congruent update"));
            if let Some(b) = &mut l.bias {
                b.axpy(-scale, it.next().expect("congruent update"));
            }
        }
    }

    /// Weight-gradient of each layer, keyed by position in [`Self::layers`].
    pub fn weight_grads<'a>(&self, grads: &'a GradMap) -> Vec<&'a Tensor> {
        self.slots().into_iter().map(|(w, _)| &grads.0[w]).collect()
    }
}
