//! Named parameter storage and the fixed layout of every layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the final logit layer, small so an untrained model
/// predicts close to 50/50 everywhere.
pub const OUTPUT_INIT_STD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered list of named tensors. Order is part of the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    tensor: Tensor::zeros(e.tensor.shape()),
                })
                .collect(),
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.tensor.shape(),
                    b.name,
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf; the returned vars are
    /// indexed like the store.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.param(e.tensor.clone())).collect()
    }

    /// Registers every tensor as a constant leaf.
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.constant(e.tensor.clone())).collect()
    }
}

/// One convolution layer: indices into the store plus geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvLayer {
    /// Convolution plus bias, optionally followed by relu.
    pub fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var, relu: bool) -> Result<Var> {
        let y = tape.conv2d_dilated(x, vars[self.weight], self.stride, self.padding, self.dilation)?;
        let y = tape.add_channel_bias(y, vars[self.bias])?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchLayers {
    /// 1×1 fusion of the query with tiled foreground prototypes.
    pub p_match: ConvLayer,
    /// Dilated 3×3 convolutions (rates 1, 2, 4).
    pub aspp_dilated: [ConvLayer; 3],
    /// 1×1 convolution of the globally pooled input.
    pub aspp_pool: ConvLayer,
    pub aspp_project: ConvLayer,
    pub head: [ConvLayer; 2],
    pub output: ConvLayer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub encoder: Vec<ConvLayer>,
    pub branches: Vec<BranchLayers>,
}

struct Builder<'a, R: Rng> {
    store: ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        std: Option<f64>,
    ) -> ConvLayer {
        let fan_in = (kernel * kernel * cin) as f64;
        let std = std.unwrap_or_else(|| (2.0 / fan_in).sqrt());
        let normal = Normal::new(0.0, std).expect("finite std");
        let shape = [kernel, kernel, cin, cout];
        let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(self.rng)).collect();
        let weight = self
            .store
            .push(format!("{name}.weight"), Tensor::new(shape.to_vec(), data).expect("kernel shape"));
        let bias = self.store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer {
            weight,
            bias,
            stride,
            padding: dilation * (kernel / 2),
            dilation,
        }
    }
}

/// Number of channels the ASPP block sees: query plus the two fused maps.
pub fn activated_channels(cfg: &ModelConfig) -> usize {
    cfg.feature_dim() + 2
}

/// Builds the layout and He-initialized parameters (bias zero) for `cfg`.
pub fn init_params(cfg: &ModelConfig) -> Result<(Layout, ParamStore)> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.init_seed);
    let mut b = Builder {
        store: ParamStore::default(),
        rng: &mut rng,
    };
    let mut encoder = Vec::new();
    let mut cin = 3;
    for (block, &width) in cfg.encoder_widths.iter().enumerate() {
        let stride = if block < 2 { 2 } else { 1 };
        encoder.push(b.conv(&format!("encoder.{block}.0"), 3, cin, width, stride, 1, None));
        encoder.push(b.conv(&format!("encoder.{block}.1"), 3, width, width, 1, 1, None));
        cin = width;
    }
    let c = cfg.feature_dim();
    let a = cfg.aspp_width;
    let h = cfg.head_width;
    let qc = activated_channels(cfg);
    let branches = (0..cfg.branches)
        .map(|t| {
            let p = |s: &str| format!("branch.{t}.{s}");
            BranchLayers {
                p_match: b.conv(&p("p_match"), 1, (cfg.k + 1) * c, c, 1, 1, None),
                aspp_dilated: [1, 2, 4].map(|d| b.conv(&p(&format!("aspp.rate{d}")), 3, qc, a, 1, d, None)),
                aspp_pool: b.conv(&p("aspp.pool"), 1, qc, a, 1, 1, None),
                aspp_project: b.conv(&p("aspp.project"), 1, 4 * a, a, 1, 1, None),
                head: [
                    b.conv(&p("head.0"), 3, a, h, 1, 1, None),
                    b.conv(&p("head.1"), 3, h, h, 1, 1, None),
                ],
                output: b.conv(&p("head.out"), 1, h, 2, 1, 1, Some(OUTPUT_INIT_STD)),
            }
        })
        .collect();
    Ok((Layout { encoder, branches }, b.store))
}
