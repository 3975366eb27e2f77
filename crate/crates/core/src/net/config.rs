use serde::{Deserialize, Serialize};

use crate::em::{EmConfig, Kernel};
use crate::error::{Error, Result};
use crate::image::Normalization;
use crate::seed;

/// How per-prototype score maps are turned into probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxScope {
    /// One softmax over all 2K maps; fused maps form a fg/bg pair directly.
    #[default]
    Joint,
    /// Softmax over each (μ⁺_k, μ⁻_k) pair; fused maps are averaged over k.
    PerPair,
}

/// Supervision of the residual branch stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Cross-entropy on every cumulative prediction `P_t`.
    #[default]
    PartialSums,
    /// Cross-entropy on `P_1`; later branches regress `onehot(gt) −
    /// softmax(P_{t−1})` with the previous prediction held fixed.
    ResidualTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Prototypes per mixture (foreground and background each).
    pub k: usize,
    pub kappa: f64,
    pub kernel: Kernel,
    pub em_iters: usize,
    pub em_seed: u64,
    /// Residual branches; 1 means a single PMM branch.
    pub branches: usize,
    /// Feed P-Conv probability maps into the head (zeros otherwise).
    pub use_p_conv: bool,
    pub softmax_scope: SoftmaxScope,
    /// Backpropagate through every EM iteration instead of treating the
    /// final responsibilities as constants.
    pub unroll_em_grad: bool,
    pub renormalize_prototypes: bool,
    pub normalize_samples: bool,
    pub residual_mode: ResidualMode,
    /// Channel widths of the four encoder blocks; the last is the feature
    /// dimension C.
    pub encoder_widths: [usize; 4],
    pub aspp_width: usize,
    pub head_width: usize,
    pub image_size: usize,
    pub normalization: Normalization,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 3,
            kappa: 20.0,
            kernel: Kernel::Vmf,
            em_iters: 10,
            em_seed: 0,
            branches: 3,
            use_p_conv: true,
            softmax_scope: SoftmaxScope::Joint,
            unroll_em_grad: false,
            renormalize_prototypes: false,
            normalize_samples: false,
            residual_mode: ResidualMode::PartialSums,
            encoder_widths: [8, 16, 32, 64],
            aspp_width: 16,
            head_width: 32,
            image_size: 64,
            normalization: Normalization::default(),
            init_seed: 0,
        }
    }
}

/// Total downsampling of the encoder.
pub const ENCODER_STRIDE: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("em_iters", self.em_iters),
            ("branches", self.branches),
            ("aspp_width", self.aspp_width),
            ("head_width", self.head_width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("model.{name} must be positive")));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::InvalidArgument("encoder widths must be positive".into()));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::InvalidArgument("kappa must be positive".into()));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(ENCODER_STRIDE) {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be ≥ 16 and divisible by {ENCODER_STRIDE}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder_widths[3]
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / ENCODER_STRIDE
    }

    /// EM settings for branch `t`; branches differ only in their seed.
    pub fn em_config(&self, branch: usize) -> EmConfig {
        EmConfig {
            k: self.k,
            kappa: self.kappa,
            kernel: self.kernel,
            iters: self.em_iters,
            seed: seed::derive(self.em_seed, branch as u64),
            renormalize: self.renormalize_prototypes,
            // Samples are normalized on the tape before fitting.
            normalize_samples: false,
        }
    }
}
