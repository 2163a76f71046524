use super::{ModelConfig, VitError};
use crate::autodiff::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSelection {
    Gelu,
    Softmax,
    Both,
}

impl MaskSelection {
    fn gelu(self) -> bool {
        matches!(self, Self::Gelu | Self::Both)
    }

    fn softmax(self) -> bool {
        matches!(self, Self::Softmax | Self::Both)
    }
}

/// GELU switches `C` and attention-row switches `S`.
///
/// `gelu` is `[layers, tokens]` (per-token) or `[layers, tokens, mlp]`
/// (per-element); `softmax` is `[layers, heads, tokens]`. A frozen mask is
/// binary and excluded from optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchSet {
    pub gelu: Tensor,
    pub softmax: Tensor,
    pub epsilon: f64,
    pub gelu_frozen: bool,
    pub softmax_frozen: bool,
}

impl SwitchSet {
    /// All switches at 1, nothing frozen.
    pub fn new(cfg: &ModelConfig, epsilon: f64) -> Self {
        Self {
            gelu: Tensor::ones(&cfg.gelu_switch_shape()),
            softmax: Tensor::ones(&cfg.softmax_switch_shape()),
            epsilon,
            gelu_frozen: false,
            softmax_frozen: false,
        }
    }

    /// All switches at 1 with both masks frozen: the plain nonlinear model.
    pub fn all_on(cfg: &ModelConfig, epsilon: f64) -> Self {
        Self {
            gelu_frozen: true,
            softmax_frozen: true,
            ..Self::new(cfg, epsilon)
        }
    }

    pub fn check_shape(&self, cfg: &ModelConfig) -> Result<(), VitError> {
        if self.gelu.shape() != cfg.gelu_switch_shape().as_slice() {
            return Err(VitError::SwitchShape(format!(
                "gelu mask {:?}, expected {:?}",
                self.gelu.shape(),
                cfg.gelu_switch_shape()
            )));
        }
        if self.softmax.shape() != cfg.softmax_switch_shape().as_slice() {
            return Err(VitError::SwitchShape(format!(
                "softmax mask {:?}, expected {:?}",
                self.softmax.shape(),
                cfg.softmax_switch_shape()
            )));
        }
        Ok(())
    }

    /// Entries strictly greater than `epsilon`, per mask: `(gelu, softmax)`.
    pub fn count_active(&self) -> (usize, usize) {
        (
            count_above(&self.gelu, self.epsilon),
            count_above(&self.softmax, self.epsilon),
        )
    }

    /// Replaces the selected masks by `1(entry > epsilon)` and freezes them.
    /// Frozen masks are left untouched.
    pub fn binarize(&mut self, which: MaskSelection) {
        let eps = self.epsilon;
        if which.gelu() && !self.gelu_frozen {
            self.gelu = indicator(&self.gelu, eps);
            self.gelu_frozen = true;
        }
        if which.softmax() && !self.softmax_frozen {
            self.softmax = indicator(&self.softmax, eps);
            self.softmax_frozen = true;
        }
    }

    pub fn is_binary(&self) -> bool {
        let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        binary(&self.gelu) && binary(&self.softmax)
    }

    /// Both masks frozen and every entry in {0, 1}.
    pub fn is_binarized(&self) -> bool {
        self.gelu_frozen && self.softmax_frozen && self.is_binary()
    }
}

fn count_above(t: &Tensor, eps: f64) -> usize {
    t.data().iter().filter(|&&v| v > eps).count()
}

fn indicator(t: &Tensor, eps: f64) -> Tensor {
    t.map(|v| if v > eps { 1.0 } else { 0.0 })
}
