//! Leaky integrate-and-fire dynamics, spike tensors and surrogate gradients.
//!
//! One neuron update is
//!
//! ```text
//! h_t = decay * v_{t-1} + x_t
//! s_t = H(h_t - threshold)
//! v_t = h_t * (1 - s_t)            (hard_zero)
//! v_t = h_t - s_t * threshold      (soft_subtract)
//! ```
//!
//! The backward pass replaces `dH/dh` with a surrogate derivative and treats
//! the reset as a constant (detached reset).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    HardZero,
    SoftSubtract,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronConfig {
    pub threshold: f32,
    pub decay: f32,
    pub reset: ResetMode,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            decay: 0.5,
            reset: ResetMode::HardZero,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!("neuron threshold must be > 0, got {}", self.threshold)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("neuron decay must be in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }

    pub fn with_threshold(mut self, threshold: f32) -> Self {
        self.threshold = threshold;
        self
    }

    /// Integrates one input into `potential` and returns `(pre_reset, spiked)`.
    #[inline]
    pub fn integrate(&self, potential: &mut f32, input: f32) -> (f32, bool) {
        let h = self.decay * *potential + input;
        let spiked = h >= self.threshold;
        *potential = match (spiked, self.reset) {
            (false, _) => h,
            (true, ResetMode::HardZero) => 0.0,
            (true, ResetMode::SoftSubtract) => h - self.threshold,
        };
        (h, spiked)
    }

    /// Derivative of the post-reset potential w.r.t. the pre-reset one, reset detached.
    #[inline]
    pub(crate) fn reset_passthrough(&self, spiked: bool) -> f32 {
        match (spiked, self.reset) {
            (true, ResetMode::HardZero) => 0.0,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Sigmoid,
    Rectangular,
    Arctan,
}

/// For `sigmoid` and `arctan`, `width` is the sharpness α; for `rectangular`
/// it is the window width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    pub width: f32,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Sigmoid,
            width: 4.0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::Config(format!("surrogate width must be > 0, got {}", self.width)));
        }
        Ok(())
    }

    #[inline]
    pub fn derivative(&self, x: f32) -> f32 {
        let a = self.width;
        match self.kind {
            SurrogateKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-a * x).exp());
                a * s * (1.0 - s)
            }
            SurrogateKind::Rectangular => {
                if x.abs() < 0.5 * a {
                    1.0 / a
                } else {
                    0.0
                }
            }
            SurrogateKind::Arctan => {
                let z = std::f32::consts::FRAC_PI_2 * a * x;
                0.5 * a / (1.0 + z * z)
            }
        }
    }

    /// The smooth step whose derivative is [`Self::derivative`].
    pub fn primitive(&self, x: f64) -> f64 {
        let a = self.width as f64;
        match self.kind {
            SurrogateKind::Sigmoid => 1.0 / (1.0 + (-a * x).exp()),
            SurrogateKind::Rectangular => ((x / a) + 0.5).clamp(0.0, 1.0),
            SurrogateKind::Arctan => std::f64::consts::FRAC_1_PI * (std::f64::consts::FRAC_PI_2 * a * x).atan() + 0.5,
        }
    }
}

/// Elementwise Heaviside step with `H(0) = 1`.
pub fn heaviside_spike(x: &Matrix) -> Matrix {
    x.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

pub fn surrogate_derivative(x: &Matrix, cfg: &SurrogateConfig) -> Result<Matrix> {
    cfg.validate()?;
    Ok(x.map(|v| cfg.derivative(v)))
}

/// Membrane potentials of an `[N, D]` population.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneState {
    pub potential: Matrix,
    pub neuron: NeuronConfig,
}

impl MembraneState {
    pub fn new(rows: usize, cols: usize, neuron: NeuronConfig) -> Result<Self> {
        neuron.validate()?;
        Ok(Self {
            potential: Matrix::zeros(rows, cols),
            neuron,
        })
    }

    pub fn threshold(&self) -> f32 {
        self.neuron.threshold
    }

    pub fn decay(&self) -> f32 {
        self.neuron.decay
    }
}

/// Advances every neuron one timestep and returns the emitted spikes.
///
/// The surrogate config only matters on the training path; it is validated
/// here so a bad config fails at the first step rather than at backward.
pub fn lif_step(state: &mut MembraneState, input: &Matrix, surrogate: &SurrogateConfig) -> Result<Matrix> {
    surrogate.validate()?;
    if state.potential.shape() != input.shape() {
        return Err(Error::dim("lif_step", format!("{:?}", state.potential.shape()), format!("{:?}", input.shape())));
    }
    let mut spikes = Matrix::zeros(input.rows(), input.cols());
    let neuron = state.neuron;
    for ((v, &x), s) in state
        .potential
        .as_mut_slice()
        .iter_mut()
        .zip(input.as_slice())
        .zip(spikes.as_mut_slice())
    {
        let (_, spiked) = neuron.integrate(v, x);
        *s = if spiked { 1.0 } else { 0.0 };
    }
    Ok(spikes)
}

/// Binary activations of shape `[T, N, D]`, stored as a `[T * N, D]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTensor {
    data: Matrix,
    timesteps: usize,
    tokens: usize,
}

impl SpikeTensor {
    pub fn new(data: Matrix, timesteps: usize, tokens: usize) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::dim("spike tensor", "T >= 1", 0));
        }
        if data.rows() != timesteps * tokens {
            return Err(Error::dim("spike tensor rows", timesteps * tokens, data.rows()));
        }
        if let Some(bad) = data.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Usage(format!("spike tensor must be binary, found {bad}")));
        }
        Ok(Self { data, timesteps, tokens })
    }

    pub fn zeros(timesteps: usize, tokens: usize, channels: usize) -> Self {
        Self {
            data: Matrix::zeros(timesteps * tokens, channels),
            timesteps,
            tokens,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn get(&self, t: usize, n: usize, d: usize) -> f32 {
        self.data.get(t * self.tokens + n, d)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    /// Keeps the listed tokens (in the given order) at every timestep.
    pub fn gather_tokens(&self, idx: &[usize]) -> SpikeTensor {
        let d = self.channels();
        let mut out = Matrix::zeros(self.timesteps * idx.len(), d);
        for t in 0..self.timesteps {
            for (j, &n) in idx.iter().enumerate() {
                out.row_mut(t * idx.len() + j).copy_from_slice(self.data.row(t * self.tokens + n));
            }
        }
        SpikeTensor {
            data: out,
            timesteps: self.timesteps,
            tokens: idx.len(),
        }
    }
}
