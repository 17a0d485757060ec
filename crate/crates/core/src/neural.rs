//! Minimal dense-network core: forward/backward passes, Adam, Polyak target
//! blending, and a flat binary checkpoint format.
//!
//! Networks are ReLU-hidden chains with either a tanh or a linear output
//! head, sized for the [128, 128] actors and critics used by the trainers.
//! All math is f64. Batched entry points exist because the training loops
//! push whole mini-batches through at once; the single-sample calls wrap
//! them.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("need at least two layer sizes, got {0}")]
    BadLayerSpec(usize),
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
    #[error("tau must lie in [0, 1], got {0}")]
    BadTau(f64),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Tanh,
    Linear,
}

/// Dense network parameters: per-layer weight matrices (`[out, in]`) and
/// bias vectors, ReLU hidden activations, and a configurable output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    output_activation: OutputActivation,
}

/// Post-activation values kept from a forward pass; `activations[0]` is the
/// input batch and the last entry the output batch.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    activations: Vec<Array2<f64>>,
}

/// Parameter gradients mirroring [`Mlp`] shapes.
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Mlp {
    /// Random initialization: He-uniform fan-in scaling on every layer except
    /// the last, whose weights are drawn uniformly from [-3e-3, 3e-3]. All
    /// biases start at zero. Deterministic for a given random stream.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        layer_sizes: &[usize],
        output_activation: OutputActivation,
    ) -> Result<Self, NeuralError> {
        if layer_sizes.len() < 2 {
            return Err(NeuralError::BadLayerSpec(layer_sizes.len()));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(NeuralError::ShapeMismatch("zero-width layer".into()));
        }
        let last = layer_sizes.len() - 2;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = if l == last {
                3e-3
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..=bound));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            output_activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_len(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(
        &self,
        input: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache), NeuralError> {
        if input.ncols() != self.input_len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "input width {} != expected {}",
                input.ncols(),
                self.input_len()
            )));
        }
        let mut activations = Vec::with_capacity(self.num_layers() + 1);
        activations.push(input.to_owned());
        for l in 0..self.num_layers() {
            let mut z = activations[l].dot(&self.weights[l].t());
            z += &self.biases[l];
            let a = if l + 1 == self.num_layers() {
                match self.output_activation {
                    OutputActivation::Tanh => z.mapv_into(f64::tanh),
                    OutputActivation::Linear => z,
                }
            } else {
                z.mapv_into(|v| v.max(0.0))
            };
            activations.push(a);
        }
        let output = activations.last().unwrap().clone();
        Ok((output, ForwardCache { activations }))
    }

    /// Single-sample forward pass returning the output and the cache needed
    /// by [`Mlp::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NeuralError> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| NeuralError::ShapeMismatch(e.to_string()))?;
        let (out, cache) = self.forward_batch(x)?;
        Ok((out.row(0).to_vec(), cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NeuralError> {
        Ok(self.forward(input)?.0)
    }

    /// Batched reverse pass. `output_gradient` is d(loss)/d(output); returns
    /// exact parameter gradients and, when requested, d(loss)/d(input).
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView2<f64>,
        want_input_grad: bool,
    ) -> Result<(MlpGrads, Option<Array2<f64>>), NeuralError> {
        let mut delta = self.seed_delta(cache, output_gradient)?;
        let mut d_weights = vec![Array2::zeros((0, 0)); self.num_layers()];
        let mut d_biases = vec![Array1::zeros(0); self.num_layers()];
        let mut input_grad = None;
        for l in (0..self.num_layers()).rev() {
            d_weights[l] = delta.t().dot(&cache.activations[l]);
            d_biases[l] = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.weights[l]);
                prev.zip_mut_with(&cache.activations[l], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = prev;
            } else if want_input_grad {
                input_grad = Some(delta.dot(&self.weights[0]));
            }
        }
        Ok((
            MlpGrads {
                weights: d_weights,
                biases: d_biases,
            },
            input_grad,
        ))
    }

    /// d(loss)/d(input) only, skipping all parameter-gradient work. Used by
    /// the actor update, which differentiates a critic with respect to the
    /// action slice of its input.
    pub fn input_gradient_batch(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView2<f64>,
    ) -> Result<Array2<f64>, NeuralError> {
        let mut delta = self.seed_delta(cache, output_gradient)?;
        for l in (1..self.num_layers()).rev() {
            let mut prev = delta.dot(&self.weights[l]);
            prev.zip_mut_with(&cache.activations[l], |g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = prev;
        }
        Ok(delta.dot(&self.weights[0]))
    }

    fn seed_delta(
        &self,
        cache: &ForwardCache,
        output_gradient: ArrayView2<f64>,
    ) -> Result<Array2<f64>, NeuralError> {
        let output = cache.activations.last().unwrap();
        if output_gradient.dim() != output.dim() {
            return Err(NeuralError::ShapeMismatch(format!(
                "output gradient {:?} != output {:?}",
                output_gradient.dim(),
                output.dim()
            )));
        }
        let delta = match self.output_activation {
            OutputActivation::Tanh => {
                let mut d = output_gradient.to_owned();
                d.zip_mut_with(output, |g, &y| *g *= 1.0 - y * y);
                d
            }
            OutputActivation::Linear => output_gradient.to_owned(),
        };
        Ok(delta)
    }

    /// Single-sample reverse pass: parameter gradients plus the input
    /// gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_gradient: &[f64],
    ) -> Result<(MlpGrads, Vec<f64>), NeuralError> {
        let dy = ArrayView2::from_shape((1, output_gradient.len()), output_gradient)
            .map_err(|e| NeuralError::ShapeMismatch(e.to_string()))?;
        let (grads, input) = self.backward_batch(cache, dy, true)?;
        Ok((grads, input.unwrap().row(0).to_vec()))
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Read one parameter by its flat index (layer by layer: weights
    /// row-major, then biases).
    pub fn param(&self, mut index: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if index < w.len() {
                return w.as_slice().unwrap()[index];
            }
            index -= w.len();
            if index < b.len() {
                return b[index];
            }
            index -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Write one parameter by its flat index.
    pub fn set_param(&mut self, mut index: usize, value: f64) {
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            if index < w.len() {
                w.as_slice_mut().unwrap()[index] = value;
                return;
            }
            index -= w.len();
            if index < b.len() {
                b[index] = value;
                return;
            }
            index -= b.len();
        }
        panic!("parameter index out of range");
    }

    /// Serialize to the flat checkpoint layout: a header of layer sizes and
    /// activation tags, then per layer the row-major weights and the biases
    /// as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.push(0); // hidden activation tag: ReLU
        out.push(match self.output_activation {
            OutputActivation::Tanh => 0,
            OutputActivation::Linear => 1,
        });
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], NeuralError> {
            if *pos + n > bytes.len() {
                return Err(NeuralError::Checkpoint("truncated".into()));
            }
            let slice = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(slice)
        };
        let n_sizes = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        if n_sizes < 2 || n_sizes > 64 {
            return Err(NeuralError::Checkpoint(format!("bad layer count {n_sizes}")));
        }
        let mut layer_sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            let s = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            if s == 0 {
                return Err(NeuralError::Checkpoint("zero-width layer".into()));
            }
            layer_sizes.push(s);
        }
        let hidden_tag = take(&mut pos, 1)?[0];
        if hidden_tag != 0 {
            return Err(NeuralError::Checkpoint(format!(
                "unknown hidden activation tag {hidden_tag}"
            )));
        }
        let output_activation = match take(&mut pos, 1)?[0] {
            0 => OutputActivation::Tanh,
            1 => OutputActivation::Linear,
            t => return Err(NeuralError::Checkpoint(format!("unknown output tag {t}"))),
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let mut w = Array2::zeros((fan_out, fan_in));
            for v in w.iter_mut() {
                *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            }
            let mut b = Array1::zeros(fan_out);
            for v in b.iter_mut() {
                *v = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            }
            weights.push(w);
            biases.push(b);
        }
        if pos != bytes.len() {
            return Err(NeuralError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            layer_sizes,
            weights,
            biases,
            output_activation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Polyak blend `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NeuralError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NeuralError::BadTau(tau));
    }
    if target.layer_sizes != online.layer_sizes {
        return Err(NeuralError::ShapeMismatch(format!(
            "target layers {:?} != online layers {:?}",
            target.layer_sizes, online.layer_sizes
        )));
    }
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        t.zip_mut_with(o, |tv, &ov| *tv = tau * ov + (1.0 - tau) * *tv);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        t.zip_mut_with(o, |tv, &ov| *tv = tau * ov + (1.0 - tau) * *tv);
    }
    Ok(())
}

/// Adam optimizer state: bias-corrected first/second moments per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
}

impl AdamState {
    pub fn new(params: &Mlp, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m_weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    /// One Adam step in the direction that descends `grads`. Rejects
    /// non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut Mlp, grads: &MlpGrads) -> Result<(), NeuralError> {
        if grads.weights.len() != params.weights.len()
            || grads.biases.len() != params.biases.len()
        {
            return Err(NeuralError::ShapeMismatch("gradient layer count".into()));
        }
        let mut flat_index = 0usize;
        for (g, p) in grads.weights.iter().zip(&params.weights) {
            if g.dim() != p.dim() {
                return Err(NeuralError::ShapeMismatch("weight gradient shape".into()));
            }
            for &v in g.iter() {
                if !v.is_finite() {
                    return Err(NeuralError::NonFiniteGradient(flat_index));
                }
                flat_index += 1;
            }
        }
        for (g, p) in grads.biases.iter().zip(&params.biases) {
            if g.len() != p.len() {
                return Err(NeuralError::ShapeMismatch("bias gradient shape".into()));
            }
            for &v in g.iter() {
                if !v.is_finite() {
                    return Err(NeuralError::NonFiniteGradient(flat_index));
                }
                flat_index += 1;
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);

        let update = |param: &mut f64, grad: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * grad;
            *v = b2 * *v + (1.0 - b2) * grad * grad;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *param -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        for l in 0..params.weights.len() {
            let w = params.weights[l].as_slice_mut().unwrap();
            let g = grads.weights[l].as_slice().unwrap();
            let m = self.m_weights[l].as_slice_mut().unwrap();
            let v = self.v_weights[l].as_slice_mut().unwrap();
            for i in 0..w.len() {
                update(&mut w[i], g[i], &mut m[i], &mut v[i]);
            }
            let b = params.biases[l].as_slice_mut().unwrap();
            let gb = grads.biases[l].as_slice().unwrap();
            let mb = self.m_biases[l].as_slice_mut().unwrap();
            let vb = self.v_biases[l].as_slice_mut().unwrap();
            for i in 0..b.len() {
                update(&mut b[i], gb[i], &mut mb[i], &mut vb[i]);
            }
        }
        Ok(())
    }
}
