//! Small fully connected ReLU networks with exact reverse-mode gradients, an
//! Adam optimizer and Polyak target averaging.
//!
//! Parameters live in one flat `Vec<f64>`: for every layer the weight matrix
//! (row-major, `fan_in x fan_out`) followed by its bias vector. Gradients and
//! optimizer moments share that layout.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`MlpNet::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by each hidden layer's post-activation.
    layer_inputs: Vec<Array2<f64>>,
}

fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpNet {
    /// Fan-in scaled uniform initialization; the output layer's weights are
    /// additionally multiplied by `output_scale` and its bias set to
    /// `output_bias`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        output_scale: f64,
        output_bias: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut params = Vec::with_capacity(param_count(widths));
        let layers = widths.len() - 1;
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let last = l + 1 == layers;
            let scale = if last { output_scale } else { 1.0 };
            for _ in 0..fan_in * fan_out {
                params.push(scale * rng.random_range(-bound..bound));
            }
            for _ in 0..fan_out {
                params.push(if last {
                    output_bias
                } else {
                    rng.random_range(-bound..bound)
                });
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn from_params(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        if params.len() != param_count(&widths) {
            return Err(Error::Contract(format!(
                "{} parameters for widths {widths:?} (expected {})",
                params.len(),
                param_count(&widths)
            )));
        }
        Ok(Self { widths, params })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::from_params(widths.to_vec(), vec![0.0; param_count(widths)])
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let offset: usize = self.widths[..l + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
        let w = ArrayView2::from_shape(
            (fan_in, fan_out),
            &self.params[offset..offset + fan_in * fan_out],
        )
        .expect("layer shape");
        let b = ArrayView1::from(
            &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out],
        );
        (w, b)
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.widths[..l + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Forward pass over a batch (one row per example).
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.input_width() {
            return Err(Error::Contract(format!(
                "input has {} columns, network expects {}",
                input.ncols(),
                self.input_width()
            )));
        }
        let layers = self.widths.len() - 1;
        let mut layer_inputs = Vec::with_capacity(layers);
        let mut x = input.to_owned();
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let mut z = x.dot(&w);
            z += &b;
            layer_inputs.push(x);
            if l + 1 < layers {
                z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
            x = z;
        }
        Ok((x, ForwardCache { layer_inputs }))
    }

    /// Output for one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Contract(e.to_string()))?;
        Ok(self.forward_batch(view)?.0.into_raw_vec_and_offset().0)
    }

    /// Reverse pass. `output_cotangent` holds dL/d(output) per row; returns the
    /// parameter gradient (summed over rows) and dL/d(input) per row.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_cotangent: ArrayView2<'_, f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let layers = self.widths.len() - 1;
        let rows = cache.layer_inputs[0].nrows();
        if output_cotangent.dim() != (rows, self.output_width()) {
            return Err(Error::Contract(format!(
                "cotangent shape {:?} does not match ({rows}, {})",
                output_cotangent.dim(),
                self.output_width()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = output_cotangent.to_owned();
        for l in (0..layers).rev() {
            let a = &cache.layer_inputs[l];
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let offset = self.layer_offset(l);
            let dw = a.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            grads[offset..offset + fan_in * fan_out]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(g, v)| *g = *v);
            grads[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]
                .iter_mut()
                .zip(db.iter())
                .for_each(|(g, v)| *g = *v);
            let (w, _) = self.layer(l);
            let mut prev = delta.dot(&w.t());
            if l > 0 {
                // ReLU mask: the stored activation is positive iff the
                // pre-activation was, so the subgradient at 0 is 0.
                prev.zip_mut_with(a, |d, act| {
                    if *act <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    fn check_topology(&self, other: &MlpNet) -> Result<()> {
        if self.widths != other.widths {
            return Err(Error::Contract(format!(
                "topology mismatch: {:?} vs {:?}",
                self.widths, other.widths
            )));
        }
        Ok(())
    }
}

/// A slowly tracking shadow copy of an online network.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetNet(pub MlpNet);

impl TargetNet {
    pub fn new(online: &MlpNet) -> Self {
        Self(online.clone())
    }

    pub fn net(&self) -> &MlpNet {
        &self.0
    }

    /// `target <- (1 - tau) * target + tau * online`, elementwise.
    pub fn soft_update(&mut self, online: &MlpNet, tau: f64) -> Result<()> {
        soft_update(&mut self.0, online, tau)
    }
}

pub fn soft_update(target: &mut MlpNet, online: &MlpNet, tau: f64) -> Result<()> {
    target.check_topology(online)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in [0,1], got {tau}"
        )));
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected adaptive-moment update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "adam state sized {} got params {} grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::TrainingFault {
                step: self.step,
                reason: format!("non-finite gradient component {bad}"),
                last_good_checkpoint: None,
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
