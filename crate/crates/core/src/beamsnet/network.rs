//! Batched forward and reverse-mode passes. Samples are stored as matrix
//! columns so the dense layers reduce to matrix products.

use nalgebra::{DMatrix, Vector3};
use rand::Rng;

use super::{Activation, Conv1d, Dense, NetworkParams, Result, WindowedInput};
use crate::rng::{seeded, SimRng};

/// Mean of the squared per-axis errors.
pub fn loss_mse(pred: &Vector3<f64>, truth: &Vector3<f64>) -> f64 {
    (pred - truth).norm_squared() / 3.0
}

type Window = Vec<[f64; 3]>;

/// Predictions for a batch plus the activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// One 3-vector prediction per column.
    pub pred: DMatrix<f64>,
    accel: Vec<Window>,
    gyro: Vec<Window>,
    conv_pre: DMatrix<f64>,
    mask: Option<DMatrix<f64>>,
    layer_inputs: Vec<DMatrix<f64>>,
    layer_pre: Vec<DMatrix<f64>>,
    head_input: DMatrix<f64>,
}

impl BatchOutput {
    pub fn prediction(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.pred[(0, i)], self.pred[(1, i)], self.pred[(2, i)])
    }

    /// Convolution outputs before the ReLU, one column per sample.
    pub fn conv_pre_activations(&self) -> &DMatrix<f64> {
        &self.conv_pre
    }

    /// Pre-activations of each hidden dense layer.
    pub fn hidden_pre_activations(&self) -> &[DMatrix<f64>] {
        &self.layer_pre
    }
}

fn standardize(x: &[Vector3<f64>], mean: &[f64; 3], std: &[f64; 3]) -> Window {
    x.iter()
        .map(|v| [(v.x - mean[0]) / std[0], (v.y - mean[1]) / std[1], (v.z - mean[2]) / std[2]])
        .collect()
}

fn conv_forward(conv: &Conv1d, x: &Window, out: &mut [f64]) {
    let len = x.len() + 1 - conv.kernel;
    for f in 0..conv.filters {
        let w = &conv.weights[f * conv.channels * conv.kernel..(f + 1) * conv.channels * conv.kernel];
        for t in 0..len {
            let mut z = conv.bias[f];
            for c in 0..conv.channels {
                for k in 0..conv.kernel {
                    z += w[c * conv.kernel + k] * x[t + k][c];
                }
            }
            out[f * len + t] = z;
        }
    }
}

fn conv_backward(conv: &Conv1d, grad: &mut Conv1d, x: &Window, dout: &[f64]) {
    let len = x.len() + 1 - conv.kernel;
    for f in 0..conv.filters {
        let base = f * conv.channels * conv.kernel;
        for t in 0..len {
            let d = dout[f * len + t];
            if d == 0.0 {
                continue;
            }
            grad.bias[f] += d;
            for c in 0..conv.channels {
                for k in 0..conv.kernel {
                    grad.weights[base + c * conv.kernel + k] += d * x[t + k][c];
                }
            }
        }
    }
}

fn affine(layer: &Dense, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = &layer.weights * x;
    for mut col in z.column_iter_mut() {
        col += &layer.bias;
    }
    z
}

fn activate(act: Activation, z: &DMatrix<f64>) -> DMatrix<f64> {
    match act {
        Activation::Relu => z.map(|v| v.max(0.0)),
        Activation::Linear => z.clone(),
    }
}

fn activation_grad(act: Activation, upstream: DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    match act {
        Activation::Relu => upstream.zip_map(z, |d, z| if z > 0.0 { d } else { 0.0 }),
        Activation::Linear => upstream,
    }
}

impl NetworkParams {
    /// Single-sample forward pass. With `training` set, dropout is active and
    /// its mask is drawn from `seed`; otherwise the pass is deterministic.
    pub fn forward(&self, input: &WindowedInput, training: bool, seed: u64) -> Result<Vector3<f64>> {
        let mut rng = seeded(seed);
        let out = self.forward_batch(&[input], training.then_some(&mut rng))?;
        Ok(out.prediction(0))
    }

    pub fn forward_batch(&self, inputs: &[&WindowedInput], dropout: Option<&mut SimRng>) -> Result<BatchOutput> {
        let cfg = &self.config;
        for input in inputs {
            input.check_shape(cfg)?;
        }
        let n = inputs.len();
        let branch = cfg.branch_features();
        let norm = &self.norm;
        let accel: Vec<Window> = inputs
            .iter()
            .map(|i| standardize(&i.accel, &norm.accel_mean, &norm.accel_std))
            .collect();
        let gyro: Vec<Window> = inputs
            .iter()
            .map(|i| standardize(&i.gyro, &norm.gyro_mean, &norm.gyro_std))
            .collect();
        let mut conv_pre = DMatrix::zeros(2 * branch, n);
        for (s, mut col) in conv_pre.column_iter_mut().enumerate() {
            let col = col.as_mut_slice();
            conv_forward(&self.conv_accel, &accel[s], &mut col[..branch]);
            conv_forward(&self.conv_gyro, &gyro[s], &mut col[branch..]);
        }
        let mut x = conv_pre.map(|v| v.max(0.0));
        let mask = match dropout {
            Some(rng) if cfg.dropout > 0.0 => {
                let keep = 1.0 - cfg.dropout;
                let m = DMatrix::from_fn(x.nrows(), n, |_, _| {
                    if rng.random::<f64>() < cfg.dropout {
                        0.0
                    } else {
                        1.0 / keep
                    }
                });
                x.component_mul_assign(&m);
                Some(m)
            }
            _ => None,
        };
        let mut layer_inputs = Vec::with_capacity(self.fc_stack.len());
        let mut layer_pre = Vec::with_capacity(self.fc_stack.len());
        for layer in &self.fc_stack {
            let z = affine(layer, &x);
            let a = activate(layer.activation, &z);
            layer_inputs.push(x);
            layer_pre.push(z);
            x = a;
        }
        let hidden = x.nrows();
        let dvl_dim = cfg.head_dvl_dim();
        let mut head_input = DMatrix::zeros(hidden + dvl_dim, n);
        head_input.rows_mut(0, hidden).copy_from(&x);
        for (s, input) in inputs.iter().enumerate() {
            for (j, v) in input.dvl.iter().enumerate() {
                head_input[(hidden + j, s)] = *v;
            }
        }
        let pred = activate(self.head.activation, &affine(&self.head, &head_input));
        Ok(BatchOutput {
            pred,
            accel,
            gyro,
            conv_pre,
            mask,
            layer_inputs,
            layer_pre,
            head_input,
        })
    }

    /// Mean loss over the batch and its exact gradient with respect to every
    /// parameter, for the dropout mask used in `out`.
    pub fn backward_batch(&self, out: &BatchOutput, targets: &[Vector3<f64>]) -> (f64, NetworkParams) {
        let n = targets.len();
        assert_eq!(n, out.pred.ncols(), "one target per prediction");
        let mut grad = self.zeros_like();
        let scale = 2.0 / (3.0 * n as f64);
        let mut loss = 0.0;
        let mut d_out = DMatrix::zeros(3, n);
        for (s, t) in targets.iter().enumerate() {
            for i in 0..3 {
                let e = out.pred[(i, s)] - t[i];
                loss += e * e;
                d_out[(i, s)] = scale * e;
            }
        }
        loss /= 3.0 * n as f64;

        let d_z = activation_grad(self.head.activation, d_out, &out.pred);
        grad.head.weights = &d_z * out.head_input.transpose();
        grad.head.bias = d_z.column_sum();
        let hidden = out.head_input.nrows() - self.config.head_dvl_dim();
        let mut d_a: DMatrix<f64> = (self.head.weights.columns(0, hidden).transpose() * &d_z).into_owned();

        for (i, layer) in self.fc_stack.iter().enumerate().rev() {
            let d_z = activation_grad(layer.activation, d_a, &out.layer_pre[i]);
            grad.fc_stack[i].weights = &d_z * out.layer_inputs[i].transpose();
            grad.fc_stack[i].bias = d_z.column_sum();
            d_a = layer.weights.transpose() * d_z;
        }

        if let Some(mask) = &out.mask {
            d_a.component_mul_assign(mask);
        }
        let d_feat = d_a.zip_map(&out.conv_pre, |d, z| if z > 0.0 { d } else { 0.0 });
        let branch = self.config.branch_features();
        for (s, col) in d_feat.column_iter().enumerate() {
            let col = col.as_slice();
            conv_backward(&self.conv_accel, &mut grad.conv_accel, &out.accel[s], &col[..branch]);
            conv_backward(&self.conv_gyro, &mut grad.conv_gyro, &out.gyro[s], &col[branch..]);
        }
        (loss, grad)
    }

    /// Predictions in inference mode, in chunks to bound memory.
    pub fn predict_all(&self, inputs: &[&WindowedInput]) -> Result<Vec<Vector3<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(256) {
            let b = self.forward_batch(chunk, None)?;
            out.extend((0..chunk.len()).map(|i| b.prediction(i)));
        }
        Ok(out)
    }
}

/// Loss and gradient for one sample. `dropout_seed` fixes the dropout mask;
/// `None` differentiates the inference-mode network.
pub fn backward(
    params: &NetworkParams,
    input: &WindowedInput,
    truth: &Vector3<f64>,
    dropout_seed: Option<u64>,
) -> Result<(f64, NetworkParams)> {
    let mut rng = seeded(dropout_seed.unwrap_or(0));
    let out = params.forward_batch(&[input], dropout_seed.map(|_| &mut rng))?;
    Ok(params.backward_batch(&out, std::slice::from_ref(truth)))
}
