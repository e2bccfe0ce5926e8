use nalgebra::Vector3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{BeamsNetError, NetConfig, NetworkParams, Result, Standardizer, WindowedInput};
use crate::dvl::BeamGeometry;
use crate::rng::substream;

/// Input window with its true body velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: WindowedInput,
    pub target: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    /// Decoupled weight decay on the convolution and hidden-layer weights.
    /// The head is exempt so its least-squares pass-through is not pulled
    /// toward zero.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.2,
            patience: 10,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.validation_fraction > 0.0
            && self.validation_fraction < 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(BeamsNetError::InvalidConfig(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation loss of the parameters before the first update.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_loss, |e| e.best_val_loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: TrainHistory,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

struct Adam {
    m: NetworkParams,
    v: NetworkParams,
    step: i32,
}

impl Adam {
    fn new(params: &NetworkParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut NetworkParams, grad: &NetworkParams, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        let count = grad.tensors().len();
        for (t, ((p, g), (m, v))) in tensors.enumerate() {
            // Even slots hold weights; the last pair is the head.
            let decay = if t % 2 == 0 && t + 2 < count {
                cfg.weight_decay
            } else {
                0.0
            };
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.learning_rate * ((m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon) + decay * p[i]);
            }
        }
    }
}

fn split(len: usize, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut substream(cfg.seed, 0));
    let n_val = ((len as f64 * cfg.validation_fraction).round() as usize).clamp(1, len - 1);
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    (train, val)
}

fn mean_loss(params: &NetworkParams, samples: &[Sample], indices: &[usize]) -> Result<f64> {
    let inputs: Vec<&WindowedInput> = indices.iter().map(|&i| &samples[i].input).collect();
    let pred = params.predict_all(&inputs)?;
    let sse: f64 = pred
        .iter()
        .zip(indices)
        .map(|(p, &i)| (p - samples[i].target).norm_squared())
        .sum();
    Ok(sse / (3.0 * indices.len() as f64))
}

fn residual_rms(params: &NetworkParams, samples: &[Sample], indices: &[usize]) -> Result<[f64; 3]> {
    let inputs: Vec<&WindowedInput> = indices.iter().map(|&i| &samples[i].input).collect();
    let pred = params.predict_all(&inputs)?;
    let mut acc = Vector3::zeros();
    for (p, &i) in pred.iter().zip(indices) {
        let e = p - samples[i].target;
        acc += e.component_mul(&e);
    }
    let rms = (acc / indices.len() as f64).map(f64::sqrt);
    Ok([rms.x, rms.y, rms.z])
}

fn check_dataset(samples: &[Sample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let min = 10 * cfg.batch_size;
    if samples.len() < min {
        return Err(BeamsNetError::DatasetTooSmall {
            len: samples.len(),
            min,
        });
    }
    Ok(())
}

/// Trains a freshly initialized network. Input statistics are fitted on the
/// training split; the validation split drives early stopping and the
/// residual sigma stored with the returned parameters.
pub fn train(samples: &[Sample], net: &NetConfig, geom: &BeamGeometry, cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_dataset(samples, cfg)?;
    let (train_idx, val_idx) = split(samples.len(), cfg);
    let norm = Standardizer::fit(train_idx.iter().map(|&i| &samples[i].input));
    let params = NetworkParams::init(net, norm, geom, cfg.seed)?;
    for s in samples {
        s.input.check_shape(net)?;
    }
    run(params, samples, train_idx, val_idx, cfg)
}

/// Continues training from existing parameters, keeping their input
/// normalization. Optimizer moments restart from zero.
pub fn resume(params: NetworkParams, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    check_dataset(samples, cfg)?;
    params.validate()?;
    let (train_idx, val_idx) = split(samples.len(), cfg);
    run(params, samples, train_idx, val_idx, cfg)
}

fn run(
    mut params: NetworkParams,
    samples: &[Sample],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut rng = substream(cfg.seed, 1);
    let initial_val_loss = mean_loss(&params, samples, &val_idx)?;
    if !initial_val_loss.is_finite() {
        return Err(BeamsNetError::Diverged { epoch: 0 });
    }
    let mut best = (params.clone(), initial_val_loss, 0);
    let mut adam = Adam::new(&params);
    let mut order = train_idx.clone();
    let mut epochs = Vec::new();
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&WindowedInput> = batch.iter().map(|&i| &samples[i].input).collect();
            let targets: Vec<Vector3<f64>> = batch.iter().map(|&i| samples[i].target).collect();
            let out = params.forward_batch(&inputs, Some(&mut rng))?;
            let (loss, grad) = params.backward_batch(&out, &targets);
            if !loss.is_finite() {
                return Err(BeamsNetError::Diverged { epoch });
            }
            total += loss * batch.len() as f64;
            adam.update(&mut params, &grad, cfg);
        }
        let train_loss = total / order.len() as f64;
        let val_loss = mean_loss(&params, samples, &val_idx)?;
        if !val_loss.is_finite() {
            return Err(BeamsNetError::Diverged { epoch });
        }
        if val_loss < best.1 {
            best = (params.clone(), val_loss, epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::debug!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best_val_loss: best.1,
        });
        if since_best >= cfg.patience {
            break;
        }
    }
    let (mut params, _, best_epoch) = best;
    params.residual_sigma = residual_rms(&params, samples, &val_idx)?;
    params.train_seed = cfg.seed;
    Ok(TrainOutcome {
        params,
        history: TrainHistory {
            initial_val_loss,
            epochs,
            best_epoch,
        },
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
