//! Multi-scene training with early stopping, and per-scene inference
//! with outlier removal plus unsupervised fine-tuning.
//!
//! Each training epoch walks the scenes sequentially, restricts every
//! scene to a random 10-20% camera subset, and takes one normalized-
//! gradient ADAM step on the combined loss. The validation metric is the
//! mean total loss over the full validation tensors; the checkpoint with
//! the minimal metric is returned.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::equinet::{self, ModelConfig, ModelParams, OutlierScores};
use crate::error::{Result, SfmError};
use crate::geometry::{CameraPose, Point3};
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::trackstore::{self, TrackLabels, TrackTensor};

/// ADAM moment decay and stabilizer constants.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Outlier-removal threshold for low-outlier (single-camera) scenes.
pub const LOW_OUTLIER_THRESHOLD: f64 = 0.8;

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Fraction of cameras sampled per scene per epoch.
    pub subsample_range: (f64, f64),
    /// Hard cap on training epochs.
    pub epochs: usize,
    /// Early-stop patience: epochs without validation improvement.
    pub patience: usize,
    pub finetune_epochs: usize,
    pub outlier_threshold: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            subsample_range: (0.10, 0.20),
            epochs: 10_000,
            patience: 50,
            finetune_epochs: 1000,
            outlier_threshold: 0.6,
            seed: 20,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Profile for scenes with few outliers (higher removal threshold).
    pub fn low_outlier_profile() -> Self {
        TrainConfig { outlier_threshold: LOW_OUTLIER_THRESHOLD, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.subsample_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(SfmError::InvalidConfig(format!("subsample range ({lo}, {hi})")));
        }
        if !(0.0 < self.outlier_threshold && self.outlier_threshold < 1.0) {
            return Err(SfmError::InvalidConfig(format!(
                "outlier threshold {}",
                self.outlier_threshold
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(SfmError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment estimates and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        OptimizerState { m: shapes.clone(), v: shapes, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One ADAM update with per-tensor gradient normalization: each tensor's
/// gradient is rescaled to unit Frobenius norm (when non-zero) before the
/// standard moment updates, which makes the step invariant to positive
/// rescaling of the loss.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimizerState, lr: f64) {
    let mut named = params.named_tensors_mut();
    assert_eq!(named.len(), grads.len(), "gradient list must mirror parameters");
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, (_, tensor)) in named.iter_mut().enumerate() {
        let norm = grads[k].frob_norm();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let theta = tensor.data_mut();
        for ((g, m), (v, theta)) in
            grads[k].data().iter().zip(m.iter_mut()).zip(v.iter_mut().zip(theta.iter_mut()))
        {
            let g = g * scale;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Evaluate the combined loss of the current parameters on a full scene
/// (no gradients). Without labels the classification term is zero.
pub fn evaluate_loss(
    tracks: &TrackTensor,
    labels: Option<&TrackLabels>,
    params: &ModelParams,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let fwd = equinet::forward_graph(&mut tape, tracks, &vars)?;
    let loss_vars =
        losses::total_loss_graph(&mut tape, fwd.scores, fwd.cameras, fwd.points, tracks, labels, loss)?;
    Ok(LossBreakdown {
        total: tape.value(loss_vars.total).item(),
        outlier_bce: tape.value(loss_vars.outlier_bce).item(),
        reprojection: tape.value(loss_vars.reprojection).item(),
    })
}

/// One epoch/scene statistics row (the training log line).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation total loss; NaN when there is no validation set.
    pub val_metric: f64,
}

/// Training output: the selected checkpoint and the per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    /// 1-based epoch of the returned checkpoint (None without validation).
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    /// Render the `epoch train_loss val_metric` log.
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for row in &self.history {
            out.push_str(&format!("{} {} {}\n", row.epoch, row.train_loss, row.val_metric));
        }
        out
    }
}

/// Index of the minimal metric, first occurrence on ties.
#[cfg(test)]
pub(crate) fn best_epoch_index(metrics: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in metrics.iter().enumerate() {
        if best.map(|(_, b)| v < b).unwrap_or(true) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Sample a camera subset of a random fraction in `range`, re-sampling
/// (bounded) until the restriction leaves at least two cameras and one
/// track. The subset size is floored at the minimum track view count:
/// below that no track can survive the restriction.
fn subsample_scene(
    tensor: &TrackTensor,
    labels: &TrackLabels,
    range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<(TrackTensor, TrackLabels)> {
    let m = tensor.num_cameras();
    for _ in 0..100 {
        let fraction = rng.random_range(range.0..=range.1);
        let k = ((fraction * m as f64).round() as usize)
            .clamp(trackstore::MIN_TRACK_VIEWS.min(m), m);
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.truncate(k);
        let restricted = tensor.restrict_cameras(&order)?;
        if restricted.tensor.num_cameras() >= 2 && restricted.tensor.num_tracks() >= 1 {
            let labels = labels.select(&restricted.observation_indices);
            return Ok((restricted.tensor, labels));
        }
    }
    Err(SfmError::SceneRejected(
        "camera subsampling repeatedly produced an empty tensor".into(),
    ))
}

/// Train on labeled scenes; early-stop on the validation metric.
///
/// Deterministic given the seed and scene ordering: repeated runs return
/// bit-identical checkpoints.
pub fn train(
    scenes: &[(TrackTensor, TrackLabels)],
    val_scenes: &[(TrackTensor, Option<TrackLabels>)],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(SfmError::InvalidConfig("no training scenes".into()));
    }
    for (tensor, labels) in scenes {
        if !tensor.normalized() {
            return Err(SfmError::NotNormalized);
        }
        if labels.len() != tensor.num_observations() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} labels", tensor.num_observations()),
                got: format!("{}", labels.len()),
            });
        }
    }
    for (tensor, _) in val_scenes {
        if !tensor.normalized() {
            return Err(SfmError::NotNormalized);
        }
    }

    let mut params = ModelParams::init(config.model, config.seed);
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1); // keep the loop's stream independent of param init

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.epochs {
        let mut train_sum = 0.0;
        for (tensor, labels) in scenes {
            let (sub_tensor, sub_labels) =
                subsample_scene(tensor, labels, config.subsample_range, &mut rng)?;
            let mut tape = Tape::new();
            let vars = params.register(&mut tape);
            let fwd = equinet::forward_graph(&mut tape, &sub_tensor, &vars)?;
            let loss_vars = losses::total_loss_graph(
                &mut tape,
                fwd.scores,
                fwd.cameras,
                fwd.points,
                &sub_tensor,
                Some(&sub_labels),
                &config.loss,
            )?;
            train_sum += tape.value(loss_vars.total).item();
            let grads = tape.backward(loss_vars.total, Tensor::scalar(1.0))?;
            let grad_tensors: Vec<Tensor> = vars
                .leaves()
                .iter()
                .map(|&v| {
                    grads.get(v).cloned().unwrap_or_else(|| {
                        let t = tape.value(v);
                        Tensor::zeros(t.rows(), t.cols())
                    })
                })
                .collect();
            adam_step(&mut params, &grad_tensors, &mut state, config.learning_rate);
        }
        let train_loss = train_sum / scenes.len() as f64;

        let val_metric = if val_scenes.is_empty() {
            f64::NAN
        } else {
            let mut sum = 0.0;
            for (tensor, labels) in val_scenes {
                sum += evaluate_loss(tensor, labels.as_ref(), &params, &config.loss)?.total;
            }
            sum / val_scenes.len() as f64
        };
        history.push(EpochStats { epoch, train_loss, val_metric });

        if !val_scenes.is_empty() {
            let improved = best.as_ref().map(|(_, b, _)| val_metric < *b).unwrap_or(true);
            if improved {
                best = Some((epoch, val_metric, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }

    match best {
        Some((epoch, _, best_params)) => {
            Ok(TrainReport { params: best_params, history, best_epoch: Some(epoch) })
        }
        // No validation set: return the final checkpoint.
        None => Ok(TrainReport { params, history, best_epoch: None }),
    }
}

/// Inference result for one scene.
#[derive(Debug, Clone)]
pub struct Inference {
    pub poses: Vec<CameraPose>,
    pub points: Vec<Point3>,
    /// Outlier scores on the original (unfiltered) tensor.
    pub scores: OutlierScores,
    /// The tensor after outlier removal; poses and points are predicted
    /// from it, and its track indexing matches `points`.
    pub filtered: TrackTensor,
    /// Scene-adapted parameters after fine-tuning.
    pub finetuned: ModelParams,
}

/// Classify, remove outliers at the configured threshold, fine-tune a
/// copy of the parameters on the filtered tensor by minimizing the
/// unsupervised reprojection loss, and read out poses and points.
pub fn infer(scene: &TrackTensor, params: &ModelParams, config: &TrainConfig) -> Result<Inference> {
    config.validate()?;
    if !scene.normalized() {
        return Err(SfmError::NotNormalized);
    }
    let (scores, _, _) = equinet::forward(scene, params)?;
    let filtered = trackstore::remove_outliers(scene, &scores, config.outlier_threshold)?;
    if filtered.is_empty() {
        return Err(SfmError::SceneRejected(
            "outlier removal left no observations".into(),
        ));
    }

    // Fine-tune every parameter on the reprojection loss alone; fresh
    // optimizer moments. The outlier head receives zero gradient and
    // stays untouched.
    let mut finetuned = params.clone();
    let mut state = OptimizerState::new(&finetuned);
    for _ in 0..config.finetune_epochs {
        let mut tape = Tape::new();
        let vars = finetuned.register(&mut tape);
        let latent = equinet::encode_graph(&mut tape, &filtered, &vars)?;
        let cameras = equinet::camera_head_graph(&mut tape, latent, &filtered, &vars)?;
        let points = equinet::point_head_graph(&mut tape, latent, &filtered, &vars)?;
        let loss = losses::reprojection_loss_graph(&mut tape, cameras, points, &filtered, &config.loss)?;
        let grads = tape.backward(loss, Tensor::scalar(1.0))?;
        let grad_tensors: Vec<Tensor> = vars
            .leaves()
            .iter()
            .map(|&v| {
                grads.get(v).cloned().unwrap_or_else(|| {
                    let t = tape.value(v);
                    Tensor::zeros(t.rows(), t.cols())
                })
            })
            .collect();
        adam_step(&mut finetuned, &grad_tensors, &mut state, config.learning_rate);
    }

    let (_, cameras, points) = equinet::forward(&filtered, &finetuned)?;
    let poses: Vec<CameraPose> =
        (0..cameras.rows()).map(|i| CameraPose::from_raw7(cameras.row(i))).collect::<Result<_>>()?;
    let points: Vec<Point3> = (0..points.rows())
        .map(|j| Point3::new(points.at(j, 0), points.at(j, 1), points.at(j, 2)))
        .collect();
    Ok(Inference { poses, points, scores, filtered, finetuned })
}
