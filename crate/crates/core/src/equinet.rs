//! Permutation-equivariant encoder and its three output heads.
//!
//! The encoder maps the sparse m x n x 2 track tensor to an m x n x d
//! latent representation through three equivariant layers. Each layer
//! combines, per observed cell, the cell itself with its per-track mean,
//! its per-camera mean, and the global mean (sums replaced by averages
//! over the observed entries, which makes the map invariant to the number
//! of observations), followed by per-channel mean subtraction and ReLU.
//!
//! The outlier head scores every observed cell in [0,1]; the camera head
//! pools each camera's cells into an m x 7 tensor (translation first,
//! quaternion last); the point head pools each track's cells into n x 3.
//!
//! All computation runs on the packed representation: one row per
//! observed cell, pooling via segment means keyed by camera or track ids.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, SfmError};
use crate::trackstore::TrackTensor;

/// Architecture hyperparameters. Layer counts are fixed at three for the
/// encoder and each head; the channel width is configurable and defaults
/// to 256.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { width: 256 }
    }
}

/// Input channels of the first encoder layer (a 2D observation).
pub const INPUT_CHANNELS: usize = 2;
/// Encoder depth.
pub const ENCODER_LAYERS: usize = 3;
/// Layers per MLP head.
pub const HEAD_LAYERS: usize = 3;
/// Output widths of the outlier, camera, and point heads.
pub const HEAD_OUTPUTS: [usize; 3] = [1, 7, 3];

/// Weights of one equivariant layer. Weight matrices are stored
/// `[in, out]` so features apply as `f @ w`.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivariantLayerParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
    pub w4: Tensor,
    pub bias: Tensor,
}

/// One dense layer, weight `[in, out]`, bias `[1, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All learnable parameters: three encoder layers and three dense layers
/// per head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: Vec<EquivariantLayerParams>,
    pub outlier_head: Vec<DenseLayerParams>,
    pub camera_head: Vec<DenseLayerParams>,
    pub point_head: Vec<DenseLayerParams>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

impl ModelParams {
    /// Uniform initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)] per
    /// layer, deterministic in the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut encoder = Vec::with_capacity(ENCODER_LAYERS);
        let mut dims = vec![INPUT_CHANNELS];
        dims.extend(std::iter::repeat(d).take(ENCODER_LAYERS));
        for l in 0..ENCODER_LAYERS {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            encoder.push(EquivariantLayerParams {
                w1: uniform_tensor(&mut rng, fan_in, fan_out, bound),
                w2: uniform_tensor(&mut rng, fan_in, fan_out, bound),
                w3: uniform_tensor(&mut rng, fan_in, fan_out, bound),
                w4: uniform_tensor(&mut rng, fan_in, fan_out, bound),
                bias: uniform_tensor(&mut rng, 1, fan_out, bound),
            });
        }
        let head = |rng: &mut ChaCha8Rng, final_out: usize| -> Vec<DenseLayerParams> {
            let dims = [d, d, d, final_out];
            (0..HEAD_LAYERS)
                .map(|l| {
                    let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    DenseLayerParams {
                        weight: uniform_tensor(rng, fan_in, fan_out, bound),
                        bias: uniform_tensor(rng, 1, fan_out, bound),
                    }
                })
                .collect()
        };
        let outlier_head = head(&mut rng, HEAD_OUTPUTS[0]);
        let camera_head = head(&mut rng, HEAD_OUTPUTS[1]);
        let point_head = head(&mut rng, HEAD_OUTPUTS[2]);
        ModelParams { config, encoder, outlier_head, camera_head, point_head }
    }

    /// All-zero parameters (used in tests).
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.width;
        let enc = |fan_in: usize| EquivariantLayerParams {
            w1: Tensor::zeros(fan_in, d),
            w2: Tensor::zeros(fan_in, d),
            w3: Tensor::zeros(fan_in, d),
            w4: Tensor::zeros(fan_in, d),
            bias: Tensor::zeros(1, d),
        };
        let head = |final_out: usize| -> Vec<DenseLayerParams> {
            let dims = [d, d, d, final_out];
            (0..HEAD_LAYERS)
                .map(|l| DenseLayerParams {
                    weight: Tensor::zeros(dims[l], dims[l + 1]),
                    bias: Tensor::zeros(1, dims[l + 1]),
                })
                .collect()
        };
        ModelParams {
            config,
            encoder: vec![enc(INPUT_CHANNELS), enc(d), enc(d)],
            outlier_head: head(HEAD_OUTPUTS[0]),
            camera_head: head(HEAD_OUTPUTS[1]),
            point_head: head(HEAD_OUTPUTS[2]),
        }
    }

    /// Canonical (name, tensor) listing; the checkpoint format, the
    /// optimizer state, and gradient extraction all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{l}.w1"), &layer.w1));
            out.push((format!("encoder.{l}.w2"), &layer.w2));
            out.push((format!("encoder.{l}.w3"), &layer.w3));
            out.push((format!("encoder.{l}.w4"), &layer.w4));
            out.push((format!("encoder.{l}.bias"), &layer.bias));
        }
        for (name, head) in [
            ("outlier", &self.outlier_head),
            ("camera", &self.camera_head),
            ("point", &self.point_head),
        ] {
            for (l, layer) in head.iter().enumerate() {
                out.push((format!("{name}.{l}.weight"), &layer.weight));
                out.push((format!("{name}.{l}.bias"), &layer.bias));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (l, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{l}.w1"), &mut layer.w1));
            out.push((format!("encoder.{l}.w2"), &mut layer.w2));
            out.push((format!("encoder.{l}.w3"), &mut layer.w3));
            out.push((format!("encoder.{l}.w4"), &mut layer.w4));
            out.push((format!("encoder.{l}.bias"), &mut layer.bias));
        }
        for (name, head) in [
            ("outlier", &mut self.outlier_head),
            ("camera", &mut self.camera_head),
            ("point", &mut self.point_head),
        ] {
            for (l, layer) in head.iter_mut().enumerate() {
                out.push((format!("{name}.{l}.weight"), &mut layer.weight));
                out.push((format!("{name}.{l}.bias"), &mut layer.bias));
            }
        }
        out
    }

    /// Register every parameter tensor as a differentiable leaf, in
    /// canonical order.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars: Vec<Var> =
            self.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        ParamVars { vars }
    }
}

/// Tape handles for the registered parameters, in canonical order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn leaves(&self) -> &[Var] {
        &self.vars
    }

    fn encoder_layer(&self, l: usize) -> EquivariantLayerVars {
        let base = l * 5;
        EquivariantLayerVars {
            w1: self.vars[base],
            w2: self.vars[base + 1],
            w3: self.vars[base + 2],
            w4: self.vars[base + 3],
            bias: self.vars[base + 4],
        }
    }

    fn head_layer(&self, head: usize, l: usize) -> (Var, Var) {
        let base = ENCODER_LAYERS * 5 + head * HEAD_LAYERS * 2 + l * 2;
        (self.vars[base], self.vars[base + 1])
    }
}

/// Tape handles for one equivariant layer.
#[derive(Debug, Clone, Copy)]
pub struct EquivariantLayerVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub w4: Var,
    pub bias: Var,
}

/// One equivariant linear layer on packed cell features:
/// `f_ij w1 + colmean_j w2 + rowmean_i w3 + globalmean w4 + bias`,
/// where every mean is taken over observed cells only. Unobserved cells
/// are never materialized.
pub fn equivariant_layer(
    tape: &mut Tape,
    features: Var,
    tracks: &TrackTensor,
    params: &EquivariantLayerVars,
) -> Result<Var> {
    let cam_ids = tracks.camera_ids();
    let track_ids = tracks.track_ids();
    let p = tracks.num_observations();

    let cell_term = tape.matmul(features, params.w1)?;
    let col_mean = tape.masked_col_mean(features, &track_ids, tracks.num_tracks())?;
    let col_term = tape.matmul(col_mean, params.w2)?;
    let col_cells = tape.gather_rows(col_term, &track_ids);
    let row_mean = tape.masked_row_mean(features, &cam_ids, tracks.num_cameras())?;
    let row_term = tape.matmul(row_mean, params.w3)?;
    let row_cells = tape.gather_rows(row_term, &cam_ids);
    let global_mean = tape.masked_global_mean(features)?;
    let global_term = tape.matmul(global_mean, params.w4)?;
    let global_cells = tape.gather_rows(global_term, &vec![0usize; p]);

    let s1 = tape.add(cell_term, col_cells)?;
    let s2 = tape.add(row_cells, global_cells)?;
    let sum = tape.add(s1, s2)?;
    tape.add_row_broadcast(sum, params.bias)
}

fn dense_stack(
    tape: &mut Tape,
    mut h: Var,
    layers: &[(Var, Var)],
    relu_after_last: bool,
) -> Result<Var> {
    for (l, (w, b)) in layers.iter().enumerate() {
        let lin = tape.matmul(h, *w)?;
        h = tape.add_row_broadcast(lin, *b)?;
        if l + 1 < layers.len() || relu_after_last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Everything the network produces for one scene, as tape nodes.
pub struct ForwardVars {
    /// Packed latent cell features, [p, d].
    pub latent: Var,
    /// Outlier probabilities per observed cell, [p, 1].
    pub scores: Var,
    /// Raw camera head output, [m, 7]: translation then quaternion.
    pub cameras: Var,
    /// Point head output, [n, 3].
    pub points: Var,
}

/// Build the full forward computation on a tape. The tensor must be
/// non-empty; the camera head requires every camera to observe a cell.
pub fn forward_graph(tape: &mut Tape, tracks: &TrackTensor, params: &ParamVars) -> Result<ForwardVars> {
    let latent = encode_graph(tape, tracks, params)?;
    let scores = outlier_head_graph(tape, latent, params)?;
    let cameras = camera_head_graph(tape, latent, tracks, params)?;
    let points = point_head_graph(tape, latent, tracks, params)?;
    Ok(ForwardVars { latent, scores, cameras, points })
}

/// Encoder only: three equivariant layers, each followed by per-channel
/// mean subtraction over observed cells and ReLU.
pub fn encode_graph(tape: &mut Tape, tracks: &TrackTensor, params: &ParamVars) -> Result<Var> {
    if tracks.is_empty() {
        return Err(SfmError::EmptyTensor);
    }
    let positions: Vec<f64> =
        tracks.observations().iter().flat_map(|o| o.position.into_iter()).collect();
    let input = Tensor::from_vec(tracks.num_observations(), INPUT_CHANNELS, positions);
    let mut h = tape.constant(input);
    for l in 0..ENCODER_LAYERS {
        let layer = params.encoder_layer(l);
        h = equivariant_layer(tape, h, tracks, &layer)?;
        h = tape.mean_subtract_normalize(h);
        h = tape.relu(h);
    }
    Ok(h)
}

pub fn outlier_head_graph(tape: &mut Tape, latent: Var, params: &ParamVars) -> Result<Var> {
    let layers: Vec<(Var, Var)> = (0..HEAD_LAYERS).map(|l| params.head_layer(0, l)).collect();
    let logits = dense_stack(tape, latent, &layers, false)?;
    Ok(tape.sigmoid(logits))
}

pub fn camera_head_graph(
    tape: &mut Tape,
    latent: Var,
    tracks: &TrackTensor,
    params: &ParamVars,
) -> Result<Var> {
    if let Some(cam) = tracks.camera_counts().iter().position(|&c| c == 0) {
        return Err(SfmError::EmptyCamera(cam));
    }
    let cam_ids = tracks.camera_ids();
    let pooled = tape.masked_row_mean(latent, &cam_ids, tracks.num_cameras())?;
    let layers: Vec<(Var, Var)> = (0..HEAD_LAYERS).map(|l| params.head_layer(1, l)).collect();
    dense_stack(tape, pooled, &layers, false)
}

pub fn point_head_graph(
    tape: &mut Tape,
    latent: Var,
    tracks: &TrackTensor,
    params: &ParamVars,
) -> Result<Var> {
    let track_ids = tracks.track_ids();
    let pooled = tape.masked_col_mean(latent, &track_ids, tracks.num_tracks())?;
    let layers: Vec<(Var, Var)> = (0..HEAD_LAYERS).map(|l| params.head_layer(2, l)).collect();
    dense_stack(tape, pooled, &layers, false)
}

/// Latent cell features aligned with a track tensor's observations.
/// Cells without an observation are semantically zero and not stored.
#[derive(Debug, Clone)]
pub struct LatentFeatures {
    num_cameras: usize,
    num_tracks: usize,
    cells: Vec<(usize, usize)>,
    features: Tensor,
}

impl LatentFeatures {
    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_tracks(&self) -> usize {
        self.num_tracks
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    /// Packed [p, d] feature matrix, rows aligned with the source
    /// tensor's observation order.
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Feature vector at an observed cell; `None` (semantically a zero
    /// vector) at unobserved cells.
    pub fn cell(&self, camera: usize, track: usize) -> Option<&[f64]> {
        self.cells.binary_search(&(camera, track)).ok().map(|i| self.features.row(i))
    }
}

/// Outlier probabilities defined at observed cells, in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierScores {
    num_cameras: usize,
    num_tracks: usize,
    cells: Vec<(usize, usize)>,
    values: Vec<f64>,
}

impl OutlierScores {
    pub fn new(tracks: &TrackTensor, values: Vec<f64>) -> Result<Self> {
        if values.len() != tracks.num_observations() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} scores", tracks.num_observations()),
                got: format!("{}", values.len()),
            });
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SfmError::NumericalFailure(format!("outlier score {v} outside [0,1]")));
        }
        Ok(OutlierScores {
            num_cameras: tracks.num_cameras(),
            num_tracks: tracks.num_tracks(),
            cells: tracks.observations().iter().map(|o| (o.camera, o.track)).collect(),
            values,
        })
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn num_tracks(&self) -> usize {
        self.num_tracks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scores aligned with the source tensor's observation order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn score(&self, camera: usize, track: usize) -> Option<f64> {
        self.cells.binary_search(&(camera, track)).ok().map(|i| self.values[i])
    }
}

/// Run the encoder and return the latent features as values.
pub fn encode(tracks: &TrackTensor, params: &ModelParams) -> Result<LatentFeatures> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let latent = encode_graph(&mut tape, tracks, &vars)?;
    Ok(LatentFeatures {
        num_cameras: tracks.num_cameras(),
        num_tracks: tracks.num_tracks(),
        cells: tracks.observations().iter().map(|o| (o.camera, o.track)).collect(),
        features: tape.value(latent).clone(),
    })
}

fn mlp_value(input: Tensor, layers: &[DenseLayerParams], sigmoid: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut h = tape.constant(input);
    let layer_vars: Vec<(Var, Var)> = layers
        .iter()
        .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
        .collect();
    h = dense_stack(&mut tape, h, &layer_vars, false)?;
    if sigmoid {
        h = tape.sigmoid(h);
    }
    Ok(tape.value(h).clone())
}

/// Per-cell outlier scores from latent features.
pub fn outlier_head(latent: &LatentFeatures, params: &ModelParams) -> Result<OutlierScores> {
    let out = mlp_value(latent.features.clone(), &params.outlier_head, true)?;
    Ok(OutlierScores {
        num_cameras: latent.num_cameras,
        num_tracks: latent.num_tracks,
        cells: latent.cells.clone(),
        values: out.data().to_vec(),
    })
}

/// Per-camera raw 7-vectors (translation, quaternion) from pooled latent
/// features. Errors if any camera has no observations.
pub fn camera_head(latent: &LatentFeatures, params: &ModelParams) -> Result<Tensor> {
    let mut counts = vec![0usize; latent.num_cameras];
    for &(cam, _) in &latent.cells {
        counts[cam] += 1;
    }
    if let Some(cam) = counts.iter().position(|&c| c == 0) {
        return Err(SfmError::EmptyCamera(cam));
    }
    let mut tape = Tape::new();
    let cells = tape.constant(latent.features.clone());
    let cam_ids: Vec<usize> = latent.cells.iter().map(|&(c, _)| c).collect();
    let pooled = tape.masked_row_mean(cells, &cam_ids, latent.num_cameras)?;
    mlp_value(tape.value(pooled).clone(), &params.camera_head, false)
}

/// Per-track 3-vectors from pooled latent features.
pub fn point_head(latent: &LatentFeatures, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let cells = tape.constant(latent.features.clone());
    let track_ids: Vec<usize> = latent.cells.iter().map(|&(_, t)| t).collect();
    let pooled = tape.masked_col_mean(cells, &track_ids, latent.num_tracks)?;
    mlp_value(tape.value(pooled).clone(), &params.point_head, false)
}

/// Full forward pass as values: (scores, raw camera 7-vectors, points).
pub fn forward(tracks: &TrackTensor, params: &ModelParams) -> Result<(OutlierScores, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let fwd = forward_graph(&mut tape, tracks, &vars)?;
    let scores = OutlierScores::new(tracks, tape.value(fwd.scores).data().to_vec())?;
    Ok((scores, tape.value(fwd.cameras).clone(), tape.value(fwd.points).clone()))
}

/// Save parameters as a structured text checkpoint: every tensor listed
/// by canonical name with its shape and 17-significant-digit values
/// (bit-exact round-trip).
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let named = params.named_tensors();
    let mut out = String::new();
    writeln!(out, "checkpoint v1").unwrap();
    writeln!(out, "width {}", params.config.width).unwrap();
    writeln!(out, "tensors {}", named.len()).unwrap();
    for (name, tensor) in named {
        writeln!(out, "tensor {} {} {}", name, tensor.rows(), tensor.cols()).unwrap();
        for r in 0..tensor.rows() {
            let row: Vec<String> =
                tensor.row(r).iter().map(|&v| crate::trackstore::io::fmt_f64(v)).collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut header = |key: &str| -> Result<String> {
        let (line, raw) =
            lines.next().ok_or(SfmError::Parse { line: 0, msg: format!("missing {key}") })?;
        let mut toks = raw.split_whitespace();
        if toks.next() != Some(key) {
            return Err(SfmError::Parse { line, msg: format!("expected `{key}`") });
        }
        Ok(toks.collect::<Vec<_>>().join(" "))
    };
    let version = header("checkpoint")?;
    if version != "v1" {
        return Err(SfmError::Parse { line: 1, msg: format!("unsupported version `{version}`") });
    }
    let width: usize = header("width")?
        .parse()
        .map_err(|_| SfmError::Parse { line: 2, msg: "invalid width".into() })?;
    let count: usize = header("tensors")?
        .parse()
        .map_err(|_| SfmError::Parse { line: 3, msg: "invalid tensor count".into() })?;

    let mut params = ModelParams::zeros(ModelConfig { width });
    {
        let mut named = params.named_tensors_mut();
        if count != named.len() {
            return Err(SfmError::Parse {
                line: 3,
                msg: format!("expected {} tensors, file has {count}", named.len()),
            });
        }
        for (name, tensor) in named.iter_mut() {
            let (line, raw) =
                lines.next().ok_or(SfmError::Parse { line: 0, msg: "truncated checkpoint".into() })?;
            let toks: Vec<&str> = raw.split_whitespace().collect();
            if toks.len() != 4 || toks[0] != "tensor" {
                return Err(SfmError::Parse {
                    line,
                    msg: "expected `tensor <name> <rows> <cols>`".into(),
                });
            }
            if toks[1] != name {
                return Err(SfmError::Parse {
                    line,
                    msg: format!("expected tensor `{name}`, found `{}`", toks[1]),
                });
            }
            let rows: usize =
                toks[2].parse().map_err(|_| SfmError::Parse { line, msg: "invalid rows".into() })?;
            let cols: usize =
                toks[3].parse().map_err(|_| SfmError::Parse { line, msg: "invalid cols".into() })?;
            if rows != tensor.rows() || cols != tensor.cols() {
                return Err(SfmError::Parse {
                    line,
                    msg: format!(
                        "tensor `{name}` shape [{rows}, {cols}] does not match [{}, {}]",
                        tensor.rows(),
                        tensor.cols()
                    ),
                });
            }
            for r in 0..rows {
                let (line, raw) = lines
                    .next()
                    .ok_or(SfmError::Parse { line: 0, msg: "truncated tensor data".into() })?;
                let vals: Vec<&str> = raw.split_whitespace().collect();
                if vals.len() != cols {
                    return Err(SfmError::Parse {
                        line,
                        msg: format!("expected {cols} values, got {}", vals.len()),
                    });
                }
                for (c, tok) in vals.iter().enumerate() {
                    let v: f64 = tok.parse().map_err(|_| SfmError::Parse {
                        line,
                        msg: format!("invalid float `{tok}`"),
                    })?;
                    tensor.set(r, c, v);
                }
            }
        }
    }
    Ok(params)
}
