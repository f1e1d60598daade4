use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use nalgebra::Matrix3;

use sfm_core::equinet::{self, ModelConfig};
use sfm_core::error::{Result, SfmError};
use sfm_core::geometry::{
    align_similarity, pose_errors, read_points, read_poses, write_ply, write_points, write_poses,
    CameraPose,
};
use sfm_core::report::{BaReport, EvalReport};
use sfm_core::robustba::{self, BAProblem, RobustBAConfig};
use sfm_core::synth::{generate_scene, SceneConfig};
use sfm_core::trackstore::{
    chain_matches, normalize_tracks, read_matches, read_tracks, write_tracks, TrackTensor,
};
use sfm_core::training::{self, TrainConfig};
use sfm_core::OutlierScores;

fn data_err(msg: impl Into<String>) -> SfmError {
    SfmError::InvalidConfig(msg.into())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub cams: usize,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    #[arg(long, default_value_t = 0.2)]
    pub outlier_rate: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_px: f64,
    #[arg(long, default_value_t = 0.75)]
    pub visibility: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub focal_px: f64,
    /// Write pixel-unit tracks instead of normalized ones.
    #[arg(long)]
    pub pixel_units: bool,
    #[arg(long)]
    pub out_tracks: PathBuf,
    #[arg(long)]
    pub out_poses: PathBuf,
    #[arg(long)]
    pub out_points: Option<PathBuf>,
}

pub fn run_synth(args: SynthArgs) -> Result<()> {
    let config = SceneConfig {
        num_cameras: args.cams,
        num_points: args.points,
        noise_sigma_px: args.noise_px,
        outlier_rate: args.outlier_rate,
        visibility_rate: args.visibility,
        focal_px: args.focal_px,
        seed: args.seed,
        ..Default::default()
    };
    let scene = generate_scene(&config)?;
    let tracks =
        if args.pixel_units { scene.tracks.clone() } else { scene.normalized_tracks()? };
    write_tracks(&args.out_tracks, &tracks, Some(&scene.labels))?;
    let poses: Vec<(usize, CameraPose)> =
        scene.gt_poses.iter().copied().enumerate().collect();
    write_poses(&args.out_poses, &poses)?;
    if let Some(path) = &args.out_points {
        write_points(path, &scene.gt_points)?;
    }
    eprintln!(
        "scene: {} cameras, {} tracks, {} observations, {:.1}% outliers",
        tracks.num_cameras(),
        tracks.num_tracks(),
        tracks.num_observations(),
        100.0 * scene.outlier_fraction(),
    );
    Ok(())
}

#[derive(Args)]
pub struct TracksArgs {
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Normalize with a shared calibration: focal length in pixels.
    #[arg(long)]
    pub focal: Option<f64>,
    /// Principal point (requires --focal).
    #[arg(long, default_value_t = 0.0)]
    pub cx: f64,
    #[arg(long, default_value_t = 0.0)]
    pub cy: f64,
}

pub fn run_tracks(args: TracksArgs) -> Result<()> {
    let matches = read_matches(&args.matches)?;
    let mut tensor = chain_matches(&matches);
    if let Some(f) = args.focal {
        let k = Matrix3::new(f, 0.0, args.cx, 0.0, f, args.cy, 0.0, 0.0, 1.0);
        tensor = normalize_tracks(&tensor, &vec![k; tensor.num_cameras()])?;
    }
    write_tracks(&args.out, &tensor, None)?;
    eprintln!(
        "chained {} matches into {} tracks over {} cameras ({} observations)",
        matches.len(),
        tensor.num_tracks(),
        tensor.num_cameras(),
        tensor.num_observations(),
    );
    Ok(())
}

fn require_normalized(tensor: &TrackTensor, what: &str) -> Result<()> {
    if !tensor.normalized() {
        return Err(data_err(format!("{what} must contain normalized tracks")));
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Labeled training scene (repeatable).
    #[arg(long = "scene", required = true)]
    pub scenes: Vec<PathBuf>,
    /// Validation scene for early stopping (repeatable).
    #[arg(long = "val")]
    pub val_scenes: Vec<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let mut scenes = Vec::new();
    for path in &args.scenes {
        let (tensor, labels) = read_tracks(path)?;
        require_normalized(&tensor, "training scene")?;
        let labels = labels
            .ok_or_else(|| data_err(format!("{} carries no labels", path.display())))?;
        scenes.push((tensor, labels));
    }
    let mut val = Vec::new();
    for path in &args.val_scenes {
        let (tensor, labels) = read_tracks(path)?;
        require_normalized(&tensor, "validation scene")?;
        val.push((tensor, labels));
    }
    let config = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        patience: args.patience,
        seed: args.seed,
        model: ModelConfig { width: args.width },
        ..Default::default()
    };
    let report = training::train(&scenes, &val, &config)?;
    equinet::save_checkpoint(&args.out, &report.params)?;
    if let Some(log) = &args.log {
        std::fs::write(log, report.log_text())?;
    }
    match report.best_epoch {
        Some(epoch) => eprintln!(
            "trained {} epochs; checkpoint from epoch {epoch} written to {}",
            report.history.len(),
            args.out.display()
        ),
        None => eprintln!(
            "trained {} epochs (no validation set); final checkpoint written to {}",
            report.history.len(),
            args.out.display()
        ),
    }
    Ok(())
}

fn write_scores(path: &std::path::Path, scores: &OutlierScores, tensor: &TrackTensor) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for (obs, score) in tensor.observations().iter().zip(scores.values()) {
        writeln!(out, "{} {} {score:.17e}", obs.camera, obs.track).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.6)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1000)]
    pub finetune_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long)]
    pub out_poses: PathBuf,
    #[arg(long)]
    pub out_points: PathBuf,
    #[arg(long)]
    pub out_scores: Option<PathBuf>,
    #[arg(long)]
    pub out_filtered: Option<PathBuf>,
}

pub fn run_infer(args: InferArgs) -> Result<()> {
    let (tensor, _) = read_tracks(&args.scene)?;
    require_normalized(&tensor, "inference scene")?;
    let params = equinet::load_checkpoint(&args.model)?;
    let config = TrainConfig {
        outlier_threshold: args.threshold,
        finetune_epochs: args.finetune_epochs,
        learning_rate: args.lr,
        model: params.config,
        ..Default::default()
    };
    let result = training::infer(&tensor, &params, &config)?;
    let poses: Vec<(usize, CameraPose)> = result.poses.iter().copied().enumerate().collect();
    write_poses(&args.out_poses, &poses)?;
    write_points(&args.out_points, &result.points)?;
    if let Some(path) = &args.out_scores {
        write_scores(path, &result.scores, &tensor)?;
    }
    if let Some(path) = &args.out_filtered {
        write_tracks(path, &result.filtered, None)?;
    }
    eprintln!(
        "kept {}/{} observations ({} tracks) after removal at {}",
        result.filtered.num_observations(),
        tensor.num_observations(),
        result.filtered.num_tracks(),
        args.threshold,
    );
    Ok(())
}

#[derive(Args)]
pub struct BaArgs {
    #[arg(long)]
    pub tracks: PathBuf,
    #[arg(long)]
    pub poses: PathBuf,
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub huber: f64,
    /// Interpret the Huber parameter in normalized units instead of
    /// pixels.
    #[arg(long)]
    pub normalized_huber: bool,
    #[arg(long, default_value_t = 300)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 5.0)]
    pub filter_px: f64,
    #[arg(long, default_value_t = 3)]
    pub min_views: usize,
    /// Run a single standard (non-robust) BA round instead of the 4-step
    /// robust pipeline.
    #[arg(long)]
    pub standard: bool,
    /// Ground-truth poses for the metrics report.
    #[arg(long)]
    pub gt_poses: Option<PathBuf>,
    #[arg(long)]
    pub out_poses: PathBuf,
    #[arg(long)]
    pub out_points: PathBuf,
    /// File listing the registered camera ids, one per line.
    #[arg(long)]
    pub out_registered: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

pub fn run_ba(args: BaArgs, threads: usize) -> Result<()> {
    let started = Instant::now();
    let (tensor, _) = read_tracks(&args.tracks)?;
    require_normalized(&tensor, "bundle adjustment input")?;
    let poses_in = read_poses(&args.poses)?;
    if poses_in.len() != tensor.num_cameras() {
        return Err(data_err(format!(
            "{} poses for {} cameras",
            poses_in.len(),
            tensor.num_cameras()
        )));
    }
    let mut poses = vec![CameraPose::identity(); tensor.num_cameras()];
    for (cam, pose) in &poses_in {
        if *cam >= poses.len() {
            return Err(data_err(format!("pose for unknown camera {cam}")));
        }
        poses[*cam] = *pose;
    }
    let points = read_points(&args.points)?;
    let config = RobustBAConfig {
        huber_delta: args.huber,
        huber_pixel_units: !args.normalized_huber,
        max_iterations: args.max_iters,
        reproj_filter_px: args.filter_px,
        min_views: args.min_views,
        threads,
    };

    let n_c = tensor.num_cameras();
    let (final_poses, final_points, registered, mean_px) = if args.standard {
        let problem = BAProblem::new(poses, points, tensor)?;
        let (solved, _) = robustba::bundle_adjust(&problem, false, &config)?;
        let mean_px = solved.mean_reprojection_px()?;
        let registered: Vec<usize> = (0..solved.poses.len()).collect();
        (solved.poses, solved.points, registered, mean_px)
    } else {
        let result = robustba::robust_ba_pipeline(poses, points, tensor, &config)?;
        let mean_px = result.problem.mean_reprojection_px()?;
        (
            result.problem.poses.clone(),
            result.problem.points.clone(),
            result.registered,
            mean_px,
        )
    };

    let out_poses: Vec<(usize, CameraPose)> =
        registered.iter().copied().zip(final_poses.iter().copied()).collect();
    write_poses(&args.out_poses, &out_poses)?;
    write_points(&args.out_points, &final_points)?;
    if let Some(path) = &args.out_registered {
        let text: String = registered.iter().map(|c| format!("{c}\n")).collect();
        std::fs::write(path, text)?;
    }

    let errors = match &args.gt_poses {
        Some(path) => {
            let gt = read_poses(path)?;
            let gt_map: BTreeMap<usize, CameraPose> = gt.into_iter().collect();
            let mut pred = Vec::new();
            let mut reference = Vec::new();
            for (cam, pose) in &out_poses {
                if let Some(g) = gt_map.get(cam) {
                    pred.push(*pose);
                    reference.push(*g);
                }
            }
            let align = align_similarity(&pred, &reference)?;
            Some((&pose_errors(&pred, &reference, &align)?).into())
        }
        None => None,
    };
    let report = BaReport {
        n_c,
        n_r: registered.len(),
        errors,
        mean_reprojection_px: mean_px,
        runtime_sec: started.elapsed().as_secs_f64(),
    };
    let json = report.to_json()?;
    if let Some(path) = &args.metrics {
        std::fs::write(path, &json)?;
    }
    println!("{json}");
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Restrict the comparison to these camera ids (one per line).
    #[arg(long)]
    pub registered: Option<PathBuf>,
    /// Input outlier fraction to carry into the report.
    #[arg(long)]
    pub outliers_pct: Option<f64>,
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let pred = read_poses(&args.pred)?;
    let gt = read_poses(&args.gt)?;
    let registered: Option<Vec<usize>> = match &args.registered {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let mut ids = Vec::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                ids.push(line.parse::<usize>().map_err(|_| SfmError::Parse {
                    line: i + 1,
                    msg: format!("invalid camera id `{line}`"),
                })?);
            }
            Some(ids)
        }
        None => None,
    };
    let gt_map: BTreeMap<usize, CameraPose> = gt.iter().copied().collect();
    let mut pred_poses = Vec::new();
    let mut gt_poses = Vec::new();
    for (cam, pose) in &pred {
        if registered.as_ref().map(|r| !r.contains(cam)).unwrap_or(false) {
            continue;
        }
        if let Some(g) = gt_map.get(cam) {
            pred_poses.push(*pose);
            gt_poses.push(*g);
        }
    }
    if pred_poses.is_empty() {
        return Err(data_err("no common cameras between prediction and ground truth"));
    }
    let align = align_similarity(&pred_poses, &gt_poses)?;
    let errors = pose_errors(&pred_poses, &gt_poses, &align)?;
    let report = EvalReport::new(gt.len(), pred_poses.len(), &errors, args.outliers_pct);
    println!("{}", report.to_json()?);
    Ok(())
}

#[derive(Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub poses: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run_export(args: ExportArgs) -> Result<()> {
    let points = read_points(&args.points)?;
    let centers = match &args.poses {
        Some(path) => read_poses(path)?.iter().map(|(_, p)| p.center()).collect(),
        None => Vec::new(),
    };
    write_ply(&args.out, &points, &centers)?;
    eprintln!("wrote {} points and {} cameras to {}", points.len(), centers.len(), args.out.display());
    Ok(())
}
