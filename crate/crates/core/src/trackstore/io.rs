//! Text formats for matches and track tensors.
//!
//! Floats are written with 17 significant digits, which round-trips every
//! f64 exactly; rewriting a parsed file reproduces it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Matrix3;

use super::{Match, Observation, PairwiseMatches, TrackLabels, TrackTensor};
use crate::error::{Result, SfmError};

/// 17-significant-digit scientific notation (bit-exact f64 round-trip).
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    tok.ok_or(SfmError::Parse { line, msg: format!("missing {what}") })?
        .parse::<T>()
        .map_err(|_| SfmError::Parse { line, msg: format!("invalid {what}") })
}

/// Read a matches file: one match per line,
/// `img_a kp_a x_a y_a img_b kp_b x_b y_b`. Blank lines and lines starting
/// with `#` are skipped.
pub fn read_matches(path: &Path) -> Result<PairwiseMatches> {
    let text = fs::read_to_string(path)?;
    let mut matches = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut toks = trimmed.split_whitespace();
        let image_a = parse(toks.next(), line, "img_a")?;
        let keypoint_a = parse(toks.next(), line, "kp_a")?;
        let xa: f64 = parse(toks.next(), line, "x_a")?;
        let ya: f64 = parse(toks.next(), line, "y_a")?;
        let image_b = parse(toks.next(), line, "img_b")?;
        let keypoint_b = parse(toks.next(), line, "kp_b")?;
        let xb: f64 = parse(toks.next(), line, "x_b")?;
        let yb: f64 = parse(toks.next(), line, "y_b")?;
        matches.push(Match {
            image_a,
            keypoint_a,
            position_a: [xa, ya],
            image_b,
            keypoint_b,
            position_b: [xb, yb],
        });
    }
    PairwiseMatches::new(matches)
}

pub fn write_matches(path: &Path, matches: &PairwiseMatches) -> Result<()> {
    let mut out = String::new();
    for m in matches.matches() {
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            m.image_a,
            m.keypoint_a,
            fmt_f64(m.position_a[0]),
            fmt_f64(m.position_a[1]),
            m.image_b,
            m.keypoint_b,
            fmt_f64(m.position_b[0]),
            fmt_f64(m.position_b[1]),
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Serialize a track tensor (and optional labels) to the tracks container
/// format:
///
/// ```text
/// tracks v1
/// num_cameras <m>
/// num_tracks <n>
/// normalized <0|1>
/// has_intrinsics <0|1>
/// has_labels <0|1>
/// K <cam> <9 row-major values>     # once per camera when present
/// obs <count>
/// <cam> <track> <x> <y> [<label>]  # one observation per line
/// ```
pub fn write_tracks(path: &Path, tensor: &TrackTensor, labels: Option<&TrackLabels>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != tensor.num_observations() {
            return Err(SfmError::ShapeMismatch {
                expected: format!("{} labels", tensor.num_observations()),
                got: format!("{}", l.len()),
            });
        }
    }
    let mut out = String::new();
    writeln!(out, "tracks v1").unwrap();
    writeln!(out, "num_cameras {}", tensor.num_cameras()).unwrap();
    writeln!(out, "num_tracks {}", tensor.num_tracks()).unwrap();
    writeln!(out, "normalized {}", tensor.normalized() as u8).unwrap();
    writeln!(out, "has_intrinsics {}", tensor.intrinsics().is_some() as u8).unwrap();
    writeln!(out, "has_labels {}", labels.is_some() as u8).unwrap();
    if let Some(ks) = tensor.intrinsics() {
        for (cam, k) in ks.iter().enumerate() {
            write!(out, "K {cam}").unwrap();
            for r in 0..3 {
                for c in 0..3 {
                    write!(out, " {}", fmt_f64(k[(r, c)])).unwrap();
                }
            }
            writeln!(out).unwrap();
        }
    }
    writeln!(out, "obs {}", tensor.num_observations()).unwrap();
    for (i, o) in tensor.observations().iter().enumerate() {
        write!(
            out,
            "{} {} {} {}",
            o.camera,
            o.track,
            fmt_f64(o.position[0]),
            fmt_f64(o.position[1])
        )
        .unwrap();
        if let Some(l) = labels {
            write!(out, " {}", l.is_outlier(i) as u8).unwrap();
        }
        writeln!(out).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse the tracks container format written by [`write_tracks`].
pub fn read_tracks(path: &Path) -> Result<(TrackTensor, Option<TrackLabels>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let mut expect_kv = |key: &str| -> Result<(usize, String)> {
        let (line, raw) = lines
            .next()
            .ok_or(SfmError::Parse { line: 0, msg: format!("missing {key} header") })?;
        let mut toks = raw.split_whitespace();
        let k = toks.next().unwrap_or("");
        if k != key {
            return Err(SfmError::Parse { line, msg: format!("expected `{key}`, got `{k}`") });
        }
        Ok((line, toks.collect::<Vec<_>>().join(" ")))
    };

    let (line, version) = expect_kv("tracks")?;
    if version != "v1" {
        return Err(SfmError::Parse { line, msg: format!("unsupported version `{version}`") });
    }
    let (line, v) = expect_kv("num_cameras")?;
    let num_cameras: usize = parse(Some(&v), line, "num_cameras")?;
    let (line, v) = expect_kv("num_tracks")?;
    let num_tracks: usize = parse(Some(&v), line, "num_tracks")?;
    let (line, v) = expect_kv("normalized")?;
    let normalized = parse::<u8>(Some(&v), line, "normalized")? != 0;
    let (line, v) = expect_kv("has_intrinsics")?;
    let has_intrinsics = parse::<u8>(Some(&v), line, "has_intrinsics")? != 0;
    let (line, v) = expect_kv("has_labels")?;
    let has_labels = parse::<u8>(Some(&v), line, "has_labels")? != 0;

    let intrinsics = if has_intrinsics {
        let mut ks = vec![Matrix3::zeros(); num_cameras];
        let mut seen = vec![false; num_cameras];
        for _ in 0..num_cameras {
            let (line, v) = expect_kv("K")?;
            let toks: Vec<&str> = v.split_whitespace().collect();
            if toks.len() != 10 {
                return Err(SfmError::Parse { line, msg: "K line needs cam id + 9 values".into() });
            }
            let cam: usize = parse(Some(toks[0]), line, "camera id")?;
            if cam >= num_cameras {
                return Err(SfmError::Parse { line, msg: format!("camera id {cam} out of range") });
            }
            for r in 0..3 {
                for c in 0..3 {
                    ks[cam][(r, c)] = parse(Some(toks[1 + r * 3 + c]), line, "K value")?;
                }
            }
            seen[cam] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(SfmError::Parse { line: 0, msg: "missing K line for some camera".into() });
        }
        Some(ks)
    } else {
        None
    };

    let (line, v) = expect_kv("obs")?;
    let count: usize = parse(Some(&v), line, "observation count")?;
    let mut observations = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(if has_labels { count } else { 0 });
    for _ in 0..count {
        let (line, raw) = lines
            .next()
            .ok_or(SfmError::Parse { line: 0, msg: "truncated observation list".into() })?;
        let mut toks = raw.split_whitespace();
        let camera = parse(toks.next(), line, "camera")?;
        let track = parse(toks.next(), line, "track")?;
        let x: f64 = parse(toks.next(), line, "x")?;
        let y: f64 = parse(toks.next(), line, "y")?;
        if has_labels {
            let l: u8 = parse(toks.next(), line, "label")?;
            labels.push(l != 0);
        }
        observations.push(Observation { camera, track, position: [x, y] });
    }

    // Labels are aligned by observation order; sort them alongside the
    // canonical sort the tensor applies.
    let tensor = if has_labels {
        let mut order: Vec<usize> = (0..observations.len()).collect();
        order.sort_by_key(|&i| (observations[i].camera, observations[i].track));
        let sorted_labels: Vec<bool> = order.iter().map(|&i| labels[i]).collect();
        let tensor =
            TrackTensor::new(num_cameras, num_tracks, observations, normalized, intrinsics)?;
        let labels = TrackLabels::new(&tensor, sorted_labels)?;
        return Ok((tensor, Some(labels)));
    } else {
        TrackTensor::new(num_cameras, num_tracks, observations, normalized, intrinsics)?
    };
    Ok((tensor, None))
}
