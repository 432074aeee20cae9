//! Clinical-prior kinematic knowledge map: a T x 238 feature matrix over a
//! 96-frame clip, partitioned into motion space (140), self-skeleton space
//! (32) and signal cross-correlation (66), computed in a translation- and
//! scale-free body frame.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{joint, Clip, CLIP_LEN};

pub const N_FEATURES: usize = 238;
pub const N_MOTION: usize = 140;
pub const N_SKELETON: usize = 32;
pub const N_XCORR: usize = 66;

/// Cross-correlation window (frames, odd) and max lag.
pub const XCORR_WINDOW: usize = 31;
pub const XCORR_MAX_LAG: usize = 10;

const VAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Motion,
    SelfSkeleton,
    CrossCorrelation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub name: String,
    pub domain: Domain,
    pub column_index: usize,
    pub units: String,
}

/// The versioned, build-wide constant column roster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub features: Vec<FeatureDescriptor>,
}

/// The 14 tracked points: 13 COCO joints (eyes/ears excluded) plus the
/// derived mid-hip.
pub const N_POINTS: usize = 14;
pub const POINT_NAMES: [&str; N_POINTS] = [
    "nose", "shoulderL", "shoulderR", "elbowL", "elbowR", "wristL", "wristR", "hipL", "hipR",
    "kneeL", "kneeR", "ankleL", "ankleR", "midHip",
];

/// Per-point motion descriptors, in column order.
pub const MOTION_DESCRIPTORS: [(&str, &str); 10] = [
    ("x", "tl"),
    ("y", "tl"),
    ("vx", "tl/s"),
    ("vy", "tl/s"),
    ("speed", "tl/s"),
    ("ax", "tl/s^2"),
    ("ay", "tl/s^2"),
    ("amag", "tl/s^2"),
    ("jerkmag", "tl/s^3"),
    ("yosc", "tl"),
];

const ANGLE_NAMES: [&str; 16] = [
    "elbow_flexion_L",
    "elbow_flexion_R",
    "knee_flexion_L",
    "knee_flexion_R",
    "hip_flexion_L",
    "hip_flexion_R",
    "shoulder_flexion_L",
    "shoulder_flexion_R",
    "shoulder_tilt",
    "pelvis_tilt",
    "trunk_lean",
    "head_lean",
    "shoulder_pelvis_angle",
    "thigh_vertical_L",
    "thigh_vertical_R",
    "inter_ankle_angle",
];

const DIST_NAMES: [(&str, &str); 16] = [
    ("wristL", "hipL"),
    ("wristR", "hipR"),
    ("wristL", "wristR"),
    ("ankleL", "ankleR"),
    ("kneeL", "kneeR"),
    ("elbowL", "hipL"),
    ("elbowR", "hipR"),
    ("shoulderL", "hipR"),
    ("shoulderR", "hipL"),
    ("nose", "midHip"),
    ("wristL", "shoulderL"),
    ("wristR", "shoulderR"),
    ("ankleL", "hipL"),
    ("ankleR", "hipR"),
    ("kneeL", "hipL"),
    ("kneeR", "hipR"),
];

/// The 12 coordination signals feeding the cross-correlation block.
pub const SIGNAL_NAMES: [&str; 12] = [
    "wristL_y", "wristR_y", "elbowL_y", "elbowR_y", "kneeL_y", "kneeR_y", "ankleL_y", "ankleR_y",
    "shoulder_tilt", "pelvis_tilt", "trunk_lean", "midHip_y",
];

impl FeatureSchema {
    /// The schema constant for this build.
    pub fn current() -> &'static FeatureSchema {
        static SCHEMA: OnceLock<FeatureSchema> = OnceLock::new();
        SCHEMA.get_or_init(FeatureSchema::build_v1)
    }

    fn build_v1() -> FeatureSchema {
        let mut features = Vec::with_capacity(N_FEATURES);
        for point in POINT_NAMES {
            for (desc, units) in MOTION_DESCRIPTORS {
                features.push(FeatureDescriptor {
                    name: format!("{point}_{desc}"),
                    domain: Domain::Motion,
                    column_index: features.len(),
                    units: units.to_string(),
                });
            }
        }
        for name in ANGLE_NAMES {
            features.push(FeatureDescriptor {
                name: format!("angle_{name}"),
                domain: Domain::SelfSkeleton,
                column_index: features.len(),
                units: "deg".to_string(),
            });
        }
        for (a, b) in DIST_NAMES {
            features.push(FeatureDescriptor {
                name: format!("dist_{a}_{b}"),
                domain: Domain::SelfSkeleton,
                column_index: features.len(),
                units: "tl".to_string(),
            });
        }
        for i in 0..SIGNAL_NAMES.len() {
            for j in i + 1..SIGNAL_NAMES.len() {
                features.push(FeatureDescriptor {
                    name: format!("xcorr_{}_{}", SIGNAL_NAMES[i], SIGNAL_NAMES[j]),
                    domain: Domain::CrossCorrelation,
                    column_index: features.len(),
                    units: "corr".to_string(),
                });
            }
        }
        assert_eq!(features.len(), N_FEATURES);
        FeatureSchema { version: 1, features }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.features.iter().find(|f| f.name == name).map(|f| f.column_index)
    }

    pub fn domain_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for f in &self.features {
            match f.domain {
                Domain::Motion => counts.0 += 1,
                Domain::SelfSkeleton => counts.1 += 1,
                Domain::CrossCorrelation => counts.2 += 1,
            }
        }
        counts
    }

    /// Column range [start, end) of a domain block.
    pub fn domain_block(&self, domain: Domain) -> (usize, usize) {
        match domain {
            Domain::Motion => (0, N_MOTION),
            Domain::SelfSkeleton => (N_MOTION, N_MOTION + N_SKELETON),
            Domain::CrossCorrelation => (N_MOTION + N_SKELETON, N_FEATURES),
        }
    }

    /// Left/right mirror pairing: for each column, the source column and sign
    /// such that `map(mirrored clip)[.., col] == sign * map(clip)[.., src]`.
    pub fn mirror_map(&self) -> Vec<(usize, f64)> {
        let mirror_point = |p: &str| -> String {
            if let Some(base) = p.strip_suffix('L') {
                format!("{base}R")
            } else if let Some(base) = p.strip_suffix("L_y") {
                format!("{base}R_y")
            } else if let Some(base) = p.strip_suffix('R') {
                format!("{base}L")
            } else if let Some(base) = p.strip_suffix("R_y") {
                format!("{base}L_y")
            } else {
                p.to_string()
            }
        };
        let mirror_name = |name: &str| -> (String, f64) {
            if let Some(rest) = name.strip_prefix("xcorr_") {
                // Signals are fixed-width names; resolve by longest-prefix match.
                let sigs: Vec<&str> = SIGNAL_NAMES.to_vec();
                let first = sigs
                    .iter()
                    .find(|s| rest.starts_with(&format!("{s}_")))
                    .expect("xcorr first signal");
                let second = &rest[first.len() + 1..];
                let mut a = mirror_point(first);
                let mut b = mirror_point(second);
                let ia = sigs.iter().position(|s| *s == a).unwrap();
                let ib = sigs.iter().position(|s| *s == b).unwrap();
                if ia > ib {
                    std::mem::swap(&mut a, &mut b);
                }
                (format!("xcorr_{a}_{b}"), 1.0)
            } else if let Some(rest) = name.strip_prefix("dist_") {
                let (a, b) = {
                    // Distances are named dist_{a}_{b} with point names free of '_'.
                    let mut it = rest.splitn(2, '_');
                    (it.next().unwrap().to_string(), it.next().unwrap().to_string())
                };
                let ma = mirror_point(&a);
                let mb = mirror_point(&b);
                let direct = format!("dist_{ma}_{mb}");
                let swapped = format!("dist_{mb}_{ma}");
                if self.column(&direct).is_some() {
                    (direct, 1.0)
                } else {
                    (swapped, 1.0)
                }
            } else if name.starts_with("angle_") {
                let swapped = if let Some(base) = name.strip_suffix("_L") {
                    format!("{base}_R")
                } else if let Some(base) = name.strip_suffix("_R") {
                    format!("{base}_L")
                } else {
                    name.to_string()
                };
                (swapped, 1.0)
            } else {
                // Motion feature {point}_{desc}.
                let us = name.rfind('_').unwrap();
                let (point, desc) = (&name[..us], &name[us + 1..]);
                let sign = match desc {
                    "x" | "vx" | "ax" => -1.0,
                    _ => 1.0,
                };
                (format!("{}_{desc}", mirror_point(point)), sign)
            }
        };
        self.features
            .iter()
            .map(|f| {
                let (src_name, sign) = mirror_name(&f.name);
                let src = self
                    .column(&src_name)
                    .unwrap_or_else(|| panic!("mirror of {} -> {} not in schema", f.name, src_name));
                (src, sign)
            })
            .collect()
    }
}

/// T x 238 matrix of kinematic features for one clip.
#[derive(Debug, Clone)]
pub struct KnowledgeMap {
    /// Row-major, T rows of 238 columns.
    pub values: Vec<f64>,
    pub t: usize,
    pub fps: f64,
}

impl KnowledgeMap {
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * N_FEATURES + f]
    }

    pub fn column(&self, f: usize) -> Vec<f64> {
        (0..self.t).map(|t| self.get(t, f)).collect()
    }
}

/// Euclidean distance between two points.
pub fn pair_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

/// Unsigned angle between two vectors, degrees in [0, 180].
pub fn segment_angle(u: (f64, f64), v: (f64, f64)) -> Result<f64> {
    let nu = (u.0 * u.0 + u.1 * u.1).sqrt();
    let nv = (v.0 * v.0 + v.1 * v.1).sqrt();
    if nu < VAR_EPS || nv < VAR_EPS {
        return Err(Error::Data("degenerate geometry: zero-length segment".into()));
    }
    let cross = (u.0 * v.1 - u.1 * v.0).abs();
    let dot = u.0 * v.0 + u.1 * v.1;
    Ok(cross.atan2(dot).to_degrees())
}

fn mean_var(s: &[f64]) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va < VAR_EPS || vb < VAR_EPS {
        return None;
    }
    let n = a.len() as f64;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    Some((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Max over lag in [-L, L] of the Pearson correlation between two series
/// over a window of `w` frames centered at `t` (clamped at the edges).
/// Returns 0 when either windowed series is (near-)constant.
pub fn windowed_xcorr(s1: &[f64], s2: &[f64], t: usize, w: usize, l: usize) -> Result<f64> {
    if w % 2 == 0 {
        return Err(Error::Config(format!("xcorr window {w} must be odd")));
    }
    if 2 * l >= w {
        return Err(Error::Config(format!("xcorr max lag {l} must be < window/2 = {}", w / 2)));
    }
    let n = s1.len();
    if s2.len() != n || n < w {
        return Err(Error::Shape(format!(
            "xcorr needs two equal series of at least {w} samples, got {} and {}",
            n,
            s2.len()
        )));
    }
    let half = w / 2;
    let lo = t.saturating_sub(half).min(n - w);
    let a = &s1[lo..lo + w];
    let b = &s2[lo..lo + w];
    if mean_var(a).1 < VAR_EPS || mean_var(b).1 < VAR_EPS {
        return Ok(0.0);
    }
    let mut best = f64::NEG_INFINITY;
    for lag in -(l as isize)..=(l as isize) {
        // Overlapping samples: a[i] vs b[i + lag].
        let (astart, bstart) = if lag >= 0 { (0, lag as usize) } else { ((-lag) as usize, 0) };
        let len = w - lag.unsigned_abs();
        let av = &a[astart..astart + len];
        let bv = &b[bstart..bstart + len];
        if let Some(r) = pearson(av, bv) {
            best = best.max(r);
        }
    }
    Ok(if best.is_finite() { best } else { 0.0 })
}

/// Finite differencing with forward/backward one-sided stencils at the ends.
fn differentiate(series: &[f64], dt: f64) -> Vec<f64> {
    let n = series.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    out[0] = (series[1] - series[0]) / dt;
    out[n - 1] = (series[n - 1] - series[n - 2]) / dt;
    for t in 1..n - 1 {
        out[t] = (series[t + 1] - series[t - 1]) / (2.0 * dt);
    }
    out
}

type Point = (f64, f64);

/// Body-frame point trajectories plus the per-frame mid-shoulder.
struct BodyFrame {
    /// points[p][t], indexed by POINT_NAMES order.
    points: Vec<Vec<Point>>,
    mid_shoulder: Vec<Point>,
}

fn to_body_frame(clip: &Clip) -> Result<BodyFrame> {
    let t_len = clip.frames.len();
    let mid = |a: Point, b: Point| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
    let kp = |t: usize, j: usize| -> Point {
        let k = &clip.frames[t].keypoints[j];
        (k.x, k.y)
    };
    let mid_hips: Vec<Point> = (0..t_len).map(|t| mid(kp(t, joint::HIP_L), kp(t, joint::HIP_R))).collect();
    let mid_shoulders: Vec<Point> =
        (0..t_len).map(|t| mid(kp(t, joint::SHOULDER_L), kp(t, joint::SHOULDER_R))).collect();
    let trunk_len = mid_hips
        .iter()
        .zip(&mid_shoulders)
        .map(|(h, s)| pair_distance(*h, *s))
        .sum::<f64>()
        / t_len as f64;
    if trunk_len < 1e-6 {
        return Err(Error::Data("degenerate pose: trunk length below 1e-6".into()));
    }
    let cx = mid_hips.iter().map(|p| p.0).sum::<f64>() / t_len as f64;
    let cy = mid_hips.iter().map(|p| p.1).sum::<f64>() / t_len as f64;
    let norm = |p: Point| ((p.0 - cx) / trunk_len, (p.1 - cy) / trunk_len);

    let source_joints = [
        joint::NOSE,
        joint::SHOULDER_L,
        joint::SHOULDER_R,
        joint::ELBOW_L,
        joint::ELBOW_R,
        joint::WRIST_L,
        joint::WRIST_R,
        joint::HIP_L,
        joint::HIP_R,
        joint::KNEE_L,
        joint::KNEE_R,
        joint::ANKLE_L,
        joint::ANKLE_R,
    ];
    let mut points: Vec<Vec<Point>> = Vec::with_capacity(N_POINTS);
    for &j in &source_joints {
        points.push((0..t_len).map(|t| norm(kp(t, j))).collect());
    }
    points.push(mid_hips.iter().map(|&p| norm(p)).collect());
    Ok(BodyFrame {
        points,
        mid_shoulder: mid_shoulders.iter().map(|&p| norm(p)).collect(),
    })
}

// Indices into POINT_NAMES.
const P_NOSE: usize = 0;
const P_SHOULDER_L: usize = 1;
const P_SHOULDER_R: usize = 2;
const P_ELBOW_L: usize = 3;
const P_ELBOW_R: usize = 4;
const P_WRIST_L: usize = 5;
const P_WRIST_R: usize = 6;
const P_HIP_L: usize = 7;
const P_HIP_R: usize = 8;
const P_KNEE_L: usize = 9;
const P_KNEE_R: usize = 10;
const P_ANKLE_L: usize = 11;
const P_ANKLE_R: usize = 12;
const P_MID_HIP: usize = 13;

fn sub(a: Point, b: Point) -> Point {
    (a.0 - b.0, a.1 - b.1)
}

/// Unsigned tilt of the line a-b against the horizontal, folded to [0, 90]
/// (direction-free, so mirror-invariant).
fn line_tilt(a: Point, b: Point) -> Result<f64> {
    let ang = segment_angle(sub(b, a), (1.0, 0.0))?;
    Ok(ang.min(180.0 - ang))
}

/// Compute the knowledge map of a 96-frame clip.
pub fn extract(clip: &Clip, fps: f64) -> Result<KnowledgeMap> {
    if clip.frames.len() != CLIP_LEN {
        return Err(Error::Validation(format!(
            "extract requires a {CLIP_LEN}-frame clip, got {}",
            clip.frames.len()
        )));
    }
    let t_len = CLIP_LEN;
    let body = to_body_frame(clip)?;
    let dt = 1.0 / fps;
    let mut values = vec![0.0; t_len * N_FEATURES];

    // Motion space: 14 points x 10 descriptors.
    for (p, traj) in body.points.iter().enumerate() {
        let xs: Vec<f64> = traj.iter().map(|q| q.0).collect();
        let ys: Vec<f64> = traj.iter().map(|q| q.1).collect();
        let vx = differentiate(&xs, dt);
        let vy = differentiate(&ys, dt);
        let ax = differentiate(&vx, dt);
        let ay = differentiate(&vy, dt);
        let jx = differentiate(&ax, dt);
        let jy = differentiate(&ay, dt);
        let y_mean = ys.iter().sum::<f64>() / t_len as f64;
        for t in 0..t_len {
            let base = t * N_FEATURES + p * 10;
            values[base] = xs[t];
            values[base + 1] = ys[t];
            values[base + 2] = vx[t];
            values[base + 3] = vy[t];
            values[base + 4] = (vx[t] * vx[t] + vy[t] * vy[t]).sqrt();
            values[base + 5] = ax[t];
            values[base + 6] = ay[t];
            values[base + 7] = (ax[t] * ax[t] + ay[t] * ay[t]).sqrt();
            values[base + 8] = (jx[t] * jx[t] + jy[t] * jy[t]).sqrt();
            values[base + 9] = ys[t] - y_mean;
        }
    }

    // Self-skeleton space: 16 angles + 16 distances, with previous-frame
    // substitution when a segment degenerates.
    let pt = |p: usize, t: usize| body.points[p][t];
    for t in 0..t_len {
        let ms = body.mid_shoulder[t];
        let mh = pt(P_MID_HIP, t);
        let trunk_down = sub(mh, ms);
        let angles: [Result<f64>; 16] = [
            segment_angle(sub(pt(P_SHOULDER_L, t), pt(P_ELBOW_L, t)), sub(pt(P_WRIST_L, t), pt(P_ELBOW_L, t))),
            segment_angle(sub(pt(P_SHOULDER_R, t), pt(P_ELBOW_R, t)), sub(pt(P_WRIST_R, t), pt(P_ELBOW_R, t))),
            segment_angle(sub(pt(P_HIP_L, t), pt(P_KNEE_L, t)), sub(pt(P_ANKLE_L, t), pt(P_KNEE_L, t))),
            segment_angle(sub(pt(P_HIP_R, t), pt(P_KNEE_R, t)), sub(pt(P_ANKLE_R, t), pt(P_KNEE_R, t))),
            segment_angle(trunk_down, sub(pt(P_KNEE_L, t), pt(P_HIP_L, t))),
            segment_angle(trunk_down, sub(pt(P_KNEE_R, t), pt(P_HIP_R, t))),
            segment_angle(trunk_down, sub(pt(P_ELBOW_L, t), pt(P_SHOULDER_L, t))),
            segment_angle(trunk_down, sub(pt(P_ELBOW_R, t), pt(P_SHOULDER_R, t))),
            line_tilt(pt(P_SHOULDER_L, t), pt(P_SHOULDER_R, t)),
            line_tilt(pt(P_HIP_L, t), pt(P_HIP_R, t)),
            segment_angle(sub(ms, mh), (0.0, -1.0)),
            segment_angle(sub(pt(P_NOSE, t), ms), (0.0, -1.0)),
            segment_angle(sub(pt(P_SHOULDER_R, t), pt(P_SHOULDER_L, t)), sub(pt(P_HIP_R, t), pt(P_HIP_L, t)))
                .map(|a| a.min(180.0 - a)),
            segment_angle(sub(pt(P_KNEE_L, t), pt(P_HIP_L, t)), (0.0, 1.0)),
            segment_angle(sub(pt(P_KNEE_R, t), pt(P_HIP_R, t)), (0.0, 1.0)),
            segment_angle(sub(pt(P_ANKLE_L, t), mh), sub(pt(P_ANKLE_R, t), mh)),
        ];
        for (i, a) in angles.into_iter().enumerate() {
            let col = N_MOTION + i;
            values[t * N_FEATURES + col] = match a {
                Ok(v) => v,
                // Degenerate segment: carry the previous frame's value.
                Err(_) if t > 0 => values[(t - 1) * N_FEATURES + col],
                Err(_) => 0.0,
            };
        }
        let point_by_name = |name: &str| -> Point {
            let p = POINT_NAMES.iter().position(|n| *n == name).unwrap();
            pt(p, t)
        };
        for (i, (a, b)) in DIST_NAMES.iter().enumerate() {
            let col = N_MOTION + 16 + i;
            values[t * N_FEATURES + col] = pair_distance(point_by_name(a), point_by_name(b));
        }
    }

    // Cross-correlation block over the 12 coordination signals.
    let signals = coordination_signals(&values, t_len);
    let mut col = N_MOTION + N_SKELETON;
    for i in 0..SIGNAL_NAMES.len() {
        for j in i + 1..SIGNAL_NAMES.len() {
            for t in 0..t_len {
                values[t * N_FEATURES + col] =
                    windowed_xcorr(&signals[i], &signals[j], t, XCORR_WINDOW, XCORR_MAX_LAG)?;
            }
            col += 1;
        }
    }

    for v in &values {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite knowledge-map value".into()));
        }
    }
    Ok(KnowledgeMap { values, t: t_len, fps })
}

/// The 12 raw series behind the cross-correlation block, read back out of
/// the already-filled motion/skeleton columns.
fn coordination_signals(values: &[f64], t_len: usize) -> Vec<Vec<f64>> {
    let motion_col = |point: usize, desc: usize| point * 10 + desc;
    let y = 1;
    let sources = [
        motion_col(P_WRIST_L, y),
        motion_col(P_WRIST_R, y),
        motion_col(P_ELBOW_L, y),
        motion_col(P_ELBOW_R, y),
        motion_col(P_KNEE_L, y),
        motion_col(P_KNEE_R, y),
        motion_col(P_ANKLE_L, y),
        motion_col(P_ANKLE_R, y),
        N_MOTION + 8,  // shoulder_tilt
        N_MOTION + 9,  // pelvis_tilt
        N_MOTION + 10, // trunk_lean
        motion_col(P_MID_HIP, y),
    ];
    sources
        .iter()
        .map(|&c| (0..t_len).map(|t| values[t * N_FEATURES + c]).collect())
        .collect()
}

/// Per-column standardization statistics, fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub degenerate: Vec<bool>,
}

pub fn fit_norm_stats(maps: &[KnowledgeMap]) -> Result<NormStats> {
    if maps.is_empty() {
        return Err(Error::Validation("fit_norm_stats needs at least one map".into()));
    }
    let total_rows: usize = maps.iter().map(|m| m.t).sum();
    let mut mean = vec![0.0; N_FEATURES];
    for m in maps {
        for row in m.values.chunks(N_FEATURES) {
            for (c, v) in row.iter().enumerate() {
                mean[c] += v;
            }
        }
    }
    for v in &mut mean {
        *v /= total_rows as f64;
    }
    let mut var = vec![0.0; N_FEATURES];
    for m in maps {
        for row in m.values.chunks(N_FEATURES) {
            for (c, v) in row.iter().enumerate() {
                let d = v - mean[c];
                var[c] += d * d;
            }
        }
    }
    let mut std = Vec::with_capacity(N_FEATURES);
    let mut degenerate = Vec::with_capacity(N_FEATURES);
    for c in 0..N_FEATURES {
        let s = (var[c] / total_rows as f64).sqrt();
        if s < 1e-8 {
            std.push(1.0);
            degenerate.push(true);
        } else {
            std.push(s);
            degenerate.push(false);
        }
    }
    Ok(NormStats { mean, std, degenerate })
}

/// (x - mean) / std per column; degenerate columns pass through unchanged.
pub fn apply_norm(map: &KnowledgeMap, stats: &NormStats) -> KnowledgeMap {
    let mut out = map.clone();
    for row in out.values.chunks_mut(N_FEATURES) {
        for (c, v) in row.iter_mut().enumerate() {
            if !stats.degenerate[c] {
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
    }
    out
}

const GMKM_MAGIC: &[u8; 4] = b"GMKM";
const GMKM_VERSION: u32 = 1;

/// Binary map file: {magic "GMKM", version u32, T u32, F u32}, then
/// row-major little-endian f64 values.
pub fn save_map(path: &Path, map: &KnowledgeMap) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + map.values.len() * 8);
    buf.extend_from_slice(GMKM_MAGIC);
    buf.extend_from_slice(&GMKM_VERSION.to_le_bytes());
    buf.extend_from_slice(&(map.t as u32).to_le_bytes());
    buf.extend_from_slice(&(N_FEATURES as u32).to_le_bytes());
    for v in &map.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_map(path: &Path, fps: f64) -> Result<KnowledgeMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != GMKM_MAGIC {
        return Err(Error::Validation(format!("{} is not a GMKM file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GMKM_VERSION {
        return Err(Error::Validation(format!("unsupported GMKM version {version}")));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if f != N_FEATURES {
        return Err(Error::Validation(format!("GMKM has {f} features, expected {N_FEATURES}")));
    }
    let expected = 16 + t * f * 8;
    if bytes.len() != expected {
        return Err(Error::Validation("truncated GMKM file".into()));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(KnowledgeMap { values, t, fps })
}

/// Clinician-facing sidecar: one entry per column.
pub fn save_schema_sidecar(path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(FeatureSchema::current())?;
    std::fs::write(path, text)?;
    Ok(())
}
