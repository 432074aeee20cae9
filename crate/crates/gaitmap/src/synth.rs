//! Parametric synthetic gait generator: labeled pose sequences with
//! controllable scoliosis-like asymmetries, plus a rasterized silhouette
//! stand-in for the video modality.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{
    joint, save_manifest, save_pose_jsonl, Keypoint, Label, ManifestEntry, PoseFrame, PoseSequence,
    CLIP_LEN, N_KEYPOINTS,
};

pub const SILHOUETTE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    /// Steps per second.
    pub cadence: f64,
    /// Lateral step amplitude, trunk-lengths.
    pub step_amplitude: f64,
    pub arm_swing_l: f64,
    pub arm_swing_r: f64,
    /// Degrees.
    pub shoulder_tilt_offset: f64,
    /// Degrees.
    pub pelvis_tilt_offset: f64,
    /// Degrees.
    pub trunk_lean_amp: f64,
    /// Phase-noise fraction on the left body side, in [0, 1].
    pub coordination_break: f64,
    /// Pixels.
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSubject {
    pub subject_id: String,
    pub cobb_proxy: f64,
    pub params: GaitParams,
    pub label: Label,
}

// Linear severity -> asymmetry coefficients. cobb_proxy 0 is perfectly
// symmetric; every asymmetry grows monotonically with severity.
const BASE_ARM_SWING: f64 = 0.5;
const ARM_SWING_LOSS_PER_DEG: f64 = 0.012;
const SHOULDER_TILT_PER_DEG: f64 = 0.40;
const PELVIS_TILT_PER_DEG: f64 = 0.25;
const TRUNK_LEAN_PER_DEG: f64 = 0.15;
const COORD_BREAK_PER_DEG: f64 = 0.02;

/// Deterministic severity -> gait parameter mapping.
pub fn generate_subject(subject_id: &str, cobb_proxy: f64, seed: u64) -> Result<SyntheticSubject> {
    if cobb_proxy < 0.0 {
        return Err(Error::Validation(format!("cobb_proxy must be >= 0, got {cobb_proxy}")));
    }
    let params = GaitParams {
        cadence: 0.9,
        step_amplitude: 0.25,
        arm_swing_l: BASE_ARM_SWING,
        arm_swing_r: (BASE_ARM_SWING - ARM_SWING_LOSS_PER_DEG * cobb_proxy).max(0.05),
        shoulder_tilt_offset: SHOULDER_TILT_PER_DEG * cobb_proxy,
        pelvis_tilt_offset: PELVIS_TILT_PER_DEG * cobb_proxy,
        trunk_lean_amp: TRUNK_LEAN_PER_DEG * cobb_proxy,
        coordination_break: (COORD_BREAK_PER_DEG * cobb_proxy).min(1.0),
        noise_std: 1.0,
        seed,
    };
    Ok(SyntheticSubject {
        subject_id: subject_id.to_string(),
        cobb_proxy,
        params,
        label: Label::from_cobb(cobb_proxy),
    })
}

/// Neutral standing skeleton in pixels, frontal view, mid-hip at the origin,
/// screen-down y. Trunk length is 80 px.
fn base_pose() -> [(f64, f64); N_KEYPOINTS] {
    [
        (0.0, -110.0),   // nose
        (-5.0, -115.0),  // eyeL
        (5.0, -115.0),   // eyeR
        (-9.0, -112.0),  // earL
        (9.0, -112.0),   // earR
        (-20.0, -80.0),  // shoulderL
        (20.0, -80.0),   // shoulderR
        (-28.0, -45.0),  // elbowL
        (28.0, -45.0),   // elbowR
        (-30.0, -10.0),  // wristL
        (30.0, -10.0),   // wristR
        (-15.0, 0.0),    // hipL
        (15.0, 0.0),     // hipR
        (-16.0, 45.0),   // kneeL
        (16.0, 45.0),    // kneeR
        (-17.0, 90.0),   // ankleL
        (17.0, 90.0),    // ankleR
    ]
}

const TRUNK_PX: f64 = 80.0;
const ARM_PX: f64 = 45.0;

/// Generate a pose sequence of phase-locked sinusoidal limb trajectories
/// modulated by the subject's asymmetry parameters.
pub fn synthesize_sequence(subject: &SyntheticSubject, n_frames: usize, fps: f64) -> Result<PoseSequence> {
    if n_frames < CLIP_LEN {
        return Err(Error::Validation(format!(
            "n_frames must be >= {CLIP_LEN}, got {n_frames}"
        )));
    }
    let p = &subject.params;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let omega = 2.0 * std::f64::consts::PI * p.cadence / fps;
    let step_px = p.step_amplitude * TRUNK_PX;
    let shoulder_dy = (p.shoulder_tilt_offset.to_radians()).tan() * 20.0;
    let pelvis_dy = (p.pelvis_tilt_offset.to_radians()).tan() * 15.0;
    let lean_px = p.trunk_lean_amp.to_radians().sin() * TRUNK_PX;

    // Smooth phase noise on the left side: seeded random walk, pulled back
    // toward zero so it stays bounded.
    let mut left_phase_noise = 0.0f64;
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let phi = omega * t as f64;
        left_phase_noise =
            0.95 * left_phase_noise + p.coordination_break * rng.gen_range(-0.25..0.25);
        let phi_l = phi + left_phase_noise;
        let bounce = 2.0 * (2.0 * phi).sin();
        // Lateral trunk sway at stride frequency.
        let sway = lean_px * (phi / 2.0).sin();

        let mut kps = [Keypoint { x: 0.0, y: 0.0, confidence: 1.0 }; N_KEYPOINTS];
        for (j, &(bx, by)) in base_pose().iter().enumerate() {
            let (mut x, mut y) = (bx, by);
            match j {
                joint::ANKLE_L => {
                    x += step_px * phi_l.sin();
                    y += 6.0 * phi_l.sin();
                }
                joint::ANKLE_R => {
                    x += step_px * (phi + std::f64::consts::PI).sin();
                    y += 6.0 * (phi + std::f64::consts::PI).sin();
                }
                joint::KNEE_L => {
                    x += 0.5 * step_px * phi_l.sin();
                    y += 3.0 * phi_l.sin();
                }
                joint::KNEE_R => {
                    x += 0.5 * step_px * (phi + std::f64::consts::PI).sin();
                    y += 3.0 * (phi + std::f64::consts::PI).sin();
                }
                // Contralateral arm-leg coupling: left arm swings with the
                // right leg.
                joint::WRIST_L => {
                    x += p.arm_swing_l.sin() * ARM_PX * (phi + std::f64::consts::PI).sin();
                    y += 3.0 * p.arm_swing_l.sin() * (phi + std::f64::consts::PI).cos();
                }
                joint::WRIST_R => {
                    x += p.arm_swing_r.sin() * ARM_PX * phi_l.sin();
                    y += 3.0 * p.arm_swing_r.sin() * phi_l.cos();
                }
                joint::ELBOW_L => {
                    x += 0.5 * p.arm_swing_l.sin() * ARM_PX * (phi + std::f64::consts::PI).sin();
                }
                joint::ELBOW_R => {
                    x += 0.5 * p.arm_swing_r.sin() * ARM_PX * phi_l.sin();
                }
                joint::SHOULDER_L => y -= shoulder_dy,
                joint::SHOULDER_R => y += shoulder_dy,
                joint::HIP_L => y -= pelvis_dy,
                joint::HIP_R => y += pelvis_dy,
                _ => {}
            }
            // Upper body rides the lateral sway and vertical bounce.
            if by < 0.0 {
                x += sway * (-by / TRUNK_PX).min(1.5);
            }
            y += bounce;
            // Place on a 1080p-like canvas.
            x += 540.0;
            y += 540.0;
            if p.noise_std > 0.0 {
                x += gaussian(&mut rng) * p.noise_std;
                y += gaussian(&mut rng) * p.noise_std;
            }
            kps[j] = Keypoint { x, y, confidence: 1.0 };
        }
        frames.push(PoseFrame { frame_index: t, keypoints: kps });
    }
    Ok(PoseSequence { subject_id: subject.subject_id.clone(), frames, fps })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Skeleton edges used for silhouette drawing.
const LIMBS: [(usize, usize); 12] = [
    (joint::SHOULDER_L, joint::SHOULDER_R),
    (joint::SHOULDER_L, joint::ELBOW_L),
    (joint::ELBOW_L, joint::WRIST_L),
    (joint::SHOULDER_R, joint::ELBOW_R),
    (joint::ELBOW_R, joint::WRIST_R),
    (joint::HIP_L, joint::HIP_R),
    (joint::HIP_L, joint::KNEE_L),
    (joint::KNEE_L, joint::ANKLE_L),
    (joint::HIP_R, joint::KNEE_R),
    (joint::KNEE_R, joint::ANKLE_R),
    (joint::SHOULDER_L, joint::HIP_L),
    (joint::SHOULDER_R, joint::HIP_R),
];

/// Draw the skeleton as anti-aliased capsules on a size x size grid,
/// intensities in [0, 1], trunk-normalized and centered on the trunk
/// midpoint.
pub fn rasterize_silhouette(frame: &PoseFrame, size: usize) -> Result<Vec<f64>> {
    let kp = |j: usize| (frame.keypoints[j].x, frame.keypoints[j].y);
    let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
    let mid_hip = mid(kp(joint::HIP_L), kp(joint::HIP_R));
    let mid_shoulder = mid(kp(joint::SHOULDER_L), kp(joint::SHOULDER_R));
    let trunk = ((mid_shoulder.0 - mid_hip.0).powi(2) + (mid_shoulder.1 - mid_hip.1).powi(2)).sqrt();
    if trunk < 1e-6 {
        return Err(Error::Data("degenerate pose: zero trunk length".into()));
    }
    let center = mid(mid_hip, mid_shoulder);
    // Trunk spans 10 px of the grid; head/ankles fit within ~3 trunk lengths.
    let scale = size as f64 * 10.0 / 32.0 / trunk;
    let to_grid = |p: (f64, f64)| {
        (
            (p.0 - center.0) * scale + size as f64 / 2.0,
            (p.1 - center.1) * scale + size as f64 / 2.0,
        )
    };
    let radius = size as f64 / 32.0 * 1.2;
    let mut img = vec![0.0f64; size * size];
    for &(a, b) in &LIMBS {
        let pa = to_grid(kp(a));
        let pb = to_grid(kp(b));
        for py in 0..size {
            for px in 0..size {
                let q = (px as f64 + 0.5, py as f64 + 0.5);
                let d = point_segment_distance(q, pa, pb);
                let v = (radius + 0.5 - d).clamp(0.0, 1.0);
                let cell = &mut img[py * size + px];
                *cell = cell.max(v);
            }
        }
    }
    Ok(img)
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 { ((apx * abx + apy * aby) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * abx, a.1 + t * aby);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

const GMVF_MAGIC: &[u8; 4] = b"GMVF";

/// Silhouette container: {magic "GMVF", n_frames u32, h u32, w u32}, then
/// little-endian f64 frames.
pub fn save_silhouettes(path: &Path, frames: &[Vec<f64>], h: usize, w: usize) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(GMVF_MAGIC);
    buf.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for frame in frames {
        if frame.len() != h * w {
            return Err(Error::Validation("silhouette frame size mismatch".into()));
        }
        for v in frame {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_silhouettes(path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != GMVF_MAGIC {
        return Err(Error::Validation(format!("{} is not a GMVF file", path.display())));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * h * w * 8 {
        return Err(Error::Validation("truncated GMVF file".into()));
    }
    let mut frames = Vec::with_capacity(n);
    let mut off = 16;
    for _ in 0..n {
        let mut frame = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            frame.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        frames.push(frame);
    }
    Ok((frames, h, w))
}

/// Write a full labeled dataset: one JSONL pose file per clip plus a
/// manifest. Positive severities are drawn from [12, 30], negatives from
/// [0, 8].
pub fn build_synthetic_dataset(
    out_dir: &Path,
    n_subjects: usize,
    clips_per_subject: usize,
    positive_fraction: f64,
    seed: u64,
    with_video: bool,
) -> Result<Vec<ManifestEntry>> {
    if n_subjects < 2 {
        return Err(Error::Validation("need at least 2 subjects".into()));
    }
    if !(0.0 < positive_fraction && positive_fraction < 1.0) {
        return Err(Error::Validation("positive_fraction must be in (0, 1)".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let n_pos = (n_subjects as f64 * positive_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for s in 0..n_subjects {
        let positive = s < n_pos;
        let cobb = if positive { rng.gen_range(12.0..30.0) } else { rng.gen_range(0.0..8.0) };
        let subject_id = format!("synth{s:04}");
        let subject_seed = rng.gen::<u64>();
        let subject = generate_subject(&subject_id, cobb, subject_seed)?;
        let seq = synthesize_sequence(&subject, clips_per_subject * CLIP_LEN, 30.0)?;
        for c in 0..clips_per_subject {
            let mut clip_frames = seq.frames[c * CLIP_LEN..(c + 1) * CLIP_LEN].to_vec();
            for (i, f) in clip_frames.iter_mut().enumerate() {
                f.frame_index = i;
            }
            let clip_seq = PoseSequence {
                subject_id: subject_id.clone(),
                frames: clip_frames,
                fps: seq.fps,
            };
            let rel = format!("{subject_id}_clip{c}.jsonl");
            save_pose_jsonl(&out_dir.join(&rel), &clip_seq)?;
            if with_video {
                let sil: Result<Vec<Vec<f64>>> = clip_seq
                    .frames
                    .iter()
                    .map(|f| rasterize_silhouette(f, SILHOUETTE_SIZE))
                    .collect();
                let vid_rel = format!("{subject_id}_clip{c}.gmvf");
                save_silhouettes(&out_dir.join(&vid_rel), &sil?, SILHOUETTE_SIZE, SILHOUETTE_SIZE)?;
            }
            entries.push(ManifestEntry {
                pose_path: rel,
                subject_id: subject_id.clone(),
                label: subject.label,
                cobb_angle: Some(cobb),
            });
        }
    }
    save_manifest(&out_dir.join("manifest.json"), &entries)?;
    Ok(entries)
}
