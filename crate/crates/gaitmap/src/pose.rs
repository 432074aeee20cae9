//! 2D pose-keypoint ingestion: JSONL loading, confidence-gated linear
//! interpolation, and segmentation into fixed-length 96-frame clips.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_KEYPOINTS: usize = 17;
pub const CLIP_LEN: usize = 96;
pub const DEFAULT_FPS: f64 = 30.0;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;

/// COCO keypoint order.
pub mod joint {
    pub const NOSE: usize = 0;
    pub const EYE_L: usize = 1;
    pub const EYE_R: usize = 2;
    pub const EAR_L: usize = 3;
    pub const EAR_R: usize = 4;
    pub const SHOULDER_L: usize = 5;
    pub const SHOULDER_R: usize = 6;
    pub const ELBOW_L: usize = 7;
    pub const ELBOW_R: usize = 8;
    pub const WRIST_L: usize = 9;
    pub const WRIST_R: usize = 10;
    pub const HIP_L: usize = 11;
    pub const HIP_R: usize = 12;
    pub const KNEE_L: usize = 13;
    pub const KNEE_R: usize = 14;
    pub const ANKLE_L: usize = 15;
    pub const ANKLE_R: usize = 16;

    pub const NAMES: [&str; 17] = [
        "nose", "eyeL", "eyeR", "earL", "earR", "shoulderL", "shoulderR", "elbowL", "elbowR",
        "wristL", "wristR", "hipL", "hipR", "kneeL", "kneeR", "ankleL", "ankleR",
    ];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Pixels, screen-right positive.
    pub x: f64,
    /// Pixels, screen-down positive.
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct PoseFrame {
    pub frame_index: usize,
    pub keypoints: [Keypoint; N_KEYPOINTS],
}

#[derive(Debug, Clone)]
pub struct PoseSequence {
    pub subject_id: String,
    pub frames: Vec<PoseFrame>,
    pub fps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Cobb-angle screening rule: positive iff >= 10 degrees.
    pub fn from_cobb(cobb: f64) -> Label {
        if cobb >= 10.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

/// A 96-frame unit of classification.
#[derive(Debug, Clone)]
pub struct Clip {
    pub subject_id: String,
    pub frames: Vec<PoseFrame>,
    pub label: Label,
    pub cobb_angle: Option<f64>,
}

impl Clip {
    pub fn new(subject_id: String, frames: Vec<PoseFrame>, label: Label, cobb_angle: Option<f64>) -> Result<Self> {
        if frames.len() != CLIP_LEN {
            return Err(Error::Validation(format!(
                "clip must have {CLIP_LEN} frames, got {}",
                frames.len()
            )));
        }
        if let Some(cobb) = cobb_angle {
            if Label::from_cobb(cobb) != label {
                return Err(Error::Validation(format!(
                    "label {:?} inconsistent with cobb angle {cobb}",
                    label
                )));
            }
        }
        Ok(Clip { subject_id, frames, label, cobb_angle })
    }
}

/// One manifest entry points at a pose file carrying one subject's clip(s).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pose_path: String,
    pub subject_id: String,
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cobb_angle: Option<f64>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    Ok(entries)
}

pub fn save_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let text = serde_json::to_string_pretty(entries)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Deserialize)]
struct FrameRecord {
    frame: usize,
    keypoints: Vec<[f64; 3]>,
}

/// Load a JSONL pose file: one frame per line,
/// `{"frame": int, "keypoints": [[x, y, conf] x 17]}`.
pub fn load_pose_jsonl(path: &Path, subject_id: &str, fps: f64) -> Result<PoseSequence> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut frames: Vec<PoseFrame> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if rec.keypoints.len() != N_KEYPOINTS {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {N_KEYPOINTS} keypoints, got {}", rec.keypoints.len()),
            });
        }
        let mut kps = [Keypoint { x: 0.0, y: 0.0, confidence: 0.0 }; N_KEYPOINTS];
        for (j, kp) in rec.keypoints.iter().enumerate() {
            if !(0.0..=1.0).contains(&kp[2]) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("confidence {} outside [0,1] for keypoint {j}", kp[2]),
                });
            }
            kps[j] = Keypoint { x: kp[0], y: kp[1], confidence: kp[2] };
        }
        frames.push(PoseFrame { frame_index: rec.frame, keypoints: kps });
    }
    frames.sort_by_key(|f| f.frame_index);
    for w in frames.windows(2) {
        if w[0].frame_index == w[1].frame_index {
            return Err(Error::Validation(format!(
                "duplicate frame index {} in {}",
                w[0].frame_index,
                path.display()
            )));
        }
    }
    if fps <= 0.0 {
        return Err(Error::Validation(format!("fps must be positive, got {fps}")));
    }
    Ok(PoseSequence { subject_id: subject_id.to_string(), frames, fps })
}

pub fn save_pose_jsonl(path: &Path, seq: &PoseSequence) -> Result<()> {
    let mut out = String::new();
    for f in &seq.frames {
        let kps: Vec<[f64; 3]> = f.keypoints.iter().map(|k| [k.x, k.y, k.confidence]).collect();
        let rec = serde_json::json!({ "frame": f.frame_index, "keypoints": kps });
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Replace keypoints below the confidence threshold by linear interpolation
/// between the nearest valid frames of the same joint; leading/trailing gaps
/// take the nearest valid value. Interpolated confidences are set to the
/// threshold value.
pub fn interpolate_missing(seq: &PoseSequence, conf_threshold: f64) -> Result<PoseSequence> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Validation(format!(
            "conf_threshold {conf_threshold} outside [0,1]"
        )));
    }
    let n = seq.frames.len();
    let mut out = seq.clone();
    for j in 0..N_KEYPOINTS {
        let valid: Vec<usize> = (0..n)
            .filter(|&t| seq.frames[t].keypoints[j].confidence >= conf_threshold)
            .collect();
        if valid.len() == n {
            continue;
        }
        if valid.is_empty() {
            return Err(Error::Data(format!(
                "joint {} has no observation above threshold {conf_threshold} in the whole sequence",
                joint::NAMES[j]
            )));
        }
        for t in 0..n {
            if seq.frames[t].keypoints[j].confidence >= conf_threshold {
                continue;
            }
            // Nearest valid neighbors on each side.
            let prev = valid.iter().rev().find(|&&v| v < t).copied();
            let next = valid.iter().find(|&&v| v > t).copied();
            let (x, y) = match (prev, next) {
                (Some(p), Some(q)) => {
                    let a = &seq.frames[p].keypoints[j];
                    let b = &seq.frames[q].keypoints[j];
                    let w = (t - p) as f64 / (q - p) as f64;
                    (a.x + w * (b.x - a.x), a.y + w * (b.y - a.y))
                }
                (Some(p), None) => (seq.frames[p].keypoints[j].x, seq.frames[p].keypoints[j].y),
                (None, Some(q)) => (seq.frames[q].keypoints[j].x, seq.frames[q].keypoints[j].y),
                (None, None) => unreachable!(),
            };
            out.frames[t].keypoints[j] = Keypoint { x, y, confidence: conf_threshold };
        }
    }
    Ok(out)
}

/// Cut the sequence into floor(len/96) non-overlapping 96-frame clips
/// starting at frame 0; the remainder is discarded.
pub fn segment_clips(seq: &PoseSequence, label: Label, cobb_angle: Option<f64>) -> Result<Vec<Clip>> {
    let n_clips = seq.frames.len() / CLIP_LEN;
    let mut clips = Vec::with_capacity(n_clips);
    for c in 0..n_clips {
        let frames = seq.frames[c * CLIP_LEN..(c + 1) * CLIP_LEN].to_vec();
        clips.push(Clip::new(seq.subject_id.clone(), frames, label, cobb_angle)?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(idx: usize, x: f64, conf: f64) -> PoseFrame {
        PoseFrame {
            frame_index: idx,
            keypoints: [Keypoint { x, y: 1.0, confidence: conf }; N_KEYPOINTS],
        }
    }

    fn seq_of(frames: Vec<PoseFrame>) -> PoseSequence {
        PoseSequence { subject_id: "s0".into(), frames, fps: 30.0 }
    }

    fn write_jsonl(dir: &Path, lines: &[String]) -> std::path::PathBuf {
        let p = dir.join("pose.jsonl");
        std::fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    fn valid_line(frame: usize, n_kp: usize) -> String {
        let kps: Vec<String> = (0..n_kp).map(|j| format!("[{}.0, 2.0, 1.0]", j)).collect();
        format!("{{\"frame\": {frame}, \"keypoints\": [{}]}}", kps.join(","))
    }

    #[test]
    fn load_minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_jsonl(dir.path(), &[valid_line(0, 17), valid_line(1, 17)]);
        let seq = load_pose_jsonl(&p, "s1", 30.0).unwrap();
        assert_eq!(seq.frames.len(), 2);
        assert_eq!(seq.frames[1].keypoints[3].x, 3.0);
    }

    #[test]
    fn load_rejects_wrong_keypoint_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_jsonl(dir.path(), &[valid_line(0, 17), valid_line(1, 16)]);
        let err = load_pose_jsonl(&p, "s1", 30.0).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn load_sorts_out_of_order_frames() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_jsonl(dir.path(), &[valid_line(3, 17), valid_line(1, 17), valid_line(2, 17)]);
        let seq = load_pose_jsonl(&p, "s1", 30.0).unwrap();
        let idx: Vec<usize> = seq.frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
    }

    #[test]
    fn load_rejects_duplicate_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_jsonl(dir.path(), &[valid_line(1, 17), valid_line(1, 17)]);
        assert!(load_pose_jsonl(&p, "s1", 30.0).is_err());
    }

    #[test]
    fn interpolate_identity_when_all_confident() {
        let seq = seq_of(vec![frame(0, 1.0, 1.0), frame(1, 2.0, 1.0)]);
        let out = interpolate_missing(&seq, 0.3).unwrap();
        assert_eq!(out.frames[0].keypoints[0], seq.frames[0].keypoints[0]);
        assert_eq!(out.frames[1].keypoints[5], seq.frames[1].keypoints[5]);
    }

    #[test]
    fn interpolate_midpoint() {
        let seq = seq_of(vec![frame(0, 0.0, 1.0), frame(1, 100.0, 0.1), frame(2, 4.0, 1.0)]);
        let out = interpolate_missing(&seq, 0.3).unwrap();
        assert_eq!(out.frames[1].keypoints[0].x, 2.0);
        assert_eq!(out.frames[1].keypoints[0].confidence, 0.3);
    }

    #[test]
    fn interpolate_leading_gap_nearest_fill() {
        let seq = seq_of(vec![frame(0, 1.0, 0.0), frame(1, 2.0, 0.0), frame(2, 7.0, 1.0)]);
        let out = interpolate_missing(&seq, 0.3).unwrap();
        assert_eq!(out.frames[0].keypoints[0].x, 7.0);
        assert_eq!(out.frames[1].keypoints[0].x, 7.0);
    }

    #[test]
    fn interpolate_rejects_never_seen_joint() {
        let mut f0 = frame(0, 1.0, 1.0);
        let mut f1 = frame(1, 2.0, 1.0);
        f0.keypoints[joint::WRIST_L].confidence = 0.0;
        f1.keypoints[joint::WRIST_L].confidence = 0.0;
        let seq = seq_of(vec![f0, f1]);
        let err = interpolate_missing(&seq, 0.3).unwrap_err();
        assert!(err.to_string().contains("wristL"), "{err}");
    }

    #[test]
    fn segment_counts() {
        let mk = |n: usize| seq_of((0..n).map(|i| frame(i, i as f64, 1.0)).collect());
        assert_eq!(segment_clips(&mk(200), Label::Negative, None).unwrap().len(), 2);
        assert_eq!(segment_clips(&mk(95), Label::Negative, None).unwrap().len(), 0);
        assert_eq!(segment_clips(&mk(96), Label::Negative, None).unwrap().len(), 1);
        let clips = segment_clips(&mk(200), Label::Negative, None).unwrap();
        assert_eq!(clips[0].frames[0].frame_index, 0);
        assert_eq!(clips[0].frames[95].frame_index, 95);
        assert_eq!(clips[1].frames[0].frame_index, 96);
    }

    #[test]
    fn clip_label_must_match_cobb() {
        let frames: Vec<PoseFrame> = (0..96).map(|i| frame(i, 0.0, 1.0)).collect();
        assert!(Clip::new("s".into(), frames.clone(), Label::Negative, Some(15.0)).is_err());
        assert!(Clip::new("s".into(), frames, Label::Positive, Some(15.0)).is_ok());
    }

    proptest! {
        #[test]
        fn interpolate_is_idempotent(confs in proptest::collection::vec(0.0f64..1.0, 5..20)) {
            // Guarantee at least one valid observation per joint.
            let mut frames: Vec<PoseFrame> = confs
                .iter()
                .enumerate()
                .map(|(i, &c)| frame(i, i as f64 * 1.7, c))
                .collect();
            for kp in frames[0].keypoints.iter_mut() {
                kp.confidence = 1.0;
            }
            let seq = seq_of(frames);
            let once = interpolate_missing(&seq, 0.3).unwrap();
            let twice = interpolate_missing(&once, 0.3).unwrap();
            for (a, b) in once.frames.iter().zip(&twice.frames) {
                for (ka, kb) in a.keypoints.iter().zip(&b.keypoints) {
                    prop_assert_eq!(ka, kb);
                }
            }
        }

        #[test]
        fn segment_clips_disjoint_prefix(n in 0usize..400) {
            let seq = seq_of((0..n).map(|i| frame(i, 0.0, 1.0)).collect());
            let clips = segment_clips(&seq, Label::Negative, None).unwrap();
            let mut expected = 0usize;
            for clip in &clips {
                for f in &clip.frames {
                    prop_assert_eq!(f.frame_index, expected);
                    expected += 1;
                }
            }
            prop_assert_eq!(clips.len(), n / CLIP_LEN);
        }
    }
}
