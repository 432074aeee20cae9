//! Subject-disjoint splitting, dataset preparation, the Adam training loop,
//! and evaluation metrics.

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{self, KnowledgeMap, NormStats};
use crate::model::{ClipInput, Modality, Model, TextProvider};
use crate::params::Adam;
use crate::pose::{self, Label, ManifestEntry};
use crate::synth::{self, SILHOUETTE_SIZE};
use crate::tensor::Graph;

/// One clip with everything a forward pass needs, before standardization.
pub struct Sample {
    pub subject_id: String,
    pub label: Label,
    /// Raw (unstandardized) knowledge map.
    pub map: KnowledgeMap,
    pub video: Option<Vec<Vec<f64>>>,
}

/// Load every manifest entry into per-clip samples. Pose paths resolve
/// relative to the manifest's directory. Silhouettes are rasterized from the
/// poses only when `need_video` is set.
pub fn load_samples(
    manifest_path: &Path,
    fps: f64,
    conf_threshold: f64,
    need_video: bool,
) -> Result<Vec<Sample>> {
    let entries = pose::load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_samples_from_entries(&entries, base, fps, conf_threshold, need_video)
}

pub fn load_samples_from_entries(
    entries: &[ManifestEntry],
    base: &Path,
    fps: f64,
    conf_threshold: f64,
    need_video: bool,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for e in entries {
        let seq = pose::load_pose_jsonl(&base.join(&e.pose_path), &e.subject_id, fps)?;
        let seq = pose::interpolate_missing(&seq, conf_threshold)?;
        let clips = pose::segment_clips(&seq, e.label, e.cobb_angle)?;
        if clips.is_empty() {
            return Err(Error::Data(format!(
                "{} has {} frames, fewer than one full clip",
                e.pose_path,
                seq.frames.len()
            )));
        }
        for clip in clips {
            let map = knowledge::extract(&clip, fps)?;
            let video = if need_video {
                Some(
                    clip.frames
                        .iter()
                        .map(|f| synth::rasterize_silhouette(f, SILHOUETTE_SIZE))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            samples.push(Sample { subject_id: e.subject_id.clone(), label: e.label, map, video });
        }
    }
    Ok(samples)
}

/// Stratified subject-level split: subjects are sorted, shuffled with the
/// seed within each label stratum, and the first `train_fraction` of each
/// stratum becomes the training side. No subject appears on both sides.
pub fn split_subject_disjoint(
    samples: &[Sample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Validation(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    // Subject -> label; a subject with mixed labels is a data error.
    let mut by_subject: IndexMap<&str, Label> = IndexMap::new();
    for s in samples {
        match by_subject.get(s.subject_id.as_str()) {
            None => {
                by_subject.insert(&s.subject_id, s.label);
            }
            Some(&l) if l != s.label => {
                return Err(Error::Data(format!("subject {} has clips with both labels", s.subject_id)));
            }
            _ => {}
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_subjects: BTreeSet<&str> = BTreeSet::new();
    for stratum in [Label::Negative, Label::Positive] {
        let mut subjects: Vec<&str> =
            by_subject.iter().filter(|(_, &l)| l == stratum).map(|(s, _)| *s).collect();
        subjects.sort_unstable();
        subjects.shuffle(&mut rng);
        let n_train = (subjects.len() as f64 * train_fraction).round() as usize;
        train_subjects.extend(&subjects[..n_train.min(subjects.len())]);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if train_subjects.contains(s.subject_id.as_str()) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    Ok((train, test))
}

pub fn subjects_of<'a>(samples: &'a [Sample], idx: &[usize]) -> BTreeSet<&'a str> {
    idx.iter().map(|&i| samples[i].subject_id.as_str()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    Uniform,
    /// Weight each class by n_total / (n_classes * n_class).
    InverseFrequency,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weighting: ClassWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            weighting: ClassWeighting::InverseFrequency,
        }
    }
}

pub fn class_weights(labels: &[Label], weighting: ClassWeighting) -> [f64; 2] {
    match weighting {
        ClassWeighting::Uniform => [1.0, 1.0],
        ClassWeighting::InverseFrequency => {
            let n_pos = labels.iter().filter(|&&l| l == Label::Positive).count();
            let n_neg = labels.len() - n_pos;
            let total = labels.len() as f64;
            let w = |n: usize| if n == 0 { 0.0 } else { total / (2.0 * n as f64) };
            [w(n_neg), w(n_pos)]
        }
    }
}

fn label_index(l: Label) -> usize {
    match l {
        Label::Negative => 0,
        Label::Positive => 1,
    }
}

/// Prepared (standardized) inputs; maps are standardized with training-split
/// statistics only.
pub struct Prepared {
    pub inputs: Vec<ClipInput>,
    pub labels: Vec<Label>,
    pub stats: NormStats,
}

/// Standardize `idx` samples with stats fitted on `fit_idx` (pass the
/// training indices for both sides of a split).
pub fn prepare(
    samples: &[Sample],
    idx: &[usize],
    fit_idx: &[usize],
    model_modalities: &[Modality],
    prompts: &[String],
) -> Result<Prepared> {
    let fit_maps: Vec<KnowledgeMap> = fit_idx.iter().map(|&i| samples[i].map.clone()).collect();
    let stats = knowledge::fit_norm_stats(&fit_maps)?;
    prepare_with_stats(samples, idx, &stats, model_modalities, prompts)
}

pub fn prepare_with_stats(
    samples: &[Sample],
    idx: &[usize],
    stats: &NormStats,
    model_modalities: &[Modality],
    prompts: &[String],
) -> Result<Prepared> {
    let need_video = model_modalities.contains(&Modality::Video);
    let mut inputs = Vec::with_capacity(idx.len());
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &samples[i];
        let video = if need_video {
            Some(s.video.clone().ok_or_else(|| {
                Error::Data(format!("sample for subject {} has no video frames", s.subject_id))
            })?)
        } else {
            None
        };
        inputs.push(ClipInput {
            map: Some(knowledge::apply_norm(&s.map, stats)),
            video,
            prompts: prompts.to_vec(),
        });
        labels.push(s.label);
    }
    Ok(Prepared { inputs, labels, stats: stats.clone() })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    /// Weighted mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Running training accuracy per epoch (predictions taken during the
    /// epoch's own forward passes).
    pub epoch_train_accuracy: Vec<f64>,
}

impl TrainRecord {
    /// RFC-4180 loss-history rows: epoch, loss, train_acc.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_acc\r\n");
        for (e, (loss, acc)) in self.epoch_losses.iter().zip(&self.epoch_train_accuracy).enumerate() {
            s.push_str(&format!("{e},{loss},{acc}\r\n"));
        }
        s
    }
}

/// Minibatch Adam over per-clip forward passes. The shuffle order, weight
/// initialization, and arithmetic are all deterministic in the seeds.
pub fn train(
    model: &mut Model,
    data: &Prepared,
    provider: &TextProvider,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    if data.inputs.is_empty() {
        return Err(Error::Validation("cannot train on an empty split".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Validation("batch size must be >= 1".into()));
    }
    let weights = class_weights(&data.labels, cfg.weighting);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.inputs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut record = TrainRecord {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        epoch_train_accuracy: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        let mut epoch_correct = 0usize;
        let mut epoch_seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let batch_weight: f64 = batch.iter().map(|&i| weights[label_index(data.labels[i])]).sum();
            if batch_weight == 0.0 {
                continue;
            }
            let mut grads: IndexMap<String, Vec<f64>> = IndexMap::new();
            for &i in batch {
                let w = weights[label_index(data.labels[i])];
                let mut g = Graph::new();
                let out = model
                    .forward(&mut g, &data.inputs[i], provider)
                    .map_err(|e| Error::Numeric(format!("forward failed at step {step}: {e}")))?;
                let y = label_index(data.labels[i]);
                let loss = g.cross_entropy(out.logits, &[y], &[1.0, 1.0])?;
                let nll = g.data(loss)[0];
                if !nll.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {step}")));
                }
                epoch_loss += w * nll;
                epoch_weight += w;
                let (pred, _) = crate::model::predict_from_logits(g.data(out.logits));
                if pred == data.labels[i] {
                    epoch_correct += 1;
                }
                epoch_seen += 1;
                g.backward(loss)
                    .map_err(|e| Error::Numeric(format!("backward failed at step {step}: {e}")))?;
                let scale = w / batch_weight;
                for (name, grad) in model.params.collect_grads(&g) {
                    let entry = grads.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                    for (a, b) in entry.iter_mut().zip(&grad) {
                        *a += scale * b;
                    }
                }
            }
            opt.step(&mut model.params, &grads)?;
        }
        record.epoch_losses.push(if epoch_weight > 0.0 { epoch_loss / epoch_weight } else { 0.0 });
        record
            .epoch_train_accuracy
            .push(if epoch_seen > 0 { epoch_correct as f64 / epoch_seen as f64 } else { 0.0 });
    }
    Ok(record)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub accuracy: f64,
    pub negative: ClassMetrics,
    pub positive: ClassMetrics,
    pub macro_f1: f64,
}

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> MetricsReport {
    let n = tp + fp + tn + fn_;
    let pos = {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        ClassMetrics { precision, recall, f1: f1_score(precision, recall) }
    };
    let neg = {
        let precision = ratio(tn, tn + fn_);
        let recall = ratio(tn, tn + fp);
        ClassMetrics { precision, recall, f1: f1_score(precision, recall) }
    };
    MetricsReport {
        n,
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fn_,
        accuracy: ratio(tp + tn, n),
        macro_f1: 0.5 * (pos.f1 + neg.f1),
        negative: neg,
        positive: pos,
    }
}

pub fn evaluate(model: &Model, data: &Prepared, provider: &TextProvider) -> Result<MetricsReport> {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (input, &label) in data.inputs.iter().zip(&data.labels) {
        let mut g = Graph::new();
        let out = model.forward(&mut g, input, provider)?;
        let (pred, _) = crate::model::predict_from_logits(g.data(out.logits));
        match (label, pred) {
            (Label::Positive, Label::Positive) => tp += 1,
            (Label::Negative, Label::Positive) => fp += 1,
            (Label::Negative, Label::Negative) => tn += 1,
            (Label::Positive, Label::Negative) => fn_ += 1,
        }
    }
    Ok(metrics_from_counts(tp, fp, tn, fn_))
}
