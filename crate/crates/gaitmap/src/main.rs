//! Command-line surface: simulate, extract, split, train, eval, explain.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gaitmap::error::{Error, Result};
use gaitmap::knowledge::{self, NormStats};
use gaitmap::model::{
    FusionVariant, Modality, Model, ModelConfig, RopeMode, TextProvider, DEFAULT_PROMPTS,
};
use gaitmap::params::ParamStore;
use gaitmap::pose;
use gaitmap::synth;
use gaitmap::tensor::Graph;
use gaitmap::train::{
    self, ClassWeighting, MetricsReport, Prepared, Sample, TrainConfig,
};
use gaitmap::explain;

#[derive(Parser)]
#[command(name = "gaitmap", version, about = "Gait-based scoliosis screening pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Cat,
    CatAtt,
    CatLatent,
}

impl From<VariantArg> for FusionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Cat => FusionVariant::Cat,
            VariantArg::CatAtt => FusionVariant::CatAtt,
            VariantArg::CatLatent => FusionVariant::CatLatent,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RopeArg {
    Aligned,
    NonAligned,
}

impl From<RopeArg> for RopeMode {
    fn from(v: RopeArg) -> Self {
        match v {
            RopeArg::Aligned => RopeMode::Aligned,
            RopeArg::NonAligned => RopeMode::NonAligned,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    KnowledgeMap,
    Video,
    Text,
}

impl From<ModalityArg> for Modality {
    fn from(v: ModalityArg) -> Self {
        match v {
            ModalityArg::KnowledgeMap => Modality::KnowledgeMap,
            ModalityArg::Video => Modality::Video,
            ModalityArg::Text => Modality::Text,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightingArg {
    Uniform,
    InverseFrequency,
}

impl From<WeightingArg> for ClassWeighting {
    fn from(v: WeightingArg) -> Self {
        match v {
            WeightingArg::Uniform => ClassWeighting::Uniform,
            WeightingArg::InverseFrequency => ClassWeighting::InverseFrequency,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pose dataset with a manifest.
    Simulate(SimulateArgs),
    /// Extract knowledge maps from a manifest's pose files.
    Extract(ExtractArgs),
    /// Split a manifest into subject-disjoint train/test manifests.
    Split(SplitArgs),
    /// Train a screening model.
    Train(TrainArgs),
    /// Evaluate a trained model on a manifest.
    Eval(EvalArgs),
    /// Produce attention-remapping reports for clips in a manifest.
    Explain(ExplainArgs),
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 3)]
    clips: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write rasterized silhouette (GMVF) files.
    #[arg(long, default_value_t = false)]
    with_video: bool,
}

#[derive(Args, Serialize)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, default_value_t = 0.3)]
    conf_threshold: f64,
}

#[derive(Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [ModalityArg::KnowledgeMap, ModalityArg::Video, ModalityArg::Text])]
    #[serde(skip)]
    modalities: Vec<ModalityArg>,
    #[arg(long, value_enum, default_value = "cat-latent")]
    #[serde(skip)]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "aligned")]
    #[serde(skip)]
    rope: RopeArg,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, value_enum, default_value = "inverse-frequency")]
    #[serde(skip)]
    weighting: WeightingArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[arg(long, default_value_t = 0.3)]
    conf_threshold: f64,
    /// Clinical text prompt; repeatable. Defaults to the built-in set.
    #[arg(long = "prompt")]
    prompts: Vec<String>,
    /// JSON file mapping prompts to precomputed 384-wide embeddings.
    #[arg(long)]
    provider_file: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Acknowledge train/eval subject overlap; the report is watermarked.
    #[arg(long, default_value_t = false)]
    allow_leakage: bool,
    #[arg(long)]
    provider_file: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ExplainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = false)]
    allow_leakage: bool,
    #[arg(long)]
    provider_file: Option<PathBuf>,
}

/// Everything needed to reload and reuse a trained model.
#[derive(Serialize, Deserialize)]
struct ModelDirConfig {
    model: ModelConfig,
    train: TrainConfig,
    train_subjects: Vec<String>,
    prompts: Vec<String>,
    fps: f64,
    conf_threshold: f64,
}

#[derive(Serialize)]
struct EvalOutput {
    metrics: MetricsReport,
    n_clips: usize,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    leakage_acknowledged: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    synth::build_synthetic_dataset(&a.out, a.subjects, a.clips, a.positive_fraction, a.seed, a.with_video)?;
    write_json(&a.out.join("run_config.json"), &a)?;
    println!("{}", a.out.join("manifest.json").display());
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let entries = pose::load_manifest(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or_else(|| Path::new("."));
    for e in &entries {
        let seq = pose::load_pose_jsonl(&base.join(&e.pose_path), &e.subject_id, a.fps)?;
        let seq = pose::interpolate_missing(&seq, a.conf_threshold)?;
        let clips = pose::segment_clips(&seq, e.label, e.cobb_angle)?;
        let stem = Path::new(&e.pose_path)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("bad pose path {}", e.pose_path)))?
            .to_string();
        for (c, clip) in clips.iter().enumerate() {
            let map = knowledge::extract(clip, a.fps)?;
            knowledge::save_map(&a.out.join(format!("{stem}_{c}.gmkm")), &map)?;
        }
    }
    knowledge::save_schema_sidecar(&a.out.join("schema.json"))?;
    write_json(&a.out.join("run_config.json"), &a)?;
    println!("{} entries extracted to {}", entries.len(), a.out.display());
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let entries = pose::load_manifest(&a.manifest)?;
    // Subject-level stratified shuffle mirroring the sample splitter.
    let pseudo: Vec<Sample> = entries
        .iter()
        .map(|e| Sample {
            subject_id: e.subject_id.clone(),
            label: e.label,
            map: knowledge::KnowledgeMap { values: vec![], t: 0, fps: 0.0 },
            video: None,
        })
        .collect();
    let (train_idx, test_idx) = train::split_subject_disjoint(&pseudo, a.train_fraction, a.seed)?;
    let base = a
        .manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .canonicalize()?;
    let reroot = |idx: &[usize]| -> Vec<pose::ManifestEntry> {
        idx.iter()
            .map(|&i| {
                let mut e = entries[i].clone();
                // Absolute pose paths keep the new manifests valid from any
                // directory.
                e.pose_path = base.join(&e.pose_path).to_string_lossy().into_owned();
                e
            })
            .collect()
    };
    pose::save_manifest(&a.out.join("train_manifest.json"), &reroot(&train_idx))?;
    pose::save_manifest(&a.out.join("test_manifest.json"), &reroot(&test_idx))?;
    write_json(&a.out.join("run_config.json"), &a)?;
    println!(
        "train {} clips / test {} clips written to {}",
        train_idx.len(),
        test_idx.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_prompts(prompts: &[String], modalities: &[Modality]) -> Vec<String> {
    if !modalities.contains(&Modality::Text) {
        Vec::new()
    } else if prompts.is_empty() {
        DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect()
    } else {
        prompts.to_vec()
    }
}

fn make_provider(path: &Option<PathBuf>) -> Result<TextProvider> {
    match path {
        Some(p) => TextProvider::from_file(p),
        None => Ok(TextProvider::Fallback),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&a.model_dir)?;
    let modalities: Vec<Modality> = a.modalities.iter().map(|&m| m.into()).collect();
    let model_cfg = ModelConfig::with_defaults(modalities.clone(), a.variant.into(), a.rope.into());
    let train_cfg = TrainConfig {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        weighting: a.weighting.into(),
    };
    let prompts = resolve_prompts(&a.prompts, &modalities);
    let provider = make_provider(&a.provider_file)?;
    let need_video = modalities.contains(&Modality::Video);
    let samples = train::load_samples(&a.manifest, a.fps, a.conf_threshold, need_video)?;
    let all: Vec<usize> = (0..samples.len()).collect();
    let data = train::prepare(&samples, &all, &all, &modalities, &prompts)?;
    let mut model = Model::new(model_cfg.clone(), a.seed)?;
    let record = train::train(&mut model, &data, &provider, &train_cfg)?;

    model.params.save(&a.model_dir.join("model.gmlb"))?;
    let train_subjects: BTreeSet<String> =
        samples.iter().map(|s| s.subject_id.clone()).collect();
    write_json(
        &a.model_dir.join("config.json"),
        &ModelDirConfig {
            model: model_cfg,
            train: train_cfg,
            train_subjects: train_subjects.into_iter().collect(),
            prompts,
            fps: a.fps,
            conf_threshold: a.conf_threshold,
        },
    )?;
    write_json(&a.model_dir.join("norm_stats.json"), &data.stats)?;
    std::fs::write(a.model_dir.join("loss.csv"), record.to_csv())?;
    write_json(&a.model_dir.join("run_config.json"), &a)?;
    println!(
        "trained {} epochs on {} clips; final loss {:.4}; model at {}",
        a.epochs,
        data.inputs.len(),
        record.epoch_losses.last().copied().unwrap_or(f64::NAN),
        a.model_dir.display()
    );
    Ok(())
}

struct LoadedModel {
    model: Model,
    cfg: ModelDirConfig,
    stats: NormStats,
}

fn load_model_dir(dir: &Path) -> Result<LoadedModel> {
    let cfg: ModelDirConfig =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let stats: NormStats =
        serde_json::from_str(&std::fs::read_to_string(dir.join("norm_stats.json"))?)?;
    let params = ParamStore::load(&dir.join("model.gmlb"))?;
    let model = Model::from_parts(cfg.model.clone(), params)?;
    Ok(LoadedModel { model, cfg, stats })
}

/// Enforce the subject-disjointness rule between the model's training
/// subjects and an evaluation manifest.
fn leakage_guard(train_subjects: &[String], samples: &[Sample], allow: bool) -> Result<bool> {
    let train: BTreeSet<&str> = train_subjects.iter().map(|s| s.as_str()).collect();
    let overlap: BTreeSet<&str> = samples
        .iter()
        .map(|s| s.subject_id.as_str())
        .filter(|s| train.contains(s))
        .collect();
    if overlap.is_empty() {
        return Ok(false);
    }
    let names: Vec<&str> = overlap.into_iter().collect();
    if allow {
        eprintln!(
            "warning: evaluating on {} subject(s) seen in training ({}); report is watermarked",
            names.len(),
            names.join(", ")
        );
        Ok(true)
    } else {
        Err(Error::Validation(format!(
            "subject-disjointness violated: {} also trained this model (pass --allow-leakage to override)",
            names.join(", ")
        )))
    }
}

fn prepare_eval(loaded: &LoadedModel, manifest: &Path, allow_leakage: bool) -> Result<(Prepared, Vec<Sample>, bool)> {
    let need_video = loaded.cfg.model.fusion.modalities.contains(&Modality::Video);
    let samples =
        train::load_samples(manifest, loaded.cfg.fps, loaded.cfg.conf_threshold, need_video)?;
    let leaked = leakage_guard(&loaded.cfg.train_subjects, &samples, allow_leakage)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let data = train::prepare_with_stats(
        &samples,
        &idx,
        &loaded.stats,
        &loaded.cfg.model.fusion.modalities,
        &loaded.cfg.prompts,
    )?;
    Ok((data, samples, leaked))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let loaded = load_model_dir(&a.model_dir)?;
    let provider = make_provider(&a.provider_file)?;
    let (data, _, leaked) = prepare_eval(&loaded, &a.manifest, a.allow_leakage)?;
    let metrics = train::evaluate(&loaded.model, &data, &provider)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let out = EvalOutput { n_clips: data.inputs.len(), metrics, leakage_acknowledged: leaked };
    write_json(&a.out, &out)?;
    println!(
        "accuracy {:.4}, macro F1 {:.4} on {} clips -> {}",
        out.metrics.accuracy,
        out.metrics.macro_f1,
        out.n_clips,
        a.out.display()
    );
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let loaded = load_model_dir(&a.model_dir)?;
    if loaded.cfg.model.fusion.variant != FusionVariant::CatLatent {
        return Err(Error::Validation(
            "explain requires a cat-latent model (other variants have no latent attention)".into(),
        ));
    }
    let provider = make_provider(&a.provider_file)?;
    let (data, samples, leaked) = prepare_eval(&loaded, &a.manifest, a.allow_leakage)?;
    std::fs::create_dir_all(&a.out)?;
    let patch_w = loaded
        .model
        .params
        .get("map.patch.w")
        .ok_or_else(|| Error::Validation("model has no knowledge-map patch embedding".into()))?
        .data
        .clone();
    let d = loaded.cfg.model.encoder.d_model;
    let mut clip_counter: std::collections::HashMap<String, usize> = Default::default();
    for (i, input) in data.inputs.iter().enumerate() {
        let subject = &samples[i].subject_id;
        let c = clip_counter.entry(subject.clone()).or_insert(0);
        let stem = format!("{subject}_clip{c}");
        *c += 1;
        let mut g = Graph::new();
        let out = loaded.model.forward(&mut g, input, &provider)?;
        let attention = out.pool_attention.ok_or_else(|| {
            Error::Validation("model produced no latent attention to remap".into())
        })?;
        let dims = out.attention_dims.unwrap();
        let map = input.map.as_ref().ok_or_else(|| {
            Error::Validation("explain requires the knowledge-map modality".into())
        })?;
        let (heat, per_latent) =
            explain::remap_attention(&attention, dims, &out.token_meta, map, &patch_w, d)?;
        let top = explain::top_features(&heat, a.top_k, loaded.cfg.model.encoder.patch_frames)?;
        let (prediction, p_pos) = gaitmap::model::predict_from_logits(g.data(out.logits));
        let report = explain::ExplainReport {
            heat,
            top_features: top,
            prediction,
            probability_positive: p_pos,
            per_latent_relevance: per_latent,
            leakage_acknowledged: leaked,
        };
        explain::render_report(
            &report,
            &a.out.join(format!("{stem}.json")),
            &a.out.join(format!("{stem}.csv")),
            &a.out.join(format!("{stem}.svg")),
        )?;
    }
    write_json(&a.out.join("run_config.json"), &a)?;
    println!("{} reports written to {}", data.inputs.len(), a.out.display());
    Ok(())
}
