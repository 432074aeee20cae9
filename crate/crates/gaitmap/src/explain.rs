//! Post-hoc interpretation: remap latent-pooling attention onto the
//! knowledge map, rank features per clinical domain, and render JSON / CSV /
//! SVG reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::{Domain, FeatureSchema, KnowledgeMap, N_FEATURES};
use crate::model::{Modality, TokenMeta};
use crate::pose::{Label, CLIP_LEN};

/// A probability distribution over (time, feature) cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatMap {
    pub t: usize,
    pub f: usize,
    /// Row-major, `t` rows of `f` columns; non-negative, sums to 1.
    pub values: Vec<f64>,
    pub schema_version: u32,
}

impl HeatMap {
    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.f + f]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedFeature {
    pub name: String,
    pub column: usize,
    /// Frame window [start, end) holding the feature's peak heat.
    pub peak_window: (usize, usize),
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainRanking {
    pub domain: Domain,
    pub features: Vec<RankedFeature>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainReport {
    pub heat: HeatMap,
    pub top_features: Vec<DomainRanking>,
    pub prediction: Label,
    pub probability_positive: f64,
    /// Per-latent relevance over the knowledge-map tokens (K rows), exported
    /// for inspection; the heat uses the mean.
    pub per_latent_relevance: Vec<Vec<f64>>,
    /// Set when the report was produced under an acknowledged subject
    /// overlap between train and eval data.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub leakage_acknowledged: bool,
}

/// Mean attention each latent (and overall) assigns to the knowledge-map
/// tokens, renormalized over those tokens.
///
/// `attention` is flattened heads x K x N; `meta` identifies the N fused
/// tokens. `patch_w` is the [patch_frames*238, d] map patch-embedding matrix
/// whose per-cell row norms resolve the feature axis; `map` is the
/// standardized input.
pub fn remap_attention(
    attention: &[f64],
    dims: (usize, usize, usize),
    meta: &[TokenMeta],
    map: &KnowledgeMap,
    patch_w: &[f64],
    d_model: usize,
) -> Result<(HeatMap, Vec<Vec<f64>>)> {
    let (heads, k, n) = dims;
    if attention.len() != heads * k * n || meta.len() != n {
        return Err(Error::Shape(format!(
            "attention {} / meta {} inconsistent with dims {dims:?}",
            attention.len(),
            meta.len()
        )));
    }
    let km_tokens: Vec<usize> = meta
        .iter()
        .enumerate()
        .filter(|(_, m)| m.modality == Modality::KnowledgeMap)
        .map(|(i, _)| i)
        .collect();
    if km_tokens.is_empty() {
        return Err(Error::Validation(
            "explain requires the knowledge-map modality in the fusion config".into(),
        ));
    }
    if map.t != CLIP_LEN || map.t % km_tokens.len() != 0 {
        return Err(Error::Shape(format!(
            "{} knowledge-map tokens cannot tile {} frames",
            km_tokens.len(),
            map.t
        )));
    }
    let patch_frames = map.t / km_tokens.len();
    if patch_w.len() != patch_frames * N_FEATURES * d_model {
        return Err(Error::Shape(format!(
            "patch weight matrix has {} values, expected {}",
            patch_w.len(),
            patch_frames * N_FEATURES * d_model
        )));
    }

    // Relevance per km token: mean over heads and latents, renormalized.
    let token_mass = |row: &dyn Fn(usize) -> f64| -> Vec<f64> {
        km_tokens.iter().map(|&j| row(j)).collect()
    };
    let mut relevance = vec![0.0; km_tokens.len()];
    let mut per_latent = vec![vec![0.0; km_tokens.len()]; k];
    for h in 0..heads {
        for q in 0..k {
            let row = &attention[(h * k + q) * n..(h * k + q + 1) * n];
            let masses = token_mass(&|j| row[j]);
            for (slot, m) in per_latent[q].iter_mut().zip(&masses) {
                *slot += m / heads as f64;
            }
            for (slot, m) in relevance.iter_mut().zip(&masses) {
                *slot += m;
            }
        }
    }
    let renorm = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        } else {
            let u = 1.0 / v.len() as f64;
            v.iter_mut().for_each(|x| *x = u);
        }
    };
    renorm(&mut relevance);
    for row in &mut per_latent {
        renorm(row);
    }

    // Per-cell saliency of the linear patch embedding: |input| times the L2
    // norm of the weights attached to that cell.
    let mut heat = vec![0.0; map.t * N_FEATURES];
    for (tok, &r) in relevance.iter().enumerate() {
        let t0 = tok * patch_frames;
        let mut weights = vec![0.0; patch_frames * N_FEATURES];
        let mut total = 0.0;
        for (cell, w) in weights.iter_mut().enumerate() {
            let wrow = &patch_w[cell * d_model..(cell + 1) * d_model];
            let wnorm = wrow.iter().map(|x| x * x).sum::<f64>().sqrt();
            let (dt, f) = (cell / N_FEATURES, cell % N_FEATURES);
            *w = map.get(t0 + dt, f).abs() * wnorm;
            total += *w;
        }
        if total > 0.0 {
            for (cell, w) in weights.iter().enumerate() {
                let (dt, f) = (cell / N_FEATURES, cell % N_FEATURES);
                heat[(t0 + dt) * N_FEATURES + f] = r * w / total;
            }
        } else {
            // Degenerate all-zero token: spread its relevance uniformly.
            let u = r / (patch_frames * N_FEATURES) as f64;
            for cell in 0..patch_frames * N_FEATURES {
                let (dt, f) = (cell / N_FEATURES, cell % N_FEATURES);
                heat[(t0 + dt) * N_FEATURES + f] = u;
            }
        }
    }
    Ok((
        HeatMap {
            t: map.t,
            f: N_FEATURES,
            values: heat,
            schema_version: FeatureSchema::current().version,
        },
        per_latent,
    ))
}

/// Rank features inside each domain by column-summed heat; ties break toward
/// the lower column index. Each entry carries its peak window of
/// `window_frames` consecutive aligned frames.
pub fn top_features(heat: &HeatMap, k_per_domain: usize, window_frames: usize) -> Result<Vec<DomainRanking>> {
    if k_per_domain == 0 {
        return Err(Error::Validation("k per domain must be >= 1".into()));
    }
    let schema = FeatureSchema::current();
    let mut column_scores = vec![0.0; heat.f];
    for row in heat.values.chunks(heat.f) {
        for (c, v) in row.iter().enumerate() {
            column_scores[c] += v;
        }
    }
    let mut out = Vec::new();
    for domain in [Domain::Motion, Domain::SelfSkeleton, Domain::CrossCorrelation] {
        let (lo, hi) = schema.domain_block(domain);
        let mut cols: Vec<usize> = (lo..hi).collect();
        // Stable sort keeps equal scores in ascending column order.
        cols.sort_by(|&a, &b| column_scores[b].partial_cmp(&column_scores[a]).unwrap());
        let features = cols
            .into_iter()
            .take(k_per_domain)
            .map(|c| {
                let peak = peak_window(heat, c, window_frames);
                RankedFeature {
                    name: schema.features[c].name.clone(),
                    column: c,
                    peak_window: peak,
                    score: column_scores[c],
                }
            })
            .collect();
        out.push(DomainRanking { domain, features });
    }
    Ok(out)
}

fn peak_window(heat: &HeatMap, column: usize, window_frames: usize) -> (usize, usize) {
    let w = window_frames.max(1).min(heat.t);
    let mut best_start = 0;
    let mut best = f64::NEG_INFINITY;
    for start in (0..=heat.t - w).step_by(w) {
        let s: f64 = (start..start + w).map(|t| heat.get(t, column)).sum();
        if s > best {
            best = s;
            best_start = start;
        }
    }
    (best_start, best_start + w)
}

/// Overall ranking across all domains (highest column-summed heat first,
/// ties toward lower columns).
pub fn overall_ranking(heat: &HeatMap) -> Vec<usize> {
    let mut column_scores = vec![0.0; heat.f];
    for row in heat.values.chunks(heat.f) {
        for (c, v) in row.iter().enumerate() {
            column_scores[c] += v;
        }
    }
    let mut cols: Vec<usize> = (0..heat.f).collect();
    cols.sort_by(|&a, &b| column_scores[b].partial_cmp(&column_scores[a]).unwrap());
    cols
}

/// RFC-4180 CSV: one header row of feature names, then `t` heat rows.
pub fn heat_to_csv(heat: &HeatMap) -> String {
    let schema = FeatureSchema::current();
    let header: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
    let mut s = header.join(",");
    s.push_str("\r\n");
    for row in heat.values.chunks(heat.f) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        s.push_str(&cells.join(","));
        s.push_str("\r\n");
    }
    s
}

/// SVG 1.1 heatmap: time horizontal, features vertical in domain bands,
/// separators between domains, the top-k cell of each ranked feature
/// outlined.
pub fn heat_to_svg(report: &ExplainReport) -> String {
    let heat = &report.heat;
    let cell = 4.0;
    let width = heat.t as f64 * cell + 60.0;
    let height = heat.f as f64 + 40.0;
    let max = heat.values.iter().cloned().fold(0.0f64, f64::max).max(1e-300);
    let schema = FeatureSchema::current();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{width}\" height=\"{height}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for domain in [Domain::Motion, Domain::SelfSkeleton, Domain::CrossCorrelation] {
        let (lo, hi) = schema.domain_block(domain);
        s.push_str(&format!(
            "<g class=\"domain-band\" data-domain=\"{domain:?}\">\n<rect x=\"50\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"0.5\"/>\n",
            20 + lo,
            heat.t as f64 * cell,
            hi - lo
        ));
        for f in lo..hi {
            for t in 0..heat.t {
                let v = heat.get(t, f) / max;
                if v > 1e-4 {
                    let alpha = v.min(1.0);
                    s.push_str(&format!(
                        "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"1\" fill=\"crimson\" fill-opacity=\"{alpha:.4}\"/>\n",
                        50.0 + t as f64 * cell,
                        20 + f
                    ));
                }
            }
        }
        s.push_str("</g>\n");
    }
    for ranking in &report.top_features {
        for feat in &ranking.features {
            let (w0, w1) = feat.peak_window;
            s.push_str(&format!(
                "<rect class=\"top-cell\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"1\" fill=\"none\" stroke=\"navy\" stroke-width=\"0.75\"/>\n",
                50.0 + w0 as f64 * cell,
                20 + feat.column,
                (w1 - w0) as f64 * cell
            ));
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Write the JSON report, heat CSV, and SVG next to each other.
pub fn render_report(report: &ExplainReport, json: &Path, csv: &Path, svg: &Path) -> Result<()> {
    std::fs::write(json, serde_json::to_string_pretty(report)?)?;
    std::fs::write(csv, heat_to_csv(&report.heat))?;
    std::fs::write(svg, heat_to_svg(report))?;
    Ok(())
}
