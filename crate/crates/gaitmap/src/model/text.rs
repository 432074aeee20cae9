//! Text-prompt embedding: either precomputed 384-wide vectors from a JSON
//! provider file, or a deterministic token-hash bag-of-words fallback.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::TEXT_EMBED_DIM;

/// The default clinical prompt set. One encoded token per prompt.
pub const DEFAULT_PROMPTS: [&str; 4] = [
    "asymmetric arm swing in thoracic curve types",
    "shoulder line obliquity during the gait cycle",
    "pelvic tilt asymmetry across stance phases",
    "reduced left-right limb coordination while walking",
];

pub enum TextProvider {
    /// Exact-string lookup of precomputed sentence vectors.
    File(BTreeMap<String, Vec<f64>>),
    /// Seeded token-hash bag-of-words, L2-normalized.
    Fallback,
}

impl TextProvider {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let map: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        for (k, v) in &map {
            if v.len() != TEXT_EMBED_DIM {
                return Err(Error::Validation(format!(
                    "provider vector for {k:?} has {} dims, expected {TEXT_EMBED_DIM}",
                    v.len()
                )));
            }
        }
        Ok(TextProvider::File(map))
    }

    pub fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        match self {
            TextProvider::File(map) => map
                .get(prompt)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("provider file has no vector for prompt {prompt:?}"))),
            TextProvider::Fallback => Ok(fallback_embed(prompt)),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hash every lowercase whitespace token into a handful of signed slots,
/// accumulate, L2-normalize. Deterministic across processes.
pub fn fallback_embed(prompt: &str) -> Vec<f64> {
    let mut v = vec![0.0f64; TEXT_EMBED_DIM];
    for token in prompt.to_lowercase().split_whitespace() {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
        for _ in 0..8 {
            let idx = rng.gen_range(0..TEXT_EMBED_DIM);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        // Empty prompt: a fixed unit vector keeps downstream algebra total.
        v[0] = 1.0;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fallback_is_deterministic_and_unit_norm() {
        let a = fallback_embed(DEFAULT_PROMPTS[0]);
        let b = fallback_embed(DEFAULT_PROMPTS[0]);
        assert_eq!(a, b);
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn different_prompts_differ() {
        assert_ne!(fallback_embed("left arm"), fallback_embed("right arm"));
    }

    #[test]
    fn provider_file_lookup_and_missing_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("provider.json");
        let mut map = BTreeMap::new();
        map.insert("known prompt".to_string(), vec![0.5; TEXT_EMBED_DIM]);
        std::fs::write(&path, serde_json::to_string(&map).unwrap()).unwrap();
        let p = TextProvider::from_file(&path).unwrap();
        assert_eq!(p.embed("known prompt").unwrap().len(), TEXT_EMBED_DIM);
        let err = p.embed("unknown prompt").unwrap_err();
        assert!(err.to_string().contains("unknown prompt"), "{err}");
    }

    #[test]
    fn provider_rejects_wrong_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("provider.json");
        std::fs::write(&path, r#"{"p": [1.0, 2.0]}"#).unwrap();
        assert!(TextProvider::from_file(&path).is_err());
    }
}
