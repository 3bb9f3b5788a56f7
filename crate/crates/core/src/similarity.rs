//! Sentence-pair similarity used by path mining and shortcut diagnostics.
//!
//! [`HashedBagOfWords`] is the deterministic reference backend: texts become
//! binary bags of hashed word tokens and similarity is their cosine. The
//! [`HttpEmbedder`] backend reaches an external sentence encoder through an
//! OpenAI-style `/embeddings` endpoint.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RESERVED_MARKERS;

pub trait SimilarityModel: Send + Sync {
    fn backend_id(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Cosine similarity in `[-1, 1]`; both texts must be nonempty.
    fn sim(&self, a: &str, b: &str) -> Result<f64>;
}

/// Manifest entry describing the similarity backend used by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityInfo {
    pub backend: String,
    pub dimension: usize,
}

impl SimilarityInfo {
    pub fn of(m: &dyn SimilarityModel) -> Self {
        SimilarityInfo {
            backend: m.backend_id().to_string(),
            dimension: m.dimension(),
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric word tokens; reserved markers are dropped. A text
/// with no alphanumeric content becomes one token of its trimmed form.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut cleaned = text.to_string();
    for m in RESERVED_MARKERS {
        cleaned = cleaned.replace(m, " ");
    }
    let toks: Vec<String> = cleaned
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect();
    if toks.is_empty() && !text.trim().is_empty() {
        return vec![text.trim().to_lowercase()];
    }
    toks
}

fn validate(a: &str, b: &str) -> Result<()> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(Error::invalid("similarity inputs must be nonempty"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    buckets: u64,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        HashedBagOfWords { buckets: 1 << 20 }
    }
}

impl HashedBagOfWords {
    pub fn new(buckets: usize) -> Self {
        HashedBagOfWords {
            buckets: buckets.max(1) as u64,
        }
    }

    fn embed(&self, text: &str) -> BTreeSet<u64> {
        word_tokens(text)
            .iter()
            .map(|t| fnv1a(t.as_bytes()) % self.buckets)
            .collect()
    }
}

impl SimilarityModel for HashedBagOfWords {
    fn backend_id(&self) -> &str {
        "hashed-bow"
    }

    fn dimension(&self) -> usize {
        self.buckets as usize
    }

    fn sim(&self, a: &str, b: &str) -> Result<f64> {
        validate(a, b)?;
        let (ea, eb) = (self.embed(a), self.embed(b));
        if ea.is_empty() || eb.is_empty() {
            return Ok(0.0);
        }
        let shared = ea.intersection(&eb).count() as f64;
        Ok(shared / ((ea.len() * eb.len()) as f64).sqrt())
    }
}

/// External sentence encoder behind an OpenAI-compatible embeddings API.
/// Embeddings are cached per text.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, dimension: usize) -> Self {
        HttpEmbedder {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            dimension,
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Reads `KGPATH_EMBED_URL`, `KGPATH_EMBED_MODEL`, `KGPATH_EMBED_DIM` and
    /// optionally `KGPATH_EMBED_KEY`.
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).map_err(|_| Error::invalid(format!("{k} is not set")));
        let dim = var("KGPATH_EMBED_DIM")?
            .parse()
            .map_err(|_| Error::invalid("KGPATH_EMBED_DIM must be an integer"))?;
        Ok(Self::new(
            &var("KGPATH_EMBED_URL")?,
            &var("KGPATH_EMBED_MODEL")?,
            std::env::var("KGPATH_EMBED_KEY").ok(),
            dim,
        ))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.lock().expect("cache poisoned").get(text) {
            return Ok(v.clone());
        }
        let mut req = ureq::post(&format!("{}/embeddings", self.endpoint));
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp: EmbeddingResponse = req
            .send_json(serde_json::json!({ "model": self.model, "input": [text] }))
            .map_err(|e| Error::invalid(format!("embedding request failed: {e}")))?
            .into_json()
            .map_err(|e| Error::invalid(format!("embedding response unreadable: {e}")))?;
        let v = resp
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| Error::invalid("embedding response had no data"))?;
        if v.len() != self.dimension {
            return Err(Error::invalid(format!(
                "expected {}-dim embedding, got {}",
                self.dimension,
                v.len()
            )));
        }
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

impl SimilarityModel for HttpEmbedder {
    fn backend_id(&self) -> &str {
        &self.model
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn sim(&self, a: &str, b: &str) -> Result<f64> {
        validate(a, b)?;
        if a == b {
            return Ok(1.0);
        }
        let (ea, eb) = (self.embed(a)?, self.embed(b)?);
        Ok(cosine(&ea, &eb))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Orders by descending score, then ascending text.
pub(crate) fn by_score_then_text(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// The `k` candidates most similar to `anchor`; ties break lexicographically.
pub fn top_k_similar(
    m: &dyn SimilarityModel,
    anchor: &str,
    candidates: &[String],
    k: usize,
) -> Result<Vec<String>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut scored = candidates
        .iter()
        .map(|c| Ok((c.as_str(), m.sim(anchor, c)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| by_score_then_text(*a, *b));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(c, _)| c.to_string())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn self_similarity_is_one() {
        let m = HashedBagOfWords::default();
        assert!(
            (m.sim("people.person.nationality", "people.person.nationality")
                .unwrap()
                - 1.0)
                .abs()
                < 1e-6
        );
        assert!((m.sim("!!!", "!!!").unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn disjoint_tokens_are_orthogonal() {
        let m = HashedBagOfWords::default();
        assert_eq!(m.sim("red apple", "blue sky").unwrap(), 0.0);
    }

    #[test]
    fn place_of_death_vs_burial() {
        // binary bags {place, of, death} and {place, of, burial}: 2 / sqrt(3 * 3)
        let m = HashedBagOfWords::default();
        let s = m.sim("place of death", "place of burial").unwrap();
        assert!((s - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_text_rejected() {
        let m = HashedBagOfWords::default();
        assert!(m.sim("", "x").is_err());
        assert!(m.sim("x", "  ").is_err());
    }

    #[test]
    fn markers_are_ignored() {
        let m = HashedBagOfWords::default();
        let s = m.sim("a [SEP] b", "a b").unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_cases() {
        let m = HashedBagOfWords::default();
        let cands: Vec<String> = [
            "people.person.nationality",
            "sports.pro_athlete.teams",
            "sports.team.location_country",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        // "person" and "people" overlap with the nationality relation only
        let top = top_k_similar(&m, "people.person.place_of_birth", &cands, 1).unwrap();
        assert_eq!(top, vec!["people.person.nationality"]);
        let all = top_k_similar(&m, "sports team", &cands, 10).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0], "sports.team.location_country");
        let tied = top_k_similar(&m, "zzz", &["c".into(), "a".into(), "b".into()], 2).unwrap();
        assert_eq!(tied, vec!["a", "b"]);
        assert!(top_k_similar(&m, "x", &cands, 0).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(a in "[a-z ]{1,30}[a-z]", b in "[a-z ]{1,30}[a-z]") {
            let m = HashedBagOfWords::default();
            let ab = m.sim(&a, &b).unwrap();
            let ba = m.sim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((m.sim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn top_k_is_prefix_of_full_ranking(
            anchor in "[a-e]( [a-e]){0,4}",
            cands in proptest::collection::vec("[a-e]( [a-e]){0,4}", 1..8),
            k in 1usize..10,
        ) {
            let m = HashedBagOfWords::default();
            let full = top_k_similar(&m, &anchor, &cands, cands.len()).unwrap();
            let top = top_k_similar(&m, &anchor, &cands, k).unwrap();
            prop_assert_eq!(&full[..top.len()], &top[..]);
            prop_assert_eq!(top.len(), k.min(cands.len()));
        }
    }
}
