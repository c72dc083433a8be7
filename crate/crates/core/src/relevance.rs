//! Rationale-to-candidate relevance scoring and argmax selection.
//!
//! Scoring goes through [`RelevanceProvider`]; two implementations ship:
//! [`EmbeddingRelevance`] (cosine between a text embedding of the rationale
//! and an image embedding of each crop) and the scripted table in
//! [`crate::mocks`].

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::objectpool::{EncodedImage, ObjectCandidate, ObjectPool};
use crate::transport::{HttpRequest, RetryPolicy, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub candidate_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedObject {
    pub candidate: ObjectCandidate,
    pub pool_index: usize,
    pub score: f64,
    pub runner_up_score: Option<f64>,
    pub selection_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelevanceError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("rationale is empty")]
    EmptyRationale,
    #[error("relevance provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("relevance provider failed: {0}")]
    ProviderFailed(String),
    #[error("non-finite score {value} for candidate {candidate_id}")]
    NonFiniteScore { candidate_id: String, value: String },
    #[error("embedding dimension changed from {expected} to {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("no scripted score for step {step_index}, candidate {candidate_id}")]
    ScriptMiss { step_index: usize, candidate_id: String },
    #[error("scores do not line up with the pool: {0}")]
    Misaligned(String),
}

pub trait RelevanceProvider: Send + Sync {
    /// One score per candidate, in the order given.
    fn score(
        &self,
        step_index: usize,
        rationale: &str,
        candidates: &[ObjectCandidate],
    ) -> Result<Vec<f64>, RelevanceError>;
}

impl<P: RelevanceProvider + ?Sized> RelevanceProvider for Box<P> {
    fn score(
        &self,
        step_index: usize,
        rationale: &str,
        candidates: &[ObjectCandidate],
    ) -> Result<Vec<f64>, RelevanceError> {
        (**self).score(step_index, rationale, candidates)
    }
}

/// Scores every pool candidate against the step's rationale, in pool order.
pub fn score_candidates(
    rationale: &str,
    step_index: usize,
    pool: &ObjectPool,
    provider: &dyn RelevanceProvider,
) -> Result<Vec<RelevanceScore>, RelevanceError> {
    if pool.is_empty() {
        return Err(RelevanceError::EmptyPool);
    }
    if rationale.trim().is_empty() {
        return Err(RelevanceError::EmptyRationale);
    }
    let raw = provider.score(step_index, rationale, &pool.candidates)?;
    if raw.len() != pool.len() {
        return Err(RelevanceError::Misaligned(format!(
            "provider returned {} scores for {} candidates",
            raw.len(),
            pool.len()
        )));
    }
    pool.candidates
        .iter()
        .zip(raw)
        .map(|(c, score)| {
            if score.is_finite() {
                Ok(RelevanceScore {
                    candidate_id: c.candidate_id.clone(),
                    score,
                })
            } else {
                Err(RelevanceError::NonFiniteScore {
                    candidate_id: c.candidate_id.clone(),
                    value: score.to_string(),
                })
            }
        })
        .collect()
}

/// Highest-scoring candidate; ties go to the earliest pool position.
pub fn select_object(scores: &[RelevanceScore], pool: &ObjectPool) -> Result<SelectedObject, RelevanceError> {
    if scores.is_empty() || pool.is_empty() {
        return Err(RelevanceError::EmptyPool);
    }
    if scores.len() != pool.len()
        || scores
            .iter()
            .zip(&pool.candidates)
            .any(|(s, c)| s.candidate_id != c.candidate_id)
    {
        return Err(RelevanceError::Misaligned(
            "score ids differ from pool candidate ids".to_string(),
        ));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.score > scores[best].score {
            best = i;
        }
    }
    let runner_up_score = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, s)| s.score)
        .reduce(f64::max);
    let score = scores[best].score;
    Ok(SelectedObject {
        candidate: pool.candidates[best].clone(),
        pool_index: best,
        score,
        runner_up_score,
        selection_margin: runner_up_score.map(|r| score - r),
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Zero vectors give NaN, which the caller reports as a non-finite score.
    dot / (na * nb)
}

pub trait EmbeddingClient: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, RelevanceError>;
    fn embed_image(&self, image: &EncodedImage) -> Result<Vec<f64>, RelevanceError>;
}

/// Cosine relevance between a rationale embedding and crop embeddings.
///
/// The vector dimension is fixed by the first embedding received; any later
/// vector of a different length is an error. Crop embeddings are cached by
/// content digest.
pub struct EmbeddingRelevance<C> {
    client: C,
    max_concurrency: usize,
    dimension: OnceLock<usize>,
    image_cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl<C: EmbeddingClient> EmbeddingRelevance<C> {
    pub fn new(client: C, max_concurrency: usize) -> Self {
        Self {
            client,
            max_concurrency: max_concurrency.max(1),
            dimension: OnceLock::new(),
            image_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension.get().copied()
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), RelevanceError> {
        let expected = *self.dimension.get_or_init(|| v.len());
        if v.len() != expected {
            return Err(RelevanceError::DimensionMismatch {
                expected,
                actual: v.len(),
            });
        }
        Ok(())
    }

    fn image_embedding(&self, candidate: &ObjectCandidate) -> Result<Vec<f64>, RelevanceError> {
        let key = &candidate.crop_ref.digest;
        if let Some(v) = self.image_cache.lock().unwrap_or_else(|e| e.into_inner()).get(key) {
            return Ok(v.clone());
        }
        let image = candidate
            .crop_ref
            .load()
            .map_err(|e| RelevanceError::ProviderFailed(e.to_string()))?;
        let v = self.client.embed_image(&image)?;
        self.image_cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key.clone(), v.clone());
        Ok(v)
    }
}

impl<C: EmbeddingClient> RelevanceProvider for EmbeddingRelevance<C> {
    fn score(
        &self,
        _step_index: usize,
        rationale: &str,
        candidates: &[ObjectCandidate],
    ) -> Result<Vec<f64>, RelevanceError> {
        let text = self.client.embed_text(rationale)?;
        self.check_dim(&text)?;
        let mut image_vectors: Vec<Option<Result<Vec<f64>, RelevanceError>>> = vec![None; candidates.len()];
        for (chunk_idx, chunk) in candidates.chunks(self.max_concurrency).enumerate() {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|c| s.spawn(move || self.image_embedding(c))).collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(RelevanceError::ProviderFailed("embedding worker panicked".into())))
                    })
                    .collect()
            });
            for (offset, r) in results.into_iter().enumerate() {
                image_vectors[chunk_idx * self.max_concurrency + offset] = Some(r);
            }
        }
        image_vectors
            .into_iter()
            .map(|slot| {
                let v = slot.unwrap_or_else(|| Err(RelevanceError::ProviderFailed("missing embedding".into())))?;
                self.check_dim(&v)?;
                Ok(cosine_similarity(&text, &v))
            })
            .collect()
    }
}

/// Embedding endpoints speaking JSON.
///
/// Text request `{"input": ...}`, image request `{"image": <base64>, "mime": ...}`;
/// optional `"model"` on both. Responses may be `{"embedding": [...]}` or the
/// OpenAI-style `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbeddingClient<T> {
    pub text_url: String,
    pub image_url: String,
    pub model: Option<String>,
    pub transport: T,
    pub retry: RetryPolicy,
    pub headers: Vec<(String, String)>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingResponse {
    Flat { embedding: Vec<f64> },
    Data { data: Vec<EmbeddingDatum> },
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl<T: Transport> HttpEmbeddingClient<T> {
    fn call(&self, url: &str, mut body: serde_json::Value) -> Result<Vec<f64>, RelevanceError> {
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let request = HttpRequest {
            url: url.to_string(),
            body,
        };
        self.retry.run(
            || {
                let resp = self
                    .transport
                    .post_json(&request, &self.headers, self.retry.timeout)
                    .map_err(|e| match e {
                        TransportError::Cassette(m) => RelevanceError::ProviderFailed(m),
                        other => RelevanceError::ProviderUnavailable(other.to_string()),
                    })?;
                if resp.is_transient() {
                    return Err(RelevanceError::ProviderUnavailable(format!("HTTP {}", resp.status)));
                }
                if !resp.is_success() {
                    return Err(RelevanceError::ProviderFailed(format!(
                        "HTTP {}: {}",
                        resp.status, resp.body
                    )));
                }
                match serde_json::from_str::<EmbeddingResponse>(&resp.body) {
                    Ok(EmbeddingResponse::Flat { embedding }) => Ok(embedding),
                    Ok(EmbeddingResponse::Data { mut data }) if !data.is_empty() => Ok(data.swap_remove(0).embedding),
                    Ok(_) => Err(RelevanceError::ProviderFailed("empty embedding data".into())),
                    Err(e) => Err(RelevanceError::ProviderFailed(format!("malformed response: {e}"))),
                }
            },
            |e| matches!(e, RelevanceError::ProviderUnavailable(_)),
        )
    }
}

impl<T: Transport> EmbeddingClient for HttpEmbeddingClient<T> {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, RelevanceError> {
        self.call(&self.text_url, json!({ "input": text }))
    }

    fn embed_image(&self, image: &EncodedImage) -> Result<Vec<f64>, RelevanceError> {
        self.call(
            &self.image_url,
            json!({
                "image": base64::engine::general_purpose::STANDARD.encode(&image.bytes),
                "mime": image.mime,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocks::ScriptedScorer;
    use crate::objectpool::{BoundingBox, CropRef, ImageDimensions, Provenance};
    use std::path::{Path, PathBuf};

    pub(crate) fn pool_of(dir: Option<&Path>, n: usize) -> ObjectPool {
        let dims = ImageDimensions {
            width: 100,
            height: 100,
        };
        let candidates = (0..n)
            .map(|i| {
                let name = format!("c{}", i + 1);
                let crop = match dir {
                    Some(d) => {
                        let p = d.join(format!("{name}.bin"));
                        std::fs::write(&p, name.as_bytes()).unwrap();
                        CropRef::for_file(p, name.as_bytes())
                    }
                    None => CropRef::for_file(PathBuf::from(format!("{name}.png")), name.as_bytes()),
                };
                ObjectCandidate::new(
                    name,
                    "img",
                    BoundingBox::new(i as u32 * 10, 0, 10, 10),
                    dims,
                    crop,
                    Provenance::Manifest,
                )
                .unwrap()
            })
            .collect();
        ObjectPool {
            candidates,
            ..ObjectPool::empty("img", dims)
        }
    }

    fn scores(values: &[f64]) -> Vec<RelevanceScore> {
        values
            .iter()
            .enumerate()
            .map(|(i, s)| RelevanceScore {
                candidate_id: format!("c{}", i + 1),
                score: *s,
            })
            .collect()
    }

    #[test]
    fn scripted_scores_in_pool_order() {
        let scorer = ScriptedScorer::from_entries([(1, "c1", 0.3), (1, "c2", 0.8)]);
        let out = score_candidates("the rock", 1, &pool_of(None, 2), &scorer).unwrap();
        assert_eq!(out, scores(&[0.3, 0.8]));
    }

    #[test]
    fn output_follows_pool_not_score_order() {
        let table = [0.5, 0.9, 0.1, 0.7, 0.3];
        let scorer =
            ScriptedScorer::from_entries(table.iter().enumerate().map(|(i, s)| (2, format!("c{}", i + 1), *s)));
        let pool = pool_of(None, 5);
        let out = score_candidates("x", 2, &pool, &scorer).unwrap();
        let oracle: Vec<_> = pool
            .candidates
            .iter()
            .zip(table)
            .map(|(c, s)| (c.candidate_id.clone(), s))
            .collect();
        let got: Vec<_> = out.into_iter().map(|s| (s.candidate_id, s.score)).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn preconditions() {
        let scorer = ScriptedScorer::from_entries([(1, "c1", 0.3)]);
        assert_eq!(
            score_candidates("  ", 1, &pool_of(None, 1), &scorer),
            Err(RelevanceError::EmptyRationale)
        );
        assert_eq!(
            score_candidates("x", 1, &pool_of(None, 0), &scorer),
            Err(RelevanceError::EmptyPool)
        );
        let nan = ScriptedScorer::from_entries([(1, "c1", f64::NAN)]);
        assert!(matches!(
            score_candidates("x", 1, &pool_of(None, 1), &nan),
            Err(RelevanceError::NonFiniteScore { .. })
        ));
    }

    #[test]
    fn selection_examples() {
        let pool = pool_of(None, 3);
        let s = select_object(&scores(&[0.1, 0.9, 0.4]), &pool).unwrap();
        assert_eq!(s.pool_index, 1);
        assert!((s.selection_margin.unwrap() - 0.5).abs() < 1e-12);

        let s = select_object(&scores(&[0.9, 0.9]), &pool_of(None, 2)).unwrap();
        assert_eq!(s.candidate.candidate_id, "c1");
        assert_eq!(s.selection_margin, Some(0.0));

        let s = select_object(&scores(&[-3.2]), &pool_of(None, 1)).unwrap();
        assert_eq!(s.score, -3.2);
        assert_eq!(s.runner_up_score, None);
        assert_eq!(s.selection_margin, None);

        assert_eq!(select_object(&[], &pool), Err(RelevanceError::EmptyPool));
        assert!(matches!(
            select_object(&scores(&[0.1, 0.2]), &pool),
            Err(RelevanceError::Misaligned(_))
        ));
    }

    struct FakeEmbeddings;

    impl EmbeddingClient for FakeEmbeddings {
        fn embed_text(&self, text: &str) -> Result<Vec<f64>, RelevanceError> {
            Ok(match text {
                "like c1" => vec![1.0, 0.0, 0.0],
                "short" => vec![1.0, 0.0],
                _ => vec![0.0, 0.0, 1.0],
            })
        }

        fn embed_image(&self, image: &EncodedImage) -> Result<Vec<f64>, RelevanceError> {
            Ok(match image.bytes.as_slice() {
                b"c1" => vec![1.0, 0.0, 0.0],
                b"c2" => vec![0.6, 0.8, 0.0],
                _ => vec![0.0, 1.0, 0.0],
            })
        }
    }

    #[test]
    fn identical_embedding_scores_one() {
        let dir = tempfile::tempdir().unwrap();
        let pool = pool_of(Some(dir.path()), 3);
        let rel = EmbeddingRelevance::new(FakeEmbeddings, 2);
        let out = score_candidates("like c1", 1, &pool, &rel).unwrap();
        assert!((out[0].score - 1.0).abs() < 1e-12);
        assert!((out[1].score - 0.6).abs() < 1e-12);
        assert_eq!(select_object(&out, &pool).unwrap().candidate.candidate_id, "c1");
        assert_eq!(rel.dimension(), Some(3));
        assert!(matches!(
            score_candidates("short", 2, &pool, &rel),
            Err(RelevanceError::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn zero_vector_is_non_finite() {
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_nan());
    }
}
