//! Embedding-similarity filtering of decoded knowledge strings.
//!
//! A candidate `ck` survives when the cosine between the mean-pooled
//! embeddings of the input text and of `ck` is strictly above the threshold
//! (0.3 by default).

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_HASHING_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_text: String,
}

/// A text-embedding provider. Implementations must be deterministic per input.
pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
}

/// Mean of per-token states; the zero vector when there are no tokens.
pub fn mean_pool(states: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    if states.is_empty() {
        return out;
    }
    for s in states {
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    let n = states.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Deterministic feature-hashing embedder: each lowercased alphanumeric token
/// is a one-hot vector over `dim` buckets; the text embedding is their mean.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    id: String,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            id: format!("hashing-{dim}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket(&self, token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(head) % self.dim as u64) as usize
    }

    /// Final per-token states: one-hot bucket indicators.
    pub fn token_states(&self, text: &str) -> Vec<Vec<f64>> {
        words(text)
            .map(|w| {
                let mut v = vec![0.0; self.dim];
                v[self.bucket(&w)] = 1.0;
                v
            })
            .collect()
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASHING_DIM)
    }
}

impl Embedder for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector {
            values: mean_pool(&self.token_states(text), self.dim),
            source_text: text.to_string(),
        })
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Client for an external embedding endpoint.
///
/// `POST {url}` with `{"text": .., "model": ..}`; the reply must be
/// `{"vector": [..], "model_id": ..}` with the requested model echoed back.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    url: String,
    model: String,
    max_retries: u32,
    backoff: Duration,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
    model_id: String,
}

impl HttpEmbedder {
    pub fn new(url: &str, model: &str, timeout: Duration, max_retries: u32) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            url: url.to_string(),
            model: model.to_string(),
            max_retries,
            backoff: Duration::from_millis(100),
            client,
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn attempt(&self, text: &str) -> Result<Vec<f64>> {
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest {
                text,
                model: &self.model,
            })
            .send()
            .map_err(|e| Error::Provider(format!("request to {} failed: {e}", self.url)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Provider(format!("{} answered {status}", self.url)));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| Error::Provider(format!("malformed reply from {}: {e}", self.url)))?;
        if body.model_id != self.model {
            return Err(Error::Provider(format!(
                "endpoint served model `{}`, requested `{}`",
                body.model_id, self.model
            )));
        }
        if body.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Provider("endpoint returned a non-finite vector".into()));
        }
        Ok(body.vector)
    }
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let mut last_err = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.pow(attempt - 1));
            }
            match self.attempt(text) {
                Ok(values) => {
                    return Ok(EmbeddingVector {
                        values,
                        source_text: text.to_string(),
                    })
                }
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "embedding request failed");
                    last_err = Some(e);
                }
            }
        }
        Err(last_err.expect("at least one attempt is made"))
    }
}

/// Provider selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbedderConfig {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        url: String,
        model: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
    },
}

fn default_dim() -> usize {
    DEFAULT_HASHING_DIM
}
fn default_timeout_ms() -> u64 {
    10_000
}
fn default_retries() -> u32 {
    3
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashing {
            dim: DEFAULT_HASHING_DIM,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Arc<dyn Embedder>> {
        match self {
            EmbedderConfig::Hashing { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("hashing embedder needs dim >= 1".into()));
                }
                Ok(Arc::new(HashingEmbedder::new(*dim)))
            }
            EmbedderConfig::Http {
                url,
                model,
                timeout_ms,
                max_retries,
            } => Ok(Arc::new(HttpEmbedder::new(
                url,
                model,
                Duration::from_millis(*timeout_ms),
                *max_retries,
            )?)),
        }
    }
}

pub fn embed(text: &str, embedder: &dyn Embedder) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::Precondition("cannot embed empty text".into()));
    }
    embedder.embed(text)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn activation_score(input_text: &str, ck: &str, embedder: &dyn Embedder) -> Result<f64> {
    let t = embed(input_text, embedder)?;
    let c = embed(ck, embedder)?;
    Ok(cosine(&t.values, &c.values))
}

/// A knowledge string that passed the filter, with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub text: String,
    pub activation_score: f64,
    pub country: String,
    pub instance_id: String,
    pub layer: usize,
}

/// Where filtered items came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemOrigin {
    pub country: String,
    pub instance_id: String,
    pub layer: usize,
}

#[derive(Clone)]
pub struct KnowledgeFilter {
    embedder: Arc<dyn Embedder>,
    threshold: f64,
}

impl KnowledgeFilter {
    pub fn new(embedder: Arc<dyn Embedder>, threshold: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [-1, 1]")));
        }
        Ok(Self { embedder, threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    /// Activation score of every candidate against `input_text`, in input order.
    pub fn score(&self, candidates: &[String], input_text: &str) -> Result<Vec<f64>> {
        let target = embed(input_text, self.embedder())?;
        candidates
            .par_iter()
            .map(|ck| {
                let c = embed(ck, self.embedder())?;
                Ok(cosine(&target.values, &c.values))
            })
            .collect()
    }

    /// Candidates scoring strictly above the threshold, in input order.
    pub fn filter(&self, candidates: &[String], input_text: &str, origin: &ItemOrigin) -> Result<Vec<KnowledgeItem>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let scores = self.score(candidates, input_text)?;
        Ok(candidates
            .iter()
            .zip(scores)
            .filter(|(_, s)| *s > self.threshold)
            .map(|(ck, s)| KnowledgeItem {
                text: ck.clone(),
                activation_score: s,
                country: origin.country.clone(),
                instance_id: origin.instance_id.clone(),
                layer: origin.layer,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Embeds each text as a fixed vector, for threshold tests.
    struct TableEmbedder(Vec<(&'static str, Vec<f64>)>);

    impl Embedder for TableEmbedder {
        fn model_id(&self) -> &str {
            "table"
        }
        fn embed(&self, text: &str) -> Result<EmbeddingVector> {
            let v = self
                .0
                .iter()
                .find(|(t, _)| *t == text)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Provider(format!("unknown text {text}")))?;
            Ok(EmbeddingVector {
                values: v,
                source_text: text.into(),
            })
        }
    }

    fn origin() -> ItemOrigin {
        ItemOrigin {
            country: "GR".into(),
            instance_id: "q1".into(),
            layer: 1,
        }
    }

    #[test]
    fn single_token_embedding_is_its_state() {
        let e = HashingEmbedder::default();
        let v = embed("Zakynthos", &e).unwrap();
        assert_eq!(v.values, e.token_states("zakynthos")[0]);
    }

    #[test]
    fn two_token_embedding_is_hand_mean() {
        let e = HashingEmbedder::default();
        let (b1, b2) = (e.bucket("tea"), e.bucket("house"));
        assert_ne!(b1, b2);
        let mut expect = vec![0.0; 64];
        expect[b1] += 0.5;
        expect[b2] += 0.5;
        assert_eq!(embed("tea house", &e).unwrap().values, expect);
    }

    #[test]
    fn embedding_is_deterministic_and_rejects_empty() {
        let e = HashingEmbedder::default();
        assert_eq!(
            embed("Family gathering", &e).unwrap(),
            embed("Family gathering", &e).unwrap()
        );
        assert!(matches!(embed("  ", &e), Err(Error::Precondition(_))));
    }

    #[test]
    fn self_similarity_is_one() {
        let e = HashingEmbedder::default();
        let s = activation_score("popular family game", "popular family game", &e).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_buckets_are_orthogonal() {
        let e = HashingEmbedder::default();
        let (a, b) = ("tea", "football");
        assert_ne!(e.bucket(a), e.bucket(b));
        assert!(activation_score(a, b, &e).unwrap().abs() < 1e-9);
    }

    #[test]
    fn zero_norm_scores_zero() {
        let e = HashingEmbedder::default();
        assert_eq!(activation_score("tea", "!!!", &e).unwrap(), 0.0);
    }

    #[test]
    fn strict_threshold_boundary() {
        // Integer vectors with integer norms give exactly representable cosines:
        // |(3, 9, 3, 1)| = 10 and |(31, 95, 3, 2, 1)| = 100.
        let table = TableEmbedder(vec![
            ("input", vec![1.0, 0.0, 0.0, 0.0, 0.0]),
            ("kept", vec![31.0, 95.0, 3.0, 2.0, 1.0]),
            ("dropped", vec![3.0, 9.0, 3.0, 1.0, 0.0]),
        ]);
        let f = KnowledgeFilter::new(Arc::new(table), 0.3).unwrap();
        let scores = f.score(&["kept".into(), "dropped".into()], "input").unwrap();
        assert_eq!(scores, vec![0.31, 0.3]);
        let out = f
            .filter(&["kept".into(), "dropped".into()], "input", &origin())
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "kept");
        assert_eq!(out[0].activation_score, 0.31);
        assert_eq!(out[0].layer, 1);
    }

    #[test]
    fn empty_candidates_give_empty_output() {
        let f = KnowledgeFilter::new(Arc::new(HashingEmbedder::default()), 0.3).unwrap();
        assert!(f.filter(&[], "input", &origin()).unwrap().is_empty());
    }

    #[test]
    fn threshold_range_checked() {
        let e: Arc<dyn Embedder> = Arc::new(HashingEmbedder::default());
        assert!(KnowledgeFilter::new(e.clone(), 1.5).is_err());
        assert!(KnowledgeFilter::new(e, -1.0).is_ok());
    }

    fn serve(responses: Vec<(u16, String)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut req = vec![0; len];
                reader.read_exact(&mut req).unwrap();
                let req: serde_json::Value = serde_json::from_slice(&req).unwrap();
                assert!(req["text"].is_string());
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        format!("http://{addr}/embed")
    }

    #[test]
    fn http_embedder_round_trip() {
        let url = serve(vec![(200, r#"{"vector":[0.5,1.5],"model_id":"mini"}"#.into())]);
        let e = HttpEmbedder::new(&url, "mini", Duration::from_secs(5), 0).unwrap();
        let v = e.embed("hello").unwrap();
        assert_eq!(v.values, vec![0.5, 1.5]);
        assert_eq!(v.source_text, "hello");
    }

    #[test]
    fn http_embedder_retries_then_succeeds() {
        let url = serve(vec![
            (500, "{}".into()),
            (200, r#"{"vector":[1.0],"model_id":"mini"}"#.into()),
        ]);
        let e = HttpEmbedder::new(&url, "mini", Duration::from_secs(5), 2)
            .unwrap()
            .with_backoff(Duration::from_millis(1));
        assert_eq!(e.embed("x").unwrap().values, vec![1.0]);
    }

    #[test]
    fn http_embedder_rejects_wrong_model_echo() {
        let url = serve(vec![(200, r#"{"vector":[1.0],"model_id":"other"}"#.into())]);
        let e = HttpEmbedder::new(&url, "mini", Duration::from_secs(5), 0).unwrap();
        assert!(matches!(e.embed("x"), Err(Error::Provider(_))));
    }

    #[test]
    fn embedder_config_parses() {
        let cfg: EmbedderConfig = toml::from_str("kind = \"hashing\"\ndim = 32").unwrap();
        assert_eq!(cfg, EmbedderConfig::Hashing { dim: 32 });
        let cfg: EmbedderConfig = toml::from_str("kind = \"http\"\nurl = \"http://h/e\"\nmodel = \"m\"").unwrap();
        assert!(matches!(cfg, EmbedderConfig::Http { max_retries: 3, .. }));
    }
}
