use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Current version of the weight-file layout.
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Projections of one transformer block. No biases anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Per head, `d x d_h`.
    pub query: Vec<Array2<f64>>,
    /// Per head, `d x d_h`.
    pub key: Vec<Array2<f64>>,
    /// Per head, `d x d_h`.
    pub value: Vec<Array2<f64>>,
    /// Per head, `d_h x d`.
    pub output: Vec<Array2<f64>>,
    /// `d x mlp_hidden_dim`.
    pub mlp_in: Array2<f64>,
    /// `mlp_hidden_dim x d`.
    pub mlp_out: Array2<f64>,
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, dh, h) = (cfg.model_dim, cfg.head_dim, cfg.num_heads);
        Self {
            query: vec![Array2::zeros((d, dh)); h],
            key: vec![Array2::zeros((d, dh)); h],
            value: vec![Array2::zeros((d, dh)); h],
            output: vec![Array2::zeros((dh, d)); h],
            mlp_in: Array2::zeros((d, cfg.mlp_hidden_dim)),
            mlp_out: Array2::zeros((cfg.mlp_hidden_dim, d)),
        }
    }
}

/// Immutable parameter set of a [`Model`](super::Model).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    embedding: Array2<f64>,
    layers: Vec<LayerWeights>,
    unembedding: Array2<f64>,
}

impl ModelWeights {
    /// Assemble weights, checking every shape against `config` and every entry for finiteness.
    pub fn from_parts(
        config: ModelConfig,
        embedding: Array2<f64>,
        layers: Vec<LayerWeights>,
        unembedding: Array2<f64>,
    ) -> Result<Self> {
        config.validate()?;
        let (v, d, dh, h, m) = (
            config.vocab_size,
            config.model_dim,
            config.head_dim,
            config.num_heads,
            config.mlp_hidden_dim,
        );
        check_shape("embedding", &embedding, (v, d))?;
        check_shape("unembedding", &unembedding, (d, v))?;
        if layers.len() != config.num_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                config.num_layers,
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            for (name, mats, shape) in [
                ("query", &layer.query, (d, dh)),
                ("key", &layer.key, (d, dh)),
                ("value", &layer.value, (d, dh)),
                ("output", &layer.output, (dh, d)),
            ] {
                if mats.len() != h {
                    return Err(Error::Shape(format!(
                        "layer {}: expected {h} {name} heads, got {}",
                        l + 1,
                        mats.len()
                    )));
                }
                for (head, mat) in mats.iter().enumerate() {
                    check_shape(&format!("layer {} {name} head {head}", l + 1), mat, shape)?;
                }
            }
            check_shape(&format!("layer {} mlp_in", l + 1), &layer.mlp_in, (d, m))?;
            check_shape(&format!("layer {} mlp_out", l + 1), &layer.mlp_out, (m, d))?;
        }
        Ok(Self {
            config,
            embedding,
            layers,
            unembedding,
        })
    }

    /// Every projection zero; embedding and unembedding as given.
    pub fn zero_blocks(config: ModelConfig, embedding: Array2<f64>, unembedding: Array2<f64>) -> Result<Self> {
        let layers = (0..config.num_layers).map(|_| LayerWeights::zeros(&config)).collect();
        Self::from_parts(config, embedding, layers, unembedding)
    }

    /// Seeded uniform initialisation with variance `1 / fan_in` per projection.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, dh, m) = (
            config.vocab_size,
            config.model_dim,
            config.head_dim,
            config.mlp_hidden_dim,
        );
        let embedding = uniform(&mut rng, (v, d), 1.0);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let mut heads = |rows, cols, fan_in: usize| -> Vec<Array2<f64>> {
                (0..config.num_heads)
                    .map(|_| uniform(&mut rng, (rows, cols), (3.0 / fan_in as f64).sqrt()))
                    .collect()
            };
            let query = heads(d, dh, d);
            let key = heads(d, dh, d);
            let value = heads(d, dh, d);
            let output = heads(dh, d, d);
            let mlp_in = uniform(&mut rng, (d, m), (3.0 / d as f64).sqrt());
            let mlp_out = uniform(&mut rng, (m, d), (3.0 / m as f64).sqrt());
            layers.push(LayerWeights {
                query,
                key,
                value,
                output,
                mlp_in,
                mlp_out,
            });
        }
        let unembedding = uniform(&mut rng, (d, v), (3.0 / d as f64).sqrt());
        Self::from_parts(config, embedding, layers, unembedding)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `V x d`.
    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    /// `d x V`.
    pub fn unembedding(&self) -> &Array2<f64> {
        &self.unembedding
    }

    /// Block `layer` in `1..=L`.
    pub fn layer(&self, layer: usize) -> Result<&LayerWeights> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::Range(format!("layer {layer} outside 1..={}", self.layers.len())));
        }
        Ok(&self.layers[layer - 1])
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Decompose into owned parts, e.g. to derive a modified copy.
    pub fn into_parts(self) -> (ModelConfig, Array2<f64>, Vec<LayerWeights>, Array2<f64>) {
        (self.config, self.embedding, self.layers, self.unembedding)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WeightFile::from(self);
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: WeightFile = serde_json::from_str(&text)?;
        file.into_weights()
    }
}

fn check_shape(name: &str, mat: &Array2<f64>, expected: (usize, usize)) -> Result<()> {
    if mat.dim() != expected {
        return Err(Error::Shape(format!(
            "{name}: expected {:?}, got {:?}",
            expected,
            mat.dim()
        )));
    }
    if mat.iter().any(|x| !x.is_finite()) {
        return Err(Error::Shape(format!("{name}: contains non-finite entries")));
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

/// On-disk layout: config plus row-major matrices.
#[derive(Serialize, Deserialize)]
struct WeightFile {
    format_version: u32,
    config: ModelConfig,
    embedding: Vec<f64>,
    layers: Vec<LayerFile>,
    unembedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    query: Vec<Vec<f64>>,
    key: Vec<Vec<f64>>,
    value: Vec<Vec<f64>>,
    output: Vec<Vec<f64>>,
    mlp_in: Vec<f64>,
    mlp_out: Vec<f64>,
}

fn row_major(mat: &Array2<f64>) -> Vec<f64> {
    mat.iter().copied().collect()
}

fn from_row_major(name: &str, data: Vec<f64>, shape: (usize, usize)) -> Result<Array2<f64>> {
    Array2::from_shape_vec(shape, data).map_err(|e| Error::Shape(format!("{name}: {e}")))
}

impl From<&ModelWeights> for WeightFile {
    fn from(w: &ModelWeights) -> Self {
        let heads = |mats: &[Array2<f64>]| mats.iter().map(row_major).collect();
        Self {
            format_version: WEIGHTS_FORMAT_VERSION,
            config: w.config,
            embedding: row_major(&w.embedding),
            layers: w
                .layers
                .iter()
                .map(|l| LayerFile {
                    query: heads(&l.query),
                    key: heads(&l.key),
                    value: heads(&l.value),
                    output: heads(&l.output),
                    mlp_in: row_major(&l.mlp_in),
                    mlp_out: row_major(&l.mlp_out),
                })
                .collect(),
            unembedding: row_major(&w.unembedding),
        }
    }
}

impl WeightFile {
    fn into_weights(self) -> Result<ModelWeights> {
        if self.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported weight format version {} (expected {WEIGHTS_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let cfg = self.config;
        cfg.validate()?;
        let (v, d, dh, m) = (cfg.vocab_size, cfg.model_dim, cfg.head_dim, cfg.mlp_hidden_dim);
        let heads = |name: &str, mats: Vec<Vec<f64>>, shape| -> Result<Vec<Array2<f64>>> {
            mats.into_iter().map(|data| from_row_major(name, data, shape)).collect()
        };
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                Ok(LayerWeights {
                    query: heads("query", l.query, (d, dh))?,
                    key: heads("key", l.key, (d, dh))?,
                    value: heads("value", l.value, (d, dh))?,
                    output: heads("output", l.output, (dh, d))?,
                    mlp_in: from_row_major("mlp_in", l.mlp_in, (d, m))?,
                    mlp_out: from_row_major("mlp_out", l.mlp_out, (m, d))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ModelWeights::from_parts(
            cfg,
            from_row_major("embedding", self.embedding, (v, d))?,
            layers,
            from_row_major("unembedding", self.unembedding, (d, v))?,
        )
    }
}
