//! Naive reference transformer written from the textbook formulas with plain
//! nested loops, independent of the production engine.

#![allow(dead_code)]

pub mod cf_oracle;
pub mod golden;
pub mod mcq_check;
pub mod records;

use culturescope::model::{ModelConfig, ModelWeights};

pub type Mat = Vec<Vec<f64>>;

fn to_mat(a: &ndarray::Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matvec(x: &[f64], m: &Mat) -> Vec<f64> {
    let cols = m[0].len();
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * m[i][j];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

pub struct Reference {
    /// `hidden[l][i]` for `l` in `0..=L`.
    pub hidden: Vec<Mat>,
    /// `attn[l - 1][i]`.
    pub attn: Vec<Mat>,
    /// `patterns[l - 1][h][query][key]`.
    pub patterns: Vec<Vec<Mat>>,
    pub logits: Mat,
}

/// Full forward pass; optionally overwrite `x_pos^layer` with a vector.
pub fn reference_forward(w: &ModelWeights, ids: &[usize], patch: Option<(usize, usize, &[f64])>) -> Reference {
    let cfg: &ModelConfig = w.config();
    let s = ids.len();
    let emb = to_mat(w.embedding());
    let mut x: Mat = ids.iter().map(|&t| emb[t].clone()).collect();
    if let Some((0, p, v)) = patch {
        x[p] = v.to_vec();
    }
    let mut hidden = vec![x.clone()];
    let mut attn_all = Vec::new();
    let mut patterns = Vec::new();
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    for (li, lw) in w.layers().iter().enumerate() {
        let mut a = vec![vec![0.0; cfg.model_dim]; s];
        let mut layer_patterns = Vec::new();
        for h in 0..cfg.num_heads {
            let (wq, wk, wv, wo) = (
                to_mat(&lw.query[h]),
                to_mat(&lw.key[h]),
                to_mat(&lw.value[h]),
                to_mat(&lw.output[h]),
            );
            let q: Mat = x.iter().map(|r| matvec(r, &wq)).collect();
            let k: Mat = x.iter().map(|r| matvec(r, &wk)).collect();
            let v: Mat = x.iter().map(|r| matvec(r, &wv)).collect();
            let mut pat = vec![vec![0.0; s]; s];
            for i in 0..s {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let p = softmax(&scores);
                let mut head = vec![0.0; cfg.head_dim];
                for j in 0..=i {
                    pat[i][j] = p[j];
                    for (c, hv) in head.iter_mut().enumerate() {
                        *hv += p[j] * v[j][c];
                    }
                }
                let o = matvec(&head, &wo);
                for (c, av) in a[i].iter_mut().enumerate() {
                    *av += o[c];
                }
            }
            layer_patterns.push(pat);
        }
        let (win, wout) = (to_mat(&lw.mlp_in), to_mat(&lw.mlp_out));
        let mut next = Vec::with_capacity(s);
        for i in 0..s {
            let mid: Vec<f64> = x[i].iter().zip(&a[i]).map(|(p, q)| p + q).collect();
            let hid: Vec<f64> = matvec(&mid, &win).into_iter().map(gelu).collect();
            let m = matvec(&hid, &wout);
            next.push(
                (0..cfg.model_dim)
                    .map(|c| x[i][c] + a[i][c] + m[c])
                    .collect::<Vec<f64>>(),
            );
        }
        if let Some((l, p, v)) = patch {
            if l == li + 1 {
                next[p] = v.to_vec();
            }
        }
        x = next;
        hidden.push(x.clone());
        attn_all.push(a);
        patterns.push(layer_patterns);
    }
    let un = to_mat(w.unembedding());
    let logits = x.iter().map(|r| matvec(r, &un)).collect();
    Reference {
        hidden,
        attn: attn_all,
        patterns,
        logits,
    }
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding by repeated full reference passes.
pub fn reference_generate(
    w: &ModelWeights,
    ids: &[usize],
    max_steps: usize,
    patch: Option<(usize, usize, &[f64])>,
) -> Vec<usize> {
    let mut seq = ids.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_steps {
        if seq.len() >= w.config().max_seq_len {
            break;
        }
        let r = reference_forward(w, &seq, patch);
        let next = argmax(r.logits.last().unwrap());
        if next == 0 {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
