//! Patch-token transformer over ROI time series.
//!
//! Tokens are linearly embedded, tagged with learned ROI and patch-position
//! embeddings, prefixed with a class token, and passed through pre-norm
//! attention blocks. The class-token row after the final layer norm is the
//! time-series representation R_T.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::preprocess::TokenSequence;

use super::params::ParamBinding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Exact,
    /// Landmark approximation with segment-mean landmarks and a
    /// Newton-Schulz pseudo-inverse.
    Nystrom { landmarks: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsEncoderConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width multiplier.
    pub ff_mult: usize,
    pub patch_len: usize,
    pub max_rois: usize,
    pub max_patches: usize,
    pub attention: AttentionKind,
}

impl Default for TsEncoderConfig {
    fn default() -> Self {
        TsEncoderConfig {
            model_dim: 256,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            patch_len: 20,
            max_rois: 424,
            max_patches: 10,
            attention: AttentionKind::Exact,
        }
    }
}

impl TsEncoderConfig {
    /// Small configuration for benchmarks and test suites.
    pub fn desk(n_rois: usize) -> Self {
        TsEncoderConfig {
            model_dim: 64,
            layers: 2,
            heads: 4,
            max_rois: n_rois,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.layers == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.patch_len == 0 || self.max_rois == 0 || self.max_patches == 0 {
            return Err(Error::Config("patch/table sizes must be positive".into()));
        }
        if let AttentionKind::Nystrom { landmarks } = self.attention {
            if landmarks == 0 {
                return Err(Error::Config("landmark count must be positive".into()));
            }
        }
        Ok(())
    }

    /// Expected parameter shapes, keyed by qualified name.
    pub fn param_shapes(&self, prefix: &str) -> BTreeMap<String, Vec<usize>> {
        let m = self.model_dim;
        let f = self.ff_mult * m;
        let mut out = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            out.insert(format!("{prefix}{name}"), shape);
        };
        put("embed.w".into(), vec![self.patch_len, m]);
        put("embed.b".into(), vec![m]);
        put("embed.roi".into(), vec![self.max_rois, m]);
        put("embed.pos".into(), vec![self.max_patches, m]);
        put("cls".into(), vec![1, m]);
        for i in 0..self.layers {
            for tag in ["q", "k", "v", "o"] {
                put(format!("layer{i}.attn.w{tag}"), vec![m, m]);
                put(format!("layer{i}.attn.b{tag}"), vec![m]);
            }
            put(format!("layer{i}.ln1.g"), vec![m]);
            put(format!("layer{i}.ln1.b"), vec![m]);
            put(format!("layer{i}.ln2.g"), vec![m]);
            put(format!("layer{i}.ln2.b"), vec![m]);
            put(format!("layer{i}.ff.w1"), vec![m, f]);
            put(format!("layer{i}.ff.b1"), vec![f]);
            put(format!("layer{i}.ff.w2"), vec![f, m]);
            put(format!("layer{i}.ff.b2"), vec![m]);
        }
        put("final_ln.g".into(), vec![m]);
        put("final_ln.b".into(), vec![m]);
        out
    }
}

/// Segment-mean pooling matrix: `landmarks` rows, each averaging a contiguous
/// run of the `t` positions.
fn landmark_pool<F: Scalar>(landmarks: usize, t: usize) -> Tensor<F> {
    let m = landmarks.min(t);
    let mut data = vec![F::ZERO; m * t];
    // spread positions over m segments as evenly as possible
    let base = t / m;
    let extra = t % m;
    let mut start = 0usize;
    for seg in 0..m {
        let len = base + usize::from(seg < extra);
        let w = F::from_f64(1.0 / len as f64);
        for j in start..start + len {
            data[seg * t + j] = w;
        }
        start += len;
    }
    Tensor::from_vec(vec![m, t], data).expect("pool shape is valid")
}

/// Newton-Schulz iteration for the pseudo-inverse of a small square matrix
/// already on the tape. The initial scaling constant is derived from the
/// current forward value.
fn newton_schulz_pinv<F: Scalar>(g: &mut Graph<F>, a: NodeId, iters: usize) -> Result<NodeId> {
    let value = g.value(a);
    let n = value.shape()[0];
    let mut norm1 = 0.0f64; // max column sum
    let mut norm_inf = 0.0f64; // max row sum
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += value.data()[i * n + j].to_f64().abs();
        }
        norm_inf = norm_inf.max(row);
    }
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += value.data()[i * n + j].to_f64().abs();
        }
        norm1 = norm1.max(col);
    }
    let denom = (norm1 * norm_inf).max(1e-12);
    let at = g.transpose(a)?;
    let mut z = g.scale(at, 1.0 / denom)?;
    let two_i = g.constant(Tensor::from_vec(
        vec![n, n],
        (0..n * n)
            .map(|k| {
                if k / n == k % n {
                    F::from_f64(2.0)
                } else {
                    F::ZERO
                }
            })
            .collect(),
    ).map_err(Error::Graph)?);
    for _ in 0..iters {
        let az = g.matmul(a, z)?;
        let corr = g.sub(two_i, az)?;
        z = g.matmul(z, corr)?;
    }
    Ok(z)
}

fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    prefix: &str,
    x: NodeId,
    heads: usize,
    kind: AttentionKind,
) -> Result<NodeId> {
    let m = g.value(x).shape()[1];
    let t = g.value(x).shape()[0];
    let dh = m / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let wq = binding.get(&format!("{prefix}.wq"));
    let wk = binding.get(&format!("{prefix}.wk"));
    let wv = binding.get(&format!("{prefix}.wv"));
    let wo = binding.get(&format!("{prefix}.wo"));
    let bq = binding.get(&format!("{prefix}.bq"));
    let bk = binding.get(&format!("{prefix}.bk"));
    let bv = binding.get(&format!("{prefix}.bv"));
    let bo = binding.get(&format!("{prefix}.bo"));

    let q = g.matmul(x, wq)?;
    let q = g.add(q, bq)?;
    let k = g.matmul(x, wk)?;
    let k = g.add(k, bk)?;
    let v = g.matmul(x, wv)?;
    let v = g.add(v, bv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice(q, 1, h * dh, dh)?;
        let kh = g.slice(k, 1, h * dh, dh)?;
        let vh = g.slice(v, 1, h * dh, dh)?;
        let out = match kind {
            AttentionKind::Exact => {
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.softmax(scores)?;
                g.matmul(attn, vh)?
            }
            AttentionKind::Nystrom { landmarks } => {
                let pool = g.constant(landmark_pool::<F>(landmarks, t));
                let ql = g.matmul(pool, qh)?;
                let kl = g.matmul(pool, kh)?;
                let klt = g.transpose(kl)?;
                let s1 = g.matmul(qh, klt)?;
                let s1 = g.scale(s1, scale)?;
                let f1 = g.softmax(s1)?;
                let s2 = g.matmul(ql, klt)?;
                let s2 = g.scale(s2, scale)?;
                let f2 = g.softmax(s2)?;
                let kt = g.transpose(kh)?;
                let s3 = g.matmul(ql, kt)?;
                let s3 = g.scale(s3, scale)?;
                let f3 = g.softmax(s3)?;
                let f2_pinv = newton_schulz_pinv(g, f2, 12)?;
                let f3v = g.matmul(f3, vh)?;
                let mid = g.matmul(f2_pinv, f3v)?;
                g.matmul(f1, mid)?
            }
        };
        head_outputs.push(out);
    }
    let merged = g.concat(1, &head_outputs)?;
    let projected = g.matmul(merged, wo)?;
    g.add(projected, bo)
}

/// Encoder trunk: returns the full normalized sequence (class row first),
/// shape (tokens + 1, model_dim).
pub fn ts_forward_sequence<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &TsEncoderConfig,
    tokens: &TokenSequence,
) -> Result<NodeId> {
    if tokens.patch_len() != cfg.patch_len {
        return Err(Error::shape(
            "ts_forward",
            format!(
                "token patch length {} does not match configured {}",
                tokens.patch_len(),
                cfg.patch_len
            ),
        ));
    }
    if tokens.n_rois() > cfg.max_rois || tokens.patches_per_roi() > cfg.max_patches {
        return Err(Error::shape(
            "ts_forward",
            format!(
                "{} ROIs x {} patches exceeds embedding tables {} x {}",
                tokens.n_rois(),
                tokens.patches_per_roi(),
                cfg.max_rois,
                cfg.max_patches
            ),
        ));
    }
    let t = tokens.len();
    let x = g.constant(Tensor::from_vec(
        vec![t, cfg.patch_len],
        tokens.data().iter().map(|&v| F::from_f64(v)).collect(),
    ).map_err(Error::Graph)?);

    let w_embed = binding.get("ts.embed.w");
    let b_embed = binding.get("ts.embed.b");
    let emb = g.matmul(x, w_embed)?;
    let emb = g.add(emb, b_embed)?;

    let roi_table = binding.get("ts.embed.roi");
    let pos_table = binding.get("ts.embed.pos");
    let roi_rows = g.embed_lookup(roi_table, (0..t).map(|i| tokens.roi_index(i)).collect())?;
    let pos_rows = g.embed_lookup(pos_table, (0..t).map(|i| tokens.patch_index(i)).collect())?;
    let emb = g.add(emb, roi_rows)?;
    let emb = g.add(emb, pos_rows)?;

    let cls = binding.get("ts.cls");
    let mut seq = g.concat(0, &[cls, emb])?;

    for i in 0..cfg.layers {
        let ln1_g = binding.get(&format!("ts.layer{i}.ln1.g"));
        let ln1_b = binding.get(&format!("ts.layer{i}.ln1.b"));
        let normed = g.layernorm(seq, ln1_g, ln1_b)?;
        let attn = multi_head_attention(
            g,
            binding,
            &format!("ts.layer{i}.attn"),
            normed,
            cfg.heads,
            cfg.attention,
        )?;
        seq = g.add(seq, attn)?;

        let ln2_g = binding.get(&format!("ts.layer{i}.ln2.g"));
        let ln2_b = binding.get(&format!("ts.layer{i}.ln2.b"));
        let normed = g.layernorm(seq, ln2_g, ln2_b)?;
        let w1 = binding.get(&format!("ts.layer{i}.ff.w1"));
        let b1 = binding.get(&format!("ts.layer{i}.ff.b1"));
        let w2 = binding.get(&format!("ts.layer{i}.ff.w2"));
        let b2 = binding.get(&format!("ts.layer{i}.ff.b2"));
        let h = g.matmul(normed, w1)?;
        let h = g.add(h, b1)?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, w2)?;
        let h = g.add(h, b2)?;
        seq = g.add(seq, h)?;
    }

    let fin_g = binding.get("ts.final_ln.g");
    let fin_b = binding.get("ts.final_ln.b");
    g.layernorm(seq, fin_g, fin_b)
}

/// Class-token feature as a rank-1 tensor of length `model_dim`.
pub fn ts_forward<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &TsEncoderConfig,
    tokens: &TokenSequence,
) -> Result<NodeId> {
    let seq = ts_forward_sequence(g, binding, cfg, tokens)?;
    let cls_row = g.slice(seq, 0, 0, 1)?;
    g.reshape(cls_row, vec![cfg.model_dim])
}

/// Per-token features after the final layer norm, class token excluded,
/// shape (tokens, model_dim). Used by the masked-reconstruction head.
pub fn ts_forward_tokens<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &TsEncoderConfig,
    tokens: &TokenSequence,
) -> Result<NodeId> {
    let seq = ts_forward_sequence(g, binding, cfg, tokens)?;
    g.slice(seq, 0, 1, tokens.len())
}
