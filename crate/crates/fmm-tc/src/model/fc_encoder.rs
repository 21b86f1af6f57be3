//! Residual CNN over the N x N connectivity matrix.
//!
//! An 18-layer residual topology: a 3x3 stem, four stages of two basic
//! blocks each (stages after the first downsample by stride 2, with a 1x1
//! strided shortcut), group normalization throughout, global average
//! pooling, and a linear projection to the shared feature width. The output
//! is the connectivity representation R_C.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Op, Scalar, Tensor};
use crate::preprocess::ConnectivityMatrix;

use super::params::ParamBinding;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcEncoderConfig {
    /// Channel widths of the four stages.
    pub widths: [usize; 4],
    pub groups: usize,
    pub output_dim: usize,
}

impl Default for FcEncoderConfig {
    fn default() -> Self {
        FcEncoderConfig {
            widths: [64, 128, 256, 512],
            groups: 4,
            output_dim: 256,
        }
    }
}

impl FcEncoderConfig {
    /// Small configuration for benchmarks and test suites.
    pub fn desk() -> Self {
        FcEncoderConfig {
            widths: [8, 16, 32, 64],
            groups: 4,
            output_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.groups == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        for w in self.widths {
            if w == 0 || w % self.groups != 0 {
                return Err(Error::Config(format!(
                    "stage width {w} must be a positive multiple of groups {}",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    pub fn param_shapes(&self, prefix: &str) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            out.insert(format!("{prefix}{name}"), shape);
        };
        let w0 = self.widths[0];
        put("stem.conv.w".into(), vec![w0, 1, 3, 3]);
        put("stem.conv.b".into(), vec![w0]);
        put("stem.gn.g".into(), vec![w0]);
        put("stem.gn.b".into(), vec![w0]);
        let mut in_ch = w0;
        for (s, &ch) in self.widths.iter().enumerate() {
            for b in 0..2 {
                let p = format!("stage{s}.block{b}");
                put(format!("{p}.conv1.w"), vec![ch, in_ch, 3, 3]);
                put(format!("{p}.conv1.b"), vec![ch]);
                put(format!("{p}.gn1.g"), vec![ch]);
                put(format!("{p}.gn1.b"), vec![ch]);
                put(format!("{p}.conv2.w"), vec![ch, ch, 3, 3]);
                put(format!("{p}.conv2.b"), vec![ch]);
                put(format!("{p}.gn2.g"), vec![ch]);
                put(format!("{p}.gn2.b"), vec![ch]);
                if b == 0 && s > 0 {
                    put(format!("{p}.down.w"), vec![ch, in_ch, 1, 1]);
                    put(format!("{p}.down.b"), vec![ch]);
                    put(format!("{p}.down.gn.g"), vec![ch]);
                    put(format!("{p}.down.gn.b"), vec![ch]);
                }
                in_ch = ch;
            }
        }
        put("proj.w".into(), vec![self.widths[3], self.output_dim]);
        put("proj.b".into(), vec![self.output_dim]);
        out
    }
}

fn group_norm<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    groups: usize,
) -> Result<NodeId> {
    g.apply(Op::GroupNorm { groups, eps: 1e-5 }, &[x, gamma, beta])
}

fn basic_block<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    prefix: &str,
    x: NodeId,
    stride: usize,
    downsample: bool,
    groups: usize,
) -> Result<NodeId> {
    let c1w = binding.get(&format!("{prefix}.conv1.w"));
    let c1b = binding.get(&format!("{prefix}.conv1.b"));
    let h = g.apply(Op::Conv2d { stride, pad: 1 }, &[x, c1w, c1b])?;
    let g1g = binding.get(&format!("{prefix}.gn1.g"));
    let g1b = binding.get(&format!("{prefix}.gn1.b"));
    let h = group_norm(g, h, g1g, g1b, groups)?;
    let h = g.relu(h)?;

    let c2w = binding.get(&format!("{prefix}.conv2.w"));
    let c2b = binding.get(&format!("{prefix}.conv2.b"));
    let h = g.apply(Op::Conv2d { stride: 1, pad: 1 }, &[h, c2w, c2b])?;
    let g2g = binding.get(&format!("{prefix}.gn2.g"));
    let g2b = binding.get(&format!("{prefix}.gn2.b"));
    let h = group_norm(g, h, g2g, g2b, groups)?;

    let shortcut = if downsample {
        let dw = binding.get(&format!("{prefix}.down.w"));
        let db = binding.get(&format!("{prefix}.down.b"));
        let s = g.apply(Op::Conv2d { stride, pad: 0 }, &[x, dw, db])?;
        let dg = binding.get(&format!("{prefix}.down.gn.g"));
        let dbeta = binding.get(&format!("{prefix}.down.gn.b"));
        group_norm(g, s, dg, dbeta, groups)?
    } else {
        x
    };
    let sum = g.add(h, shortcut)?;
    g.relu(sum)
}

/// Run the encoder over one connectivity matrix; returns a rank-1 feature of
/// length `output_dim`.
pub fn fc_forward<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    cfg: &FcEncoderConfig,
    fc: &ConnectivityMatrix,
) -> Result<NodeId> {
    let n = fc.n();
    if n < 4 {
        return Err(Error::shape(
            "fc_forward",
            format!("connectivity side {n} too small for four stages"),
        ));
    }
    let x = g.constant(Tensor::from_vec(
        vec![1, n, n],
        fc.data().iter().map(|&v| F::from_f64(v)).collect(),
    ).map_err(Error::Graph)?);

    let sw = binding.get("fc.stem.conv.w");
    let sb = binding.get("fc.stem.conv.b");
    let mut h = g.apply(Op::Conv2d { stride: 1, pad: 1 }, &[x, sw, sb])?;
    let sg = binding.get("fc.stem.gn.g");
    let sbeta = binding.get("fc.stem.gn.b");
    h = group_norm(g, h, sg, sbeta, cfg.groups)?;
    h = g.relu(h)?;

    for s in 0..cfg.widths.len() {
        for b in 0..2 {
            let first = b == 0;
            let stride = if first && s > 0 { 2 } else { 1 };
            let downsample = first && s > 0;
            h = basic_block(
                g,
                binding,
                &format!("fc.stage{s}.block{b}"),
                h,
                stride,
                downsample,
                cfg.groups,
            )?;
        }
    }

    let side = g.value(h).shape()[1];
    let pooled = g.apply(
        Op::AvgPool2d {
            kernel: side,
            stride: side,
        },
        &[h],
    )?;
    let flat = g.reshape(pooled, vec![1, cfg.widths[3]])?;
    let pw = binding.get("fc.proj.w");
    let pb = binding.get("fc.proj.b");
    let projected = g.matmul(flat, pw)?;
    let projected = g.add(projected, pb)?;
    g.reshape(projected, vec![cfg.output_dim])
}
