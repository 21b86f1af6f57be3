//! Fusion schemes combining the time-series feature R_T with the
//! connectivity feature R_C.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Scalar};

use super::params::ParamBinding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Concatenation, output width 2M.
    Concat,
    /// Elementwise sum, output width M.
    Sum,
    /// Single-token cross attention, query R_T against key/value R_C,
    /// residual on R_T.
    CrossUni,
    /// Cross attention in both directions, outputs summed.
    CrossBi,
    /// Two-expert mixture with a softmax gate over the concatenation.
    Moe,
}

impl FusionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "sum" => Ok(FusionKind::Sum),
            "cross_uni" => Ok(FusionKind::CrossUni),
            "cross_bi" => Ok(FusionKind::CrossBi),
            "moe" => Ok(FusionKind::Moe),
            other => Err(Error::InvalidArgument(format!(
                "unknown fusion `{other}` (expected concat|sum|cross_uni|cross_bi|moe)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::Sum => "sum",
            FusionKind::CrossUni => "cross_uni",
            FusionKind::CrossBi => "cross_bi",
            FusionKind::Moe => "moe",
        }
    }

    /// Width of the fused feature given encoder width `m`.
    pub fn output_dim(&self, m: usize) -> usize {
        match self {
            FusionKind::Concat => 2 * m,
            _ => m,
        }
    }

    pub fn param_shapes(&self, prefix: &str, m: usize) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            out.insert(format!("{prefix}{name}"), shape);
        };
        match self {
            FusionKind::Concat | FusionKind::Sum => {}
            FusionKind::CrossUni => {
                for tag in ["q", "k", "v", "o"] {
                    put(format!("t2c.w{tag}"), vec![m, m]);
                }
            }
            FusionKind::CrossBi => {
                for dir in ["t2c", "c2t"] {
                    for tag in ["q", "k", "v", "o"] {
                        put(format!("{dir}.w{tag}"), vec![m, m]);
                    }
                }
            }
            FusionKind::Moe => {
                put("gate.w".into(), vec![2 * m, 2]);
                put("gate.b".into(), vec![2]);
                put("expert0.w".into(), vec![2 * m, m]);
                put("expert0.b".into(), vec![m]);
                put("expert1.w".into(), vec![2 * m, m]);
                put("expert1.b".into(), vec![m]);
            }
        }
        out
    }
}

/// One direction of single-token cross attention: the residual stream is the
/// query side; the other feature supplies key and value.
fn cross_direction<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    prefix: &str,
    query: NodeId,
    context: NodeId,
    m: usize,
) -> Result<NodeId> {
    let q2 = g.reshape(query, vec![1, m])?;
    let c2 = g.reshape(context, vec![1, m])?;
    let wq = binding.get(&format!("{prefix}.wq"));
    let wk = binding.get(&format!("{prefix}.wk"));
    let wv = binding.get(&format!("{prefix}.wv"));
    let wo = binding.get(&format!("{prefix}.wo"));
    let q = g.matmul(q2, wq)?;
    let k = g.matmul(c2, wk)?;
    let v = g.matmul(c2, wv)?;
    let kt = g.transpose(k)?;
    let score = g.matmul(q, kt)?;
    let score = g.scale(score, 1.0 / (m as f64).sqrt())?;
    let attn = g.softmax(score)?; // (1,1); a single key makes this weight 1
    let ctx = g.matmul(attn, v)?;
    let out = g.matmul(ctx, wo)?;
    let out = g.add(q2, out)?;
    g.reshape(out, vec![m])
}

/// Fuse rank-1 features `r_t` and `r_c`, both of length `m`.
pub fn fuse<F: Scalar>(
    g: &mut Graph<F>,
    binding: &ParamBinding,
    kind: FusionKind,
    r_t: NodeId,
    r_c: NodeId,
    m: usize,
) -> Result<NodeId> {
    match kind {
        FusionKind::Concat => g.concat(0, &[r_t, r_c]),
        FusionKind::Sum => g.add(r_t, r_c),
        FusionKind::CrossUni => cross_direction(g, binding, "fuse.t2c", r_t, r_c, m),
        FusionKind::CrossBi => {
            let a = cross_direction(g, binding, "fuse.t2c", r_t, r_c, m)?;
            let b = cross_direction(g, binding, "fuse.c2t", r_c, r_t, m)?;
            g.add(a, b)
        }
        FusionKind::Moe => {
            let joint = g.concat(0, &[r_t, r_c])?;
            let joint2 = g.reshape(joint, vec![1, 2 * m])?;
            let gw = binding.get("fuse.gate.w");
            let gb = binding.get("fuse.gate.b");
            let logits = g.matmul(joint2, gw)?;
            let logits = g.add(logits, gb)?;
            let gates = g.softmax(logits)?; // (1,2)
            let mut mixed = None;
            for e in 0..2 {
                let ew = binding.get(&format!("fuse.expert{e}.w"));
                let eb = binding.get(&format!("fuse.expert{e}.b"));
                let out = g.matmul(joint2, ew)?;
                let out = g.add(out, eb)?;
                let gate = g.slice(gates, 1, e, 1)?; // (1,1) broadcast factor
                let weighted = g.mul(out, gate)?;
                mixed = Some(match mixed {
                    None => weighted,
                    Some(acc) => g.add(acc, weighted)?,
                });
            }
            let mixed = mixed.expect("two experts");
            g.reshape(mixed, vec![m])
        }
    }
}
