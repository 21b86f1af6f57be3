//! Dual-stream model: transformer time-series encoder, residual-CNN
//! connectivity encoder, fusion, and a linear prediction head.

pub mod checkpoint;
pub mod fc_encoder;
pub mod fusion;
pub mod params;
pub mod ts_encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::preprocess::{ConnectivityMatrix, TokenSequence};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use fc_encoder::{fc_forward, FcEncoderConfig};
pub use fusion::{fuse, FusionKind};
pub use params::{
    bind_params, init_tensor, named_grads, validate_shapes, Init, ParamBinding, ParamMap,
};
pub use ts_encoder::{
    ts_forward, ts_forward_sequence, ts_forward_tokens, AttentionKind, TsEncoderConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Ts,
    Fc,
    Both,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ts" => Ok(Modality::Ts),
            "fc" => Ok(Modality::Fc),
            "both" => Ok(Modality::Both),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality `{other}` (expected ts|fc|both)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Ts => "ts",
            Modality::Fc => "fc",
            Modality::Both => "both",
        }
    }

    pub fn uses_ts(&self) -> bool {
        matches!(self, Modality::Ts | Modality::Both)
    }

    pub fn uses_fc(&self) -> bool {
        matches!(self, Modality::Fc | Modality::Both)
    }
}

pub struct ModelOutput {
    /// Feature fed to the head, rank-1.
    pub feature: NodeId,
    /// Raw decision score, shape (1, 1).
    pub logit: NodeId,
}

#[derive(Debug, Clone)]
pub struct FmmModel<F: Scalar> {
    pub modality: Modality,
    pub ts: TsEncoderConfig,
    pub fc: FcEncoderConfig,
    pub fusion: FusionKind,
    pub params: ParamMap<F>,
    /// When set, time-series encoder parameters bind as constants and stay
    /// byte-identical through training.
    pub ts_frozen: bool,
    pub pretrained: bool,
    pub init_seed: u64,
}

impl<F: Scalar> FmmModel<F> {
    /// Feature width entering the head.
    pub fn head_input_dim(&self) -> usize {
        match self.modality {
            Modality::Ts => self.ts.model_dim,
            Modality::Fc => self.fc.output_dim,
            Modality::Both => self.fusion.output_dim(self.ts.model_dim),
        }
    }

    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        if self.modality.uses_ts() {
            out.extend(self.ts.param_shapes("ts."));
        }
        if self.modality.uses_fc() {
            out.extend(self.fc.param_shapes("fc."));
        }
        if self.modality == Modality::Both {
            out.extend(self.fusion.param_shapes("fuse.", self.ts.model_dim));
        }
        out.insert("head.w".into(), vec![self.head_input_dim(), 1]);
        out.insert("head.b".into(), vec![1]);
        out
    }

    pub fn validate_config(&self) -> Result<()> {
        self.ts.validate()?;
        self.fc.validate()?;
        if self.modality == Modality::Both && self.ts.model_dim != self.fc.output_dim {
            return Err(Error::Config(format!(
                "encoder widths disagree: transformer {} vs connectivity {}",
                self.ts.model_dim, self.fc.output_dim
            )));
        }
        Ok(())
    }

    /// Fresh model with deterministic initialization from `seed`.
    pub fn init(
        modality: Modality,
        ts: TsEncoderConfig,
        fc: FcEncoderConfig,
        fusion: FusionKind,
        seed: u64,
    ) -> Result<Self> {
        let mut model = FmmModel {
            modality,
            ts,
            fc,
            fusion,
            params: BTreeMap::new(),
            ts_frozen: false,
            pretrained: false,
            init_seed: seed,
        };
        model.validate_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape) in model.expected_shapes() {
            let tensor = init_tensor(&shape, init_rule(&name, &shape), &mut rng);
            model.params.insert(name, tensor);
        }
        Ok(model)
    }

    /// Bind all parameters into a graph, honoring the freeze flag for the
    /// time-series encoder.
    pub fn bind(&self, g: &mut Graph<F>) -> ParamBinding {
        let mut binding = ParamBinding::new();
        for (name, tensor) in self.params.iter() {
            let frozen = self.ts_frozen && name.starts_with("ts.");
            let id = if frozen {
                g.frozen(tensor.clone())
            } else {
                g.parameter(tensor.clone())
            };
            binding.insert(name.clone(), id);
        }
        binding
    }

    /// Encoder features for one subject; entries are present per modality.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        binding: &ParamBinding,
        tokens: Option<&TokenSequence>,
        fc: Option<&ConnectivityMatrix>,
    ) -> Result<(Option<NodeId>, Option<NodeId>)> {
        let r_t = if self.modality.uses_ts() {
            let tokens = tokens.ok_or_else(|| {
                Error::InvalidArgument("modality requires token input".into())
            })?;
            Some(ts_forward(g, binding, &self.ts, tokens)?)
        } else {
            None
        };
        let r_c = if self.modality.uses_fc() {
            let fc = fc.ok_or_else(|| {
                Error::InvalidArgument("modality requires connectivity input".into())
            })?;
            Some(fc_forward(g, binding, &self.fc, fc)?)
        } else {
            None
        };
        Ok((r_t, r_c))
    }

    /// Fusion plus linear head over already-encoded features.
    pub fn head(
        &self,
        g: &mut Graph<F>,
        binding: &ParamBinding,
        r_t: Option<NodeId>,
        r_c: Option<NodeId>,
    ) -> Result<ModelOutput> {
        let feature = match self.modality {
            Modality::Ts => r_t.ok_or_else(|| Error::Graph("missing R_T".into()))?,
            Modality::Fc => r_c.ok_or_else(|| Error::Graph("missing R_C".into()))?,
            Modality::Both => {
                let r_t = r_t.ok_or_else(|| Error::Graph("missing R_T".into()))?;
                let r_c = r_c.ok_or_else(|| Error::Graph("missing R_C".into()))?;
                fuse(g, binding, self.fusion, r_t, r_c, self.ts.model_dim)?
            }
        };
        let d = self.head_input_dim();
        let row = g.reshape(feature, vec![1, d])?;
        let w = binding.get("head.w");
        let b = binding.get("head.b");
        let logit = g.matmul(row, w)?;
        let logit = g.add(logit, b)?;
        Ok(ModelOutput { feature, logit })
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        binding: &ParamBinding,
        tokens: Option<&TokenSequence>,
        fc: Option<&ConnectivityMatrix>,
    ) -> Result<ModelOutput> {
        let (r_t, r_c) = self.encode(g, binding, tokens, fc)?;
        self.head(g, binding, r_t, r_c)
    }

    /// Copy updated tensors back from an optimizer step, keyed by name.
    pub fn absorb(&mut self, updated: BTreeMap<String, Tensor<F>>) {
        for (name, tensor) in updated {
            self.params.insert(name, tensor);
        }
    }
}

fn init_rule(name: &str, shape: &[usize]) -> Init {
    if name.ends_with("cls") || name.ends_with("embed.roi") || name.ends_with("embed.pos") {
        Init::Embedding
    } else if name.ends_with(".gn2.g") {
        // residual blocks start as identity
        Init::Zero
    } else if name.ends_with(".g") {
        Init::One
    } else if name.ends_with(".b") || name.ends_with("b1") || name.ends_with("b2")
        || name.ends_with(".bq") || name.ends_with(".bk") || name.ends_with(".bv")
        || name.ends_with(".bo")
    {
        Init::Zero
    } else if shape.len() == 4 {
        Init::KaimingUniform(shape[1] * shape[2] * shape[3])
    } else {
        Init::KaimingUniform(shape[0])
    }
}

/// Mean binary cross-entropy computed from logits via the stable
/// softplus form: mean(softplus(z) - y * z).
pub fn bce_with_logits<F: Scalar>(
    g: &mut Graph<F>,
    logits: &[NodeId],
    labels: &[u8],
) -> Result<NodeId> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} logits vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let batch = g.concat(0, logits)?; // (B, 1)
    let y = g.constant(Tensor::from_vec(
        vec![labels.len(), 1],
        labels
            .iter()
            .map(|&l| if l > 0 { F::ONE } else { F::ZERO })
            .collect(),
    ).map_err(Error::Graph)?);
    let yz = g.mul(batch, y)?;
    let sp = g.softplus(batch)?;
    let per_sample = g.sub(sp, yz)?;
    g.mean(per_sample)
}

/// Reference binary cross-entropy on probabilities, averaged over samples.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &l) in probs.iter().zip(labels) {
        if l > 1 {
            return Err(Error::InvalidArgument(format!("label {l} outside {{0,1}}")));
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total += if l == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

/// Tiny two-modality configuration used by gradient checks.
pub fn tiny_configs() -> (TsEncoderConfig, FcEncoderConfig) {
    (
        TsEncoderConfig {
            model_dim: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            patch_len: 4,
            max_rois: 2,
            max_patches: 2,
            attention: AttentionKind::Exact,
        },
        FcEncoderConfig {
            widths: [4, 4, 4, 4],
            groups: 4,
            output_dim: 8,
        },
    )
}

/// Worst relative error between reverse-mode and finite-difference gradients
/// over every parameter of a tiny two-modality model, in f64.
pub fn full_model_grad_error(seed: u64) -> Result<f64> {
    use rand::Rng;

    let (ts, fc_cfg) = tiny_configs();
    let mut model: FmmModel<f64> =
        FmmModel::init(Modality::Both, ts, fc_cfg, FusionKind::Concat, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Move off the exact init point: zero-initialized residual gammas put
    // every block output precisely on the relu kink, where one-sided
    // derivatives and finite differences legitimately disagree.
    for tensor in model.params.values_mut() {
        for v in tensor.data_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0f64);
        }
    }
    let series = crate::preprocess::RoiTimeSeries::new(
        2,
        8,
        (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let tokens = crate::preprocess::patchify(&series, 4)?;
    let raw = crate::preprocess::RoiTimeSeries::new(
        8,
        12,
        (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let fc = crate::preprocess::compute_fc(&raw)?;

    let names: Vec<String> = model.params.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| model.params[n].clone()).collect();
    let model_ref = &model;
    let names_ref = &names;
    let tokens_ref = &tokens;
    let fc_ref = &fc;
    let err = crate::numerics::gradcheck::max_rel_error(&inputs, 1e-5, move |g, ids| {
        let mut binding = ParamBinding::new();
        for (name, &id) in names_ref.iter().zip(ids) {
            binding.insert(name.clone(), id);
        }
        let out = model_ref
            .forward(g, &binding, Some(tokens_ref), Some(fc_ref))
            .expect("tiny forward succeeds");
        bce_with_logits(g, &[out.logit], &[1]).expect("loss builds")
    });
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{compute_fc, patchify, RoiTimeSeries};
    use rand::Rng;

    fn toy_tokens(seed: u64, n_rois: usize, t: usize, patch: usize) -> crate::preprocess::TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series = RoiTimeSeries::new(
            n_rois,
            t,
            (0..n_rois * t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        patchify(&series, patch).unwrap()
    }

    fn toy_fc(seed: u64, n: usize) -> crate::preprocess::ConnectivityMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series = RoiTimeSeries::new(
            n,
            2 * n,
            (0..2 * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        compute_fc(&series).unwrap()
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let err = full_model_grad_error(11).unwrap();
        assert!(err <= 1e-6, "worst relative error {err:.3e}");
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let (ts, fc) = tiny_configs();
        let a: FmmModel<f32> =
            FmmModel::init(Modality::Both, ts.clone(), fc.clone(), FusionKind::Concat, 5).unwrap();
        let b: FmmModel<f32> =
            FmmModel::init(Modality::Both, ts.clone(), fc.clone(), FusionKind::Concat, 5).unwrap();
        let c: FmmModel<f32> =
            FmmModel::init(Modality::Both, ts, fc, FusionKind::Concat, 6).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn frozen_encoder_gets_no_gradients() {
        let (ts, fc_cfg) = tiny_configs();
        let mut model: FmmModel<f64> =
            FmmModel::init(Modality::Both, ts, fc_cfg, FusionKind::Concat, 3).unwrap();
        model.ts_frozen = true;
        let tokens = toy_tokens(1, 2, 8, 4);
        let fc = toy_fc(2, 8);
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let out = model.forward(&mut g, &binding, Some(&tokens), Some(&fc)).unwrap();
        let loss = bce_with_logits(&mut g, &[out.logit], &[0]).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, &id) in binding.iter() {
            if name.starts_with("ts.") {
                assert!(!grads.contains_key(&id), "{name} received a gradient");
            }
        }
        let head_id = binding.get("head.w");
        assert!(grads.contains_key(&head_id));
    }

    #[test]
    fn concat_fusion_preserves_both_features() {
        let (ts, fc_cfg) = tiny_configs();
        let model: FmmModel<f64> =
            FmmModel::init(Modality::Both, ts, fc_cfg, FusionKind::Concat, 9).unwrap();
        let tokens = toy_tokens(3, 2, 8, 4);
        let fc = toy_fc(4, 8);
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let (r_t, r_c) = model.encode(&mut g, &binding, Some(&tokens), Some(&fc)).unwrap();
        let out = model.head(&mut g, &binding, r_t, r_c).unwrap();
        let fused = g.value(out.feature).data().to_vec();
        let rt = g.value(r_t.unwrap()).data().to_vec();
        let rc = g.value(r_c.unwrap()).data().to_vec();
        assert_eq!(&fused[..8], &rt[..]);
        assert_eq!(&fused[8..], &rc[..]);
    }

    #[test]
    fn every_fusion_kind_runs_and_matches_width() {
        let (ts, fc_cfg) = tiny_configs();
        let tokens = toy_tokens(5, 2, 8, 4);
        let fc = toy_fc(6, 8);
        for kind in [
            FusionKind::Concat,
            FusionKind::Sum,
            FusionKind::CrossUni,
            FusionKind::CrossBi,
            FusionKind::Moe,
        ] {
            let model: FmmModel<f64> =
                FmmModel::init(Modality::Both, ts.clone(), fc_cfg.clone(), kind, 9).unwrap();
            let mut g = Graph::new();
            let binding = model.bind(&mut g);
            let out = model.forward(&mut g, &binding, Some(&tokens), Some(&fc)).unwrap();
            assert_eq!(
                g.value(out.feature).shape(),
                &[kind.output_dim(8)],
                "{}",
                kind.as_str()
            );
            assert_eq!(g.value(out.logit).shape(), &[1, 1]);
        }
    }

    #[test]
    fn nystrom_attention_agrees_with_exact() {
        let mut ts = TsEncoderConfig {
            model_dim: 16,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            patch_len: 4,
            max_rois: 8,
            max_patches: 4,
            attention: AttentionKind::Exact,
        };
        let model: FmmModel<f64> = FmmModel::init(
            Modality::Ts,
            ts.clone(),
            FcEncoderConfig { widths: [4, 4, 4, 4], groups: 4, output_dim: 16 },
            FusionKind::Concat,
            21,
        )
        .unwrap();
        let tokens = toy_tokens(7, 8, 16, 4); // 32 tokens
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let exact = ts_forward(&mut g, &binding, &ts, &tokens).unwrap();
        ts.attention = AttentionKind::Nystrom { landmarks: 8 };
        let approx = ts_forward(&mut g, &binding, &ts, &tokens).unwrap();
        let a = g.value(exact).data();
        let b = g.value(approx).data();
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos_dist = 1.0 - dot / (na * nb);
        assert!(cos_dist <= 0.1, "cosine distance {cos_dist:.4}");
    }

    #[test]
    fn default_encoder_feature_width_is_256() {
        let cfg = TsEncoderConfig::default();
        assert_eq!(cfg.model_dim, 256);
        assert_eq!(cfg.layers, 4);
        let model: FmmModel<f32> = FmmModel::init(
            Modality::Ts,
            cfg.clone(),
            FcEncoderConfig::default(),
            FusionKind::Concat,
            1,
        )
        .unwrap();
        let tokens = toy_tokens(8, 4, 40, 20); // 8 tokens of length 20
        let mut g = Graph::new();
        let binding = model.bind(&mut g);
        let r_t = ts_forward(&mut g, &binding, &cfg, &tokens).unwrap();
        assert_eq!(g.value(r_t).shape(), &[256]);
    }

    #[test]
    fn bce_reference_values() {
        let half = bce_loss(&[0.5], &[1]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let pair = bce_loss(&[0.9, 0.1], &[1, 0]).unwrap();
        assert!((pair - (-(0.9f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn logit_loss_matches_probability_loss() {
        let logits = [-1.3, 0.4, 2.2];
        let labels = [0u8, 1, 1];
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<NodeId> = logits
            .iter()
            .map(|&z| g.constant(Tensor::from_vec(vec![1, 1], vec![z]).unwrap()))
            .collect();
        let loss = bce_with_logits(&mut g, &ids, &labels).unwrap();
        let probs: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let reference = bce_loss(&probs, &labels).unwrap();
        assert!((g.value(loss).data()[0] - reference).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let (ts, fc_cfg) = tiny_configs();
        let mut model: FmmModel<f32> =
            FmmModel::init(Modality::Both, ts, fc_cfg, FusionKind::Moe, 13).unwrap();
        model.pretrained = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmtc");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model.params, loaded.params);
        assert_eq!(model.ts, loaded.ts);
        assert_eq!(model.fc, loaded.fc);
        assert_eq!(model.fusion, loaded.fusion);
        assert!(loaded.pretrained);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let (ts, fc_cfg) = tiny_configs();
        let model: FmmModel<f32> =
            FmmModel::init(Modality::Fc, ts, fc_cfg, FusionKind::Concat, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmtc");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn checkpoint_with_stray_parameter_names_it() {
        let (ts, fc_cfg) = tiny_configs();
        let mut model: FmmModel<f32> =
            FmmModel::init(Modality::Fc, ts, fc_cfg, FusionKind::Concat, 13).unwrap();
        model
            .params
            .insert("fc.stage9.block0.conv1.w".into(), Tensor::zeros(&[1]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fmtc");
        save_checkpoint(&model, &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("fc.stage9.block0.conv1.w"), "{err}");
    }
}
