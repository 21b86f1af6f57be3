//! Integrated-gradients attribution over the feature entering the
//! prediction head, with the zero vector as baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::PreparedSubject;
use crate::model::{FmmModel, ParamBinding};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};

pub const DEFAULT_STEPS: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Attribution {
    /// Per-dimension attribution, same length as the head input.
    pub attributions: Vec<f64>,
    /// Model output at the input and at the baseline.
    pub prediction: f64,
    pub baseline_prediction: f64,
    /// |sum(attributions) - (prediction - baseline_prediction)|
    pub completeness_residual: f64,
}

/// Midpoint-rule integrated gradients of a scalar function along the
/// straight path from `baseline` to `x`. `f` must rebuild the function on
/// the given graph with the supplied input leaf.
pub fn integrated_gradients<B>(
    x: &[f64],
    baseline: &[f64],
    steps: usize,
    f: B,
) -> Result<Attribution>
where
    B: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if x.is_empty() || x.len() != baseline.len() {
        return Err(Error::InvalidArgument(format!(
            "input length {} vs baseline length {}",
            x.len(),
            baseline.len()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("need at least one step".into()));
    }

    let eval = |point: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.constant(Tensor::from_vec(vec![point.len()], point.to_vec()).map_err(Error::Graph)?);
        let out = f(&mut g, input)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Graph(format!(
                "attribution target must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };
    let prediction = eval(x)?;
    let baseline_prediction = eval(baseline)?;

    let d = x.len();
    let mut total_grad = vec![0.0; d];
    for s in 0..steps {
        let alpha = (s as f64 + 0.5) / steps as f64;
        let point: Vec<f64> = x
            .iter()
            .zip(baseline)
            .map(|(&xi, &bi)| bi + alpha * (xi - bi))
            .collect();
        let mut g = Graph::new();
        let input = g.parameter(Tensor::from_vec(vec![d], point).map_err(Error::Graph)?);
        let out = f(&mut g, input)?;
        if g.value(out).numel() != 1 {
            return Err(Error::Graph(format!(
                "attribution target must be scalar, got shape {:?}",
                g.value(out).shape()
            )));
        }
        // single-element mean collapses any 1-element shape to the rank-0
        // scalar that backward expects
        let out = g.mean(out)?;
        let grads = g.backward(out)?;
        let grad = grads
            .get(&input)
            .ok_or_else(|| Error::Graph("target does not depend on the input".into()))?;
        for (acc, &gv) in total_grad.iter_mut().zip(grad.data()) {
            *acc += gv;
        }
    }

    let attributions: Vec<f64> = x
        .iter()
        .zip(baseline)
        .zip(&total_grad)
        .map(|((&xi, &bi), &gsum)| (xi - bi) * gsum / steps as f64)
        .collect();
    let completeness_residual =
        (attributions.iter().sum::<f64>() - (prediction - baseline_prediction)).abs();
    Ok(Attribution {
        attributions,
        prediction,
        baseline_prediction,
        completeness_residual,
    })
}

fn bind_frozen<F: Scalar>(model: &FmmModel<F>, g: &mut Graph<F>) -> ParamBinding {
    let mut binding = ParamBinding::new();
    for (name, tensor) in model.params.iter() {
        let id = g.frozen(tensor.clone());
        binding.insert(name.clone(), id);
    }
    binding
}

impl<F: Scalar> FmmModel<F> {
    /// Copy with every parameter converted to another float width.
    pub fn cast<G: Scalar>(&self) -> FmmModel<G> {
        FmmModel {
            modality: self.modality,
            ts: self.ts.clone(),
            fc: self.fc.clone(),
            fusion: self.fusion,
            params: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
            ts_frozen: self.ts_frozen,
            pretrained: self.pretrained,
            init_seed: self.init_seed,
        }
    }
}

/// Attribution for one subject. The integration variable is the feature
/// vector entering the head; the target is the post-sigmoid probability.
pub fn attribute_subject(
    model: &FmmModel<f32>,
    subject: &PreparedSubject,
    steps: usize,
) -> Result<Attribution> {
    let model64: FmmModel<f64> = model.cast();
    let feature = {
        let mut g: Graph<f64> = Graph::new();
        let binding = bind_frozen(&model64, &mut g);
        let out = model64.forward(&mut g, &binding, Some(&subject.tokens), Some(&subject.fc))?;
        g.value(out.feature).data().to_vec()
    };
    let baseline = vec![0.0; feature.len()];
    let d = feature.len();
    let head_w = model64.params["head.w"].clone();
    let head_b = model64.params["head.b"].clone();
    integrated_gradients(&feature, &baseline, steps, move |g, input| {
        let row = g.reshape(input, vec![1, d])?;
        let w = g.frozen(head_w.clone());
        let b = g.frozen(head_b.clone());
        let logit = g.matmul(row, w)?;
        let logit = g.add(logit, b)?;
        g.sigmoid(logit)
    })
}

/// Mean absolute attribution per stream for a concatenation-fused model:
/// (time-series share, connectivity share).
pub fn modality_importance(attribution: &Attribution, m: usize) -> Result<(f64, f64)> {
    if attribution.attributions.len() != 2 * m {
        return Err(Error::InvalidArgument(format!(
            "expected a concatenated feature of width {}, got {}",
            2 * m,
            attribution.attributions.len()
        )));
    }
    let mean_abs = |slice: &[f64]| slice.iter().map(|v| v.abs()).sum::<f64>() / m as f64;
    Ok((
        mean_abs(&attribution.attributions[..m]),
        mean_abs(&attribution.attributions[m..]),
    ))
}

#[derive(Debug, Serialize)]
struct AttributionRecord<'a> {
    subject_id: &'a str,
    steps: usize,
    prediction: f64,
    baseline_prediction: f64,
    completeness_residual: f64,
    attributions: &'a [f64],
}

/// Canonical JSON dump of per-subject attributions.
pub fn write_attributions_json(
    path: &Path,
    entries: &[(String, usize, Attribution)],
) -> Result<()> {
    let records: Vec<AttributionRecord> = entries
        .iter()
        .map(|(id, steps, a)| AttributionRecord {
            subject_id: id,
            steps: *steps,
            prediction: a.prediction,
            baseline_prediction: a.baseline_prediction,
            completeness_residual: a.completeness_residual,
            attributions: &a.attributions,
        })
        .collect();
    let value = serde_json::to_value(&records).expect("records serialize");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&value).expect("renders"))?;
    Ok(())
}

/// Flat CSV profile: one row per (subject, dimension).
pub fn write_profile_csv(path: &Path, entries: &[(String, usize, Attribution)]) -> Result<()> {
    let mut text = String::from("subject_id,dimension,attribution\n");
    for (id, _, a) in entries {
        for (dim, v) in a.attributions.iter().enumerate() {
            text.push_str(&format!("{id},{dim},{v}\n"));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(g: &mut Graph<f64>, input: NodeId) -> Result<NodeId> {
        // f(x) = 2 x0 - 3 x1 + 0.5 x2 + 1
        let w = g.constant(Tensor::from_vec(vec![3, 1], vec![2.0, -3.0, 0.5]).unwrap());
        let row = g.reshape(input, vec![1, 3])?;
        let wx = g.matmul(row, w)?;
        let c = g.constant(Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap());
        g.add(wx, c)
    }

    fn sigmoid_target(g: &mut Graph<f64>, input: NodeId) -> Result<NodeId> {
        let z = affine(g, input)?;
        g.sigmoid(z)
    }

    #[test]
    fn affine_functions_are_attributed_exactly() {
        let x = [0.7, -1.2, 2.0];
        let b = [0.0; 3];
        for steps in [1, 3, 50] {
            let a = integrated_gradients(&x, &b, steps, affine).unwrap();
            assert!((a.attributions[0] - 2.0 * 0.7).abs() < 1e-12);
            assert!((a.attributions[1] - (-3.0) * (-1.2)).abs() < 1e-12);
            assert!((a.attributions[2] - 0.5 * 2.0).abs() < 1e-12);
            assert!(a.completeness_residual < 1e-12, "steps {steps}");
        }
    }

    #[test]
    fn completeness_residual_shrinks_with_steps() {
        let x = [0.7, -1.2, 2.0];
        let b = [0.0; 3];
        let mut last = f64::INFINITY;
        for steps in [32, 128, 512, 1024] {
            let a = integrated_gradients(&x, &b, steps, sigmoid_target).unwrap();
            assert!(
                a.completeness_residual < last,
                "steps {steps}: {} not below {last}",
                a.completeness_residual
            );
            last = a.completeness_residual;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn nonlinear_target_converges() {
        let x = [0.7, -1.2, 2.0];
        let b = [0.0; 3];
        let a = integrated_gradients(&x, &b, 512, sigmoid_target).unwrap();
        assert!(a.completeness_residual < 1e-3);
    }

    #[test]
    fn attribution_is_linear_in_the_target() {
        let x = [0.4, 1.1, -0.3];
        let b = [0.1, 0.0, 0.2];
        let f1 = |g: &mut Graph<f64>, i: NodeId| affine(g, i);
        let f2 = |g: &mut Graph<f64>, i: NodeId| {
            let a = affine(g, i)?;
            g.scale(a, 2.5)
        };
        let combined = |g: &mut Graph<f64>, i: NodeId| {
            let a = affine(g, i)?;
            let scaled = g.scale(a, 2.5)?;
            g.add(a, scaled)
        };
        let a1 = integrated_gradients(&x, &b, 64, f1).unwrap();
        let a2 = integrated_gradients(&x, &b, 64, f2).unwrap();
        let ac = integrated_gradients(&x, &b, 64, combined).unwrap();
        for j in 0..3 {
            assert!((ac.attributions[j] - (a1.attributions[j] + a2.attributions[j])).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_input_and_baseline_gives_zero() {
        let x = [0.4, 1.1, -0.3];
        let a = integrated_gradients(&x, &x, 16, sigmoid_target).unwrap();
        assert!(a.attributions.iter().all(|&v| v == 0.0));
        assert!(a.completeness_residual < 1e-15);
    }

    #[test]
    fn subject_attribution_matches_head_width() {
        use crate::model::{FmmModel, FusionKind, Modality};
        let (mut ts, fc) = crate::model::tiny_configs();
        ts.max_rois = 8;
        let model: FmmModel<f32> =
            FmmModel::init(Modality::Both, ts, fc, FusionKind::Concat, 31).unwrap();
        let profile = {
            let mut p = crate::data::GeneratorProfile::openneuro_like();
            p.n_rois = 8;
            p.sigma0 = crate::data::block_covariance(8, 2, 0.6);
            p.sigma1 = crate::data::block_covariance(8, 4, 0.6);
            p.n_timepoints = 8;
            p.cohort = vec![
                crate::data::CohortCell { label: 1, drug: "placebo".into(), count: 1 },
                crate::data::CohortCell { label: 0, drug: "placebo".into(), count: 1 },
            ];
            p
        };
        let cohort = crate::data::generate_synthetic_cohort(&profile, 2).unwrap();
        let subjects = crate::harness::prepare_cohort(&cohort, 8, 4).unwrap();
        let attr = attribute_subject(&model, &subjects[0], 32).unwrap();
        assert_eq!(attr.attributions.len(), model.head_input_dim());
        let (ts_share, fc_share) = modality_importance(&attr, 8).unwrap();
        assert!(ts_share >= 0.0 && fc_share >= 0.0);
        // head input feature is linear in the head, so midpoint is near-exact
        assert!(attr.completeness_residual < 1e-3);
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let attr = Attribution {
            attributions: vec![0.25, -0.5],
            prediction: 0.75,
            baseline_prediction: 0.5,
            completeness_residual: 0.0,
        };
        let entries = vec![("sub-000".to_string(), 50usize, attr)];
        let json_path = dir.path().join("attribution.json");
        let csv_path = dir.path().join("attribution_profile.csv");
        write_attributions_json(&json_path, &entries).unwrap();
        write_profile_csv(&csv_path, &entries).unwrap();
        let text = std::fs::read_to_string(&json_path).unwrap();
        assert!(text.contains("sub-000"));
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(csv, "subject_id,dimension,attribution\nsub-000,0,0.25\nsub-000,1,-0.5\n");
    }
}
