//! Deterministic cohort synthesis.
//!
//! Per subject: latent Gaussian draws with the class covariance (perturbed
//! per drug), an AR(1) temporal filter scaled to keep the stationary
//! covariance equal to the template, then observation noise. Every value is
//! rounded to f32 so on-disk round trips are exact.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::preprocess::RoiTimeSeries;

use super::{block_covariance, Cohort, GeneratorProfile, SubjectRecord};

fn cholesky(sigma: &[f64], n: usize, context: &str) -> Result<DMatrix<f64>> {
    let m = DMatrix::from_row_slice(n, n, sigma);
    match m.clone().cholesky() {
        Some(c) => Ok(c.l()),
        None => {
            let eig = m.symmetric_eigen();
            let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            Err(Error::Data(format!(
                "{context}: covariance not positive definite (smallest eigenvalue {min:.6e})"
            )))
        }
    }
}

fn unit_direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut u {
        *v /= norm;
    }
    u
}

/// Class covariance with the drug's rank-1 perturbation applied.
pub fn effective_covariance(profile: &GeneratorProfile, label: u8, drug: &str) -> Vec<f64> {
    let n = profile.n_rois;
    let base = if label == 1 { &profile.sigma1 } else { &profile.sigma0 };
    let mut sigma = base.clone();
    if let Some(effect) = profile.drug_effects.get(drug) {
        let u = unit_direction(n, effect.direction_seed);
        for i in 0..n {
            for j in 0..n {
                sigma[i * n + j] += effect.scale * u[i] * u[j];
            }
        }
    }
    sigma
}

fn simulate_subject(
    chol: &DMatrix<f64>,
    n: usize,
    t: usize,
    ar: f64,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> RoiTimeSeries {
    let innov_scale = (1.0 - ar * ar).sqrt();
    let mut state = vec![0.0f64; n];
    let mut data = vec![0.0f64; n * t];
    let mut z = vec![0.0f64; n];
    for step in 0..t {
        // z = L * g
        let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += chol[(i, j)] * g[j];
            }
            z[i] = acc;
        }
        for i in 0..n {
            state[i] = if step == 0 {
                z[i]
            } else {
                ar * state[i] + innov_scale * z[i]
            };
            let noise: f64 = rng.sample(StandardNormal);
            // round to f32 so the FMTS payload round-trips exactly
            data[i * t + step] = (state[i] + noise_std * noise) as f32 as f64;
        }
    }
    RoiTimeSeries::new(n, t, data).expect("generated series is valid")
}

/// Generate the labeled cohort described by `profile`. Deterministic in
/// `(profile, seed)`; subject `k` uses the derived stream `seed ^ k`.
pub fn generate_synthetic_cohort(profile: &GeneratorProfile, seed: u64) -> Result<Cohort> {
    profile.validate()?;
    let n = profile.n_rois;
    let t = profile.n_timepoints;
    let mut subjects = Vec::with_capacity(profile.total_subjects());
    let mut index = 0usize;
    for cell in &profile.cohort {
        let sigma = effective_covariance(profile, cell.label, &cell.drug);
        let context = format!("cell (y={}, {})", cell.label, cell.drug);
        let cell_chol = cholesky(&sigma, n, &context)?;
        let class_ar = match profile.class_ar {
            Some((a0, a1)) => {
                if cell.label == 1 {
                    a1
                } else {
                    a0
                }
            }
            None => profile.ar_coefficient,
        };
        for _ in 0..cell.count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
            // subject-level nuisance: connectivity strength and AR spread
            let chol = if profile.cov_strength_jitter > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                let w = (1.0 + profile.cov_strength_jitter * z).clamp(0.1, 1.5);
                let mut scaled = sigma.clone();
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            scaled[i * n + j] *= w;
                        }
                    }
                }
                // extreme draws can push the scaled matrix out of SPD; fall
                // back to the cell template rather than abort the cohort
                cholesky(&scaled, n, &context).unwrap_or_else(|_| cell_chol.clone())
            } else {
                cell_chol.clone()
            };
            let ar = if profile.ar_jitter > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                (class_ar + profile.ar_jitter * z).clamp(0.02, 0.95)
            } else {
                class_ar
            };
            let series = simulate_subject(&chol, n, t, ar, profile.noise_std, &mut rng);
            subjects.push(SubjectRecord {
                subject_id: format!("sub-{index:03}"),
                series,
                label: Some(cell.label),
                drug: cell.drug.clone(),
                cohort: profile.name.clone(),
            });
            index += 1;
        }
    }
    let cohort = Cohort {
        subjects,
        fingerprint: profile.fingerprint(seed),
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Anchor covariance templates spanning the pretraining family. The two
/// downstream class templates are interior points of their convex hull.
pub fn pretrain_anchors(n: usize) -> Vec<Vec<f64>> {
    vec![
        identity_covariance(n),
        block_covariance(n, 2, 0.8),
        block_covariance(n, 4, 0.8),
        block_covariance(n, 8, 0.8),
    ]
}

fn identity_covariance(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Unlabeled corpus drawn from a family of covariance templates broader
/// than any single class template: random convex combinations of the
/// anchors, with a per-subject AR coefficient.
pub fn generate_pretrain_corpus(
    n_subjects: usize,
    n_rois: usize,
    n_timepoints: usize,
    seed: u64,
) -> Result<Cohort> {
    if n_subjects < 1 {
        return Err(Error::Data("pretrain corpus needs at least 1 subject".into()));
    }
    let anchors = pretrain_anchors(n_rois);
    let mut subjects = Vec::with_capacity(n_subjects);
    for index in 0..n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
        // uniform point on the simplex over anchors
        let mut cuts: Vec<f64> = (0..anchors.len() - 1).map(|_| rng.gen::<f64>()).collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut weights = Vec::with_capacity(anchors.len());
        let mut prev = 0.0;
        for &c in &cuts {
            weights.push(c - prev);
            prev = c;
        }
        weights.push(1.0 - prev);
        let mut sigma = vec![0.0; n_rois * n_rois];
        for (w, anchor) in weights.iter().zip(&anchors) {
            for (s, a) in sigma.iter_mut().zip(anchor) {
                *s += w * a;
            }
        }
        // small diagonal load keeps degenerate combinations comfortably SPD
        for i in 0..n_rois {
            sigma[i * n_rois + i] += 1e-6;
        }
        let ar = rng.gen_range(0.3..0.85);
        let chol = cholesky(&sigma, n_rois, "pretrain family")?;
        let series = simulate_subject(&chol, n_rois, n_timepoints, ar, 0.5, &mut rng);
        subjects.push(SubjectRecord {
            subject_id: format!("pre-{index:04}"),
            series,
            label: None,
            drug: "agnostic".to_string(),
            cohort: "pretrain".to_string(),
        });
    }
    let fingerprint = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(b"pretrain-corpus");
        h.update((n_subjects as u64).to_le_bytes());
        h.update((n_rois as u64).to_le_bytes());
        h.update((n_timepoints as u64).to_le_bytes());
        h.update(seed.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    };
    let cohort = Cohort { subjects, fingerprint };
    cohort.validate()?;
    Ok(cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::compute_fc;

    #[test]
    fn cohort_counts_match_profile() {
        let mut profile = GeneratorProfile::openneuro_like();
        profile.n_timepoints = 32; // keep the test fast
        let cohort = generate_synthetic_cohort(&profile, 7).unwrap();
        assert_eq!(cohort.subjects.len(), 56);
        assert_eq!(cohort.label_counts(), (26, 30));
        assert_eq!(cohort.drug_subset("duloxetine").subjects.len(), 19);
        assert_eq!(cohort.drug_subset("placebo").subjects.len(), 37);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut profile = GeneratorProfile::openneuro_like();
        profile.n_timepoints = 16;
        let a = generate_synthetic_cohort(&profile, 3).unwrap();
        let b = generate_synthetic_cohort(&profile, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_cohort(&profile, 4).unwrap();
        assert_ne!(a.fingerprint, c.fingerprint);
    }

    #[test]
    fn empirical_fc_converges_to_template_correlation() {
        // ar = 0, noise = 0, long series: empirical correlation approaches
        // the generating correlation (Frobenius distance <= 0.1 at t=2000).
        let mut profile = GeneratorProfile::openneuro_like();
        profile.n_rois = 4;
        profile.sigma0 = block_covariance(4, 2, 0.6);
        profile.sigma1 = block_covariance(4, 4, 0.6);
        profile.ar_coefficient = 0.0;
        profile.class_ar = None;
        profile.noise_std = 0.0;
        profile.cov_strength_jitter = 0.0;
        profile.ar_jitter = 0.0;
        profile.drug_effects.clear();
        profile.n_timepoints = 2000;
        profile.cohort = vec![super::super::CohortCell {
            label: 0,
            drug: "none".to_string(),
            count: 1,
        }];
        let cohort = generate_synthetic_cohort(&profile, 11).unwrap();
        let fc = compute_fc(&cohort.subjects[0].series).unwrap();
        let mut dist2 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let d = fc.at(i, j) - profile.sigma0[i * 4 + j];
                dist2 += d * d;
            }
        }
        assert!(dist2.sqrt() <= 0.1, "Frobenius distance {}", dist2.sqrt());
    }

    #[test]
    fn non_spd_covariance_reports_smallest_eigenvalue() {
        let mut profile = GeneratorProfile::openneuro_like();
        profile.n_rois = 4;
        profile.n_timepoints = 8;
        profile.sigma0 = block_covariance(4, 2, 0.6);
        profile.sigma1 = vec![
            1.0, 2.0, 0.0, 0.0, //
            2.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        let err = generate_synthetic_cohort(&profile, 0).unwrap_err();
        assert!(err.to_string().contains("positive definite"), "{err}");
        assert!(err.to_string().contains("-1.0"), "{err}");
    }

    #[test]
    fn pretrain_corpus_contract() {
        let corpus = generate_pretrain_corpus(8, 8, 16, 5).unwrap();
        assert_eq!(corpus.subjects.len(), 8);
        assert!(corpus.subjects.iter().all(|s| s.label.is_none()));
        let other = generate_pretrain_corpus(8, 8, 16, 6).unwrap();
        assert_ne!(corpus.fingerprint, other.fingerprint);
        assert_eq!(corpus, generate_pretrain_corpus(8, 8, 16, 5).unwrap());
    }

    #[test]
    fn class_templates_inside_pretrain_family() {
        // Both downstream templates must be convex combinations of the
        // anchor templates; solve for the weights and check reconstruction.
        let n = 32;
        let anchors = pretrain_anchors(n);
        let profile = GeneratorProfile::openneuro_like();
        for sigma in [&profile.sigma0, &profile.sigma1] {
            let a = nalgebra::DMatrix::from_fn(n * n, anchors.len(), |r, c| anchors[c][r]);
            let b = nalgebra::DVector::from_row_slice(sigma);
            let svd = a.clone().svd(true, true);
            let w = svd.solve(&b, 1e-12).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "weights sum to {sum}");
            for &wi in w.iter() {
                assert!((-1e-9..=1.0 + 1e-9).contains(&wi), "weight {wi} outside [0,1]");
            }
            let recon = &a * &w;
            let resid = (&recon - &b).norm();
            assert!(resid < 1e-9, "reconstruction residual {resid}");
        }
    }

    #[test]
    fn true_covariances_are_fisher_separable_and_degrade_with_noise() {
        // Projection of vectorized true covariances on the class-mean
        // difference separates the classes perfectly.
        let profile = GeneratorProfile::openneuro_like();
        let n = profile.n_rois;
        let mut covs: Vec<(u8, Vec<f64>)> = Vec::new();
        for cell in &profile.cohort {
            covs.push((cell.label, effective_covariance(&profile, cell.label, &cell.drug)));
        }
        let dir: Vec<f64> = {
            let mean = |label: u8| -> Vec<f64> {
                let group: Vec<&Vec<f64>> =
                    covs.iter().filter(|(l, _)| *l == label).map(|(_, c)| c).collect();
                let mut m = vec![0.0; n * n];
                for c in &group {
                    for (mi, ci) in m.iter_mut().zip(c.iter()) {
                        *mi += ci / group.len() as f64;
                    }
                }
                m
            };
            let (m0, m1) = (mean(0), mean(1));
            m1.iter().zip(&m0).map(|(a, b)| a - b).collect()
        };
        let project = |c: &[f64]| c.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>();
        let max0 = covs
            .iter()
            .filter(|(l, _)| *l == 0)
            .map(|(_, c)| project(c))
            .fold(f64::NEG_INFINITY, f64::max);
        let min1 = covs
            .iter()
            .filter(|(l, _)| *l == 1)
            .map(|(_, c)| project(c))
            .fold(f64::INFINITY, f64::min);
        assert!(min1 > max0, "classes overlap: max0={max0}, min1={min1}");

        // Empirical FC separability degrades monotonically with noise.
        let mut margins = Vec::new();
        for noise in [0.0, 1.0, 3.0] {
            let mut p = GeneratorProfile::openneuro_like();
            p.n_rois = 16;
            p.sigma0 = block_covariance(16, 2, 0.6);
            p.sigma1 = block_covariance(16, 4, 0.6);
            p.n_timepoints = 64;
            p.noise_std = noise;
            p.class_ar = None;
            p.drug_effects.clear();
            let cohort = generate_synthetic_cohort(&p, 21).unwrap();
            // mean separation of the same projection applied to empirical FC
            let feats: Vec<(u8, Vec<f64>)> = cohort
                .subjects
                .iter()
                .map(|s| {
                    (
                        s.label.unwrap(),
                        compute_fc(&s.series).unwrap().data().to_vec(),
                    )
                })
                .collect();
            let mean = |label: u8| -> Vec<f64> {
                let group: Vec<&Vec<f64>> =
                    feats.iter().filter(|(l, _)| *l == label).map(|(_, f)| f).collect();
                let mut m = vec![0.0; 16 * 16];
                for f in &group {
                    for (mi, fi) in m.iter_mut().zip(f.iter()) {
                        *mi += fi / group.len() as f64;
                    }
                }
                m
            };
            let (m0, m1) = (mean(0), mean(1));
            let sep: f64 = m1.iter().zip(&m0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            margins.push(sep);
        }
        assert!(
            margins[0] > margins[1] && margins[1] > margins[2],
            "separability not monotone: {margins:?}"
        );
    }
}
