//! Raw series -> model inputs: tokenized time series and correlation FC.
//!
//! All operations are pure. FC is computed on the length-fitted,
//! standardized series so both modalities see identical preprocessing.

use crate::error::{Error, Result};

/// Fixed time-series length every subject is truncated or padded to.
pub const DEFAULT_FIT_LENGTH: usize = 200;
/// Patch length used when tokenizing a series.
pub const DEFAULT_PATCH: usize = 20;

/// N x t matrix of per-ROI BOLD signal, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTimeSeries {
    data: Vec<f64>,
    n_rois: usize,
    n_timepoints: usize,
}

impl RoiTimeSeries {
    pub fn new(n_rois: usize, n_timepoints: usize, data: Vec<f64>) -> Result<Self> {
        if n_rois < 1 || n_timepoints < 2 {
            return Err(Error::Data(format!(
                "time series needs >= 1 ROI and >= 2 timepoints, got {n_rois} x {n_timepoints}"
            )));
        }
        if data.len() != n_rois * n_timepoints {
            return Err(Error::Data(format!(
                "series buffer holds {} values, shape {n_rois} x {n_timepoints} needs {}",
                data.len(),
                n_rois * n_timepoints
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("series contains non-finite values".into()));
        }
        Ok(RoiTimeSeries {
            data,
            n_rois,
            n_timepoints,
        })
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn n_timepoints(&self) -> usize {
        self.n_timepoints
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_timepoints..(r + 1) * self.n_timepoints]
    }

    pub fn at(&self, r: usize, t: usize) -> f64 {
        self.data[r * self.n_timepoints + t]
    }
}

/// N x N Pearson correlation matrix.
///
/// Symmetric, entries in [-1, 1], diagonal exactly 1 except for
/// zero-variance rows, which carry 0 everywhere (including their diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityMatrix {
    data: Vec<f64>,
    n: usize,
}

impl ConnectivityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Patchified time series: token (r, k) holds timepoints [kP, (k+1)P) of
/// ROI r, ordered row-major by (roi, patch).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    data: Vec<f64>,
    patch_len: usize,
    n_rois: usize,
    patches_per_roi: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.n_rois * self.patches_per_roi
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    pub fn patches_per_roi(&self) -> usize {
        self.patches_per_roi
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn roi_index(&self, i: usize) -> usize {
        i / self.patches_per_roi
    }

    pub fn patch_index(&self, i: usize) -> usize {
        i % self.patches_per_roi
    }

    /// Flat (n_tokens, P) buffer, row-major.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Copy with the listed token rows replaced by `fill`.
    pub fn masked(&self, indices: &[usize], fill: f64) -> TokenSequence {
        let mut out = self.clone();
        for &i in indices {
            for v in &mut out.data[i * self.patch_len..(i + 1) * self.patch_len] {
                *v = fill;
            }
        }
        out
    }
}

/// Average voxel series into ROI series. `atlas_labels[v]` maps voxel `v`
/// to ROI id in `1..=n_rois`; every ROI must own at least one voxel.
pub fn parcellate(
    voxel_series: &[f64],
    n_voxels: usize,
    n_timepoints: usize,
    atlas_labels: &[usize],
    n_rois: usize,
) -> Result<RoiTimeSeries> {
    if atlas_labels.len() != n_voxels {
        return Err(Error::Data(format!(
            "{} atlas labels for {n_voxels} voxels",
            atlas_labels.len()
        )));
    }
    if voxel_series.len() != n_voxels * n_timepoints {
        return Err(Error::Data("voxel buffer does not match V x t".into()));
    }
    let mut counts = vec![0usize; n_rois];
    for (v, &label) in atlas_labels.iter().enumerate() {
        if label < 1 || label > n_rois {
            return Err(Error::Data(format!(
                "voxel {v} has label {label}, outside 1..={n_rois}"
            )));
        }
        counts[label - 1] += 1;
    }
    let empty: Vec<usize> = (0..n_rois).filter(|&r| counts[r] == 0).map(|r| r + 1).collect();
    if !empty.is_empty() {
        return Err(Error::Data(format!("ROIs without any voxel: {empty:?}")));
    }
    let mut data = vec![0.0; n_rois * n_timepoints];
    for (v, &label) in atlas_labels.iter().enumerate() {
        let r = label - 1;
        for t in 0..n_timepoints {
            data[r * n_timepoints + t] += voxel_series[v * n_timepoints + t];
        }
    }
    for r in 0..n_rois {
        let c = counts[r] as f64;
        for t in 0..n_timepoints {
            data[r * n_timepoints + t] /= c;
        }
    }
    RoiTimeSeries::new(n_rois, n_timepoints, data)
}

/// Per-ROI z-score (population std). Zero-variance rows map to all-zeros.
pub fn standardize(series: &RoiTimeSeries) -> RoiTimeSeries {
    let t = series.n_timepoints();
    let tf = t as f64;
    let mut data = Vec::with_capacity(series.data().len());
    for r in 0..series.n_rois() {
        let row = series.row(r);
        let mean = row.iter().sum::<f64>() / tf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / tf;
        if var == 0.0 {
            data.extend(std::iter::repeat(0.0).take(t));
        } else {
            let inv = 1.0 / var.sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
    }
    RoiTimeSeries::new(series.n_rois(), t, data).expect("standardize preserves shape")
}

/// Truncate to the first `target` timepoints or right-pad with zeros.
pub fn fit_length(series: &RoiTimeSeries, target: usize) -> RoiTimeSeries {
    let t = series.n_timepoints();
    if t == target {
        return series.clone();
    }
    let mut data = Vec::with_capacity(series.n_rois() * target);
    for r in 0..series.n_rois() {
        let row = series.row(r);
        if t > target {
            data.extend_from_slice(&row[..target]);
        } else {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat(0.0).take(target - t));
        }
    }
    RoiTimeSeries::new(series.n_rois(), target, data).expect("fit_length preserves ROIs")
}

/// Split each ROI row into contiguous patches of length `patch`.
pub fn patchify(series: &RoiTimeSeries, patch: usize) -> Result<TokenSequence> {
    let t = series.n_timepoints();
    if patch == 0 || t % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} does not divide series length {t}"
        )));
    }
    Ok(TokenSequence {
        data: series.data().to_vec(),
        patch_len: patch,
        n_rois: series.n_rois(),
        patches_per_roi: t / patch,
    })
}

/// Inverse of `patchify`.
pub fn unpatchify(tokens: &TokenSequence) -> RoiTimeSeries {
    RoiTimeSeries::new(
        tokens.n_rois,
        tokens.patches_per_roi * tokens.patch_len,
        tokens.data.clone(),
    )
    .expect("token buffer is a valid series")
}

/// Pearson correlation of every pair of ROI rows.
pub fn compute_fc(series: &RoiTimeSeries) -> Result<ConnectivityMatrix> {
    let n = series.n_rois();
    let t = series.n_timepoints();
    if t < 2 {
        return Err(Error::Data("FC needs at least 2 timepoints".into()));
    }
    let tf = t as f64;
    // Center rows, remember zero-variance ones.
    let mut centered = vec![0.0; n * t];
    let mut norms = vec![0.0; n];
    for r in 0..n {
        let row = series.row(r);
        let mean = row.iter().sum::<f64>() / tf;
        let mut ss = 0.0;
        for (j, v) in row.iter().enumerate() {
            let c = v - mean;
            centered[r * t + j] = c;
            ss += c * c;
        }
        norms[r] = ss.sqrt();
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        if norms[i] == 0.0 {
            continue; // entire row/column stays 0, diagonal included
        }
        data[i * n + i] = 1.0;
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..t {
                dot += centered[i * t + k] * centered[j * t + k];
            }
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            data[i * n + j] = r;
            data[j * n + i] = r;
        }
    }
    Ok(ConnectivityMatrix { data, n })
}

/// Full subject preprocessing: standardize, fit to `target` length, then
/// derive tokens and FC from the same fitted series.
pub fn prepare(
    series: &RoiTimeSeries,
    target: usize,
    patch: usize,
) -> Result<(TokenSequence, ConnectivityMatrix)> {
    let fitted = fit_length(&standardize(series), target);
    let tokens = patchify(&fitted, patch)?;
    let fc = compute_fc(&fitted)?;
    Ok((tokens, fc))
}

/// Parse an atlas labels file: one integer per line, line count = V.
pub fn parse_atlas_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("atlas line {}: `{}` is not an integer", i + 1, l)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(n: usize, t: usize, data: &[f64]) -> RoiTimeSeries {
        RoiTimeSeries::new(n, t, data.to_vec()).unwrap()
    }

    #[test]
    fn parcellate_averages_voxels() {
        // 2 voxels with the same label: ROI value is their mean.
        let out = parcellate(&[1.0, 1.0, 3.0, 3.0], 2, 2, &[1, 1], 1).unwrap();
        assert_eq!(out.data(), &[2.0, 2.0]);
    }

    #[test]
    fn parcellate_identity_labeling() {
        let voxels = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = parcellate(&voxels, 3, 2, &[1, 2, 3], 3).unwrap();
        assert_eq!(out.data(), &voxels);
    }

    #[test]
    fn parcellate_two_rois() {
        // labels [1,1,2,2], column [1,3,10,20] -> ROI column [2,15]
        let out = parcellate(&[1.0, 1.0, 3.0, 3.0, 10.0, 10.0, 20.0, 20.0], 4, 2, &[1, 1, 2, 2], 2)
            .unwrap();
        assert_eq!(out.data(), &[2.0, 2.0, 15.0, 15.0]);
    }

    #[test]
    fn parcellate_reports_empty_roi() {
        let err = parcellate(&[1.0, 1.0], 1, 2, &[1], 2).unwrap_err();
        assert!(err.to_string().contains("[2]"), "{err}");
    }

    #[test]
    fn parcellate_rejects_out_of_range_label() {
        assert!(parcellate(&[1.0, 1.0], 1, 2, &[3], 2).is_err());
    }

    #[test]
    fn standardize_row() {
        let out = standardize(&series(1, 3, &[1.0, 2.0, 3.0]));
        let expected = 1.224744871391589; // 1 / sqrt(2/3)
        assert!((out.at(0, 0) + expected).abs() < 1e-12);
        assert!(out.at(0, 1).abs() < 1e-12);
        assert!((out.at(0, 2) - expected).abs() < 1e-12);
    }

    #[test]
    fn standardize_constant_row_is_zero() {
        let out = standardize(&series(1, 4, &[5.0; 4]));
        assert_eq!(out.data(), &[0.0; 4]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let s = series(2, 4, &[1.0, 4.0, -2.0, 0.5, 3.0, 3.0, 1.0, 9.0]);
        let once = standardize(&s);
        let twice = standardize(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_length_truncates_and_pads() {
        let s = series(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(fit_length(&s, 3).data(), &[1.0, 2.0, 3.0]);
        assert_eq!(fit_length(&s, 7).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0]);
        assert_eq!(fit_length(&s, 5), s);
    }

    #[test]
    fn patchify_token_counts() {
        let s = series(3, 40, &vec![0.0; 120]);
        let tok = patchify(&s, 20).unwrap();
        assert_eq!(tok.len(), 6);
        assert_eq!(tok.roi_index(3), 1);
        assert_eq!(tok.patch_index(3), 1);
    }

    #[test]
    fn patchify_single_token_equals_row() {
        let data: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let s = series(1, 20, &data);
        let tok = patchify(&s, 20).unwrap();
        assert_eq!(tok.len(), 1);
        assert_eq!(tok.token(0), &data[..]);
    }

    #[test]
    fn patchify_rejects_nondivisor() {
        let s = series(1, 30, &vec![0.0; 30]);
        assert!(patchify(&s, 20).is_err());
    }

    #[test]
    fn patchify_roundtrip() {
        let data: Vec<f64> = (0..80).map(|i| (i as f64).sin()).collect();
        let s = series(2, 40, &data);
        assert_eq!(unpatchify(&patchify(&s, 20).unwrap()), s);
    }

    #[test]
    fn fc_anticorrelated_rows() {
        let s = series(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]);
        let fc = compute_fc(&s).unwrap();
        assert_eq!(fc.at(0, 0), 1.0);
        assert_eq!(fc.at(1, 1), 1.0);
        assert!((fc.at(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn fc_constant_row_convention() {
        let s = series(2, 4, &[1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]);
        let fc = compute_fc(&s).unwrap();
        assert_eq!(fc.at(1, 1), 0.0);
        assert_eq!(fc.at(0, 1), 0.0);
        assert_eq!(fc.at(1, 0), 0.0);
        assert_eq!(fc.at(0, 0), 1.0);
    }

    #[test]
    fn fc_affine_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = series(4, 50, &data);
        let fc = compute_fc(&s).unwrap();

        // positive affine map on row 1 leaves FC unchanged
        let mut scaled = data.clone();
        for v in &mut scaled[50..100] {
            *v = 2.5 * *v + 3.0;
        }
        let fc2 = compute_fc(&series(4, 50, &scaled)).unwrap();
        for (a, b) in fc.data().iter().zip(fc2.data()) {
            assert!((a - b).abs() < 1e-10);
        }

        // negative scale flips row 1's correlations
        let mut neg = data.clone();
        for v in &mut neg[50..100] {
            *v = -*v;
        }
        let fc3 = compute_fc(&series(4, 50, &neg)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let flip = (i == 1) ^ (j == 1);
                let expect = if flip { -fc.at(i, j) } else { fc.at(i, j) };
                assert!((fc3.at(i, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn fc_commutes_with_standardize() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 30).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = series(3, 30, &data);
        let a = compute_fc(&s).unwrap();
        let b = compute_fc(&standardize(&s)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fc_invariants_on_random_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let t = rng.gen_range(2..40);
            let data: Vec<f64> = (0..n * t).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fc = compute_fc(&series(n, t, &data)).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let v = fc.at(i, j);
                    assert!((-1.0..=1.0).contains(&v));
                    assert!((v - fc.at(j, i)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn fc_independent_long_rows_nearly_uncorrelated() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let t = 2000;
        let data: Vec<f64> = (0..2 * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fc = compute_fc(&series(2, t, &data)).unwrap();
        assert!(fc.at(0, 1).abs() <= 0.1, "r = {}", fc.at(0, 1));
    }

    #[test]
    fn atlas_labels_parse() {
        assert_eq!(parse_atlas_labels("1\n2\n1\n").unwrap(), vec![1, 2, 1]);
        assert!(parse_atlas_labels("1\nx\n").is_err());
    }
}
