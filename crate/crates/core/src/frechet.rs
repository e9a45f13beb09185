//! Fréchet distance between feature distributions of two image sets:
//! ‖μA−μB‖² + tr(ΣA + ΣB − 2(ΣAΣB)^{1/2}), with the matrix square root
//! taken symmetrically and eigenvalues clamped at zero.
//!
//! Features are handcrafted (8-bin-per-channel color histogram plus object
//! count and mean object area from the analyzer), so the metric is exactly
//! reproducible — the distributional algebra is standard, only the feature
//! extractor is bespoke.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::analyze::analyze_image;
use crate::image::ImageU8;

pub const HIST_BINS: usize = 8;
/// 3 channels × 8 bins + object count + mean object area.
pub const FEATURE_DIM: usize = 3 * HIST_BINS + 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrechetError {
    #[error("set {set} has {got} samples, need at least dim+1 = {need}")]
    TooFew { set: &'static str, got: usize, need: usize },
    #[error("set {set} has a degenerate covariance after clamping")]
    Degenerate { set: &'static str },
}

/// 26-dim feature vector: per-channel normalized intensity histograms, then
/// component count and mean component pixel area from the analyzer.
pub fn image_features(img: &ImageU8) -> Vec<f64> {
    let mut f = vec![0.0; FEATURE_DIM];
    let pixels = (img.height() * img.width()) as f64;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let rgb = img.get(y, x);
            for c in 0..3 {
                let bin = (rgb[c] as usize * HIST_BINS) / 256;
                f[c * HIST_BINS + bin] += 1.0 / pixels;
            }
        }
    }
    let scene = analyze_image(img);
    let count = scene.objects.len();
    f[3 * HIST_BINS] = count as f64;
    f[3 * HIST_BINS + 1] = if count == 0 {
        0.0
    } else {
        scene.objects.iter().map(|o| o.pixels as f64).sum::<f64>() / count as f64
    };
    f
}

fn moments(set: &[Vec<f64>], name: &'static str) -> Result<(DVector<f64>, DMatrix<f64>), FrechetError> {
    let dim = set[0].len();
    let n = set.len();
    if n < dim + 1 {
        return Err(FrechetError::TooFew { set: name, got: n, need: dim + 1 });
    }
    let mut mean = DVector::zeros(dim);
    for v in set {
        mean += DVector::from_column_slice(v);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(FrechetError::Degenerate { set: name });
    }
    Ok((mean, cov))
}

/// Symmetric PSD square root; negative eigenvalues (numerical noise) clamp
/// to zero, non-finite ones are degeneracy.
fn sqrt_psd(m: DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>, FrechetError> {
    let eig = m.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if !v.is_finite() {
            return Err(FrechetError::Degenerate { set: name });
        }
        *v = v.max(0.0).sqrt();
    }
    let u = eig.eigenvectors;
    Ok(&u * DMatrix::from_diagonal(&vals) * u.transpose())
}

/// tr((XY)^{1/2}) computed as tr((X^{1/2} Y X^{1/2})^{1/2}), which is
/// symmetric PSD and shares the product's eigenvalues.
fn tr_sqrt_product(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    name: &'static str,
) -> Result<f64, FrechetError> {
    let x_half = sqrt_psd(x.clone(), name)?;
    Ok(sqrt_psd(&x_half * y * &x_half, name)?.trace())
}

/// Fréchet distance between the Gaussian fits of two feature sets. All rows
/// must share one dimension; each set needs at least dim+1 samples. The
/// trace term is evaluated in both orderings and averaged, so the result is
/// bit-exactly symmetric despite eigensolver noise.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, FrechetError> {
    let (mu_a, cov_a) = moments(a, "A")?;
    let (mu_b, cov_b) = moments(b, "B")?;
    let tr_ab = tr_sqrt_product(&cov_a, &cov_b, "A")?;
    let tr_ba = tr_sqrt_product(&cov_b, &cov_a, "B")?;
    let diff = &mu_a - &mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - (tr_ab + tr_ba);
    if !d.is_finite() {
        return Err(FrechetError::Degenerate { set: "A" });
    }
    // The exact value is ≥ 0; tiny negatives are eigensolver noise.
    Ok(d.max(0.0))
}

pub fn frechet_feature_distance(a: &[ImageU8], b: &[ImageU8]) -> Result<f64, FrechetError> {
    let fa: Vec<Vec<f64>> = a.iter().map(image_features).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(image_features).collect();
    frechet_from_features(&fa, &fb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_corpus, ColorName};

    fn corpus_images(n: usize, seed: u64) -> Vec<ImageU8> {
        synth_corpus(n, seed).into_iter().map(|r| r.image).collect()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = corpus_images(30, 1);
        let d = frechet_feature_distance(&a, &a).unwrap();
        assert!(d.abs() < 1e-8, "d = {d}");
    }

    #[test]
    fn distance_is_symmetric() {
        let a = corpus_images(30, 1);
        let b = corpus_images(30, 2);
        let dab = frechet_feature_distance(&a, &b).unwrap();
        let dba = frechet_feature_distance(&b, &a).unwrap();
        assert!((dab - dba).abs() < 1e-8, "dab = {dab}, dba = {dba}");
        assert!(dab > 0.0);
    }

    #[test]
    fn single_color_sets_reduce_to_mean_distance() {
        let a: Vec<ImageU8> = (0..30).map(|_| ImageU8::filled(32, 32, ColorName::Black.rgb())).collect();
        let b: Vec<ImageU8> = (0..30).map(|_| ImageU8::filled(32, 32, ColorName::White.rgb())).collect();
        // Histograms differ by 1 in two bins per channel; stats are zero.
        let d = frechet_feature_distance(&a, &b).unwrap();
        assert!((d - 6.0).abs() < 1e-8, "d = {d}");
    }

    #[test]
    fn one_dimensional_closed_form() {
        // Sample mean 0, sample variance 1 vs the same shifted by 1:
        // d = 1² + (1 + 1 − 2·√(1·1)) = 1.
        let r = 0.5f64.sqrt();
        let a = vec![vec![-r], vec![r]];
        let b = vec![vec![1.0 - r], vec![1.0 + r]];
        let d = frechet_from_features(&a, &b).unwrap();
        assert!((d - 1.0).abs() < 1e-9, "d = {d}");
    }

    #[test]
    fn undersized_set_error_names_the_set() {
        let a = corpus_images(10, 1);
        let b = corpus_images(30, 2);
        let err = frechet_feature_distance(&a, &b).unwrap_err();
        assert_eq!(err, FrechetError::TooFew { set: "A", got: 10, need: FEATURE_DIM + 1 });
        let err = frechet_feature_distance(&b, &a).unwrap_err();
        assert!(matches!(err, FrechetError::TooFew { set: "B", .. }));
    }

    #[test]
    fn corpus_sets_are_closer_to_each_other_than_to_blank() {
        let a = corpus_images(40, 1);
        let b = corpus_images(40, 2);
        let blank: Vec<ImageU8> = (0..40).map(|_| ImageU8::filled(32, 32, ColorName::Green.rgb())).collect();
        let near = frechet_feature_distance(&a, &b).unwrap();
        let far = frechet_feature_distance(&a, &blank).unwrap();
        assert!(near < far, "near = {near}, far = {far}");
    }
}
