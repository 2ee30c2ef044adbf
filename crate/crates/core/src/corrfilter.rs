//! Frequency-domain ridge-regression correlation filters for the cheap
//! cascade layers: closed-form training over all cyclic shifts, fast
//! response maps, and exact running-average online updates.
//!
//! The multi-channel form keeps a shared scalar denominator per frequency
//! bin; because the per-bin system is rank one, this equals the exact ridge
//! solution (the dense spatial oracle in [`crate::oracles`] verifies that).
//! Numerator and denominator statistics are stored separately so the online
//! update blends sufficient statistics rather than approximating filters.

use crate::error::{invalid, mismatch, Error, Result};
use crate::features::{FeatureMap, ScoreMap};
use crate::fft::{fft2, fft2_real, ifft2};
use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex64;

/// Default regularizer for production configs.
pub const DEFAULT_LAMBDA: f64 = 1e-2;

/// Default per-frame blending rate for online updates.
pub const DEFAULT_UPDATE_RATE: f64 = 0.02;

/// Periodic 2-D Gaussian regression target peaked at the zero-shift bin,
/// maximum value 1.
pub fn gaussian_label(h: usize, w: usize, sigma: f64) -> Result<Array2<f64>> {
    if h == 0 || w == 0 {
        return Err(invalid!("gaussian label needs positive dims"));
    }
    if sigma <= 0.0 {
        return Err(invalid!("gaussian label needs sigma > 0"));
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        let dr = r.min(h - r) as f64;
        let dc = c.min(w - c) as f64;
        (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
    }))
}

/// Default label width for an `h x w` filter.
pub fn default_label_sigma(h: usize, w: usize) -> f64 {
    ((h * w) as f64).sqrt() / 10.0
}

/// Separable raised-cosine (Hann) taper.
pub fn cosine_window(h: usize, w: usize) -> Array2<f64> {
    let hann = |i: usize, n: usize| {
        if n <= 1 {
            1.0
        } else {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        }
    };
    Array2::from_shape_fn((h, w), |(r, c)| hann(r, h) * hann(c, w))
}

/// Per-channel frequency-domain ridge-regression filter.
#[derive(Clone, Debug)]
pub struct DcfModel {
    /// Running numerator `conj(x_hat_c) * y_hat`, one plane per channel.
    num_hat: Array3<Complex64>,
    /// Running denominator `sum_c |x_hat_c|^2`, shared across channels.
    den: Array2<f64>,
    /// Ridge regularizer.
    pub lambda: f64,
    /// Frequency-domain regression target.
    label_hat: Array2<Complex64>,
    /// Spatial taper applied to features before training and responding.
    window: Array2<f64>,
    /// Default blending rate for online updates.
    pub update_rate: f64,
}

fn windowed_channel_ffts(
    features: &FeatureMap,
    window: &Array2<f64>,
) -> Result<Vec<Array2<Complex64>>> {
    let (h, w, ch) = features.data.dim();
    if window.dim() != (h, w) {
        return Err(mismatch!(
            "window {:?} does not match features {h}x{w}",
            window.dim()
        ));
    }
    let mut out = Vec::with_capacity(ch);
    for c in 0..ch {
        let plane = Array2::from_shape_fn((h, w), |(r, cc)| features.data[[r, cc, c]] * window[[r, cc]]);
        out.push(fft2_real(&plane));
    }
    Ok(out)
}

fn statistics(
    features: &FeatureMap,
    label_hat: &Array2<Complex64>,
    window: &Array2<f64>,
) -> Result<(Array3<Complex64>, Array2<f64>)> {
    let (h, w, ch) = features.data.dim();
    let ffts = windowed_channel_ffts(features, window)?;
    let mut num = Array3::from_elem((h, w, ch), Complex64::default());
    let mut den = Array2::zeros((h, w));
    for (c, xhat) in ffts.iter().enumerate() {
        for r in 0..h {
            for cc in 0..w {
                let x = xhat[[r, cc]];
                num[[r, cc, c]] = x.conj() * label_hat[[r, cc]];
                den[[r, cc]] += x.norm_sqr();
            }
        }
    }
    Ok((num, den))
}

/// Closed-form multi-channel training on cosine-windowed features:
/// per frequency, `filter_hat_c = conj(x_hat_c) * y_hat / (sum_c |x_hat_c|^2 + lambda)`.
pub fn train(
    features: &FeatureMap,
    label: &Array2<f64>,
    lambda: f64,
    window: &Array2<f64>,
) -> Result<DcfModel> {
    let (h, w, _) = features.data.dim();
    if label.dim() != (h, w) {
        return Err(mismatch!(
            "label {:?} does not match features {h}x{w}",
            label.dim()
        ));
    }
    if lambda < 0.0 {
        return Err(invalid!("lambda must be non-negative"));
    }
    let label_hat = fft2_real(label);
    let (num_hat, den) = statistics(features, &label_hat, window)?;
    if lambda == 0.0 && den.iter().any(|&d| d < 1e-300) {
        return Err(Error::Singular(
            "zero-energy frequency bin with lambda = 0".into(),
        ));
    }
    Ok(DcfModel {
        num_hat,
        den,
        lambda,
        label_hat,
        window: window.clone(),
        update_rate: DEFAULT_UPDATE_RATE,
    })
}

impl DcfModel {
    pub fn height(&self) -> usize {
        self.num_hat.dim().0
    }

    pub fn width(&self) -> usize {
        self.num_hat.dim().1
    }

    pub fn channels(&self) -> usize {
        self.num_hat.dim().2
    }

    /// The effective per-channel filter `num / (den + lambda)`.
    pub fn filter_hat(&self) -> Array3<Complex64> {
        let (h, w, ch) = self.num_hat.dim();
        Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
            self.num_hat[[r, c, k]] / (self.den[[r, c]] + self.lambda)
        })
    }

    /// Real inverse transform of `sum_c filter_hat_c * z_hat_c` over the
    /// windowed search features. The zero-shift response sits at `(0, 0)`.
    pub fn respond(&self, features: &FeatureMap) -> Result<ScoreMap> {
        let (h, w, ch) = features.data.dim();
        if (h, w, ch) != self.num_hat.dim() {
            return Err(mismatch!(
                "features {:?} do not match model {:?}",
                (h, w, ch),
                self.num_hat.dim()
            ));
        }
        let ffts = windowed_channel_ffts(features, &self.window)?;
        let mut spectrum = Array2::from_elem((h, w), Complex64::default());
        for (c, zhat) in ffts.iter().enumerate() {
            for r in 0..h {
                for cc in 0..w {
                    let filt = self.num_hat[[r, cc, c]] / (self.den[[r, cc]] + self.lambda);
                    spectrum[[r, cc]] += filt * zhat[[r, cc]];
                }
            }
        }
        let response = ifft2(&spectrum).mapv(|v| v.re);
        Ok(ScoreMap::new(response, features.stride))
    }

    /// Blend numerator and denominator statistics toward a fresh training
    /// on `new_features`: `new = (1 - rate) * old + rate * fresh`.
    pub fn updated(&self, new_features: &FeatureMap, rate: f64) -> Result<DcfModel> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(invalid!("update rate {rate} outside [0, 1]"));
        }
        let (h, w, ch) = new_features.data.dim();
        if (h, w, ch) != self.num_hat.dim() {
            return Err(mismatch!(
                "features {:?} do not match model {:?}",
                (h, w, ch),
                self.num_hat.dim()
            ));
        }
        let (fresh_num, fresh_den) = statistics(new_features, &self.label_hat, &self.window)?;
        let mut out = self.clone();
        for (o, f) in out.num_hat.iter_mut().zip(fresh_num.iter()) {
            *o = *o * (1.0 - rate) + *f * rate;
        }
        for (o, f) in out.den.iter_mut().zip(fresh_den.iter()) {
            *o = *o * (1.0 - rate) + *f * rate;
        }
        Ok(out)
    }

    pub(crate) fn parts(
        &self,
    ) -> (
        &Array3<Complex64>,
        &Array2<f64>,
        &Array2<Complex64>,
        &Array2<f64>,
    ) {
        (&self.num_hat, &self.den, &self.label_hat, &self.window)
    }

    pub(crate) fn from_parts(
        num_hat: Array3<Complex64>,
        den: Array2<f64>,
        lambda: f64,
        label_hat: Array2<Complex64>,
        window: Array2<f64>,
        update_rate: f64,
    ) -> Self {
        Self {
            num_hat,
            den,
            lambda,
            label_hat,
            window,
            update_rate,
        }
    }
}

/// Spatial-domain equivalent of [`DcfModel::respond`] via the frequency
/// filter, used when comparing against [`crate::oracles::spatial_ridge_solve`].
pub fn filter_spatial(model: &DcfModel) -> Array3<f64> {
    let (h, w, ch) = model.num_hat.dim();
    let fhat = model.filter_hat();
    let mut out = Array3::zeros((h, w, ch));
    for c in 0..ch {
        let plane = Array2::from_shape_fn((h, w), |(r, cc)| fhat[[r, cc, c]]);
        let spatial = ifft2(&plane);
        for r in 0..h {
            for cc in 0..w {
                out[[r, cc, c]] = spatial[[r, cc]].re;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{circulant_response, spatial_ridge_solve};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, h: usize, w: usize, ch: usize) -> FeatureMap {
        FeatureMap::new(
            Array3::from_shape_fn((h, w, ch), |_| rng.gen_range(-1.0..1.0)),
            1,
        )
    }

    fn ones_window(h: usize, w: usize) -> Array2<f64> {
        Array2::from_elem((h, w), 1.0)
    }

    fn cyclic_shift_features(f: &FeatureMap, dy: usize, dx: usize) -> FeatureMap {
        let (h, w, ch) = f.data.dim();
        FeatureMap::new(
            Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
                f.data[[(r + h - dy) % h, (c + w - dx) % w, k]]
            }),
            f.stride,
        )
    }

    #[test]
    fn gaussian_label_values() {
        let y = gaussian_label(8, 8, 2.0).unwrap();
        assert_eq!(y[[0, 0]], 1.0);
        assert!((y[[2, 0]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((y[[0, 2]] - (-0.5f64).exp()).abs() < 1e-12);
        // periodic: shift h-1 is distance 1
        assert_eq!(y[[7, 0]], y[[1, 0]]);
    }

    #[test]
    fn gaussian_label_wide_sigma_saturates() {
        let y = gaussian_label(6, 6, 1e9).unwrap();
        assert!(y.iter().all(|&v| v > 0.999_999));
    }

    #[test]
    fn gaussian_label_rejects_bad_input() {
        assert!(gaussian_label(0, 4, 1.0).is_err());
        assert!(gaussian_label(4, 4, 0.0).is_err());
    }

    #[test]
    fn huge_lambda_flattens_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(&mut rng, 8, 8, 1);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let model = train(&f, &label, 1e12, &ones_window(8, 8)).unwrap();
        let resp = model.respond(&f).unwrap();
        assert!(resp.data.iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn tiny_lambda_reproduces_label_on_training_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, 8, 8, 1);
        let label = gaussian_label(8, 8, 1.5).unwrap();
        let model = train(&f, &label, 1e-8, &ones_window(8, 8)).unwrap();
        let resp = model.respond(&f).unwrap();
        let max_err = resp
            .data
            .iter()
            .zip(label.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "max err {max_err}");
    }

    #[test]
    fn training_matches_dense_ridge_oracle() {
        // frequency-domain path vs dense circulant system, single channel
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_features(&mut rng, 8, 8, 1);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let lambda = 0.1;
        let model = train(&f, &label, lambda, &ones_window(8, 8)).unwrap();
        let resp = model.respond(&f).unwrap();

        let w = spatial_ridge_solve(&f.data, &label, lambda).unwrap();
        let oracle = circulant_response(&w, &f.data).unwrap();
        let max_err = resp
            .data
            .iter()
            .zip(oracle.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "max err {max_err}");
    }

    #[test]
    fn multichannel_training_matches_dense_ridge_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_features(&mut rng, 6, 5, 3);
        let label = gaussian_label(6, 5, 0.8).unwrap();
        let lambda = 0.05;
        // window applied on both paths: the oracle sees pre-windowed features
        let window = cosine_window(6, 5);
        let model = train(&f, &label, lambda, &window).unwrap();
        let resp = model.respond(&f).unwrap();

        let mut pre = f.data.clone();
        for ((r, c, _), v) in pre.indexed_iter_mut() {
            *v *= window[[r, c]];
        }
        let w = spatial_ridge_solve(&pre, &label, lambda).unwrap();
        let oracle = circulant_response(&w, &pre).unwrap();
        let max_err = resp
            .data
            .iter()
            .zip(oracle.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "max err {max_err}");
    }

    #[test]
    fn self_match_peaks_at_zero_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_features(&mut rng, 8, 8, 1);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let model = train(&f, &label, 1e-4, &ones_window(8, 8)).unwrap();
        assert_eq!(model.respond(&f).unwrap().argmax(), (0, 0));
    }

    #[test]
    fn shifted_patch_peaks_at_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_features(&mut rng, 8, 8, 1);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let model = train(&f, &label, 1e-3, &ones_window(8, 8)).unwrap();
        let shifted = cyclic_shift_features(&f, 3, 1);
        assert_eq!(model.respond(&shifted).unwrap().argmax(), (3, 1));
    }

    #[test]
    fn all_cyclic_shifts_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_features(&mut rng, 8, 8, 1);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let model = train(&f, &label, 1e-3, &ones_window(8, 8)).unwrap();
        for dy in 0..8 {
            for dx in 0..8 {
                let shifted = cyclic_shift_features(&f, dy, dx);
                assert_eq!(
                    model.respond(&shifted).unwrap().argmax(),
                    (dy, dx),
                    "shift ({dy},{dx})"
                );
            }
        }
    }

    #[test]
    fn zero_features_give_zero_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_features(&mut rng, 8, 8, 2);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let model = train(&f, &label, 0.1, &cosine_window(8, 8)).unwrap();
        let zeros = FeatureMap::new(Array3::zeros((8, 8, 2)), 1);
        let resp = model.respond(&zeros).unwrap();
        assert!(resp.data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn response_linear_in_search_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_features(&mut rng, 8, 8, 2);
        let z = random_features(&mut rng, 8, 8, 2);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let model = train(&f, &label, 0.1, &cosine_window(8, 8)).unwrap();
        let r1 = model.respond(&z).unwrap();
        let scaled = FeatureMap::new(z.data.mapv(|v| v * 2.5), 1);
        let r2 = model.respond(&scaled).unwrap();
        for (a, b) in r1.data.iter().zip(r2.data.iter()) {
            assert!((b - 2.5 * a).abs() < 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_lambda_with_zero_energy_bin_is_singular() {
        // constant features have zero energy in all non-DC bins
        let f = FeatureMap::new(Array3::from_elem((4, 4, 1), 1.0), 1);
        let label = gaussian_label(4, 4, 1.0).unwrap();
        let err = train(&f, &label, 0.0, &ones_window(4, 4));
        assert!(matches!(err, Err(Error::Singular(_))));
    }

    #[test]
    fn update_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = random_features(&mut rng, 8, 8, 2);
        let g = random_features(&mut rng, 8, 8, 2);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let model = train(&f, &label, 0.1, &cosine_window(8, 8)).unwrap();
        let same = model.updated(&g, 0.0).unwrap();
        assert_eq!(model.num_hat, same.num_hat);
        assert_eq!(model.den, same.den);
    }

    #[test]
    fn update_rate_one_is_fresh_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_features(&mut rng, 8, 8, 2);
        let g = random_features(&mut rng, 8, 8, 2);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let window = cosine_window(8, 8);
        let model = train(&f, &label, 0.1, &window).unwrap();
        let replaced = model.updated(&g, 1.0).unwrap();
        let fresh = train(&g, &label, 0.1, &window).unwrap();
        for (a, b) in replaced.num_hat.iter().zip(fresh.num_hat.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in replaced.den.iter().zip(fresh.den.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_small_updates_equal_one_combined() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = random_features(&mut rng, 8, 8, 1);
        let g = random_features(&mut rng, 8, 8, 1);
        let label = gaussian_label(8, 8, 1.0).unwrap();
        let window = cosine_window(8, 8);
        let model = train(&f, &label, 0.1, &window).unwrap();
        let twice = model.updated(&g, 0.02).unwrap().updated(&g, 0.02).unwrap();
        let once = model.updated(&g, 1.0 - 0.98f64 * 0.98).unwrap();
        for (a, b) in twice.num_hat.iter().zip(once.num_hat.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
        for (a, b) in twice.den.iter().zip(once.den.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn update_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_features(&mut rng, 6, 6, 2);
        let g = random_features(&mut rng, 6, 6, 2);
        let label = gaussian_label(6, 6, 1.0).unwrap();
        let window = cosine_window(6, 6);
        let old = train(&f, &label, 0.1, &window).unwrap();
        let fresh = train(&g, &label, 0.1, &window).unwrap();
        let mixed = old.updated(&g, 0.3).unwrap();
        for ((m, o), fr) in mixed
            .den
            .iter()
            .zip(old.den.iter())
            .zip(fresh.den.iter())
        {
            let (lo, hi) = (o.min(*fr), o.max(*fr));
            assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
        }
        for ((m, o), fr) in mixed
            .num_hat
            .iter()
            .zip(old.num_hat.iter())
            .zip(fresh.num_hat.iter())
        {
            let (lo, hi) = (o.re.min(fr.re), o.re.max(fr.re));
            assert!(m.re >= lo - 1e-12 && m.re <= hi + 1e-12);
            let (lo, hi) = (o.im.min(fr.im), o.im.max(fr.im));
            assert!(m.im >= lo - 1e-12 && m.im <= hi + 1e-12);
        }
    }

    #[test]
    fn update_rejects_out_of_range_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = random_features(&mut rng, 4, 4, 1);
        let label = gaussian_label(4, 4, 1.0).unwrap();
        let model = train(&f, &label, 0.1, &ones_window(4, 4)).unwrap();
        assert!(model.updated(&f, -0.1).is_err());
        assert!(model.updated(&f, 1.1).is_err());
    }
}
