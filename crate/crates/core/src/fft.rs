//! Small 2-D FFT helpers on top of `rustfft`.
//!
//! Transforms are unnormalized forward and `1/(h*w)`-normalized inverse, so
//! `ifft2(fft2(x)) == x`. A thread-local planner caches butterflies across
//! calls; response maps are computed every frame, so this matters.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let (planner, cache) = &mut *cell.borrow_mut();
        cache
            .entry((len, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

fn transform2(data: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);

    let mut out = data.clone();
    for mut row in out.rows_mut() {
        let slice = row.as_slice_mut().expect("contiguous row");
        row_fft.process(slice);
    }
    let mut col = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = out[[r, c]];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            out[[r, c]] = col[r];
        }
    }
    out
}

pub(crate) fn fft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    transform2(data, false)
}

pub(crate) fn ifft2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let (h, w) = data.dim();
    let mut out = transform2(data, true);
    let norm = 1.0 / (h * w) as f64;
    out.mapv_inplace(|v| v * norm);
    out
}

pub(crate) fn fft2_real(data: &Array2<f64>) -> Array2<Complex64> {
    fft2(&data.mapv(|v| Complex64::new(v, 0.0)))
}

/// Swap quadrants so the zero-shift bin moves to `(h/2, w/2)`.
pub(crate) fn fftshift(data: &Array2<f64>) -> Array2<f64> {
    let (h, w) = data.dim();
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            out[[(r + h / 2) % h, (c + w / 2) % w]] = data[[r, c]];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_inverse_round_trip() {
        let x = array![[1.0, 2.0, -1.0, 0.5], [0.0, 3.0, 1.0, -2.0]];
        let back = ifft2(&fft2_real(&x));
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b.re).abs() < 1e-12);
            assert!(b.im.abs() < 1e-12);
        }
    }

    #[test]
    fn dc_bin_is_sum() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let f = fft2_real(&x);
        assert!((f[[0, 0]].re - 10.0).abs() < 1e-12);
    }

    #[test]
    fn fftshift_moves_origin_to_center() {
        let mut x = Array2::zeros((4, 6));
        x[[0, 0]] = 1.0;
        let s = fftshift(&x);
        assert_eq!(s[[2, 3]], 1.0);
    }
}
