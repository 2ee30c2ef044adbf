//! Feature computations for the cascade layers.
//!
//! A [`FeatureMap`] is an `H x W x C` grid of reals with a pixel stride
//! relative to the window it was computed from; a [`ScoreMap`] is the 2-D
//! confidence grid produced by matching a template against a search window.
//!
//! The cheap layers live here ([`pixel_layer`], [`hog_layer`]) together with
//! valid-mode multi-channel [`cross_correlate`]; the convolutional stack is
//! in [`conv`], its on-disk weight format in [`weights_io`].

pub mod conv;
pub mod weights_io;

use crate::error::{invalid, mismatch, Result};
use ndarray::{Array2, Array3};

/// Dense feature grid with `stride` input pixels per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// Values indexed `[row, col, channel]`.
    pub data: Array3<f64>,
    /// Input pixels per cell.
    pub stride: usize,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stride: usize) -> Self {
        debug_assert!(stride >= 1);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data, stride }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// 2-D confidence grid at a given pixel stride.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub data: Array2<f64>,
    pub stride: usize,
}

impl ScoreMap {
    pub fn new(data: Array2<f64>, stride: usize) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { data, stride }
    }

    /// Row-major argmax; earlier index wins ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_val = f64::NEG_INFINITY;
        for ((r, c), &v) in self.data.indexed_iter() {
            if v > best_val {
                best_val = v;
                best = (r, c);
            }
        }
        best
    }
}

/// The zeroth cascade layer: the raw window with its mean removed.
pub fn pixel_layer(window: &Array2<f64>) -> Result<FeatureMap> {
    let (h, w) = window.dim();
    if h == 0 || w == 0 {
        return Err(invalid!("pixel_layer on empty window"));
    }
    let mean = window.sum() / (h * w) as f64;
    let mut data = Array3::zeros((h, w, 1));
    for ((r, c), &v) in window.indexed_iter() {
        data[[r, c, 0]] = v - mean;
    }
    Ok(FeatureMap::new(data, 1))
}

/// Added under the root of the squared block energy in HOG normalization.
pub const HOG_BLOCK_EPS: f64 = 1e-6;

/// Per-cell histograms of gradient orientation, block-normalized.
///
/// Gradients are clamped central differences, orientations unsigned over
/// `[0, pi)` with hard assignment into `bins` equal bins, votes weighted by
/// gradient magnitude. Each cell histogram is divided by the L2 energy of
/// the 2x2 cell block anchored at it (clamped at the grid edge). Windows
/// not divisible by `cell` are edge-replicated up to the next multiple.
pub fn hog_layer(window: &Array2<f64>, cell: usize, bins: usize) -> Result<FeatureMap> {
    let (h, w) = window.dim();
    if cell == 0 || bins == 0 {
        return Err(invalid!("hog_layer needs cell >= 1 and bins >= 1"));
    }
    if cell > h || cell > w {
        return Err(invalid!(
            "hog cell {cell} larger than window {h}x{w}"
        ));
    }

    let ph = h.div_ceil(cell) * cell;
    let pw = w.div_ceil(cell) * cell;
    let padded;
    let win = if (ph, pw) == (h, w) {
        window
    } else {
        padded = Array2::from_shape_fn((ph, pw), |(r, c)| window[[r.min(h - 1), c.min(w - 1)]]);
        &padded
    };

    let rows = ph / cell;
    let cols = pw / cell;
    let mut hist = Array3::<f64>::zeros((rows, cols, bins));
    for y in 0..ph {
        for x in 0..pw {
            let gx = win[[y, (x + 1).min(pw - 1)]] - win[[y, x.saturating_sub(1)]];
            let gy = win[[(y + 1).min(ph - 1), x]] - win[[y.saturating_sub(1), x]];
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            if theta >= std::f64::consts::PI {
                theta = 0.0;
            }
            let bin = ((theta / std::f64::consts::PI * bins as f64) as usize).min(bins - 1);
            hist[[y / cell, x / cell, bin]] += mag;
        }
    }

    let mut out = Array3::zeros((rows, cols, bins));
    for i in 0..rows {
        for j in 0..cols {
            let mut energy = 0.0;
            for di in 0..2 {
                for dj in 0..2 {
                    let (bi, bj) = (i + di, j + dj);
                    if bi < rows && bj < cols {
                        for b in 0..bins {
                            energy += hist[[bi, bj, b]] * hist[[bi, bj, b]];
                        }
                    }
                }
            }
            let norm = (energy + HOG_BLOCK_EPS).sqrt();
            for b in 0..bins {
                out[[i, j, b]] = hist[[i, j, b]] / norm;
            }
        }
    }
    Ok(FeatureMap::new(out, cell))
}

/// Valid-mode multi-channel inner-product correlation plus a constant offset.
///
/// `out[y, x] = v + sum_c sum_dy sum_dx template[dy, dx, c] * search[y+dy, x+dx, c]`
pub fn cross_correlate(template: &FeatureMap, search: &FeatureMap, v: f64) -> Result<ScoreMap> {
    if template.channels() != search.channels() {
        return Err(mismatch!(
            "template has {} channels, search has {}",
            template.channels(),
            search.channels()
        ));
    }
    if template.stride != search.stride {
        return Err(mismatch!(
            "template stride {} != search stride {}",
            template.stride,
            search.stride
        ));
    }
    let (th, tw, ch) = template.data.dim();
    let (sh, sw, _) = search.data.dim();
    if th > sh || tw > sw {
        return Err(mismatch!(
            "template {th}x{tw} exceeds search {sh}x{sw}"
        ));
    }

    let (oh, ow) = (sh - th + 1, sw - tw + 1);
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..th {
                for dx in 0..tw {
                    for c in 0..ch {
                        acc += template.data[[dy, dx, c]] * search.data[[y + dy, x + dx, c]];
                    }
                }
            }
            out[[y, x]] = acc + v;
        }
    }
    Ok(ScoreMap::new(out, search.stride))
}

/// Gradients of [`cross_correlate`] with respect to both operands, given
/// the upstream gradient on the score map.
pub fn cross_correlate_backward(
    template: &FeatureMap,
    search: &FeatureMap,
    upstream: &Array2<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (th, tw, ch) = template.data.dim();
    let (sh, sw, sc) = search.data.dim();
    if ch != sc {
        return Err(mismatch!("channel counts differ"));
    }
    if upstream.dim() != (sh - th + 1, sw - tw + 1) {
        return Err(mismatch!(
            "upstream {:?} does not match the valid-mode output",
            upstream.dim()
        ));
    }
    let mut g_template = Array3::zeros((th, tw, ch));
    let mut g_search = Array3::zeros((sh, sw, ch));
    for ((y, x), &g) in upstream.indexed_iter() {
        if g == 0.0 {
            continue;
        }
        for dy in 0..th {
            for dx in 0..tw {
                for c in 0..ch {
                    g_template[[dy, dx, c]] += g * search.data[[y + dy, x + dx, c]];
                    g_search[[y + dy, x + dx, c]] += g * template.data[[dy, dx, c]];
                }
            }
        }
    }
    Ok((g_template, g_search))
}
