//! Cascade orchestration: per-frame episodes over the feature layers,
//! score-map fusion, translation from the fused map, early stopping, and
//! template management.
//!
//! Each frame runs one episode: layer by layer the tracker crops a search
//! window around the current box, scores it, fuses the score maps seen so
//! far, translates the box toward the fused argmax, and asks the policy
//! whether to deform the box further or stop. Correlation-filter layers are
//! trained at init on the search-geometry crop and optionally blended
//! online; convolutional templates are fixed from the first frame.

mod training;

pub use training::{
    deep_supervise_step, run_training, supervision_loss, EpisodeOutcome, SupervisionRecord,
    TrainOutcome, TrainParams,
};

use crate::agent::{select_action, CascadeState, QNet, MAP_SIZE};
use crate::corrfilter::{self, DcfModel};
use crate::data::Frame;
use crate::error::{invalid, mismatch, Result};
use crate::features::conv::{conv_forward, conv_forward_upto, ConvStackSpec, ConvWeights};
use crate::features::{cross_correlate, hog_layer, pixel_layer, FeatureMap, ScoreMap};
use crate::fft::fftshift;
use crate::geometry::{apply_action, iou, translate, Action, BoundingBox, FrameBounds};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// One cascade layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Correlation filter on mean-removed pixels.
    PixelDcf,
    /// Correlation filter on orientation histograms.
    HogDcf,
    /// Cross-correlation of convolutional features at stack index `.0`.
    Conv(usize),
}

/// How box translation is read off the score maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TranslationMode {
    /// Argmax of the fused 17x17 policy grid, scaled by `search_size / 17`.
    PolicyGrid,
    /// Argmax of the current layer's raw map at its native stride.
    Native,
}

/// Cascade layout and tracking hyperparameters.
#[derive(Clone, Debug)]
pub struct CascadeConfig {
    pub layers: Vec<LayerKind>,
    /// Side of the resampled template crop.
    pub template_size: usize,
    /// Side of the resampled search crop.
    pub search_size: usize,
    /// Side of the policy's fused score grid.
    pub map_size: usize,
    /// Search window size as a multiple of the box size.
    pub padding: f64,
    /// IoU threshold of the stop reward during training.
    pub stop_iou: f64,
    /// Blend correlation-filter statistics online.
    pub dcf_update: bool,
    pub dcf_update_rate: f64,
    pub dcf_lambda: f64,
    pub hog_cell: usize,
    pub hog_bins: usize,
    pub conv: ConvStackSpec,
    /// Constant offset added to conv cross-correlation maps.
    pub conv_offset: f64,
    pub translation: TranslationMode,
    /// Propagate TD error into the active conv layer during training.
    pub deep_supervision: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            layers: vec![
                LayerKind::PixelDcf,
                LayerKind::HogDcf,
                LayerKind::Conv(0),
                LayerKind::Conv(1),
                LayerKind::Conv(2),
            ],
            template_size: 32,
            search_size: 64,
            map_size: MAP_SIZE,
            padding: 2.0,
            stop_iou: 0.6,
            dcf_update: true,
            dcf_update_rate: corrfilter::DEFAULT_UPDATE_RATE,
            dcf_lambda: corrfilter::DEFAULT_LAMBDA,
            hog_cell: 4,
            hog_bins: 9,
            conv: ConvStackSpec::desk_default(3).expect("default depth"),
            conv_offset: 0.0,
            translation: TranslationMode::PolicyGrid,
            deep_supervision: false,
        }
    }
}

impl CascadeConfig {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid!("cascade needs at least one layer"));
        }
        if self.map_size != MAP_SIZE {
            return Err(invalid!(
                "map size {} unsupported; the policy grid is {MAP_SIZE}",
                self.map_size
            ));
        }
        if self.padding < 1.0 {
            return Err(invalid!("padding factor must be at least 1"));
        }
        if self.template_size < 8 || self.search_size < self.template_size {
            return Err(invalid!("template/search crop sizes out of range"));
        }
        self.conv.validate()?;
        // conv layers must come last, in stack order starting at 0
        let first_conv = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerKind::Conv(_)))
            .unwrap_or(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerKind::Conv(k) => {
                    if i - first_conv != *k {
                        return Err(invalid!("conv layers must be contiguous and in order"));
                    }
                    if *k >= self.conv.depth() {
                        return Err(invalid!(
                            "cascade references conv layer {k}, stack depth is {}",
                            self.conv.depth()
                        ));
                    }
                }
                _ if i >= first_conv => {
                    return Err(invalid!("cheap layers must precede conv layers"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-frame outcome: final box, where the episode stopped, the actions
/// taken, and wall-clock per visited layer.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub bbox: BoundingBox,
    /// 1-indexed layer at which the stop action fired.
    pub stop_layer: usize,
    /// Number of agent steps; equals `stop_layer`.
    pub steps: usize,
    /// Actions in order, ending with stop.
    pub actions: Vec<Action>,
    /// Seconds spent in each visited layer.
    pub layer_secs: Vec<f64>,
    /// Seconds for the whole frame.
    pub total_secs: f64,
}

/// Intermediate products of one cascade layer within an episode.
#[derive(Clone, Debug)]
pub(crate) struct EpisodeStep {
    pub moved: BoundingBox,
    pub raw: ScoreMap,
    pub fused: Array2<f64>,
    pub crop: Array2<f64>,
}

/// Decision rule driving the per-frame episode.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// Learned Q-network, epsilon-greedy.
    Learned(&'a QNet),
    /// Take no scaling action, stop once layer `.0` (1-indexed) is reached.
    StopAt(usize),
    /// Stop when the fused map's maximum reaches the threshold, setting the
    /// box scale from the bounding rectangle of the near-maximal region.
    Threshold(f64),
}

/// Bilinear crop of an arbitrary window, resampled to `out x out` and
/// scaled to `[0, 1]`. Samples outside the frame clamp to the border.
pub(crate) fn crop_window(
    frame: &Frame,
    cx: f64,
    cy: f64,
    win_w: f64,
    win_h: f64,
    out: usize,
) -> Array2<f64> {
    let (fh, fw) = frame.dim();
    let sample = |y: f64, x: f64| -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let tx = x - x0;
        let ty = y - y0;
        let xi = |v: f64| (v.max(0.0) as usize).min(fw - 1);
        let yi = |v: f64| (v.max(0.0) as usize).min(fh - 1);
        let (x0i, x1i) = (xi(x0), xi(x0 + 1.0));
        let (y0i, y1i) = (yi(y0), yi(y0 + 1.0));
        let v00 = frame[[y0i, x0i]] as f64;
        let v01 = frame[[y0i, x1i]] as f64;
        let v10 = frame[[y1i, x0i]] as f64;
        let v11 = frame[[y1i, x1i]] as f64;
        let top = v00 * (1.0 - tx) + v01 * tx;
        let bot = v10 * (1.0 - tx) + v11 * tx;
        (top * (1.0 - ty) + bot * ty) / 255.0
    };
    let left = cx - win_w / 2.0;
    let top = cy - win_h / 2.0;
    Array2::from_shape_fn((out, out), |(r, c)| {
        let y = top + (r as f64 + 0.5) * win_h / out as f64 - 0.5;
        let x = left + (c as f64 + 0.5) * win_w / out as f64 - 0.5;
        sample(y, x)
    })
}

/// Bilinear resample with corner alignment.
fn resample_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let pos = |i: usize, out: usize, n: usize| -> f64 {
        if out <= 1 || n <= 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (out - 1) as f64
        }
    };
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let y = pos(r, out_h, h);
        let x = pos(c, out_w, w);
        let y0 = (y.floor() as usize).min(h - 1);
        let x0 = (x.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ty = y - y0 as f64;
        let tx = x - x0 as f64;
        let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
        let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Min-max normalize each raw map to `[0, 1]` (constant maps become 0.5),
/// resample everything to the policy grid, and average.
pub fn fuse_and_resample(raw_maps: &[ScoreMap], map_size: usize) -> Array2<f64> {
    assert!(!raw_maps.is_empty(), "fuse_and_resample needs at least one map");
    let mut acc = Array2::<f64>::zeros((map_size, map_size));
    for map in raw_maps {
        let min = map.data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = map.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let normalized = if max - min < 1e-12 {
            Array2::from_elem(map.data.dim(), 0.5)
        } else {
            map.data.mapv(|v| (v - min) / (max - min))
        };
        acc += &resample_bilinear(&normalized, map_size, map_size);
    }
    acc.mapv_inplace(|v| (v / raw_maps.len() as f64).clamp(0.0, 1.0));
    acc
}

/// Argmax of a fused map with ties broken toward the grid center (then by
/// row-major order), returned as a displacement in search-window pixels:
/// `(argmax - center) * (window / map_size)`.
pub fn translation_from_map(avg_map: &Array2<f64>, search_window_px: usize) -> (f64, f64) {
    let (h, w) = avg_map.dim();
    let center_r = (h - 1) / 2;
    let center_c = (w - 1) / 2;
    let mut best = (0usize, 0usize);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_d2 = i64::MAX;
    for ((r, c), &v) in avg_map.indexed_iter() {
        let dr = r as i64 - center_r as i64;
        let dc = c as i64 - center_c as i64;
        let d2 = dr * dr + dc * dc;
        if v > best_val || (v == best_val && d2 < best_d2) {
            best_val = v;
            best = (r, c);
            best_d2 = d2;
        }
    }
    let cell = search_window_px as f64 / h as f64;
    (
        (best.1 as f64 - center_c as f64) * cell,
        (best.0 as f64 - center_r as f64) * cell,
    )
}

/// Same tie-breaking on a raw map, displacement in window pixels at the
/// map's native stride.
fn translation_native(map: &ScoreMap) -> (f64, f64) {
    let (h, w) = map.data.dim();
    let center_r = h / 2;
    let center_c = w / 2;
    let mut best = (0usize, 0usize);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_d2 = i64::MAX;
    for ((r, c), &v) in map.data.indexed_iter() {
        let dr = r as i64 - center_r as i64;
        let dc = c as i64 - center_c as i64;
        let d2 = dr * dr + dc * dc;
        if v > best_val || (v == best_val && d2 < best_d2) {
            best_val = v;
            best = (r, c);
            best_d2 = d2;
        }
    }
    (
        (best.1 as f64 - center_c as f64) * map.stride as f64,
        (best.0 as f64 - center_r as f64) * map.stride as f64,
    )
}

/// A tracking session: one target, one cascade, mutable across frames.
#[derive(Clone, Debug)]
pub struct TrackerSession {
    config: CascadeConfig,
    bounds: FrameBounds,
    /// Correlation-filter models, indexed by cascade layer (None for conv).
    dcf: Vec<Option<DcfModel>>,
    conv_weights: ConvWeights,
    /// Template features per conv stack layer.
    conv_templates: Vec<FeatureMap>,
    /// Template crop kept for refreshing templates after weight updates.
    template_crop: Array2<f64>,
    current_box: BoundingBox,
    frame_index: usize,
}

impl TrackerSession {
    /// Initialize on the first frame with freshly seeded conv weights.
    pub fn init(
        frame: &Frame,
        gt_box: BoundingBox,
        config: CascadeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weights = ConvWeights::seeded(&config.conv, rng);
        Self::init_with_weights(frame, gt_box, config, weights)
    }

    /// Initialize with existing conv weights (e.g. from a checkpoint).
    pub fn init_with_weights(
        frame: &Frame,
        gt_box: BoundingBox,
        config: CascadeConfig,
        conv_weights: ConvWeights,
    ) -> Result<Self> {
        config.validate()?;
        conv_weights.matches(&config.conv)?;
        let (fh, fw) = frame.dim();
        let bounds = FrameBounds::new(fw as f64, fh as f64);
        if !gt_box.is_inside(bounds) {
            return Err(invalid!("initial box lies outside the frame"));
        }

        let template_crop = crop_window(
            frame,
            gt_box.cx,
            gt_box.cy,
            gt_box.w,
            gt_box.h,
            config.template_size,
        );
        let conv_templates = conv_forward(&config.conv, &conv_weights, &template_crop)?;

        // correlation filters are trained on the search-geometry crop so
        // their response dims match tracking-time features
        let init_search = crop_window(
            frame,
            gt_box.cx,
            gt_box.cy,
            config.padding * gt_box.w,
            config.padding * gt_box.h,
            config.search_size,
        );
        let mut dcf = Vec::with_capacity(config.layers.len());
        for layer in &config.layers {
            let features = match layer {
                LayerKind::PixelDcf => Some(pixel_layer(&init_search)?),
                LayerKind::HogDcf => Some(hog_layer(&init_search, config.hog_cell, config.hog_bins)?),
                LayerKind::Conv(_) => None,
            };
            dcf.push(match features {
                Some(f) => {
                    let (h, w, _) = f.data.dim();
                    let label =
                        corrfilter::gaussian_label(h, w, corrfilter::default_label_sigma(h, w))?;
                    let window = corrfilter::cosine_window(h, w);
                    Some(corrfilter::train(&f, &label, config.dcf_lambda, &window)?)
                }
                None => None,
            });
        }

        Ok(Self {
            config,
            bounds,
            dcf,
            conv_weights,
            conv_templates,
            template_crop,
            current_box: gt_box,
            frame_index: 0,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn bounds(&self) -> FrameBounds {
        self.bounds
    }

    pub fn layer_count(&self) -> usize {
        self.config.layers.len()
    }

    pub fn current_box(&self) -> BoundingBox {
        self.current_box
    }

    /// Override the tracked box (ground-truth resets during training).
    pub fn set_current_box(&mut self, bbox: BoundingBox) {
        self.current_box = bbox.clamped(self.bounds);
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn conv_weights(&self) -> &ConvWeights {
        &self.conv_weights
    }

    pub(crate) fn template_crop(&self) -> &Array2<f64> {
        &self.template_crop
    }

    pub(crate) fn set_conv_weights(&mut self, weights: ConvWeights) -> Result<()> {
        weights.matches(&self.config.conv)?;
        self.conv_weights = weights;
        self.conv_templates =
            conv_forward(&self.config.conv, &self.conv_weights, &self.template_crop)?;
        Ok(())
    }

    pub(crate) fn dcf_model(&self, layer: usize) -> Option<&DcfModel> {
        self.dcf.get(layer).and_then(|m| m.as_ref())
    }

    pub(crate) fn restore_state(
        &mut self,
        dcf: Vec<Option<DcfModel>>,
        bbox: BoundingBox,
        frame_index: usize,
    ) -> Result<()> {
        if dcf.len() != self.config.layers.len() {
            return Err(mismatch!("restored DCF state does not match the cascade"));
        }
        self.dcf = dcf;
        self.current_box = bbox;
        self.frame_index = frame_index;
        Ok(())
    }

    /// Raw score map of one layer on a search crop, zero displacement at
    /// the map center.
    pub fn layer_score(&self, layer_index: usize, search_crop: &Array2<f64>) -> Result<ScoreMap> {
        let kind = self
            .config
            .layers
            .get(layer_index)
            .ok_or_else(|| invalid!("layer {layer_index} out of range"))?;
        match kind {
            LayerKind::PixelDcf | LayerKind::HogDcf => {
                let features = match kind {
                    LayerKind::PixelDcf => pixel_layer(search_crop)?,
                    _ => hog_layer(search_crop, self.config.hog_cell, self.config.hog_bins)?,
                };
                let model = self.dcf[layer_index]
                    .as_ref()
                    .ok_or_else(|| invalid!("layer {layer_index} has no trained filter"))?;
                let raw = model.respond(&features)?;
                // cyclic response peaks at (0,0) for zero shift; center it
                Ok(ScoreMap::new(fftshift(&raw.data), raw.stride))
            }
            LayerKind::Conv(k) => {
                let maps = conv_forward_upto(&self.config.conv, &self.conv_weights, search_crop, *k)?;
                cross_correlate(&self.conv_templates[*k], &maps[*k], self.config.conv_offset)
            }
        }
    }

    /// One layer of the episode: crop around `bbox`, score, fuse with the
    /// maps of earlier layers, translate.
    pub(crate) fn episode_step(
        &self,
        frame: &Frame,
        bbox: &BoundingBox,
        layer: usize,
        prior_maps: &[ScoreMap],
    ) -> Result<EpisodeStep> {
        let win_w = self.config.padding * bbox.w;
        let win_h = self.config.padding * bbox.h;
        let crop = crop_window(frame, bbox.cx, bbox.cy, win_w, win_h, self.config.search_size);
        let raw = self.layer_score(layer, &crop)?;

        let mut all: Vec<ScoreMap> = Vec::with_capacity(prior_maps.len() + 1);
        all.extend_from_slice(prior_maps);
        all.push(raw.clone());
        let fused = fuse_and_resample(&all, self.config.map_size);

        let (dx_win, dy_win) = match self.config.translation {
            TranslationMode::PolicyGrid => translation_from_map(&fused, self.config.search_size),
            TranslationMode::Native => translation_native(&raw),
        };
        // window pixels back to frame pixels
        let dx = dx_win * win_w / self.config.search_size as f64;
        let dy = dy_win * win_h / self.config.search_size as f64;
        let moved = translate(bbox, dx, dy, self.bounds);
        Ok(EpisodeStep {
            moved,
            raw,
            fused,
            crop,
        })
    }

    /// Blend every correlation-filter layer toward features of the final
    /// box's search crop.
    fn update_dcf_models(&mut self, frame: &Frame, bbox: &BoundingBox) -> Result<()> {
        let rate = self.config.dcf_update_rate;
        for (i, kind) in self.config.layers.clone().iter().enumerate() {
            let features = match kind {
                LayerKind::PixelDcf | LayerKind::HogDcf => {
                    let crop = crop_window(
                        frame,
                        bbox.cx,
                        bbox.cy,
                        self.config.padding * bbox.w,
                        self.config.padding * bbox.h,
                        self.config.search_size,
                    );
                    match kind {
                        LayerKind::PixelDcf => pixel_layer(&crop)?,
                        _ => hog_layer(&crop, self.config.hog_cell, self.config.hog_bins)?,
                    }
                }
                LayerKind::Conv(_) => continue,
            };
            let model = self.dcf[i].take().expect("cheap layer has a model");
            self.dcf[i] = Some(model.updated(&features, rate)?);
        }
        Ok(())
    }

    /// Run one frame under a policy. The episode's action history feeds the
    /// per-layer states and resets at the next frame.
    pub fn track_frame(
        &mut self,
        frame: &Frame,
        policy: &Policy,
        epsilon: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<FrameResult> {
        let total_start = Instant::now();
        let layer_count = self.layer_count();
        let mut bbox = self.current_box;
        let mut raw_maps: Vec<ScoreMap> = Vec::with_capacity(layer_count);
        let mut actions: Vec<Action> = Vec::with_capacity(layer_count);
        let mut layer_secs = Vec::with_capacity(layer_count);
        let mut stop_layer = 0;

        for layer in 0..layer_count {
            let layer_start = Instant::now();
            let step = self.episode_step(frame, &bbox, layer, &raw_maps)?;
            bbox = step.moved;
            let fused = step.fused;
            raw_maps.push(step.raw);
            let force_stop = layer + 1 == layer_count;
            let state = CascadeState::new(fused.clone(), &actions)?;

            let action = match policy {
                Policy::Learned(net) => select_action(net, &state, epsilon, rng, force_stop),
                Policy::StopAt(k) => {
                    if force_stop || layer + 1 >= *k {
                        Action::Stop
                    } else {
                        Action::NoScale
                    }
                }
                Policy::Threshold(tau) => {
                    let max = fused.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if force_stop || max >= *tau {
                        Action::Stop
                    } else {
                        Action::NoScale
                    }
                }
            };

            if action.is_stop() {
                if let Policy::Threshold(_) = policy {
                    bbox = self.threshold_rescale(&fused, &bbox);
                }
                actions.push(Action::Stop);
                stop_layer = layer + 1;
                if self.config.dcf_update {
                    self.update_dcf_models(frame, &bbox)?;
                }
                layer_secs.push(layer_start.elapsed().as_secs_f64());
                break;
            }
            bbox = apply_action(&bbox, action, self.bounds)?;
            actions.push(action);
            layer_secs.push(layer_start.elapsed().as_secs_f64());
        }

        self.current_box = bbox;
        self.frame_index += 1;
        Ok(FrameResult {
            bbox,
            stop_layer,
            steps: stop_layer,
            actions,
            layer_secs,
            total_secs: total_start.elapsed().as_secs_f64(),
        })
    }

    /// Box scale from the bounding rectangle of the near-maximal region of
    /// the fused map (threshold-heuristic baseline).
    fn threshold_rescale(&self, fused: &Array2<f64>, bbox: &BoundingBox) -> BoundingBox {
        let max = fused.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let cutoff = 0.9 * max;
        let (h, w) = fused.dim();
        let (mut r0, mut r1, mut c0, mut c1) = (h, 0usize, w, 0usize);
        for ((r, c), &v) in fused.indexed_iter() {
            if v >= cutoff {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
        if r0 > r1 || c0 > c1 {
            return *bbox;
        }
        let win_w = self.config.padding * bbox.w;
        let win_h = self.config.padding * bbox.h;
        let new_w = (c1 - c0 + 1) as f64 / w as f64 * win_w;
        let new_h = (r1 - r0 + 1) as f64 / h as f64 * win_h;
        BoundingBox::new(bbox.cx, bbox.cy, new_w, new_h).clamped(self.bounds)
    }

    /// Training-time episode: epsilon-greedy actions, rewards against the
    /// ground truth, transitions pushed into the replay buffer.
    pub fn train_episode(
        &mut self,
        frame: &Frame,
        gt_box: BoundingBox,
        net: &QNet,
        epsilon: f64,
        buffer: &mut crate::agent::ReplayBuffer,
        rng: &mut ChaCha8Rng,
    ) -> Result<EpisodeOutcome> {
        training::train_episode_impl(self, frame, gt_box, net, epsilon, buffer, rng)
    }

    /// IoU of the current box against a reference.
    pub fn current_iou(&self, gt: &BoundingBox) -> f64 {
        iou(&self.current_box, gt)
    }
}

#[cfg(test)]
mod tests;
