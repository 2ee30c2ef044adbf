//! Training loop and deep supervision.
//!
//! Per-frame training episodes mirror test-time tracking but act
//! epsilon-greedily, compare against ground truth for rewards, and emit
//! transitions into the replay buffer. After every episode the Q-network
//! takes one SGD step on a sampled minibatch; with deep supervision on,
//! each transition that fired on a convolutional layer additionally sends
//! its TD error through the fused map and the cross-correlation into that
//! layer's kernel.

use super::{fuse_and_resample, CascadeConfig, EpisodeStep, FrameResult, TrackerSession};
use crate::agent::{
    epsilon_schedule, q_learn_step, reward_with_threshold, select_action, td_target,
    CascadeState, QNet, ReplayBuffer, Transition,
};
use crate::data::{Frame, Sequence};
use crate::error::{invalid, mismatch, Result};
use crate::features::conv::{
    conv_backward, conv_forward_traced, ConvStackSpec, ConvWeights,
};
use crate::features::{cross_correlate, cross_correlate_backward, ScoreMap};
use crate::geometry::{apply_action, iou, Action, BoundingBox};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Hyperparameters of the training loop.
#[derive(Clone, Debug)]
pub struct TrainParams {
    pub epochs: usize,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub dropout: f64,
    /// Reset the tracked box to the previous frame's ground truth before
    /// each episode instead of carrying the tracked box over.
    pub reset_to_gt: bool,
    /// Learning rate of deep-supervision conv updates.
    pub deep_lr: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 12,
            gamma: 0.9,
            lr: 1e-3,
            batch_size: 64,
            buffer_capacity: 10_000,
            dropout: 0.5,
            reset_to_gt: false,
            deep_lr: 1e-3,
        }
    }
}

/// Everything a conv-layer supervision step needs to replay its chain.
#[derive(Clone, Debug)]
pub struct SupervisionRecord {
    /// Index of the layer in the cascade.
    pub cascade_layer: usize,
    /// Index into the conv stack.
    pub conv_index: usize,
    pub search_crop: Array2<f64>,
    /// Raw maps of the layers visited before this one.
    pub prior_maps: Vec<ScoreMap>,
    /// Actions taken before this layer (the state's history source).
    pub taken_before: Vec<Action>,
    pub transition: Transition,
}

/// Result of one training episode.
#[derive(Debug)]
pub struct EpisodeOutcome {
    pub result: FrameResult,
    pub transitions: usize,
    pub total_reward: i32,
    pub supervision: Vec<SupervisionRecord>,
}

pub(super) fn train_episode_impl(
    session: &mut TrackerSession,
    frame: &Frame,
    gt_box: BoundingBox,
    net: &QNet,
    epsilon: f64,
    buffer: &mut ReplayBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    let total_start = Instant::now();
    let layer_count = session.layer_count();
    let supervise = session.config.deep_supervision;
    let stop_iou = session.config.stop_iou;

    let mut bbox = session.current_box;
    let mut raw_maps: Vec<ScoreMap> = Vec::with_capacity(layer_count);
    let mut crops: Vec<Array2<f64>> = Vec::new();
    let mut actions: Vec<Action> = Vec::with_capacity(layer_count);
    let mut layer_secs = Vec::with_capacity(layer_count);
    let mut pending: Option<(CascadeState, Action, i32, usize)> = None;
    let mut transitions = 0usize;
    let mut total_reward = 0i32;
    let mut supervision = Vec::new();
    let mut stop_layer = 0usize;

    for layer in 0..layer_count {
        let layer_start = Instant::now();
        let step = session.episode_step(frame, &bbox, layer, &raw_maps)?;
        bbox = step.moved;
        let iou_prev = iou(&bbox, &gt_box);
        let state = CascadeState::new(step.fused.clone(), &actions)?;

        if let Some((s, a, r, from_layer)) = pending.take() {
            commit_transition(
                session,
                Transition {
                    state: s,
                    action: a,
                    reward: r,
                    next: Some(state.clone()),
                    terminal: false,
                },
                from_layer,
                &raw_maps,
                &crops,
                &actions,
                buffer,
                &mut supervision,
            );
            transitions += 1;
        }

        if supervise {
            crops.push(step.crop.clone());
        }

        let force_stop = layer + 1 == layer_count;
        let action = select_action(net, &state, epsilon, rng, force_stop);

        if action.is_stop() {
            let r = reward_with_threshold(iou_prev, iou_prev, action, stop_iou);
            total_reward += r;
            raw_maps.push(step.raw);
            commit_transition(
                session,
                Transition {
                    state,
                    action,
                    reward: r,
                    next: None,
                    terminal: true,
                },
                layer,
                &raw_maps,
                &crops,
                &actions,
                buffer,
                &mut supervision,
            );
            transitions += 1;
            actions.push(action);
            stop_layer = layer + 1;
            if session.config.dcf_update {
                session.update_dcf_models(frame, &bbox)?;
            }
            layer_secs.push(layer_start.elapsed().as_secs_f64());
            break;
        }

        let moved = apply_action(&bbox, action, session.bounds)?;
        let r = reward_with_threshold(iou_prev, iou(&moved, &gt_box), action, stop_iou);
        total_reward += r;
        bbox = moved;
        pending = Some((state, action, r, layer));
        actions.push(action);
        raw_maps.push(step.raw);
        layer_secs.push(layer_start.elapsed().as_secs_f64());
    }

    session.current_box = bbox;
    session.frame_index += 1;
    Ok(EpisodeOutcome {
        result: FrameResult {
            bbox,
            stop_layer,
            steps: stop_layer,
            actions,
            layer_secs,
            total_secs: total_start.elapsed().as_secs_f64(),
        },
        transitions,
        total_reward,
        supervision,
    })
}

#[allow(clippy::too_many_arguments)]
fn commit_transition(
    session: &TrackerSession,
    t: Transition,
    layer: usize,
    raw_maps: &[ScoreMap],
    crops: &[Array2<f64>],
    actions: &[Action],
    buffer: &mut ReplayBuffer,
    supervision: &mut Vec<SupervisionRecord>,
) {
    if session.config.deep_supervision {
        if let super::LayerKind::Conv(k) = session.config.layers[layer] {
            supervision.push(SupervisionRecord {
                cascade_layer: layer,
                conv_index: k,
                search_crop: crops[layer].clone(),
                prior_maps: raw_maps[..layer].to_vec(),
                taken_before: actions[..layer].to_vec(),
                transition: t.clone(),
            });
        }
    }
    buffer.push(t);
}

/// Trained network plus (possibly supervised) conv weights and per-epoch
/// mean episode rewards.
#[derive(Debug)]
pub struct TrainOutcome {
    pub qnet: QNet,
    pub conv_weights: ConvWeights,
    pub epoch_mean_reward: Vec<f64>,
}

/// Offline training over a corpus: per epoch, iterate sequences and
/// frames, run an episode per frame, and take one Q-learning step on a
/// sampled minibatch after each episode. Epsilon follows the linear
/// schedule. Zero epochs returns the freshly seeded networks.
pub fn run_training(
    corpus: &[Sequence],
    config: &CascadeConfig,
    params: &TrainParams,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(invalid!("training corpus is empty"));
    }
    config.validate()?;
    let mut qnet = QNet::seeded(params.dropout, rng);
    let mut conv_weights = ConvWeights::seeded(&config.conv, rng);
    let mut buffer = ReplayBuffer::new(params.buffer_capacity);
    let mut epoch_mean_reward = Vec::with_capacity(params.epochs);

    for epoch in 0..params.epochs {
        let eps = epsilon_schedule(epoch, params.epochs);
        let mut reward_sum = 0i64;
        let mut episodes = 0usize;
        for seq in corpus {
            if seq.len() < 2 {
                return Err(invalid!("sequence {} is too short to train on", seq.name));
            }
            let mut session = TrackerSession::init_with_weights(
                &seq.frames[0],
                seq.gt[0],
                config.clone(),
                conv_weights.clone(),
            )?;
            for f in 1..seq.len() {
                if params.reset_to_gt {
                    session.set_current_box(seq.gt[f - 1]);
                }
                let outcome =
                    session.train_episode(&seq.frames[f], seq.gt[f], &qnet, eps, &mut buffer, rng)?;
                reward_sum += outcome.total_reward as i64;
                episodes += 1;
                if !buffer.is_empty() {
                    let batch = buffer.sample(params.batch_size, rng);
                    q_learn_step(&mut qnet, &batch, params.gamma, params.lr, rng)?;
                }
                if config.deep_supervision {
                    for rec in &outcome.supervision {
                        deep_supervise_step(&mut session, rec, &qnet, params.gamma, params.deep_lr)?;
                    }
                }
            }
            if config.deep_supervision {
                conv_weights = session.conv_weights().clone();
            }
        }
        epoch_mean_reward.push(reward_sum as f64 / episodes as f64);
    }

    Ok(TrainOutcome {
        qnet,
        conv_weights,
        epoch_mean_reward,
    })
}

fn truncated(spec: &ConvStackSpec, weights: &ConvWeights, upto: usize) -> (ConvStackSpec, ConvWeights) {
    (
        ConvStackSpec {
            layers: spec.layers[..=upto].to_vec(),
        },
        ConvWeights {
            kernels: weights.kernels[..=upto].to_vec(),
        },
    )
}

/// Gradient of min-max normalization, treating min and max as functions of
/// their (first, row-major) argmin/argmax cells. Constant maps have zero
/// gradient.
fn minmax_backward(raw: &Array2<f64>, g_norm: &Array2<f64>) -> Array2<f64> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut argmin = (0, 0);
    let mut argmax = (0, 0);
    for ((r, c), &v) in raw.indexed_iter() {
        if v < min {
            min = v;
            argmin = (r, c);
        }
        if v > max {
            max = v;
            argmax = (r, c);
        }
    }
    let d = max - min;
    if d < 1e-12 {
        return Array2::zeros(raw.dim());
    }
    let mut s = 0.0;
    let mut t = 0.0;
    for (g, &v) in g_norm.iter().zip(raw.iter()) {
        s += g;
        t += g * (v - min) / d;
    }
    let mut out = g_norm.mapv(|g| g / d);
    out[argmin] += (t - s) / d;
    out[argmax] -= t / d;
    out
}

/// Transpose of the corner-aligned bilinear resample.
fn resample_bilinear_backward(g_out: &Array2<f64>, src_h: usize, src_w: usize) -> Array2<f64> {
    let (oh, ow) = g_out.dim();
    let pos = |i: usize, out: usize, n: usize| -> f64 {
        if out <= 1 || n <= 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (out - 1) as f64
        }
    };
    let mut g_src = Array2::zeros((src_h, src_w));
    for ((r, c), &g) in g_out.indexed_iter() {
        let y = pos(r, oh, src_h);
        let x = pos(c, ow, src_w);
        let y0 = (y.floor() as usize).min(src_h - 1);
        let x0 = (x.floor() as usize).min(src_w - 1);
        let y1 = (y0 + 1).min(src_h - 1);
        let x1 = (x0 + 1).min(src_w - 1);
        let ty = y - y0 as f64;
        let tx = x - x0 as f64;
        g_src[[y0, x0]] += g * (1.0 - ty) * (1.0 - tx);
        g_src[[y0, x1]] += g * (1.0 - ty) * tx;
        g_src[[y1, x0]] += g * ty * (1.0 - tx);
        g_src[[y1, x1]] += g * ty * tx;
    }
    g_src
}

fn supervision_q_value(
    session: &TrackerSession,
    weights: &ConvWeights,
    rec: &SupervisionRecord,
    net: &QNet,
) -> Result<f64> {
    let (spec_t, weights_t) = truncated(&session.config.conv, weights, rec.conv_index);
    let (tmpl_maps, _) = conv_forward_traced(&spec_t, &weights_t, session.template_crop())?;
    let (srch_maps, _) = conv_forward_traced(&spec_t, &weights_t, &rec.search_crop)?;
    let raw = cross_correlate(
        &tmpl_maps[rec.conv_index],
        &srch_maps[rec.conv_index],
        session.config.conv_offset,
    )?;
    let mut maps = rec.prior_maps.clone();
    maps.push(raw);
    let fused = fuse_and_resample(&maps, session.config.map_size);
    let state = CascadeState::new(fused, &rec.taken_before)?;
    Ok(net.eval(&state)[rec.transition.action.index()])
}

/// Squared TD error of the recorded transition when the active conv
/// layer's weights are replaced by `weights`; the target is frozen.
/// Used by finite-difference checks of the supervision chain.
pub fn supervision_loss(
    session: &TrackerSession,
    weights: &ConvWeights,
    rec: &SupervisionRecord,
    net: &QNet,
    td: f64,
) -> Result<f64> {
    let q = supervision_q_value(session, weights, rec, net)?;
    Ok((td - q) * (td - q))
}

/// One SGD step on the active conv layer from a recorded transition's TD
/// error, propagated through the fused map and the cross-correlation.
/// Layers other than the active one are untouched; templates are
/// recomputed afterwards. Returns the loss before the step.
pub fn deep_supervise_step(
    session: &mut TrackerSession,
    rec: &SupervisionRecord,
    net: &QNet,
    gamma: f64,
    lr: f64,
) -> Result<f64> {
    if !session.config.deep_supervision {
        return Err(invalid!("deep supervision is disabled in this config"));
    }
    if rec.cascade_layer >= session.config.layers.len()
        || session.config.layers[rec.cascade_layer] != super::LayerKind::Conv(rec.conv_index)
    {
        return Err(mismatch!("supervision record does not match the cascade"));
    }
    let k = rec.conv_index;
    let q_next = rec.transition.next.as_ref().map(|s| net.eval(s));
    let td = td_target(rec.transition.reward, q_next.as_ref(), gamma, rec.transition.terminal)?;

    let (spec_t, weights_t) = truncated(&session.config.conv, &session.conv_weights, k);
    let (tmpl_maps, tmpl_traces) = conv_forward_traced(&spec_t, &weights_t, &session.template_crop)?;
    let (srch_maps, srch_traces) = conv_forward_traced(&spec_t, &weights_t, &rec.search_crop)?;
    let raw = cross_correlate(&tmpl_maps[k], &srch_maps[k], session.config.conv_offset)?;

    let mut maps = rec.prior_maps.clone();
    maps.push(raw.clone());
    let map_count = maps.len() as f64;
    let fused = fuse_and_resample(&maps, session.config.map_size);
    let state = CascadeState::new(fused, &rec.taken_before)?;
    let (q_a, input_grad) = net.value_and_input_gradient(&state, rec.transition.action);
    let loss = (td - q_a) * (td - q_a);
    if loss == 0.0 {
        return Ok(0.0);
    }
    let dq = 2.0 * (q_a - td);

    // gradient w.r.t. the fused map cells (the map part of the input), with
    // the active layer's 1/n averaging weight
    let m = session.config.map_size;
    let g_fused = Array2::from_shape_fn((m, m), |(r, c)| {
        dq * input_grad[r * m + c] / map_count
    });
    let (rh, rw) = raw.data.dim();
    let g_norm = resample_bilinear_backward(&g_fused, rh, rw);
    let g_raw = minmax_backward(&raw.data, &g_norm);
    let (g_tmpl, g_srch) = cross_correlate_backward(&tmpl_maps[k], &srch_maps[k], &g_raw)?;

    let upstream_for = |g: Array3<f64>| -> Vec<Option<Array3<f64>>> {
        let mut v: Vec<Option<Array3<f64>>> = vec![None; k + 1];
        v[k] = Some(g);
        v
    };
    let grads_tmpl = conv_backward(&spec_t, &weights_t, &tmpl_traces, &upstream_for(g_tmpl))?;
    let grads_srch = conv_backward(&spec_t, &weights_t, &srch_traces, &upstream_for(g_srch))?;

    let mut update = grads_tmpl.weights[k].clone();
    update += &grads_srch.weights[k];
    session.conv_weights.kernels[k].zip_mut_with(&update, |w, g| *w -= lr * g);
    // templates depend on the weights; refresh them
    let weights = session.conv_weights.clone();
    session.set_conv_weights(weights)?;
    Ok(loss)
}
