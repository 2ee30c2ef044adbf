//! The decision-making core: cascade state encoding, the reward scheme,
//! the Q-network with its learning step, epsilon-greedy selection, and the
//! annealing schedule.
//!
//! The network is three affine stages (321 -> 128 -> 128 -> 8) with
//! rectifiers and inverted-scaling dropout between them. Learning is plain
//! stochastic gradient descent on the squared temporal-difference error;
//! targets are computed from the current network and treated as constants,
//! and only the taken action's output unit receives error.

use crate::error::{invalid, mismatch, Result};
use crate::geometry::Action;
use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Side of the policy's score-map grid.
pub const MAP_SIZE: usize = 17;
/// Flattened score-map length.
pub const STATE_MAP_LEN: usize = MAP_SIZE * MAP_SIZE;
/// Number of remembered past actions.
pub const HISTORY_SLOTS: usize = 4;
/// Length of the one-hot action history block.
pub const HISTORY_LEN: usize = HISTORY_SLOTS * Action::COUNT;
/// Full network input length.
pub const STATE_LEN: usize = STATE_MAP_LEN + HISTORY_LEN;

const HIDDEN: usize = 128;

/// IoU threshold of the stop reward.
pub const REWARD_IOU_THRESHOLD: f64 = 0.6;

/// The agent's observation: the averaged 17x17 score map plus a one-hot
/// encoding of the four most recent actions (most recent first; unused
/// slots stay zero).
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeState {
    pub avg_map: Array2<f64>,
    pub history: [f64; HISTORY_LEN],
}

impl CascadeState {
    /// Build a state from a fused map and the actions taken so far in this
    /// episode, in the order they were taken.
    pub fn new(avg_map: Array2<f64>, taken: &[Action]) -> Result<Self> {
        if avg_map.dim() != (MAP_SIZE, MAP_SIZE) {
            return Err(mismatch!(
                "state map is {:?}, expected {MAP_SIZE}x{MAP_SIZE}",
                avg_map.dim()
            ));
        }
        if avg_map.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(invalid!("state map values must lie in [0, 1]"));
        }
        let mut history = [0.0; HISTORY_LEN];
        for (slot, action) in taken.iter().rev().take(HISTORY_SLOTS).enumerate() {
            history[slot * Action::COUNT + action.index()] = 1.0;
        }
        Ok(Self { avg_map, history })
    }

    /// Flatten to the network input: row-major map, then history.
    pub fn to_input(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(STATE_LEN);
        out.extend(self.avg_map.iter().copied());
        out.extend_from_slice(&self.history);
        out
    }
}

/// Quantized accuracy-improvement reward.
///
/// Non-stop actions earn the sign of the IoU change; stopping earns +3
/// when the final overlap reaches the threshold (inclusive) and -3
/// otherwise.
pub fn reward(iou_prev: f64, iou_new: f64, action: Action) -> i32 {
    reward_with_threshold(iou_prev, iou_new, action, REWARD_IOU_THRESHOLD)
}

pub(crate) fn reward_with_threshold(
    iou_prev: f64,
    iou_new: f64,
    action: Action,
    threshold: f64,
) -> i32 {
    if action.is_stop() {
        if iou_new >= threshold {
            3
        } else {
            -3
        }
    } else if iou_new > iou_prev {
        1
    } else if iou_new < iou_prev {
        -1
    } else {
        0
    }
}

/// Bellman target: `r + gamma * max(q_next)` for non-terminal transitions,
/// bare `r` for terminal ones.
pub fn td_target(r: i32, q_next: Option<&[f64; 8]>, gamma: f64, terminal: bool) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid!("gamma {gamma} outside [0, 1)"));
    }
    if terminal {
        return Ok(r as f64);
    }
    let q = q_next.ok_or_else(|| invalid!("non-terminal transition without next-state values"))?;
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(r as f64 + gamma * max)
}

/// One step of experience.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: CascadeState,
    pub action: Action,
    pub reward: i32,
    pub next: Option<CascadeState>,
    pub terminal: bool,
}

/// Bounded FIFO of transitions with uniform random sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            items: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Up to `batch` distinct transitions, uniformly at random.
    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<&Transition> {
        let n = batch.min(self.items.len());
        if n == 0 {
            return Vec::new();
        }
        sample_indices(rng, self.items.len(), n)
            .iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

/// Three-stage fully-connected action-value network.
#[derive(Clone, Debug, PartialEq)]
pub struct QNet {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
    /// Probability of dropping a hidden unit in training mode.
    pub dropout_rate: f64,
}

fn affine_into(x: &[f64], w: &Array2<f64>, b: &Array1<f64>, out: &mut [f64]) {
    out.copy_from_slice(b.as_slice().unwrap());
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = w.row(i);
        let row = row.to_slice().unwrap();
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

/// Activations cached by a traced forward pass; dropout masks already
/// carry the inverted scaling (`0` dropped, `1/keep` kept).
struct ForwardTrace {
    input: Vec<f64>,
    a1: [f64; HIDDEN],
    d1: [f64; HIDDEN],
    a2: [f64; HIDDEN],
    d2: [f64; HIDDEN],
    m1: [f64; HIDDEN],
    m2: [f64; HIDDEN],
    q: [f64; 8],
}

impl QNet {
    /// Fan-in-scaled uniform weights, zero biases.
    pub fn seeded(dropout_rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut init = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let mut w = Array2::zeros((rows, cols));
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            w
        };
        Self {
            w1: init(STATE_LEN, HIDDEN),
            b1: Array1::zeros(HIDDEN),
            w2: init(HIDDEN, HIDDEN),
            b2: Array1::zeros(HIDDEN),
            w3: init(HIDDEN, 8),
            b3: Array1::zeros(8),
            dropout_rate,
        }
    }

    /// All-zero network (tests and serialization joints).
    pub fn zeros(dropout_rate: f64) -> Self {
        Self {
            w1: Array2::zeros((STATE_LEN, HIDDEN)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, HIDDEN)),
            b2: Array1::zeros(HIDDEN),
            w3: Array2::zeros((HIDDEN, 8)),
            b3: Array1::zeros(8),
            dropout_rate,
        }
    }

    fn trace(&self, input: Vec<f64>, train_mode: bool, rng: Option<&mut ChaCha8Rng>) -> ForwardTrace {
        debug_assert_eq!(input.len(), STATE_LEN);
        let mut m1 = [1.0; HIDDEN];
        let mut m2 = [1.0; HIDDEN];
        if train_mode && self.dropout_rate > 0.0 {
            let rng = rng.expect("training-mode forward needs an rng for dropout");
            let keep = 1.0 - self.dropout_rate;
            for m in m1.iter_mut().chain(m2.iter_mut()) {
                *m = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
        }

        let mut a1 = [0.0; HIDDEN];
        affine_into(&input, &self.w1, &self.b1, &mut a1);
        let mut d1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            d1[j] = a1[j].max(0.0) * m1[j];
        }
        let mut a2 = [0.0; HIDDEN];
        affine_into(&d1, &self.w2, &self.b2, &mut a2);
        let mut d2 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            d2[j] = a2[j].max(0.0) * m2[j];
        }
        let mut q = [0.0; 8];
        affine_into(&d2, &self.w3, &self.b3, &mut q);
        ForwardTrace {
            input,
            a1,
            d1,
            a2,
            d2,
            m1,
            m2,
            q,
        }
    }

    /// Q-values for a state. In training mode dropout masks are sampled
    /// from `rng`; otherwise the pass is deterministic.
    pub fn forward(&self, s: &CascadeState, train_mode: bool, rng: &mut ChaCha8Rng) -> [f64; 8] {
        self.trace(s.to_input(), train_mode, Some(rng)).q
    }

    /// Deterministic evaluation-mode Q-values.
    pub fn eval(&self, s: &CascadeState) -> [f64; 8] {
        self.trace(s.to_input(), false, None).q
    }

    /// Evaluation-mode Q-value of one action together with its gradient
    /// with respect to the network input (used by deep supervision).
    pub fn value_and_input_gradient(&self, s: &CascadeState, action: Action) -> (f64, Vec<f64>) {
        let trace = self.trace(s.to_input(), false, None);
        let a = action.index();

        let mut dd2 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            dd2[j] = self.w3[[j, a]];
        }
        let mut da2 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            da2[j] = if trace.a2[j] > 0.0 { dd2[j] } else { 0.0 };
        }
        let mut dd1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            let row = self.w2.row(i);
            let row = row.to_slice().unwrap();
            let mut acc = 0.0;
            for j in 0..HIDDEN {
                acc += row[j] * da2[j];
            }
            dd1[i] = acc;
        }
        let mut da1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            da1[j] = if trace.a1[j] > 0.0 { dd1[j] } else { 0.0 };
        }
        let mut g_input = vec![0.0; STATE_LEN];
        for (i, gi) in g_input.iter_mut().enumerate() {
            let row = self.w1.row(i);
            let row = row.to_slice().unwrap();
            let mut acc = 0.0;
            for j in 0..HIDDEN {
                acc += row[j] * da1[j];
            }
            *gi = acc;
        }
        (trace.q[a], g_input)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    fn tensors(&self) -> [(&Array2<f64>, &Array1<f64>); 3] {
        [(&self.w1, &self.b1), (&self.w2, &self.b2), (&self.w3, &self.b3)]
    }

    /// Flat parameter vector: w1, b1, w2, b2, w3, b3, row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.tensors() {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(mismatch!(
                "{} parameters supplied, network has {}",
                flat.len(),
                self.param_count()
            ));
        }
        let mut it = flat.iter().copied();
        for (w, b) in [
            (&mut self.w1, &mut self.b1),
            (&mut self.w2, &mut self.b2),
            (&mut self.w3, &mut self.b3),
        ] {
            for v in w.iter_mut() {
                *v = it.next().unwrap();
            }
            for v in b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }
}

/// Frozen Bellman targets for a batch, using the current network in
/// evaluation mode.
pub fn td_targets(net: &QNet, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            let q_next = t.next.as_ref().map(|s| net.eval(s));
            td_target(t.reward, q_next.as_ref(), gamma, t.terminal)
        })
        .collect()
}

/// Mean squared TD error of the taken actions against frozen targets,
/// evaluated without dropout. The learning step's gradient is the gradient
/// of exactly this function when dropout is disabled.
pub fn prediction_loss(net: &QNet, batch: &[&Transition], targets: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (t, &target) in batch.iter().zip(targets) {
        let q = net.eval(&t.state);
        let err = q[t.action.index()] - target;
        acc += err * err;
    }
    acc / batch.len() as f64
}

/// One stochastic-gradient step on the mean squared TD error of a batch.
/// Returns the loss before the update.
pub fn q_learn_step(
    net: &mut QNet,
    batch: &[&Transition],
    gamma: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid!("q_learn_step on an empty batch"));
    }
    let targets = td_targets(net, batch, gamma)?;

    let mut gw1 = Array2::<f64>::zeros(net.w1.dim());
    let mut gb1 = Array1::<f64>::zeros(net.b1.len());
    let mut gw2 = Array2::<f64>::zeros(net.w2.dim());
    let mut gb2 = Array1::<f64>::zeros(net.b2.len());
    let mut gw3 = Array2::<f64>::zeros(net.w3.dim());
    let mut gb3 = Array1::<f64>::zeros(net.b3.len());

    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for (t, &target) in batch.iter().zip(&targets) {
        let trace = net.trace(t.state.to_input(), true, Some(rng));
        let a = t.action.index();
        let err = trace.q[a] - target;
        loss += err * err * scale;
        let dq = 2.0 * err * scale;

        // output stage: only the taken action's unit carries error
        let mut dd2 = [0.0; HIDDEN];
        {
            let w3 = &net.w3;
            for j in 0..HIDDEN {
                gw3[[j, a]] += trace.d2[j] * dq;
                dd2[j] = w3[[j, a]] * dq;
            }
            gb3[a] += dq;
        }

        // second hidden stage
        let mut da2 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let dh = dd2[j] * trace.m2[j];
            da2[j] = if trace.a2[j] > 0.0 { dh } else { 0.0 };
            gb2[j] += da2[j];
        }
        let mut dd1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            if trace.d1[i] != 0.0 {
                let row = net.w2.row(i);
                let row = row.to_slice().unwrap();
                let mut acc = 0.0;
                for j in 0..HIDDEN {
                    gw2[[i, j]] += trace.d1[i] * da2[j];
                    acc += row[j] * da2[j];
                }
                dd1[i] = acc;
            } else {
                let row = net.w2.row(i);
                let row = row.to_slice().unwrap();
                let mut acc = 0.0;
                for j in 0..HIDDEN {
                    acc += row[j] * da2[j];
                }
                dd1[i] = acc;
            }
        }

        // first hidden stage
        let mut da1 = [0.0; HIDDEN];
        for j in 0..HIDDEN {
            let dh = dd1[j] * trace.m1[j];
            da1[j] = if trace.a1[j] > 0.0 { dh } else { 0.0 };
            gb1[j] += da1[j];
        }
        for (i, &xi) in trace.input.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let mut grow = gw1.row_mut(i);
            let grow = grow.as_slice_mut().unwrap();
            for j in 0..HIDDEN {
                grow[j] += xi * da1[j];
            }
        }
    }

    net.w1.zip_mut_with(&gw1, |p, g| *p -= lr * g);
    net.b1.zip_mut_with(&gb1, |p, g| *p -= lr * g);
    net.w2.zip_mut_with(&gw2, |p, g| *p -= lr * g);
    net.b2.zip_mut_with(&gb2, |p, g| *p -= lr * g);
    net.w3.zip_mut_with(&gw3, |p, g| *p -= lr * g);
    net.b3.zip_mut_with(&gb3, |p, g| *p -= lr * g);

    Ok(loss)
}

/// Epsilon-greedy selection. `force_stop` overrides everything (the last
/// cascade layer must stop); exploration draws uniformly over all eight
/// actions; exploitation takes the argmax with lowest-index tie-breaking.
pub fn select_action(
    net: &QNet,
    s: &CascadeState,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
    force_stop: bool,
) -> Action {
    if force_stop {
        return Action::Stop;
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Action::from_index(rng.gen_range(0..Action::COUNT)).unwrap();
    }
    let q = net.eval(s);
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    Action::from_index(best).unwrap()
}

/// Linear anneal from 1.0 at epoch 0 down to 0.1 at 60% of the run, then
/// constant 0.1.
pub fn epsilon_schedule(epoch: usize, total_epochs: usize) -> f64 {
    let cut = 0.6 * total_epochs as f64;
    let e = epoch as f64;
    if e >= cut {
        0.1
    } else {
        1.0 - 0.9 * e / cut
    }
}
