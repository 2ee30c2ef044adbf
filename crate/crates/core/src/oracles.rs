//! Independent brute-force references used by tests and the `verify`
//! command.
//!
//! Nothing here shares numerical kernels with the paths it checks: the
//! ridge solver enumerates cyclic shifts into a dense system, IoU is
//! estimated by pixel counting, gradients by central differences, and
//! optimal Q-values by tabular Bellman backups. Sizes are guarded; these
//! are correctness references, not production paths.

use crate::error::{invalid, mismatch, Result};
use crate::geometry::{iou, Action, BoundingBox};
use ndarray::{Array2, Array3};

/// Central-difference gradient estimate of `f` at `point`.
pub fn finite_diff<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let hi = f(&probe);
        probe[i] = point[i] - step;
        let lo = f(&probe);
        probe[i] = point[i];
        grad.push((hi - lo) / (2.0 * step));
    }
    grad
}

/// IoU estimated by counting membership of sample points on a
/// `resolution x resolution` grid over the joint bounding region.
pub fn rasterized_iou(a: &BoundingBox, b: &BoundingBox, resolution: usize) -> f64 {
    let x0 = a.left().min(b.left());
    let x1 = a.right().max(b.right());
    let y0 = a.top().min(b.top());
    let y1 = a.bottom().max(b.bottom());
    let inside = |bx: &BoundingBox, x: f64, y: f64| {
        x >= bx.left() && x < bx.right() && y >= bx.top() && y < bx.bottom()
    };
    let (mut in_a, mut in_b, mut in_both) = (0u64, 0u64, 0u64);
    for r in 0..resolution {
        let y = y0 + (r as f64 + 0.5) * (y1 - y0) / resolution as f64;
        for c in 0..resolution {
            let x = x0 + (c as f64 + 0.5) * (x1 - x0) / resolution as f64;
            let pa = inside(a, x, y);
            let pb = inside(b, x, y);
            in_a += pa as u64;
            in_b += pb as u64;
            in_both += (pa && pb) as u64;
        }
    }
    let union = in_a + in_b - in_both;
    if union == 0 {
        return 0.0;
    }
    in_both as f64 / union as f64
}

/// Solve a dense linear system by Gaussian elimination with partial
/// pivoting. Row-major `a`, overwritten in place.
fn solve_dense(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(crate::error::Error::Singular(
                "pivot vanished in dense ridge solve".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Ok(x)
}

/// Cyclic shift moving content down by `dy` and right by `dx`.
fn cyclic_shift(patch: &Array2<f64>, dy: usize, dx: usize) -> Array2<f64> {
    let (h, w) = patch.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        patch[[(r + h - dy) % h, (c + w - dx) % w]]
    })
}

/// Ridge regression over all cyclic shifts of a (possibly multi-channel)
/// patch, solved directly: `(X'X + lambda I) w = X'y` where row `u` of `X`
/// is the patch shifted by `u`, channels concatenated.
///
/// Guarded to patches of at most 16x16: the dense system is `O((HWC)^3)`.
pub fn spatial_ridge_solve(
    patch: &Array3<f64>,
    label: &Array2<f64>,
    lambda: f64,
) -> Result<Array3<f64>> {
    let (h, w, ch) = patch.dim();
    if label.dim() != (h, w) {
        return Err(mismatch!(
            "label {:?} does not match patch {h}x{w}",
            label.dim()
        ));
    }
    if h > 16 || w > 16 {
        return Err(invalid!("spatial_ridge_solve guarded to patches <= 16x16"));
    }
    let n = h * w;
    let dim = n * ch;

    // X rows: all cyclic shifts, one row per shift, channels side by side.
    let mut x = vec![vec![0.0; dim]; n];
    for dy in 0..h {
        for dx in 0..w {
            let row = dy * w + dx;
            for c in 0..ch {
                let chan = Array2::from_shape_fn((h, w), |(r, cc)| patch[[r, cc, c]]);
                let shifted = cyclic_shift(&chan, dy, dx);
                for (p, &v) in shifted.iter().enumerate() {
                    x[row][c * n + p] = v;
                }
            }
        }
    }

    // normal equations
    let mut a = vec![vec![0.0; dim]; dim];
    let mut b = vec![0.0; dim];
    for i in 0..dim {
        for j in i..dim {
            let mut acc = 0.0;
            for (_, row) in x.iter().enumerate() {
                acc += row[i] * row[j];
            }
            a[i][j] = acc;
            a[j][i] = acc;
        }
        a[i][i] += lambda;
        let mut acc = 0.0;
        for (r, row) in x.iter().enumerate() {
            acc += row[i] * label.as_slice().unwrap()[r];
        }
        b[i] = acc;
    }

    let sol = solve_dense(&mut a, &mut b)?;
    Ok(Array3::from_shape_fn((h, w, ch), |(r, c, k)| {
        sol[k * n + r * w + c]
    }))
}

/// Response of a spatial-domain filter on a patch, over all cyclic shifts:
/// `r(u) = sum_p w(p) z(p + u)`, summed over channels. This is the
/// reference counterpart of the frequency-domain respond path.
pub fn circulant_response(filter: &Array3<f64>, z: &Array3<f64>) -> Result<Array2<f64>> {
    if filter.dim() != z.dim() {
        return Err(mismatch!(
            "filter {:?} vs patch {:?}",
            filter.dim(),
            z.dim()
        ));
    }
    let (h, w, ch) = filter.dim();
    let mut out = Array2::zeros((h, w));
    for uy in 0..h {
        for ux in 0..w {
            let mut acc = 0.0;
            for r in 0..h {
                for c in 0..w {
                    for k in 0..ch {
                        acc += filter[[r, c, k]] * z[[(r + uy) % h, (c + ux) % w, k]];
                    }
                }
            }
            out[[uy, ux]] = acc;
        }
    }
    Ok(out)
}

/// A small deterministic MDP: `next[s][a]` is the successor (`None` means
/// the transition is terminal) and `reward[s][a]` the immediate reward.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub states: usize,
    pub actions: usize,
    pub next: Vec<Vec<Option<usize>>>,
    pub reward: Vec<Vec<f64>>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        if self.next.len() != self.states || self.reward.len() != self.states {
            return Err(mismatch!("transition tables do not cover all states"));
        }
        for s in 0..self.states {
            if self.next[s].len() != self.actions || self.reward[s].len() != self.actions {
                return Err(mismatch!("state {s} is missing actions"));
            }
            for a in 0..self.actions {
                if let Some(n) = self.next[s][a] {
                    if n >= self.states {
                        return Err(invalid!("state {s} action {a} points outside the MDP"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Exact optimal Q-table by Bellman backups to a `1e-10` fixed point.
pub fn value_iteration(mdp: &TabularMdp, gamma: f64) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid!("gamma {gamma} must be in [0, 1)"));
    }
    mdp.validate()?;
    let mut q = vec![vec![0.0; mdp.actions]; mdp.states];
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..mdp.states {
            for a in 0..mdp.actions {
                let bootstrap = match mdp.next[s][a] {
                    Some(n) => {
                        gamma
                            * q[n]
                                .iter()
                                .copied()
                                .fold(f64::NEG_INFINITY, f64::max)
                    }
                    None => 0.0,
                };
                let updated = mdp.reward[s][a] + bootstrap;
                delta = delta.max((updated - q[s][a]).abs());
                q[s][a] = updated;
            }
        }
        if delta < 1e-10 {
            return Ok(q);
        }
    }
}

/// Search every action sequence of a per-frame episode and return the one
/// maximizing the summed reward, together with that total.
///
/// Guarded at `8^6` sequences. Needs the tracker; lives here so the search
/// stays independent of any learned policy.
pub fn exhaustive_episode(
    session: &crate::tracker::TrackerSession,
    frame: &crate::data::Frame,
    gt: &BoundingBox,
    max_layers: usize,
) -> Result<(Vec<Action>, i32)> {
    if max_layers > 6 {
        return Err(invalid!("exhaustive episode guarded to at most 6 layers"));
    }
    let layers = session.layer_count().min(max_layers);
    if layers == 0 {
        return Err(invalid!("session has no layers"));
    }

    fn recurse(
        session: &crate::tracker::TrackerSession,
        frame: &crate::data::Frame,
        gt: &BoundingBox,
        bbox: BoundingBox,
        raw_maps: &mut Vec<crate::features::ScoreMap>,
        layer: usize,
        layers: usize,
        reward_so_far: i32,
        best: &mut (Vec<Action>, i32),
        prefix: &mut Vec<Action>,
    ) -> Result<()> {
        let step = session.episode_step(frame, &bbox, layer, raw_maps)?;
        let translated = step.moved;
        raw_maps.push(step.raw);
        let iou_here = iou(&translated, gt);

        for &action in &Action::ALL {
            if layer + 1 == layers && !action.is_stop() {
                continue; // forced stop at the last layer
            }
            if action.is_stop() {
                let r = reward_so_far + crate::agent::reward(iou_here, iou_here, action);
                prefix.push(action);
                if r > best.1 {
                    *best = (prefix.clone(), r);
                }
                prefix.pop();
            } else {
                let moved = crate::geometry::apply_action(&translated, action, session.bounds())?;
                let r = reward_so_far + crate::agent::reward(iou_here, iou(&moved, gt), action);
                prefix.push(action);
                recurse(
                    session, frame, gt, moved, raw_maps, layer + 1, layers, r, best, prefix,
                )?;
                prefix.pop();
            }
        }
        raw_maps.pop();
        Ok(())
    }

    let mut best = (Vec::new(), i32::MIN);
    let mut prefix = Vec::new();
    let mut raw_maps = Vec::new();
    recurse(
        session,
        frame,
        gt,
        session.current_box(),
        &mut raw_maps,
        0,
        layers,
        0,
        &mut best,
        &mut prefix,
    )?;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_linear_is_exact() {
        let g = finite_diff(|x| 2.5 * x[0] - 4.0 * x[1] + 1.0, &[0.3, -0.7], 1e-5);
        assert!((g[0] - 2.5).abs() < 1e-9);
        assert!((g[1] + 4.0).abs() < 1e-9);
    }

    #[test]
    fn finite_diff_quadratic_form() {
        // f(x) = x'Ax with symmetric A; gradient 2Ax
        let a = [[2.0, 0.5], [0.5, 1.5]];
        let x = [0.8, -0.3];
        let f = |v: &[f64]| {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    acc += v[i] * a[i][j] * v[j];
                }
            }
            acc
        };
        let g = finite_diff(f, &x, 1e-5);
        for i in 0..2 {
            let want = 2.0 * (a[i][0] * x[0] + a[i][1] * x[1]);
            assert!((g[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn rasterized_iou_trivial_cases() {
        let a = BoundingBox::new(5.0, 5.0, 4.0, 4.0);
        assert_eq!(rasterized_iou(&a, &a, 200), 1.0);
        let b = BoundingBox::new(50.0, 50.0, 4.0, 4.0);
        assert_eq!(rasterized_iou(&a, &b, 200), 0.0);
    }

    #[test]
    fn rasterized_iou_refines_toward_analytic() {
        let a = BoundingBox::new(10.0, 10.0, 7.0, 5.0);
        let b = BoundingBox::new(12.5, 11.0, 6.0, 8.0);
        let exact = iou(&a, &b);
        let mut last_err = f64::INFINITY;
        for res in [50, 200, 800] {
            let err = (rasterized_iou(&a, &b, res) - exact).abs();
            assert!(err < last_err + 1e-4, "no refinement at {res}");
            last_err = err;
        }
        assert!(last_err < 1e-3);
    }

    #[test]
    fn ridge_solve_scalar_closed_form() {
        // 1x1 patch: w = x*y / (x^2 + lambda)
        let mut patch = Array3::zeros((1, 1, 1));
        patch[[0, 0, 0]] = 2.0;
        let mut label = Array2::zeros((1, 1));
        label[[0, 0]] = 3.0;
        let w = spatial_ridge_solve(&patch, &label, 0.5).unwrap();
        assert!((w[[0, 0, 0]] - 2.0 * 3.0 / (4.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ridge_solve_large_lambda_shrinks_filter() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let patch = Array3::from_shape_fn((4, 4, 1), |_| rng.gen_range(-1.0..1.0));
        let label = Array2::from_shape_fn((4, 4), |_| rng.gen_range(0.0..1.0));
        let w = spatial_ridge_solve(&patch, &label, 1e9).unwrap();
        let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "norm {norm}");
    }

    #[test]
    fn ridge_solve_guards_size() {
        let patch = Array3::zeros((17, 17, 1));
        let label = Array2::zeros((17, 17));
        assert!(spatial_ridge_solve(&patch, &label, 0.1).is_err());
    }

    #[test]
    fn value_iteration_zero_reward_absorbing() {
        let mdp = TabularMdp {
            states: 1,
            actions: 1,
            next: vec![vec![None]],
            reward: vec![vec![0.0]],
        };
        let q = value_iteration(&mdp, 0.9).unwrap();
        assert_eq!(q[0][0], 0.0);
    }

    #[test]
    fn value_iteration_two_state_chain() {
        // advance from start reaches a terminal reward of 1
        let mdp = TabularMdp {
            states: 2,
            actions: 2,
            next: vec![vec![Some(1), None], vec![None, None]],
            reward: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
        };
        let q = value_iteration(&mdp, 0.9).unwrap();
        assert!((q[1][0] - 1.0).abs() < 1e-9);
        assert!((q[0][0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn value_iteration_three_state_discounting() {
        let mdp = TabularMdp {
            states: 3,
            actions: 1,
            next: vec![vec![Some(1)], vec![Some(2)], vec![None]],
            reward: vec![vec![0.0], vec![0.0], vec![1.0]],
        };
        let q = value_iteration(&mdp, 0.9).unwrap();
        assert!((q[0][0] - 0.81).abs() < 1e-9);
        assert!((q[1][0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn value_iteration_rejects_gamma_one() {
        let mdp = TabularMdp {
            states: 1,
            actions: 1,
            next: vec![vec![None]],
            reward: vec![vec![0.0]],
        };
        assert!(value_iteration(&mdp, 1.0).is_err());
    }
}
