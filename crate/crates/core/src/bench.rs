//! Evaluation and reporting: overlap-success AUC, stopping-layer
//! distributions, wall-clock comparisons against baselines, and CSV/JSON
//! emission.
//!
//! Baselines share the adaptive tracker's code path and differ only in
//! policy: `full_cascade` always forwards to the last layer, `threshold`
//! stops on a fused-map confidence heuristic, `dcf_only` stops at the
//! first layer. All methods run on identical sequences and seeds; speedups
//! are wall-clock ratios measured in the same process.

use crate::agent::QNet;
use crate::data::{Difficulty, Sequence};
use crate::error::{invalid, mismatch, Error, Result};
use crate::features::conv::ConvWeights;
use crate::geometry::{iou, BoundingBox};
use crate::tracker::{CascadeConfig, FrameResult, Policy, TrackerSession};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// The 21-point overlap threshold grid (0 to 1, step 0.05).
pub const AUC_THRESHOLDS: usize = 21;

/// Names of the four compared methods, in report order.
pub const METHODS: [&str; 4] = ["adaptive", "full_cascade", "threshold", "dcf_only"];

/// Confidence cutoff of the threshold baseline.
pub const THRESHOLD_TAU: f64 = 0.9;

/// Area under the overlap-success curve: the mean over the threshold grid
/// of the fraction of frames whose IoU strictly exceeds the threshold.
pub fn success_auc(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(mismatch!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        ));
    }
    if pred.is_empty() {
        return Err(invalid!("success_auc on empty inputs"));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let mut acc = 0.0;
    for i in 0..AUC_THRESHOLDS {
        let t = i as f64 * 0.05;
        let rate = ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64;
        acc += rate;
    }
    Ok(acc / AUC_THRESHOLDS as f64)
}

/// Per-layer stopping probabilities and the mean step count.
pub fn stopping_stats(results: &[FrameResult], layer_count: usize) -> Result<(Vec<f64>, f64)> {
    if results.is_empty() {
        return Err(invalid!("stopping_stats on empty results"));
    }
    let mut hist = vec![0.0; layer_count];
    let mut steps_sum = 0.0;
    for r in results {
        if r.stop_layer == 0 || r.stop_layer > layer_count {
            return Err(invalid!("stop layer {} out of range", r.stop_layer));
        }
        hist[r.stop_layer - 1] += 1.0;
        steps_sum += r.steps as f64;
    }
    let n = results.len() as f64;
    for h in hist.iter_mut() {
        *h /= n;
    }
    Ok((hist, steps_sum / n))
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-sequence evaluation numbers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceStats {
    pub name: String,
    pub auc: f64,
    pub mean_steps: f64,
    pub median_ms_per_frame: f64,
    pub stop_probs: Vec<f64>,
}

/// One method's numbers across the corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: String,
    pub auc: f64,
    pub mean_steps: f64,
    pub median_ms_per_frame: f64,
    pub stop_probs: Vec<f64>,
    /// Wall-clock ratio `full_cascade / this method` (aggregate medians).
    pub speedup_vs_full: f64,
    pub per_sequence: Vec<SequenceStats>,
}

/// Full evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub layer_count: usize,
    pub methods: Vec<MethodStats>,
    pub config_echo: String,
}

/// Raw per-frame results of one method on one sequence.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub name: String,
    pub tags: Vec<Difficulty>,
    /// Predicted boxes, one per frame (frame 0 is the given initial box).
    pub pred: Vec<BoundingBox>,
    /// Per-frame episode results for frames 1...
    pub frames: Vec<FrameResult>,
}

/// Raw results of one method across the corpus.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub method: String,
    pub sequences: Vec<SequenceRun>,
}

/// Report plus the raw runs it was computed from.
#[derive(Debug)]
pub struct BenchOutcome {
    pub report: EvalReport,
    pub runs: Vec<MethodRun>,
}

fn policy_for<'a>(method: &str, qnet: &'a QNet, layer_count: usize) -> Policy<'a> {
    match method {
        "adaptive" => Policy::Learned(qnet),
        "full_cascade" => Policy::StopAt(layer_count),
        "threshold" => Policy::Threshold(THRESHOLD_TAU),
        "dcf_only" => Policy::StopAt(1),
        other => unreachable!("unknown method {other}"),
    }
}

fn run_sequence(
    seq: &Sequence,
    method: &str,
    qnet: &QNet,
    conv: &ConvWeights,
    config: &CascadeConfig,
    seed: u64,
) -> Result<SequenceRun> {
    let mut session =
        TrackerSession::init_with_weights(&seq.frames[0], seq.gt[0], config.clone(), conv.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = policy_for(method, qnet, config.layer_count());
    let mut pred = Vec::with_capacity(seq.len());
    pred.push(seq.gt[0]);
    let mut frames = Vec::with_capacity(seq.len().saturating_sub(1));
    for f in 1..seq.len() {
        let result = session.track_frame(&seq.frames[f], &policy, 0.0, &mut rng)?;
        pred.push(result.bbox);
        frames.push(result);
    }
    Ok(SequenceRun {
        name: seq.name.clone(),
        tags: seq.tags.clone(),
        pred,
        frames,
    })
}

fn run_method(
    sequences: &[Sequence],
    method: &str,
    qnet: &QNet,
    conv: &ConvWeights,
    config: &CascadeConfig,
    workers: usize,
    seed: u64,
) -> Result<MethodRun> {
    let workers = workers.max(1).min(sequences.len().max(1));
    let mut runs: Vec<Option<SequenceRun>> = (0..sequences.len()).map(|_| None).collect();
    if workers == 1 {
        for (i, seq) in sequences.iter().enumerate() {
            runs[i] = Some(run_sequence(seq, method, qnet, conv, config, seed.wrapping_add(i as u64))?);
        }
    } else {
        // workers own disjoint, interleaved sequence indices
        let results: Vec<Result<Vec<(usize, SequenceRun)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut chunk = Vec::new();
                        for i in (w..sequences.len()).step_by(workers) {
                            let run = run_sequence(
                                &sequences[i],
                                method,
                                qnet,
                                conv,
                                config,
                                seed.wrapping_add(i as u64),
                            )?;
                            chunk.push((i, run));
                        }
                        Ok(chunk)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for chunk in results {
            for (i, run) in chunk? {
                runs[i] = Some(run);
            }
        }
    }
    Ok(MethodRun {
        method: method.to_string(),
        sequences: runs.into_iter().map(|r| r.expect("all sequences ran")).collect(),
    })
}

/// Track every test sequence under the learned policy and the three
/// baselines, on identical sequences and per-sequence seeds.
pub fn compare_baselines(
    sequences: &[Sequence],
    qnet: &QNet,
    conv: &ConvWeights,
    config: &CascadeConfig,
    workers: usize,
    seed: u64,
    config_echo: String,
) -> Result<BenchOutcome> {
    if sequences.is_empty() {
        return Err(invalid!("no sequences to evaluate"));
    }
    config.validate()?;
    let layer_count = config.layer_count();

    let mut runs = Vec::with_capacity(METHODS.len());
    for method in METHODS {
        runs.push(run_method(sequences, method, qnet, conv, config, workers, seed)?);
    }

    let mut methods = Vec::with_capacity(runs.len());
    for run in &runs {
        let mut per_sequence = Vec::with_capacity(run.sequences.len());
        let mut all_ious_pred: Vec<BoundingBox> = Vec::new();
        let mut all_gt: Vec<BoundingBox> = Vec::new();
        let mut all_frames: Vec<FrameResult> = Vec::new();
        let mut all_ms: Vec<f64> = Vec::new();
        for (seq, sr) in sequences.iter().zip(&run.sequences) {
            let auc = success_auc(&sr.pred, &seq.gt)?;
            let (stop_probs, mean_steps) = stopping_stats(&sr.frames, layer_count)?;
            let mut ms: Vec<f64> = sr.frames.iter().map(|f| f.total_secs * 1e3).collect();
            let med = median(&mut ms);
            per_sequence.push(SequenceStats {
                name: sr.name.clone(),
                auc,
                mean_steps,
                median_ms_per_frame: med,
                stop_probs,
            });
            all_ious_pred.extend_from_slice(&sr.pred);
            all_gt.extend_from_slice(&seq.gt);
            all_frames.extend(sr.frames.iter().cloned());
            all_ms.extend(sr.frames.iter().map(|f| f.total_secs * 1e3));
        }
        let auc = success_auc(&all_ious_pred, &all_gt)?;
        let (stop_probs, mean_steps) = stopping_stats(&all_frames, layer_count)?;
        let median_ms = median(&mut all_ms);
        methods.push(MethodStats {
            method: run.method.clone(),
            auc,
            mean_steps,
            median_ms_per_frame: median_ms,
            stop_probs,
            speedup_vs_full: 0.0,
            per_sequence,
        });
    }

    let full_ms = methods
        .iter()
        .find(|m| m.method == "full_cascade")
        .map(|m| m.median_ms_per_frame)
        .unwrap_or(0.0);
    for m in methods.iter_mut() {
        m.speedup_vs_full = if m.median_ms_per_frame > 0.0 {
            full_ms / m.median_ms_per_frame
        } else {
            0.0
        };
    }

    Ok(BenchOutcome {
        report: EvalReport {
            layer_count,
            methods,
            config_echo,
        },
        runs,
    })
}

/// CSV with one row per method and sequence:
/// `method,sequence,auc,mean_steps,median_ms_per_frame,stop_p1..stop_pL`.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("method,sequence,auc,mean_steps,median_ms_per_frame");
    for l in 1..=report.layer_count {
        out.push_str(&format!(",stop_p{l}"));
    }
    out.push('\n');
    for m in &report.methods {
        for s in &m.per_sequence {
            out.push_str(&format!(
                "{},{},{},{},{}",
                m.method, s.name, s.auc, s.mean_steps, s.median_ms_per_frame
            ));
            for p in &s.stop_probs {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
    }
    out
}

/// Parse a report CSV back into `(method, sequence, auc, mean_steps,
/// median_ms, stop_probs)` rows; used by round-trip checks.
pub fn parse_report_csv(
    text: &str,
) -> Result<Vec<(String, String, f64, f64, f64, Vec<f64>)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV".into()))?;
    if !header.starts_with("method,sequence,auc,mean_steps,median_ms_per_frame") {
        return Err(Error::Format("unexpected CSV header".into()));
    }
    let mut rows = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(Error::Format(format!("row {no}: too few fields")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("row {no}: bad real {s:?}")))
        };
        let mut stops = Vec::new();
        for f in &fields[5..] {
            stops.push(parse(f)?);
        }
        rows.push((
            fields[0].to_string(),
            fields[1].to_string(),
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])?,
            stops,
        ));
    }
    Ok(rows)
}

pub fn emit_csv(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report_to_csv(report))?;
    Ok(())
}

pub fn emit_json(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report JSON: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn report_from_json(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("report JSON: {e}")))
}

fn draw_box(rgb: &mut [u8], w: usize, h: usize, bbox: &BoundingBox, color: [u8; 3]) {
    let x0 = bbox.left().round().max(0.0) as usize;
    let x1 = (bbox.right().round() as usize).min(w.saturating_sub(1));
    let y0 = bbox.top().round().max(0.0) as usize;
    let y1 = (bbox.bottom().round() as usize).min(h.saturating_sub(1));
    let mut put = |x: usize, y: usize| {
        let off = (y * w + x) * 3;
        rgb[off..off + 3].copy_from_slice(&color);
    };
    for x in x0..=x1.max(x0) {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1.max(y0) {
        put(x0, y);
        put(x1, y);
    }
}

/// Write one PPM per frame with the predicted box (and optionally the
/// ground truth) drawn as 1-px rectangles.
pub fn emit_overlays(
    seq: &Sequence,
    pred: &[BoundingBox],
    dir: &Path,
    draw_gt: bool,
) -> Result<()> {
    if pred.len() != seq.len() {
        return Err(mismatch!(
            "{} predictions for {} frames",
            pred.len(),
            seq.len()
        ));
    }
    std::fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let (h, w) = frame.dim();
        let mut rgb = vec![0u8; w * h * 3];
        for ((r, c), &v) in frame.indexed_iter() {
            let off = (r * w + c) * 3;
            rgb[off] = v;
            rgb[off + 1] = v;
            rgb[off + 2] = v;
        }
        if draw_gt {
            draw_box(&mut rgb, w, h, &seq.gt[i], [0, 255, 0]);
        }
        draw_box(&mut rgb, w, h, &pred[i], [255, 0, 0]);
        let mut file = std::fs::File::create(dir.join(format!("overlay_{i:04}.ppm")))?;
        write!(file, "P6\n{w} {h}\n255\n")?;
        file.write_all(&rgb)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h)
    }

    #[test]
    fn auc_perfect_prediction() {
        let gt = vec![bx(10.0, 10.0, 8.0, 8.0); 5];
        // IoU always 1: exceeds every threshold except 1.0 itself
        let auc = success_auc(&gt, &gt).unwrap();
        assert!((auc - 20.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn auc_zero_overlap() {
        let gt = vec![bx(10.0, 10.0, 8.0, 8.0); 4];
        let pred = vec![bx(100.0, 100.0, 8.0, 8.0); 4];
        assert_eq!(success_auc(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn auc_half_and_half() {
        let gt = vec![bx(10.0, 10.0, 8.0, 8.0); 4];
        let pred = vec![
            gt[0],
            gt[1],
            bx(100.0, 100.0, 8.0, 8.0),
            bx(200.0, 100.0, 8.0, 8.0),
        ];
        let auc = success_auc(&pred, &gt).unwrap();
        assert!((auc - 10.0 / 21.0).abs() < 1e-12);
    }

    #[test]
    fn auc_monotone_in_threshold_and_order_invariant() {
        let gt: Vec<BoundingBox> = (0..10).map(|i| bx(10.0 + i as f64, 10.0, 8.0, 8.0)).collect();
        let pred: Vec<BoundingBox> = (0..10)
            .map(|i| bx(10.0 + i as f64 + (i % 3) as f64, 10.0, 8.0, 8.0))
            .collect();
        let auc = success_auc(&pred, &gt).unwrap();
        let mut rev_pred = pred.clone();
        rev_pred.reverse();
        let mut rev_gt = gt.clone();
        rev_gt.reverse();
        assert_eq!(auc, success_auc(&rev_pred, &rev_gt).unwrap());
        // monotone OS curve
        let ious: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| iou(p, g)).collect();
        let mut last = f64::INFINITY;
        for i in 0..AUC_THRESHOLDS {
            let t = i as f64 * 0.05;
            let rate = ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64;
            assert!(rate <= last);
            last = rate;
        }
    }

    #[test]
    fn auc_rejects_length_mismatch() {
        let gt = vec![bx(10.0, 10.0, 8.0, 8.0); 3];
        let pred = vec![bx(10.0, 10.0, 8.0, 8.0); 2];
        assert!(success_auc(&pred, &gt).is_err());
    }

    fn frame_result(stop_layer: usize) -> FrameResult {
        FrameResult {
            bbox: bx(0.0, 0.0, 4.0, 4.0),
            stop_layer,
            steps: stop_layer,
            actions: vec![],
            layer_secs: vec![0.0; stop_layer],
            total_secs: 0.0,
        }
    }

    #[test]
    fn stopping_stats_degenerate_and_uniform() {
        let all_first: Vec<FrameResult> = (0..7).map(|_| frame_result(1)).collect();
        let (probs, mean) = stopping_stats(&all_first, 5).unwrap();
        assert_eq!(probs, vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(mean, 1.0);

        let uniform: Vec<FrameResult> = (1..=5).map(frame_result).collect();
        let (probs, mean) = stopping_stats(&uniform, 5).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(mean, 3.0);
    }

    #[test]
    fn csv_round_trip_preserves_reals() {
        let report = EvalReport {
            layer_count: 2,
            methods: vec![MethodStats {
                method: "adaptive".into(),
                auc: 0.123456789123456789,
                mean_steps: 1.5,
                median_ms_per_frame: 0.07230000000000001,
                stop_probs: vec![0.6, 0.4],
                speedup_vs_full: 2.5,
                per_sequence: vec![SequenceStats {
                    name: "seq_00".into(),
                    auc: 1.0 / 3.0,
                    mean_steps: 2.0,
                    median_ms_per_frame: 0.1 + 0.2,
                    stop_probs: vec![0.25, 0.75],
                }],
            }],
            config_echo: String::new(),
        };
        let csv = report_to_csv(&report);
        let rows = parse_report_csv(&csv).unwrap();
        assert_eq!(rows.len(), 1);
        let (method, seq, auc, steps, ms, stops) = rows[0].clone();
        assert_eq!(method, "adaptive");
        assert_eq!(seq, "seq_00");
        assert_eq!(auc, 1.0 / 3.0);
        assert_eq!(steps, 2.0);
        assert_eq!(ms, 0.1 + 0.2);
        assert_eq!(stops, vec![0.25, 0.75]);
    }

    #[test]
    fn json_round_trip() {
        let report = EvalReport {
            layer_count: 1,
            methods: vec![],
            config_echo: "seed = 7".into(),
        };
        let text = serde_json::to_string(&report).unwrap();
        let back = report_from_json(&text).unwrap();
        assert_eq!(back.layer_count, 1);
        assert_eq!(back.config_echo, "seed = 7");
    }
}
