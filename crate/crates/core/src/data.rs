//! Synthetic grayscale video with exact ground truth and difficulty
//! control, plus sequence serialization.
//!
//! A scene is a smooth textured background with one textured target patch
//! moving through it. Easy frames are clean and slow; hard frames get
//! multiplied motion, Gaussian blur, and distractor patches that share the
//! target's texture statistics. The difficulty tag drives generation and
//! evaluation slicing only; the tracker never sees it.
//!
//! On disk a sequence is a directory: binary PGM frames, a text annotation
//! file (`frame_index cx cy w h` per line, shortest round-trip reals), and
//! a JSON manifest listing frames, tags, and the generating spec.

use crate::error::{invalid, mismatch, Error, Result};
use crate::geometry::{BoundingBox, FrameBounds};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// 8-bit grayscale frame.
pub type Frame = Array2<u8>;

const TARGET_CANON: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Per-frame easy/hard assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultySchedule {
    Constant(Difficulty),
    /// Blocks of `block` frames alternating easy, hard, easy, ...
    AlternatingBlocks { block: usize },
    Explicit(Vec<Difficulty>),
}

impl DifficultySchedule {
    fn tag(&self, frame: usize) -> Difficulty {
        match self {
            DifficultySchedule::Constant(d) => *d,
            DifficultySchedule::AlternatingBlocks { block } => {
                if (frame / (*block).max(1)) % 2 == 0 {
                    Difficulty::Easy
                } else {
                    Difficulty::Hard
                }
            }
            DifficultySchedule::Explicit(tags) => tags[frame],
        }
    }
}

/// Generator parameters for one synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Seeds the background, target, and distractor textures.
    pub texture_seed: u64,
    /// Base target velocity in px/frame (multiplied on hard frames).
    pub velocity: (f64, f64),
    /// Multiplicative per-frame size drift.
    pub scale_drift: f64,
    /// Number of distractor patches on hard frames.
    pub clutter: usize,
    /// Gaussian blur applied to hard frames.
    pub blur_sigma: f64,
    /// Additive Gaussian pixel noise on every frame.
    pub noise_sigma: f64,
    /// Velocity multiplier on hard frames.
    pub hard_motion_factor: f64,
    /// Initial target side in pixels (targets are square).
    pub target_size: f64,
    pub schedule: DifficultySchedule,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            texture_seed: 0,
            velocity: (1.5, 0.7),
            scale_drift: 0.001,
            clutter: 3,
            blur_sigma: 2.0,
            noise_sigma: 0.02,
            hard_motion_factor: 3.5,
            target_size: 20.0,
            schedule: DifficultySchedule::AlternatingBlocks { block: 10 },
        }
    }
}

/// Frames, exact ground-truth boxes, and difficulty tags.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub gt: Vec<BoundingBox>,
    pub tags: Vec<Difficulty>,
    pub spec: Option<SceneSpec>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn bounds(&self) -> FrameBounds {
        let (h, w) = self.frames[0].dim();
        FrameBounds::new(w as f64, h as f64)
    }
}

fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Array2<f64> {
    let mut field = Array2::from_shape_fn((h, w), |_| rng.gen_range(lo..hi));
    // two box-blur passes
    for _ in 0..2 {
        let src = field.clone();
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = r as i64 + dr;
                        let cc = c as i64 + dc;
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                            acc += src[[rr as usize, cc as usize]];
                            n += 1.0;
                        }
                    }
                }
                field[[r, c]] = acc / n;
            }
        }
    }
    field
}

/// Target-style texture: blocky structure over sharp per-pixel noise, so
/// both orientation histograms and pixel correlation have something to
/// lock onto.
fn patch_texture(rng: &mut ChaCha8Rng) -> Array2<f64> {
    let blocks = 4;
    let block_vals =
        Array2::from_shape_fn((blocks, blocks), |_| rng.gen_range(0.0..1.0));
    Array2::from_shape_fn((TARGET_CANON, TARGET_CANON), |(r, c)| {
        let b = block_vals[[r * blocks / TARGET_CANON, c * blocks / TARGET_CANON]];
        0.5 * b + 0.5 * rng.gen_range(0.0..1.0)
    })
}

fn stamp(frame: &mut Array2<f64>, patch: &Array2<f64>, bbox: &BoundingBox) {
    let (fh, fw) = frame.dim();
    let (ph, pw) = patch.dim();
    let (left, right) = (bbox.left(), bbox.right());
    let (top, bottom) = (bbox.top(), bbox.bottom());
    let r0 = top.ceil().max(0.0) as usize;
    let c0 = left.ceil().max(0.0) as usize;
    for r in r0..fh.min(bottom.ceil() as usize) {
        if (r as f64) >= bottom {
            break;
        }
        for c in c0..fw.min(right.ceil() as usize) {
            if (c as f64) >= right {
                break;
            }
            // unit-scale stamps copy canonical pixels exactly
            let py = ((r as f64 - top) * ph as f64 / bbox.h).clamp(0.0, (ph - 1) as f64);
            let px = ((c as f64 - left) * pw as f64 / bbox.w).clamp(0.0, (pw - 1) as f64);
            let y0 = py.floor() as usize;
            let x0 = px.floor() as usize;
            let y1 = (y0 + 1).min(ph - 1);
            let x1 = (x0 + 1).min(pw - 1);
            let ty = py - y0 as f64;
            let tx = px - x0 as f64;
            let top_v = patch[[y0, x0]] * (1.0 - tx) + patch[[y0, x1]] * tx;
            let bot_v = patch[[y1, x0]] * (1.0 - tx) + patch[[y1, x1]] * tx;
            frame[[r, c]] = top_v * (1.0 - ty) + bot_v * ty;
        }
    }
}

fn gaussian_blur(frame: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return frame.clone();
    }
    let radius = (2.5 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let (h, w) = frame.dim();
    let clampi = |v: i64, n: usize| (v.max(0) as usize).min(n - 1);
    let mut rows = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * frame[[r, clampi(c as i64 + i as i64 - radius, w)]];
            }
            rows[[r, c]] = acc / norm;
        }
    }
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * rows[[clampi(r as i64 + i as i64 - radius, h), c]];
            }
            out[[r, c]] = acc / norm;
        }
    }
    out
}

fn gaussian_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a sequence. Deterministic given the spec and the rng seed; the
/// ground truth is exact by construction.
pub fn generate(spec: &SceneSpec, length: usize, rng: &mut ChaCha8Rng) -> Result<Sequence> {
    if length < 2 {
        return Err(invalid!("sequences need at least 2 frames"));
    }
    let (fw, fh) = (spec.width, spec.height);
    if fw < 32 || fh < 32 {
        return Err(invalid!("frames smaller than 32x32 are not supported"));
    }
    if spec.target_size < 8.0 || spec.target_size > (fw.min(fh) as f64) / 2.5 {
        return Err(invalid!(
            "target size {} does not fit a {fw}x{fh} frame",
            spec.target_size
        ));
    }
    if let DifficultySchedule::Explicit(tags) = &spec.schedule {
        if tags.len() < length {
            return Err(mismatch!(
                "explicit schedule covers {} frames, sequence has {length}",
                tags.len()
            ));
        }
    }

    let mut texture_rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
    let background = smooth_noise(&mut texture_rng, fh, fw, 0.25, 0.75);
    let target = patch_texture(&mut texture_rng);
    let distractors: Vec<Array2<f64>> = (0..spec.clutter)
        .map(|_| patch_texture(&mut texture_rng))
        .collect();

    let margin = 2.0;
    let mut size = spec.target_size;
    let mut cx = fw as f64 / 2.0;
    let mut cy = fh as f64 / 2.0;
    let (mut vx, mut vy) = spec.velocity;

    let mut frames = Vec::with_capacity(length);
    let mut gt = Vec::with_capacity(length);
    let mut tags = Vec::with_capacity(length);

    for t in 0..length {
        let tag = spec.schedule.tag(t);
        if t > 0 {
            let mult = if tag == Difficulty::Hard {
                spec.hard_motion_factor
            } else {
                1.0
            };
            size = (size * (1.0 + spec.scale_drift))
                .clamp(10.0, fw.min(fh) as f64 / 2.5);
            // reflect at the walls so the target never leaves the frame
            let (lo_x, hi_x) = (size / 2.0 + margin, fw as f64 - size / 2.0 - margin);
            let (lo_y, hi_y) = (size / 2.0 + margin, fh as f64 - size / 2.0 - margin);
            cx += vx * mult;
            cy += vy * mult;
            if cx < lo_x {
                cx = 2.0 * lo_x - cx;
                vx = -vx;
            } else if cx > hi_x {
                cx = 2.0 * hi_x - cx;
                vx = -vx;
            }
            if cy < lo_y {
                cy = 2.0 * lo_y - cy;
                vy = -vy;
            } else if cy > hi_y {
                cy = 2.0 * hi_y - cy;
                vy = -vy;
            }
        }
        let bbox = BoundingBox::new(cx, cy, size, size);

        let mut canvas = background.clone();
        if tag == Difficulty::Hard {
            for patch in &distractors {
                // distractors stay clear of the target but inside the frame
                let mut attempt = 0;
                loop {
                    let dx = rng.gen_range(size..fw as f64 - size);
                    let dy = rng.gen_range(size..fh as f64 - size);
                    let far = (dx - cx).abs() > size * 0.9 || (dy - cy).abs() > size * 0.9;
                    if far || attempt > 16 {
                        if far {
                            stamp(
                                &mut canvas,
                                patch,
                                &BoundingBox::new(dx, dy, size, size),
                            );
                        }
                        break;
                    }
                    attempt += 1;
                }
            }
        }
        stamp(&mut canvas, &target, &bbox);
        if tag == Difficulty::Hard && spec.blur_sigma > 0.0 {
            canvas = gaussian_blur(&canvas, spec.blur_sigma);
        }
        if spec.noise_sigma > 0.0 {
            for v in canvas.iter_mut() {
                *v += spec.noise_sigma * gaussian_sample(rng);
            }
        }

        frames.push(canvas.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        gt.push(bbox);
        tags.push(tag);
    }

    Ok(Sequence {
        name: format!("scene_{:08x}", spec.texture_seed),
        frames,
        gt,
        tags,
        spec: Some(spec.clone()),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    name: String,
    width: usize,
    height: usize,
    frames: Vec<String>,
    annotations: String,
    tags: Vec<Difficulty>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec: Option<SceneSpec>,
}

fn write_pgm(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = frame.dim();
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(frame.as_slice().expect("contiguous frame"))?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<Frame> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{}: truncated header", path.display())));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P5" {
        return Err(Error::Format(format!("{}: not a binary PGM", path.display())));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM width".into()))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM height".into()))?;
    if token(&bytes)? != "255" {
        return Err(Error::Format("PGM maxval must be 255".into()));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + w * h {
        return Err(Error::Format(format!("{}: truncated raster", path.display())));
    }
    let data = bytes[pos..pos + w * h].to_vec();
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::Format(format!("bad PGM shape: {e}")))
}

/// Write a sequence directory: frames, annotations, manifest.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    if seq.frames.is_empty() || seq.frames.len() != seq.gt.len() || seq.gt.len() != seq.tags.len()
    {
        return Err(mismatch!("sequence has inconsistent lengths"));
    }
    fs::create_dir_all(dir)?;
    let mut frame_names = Vec::with_capacity(seq.frames.len());
    for (i, frame) in seq.frames.iter().enumerate() {
        let fname = format!("frame_{i:04}.pgm");
        write_pgm(&dir.join(&fname), frame)?;
        frame_names.push(fname);
    }
    let mut gt_text = String::new();
    for (i, b) in seq.gt.iter().enumerate() {
        gt_text.push_str(&format!("{i} {} {} {} {}\n", b.cx, b.cy, b.w, b.h));
    }
    fs::write(dir.join("gt.txt"), gt_text)?;
    let (h, w) = seq.frames[0].dim();
    let manifest = Manifest {
        name: seq.name.clone(),
        width: w,
        height: h,
        frames: frame_names,
        annotations: "gt.txt".into(),
        tags: seq.tags.clone(),
        spec: seq.spec.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Load a sequence directory written by [`save_sequence`].
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for name in &manifest.frames {
        let frame = read_pgm(&dir.join(name))?;
        if frame.dim() != (manifest.height, manifest.width) {
            return Err(mismatch!("{name} does not match the manifest dimensions"));
        }
        frames.push(frame);
    }

    let gt_text = fs::read_to_string(dir.join(&manifest.annotations))?;
    let mut gt = Vec::new();
    for (lineno, line) in gt_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "annotation line {lineno}: expected 5 fields"
            )));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("annotation line {lineno}: bad index")))?;
        if idx != gt.len() {
            return Err(Error::Format(format!(
                "annotation line {lineno}: out-of-order frame index"
            )));
        }
        let mut reals = [0.0f64; 4];
        for (slot, f) in fields[1..].iter().enumerate() {
            reals[slot] = f
                .parse()
                .map_err(|_| Error::Format(format!("annotation line {lineno}: bad real")))?;
        }
        gt.push(BoundingBox::new(reals[0], reals[1], reals[2], reals[3]));
    }

    if gt.len() != frames.len() || manifest.tags.len() != frames.len() {
        return Err(mismatch!(
            "lengths disagree: {} frames, {} boxes, {} tags",
            frames.len(),
            gt.len(),
            manifest.tags.len()
        ));
    }
    Ok(Sequence {
        name: manifest.name,
        frames,
        gt,
        tags: manifest.tags,
        spec: manifest.spec,
    })
}

/// Train/test split of the fixed synthetic corpus.
pub struct Corpus {
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

pub const CORPUS_TRAIN_SEQUENCES: usize = 40;
pub const CORPUS_TEST_SEQUENCES: usize = 20;
pub const CORPUS_FRAMES: usize = 100;

const TRAIN_TEXTURE_BASE: u64 = 11_000;
const TRAIN_MOTION_BASE: u64 = 21_000;
const TEST_TEXTURE_BASE: u64 = 51_000;
const TEST_MOTION_BASE: u64 = 61_000;

fn corpus_sequence(texture_seed: u64, motion_seed: u64, name: String) -> Result<Sequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(motion_seed);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(1.2..2.0);
    let spec = SceneSpec {
        texture_seed,
        velocity: (speed * angle.cos(), speed * angle.sin()),
        scale_drift: rng.gen_range(-0.002..0.002),
        clutter: 3,
        blur_sigma: rng.gen_range(1.5..2.5),
        noise_sigma: 0.02,
        hard_motion_factor: rng.gen_range(3.0..4.0),
        target_size: rng.gen_range(16.0..24.0),
        schedule: DifficultySchedule::AlternatingBlocks { block: 10 },
        ..SceneSpec::default()
    };
    let mut seq = generate(&spec, CORPUS_FRAMES, &mut rng)?;
    seq.name = name;
    Ok(seq)
}

/// The fixed 40-train / 20-test corpus: 100 frames each, alternating
/// 10-frame easy/hard blocks, disjoint deterministic seeds.
pub fn standard_corpus() -> Result<Corpus> {
    let mut train = Vec::with_capacity(CORPUS_TRAIN_SEQUENCES);
    for i in 0..CORPUS_TRAIN_SEQUENCES as u64 {
        train.push(corpus_sequence(
            TRAIN_TEXTURE_BASE + i,
            TRAIN_MOTION_BASE + i,
            format!("train_{i:02}"),
        )?);
    }
    let mut test = Vec::with_capacity(CORPUS_TEST_SEQUENCES);
    for i in 0..CORPUS_TEST_SEQUENCES as u64 {
        test.push(corpus_sequence(
            TEST_TEXTURE_BASE + i,
            TEST_MOTION_BASE + i,
            format!("test_{i:02}"),
        )?);
    }
    Ok(Corpus { train, test })
}

use rand::SeedableRng;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn static_spec() -> SceneSpec {
        SceneSpec {
            velocity: (0.0, 0.0),
            scale_drift: 0.0,
            noise_sigma: 0.0,
            schedule: DifficultySchedule::Constant(Difficulty::Easy),
            ..SceneSpec::default()
        }
    }

    #[test]
    fn static_scene_has_identical_boxes() {
        let seq = generate(&static_spec(), 10, &mut rng(1)).unwrap();
        for b in &seq.gt {
            assert_eq!(*b, seq.gt[0]);
        }
        for f in &seq.frames {
            assert_eq!(*f, seq.frames[0]);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = SceneSpec::default();
        let a = generate(&spec, 12, &mut rng(7)).unwrap();
        let b = generate(&spec, 12, &mut rng(7)).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.tags, b.tags);
    }

    #[test]
    fn velocity_moves_center_exactly() {
        let spec = SceneSpec {
            velocity: (2.0, 0.0),
            ..static_spec()
        };
        let seq = generate(&spec, 11, &mut rng(2)).unwrap();
        assert!((seq.gt[10].cx - seq.gt[0].cx - 20.0).abs() < 1e-9);
        assert_eq!(seq.gt[10].cy, seq.gt[0].cy);
    }

    #[test]
    fn target_never_leaves_frame() {
        let spec = SceneSpec {
            velocity: (7.0, -5.0),
            hard_motion_factor: 4.0,
            ..SceneSpec::default()
        };
        let seq = generate(&spec, 60, &mut rng(3)).unwrap();
        let bounds = seq.bounds();
        for b in &seq.gt {
            assert!(b.is_inside(bounds));
        }
    }

    #[test]
    fn oversized_target_is_rejected() {
        let spec = SceneSpec {
            target_size: 100.0,
            ..SceneSpec::default()
        };
        assert!(generate(&spec, 5, &mut rng(4)).is_err());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("ctrack_seq_{}", std::process::id()));
        let seq = generate(&SceneSpec::default(), 6, &mut rng(5)).unwrap();
        save_sequence(&seq, &dir).unwrap();
        let loaded = load_sequence(&dir).unwrap();
        assert_eq!(seq.name, loaded.name);
        assert_eq!(seq.frames, loaded.frames);
        assert_eq!(seq.gt, loaded.gt);
        assert_eq!(seq.tags, loaded.tags);
        assert_eq!(seq.spec, loaded.spec);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_annotations_are_rejected() {
        let dir = std::env::temp_dir().join(format!("ctrack_trunc_{}", std::process::id()));
        let seq = generate(&SceneSpec::default(), 5, &mut rng(6)).unwrap();
        save_sequence(&seq, &dir).unwrap();
        let gt_path = dir.join("gt.txt");
        let text = fs::read_to_string(&gt_path).unwrap();
        let truncated: Vec<&str> = text.lines().take(3).collect();
        fs::write(&gt_path, truncated.join("\n")).unwrap();
        assert!(load_sequence(&dir).is_err());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn annotation_reals_round_trip() {
        let dir = std::env::temp_dir().join(format!("ctrack_reals_{}", std::process::id()));
        let mut seq = generate(&SceneSpec::default(), 3, &mut rng(8)).unwrap();
        seq.gt[1] = BoundingBox::new(
            33.333333333333336,
            0.1 + 0.2, // deliberately not representable as a short decimal
            17.000000000000004,
            19.999999999999996,
        );
        save_sequence(&seq, &dir).unwrap();
        let loaded = load_sequence(&dir).unwrap();
        assert_eq!(seq.gt[1], loaded.gt[1]);
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn hard_frames_differ_from_easy_frames() {
        let spec = SceneSpec {
            velocity: (0.0, 0.0),
            scale_drift: 0.0,
            noise_sigma: 0.0,
            schedule: DifficultySchedule::Explicit(vec![
                Difficulty::Easy,
                Difficulty::Hard,
                Difficulty::Easy,
            ]),
            ..SceneSpec::default()
        };
        let seq = generate(&spec, 3, &mut rng(9)).unwrap();
        // blur and distractors leave the hard frame measurably different
        assert_ne!(seq.frames[0], seq.frames[1]);
        assert_eq!(seq.frames[0], seq.frames[2]);
        assert_eq!(seq.tags[1], Difficulty::Hard);
    }

    #[test]
    fn standard_corpus_recipe() {
        // spot-check sizes, tag ratio, determinism and seed disjointness on
        // a few sequences (the full corpus is exercised in acceptance)
        let a = corpus_sequence(TRAIN_TEXTURE_BASE, TRAIN_MOTION_BASE, "t".into()).unwrap();
        let b = corpus_sequence(TRAIN_TEXTURE_BASE, TRAIN_MOTION_BASE, "t".into()).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.len(), CORPUS_FRAMES);
        let easy = a.tags.iter().filter(|t| **t == Difficulty::Easy).count();
        assert_eq!(easy, CORPUS_FRAMES / 2);
        let c = corpus_sequence(TEST_TEXTURE_BASE, TEST_MOTION_BASE, "u".into()).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
        // ground truth is always valid
        let bounds = a.bounds();
        for b in &a.gt {
            assert!(b.is_inside(bounds));
            assert!(iou(b, b) == 1.0);
        }
    }
}
