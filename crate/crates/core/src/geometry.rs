//! Bounding boxes, overlap computation, and the scaling-action vocabulary.
//!
//! Boxes are center/size rectangles with real-valued coordinates; nothing is
//! snapped to the pixel grid until rasterization at I/O boundaries. Every
//! mutating operation clamps its result so the box stays inside the frame
//! and never collapses below [`MIN_BOX_SIZE`].

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

/// Smallest admissible box side, in pixels.
pub const MIN_BOX_SIZE: f64 = 4.0;

/// Relative size change applied by each scaling action.
pub const SCALE_STEP: f64 = 0.2;

/// Extent of a frame, used for clamping boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameBounds {
    pub width: f64,
    pub height: f64,
}

impl FrameBounds {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }
}

/// Center/size rectangle in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Whether the box has positive size and lies fully inside `bounds`.
    pub fn is_inside(&self, bounds: FrameBounds) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.left() >= 0.0
            && self.top() >= 0.0
            && self.right() <= bounds.width
            && self.bottom() <= bounds.height
    }

    /// Clamp size to `[MIN_BOX_SIZE, frame]`, then clamp the center so the
    /// box lies fully inside the frame. Size first, center last.
    pub fn clamped(&self, bounds: FrameBounds) -> Self {
        let w = self.w.clamp(MIN_BOX_SIZE, bounds.width);
        let h = self.h.clamp(MIN_BOX_SIZE, bounds.height);
        let cx = self.cx.clamp(w / 2.0, bounds.width - w / 2.0);
        let cy = self.cy.clamp(h / 2.0, bounds.height - h / 2.0);
        Self { cx, cy, w, h }
    }
}

/// The agent's action vocabulary: seven anisotropic scalings plus stop.
///
/// The integer indices are part of the one-hot state encoding and of the
/// checkpoint format; they must never be reordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Grow width and height by the scale step.
    Enlarge = 0,
    /// Shrink width and height by the scale step.
    Shrink = 1,
    /// Grow width only.
    Widen = 2,
    /// Shrink width only.
    Narrow = 3,
    /// Grow height only.
    Heighten = 4,
    /// Shrink height only.
    Flatten = 5,
    /// Leave the box unchanged (postpone the decision).
    NoScale = 6,
    /// Terminate the per-frame search and emit the current box.
    Stop = 7,
}

impl Action {
    pub const COUNT: usize = 8;

    pub const ALL: [Action; 8] = [
        Action::Enlarge,
        Action::Shrink,
        Action::Widen,
        Action::Narrow,
        Action::Heighten,
        Action::Flatten,
        Action::NoScale,
        Action::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    pub fn is_stop(self) -> bool {
        matches!(self, Action::Stop)
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Action::Enlarge => "enlarge",
            Action::Shrink => "shrink",
            Action::Widen => "widen",
            Action::Narrow => "narrow",
            Action::Heighten => "heighten",
            Action::Flatten => "flatten",
            Action::NoScale => "noscale",
            Action::Stop => "stop",
        };
        f.write_str(name)
    }
}

/// Intersection-over-Union of two boxes. Symmetric, in `[0, 1]`, zero for
/// disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.right().min(b.right()) - a.left().max(b.left())).max(0.0);
    let iy = (a.bottom().min(b.bottom()) - a.top().max(b.top())).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Apply a scaling action to a box, center-preserving, then clamp.
///
/// `Stop` is not a deformation and is rejected.
pub fn apply_action(bbox: &BoundingBox, action: Action, bounds: FrameBounds) -> Result<BoundingBox> {
    let (fw, fh) = match action {
        Action::Enlarge => (1.0 + SCALE_STEP, 1.0 + SCALE_STEP),
        Action::Shrink => (1.0 - SCALE_STEP, 1.0 - SCALE_STEP),
        Action::Widen => (1.0 + SCALE_STEP, 1.0),
        Action::Narrow => (1.0 - SCALE_STEP, 1.0),
        Action::Heighten => (1.0, 1.0 + SCALE_STEP),
        Action::Flatten => (1.0, 1.0 - SCALE_STEP),
        Action::NoScale => (1.0, 1.0),
        Action::Stop => {
            return Err(invalid!("apply_action called with the stop action"));
        }
    };
    Ok(BoundingBox::new(bbox.cx, bbox.cy, bbox.w * fw, bbox.h * fh).clamped(bounds))
}

/// Shift the box center by `(dx, dy)` pixels, then clamp.
pub fn translate(bbox: &BoundingBox, dx: f64, dy: f64, bounds: FrameBounds) -> BoundingBox {
    BoundingBox::new(bbox.cx + dx, bbox.cy + dy, bbox.w, bbox.h).clamped(bounds)
}
