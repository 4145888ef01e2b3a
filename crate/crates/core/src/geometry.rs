//! Binary masks and the evaluation metrics behind segmentation and
//! grounding scoreboards: box/mask IoU, cumulative IoU, per-frame mean IoU,
//! temporal IoU, boundary F-measure and the J&F combination.
//!
//! All metrics are pure functions returning values in `[0, 1]`. Dataset-level
//! reductions run in a fixed order so results are bitwise reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{BoundingBox, TemporalSpan, TrackedRegion};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("both masks empty: IoU undefined")]
    BothEmpty,
    #[error("both boxes degenerate: IoU undefined")]
    DegenerateBoxes,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("mask dimensions must be at least 1x1")]
    InvalidDimensions,
    #[error("bad run-length encoding: {0}")]
    BadRle(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

// ---------------------------------------------------------------------------
// BinaryMask
// ---------------------------------------------------------------------------

/// Row-major boolean grid; `(x, y)` indexes column then row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidDimensions);
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || bits.len() != width * height {
            return Err(GeometryError::InvalidDimensions);
        }
        Ok(Self { width, height, bits })
    }

    pub fn filled(width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            bits: vec![true; width * height],
            ..Self::new(width, height)?
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_blank(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(GeometryError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Run-length encoding: comma-separated run lengths over the row-major
    /// scan, alternating zero-run first (the leading run may be `0`).
    pub fn to_rle(&self) -> String {
        let mut runs: Vec<usize> = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &bit in &self.bits {
            if bit == current {
                run += 1;
            } else {
                runs.push(run);
                current = bit;
                run = 1;
            }
        }
        runs.push(run);
        runs.iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_rle(width: usize, height: usize, rle: &str) -> Result<Self> {
        let mut mask = Self::new(width, height)?;
        let total = width * height;
        let mut idx = 0usize;
        let mut value = false;
        for part in rle.split(',') {
            let run: usize = part
                .trim()
                .parse()
                .map_err(|_| GeometryError::BadRle(format!("bad run length {part:?}")))?;
            if idx + run > total {
                return Err(GeometryError::BadRle("runs exceed mask size".into()));
            }
            for bit in &mut mask.bits[idx..idx + run] {
                *bit = value;
            }
            idx += run;
            value = !value;
        }
        if idx != total {
            return Err(GeometryError::BadRle(format!(
                "runs cover {idx} of {total} cells"
            )));
        }
        Ok(mask)
    }

    /// Boundary pixels: mask pixels 4-adjacent to background or image edge.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x == self.width - 1
                    || y == self.height - 1
                    || !self.get(x - 1, y)
                    || !self.get(x + 1, y)
                    || !self.get(x, y - 1)
                    || !self.get(x, y + 1);
                if edge {
                    out.push((x, y));
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// IoU family
// ---------------------------------------------------------------------------

/// Intersection area over union area of two canonical boxes (closed regions).
///
/// Errors only when both boxes have zero area; a single degenerate box
/// scores 0 against any positive-area box.
pub fn box_iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    let iw = (a.xr.min(b.xr) - a.xl.max(b.xl)).max(0.0);
    let ih = (a.yb.min(b.yb) - a.yt.max(b.yt)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Err(GeometryError::DegenerateBoxes);
    }
    Ok(inter / union)
}

/// Region similarity J: `|a AND b| / |a OR b|`.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let (inter, union) = mask_counts(a, b);
    if union == 0 {
        return Err(GeometryError::BothEmpty);
    }
    Ok(inter as f64 / union as f64)
}

fn mask_counts(a: &BinaryMask, b: &BinaryMask) -> (u64, u64) {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += u64::from(x && y);
        union += u64::from(x || y);
    }
    (inter, union)
}

/// Boundary F-measure with Chebyshev matching tolerance `tol` (in pixels).
///
/// A boundary pixel matches when some boundary pixel of the other mask lies
/// within Chebyshev distance `tol`. Two boundary-free masks score 1, exactly
/// one boundary-free mask scores 0.
pub fn boundary_f(a: &BinaryMask, b: &BinaryMask, tol: u32) -> Result<f64> {
    a.same_dims(b)?;
    let ba = a.boundary();
    let bb = b.boundary();
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&ba, &bb, tol, a.width, a.height);
    let recall = matched_fraction(&bb, &ba, tol, a.width, a.height);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of `from` pixels with a `to` pixel within Chebyshev `tol`.
fn matched_fraction(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
    tol: u32,
    width: usize,
    height: usize,
) -> f64 {
    // Dilate `to` by a (2 tol + 1)^2 box, then membership-test `from`.
    let tol = tol as usize;
    let mut near = vec![false; width * height];
    for &(x, y) in to {
        let x0 = x.saturating_sub(tol);
        let y0 = y.saturating_sub(tol);
        let x1 = (x + tol).min(width - 1);
        let y1 = (y + tol).min(height - 1);
        for yy in y0..=y1 {
            for cell in &mut near[yy * width + x0..=yy * width + x1] {
                *cell = true;
            }
        }
    }
    let matched = from.iter().filter(|&&(x, y)| near[y * width + x]).count();
    matched as f64 / from.len() as f64
}

/// The conventional boundary tolerance: `ceil(0.008 * image diagonal)`.
pub fn davis_boundary_tolerance(width: usize, height: usize) -> u32 {
    let diag = ((width * width + height * height) as f64).sqrt();
    (0.008 * diag).ceil() as u32
}

/// Cumulative IoU over a dataset: total intersection / total union.
///
/// Pairs where both masks are empty contribute nothing; the whole dataset
/// being empty-on-both-sides is an error.
pub fn ciou(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(GeometryError::EmptyDataset);
    }
    let mut inter_total = 0u64;
    let mut union_total = 0u64;
    for (pred, reference) in pairs {
        pred.same_dims(reference)?;
        let (inter, union) = mask_counts(pred, reference);
        inter_total += inter;
        union_total += union;
    }
    if union_total == 0 {
        return Err(GeometryError::BothEmpty);
    }
    Ok(inter_total as f64 / union_total as f64)
}

/// Which frames the video mean-IoU averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameAveraging {
    /// Average over reference-annotated frames only (default).
    #[default]
    AnnotatedOnly,
    /// Average over the union of predicted and annotated frames, so spurious
    /// predictions on unannotated frames also count as zero-IoU frames.
    AllFrames,
}

/// Mean per-frame box IoU for video spatial grounding.
///
/// Frames with a reference but no prediction count as IoU 0; a frame where
/// both boxes are degenerate also counts as 0.
pub fn miou_video(
    predictions: &BTreeMap<u32, BoundingBox>,
    references: &BTreeMap<u32, BoundingBox>,
    averaging: FrameAveraging,
) -> Result<f64> {
    if references.is_empty() {
        return Err(GeometryError::EmptyReference);
    }
    let frames: Vec<u32> = match averaging {
        FrameAveraging::AnnotatedOnly => references.keys().copied().collect(),
        FrameAveraging::AllFrames => {
            let mut all: Vec<u32> = references.keys().chain(predictions.keys()).copied().collect();
            all.sort_unstable();
            all.dedup();
            all
        }
    };
    let mut total = 0.0;
    for frame in &frames {
        let iou = match (predictions.get(frame), references.get(frame)) {
            (Some(pred), Some(reference)) => box_iou(pred, reference).unwrap_or(0.0),
            _ => 0.0,
        };
        total += iou;
    }
    Ok(total / frames.len() as f64)
}

/// Inclusive-frame intersection count over union count of two spans.
pub fn temporal_iou(a: &TemporalSpan, b: &TemporalSpan) -> f64 {
    let lo = a.fs.max(b.fs);
    let hi = a.fe.min(b.fe);
    let inter = if lo <= hi { u64::from(hi - lo) + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Fraction of box pairs with IoU at or above `threshold`.
///
/// Pairs whose IoU is undefined (both degenerate) count as misses.
pub fn accuracy_at(pairs: &[(BoundingBox, BoundingBox)], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(GeometryError::InvalidThreshold(threshold));
    }
    if pairs.is_empty() {
        return Err(GeometryError::EmptyDataset);
    }
    let hits = pairs
        .iter()
        .filter(|(pred, reference)| box_iou(pred, reference).unwrap_or(0.0) >= threshold)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// J&F
// ---------------------------------------------------------------------------

/// Per-sequence region similarity, boundary quality, and their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JfReport {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// J&F over mask sequences: J and F are averaged per sequence over frames,
/// `(J + F) / 2` per sequence, then averaged over sequences. Frames where
/// both masks are empty count as perfect agreement.
pub fn j_and_f(sequences: &[Vec<(BinaryMask, BinaryMask)>], tol: u32) -> Result<JfReport> {
    if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
        return Err(GeometryError::EmptyDataset);
    }
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    for frames in sequences {
        let mut j_seq = 0.0;
        let mut f_seq = 0.0;
        for (pred, reference) in frames {
            j_seq += match mask_iou(pred, reference) {
                Ok(v) => v,
                Err(GeometryError::BothEmpty) => 1.0,
                Err(e) => return Err(e),
            };
            f_seq += boundary_f(pred, reference, tol)?;
        }
        j_sum += j_seq / frames.len() as f64;
        f_sum += f_seq / frames.len() as f64;
    }
    let j = j_sum / sequences.len() as f64;
    let f = f_sum / sequences.len() as f64;
    Ok(JfReport { j, f, jf: 0.5 * (j + f) })
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// One prediction/reference pair as stored in evaluation JSONL files.
///
/// Boxes are `[xl, yt, xr, yb]` arrays, spans `[fs, fe]`, masks row-major
/// run-length strings (see [`BinaryMask::to_rle`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalPair {
    Box {
        prediction: [f64; 4],
        reference: [f64; 4],
    },
    Mask {
        width: usize,
        height: usize,
        prediction: String,
        reference: String,
    },
    Tracked {
        prediction: TrackedArrays,
        reference: TrackedArrays,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrackedArrays {
    pub bbox: [f64; 4],
    pub span: [u32; 2],
}

impl TrackedArrays {
    pub fn from_region(region: &TrackedRegion) -> Self {
        Self {
            bbox: [region.bbox.xl, region.bbox.yt, region.bbox.xr, region.bbox.yb],
            span: [region.span.fs, region.span.fe],
        }
    }
}

pub fn box_from_array(a: [f64; 4]) -> crate::protocol::Result<BoundingBox> {
    BoundingBox::new(a[0], a[1], a[2], a[3])
}

pub fn span_from_array(a: [u32; 2]) -> crate::protocol::Result<TemporalSpan> {
    TemporalSpan::new(a[0], a[1])
}
