//! Box geometry, objectness ground-truth labeling, sliding-window proposal
//! generation, selection, and non-maxima suppression.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;
use crate::tensor::Tensor;

/// Axis-aligned box in pixel coordinates; `(x, y)` is the top-left corner
/// and the box covers `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f32>,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        assert!(w > 0 && h > 0, "box extents must be positive");
        BoundingBox {
            x,
            y,
            w,
            h,
            label: None,
            score: None,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_score(mut self, score: f32) -> Self {
        self.score = Some(score);
        self
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> i64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0 || iy <= 0 {
            0
        } else {
            ix * iy
        }
    }
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Squash an IoU value into an objectness training label: saturate to 1
/// above `1 - eps`, to 0 below `eps`, pass through in between.
pub fn objectness_label(iou: f64, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::Domain(format!("iou {iou} outside [0, 1]")));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Domain(format!("eps {eps} outside (0, 0.5)")));
    }
    Ok(if iou >= 1.0 - eps {
        1.0
    } else if iou <= eps {
        0.0
    } else {
        iou
    })
}

pub const DEFAULT_OBJECTNESS_EPS: f64 = 0.2;

/// Analytic sector parameters of a polar field of view: apex at the bottom,
/// fan opening upward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectorGeometry {
    pub apex_x: f64,
    pub apex_y: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub half_angle: f64,
}

/// Boolean validity raster over a frame, optionally backed by analytic
/// sector parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FovMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
    pub sector: Option<SectorGeometry>,
}

impl FovMask {
    pub fn full(width: usize, height: usize) -> Self {
        FovMask {
            width,
            height,
            data: vec![true; width * height],
            sector: None,
        }
    }

    pub fn from_raster(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Config("mask raster size mismatch".into()));
        }
        if !data.iter().any(|&v| v) {
            return Err(Error::Degenerate("field-of-view mask has no valid pixel".into()));
        }
        Ok(FovMask {
            width,
            height,
            data,
            sector: None,
        })
    }

    pub fn sector(width: usize, height: usize, geom: SectorGeometry) -> Result<Self> {
        let mut data = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 - geom.apex_x;
                let dy = geom.apex_y - y as f64; // up is positive
                let r = (dx * dx + dy * dy).sqrt();
                let angle = dx.atan2(dy).abs();
                if r >= geom.r_min && r <= geom.r_max && angle <= geom.half_angle {
                    data[y * width + x] = true;
                }
            }
        }
        if !data.iter().any(|&v| v) {
            return Err(Error::Degenerate("sector covers no pixel".into()));
        }
        Ok(FovMask {
            width,
            height,
            data,
            sector: Some(geom),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn is_inside(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return false;
        }
        self.data[y as usize * self.width + x as usize]
    }

    pub fn raster(&self) -> &[bool] {
        &self.data
    }
}

/// Grid of fixed-size windows at the given stride, restricted to the field
/// of view: a window is emitted iff all four of its corner pixels are valid.
/// Row-major order (y outer, x inner).
pub fn sliding_windows(
    frame_width: usize,
    frame_height: usize,
    fov: &FovMask,
    window: usize,
    stride: usize,
) -> Result<Vec<BoundingBox>> {
    if frame_width < window || frame_height < window {
        return Err(Error::Config(format!(
            "frame {frame_width}x{frame_height} smaller than window {window}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let last = window as i64 - 1;
    let mut out = Vec::new();
    let mut y = 0i64;
    while y + window as i64 <= frame_height as i64 {
        let mut x = 0i64;
        while x + window as i64 <= frame_width as i64 {
            let corners_ok = fov.is_inside(x, y)
                && fov.is_inside(x + last, y)
                && fov.is_inside(x, y + last)
                && fov.is_inside(x + last, y + last);
            if corners_ok {
                out.push(BoundingBox::new(x, y, window as i64, window as i64));
            }
            x += stride as i64;
        }
        y += stride as i64;
    }
    Ok(out)
}

/// Objectness label of each window: the squashed maximum IoU against the
/// ground-truth boxes (zero when there is no ground truth).
pub fn label_windows(
    windows: &[BoundingBox],
    ground_truth: &[BoundingBox],
    eps: f64,
) -> Result<Vec<(BoundingBox, f64)>> {
    windows
        .iter()
        .map(|w| {
            let best = ground_truth
                .iter()
                .map(|g| iou(w, g))
                .fold(0.0f64, f64::max);
            Ok((*w, objectness_label(best, eps)?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Objectness maps and window scoring
// ---------------------------------------------------------------------------

/// Dense objectness raster aligned to a frame. Cell `(i, j)` holds the
/// score of the window centered at frame pixel
/// `(origin + stride * i, origin + stride * j)` (y, x).
#[derive(Debug, Clone)]
pub struct ObjectnessMap {
    pub values: Tensor,
    pub stride: usize,
    pub origin: (f64, f64),
}

impl ObjectnessMap {
    pub fn new(values: Tensor, stride: usize, origin: (f64, f64)) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape_mismatch(values.shape(), &[0, 0], "objectness map"));
        }
        if values.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain("objectness map values must lie in [0, 1]".into()));
        }
        Ok(ObjectnessMap {
            values,
            stride,
            origin,
        })
    }

    /// Bilinear sample at a frame pixel position (edge-clamped).
    pub fn sample_at(&self, y: f64, x: f64) -> f64 {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        let fy = ((y - self.origin.0) / self.stride as f64).clamp(0.0, (h - 1) as f64);
        let fx = ((x - self.origin.1) / self.stride as f64).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let at = |yy: usize, xx: usize| self.values.data()[yy * w + xx] as f64;
        let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * dx;
        let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * dx;
        top + (bottom - top) * dy
    }

    /// Up-sample to frame extents with bilinear interpolation.
    pub fn upsample(&self, frame_height: usize, frame_width: usize) -> Tensor {
        let mut out = Vec::with_capacity(frame_height * frame_width);
        for y in 0..frame_height {
            for x in 0..frame_width {
                out.push(self.sample_at(y as f64, x as f64) as f32);
            }
        }
        Tensor::new(vec![frame_height, frame_width], out).expect("shape by construction")
    }
}

/// Crop `(1, wh, ww)` pixels of a window from a `(1, H, W)` image. Windows
/// must lie inside the image.
pub fn crop_window(image: &Tensor, bbox: &BoundingBox) -> Result<Tensor> {
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape_mismatch(image.shape(), &[1, 0, 0], "crop source"));
    }
    let (h, w) = (image.shape()[1] as i64, image.shape()[2] as i64);
    if bbox.x < 0 || bbox.y < 0 || bbox.x + bbox.w > w || bbox.y + bbox.h > h {
        return Err(Error::Config(format!(
            "window ({}, {}, {}, {}) outside {h}x{w} image",
            bbox.x, bbox.y, bbox.w, bbox.h
        )));
    }
    let mut out = Vec::with_capacity((bbox.w * bbox.h) as usize);
    for y in bbox.y..bbox.y + bbox.h {
        let row = y as usize * w as usize;
        out.extend_from_slice(&image.data()[row + bbox.x as usize..row + (bbox.x + bbox.w) as usize]);
    }
    Tensor::new(vec![1, bbox.h as usize, bbox.w as usize], out)
}

/// Anything that can score fixed-size windows of a frame with an
/// objectness value in [0, 1].
pub trait WindowScorer: Sync {
    fn score_windows(&self, image: &Tensor, windows: &[BoundingBox]) -> Result<Vec<f32>>;
}

/// Per-window forward passes through a patch objectness network.
pub struct PatchNetScorer<'a> {
    pub net: &'a NetworkGraph,
}

impl WindowScorer for PatchNetScorer<'_> {
    fn score_windows(&self, image: &Tensor, windows: &[BoundingBox]) -> Result<Vec<f32>> {
        if !matches!(self.net.output, crate::graph::OutputContract::Score) {
            return Err(Error::Config("patch scorer needs a score-output network".into()));
        }
        windows
            .par_iter()
            .map(|wnd| {
                let patch = crop_window(image, wnd)?;
                Ok(self.net.infer_single(&patch)?.data()[0])
            })
            .collect()
    }
}

/// One dense fully-convolutional pass, then bilinear reads at window
/// centers. The map has output stride 4 (two pools) and its first cell is
/// centered on the first full window.
pub struct FcnScorer<'a> {
    pub net: &'a NetworkGraph,
    pub window: usize,
}

impl FcnScorer<'_> {
    pub fn dense_map(&self, image: &Tensor) -> Result<ObjectnessMap> {
        if !matches!(self.net.output, crate::graph::OutputContract::ObjectnessMap) {
            return Err(Error::Config("FCN scorer needs a map-output network".into()));
        }
        let raw = self.net.infer_single(image)?;
        let (h, w) = (raw.shape()[1], raw.shape()[2]);
        let values = raw.reshape(&[h, w])?;
        let origin = self.window as f64 / 2.0;
        ObjectnessMap::new(values, 4, (origin, origin))
    }
}

impl WindowScorer for FcnScorer<'_> {
    fn score_windows(&self, image: &Tensor, windows: &[BoundingBox]) -> Result<Vec<f32>> {
        let map = self.dense_map(image)?;
        Ok(windows
            .iter()
            .map(|wnd| {
                let (cx, cy) = wnd.center();
                map.sample_at(cy, cx) as f32
            })
            .collect())
    }
}

/// A fixed synthetic map (tests and precomputed-map replay).
pub struct MapScorer {
    pub map: ObjectnessMap,
}

impl WindowScorer for MapScorer {
    fn score_windows(&self, _image: &Tensor, windows: &[BoundingBox]) -> Result<Vec<f32>> {
        Ok(windows
            .iter()
            .map(|wnd| {
                let (cx, cy) = wnd.center();
                self.map.sample_at(cy, cx) as f32
            })
            .collect())
    }
}

/// Attach scores to windows using the given scorer.
pub fn score_windows(
    image: &Tensor,
    windows: &[BoundingBox],
    scorer: &dyn WindowScorer,
) -> Result<Vec<BoundingBox>> {
    let scores = scorer.score_windows(image, windows)?;
    Ok(windows
        .iter()
        .zip(scores)
        .map(|(wnd, s)| wnd.with_score(s))
        .collect())
}

// ---------------------------------------------------------------------------
// Selection and non-maxima suppression
// ---------------------------------------------------------------------------

/// All windows scoring at least `threshold`, in their original order.
pub fn select_by_threshold(scored: &[BoundingBox], threshold: f32) -> Vec<BoundingBox> {
    scored
        .iter()
        .filter(|b| b.score.unwrap_or(0.0) >= threshold)
        .copied()
        .collect()
}

/// The `k` highest-scored windows; ties keep the original (row-major
/// window) order, so `top_k(k1)` is a prefix of `top_k(k2)` for `k1 <= k2`.
pub fn select_top_k(scored: &[BoundingBox], k: usize) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .score
            .unwrap_or(0.0)
            .partial_cmp(&scored[a].score.unwrap_or(0.0))
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.into_iter().map(|i| scored[i]).collect()
}

/// Greedy non-maxima suppression: repeatedly accept the highest-scored
/// remaining proposal and suppress everything overlapping it with IoU
/// strictly greater than `overlap_threshold`. Output is sorted by score
/// descending.
pub fn nms(proposals: &[BoundingBox], overlap_threshold: f64) -> Result<Vec<BoundingBox>> {
    if proposals.iter().any(|p| p.score.is_none()) {
        return Err(Error::Config("non-maxima suppression requires scored proposals".into()));
    }
    if !(overlap_threshold > 0.0 && overlap_threshold <= 1.0) {
        return Err(Error::Domain(format!(
            "overlap threshold {overlap_threshold} outside (0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .unwrap()
            .partial_cmp(&proposals[a].score.unwrap())
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; proposals.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(proposals[i]);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&proposals[i], &proposals[j]) > overlap_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Proposal CSV rows: `image_id,x,y,w,h,score[,class]`.
pub fn write_proposals_csv(
    mut w: impl std::io::Write,
    rows: &[(String, BoundingBox)],
    with_class: bool,
) -> Result<()> {
    if with_class {
        writeln!(w, "image_id,x,y,w,h,score,class")?;
    } else {
        writeln!(w, "image_id,x,y,w,h,score")?;
    }
    for (id, b) in rows {
        if with_class {
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{}",
                id,
                b.x,
                b.y,
                b.w,
                b.h,
                b.score.unwrap_or(0.0),
                b.label.map(|l| l as i64).unwrap_or(-1)
            )?;
        } else {
            writeln!(w, "{},{},{},{},{},{:.6}", id, b.x, b.y, b.w, b.h, b.score.unwrap_or(0.0))?;
        }
    }
    Ok(())
}
