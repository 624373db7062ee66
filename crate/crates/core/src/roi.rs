//! Region-of-interest handling on `[T, W, H, C]` feature maps: box geometry,
//! RoIAlign sampling with spatial average pooling, and in-place write-back of
//! transformed ROI vectors.
//!
//! Coordinate conventions: boxes are normalised to `[0, 1]` in input-image
//! space, `x` runs along `W` and `y` along `H`. Feature cell `i` covers the
//! continuous interval `[i, i+1)` and has its centre at `i + 0.5` once the
//! box is scaled by the map extent.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Number of bilinear samples per bin along each axis.
pub const SAMPLES_PER_BIN: usize = 2;
/// Bin grid used by [`extract_features`] before the spatial mean.
pub const DEFAULT_BINS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Entity {
    Hand,
    Object,
    Scene,
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Entity::Hand => "hand",
            Entity::Object => "object",
            Entity::Scene => "scene",
        })
    }
}

impl FromStr for Entity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hand" => Ok(Entity::Hand),
            "object" => Ok(Entity::Object),
            "scene" => Ok(Entity::Scene),
            other => Err(Error::Format(format!("unknown entity `{other}`"))),
        }
    }
}

/// One region of interest in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub frame: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub entity: Entity,
}

impl RoiBox {
    pub fn new(frame: usize, x1: f64, y1: f64, x2: f64, y2: f64, entity: Entity) -> Self {
        Self {
            frame,
            x1,
            y1,
            x2,
            y2,
            entity,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// The box clipped to the unit square, or `None` when nothing remains.
    pub fn clipped(&self) -> Option<RoiBox> {
        let c = RoiBox {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
            ..*self
        };
        let finite = [c.x1, c.y1, c.x2, c.y2].iter().all(|v| v.is_finite());
        (finite && c.x1 < c.x2 && c.y1 < c.y2).then_some(c)
    }

    /// Checks the box is inside the unit square with positive area and
    /// refers to an existing frame.
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.frame >= frames {
            return Err(Error::InvalidBox(format!(
                "frame {} out of range for {frames} frames",
                self.frame
            )));
        }
        match self.clipped() {
            Some(c) if c == *self => Ok(()),
            Some(_) => Err(Error::InvalidBox(format!("{self:?} extends outside [0,1]"))),
            None => Err(Error::InvalidBox(format!("{self:?} has zero area"))),
        }
    }

    pub fn iou(&self, other: &RoiBox) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Clips every box to the unit square and drops the ones left without area
/// or pointing past the last frame. Returns the survivors and the drop count.
pub fn sanitize_rois(rois: &[RoiBox], frames: usize) -> (Vec<RoiBox>, usize) {
    let kept: Vec<RoiBox> = rois
        .iter()
        .filter(|r| r.frame < frames)
        .filter_map(RoiBox::clipped)
        .collect();
    let dropped = rois.len() - kept.len();
    (kept, dropped)
}

/// Feature-map cells covered by one ROI; spans are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Footprint {
    pub frame: usize,
    pub x_lo: usize,
    pub x_hi: usize,
    pub y_lo: usize,
    pub y_hi: usize,
}

impl Footprint {
    pub fn contains(&self, frame: usize, x: usize, y: usize) -> bool {
        frame == self.frame
            && (self.x_lo..=self.x_hi).contains(&x)
            && (self.y_lo..=self.y_hi).contains(&y)
    }

    pub fn cell_count(&self) -> usize {
        (self.x_hi - self.x_lo + 1) * (self.y_hi - self.y_lo + 1)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.x_lo..=self.x_hi).flat_map(move |x| (self.y_lo..=self.y_hi).map(move |y| (x, y)))
    }
}

/// Cells whose centres lie inside `[lo, hi]` (already in cell units), or the
/// single cell nearest the interval midpoint when none do.
fn covered_span(lo: f64, hi: f64, extent: usize) -> (usize, usize) {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(extent as f64 - 1.0);
    if first <= last {
        (first as usize, last as usize)
    } else {
        let mid = ((lo + hi) / 2.0).floor().clamp(0.0, extent as f64 - 1.0) as usize;
        (mid, mid)
    }
}

/// Maps a normalised box onto a `W × H` feature grid.
pub fn box_to_footprint(roi: &RoiBox, width: usize, height: usize) -> Footprint {
    let (x_lo, x_hi) = covered_span(roi.x1 * width as f64, roi.x2 * width as f64, width);
    let (y_lo, y_hi) = covered_span(roi.y1 * height as f64, roi.y2 * height as f64, height);
    Footprint {
        frame: roi.frame,
        x_lo,
        x_hi,
        y_lo,
        y_hi,
    }
}

/// Bilinear taps `(cell, weight)` along one axis for a continuous coordinate
/// given in cell units (centres at `i + 0.5`).
fn axis_taps(coord: f64, extent: usize) -> [(usize, f64); 2] {
    let c = (coord - 0.5).clamp(0.0, extent as f64 - 1.0);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(extent - 1);
    let frac = c - lo as f64;
    [(lo, 1.0 - frac), (hi, frac)]
}

/// Interpolation weights for every output bin: `bins × bins` lists of
/// `(x, y, weight)` taps whose weights sum to one.
fn align_taps(
    roi: &RoiBox,
    width: usize,
    height: usize,
    bins: usize,
) -> Vec<Vec<(usize, usize, f64)>> {
    let (x0, y0) = (roi.x1 * width as f64, roi.y1 * height as f64);
    let bin_w = roi.width() * width as f64 / bins as f64;
    let bin_h = roi.height() * height as f64 / bins as f64;
    let per_sample = 1.0 / (SAMPLES_PER_BIN * SAMPLES_PER_BIN) as f64;
    let mut out = Vec::with_capacity(bins * bins);
    for bx in 0..bins {
        for by in 0..bins {
            let mut taps = Vec::with_capacity(16);
            for sx in 0..SAMPLES_PER_BIN {
                let px = x0 + bin_w * (bx as f64 + (sx as f64 + 0.5) / SAMPLES_PER_BIN as f64);
                for sy in 0..SAMPLES_PER_BIN {
                    let py = y0 + bin_h * (by as f64 + (sy as f64 + 0.5) / SAMPLES_PER_BIN as f64);
                    for (ix, wx) in axis_taps(px, width) {
                        for (iy, wy) in axis_taps(py, height) {
                            let w = wx * wy * per_sample;
                            if w != 0.0 {
                                taps.push((ix, iy, w));
                            }
                        }
                    }
                }
            }
            out.push(taps);
        }
    }
    out
}

fn map_dims<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    x.expect_rank(op, 4)?;
    let d = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    if d[1] == 0 || d[2] == 0 {
        return Err(Error::shape(op, x.shape(), &[d[0], 1, 1, d[3]]));
    }
    Ok(d)
}

/// RoIAlign of one box on the frame it names, from a `[T, W, H, C]` map, to
/// a `[bins, bins, C]` grid.
pub fn roi_align<T: Real>(map: &Tensor<T>, roi: &RoiBox, bins: usize) -> Result<Tensor<T>> {
    let [frames, w, h, c] = map_dims("roi_align", map)?;
    roi.validate(frames)?;
    if bins == 0 {
        return Err(Error::Config("roi_align needs at least one bin".into()));
    }
    let base = roi.frame * w * h * c;
    let d = map.data();
    let mut out = Vec::with_capacity(bins * bins * c);
    for taps in align_taps(roi, w, h, bins) {
        let mut acc = vec![T::zero(); c];
        for (ix, iy, wt) in taps {
            let wt = T::of(wt);
            let cell = &d[base + (ix * h + iy) * c..base + (ix * h + iy + 1) * c];
            for (a, &v) in acc.iter_mut().zip(cell) {
                *a = *a + wt * v;
            }
        }
        out.extend(acc);
    }
    Tensor::new(vec![bins, bins, c], out)
}

/// Differentiable [`roi_align`]; the gradient flows to the feature map only.
pub fn roi_align_var<T: Real>(g: &Graph<T>, map: Var, roi: &RoiBox, bins: usize) -> Result<Var> {
    let value = g.value(map);
    let out = roi_align(&value, roi, bins)?;
    let [_, w, h, c] = map_dims("roi_align", &value)?;
    let shape = value.shape().to_vec();
    let taps = align_taps(roi, w, h, bins);
    let base = roi.frame * w * h * c;
    Ok(g.custom(
        out,
        vec![map],
        Box::new(move |grad, _| {
            let mut gx = Tensor::zeros(shape.clone());
            let gd = grad.data();
            let gxd = gx.data_mut();
            for (bin, bin_taps) in taps.iter().enumerate() {
                let grow = &gd[bin * c..(bin + 1) * c];
                for &(ix, iy, wt) in bin_taps {
                    let wt = T::of(wt);
                    let start = base + (ix * h + iy) * c;
                    for (slot, &gv) in gxd[start..start + c].iter_mut().zip(grow) {
                        *slot = *slot + wt * gv;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}

/// Pooled ROI features `F: [N, C]` with the map cells each row came from.
#[derive(Debug, Clone)]
pub struct RoiFeatureSet {
    pub features: Var,
    pub footprints: Vec<Footprint>,
}

impl RoiFeatureSet {
    pub fn len(&self) -> usize {
        self.footprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.footprints.is_empty()
    }
}

/// RoIAlign onto a `bins × bins` grid followed by a spatial mean, one row
/// per ROI. An empty ROI list gives a `[0, C]` feature matrix.
pub fn extract_features<T: Real>(
    g: &Graph<T>,
    map: Var,
    rois: &[RoiBox],
    bins: usize,
) -> Result<RoiFeatureSet> {
    let value = g.value(map);
    let [_, w, h, c] = map_dims("extract_features", &value)?;
    if rois.is_empty() {
        return Ok(RoiFeatureSet {
            features: g.constant(Tensor::zeros(vec![0, c])),
            footprints: Vec::new(),
        });
    }
    let mut rows = Vec::with_capacity(rois.len());
    for roi in rois {
        let grid = roi_align_var(g, map, roi, bins)?;
        let grid = g.reshape(grid, vec![1, bins, bins, c])?;
        rows.push(g.mean_pool(grid)?);
    }
    Ok(RoiFeatureSet {
        features: g.concat_rows(&rows)?,
        footprints: rois.iter().map(|r| box_to_footprint(r, w, h)).collect(),
    })
}

/// For every map cell, the ROI rows writing to it, in a canonical order that
/// depends only on row contents so summation is independent of list order.
fn contributors<T: Real>(
    dims: [usize; 4],
    rows: &Tensor<T>,
    footprints: &[Footprint],
) -> Vec<Vec<usize>> {
    let [frames, w, h, _] = dims;
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); frames * w * h];
    for (i, fp) in footprints.iter().enumerate() {
        for (x, y) in fp.cells() {
            cells[(fp.frame * w + x) * h + y].push(i);
        }
    }
    for list in cells.iter_mut().filter(|l| l.len() > 1) {
        list.sort_by(|&a, &b| {
            rows.row(a)
                .iter()
                .zip(rows.row(b))
                .map(|(x, y)| x.to_f64_lossy().total_cmp(&y.to_f64_lossy()))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }
    cells
}

fn check_write_back<T: Real>(
    map: &Tensor<T>,
    rows: &Tensor<T>,
    footprints: &[Footprint],
) -> Result<[usize; 4]> {
    let dims = map_dims("write_back", map)?;
    rows.expect_rank("write_back", 2)?;
    if rows.dim(0) != footprints.len() {
        return Err(Error::Contract(format!(
            "write_back got {} feature rows for {} footprints",
            rows.dim(0),
            footprints.len()
        )));
    }
    if rows.dim(1) != dims[3] {
        return Err(Error::shape("write_back", map.shape(), rows.shape()));
    }
    for fp in footprints {
        if fp.frame >= dims[0]
            || fp.x_hi >= dims[1]
            || fp.y_hi >= dims[2]
            || fp.x_lo > fp.x_hi
            || fp.y_lo > fp.y_hi
        {
            return Err(Error::Contract(format!(
                "footprint {fp:?} outside map {:?}",
                map.shape()
            )));
        }
    }
    Ok(dims)
}

/// Replaces every footprint cell of `map` by its ROI's row of `rows`;
/// cells claimed by several ROIs get the mean of their rows. Cells outside
/// all footprints are copied unchanged.
pub fn write_back<T: Real>(
    map: &Tensor<T>,
    rows: &Tensor<T>,
    footprints: &[Footprint],
) -> Result<Tensor<T>> {
    let dims = check_write_back(map, rows, footprints)?;
    Ok(write_back_with(
        map,
        rows,
        &contributors(dims, rows, footprints),
        dims[3],
    ))
}

fn write_back_with<T: Real>(
    map: &Tensor<T>,
    rows: &Tensor<T>,
    cells: &[Vec<usize>],
    c: usize,
) -> Tensor<T> {
    let mut out = map.clone();
    let od = out.data_mut();
    for (cell, list) in cells.iter().enumerate() {
        let Some((&first, rest)) = list.split_first() else {
            continue;
        };
        let slot = &mut od[cell * c..(cell + 1) * c];
        slot.copy_from_slice(rows.row(first));
        if !rest.is_empty() {
            for &r in rest {
                for (s, &v) in slot.iter_mut().zip(rows.row(r)) {
                    *s = *s + v;
                }
            }
            let n = T::of(list.len() as f64);
            for s in slot.iter_mut() {
                *s = *s / n;
            }
        }
    }
    out
}

/// Differentiable [`write_back`], with gradients to both the map and rows.
pub fn write_back_var<T: Real>(
    g: &Graph<T>,
    map: Var,
    rows: Var,
    footprints: &[Footprint],
) -> Result<Var> {
    let (mv, rv) = (g.value(map), g.value(rows));
    let dims = check_write_back(&mv, &rv, footprints)?;
    let cells = contributors(dims, &rv, footprints);
    let out = write_back_with(&mv, &rv, &cells, dims[3]);
    let c = dims[3];
    let row_shape = rv.shape().to_vec();
    Ok(g.custom(
        out,
        vec![map, rows],
        Box::new(move |grad, need| {
            let gd = grad.data();
            let gmap = need[0].then(|| {
                let mut gm = grad.clone();
                for (cell, list) in cells.iter().enumerate() {
                    if !list.is_empty() {
                        gm.data_mut()[cell * c..(cell + 1) * c].fill(T::zero());
                    }
                }
                gm
            });
            let grows = need[1].then(|| {
                let mut gr = Tensor::zeros(row_shape.clone());
                for (cell, list) in cells.iter().enumerate() {
                    if list.is_empty() {
                        continue;
                    }
                    let share = T::one() / T::of(list.len() as f64);
                    for &r in list {
                        let dst = &mut gr.data_mut()[r * c..(r + 1) * c];
                        for (d, &gv) in dst.iter_mut().zip(&gd[cell * c..(cell + 1) * c]) {
                            *d = *d + gv * share;
                        }
                    }
                }
                gr
            });
            vec![gmap, grows]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn full_box(frame: usize) -> RoiBox {
        RoiBox::new(frame, 0.0, 0.0, 1.0, 1.0, Entity::Object)
    }

    #[test]
    fn full_box_over_ramp_averages_to_center() {
        let map = Tensor::<f64>::from_fn(vec![1, 4, 4, 1], |i| i as f64);
        let out = roi_align(&map, &full_box(0), 1).unwrap();
        assert!((out.item() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn tiny_box_at_cell_center_reads_that_cell() {
        let map = Tensor::<f64>::from_fn(vec![1, 4, 4, 2], |i| (i as f64).sin());
        // centre of cell (2, 1) is (2.5/4, 1.5/4)
        let (cx, cy) = (2.5 / 4.0, 1.5 / 4.0);
        let eps = 1e-9;
        let roi = RoiBox::new(0, cx - eps, cy - eps, cx + eps, cy + eps, Entity::Hand);
        let out = roi_align(&map, &roi, 2).unwrap();
        let cell = &map.data()[(2 * 4 + 1) * 2..(2 * 4 + 1) * 2 + 2];
        for bin in out.data().chunks(2) {
            assert!((bin[0] - cell[0]).abs() < 1e-6);
            assert!((bin[1] - cell[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let map = Tensor::<f64>::full(vec![2, 5, 3, 3], 0.75);
        let roi = RoiBox::new(1, 0.13, 0.4, 0.77, 0.91, Entity::Object);
        let out = roi_align(&map, &roi, 2).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn degenerate_and_out_of_range_boxes_are_rejected() {
        let map = Tensor::<f64>::zeros(vec![2, 4, 4, 1]);
        let flat = RoiBox::new(0, 0.5, 0.1, 0.5, 0.9, Entity::Object);
        assert!(matches!(
            roi_align(&map, &flat, 2),
            Err(Error::InvalidBox(_))
        ));
        assert!(matches!(
            roi_align(&map, &full_box(2), 2),
            Err(Error::InvalidBox(_))
        ));
    }

    #[test]
    fn sanitize_clips_and_drops() {
        let rois = [
            RoiBox::new(0, -0.2, 0.1, 0.5, 1.3, Entity::Hand),
            RoiBox::new(0, 1.2, 0.1, 1.5, 0.3, Entity::Object),
            RoiBox::new(5, 0.1, 0.1, 0.2, 0.2, Entity::Object),
        ];
        let (kept, dropped) = sanitize_rois(&rois, 4);
        assert_eq!(dropped, 2);
        assert_eq!(kept, vec![RoiBox::new(0, 0.0, 0.1, 0.5, 1.0, Entity::Hand)]);
    }

    #[test]
    fn footprint_rules() {
        let fp = box_to_footprint(&full_box(0), 4, 4);
        assert_eq!((fp.x_lo, fp.x_hi, fp.y_lo, fp.y_hi), (0, 3, 0, 3));
        let quarter = RoiBox::new(0, 0.0, 0.0, 0.5, 0.5, Entity::Hand);
        let fp = box_to_footprint(&quarter, 4, 4);
        assert_eq!((fp.x_lo, fp.x_hi, fp.y_lo, fp.y_hi), (0, 1, 0, 1));
        let tiny = RoiBox::new(0, 0.49, 0.49, 0.51, 0.51, Entity::Object);
        let fp = box_to_footprint(&tiny, 14, 14);
        assert_eq!(fp.cell_count(), 1);
        assert_eq!((fp.x_lo, fp.y_lo), (7, 7));
    }

    #[test]
    fn empty_write_back_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = Tensor::<f64>::from_fn(vec![2, 3, 3, 4], |_| rng.gen());
        let out = write_back(&map, &Tensor::zeros(vec![0, 4]), &[]).unwrap();
        assert_eq!(out, map);
    }

    #[test]
    fn overlapping_rois_average() {
        let map = Tensor::<f64>::zeros(vec![1, 4, 4, 2]);
        let a = box_to_footprint(&RoiBox::new(0, 0.0, 0.0, 0.75, 0.5, Entity::Hand), 4, 4);
        let b = box_to_footprint(&RoiBox::new(0, 0.5, 0.0, 1.0, 0.5, Entity::Object), 4, 4);
        let rows = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -6.0]]);
        let out = write_back(&map, &rows, &[a, b]).unwrap();
        let at = |x: usize, y: usize| &out.data()[(x * 4 + y) * 2..(x * 4 + y) * 2 + 2];
        assert_eq!(at(0, 0), &[1.0, 2.0]);
        assert_eq!(at(2, 1), &[2.0, -2.0]);
        assert_eq!(at(3, 0), &[3.0, -6.0]);
        assert_eq!(at(3, 3), &[0.0, 0.0]);
    }

    #[test]
    fn count_mismatch_is_contract_error() {
        let map = Tensor::<f64>::zeros(vec![1, 2, 2, 1]);
        let fp = box_to_footprint(&full_box(0), 2, 2);
        let err = write_back(&map, &Tensor::zeros(vec![2, 1]), &[fp]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn iou_of_shifted_unit_box() {
        let a = RoiBox::new(0, 0.0, 0.0, 0.3, 0.3, Entity::Hand);
        let b = RoiBox::new(0, 0.1, 0.0, 0.4, 0.3, Entity::Hand);
        assert!((a.iou(&b) - 0.5).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
    }
}
