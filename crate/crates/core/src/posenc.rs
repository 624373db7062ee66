//! Spatio-temporal ordering of ROIs and the encodings added to their
//! pooled features.

use std::cmp::Ordering;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::roi::RoiBox;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Horizontal reading order used to number boxes within a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    LeftToRight,
    RightToLeft,
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left-right" | "ltr" => Ok(Direction::LeftToRight),
            "right-left" | "rtl" => Ok(Direction::RightToLeft),
            other => Err(Error::Config(format!("unknown ordering `{other}`"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::LeftToRight => "left-right",
            Direction::RightToLeft => "right-left",
        })
    }
}

/// Sequence position assigned to each ROI, `positions[i]` for `rois[i]`.
/// Always a permutation of `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionalIndex(pub Vec<usize>);

impl PositionalIndex {
    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    /// ROI indices in sequence order.
    pub fn sequence(&self) -> Vec<usize> {
        let mut seq = vec![0; self.0.len()];
        for (roi, &pos) in self.0.iter().enumerate() {
            seq[pos] = roi;
        }
        seq
    }
}

/// Numbers ROIs by frame, then horizontal position of the left edge, then
/// top edge; exact ties keep input order.
pub fn order_rois(rois: &[RoiBox], direction: Direction) -> PositionalIndex {
    let mut idx: Vec<usize> = (0..rois.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ra, rb) = (&rois[a], &rois[b]);
        let horizontal = match direction {
            Direction::LeftToRight => ra.x1.total_cmp(&rb.x1),
            Direction::RightToLeft => rb.x1.total_cmp(&ra.x1),
        };
        ra.frame
            .cmp(&rb.frame)
            .then(horizontal)
            .then(ra.y1.total_cmp(&rb.y1))
            .then(Ordering::Equal)
    });
    let mut positions = vec![0; rois.len()];
    for (pos, &roi) in idx.iter().enumerate() {
        positions[roi] = pos;
    }
    PositionalIndex(positions)
}

/// Sine on even channels, cosine on odd channels, frequency
/// `1 / 10000^(2i/C)` for channel pair `i`.
pub fn sinusoidal_encoding<T: Real>(pos: usize, channels: usize) -> Result<Tensor<T>> {
    if channels == 0 || !channels.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal encoding needs an even channel count, got {channels}"
        )));
    }
    let p = pos as f64;
    Ok(Tensor::from_fn(vec![channels], |d| {
        let pair = (d / 2) as f64;
        let angle = p / 10000f64.powf(2.0 * pair / channels as f64);
        T::of(if d % 2 == 0 { angle.sin() } else { angle.cos() })
    }))
}

/// One encoding row per position.
pub fn sinusoidal_table<T: Real>(positions: &[usize], channels: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(positions.len() * channels);
    for &p in positions {
        data.extend(sinusoidal_encoding::<T>(p, channels)?.into_data());
    }
    Tensor::new(vec![positions.len(), channels], data)
}

fn coord_width(channels: usize) -> Result<usize> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "coordinate encoding needs channels divisible by 4, got {channels}"
        )));
    }
    Ok(channels / 4)
}

/// Box coordinates `(x1, y1, x2, y2)`, each scaled by its own learned
/// `C/4`-wide row of `weights: [4, C/4]`, concatenated to a `C` vector.
pub fn coord_encoding<T: Real>(
    roi: &RoiBox,
    weights: &Tensor<T>,
    channels: usize,
) -> Result<Tensor<T>> {
    let width = coord_width(channels)?;
    if weights.shape() != [4, width] {
        return Err(Error::shape("coord_encoding", weights.shape(), &[4, width]));
    }
    let coords = [roi.x1, roi.y1, roi.x2, roi.y2];
    let mut data = Vec::with_capacity(channels);
    for (k, &c) in coords.iter().enumerate() {
        let c = T::of(c);
        data.extend(weights.row(k).iter().map(|&w| c * w));
    }
    Tensor::new(vec![channels], data)
}

/// Differentiable coordinate encodings for a list of boxes, `[N, C]`.
pub fn coord_encoding_var<T: Real>(
    g: &Graph<T>,
    rois: &[RoiBox],
    weights: Var,
    channels: usize,
) -> Result<Var> {
    let width = coord_width(channels)?;
    if g.shape(weights) != [4, width] {
        return Err(Error::shape(
            "coord_encoding",
            &g.shape(weights),
            &[4, width],
        ));
    }
    let mut parts = Vec::with_capacity(4);
    for k in 0..4 {
        let column = Tensor::from_fn(vec![rois.len(), 1], |i| {
            let r = &rois[i];
            T::of([r.x1, r.y1, r.x2, r.y2][k])
        });
        let column = g.constant(column);
        let row = g.slice_rows(weights, k, 1)?;
        parts.push(g.matmul(column, row)?);
    }
    g.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::Entity;

    fn roi(frame: usize, x1: f64, y1: f64) -> RoiBox {
        RoiBox::new(frame, x1, y1, x1 + 0.1, y1 + 0.1, Entity::Object)
    }

    #[test]
    fn temporal_then_left_to_right() {
        let rois = [roi(2, 0.5, 0.5), roi(0, 0.5, 0.5), roi(1, 0.5, 0.5)];
        assert_eq!(order_rois(&rois, Direction::LeftToRight).0, vec![2, 0, 1]);
        let same_frame = [roi(0, 0.7, 0.1), roi(0, 0.1, 0.1)];
        assert_eq!(
            order_rois(&same_frame, Direction::LeftToRight).0,
            vec![1, 0]
        );
        assert_eq!(
            order_rois(&same_frame, Direction::RightToLeft).0,
            vec![0, 1]
        );
    }

    #[test]
    fn ties_break_by_top_edge_then_input_order() {
        let rois = [roi(0, 0.2, 0.6), roi(0, 0.2, 0.1), roi(0, 0.2, 0.1)];
        assert_eq!(order_rois(&rois, Direction::LeftToRight).0, vec![2, 0, 1]);
    }

    #[test]
    fn sinusoid_values() {
        let e = sinusoidal_encoding::<f64>(0, 6).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_encoding::<f64>(1, 4).unwrap();
        assert!((e.data()[0] - 0.84147).abs() < 1e-5);
        assert!((e.data()[1] - 0.54030).abs() < 1e-5);
        assert!((e.data()[2] - (0.01f64).sin()).abs() < 1e-12);
        assert!((e.data()[3] - (0.01f64).cos()).abs() < 1e-12);
        let e0 = sinusoidal_encoding::<f64>(0, 8).unwrap();
        let e1 = sinusoidal_encoding::<f64>(1, 8).unwrap();
        assert!(e0.max_abs_diff(&e1) > 0.0);
        assert!(matches!(
            sinusoidal_encoding::<f64>(1, 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coord_encoding_cases() {
        let b = roi(0, 0.2, 0.3);
        let zeros = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(coord_encoding(&b, &zeros, 8)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let w = Tensor::<f64>::from_fn(vec![4, 2], |i| 0.3 * i as f64 - 0.4);
        let e = coord_encoding(&b, &w, 8).unwrap();
        assert_eq!(e, coord_encoding(&b, &w, 8).unwrap());
        assert!((e.data()[0] - 0.2 * -0.4).abs() < 1e-12);
        assert!((e.data()[7] - 0.4 * (0.3 * 7.0 - 0.4)).abs() < 1e-12);
        assert!(matches!(coord_encoding(&b, &w, 6), Err(Error::Config(_))));
    }

    #[test]
    fn coord_encoding_var_matches_pure() {
        let rois = [roi(0, 0.2, 0.3), roi(1, 0.6, 0.1)];
        let w = Tensor::<f64>::from_fn(vec![4, 3], |i| (i as f64).cos());
        let g = Graph::new();
        let wv = g.leaf(w.clone());
        let out = g.value(coord_encoding_var(&g, &rois, wv, 12).unwrap());
        for (i, r) in rois.iter().enumerate() {
            let row = coord_encoding(r, &w, 12).unwrap();
            assert_eq!(out.row(i), row.data());
        }
    }
}
