//! Cross-attention and the localized attention constraint.
//!
//! A cross-attention map has one row per spatial position of the layer
//! (row-major `h x w`) and one column per prompt token slot. The constraint
//! replaces every column of a region-descriptor token by `lambda` times
//! that column, zeroed outside the text box. Nothing is renormalized
//! afterwards and the remaining columns are left untouched.

use std::collections::BTreeSet;
use std::sync::Arc;

use image::GrayImage;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryGrid, Canvas, RegionMask};

pub const DEFAULT_LAMBDA: f32 = 6.0;

/// Region-descriptor words whose tokens get constrained by default.
pub const DEFAULT_WORDLIST: [&str; 11] = [
    "sign",
    "billboard",
    "label",
    "promotions",
    "notice",
    "marquee",
    "board",
    "blackboard",
    "slogan",
    "whiteboard",
    "logo",
];

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("token index {index} out of range for {d_t} token slots")]
    TokenIndex { index: usize, d_t: usize },
    #[error("target resolution must be non-zero, got {h}x{w}")]
    ZeroResolution { h: usize, w: usize },
    #[error("lambda must be positive and finite, got {0}")]
    Lambda(f32),
    #[error("directive applies to no branch")]
    NoBranch,
    #[error("no attention records to average")]
    NoRecords,
}

/// Which networks of the backbone receive the constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Branches {
    pub unet: bool,
    pub control: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            unet: true,
            control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub wordlist: Vec<String>,
    pub lambda: f32,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            wordlist: DEFAULT_WORDLIST.iter().map(|s| s.to_string()).collect(),
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Everything a denoiser needs to constrain its cross-attention layers: the
/// text-box mask at canvas resolution, the token slots to constrain and the
/// strength.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDirective {
    pub mask: RegionMask,
    pub token_indices: BTreeSet<usize>,
    pub lambda: f32,
    pub apply_to: Branches,
}

impl AttentionDirective {
    pub fn new(
        mask: RegionMask,
        token_indices: BTreeSet<usize>,
        lambda: f32,
        apply_to: Branches,
    ) -> Result<Self, AttentionError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(AttentionError::Lambda(lambda));
        }
        if !(apply_to.unet || apply_to.control) {
            return Err(AttentionError::NoBranch);
        }
        Ok(Self {
            mask,
            token_indices,
            lambda,
            apply_to,
        })
    }

    /// Checks every constrained slot exists in a `d_t`-slot context.
    pub fn validate(&self, d_t: usize) -> Result<(), AttentionError> {
        match self.token_indices.iter().find(|&&i| i >= d_t) {
            Some(&index) => Err(AttentionError::TokenIndex { index, d_t }),
            None => Ok(()),
        }
    }

    /// Same directive with the region emptied, which suppresses the
    /// constrained tokens everywhere.
    pub fn with_empty_mask(&self) -> Self {
        Self {
            mask: RegionMask::empty(self.mask.canvas()),
            ..self.clone()
        }
    }

    /// Resizes the mask to a layer of `h x w` positions.
    pub fn for_layer(&self, h: usize, w: usize) -> Result<LayerConstraint, AttentionError> {
        Ok(LayerConstraint {
            mask: resize_mask(&self.mask, h, w)?,
            token_indices: self.token_indices.clone(),
            lambda: self.lambda,
        })
    }
}

/// A directive resolved to one layer's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConstraint {
    pub mask: Vec<bool>,
    pub token_indices: BTreeSet<usize>,
    pub lambda: f32,
}

/// Row-stochastic map of shape `[positions, token slots]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Array2<f32>,
}

impl AttentionMap {
    pub fn new(values: Array2<f32>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    pub fn positions(&self) -> usize {
        self.values.nrows()
    }

    pub fn token_slots(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, token: usize) -> ndarray::ArrayView1<'_, f32> {
        self.values.column(token)
    }
}

fn row_softmax(scores: &mut Array2<f32>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f32 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// `softmax(Q K^T / sqrt(d_k))`, optionally constrained, then multiplied
/// with `V`. Returns the attended values and the (possibly constrained) map.
pub fn cross_attention(
    q: ArrayView2<'_, f32>,
    k: ArrayView2<'_, f32>,
    v: ArrayView2<'_, f32>,
    constraint: Option<&LayerConstraint>,
) -> Result<(Array2<f32>, AttentionMap), AttentionError> {
    let d_k = q.ncols();
    if d_k == 0 {
        return Err(AttentionError::Dimension("d_k must be positive".into()));
    }
    if k.ncols() != d_k {
        return Err(AttentionError::Dimension(format!(
            "Q has d_k={d_k}, K has {}",
            k.ncols()
        )));
    }
    if v.nrows() != k.nrows() {
        return Err(AttentionError::Dimension(format!(
            "K has {} token rows, V has {}",
            k.nrows(),
            v.nrows()
        )));
    }
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|s| s / (d_k as f32).sqrt());
    row_softmax(&mut scores);
    let mut map = AttentionMap::new(scores);
    if let Some(c) = constraint {
        map = constrain_map(&map, &c.mask, &c.token_indices, c.lambda)?;
    }
    let out = map.values.dot(&v);
    Ok((out, map))
}

/// Columns in `indices` become `lambda * column` where the layer mask is set
/// and exactly zero elsewhere; all other columns are copied unchanged.
pub fn constrain_map(
    map: &AttentionMap,
    mask_layer: &[bool],
    indices: &BTreeSet<usize>,
    lambda: f32,
) -> Result<AttentionMap, AttentionError> {
    let (n, d_t) = map.values.dim();
    if mask_layer.len() != n {
        return Err(AttentionError::Dimension(format!(
            "mask has {} positions, map has {n}",
            mask_layer.len()
        )));
    }
    if let Some(&index) = indices.iter().find(|&&i| i >= d_t) {
        return Err(AttentionError::TokenIndex { index, d_t });
    }
    let mut values = map.values.clone();
    for &i in indices {
        for (v, &inside) in values.column_mut(i).iter_mut().zip(mask_layer) {
            *v = if inside { lambda * *v } else { 0.0 };
        }
    }
    Ok(AttentionMap::new(values))
}

/// Any-hit area downsampling: a target cell is set iff some source pixel
/// overlapping its footprint is set. Works for upsampling as well.
pub fn resize_mask(mask: &BinaryGrid, h: usize, w: usize) -> Result<Vec<bool>, AttentionError> {
    if h == 0 || w == 0 {
        return Err(AttentionError::ZeroResolution { h, w });
    }
    let (src_h, src_w) = (mask.height() as usize, mask.width() as usize);
    let span = |cell: usize, cells: usize, src: usize| {
        let start = cell * src / cells;
        let end = ((cell + 1) * src).div_ceil(cells);
        start..end.max(start + 1).min(src.max(1))
    };
    let mut out = vec![false; h * w];
    if src_h == 0 || src_w == 0 {
        return Ok(out);
    }
    for r in 0..h {
        let rows = span(r, h, src_h);
        for c in 0..w {
            let cols = span(c, w, src_w);
            out[r * w + c] = rows
                .clone()
                .any(|y| cols.clone().any(|x| mask.get(x as u32, y as u32)));
        }
    }
    Ok(out)
}

/// One captured cross-attention map.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: String,
    pub timestep: usize,
    pub height: usize,
    pub width: usize,
    pub map: Arc<AttentionMap>,
}

/// Mean over records of one token's attention column, upsampled (nearest)
/// to the canvas and min-max normalized to 0..255. A flat mean maps to 0.
pub fn average_heatmap(
    records: &[AttentionRecord],
    token: usize,
    canvas: Canvas,
) -> Result<GrayImage, AttentionError> {
    let first = records.first().ok_or(AttentionError::NoRecords)?;
    let d_t = first.map.token_slots();
    if token >= d_t {
        return Err(AttentionError::TokenIndex { index: token, d_t });
    }
    let (cw, ch) = (canvas.width as usize, canvas.height as usize);
    let mut acc = vec![0f64; cw * ch];
    for rec in records {
        if rec.map.token_slots() != d_t {
            return Err(AttentionError::Dimension(format!(
                "record at t={} has {} token slots, expected {d_t}",
                rec.timestep,
                rec.map.token_slots()
            )));
        }
        if rec.height * rec.width != rec.map.positions() || rec.height == 0 || rec.width == 0 {
            return Err(AttentionError::Dimension(format!(
                "record at t={} declares {}x{} but holds {} positions",
                rec.timestep,
                rec.height,
                rec.width,
                rec.map.positions()
            )));
        }
        let col = rec.map.column(token);
        for y in 0..ch {
            let sy = y * rec.height / ch;
            for x in 0..cw {
                let sx = x * rec.width / cw;
                acc[y * cw + x] += f64::from(col[sy * rec.width + sx]);
            }
        }
    }
    let n = records.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    let (lo, hi) = acc
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let pixels = acc
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok(GrayImage::from_raw(canvas.width, canvas.height, pixels).expect("sized above"))
}

/// Column sums of the map, handy for checking row-stochasticity.
pub fn row_sums(map: &AttentionMap) -> Vec<f32> {
    map.values.sum_axis(Axis(1)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{make_region_mask, BBox};
    use ndarray::array;

    fn idx(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn single_token_attends_fully() {
        let q = array![[0.0f32]];
        let k = array![[0.0f32]];
        let v = array![[3.5f32, -1.0]];
        let (out, map) = cross_attention(q.view(), k.view(), v.view(), None).unwrap();
        assert_eq!(map.values(), &array![[1.0f32]]);
        assert_eq!(out, v);
    }

    #[test]
    fn identical_keys_give_uniform_rows() {
        let q = array![[0.3f32, -1.2], [2.0, 0.5], [-0.7, 0.1]];
        let k = array![[1.0f32, 2.0], [1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let v = Array2::<f32>::ones((4, 3));
        let (_, map) = cross_attention(q.view(), k.view(), v.view(), None).unwrap();
        for &p in map.values() {
            assert!((p - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn random_rows_sum_to_one() {
        let q = array![[0.1f32, 0.9], [-1.3, 0.2], [2.2, -0.4], [0.0, 1.7]];
        let k = array![[0.5f32, -0.5], [1.5, 0.3], [-2.0, 1.0]];
        let v = Array2::<f32>::eye(3);
        let (_, map) = cross_attention(q.view(), k.view(), v.view(), None).unwrap();
        for s in row_sums(&map) {
            assert!((s - 1.0).abs() <= 1e-6, "{s}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let q = Array2::<f32>::zeros((2, 3));
        let k = Array2::<f32>::zeros((4, 2));
        let v = Array2::<f32>::zeros((4, 1));
        assert!(matches!(
            cross_attention(q.view(), k.view(), v.view(), None),
            Err(AttentionError::Dimension(_))
        ));
        let k = Array2::<f32>::zeros((4, 3));
        let v = Array2::<f32>::zeros((5, 1));
        assert!(cross_attention(q.view(), k.view(), v.view(), None).is_err());
    }

    #[test]
    fn constrain_example_row() {
        let map = AttentionMap::new(array![[0.2f32, 0.3, 0.5]]);
        let out = constrain_map(&map, &[true], &idx(&[2]), 6.0).unwrap();
        assert_eq!(out.values(), &array![[0.2f32, 0.3, 3.0]]);
    }

    #[test]
    fn constrain_identity_and_zero_mask() {
        let map = AttentionMap::new(array![[0.1f32, 0.6, 0.3], [0.25, 0.25, 0.5]]);
        let same = constrain_map(&map, &[true, true], &idx(&[0, 1, 2]), 1.0).unwrap();
        assert_eq!(same, map);
        let zeroed = constrain_map(&map, &[false, false], &idx(&[1]), 6.0).unwrap();
        assert_eq!(zeroed.values().column(1).to_vec(), vec![0.0, 0.0]);
        assert_eq!(zeroed.values().column(0), map.values().column(0));
        assert_eq!(zeroed.values().column(2), map.values().column(2));
    }

    #[test]
    fn constrain_rejects_bad_inputs() {
        let map = AttentionMap::new(array![[0.5f32, 0.5]]);
        assert_eq!(
            constrain_map(&map, &[true], &idx(&[2]), 6.0).unwrap_err(),
            AttentionError::TokenIndex { index: 2, d_t: 2 }
        );
        assert!(constrain_map(&map, &[true, false], &idx(&[0]), 6.0).is_err());
    }

    #[test]
    fn resize_full_empty_and_aligned_box() {
        let c = Canvas::new(512, 512);
        let full = BinaryGrid::filled(512, 512, true);
        assert!(resize_mask(&full, 7, 13).unwrap().iter().all(|&b| b));
        let empty = BinaryGrid::new(512, 512);
        assert!(resize_mask(&empty, 64, 64).unwrap().iter().all(|&b| !b));

        let mask = make_region_mask(BBox::new(64, 64, 128, 128), c).unwrap();
        let small = resize_mask(&mask, 64, 64).unwrap();
        for r in 0..64 {
            for col in 0..64 {
                let expected = (8..=23).contains(&r) && (8..=23).contains(&col);
                assert_eq!(small[r * 64 + col], expected, "cell {r},{col}");
            }
        }
        assert!(resize_mask(&mask, 0, 4).is_err());
    }

    #[test]
    fn resize_unaligned_footprint_is_any_hit() {
        // 10 px source row into 3 cells: footprints [0,3.33) [3.33,6.67) [6.67,10)
        let mut g = BinaryGrid::new(10, 1);
        g.set(3, 0, true);
        assert_eq!(resize_mask(&g, 1, 3).unwrap(), vec![true, true, false]);
        // upsampling repeats
        let mut g = BinaryGrid::new(2, 1);
        g.set(1, 0, true);
        assert_eq!(resize_mask(&g, 1, 4).unwrap(), vec![false, false, true, true]);
    }

    #[test]
    fn directive_checks() {
        let mask = RegionMask::empty(Canvas::new(8, 8));
        assert_eq!(
            AttentionDirective::new(mask.clone(), idx(&[1]), 0.0, Branches::default()).unwrap_err(),
            AttentionError::Lambda(0.0)
        );
        assert_eq!(
            AttentionDirective::new(
                mask.clone(),
                idx(&[1]),
                6.0,
                Branches {
                    unet: false,
                    control: false
                }
            )
            .unwrap_err(),
            AttentionError::NoBranch
        );
        let d = AttentionDirective::new(mask, idx(&[1, 4]), 6.0, Branches::default()).unwrap();
        assert!(d.validate(5).is_ok());
        assert!(d.validate(4).is_err());
    }

    fn record(h: usize, w: usize, column: Vec<f32>) -> AttentionRecord {
        let mut values = Array2::<f32>::zeros((h * w, 2));
        for (i, v) in column.into_iter().enumerate() {
            values[[i, 1]] = v;
            values[[i, 0]] = 1.0 - v;
        }
        AttentionRecord {
            layer: "l".into(),
            timestep: 1,
            height: h,
            width: w,
            map: Arc::new(AttentionMap::new(values)),
        }
    }

    #[test]
    fn heatmap_uniform_and_idempotent() {
        let c = Canvas::new(8, 8);
        let flat = average_heatmap(&[record(2, 2, vec![0.3; 4])], 1, c).unwrap();
        assert!(flat.as_raw().iter().all(|&p| p == flat.as_raw()[0]));
        let r = record(2, 2, vec![0.1, 0.7, 0.2, 0.4]);
        let one = average_heatmap(std::slice::from_ref(&r), 1, c).unwrap();
        let two = average_heatmap(&[r.clone(), r], 1, c).unwrap();
        assert_eq!(one, two);
        assert_eq!(average_heatmap(&[], 0, c).unwrap_err(), AttentionError::NoRecords);
    }

    #[test]
    fn heatmap_support_follows_mask() {
        let c = Canvas::new(16, 16);
        let mask = [false, true, false, false, true, true, false, false, false];
        let col = mask.iter().map(|&m| if m { 0.8 } else { 0.0 }).collect();
        let img = average_heatmap(&[record(3, 3, col)], 1, c).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let cell = (y * 3 / 16) * 3 + x * 3 / 16;
                assert_eq!(img.get_pixel(x as u32, y as u32)[0] > 0, mask[cell]);
            }
        }
    }
}
