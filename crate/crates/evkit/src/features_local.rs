//! Local feature extraction over a sliding patch grid.
//!
//! Both local flavors run the backbone's full classification tap g(f(·)) on
//! overlapping square patches. `sum_features` rescales the image to a fixed
//! row count preserving aspect ratio, sums the per-patch probability vectors
//! and L1-normalizes the sum to 1 — a soft bag-of-words over patch "word"
//! distributions. `full_features` rescales square and concatenates every
//! patch's vector in row-major anchor order instead.
//!
//! Patches are evaluated in parallel, but results are always combined in
//! anchor order, so outputs are bitwise reproducible.

use rayon::prelude::*;

use crate::backbone::BackboneModel;
use crate::dataset::RasterImage;
use crate::error::{Error, Result};
use crate::features_global::{FeatureKind, FeatureSpec, FeatureVector, LocalParams};

/// Top-left patch anchors on both axes; the grid is their cross product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_side: usize,
    pub stride: usize,
    pub row_anchors: Vec<usize>,
    pub col_anchors: Vec<usize>,
}

impl PatchGrid {
    /// All anchors in row-major order — the canonical patch enumeration.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.row_anchors {
            for &c in &self.col_anchors {
                out.push((r, c));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.row_anchors.len() * self.col_anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn axis_anchors(len: usize, patch_side: usize, stride: usize) -> Vec<usize> {
    let last = len - patch_side;
    let mut anchors: Vec<usize> = (0..).map(|k| k * stride).take_while(|&a| a <= last).collect();
    // Clamp a final anchor to the image edge so the grid covers the full
    // frame even when the stride leaves a remainder.
    if *anchors.last().expect("anchor 0 always fits") != last {
        anchors.push(last);
    }
    anchors
}

/// Enumerates the overlapping patch anchors for an image of `rows` × `cols`
/// pixels: multiples of `stride` up to the last position where a patch still
/// fits, plus a clamped final anchor at the edge when missing.
pub fn patch_grid(
    rows: usize,
    cols: usize,
    patch_side: usize,
    stride: usize,
) -> Result<PatchGrid> {
    if stride == 0 {
        return Err(Error::Feature("patch stride must be at least 1".into()));
    }
    if patch_side == 0 {
        return Err(Error::Feature("patch side must be at least 1".into()));
    }
    if rows < patch_side || cols < patch_side {
        return Err(Error::Feature(format!(
            "image {rows}x{cols} is smaller than the {patch_side}x{patch_side} patch"
        )));
    }
    Ok(PatchGrid {
        patch_side,
        stride,
        row_anchors: axis_anchors(rows, patch_side, stride),
        col_anchors: axis_anchors(cols, patch_side, stride),
    })
}

/// Runs the output tap on every patch of `img` (already rescaled), returning
/// one probability vector per anchor in row-major order.
fn patch_outputs(
    model: &BackboneModel,
    img: &RasterImage,
    grid: &PatchGrid,
) -> Result<Vec<Vec<f32>>> {
    if grid.patch_side != model.input_side {
        return Err(Error::Feature(format!(
            "patch side {} does not match the backbone's {}-pixel input",
            grid.patch_side, model.input_side
        )));
    }
    grid.positions()
        .par_iter()
        .map(|&(r, c)| {
            let patch = img.crop(r, c, grid.patch_side, grid.patch_side)?;
            Ok(model.extract(&patch)?.1)
        })
        .collect()
}

/// Un-normalized accumulation behind [`sum_features`]: the component-wise sum
/// of all per-patch probability vectors (in double precision, added in anchor
/// order) plus the patch count. Since each patch vector sums to ≈1, the
/// total component sum is ≈ the patch count.
pub fn patch_probability_sum(
    model: &BackboneModel,
    img: &RasterImage,
    params: &LocalParams,
) -> Result<(Vec<f64>, usize)> {
    let rescaled = img.resize_preserve_aspect(params.rescale_rows)?;
    if rescaled.cols() < params.patch_side {
        return Err(Error::Feature(format!(
            "image is too narrow for local features: {} columns after rescaling to {} rows \
             (patch needs {})",
            rescaled.cols(),
            params.rescale_rows,
            params.patch_side
        )));
    }
    let grid = patch_grid(rescaled.rows(), rescaled.cols(), params.patch_side, params.stride)?;
    let outputs = patch_outputs(model, &rescaled, &grid)?;
    let mut accum = vec![0.0f64; model.output_dim];
    for output in &outputs {
        for (a, &v) in accum.iter_mut().zip(output) {
            *a += f64::from(v);
        }
    }
    Ok((accum, grid.len()))
}

/// Bag-of-words style local features: per-patch output vectors summed and
/// L1-normalized so the components add to one. Dimension M.
pub fn sum_features(model: &BackboneModel, img: &RasterImage, stride: usize) -> Result<FeatureVector> {
    let params = LocalParams { stride, ..LocalParams::default() };
    sum_features_with(model, img, &params)
}

pub fn sum_features_with(
    model: &BackboneModel,
    img: &RasterImage,
    params: &LocalParams,
) -> Result<FeatureVector> {
    let (accum, _count) = patch_probability_sum(model, img, params)?;
    let total: f64 = accum.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Feature(format!(
            "patch probability mass must be positive, got {total}"
        )));
    }
    let values = accum.iter().map(|&v| (v / total) as f32).collect();
    let spec = FeatureSpec::local(FeatureKind::LocalSum, &model.name, *params)?;
    Ok(FeatureVector::new(spec, values))
}

/// Concatenated local features: the image resized square, per-patch output
/// vectors joined in row-major anchor order. Dimension |grid| · M (81 · M
/// with default parameters).
pub fn full_features(model: &BackboneModel, img: &RasterImage) -> Result<FeatureVector> {
    full_features_with(model, img, &LocalParams::default())
}

pub fn full_features_with(
    model: &BackboneModel,
    img: &RasterImage,
    params: &LocalParams,
) -> Result<FeatureVector> {
    let rescaled = img.resize_square(params.rescale_rows)?;
    let grid = patch_grid(rescaled.rows(), rescaled.cols(), params.patch_side, params.stride)?;
    let outputs = patch_outputs(model, &rescaled, &grid)?;
    let mut values = Vec::with_capacity(grid.len() * model.output_dim);
    for output in &outputs {
        values.extend_from_slice(output);
    }
    let spec = FeatureSpec::local(FeatureKind::LocalFull, &model.name, *params)?;
    Ok(FeatureVector::new(spec, values))
}
