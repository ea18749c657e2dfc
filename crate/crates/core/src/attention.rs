//! Heat maps of where a composed embedding points inside its own image:
//! patch similarities, grid reshape, center-anchored bilinear upsampling
//! and an alpha blend toward red.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{embed, Binder, Model};
use crate::templates::format_modification;
use crate::world::ImageGrid;

/// Blend strength of the highlight color.
pub const BLEND: f64 = 0.7;
pub const HIGHLIGHT: [f64; 3] = [1.0, 0.0, 0.0];

/// Square grid of per-patch scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub side: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.side + c]
    }
}

/// Dot product of every patch row with `h`.
pub fn patch_similarity(patches: &[f32], h: &[f32]) -> Result<Vec<f64>> {
    let d = h.len();
    if d == 0 || patches.len() % d != 0 {
        return Err(Error::Contract(format!(
            "{} patch values do not split into rows of width {d}",
            patches.len()
        )));
    }
    Ok(patches
        .chunks_exact(d)
        .map(|row| row.iter().zip(h).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect())
}

pub fn to_grid(values: Vec<f64>) -> Result<Grid> {
    let side = (0..=values.len()).find(|s| s * s >= values.len()).unwrap_or(0);
    if side * side != values.len() || side == 0 {
        return Err(Error::Contract(format!("{} scores do not form a square grid", values.len())));
    }
    Ok(Grid { side, values })
}

/// Pixel holding the center of cell `p` when `n` pixels are split into
/// `cells` equal blocks.
pub fn anchor(p: usize, cells: usize, n: usize) -> usize {
    ((2 * p + 1) * n) / (2 * cells)
}

/// Per-pixel `(lower cell, upper cell, weight of upper)` along one axis.
fn axis_weights(cells: usize, n: usize) -> Vec<(usize, usize, f64)> {
    (0..n)
        .map(|x| {
            if cells == 1 || x <= anchor(0, cells, n) {
                return (0, 0, 0.0);
            }
            if x >= anchor(cells - 1, cells, n) {
                return (cells - 1, cells - 1, 0.0);
            }
            let p = (0..cells - 1).rfind(|&p| anchor(p, cells, n) <= x).unwrap_or(0);
            let (a, b) = (anchor(p, cells, n), anchor(p + 1, cells, n));
            (p, p + 1, (x - a) as f64 / (b - a) as f64)
        })
        .collect()
}

/// Exact at `a == b`, so constant grids stay constant.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear upsampling to `height x width`. Cell centers sit on their anchor
/// pixels and take the cell value exactly; pixels outside the outermost
/// anchors repeat the edge value.
pub fn interpolate(grid: &Grid, height: usize, width: usize) -> Result<Vec<f64>> {
    let p = grid.side;
    if height < p || width < p {
        return Err(Error::Contract(format!(
            "map of {height}x{width} is smaller than the {p}x{p} grid"
        )));
    }
    let ys = axis_weights(p, height);
    let xs = axis_weights(p, width);
    let mut out = Vec::with_capacity(height * width);
    for &(r0, r1, ty) in &ys {
        for &(c0, c1, tx) in &xs {
            let top = lerp(grid.get(r0, c0), grid.get(r0, c1), tx);
            let bottom = lerp(grid.get(r1, c0), grid.get(r1, c1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    Ok(out)
}

/// Min-max scaling to [0, 1]; a constant map becomes all 0.5.
pub fn normalize(map: &[f64]) -> Vec<f64> {
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return alloc::vec![0.5; map.len()];
    }
    map.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn quantize(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// RGB bytes of `image` mixed toward the highlight color by `BLEND * a`.
pub fn render_overlay(image: &ImageGrid, alpha: &[f64]) -> Result<Vec<u8>> {
    let n = image.size * image.size;
    if alpha.len() != n {
        return Err(Error::Contract(format!(
            "alpha map of {} values for a {0}x{0} image",
            image.size
        )));
    }
    let mut out = Vec::with_capacity(3 * n);
    for (i, &a) in alpha.iter().enumerate() {
        let w = BLEND * a;
        for ch in 0..3 {
            let px = image.pixels[3 * i + ch] as f64;
            out.push(quantize((1.0 - w) * px + w * HIGHLIGHT[ch]));
        }
    }
    Ok(out)
}

/// Everything produced for one (image, instruction) query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: Grid,
    /// Normalized map, `size x size`.
    pub map: Vec<f64>,
    pub size: usize,
    /// RGB overlay bytes, `size x size x 3`.
    pub overlay: Vec<u8>,
}

/// Runs the composed query once and scores its image rows against the
/// pooled embedding.
pub fn attention_map(model: &Model, image: &ImageGrid, instruction: &str, template: &str) -> Result<AttentionMap> {
    let prompt = format_modification(template, instruction)?;
    let mut tape = Tape::new();
    let mut b = Binder::frozen(model);
    let e = embed(&mut tape, &mut b, Some(image), &prompt)?;
    let d = model.config.d_model;
    let patches = &tape.value(e.hidden)[..e.image_len * d];
    let grid = to_grid(patch_similarity(patches, tape.value(e.h))?)?;
    let map = normalize(&interpolate(&grid, image.size, image.size)?);
    let overlay = render_overlay(image, &map)?;
    Ok(AttentionMap {
        grid,
        map,
        size: image.size,
        overlay,
    })
}

#[cfg(test)]
mod tests;
