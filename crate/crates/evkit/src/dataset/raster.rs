//! In-memory RGB raster with the two resize primitives shared by both
//! feature paths.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    rows: usize,
    cols: usize,
    pixels: Vec<f32>,
}

impl RasterImage {
    pub const CHANNELS: usize = 3;

    pub fn new(rows: usize, cols: usize, pixels: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Raster(format!("degenerate size {rows}x{cols}")));
        }
        if pixels.len() != rows * cols * Self::CHANNELS {
            return Err(Error::Raster(format!(
                "pixel buffer length {} != {}x{}x{}",
                pixels.len(),
                rows,
                cols,
                Self::CHANNELS
            )));
        }
        Ok(Self { rows, cols, pixels })
    }

    /// Decodes a PNG or JPEG file. Grayscale inputs are channel-replicated to
    /// RGB and alpha channels are dropped; intensities are scaled to `[0, 1]`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, pixels)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.cols + col) * Self::CHANNELS + ch]
    }

    /// Rescales to `target_rows` rows, preserving aspect ratio. The column
    /// count is `round(cols * target_rows / rows)`, never below 1.
    pub fn resize_preserve_aspect(&self, target_rows: usize) -> Result<Self> {
        if target_rows == 0 {
            return Err(Error::Raster("target_rows must be >= 1".into()));
        }
        let target_cols =
            ((self.cols as f64 * target_rows as f64 / self.rows as f64).round() as usize).max(1);
        Ok(self.resize_bilinear(target_rows, target_cols))
    }

    /// Rescales to `side x side`, not preserving aspect ratio.
    pub fn resize_square(&self, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::Raster("side must be >= 1".into()));
        }
        Ok(self.resize_bilinear(side, side))
    }

    /// Bilinear resampling with half-pixel centers: source coordinate for
    /// destination index d is `(d + 0.5) * len / out_len - 0.5`, clamped.
    /// When the output size equals the input size this is an exact copy.
    fn resize_bilinear(&self, out_rows: usize, out_cols: usize) -> Self {
        if out_rows == self.rows && out_cols == self.cols {
            return self.clone();
        }
        let row_scale = self.rows as f64 / out_rows as f64;
        let col_scale = self.cols as f64 / out_cols as f64;
        let mut pixels = vec![0f32; out_rows * out_cols * Self::CHANNELS];
        for r in 0..out_rows {
            let src_r = ((r as f64 + 0.5) * row_scale - 0.5).max(0.0);
            let r0 = (src_r.floor() as usize).min(self.rows - 1);
            let r1 = (r0 + 1).min(self.rows - 1);
            let fr = (src_r - r0 as f64) as f32;
            for c in 0..out_cols {
                let src_c = ((c as f64 + 0.5) * col_scale - 0.5).max(0.0);
                let c0 = (src_c.floor() as usize).min(self.cols - 1);
                let c1 = (c0 + 1).min(self.cols - 1);
                let fc = (src_c - c0 as f64) as f32;
                for ch in 0..Self::CHANNELS {
                    let top = self.get(r0, c0, ch) * (1.0 - fc) + self.get(r0, c1, ch) * fc;
                    let bot = self.get(r1, c0, ch) * (1.0 - fc) + self.get(r1, c1, ch) * fc;
                    pixels[(r * out_cols + c) * Self::CHANNELS + ch] =
                        top * (1.0 - fr) + bot * fr;
                }
            }
        }
        Self {
            rows: out_rows,
            cols: out_cols,
            pixels,
        }
    }

    /// Copies the `rows x cols` window whose top-left corner is `(r0, c0)`.
    pub fn crop(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Self> {
        if r0 + rows > self.rows || c0 + cols > self.cols {
            return Err(Error::Raster(format!(
                "crop {rows}x{cols}@({r0},{c0}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut pixels = Vec::with_capacity(rows * cols * Self::CHANNELS);
        for r in r0..r0 + rows {
            let start = (r * self.cols + c0) * Self::CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + cols * Self::CHANNELS]);
        }
        Ok(Self { rows, cols, pixels })
    }

    /// Encodes as PNG. Used by the synthetic-corpus generator and handy for
    /// dumping intermediate crops while debugging.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.cols as u32, self.rows as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(rows: usize, cols: usize) -> RasterImage {
        let mut pixels = Vec::with_capacity(rows * cols * 3);
        for r in 0..rows {
            for c in 0..cols {
                pixels.push(r as f32 / rows as f32);
                pixels.push(c as f32 / cols as f32);
                pixels.push(((r + c) % 7) as f32 / 7.0);
            }
        }
        RasterImage::new(rows, cols, pixels).unwrap()
    }

    #[test]
    fn preserve_aspect_exact_half() {
        let img = gradient_image(2240, 3360);
        let out = img.resize_preserve_aspect(1120).unwrap();
        assert_eq!((out.rows(), out.cols()), (1120, 1680));
    }

    #[test]
    fn preserve_aspect_identity_is_bytewise() {
        let img = gradient_image(1120, 900);
        let out = img.resize_preserve_aspect(1120).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn preserve_aspect_rounding() {
        // round(1500 * 1120 / 1000) = 1680
        let img = gradient_image(1000, 1500);
        let out = img.resize_preserve_aspect(1120).unwrap();
        assert_eq!((out.rows(), out.cols()), (1120, 1680));
    }

    #[test]
    fn square_resize_shapes() {
        let img = gradient_image(50, 300);
        let out = img.resize_square(1120).unwrap();
        assert_eq!((out.rows(), out.cols()), (1120, 1120));
        let small = gradient_image(37, 91).resize_square(224).unwrap();
        assert_eq!((small.rows(), small.cols()), (224, 224));
    }

    #[test]
    fn square_identity_is_bytewise() {
        let img = gradient_image(1120, 1120);
        let out = img.resize_square(1120).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn resize_deterministic() {
        let img = gradient_image(123, 77);
        let a = img.resize_square(64).unwrap();
        let b = img.resize_square(64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aspect_ratio_error_bounded() {
        for (rows, cols) in [(480usize, 640usize), (1080, 1920), (333, 1000), (2000, 900)] {
            let img = gradient_image(rows, cols);
            let out = img.resize_preserve_aspect(160).unwrap();
            let src_ratio = cols as f64 / rows as f64;
            let out_ratio = out.cols() as f64 / out.rows() as f64;
            assert!(
                (out_ratio - src_ratio).abs() < 1.0 / 160.0,
                "ratio drift too large for {rows}x{cols}"
            );
        }
    }

    #[test]
    fn crop_matches_source() {
        let img = gradient_image(32, 48);
        let crop = img.crop(4, 10, 8, 8).unwrap();
        assert_eq!(crop.get(0, 0, 1), img.get(4, 10, 1));
        assert_eq!(crop.get(7, 7, 2), img.get(11, 17, 2));
        assert!(img.crop(30, 0, 8, 8).is_err());
    }
}
