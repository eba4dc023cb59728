//! Toroidal activation field and its binary/PNG encodings.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// A 2-D activation field `A ∈ [0,1]^{H×W}` on a torus, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width} = {} cells", height * width),
                got: format!("{} cells", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at a signed coordinate, wrapped onto the torus.
    #[inline]
    pub fn get_wrapped(&self, y: isize, x: isize) -> f64 {
        let h = self.height as isize;
        let w = self.width as isize;
        self.data[(y.rem_euclid(h) * w + x.rem_euclid(w)) as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Cyclic shift: the value at `(y, x)` moves to `(y + dy, x + dx)`.
    pub fn shifted(&self, dy: isize, dx: isize) -> Grid {
        Grid::from_fn(self.height, self.width, |y, x| {
            self.get_wrapped(y as isize - dy, x as isize - dx)
        })
    }

    /// Rotation by 90° counter-clockwise.
    pub fn rotated90(&self) -> Grid {
        let (h, w) = self.shape();
        Grid::from_fn(w, h, |y, x| self.get(x, w - 1 - y))
    }

    pub fn flipped_horizontal(&self) -> Grid {
        let w = self.width;
        Grid::from_fn(self.height, w, |y, x| self.get(y, w - 1 - x))
    }

    pub fn flipped_vertical(&self) -> Grid {
        let h = self.height;
        Grid::from_fn(h, self.width, |y, x| self.get(h - 1 - y, x))
    }

    /// Average-pools by an integer factor in both axes.
    pub fn pooled(&self, factor: usize) -> Result<Grid> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("dimensions divisible by {factor}"),
                got: format!("{}x{}", self.height, self.width),
            });
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = vec![0.0; h * w];
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            let orow = &mut out[(y / factor) * w..(y / factor + 1) * w];
            for (x, v) in row.iter().enumerate() {
                orow[x / factor] += v;
            }
        }
        let norm = 1.0 / (factor * factor) as f64;
        out.iter_mut().for_each(|v| *v *= norm);
        Ok(Grid { height: h, width: w, data: out })
    }

    /// Rounds every value to the nearest `f32`; the stored pattern format.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_f32_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Grid> {
        if bytes.len() != 4 * height * width {
            return Err(Error::Format(format!(
                "pattern blob has {} bytes, expected {}",
                bytes.len(),
                4 * height * width
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Grid { height, width, data })
    }

    /// File name carrying the dimensions, e.g. `pattern_256x256.f32`.
    pub fn blob_name(&self, stem: &str) -> String {
        format!("{stem}_{}x{}.f32", self.height, self.width)
    }

    /// 8-bit grayscale PNG with `value = round(255·a)`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.encode_png(&mut buf)?;
        buf.flush()?;
        Ok(())
    }

    pub fn encode_png<W: Write>(&self, out: W) -> Result<()> {
        let mut enc = png::Encoder::new(out, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect();
        writer.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
        Ok(())
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_png(&mut out)?;
        Ok(out)
    }

    pub fn read_png(path: &Path) -> Result<Grid> {
        let file = std::fs::File::open(path)?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Format("expected 8-bit grayscale PNG".into()));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let data = buf[..w * h].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Grid { height: h, width: w, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Grid {
        Grid::from_fn(h, w, |y, x| ((y * w + x) as f64) / (h * w) as f64)
    }

    #[test]
    fn shift_wraps_and_inverts() {
        let g = ramp(5, 7);
        let s = g.shifted(2, -3);
        assert_eq!(s.get(2, 4), g.get(0, 0));
        assert_eq!(s.shifted(-2, 3), g);
    }

    #[test]
    fn rotation_four_times_is_identity() {
        let g = ramp(4, 6);
        let r = g.rotated90();
        assert_eq!(r.shape(), (6, 4));
        assert_eq!(r.rotated90().rotated90().rotated90(), g);
    }

    #[test]
    fn pooling_preserves_mean() {
        let g = ramp(8, 8);
        let p = g.pooled(4).unwrap();
        assert_eq!(p.shape(), (2, 2));
        assert!((p.sum() / 4.0 - g.sum() / 64.0).abs() < 1e-12);
        assert!(g.pooled(3).is_err());
    }

    #[test]
    fn f32_blob_is_four_bytes_per_cell() {
        let mut g = ramp(3, 5);
        g.quantize_f32();
        let bytes = g.to_f32_bytes();
        assert_eq!(bytes.len(), 4 * 15);
        assert_eq!(Grid::from_f32_bytes(3, 5, &bytes).unwrap(), g);
        assert_eq!(g.blob_name("pattern"), "pattern_3x5.f32");
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let g = ramp(9, 11);
        let path = dir.path().join("g.png");
        g.write_png(&path).unwrap();
        let back = Grid::read_png(&path).unwrap();
        assert!(g.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
    }
}
