//! Two-dimensional real FFT used for toroidal convolution.
//!
//! The half spectrum (`h × (w/2 + 1)` bins) is stored column-major so the
//! column transforms run on contiguous memory.

use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub type C64 = Complex<f64>;

#[derive(Clone)]
pub struct RealFft2 {
    height: usize,
    width: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// Reusable buffers for [`RealFft2`].
pub struct Fft2Scratch {
    row_real: Vec<f64>,
    row_cplx: Vec<C64>,
    fft_scratch: Vec<C64>,
}

impl RealFft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut rp = RealFftPlanner::<f64>::new();
        let mut cp = FftPlanner::<f64>::new();
        Self {
            height,
            width,
            r2c: rp.plan_fft_forward(width),
            c2r: rp.plan_fft_inverse(width),
            col_fwd: cp.plan_fft_forward(height),
            col_inv: cp.plan_fft_inverse(height),
        }
    }

    pub fn half_width(&self) -> usize {
        self.width / 2 + 1
    }

    pub fn spectrum_len(&self) -> usize {
        self.height * self.half_width()
    }

    pub fn scratch(&self) -> Fft2Scratch {
        let n = [
            self.r2c.get_scratch_len(),
            self.c2r.get_scratch_len(),
            self.col_fwd.get_inplace_scratch_len(),
            self.col_inv.get_inplace_scratch_len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        Fft2Scratch {
            row_real: vec![0.0; self.width],
            row_cplx: vec![C64::new(0.0, 0.0); self.half_width()],
            fft_scratch: vec![C64::new(0.0, 0.0); n],
        }
    }

    /// Unnormalized forward transform of a row-major real field.
    pub fn forward(&self, input: &[f64], spec: &mut [C64], s: &mut Fft2Scratch) {
        let (h, w, hw) = (self.height, self.width, self.half_width());
        debug_assert_eq!(input.len(), h * w);
        debug_assert_eq!(spec.len(), h * hw);
        for i in 0..h {
            s.row_real.copy_from_slice(&input[i * w..(i + 1) * w]);
            self.r2c
                .process_with_scratch(&mut s.row_real, &mut s.row_cplx, &mut s.fft_scratch)
                .expect("row transform sizes are fixed at plan time");
            for (j, c) in s.row_cplx.iter().enumerate() {
                spec[j * h + i] = *c;
            }
        }
        for col in spec.chunks_exact_mut(h) {
            self.col_fwd.process_with_scratch(col, &mut s.fft_scratch);
        }
    }

    /// Inverse transform, normalized so `inverse(forward(x)) == x`.
    /// `spec` is consumed as workspace.
    pub fn inverse(&self, spec: &mut [C64], out: &mut [f64], s: &mut Fft2Scratch) {
        let (h, w, hw) = (self.height, self.width, self.half_width());
        for col in spec.chunks_exact_mut(h) {
            self.col_inv.process_with_scratch(col, &mut s.fft_scratch);
        }
        let norm = 1.0 / (h * w) as f64;
        for i in 0..h {
            for j in 0..hw {
                s.row_cplx[j] = spec[j * h + i];
            }
            s.row_cplx[0].im = 0.0;
            if w % 2 == 0 {
                s.row_cplx[hw - 1].im = 0.0;
            }
            self.c2r
                .process_with_scratch(&mut s.row_cplx, &mut s.row_real, &mut s.fft_scratch)
                .expect("DC and Nyquist imaginary parts are zeroed");
            for (o, v) in out[i * w..(i + 1) * w].iter_mut().zip(&s.row_real) {
                *o = v * norm;
            }
        }
    }
}

/// Full complex 2-D DFT (unnormalized), row-major in and out.
pub fn dft2_full(input: &[f64], height: usize, width: usize) -> Vec<C64> {
    let mut planner = FftPlanner::<f64>::new();
    let row = planner.plan_fft_forward(width);
    let col = planner.plan_fft_forward(height);
    let mut data: Vec<C64> = input.iter().map(|&v| C64::new(v, 0.0)).collect();
    for r in data.chunks_exact_mut(width) {
        row.process(r);
    }
    let mut column = vec![C64::new(0.0, 0.0); height];
    for j in 0..width {
        for i in 0..height {
            column[i] = data[i * width + j];
        }
        col.process(&mut column);
        for i in 0..height {
            data[i * width + j] = column[i];
        }
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_recovers_input() {
        for &(h, w) in &[(8, 8), (6, 10), (5, 7)] {
            let fft = RealFft2::new(h, w);
            let mut s = fft.scratch();
            let x: Vec<f64> = (0..h * w).map(|i| ((i * 37 % 11) as f64).sin()).collect();
            let mut spec = vec![C64::new(0.0, 0.0); fft.spectrum_len()];
            fft.forward(&x, &mut spec, &mut s);
            let mut back = vec![0.0; h * w];
            fft.inverse(&mut spec, &mut back, &mut s);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_spectrum_matches_full_dft() {
        let (h, w) = (6, 8);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let fft = RealFft2::new(h, w);
        let mut s = fft.scratch();
        let mut spec = vec![C64::new(0.0, 0.0); fft.spectrum_len()];
        fft.forward(&x, &mut spec, &mut s);
        let full = dft2_full(&x, h, w);
        for i in 0..h {
            for j in 0..fft.half_width() {
                assert!((spec[j * h + i] - full[i * w + j]).norm() < 1e-10);
            }
        }
    }
}
