//! Thin real-FFT wrapper over rustfft: one-sided spectra of real frames.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct RealFft {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl RealFft {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        RealFft {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n / 2 + 1
    }

    /// DFT of a real frame, bins `0..n/2+1`, unnormalized.
    pub fn forward(&self, frame: &[f64]) -> Vec<Complex64> {
        assert_eq!(frame.len(), self.n);
        let mut buf: Vec<Complex64> = frame.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf.truncate(self.n_bins());
        buf
    }

    /// Inverse DFT from a one-sided spectrum, assuming conjugate symmetry.
    /// Output is normalized by `1/n` so `inverse(forward(x)) == x`.
    pub fn inverse(&self, bins: &[Complex64]) -> Vec<f64> {
        assert_eq!(bins.len(), self.n_bins());
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n];
        buf[..bins.len()].copy_from_slice(bins);
        for k in 1..self.n - self.n / 2 {
            buf[self.n - k] = bins[k].conj();
        }
        self.inv.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.into_iter().map(|c| c.re * scale).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_recovers_real_frame() {
        let n = 64;
        let fft = RealFft::new(n);
        let frame: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 13) as f64 / 13.0 - 0.4).collect();
        let back = fft.inverse(&fft.forward(&frame));
        for (a, b) in frame.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_bin_sine_lands_in_one_bin() {
        let n = 128;
        let fft = RealFft::new(n);
        let k = 9;
        let frame: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * k as f64 * i as f64 / n as f64).sin())
            .collect();
        let bins = fft.forward(&frame);
        for (j, b) in bins.iter().enumerate() {
            let mag = b.norm();
            if j == k {
                assert!((mag - n as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(mag < 1e-9, "leakage at bin {j}: {mag}");
            }
        }
    }
}
