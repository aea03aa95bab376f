use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
}

impl WindowKind {
    pub fn build(self, n: usize) -> Result<Vec<f64>> {
        match self {
            WindowKind::Hann => hann_window(n),
        }
    }
}

/// Framing parameters. Defaults are 32 ms frames, 8 ms hop and a 512-point
/// FFT at 16 kHz, which yields 257-bin one-sided spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len: 512,
            hop: 128,
            fft_size: 512,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if self.frame_len < 2 || self.hop == 0 {
            return Err(Error::invalid("frame_len must be >= 2 and hop >= 1"));
        }
        if self.frame_len != self.fft_size {
            return Err(Error::invalid(format!(
                "frame_len ({}) must equal fft_size ({})",
                self.frame_len, self.fft_size
            )));
        }
        if self.frame_len % self.hop != 0 {
            return Err(Error::invalid(format!(
                "hop ({}) must divide frame_len ({})",
                self.hop, self.frame_len
            )));
        }
        let w = self.window.build(self.frame_len)?;
        let sums: Vec<f64> = (0..self.hop)
            .map(|k| w.iter().skip(k).step_by(self.hop).sum())
            .collect();
        let (lo, hi) = sums
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if hi - lo > 1e-9 * hi.abs().max(1.0) {
            return Err(Error::invalid(format!(
                "window is not constant-overlap-add at hop {}",
                self.hop
            )));
        }
        Ok(())
    }

    /// One-sided spectrum size, `fft_size / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Zeros prepended before framing so that the first sample is seen by
    /// `frame_len / hop` frames, exactly like every other sample.
    pub fn front_pad(&self) -> usize {
        self.frame_len - self.hop
    }

    /// Frame count for a signal of `len` samples (`len >= frame_len`).
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + self.front_pad();
        (padded - self.frame_len).div_ceil(self.hop) + 1
    }
}

/// One-sided complex spectrogram split into magnitude and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct StftFrames {
    /// `[n_frames, n_bins]`, non-negative.
    pub magnitude: Array2<f64>,
    /// `[n_frames, n_bins]`, radians in (-pi, pi].
    pub phase: Array2<f64>,
    pub config: StftConfig,
    pub original_length: usize,
}

impl StftFrames {
    pub fn n_frames(&self) -> usize {
        self.magnitude.nrows()
    }
}

/// Periodic Hann window `0.5 - 0.5 cos(2 pi k / n)`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("window length {n} < 2")));
    }
    Ok((0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect())
}

/// Short-time Fourier transform.
///
/// The signal is padded with `frame_len - hop` zeros in front and with zeros
/// at the tail so every sample is covered; frame `t` starts at padded sample
/// `t * hop`.
pub fn stft(signal: &[f64], config: &StftConfig) -> Result<StftFrames> {
    config.validate()?;
    if signal.len() < config.frame_len {
        return Err(Error::invalid(format!(
            "signal has {} samples, need at least {}",
            signal.len(),
            config.frame_len
        )));
    }
    let n = config.fft_size;
    let n_bins = config.n_bins();
    let n_frames = config.n_frames(signal.len());
    let pad = config.front_pad();
    let window = config.window.build(config.frame_len)?;

    let mut padded = vec![0.0; (n_frames - 1) * config.hop + config.frame_len];
    padded[pad..pad + signal.len()].copy_from_slice(signal);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut magnitude = Array2::zeros((n_frames, n_bins));
    let mut phase = Array2::zeros((n_frames, n_bins));
    for t in 0..n_frames {
        let start = t * config.hop;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + k] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            let c = buf[k];
            magnitude[[t, k]] = c.norm();
            let mut p = c.im.atan2(c.re);
            if p <= -PI {
                p = PI;
            }
            phase[[t, k]] = p;
        }
    }
    Ok(StftFrames {
        magnitude,
        phase,
        config: *config,
        original_length: signal.len(),
    })
}

/// Weighted overlap-add synthesis with squared-window normalization,
/// truncated to the analysed signal's length.
pub fn istft(frames: &StftFrames) -> Result<Vec<f64>> {
    let config = &frames.config;
    config.validate()?;
    let n = config.fft_size;
    let n_bins = config.n_bins();
    let (n_frames, cols) = frames.magnitude.dim();
    if frames.phase.dim() != (n_frames, cols) {
        return Err(Error::invalid(format!(
            "magnitude {:?} and phase {:?} shapes differ",
            frames.magnitude.dim(),
            frames.phase.dim()
        )));
    }
    if cols != n_bins {
        return Err(Error::invalid(format!("expected {n_bins} bins, got {cols}")));
    }
    if frames.original_length < config.frame_len
        || n_frames != config.n_frames(frames.original_length)
    {
        return Err(Error::invalid(format!(
            "{n_frames} frames inconsistent with original length {}",
            frames.original_length
        )));
    }

    let window = config.window.build(config.frame_len)?;
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let total = (n_frames - 1) * config.hop + config.frame_len;
    let mut out = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let scale = 1.0 / n as f64;
    for t in 0..n_frames {
        for k in 0..n_bins {
            buf[k] = Complex64::from_polar(frames.magnitude[[t, k]], frames.phase[[t, k]]);
        }
        // Hermitian symmetry for a real output.
        for k in n_bins..n {
            buf[k] = buf[n - k].conj();
        }
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * config.hop;
        for k in 0..config.frame_len {
            out[start + k] += buf[k].re * scale * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    let pad = config.front_pad();
    Ok(out[pad..pad + frames.original_length]
        .iter()
        .zip(&norm[pad..pad + frames.original_length])
        .map(|(&y, &w)| if w > 1e-12 { y / w } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn hann_closed_form() {
        let w = hann_window(4).unwrap();
        for (a, b) in w.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let sum: f64 = hann_window(512).unwrap().iter().sum();
        assert_abs_diff_eq!(sum, 256.0, epsilon = 1e-9);
        assert!(hann_window(1).is_err());
    }

    #[test]
    fn hann_overlap_add_is_constant() {
        // Brute-force sum of shifted windows over 8 frames.
        let w = hann_window(512).unwrap();
        let mut acc = vec![0.0; 7 * 128 + 512];
        for t in 0..8 {
            for k in 0..512 {
                acc[t * 128 + k] += w[k];
            }
        }
        for v in &acc[512..7 * 128] {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::default().validate().is_ok());
        let bad = StftConfig { fft_size: 1024, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = StftConfig { hop: 100, ..Default::default() };
        assert!(bad.validate().is_err());
        let c = StftConfig::default();
        assert_eq!(c.frame_len as f64 / c.sample_rate as f64, 0.032);
    }

    #[test]
    fn constant_signal_dc_bin_equals_window_sum() {
        let x = vec![1.0; 4000];
        let f = stft(&x, &StftConfig::default()).unwrap();
        for t in 3..f.n_frames() - 4 {
            assert_abs_diff_eq!(f.magnitude[[t, 0]], 256.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn bin_centred_sine_peaks_at_half_window_sum() {
        let k = 40;
        let x: Vec<f64> = (0..8000)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / 512.0).sin())
            .collect();
        let f = stft(&x, &StftConfig::default()).unwrap();
        let t = f.n_frames() / 2;
        let row = f.magnitude.row(t);
        assert_abs_diff_eq!(row[k], 128.0, epsilon = 1e-6);
        // Hann leaks only into the immediate neighbours.
        assert_abs_diff_eq!(row[k - 1], 64.0, epsilon = 1e-6);
        assert!(row[k + 3] < 1e-6);
    }

    #[test]
    fn zero_signal_zero_spectrum_and_back() {
        let f = stft(&[0.0; 1000], &StftConfig::default()).unwrap();
        assert!(f.magnitude.iter().all(|&m| m == 0.0));
        assert!(istft(&f).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frame_count_and_phase_range() {
        let c = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [512usize, 513, 640, 1000, 32768, 32769] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = stft(&x, &c).unwrap();
            assert_eq!(f.n_frames(), len.div_ceil(c.hop));
            assert_eq!(f.magnitude.ncols(), 257);
            assert!(f.phase.iter().all(|&p| p > -PI && p <= PI));
        }
        assert!(stft(&[0.0; 511], &c).is_err());
    }

    #[test]
    fn round_trip_noise_and_length_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = istft(&stft(&x, &StftConfig::default()).unwrap()).unwrap();
        assert!(rel_err(&y, &x) <= 1e-6);

        let chirp: Vec<f64> = (0..16411)
            .map(|n| {
                let t = n as f64 / 16000.0;
                (2.0 * PI * (100.0 * t + 2000.0 * t * t)).sin()
            })
            .collect();
        let y = istft(&stft(&chirp, &StftConfig::default()).unwrap()).unwrap();
        assert_eq!(y.len(), chirp.len());
    }

    #[test]
    fn parseval_on_stationary_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = StftConfig::default();
        let x: Vec<f64> = (0..16000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = stft(&x, &c).unwrap();
        let mut spectral = 0.0;
        for t in 0..f.n_frames() {
            for k in 0..257 {
                let m2 = f.magnitude[[t, k]].powi(2);
                spectral += if k == 0 || k == 256 { m2 } else { 2.0 * m2 };
            }
        }
        // Window-weighted energy computed independently on the padded signal.
        let w = hann_window(512).unwrap();
        let mut padded = vec![0.0; (f.n_frames() - 1) * 128 + 512];
        padded[384..384 + x.len()].copy_from_slice(&x);
        let mut weighted = 0.0;
        for t in 0..f.n_frames() {
            for k in 0..512 {
                weighted += (padded[t * 128 + k] * w[k]).powi(2);
            }
        }
        weighted *= 512.0;
        assert!((spectral - weighted).abs() / weighted < 0.01);
    }

    #[test]
    fn istft_rejects_inconsistent_frames() {
        let f = stft(&[0.5; 2000], &StftConfig::default()).unwrap();
        let mut bad = f.clone();
        bad.original_length = 9000;
        assert!(istft(&bad).is_err());
        let mut bad = f.clone();
        bad.phase = Array2::zeros((3, 257));
        assert!(istft(&bad).is_err());
    }
}
