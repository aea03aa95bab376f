//! Extended short-time objective intelligibility.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{resample, ResampleQuality};
use crate::{Error, Result};

/// Every constant of the measure, in one place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstoiConstants {
    /// Internal sample rate both signals are resampled to.
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub n_bands: usize,
    /// Centre of the lowest one-third-octave band, Hz.
    pub min_freq: f64,
    /// Frames per intermediate-intelligibility segment.
    pub segment_frames: usize,
    /// Frames quieter than the loudest clean frame by more than this are dropped.
    pub dynamic_range_db: f64,
}

pub const ESTOI: EstoiConstants = EstoiConstants {
    sample_rate: 10_000,
    frame_len: 256,
    hop: 128,
    fft_size: 512,
    n_bands: 15,
    min_freq: 150.0,
    segment_frames: 30,
    dynamic_range_db: 40.0,
};

/// Guards norms and logarithms against exact zeros.
const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstoiScore {
    /// Clamped to [0, 1].
    pub score: f64,
    /// Unclamped correlation average; can be slightly negative.
    pub raw: f64,
}

/// Hann window of length n without its zero end points.
fn analysis_window(n: usize) -> Vec<f64> {
    (1..=n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / (n + 1) as f64).cos()).collect()
}

/// Frame starts `0, hop, ...` strictly below `len - frame_len`.
fn frame_starts(len: usize, frame_len: usize, hop: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(frame_len)).step_by(hop)
}

/// Drops frames whose clean energy is more than the dynamic range below the
/// loudest clean frame and overlap-adds the survivors.
fn remove_silent_frames(x: &[f64], y: &[f64], c: &EstoiConstants) -> (Vec<f64>, Vec<f64>) {
    let w = analysis_window(c.frame_len);
    let starts: Vec<usize> = frame_starts(x.len(), c.frame_len, c.hop).collect();
    let energy: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..c.frame_len).map(|k| (w[k] * x[s + k]).powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<usize> = starts
        .iter()
        .zip(&energy)
        .filter(|(_, &e)| max - c.dynamic_range_db - e < 0.0)
        .map(|(&s, _)| s)
        .collect();
    if kept.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let out_len = (kept.len() - 1) * c.hop + c.frame_len;
    let mut xs = vec![0.0; out_len];
    let mut ys = vec![0.0; out_len];
    for (i, &s) in kept.iter().enumerate() {
        for k in 0..c.frame_len {
            xs[i * c.hop + k] += w[k] * x[s + k];
            ys[i * c.hop + k] += w[k] * y[s + k];
        }
    }
    (xs, ys)
}

/// `[n_bands][fft_size / 2 + 1]` band membership, edges snapped to the nearest bin.
fn third_octave_bands(c: &EstoiConstants) -> Vec<(usize, usize)> {
    let n_bins = c.fft_size / 2 + 1;
    let bin_hz = c.sample_rate as f64 / c.fft_size as f64;
    let nearest = |f: f64| -> usize {
        (0..n_bins)
            .min_by(|&a, &b| {
                let da = (a as f64 * bin_hz - f).powi(2);
                let db = (b as f64 * bin_hz - f).powi(2);
                da.partial_cmp(&db).expect("finite")
            })
            .expect("bins")
    };
    (0..c.n_bands)
        .map(|k| {
            let k = k as f64;
            let lo = c.min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = c.min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[frames][bands]`: sqrt of the summed power in each band.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)], c: &EstoiConstants) -> Vec<Vec<f64>> {
    let w = analysis_window(c.frame_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(c.fft_size);
    let mut buf = vec![Complex64::new(0.0, 0.0); c.fft_size];
    frame_starts(x.len(), c.frame_len, c.hop)
        .map(|s| {
            buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
            for k in 0..c.frame_len {
                buf[k].re = w[k] * x[s + k];
            }
            fft.process(&mut buf);
            bands
                .iter()
                .map(|&(lo, hi)| buf[lo..hi].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt())
                .collect()
        })
        .collect()
}

/// Centers `v` and scales it to unit norm; an all-constant vector becomes zero.
fn center_unit(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let inv = if norm > EPS { 1.0 / norm } else { 0.0 };
    v.iter_mut().for_each(|x| *x *= inv);
}

/// Normalizes a `[bands][frames]` segment along time, then along bands.
fn normalize_segment(seg: &mut [Vec<f64>]) {
    for band in seg.iter_mut() {
        center_unit(band);
    }
    let n_frames = seg[0].len();
    let mut col = vec![0.0; seg.len()];
    for t in 0..n_frames {
        for (b, band) in seg.iter().enumerate() {
            col[b] = band[t];
        }
        center_unit(&mut col);
        for (b, band) in seg.iter_mut().enumerate() {
            band[t] = col[b];
        }
    }
}

pub fn estoi(clean: &[f64], degraded: &[f64], sample_rate: u32) -> Result<EstoiScore> {
    estoi_with(clean, degraded, sample_rate, &ESTOI)
}

pub fn estoi_with(clean: &[f64], degraded: &[f64], sample_rate: u32, c: &EstoiConstants) -> Result<EstoiScore> {
    if clean.len() != degraded.len() {
        return Err(Error::invalid(format!(
            "clean has {} samples, degraded has {}",
            clean.len(),
            degraded.len()
        )));
    }
    if clean.iter().all(|&v| v == 0.0) {
        return Err(Error::invalid("clean signal is silent"));
    }
    let (x, y) = if sample_rate == c.sample_rate {
        (clean.to_vec(), degraded.to_vec())
    } else {
        let q = ResampleQuality::default();
        (
            resample(clean, sample_rate, c.sample_rate, q)?,
            resample(degraded, sample_rate, c.sample_rate, q)?,
        )
    };
    let (x, y) = remove_silent_frames(&x, &y, c);
    let bands = third_octave_bands(c);
    let xe = band_envelopes(&x, &bands, c);
    let ye = band_envelopes(&y, &bands, c);
    let n = c.segment_frames;
    if xe.len() < n {
        return Err(Error::invalid(format!(
            "only {} active frames, ESTOI needs at least {n}",
            xe.len()
        )));
    }
    let mut total = 0.0;
    let segments = xe.len() - n + 1;
    for m in n..=xe.len() {
        let take = |env: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..c.n_bands).map(|b| env[m - n..m].iter().map(|f| f[b]).collect()).collect()
        };
        let mut xs = take(&xe);
        let mut ys = take(&ye);
        normalize_segment(&mut xs);
        normalize_segment(&mut ys);
        let dot: f64 = xs.iter().zip(&ys).flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q)).sum();
        total += dot / n as f64;
    }
    let raw = total / segments as f64;
    Ok(EstoiScore {
        score: raw.clamp(0.0, 1.0),
        raw,
    })
}
