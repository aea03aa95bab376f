//! The perceptually-modified front end: Mel warping of the frequency axis,
//! power-law companding, per-utterance normalization and 256x256 tiling.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use ndarray::{s, Array, Array2, ArrayBase, Axis, Data, Dimension};
use serde::{Deserialize, Serialize};

use crate::dsp::{mean_power, stft, StftConfig, StftFrames};
use crate::{Error, Result};

/// Height and width of a spectrum image.
pub const IMAGE_SIZE: usize = 256;

/// Compression exponent applied to warped magnitudes.
pub const COMPAND_EXPONENT: f64 = 2.0 / 15.0;

/// Standard deviations below this are treated as 1 during normalization.
pub const STD_FLOOR: f64 = 1e-8;

/// Singular values below this fraction of the largest are discarded when
/// building the pseudo-inverse warp.
const PINV_RELATIVE_TOLERANCE: f64 = 1e-4;

/// HTK Mel scale, `2595 log10(1 + f / 700)`.
pub fn mel_scale(hz: f64) -> Result<f64> {
    if !(hz >= 0.0) {
        return Err(Error::invalid(format!("frequency {hz} must be >= 0")));
    }
    Ok(2595.0 * (1.0 + hz / 700.0).log10())
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Square linear-to-Mel frequency warp and its pseudo-inverse.
#[derive(Debug, Clone)]
pub struct WarpMatrix {
    /// `[mel band, linear bin]`, non-negative rows summing to one.
    pub forward: Array2<f64>,
    /// Moore-Penrose pseudo-inverse of `forward`.
    pub inverse: Array2<f64>,
}

impl WarpMatrix {
    /// Builds `n_bins` triangular filters with centres uniformly spaced on
    /// the Mel scale from 0 Hz to Nyquist, evaluated on linear bins
    /// `k * sample_rate / (2 n_bins)`.
    ///
    /// Each triangle reaches its neighbouring centres, but never less than
    /// one linear bin on either side; at low frequencies, where Mel centres
    /// are denser than the FFT grid, a filter therefore reduces to linear
    /// interpolation between the two nearest bins.
    pub fn build(n_bins: usize, sample_rate: u32) -> Result<Self> {
        if n_bins < 4 || sample_rate == 0 {
            return Err(Error::invalid(format!(
                "unsupported warp dimensions: {n_bins} bins at {sample_rate} Hz"
            )));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let bin_hz = nyquist / n_bins as f64;
        let top = mel_scale(nyquist)?;
        let centres: Vec<f64> = (0..n_bins)
            .map(|i| mel_to_hz(top * i as f64 / (n_bins - 1) as f64))
            .collect();

        let mut forward = Array2::<f64>::zeros((n_bins, n_bins));
        for (i, &c) in centres.iter().enumerate() {
            let left = if i > 0 { c - centres[i - 1] } else { centres[1] - c };
            let right = if i + 1 < n_bins { centres[i + 1] - c } else { c - centres[i - 1] };
            let (left, right) = (left.max(bin_hz), right.max(bin_hz));
            let mut row = forward.row_mut(i);
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let v = if f <= c {
                    1.0 - (c - f) / left
                } else {
                    1.0 - (f - c) / right
                };
                *w = v.max(0.0);
            }
            let sum = row.sum();
            if sum <= 0.0 {
                return Err(Error::InvalidState(format!("warp filter {i} has empty support")));
            }
            row.mapv_inplace(|w| w / sum);
        }

        let dm = DMatrix::from_fn(n_bins, n_bins, |r, c| forward[[r, c]]);
        let sigma_max = dm.clone().singular_values().max();
        let pinv = dm
            .pseudo_inverse(sigma_max * PINV_RELATIVE_TOLERANCE)
            .map_err(|e| Error::InvalidState(format!("pseudo-inverse failed: {e}")))?;
        let inverse = Array2::from_shape_fn((n_bins, n_bins), |(r, c)| pinv[(r, c)]);
        Ok(Self { forward, inverse })
    }

    pub fn n_bins(&self) -> usize {
        self.forward.nrows()
    }

    /// Warps each row (frame) of `linear` to the Mel axis.
    pub fn warp(&self, linear: &Array2<f64>) -> Array2<f64> {
        linear.dot(&self.forward.t())
    }

    /// Maps Mel-axis frames back to linear frequency, clamping negatives.
    pub fn unwarp(&self, mel: &Array2<f64>) -> Array2<f64> {
        mel.dot(&self.inverse.t()).mapv(|v| v.max(0.0))
    }
}

/// Elementwise `x^(2/15)`; rejects negative or non-finite entries.
pub fn compand<S, D>(x: &ArrayBase<S, D>) -> Result<Array<f64, D>>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    if let Some(bad) = x.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid(format!("cannot compand value {bad}")));
    }
    Ok(x.mapv(|v| v.powf(COMPAND_EXPONENT)))
}

pub fn compand_value(x: f64) -> Result<f64> {
    if !(x >= 0.0) || !x.is_finite() {
        return Err(Error::invalid(format!("cannot compand value {x}")));
    }
    Ok(x.powf(COMPAND_EXPONENT))
}

/// Elementwise `max(y, 0)^(15/2)`, the inverse of [`compand`].
pub fn expand<S, D>(y: &ArrayBase<S, D>) -> Array<f64, D>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    y.mapv(expand_value)
}

pub fn expand_value(y: f64) -> f64 {
    y.max(0.0).powf(1.0 / COMPAND_EXPONENT)
}

/// Per-bin utterance statistics used by mean-variance normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvnStats {
    pub mean: Vec<f64>,
    /// Population standard deviation over time.
    pub std: Vec<f64>,
}

/// Frames after warping and companding, `[n_frames, 256]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelPowFrames {
    pub values: Array2<f64>,
    pub companded: bool,
    pub normalized: bool,
    pub stats: Option<MvnStats>,
}

impl MelPowFrames {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }
}

/// Per-bin mean-variance normalization over the whole utterance.
pub fn mvn_normalize(frames: &MelPowFrames) -> Result<(MelPowFrames, MvnStats)> {
    if !frames.companded || frames.normalized {
        return Err(Error::invalid("normalization expects companded, unnormalized frames"));
    }
    let n = frames.n_frames();
    if n < 2 {
        return Err(Error::invalid(format!("normalization needs >= 2 frames, got {n}")));
    }
    let mean = frames.values.mean_axis(Axis(0)).expect("non-empty");
    let std = frames.values.std_axis(Axis(0), 0.0);
    let mut values = frames.values.clone();
    for (b, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        let div = if std[b] < STD_FLOOR { 1.0 } else { std[b] };
        col.mapv_inplace(|v| (v - mean[b]) / div);
    }
    let stats = MvnStats {
        mean: mean.to_vec(),
        std: std.to_vec(),
    };
    Ok((
        MelPowFrames {
            values,
            companded: true,
            normalized: true,
            stats: Some(stats.clone()),
        },
        stats,
    ))
}

/// Drops the Nyquist bin, warps to Mel, compands and optionally normalizes.
/// Only noisy inputs are normalized; clean targets never are.
pub fn melpow_analyze(frames: &StftFrames, warp: &WarpMatrix, normalize: bool) -> Result<MelPowFrames> {
    let n_bins = warp.n_bins();
    if frames.magnitude.ncols() != n_bins + 1 {
        return Err(Error::invalid(format!(
            "expected {} spectrum bins for a {n_bins}-band warp, got {}",
            n_bins + 1,
            frames.magnitude.ncols()
        )));
    }
    let linear = frames.magnitude.slice(s![.., ..n_bins]).to_owned();
    let companded = MelPowFrames {
        values: compand(&warp.warp(&linear))?,
        companded: true,
        normalized: false,
        stats: None,
    };
    if normalize {
        Ok(mvn_normalize(&companded)?.0)
    } else {
        Ok(companded)
    }
}

/// One 256x256 network input or output tile, rows are time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumImage {
    pub pixels: Array2<f64>,
    pub tile_index: usize,
    /// Rows holding real frames; the rest are zero padding.
    pub valid_frames: usize,
    pub normalization_stats: Option<MvnStats>,
}

/// Splits frames into non-overlapping 256-frame tiles, zero-padding the last.
pub fn tile_images(frames: &MelPowFrames) -> Vec<SpectrumImage> {
    let n = frames.n_frames();
    let bins = frames.values.ncols();
    (0..n.div_ceil(IMAGE_SIZE))
        .map(|tile_index| {
            let start = tile_index * IMAGE_SIZE;
            let valid = (n - start).min(IMAGE_SIZE);
            let mut pixels = Array2::zeros((IMAGE_SIZE, bins));
            pixels
                .slice_mut(s![..valid, ..])
                .assign(&frames.values.slice(s![start..start + valid, ..]));
            SpectrumImage {
                pixels,
                tile_index,
                valid_frames: valid,
                normalization_stats: frames.stats.clone(),
            }
        })
        .collect()
}

/// Inverse of [`tile_images`]: orders tiles by index and concatenates their
/// valid rows.
pub fn stitch_images(images: &[SpectrumImage]) -> Result<MelPowFrames> {
    if images.is_empty() {
        return Err(Error::invalid("no tiles to stitch"));
    }
    let mut order: Vec<&SpectrumImage> = images.iter().collect();
    order.sort_by_key(|im| im.tile_index);
    for (expect, im) in order.iter().enumerate() {
        if im.tile_index != expect {
            return Err(Error::invalid(format!(
                "tile sequence broken: expected index {expect}, found {}",
                im.tile_index
            )));
        }
        if im.valid_frames > im.pixels.nrows() {
            return Err(Error::invalid(format!(
                "tile {} claims {} valid frames of {}",
                im.tile_index,
                im.valid_frames,
                im.pixels.nrows()
            )));
        }
    }
    let bins = order[0].pixels.ncols();
    let total: usize = order.iter().map(|im| im.valid_frames).sum();
    let mut values = Array2::zeros((total, bins));
    let mut row = 0;
    for im in &order {
        if im.pixels.ncols() != bins {
            return Err(Error::invalid("tiles disagree on band count"));
        }
        values
            .slice_mut(s![row..row + im.valid_frames, ..])
            .assign(&im.pixels.slice(s![..im.valid_frames, ..]));
        row += im.valid_frames;
    }
    let stats = order[0].normalization_stats.clone();
    Ok(MelPowFrames {
        values,
        companded: true,
        normalized: stats.is_some(),
        stats,
    })
}

const MPOW_MAGIC: &[u8; 4] = b"MPOW";
const MPOW_VERSION: u16 = 1;
const FLAG_COMPANDED: u16 = 1;
const FLAG_NORMALIZED: u16 = 2;
const FLAG_STATS: u16 = 4;

/// Writes the MPOW feature dump: magic, version, frame and band counts,
/// flags, then row-major little-endian f32 values and optional statistics.
pub fn write_mpow(mut w: impl Write, frames: &MelPowFrames) -> Result<()> {
    let (n_frames, n_bins) = frames.values.dim();
    let mut flags = 0;
    if frames.companded {
        flags |= FLAG_COMPANDED;
    }
    if frames.normalized {
        flags |= FLAG_NORMALIZED;
    }
    if frames.stats.is_some() {
        flags |= FLAG_STATS;
    }
    w.write_all(MPOW_MAGIC)?;
    w.write_all(&MPOW_VERSION.to_le_bytes())?;
    w.write_all(&(n_frames as u32).to_le_bytes())?;
    w.write_all(&(n_bins as u32).to_le_bytes())?;
    w.write_all(&flags.to_le_bytes())?;
    let mut buf = Vec::with_capacity(n_frames * n_bins * 4);
    for v in frames.values.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(stats) = &frames.stats {
        for v in stats.mean.iter().chain(&stats.std) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mpow(mut r: impl Read) -> Result<MelPowFrames> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::format("MPOW header truncated"))?;
    if &head[..4] != MPOW_MAGIC {
        return Err(Error::format("bad MPOW magic"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != MPOW_VERSION {
        return Err(Error::format(format!("unsupported MPOW version {version}")));
    }
    let n_frames = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let n_bins = u32::from_le_bytes(head[10..14].try_into().unwrap()) as usize;
    let flags = u16::from_le_bytes([head[14], head[15]]);
    let mut read_f32s = |n: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::format("MPOW payload truncated"))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    };
    let values = Array2::from_shape_vec((n_frames, n_bins), read_f32s(n_frames * n_bins)?)
        .map_err(|e| Error::format(e.to_string()))?;
    let stats = if flags & FLAG_STATS != 0 {
        let mut both = read_f32s(2 * n_bins)?;
        let std = both.split_off(n_bins);
        Some(MvnStats { mean: both, std })
    } else {
        None
    };
    Ok(MelPowFrames {
        values,
        companded: flags & FLAG_COMPANDED != 0,
        normalized: flags & FLAG_NORMALIZED != 0,
        stats,
    })
}

/// STFT settings plus the matching warp, built once and shared.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub stft: StftConfig,
    pub warp: WarpMatrix,
}

impl FrontEnd {
    pub fn new(stft: StftConfig) -> Result<Self> {
        stft.validate()?;
        let n_bins = stft.n_bins() - 1;
        if n_bins != IMAGE_SIZE {
            return Err(Error::invalid(format!(
                "FFT size {} gives {n_bins} bands, images need {IMAGE_SIZE}",
                stft.fft_size
            )));
        }
        let warp = WarpMatrix::build(n_bins, stft.sample_rate)?;
        Ok(Self { stft, warp })
    }

    /// STFT followed by MelPow analysis. Silent signals are rejected.
    pub fn analyze(&self, signal: &[f64], normalize: bool) -> Result<(StftFrames, MelPowFrames)> {
        if mean_power(signal) <= 0.0 {
            return Err(Error::invalid("signal is silent"));
        }
        let frames = stft(signal, &self.stft)?;
        let melpow = melpow_analyze(&frames, &self.warp, normalize)?;
        Ok((frames, melpow))
    }
}
