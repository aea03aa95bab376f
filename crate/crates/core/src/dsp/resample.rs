use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Windowed-sinc resampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleQuality {
    /// Sinc zero crossings on each side of the kernel centre.
    pub zero_crossings: usize,
    /// Cutoff as a fraction of the lower Nyquist frequency.
    pub rolloff: f64,
}

impl Default for ResampleQuality {
    fn default() -> Self {
        Self {
            zero_crossings: 24,
            rolloff: 0.95,
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        0.42 + 0.5 * (PI * u).cos() + 0.08 * (2.0 * PI * u).cos()
    }
}

/// Band-limited resampling with a Blackman-windowed sinc kernel. Output
/// length is `ceil(len * to / from)`.
pub fn resample(x: &[f64], from: u32, to: u32, quality: ResampleQuality) -> Result<Vec<f64>> {
    if from == 0 || to == 0 {
        return Err(Error::invalid("sample rates must be positive"));
    }
    if quality.zero_crossings == 0 || !(0.0..=1.0).contains(&quality.rolloff) || quality.rolloff == 0.0 {
        return Err(Error::invalid("invalid resampler quality"));
    }
    if from == to {
        return Ok(x.to_vec());
    }
    let out_len = (x.len() as u64 * to as u64).div_ceil(from as u64) as usize;
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0) * quality.rolloff;
    let half_width = quality.zero_crossings as f64 / cutoff;
    let n = x.len() as i64;

    let out = (0..out_len)
        .map(|m| {
            let t = (m as u64 * from as u64) as f64 / to as f64;
            let lo = ((t - half_width).ceil() as i64).max(0);
            let hi = ((t + half_width).floor() as i64).min(n - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let d = t - i as f64;
                acc += x[i as usize] * cutoff * sinc(cutoff * d) * blackman(d / half_width);
            }
            acc
        })
        .collect();
    Ok(out)
}
