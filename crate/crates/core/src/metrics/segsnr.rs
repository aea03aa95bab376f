use crate::{Error, Result};

/// 32 ms at 16 kHz.
pub const SEG_FRAME: usize = 512;
pub const SEG_SNR_FLOOR_DB: f64 = -10.0;
pub const SEG_SNR_CEILING_DB: f64 = 35.0;
/// Clean frames below this energy are skipped.
pub const SEG_SILENCE_ENERGY: f64 = 1e-10;

/// Mean over non-overlapping 512-sample frames of the clamped per-frame SNR.
/// A trailing partial frame is ignored.
pub fn seg_snr(clean: &[f64], enhanced: &[f64]) -> Result<f64> {
    if clean.len() != enhanced.len() {
        return Err(Error::invalid(format!(
            "clean has {} samples, enhanced has {}",
            clean.len(),
            enhanced.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (c, e) in clean.chunks_exact(SEG_FRAME).zip(enhanced.chunks_exact(SEG_FRAME)) {
        let signal: f64 = c.iter().map(|v| v * v).sum();
        if signal < SEG_SILENCE_ENERGY {
            continue;
        }
        let error: f64 = c.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = if error == 0.0 {
            SEG_SNR_CEILING_DB
        } else {
            (10.0 * (signal / error).log10()).clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEILING_DB)
        };
        sum += snr;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no non-silent 32 ms frame in the clean signal"));
    }
    Ok(sum / count as f64)
}
