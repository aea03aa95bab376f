use serde::{Deserialize, Serialize};

use crate::dsp::mean_power;
use crate::{Error, Result};

/// A clean utterance and its noise-corrupted version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyPair {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    /// Factor applied to the noise crop.
    pub gain_applied: f64,
    pub measured_snr_db: f64,
}

/// Adds `noise[offset..offset + clean.len()]`, scaled so that the full-length
/// power ratio equals `snr_db`.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64, offset: usize) -> Result<NoisyPair> {
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("SNR must be finite, got {snr_db}")));
    }
    if clean.is_empty() {
        return Err(Error::invalid("clean signal is empty"));
    }
    let end = offset
        .checked_add(clean.len())
        .filter(|&e| e <= noise.len())
        .ok_or_else(|| {
            Error::invalid(format!(
                "noise of {} samples cannot cover {} samples from offset {offset}",
                noise.len(),
                clean.len()
            ))
        })?;
    let crop = &noise[offset..end];
    let p_clean = mean_power(clean);
    let p_noise = mean_power(crop);
    if p_clean <= 0.0 {
        return Err(Error::invalid("clean signal is silent"));
    }
    if p_noise <= 0.0 {
        return Err(Error::invalid("noise crop is silent"));
    }
    let gain = (p_clean / p_noise).sqrt() * 10f64.powf(-snr_db / 20.0);
    let scaled: Vec<f64> = crop.iter().map(|n| gain * n).collect();
    let noisy = clean.iter().zip(&scaled).map(|(c, n)| c + n).collect();
    let measured_snr_db = 10.0 * (p_clean / mean_power(&scaled)).log10();
    Ok(NoisyPair {
        clean: clean.to_vec(),
        noisy,
        gain_applied: gain,
        measured_snr_db,
    })
}
