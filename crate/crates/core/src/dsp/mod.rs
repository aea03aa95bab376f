//! Time-frequency analysis and synthesis plus audio file plumbing.

mod resample;
mod stft;
mod wav;

pub use resample::{resample, ResampleQuality};
pub use stft::{hann_window, istft, stft, StftConfig, StftFrames, WindowKind};
pub use wav::{load_mono, read_wav, write_wav, SampleFormat, WavAudio};

/// Working sample rate of the whole pipeline.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mean-square power of a signal; 0 for an empty slice.
pub fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
