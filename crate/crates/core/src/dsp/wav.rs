use std::path::Path;

use hound::{SampleFormat as HoundFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use super::{resample, ResampleQuality, SAMPLE_RATE};
use crate::{Error, Result};

/// On-disk sample encoding for written WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    #[default]
    Pcm16,
    Float32,
}

#[derive(Debug, Clone)]
pub struct WavAudio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Reads a mono 16-bit PCM or 32-bit float WAV file, samples scaled to [-1, 1].
pub fn read_wav(path: impl AsRef<Path>) -> Result<WavAudio> {
    let path = path.as_ref();
    let reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: {} channels, only mono input is supported",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (HoundFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<Vec<_>, _>>()?,
        (HoundFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(Error::format(format!(
                "{}: unsupported sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    Ok(WavAudio {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Reads a mono WAV file and resamples it to the 16 kHz working rate.
pub fn load_mono(path: impl AsRef<Path>, quality: ResampleQuality) -> Result<Vec<f64>> {
    let audio = read_wav(path)?;
    resample(&audio.samples, audio.sample_rate, SAMPLE_RATE, quality)
}

/// Writes a mono WAV file. PCM output is clipped to [-1, 1).
pub fn write_wav(
    path: impl AsRef<Path>,
    samples: &[f64],
    sample_rate: u32,
    format: SampleFormat,
) -> Result<()> {
    let spec = match format {
        SampleFormat::Pcm16 => WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample: 16,
            sample_format: HoundFormat::Int,
        },
        SampleFormat::Float32 => WavSpec {
            channels: 1,
            sample_rate,
            bits_per_sample: 32,
            sample_format: HoundFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for &s in samples {
        match format {
            SampleFormat::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)?;
            }
            SampleFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}
