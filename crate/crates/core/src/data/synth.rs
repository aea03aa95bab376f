//! Synthetic stand-ins for a speech corpus: voiced tone complexes shaped by
//! moving formants and syllabic amplitude modulation, plus white and
//! babble-like noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_wav, SampleFormat, SAMPLE_RATE};
use crate::{Error, Result};

const TARGET_RMS: f64 = 0.1;
const BABBLE_TALKERS: usize = 6;
const HARMONIC_CEILING_HZ: f64 = 5000.0;

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= target / rms);
    }
}

fn resonance(f: f64, centre: f64, bandwidth: f64) -> f64 {
    let d = (f - centre) / bandwidth;
    1.0 / (1.0 + d * d)
}

/// A speech-shaped utterance of `len` samples at 16 kHz.
///
/// Syllables of 120-320 ms alternate with 40-150 ms pauses; each syllable is
/// a harmonic series on a gliding pitch, weighted by three formant
/// resonances and a raised-cosine envelope.
pub fn speech_like(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let base_f0: f64 = rng.random_range(90.0..220.0);
    let mut out = vec![0.0; len];
    let mut t = (rng.random_range(0.02..0.10) * sr) as usize;
    while t < len {
        let dur = ((rng.random_range(0.12..0.32) * sr) as usize).min(len - t);
        let formants = [
            (rng.random_range(300.0..900.0), 90.0),
            (rng.random_range(900.0..2500.0), 130.0),
            (rng.random_range(2400.0..3500.0), 200.0),
        ];
        let f0_start: f64 = base_f0 * rng.random_range(0.9..1.1);
        let f0_end = f0_start * rng.random_range(0.85..1.15);
        let level = rng.random_range(0.5..1.0);
        let n_harm = (HARMONIC_CEILING_HZ / f0_start.max(f0_end)) as usize;
        let harmonics: Vec<(f64, f64)> = (1..=n_harm)
            .map(|h| {
                let f = h as f64 * f0_start;
                let gain: f64 = formants.iter().map(|&(c, b)| resonance(f, c, b)).sum::<f64>() + 0.02;
                (gain / (h as f64).sqrt(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        let mut pitch_phase = 0.0;
        for i in 0..dur {
            let u = i as f64 / dur as f64;
            let f0 = f0_start + (f0_end - f0_start) * u;
            pitch_phase += 2.0 * PI * f0 / sr;
            let env = level * (PI * u).sin().powi(2);
            let mut v = 0.0;
            for (h, &(gain, phase)) in harmonics.iter().enumerate() {
                v += gain * ((h + 1) as f64 * pitch_phase + phase).sin();
            }
            out[t + i] = env * v;
        }
        t += dur + (rng.random_range(0.04..0.15) * sr) as usize;
    }
    normalize_rms(&mut out, TARGET_RMS);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Babble,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Babble => "babble",
        }
    }
}

/// Noise of `len` samples at the same RMS as [`speech_like`] output.
pub fn noise(kind: NoiseKind, len: usize, seed: u64) -> Vec<f64> {
    let mut out = match kind {
        NoiseKind::White => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        }
        NoiseKind::Babble => {
            let mut acc = vec![0.0; len];
            for talker in 0..BABBLE_TALKERS as u64 {
                let voice = speech_like(len, seed.wrapping_mul(31).wrapping_add(talker + 1));
                acc.iter_mut().zip(voice).for_each(|(a, v)| *a += v);
            }
            acc
        }
    };
    normalize_rms(&mut out, TARGET_RMS);
    out
}

/// Shape of a synthetic corpus written by [`write_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub utterances: usize,
    pub utterance_len: usize,
    pub noise_len: usize,
    /// Distinct synthetic speakers; file names are `spk{s}_{i}.wav`.
    pub speakers: usize,
    pub seed: u64,
}

/// Writes `clean/spk*_*.wav` and `noise/{white,babble}.wav` under `dir`.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<()> {
    if spec.utterances == 0 || spec.speakers == 0 || spec.utterance_len == 0 {
        return Err(Error::invalid("corpus needs utterances, speakers and a length"));
    }
    if spec.noise_len < spec.utterance_len {
        return Err(Error::invalid("noise must be at least as long as the utterances"));
    }
    let clean = dir.join("clean");
    let noise_dir = dir.join("noise");
    fs::create_dir_all(&clean)?;
    fs::create_dir_all(&noise_dir)?;
    for i in 0..spec.utterances {
        let speaker = i % spec.speakers;
        let x = speech_like(spec.utterance_len, spec.seed.wrapping_add(1000 + i as u64));
        write_wav(
            clean.join(format!("spk{speaker:02}_{i:04}.wav")),
            &x,
            SAMPLE_RATE,
            SampleFormat::Float32,
        )?;
    }
    for (k, kind) in [NoiseKind::White, NoiseKind::Babble].into_iter().enumerate() {
        let x = noise(kind, spec.noise_len, spec.seed.wrapping_add(k as u64));
        write_wav(noise_dir.join(format!("{}.wav", kind.name())), &x, SAMPLE_RATE, SampleFormat::Float32)?;
    }
    Ok(())
}
