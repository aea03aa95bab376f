use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hound::WavReader;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::mix::{mix_at_snr, NoisyPair};
use crate::dsp::{load_mono, ResampleQuality, SAMPLE_RATE};
use crate::{Error, Result};

/// SNR grid used for training and development mixtures, in dB.
pub const TRAIN_SNRS_DB: [f64; 7] = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0];
/// SNR grid used for test mixtures, in dB.
pub const TEST_SNRS_DB: [f64; 6] = [-7.5, -2.5, 2.5, 7.5, 12.5, 17.5];
/// Train / dev / test shares of the clean corpus.
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.75, 0.10, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

/// One mixture: which clean file, which noise, at what SNR and where in the noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub snr_db: f64,
    pub split: Split,
    /// Start of the noise crop, in 16 kHz samples.
    pub noise_offset: usize,
    pub seed: u64,
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl ManifestEntry {
    /// Noise label used for report grouping: the noise file stem.
    pub fn noise_type(&self) -> String {
        stem(&self.noise_path)
    }

    /// Stable identifier, also the file stem of rendered and enhanced audio.
    pub fn id(&self) -> String {
        format!("{}__{}__snr{}", stem(&self.clean_path), self.noise_type(), self.snr_db)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clean_path.as_os_str().is_empty() || self.noise_path.as_os_str().is_empty() {
            return Err(Error::invalid("manifest entry has an empty path"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::invalid(format!("manifest entry has SNR {}", self.snr_db)));
        }
        Ok(())
    }

    /// Loads both files at 16 kHz and mixes them as recorded.
    pub fn render(&self, quality: ResampleQuality) -> Result<NoisyPair> {
        let clean = load_mono(&self.clean_path, quality)?;
        let noise = load_mono(&self.noise_path, quality)?;
        mix_at_snr(&clean, &noise, self.snr_db, self.noise_offset)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::format(format!("manifest line {}: {err}", i + 1)))?;
            e.validate()?;
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

/// Inputs of [`build_manifest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestConfig {
    pub clean_dir: PathBuf,
    pub noise_dir: PathBuf,
    /// SNRs drawn for train and dev entries.
    pub train_snrs: Vec<f64>,
    /// SNRs drawn for test entries.
    pub test_snrs: Vec<f64>,
    pub split_ratios: [f64; 3],
    pub seed: u64,
    /// Regex whose first capture group (or whole match) names the speaker.
    /// When set, no speaker appears in two splits.
    pub speaker_pattern: Option<String>,
}

impl ManifestConfig {
    pub fn new(clean_dir: impl Into<PathBuf>, noise_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            clean_dir: clean_dir.into(),
            noise_dir: noise_dir.into(),
            train_snrs: TRAIN_SNRS_DB.to_vec(),
            test_snrs: TEST_SNRS_DB.to_vec(),
            split_ratios: DEFAULT_SPLIT_RATIOS,
            seed,
            speaker_pattern: None,
        }
    }
}

/// Target split sizes: rounded train and dev shares, test takes the rest.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let train = ((ratios[0] * n as f64).round() as usize).min(n);
    let dev = ((ratios[1] * n as f64).round() as usize).min(n - train);
    Ok([train, dev, n - train - dev])
}

/// Sorted `.wav` files directly inside `dir`.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::invalid(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    Ok(files)
}

/// Length of a WAV file once resampled to the working rate.
fn length_at_working_rate(path: &Path) -> Result<usize> {
    let reader = WavReader::open(path)?;
    let rate = reader.spec().sample_rate as u64;
    if rate == 0 {
        return Err(Error::format(format!("{}: zero sample rate", path.display())));
    }
    Ok((reader.duration() as u64 * SAMPLE_RATE as u64).div_ceil(rate) as usize)
}

fn assign_splits(files: &[PathBuf], config: &ManifestConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Split>> {
    let [n_train, n_dev, _] = split_counts(files.len(), config.split_ratios)?;
    let mut splits = vec![Split::Test; files.len()];
    match &config.speaker_pattern {
        None => {
            let mut order: Vec<usize> = (0..files.len()).collect();
            order.shuffle(rng);
            for (rank, &i) in order.iter().enumerate() {
                splits[i] = if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_dev {
                    Split::Dev
                } else {
                    Split::Test
                };
            }
        }
        Some(pattern) => {
            let re = Regex::new(pattern).map_err(|e| Error::invalid(format!("speaker pattern: {e}")))?;
            let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
            for (i, f) in files.iter().enumerate() {
                let name = f.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let caps = re
                    .captures(&name)
                    .ok_or_else(|| Error::invalid(format!("`{name}` does not match the speaker pattern")))?;
                let speaker = caps.get(1).or_else(|| caps.get(0)).expect("match").as_str().to_string();
                by_speaker.entry(speaker).or_default().push(i);
            }
            let mut speakers: Vec<Vec<usize>> = by_speaker.into_values().collect();
            speakers.shuffle(rng);
            // Whole speakers fill train, then dev; the remainder is test.
            let (mut train, mut dev) = (0, 0);
            for group in speakers {
                let split = if train < n_train {
                    train += group.len();
                    Split::Train
                } else if dev < n_dev {
                    dev += group.len();
                    Split::Dev
                } else {
                    Split::Test
                };
                for i in group {
                    splits[i] = split;
                }
            }
        }
    }
    Ok(splits)
}

/// Pairs every clean file with every noise file, drawing one SNR and one
/// noise offset per pair. Deterministic in `config.seed`.
pub fn build_manifest(config: &ManifestConfig) -> Result<Manifest> {
    let clean = list_wavs(&config.clean_dir)?;
    let noise = list_wavs(&config.noise_dir)?;
    if clean.is_empty() {
        return Err(Error::invalid(format!("no clean WAV files in {}", config.clean_dir.display())));
    }
    if noise.is_empty() {
        return Err(Error::invalid(format!("no noise WAV files in {}", config.noise_dir.display())));
    }
    if config.train_snrs.is_empty() || config.test_snrs.is_empty() {
        return Err(Error::invalid("SNR lists must not be empty"));
    }
    if config.train_snrs.iter().chain(&config.test_snrs).any(|s| !s.is_finite()) {
        return Err(Error::invalid("SNR lists must be finite"));
    }
    let clean_len = clean.iter().map(|p| length_at_working_rate(p)).collect::<Result<Vec<_>>>()?;
    let noise_len = noise.iter().map(|p| length_at_working_rate(p)).collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let splits = assign_splits(&clean, config, &mut rng)?;
    let mut entries = Vec::with_capacity(clean.len() * noise.len());
    for (ci, cpath) in clean.iter().enumerate() {
        for (ni, npath) in noise.iter().enumerate() {
            let grid = if splits[ci] == Split::Test { &config.test_snrs } else { &config.train_snrs };
            let snr_db = grid[rng.random_range(0..grid.len())];
            let slack = noise_len[ni].checked_sub(clean_len[ci]).ok_or_else(|| {
                Error::invalid(format!(
                    "noise {} is shorter than clean {}",
                    npath.display(),
                    cpath.display()
                ))
            })?;
            let noise_offset = rng.random_range(0..=slack);
            entries.push(ManifestEntry {
                clean_path: cpath.clone(),
                noise_path: npath.clone(),
                snr_db,
                split: splits[ci],
                noise_offset,
                seed: rng.next_u64(),
            });
        }
    }
    Ok(Manifest { entries })
}

/// Speakers present in each split, for checking disjointness.
pub fn speakers_by_split(manifest: &Manifest, pattern: &str) -> Result<BTreeMap<Split, BTreeSet<String>>> {
    let re = Regex::new(pattern).map_err(|e| Error::invalid(format!("speaker pattern: {e}")))?;
    let mut out: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    for e in &manifest.entries {
        let name = e.clean_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(c) = re.captures(&name) {
            let s = c.get(1).or_else(|| c.get(0)).expect("match").as_str().to_string();
            out.entry(e.split).or_default().insert(s);
        }
    }
    Ok(out)
}
