//! Desk-scale synthetic corpus and end-to-end run shared by acceptance checks.

use rayon::prelude::*;
use specunet::data::synth::{noise, speech_like, NoiseKind};
use specunet::data::{image_pairs, mix_at_snr, split_counts, ImagePair, DEFAULT_SPLIT_RATIOS};
use specunet::dsp::StftConfig;
use specunet::enhance::enhance_utterance;
use specunet::metrics::{estoi, seg_snr};
use specunet::model::ArchitectureSpec;
use specunet::perceptual::FrontEnd;
use specunet::train::{train, TrainConfig, TrainOutcome, Trainer};

pub const UTTERANCES: usize = 200;
/// 256 frames at hop 128: exactly one image per utterance.
pub const UTT_LEN: usize = 32_768;
pub const NOISE_LEN: usize = 16_000 * 30;
pub const TRAIN_SNRS: [f64; 4] = [-5.0, 0.0, 5.0, 10.0];
pub const EPOCHS: usize = 10;
pub const BATCH: usize = 4;
pub const LR: f64 = 1e-3;

pub const OVERFIT_IMAGES: usize = 4;
pub const OVERFIT_STEPS: usize = 500;
pub const OVERFIT_LR: f64 = 2e-4;

pub struct Corpus {
    pub front: FrontEnd,
    pub clean: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    /// Utterance indices per split.
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

fn lcg(state: &mut u64) -> u64 {
    *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    *state >> 33
}

impl Corpus {
    pub fn build(seed: u64) -> Self {
        let front = FrontEnd::new(StftConfig::default()).unwrap();
        let clean: Vec<Vec<f64>> =
            (0..UTTERANCES).into_par_iter().map(|i| speech_like(UTT_LEN, seed * 10_000 + i as u64)).collect();
        let noises = vec![noise(NoiseKind::White, NOISE_LEN, seed + 1), noise(NoiseKind::Babble, NOISE_LEN, seed + 2)];
        let [n_train, n_dev, _] = split_counts(UTTERANCES, DEFAULT_SPLIT_RATIOS).unwrap();
        let idx: Vec<usize> = (0..UTTERANCES).collect();
        Corpus {
            front,
            clean,
            noises,
            train: idx[..n_train].to_vec(),
            dev: idx[n_train..n_train + n_dev].to_vec(),
            test: idx[n_train + n_dev..].to_vec(),
        }
    }

    /// Noise kind, SNR and offset for utterance `i`, drawn from a fixed stream.
    fn condition(&self, i: usize, snr_override: Option<f64>) -> (usize, f64, usize) {
        let mut s = 0x9e37_79b9_7f4a_7c15 ^ i as u64;
        let kind = (lcg(&mut s) % 2) as usize;
        let snr = snr_override.unwrap_or(TRAIN_SNRS[(lcg(&mut s) % 4) as usize]);
        let offset = (lcg(&mut s) as usize) % (NOISE_LEN - UTT_LEN);
        (kind, snr, offset)
    }

    pub fn mixture(&self, i: usize, snr_override: Option<f64>, kind_override: Option<usize>) -> Vec<f64> {
        let (kind, snr, offset) = self.condition(i, snr_override);
        let kind = kind_override.unwrap_or(kind);
        mix_at_snr(&self.clean[i], &self.noises[kind], snr, offset).unwrap().noisy
    }

    pub fn images(&self, ids: &[usize]) -> Vec<ImagePair> {
        ids.par_iter()
            .flat_map_iter(|&i| image_pairs(&self.front, &self.clean[i], &self.mixture(i, None, None)).unwrap())
            .collect()
    }
}

pub fn config(arch: ArchitectureSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        batch_size: BATCH,
        lr: LR,
        seed,
        arch,
        ..TrainConfig::default()
    }
}

pub fn run(corpus: &Corpus, arch: ArchitectureSpec, seed: u64) -> TrainOutcome {
    let tr = corpus.images(&corpus.train);
    let dev = corpus.images(&corpus.dev);
    train(&config(arch, seed), &tr, &dev, serde_json::Value::Null, |r| {
        eprintln!("  {} seed {seed} epoch {} train {:.4} dev {:.4?} ({:.0}s)", arch.kind, r.epoch, r.train_mse, r.dev_mse, r.wall_seconds)
    })
    .unwrap()
}

pub struct HeldOut {
    pub noisy_estoi: f64,
    pub enhanced_estoi: f64,
    pub noisy_seg_snr: f64,
    pub enhanced_seg_snr: f64,
}

/// Scores the test utterances mixed at 0 dB with both noise kinds.
pub fn held_out(corpus: &Corpus, outcome: &TrainOutcome) -> HeldOut {
    let model = &outcome.best.model;
    let rows: Vec<[f64; 4]> = corpus
        .test
        .iter()
        .flat_map(|&i| (0..2).map(move |k| (i, k)))
        .map(|(i, k)| {
            let c = &corpus.clean[i];
            let y = corpus.mixture(i, Some(0.0), Some(k));
            let e = enhance_utterance(model, &corpus.front, &y).unwrap().enhanced;
            [
                estoi(c, &y, 16_000).unwrap().score,
                estoi(c, &e, 16_000).unwrap().score,
                seg_snr(c, &y).unwrap(),
                seg_snr(c, &e).unwrap(),
            ]
        })
        .collect();
    let m = |j: usize| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
    HeldOut {
        noisy_estoi: m(0),
        enhanced_estoi: m(1),
        noisy_seg_snr: m(2),
        enhanced_seg_snr: m(3),
    }
}

/// Loss of every overfit step (before its update) and the MSE after the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitLog {
    pub losses: Vec<f64>,
    pub final_mse: f64,
}

/// Width-1/8 vgg19-unet fitted to the first few training images with the
/// published optimizer settings.
pub fn overfit(corpus: &Corpus, seed: u64) -> OverfitLog {
    let pairs = corpus.images(&corpus.train[..OVERFIT_IMAGES]);
    let batch: Vec<usize> = (0..pairs.len()).collect();
    let config = TrainConfig {
        batch_size: OVERFIT_IMAGES,
        lr: OVERFIT_LR,
        seed,
        arch: ArchitectureSpec::vgg19_unet(0.125),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config).unwrap();
    let losses = (0..OVERFIT_STEPS).map(|_| trainer.train_step(&pairs, &batch).unwrap()).collect();
    let final_mse = trainer.evaluate(&pairs).unwrap();
    OverfitLog { losses, final_mse }
}
