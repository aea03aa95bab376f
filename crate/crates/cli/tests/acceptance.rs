//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N PASS|FAIL` line. Expensive training runs are shared between
//! criteria through process-wide caches; the suite expects one test thread
//! so those runs see the same worker count.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use common::desk::{self, Corpus, OverfitLog};
use common::gradcheck;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use specunet::data::synth::{noise, speech_like, NoiseKind};
use specunet::data::{mix_at_snr, TEST_SNRS_DB, TRAIN_SNRS_DB};
use specunet::dsp::{istft, stft, StftConfig};
use specunet::enhance::{clean_oracle, enhance_utterance};
use specunet::metrics::{estoi, seg_snr, SEG_SNR_CEILING_DB};
use specunet::model::{ArchKind, ArchitectureSpec};
use specunet::perceptual::{compand_value, expand_value, FrontEnd};
use specunet::train::TrainOutcome;
use specunet_cli::param_count;

// Pinned tolerances and budgets.
const VGG_FULL_TARGET: f64 = 31e6;
const VGG_FULL_TOL: f64 = 0.10;
const UNET_FULL_TARGET: f64 = 7.7e6;
const UNET_TOL: f64 = 0.15;
const PARAMS_BUDGET_S: f64 = 1.0;
const STFT_TOL: f64 = 1e-6;
const COMPAND_TOL: f64 = 1e-9;
const GRAD_BUDGET_S: f64 = 300.0;
const GRAD_COORDS: usize = 10;
const SNR_TOL_DB: f64 = 0.01;
const OVERFIT_RATIO: f64 = 0.01;
const OVERFIT_BUDGET_S: f64 = 600.0;
const SMOOTH_WINDOW: usize = 20;
const DESK_BUDGET_S: f64 = 3600.0;
const SEG_SNR_GAIN_DB: f64 = 1.0;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_WINS: usize = 2;
const ESTOI_SELF_TOL: f64 = 1e-6;
/// Passthrough-oracle seg_snr floor, frozen from a measured minimum of 33.2 dB.
const ORACLE_SEG_SNR_BOUND_DB: f64 = 30.0;

const CORPUS_SEED: u64 = 1;
const DESK_SEED: u64 = 1;

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    // Written to the raw handle so the line survives the harness's capture.
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stdout().lock(), "criterion {n} {verdict}: {name}: {detail}");
}

fn corpus() -> &'static Corpus {
    static CORPUS: OnceLock<Corpus> = OnceLock::new();
    CORPUS.get_or_init(|| Corpus::build(CORPUS_SEED))
}

fn overfit_run() -> &'static (OverfitLog, f64) {
    static RUN: OnceLock<(OverfitLog, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let log = desk::overfit(corpus(), DESK_SEED);
        (log, t.elapsed().as_secs_f64())
    })
}

/// Cached desk-scale training runs, with their wall time.
fn desk_run(kind: ArchKind, seed: u64) -> Arc<(TrainOutcome, f64)> {
    static RUNS: OnceLock<Mutex<BTreeMap<(bool, u64), Arc<(TrainOutcome, f64)>>>> = OnceLock::new();
    let mut runs = RUNS.get_or_init(Default::default).lock().unwrap();
    runs.entry((kind == ArchKind::Vgg19Unet, seed))
        .or_insert_with(|| {
            let t = Instant::now();
            let out = desk::run(corpus(), ArchitectureSpec::new(kind, 0.125), seed);
            Arc::new((out, t.elapsed().as_secs_f64()))
        })
        .clone()
}

fn final_dev(o: &TrainOutcome) -> f64 {
    o.history.last().and_then(|r| r.dev_mse).expect("last epoch is evaluated")
}

#[test]
fn c01_parameter_counts() {
    let t = Instant::now();
    let vgg = param_count(&ArchitectureSpec::vgg19_unet(1.0)).unwrap() as f64;
    let unet = param_count(&ArchitectureSpec::unet(1.0)).unwrap() as f64;
    let unet2 = param_count(&ArchitectureSpec::unet(2.0)).unwrap() as f64;
    let secs = t.elapsed().as_secs_f64();
    let rel = |a: f64, b: f64| (a - b).abs() / b;
    let pass = rel(vgg, VGG_FULL_TARGET) <= VGG_FULL_TOL
        && rel(unet, UNET_FULL_TARGET) <= UNET_TOL
        && rel(unet2, vgg) <= UNET_TOL
        && secs < PARAMS_BUDGET_S;
    report(
        1,
        "parameter counts",
        pass,
        &format!("vgg19-unet {vgg} unet {unet} unet-w2 {unet2} in {secs:.2} s"),
    );
    assert!(pass);
}

#[test]
fn c02_dsp_round_trips() {
    let config = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_stft = 0.0f64;
    for _ in 0..50 {
        let x: Vec<f64> = (0..16_000).map(|_| rng.sample(StandardNormal)).collect();
        let y = istft(&stft(&x, &config).unwrap()).unwrap();
        assert_eq!(y.len(), x.len());
        let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst_stft = worst_stft.max(err / norm);
    }
    let mut worst_compand = 0.0f64;
    for i in 0..=1000 {
        let v = 10f64.powf(-6.0 + 10.0 * i as f64 / 1000.0);
        let back = expand_value(compand_value(v).unwrap());
        worst_compand = worst_compand.max((back - v).abs() / v);
    }
    let pass = worst_stft <= STFT_TOL && worst_compand <= COMPAND_TOL;
    report(
        2,
        "DSP round trips",
        pass,
        &format!("stft/istft worst rel L2 {worst_stft:.2e}, compand/expand worst rel {worst_compand:.2e}"),
    );
    assert!(pass);
}

#[test]
fn c03_gradient_suite() {
    let t = Instant::now();
    let mut worst_layer: BTreeMap<&str, f64> = BTreeMap::new();
    let mut worst_vgg = 0.0f64;
    let mut worst_unet = 0.0f64;
    for seed in 0..gradcheck::SEEDS {
        for (name, e) in gradcheck::layer_errors(seed) {
            let w = worst_layer.entry(name).or_default();
            *w = w.max(e);
        }
        worst_vgg = worst_vgg.max(gradcheck::model_error(&ArchitectureSpec::vgg19_unet(1.0 / 16.0), seed, GRAD_COORDS));
        worst_unet = worst_unet.max(gradcheck::model_error(&ArchitectureSpec::unet(1.0 / 16.0), seed, GRAD_COORDS));
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = worst_layer.values().fold(worst_vgg.max(worst_unet), |m, &v| m.max(v));
    let pass = worst <= gradcheck::TOLERANCE && secs < GRAD_BUDGET_S;
    let layers: Vec<String> = worst_layer.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    report(
        3,
        "gradient suite",
        pass,
        &format!(
            "{} seeds, layers [{}], vgg19-unet/16 {worst_vgg:.1e}, unet/16 {worst_unet:.1e}, {secs:.0} s",
            gradcheck::SEEDS,
            layers.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn c04_mixing_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noises = [noise(NoiseKind::White, 64_000, 40), noise(NoiseKind::Babble, 64_000, 41)];
    let grid: Vec<f64> = TRAIN_SNRS_DB.iter().chain(&TEST_SNRS_DB).copied().collect();
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let clean = speech_like(16_000, 500 + i);
        let snr = grid[rng.random_range(0..grid.len())];
        let n = &noises[rng.random_range(0..2)];
        let offset = rng.random_range(0..=n.len() - clean.len());
        let pair = mix_at_snr(&clean, n, snr, offset).unwrap();
        let signal: f64 = clean.iter().map(|c| c * c).sum();
        let residual: f64 = pair.noisy.iter().zip(&clean).map(|(y, c)| (y - c).powi(2)).sum();
        worst = worst.max((10.0 * (signal / residual).log10() - snr).abs());
    }
    let pass = worst <= SNR_TOL_DB;
    report(4, "mixing accuracy", pass, &format!("100 mixes, worst SNR error {worst:.2e} dB"));
    assert!(pass);
}

/// Means over consecutive non-overlapping windows.
fn window_means(x: &[f64], w: usize) -> Vec<f64> {
    x.chunks(w).filter(|c| c.len() == w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn c05_overfit_oracle() {
    let (log, secs) = overfit_run();
    let initial = log.losses[0];
    let best = log.losses.iter().copied().chain([log.final_mse]).fold(f64::INFINITY, f64::min);
    let ratio = best / initial;
    let smoothed = window_means(&log.losses, SMOOTH_WINDOW);
    let monotone = smoothed.windows(2).all(|w| w[1] <= w[0]);
    let pass = ratio < OVERFIT_RATIO && monotone && *secs < OVERFIT_BUDGET_S;
    report(
        5,
        "overfit oracle",
        pass,
        &format!(
            "initial MSE {initial:.5}, best {best:.5} (ratio {:.2}%, target < {:.0}%), final {:.5}, \
             {SMOOTH_WINDOW}-step means monotone: {monotone}, {secs:.0} s",
            100.0 * ratio,
            100.0 * OVERFIT_RATIO,
            log.final_mse
        ),
    );
    assert!(pass);
}

#[test]
fn c06_desk_end_to_end() {
    let t = Instant::now();
    let c = corpus();
    let run = desk_run(ArchKind::Vgg19Unet, DESK_SEED);
    let h = desk::held_out(c, &run.0);
    let secs = t.elapsed().as_secs_f64();
    let pass = h.enhanced_estoi > h.noisy_estoi
        && h.enhanced_seg_snr >= h.noisy_seg_snr + SEG_SNR_GAIN_DB
        && secs <= DESK_BUDGET_S;
    report(
        6,
        "desk-scale end-to-end",
        pass,
        &format!(
            "0 dB held-out ESTOI {:.3} -> {:.3}, seg_snr {:.2} -> {:.2} dB, best epoch {}, {secs:.0} s",
            h.noisy_estoi, h.enhanced_estoi, h.noisy_seg_snr, h.enhanced_seg_snr, run.0.best.epoch
        ),
    );
    assert!(pass);
}

#[test]
fn c07_ablation_direction() {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in ABLATION_SEEDS {
        let v = final_dev(&desk_run(ArchKind::Vgg19Unet, seed).0);
        let u = final_dev(&desk_run(ArchKind::Unet, seed).0);
        wins += usize::from(v <= u);
        rows.push(format!("seed {seed}: vgg19-unet {v:.4} unet {u:.4}"));
    }
    let pass = wins >= ABLATION_WINS;
    report(
        7,
        "ablation direction",
        pass,
        &format!("vgg19-unet <= unet dev MSE in {wins}/3 seeds ({})", rows.join("; ")),
    );
    assert!(pass);
}

#[test]
fn c08_metric_sanity() {
    let mut worst_self = 0.0f64;
    let mut monotone = true;
    let mut ceiling = true;
    let mut curves = Vec::new();
    for seed in 0..3u64 {
        let c = speech_like(48_000, 800 + seed);
        worst_self = worst_self.max((estoi(&c, &c, 16_000).unwrap().raw - 1.0).abs());
        ceiling &= seg_snr(&c, &c).unwrap() == SEG_SNR_CEILING_DB;
        for kind in [NoiseKind::White, NoiseKind::Babble] {
            let n = noise(kind, 60_000, 900 + seed);
            let scores: Vec<f64> = [-10.0, 0.0, 10.0, 20.0]
                .iter()
                .map(|&snr| estoi(&c, &mix_at_snr(&c, &n, snr, 3_000).unwrap().noisy, 16_000).unwrap().raw)
                .collect();
            monotone &= scores.windows(2).all(|w| w[1] >= w[0]);
            curves.push(format!("{}:{:.2}..{:.2}", kind.name(), scores[0], scores[3]));
        }
    }
    let pass = worst_self <= ESTOI_SELF_TOL && monotone && ceiling;
    report(
        8,
        "metric sanity",
        pass,
        &format!(
            "|estoi(x,x)-1| {worst_self:.1e}, monotone over -10..20 dB: {monotone} ({}), seg_snr(c,c) at ceiling: {ceiling}",
            curves.join(" ")
        ),
    );
    assert!(pass);
}

/// Second-order autoregressive noise: a smooth low-pass spectral envelope.
fn smooth_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut y1, mut y2) = (0.0, 0.0);
    (0..len)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            let y = 1.3 * y1 - 0.6 * y2 + 0.05 * e;
            (y2, y1) = (y1, y);
            y
        })
        .collect()
}

#[test]
fn c09_reconstruction_bound() {
    let front = FrontEnd::new(StftConfig::default()).unwrap();
    let mut worst = f64::INFINITY;
    for seed in 0..6u64 {
        for x in [speech_like(48_000, seed), smooth_noise(48_000, seed)] {
            let r = enhance_utterance(&clean_oracle(&front, &x).unwrap(), &front, &x).unwrap();
            worst = worst.min(seg_snr(&x, &r.enhanced).unwrap());
        }
    }
    let pass = worst >= ORACLE_SEG_SNR_BOUND_DB;
    report(
        9,
        "reconstruction fidelity",
        pass,
        &format!("passthrough oracle worst seg_snr {worst:.2} dB, bound {ORACLE_SEG_SNR_BOUND_DB} dB"),
    );
    assert!(pass);
}

#[test]
fn c10_determinism() {
    let (first, _) = overfit_run();
    let second = desk::overfit(corpus(), DESK_SEED);
    let overfit_same = first.losses.iter().map(|v| v.to_bits()).eq(second.losses.iter().map(|v| v.to_bits()))
        && first.final_mse.to_bits() == second.final_mse.to_bits();

    let a = desk_run(ArchKind::Vgg19Unet, DESK_SEED);
    let b = desk::run(corpus(), ArchitectureSpec::vgg19_unet(0.125), DESK_SEED);
    let bits = |o: &TrainOutcome| -> Vec<u64> {
        o.step_losses
            .iter()
            .copied()
            .chain(o.history.iter().flat_map(|r| [r.train_mse, r.dev_mse.unwrap_or(f64::NAN)]))
            .map(f64::to_bits)
            .collect()
    };
    let desk_same = bits(&a.0) == bits(&b) && a.0.best.model == b.best.model;
    let pass = overfit_same && desk_same;
    report(
        10,
        "determinism",
        pass,
        &format!(
            "overfit log ({} steps) identical: {overfit_same}; desk log ({} steps, {} epochs) and best model identical: {desk_same}; {} threads",
            first.losses.len(),
            a.0.step_losses.len(),
            a.0.history.len(),
            rayon::current_num_threads()
        ),
    );
    assert!(pass);
}
