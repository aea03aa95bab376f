//! Objective evaluation: ESTOI, segmental SNR and manifest-wide reports.

mod estoi;
mod report;
mod segsnr;

pub use estoi::{estoi, estoi_with, EstoiConstants, EstoiScore, ESTOI};
pub use report::{
    evaluate_manifest, summarize, EvaluateOptions, GroupMeans, MetricReport, MissingEntry, UtteranceMetrics,
};
pub use segsnr::{seg_snr, SEG_FRAME, SEG_SILENCE_ENERGY, SEG_SNR_CEILING_DB, SEG_SNR_FLOOR_DB};
