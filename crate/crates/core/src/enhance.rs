//! Noisy waveform in, enhanced waveform out: analysis, per-tile mapping,
//! inverse front end and resynthesis with the noisy phase.

use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::dsp::{istft, StftFrames};
use crate::model::Model;
use crate::nn::Tensor4;
use crate::perceptual::{expand, stitch_images, tile_images, FrontEnd, MelPowFrames, SpectrumImage, IMAGE_SIZE};
use crate::{Error, Result};

/// Anything that turns normalized noisy tiles into clean MelPow tiles.
pub trait SpectrumMapper {
    /// Side length of the square images the mapper accepts.
    fn input_size(&self) -> usize;
    /// Maps one tile; the result has the same shape as `tile.pixels`.
    fn map_tile(&self, tile: &SpectrumImage) -> Result<Array2<f64>>;
}

impl SpectrumMapper for Model {
    fn input_size(&self) -> usize {
        self.spec().input_size
    }

    fn map_tile(&self, tile: &SpectrumImage) -> Result<Array2<f64>> {
        let (h, w) = tile.pixels.dim();
        let x = Tensor4::from_vec([1, 1, h, w], tile.pixels.iter().map(|&v| v as f32).collect())?;
        let y = self.forward(&x)?;
        Ok(Array2::from_shape_vec((h, w), y.data().iter().map(|&v| f64::from(v)).collect())
            .expect("model output keeps the input shape"))
    }
}

/// Ignores its input and returns precomputed tiles (for example the clean
/// utterance's unnormalized MelPow tiles). Isolates reconstruction error.
#[derive(Debug, Clone)]
pub struct OracleMapper {
    pub tiles: Vec<SpectrumImage>,
}

impl SpectrumMapper for OracleMapper {
    fn input_size(&self) -> usize {
        IMAGE_SIZE
    }

    fn map_tile(&self, tile: &SpectrumImage) -> Result<Array2<f64>> {
        self.tiles
            .iter()
            .find(|t| t.tile_index == tile.tile_index)
            .map(|t| t.pixels.clone())
            .ok_or_else(|| Error::invalid(format!("oracle has no tile {}", tile.tile_index)))
    }
}

/// Echoed settings of one enhancement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceInfo {
    pub sample_rate: u32,
    pub input_length: usize,
    pub n_frames: usize,
    pub n_tiles: usize,
}

#[derive(Debug, Clone)]
pub struct EnhanceResult {
    pub enhanced: Vec<f64>,
    /// Wall-clock seconds the mapper spent on each tile.
    pub tile_latency_seconds: Vec<f64>,
    pub info: EnhanceInfo,
    /// Normalized noisy MelPow frames fed to the mapper.
    pub noisy_melpow: MelPowFrames,
    /// Stitched mapper output, companded and unnormalized.
    pub enhanced_melpow: MelPowFrames,
}

/// Undoes the front end on enhanced frames and attaches the noisy phase.
/// The Nyquist bin, dropped by the analysis, comes back as zero.
pub fn synthesis_frames(noisy: &StftFrames, enhanced: &MelPowFrames, front: &FrontEnd) -> Result<StftFrames> {
    if enhanced.n_frames() != noisy.n_frames() {
        return Err(Error::invalid(format!(
            "{} enhanced frames for {} analysis frames",
            enhanced.n_frames(),
            noisy.n_frames()
        )));
    }
    let linear = front.warp.unwarp(&expand(&enhanced.values));
    let bands = linear.ncols();
    let mut magnitude = Array2::zeros(noisy.magnitude.dim());
    magnitude.slice_mut(s![.., ..bands]).assign(&linear);
    Ok(StftFrames {
        magnitude,
        phase: noisy.phase.clone(),
        config: noisy.config,
        original_length: noisy.original_length,
    })
}

/// Full inference path for one utterance.
pub fn enhance_utterance(mapper: &dyn SpectrumMapper, front: &FrontEnd, noisy: &[f64]) -> Result<EnhanceResult> {
    if mapper.input_size() != IMAGE_SIZE {
        return Err(Error::invalid(format!(
            "mapper takes {0}x{0} images, the front end produces {IMAGE_SIZE}x{IMAGE_SIZE}",
            mapper.input_size()
        )));
    }
    let (frames, melpow) = front.analyze(noisy, true)?;
    let tiles = tile_images(&melpow);
    let mut latency = Vec::with_capacity(tiles.len());
    let mut mapped = Vec::with_capacity(tiles.len());
    for tile in &tiles {
        let start = Instant::now();
        let pixels = mapper.map_tile(tile)?;
        latency.push(start.elapsed().as_secs_f64());
        if pixels.dim() != tile.pixels.dim() {
            return Err(Error::invalid(format!(
                "mapper returned {:?} for a {:?} tile",
                pixels.dim(),
                tile.pixels.dim()
            )));
        }
        mapped.push(SpectrumImage {
            pixels,
            tile_index: tile.tile_index,
            valid_frames: tile.valid_frames,
            normalization_stats: None,
        });
    }
    let enhanced_melpow = stitch_images(&mapped)?;
    let synth = synthesis_frames(&frames, &enhanced_melpow, front)?;
    let enhanced = istft(&synth)?;
    Ok(EnhanceResult {
        enhanced,
        tile_latency_seconds: latency,
        info: EnhanceInfo {
            sample_rate: front.stft.sample_rate,
            input_length: noisy.len(),
            n_frames: frames.n_frames(),
            n_tiles: tiles.len(),
        },
        noisy_melpow: melpow,
        enhanced_melpow,
    })
}

/// Oracle whose tiles are the clean signal's unnormalized MelPow image.
pub fn clean_oracle(front: &FrontEnd, clean: &[f64]) -> Result<OracleMapper> {
    let (_, melpow) = front.analyze(clean, false)?;
    Ok(OracleMapper {
        tiles: tile_images(&melpow),
    })
}
