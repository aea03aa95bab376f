use crate::perceptual::{tile_images, FrontEnd, IMAGE_SIZE};
use crate::{Error, Result};

/// Aligned network input and target, each `IMAGE_SIZE x IMAGE_SIZE` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    /// Normalized MelPow image of the noisy signal.
    pub noisy: Vec<f32>,
    /// Unnormalized MelPow image of the clean signal.
    pub clean: Vec<f32>,
    pub valid_frames: usize,
}

fn to_f32(pixels: &ndarray::Array2<f64>) -> Vec<f32> {
    pixels.iter().map(|&v| v as f32).collect()
}

/// Tiles an utterance pair into training images.
pub fn image_pairs(front: &FrontEnd, clean: &[f64], noisy: &[f64]) -> Result<Vec<ImagePair>> {
    if clean.len() != noisy.len() {
        return Err(Error::invalid(format!(
            "clean has {} samples, noisy has {}",
            clean.len(),
            noisy.len()
        )));
    }
    let (_, target) = front.analyze(clean, false)?;
    let (_, input) = front.analyze(noisy, true)?;
    let targets = tile_images(&target);
    let inputs = tile_images(&input);
    Ok(inputs
        .iter()
        .zip(&targets)
        .map(|(x, y)| {
            debug_assert_eq!(x.pixels.dim(), (IMAGE_SIZE, IMAGE_SIZE));
            ImagePair {
                noisy: to_f32(&x.pixels),
                clean: to_f32(&y.pixels),
                valid_frames: x.valid_frames,
            }
        })
        .collect())
}
