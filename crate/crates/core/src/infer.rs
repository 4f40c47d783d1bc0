//! Inference on frozen checkpoints and conversions between images and
//! network tensors. Masks map tissue to `1` and air to `-1`; RGB maps
//! `0..=255` linearly onto `[-1, 1]`.

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::nets::Mode;
use crate::tensor::Tensor;

pub fn mask_to_tensor(m: &BinaryMask) -> Tensor {
    let (w, h) = m.dims();
    let data = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| if m.get(x, y) { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_vec([1, 1, h, w], data).expect("shape matches mask")
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data).expect("shape matches image")
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// First sample of a 3-channel tensor as an 8-bit image.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [_, c, h, w] = t.shape();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c| to_u8(t.at(0, c, y as usize, x as usize));
        Rgb([at(0), at(1), at(2)])
    }))
}

/// First channel of the first sample, mapped from `[-1, 1]` to `0..=255`.
pub fn tensor_to_soft(t: &Tensor) -> GrayImage {
    let [_, _, h, w] = t.shape();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(t.at(0, 0, y as usize, x as usize))])
    })
}

/// Binarization threshold on the `[0, 1]` soft scale.
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineOptions {
    pub binarize: bool,
    /// Soft value above which a pixel becomes tissue.
    pub threshold: f64,
    /// Seeds the generator's dropout.
    pub seed: u64,
}

impl FineOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            binarize: true,
            threshold: DEFAULT_BINARIZE_THRESHOLD,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FineOutput {
    Mask(BinaryMask),
    Soft(GrayImage),
}

impl FineOutput {
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        match self {
            FineOutput::Mask(m) => m.encode_png(),
            FineOutput::Soft(g) => {
                let mut buf = std::io::Cursor::new(Vec::new());
                g.write_to(&mut buf, image::ImageFormat::Png)
                    .map_err(|source| Error::Image { path: None, source })?;
                Ok(buf.into_inner())
            }
        }
    }

    pub fn into_mask(self) -> Option<BinaryMask> {
        match self {
            FineOutput::Mask(m) => Some(m),
            FineOutput::Soft(_) => None,
        }
    }
}

/// Runs the coarse-to-fine generator of a mask model once.
pub fn infer_fine(ck: &Checkpoint, coarse: &BinaryMask, opts: &FineOptions) -> Result<FineOutput> {
    if !ck.kind.is_mask_model() {
        return Err(Error::invalid(format!(
            "{} checkpoints generate RGB, not masks",
            ck.kind
        )));
    }
    if !(0.0..=1.0).contains(&opts.threshold) {
        return Err(Error::invalid(format!(
            "threshold {} not in [0, 1]",
            opts.threshold
        )));
    }
    let g = ck.generator("g")?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = g.run(&mask_to_tensor(coarse), Mode::Infer, &mut rng)?;
    if !opts.binarize {
        return Ok(FineOutput::Soft(tensor_to_soft(&y)));
    }
    let (w, h) = coarse.dims();
    let cut = 2.0 * opts.threshold - 1.0;
    Ok(FineOutput::Mask(BinaryMask::from_fn(w, h, |x, y_| {
        y.at(0, 0, y_, x) > cut
    })?))
}

/// Renders an RGB patch from a fine mask. The RGB generator has no noise
/// source, so the result depends only on the checkpoint and the mask.
pub fn infer_rgb(ck: &Checkpoint, fine: &BinaryMask) -> Result<RgbImage> {
    if ck.kind != ModelKind::Hd {
        return Err(Error::invalid(format!(
            "{} checkpoints generate masks, not RGB",
            ck.kind
        )));
    }
    let g = ck.generator("g")?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    tensor_to_rgb(&g.run(&mask_to_tensor(fine), Mode::Infer, &mut rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8 * 50, y as u8 * 90, 255]));
        assert_eq!(tensor_to_rgb(&rgb_to_tensor(&img)).unwrap(), img);
    }

    #[test]
    fn mask_tensor_layout() {
        let m = BinaryMask::from_fn(3, 2, |x, y| x == 2 && y == 1).unwrap();
        let t = mask_to_tensor(&m);
        assert_eq!(t.shape(), [1, 1, 2, 3]);
        assert_eq!(t.data(), &[-1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
        assert_eq!(tensor_to_soft(&t).get_pixel(2, 1)[0], 255);
    }
}
