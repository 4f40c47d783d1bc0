//! Binary tissue masks and the morphology used to derive coarse masks from
//! fine ones.
//!
//! A [`BinaryMask`] stores one byte per pixel, row-major, where `1` is tissue
//! and `0` is air. Everything outside the image counts as air, for erosion and
//! dilation alike.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opening kernel of the coarse-mask pairing procedure.
pub const PAIR_OPEN_SIZE: usize = 5;
/// Closing kernel of the coarse-mask pairing procedure.
pub const PAIR_CLOSE_SIZE: usize = 10;

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    plane: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("ones", &self.count_ones())
            .finish()
    }
}

impl BinaryMask {
    /// All-air mask.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, false)
    }

    pub fn filled(width: usize, height: usize, tissue: bool) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            plane: vec![tissue as u8; width * height],
        })
    }

    /// Builds a mask from row-major bits; every value must be 0 or 1.
    pub fn from_bits(width: usize, height: usize, plane: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if plane.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} mask",
                plane.len()
            )));
        }
        if let Some(v) = plane.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            width,
            height,
            plane,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut mask = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                mask.plane[y * width + x] = f(x, y) as u8;
            }
        }
        Ok(mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.plane.len()
    }

    /// Masks always hold at least one pixel.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bits(&self) -> &[u8] {
        &self.plane
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.plane[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, tissue: bool) {
        self.plane[y * self.width + x] = tissue as u8;
    }

    /// Out-of-bounds coordinates read as air.
    #[inline]
    pub fn get_padded(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.get(x as usize, y as usize)
    }

    pub fn count_ones(&self) -> usize {
        self.plane.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            plane: self.plane.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// `self ⊆ other` as pixel sets.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims()
            && self
                .plane
                .iter()
                .zip(&other.plane)
                .all(|(&a, &b)| a <= b)
    }

    /// Number of tissue pixels with at least one 4-neighbour of air.
    pub fn perimeter(&self) -> usize {
        let mut n = 0;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if self.get_padded(x, y)
                    && (!self.get_padded(x - 1, y)
                        || !self.get_padded(x + 1, y)
                        || !self.get_padded(x, y - 1)
                        || !self.get_padded(x, y + 1))
                {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(x, self.height - 1 - y));
            }
        }
        out
    }

    /// Shifts content by `(dx, dy)`; uncovered pixels become air.
    pub fn translate(&self, dx: isize, dy: isize) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get_padded(x as isize - dx, y as isize - dy));
            }
        }
        out
    }

    /// Nearest-neighbour resample to new dimensions.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<Self> {
        Self::from_fn(width, height, |x, y| {
            let sx = (x * self.width) / width;
            let sy = (y * self.height) / height;
            self.get(sx, sy)
        })
    }

    /// Scales content about the image centre by `factor` with nearest-neighbour
    /// sampling; samples that fall outside the source are air.
    pub fn scale_about_center(&self, factor: f64) -> Self {
        let cx = self.width as f64 / 2.0;
        let cy = self.height as f64 / 2.0;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let sx = ((x as f64 + 0.5 - cx) / factor + cx).floor() as isize;
                let sy = ((y as f64 + 0.5 - cy) / factor + cy).floor() as isize;
                out.set(x, y, self.get_padded(sx, sy));
            }
        }
        out
    }

    /// 8-bit grayscale rendering, tissue 255 and air 0.
    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    /// Reads a grayscale image as a mask. Values at or above 128 are tissue;
    /// anything other than exact 0/255 is reported once through `log`.
    pub fn from_gray_image(img: &GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let mut off_values = 0usize;
        let mask = Self::from_fn(w as usize, h as usize, |x, y| {
            let v = img.get_pixel(x as u32, y as u32)[0];
            if v != 0 && v != 255 {
                off_values += 1;
            }
            v >= 128
        })?;
        if off_values > 0 {
            log::warn!("mask image has {off_values} non-binary pixels; binarized at 128");
        }
        Ok(mask)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray_image().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Self::from_gray_image(&img.to_luma8())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: Some(path.to_path_buf()),
            source,
        })?;
        Self::from_gray_image(&img.to_luma8())
    }
}

/// Rectangular all-ones neighbourhood anchored at `(⌊h/2⌋, ⌊w/2⌋)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    width: usize,
    height: usize,
}

impl StructuringElement {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "structuring element must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Inclusive column offsets `(lo, hi)` covered relative to the anchor.
    pub fn x_offsets(&self) -> (isize, isize) {
        let a = (self.width / 2) as isize;
        (-a, self.width as isize - 1 - a)
    }

    pub fn y_offsets(&self) -> (isize, isize) {
        let a = (self.height / 2) as isize;
        (-a, self.height as isize - 1 - a)
    }
}

/// Tissue iff `intensity < threshold`; a pixel at the threshold is air.
pub fn binarize_grayscale(image: &GrayImage, threshold: u8) -> Result<BinaryMask> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("cannot binarize an empty image"));
    }
    BinaryMask::from_fn(w as usize, h as usize, |x, y| {
        image.get_pixel(x as u32, y as u32)[0] < threshold
    })
}

fn check_se(mask: &BinaryMask, se: &StructuringElement) -> Result<()> {
    if se.width > mask.width || se.height > mask.height {
        return Err(Error::invalid(format!(
            "structuring element {}x{} exceeds mask {}x{}",
            se.width, se.height, mask.width, mask.height
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Reduce {
    /// Every pixel in the window must be tissue.
    All,
    /// At least one pixel in the window is tissue.
    Any,
}

/// 1-D pass over a line of `len` values. `out[i]` looks at
/// `line[i + lo ..= i + hi]`, counting out-of-range positions as air.
fn window_pass(line: &[u8], lo: isize, hi: isize, reduce: Reduce, out: &mut [u8]) {
    let len = line.len() as isize;
    let mut prefix = Vec::with_capacity(line.len() + 1);
    prefix.push(0u32);
    for &v in line {
        prefix.push(prefix.last().unwrap() + v as u32);
    }
    let span = (hi - lo + 1) as u32;
    for i in 0..len {
        let a = (i + lo).clamp(0, len);
        let b = (i + hi + 1).clamp(0, len);
        let ones = prefix[b as usize] - prefix[a as usize];
        out[i as usize] = match reduce {
            Reduce::All => (ones == span) as u8,
            Reduce::Any => (ones > 0) as u8,
        };
    }
}

/// Separable rectangle filter; exact for rectangular windows because a
/// rectangle reduction is a reduction of per-row reductions.
fn rect_filter(
    mask: &BinaryMask,
    (xlo, xhi): (isize, isize),
    (ylo, yhi): (isize, isize),
    reduce: Reduce,
) -> BinaryMask {
    let (w, h) = mask.dims();
    let mut rows = vec![0u8; w * h];
    for y in 0..h {
        window_pass(
            &mask.plane[y * w..(y + 1) * w],
            xlo,
            xhi,
            reduce,
            &mut rows[y * w..(y + 1) * w],
        );
    }
    let mut out = vec![0u8; w * h];
    let mut col = vec![0u8; h];
    let mut col_out = vec![0u8; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        window_pass(&col, ylo, yhi, reduce, &mut col_out);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    BinaryMask {
        width: w,
        height: h,
        plane: out,
    }
}

/// Output is tissue iff every pixel under the element, anchored at the output
/// pixel, is tissue.
pub fn erode(mask: &BinaryMask, se: &StructuringElement) -> Result<BinaryMask> {
    check_se(mask, se)?;
    Ok(rect_filter(mask, se.x_offsets(), se.y_offsets(), Reduce::All))
}

/// Output is tissue iff any pixel under the reflected element is tissue. For
/// odd sizes the reflection is the element itself; for even sizes it makes
/// dilation the adjoint of [`erode`], so opening and closing stay idempotent
/// and (anti-)extensive.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> Result<BinaryMask> {
    check_se(mask, se)?;
    let (xlo, xhi) = se.x_offsets();
    let (ylo, yhi) = se.y_offsets();
    Ok(rect_filter(mask, (-xhi, -xlo), (-yhi, -ylo), Reduce::Any))
}

pub fn open(mask: &BinaryMask, se: &StructuringElement) -> Result<BinaryMask> {
    dilate(&erode(mask, se)?, se)
}

pub fn close(mask: &BinaryMask, se: &StructuringElement) -> Result<BinaryMask> {
    erode(&dilate(mask, se)?, se)
}

/// Derives the coarse-grain partner of a fine mask: a 5×5 opening followed by
/// a 10×10 closing.
pub fn coarsen(fine: &BinaryMask) -> Result<BinaryMask> {
    if fine.width < PAIR_CLOSE_SIZE || fine.height < PAIR_CLOSE_SIZE {
        return Err(Error::invalid(format!(
            "coarsen needs at least {PAIR_CLOSE_SIZE}x{PAIR_CLOSE_SIZE} pixels, got {}x{}",
            fine.width, fine.height
        )));
    }
    let opened = open(fine, &StructuringElement::square(PAIR_OPEN_SIZE)?)?;
    close(&opened, &StructuringElement::square(PAIR_CLOSE_SIZE)?)
}

/// Share of tissue pixels.
pub fn tissue_fraction(mask: &BinaryMask) -> f64 {
    mask.count_ones() as f64 / mask.len() as f64
}

/// One concrete label-preserving transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub shift_x: isize,
    pub shift_y: isize,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip_horizontal: false,
        flip_vertical: false,
        shift_x: 0,
        shift_y: 0,
        scale: 1.0,
    };

    pub fn apply(&self, mask: &BinaryMask) -> BinaryMask {
        let mut out = mask.clone();
        if self.flip_horizontal {
            out = out.flip_horizontal();
        }
        if self.flip_vertical {
            out = out.flip_vertical();
        }
        if self.scale != 1.0 {
            out = out.scale_about_center(self.scale);
        }
        if self.shift_x != 0 || self.shift_y != 0 {
            out = out.translate(self.shift_x, self.shift_y);
        }
        out
    }
}

/// Distribution from which [`augment`] draws transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_probability: f64,
    /// Maximum shift as a fraction of each dimension.
    pub max_shift: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            max_shift: 0.1,
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentPolicy {
    /// A policy whose only draw is the identity transform.
    pub fn identity() -> Self {
        Self {
            flip_probability: 0.0,
            max_shift: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn sample(&self, width: usize, height: usize, rng: &mut impl Rng) -> AugmentParams {
        let max_dx = (self.max_shift * width as f64).floor() as i64;
        let max_dy = (self.max_shift * height as f64).floor() as i64;
        let (lo, hi) = self.scale_range;
        AugmentParams {
            flip_horizontal: rng.random_bool(self.flip_probability),
            flip_vertical: rng.random_bool(self.flip_probability),
            shift_x: rng.random_range(-max_dx..=max_dx) as isize,
            shift_y: rng.random_range(-max_dy..=max_dy) as isize,
            scale: if hi > lo { rng.random_range(lo..=hi) } else { lo },
        }
    }
}

/// `count` augmented copies under the default policy.
pub fn augment(mask: &BinaryMask, seed: u64, count: usize) -> Result<Vec<BinaryMask>> {
    augment_with(mask, &AugmentPolicy::default(), seed, count)
}

pub fn augment_with(
    mask: &BinaryMask,
    policy: &AugmentPolicy,
    seed: u64,
    count: usize,
) -> Result<Vec<BinaryMask>> {
    if count == 0 {
        return Err(Error::invalid("augment count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&policy.flip_probability)
        || !(0.0..1.0).contains(&policy.max_shift)
        || policy.scale_range.0 <= 0.0
        || policy.scale_range.0 > policy.scale_range.1
    {
        return Err(Error::invalid(format!("bad augmentation policy {policy:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| policy.sample(mask.width, mask.height, &mut rng).apply(mask))
        .collect())
}
