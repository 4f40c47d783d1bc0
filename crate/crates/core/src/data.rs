//! Dataset construction: tiling source images into patches, deriving
//! ground-truth fine masks, pairing them with coarse masks, and splitting.
//!
//! A dataset lives in one directory:
//!
//! ```text
//! <root>/<dataset>/manifest.jsonl
//! <root>/<dataset>/images/<id>.png
//! <root>/<dataset>/fine/<id>.png
//! <root>/<dataset>/coarse/<id>.png
//! ```
//!
//! `manifest.jsonl` holds a header object on the first line and one
//! [`PatchRecord`] per following line. Record paths are relative to the
//! dataset directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{binarize_grayscale, coarsen, BinaryMask};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
/// Patches whose air share exceeds this are dropped.
pub const DEFAULT_AIR_LIMIT: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stain {
    He,
    Ihc,
}

impl Stain {
    /// Grayscale intensity at and above which a pixel is air.
    pub fn default_air_threshold(self) -> u8 {
        match self {
            Stain::He => 204,
            Stain::Ihc => 235,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Stain::He => "H&E",
            Stain::Ihc => "IHC",
        }
    }
}

impl std::str::FromStr for Stain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "he" | "h&e" => Ok(Stain::He),
            "ihc" => Ok(Stain::Ihc),
            other => Err(Error::invalid(format!("unknown stain `{other}` (he|ihc)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub source_id: String,
    /// `(row, col)` offset of the patch in its source image.
    pub origin: (usize, usize),
    pub image_path: String,
    pub fine_mask_path: String,
    pub coarse_mask_path: String,
    pub split: Split,
}

impl PatchRecord {
    pub fn new(id: impl Into<String>, source_id: impl Into<String>, origin: (usize, usize)) -> Self {
        let id = id.into();
        Self {
            image_path: format!("images/{id}.png"),
            fine_mask_path: format!("fine/{id}.png"),
            coarse_mask_path: format!("coarse/{id}.png"),
            source_id: source_id.into(),
            origin,
            split: Split::Train,
            id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestHeader {
    name: String,
    stain: Stain,
    air_threshold: u8,
    patch_width: usize,
    patch_height: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub stain: Stain,
    pub air_threshold: u8,
    pub patch_width: usize,
    pub patch_height: usize,
    pub records: Vec<PatchRecord>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, stain: Stain, patch_width: usize, patch_height: usize) -> Self {
        Self {
            name: name.into(),
            stain,
            air_threshold: stain.default_air_threshold(),
            patch_width,
            patch_height,
            records: Vec::new(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatchRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_width == 0 || self.patch_height == 0 {
            return Err(Error::invalid("patch dimensions must be positive"));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.id) {
                return Err(Error::invalid(format!("duplicate record id `{}`", r.id)));
            }
        }
        Ok(())
    }

    /// Line-delimited JSON: header line, then one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            name: self.name.clone(),
            stain: self.stain,
            air_threshold: self.air_threshold,
            patch_width: self.patch_width,
            patch_height: self.patch_height,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: ManifestHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::invalid("empty manifest"))?,
        )?;
        let records = lines
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<PatchRecord>, _>>()?;
        let m = Self {
            name: header.name,
            stain: header.stain,
            air_threshold: header.air_threshold,
            patch_width: header.patch_width,
            patch_height: header.patch_height,
            records,
        };
        m.validate()?;
        Ok(m)
    }
}

/// A coarse mask with its fine partner; both share dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub coarse: BinaryMask,
    pub fine: BinaryMask,
}

impl PairSample {
    pub fn new(coarse: BinaryMask, fine: BinaryMask) -> Result<Self> {
        if coarse.dims() != fine.dims() {
            return Err(Error::Shape(format!(
                "coarse {:?} and fine {:?} masks differ in size",
                coarse.dims(),
                fine.dims()
            )));
        }
        Ok(Self { coarse, fine })
    }

    /// Pairs a fine mask with its morphological coarsening.
    pub fn from_fine(fine: BinaryMask) -> Result<Self> {
        Ok(Self {
            coarse: coarsen(&fine)?,
            fine,
        })
    }
}

/// A manifest bound to its directory on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn dir_for(root: impl AsRef<Path>, name: &str) -> PathBuf {
        root.as_ref().join(name)
    }

    pub fn create(dir: impl Into<PathBuf>, manifest: DatasetManifest) -> Result<Self> {
        let dir = dir.into();
        for sub in ["images", "fine", "coarse"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let ds = Self { dir, manifest };
        ds.save()?;
        Ok(ds)
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::NotFound(format!(
                "dataset manifest {}",
                path.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir,
            manifest: DatasetManifest::from_jsonl(&text)?,
        })
    }

    pub fn save(&self) -> Result<()> {
        self.manifest.validate()?;
        let path = self.dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.manifest.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(&path, e))
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn load_image(&self, r: &PatchRecord) -> Result<RgbImage> {
        let p = self.path(&r.image_path);
        Ok(image::open(&p)
            .map_err(|source| Error::Image {
                path: Some(p.clone()),
                source,
            })?
            .to_rgb8())
    }

    pub fn load_fine(&self, r: &PatchRecord) -> Result<BinaryMask> {
        BinaryMask::load_png(self.path(&r.fine_mask_path))
    }

    pub fn load_coarse(&self, r: &PatchRecord) -> Result<BinaryMask> {
        BinaryMask::load_png(self.path(&r.coarse_mask_path))
    }

    /// Coarse/fine pairs of one split, in manifest order.
    pub fn pairs(&self, split: Split) -> Result<Vec<PairSample>> {
        self.manifest
            .split(split)
            .map(|r| PairSample::new(self.load_coarse(r)?, self.load_fine(r)?))
            .collect()
    }

    /// Fine mask and RGB patch of every record in one split.
    pub fn mask_rgb_pairs(&self, split: Split) -> Result<Vec<(BinaryMask, RgbImage)>> {
        self.manifest
            .split(split)
            .map(|r| Ok((self.load_fine(r)?, self.load_image(r)?)))
            .collect()
    }
}

/// Luminance conversion with 0.299/0.587/0.114 weights, rounded to nearest.
pub fn to_gray(rgb: &RgbImage) -> GrayImage {
    GrayImage::from_fn(rgb.width(), rgb.height(), |x, y| {
        let Rgb([r, g, b]) = *rgb.get_pixel(x, y);
        let v = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// One retained tile of a source image.
#[derive(Clone, Debug)]
pub struct Patch {
    pub image: RgbImage,
    /// `(row, col)` of the top-left pixel.
    pub origin: (usize, usize),
    pub air_fraction: f64,
}

/// Tiles `source` on a non-overlapping grid and keeps every patch whose air
/// share is at most `air_limit`.
pub fn extract_patches(
    source: &RgbImage,
    patch_w: usize,
    patch_h: usize,
    air_threshold: u8,
    air_limit: f64,
) -> Result<Vec<Patch>> {
    if patch_w == 0 || patch_h == 0 {
        return Err(Error::invalid("patch dimensions must be positive"));
    }
    if !(air_limit > 0.0 && air_limit <= 1.0) {
        return Err(Error::invalid(format!("air limit {air_limit} not in (0, 1]")));
    }
    let (sw, sh) = (source.width() as usize, source.height() as usize);
    if sw < patch_w || sh < patch_h {
        return Err(Error::invalid(format!(
            "source {sw}x{sh} is smaller than one {patch_w}x{patch_h} patch"
        )));
    }
    let mut out = Vec::new();
    for row in (0..=sh - patch_h).step_by(patch_h) {
        for col in (0..=sw - patch_w).step_by(patch_w) {
            let tile = image::imageops::crop_imm(
                source,
                col as u32,
                row as u32,
                patch_w as u32,
                patch_h as u32,
            )
            .to_image();
            let mask = binarize_grayscale(&to_gray(&tile), air_threshold)?;
            let air_fraction = (mask.len() - mask.count_ones()) as f64 / mask.len() as f64;
            if air_fraction <= air_limit {
                out.push(Patch {
                    image: tile,
                    origin: (row, col),
                    air_fraction,
                });
            }
        }
    }
    Ok(out)
}

/// Knobs for [`ingest`].
#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub stain: Stain,
    pub patch_width: usize,
    pub patch_height: usize,
    /// Overrides the stain default.
    pub threshold: Option<u8>,
    pub air_limit: f64,
}

impl IngestOptions {
    pub fn new(stain: Stain) -> Self {
        Self {
            stain,
            patch_width: 1024,
            patch_height: 512,
            threshold: None,
            air_limit: DEFAULT_AIR_LIMIT,
        }
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Tiles every image in `source_dir` (sorted by file name) into a new dataset
/// at `out_dir`, writing patches and their fine masks. All records start in
/// the training split.
pub fn ingest(
    source_dir: impl AsRef<Path>,
    out_dir: impl Into<PathBuf>,
    name: &str,
    opts: &IngestOptions,
) -> Result<Dataset> {
    let source_dir = source_dir.as_ref();
    if !source_dir.is_dir() {
        return Err(Error::NotFound(format!(
            "source directory {}",
            source_dir.display()
        )));
    }
    let mut sources: Vec<PathBuf> = fs::read_dir(source_dir)
        .map_err(|e| Error::io(source_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    sources.sort();
    let mut manifest = DatasetManifest::new(name, opts.stain, opts.patch_width, opts.patch_height);
    if let Some(t) = opts.threshold {
        manifest.air_threshold = t;
    }
    let ds = Dataset::create(out_dir, manifest)?;
    let mut records = Vec::new();
    for src in &sources {
        let source_id = src
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("source")
            .to_string();
        let img = image::open(src)
            .map_err(|source| Error::Image {
                path: Some(src.clone()),
                source,
            })?
            .to_rgb8();
        let patches = extract_patches(
            &img,
            opts.patch_width,
            opts.patch_height,
            ds.manifest.air_threshold,
            opts.air_limit,
        )?;
        for p in patches {
            let rec = PatchRecord::new(
                format!("{source_id}_r{}_c{}", p.origin.0, p.origin.1),
                source_id.clone(),
                p.origin,
            );
            let path = ds.path(&rec.image_path);
            p.image.save(&path).map_err(|source| Error::Image {
                path: Some(path.clone()),
                source,
            })?;
            records.push(rec);
        }
    }
    let mut ds = ds;
    ds.manifest.records = records;
    ds.save()?;
    build_ground_truth(&ds)?;
    Ok(ds)
}

/// Writes `binarize(gray(patch), air_threshold)` as each record's fine mask.
pub fn build_ground_truth(ds: &Dataset) -> Result<()> {
    for r in &ds.manifest.records {
        let img = ds.load_image(r)?;
        let mask = binarize_grayscale(&to_gray(&img), ds.manifest.air_threshold)?;
        mask.save_png(ds.path(&r.fine_mask_path))?;
    }
    Ok(())
}

/// Writes `coarsen(fine)` as each record's coarse mask.
pub fn build_pairs(ds: &Dataset) -> Result<()> {
    for r in &ds.manifest.records {
        let fine = ds.load_fine(r)?;
        coarsen(&fine)?.save_png(ds.path(&r.coarse_mask_path))?;
    }
    Ok(())
}

/// Moves exactly `n_test` records to the test split, keeping each source's
/// records together. Groups are visited in a seeded shuffle; if no set of
/// whole groups sums to `n_test`, the error names the group that would have to
/// be split.
pub fn split_manifest(manifest: &DatasetManifest, n_test: usize, seed: u64) -> Result<DatasetManifest> {
    let total = manifest.records.len();
    if n_test >= total {
        return Err(Error::invalid(format!(
            "n_test {n_test} must be below the {total} available records"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry(r.source_id.as_str()).or_default().push(i);
    }
    let mut order: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let chosen = choose_groups(&order.iter().map(|(_, g)| g.len()).collect::<Vec<_>>(), n_test)
        .ok_or_else(|| {
            // The first group, in visiting order, that overflows the target.
            let mut acc = 0;
            let (name, g) = order
                .iter()
                .find(|(_, g)| {
                    if acc + g.len() > n_test {
                        true
                    } else {
                        acc += g.len();
                        false
                    }
                })
                .unwrap_or(&order[0]);
            Error::UnsplittableGroup {
                group: name.to_string(),
                size: g.len(),
                n_test,
            }
        })?;
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = Split::Train;
    }
    for gi in chosen {
        for &ri in &order[gi].1 {
            out.records[ri].split = Split::Test;
        }
    }
    Ok(out)
}

/// Indices of groups whose sizes sum exactly to `target`, preferring earlier
/// groups (greedy first, then an exact subset-sum).
fn choose_groups(sizes: &[usize], target: usize) -> Option<Vec<usize>> {
    let mut acc = 0;
    let mut greedy = Vec::new();
    for (i, &s) in sizes.iter().enumerate() {
        if acc + s <= target {
            acc += s;
            greedy.push(i);
        }
        if acc == target {
            return Some(greedy);
        }
    }
    // reach[s] = (group, previous sum) of the first way found to total s.
    let mut reach: Vec<Option<(usize, usize)>> = vec![None; target + 1];
    let mut reachable = vec![false; target + 1];
    reachable[0] = true;
    for (i, &s) in sizes.iter().enumerate() {
        if s == 0 || s > target {
            continue;
        }
        for sum in (s..=target).rev() {
            if !reachable[sum] && reachable[sum - s] {
                reachable[sum] = true;
                reach[sum] = Some((i, sum - s));
            }
        }
    }
    if !reachable[target] {
        return None;
    }
    let mut picked = Vec::new();
    let mut s = target;
    while s > 0 {
        let (i, prev) = reach[s].expect("reachable sums have a predecessor");
        picked.push(i);
        s = prev;
    }
    picked.sort_unstable();
    Some(picked)
}

/// Procedural fine masks: smooth blob/ridge fields with fine-grained texture,
/// thresholded so tissue fractions spread over `[0.1, 0.9]`. Mask `i` depends
/// only on `(seed, i)`.
pub fn synth_corpus(seed: u64, n: usize, width: usize, height: usize) -> Result<Vec<BinaryMask>> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("corpus dimensions must be positive"));
    }
    (0..n).map(|i| synth_mask(seed, i as u64, width, height)).collect()
}

fn synth_mask(seed: u64, index: u64, w: usize, h: usize) -> Result<BinaryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let target = rng.random_range(0.1..0.9);
    let scale = w.min(h) as f64;
    let mut field = vec![0.0f64; w * h];

    let blobs = rng.random_range(3..9);
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let sx = rng.random_range(0.12..0.45) * scale;
        let sy = rng.random_range(0.12..0.45) * scale;
        let amp = rng.random_range(0.5..1.5);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / sx;
                let dy = (y as f64 - cy) / sy;
                field[y * w + x] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }
    // A low-frequency ridge along a random direction.
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU / scale;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let ridge = rng.random_range(0.1..0.5);
    for y in 0..h {
        for x in 0..w {
            let t = x as f64 * theta.cos() + y as f64 * theta.sin();
            field[y * w + x] += ridge * (freq * t + phase).sin();
        }
    }
    // Fine texture: 3x3 box-blurred white noise.
    let noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    let amp = rng.random_range(0.15..0.35);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    s += noise[yy * w + xx];
                    n += 1.0;
                }
            }
            field[y * w + x] += amp * s / n;
        }
    }
    let mut sorted = field.clone();
    sorted.sort_by(f64::total_cmp);
    let cut_index = ((1.0 - target) * (w * h) as f64).round() as usize;
    let cut = sorted[cut_index.min(w * h - 1)];
    BinaryMask::from_bits(w, h, field.iter().map(|&v| (v >= cut) as u8).collect())
}

/// Renders an H&E-like RGB patch for a mask: near-white air, pink/purple
/// tissue with smooth shading. Grayscale of tissue stays below 204 and of air
/// above it, so thresholding the render recovers the mask.
pub fn render_tissue_rgb(mask: &BinaryMask, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = mask.dims();
    let fx = rng.random_range(0.5..2.0) * std::f64::consts::TAU / w as f64;
    let fy = rng.random_range(0.5..2.0) * std::f64::consts::TAU / h as f64;
    let ph = rng.random_range(0.0..std::f64::consts::TAU);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        if mask.get(x as usize, y as usize) {
            let shade = 10.0 * (fx * x as f64 + ph).sin() * (fy * y as f64).cos();
            let jitter: f64 = rng.random_range(-3.0..3.0);
            let px = |base: f64| (base + shade + jitter).round().clamp(0.0, 255.0) as u8;
            Rgb([px(212.0), px(138.0), px(184.0)])
        } else {
            let j: f64 = rng.random_range(-2.0..2.0);
            let px = |base: f64| (base + j).round().clamp(0.0, 255.0) as u8;
            Rgb([px(243.0), px(242.0), px(246.0)])
        }
    })
}

/// Builds a complete procedural dataset: rendered patches, fine masks from
/// thresholding, coarse partners, and a seeded split with `n_test` records.
pub fn synth_dataset(
    dir: impl Into<PathBuf>,
    name: &str,
    n: usize,
    width: usize,
    height: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    let masks = synth_corpus(seed, n, width, height)?;
    let mut manifest = DatasetManifest::new(name, Stain::He, width, height);
    manifest.records = (0..n)
        .map(|i| PatchRecord::new(format!("synth_{i:05}"), format!("synth_{i:05}"), (0, 0)))
        .collect();
    let mut ds = Dataset::create(dir, manifest)?;
    for (i, (r, m)) in ds.manifest.records.iter().zip(&masks).enumerate() {
        let rgb = render_tissue_rgb(m, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let p = ds.path(&r.image_path);
        rgb.save(&p).map_err(|source| Error::Image {
            path: Some(p.clone()),
            source,
        })?;
    }
    build_ground_truth(&ds)?;
    build_pairs(&ds)?;
    if n_test > 0 {
        ds.manifest = split_manifest(&ds.manifest, n_test, seed)?;
    }
    ds.save()?;
    Ok(ds)
}

/// Reads every line of a manifest without validating; used by tools that
/// only need record ids.
pub fn manifest_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for line in BufReader::new(f).lines().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PatchRecord = serde_json::from_str(&line)?;
        ids.push(r.id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white(w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([255, 255, 255]))
    }

    #[test]
    fn grid_candidates() {
        // 2048 wide, 1024 tall, tiled into 1024x512 patches: a 2x2 grid.
        let mut src = white(2048, 1024);
        for p in src.pixels_mut() {
            *p = Rgb([100, 60, 120]);
        }
        let patches = extract_patches(&src, 1024, 512, 204, 0.85).unwrap();
        assert_eq!(patches.len(), 4);
        let origins: Vec<_> = patches.iter().map(|p| p.origin).collect();
        assert_eq!(origins, vec![(0, 0), (0, 1024), (512, 0), (512, 1024)]);
    }

    #[test]
    fn white_source_keeps_nothing() {
        assert!(extract_patches(&white(256, 128), 64, 32, 204, 0.85).unwrap().is_empty());
    }

    #[test]
    fn only_tissue_quadrant_survives() {
        let mut src = white(200, 100);
        for y in 0..50 {
            for x in 100..200 {
                src.put_pixel(x, y, Rgb([150, 80, 160]));
            }
        }
        let patches = extract_patches(&src, 50, 25, 204, 0.85).unwrap();
        let origins: Vec<_> = patches.iter().map(|p| p.origin).collect();
        assert_eq!(origins, vec![(0, 100), (0, 150), (25, 100), (25, 150)]);
        assert!(patches.iter().all(|p| p.air_fraction == 0.0));
    }

    #[test]
    fn exactly_85_percent_air_is_kept() {
        // 20x10 patch: 170 air pixels and 30 tissue pixels.
        let mut src = white(20, 10);
        for i in 0..30u32 {
            src.put_pixel(i % 20, i / 20, Rgb([0, 0, 0]));
        }
        let kept = extract_patches(&src, 20, 10, 204, 0.85).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].air_fraction, 0.85);
        // One more air pixel tips it over.
        src.put_pixel(9, 1, Rgb([255, 255, 255]));
        assert!(extract_patches(&src, 20, 10, 204, 0.85).unwrap().is_empty());
    }

    #[test]
    fn source_smaller_than_patch() {
        assert!(extract_patches(&white(10, 10), 20, 5, 204, 0.85).is_err());
        assert!(extract_patches(&white(40, 40), 20, 5, 204, 0.0).is_err());
    }

    #[test]
    fn gray_weights() {
        let img = RgbImage::from_pixel(1, 1, Rgb([255, 0, 0]));
        assert_eq!(to_gray(&img).get_pixel(0, 0)[0], 76);
        let img = RgbImage::from_pixel(1, 1, Rgb([10, 200, 30]));
        assert_eq!(to_gray(&img).get_pixel(0, 0)[0], (2.99f64 + 117.4 + 3.42).round() as u8);
    }

    fn manifest_with(sources: &[(&str, usize)]) -> DatasetManifest {
        let mut m = DatasetManifest::new("t", Stain::He, 8, 8);
        for (s, n) in sources {
            for i in 0..*n {
                m.records.push(PatchRecord::new(format!("{s}_{i}"), *s, (0, 0)));
            }
        }
        m
    }

    #[test]
    fn split_ten_sources() {
        let names: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let m = manifest_with(&names.iter().map(|s| (s.as_str(), 1)).collect::<Vec<_>>());
        let a = split_manifest(&m, 3, 7).unwrap();
        assert_eq!(a.split(Split::Test).count(), 3);
        assert_eq!(a.split(Split::Train).count(), 7);
        assert_eq!(a, split_manifest(&m, 3, 7).unwrap());
        assert!(split_manifest(&m, 10, 7).is_err());
    }

    #[test]
    fn split_prad_scale() {
        // 6,983 records over 50 sources of uneven size.
        let mut sizes = vec![140usize; 49];
        sizes.push(6983 - 140 * 49);
        let names: Vec<String> = (0..50).map(|i| format!("slide{i:02}")).collect();
        let spec: Vec<_> = names.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
        let m = manifest_with(&spec);
        assert_eq!(m.records.len(), 6983);
        let err = split_manifest(&m, 1000, 1).unwrap_err();
        assert!(matches!(err, Error::UnsplittableGroup { .. }), "{err}");

        let singles: Vec<String> = (0..6983).map(|i| format!("p{i}")).collect();
        let m = manifest_with(&singles.iter().map(|s| (s.as_str(), 1)).collect::<Vec<_>>());
        let s = split_manifest(&m, 1000, 1).unwrap();
        assert_eq!(s.split(Split::Train).count(), 5983);
    }

    #[test]
    fn split_keeps_groups_whole() {
        let m = manifest_with(&[("a", 3), ("b", 2), ("c", 4), ("d", 1), ("e", 5)]);
        for seed in 0..20 {
            let s = split_manifest(&m, 6, seed).unwrap();
            assert_eq!(s.split(Split::Test).count(), 6);
            let test_sources: std::collections::HashSet<_> =
                s.split(Split::Test).map(|r| &r.source_id).collect();
            assert!(s
                .split(Split::Train)
                .all(|r| !test_sources.contains(&r.source_id)));
        }
    }

    #[test]
    fn subset_sum_fallback() {
        assert_eq!(choose_groups(&[4, 3, 3], 6), Some(vec![1, 2]));
        assert_eq!(choose_groups(&[4, 4], 6), None);
    }

    #[test]
    fn corpus_determinism_and_spread() {
        assert!(synth_corpus(1, 0, 32, 16).unwrap().is_empty());
        let a = synth_corpus(3, 6, 32, 16).unwrap();
        assert_eq!(a, synth_corpus(3, 6, 32, 16).unwrap());
        assert_ne!(a, synth_corpus(4, 6, 32, 16).unwrap());
    }

    #[test]
    fn rendered_patch_thresholds_back_to_mask() {
        let masks = synth_corpus(9, 3, 48, 24).unwrap();
        for (i, m) in masks.iter().enumerate() {
            let rgb = render_tissue_rgb(m, i as u64);
            assert_eq!(&binarize_grayscale(&to_gray(&rgb), 204).unwrap(), m);
        }
    }

    #[test]
    fn manifest_jsonl_round_trip() {
        let m = split_manifest(&manifest_with(&[("a", 2), ("b", 3)]), 2, 0).unwrap();
        let text = m.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().nth(1).unwrap().starts_with("{\"id\":"));
        assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
    }
}
