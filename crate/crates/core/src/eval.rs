//! Distribution-similarity metrics between real and generated masks.
//!
//! FID is computed on mask embeddings. The default embedder is a small
//! untrained convolutional network with fixed weights; any other feature
//! extractor can be plugged in through [`Embedder`]. K-S and K-L compare the
//! per-mask tissue-fraction distributions.

use image::{Rgb, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::infer::{infer_fine, mask_to_tensor, FineOptions};
use crate::checkpoint::Checkpoint;
use crate::mask::{tissue_fraction, BinaryMask};
use crate::tensor::Tensor;

/// Covariance regularizer added to both diagonals.
pub const FID_EPS: f64 = 1e-6;
/// Histogram smoothing mass added to every bin.
pub const KL_EPS: f64 = 1e-10;
pub const KL_BINS: usize = 64;

/// Maps a mask to a fixed-length feature vector.
pub trait Embedder: Send + Sync {
    /// Identifies the extractor and its weights.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, mask: &BinaryMask) -> Result<Vec<f64>>;
}

/// Fixed random-weight conv net: masks are resized to 64×64, passed through
/// three 4×4 stride-2 convolutions (8, 16, 32 channels, ReLU), and the final
/// maps are average- and max-pooled per channel into 64 features.
pub struct ConvEmbedder {
    id: String,
    layers: Vec<(Tensor, Tensor)>,
}

pub const EMBED_SIDE: usize = 64;
pub const DEFAULT_EMBED_SEED: u64 = 0x00E3_BED5;

impl ConvEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 1;
        for cout in [8usize, 16, 32] {
            let fan_in = (cin * 16) as f64;
            let w = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let b = Normal::new(0.0, 0.1).expect("positive std");
            let wd = (0..cout * cin * 16).map(|_| w.sample(&mut rng)).collect();
            let bd = (0..cout).map(|_| b.sample(&mut rng)).collect();
            layers.push((
                Tensor::from_vec([cout, cin, 4, 4], wd).expect("weight shape"),
                Tensor::from_vec([1, cout, 1, 1], bd).expect("bias shape"),
            ));
            cin = cout;
        }
        Self {
            id: format!("conv64-seed{seed}"),
            layers,
        }
    }
}

impl Default for ConvEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBED_SEED)
    }
}

impl Embedder for ConvEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        64
    }

    fn embed(&self, mask: &BinaryMask) -> Result<Vec<f64>> {
        let m = mask.resize_nearest(EMBED_SIDE, EMBED_SIDE)?;
        let mut tape = Tape::new();
        let mut h = tape.constant(mask_to_tensor(&m));
        for (w, b) in &self.layers {
            let w = tape.constant(w.clone());
            let b = tape.constant(b.clone());
            let c = tape.conv2d(h, w, Some(b), 2, 1)?;
            h = tape.relu(c);
        }
        let t = tape.value(h);
        let [_, c, hh, ww] = t.shape();
        let plane = hh * ww;
        let mut out = Vec::with_capacity(2 * c);
        for ch in t.data().chunks(plane) {
            out.push(ch.iter().sum::<f64>() / plane as f64);
        }
        for ch in t.data().chunks(plane) {
            out.push(ch.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        Ok(out)
    }
}

/// Rows of embeddings from one extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `n × d`.
    pub matrix: DMatrix<f64>,
    pub extractor_id: String,
    /// One source label per row, e.g. `real` or a method name.
    pub labels: Vec<String>,
}

impl EmbeddingSet {
    pub fn from_rows(rows: &[Vec<f64>], extractor_id: &str, label: &str) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("embedding rows differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(Self {
            matrix: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
            extractor_id: extractor_id.into(),
            labels: vec![label.into(); rows.len()],
        })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            matrix: self.matrix.select_rows(rows),
            extractor_id: self.extractor_id.clone(),
            labels: rows.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Stacks `other` under `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "embedding dims {} and {} differ",
                self.dim(),
                other.dim()
            )));
        }
        let n = self.n();
        let matrix = DMatrix::from_fn(n + other.n(), self.dim(), |i, j| {
            if i < n {
                self.matrix[(i, j)]
            } else {
                other.matrix[(i - n, j)]
            }
        });
        let mut labels = self.labels.clone();
        labels.extend(other.labels.iter().cloned());
        Ok(Self {
            matrix,
            extractor_id: self.extractor_id.clone(),
            labels,
        })
    }
}

pub fn embed(masks: &[BinaryMask], embedder: &dyn Embedder, label: &str) -> Result<EmbeddingSet> {
    let rows = masks
        .iter()
        .map(|m| embedder.embed(m))
        .collect::<Result<Vec<_>>>()?;
    if masks.is_empty() {
        return Ok(EmbeddingSet {
            matrix: DMatrix::zeros(0, embedder.dim()),
            extractor_id: embedder.id().into(),
            labels: Vec::new(),
        });
    }
    EmbeddingSet::from_rows(&rows, embedder.id(), label)
}

/// Column means and unbiased (`n − 1`) covariance.
pub fn moments(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 embeddings for a covariance, got {n}"
        )));
    }
    let mu = DVector::from_fn(x.ncols(), |j, _| x.column(j).mean());
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians. Both covariances get `+εI`, and
/// the cross term is `Tr((A^½ B A^½)^½)` with negative eigenvalues clipped.
pub fn fid_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Shape("moment dimensions disagree".into()));
    }
    let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let a = cov_a + &eye;
    let b = cov_b + &eye;
    let ra = sym_sqrt(&a);
    let m = &ra * &b * &ra;
    let cross: f64 = SymmetricEigen::new((&m + m.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = mu_a - mu_b;
    let v = diff.dot(&diff) + a.trace() + b.trace() - 2.0 * cross;
    Ok(v.max(0.0))
}

pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dims {} and {} differ",
            a.dim(),
            b.dim()
        )));
    }
    let (ma, ca) = moments(&a.matrix)?;
    let (mb, cb) = moments(&b.matrix)?;
    fid_from_moments(&ma, &ca, &mb, &cb)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("K-S needs two non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    Ok(d)
}

/// `Σ p ln(p/q)` over `bins` equal-width bins spanning both samples. Every bin
/// gets `ε` before normalizing.
pub fn kl(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(Error::invalid("K-L needs two non-empty samples and bins > 0"));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid("K-L samples must be finite"));
    }
    let hist = |xs: &[f64]| {
        let mut h = vec![KL_EPS; bins];
        for &x in xs {
            let k = if hi > lo {
                (((x - lo) / (hi - lo)) * bins as f64) as usize
            } else {
                0
            };
            h[k.min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        let total: f64 = h.iter().sum();
        h.into_iter().map(|v| v / total).collect::<Vec<_>>()
    };
    let (p, q) = (hist(a), hist(b));
    Ok(p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0))
}

pub fn tissue_fractions(masks: &[BinaryMask]) -> Vec<f64> {
    masks.iter().map(tissue_fraction).collect()
}

#[derive(Clone, Debug)]
pub struct TsneOptions {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl TsneOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tsne {
    pub coords: Vec<[f64; 2]>,
    /// Perplexity actually used; lower than requested for tiny inputs.
    pub perplexity: f64,
    /// `(iteration, KL(P‖Q))`, sampled every 50 iterations.
    pub kl_trace: Vec<(usize, f64)>,
}

fn row_affinities(d2: &[f64], i: usize, target_entropy: f64) -> Vec<f64> {
    let n = d2.len();
    let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
    let mut p = vec![0.0; n];
    for _ in 0..100 {
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-d2[j] * beta).exp() };
            sum += p[j];
        }
        if sum <= 0.0 {
            // beta far too large; every neighbour underflowed
            hi = beta;
            beta = if lo > 0.0 { (lo + hi) / 2.0 } else { beta / 2.0 };
            continue;
        }
        let mut h = 0.0;
        for j in 0..n {
            p[j] /= sum;
            if p[j] > 0.0 {
                h -= p[j] * p[j].ln();
            }
        }
        let diff = h - target_entropy;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
    }
    p
}

/// Exact t-SNE to two dimensions.
pub fn tsne_project(e: &DMatrix<f64>, opts: &TsneOptions) -> Result<Tsne> {
    let n = e.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("t-SNE needs at least 2 points, got {n}")));
    }
    let mut perplexity = opts.perplexity;
    let cap = (n - 1) as f64 / 3.0;
    if perplexity > cap {
        let reduced = cap.max(1.0);
        log::warn!("t-SNE: perplexity {perplexity} too large for {n} points; using {reduced}");
        perplexity = reduced;
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (e.row(i) - e.row(j)).norm_squared();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    // Scale distances so the bandwidth search starts near beta = 1.
    let mean_d2 = d2.iter().sum::<f64>() / (n * n - n).max(1) as f64;
    if mean_d2 > 0.0 {
        d2.iter_mut().for_each(|v| *v /= mean_d2);
    }
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = row_affinities(&d2[i * n..(i + 1) * n], i, target);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut pj = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pj[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init = Normal::new(0.0, 1e-2).expect("positive std");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
        .collect();
    let lr = opts
        .learning_rate
        .unwrap_or_else(|| (n as f64 / opts.exaggeration / 4.0).max(50.0));
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut trace = Vec::new();

    for it in 0..opts.iterations {
        let exag = if it < opts.exaggeration_iters { opts.exaggeration } else { 1.0 };
        let momentum = if it < opts.exaggeration_iters { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                zsum += 2.0 * v;
            }
        }
        if it % 50 == 0 || it + 1 == opts.iterations {
            let mut kl = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let q = (num[i * n + j] / zsum).max(1e-12);
                        kl += pj[i * n + j] * (pj[i * n + j] / q).ln();
                    }
                }
            }
            trace.push((it, kl));
        }
        for i in 0..n {
            let mut g = [0.0f64; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exag * pj[i * n + j] - w / zsum) * w;
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                gains[i][k] = if (g[k] > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                update[i][k] = momentum * update[i][k] - lr * gains[i][k] * g[k];
            }
        }
        for i in 0..n {
            y[i][0] += update[i][0];
            y[i][1] += update[i][1];
        }
        let cx = y.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|p| p[1]).sum::<f64>() / n as f64;
        for p in &mut y {
            p[0] -= cx;
            p[1] -= cy;
        }
    }
    Ok(Tsne {
        coords: y,
        perplexity,
        kl_trace: trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub n_real: usize,
    pub n_synth: usize,
    /// Absent when either population has fewer than `min_count` points.
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAnalysis {
    pub grid: [usize; 2],
    pub min_count: usize,
    /// `[x_min, x_max, y_min, y_max]` over all projected points.
    pub bounds: [f64; 4],
    pub cells: Vec<GridCell>,
    /// FID over all masks, without gridding.
    pub global_fid: f64,
    /// Plain mean of the present cell FIDs.
    pub cell_average: Option<f64>,
    /// Mean of present cell FIDs weighted by their point counts.
    pub cell_weighted_average: Option<f64>,
}

fn cell_of(v: f64, lo: f64, hi: f64, k: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * k as f64) as usize).min(k - 1)
}

/// Splits the joint projection's bounding box into `rows × cols` equal cells
/// and computes FID between real and synthetic embeddings inside each.
/// `coords` lists the real points first, then the synthetic ones.
pub fn grid_similarity(
    real: &EmbeddingSet,
    synth: &EmbeddingSet,
    coords: &[[f64; 2]],
    grid: [usize; 2],
    min_count: usize,
) -> Result<GridAnalysis> {
    let (nr, ns) = (real.n(), synth.n());
    if coords.len() != nr + ns {
        return Err(Error::Shape(format!(
            "{} coordinates for {} embeddings",
            coords.len(),
            nr + ns
        )));
    }
    let [rows, cols] = grid;
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("grid must have at least one cell"));
    }
    let min_count = min_count.max(2);
    let fold = |k: usize, f: fn(f64, f64) -> f64, init: f64| {
        coords.iter().map(|c| c[k]).fold(init, f)
    };
    let bounds = [
        fold(0, f64::min, f64::INFINITY),
        fold(0, f64::max, f64::NEG_INFINITY),
        fold(1, f64::min, f64::INFINITY),
        fold(1, f64::max, f64::NEG_INFINITY),
    ];
    let mut members = vec![(Vec::new(), Vec::new()); rows * cols];
    for (i, c) in coords.iter().enumerate() {
        let col = cell_of(c[0], bounds[0], bounds[1], cols);
        let row = cell_of(c[1], bounds[2], bounds[3], rows);
        let cell = &mut members[row * cols + col];
        if i < nr {
            cell.0.push(i);
        } else {
            cell.1.push(i - nr);
        }
    }
    let (w, h) = (
        (bounds[1] - bounds[0]) / cols as f64,
        (bounds[3] - bounds[2]) / rows as f64,
    );
    let mut cells = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (ri, si) = &members[row * cols + col];
            let fid = if ri.len() >= min_count && si.len() >= min_count {
                Some(fid(&real.select(ri), &synth.select(si))?)
            } else {
                None
            };
            cells.push(GridCell {
                row,
                col,
                x_range: [bounds[0] + col as f64 * w, bounds[0] + (col + 1) as f64 * w],
                y_range: [bounds[2] + row as f64 * h, bounds[2] + (row + 1) as f64 * h],
                n_real: ri.len(),
                n_synth: si.len(),
                fid,
            });
        }
    }
    let present: Vec<&GridCell> = cells.iter().filter(|c| c.fid.is_some()).collect();
    let cell_average = (!present.is_empty())
        .then(|| present.iter().map(|c| c.fid.unwrap_or(0.0)).sum::<f64>() / present.len() as f64);
    let weight: usize = present.iter().map(|c| c.n_real + c.n_synth).sum();
    let cell_weighted_average = (!present.is_empty()).then(|| {
        present
            .iter()
            .map(|c| c.fid.unwrap_or(0.0) * (c.n_real + c.n_synth) as f64)
            .sum::<f64>()
            / weight as f64
    });
    Ok(GridAnalysis {
        grid,
        min_count,
        bounds,
        cells,
        global_fid: fid(real, synth)?,
        cell_average,
        cell_weighted_average,
    })
}

/// Scatter plot of a projection with the grid overlaid. Real points are
/// drawn blue, synthetic points orange.
pub fn render_grid_plot(coords: &[[f64; 2]], n_real: usize, analysis: &GridAnalysis, size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let [x0, x1, y0, y1] = analysis.bounds;
    let margin = 8.0;
    let span = size as f64 - 2.0 * margin;
    let px = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            margin + (v - lo) / (hi - lo) * span
        } else {
            size as f64 / 2.0
        }
    };
    let grey = Rgb([170, 170, 170]);
    for k in 0..=analysis.grid[1] {
        let x = (margin + span * k as f64 / analysis.grid[1] as f64).round() as u32;
        for y in margin as u32..=(margin + span) as u32 {
            img.put_pixel(x.min(size - 1), y.min(size - 1), grey);
        }
    }
    for k in 0..=analysis.grid[0] {
        let y = (margin + span * k as f64 / analysis.grid[0] as f64).round() as u32;
        for x in margin as u32..=(margin + span) as u32 {
            img.put_pixel(x.min(size - 1), y.min(size - 1), grey);
        }
    }
    for (i, c) in coords.iter().enumerate() {
        let color = if i < n_real {
            Rgb([31, 119, 180])
        } else {
            Rgb([255, 127, 14])
        };
        let (cx, cy) = (px(c[0], x0, x1), px(c[1], y0, y1));
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (cx as i64 + dx, cy as i64 + dy);
                if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    /// `k × d`.
    pub centroids: DMatrix<f64>,
    /// Within-cluster sum of squares after each assignment pass.
    pub wcss: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITER: usize = 300;

/// Lloyd's algorithm seeded with `k` distinct random rows.
pub fn kmeans_cluster(e: &DMatrix<f64>, k: usize, seed: u64) -> Result<KMeans> {
    let n = e.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = sample(&mut rng, n, k).into_vec();
    let mut centroids = e.select_rows(&init);
    let mut assignments = vec![usize::MAX; n];
    let mut wcss = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITER {
        iterations += 1;
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let (best, dist) = (0..k)
                .map(|c| (c, (e.row(i) - centroids.row(c)).norm_squared()))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            total += dist;
        }
        wcss.push(total);
        if !changed {
            break;
        }
        for c in 0..k {
            let idx: Vec<usize> = (0..n).filter(|&i| assignments[i] == c).collect();
            // An emptied cluster keeps its previous centroid.
            if !idx.is_empty() {
                let rows = e.select_rows(&idx);
                for j in 0..e.ncols() {
                    centroids[(c, j)] = rows.column(j).mean();
                }
            }
        }
    }
    Ok(KMeans {
        assignments,
        centroids,
        wcss,
        iterations,
    })
}

/// One row of the similarity table; lower is better in every column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub dataset: String,
    pub ks: f64,
    pub kl: f64,
    pub fid: f64,
    pub n_real: usize,
    pub n_synth: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor_id: String,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Tab-separated `Method Dataset KS KL FID` table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("Method\tDataset\tKS\tKL\tFID\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                r.method, r.dataset, r.ks, r.kl, r.fid
            ));
        }
        s
    }
}

/// KS and KL on tissue fractions plus FID on embeddings.
pub fn evaluate_masks(
    method: &str,
    dataset: &str,
    real: &[BinaryMask],
    synth: &[BinaryMask],
    embedder: &dyn Embedder,
) -> Result<MetricRow> {
    let (fr, fs) = (tissue_fractions(real), tissue_fractions(synth));
    Ok(MetricRow {
        method: method.into(),
        dataset: dataset.into(),
        ks: ks(&fr, &fs)?,
        kl: kl(&fs, &fr, KL_BINS)?,
        fid: fid(&embed(real, embedder, "real")?, &embed(synth, embedder, method)?)?,
        n_real: real.len(),
        n_synth: synth.len(),
    })
}

/// Anything that turns a coarse mask into a fine mask.
pub trait CoarseToFine {
    fn name(&self) -> String;
    fn generate(&self, coarse: &BinaryMask, seed: u64) -> Result<BinaryMask>;
}

/// A trained mask checkpoint under a display name.
pub struct CheckpointModel<'a> {
    pub name: String,
    pub checkpoint: &'a Checkpoint,
}

impl CoarseToFine for CheckpointModel<'_> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn generate(&self, coarse: &BinaryMask, seed: u64) -> Result<BinaryMask> {
        let out = infer_fine(self.checkpoint, coarse, &FineOptions::new(seed))?;
        Ok(out.into_mask().expect("binarized output"))
    }
}

/// Generates from `coarse` with every model (record `i` uses `seed + i`) and
/// scores each against `fine`.
pub fn compare_models(
    dataset: &str,
    coarse: &[BinaryMask],
    fine: &[BinaryMask],
    models: &[&dyn CoarseToFine],
    embedder: &dyn Embedder,
    seed: u64,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for m in models {
        let synth = coarse
            .iter()
            .enumerate()
            .map(|(i, c)| m.generate(c, seed.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(evaluate_masks(&m.name(), dataset, fine, &synth, embedder)?);
    }
    Ok(MetricReport {
        extractor_id: embedder.id().into(),
        rows,
    })
}
