//! Training loops for the three model families.
//!
//! Every iteration takes a discriminator step, then a generator step, on a
//! batch drawn from a per-epoch seeded permutation. All randomness derives
//! from `(seed, epoch)` or `(seed, step)`, so a run resumed from any
//! checkpoint continues exactly as the uninterrupted run would.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{hex, Checkpoint, MetricRecord, ModelKind, Net, NetState};
use crate::data::PairSample;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::infer::{mask_to_tensor, rgb_to_tensor};
use crate::losses::{
    cyclegan_objective, hd_objective, pix2pix_objective, BoundDiscriminator, BoundGenerator,
    LossWeights, Phase, Terms,
};
use crate::mask::BinaryMask;
use crate::nets::{
    BoundParams, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
    MultiscaleDiscriminator, ParamSet,
};
use crate::optim::AdamConfig;
use crate::tensor::Tensor;

/// Network sizes. The defaults are desk-scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub gen_base: usize,
    pub unet_depth: usize,
    pub res_blocks: usize,
    pub dropout: f64,
    pub disc_base: usize,
    pub disc_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            gen_base: 32,
            unet_depth: 4,
            res_blocks: 4,
            dropout: 0.5,
            disc_base: 16,
            disc_layers: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs_const: usize,
    pub epochs_decay: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write `ckpt_<epoch>` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub patch_width: usize,
    pub patch_height: usize,
    pub nets: NetConfig,
    /// Stop after this many iterations even if epochs remain.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            epochs_const: 50,
            epochs_decay: 50,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 10,
            patch_width: 128,
            patch_height: 64,
            nets: NetConfig::default(),
            max_steps: None,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "lr0",
    "beta1",
    "beta2",
    "batch_size",
    "epochs_const",
    "epochs_decay",
    "lambda_l1",
    "lambda_cyc",
    "hd_mse",
    "hd_bce",
    "hd_feat_match",
    "seed",
    "checkpoint_every",
    "patch_width",
    "patch_height",
    "gen_base",
    "unet_depth",
    "res_blocks",
    "dropout",
    "disc_base",
    "disc_layers",
    "max_steps",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_const + self.epochs_decay
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.patch_width == 0 || self.patch_height == 0 {
            return Err(Error::invalid("patch dimensions must be positive"));
        }
        self.weights.validate()
    }

    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = key.trim();
        match k {
            "lr0" => self.lr0 = parse(k, value)?,
            "beta1" => self.beta1 = parse(k, value)?,
            "beta2" => self.beta2 = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "epochs_const" => self.epochs_const = parse(k, value)?,
            "epochs_decay" => self.epochs_decay = parse(k, value)?,
            "lambda_l1" => self.weights.lambda_l1 = parse(k, value)?,
            "lambda_cyc" => self.weights.lambda_cyc = parse(k, value)?,
            "hd_mse" => self.weights.hd.mse = parse(k, value)?,
            "hd_bce" => self.weights.hd.bce = parse(k, value)?,
            "hd_feat_match" => self.weights.hd.feat_match = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, value)?,
            "patch_width" => self.patch_width = parse(k, value)?,
            "patch_height" => self.patch_height = parse(k, value)?,
            "gen_base" => self.nets.gen_base = parse(k, value)?,
            "unet_depth" => self.nets.unet_depth = parse(k, value)?,
            "res_blocks" => self.nets.res_blocks = parse(k, value)?,
            "dropout" => self.nets.dropout = parse(k, value)?,
            "disc_base" => self.nets.disc_base = parse(k, value)?,
            "disc_layers" => self.nets.disc_layers = parse(k, value)?,
            "max_steps" => {
                self.max_steps = match value.trim() {
                    "" | "none" => None,
                    v => Some(parse(k, v)?),
                }
            }
            _ => return Err(Error::invalid(format!("unknown config key `{k}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file. Blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let w = &self.weights;
        let n = &self.nets;
        let values = [
            self.lr0.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.batch_size.to_string(),
            self.epochs_const.to_string(),
            self.epochs_decay.to_string(),
            w.lambda_l1.to_string(),
            w.lambda_cyc.to_string(),
            w.hd.mse.to_string(),
            w.hd.bce.to_string(),
            w.hd.feat_match.to_string(),
            self.seed.to_string(),
            self.checkpoint_every.to_string(),
            self.patch_width.to_string(),
            self.patch_height.to_string(),
            n.gen_base.to_string(),
            n.unet_depth.to_string(),
            n.res_blocks.to_string(),
            n.dropout.to_string(),
            n.disc_base.to_string(),
            n.disc_layers.to_string(),
            self.max_steps.map_or("none".into(), |s| s.to_string()),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }
}

/// Learning rate for `epoch`: `lr0` through the constant phase, then a
/// linear ramp that reaches 0 at the end of the decay phase.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let total = config.total_epochs();
    if epoch < config.epochs_const {
        config.lr0
    } else if epoch >= total {
        0.0
    } else {
        config.lr0 * (total - epoch) as f64 / config.epochs_decay as f64
    }
}

/// Where and how a run executes.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run directory for checkpoints, `metrics.log` and `summary.json`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this snapshot instead of initializing.
    pub resume: Option<Checkpoint>,
}

pub const METRICS_FILE: &str = "metrics.log";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "ckpt_final";
pub const DIVERGED_CHECKPOINT: &str = "ckpt_diverged";

pub fn checkpoint_path(run: &Path, epoch: usize) -> PathBuf {
    run.join(format!("ckpt_{epoch}"))
}

fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, salt));
    rng.set_stream(stream);
    rng
}

const SALT_ORDER: u64 = 1;
const SALT_STEP: u64 = 2;
const SALT_INIT: u64 = 3;

fn init_seed(seed: u64, role: u64) -> u64 {
    mix(mix(seed, SALT_INIT), role + 1)
}

fn generator_spec(kind: ModelKind, nets: &NetConfig, in_c: usize, out_c: usize) -> GeneratorSpec {
    let mut s = if kind == ModelKind::Hd {
        let mut s = GeneratorSpec::residual_global(in_c, out_c);
        s.depth = nets.res_blocks;
        s
    } else {
        let mut s = GeneratorSpec::unet(in_c, out_c);
        s.depth = nets.unet_depth;
        s.dropout = nets.dropout;
        s
    };
    s.base_width = nets.gen_base;
    s
}

fn discriminator_spec(nets: &NetConfig, in_c: usize, n_scales: usize) -> DiscriminatorSpec {
    DiscriminatorSpec {
        in_channels: in_c,
        n_layers: nets.disc_layers,
        base_width: nets.disc_base,
        n_scales,
    }
}

/// Freshly initialized networks for `kind`, with zero optimizer state.
pub fn init_checkpoint(kind: ModelKind, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let n = &config.nets;
    let seed = config.seed;
    let g = |role: u64, in_c, out_c| -> Result<Net> {
        Ok(Net::Generator(Generator::build(
            generator_spec(kind, n, in_c, out_c),
            init_seed(seed, role),
        )?))
    };
    let d = |role: u64, in_c, scales| -> Result<Net> {
        Ok(Net::Discriminator(Discriminator::build(
            discriminator_spec(n, in_c, scales),
            init_seed(seed, role),
        )?))
    };
    let nets = match kind {
        ModelKind::Pix2pix => vec![NetState::new("g", g(0, 1, 1)?), NetState::new("d", d(1, 2, 1)?)],
        ModelKind::Cyclegan => vec![
            NetState::new("g", g(0, 1, 1)?),
            NetState::new("f", g(1, 1, 1)?),
            NetState::new("d_x", d(2, 1, 1)?),
            NetState::new("d_y", d(3, 1, 1)?),
        ],
        ModelKind::Hd => {
            // Each scale is stored as its own single-scale network.
            let mut d0 = d(1, 4, 1)?;
            let mut d1 = d(2, 4, 1)?;
            for net in [&mut d0, &mut d1] {
                if let Net::Discriminator(x) = net {
                    x.spec.n_scales = 2;
                }
            }
            vec![
                NetState::new("g", g(0, 1, 3)?),
                NetState::new("d0", d0),
                NetState::new("d1", d1),
            ]
        }
    };
    Ok(Checkpoint {
        kind,
        config: config.clone(),
        epoch: 0,
        step: 0,
        nets,
        metrics: Vec::new(),
        note: None,
    })
}

/// Training inputs as tensors in `[-1, 1]`.
enum Samples {
    Pairs(Vec<(Tensor, Tensor)>),
    Rgb(Vec<(Tensor, Tensor)>),
}

impl Samples {
    fn len(&self) -> usize {
        match self {
            Samples::Pairs(v) | Samples::Rgb(v) => v.len(),
        }
    }
}

fn check_dims(config: &TrainConfig, w: usize, h: usize) -> Result<()> {
    if (w, h) != (config.patch_width, config.patch_height) {
        return Err(Error::Shape(format!(
            "sample is {w}x{h} but the config expects {}x{} patches",
            config.patch_width, config.patch_height
        )));
    }
    Ok(())
}

fn pair_samples(pairs: &[PairSample], config: &TrainConfig) -> Result<Samples> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (w, h) = p.fine.dims();
        check_dims(config, w, h)?;
        out.push((mask_to_tensor(&p.coarse), mask_to_tensor(&p.fine)));
    }
    Ok(Samples::Pairs(out))
}

fn rgb_samples(samples: &[(BinaryMask, RgbImage)], config: &TrainConfig) -> Result<Samples> {
    let mut out = Vec::with_capacity(samples.len());
    for (m, img) in samples {
        let (w, h) = m.dims();
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(Error::Shape(format!(
                "mask {w}x{h} and image {}x{} differ",
                img.width(),
                img.height()
            )));
        }
        check_dims(config, w, h)?;
        out.push((mask_to_tensor(m), rgb_to_tensor(img)));
    }
    Ok(Samples::Rgb(out))
}

/// Trains the conditional coarse-to-fine model.
pub fn train_pix2pix(pairs: &[PairSample], config: &TrainConfig, opts: &RunOptions) -> Result<Checkpoint> {
    run(ModelKind::Pix2pix, pair_samples(pairs, config)?, config, opts)
}

/// Trains the unpaired model. Coarse and fine masks are drawn from
/// independent permutations, so the pairing is never used.
pub fn train_cyclegan(pairs: &[PairSample], config: &TrainConfig, opts: &RunOptions) -> Result<Checkpoint> {
    run(ModelKind::Cyclegan, pair_samples(pairs, config)?, config, opts)
}

/// Trains the mask-to-RGB model on `(fine mask, RGB patch)` samples.
pub fn train_hd(samples: &[(BinaryMask, RgbImage)], config: &TrainConfig, opts: &RunOptions) -> Result<Checkpoint> {
    run(ModelKind::Hd, rgb_samples(samples, config)?, config, opts)
}

struct Log {
    file: Option<BufWriter<File>>,
}

impl Log {
    fn open(dir: Option<&Path>, existing: &[MetricRecord]) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { file: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(METRICS_FILE);
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            file: Some(BufWriter::new(f)),
        };
        for r in existing {
            log.push(r)?;
        }
        Ok(log)
    }

    fn push(&mut self, r: &MetricRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io(METRICS_FILE, e))?;
        }
        Ok(())
    }
}

fn run(kind: ModelKind, samples: Samples, config: &TrainConfig, opts: &RunOptions) -> Result<Checkpoint> {
    config.validate()?;
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("the training split is empty"));
    }
    let mut ck = match &opts.resume {
        Some(c) => {
            if c.kind != kind {
                return Err(Error::Checkpoint(format!(
                    "cannot resume a {} run from a {} checkpoint",
                    kind, c.kind
                )));
            }
            let mut c = c.clone();
            c.config = config.clone();
            c.note = None;
            c
        }
        None => init_checkpoint(kind, config)?,
    };
    let dir = opts.out_dir.as_deref();
    let mut log = Log::open(dir, &ck.metrics)?;
    let adam = config.adam();
    let iters = n.div_ceil(config.batch_size) as u64;
    let mut total = config.total_epochs() as u64 * iters;
    if let Some(m) = config.max_steps {
        total = total.min(m);
    }
    let mut order_epoch = usize::MAX;
    let mut order: (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());

    while ck.step < total {
        let epoch = (ck.step / iters) as usize;
        if epoch != order_epoch {
            let mut rng = stream_rng(config.seed, SALT_ORDER, epoch as u64);
            let mut a: Vec<usize> = (0..n).collect();
            a.shuffle(&mut rng);
            let mut b: Vec<usize> = (0..n).collect();
            b.shuffle(&mut rng);
            order = (a, b);
            order_epoch = epoch;
        }
        let off = (ck.step % iters) as usize * config.batch_size;
        let end = (off + config.batch_size).min(n);
        let batch: Vec<(usize, usize)> = (off..end).map(|i| (order.0[i], order.1[i])).collect();
        let lr = lr_at_epoch(config, epoch);
        let mut rng = stream_rng(config.seed, SALT_STEP, ck.step);

        let result = match (&samples, kind) {
            (Samples::Pairs(s), ModelKind::Pix2pix) => pix2pix_step(&mut ck, s, &batch, &mut rng, lr, &adam),
            (Samples::Pairs(s), ModelKind::Cyclegan) => cyclegan_step(&mut ck, s, &batch, &mut rng, lr, &adam),
            (Samples::Rgb(s), ModelKind::Hd) => hd_step(&mut ck, s, &batch, &mut rng, lr, &adam),
            _ => unreachable!("samples are built to match the model kind"),
        };
        let losses = match result {
            Ok(l) => l,
            Err(e @ Error::Diverged { .. }) => {
                log.flush()?;
                if let Some(dir) = dir {
                    ck.note = Some(e.to_string());
                    ck.save(dir.join(DIVERGED_CHECKPOINT))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let record = MetricRecord {
            step: ck.step,
            epoch,
            lr,
            losses,
        };
        log.push(&record)?;
        ck.metrics.push(record);
        ck.step += 1;
        if ck.step % iters == 0 {
            ck.epoch = (ck.step / iters) as usize;
            if let Some(dir) = dir {
                if config.checkpoint_every > 0 && ck.epoch % config.checkpoint_every == 0 {
                    log.flush()?;
                    ck.save(checkpoint_path(dir, ck.epoch))?;
                }
            }
        }
    }
    log.flush()?;
    if let Some(dir) = dir {
        ck.save(dir.join(FINAL_CHECKPOINT))?;
        write_summary(dir, &ck)?;
    }
    Ok(ck)
}

fn write_summary(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let summary = serde_json::json!({
        "kind": ck.kind,
        "epochs": ck.epoch,
        "steps": ck.step,
        "config_digest": ck.config_digest()?,
        "metrics_digest": ck.metrics_digest()?,
        "final": ck.metrics.last(),
    });
    let path = dir.join(SUMMARY_FILE);
    fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))
}

/// Running sums of named losses over a batch.
#[derive(Default)]
struct Acc {
    sums: IndexMap<String, f64>,
}

impl Acc {
    fn add(&mut self, key: &str, v: f64) {
        *self.sums.entry(key.to_string()).or_insert(0.0) += v;
    }

    fn add_terms(&mut self, tape: &Tape, terms: &Terms) {
        for (k, v) in &terms.components {
            self.add(k, tape.scalar(*v));
        }
    }

    fn finish(self, count: usize) -> IndexMap<String, f64> {
        self.sums
            .into_iter()
            .map(|(k, v)| (k, v / count as f64))
            .collect()
    }
}

fn finite(step: u64, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Gradient sums for a set of networks.
struct GradSum {
    sums: Vec<Option<Vec<Tensor>>>,
}

impl GradSum {
    fn new(k: usize) -> Self {
        Self {
            sums: (0..k).map(|_| None).collect(),
        }
    }

    fn add(&mut self, i: usize, grads: Vec<Tensor>) {
        match &mut self.sums[i] {
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            slot => *slot = Some(grads),
        }
    }

    fn take(&mut self, i: usize, count: usize) -> Vec<Tensor> {
        let k = 1.0 / count as f64;
        self.sums[i]
            .take()
            .unwrap_or_default()
            .into_iter()
            .map(|t| t.map(|v| v * k))
            .collect()
    }
}

fn net_index(ck: &Checkpoint, role: &str) -> Result<usize> {
    ck.nets
        .iter()
        .position(|n| n.role == role)
        .ok_or_else(|| Error::Checkpoint(format!("no network with role `{role}`")))
}

fn apply(ck: &mut Checkpoint, idx: usize, grads: &[Tensor], adam: &AdamConfig, lr: f64) -> Result<()> {
    let state = &mut ck.nets[idx];
    let step = ck.step;
    state.adam.step(adam, lr, state.net.params_mut(), grads)?;
    if !state.net.params().is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("non-finite parameters in `{}`", state.role),
        });
    }
    Ok(())
}

fn generator_of(ck: &Checkpoint, idx: usize) -> &Generator {
    match &ck.nets[idx].net {
        Net::Generator(g) => g,
        Net::Discriminator(_) => unreachable!("role layout fixed by init_checkpoint"),
    }
}

fn discriminator_of(ck: &Checkpoint, idx: usize) -> &Discriminator {
    match &ck.nets[idx].net {
        Net::Discriminator(d) => d,
        Net::Generator(_) => unreachable!("role layout fixed by init_checkpoint"),
    }
}

fn bind(tape: &mut Tape, params: &ParamSet, grad: bool) -> BoundParams {
    params.bind(tape, grad)
}

fn pix2pix_step(
    ck: &mut Checkpoint,
    samples: &[(Tensor, Tensor)],
    batch: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    lr: f64,
    adam: &AdamConfig,
) -> Result<IndexMap<String, f64>> {
    let (gi, di) = (net_index(ck, "g")?, net_index(ck, "d")?);
    let weights = ck.config.weights;
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let mut acc = Acc::default();
    let mut grads = GradSum::new(2);
    let step = ck.step;

    for phase in [Phase::Discriminator, Phase::Generator] {
        for (&(i, _), &s) in batch.iter().zip(&seeds) {
            let (g, d) = (generator_of(ck, gi), discriminator_of(ck, di));
            let mut tape = Tape::new();
            let gp = bind(&mut tape, &g.params, phase == Phase::Generator);
            let dp = bind(&mut tape, &d.params, phase == Phase::Discriminator);
            let coarse = tape.constant(samples[i].0.clone());
            let fine = tape.constant(samples[i].1.clone());
            let (terms, _) = pix2pix_objective(
                &mut tape,
                &BoundGenerator { net: g, params: &gp },
                &BoundDiscriminator { net: d, params: &dp },
                coarse,
                fine,
                &weights,
                phase,
                &mut ChaCha8Rng::seed_from_u64(s),
            )?;
            acc.add_terms(&tape, &terms);
            if phase == Phase::Discriminator {
                let loss = terms.require_d()?;
                finite(step, "loss_d", tape.scalar(loss))?;
                grads.add(0, dp.grads(&tape, &tape.backward(loss)?));
            } else {
                let loss = terms.require_g()?;
                acc.add("loss_g", finite(step, "loss_g", tape.scalar(loss))?);
                grads.add(1, gp.grads(&tape, &tape.backward(loss)?));
            }
        }
        if phase == Phase::Discriminator {
            apply(ck, di, &grads.take(0, batch.len()), adam, lr)?;
        } else {
            apply(ck, gi, &grads.take(1, batch.len()), adam, lr)?;
        }
    }
    Ok(acc.finish(batch.len()))
}

fn cyclegan_step(
    ck: &mut Checkpoint,
    samples: &[(Tensor, Tensor)],
    batch: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    lr: f64,
    adam: &AdamConfig,
) -> Result<IndexMap<String, f64>> {
    let idx = [
        net_index(ck, "g")?,
        net_index(ck, "f")?,
        net_index(ck, "d_x")?,
        net_index(ck, "d_y")?,
    ];
    let weights = ck.config.weights;
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let mut acc = Acc::default();
    let mut grads = GradSum::new(4);
    let step = ck.step;

    for phase in [Phase::Discriminator, Phase::Generator] {
        let train_g = phase == Phase::Generator;
        for (&(ix, iy), &s) in batch.iter().zip(&seeds) {
            let g = generator_of(ck, idx[0]);
            let f = generator_of(ck, idx[1]);
            let dx = discriminator_of(ck, idx[2]);
            let dy = discriminator_of(ck, idx[3]);
            let mut tape = Tape::new();
            let gp = bind(&mut tape, &g.params, train_g);
            let fp = bind(&mut tape, &f.params, train_g);
            let dxp = bind(&mut tape, &dx.params, !train_g);
            let dyp = bind(&mut tape, &dy.params, !train_g);
            // x from the coarse domain, y from the fine domain, unpaired.
            let x = tape.constant(samples[ix].0.clone());
            let y = tape.constant(samples[iy].1.clone());
            let out = cyclegan_objective(
                &mut tape,
                &BoundGenerator { net: g, params: &gp },
                &BoundGenerator { net: f, params: &fp },
                &BoundDiscriminator { net: dx, params: &dxp },
                &BoundDiscriminator { net: dy, params: &dyp },
                x,
                y,
                &weights,
                phase,
                &mut ChaCha8Rng::seed_from_u64(s),
            )?;
            acc.add_terms(&tape, &out.terms);
            if train_g {
                let loss = out.terms.require_g()?;
                acc.add("loss_g", finite(step, "loss_g", tape.scalar(loss))?);
                let gr = tape.backward(loss)?;
                grads.add(0, gp.grads(&tape, &gr));
                grads.add(1, fp.grads(&tape, &gr));
            } else {
                let loss = out.terms.require_d()?;
                finite(step, "loss_d", tape.scalar(loss))?;
                let gr = tape.backward(loss)?;
                grads.add(2, dxp.grads(&tape, &gr));
                grads.add(3, dyp.grads(&tape, &gr));
            }
        }
        let which: &[usize] = if train_g { &[0, 1] } else { &[2, 3] };
        for &k in which {
            apply(ck, idx[k], &grads.take(k, batch.len()), adam, lr)?;
        }
    }
    Ok(acc.finish(batch.len()))
}

fn hd_step(
    ck: &mut Checkpoint,
    samples: &[(Tensor, Tensor)],
    batch: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
    lr: f64,
    adam: &AdamConfig,
) -> Result<IndexMap<String, f64>> {
    let idx = [net_index(ck, "g")?, net_index(ck, "d0")?, net_index(ck, "d1")?];
    let weights = ck.config.weights;
    let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
    let mut acc = Acc::default();
    let mut grads = GradSum::new(3);
    let step = ck.step;

    for phase in [Phase::Discriminator, Phase::Generator] {
        let train_g = phase == Phase::Generator;
        let multi = MultiscaleDiscriminator {
            scales: vec![
                discriminator_of(ck, idx[1]).clone(),
                discriminator_of(ck, idx[2]).clone(),
            ],
        };
        for (&(i, _), &s) in batch.iter().zip(&seeds) {
            let g = generator_of(ck, idx[0]);
            let mut tape = Tape::new();
            let gp = bind(&mut tape, &g.params, train_g);
            let dps: Vec<BoundParams> = multi
                .scales
                .iter()
                .map(|d| bind(&mut tape, &d.params, !train_g))
                .collect();
            let mask = tape.constant(samples[i].0.clone());
            let real = tape.constant(samples[i].1.clone());
            let (terms, _) = hd_objective(
                &mut tape,
                &BoundGenerator { net: g, params: &gp },
                &multi,
                &dps,
                mask,
                real,
                &weights,
                phase,
                &mut ChaCha8Rng::seed_from_u64(s),
            )?;
            acc.add_terms(&tape, &terms);
            if train_g {
                let loss = terms.require_g()?;
                acc.add("loss_g", finite(step, "loss_g", tape.scalar(loss))?);
                grads.add(0, gp.grads(&tape, &tape.backward(loss)?));
            } else {
                let loss = terms.require_d()?;
                finite(step, "loss_d", tape.scalar(loss))?;
                let gr = tape.backward(loss)?;
                grads.add(1, dps[0].grads(&tape, &gr));
                grads.add(2, dps[1].grads(&tape, &gr));
            }
        }
        let which: &[usize] = if train_g { &[0] } else { &[1, 2] };
        for &k in which {
            apply(ck, idx[k], &grads.take(k, batch.len()), adam, lr)?;
        }
    }
    Ok(acc.finish(batch.len()))
}
