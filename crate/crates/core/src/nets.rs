//! Network architectures: the U-Net coarse→fine generator, the residual
//! global generator for mask→RGB, and PatchGAN discriminators (single- and
//! multi-scale).
//!
//! Parameters live in a [`ParamSet`] keyed by layer path. A forward pass binds
//! the set onto a [`Tape`] so gradients can be pulled back out by name.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;
/// Negative slope of discriminator activations.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Unet,
    ResidualGlobal,
}

/// Generator architecture. All convolutions that need padding use reflection
/// padding, hidden activations are ReLU and the output goes through `tanh`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Downsampling levels for `unet`; residual block count for
    /// `residual_global`.
    pub depth: usize,
    /// Drop probability in the inner U-Net decoder blocks. Active in training
    /// and inference alike; it is the generator's only noise source.
    pub dropout: f64,
}

impl GeneratorSpec {
    pub fn unet(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: GeneratorKind::Unet,
            in_channels,
            out_channels,
            base_width: 16,
            depth: 4,
            dropout: 0.5,
        }
    }

    pub fn residual_global(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: GeneratorKind::ResidualGlobal,
            in_channels,
            out_channels,
            base_width: 16,
            depth: 4,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 || self.out_channels == 0
        {
            return Err(Error::invalid(format!("degenerate generator spec {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.kind {
            GeneratorKind::Unet => 1 << self.depth,
            GeneratorKind::ResidualGlobal => 4,
        }
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if !height.is_multiple_of(m) || !width.is_multiple_of(m) || height == 0 || width == 0 {
            let up = |v: usize| v.div_ceil(m).max(1) * m;
            return Err(Error::Shape(format!(
                "generator input {width}x{height} must be a multiple of {m} in both \
                 dimensions; pad to {}x{}",
                up(width),
                up(height)
            )));
        }
        Ok(())
    }

    fn unet_width(&self, level: usize) -> usize {
        self.base_width << level.min(3)
    }
}

/// PatchGAN discriminator architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub n_layers: usize,
    pub base_width: usize,
    pub n_scales: usize,
}

impl DiscriminatorSpec {
    pub fn patchgan(in_channels: usize) -> Self {
        Self {
            in_channels,
            n_layers: 3,
            base_width: 16,
            n_scales: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::invalid(format!("degenerate discriminator spec {self:?}")));
        }
        if !(1..=2).contains(&self.n_scales) {
            return Err(Error::invalid(format!(
                "n_scales must be 1 or 2, got {}",
                self.n_scales
            )));
        }
        Ok(())
    }

    fn width(&self, i: usize) -> usize {
        self.base_width << i.min(3)
    }

    /// `(kernel, stride)` of every convolution, input to output.
    pub fn conv_layers(&self) -> Vec<(usize, usize)> {
        let mut layers = vec![(4, 2); self.n_layers];
        layers.push((4, 1));
        layers.push((4, 1));
        layers
    }

    /// Side of the input window seen by one output score.
    pub fn receptive_field(&self) -> usize {
        self.conv_layers()
            .iter()
            .rev()
            .fold(1, |r, &(k, s)| r * s + (k - s))
    }
}

/// Whether the network runs for training or inference. Only affects layers
/// whose behaviour differs between the two; U-Net dropout stays on in both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Named parameter arrays in creation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Values of every array named `*.weight`, concatenated.
    pub fn weight_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|(k, _)| k.ends_with(".weight"))
            .flat_map(|(_, v)| v.data().iter().copied())
            .collect()
    }

    /// Puts every array on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .entries
            .values()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams {
            names: self.entries.keys().cloned().collect(),
            vars,
        }
    }

    /// Flattens all arrays, in order, into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for t in self.entries.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// A [`ParamSet`] placed on a tape.
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::NotFound(format!("parameter `{name}`")))
    }

    /// Gradients in parameter order; unreachable parameters get zeros.
    pub fn grads(&self, tape: &Tape, grads: &Grads) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v)))
            .collect()
    }
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    params: ParamSet,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
            params: ParamSet::new(),
        }
    }

    fn weight(&mut self, name: String, shape: [usize; 4]) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.params
            .insert(name, Tensor::from_vec(shape, data).expect("shape"));
    }

    fn bias(&mut self, name: String, channels: usize) {
        self.params.insert(name, Tensor::zeros([channels, 1, 1, 1]));
    }
}

/// Forward-pass context.
pub struct Ctx<'a, R: Rng> {
    pub tape: &'a mut Tape,
    pub params: &'a BoundParams,
    pub mode: Mode,
    /// Drives dropout; required for U-Net generators with nonzero dropout.
    pub rng: Option<&'a mut R>,
}

impl<R: Rng> Ctx<'_, R> {
    fn p(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    /// Reflection-padded convolution.
    fn conv_reflect(
        &mut self,
        x: Var,
        prefix: &str,
        bias: bool,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.p(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        let xp = if pad > 0 {
            self.tape.reflection_pad(x, pad)?
        } else {
            x
        };
        self.tape.conv2d(xp, w, b, stride, 0)
    }

    fn conv_zero(&mut self, x: Var, prefix: &str, bias: bool, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.p(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn conv_t(
        &mut self,
        x: Var,
        prefix: &str,
        bias: bool,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = if bias {
            Some(self.p(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.tape.conv_transpose2d(x, w, b, stride, pad, out_pad)
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::invalid("dropout layer needs a seeded rng"))?;
        let keep = 1.0 / (1.0 - p);
        let n = self.tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
            .collect();
        self.tape.dropout_with_mask(x, mask)
    }
}

/// A generator: its architecture plus owned parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub params: ParamSet,
}

impl Generator {
    pub fn build(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init::new(seed);
        match spec.kind {
            GeneratorKind::Unet => unet_params(&spec, &mut init),
            GeneratorKind::ResidualGlobal => residual_params(&spec, &mut init),
        }
        Ok(Self {
            spec,
            params: init.params,
        })
    }

    /// Maps an `N×C×H×W` input to `N×C'×H×W` in `[-1, 1]`.
    pub fn forward<R: Rng>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.value(x).shape();
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        self.spec.check_dims(h, w)?;
        match self.spec.kind {
            GeneratorKind::Unet => unet_forward(&self.spec, ctx, x),
            GeneratorKind::ResidualGlobal => residual_forward(&self.spec, ctx, x),
        }
    }

    /// Gradient-free forward on a plain tensor.
    pub fn run(&self, input: &Tensor, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let mut ctx = Ctx {
            tape: &mut tape,
            params: &bound,
            mode,
            rng: Some(rng),
        };
        let y = self.forward(&mut ctx, x)?;
        Ok(tape.value(y).clone())
    }
}

fn unet_params(spec: &GeneratorSpec, init: &mut Init) {
    let d = spec.depth;
    let w = |l| spec.unet_width(l);
    init.weight("down0.weight".into(), [w(0), spec.in_channels, 4, 4]);
    init.bias("down0.bias".into(), w(0));
    for i in 1..d {
        init.weight(format!("down{i}.weight"), [w(i), w(i - 1), 4, 4]);
        if i == d - 1 {
            init.bias(format!("down{i}.bias"), w(i));
        }
    }
    for j in (1..d).rev() {
        let cin = if j == d - 1 { w(j) } else { 2 * w(j) };
        init.weight(format!("up{j}.weight"), [cin, w(j - 1), 4, 4]);
    }
    let cin = if d > 1 { 2 * w(0) } else { w(0) };
    init.weight("up0.weight".into(), [cin, spec.out_channels, 4, 4]);
    init.bias("up0.bias".into(), spec.out_channels);
}

fn unet_forward<R: Rng>(spec: &GeneratorSpec, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
    let d = spec.depth;
    let mut skips = Vec::with_capacity(d);
    skips.push(ctx.conv_reflect(x, "down0", true, 2, 1)?);
    for i in 1..d {
        let a = ctx.tape.relu(skips[i - 1]);
        let innermost = i == d - 1;
        let mut e = ctx.conv_reflect(a, &format!("down{i}"), innermost, 2, 1)?;
        if !innermost {
            e = ctx.tape.instance_norm(e);
        }
        skips.push(e);
    }
    let mut h = skips[d - 1];
    for j in (1..d).rev() {
        let a = ctx.tape.relu(h);
        let u = ctx.conv_t(a, &format!("up{j}"), false, 2, 1, 0)?;
        let mut u = ctx.tape.instance_norm(u);
        if j != d - 1 {
            u = ctx.dropout(u, spec.dropout)?;
        }
        h = ctx.tape.concat(u, skips[j - 1])?;
    }
    let a = ctx.tape.relu(h);
    let out = ctx.conv_t(a, "up0", true, 2, 1, 0)?;
    Ok(ctx.tape.tanh(out))
}

fn residual_params(spec: &GeneratorSpec, init: &mut Init) {
    let w = spec.base_width;
    init.weight("stem.weight".into(), [w, spec.in_channels, 7, 7]);
    init.weight("down0.weight".into(), [2 * w, w, 3, 3]);
    init.weight("down1.weight".into(), [4 * w, 2 * w, 3, 3]);
    for b in 0..spec.depth {
        init.weight(format!("res{b}.conv0.weight"), [4 * w, 4 * w, 3, 3]);
        init.weight(format!("res{b}.conv1.weight"), [4 * w, 4 * w, 3, 3]);
    }
    init.weight("up0.weight".into(), [4 * w, 2 * w, 3, 3]);
    init.weight("up1.weight".into(), [2 * w, w, 3, 3]);
    init.weight("head.weight".into(), [spec.out_channels, w, 7, 7]);
    init.bias("head.bias".into(), spec.out_channels);
}

fn residual_forward<R: Rng>(spec: &GeneratorSpec, ctx: &mut Ctx<'_, R>, x: Var) -> Result<Var> {
    let block = |ctx: &mut Ctx<'_, R>, x: Var, name: &str, stride: usize, pad: usize| -> Result<Var> {
        let c = ctx.conv_reflect(x, name, false, stride, pad)?;
        let n = ctx.tape.instance_norm(c);
        Ok(ctx.tape.relu(n))
    };
    let mut h = block(ctx, x, "stem", 1, 3)?;
    h = block(ctx, h, "down0", 2, 1)?;
    h = block(ctx, h, "down1", 2, 1)?;
    for b in 0..spec.depth {
        let r = block(ctx, h, &format!("res{b}.conv0"), 1, 1)?;
        let r = ctx.conv_reflect(r, &format!("res{b}.conv1"), false, 1, 1)?;
        let r = ctx.tape.instance_norm(r);
        h = ctx.tape.add(h, r)?;
    }
    for u in 0..2 {
        let c = ctx.conv_t(h, &format!("up{u}"), false, 2, 1, 1)?;
        let n = ctx.tape.instance_norm(c);
        h = ctx.tape.relu(n);
    }
    let out = ctx.conv_reflect(h, "head", true, 1, 3)?;
    Ok(ctx.tape.tanh(out))
}

/// Output of one discriminator pass.
pub struct DiscOutput {
    /// Pre-sigmoid logits, one per receptive patch.
    pub scores: Var,
    /// Activations of every hidden block, input side first.
    pub features: Vec<Var>,
}

/// A single-scale PatchGAN discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn build(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut init = Init::new(seed);
        let n = spec.n_layers;
        init.weight("block0.weight".into(), [spec.width(0), spec.in_channels, 4, 4]);
        init.bias("block0.bias".into(), spec.width(0));
        for i in 1..=n {
            init.weight(format!("block{i}.weight"), [spec.width(i), spec.width(i - 1), 4, 4]);
        }
        init.weight("score.weight".into(), [1, spec.width(n), 4, 4]);
        init.bias("score.bias".into(), 1);
        Ok(Self {
            spec,
            params: init.params,
        })
    }

    pub fn forward<R: Rng>(&self, ctx: &mut Ctx<'_, R>, x: Var) -> Result<DiscOutput> {
        let c = ctx.tape.value(x).shape()[1];
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.spec.in_channels
            )));
        }
        let n = self.spec.n_layers;
        let mut features = Vec::with_capacity(n + 1);
        let h = ctx.conv_zero(x, "block0", true, 2, 1)?;
        let mut h = ctx.tape.leaky_relu(h, LEAKY_SLOPE);
        features.push(h);
        for i in 1..=n {
            let stride = if i < n { 2 } else { 1 };
            let c = ctx.conv_zero(h, &format!("block{i}"), false, stride, 1)?;
            let c = ctx.tape.instance_norm(c);
            h = ctx.tape.leaky_relu(c, LEAKY_SLOPE);
            features.push(h);
        }
        let scores = ctx.conv_zero(h, "score", true, 1, 1)?;
        Ok(DiscOutput { scores, features })
    }
}

/// Discriminators applied to successively 2×-average-pooled inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleDiscriminator {
    pub scales: Vec<Discriminator>,
}

impl MultiscaleDiscriminator {
    pub fn build(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let scales = (0..spec.n_scales)
            .map(|k| Discriminator::build(spec, seed.wrapping_add(k as u64 * 0x9E37_79B9)))
            .collect::<Result<_>>()?;
        Ok(Self { scales })
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    /// Scale `k` sees the input average-pooled `k` times. `params[k]` must be
    /// the binding of `scales[k]`.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        params: &[BoundParams],
        x: Var,
        rng: Option<&mut R>,
    ) -> Result<Vec<DiscOutput>> {
        let _ = rng;
        let mut input = x;
        let mut outs = Vec::with_capacity(self.scales.len());
        for (k, (disc, bound)) in self.scales.iter().zip(params).enumerate() {
            if k > 0 {
                input = tape.avg_pool2(input)?;
            }
            let mut ctx: Ctx<'_, R> = Ctx {
                tape,
                params: bound,
                mode: Mode::Train,
                rng: None,
            };
            outs.push(disc.forward(&mut ctx, input)?);
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type Rng8 = ChaCha8Rng;

    fn input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn disc_forward(d: &Discriminator, x: &Tensor) -> (Tensor, Vec<[usize; 4]>) {
        let mut tape = Tape::new();
        let bound = d.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut ctx: Ctx<'_, Rng8> = Ctx {
            tape: &mut tape,
            params: &bound,
            mode: Mode::Infer,
            rng: None,
        };
        let out = d.forward(&mut ctx, xv).unwrap();
        let shapes = out.features.iter().map(|&f| tape.value(f).shape()).collect();
        (tape.value(out.scores).clone(), shapes)
    }

    #[test]
    fn unet_shape_and_range() {
        let g = Generator::build(GeneratorSpec::unet(1, 1), 7).unwrap();
        let x = input([1, 1, 64, 128], 1);
        let y = g.run(&x, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y.shape(), [1, 1, 64, 128]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn residual_shape_and_determinism() {
        let mut spec = GeneratorSpec::residual_global(1, 3);
        spec.base_width = 4;
        spec.depth = 2;
        let g = Generator::build(spec, 3).unwrap();
        let x = input([1, 1, 16, 32], 2);
        let a = g.run(&x, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = g.run(&x, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a.shape(), [1, 3, 16, 32]);
        assert_eq!(a, b, "no dropout in the residual generator");
    }

    #[test]
    fn unet_dropout_is_seeded() {
        let mut spec = GeneratorSpec::unet(1, 1);
        spec.base_width = 4;
        let g = Generator::build(spec, 5).unwrap();
        let x = input([1, 1, 32, 32], 3);
        let run = |s| g.run(&x, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn indivisible_dims_give_padding_hint() {
        let g = Generator::build(GeneratorSpec::unet(1, 1), 7).unwrap();
        let x = input([1, 1, 60, 128], 1);
        let err = g
            .run(&x, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("pad to 128x64"), "{err}");
    }

    #[test]
    fn build_is_deterministic() {
        let a = Generator::build(GeneratorSpec::unet(1, 1), 11).unwrap();
        let b = Generator::build(GeneratorSpec::unet(1, 1), 11).unwrap();
        let c = Generator::build(GeneratorSpec::unet(1, 1), 12).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn receptive_field_recurrence() {
        // r_{l} = r_{l+1}·s_l + (k_l − s_l), starting from one output pixel.
        let spec = DiscriminatorSpec::patchgan(2);
        let mut r = 1usize;
        for (k, s) in [(4usize, 1usize), (4, 1), (4, 2), (4, 2), (4, 2)] {
            r = r * s + (k - s);
        }
        assert_eq!(r, 70);
        assert_eq!(spec.receptive_field(), 70);
    }

    #[test]
    fn patchgan_outputs() {
        let d = Discriminator::build(DiscriminatorSpec::patchgan(2), 1).unwrap();
        let (scores, feats) = disc_forward(&d, &input([1, 2, 64, 128], 4));
        assert_eq!(scores.shape(), [1, 1, 6, 14]);
        assert_eq!(feats.len(), 4);
        assert_eq!(feats[0], [1, 16, 32, 64]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let d = Discriminator::build(DiscriminatorSpec::patchgan(2), 1).unwrap();
        let mut tape = Tape::new();
        let bound = d.params.bind(&mut tape, false);
        let x = tape.constant(input([1, 3, 32, 32], 1));
        let mut ctx: Ctx<'_, Rng8> = Ctx {
            tape: &mut tape,
            params: &bound,
            mode: Mode::Infer,
            rng: None,
        };
        assert!(d.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn multiscale_sizes() {
        let mut spec = DiscriminatorSpec::patchgan(4);
        spec.n_scales = 2;
        let md = MultiscaleDiscriminator::build(spec, 3).unwrap();
        let mut tape = Tape::new();
        let bound: Vec<_> = md.scales.iter().map(|d| d.params.bind(&mut tape, false)).collect();
        let x = tape.constant(input([1, 4, 64, 128], 2));
        let outs = md.forward::<Rng8>(&mut tape, &bound, x, None).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(tape.value(outs[0].scores).shape(), [1, 1, 6, 14]);
        assert_eq!(tape.value(outs[1].scores).shape(), [1, 1, 2, 6]);
        // The second scale's first feature map is half the first's.
        assert_eq!(tape.value(outs[1].features[0]).shape(), [1, 16, 16, 32]);
        assert!(MultiscaleDiscriminator::build(DiscriminatorSpec { n_scales: 3, ..spec }, 0).is_err());
    }

    #[test]
    fn init_statistics() {
        let g = Generator::build(GeneratorSpec::unet(1, 1), 0).unwrap();
        let w = g.params.weight_values();
        assert!(w.len() >= 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((std - 0.02).abs() < 0.002, "std {std}");
        let biases: Vec<f64> = g
            .params
            .iter()
            .filter(|(k, _)| k.ends_with(".bias"))
            .flat_map(|(_, v)| v.data().to_vec())
            .collect();
        assert!(biases.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn flatten_round_trip() {
        let mut spec = GeneratorSpec::unet(1, 1);
        spec.base_width = 2;
        spec.depth = 2;
        let mut g = Generator::build(spec, 0).unwrap();
        let flat = g.params.flatten();
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        g.params.unflatten(&doubled).unwrap();
        assert_eq!(g.params.flatten(), doubled);
        assert!(g.params.unflatten(&flat[1..]).is_err());
    }
}
