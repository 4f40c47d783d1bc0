//! Central finite-difference checks of the three training objectives on
//! toy networks. Shared by the core tests and the acceptance suite.

#![allow(dead_code)]

use priorpath::graph::Tape;
use priorpath::losses::{
    cyclegan_objective, hd_objective, pix2pix_objective, BoundDiscriminator, BoundGenerator,
    LossWeights, Phase,
};
use priorpath::nets::{
    BoundParams, Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
    MultiscaleDiscriminator, ParamSet,
};
use priorpath::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SIDE: usize = 8;
pub const POINTS: usize = 10;
const H: f64 = 1e-6;

pub fn unet(in_c: usize, out_c: usize, base: usize, seed: u64) -> Generator {
    let mut s = GeneratorSpec::unet(in_c, out_c);
    s.base_width = base;
    s.depth = 2;
    Generator::build(s, seed).unwrap()
}

pub fn resnet(seed: u64) -> Generator {
    let mut s = GeneratorSpec::residual_global(1, 3);
    s.base_width = 1;
    s.depth = 1;
    Generator::build(s, seed).unwrap()
}

pub fn patchgan(in_c: usize, base: usize, scales: usize, seed: u64) -> DiscriminatorSpec {
    let _ = seed;
    DiscriminatorSpec {
        in_channels: in_c,
        n_layers: 1,
        base_width: base,
        n_scales: scales,
    }
}

fn randomize(p: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, 0.5).unwrap();
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = n.sample(rng));
    }
}

fn binary(rng: &mut ChaCha8Rng, c: usize) -> Tensor {
    binary_sized(rng, c, SIDE)
}

fn binary_sized(rng: &mut ChaCha8Rng, c: usize, side: usize) -> Tensor {
    let d = (0..c * side * side)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_vec([1, c, side, side], d).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, c: usize, side: usize) -> Tensor {
    let d = (0..c * side * side).map(|_| rng.random_range(-0.9..0.9)).collect();
    Tensor::from_vec([1, c, side, side], d).unwrap()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn central_diff(theta: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(&x);
            x[i] = orig - H;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// Flattened parameters of several networks, in order.
fn flat(sets: &[&ParamSet]) -> Vec<f64> {
    sets.iter().flat_map(|p| p.flatten()).collect()
}

fn split(theta: &[f64], sets: &mut [&mut ParamSet]) {
    let mut off = 0;
    for p in sets.iter_mut() {
        let n = p.numel();
        p.unflatten(&theta[off..off + n]).unwrap();
        off += n;
    }
}

fn grads_of(tape: &Tape, bound: &[&BoundParams], loss: priorpath::graph::Var) -> Vec<f64> {
    let g = tape.backward(loss).unwrap();
    bound
        .iter()
        .flat_map(|b| b.grads(tape, &g))
        .flat_map(|t| t.into_data())
        .collect()
}

/// Outcome of one objective's check.
#[derive(Debug)]
pub struct Report {
    pub objective: &'static str,
    /// Largest single-network parameter count.
    pub max_net_params: usize,
    pub total_params: usize,
    /// Worst relative error over all points and both losses.
    pub worst: f64,
    pub points: usize,
}

pub fn check_pix2pix(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = unet(1, 1, 2, 1);
    let mut d = Discriminator::build(patchgan(2, 2, 1, 0), 2).unwrap();
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        randomize(&mut g.params, &mut rng);
        randomize(&mut d.params, &mut rng);
        let coarse = binary(&mut rng, 1);
        let fine = binary(&mut rng, 1);
        let drop_seed: u64 = rng.random();
        let eval = |g: &Generator, d: &Discriminator, want_g: bool| {
            let mut tape = Tape::new();
            let gp = g.params.bind(&mut tape, true);
            let dp = d.params.bind(&mut tape, true);
            let c = tape.constant(coarse.clone());
            let f = tape.constant(fine.clone());
            let (terms, _) = pix2pix_objective(
                &mut tape,
                &BoundGenerator { net: g, params: &gp },
                &BoundDiscriminator { net: d, params: &dp },
                c,
                f,
                &w,
                Phase::Both,
                &mut ChaCha8Rng::seed_from_u64(drop_seed),
            )
            .unwrap();
            let loss = if want_g { terms.loss_g.unwrap() } else { terms.loss_d.unwrap() };
            let grads = if want_g { grads_of(&tape, &[&gp], loss) } else { grads_of(&tape, &[&dp], loss) };
            (tape.scalar(loss), grads)
        };
        // loss_g with respect to G
        let (_, ga) = eval(&g, &d, true);
        let theta = g.params.flatten();
        let mut gg = g.clone();
        let fd = central_diff(&theta, |t| {
            gg.params.unflatten(t).unwrap();
            eval(&gg, &d, true).0
        });
        worst = worst.max(relative_error(&ga, &fd));
        // loss_d with respect to D
        let (_, da) = eval(&g, &d, false);
        let theta = d.params.flatten();
        let mut dd = d.clone();
        let fd = central_diff(&theta, |t| {
            dd.params.unflatten(t).unwrap();
            eval(&g, &dd, false).0
        });
        worst = worst.max(relative_error(&da, &fd));
    }
    Report {
        objective: "pix2pix",
        max_net_params: g.params.numel().max(d.params.numel()),
        total_params: g.params.numel() + d.params.numel(),
        worst,
        points: POINTS,
    }
}

pub fn check_cyclegan(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = unet(1, 1, 1, 1);
    let mut f = unet(1, 1, 1, 2);
    let mut dx = Discriminator::build(patchgan(1, 1, 1, 0), 3).unwrap();
    let mut dy = Discriminator::build(patchgan(1, 1, 1, 0), 4).unwrap();
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        for p in [&mut g.params, &mut f.params, &mut dx.params, &mut dy.params] {
            randomize(p, &mut rng);
        }
        let x = binary(&mut rng, 1);
        let y = binary(&mut rng, 1);
        let drop_seed: u64 = rng.random();
        let eval = |nets: [&ParamSet; 4], want_g: bool| {
            let gen = |net: &Generator, p: &ParamSet| Generator { spec: net.spec, params: p.clone() };
            let dis = |net: &Discriminator, p: &ParamSet| Discriminator { spec: net.spec, params: p.clone() };
            let (g2, f2, dx2, dy2) = (gen(&g, nets[0]), gen(&f, nets[1]), dis(&dx, nets[2]), dis(&dy, nets[3]));
            let mut tape = Tape::new();
            let gp = g2.params.bind(&mut tape, true);
            let fp = f2.params.bind(&mut tape, true);
            let dxp = dx2.params.bind(&mut tape, true);
            let dyp = dy2.params.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let out = cyclegan_objective(
                &mut tape,
                &BoundGenerator { net: &g2, params: &gp },
                &BoundGenerator { net: &f2, params: &fp },
                &BoundDiscriminator { net: &dx2, params: &dxp },
                &BoundDiscriminator { net: &dy2, params: &dyp },
                xv,
                yv,
                &w,
                Phase::Both,
                &mut ChaCha8Rng::seed_from_u64(drop_seed),
            )
            .unwrap();
            if want_g {
                let l = out.terms.loss_g.unwrap();
                (tape.scalar(l), grads_of(&tape, &[&gp, &fp], l))
            } else {
                let l = out.terms.loss_d.unwrap();
                (tape.scalar(l), grads_of(&tape, &[&dxp, &dyp], l))
            }
        };
        let base = [g.params.clone(), f.params.clone(), dx.params.clone(), dy.params.clone()];
        for (want_g, range) in [(true, 0..2), (false, 2..4)] {
            let refs = [&base[0], &base[1], &base[2], &base[3]];
            let (_, analytic) = eval(refs, want_g);
            let theta = flat(&refs[range.clone()]);
            let mut work = base.clone();
            let fd = central_diff(&theta, |t| {
                let (a, b) = work.split_at_mut(range.start + 1);
                let (first, second) = (&mut a[range.start], &mut b[0]);
                split(t, &mut [first, second]);
                eval([&work[0], &work[1], &work[2], &work[3]], want_g).0
            });
            worst = worst.max(relative_error(&analytic, &fd));
        }
    }
    let sizes = [g.params.numel(), f.params.numel(), dx.params.numel(), dy.params.numel()];
    Report {
        objective: "cyclegan",
        max_net_params: *sizes.iter().max().unwrap(),
        total_params: sizes.iter().sum(),
        worst,
        points: POINTS,
    }
}

pub fn check_hd(seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = resnet(1);
    let mut md = MultiscaleDiscriminator::build(patchgan(4, 1, 2, 0), 5).unwrap();
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..POINTS {
        randomize(&mut g.params, &mut rng);
        for d in &mut md.scales {
            randomize(&mut d.params, &mut rng);
        }
        // The coarser scale needs room for its conv stack.
        let mask = binary_sized(&mut rng, 1, 2 * SIDE);
        let rgb = uniform(&mut rng, 3, 2 * SIDE);
        let eval = |g: &Generator, md: &MultiscaleDiscriminator, want_g: bool| {
            let mut tape = Tape::new();
            let gp = g.params.bind(&mut tape, true);
            let dps: Vec<BoundParams> = md.scales.iter().map(|d| d.params.bind(&mut tape, true)).collect();
            let m = tape.constant(mask.clone());
            let r = tape.constant(rgb.clone());
            let (terms, _) = hd_objective(
                &mut tape,
                &BoundGenerator { net: g, params: &gp },
                md,
                &dps,
                m,
                r,
                &w,
                Phase::Both,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            if want_g {
                let l = terms.loss_g.unwrap();
                (tape.scalar(l), grads_of(&tape, &[&gp], l))
            } else {
                let l = terms.loss_d.unwrap();
                (tape.scalar(l), grads_of(&tape, &[&dps[0], &dps[1]], l))
            }
        };
        let (_, ga) = eval(&g, &md, true);
        let mut gg = g.clone();
        let fd = central_diff(&g.params.flatten(), |t| {
            gg.params.unflatten(t).unwrap();
            eval(&gg, &md, true).0
        });
        worst = worst.max(relative_error(&ga, &fd));

        let (_, da) = eval(&g, &md, false);
        let theta = flat(&[&md.scales[0].params, &md.scales[1].params]);
        let mut mm = md.clone();
        let fd = central_diff(&theta, |t| {
            let (a, b) = mm.scales.split_at_mut(1);
            split(t, &mut [&mut a[0].params, &mut b[0].params]);
            eval(&g, &mm, false).0
        });
        worst = worst.max(relative_error(&da, &fd));
    }
    let dn: usize = md.scales.iter().map(|d| d.params.numel()).sum();
    Report {
        objective: "hd",
        max_net_params: g.params.numel().max(md.scales[0].params.numel()),
        total_params: g.params.numel() + dn,
        worst,
        points: POINTS,
    }
}
