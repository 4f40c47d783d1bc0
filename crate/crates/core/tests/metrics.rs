use nalgebra::{DMatrix, DVector};
use priorpath::data::synth_corpus;
use priorpath::eval::{
    compare_models, fid, fid_from_moments, grid_similarity, kl, kmeans_cluster, ks,
    tsne_project, CoarseToFine, ConvEmbedder, EmbeddingSet, TsneOptions,
};
use priorpath::mask::coarsen;
use priorpath::{BinaryMask, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[path = "common/fid_oracle.rs"]
mod fid_oracle;

use fid_oracle::{oracle_fid, random_rows};

fn set(rows: &[Vec<f64>]) -> EmbeddingSet {
    EmbeddingSet::from_rows(rows, "test", "x").unwrap()
}

#[test]
fn fid_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let d = rng.random_range(3..=8);
        let na = rng.random_range(5..=50);
        let nb = rng.random_range(5..=50);
        let a = random_rows(&mut rng, na, d, 0.0);
        let shift = rng.random_range(-1.0..1.0);
        let b = random_rows(&mut rng, nb, d, shift);
        let got = fid(&set(&a), &set(&b)).unwrap();
        let want = oracle_fid(&a, &b);
        let rel = (got - want).abs() / want.abs().max(1e-12);
        assert!(rel <= 1e-8, "d={d} na={na} nb={nb}: {got} vs {want} (rel {rel:e})");
    }
}

#[test]
fn fid_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_rows(&mut rng, 30, 6, 0.0);
    let b = random_rows(&mut rng, 25, 6, 0.5);
    assert!(fid(&set(&a), &set(&a)).unwrap() <= 1e-6);
    let ab = fid(&set(&a), &set(&b)).unwrap();
    let ba = fid(&set(&b), &set(&a)).unwrap();
    assert!((ab - ba).abs() <= 1e-8);
    assert!(ab >= 0.0);

    let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let eye = DMatrix::identity(3, 3);
    let v = fid_from_moments(&DVector::zeros(3), &eye, &e1, &eye).unwrap();
    assert!((v - 1.0).abs() <= 1e-6);

    assert!(fid(&set(&a[..1]), &set(&b)).is_err());
    assert!(fid(&set(&a), &set(&random_rows(&mut rng, 5, 4, 0.0))).is_err());
}

#[test]
fn ks_kl_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let a: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random::<f64>() * 2.0).collect();
        let d = ks(&a, &b).unwrap();
        assert!((0.0..=1.0).contains(&d));
        assert_eq!(d, ks(&b, &a).unwrap());
        assert_eq!(ks(&a, &a).unwrap(), 0.0);
        assert!(kl(&a, &b, 64).unwrap() >= 0.0);
        assert!(kl(&a, &a, 64).unwrap() <= 1e-9);
    }
    assert!((kl(&[0.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 1.0], 2).unwrap() - 0.5 * 3f64.ln()).abs() <= 1e-9);
}

fn blobs(n_each: usize, d: usize, sep: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..n_each {
            rows.extend((0..d).map(|j| noise.sample(&mut rng) + if j == 0 { sep * c as f64 } else { 0.0 }));
            labels.push(c);
        }
    }
    (DMatrix::from_row_slice(2 * n_each, d, &rows), labels)
}

fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let idx: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            idx.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / idx.len() as f64
        };
        let a = mean_to(labels[i]);
        let b = mean_to(1 - labels[i]);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[test]
fn tsne_separates_blobs() {
    let (e, labels) = blobs(30, 16, 20.0, 3);
    let mut opts = TsneOptions::new(7);
    opts.perplexity = 10.0;
    let t = tsne_project(&e, &opts).unwrap();
    let s = silhouette(&t.coords, &labels);
    assert!(s > 0.5, "silhouette {s}");
    let again = tsne_project(&e, &opts).unwrap();
    assert_eq!(t.coords, again.coords);
    // After early exaggeration the objective only goes down.
    let post: Vec<f64> = t.kl_trace.iter().filter(|(it, _)| *it >= 300).map(|&(_, v)| v).collect();
    assert!(post.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{post:?}");
}

#[test]
fn grid_with_one_matching_cell() {
    // 3x3 grid over [0,3]x[0,3]; cell (0,0) holds identical real/synthetic
    // embeddings, every other cell has synthetic points shifted far away.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut real, mut synth) = (Vec::new(), Vec::new());
    let (mut rc, mut sc) = (Vec::new(), Vec::new());
    for row in 0..3 {
        for col in 0..3 {
            let k = 6 + row + col;
            let pts = random_rows(&mut rng, k, 4, 0.0);
            for (i, p) in pts.iter().enumerate() {
                let xy = [col as f64 + 0.1 + 0.05 * i as f64, row as f64 + 0.1 + 0.05 * i as f64];
                real.push(p.clone());
                rc.push(xy);
                let s = if (row, col) == (0, 0) {
                    p.clone()
                } else {
                    p.iter().map(|v| v + 3.0).collect()
                };
                synth.push(s);
                sc.push(xy);
            }
        }
    }
    // Anchor the bounding box at exactly [0, 3].
    rc[0] = [0.0, 0.0];
    sc[0] = [0.0, 0.0];
    let last = sc.len() - 1;
    sc[last] = [3.0, 3.0];
    let coords: Vec<[f64; 2]> = rc.iter().chain(&sc).copied().collect();
    let (r, s) = (set(&real), set(&synth));
    let g = grid_similarity(&r, &s, &coords, [3, 3], 5).unwrap();
    let counts: usize = g.cells.iter().map(|c| c.n_real + c.n_synth).sum();
    assert_eq!(counts, real.len() + synth.len());
    for c in &g.cells {
        let f = c.fid.expect("every cell is populated");
        if (c.row, c.col) == (0, 0) {
            assert!(f <= 1e-6, "{f}");
        } else {
            assert!(f > 0.1, "cell {:?}: {f}", (c.row, c.col));
        }
    }
    let mean = g.cells.iter().map(|c| c.fid.unwrap()).sum::<f64>() / 9.0;
    assert_eq!(g.cell_average, Some(mean));
    assert_eq!(g.global_fid, fid(&r, &s).unwrap());

    let sparse = grid_similarity(&r, &s, &coords, [3, 3], 100).unwrap();
    assert!(sparse.cells.iter().all(|c| c.fid.is_none()));
    assert_eq!(sparse.cell_average, None);
}

#[test]
fn kmeans_blobs() {
    let (e, labels) = blobs(25, 5, 30.0, 8);
    let km = kmeans_cluster(&e, 2, 4).unwrap();
    let first = km.assignments[0];
    for (a, l) in km.assignments.iter().zip(&labels) {
        assert_eq!(*a == first, *l == labels[0]);
    }
    assert!(km.wcss.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    assert_eq!(km, kmeans_cluster(&e, 2, 4).unwrap());
}

struct Lookup(Vec<(BinaryMask, BinaryMask)>);

impl CoarseToFine for Lookup {
    fn name(&self) -> String {
        "identity".into()
    }

    fn generate(&self, coarse: &BinaryMask, _seed: u64) -> Result<BinaryMask> {
        Ok(self.0.iter().find(|(c, _)| c == coarse).unwrap().1.clone())
    }
}

struct Coarse;

impl CoarseToFine for Coarse {
    fn name(&self) -> String {
        "coarse-copy".into()
    }

    fn generate(&self, coarse: &BinaryMask, _seed: u64) -> Result<BinaryMask> {
        Ok(coarse.clone())
    }
}

#[test]
fn identity_model_scores_zero() {
    let fine = synth_corpus(3, 12, 48, 24).unwrap();
    let coarse: Vec<BinaryMask> = fine.iter().map(|f| coarsen(f).unwrap()).collect();
    let lookup = Lookup(coarse.iter().cloned().zip(fine.iter().cloned()).collect());
    let emb = ConvEmbedder::default();
    let report = compare_models("toy", &coarse, &fine, &[&lookup, &Coarse], &emb, 0).unwrap();
    let id = &report.rows[0];
    assert!(id.fid <= 1e-6 && id.ks == 0.0 && id.kl <= 1e-9, "{id:?}");
    assert!(report.rows[1].fid > 0.0);
    let tsv = report.to_tsv();
    assert!(tsv.starts_with("Method\tDataset\tKS\tKL\tFID\n"));
    assert_eq!(tsv.lines().count(), 3);
}
