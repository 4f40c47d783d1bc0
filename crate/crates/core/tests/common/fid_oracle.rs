//! Dense FID oracle: plain loops, Cholesky and cyclic Jacobi, sharing no
//! code with the library's nalgebra path.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn mean_cov(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                c[a][b] += (r[a] - mu[a]) * (r[b] - mu[b]) / (n - 1) as f64;
            }
        }
    }
    (mu, c)
}

fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = a.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let d = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..d).flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i][i]).collect()
}

pub fn oracle_fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let d = a[0].len();
    let (ma, mut ca) = mean_cov(a);
    let (mb, mut cb) = mean_cov(b);
    for i in 0..d {
        ca[i][i] += 1e-6;
        cb[i][i] += 1e-6;
    }
    // Lᵀ B L shares its spectrum with A B when A = L Lᵀ.
    let l = cholesky(&ca);
    let mut m = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for p in 0..d {
                for q in 0..d {
                    s += l[p][i] * cb[p][q] * l[q][j];
                }
            }
            m[i][j] = s;
        }
    }
    let cross: f64 = jacobi_eigenvalues(m).iter().map(|v| v.max(0.0).sqrt()).sum();
    let dist: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let tr: f64 = (0..d).map(|i| ca[i][i] + cb[i][i]).sum();
    dist + tr - 2.0 * cross
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    // Correlated columns so the covariances are far from diagonal.
    let mix: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            (0..d).map(|j| shift + (0..d).map(|k| mix[j][k] * z[k]).sum::<f64>()).collect()
        })
        .collect()
}
