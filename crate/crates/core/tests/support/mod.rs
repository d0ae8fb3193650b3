//! Independent reference implementations shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tov_core::diffcore::Tensor;
use tov_core::metrics::{correlation_metric, cosine_similarity_matrix, covariance_spectrum, representation_std};
use tov_core::probe::f1_scores;

pub fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.random_range(3..=64);
    let d = rng.random_range(2..=32);
    let scale: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..5.0)).collect();
    let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mix = rng.random_range(0.0..0.9);
    (0..n)
        .map(|_| {
            let common: f64 = rng.random_range(-1.0..1.0);
            (0..d)
                .map(|j| shift[j] + scale[j] * (mix * common + rng.random_range(-1.0..1.0)))
                .collect()
        })
        .collect()
}

pub fn oracle_cov(r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = r.len();
    let d = r[0].len();
    let mut mean = vec![0.0; d];
    for row in r {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut c = vec![vec![0.0; d]; d];
    for a in 0..d {
        for b in 0..d {
            let mut s = 0.0;
            for row in r {
                s += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
            c[a][b] = s / (n - 1) as f64;
        }
    }
    c
}

pub fn oracle_std(r: &[Vec<f64>]) -> f64 {
    let c = oracle_cov(r);
    (0..c.len()).map(|j| c[j][j].sqrt()).sum::<f64>() / c.len() as f64
}

pub fn oracle_corr(r: &[Vec<f64>]) -> f64 {
    let c = oracle_cov(r);
    let d = c.len();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for a in 0..d {
        for b in 0..d {
            if a != b {
                sum += (c[a][b] / (c[a][a] * c[b][b]).sqrt()).abs();
                pairs += 1;
            }
        }
    }
    sum / pairs as f64
}

/// Cyclic Jacobi rotations; returns |eigenvalues| in descending order.
pub fn oracle_spectrum(r: &[Vec<f64>]) -> Vec<f64> {
    let mut a = oracle_cov(r);
    let d = a.len();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
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
    let mut ev: Vec<f64> = (0..d).map(|i| a[i][i].abs()).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

pub fn oracle_cosine(r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = r.len();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
            for k in 0..r[i].len() {
                dot += r[i][k] * r[j][k];
                ni += r[i][k] * r[i][k];
                nj += r[j][k] * r[j][k];
            }
            s[i][j] = dot / (ni.sqrt() * nj.sqrt());
        }
    }
    s
}

/// Macro F1, weighted F1 and accuracy from an explicit confusion matrix.
pub fn oracle_f1(preds: &[usize], labels: &[usize], k: usize) -> (f64, f64, f64) {
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let (mut macro_sum, mut present, mut weighted, mut correct) = (0.0, 0usize, 0.0, 0usize);
    for c in 0..k {
        let tp = confusion[c][c];
        let row: usize = confusion[c].iter().sum();
        let col: usize = (0..k).map(|l| confusion[l][c]).sum();
        correct += tp;
        if row + col == 0 {
            continue;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + (col - tp) + (row - tp)) as f64;
        macro_sum += f1;
        present += 1;
        weighted += f1 * row as f64;
    }
    let n = labels.len() as f64;
    (macro_sum / present as f64, weighted / n, correct as f64 / n)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Largest deviation of each metric from its oracle over random instances.
#[derive(Debug, Default)]
pub struct OracleErrors {
    pub std: f64,
    pub corr: f64,
    pub spectrum: f64,
    pub cosine: f64,
    pub f1: f64,
}

pub fn metric_oracle_errors(seed: u64, instances: usize) -> OracleErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = OracleErrors::default();
    for _ in 0..instances {
        let r = random_matrix(&mut rng);
        let t = Tensor::matrix(&r).unwrap();
        e.std = e.std.max(rel(representation_std(&t).unwrap(), oracle_std(&r)));
        let corr = correlation_metric(&t).unwrap();
        assert_eq!(corr.excluded, 0);
        e.corr = e.corr.max(rel(corr.value, oracle_corr(&r)));
        let want = oracle_spectrum(&r);
        let got = covariance_spectrum(&t).unwrap();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            e.spectrum = e.spectrum.max((a - b).abs() / want[0].max(1.0));
        }
        let cos = cosine_similarity_matrix(&t).unwrap();
        for (i, row) in oracle_cosine(&r).iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                e.cosine = e.cosine.max((cos.row(i)[j] - v).abs());
            }
        }
        let k = rng.random_range(2..=18);
        let n = rng.random_range(1..=300);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..k) })
            .collect();
        let r = f1_scores(&preds, &labels, k).unwrap();
        let (m, w, a) = oracle_f1(&preds, &labels, k);
        e.f1 = e.f1.max((r.macro_f1 - m).abs()).max((r.weighted_f1 - w).abs()).max((r.accuracy - a).abs());
    }
    e
}

/// Features that are linearly separable by label: one well-separated mean
/// per class plus bounded noise.
pub fn separable_features(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Vec<usize>) {
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut data = Vec::with_capacity(n * d);
    for &l in &labels {
        for j in 0..d {
            let mean = if j % k == l { 3.0 } else { 0.0 };
            data.push(mean + rng.random_range(-0.5..0.5f32));
        }
    }
    (Tensor::new(vec![n, d], data).unwrap(), labels)
}

/// Macro F1 of uniform random predictions against uniform labels.
pub fn random_predictor_f1(n: usize, k: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    f1_scores(&preds, &labels, k).unwrap().macro_f1
}

pub fn oracle_invariance(z: &[Vec<f64>], z2: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (a, b) in z.iter().zip(z2) {
        for (x, y) in a.iter().zip(b) {
            s += (x - y) * (x - y);
        }
    }
    s / z.len() as f64
}

pub fn oracle_variance(z: &[Vec<f64>], gamma: f64) -> f64 {
    let c = oracle_cov(z);
    (0..c.len()).map(|j| (gamma - (c[j][j] + 1e-4).sqrt()).max(0.0)).sum::<f64>() / c.len() as f64
}

pub fn oracle_covariance(z: &[Vec<f64>]) -> f64 {
    let c = oracle_cov(z);
    let d = c.len();
    let mut s = 0.0;
    for a in 0..d {
        for b in 0..d {
            if a != b {
                s += c[a][b] * c[a][b];
            }
        }
    }
    s / d as f64
}

/// Mean binary cross-entropy with `1e-12` log guards.
pub fn oracle_bce(logits: &[f64], labels: &[u8]) -> f64 {
    let mut s = 0.0;
    for (&x, &l) in logits.iter().zip(labels) {
        let p = 1.0 / (1.0 + (-x).exp());
        let q = 1.0 / (1.0 + x.exp());
        s -= if l == 1 { (p + 1e-12).ln() } else { (q + 1e-12).ln() };
    }
    s / logits.len() as f64
}

/// `(fixture, value, independent expectation)` for the documented loss
/// examples at 64-bit.
pub fn loss_fixtures() -> Vec<(&'static str, f64, f64)> {
    use tov_core::ssl::{covariance_loss, invariance_loss, temporal_loss, variance_loss};
    let m = |r: &[Vec<f64>]| Tensor::matrix(r).unwrap();
    let logits = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
    let z = vec![vec![1.0, 2.0]];
    let z2 = vec![vec![1.0, 4.0]];
    let pair = vec![vec![-1.0], vec![1.0]];
    let constant = vec![vec![3.0], vec![3.0], vec![3.0]];
    let opposed = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
    let zero_col = vec![vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 5.0]];
    let single = vec![vec![1.0], vec![4.0], vec![-2.0]];
    let same = vec![vec![0.5, -1.5, 2.0], vec![3.0, 0.25, -1.0]];
    vec![
        ("invariance identical", invariance_loss(&m(&same), &m(&same)).unwrap(), 0.0),
        ("invariance [1,2] vs [1,4]", invariance_loss(&m(&z), &m(&z2)).unwrap(), oracle_invariance(&z, &z2)),
        ("invariance [1,2] vs [1,4] by hand", invariance_loss(&m(&z), &m(&z2)).unwrap(), 4.0),
        ("variance column [-1,1]", variance_loss(&m(&pair), 1.0).unwrap(), oracle_variance(&pair, 1.0)),
        ("variance constant column", variance_loss(&m(&constant), 1.0).unwrap(), 0.99),
        ("covariance [[1,1],[-1,-1]]", covariance_loss(&m(&opposed)).unwrap(), 4.0),
        ("covariance [[1,1],[-1,-1]] oracle", covariance_loss(&m(&opposed)).unwrap(), oracle_covariance(&opposed)),
        ("covariance zero column", covariance_loss(&m(&zero_col)).unwrap(), 0.0),
        ("covariance d = 1", covariance_loss(&m(&single)).unwrap(), 0.0),
        ("bce logit 0 label 0", temporal_loss(&logits(&[0.0]), &[0]).unwrap(), std::f64::consts::LN_2),
        ("bce logit 0 label 1", temporal_loss(&logits(&[0.0]), &[1]).unwrap(), std::f64::consts::LN_2),
        ("bce logit 20 label 1", temporal_loss(&logits(&[20.0]), &[1]).unwrap(), oracle_bce(&[20.0], &[1])),
    ]
}
