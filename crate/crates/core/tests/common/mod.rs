//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use advpatch::evalkit::Label;

pub const JUNK: i64 = -1;

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na * nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Brute-force Market-style retrieval: every gallery item's rank is counted
/// pairwise, no sorting. Returns `(mAP, rank-1, rank-10, evaluated queries)`.
pub fn brute_force_retrieval(
    q: &[Vec<f32>],
    ql: &[Label],
    g: &[Vec<f32>],
    gl: &[Label],
    cross_camera: bool,
    junk: bool,
) -> Option<(f64, f64, f64, usize)> {
    let mut ap_sum = 0.0;
    let mut r1 = 0.0;
    let mut r10 = 0.0;
    let mut n = 0usize;
    for (qi, qv) in q.iter().enumerate() {
        let lab = ql[qi];
        if lab.identity == JUNK {
            continue;
        }
        let valid: Vec<usize> = (0..g.len())
            .filter(|&j| {
                let same_view = cross_camera && gl[j].identity == lab.identity && gl[j].camera == lab.camera;
                let is_junk = junk && gl[j].identity == JUNK;
                !same_view && !is_junk
            })
            .collect();
        if valid.is_empty() {
            continue;
        }
        let score: Vec<f64> = g.iter().map(|gv| cos64(qv, gv)).collect();
        // rank(j) = number of valid items strictly ahead of j
        let rank = |j: usize| -> usize {
            valid
                .iter()
                .filter(|&&k| k != j && (score[k] > score[j] || (score[k] == score[j] && k < j)))
                .count()
        };
        let relevant: Vec<usize> = valid.iter().copied().filter(|&j| gl[j].identity == lab.identity).collect();
        n += 1;
        if relevant.is_empty() {
            continue;
        }
        let ranks: Vec<usize> = relevant.iter().map(|&j| rank(j)).collect();
        let mut ap = 0.0;
        for &r in &ranks {
            let hits = ranks.iter().filter(|&&o| o <= r).count();
            ap += hits as f64 / (r + 1) as f64;
        }
        ap_sum += ap / ranks.len() as f64;
        let best = *ranks.iter().min().unwrap();
        if best == 0 {
            r1 += 1.0;
        }
        if best < 10 {
            r10 += 1.0;
        }
    }
    (n > 0).then(|| (ap_sum / n as f64, r1 / n as f64, r10 / n as f64, n))
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix; eigenvalues
/// returned in descending order.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Sample covariance (divisor n - 1) of the rows of `x`.
pub fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in &mut c {
        for v in row {
            *v /= (n - 1) as f64;
        }
    }
    c
}

/// Random labelled retrieval instance with some junk and repeated identities.
pub fn random_retrieval_set(seed: u64) -> (Vec<Vec<f32>>, Vec<Label>, Vec<Vec<f32>>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..12);
    let ids = rng.random_range(1..6i64);
    let nq = rng.random_range(1..8);
    let ng = rng.random_range(1..=50);
    let sample = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<Vec<f32>>, Vec<Label>) {
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let identity = if rng.random_bool(0.1) { JUNK } else { rng.random_range(0..ids) };
                (v, Label { identity, camera: rng.random_range(1..4) })
            })
            .unzip()
    };
    let (q, ql) = sample(nq, &mut rng);
    let (g, gl) = sample(ng, &mut rng);
    (q, ql, g, gl)
}
