//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use mildrop::tensor::Matrix;

/// Straightforward drop-set computation: full sorts everywhere, no shared
/// code with the library.
pub fn brute_force_drop_set(f: &[Vec<f64>], k: usize, g: usize) -> (Vec<usize>, Vec<usize>) {
    let n = f.len();
    let score: Vec<f64> = f
        .iter()
        .map(|r| {
            let m = r.iter().sum::<f64>() / r.len() as f64;
            1.0 / (1.0 + (-m).exp())
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap().then(a.cmp(&b)));
    let anchors: Vec<usize> = order[..k].to_vec();
    let rest: Vec<usize> = (0..n).filter(|i| !anchors.contains(i)).collect();
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut dropped: Vec<usize> = anchors.clone();
    for &a in &anchors {
        let mut cand: Vec<(f64, usize)> = rest
            .iter()
            .map(|&j| {
                let d = norm(&f[a]) * norm(&f[j]);
                let s = if d > 0.0 {
                    (f[a].iter().zip(&f[j]).map(|(x, y)| x * y).sum::<f64>() / d).clamp(-1.0, 1.0)
                } else {
                    -1.0
                };
                (s, j)
            })
            .collect();
        cand.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        dropped.extend(cand.iter().take(g).map(|c| c.1));
    }
    dropped.sort_unstable();
    dropped.dedup();
    (anchors, dropped)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

pub fn dominant_abs(eigs: &[f64]) -> f64 {
    eigs.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Hessian by central differences of a loss, second order in both axes.
pub fn fd_hessian<F: FnMut(&[f64]) -> f64>(mut loss: F, theta: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = theta.len();
    let mut hess = vec![vec![0.0; n]; n];
    let mut x = theta.to_vec();
    for i in 0..n {
        for j in i..n {
            let mut eval = |di: f64, dj: f64| {
                x.copy_from_slice(theta);
                x[i] += di;
                x[j] += dj;
                loss(&x)
            };
            let v = (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    hess
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

/// Ordinary least squares fit of y on x; returns R².
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - (icpt + slope * a)).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// Sample mean and standard deviation, two passes, no library code.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Pairwise-comparison AUC, O(n²).
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}
