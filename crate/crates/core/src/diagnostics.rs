//! Training-dynamics instruments: gradient direction error, Hessian-based
//! sharpness and loss-landscape slices.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::models::ModelParams;
use crate::optim::{bag_loss_and_grad, GdePoint};
use crate::parallel::{self, Parallelism};
use crate::seed;
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub gradient: Vec<f64>,
    pub step: usize,
    pub norm: f64,
}

impl GradientSnapshot {
    pub fn new(gradient: Vec<f64>, step: usize) -> Self {
        let norm = l2(&gradient);
        Self { gradient, step, norm }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean eval-mode loss and gradient over `bags`. Per-bag work may run in
/// parallel; the reduction is always in bag order.
pub fn loss_and_gradient(params: &ModelParams, bags: &[Bag], mode: Parallelism) -> Result<(f64, Vec<f64>)> {
    if bags.is_empty() {
        return Err(Error::argument("gradient over an empty dataset"));
    }
    let per_bag = parallel::map(bags.iter().collect(), mode, |bag: &Bag| {
        bag_loss_and_grad(params, bag, None)
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.num_params()];
    for r in per_bag {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = bags.len() as f64;
    grad.iter_mut().for_each(|x| *x /= n);
    Ok((loss / n, grad))
}

/// Mean eval-mode gradient over the whole set of bags.
pub fn full_dataset_gradient(params: &ModelParams, bags: &[Bag]) -> Result<GradientSnapshot> {
    full_dataset_gradient_with(params, bags, Parallelism::Sequential)
}

pub fn full_dataset_gradient_with(
    params: &ModelParams,
    bags: &[Bag],
    mode: Parallelism,
) -> Result<GradientSnapshot> {
    let (_, grad) = loss_and_gradient(params, bags, mode)?;
    Ok(GradientSnapshot::new(grad, 0))
}

/// Mean eval-mode BCE over `bags`.
pub fn dataset_loss(params: &ModelParams, bags: &[Bag], mode: Parallelism) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::argument("loss over an empty dataset"));
    }
    let losses = parallel::map(bags.iter().collect(), mode, |bag: &Bag| {
        crate::models::predict(&bag.instances, params).map(|p| crate::optim::bce(p, bag.label_f64()))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / bags.len() as f64)
}

/// `½(1 − cos(g, reference))`, or `None` when either vector has zero norm.
pub fn gde_term(g: &[f64], reference: &[f64]) -> Option<f64> {
    let (ng, nr) = (l2(g), l2(reference));
    if ng == 0.0 || nr == 0.0 || !ng.is_finite() || !nr.is_finite() {
        return None;
    }
    let cos = (dot(g, reference) / (ng * nr)).clamp(-1.0, 1.0);
    Some(0.5 * (1.0 - cos))
}

/// Mean gradient direction error of `snapshots` against `reference`.
pub fn gde<S: AsRef<[f64]>>(snapshots: &[S], reference: &[f64]) -> Result<f64> {
    if snapshots.is_empty() {
        return Err(Error::argument("no gradient snapshots"));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (i, s) in snapshots.iter().enumerate() {
        let s = s.as_ref();
        if s.len() != reference.len() {
            return Err(Error::Dimension {
                op: "gde",
                left: (1, s.len()),
                right: (1, reference.len()),
            });
        }
        match gde_term(s, reference) {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => log::warn!("skipping gradient snapshot {i}: zero norm"),
        }
    }
    if used == 0 {
        return Err(Error::argument("every gradient snapshot has zero norm"));
    }
    Ok(sum / used as f64)
}

/// Running GDE against one reference gradient, over a window of steps.
#[derive(Clone, Debug)]
pub struct GdeAccumulator {
    start: usize,
    reference: Vec<f64>,
    sum: f64,
    count: usize,
}

impl GdeAccumulator {
    pub fn new(start: usize, reference: Vec<f64>) -> Self {
        if l2(&reference) == 0.0 {
            log::warn!("reference gradient at step {start} has zero norm");
        }
        Self {
            start,
            reference,
            sum: 0.0,
            count: 0,
        }
    }

    /// Adds one step gradient; returns its GDE unless it was skipped.
    pub fn push(&mut self, g: &[f64]) -> Option<f64> {
        let v = gde_term(g, &self.reference);
        match v {
            Some(v) => {
                self.sum += v;
                self.count += 1;
            }
            None => log::warn!("skipping zero-norm gradient in GDE window at step {}", self.start),
        }
        v
    }

    /// Mean over the window, if any step counted.
    pub fn finish(self) -> Option<GdePoint> {
        (self.count > 0).then(|| GdePoint {
            step: self.start,
            gde: self.sum / self.count as f64,
        })
    }
}

/// Hessian-vector product by central differences of `grad` along `v`.
pub fn hvp<F>(mut grad: F, theta: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != theta.len() {
        return Err(Error::Dimension {
            op: "hvp",
            left: (1, theta.len()),
            right: (1, v.len()),
        });
    }
    if !(h > 0.0) {
        return Err(Error::argument(format!("step must be positive, got {h}")));
    }
    let norm = l2(v);
    if norm == 0.0 {
        return Err(Error::argument("direction has zero norm"));
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + h * d / norm).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - h * d / norm).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * h) * norm)
        .collect())
}

/// Default finite-difference step for parameters `theta`.
pub fn hvp_step(theta: &[f64]) -> f64 {
    1e-4 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    /// Magnitude of the dominant eigenvalue.
    pub lambda_max: f64,
    /// Last relative change of the estimate.
    pub residual: f64,
    pub iterations: usize,
}

/// Power iteration on a symmetric linear operator.
pub fn spectral_norm<F>(mut op: F, dim: usize, iters: usize, tol: f64, seed: u64) -> Result<SpectralEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 {
        return Err(Error::argument("power iteration needs at least one iteration"));
    }
    if dim == 0 {
        return Err(Error::argument("operator dimension is zero"));
    }
    let mut rng = seed::stream(seed, "power", &[]);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = l2(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    for it in 1..=iters {
        let av = op(&v)?;
        if av.len() != dim {
            return Err(Error::Dimension {
                op: "spectral_norm",
                left: (1, dim),
                right: (1, av.len()),
            });
        }
        let norm = l2(&av);
        if !norm.is_finite() {
            return Err(Error::Numerical("operator produced non-finite values".into()));
        }
        if norm == 0.0 {
            return Ok(SpectralEstimate {
                lambda_max: 0.0,
                residual: 0.0,
                iterations: it,
            });
        }
        let next = dot(&v, &av);
        // An exact eigenvector needs no second iteration to confirm.
        let eig_residual = av
            .iter()
            .zip(&v)
            .map(|(a, x)| (a - next * x).powi(2))
            .sum::<f64>()
            .sqrt();
        residual = if it == 1 {
            eig_residual / next.abs().max(f64::MIN_POSITIVE)
        } else {
            (next - lambda).abs() / next.abs().max(f64::MIN_POSITIVE)
        };
        lambda = next;
        if residual < tol {
            return Ok(SpectralEstimate {
                lambda_max: lambda.abs(),
                residual,
                iterations: it,
            });
        }
        v = av.into_iter().map(|x| x / norm).collect();
    }
    Ok(SpectralEstimate {
        lambda_max: lambda.abs(),
        residual,
        iterations: iters,
    })
}

/// `λ ε² / (2(1 + L))`.
pub fn epsilon_sharpness(lambda_max: f64, loss: f64, epsilon: f64) -> f64 {
    lambda_max * epsilon * epsilon / (2.0 * (1.0 + loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub lambda_max: f64,
    pub loss: f64,
    pub epsilon: f64,
    pub sharpness: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharpnessConfig {
    pub epsilon: f64,
    pub iterations: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            iterations: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

/// Spectral norm of the eval-mode loss Hessian at `params` and the derived
/// ε-sharpness.
pub fn sharpness(
    params: &ModelParams,
    bags: &[Bag],
    config: &SharpnessConfig,
    mode: Parallelism,
) -> Result<SharpnessReport> {
    if !(config.epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {}", config.epsilon)));
    }
    let theta = params.to_flat();
    let h = hvp_step(&theta);
    let (loss, _) = loss_and_gradient(params, bags, mode)?;
    let mut scratch = params.clone();
    let mut grad_at = |x: &[f64]| -> Result<Vec<f64>> {
        scratch.set_flat(x)?;
        Ok(loss_and_gradient(&scratch, bags, mode)?.1)
    };
    let est = spectral_norm(
        |v| hvp(&mut grad_at, &theta, v, h),
        theta.len(),
        config.iterations,
        config.tol,
        config.seed,
    )?;
    Ok(SharpnessReport {
        lambda_max: est.lambda_max,
        loss,
        epsilon: config.epsilon,
        sharpness: epsilon_sharpness(est.lambda_max, loss, config.epsilon),
        residual: est.residual,
        iterations: est.iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    /// 1 or 2.
    pub directions: usize,
    /// Points per axis; odd and at least 3.
    pub grid: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            directions: 2,
            grid: 21,
            radius: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    pub x: f64,
    pub y: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub cells: Vec<LandscapeCell>,
    pub normalization: String,
}

impl Landscape {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,loss\n");
        for c in &self.cells {
            out.push_str(&format!("{:?},{:?},{:?}\n", c.x, c.y, c.loss));
        }
        out
    }

    pub fn center(&self) -> Option<&LandscapeCell> {
        self.cells.iter().find(|c| c.x == 0.0 && c.y == 0.0)
    }
}

/// Random Gaussian direction rescaled so every parameter matrix's block has
/// the Frobenius norm of that matrix.
fn filter_normalized_direction(params: &ModelParams, rng: &mut seed::Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.num_params());
    for m in params.matrices() {
        let d: Vec<f64> = (0..m.len()).map(|_| StandardNormal.sample(rng)).collect();
        let dn = l2(&d);
        let scale = if dn > 0.0 { m.frobenius_norm() / dn } else { 0.0 };
        out.extend(d.into_iter().map(|x| x * scale));
    }
    out
}

fn axis(grid: usize, radius: f64) -> Vec<f64> {
    let half = (grid / 2) as f64;
    (0..grid)
        .map(|i| {
            let k = i as f64 - half;
            if k == 0.0 {
                0.0
            } else {
                radius * k / half
            }
        })
        .collect()
}

/// Eval-mode losses on an evenly spaced grid around `params`.
pub fn landscape_slice(
    params: &ModelParams,
    bags: &[Bag],
    config: &LandscapeConfig,
    mode: Parallelism,
) -> Result<Landscape> {
    if config.directions != 1 && config.directions != 2 {
        return Err(Error::config(format!("directions must be 1 or 2, got {}", config.directions)));
    }
    if config.grid < 3 || config.grid % 2 == 0 {
        return Err(Error::config(format!("grid must be odd and >= 3, got {}", config.grid)));
    }
    if !(config.radius >= 0.0) || !config.radius.is_finite() {
        return Err(Error::config(format!("radius must be finite and >= 0, got {}", config.radius)));
    }
    let theta = params.to_flat();
    let mut rng = seed::stream(config.seed, "landscape", &[]);
    let d1 = filter_normalized_direction(params, &mut rng);
    let d2 = filter_normalized_direction(params, &mut rng);
    let xs = axis(config.grid, config.radius);
    let ys = if config.directions == 2 { xs.clone() } else { vec![0.0] };
    let points: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let losses = parallel::map(points.clone(), mode, |(x, y)| {
        let shifted: Vec<f64> = theta
            .iter()
            .zip(&d1)
            .zip(&d2)
            .map(|((t, a), b)| t + x * a + y * b)
            .collect();
        let p = params.with_flat(&shifted)?;
        dataset_loss(&p, bags, Parallelism::Sequential)
    });
    let cells = points
        .into_iter()
        .zip(losses)
        .map(|((x, y), loss)| Ok(LandscapeCell { x, y, loss: loss? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Landscape {
        cells,
        normalization: "filter-normalized per parameter matrix".into(),
    })
}

/// Dense symmetric operator, handy for tests and benchmarks.
pub fn matrix_operator(a: &Matrix) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
    move |v: &[f64]| {
        let col = Matrix::column_vector(v.to_vec());
        Ok(a.matmul(&col)?.into_data())
    }
}
