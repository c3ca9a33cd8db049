//! Masking mechanisms applied to extractor feature maps.
//!
//! * DropNeuron: independent Bernoulli zeroing of entries.
//! * DropInstance: Bernoulli zeroing of whole instance rows.
//! * Attention-guided dropping: zero the top-k, bottom-k or k random rows
//!   ranked by the pooling attention of the previous visit of the bag.
//! * MIL-Dropout: deterministic. Rank instances by `sigmoid(mean(row))`,
//!   take the top `K` as anchors, add each anchor's `G` most cosine-similar
//!   remaining instances, zero the union and rescale survivors by
//!   `gamma = N / (N - K(1+G))`.
//!
//! `p` is always the probability of *dropping*. All ties break toward the
//! lower original row index.

use std::cmp::Ordering;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;
use crate::tensor::{sigmoid, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    None,
    DropNeuron,
    DropInstance,
    AttentionGuided,
    MilDropout,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::DropNeuron => "drop_neuron",
            Mechanism::DropInstance => "drop_instance",
            Mechanism::AttentionGuided => "attention_guided",
            Mechanism::MilDropout => "mil_dropout",
        }
    }
}

/// Ranking used by attention-guided dropping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Top,
    Bottom,
    Random,
}

/// Which drop count enters the MIL-Dropout normaliser.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// `N / (N - K(1+G))`, the nominal count before deduplication.
    #[default]
    Nominal,
    /// `N / (N - |A|)` with the deduplicated drop set.
    Deduplicated,
}

/// What to do with bags too small for the configured `K` and `G`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallBagPolicy {
    /// `K(1+G) >= N` is a configuration error.
    #[default]
    Strict,
    /// Shrink `K`, then `G`, per bag until at least one instance survives.
    Clamp,
    /// Leave such bags untouched.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropConfig {
    pub mechanism: Mechanism,
    /// Drop probability for the Bernoulli mechanisms.
    pub p: f64,
    /// Top-k count (MIL-Dropout) or k (attention-guided).
    pub k: usize,
    /// Similar instances added per anchor.
    pub g: usize,
    pub strategy: Strategy,
    /// Rescale Bernoulli survivors by `1/(1-p)` and MIL-Dropout survivors by gamma.
    pub inverted_scaling: bool,
    pub gamma: GammaMode,
    pub small_bags: SmallBagPolicy,
}

impl Default for DropConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::None,
            p: 0.0,
            k: 10,
            g: 5,
            strategy: Strategy::Top,
            inverted_scaling: true,
            gamma: GammaMode::Nominal,
            small_bags: SmallBagPolicy::Strict,
        }
    }
}

impl DropConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn drop_neuron(p: f64) -> Self {
        Self {
            mechanism: Mechanism::DropNeuron,
            p,
            ..Self::default()
        }
    }

    pub fn drop_instance(p: f64) -> Self {
        Self {
            mechanism: Mechanism::DropInstance,
            p,
            ..Self::default()
        }
    }

    pub fn attention_guided(k: usize, strategy: Strategy) -> Self {
        Self {
            mechanism: Mechanism::AttentionGuided,
            k,
            strategy,
            ..Self::default()
        }
    }

    pub fn mil_dropout(k: usize, g: usize) -> Self {
        Self {
            mechanism: Mechanism::MilDropout,
            k,
            g,
            ..Self::default()
        }
    }

    /// Checks the bag-size independent preconditions.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::config(format!(
                "drop probability must lie in [0, 1), got {}",
                self.p
            )));
        }
        if self.mechanism == Mechanism::MilDropout && self.k < 1 {
            return Err(Error::config("MIL-Dropout needs K >= 1"));
        }
        Ok(())
    }

    /// Checks the configuration against the smallest bag it will see.
    pub fn validate_for_bag_size(&self, min_bag: usize) -> Result<()> {
        self.validate()?;
        if self.small_bags != SmallBagPolicy::Strict {
            return Ok(());
        }
        match self.mechanism {
            Mechanism::MilDropout => {
                let nominal = self.k * (1 + self.g);
                if nominal >= min_bag {
                    return Err(Error::config(format!(
                        "K(1+G) = {}*(1+{}) = {nominal} must be smaller than the smallest bag \
                         ({min_bag} instances); reduce K or G, or clamp small bags",
                        self.k, self.g
                    )));
                }
            }
            Mechanism::AttentionGuided if self.k >= min_bag => {
                return Err(Error::config(format!(
                    "k = {} must be smaller than the smallest bag ({min_bag} instances)",
                    self.k
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// True when the mechanism can change a training forward pass.
    pub fn is_active(&self) -> bool {
        match self.mechanism {
            Mechanism::None => false,
            Mechanism::DropNeuron | Mechanism::DropInstance => self.p > 0.0,
            Mechanism::AttentionGuided | Mechanism::MilDropout => self.k > 0,
        }
    }
}

/// Drop set, keep set and normaliser for one feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropPlan {
    /// Dropped row indices, ascending.
    pub dropped: Vec<usize>,
    /// Kept row indices, ascending.
    pub kept: Vec<usize>,
    pub gamma: f64,
    /// `K(1+G)` before deduplication.
    pub nominal: usize,
    /// Anchors (top-k rows) by descending importance.
    pub anchors: Vec<usize>,
}

impl DropPlan {
    /// Identity plan over `n` rows.
    pub fn identity(n: usize) -> Self {
        Self {
            dropped: Vec::new(),
            kept: (0..n).collect(),
            gamma: 1.0,
            nominal: 0,
            anchors: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.dropped.len() + self.kept.len()
    }

    /// Per-row multipliers: 0 for dropped rows, gamma for kept ones.
    pub fn row_multipliers(&self) -> Vec<f64> {
        let mut m = vec![self.gamma; self.n()];
        for &i in &self.dropped {
            m[i] = 0.0;
        }
        m
    }

    /// JSON diagnostic line: `{"layer":..,"dropped":[..],"gamma":..}`.
    pub fn log_line(&self, layer: usize) -> String {
        serde_json::json!({
            "layer": layer,
            "dropped": self.dropped,
            "gamma": self.gamma,
        })
        .to_string()
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!(
            "drop probability must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

fn keep_value(p: f64, inverted: bool) -> f64 {
    if inverted {
        1.0 / (1.0 - p)
    } else {
        1.0
    }
}

/// Entrywise Bernoulli mask: 0 with probability `p`, else 1 (or `1/(1-p)`).
pub fn neuron_mask(rows: usize, cols: usize, p: f64, inverted: bool, rng: &mut Rng) -> Result<Matrix> {
    check_p(p)?;
    let keep = keep_value(p, inverted);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Matrix::new(rows, cols, data)
}

/// Row Bernoulli multipliers: 0 with probability `p`, else 1 (or `1/(1-p)`).
pub fn instance_mask(n: usize, p: f64, inverted: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    check_p(p)?;
    let keep = keep_value(p, inverted);
    Ok((0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

pub fn drop_neuron(f: &Matrix, p: f64, inverted: bool, rng: &mut Rng) -> Result<Matrix> {
    let mask = neuron_mask(f.rows(), f.cols(), p, inverted, rng)?;
    Ok(hadamard(f, &mask))
}

pub fn drop_instance(f: &Matrix, p: f64, inverted: bool, rng: &mut Rng) -> Result<Matrix> {
    let rows = instance_mask(f.rows(), p, inverted, rng)?;
    Ok(scale_rows(f, &rows))
}

/// Rows to drop for attention-guided dropping.
///
/// `Top`/`Bottom` rank by descending attention with ties toward the lower
/// index; `Top` takes the first `k` of that order and `Bottom` the last `k`.
pub fn attention_guided_rows(
    prev_attention: &[f64],
    k: usize,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let n = prev_attention.len();
    if k >= n && k > 0 {
        return Err(Error::config(format!(
            "attention-guided k = {k} must be smaller than the bag size {n}"
        )));
    }
    let mut rows = match strategy {
        Strategy::Random => sample(rng, n, k).into_vec(),
        Strategy::Top | Strategy::Bottom => {
            let order = descending_order(prev_attention);
            if strategy == Strategy::Top {
                order[..k].to_vec()
            } else {
                order[n - k..].to_vec()
            }
        }
    };
    rows.sort_unstable();
    Ok(rows)
}

pub fn attention_guided_drop(
    f: &Matrix,
    prev_attention: &[f64],
    k: usize,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<Matrix> {
    if prev_attention.len() != f.rows() {
        return Err(Error::argument(format!(
            "attention has {} entries for a {}-row feature map",
            prev_attention.len(),
            f.rows()
        )));
    }
    let rows = attention_guided_rows(prev_attention, k, strategy, rng)?;
    let mut m = vec![1.0; f.rows()];
    for r in rows {
        m[r] = 0.0;
    }
    Ok(scale_rows(f, &m))
}

/// Non-parametric instance importance `sigmoid(mean(row))`.
pub fn instance_importance(f: &Matrix) -> Vec<f64> {
    let d = f.cols().max(1) as f64;
    f.iter_rows()
        .map(|r| sigmoid(r.iter().sum::<f64>() / d))
        .collect()
}

/// Descending by score, ascending by index on ties.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(by_score_desc(scores));
    idx
}

/// The `count` best indices from `candidates` under `cmp`, in `cmp` order.
/// Linear-time selection followed by a sort of the selected head.
fn best_k<F>(mut candidates: Vec<usize>, count: usize, cmp: F) -> (Vec<usize>, Vec<usize>)
where
    F: Fn(&usize, &usize) -> Ordering,
{
    if count == 0 {
        return (Vec::new(), candidates);
    }
    if count < candidates.len() {
        candidates.select_nth_unstable_by(count - 1, &cmp);
    }
    let rest = candidates.split_off(count.min(candidates.len()));
    candidates.sort_by(&cmp);
    (candidates, rest)
}

/// Splits rows into the `k` most important (by descending score) and the
/// remainder (ascending index).
pub fn select_topk(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = scores.len();
    if k < 1 || k >= n {
        return Err(Error::config(format!(
            "top-k needs 1 <= K < N, got K = {k}, N = {n}"
        )));
    }
    let (top, mut rest) = best_k((0..n).collect(), k, by_score_desc(scores));
    rest.sort_unstable();
    Ok((top, rest))
}

/// Cosine similarity between every anchor row and every remaining row.
///
/// Pairs involving a zero-norm row get similarity -1 so they are never
/// preferred.
pub fn similarity_matrix(anchors: &Matrix, rest: &Matrix) -> Result<Matrix> {
    if anchors.cols() != rest.cols() {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            left: anchors.shape(),
            right: rest.shape(),
        });
    }
    let norms = |m: &Matrix| -> Vec<f64> {
        m.iter_rows()
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    };
    let (na, nr) = (norms(anchors), norms(rest));
    let mut zero_seen = false;
    let mut s = Matrix::zeros(anchors.rows(), rest.rows());
    for (i, a) in anchors.iter_rows().enumerate() {
        for (j, r) in rest.iter_rows().enumerate() {
            let denom = na[i] * nr[j];
            let v = if denom > 0.0 {
                let dot: f64 = a.iter().zip(r).map(|(x, y)| x * y).sum();
                (dot / denom).clamp(-1.0, 1.0)
            } else {
                zero_seen = true;
                -1.0
            };
            s.set(i, j, v);
        }
    }
    if zero_seen {
        log::debug!("zero-norm rows in similarity computation; assigned similarity -1");
    }
    Ok(s)
}

/// Builds the drop set from anchors `top`, remaining rows `rest` and the
/// `|top| x |rest|` similarity matrix: each anchor contributes its `g` most
/// similar remaining rows, the union is deduplicated.
pub fn build_drop_set(
    n: usize,
    top: &[usize],
    rest: &[usize],
    similarity: &Matrix,
    g: usize,
    gamma_mode: GammaMode,
) -> Result<DropPlan> {
    let k = top.len();
    let nominal = k * (1 + g);
    if nominal >= n {
        return Err(Error::config(format!(
            "K(1+G) = {nominal} must be smaller than the bag size {n}; reduce K or G"
        )));
    }
    if g > rest.len() {
        return Err(Error::config(format!(
            "G = {g} exceeds the {} remaining instances",
            rest.len()
        )));
    }
    if similarity.shape() != (k, rest.len()) {
        return Err(Error::Dimension {
            op: "build_drop_set",
            left: (k, rest.len()),
            right: similarity.shape(),
        });
    }
    let mut dropped_flag = vec![false; n];
    for &t in top {
        dropped_flag[t] = true;
    }
    for i in 0..k {
        let row = similarity.row(i);
        // Positions into `rest`; ascending position == ascending row index.
        let cmp = |&a: &usize, &b: &usize| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        };
        let (chosen, _) = best_k((0..rest.len()).collect(), g, cmp);
        for j in chosen {
            dropped_flag[rest[j]] = true;
        }
    }
    let dropped: Vec<usize> = (0..n).filter(|&i| dropped_flag[i]).collect();
    let kept: Vec<usize> = (0..n).filter(|&i| !dropped_flag[i]).collect();
    let denom = match gamma_mode {
        GammaMode::Nominal => n - nominal,
        GammaMode::Deduplicated => n - dropped.len(),
    };
    Ok(DropPlan {
        gamma: n as f64 / denom as f64,
        dropped,
        kept,
        nominal,
        anchors: top.to_vec(),
    })
}

/// Effective `(K, G)` for a bag of `n` instances, `None` if nothing can be
/// dropped.
pub fn effective_kg(n: usize, k: usize, g: usize, policy: SmallBagPolicy) -> Result<Option<(usize, usize)>> {
    if k == 0 {
        return Ok(None);
    }
    if k * (1 + g) < n {
        return Ok(Some((k, g)));
    }
    match policy {
        SmallBagPolicy::Strict => Err(Error::config(format!(
            "K(1+G) = {k}*(1+{g}) must be smaller than the bag size {n}; reduce K or G"
        ))),
        SmallBagPolicy::Clamp => {
            if n < 2 {
                return Ok(None);
            }
            let k = k.min(n - 1);
            // Largest g with k(1+g) <= n-1.
            let g = g.min((n - 1) / k - 1);
            Ok(Some((k, g)))
        }
        SmallBagPolicy::Skip => Ok(None),
    }
}

/// Algorithm of MIL-Dropout for one feature map: importance, top-k split,
/// similarity expansion and the resulting plan.
pub fn plan_mil_dropout(f: &Matrix, k: usize, g: usize, gamma_mode: GammaMode) -> Result<DropPlan> {
    let n = f.rows();
    let scores = instance_importance(f);
    let (top, rest) = select_topk(&scores, k)?;
    if k * (1 + g) >= n {
        return Err(Error::config(format!(
            "K(1+G) = {k}*(1+{g}) must be smaller than the bag size {n}; reduce K or G"
        )));
    }
    let sim = if g == 0 {
        Matrix::zeros(k, rest.len())
    } else {
        similarity_matrix(&f.select_rows(&top), &f.select_rows(&rest))?
    };
    build_drop_set(n, &top, &rest, &sim, g, gamma_mode)
}

/// Forward mode of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// MIL-Dropout on a feature map. Eval mode is the identity.
pub fn mil_dropout(f: &Matrix, config: &DropConfig, mode: Mode) -> Result<(Matrix, DropPlan)> {
    if mode == Mode::Eval {
        return Ok((f.clone(), DropPlan::identity(f.rows())));
    }
    config.validate()?;
    let Some((k, g)) = effective_kg(f.rows(), config.k, config.g, config.small_bags)? else {
        return Ok((f.clone(), DropPlan::identity(f.rows())));
    };
    let plan = plan_mil_dropout(f, k, g, config.gamma)?;
    let out = scale_rows(f, &plan.row_multipliers());
    Ok((out, plan))
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("equal shapes")
}

/// Multiplies row `r` of `f` by `multipliers[r]`.
pub fn scale_rows(f: &Matrix, multipliers: &[f64]) -> Matrix {
    let mut out = f.clone();
    for (r, &m) in multipliers.iter().enumerate() {
        out.row_mut(r).iter_mut().for_each(|x| *x *= m);
    }
    out
}

/// Expands per-row multipliers into a full `rows x cols` mask.
pub fn row_mask(multipliers: &[f64], cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(multipliers.len() * cols);
    for &m in multipliers {
        data.extend(std::iter::repeat_n(m, cols));
    }
    Matrix::new(multipliers.len(), cols, data).expect("consistent shape")
}

/// What a dropout hook applied to one layer's feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDrop {
    /// Constant multiplier mask, same shape as the feature map.
    pub mask: Matrix,
    /// Drop plan when the mechanism is instance-structured and deterministic.
    pub plan: Option<DropPlan>,
}

/// Called on each post-activation extractor feature map in training mode.
pub trait DropoutHook {
    /// `Ok(None)` leaves the layer untouched.
    fn apply(&mut self, layer: usize, features: &Matrix) -> Result<Option<LayerDrop>>;
}

/// Hook that never drops anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoDropout;

impl DropoutHook for NoDropout {
    fn apply(&mut self, _layer: usize, _features: &Matrix) -> Result<Option<LayerDrop>> {
        Ok(None)
    }
}

/// Replays previously recorded masks (gradient checks, HVPs).
#[derive(Clone, Debug, Default)]
pub struct FrozenMasks(pub Vec<Option<Matrix>>);

impl DropoutHook for FrozenMasks {
    fn apply(&mut self, layer: usize, features: &Matrix) -> Result<Option<LayerDrop>> {
        match self.0.get(layer).cloned().flatten() {
            Some(mask) if mask.shape() == features.shape() => Ok(Some(LayerDrop { mask, plan: None })),
            Some(mask) => Err(Error::Dimension {
                op: "frozen mask",
                left: features.shape(),
                right: mask.shape(),
            }),
            None => Ok(None),
        }
    }
}

/// Training-time hook driven by a [`DropConfig`].
pub struct ConfiguredDropout<'a> {
    config: &'a DropConfig,
    rng: &'a mut Rng,
    prev_attention: Option<&'a [f64]>,
    guided_rows: Option<Vec<f64>>,
}

impl<'a> ConfiguredDropout<'a> {
    /// `prev_attention` is the pooling attention from the previous visit of
    /// this bag; attention-guided dropping falls back to uniform without it.
    pub fn new(config: &'a DropConfig, rng: &'a mut Rng, prev_attention: Option<&'a [f64]>) -> Self {
        Self {
            config,
            rng,
            prev_attention,
            guided_rows: None,
        }
    }
}

impl DropoutHook for ConfiguredDropout<'_> {
    fn apply(&mut self, _layer: usize, f: &Matrix) -> Result<Option<LayerDrop>> {
        let c = self.config;
        if !c.is_active() {
            return Ok(None);
        }
        let (n, d) = f.shape();
        match c.mechanism {
            Mechanism::None => Ok(None),
            Mechanism::DropNeuron => Ok(Some(LayerDrop {
                mask: neuron_mask(n, d, c.p, c.inverted_scaling, self.rng)?,
                plan: None,
            })),
            Mechanism::DropInstance => {
                let rows = instance_mask(n, c.p, c.inverted_scaling, self.rng)?;
                Ok(Some(LayerDrop {
                    mask: row_mask(&rows, d),
                    plan: None,
                }))
            }
            Mechanism::AttentionGuided => {
                // Same rows at every layer of one forward pass.
                if self.guided_rows.is_none() {
                    let k = match c.small_bags {
                        SmallBagPolicy::Clamp => c.k.min(n.saturating_sub(1)),
                        SmallBagPolicy::Skip if c.k >= n => 0,
                        _ => c.k,
                    };
                    let uniform;
                    let attention = match self.prev_attention {
                        Some(a) if a.len() == n => a,
                        _ => {
                            uniform = vec![1.0 / n as f64; n];
                            &uniform
                        }
                    };
                    let rows = attention_guided_rows(attention, k, c.strategy, self.rng)?;
                    let mut m = vec![1.0; n];
                    for r in rows {
                        m[r] = 0.0;
                    }
                    self.guided_rows = Some(m);
                }
                let m = self.guided_rows.as_ref().expect("set above");
                Ok(Some(LayerDrop {
                    mask: row_mask(m, d),
                    plan: None,
                }))
            }
            Mechanism::MilDropout => {
                let Some((k, g)) = effective_kg(n, c.k, c.g, c.small_bags)? else {
                    return Ok(None);
                };
                let plan = plan_mil_dropout(f, k, g, c.gamma)?;
                let mut rows = plan.row_multipliers();
                if !c.inverted_scaling {
                    rows.iter_mut().filter(|r| **r != 0.0).for_each(|r| *r = 1.0);
                }
                Ok(Some(LayerDrop {
                    mask: row_mask(&rows, d),
                    plan: Some(plan),
                }))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let f = m(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let mut rng = seed::rng(1);
        assert_eq!(drop_neuron(&f, 0.0, true, &mut rng).unwrap(), f);
        assert_eq!(drop_instance(&f, 0.0, true, &mut rng).unwrap(), f);
    }

    #[test]
    fn probability_one_is_rejected() {
        let f = Matrix::ones(2, 2);
        let mut rng = seed::rng(1);
        assert!(matches!(drop_neuron(&f, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(matches!(drop_instance(&f, 1.5, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn drop_neuron_fraction() {
        let p = 0.3;
        let f = Matrix::ones(1000, 1000);
        let out = drop_neuron(&f, p, false, &mut seed::rng(11)).unwrap();
        let zeros = out.data().iter().filter(|&&x| x == 0.0).count() as f64 / 1e6;
        assert!((zeros - p).abs() < 0.01, "{zeros}");
    }

    #[test]
    fn inverted_scaling_preserves_expectation() {
        let p = 0.4;
        let f = m(&[&[1.0, -2.0, 0.5, 3.0]]);
        let mut rng = seed::rng(5);
        let trials = 100_000;
        let mut sums = [0.0; 4];
        for _ in 0..trials {
            let out = drop_neuron(&f, p, true, &mut rng).unwrap();
            for (s, x) in sums.iter_mut().zip(out.data()) {
                *s += x;
            }
        }
        for (s, x) in sums.iter().zip(f.data()) {
            let mean = s / trials as f64;
            assert!(((mean - x) / x).abs() < 0.01, "{mean} vs {x}");
        }
    }

    #[test]
    fn drop_instance_zeros_whole_rows() {
        let p = 0.25;
        let f = Matrix::from_rows(&(0..10_000).map(|i| [1.0 + i as f64, 2.0, -3.0]).collect::<Vec<_>>()).unwrap();
        let out = drop_instance(&f, p, true, &mut seed::rng(3)).unwrap();
        let mut dropped = 0;
        for r in 0..f.rows() {
            let row = out.row(r);
            if row.iter().all(|&x| x == 0.0) {
                dropped += 1;
            } else {
                let s = 1.0 / (1.0 - p);
                for (a, b) in row.iter().zip(f.row(r)) {
                    assert_eq!(*a, b * s);
                }
            }
        }
        let frac = dropped as f64 / 10_000.0;
        assert!((frac - p).abs() < 0.02, "{frac}");
    }

    #[test]
    fn seeded_masks_reproduce() {
        let a = neuron_mask(7, 5, 0.5, true, &mut seed::rng(9)).unwrap();
        let b = neuron_mask(7, 5, 0.5, true, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
        let a = instance_mask(50, 0.5, true, &mut seed::rng(9)).unwrap();
        let b = instance_mask(50, 0.5, true, &mut seed::rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn attention_guided_orderings() {
        let mut rng = seed::rng(0);
        let att = [0.7, 0.2, 0.1];
        assert_eq!(attention_guided_rows(&att, 1, Strategy::Top, &mut rng).unwrap(), vec![0]);
        assert_eq!(attention_guided_rows(&att, 1, Strategy::Bottom, &mut rng).unwrap(), vec![2]);
        assert_eq!(attention_guided_rows(&[0.5, 0.5], 1, Strategy::Top, &mut rng).unwrap(), vec![0]);
        assert!(attention_guided_rows(&att, 0, Strategy::Random, &mut rng).unwrap().is_empty());
        let r = attention_guided_rows(&att, 2, Strategy::Random, &mut rng).unwrap();
        assert_eq!(r.len(), 2);
        assert!(matches!(
            attention_guided_rows(&att, 3, Strategy::Top, &mut rng),
            Err(Error::Config(_))
        ));

        let f = m(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(attention_guided_drop(&f, &att, 0, Strategy::Top, &mut rng).unwrap(), f);
        let out = attention_guided_drop(&f, &att, 1, Strategy::Top, &mut rng).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0, 3.0]);
    }

    #[test]
    fn importance_values() {
        let s = instance_importance(&m(&[&[0.0, 0.0], &[2.0, 2.0]]));
        assert_eq!(s[0], 0.5);
        assert!((s[1] - 0.8807971).abs() < 1e-7);
        let s = instance_importance(&m(&[&[1.0, 2.0], &[0.5, 0.6], &[-1.0, 5.0]]));
        assert!(s[0] > s[1] && s[2] > s[0]);
    }

    #[test]
    fn topk_selection() {
        assert_eq!(select_topk(&[0.9, 0.1, 0.5], 2).unwrap(), (vec![0, 2], vec![1]));
        assert_eq!(select_topk(&[0.9, 0.1, 0.5], 2).unwrap().1, vec![1]);
        assert_eq!(select_topk(&[0.3, 0.7, 0.2, 0.5], 3).unwrap().1, vec![2]);
        assert_eq!(select_topk(&[0.5; 4], 2).unwrap(), (vec![0, 1], vec![2, 3]));
        assert!(select_topk(&[0.5; 4], 4).is_err());
        assert!(select_topk(&[0.5; 4], 0).is_err());
    }

    #[test]
    fn cosine_values() {
        let s = similarity_matrix(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0], &[0.0, 3.0], &[1.0, 1.0], &[0.0, 0.0]])).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(0, 2) - 0.70711).abs() < 1e-5);
        assert_eq!(s.get(0, 3), -1.0);
    }

    #[test]
    fn drop_set_without_similar_instances() {
        let plan = build_drop_set(5, &[3, 1], &[0, 2, 4], &Matrix::zeros(2, 3), 0, GammaMode::Nominal).unwrap();
        assert_eq!(plan.dropped, vec![1, 3]);
        assert_eq!(plan.kept, vec![0, 2, 4]);
        assert_eq!(plan.gamma, 5.0 / 3.0);
    }

    #[test]
    fn drop_set_deduplicates_shared_neighbours() {
        // Both anchors are most similar to rest position 1 (row 3).
        let sim = m(&[&[0.1, 0.9, 0.2], &[0.0, 0.8, 0.3]]);
        let plan = build_drop_set(6, &[0, 1], &[2, 3, 4], &sim, 1, GammaMode::Nominal).unwrap();
        assert_eq!(plan.dropped, vec![0, 1, 3]);
        assert_eq!(plan.nominal, 4);
        assert_eq!(plan.gamma, 6.0 / 2.0);
        let dedup = build_drop_set(6, &[0, 1], &[2, 3, 4], &sim, 1, GammaMode::Deduplicated).unwrap();
        assert_eq!(dedup.dropped, plan.dropped);
        assert_eq!(dedup.gamma, 6.0 / 3.0);
    }

    #[test]
    fn gamma_direct_substitution() {
        let top: Vec<usize> = (0..10).collect();
        let rest: Vec<usize> = (10..100).collect();
        let plan = build_drop_set(100, &top, &rest, &Matrix::zeros(10, 90), 4, GammaMode::Nominal).unwrap();
        assert_eq!(plan.gamma, 2.0);
    }

    #[test]
    fn oversized_drop_is_config_error() {
        let err = build_drop_set(4, &[0, 1], &[2, 3], &Matrix::zeros(2, 2), 1, GammaMode::Nominal).unwrap_err();
        assert!(matches!(err, Error::Config(ref s) if s.contains("reduce K or G")), "{err}");
    }

    #[test]
    fn hand_traced_four_row_example() {
        let f = m(&[&[4.0], &[3.0], &[2.0], &[1.0]]);
        let cfg = DropConfig::mil_dropout(1, 1);
        let (out, plan) = mil_dropout(&f, &cfg, Mode::Train).unwrap();
        assert_eq!(plan.anchors, vec![0]);
        assert_eq!(plan.dropped, vec![0, 1]);
        assert_eq!(plan.kept, vec![2, 3]);
        assert_eq!(plan.gamma, 2.0);
        assert_eq!(out.data(), &[0.0, 0.0, 4.0, 2.0]);
    }

    #[test]
    fn eval_mode_and_determinism() {
        let f = m(&[&[0.3, 1.0], &[2.0, -1.0], &[0.5, 0.5], &[1.5, 0.1], &[-0.2, 0.9]]);
        let cfg = DropConfig::mil_dropout(1, 2);
        let (out, plan) = mil_dropout(&f, &cfg, Mode::Eval).unwrap();
        assert_eq!(out, f);
        assert!(plan.dropped.is_empty());
        let a = mil_dropout(&f, &cfg, Mode::Train).unwrap();
        let b = mil_dropout(&f, &cfg, Mode::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_bag_policies() {
        assert!(effective_kg(4, 2, 1, SmallBagPolicy::Strict).is_err());
        assert_eq!(effective_kg(4, 2, 1, SmallBagPolicy::Clamp).unwrap(), Some((2, 0)));
        assert_eq!(effective_kg(2, 10, 5, SmallBagPolicy::Clamp).unwrap(), Some((1, 0)));
        assert_eq!(effective_kg(1, 10, 5, SmallBagPolicy::Clamp).unwrap(), None);
        assert_eq!(effective_kg(20, 3, 2, SmallBagPolicy::Strict).unwrap(), Some((3, 2)));
        assert_eq!(effective_kg(4, 2, 1, SmallBagPolicy::Skip).unwrap(), None);
        assert_eq!(effective_kg(5, 2, 1, SmallBagPolicy::Skip).unwrap(), Some((2, 1)));
        let cfg = DropConfig::mil_dropout(2, 2);
        assert!(cfg.validate_for_bag_size(6).is_err());
        assert!(cfg.validate_for_bag_size(7).is_ok());
    }

    #[test]
    fn hook_can_leave_mil_dropout_survivors_unscaled() {
        let f = m(&[&[4.0], &[3.0], &[2.0], &[1.0]]);
        let mut rng = seed::rng(0);
        let scaled = DropConfig::mil_dropout(1, 1);
        let plain = DropConfig {
            inverted_scaling: false,
            ..scaled.clone()
        };
        let a = ConfiguredDropout::new(&scaled, &mut rng, None).apply(0, &f).unwrap().unwrap();
        assert_eq!(a.mask.data(), [0.0, 0.0, 2.0, 2.0]);
        let b = ConfiguredDropout::new(&plain, &mut rng, None).apply(0, &f).unwrap().unwrap();
        assert_eq!(b.mask.data(), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(b.plan.unwrap().gamma, 2.0);
    }

    #[test]
    fn plan_log_line_is_json() {
        let plan = DropPlan {
            dropped: vec![0, 3],
            kept: vec![1, 2],
            gamma: 2.0,
            nominal: 2,
            anchors: vec![0],
        };
        let v: serde_json::Value = serde_json::from_str(&plan.log_line(1)).unwrap();
        assert_eq!(v["layer"], 1);
        assert_eq!(v["dropped"], serde_json::json!([0, 3]));
        assert_eq!(v["gamma"], 2.0);
    }
}
