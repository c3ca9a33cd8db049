//! Objective, optimiser and the training loop.
//!
//! Training steps one bag at a time (bags have different sizes), with Adam
//! and decoupled weight decay by default.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::diagnostics::{self, GdeAccumulator};
use crate::dropout::{ConfiguredDropout, DropConfig, DropoutHook, Mechanism, NoDropout};
use crate::models::{build_forward, ModelParams};
use crate::seed;
use crate::tensor::{bce_value, Graph, Matrix, Var};
use crate::{Error, Result};

/// Records `-[y ln p + (1-y) ln(1-p)]` (p clamped to `[1e-12, 1-1e-12]`).
pub fn bce_loss(g: &mut Graph, prob: Var, label: f64) -> Result<Var> {
    g.bce(prob, label)
}

/// Scalar BCE, same clamp as [`bce_loss`].
pub fn bce(prob: f64, label: f64) -> f64 {
    bce_value(prob, label)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayStyle {
    /// `θ ← θ − lr·wd·θ` next to the Adam update.
    #[default]
    Decoupled,
    /// `g ← g + wd·θ` before the moments.
    Coupled,
}

/// First and second moments for every parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
            .unzip();
        Self {
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::new(params.matrices())
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    decay: DecayStyle,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::argument(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powf(state.t as f64);
    let bc2 = 1.0 - state.beta2.powf(state.t as f64);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let step = lr / bc1;
    let inv_sqrt_bc2 = 1.0 / bc2.sqrt();
    let (coupled, shrink) = match decay {
        DecayStyle::Coupled => (weight_decay, 1.0),
        DecayStyle::Decoupled => (0.0, 1.0 - lr * weight_decay),
    };
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gj = gj + coupled * *theta;
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            *theta = *theta * shrink - step * *mj / (vj.sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

/// Cadence of gradient-direction-error tracking during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdeTracking {
    /// Steps between recomputations of the whole-dataset gradient.
    pub refresh_every: usize,
}

impl Default for GdeTracking {
    fn default() -> Self {
        Self { refresh_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: DropConfig,
    pub shuffle: bool,
    pub decay: DecayStyle,
    pub gde: Option<GdeTracking>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 5e-3,
            epochs: 40,
            seed: 0,
            dropout: DropConfig::none(),
            shuffle: true,
            decay: DecayStyle::Decoupled,
            gde: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Some(t) = &self.gde {
            if t.refresh_every == 0 {
                return Err(Error::config("GDE refresh interval must be >= 1"));
            }
        }
        self.dropout.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gde: Option<f64>,
}

/// Mean GDE over one refresh window, keyed by the window's first step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdePoint {
    pub step: usize,
    pub gde: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub gde_trace: Vec<GdePoint>,
}

impl History {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }

    /// Trapezoid area under the GDE trace over steps.
    pub fn gde_area(&self) -> f64 {
        self.gde_trace
            .windows(2)
            .map(|w| 0.5 * (w[0].gde + w[1].gde) * (w[1].step - w[0].step) as f64)
            .sum()
    }
}

/// Loss and flat gradient of one bag; `hook: None` means eval-mode dropout.
pub fn bag_loss_and_grad(
    params: &ModelParams,
    bag: &Bag,
    hook: Option<&mut dyn DropoutHook>,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let fw = build_forward(&mut g, &bag.instances, params, hook)?;
    let loss = g.bce(fw.prob, bag.label_f64())?;
    g.backward(loss)?;
    Ok((g.value(loss).data()[0], fw.params.flat_grad(&g)))
}

/// Trains `init` on `bags` one bag per step.
pub fn train(bags: &[Bag], init: ModelParams, config: &TrainConfig) -> Result<(ModelParams, History)> {
    config.validate()?;
    if bags.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let min_bag = bags.iter().map(|b| b.len()).min().unwrap_or(0);
    config.dropout.validate_for_bag_size(min_bag)?;

    let mut params = init;
    let mut state = AdamState::for_model(&params);
    let mut shuffle_rng = seed::stream(config.seed, "shuffle", &[]);
    let mut mask_rng = seed::stream(config.seed, "masks", &[]);
    let mut prev_attention: Vec<Option<Vec<f64>>> = vec![None; bags.len()];
    let guided = config.dropout.mechanism == Mechanism::AttentionGuided;
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut history = History::default();
    let mut gde_acc: Option<GdeAccumulator> = None;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        let mut epoch_gde = Vec::new();
        for &bi in &order {
            let bag = &bags[bi];
            if let Some(tracking) = &config.gde {
                if step % tracking.refresh_every == 0 {
                    if let Some(acc) = gde_acc.take() {
                        history.gde_trace.extend(acc.finish());
                    }
                    let reference = diagnostics::full_dataset_gradient(&params, bags)?;
                    gde_acc = Some(GdeAccumulator::new(step, reference.gradient));
                }
            }

            let mut g = Graph::new();
            let fw = if config.dropout.is_active() {
                let prev = if guided { prev_attention[bi].as_deref() } else { None };
                let mut hook = ConfiguredDropout::new(&config.dropout, &mut mask_rng, prev);
                build_forward(&mut g, &bag.instances, &params, Some(&mut hook))?
            } else {
                build_forward(&mut g, &bag.instances, &params, Some(&mut NoDropout))?
            };
            let loss_var = g.bce(fw.prob, bag.label_f64())?;
            let loss = g.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {loss} on bag {:?} at step {step}",
                    bag.id
                )));
            }
            g.backward(loss_var)?;
            let grads = fw.params.take_grads(&mut g);
            if guided {
                prev_attention[bi] = Some(g.value(fw.attention).data().to_vec());
            }
            if let Some(acc) = gde_acc.as_mut() {
                let flat: Vec<f64> = grads.iter().flat_map(|m| m.data().iter().copied()).collect();
                if let Some(v) = acc.push(&flat) {
                    epoch_gde.push(v);
                }
            }
            let mut mats = params.matrices_mut();
            adam_step(
                &mut mats,
                &grads,
                &mut state,
                config.learning_rate,
                config.weight_decay,
                config.decay,
            )?;
            loss_sum += loss;
            step += 1;
        }
        let gde = (!epoch_gde.is_empty()).then(|| epoch_gde.iter().sum::<f64>() / epoch_gde.len() as f64);
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / bags.len() as f64,
            gde,
        });
    }
    if let Some(acc) = gde_acc.take() {
        history.gde_trace.extend(acc.finish());
    }
    Ok((params, history))
}
