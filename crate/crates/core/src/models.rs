//! The MIL network: a ReLU MLP feature extractor applied per instance, an
//! attention pooling over instances and a logistic bag classifier.
//!
//! ```text
//! X (N x D_in) -> [linear -> ReLU -> dropout hook] x L -> V (N x D)
//! α = softmax_n( w1ᵀ tanh(w2ᵀ vₙ) )            (ABMIL)
//! α = softmax_n( w1ᵀ (tanh(w2ᵀ vₙ) ⊙ σ(w3ᵀ vₙ)) )  (gated ABMIL)
//! z = Σ αₙ vₙ,   ŷ = σ(z·w + b)
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use crate::dropout::Mode;
use crate::dropout::{ConfiguredDropout, DropConfig, DropPlan, DropoutHook, LayerDrop};
use crate::seed::Rng;
use crate::tensor::{Activation, Graph, Matrix, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    #[default]
    Abmil,
    AbmilGated,
}

impl PoolingKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Abmil => "abmil",
            PoolingKind::AbmilGated => "abmil_gated",
        }
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Extractor widths; the last one is the embedding size `D`.
    pub hidden: Vec<usize>,
    /// Attention hidden size `L`.
    pub attention_dim: usize,
    pub pooling: PoolingKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden: vec![256, 128, 64],
            attention_dim: 64,
            pooling: PoolingKind::Abmil,
        }
    }
}

impl ModelConfig {
    pub fn benchmark(input_dim: usize, pooling: PoolingKind) -> Self {
        Self {
            input_dim,
            pooling,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input dimension must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("extractor needs at least one layer of positive width"));
        }
        if self.attention_dim == 0 {
            return Err(Error::config("attention hidden size must be positive"));
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `D_in x D_out`.
    pub weight: Matrix,
    /// `1 x D_out`.
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolingParams {
    /// `D x L`.
    pub w2: Matrix,
    /// `L x 1`.
    pub w1: Matrix,
    /// `D x L` gate, gated variant only.
    pub w3: Option<Matrix>,
}

impl PoolingParams {
    pub fn kind(&self) -> PoolingKind {
        if self.w3.is_some() {
            PoolingKind::AbmilGated
        } else {
            PoolingKind::Abmil
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `D x 1`.
    pub weight: Matrix,
    /// `1 x 1`.
    pub bias: Matrix,
}

/// All trainable parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub extractor: ExtractorParams,
    pub pooling: PoolingParams,
    pub classifier: ClassifierParams,
}

fn uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::new(rows, cols, data).expect("consistent shape")
}

impl ModelParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut d_in = config.input_dim;
        for &d_out in &config.hidden {
            layers.push(Linear {
                weight: uniform(d_in, d_out, d_in, rng),
                bias: Matrix::zeros(1, d_out),
            });
            d_in = d_out;
        }
        let (d, l) = (d_in, config.attention_dim);
        let w2 = uniform(d, l, d, rng);
        let w1 = uniform(l, 1, l, rng);
        let w3 = match config.pooling {
            PoolingKind::Abmil => None,
            PoolingKind::AbmilGated => Some(uniform(d, l, d, rng)),
        };
        Ok(Self {
            extractor: ExtractorParams { layers },
            pooling: PoolingParams { w2, w1, w3 },
            classifier: ClassifierParams {
                weight: uniform(d, 1, d, rng),
                bias: Matrix::zeros(1, 1),
            },
        })
    }

    /// All-zero parameters of the given architecture.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(config, &mut crate::seed::rng(0))?;
        for m in p.matrices_mut() {
            m.fill(0.0);
        }
        Ok(p)
    }

    pub fn pooling_kind(&self) -> PoolingKind {
        self.pooling.kind()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.layers[0].weight.rows()
    }

    /// Named parameter matrices in canonical order.
    pub fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.layers.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &l.weight));
            out.push((format!("extractor.{i}.bias"), &l.bias));
        }
        out.push(("pooling.w2".into(), &self.pooling.w2));
        out.push(("pooling.w1".into(), &self.pooling.w1));
        if let Some(w3) = &self.pooling.w3 {
            out.push(("pooling.w3".into(), w3));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.named_matrices().into_iter().map(|(_, m)| m).collect()
    }

    /// Same order as [`ModelParams::matrices`].
    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for l in &mut self.extractor.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.pooling.w2);
        out.push(&mut self.pooling.w1);
        if let Some(w3) = &mut self.pooling.w3 {
            out.push(w3);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for m in self.matrices() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::argument(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for m in self.matrices_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut p = self.clone();
        p.set_flat(flat)?;
        Ok(p)
    }

    /// Writes the text checkpoint format.
    ///
    /// ```text
    /// mildrop-checkpoint 1
    /// pooling abmil
    /// matrices <count>
    /// <name> <rows> <cols>
    /// <row-major values, space separated>
    /// ...
    /// ```
    /// Values use the shortest representation that parses back to the same
    /// `f64`, so save/load is bit-exact.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let named = self.named_matrices();
        writeln!(w, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(w, "pooling {}", self.pooling_kind().name())?;
        writeln!(w, "matrices {}", named.len())?;
        let mut line = String::new();
        for (name, m) in named {
            writeln!(w, "{name} {} {}", m.rows(), m.cols())?;
            line.clear();
            for (i, v) in m.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:?}").expect("write to string");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Parse {
                    line: 0,
                    msg: format!("unexpected end of checkpoint, expected {what}"),
                }),
            }
        };
        let (n, header) = next("header")?;
        if header.trim() != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
            return Err(Error::Parse {
                line: n,
                msg: format!("unsupported checkpoint header {header:?}"),
            });
        }
        let (n, pooling) = next("pooling")?;
        let gated = match pooling.trim() {
            "pooling abmil" => false,
            "pooling abmil_gated" => true,
            other => {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("unknown pooling line {other:?}"),
                })
            }
        };
        let (n, count) = next("matrix count")?;
        let count: usize = count
            .trim()
            .strip_prefix("matrices ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Parse {
                line: n,
                msg: "expected `matrices <count>`".into(),
            })?;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, head) = next("matrix header")?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            let bad = || Error::Parse {
                line: n,
                msg: format!("bad matrix header {head:?}"),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            let rows: usize = parts[1].parse().map_err(|_| bad())?;
            let cols: usize = parts[2].parse().map_err(|_| bad())?;
            let (n, body) = next("matrix values")?;
            let data = body
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: n,
                    msg: e.to_string(),
                })?;
            let m = Matrix::new(rows, cols, data).map_err(|e| Error::Parse {
                line: n,
                msg: e.to_string(),
            })?;
            named.push((parts[0].to_string(), m));
        }
        Self::from_named(named, gated)
    }

    fn from_named(named: Vec<(String, Matrix)>, gated: bool) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Matrix> = named.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks {name}")))
        };
        let mut layers = Vec::new();
        let mut i = 0;
        loop {
            let w = format!("extractor.{i}.weight");
            let Ok(weight) = take(&w) else { break };
            let bias = take(&format!("extractor.{i}.bias"))?;
            layers.push(Linear { weight, bias });
            i += 1;
        }
        if layers.is_empty() {
            return Err(Error::Integrity("checkpoint has no extractor layers".into()));
        }
        let pooling = PoolingParams {
            w2: take("pooling.w2")?,
            w1: take("pooling.w1")?,
            w3: if gated { Some(take("pooling.w3")?) } else { None },
        };
        let classifier = ClassifierParams {
            weight: take("classifier.weight")?,
            bias: take("classifier.bias")?,
        };
        let p = Self {
            extractor: ExtractorParams { layers },
            pooling,
            classifier,
        };
        p.check_shapes()?;
        Ok(p)
    }

    /// Verifies that all matrix shapes chain.
    pub fn check_shapes(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Integrity(what));
        let mut d = self.extractor.layers[0].weight.rows();
        for (i, l) in self.extractor.layers.iter().enumerate() {
            if l.weight.rows() != d || l.bias.shape() != (1, l.weight.cols()) {
                return bad(format!("extractor layer {i} does not chain"));
            }
            d = l.weight.cols();
        }
        let att = self.pooling.w2.cols();
        if self.pooling.w2.rows() != d || self.pooling.w1.shape() != (att, 1) {
            return bad("pooling shapes do not match the embedding".into());
        }
        if let Some(w3) = &self.pooling.w3 {
            if w3.shape() != self.pooling.w2.shape() {
                return bad("gate shape differs from w2".into());
            }
        }
        if self.classifier.weight.shape() != (d, 1) || self.classifier.bias.shape() != (1, 1) {
            return bad("classifier shapes do not match the embedding".into());
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &str = "mildrop-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Graph handles of the parameter leaves, in [`ModelParams::matrices`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    /// Concatenated gradients, same layout as [`ModelParams::to_flat`].
    pub fn flat_grad(&self, g: &Graph) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in &self.0 {
            out.extend_from_slice(g.grad(v).data());
        }
        out
    }

    /// Moves the parameter gradients out of `g`.
    pub fn take_grads(&self, g: &mut Graph) -> Vec<Matrix> {
        self.0.iter().map(|&v| g.take_grad(v)).collect()
    }
}

/// Handles into a graph built by [`build_forward`].
pub struct GraphForward {
    pub prob: Var,
    /// `1 x N` attention weights.
    pub attention: Var,
    pub params: ParamVars,
    /// Post-ReLU feature maps (before masking), one per extractor layer.
    pub layer_maps: Vec<Var>,
    pub layer_drops: Vec<Option<LayerDrop>>,
}

/// Records the network on `g`. `hook: None` is eval mode.
pub fn build_forward<'a>(
    g: &mut Graph<'a>,
    bag: &'a Matrix,
    params: &'a ModelParams,
    mut hook: Option<&mut dyn DropoutHook>,
) -> Result<GraphForward> {
    if bag.rows() == 0 {
        return Err(Error::config("bag has no instances"));
    }
    if bag.cols() != params.input_dim() {
        return Err(Error::config(format!(
            "bag has {} features, model expects {}",
            bag.cols(),
            params.input_dim()
        )));
    }
    let mut param_vars = Vec::new();
    let mut h = g.constant_ref(bag);
    let mut layer_maps = Vec::new();
    let mut layer_drops = Vec::new();
    for (layer, lin) in params.extractor.layers.iter().enumerate() {
        let w = g.param_ref(&lin.weight);
        let b = g.param_ref(&lin.bias);
        param_vars.push(w);
        param_vars.push(b);
        let pre = g.matmul(h, w)?;
        let pre = g.add(pre, b)?;
        let act = g.activation(pre, Activation::Relu);
        layer_maps.push(act);
        h = act;
        if let Some(hook) = hook.as_deref_mut() {
            let drop = hook.apply(layer, g.value(act))?;
            if let Some(d) = &drop {
                let mask = g.constant(d.mask.clone());
                h = g.mul(act, mask)?;
            }
            layer_drops.push(drop);
        } else {
            layer_drops.push(None);
        }
    }
    let w2 = g.param_ref(&params.pooling.w2);
    let w1 = g.param_ref(&params.pooling.w1);
    param_vars.push(w2);
    param_vars.push(w1);
    let w3 = params.pooling.w3.as_ref().map(|w3| {
        let v = g.param_ref(w3);
        param_vars.push(v);
        v
    });
    let attention = attention_on_graph(g, h, w2, w1, w3)?;
    let z = g.matmul(attention, h)?;
    let cw = g.param_ref(&params.classifier.weight);
    let cb = g.param_ref(&params.classifier.bias);
    param_vars.push(cw);
    param_vars.push(cb);
    let logit = g.matmul(z, cw)?;
    let logit = g.add(logit, cb)?;
    let prob = g.activation(logit, Activation::Sigmoid);
    Ok(GraphForward {
        prob,
        attention,
        params: ParamVars(param_vars),
        layer_maps,
        layer_drops,
    })
}

/// `1 x N` attention weights over the rows of `v`.
fn attention_on_graph(g: &mut Graph, v: Var, w2: Var, w1: Var, w3: Option<Var>) -> Result<Var> {
    let hidden = g.matmul(v, w2)?;
    let mut hidden = g.activation(hidden, Activation::Tanh);
    if let Some(w3) = w3 {
        let gate = g.matmul(v, w3)?;
        let gate = g.activation(gate, Activation::Sigmoid);
        hidden = g.mul(hidden, gate)?;
    }
    let logits = g.matmul(hidden, w1)?;
    let row = g.transpose(logits);
    g.softmax_row(row)
}

fn pool(v: &Matrix, params: &PoolingParams) -> Result<(Matrix, Vec<f64>)> {
    if v.rows() == 0 {
        return Err(Error::argument("pooling an empty bag"));
    }
    let mut g = Graph::new();
    let vv = g.constant_ref(v);
    let w2 = g.constant_ref(&params.w2);
    let w1 = g.constant_ref(&params.w1);
    let w3 = params.w3.as_ref().map(|w| g.constant_ref(w));
    let att = attention_on_graph(&mut g, vv, w2, w1, w3)?;
    let z = g.matmul(att, vv)?;
    Ok((g.value(z).clone(), g.value(att).data().to_vec()))
}

/// ABMIL pooling of an `N x D` embedding: `(z: 1 x D, α)`.
pub fn abmil_pool(v: &Matrix, params: &PoolingParams) -> Result<(Matrix, Vec<f64>)> {
    let plain = PoolingParams {
        w3: None,
        ..params.clone()
    };
    pool(v, &plain)
}

/// Gated ABMIL pooling; `params.w3` is required.
pub fn gated_abmil_pool(v: &Matrix, params: &PoolingParams) -> Result<(Matrix, Vec<f64>)> {
    if params.w3.is_none() {
        return Err(Error::config("gated pooling needs a gate matrix w3"));
    }
    pool(v, params)
}

/// `sigmoid(z·w + b)` for a `1 x D` bag embedding.
pub fn classify(z: &Matrix, params: &ClassifierParams) -> Result<f64> {
    let logit = z.matmul(&params.weight)?.data()[0] + params.bias.data()[0];
    Ok(crate::tensor::sigmoid(logit))
}

/// Runs the extractor alone; returns the final embedding and the per-layer
/// post-activation maps. Eval mode never calls the hook.
pub fn extract(
    bag: &Matrix,
    params: &ExtractorParams,
    hook: &mut dyn DropoutHook,
    mode: Mode,
) -> Result<(Matrix, Vec<Matrix>)> {
    let first = params
        .layers
        .first()
        .ok_or_else(|| Error::config("extractor has no layers"))?;
    if bag.rows() == 0 || bag.cols() != first.weight.rows() {
        return Err(Error::config(format!(
            "bag of shape {:?} does not fit an extractor expecting {} features",
            bag.shape(),
            first.weight.rows()
        )));
    }
    let mut h = bag.clone();
    let mut maps = Vec::new();
    for (layer, lin) in params.layers.iter().enumerate() {
        let mut a = h.matmul(&lin.weight)?;
        let bias = lin.bias.data();
        for r in 0..a.rows() {
            for (x, b) in a.row_mut(r).iter_mut().zip(bias) {
                *x = (*x + b).max(0.0);
            }
        }
        maps.push(a.clone());
        h = match mode {
            Mode::Eval => a,
            Mode::Train => match hook.apply(layer, &a)? {
                Some(d) => {
                    let data = a.data().iter().zip(d.mask.data()).map(|(x, m)| x * m).collect();
                    Matrix::new(a.rows(), a.cols(), data)?
                }
                None => a,
            },
        };
    }
    Ok((h, maps))
}

/// Everything observable about one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub prob: f64,
    pub attention: Vec<f64>,
    /// Post-ReLU maps before masking.
    pub layer_maps: Vec<Matrix>,
    /// Masks applied per layer (None where the layer was untouched).
    pub masks: Vec<Option<Matrix>>,
    pub plans: Vec<Option<DropPlan>>,
}

impl ForwardTrace {
    fn from_graph(g: &Graph, fw: &GraphForward) -> Self {
        Self {
            prob: g.value(fw.prob).data()[0],
            attention: g.value(fw.attention).data().to_vec(),
            layer_maps: fw.layer_maps.iter().map(|&v| g.value(v).clone()).collect(),
            masks: fw
                .layer_drops
                .iter()
                .map(|d| d.as_ref().map(|d| d.mask.clone()))
                .collect(),
            plans: fw
                .layer_drops
                .iter()
                .map(|d| d.as_ref().and_then(|d| d.plan.clone()))
                .collect(),
        }
    }
}

/// Full forward pass with an explicit hook (`None` = eval mode).
pub fn forward_with_hook(
    bag: &Matrix,
    params: &ModelParams,
    hook: Option<&mut dyn DropoutHook>,
) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let fw = build_forward(&mut g, bag, params, hook)?;
    Ok(ForwardTrace::from_graph(&g, &fw))
}

/// Full forward pass. In train mode with an active dropout configuration an
/// rng is required; eval mode ignores both.
pub fn forward(
    bag: &Matrix,
    params: &ModelParams,
    dropout: &DropConfig,
    mode: Mode,
    rng: Option<&mut Rng>,
    prev_attention: Option<&[f64]>,
) -> Result<ForwardTrace> {
    match mode {
        Mode::Eval => forward_with_hook(bag, params, None),
        Mode::Train if !dropout.is_active() => {
            forward_with_hook(bag, params, Some(&mut crate::dropout::NoDropout))
        }
        Mode::Train => {
            let rng = rng.ok_or_else(|| Error::argument("training-mode dropout needs an rng"))?;
            let mut hook = ConfiguredDropout::new(dropout, rng, prev_attention);
            forward_with_hook(bag, params, Some(&mut hook))
        }
    }
}

/// Bag probability in eval mode.
pub fn predict(bag: &Matrix, params: &ModelParams) -> Result<f64> {
    Ok(forward_with_hook(bag, params, None)?.prob)
}
