//! LoRA adapters, the frozen toy base model that stands in for the LLM,
//! and the vanilla composition strategies.
//!
//! An adapter is a named set of per-layer low-rank pairs (A, B); its
//! contribution to a layer is `(alpha / rank) * B A x` on top of the frozen
//! affine map. Composition either averages those contributions (mixture),
//! averages the parameters themselves (fusion), applies only the top-ranked
//! adapter (selection), or defers to the router (see [`crate::router`]).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::router::{DamolePlug, RouterLora};
use crate::tensor::{Tape, Tensor, Var};

pub type LayerId = usize;

/// One target layer's low-rank pair: `a` is `rank x d_in`, `b` is `d_out x rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraDelta {
    pub a: Tensor,
    pub b: Tensor,
}

/// A named low-rank delta over one or more base-model layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    name: String,
    task_tag: String,
    rank: usize,
    alpha: f64,
    deltas: BTreeMap<LayerId, LoraDelta>,
}

impl LoraAdapter {
    pub fn new(
        name: impl Into<String>,
        task_tag: impl Into<String>,
        rank: usize,
        alpha: f64,
        deltas: BTreeMap<LayerId, LoraDelta>,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Contract("adapter rank must be positive".into()));
        }
        if !(alpha > 0.0) {
            return Err(Error::Contract(format!("adapter alpha {alpha} must be positive")));
        }
        for (layer, d) in &deltas {
            let (ar, ac) = (d.a.shape()[0], d.a.shape()[1]);
            let (br, bc) = (d.b.shape()[0], d.b.shape()[1]);
            if d.a.shape().len() != 2 || d.b.shape().len() != 2 || ar != rank || bc != rank {
                return Err(Error::Dimension(format!(
                    "layer {layer}: A {:?} / B {:?} do not match rank {rank}",
                    d.a.shape(),
                    d.b.shape()
                )));
            }
            if rank > ac.min(br) {
                return Err(Error::Contract(format!(
                    "layer {layer}: rank {rank} exceeds min({ac}, {br})"
                )));
            }
        }
        Ok(LoraAdapter {
            name: name.into(),
            task_tag: task_tag.into(),
            rank,
            alpha,
            deltas,
        })
    }

    /// Fresh adapter targeting every model layer: A gaussian, B zero, so the
    /// initial delta is exactly zero.
    pub fn init_for_model<R: Rng>(
        name: impl Into<String>,
        task_tag: impl Into<String>,
        model: &BaseModel,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut deltas = BTreeMap::new();
        for layer in 0..model.layer_count() {
            let (d_in, d_out) = model.dims_of(layer);
            deltas.insert(
                layer,
                LoraDelta {
                    a: Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
                    b: Tensor::zeros(&[d_out, rank]),
                },
            );
        }
        LoraAdapter::new(name, task_tag, rank, alpha, deltas)
    }

    /// All-zero adapter of conforming shape; contributes exactly nothing.
    pub fn null(name: impl Into<String>, model: &BaseModel, rank: usize, alpha: f64) -> Result<Self> {
        let mut deltas = BTreeMap::new();
        for layer in 0..model.layer_count() {
            let (d_in, d_out) = model.dims_of(layer);
            deltas.insert(
                layer,
                LoraDelta {
                    a: Tensor::zeros(&[rank, d_in]),
                    b: Tensor::zeros(&[d_out, rank]),
                },
            );
        }
        LoraAdapter::new(name, "null", rank, alpha, deltas)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn task_tag(&self) -> &str {
        &self.task_tag
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self, layer: LayerId) -> Option<&LoraDelta> {
        self.deltas.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerId, &LoraDelta)> {
        self.deltas.iter()
    }

    pub fn targets(&self, layer: LayerId) -> bool {
        self.deltas.contains_key(&layer)
    }

    /// Checks that every targeted layer exists in the model with matching
    /// dimensions.
    pub fn validate_against(&self, model: &BaseModel) -> Result<()> {
        for (&layer, d) in &self.deltas {
            if layer >= model.layer_count() {
                return Err(Error::Incompatible(format!(
                    "adapter {} targets layer {layer}, model has {}",
                    self.name,
                    model.layer_count()
                )));
            }
            let (d_in, d_out) = model.dims_of(layer);
            if d.a.shape()[1] != d_in || d.b.shape()[0] != d_out {
                return Err(Error::Incompatible(format!(
                    "adapter {} layer {layer}: A {:?} / B {:?} vs model {d_out}x{d_in}",
                    self.name,
                    d.a.shape(),
                    d.b.shape()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn with_deltas(&self, deltas: BTreeMap<LayerId, LoraDelta>) -> Result<Self> {
        LoraAdapter::new(self.name.clone(), self.task_tag.clone(), self.rank, self.alpha, deltas)
    }
}

/// One frozen affine layer: `weight` is `d_out x d_in`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    weight: Tensor,
    bias: Tensor,
}

impl AffineLayer {
    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// The frozen stand-in for the LLM: position-wise affine layers with tanh
/// between them, plus an optional mean-pool classification head that reads
/// the first `classes` components of the pooled output as logits.
#[derive(Debug, Clone)]
pub struct BaseModel {
    layers: Vec<AffineLayer>,
    classes: Option<usize>,
}

impl BaseModel {
    /// `dims` chains layer sizes, e.g. `[32, 64, 64, 32]` builds three layers.
    pub fn new(dims: &[usize], classes: Option<usize>, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("model wants at least one layer".into()));
        }
        if let Some(c) = classes {
            if c == 0 || c > *dims.last().unwrap() {
                return Err(Error::Config(format!(
                    "head classes {c} exceed output dim {}",
                    dims.last().unwrap()
                )));
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (d_in, d_out) = (w[0], w[1]);
            // 0.8/sqrt(d_in) keeps pre-activations inside tanh's mild range.
            layers.push(AffineLayer {
                weight: Tensor::randn(&[d_out, d_in], 0.8 / (d_in as f64).sqrt(), &mut rng),
                bias: Tensor::randn(&[d_out], 0.05, &mut rng),
            });
        }
        Ok(BaseModel { layers, classes })
    }

    /// The default desk-scale model: 32 -> 64 -> 64 -> 32 with a 4-class head.
    pub fn toy(seed: u64) -> Self {
        BaseModel::new(&[32, 64, 64, 32], Some(4), seed).expect("valid toy dims")
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, id: LayerId) -> Option<&AffineLayer> {
        self.layers.get(id)
    }

    pub fn dims_of(&self, id: LayerId) -> (usize, usize) {
        let w = self.layers[id].weight.shape();
        (w[1], w[0])
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[0]
    }

    pub fn classes(&self) -> Option<usize> {
        self.classes
    }

    /// Mean-pools a `b x l x d` output over the sequence axis and slices the
    /// first `classes` components as logits.
    pub fn pooled_logits(&self, out: &Tensor) -> Result<Tensor> {
        let classes = self
            .classes
            .ok_or_else(|| Error::Config("model has no classification head".into()))?;
        let shape = out.shape();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!("pooled_logits wants b x l x d, got {shape:?}")));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        let mut logits = vec![0.0; b * classes];
        for bi in 0..b {
            for c in 0..classes {
                let mut acc = 0.0;
                for li in 0..l {
                    acc += out.data()[(bi * l + li) * d + c];
                }
                logits[bi * classes + c] = acc / l as f64;
            }
        }
        Tensor::from_vec(vec![b, classes], logits)
    }

    /// Predicted class per sample.
    pub fn classify(&self, out: &Tensor) -> Result<Vec<usize>> {
        Ok(self.pooled_logits(out)?.argmax_last())
    }
}

/// How the retrieved adapters are combined at serve time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompositionStrategy {
    /// Apply only the top-1 retrieved adapter.
    Selection,
    /// Uniformly average the output deltas of the retrieved adapters.
    Mixture,
    /// Average the adapter parameters into one adapter, then apply it.
    Fusion,
    /// Router-weighted composition via cross-attention scores.
    Damole,
}

impl FromStr for CompositionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "selection" => Ok(Self::Selection),
            "mixture" => Ok(Self::Mixture),
            "fusion" => Ok(Self::Fusion),
            "damole" => Ok(Self::Damole),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

impl fmt::Display for CompositionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Selection => "selection",
            Self::Mixture => "mixture",
            Self::Fusion => "fusion",
            Self::Damole => "damole",
        };
        f.write_str(s)
    }
}

// ── Tape-level building blocks ──────────────────────────────────────────

/// An adapter's parameters loaded onto a tape, optionally as trainable leaves.
pub(crate) struct AdapterVars {
    pub rank: usize,
    pub alpha: f64,
    pub layers: BTreeMap<LayerId, (Var, Var)>,
}

impl AdapterVars {
    pub fn load(tape: &mut Tape, adapter: &LoraAdapter, trainable: bool) -> Self {
        let mut layers = BTreeMap::new();
        for (&layer, d) in adapter.layers() {
            let mut a = d.a.clone();
            let mut b = d.b.clone();
            if trainable {
                a = a.trainable();
                b = b.trainable();
            }
            layers.insert(layer, (tape.leaf(a), tape.leaf(b)));
        }
        AdapterVars {
            rank: adapter.rank(),
            alpha: adapter.alpha(),
            layers,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `(alpha / rank) * B A x` for one layer, on the tape.
pub(crate) fn lora_delta_on_tape(
    tape: &mut Tape,
    vars: &AdapterVars,
    layer: LayerId,
    x: Var,
) -> Result<Var> {
    let &(a, b) = vars
        .layers
        .get(&layer)
        .ok_or_else(|| Error::Lookup(format!("adapter does not target layer {layer}")))?;
    let a_t = tape.swap_last2(a)?;
    let xa = tape.matmul(x, a_t)?;
    let b_t = tape.swap_last2(b)?;
    let xab = tape.matmul(xa, b_t)?;
    tape.scale(xab, vars.scaling())
}

/// Supplies the per-layer composition delta during a forward pass.
pub(crate) trait DeltaPlug {
    fn delta(&mut self, tape: &mut Tape, layer: LayerId, x: Var) -> Result<Option<Var>>;
}

/// No adapters: the frozen base model alone.
pub(crate) struct NoDelta;

impl DeltaPlug for NoDelta {
    fn delta(&mut self, _: &mut Tape, _: LayerId, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Single adapter (selection, or a pre-fused adapter).
pub(crate) struct SinglePlug {
    pub vars: AdapterVars,
}

impl DeltaPlug for SinglePlug {
    fn delta(&mut self, tape: &mut Tape, layer: LayerId, x: Var) -> Result<Option<Var>> {
        lora_delta_on_tape(tape, &self.vars, layer, x).map(Some)
    }
}

/// Uniform output averaging over the loaded adapters.
pub(crate) struct MixturePlug {
    pub adapters: Vec<AdapterVars>,
}

impl DeltaPlug for MixturePlug {
    fn delta(&mut self, tape: &mut Tape, layer: LayerId, x: Var) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for vars in &self.adapters {
            let d = lora_delta_on_tape(tape, vars, layer, x)?;
            acc = Some(match acc {
                None => d,
                Some(prev) => tape.add(prev, d)?,
            });
        }
        match acc {
            None => Ok(None),
            Some(total) => Ok(Some(tape.scale(total, 1.0 / self.adapters.len() as f64)?)),
        }
    }
}

/// Runs the frozen layers with the plug's delta added per layer; tanh
/// between layers, none after the last.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    model: &BaseModel,
    x: Var,
    plug: &mut dyn DeltaPlug,
) -> Result<Var> {
    let mut h = x;
    let last = model.layer_count() - 1;
    for layer in 0..model.layer_count() {
        let l = model.layer(layer).unwrap();
        let w_t = tape.leaf(l.weight().transposed()?);
        let bias = tape.leaf(l.bias().clone());
        let mut out = tape.matmul(h, w_t)?;
        out = tape.add(out, bias)?;
        if let Some(d) = plug.delta(tape, layer, h)? {
            out = tape.add(out, d)?;
        }
        h = if layer < last { tape.tanh(out)? } else { out };
    }
    Ok(h)
}

// ── Public operations ───────────────────────────────────────────────────

/// `(alpha / rank) * B A x` for one layer of one adapter.
pub fn lora_delta(adapter: &LoraAdapter, layer: LayerId, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = AdapterVars::load(&mut tape, adapter, false);
    let out = lora_delta_on_tape(&mut tape, &vars, layer, xv)?;
    Ok(tape.value(out).clone())
}

/// Uniform average of the adapters' deltas at one layer.
pub fn compose_mixture(adapters: &[&LoraAdapter], layer: LayerId, x: &Tensor) -> Result<Tensor> {
    if adapters.is_empty() {
        return Err(Error::Contract("mixture of zero adapters".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let mut plug = MixturePlug {
        adapters: adapters
            .iter()
            .map(|a| AdapterVars::load(&mut tape, a, false))
            .collect(),
    };
    let out = plug
        .delta(&mut tape, layer, xv)?
        .expect("nonempty adapter list");
    Ok(tape.value(out).clone())
}

/// Arithmetic mean of the adapters' parameters; behaves as a single LoRA.
pub fn compose_fusion(adapters: &[&LoraAdapter]) -> Result<LoraAdapter> {
    let first = *adapters
        .first()
        .ok_or_else(|| Error::Contract("fusion of zero adapters".into()))?;
    for other in &adapters[1..] {
        if other.rank() != first.rank() {
            return Err(Error::Fusion(format!(
                "rank mismatch: {} has rank {}, {} has rank {}",
                first.name(),
                first.rank(),
                other.name(),
                other.rank()
            )));
        }
        if other.alpha() != first.alpha() {
            return Err(Error::Fusion(format!(
                "alpha mismatch: {} has {}, {} has {}",
                first.name(),
                first.alpha(),
                other.name(),
                other.alpha()
            )));
        }
        let same_signature = other.layers().count() == first.layers().count()
            && first.layers().all(|(layer, d)| {
                other
                    .delta(*layer)
                    .is_some_and(|od| od.a.shape() == d.a.shape() && od.b.shape() == d.b.shape())
            });
        if !same_signature {
            return Err(Error::Fusion(format!(
                "layer signature mismatch between {} and {}",
                first.name(),
                other.name()
            )));
        }
    }
    let n = adapters.len() as f64;
    let mut deltas = BTreeMap::new();
    for (&layer, d0) in first.layers() {
        let mut a = vec![0.0; d0.a.numel()];
        let mut b = vec![0.0; d0.b.numel()];
        for adapter in adapters {
            let d = adapter.delta(layer).unwrap();
            for (acc, v) in a.iter_mut().zip(d.a.data()) {
                *acc += v / n;
            }
            for (acc, v) in b.iter_mut().zip(d.b.data()) {
                *acc += v / n;
            }
        }
        deltas.insert(
            layer,
            LoraDelta {
                a: Tensor::from_vec(d0.a.shape().to_vec(), a)?,
                b: Tensor::from_vec(d0.b.shape().to_vec(), b)?,
            },
        );
    }
    LoraAdapter::new(
        format!("fused({})", adapters.iter().map(|a| a.name()).collect::<Vec<_>>().join("+")),
        first.task_tag(),
        first.rank(),
        first.alpha(),
        deltas,
    )
}

/// Full forward pass: frozen layers plus the strategy-specific delta.
/// `adapters` are in retrieval order (best first). Returns `b x l x d_out`.
pub fn forward(
    model: &BaseModel,
    strategy: CompositionStrategy,
    adapters: &[&LoraAdapter],
    router: Option<&RouterLora>,
    x: &Tensor,
) -> Result<Tensor> {
    let (out, _) = forward_traced(model, strategy, adapters, router, x)?;
    Ok(out)
}

/// Like [`forward`], also returning per-layer routing weights when the
/// strategy is router-driven.
pub fn forward_traced(
    model: &BaseModel,
    strategy: CompositionStrategy,
    adapters: &[&LoraAdapter],
    router: Option<&RouterLora>,
    x: &Tensor,
) -> Result<(Tensor, Option<crate::router::RoutingTrace>)> {
    for a in adapters {
        a.validate_against(model)?;
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    if adapters.is_empty() {
        let out = forward_on_tape(&mut tape, model, xv, &mut NoDelta)?;
        return Ok((tape.value(out).clone(), None));
    }
    match strategy {
        CompositionStrategy::Selection => {
            let vars = AdapterVars::load(&mut tape, adapters[0], false);
            let out = forward_on_tape(&mut tape, model, xv, &mut SinglePlug { vars })?;
            Ok((tape.value(out).clone(), None))
        }
        CompositionStrategy::Mixture => {
            let loaded = adapters
                .iter()
                .map(|a| AdapterVars::load(&mut tape, a, false))
                .collect();
            let out = forward_on_tape(&mut tape, model, xv, &mut MixturePlug { adapters: loaded })?;
            Ok((tape.value(out).clone(), None))
        }
        CompositionStrategy::Fusion => {
            let fused = compose_fusion(adapters)?;
            let vars = AdapterVars::load(&mut tape, &fused, false);
            let out = forward_on_tape(&mut tape, model, xv, &mut SinglePlug { vars })?;
            Ok((tape.value(out).clone(), None))
        }
        CompositionStrategy::Damole => {
            let router = router.ok_or_else(|| {
                Error::Config("damole strategy needs a router".into())
            })?;
            let mut plug = DamolePlug::load(&mut tape, router, adapters, false)?;
            let out = forward_on_tape(&mut tape, model, xv, &mut plug)?;
            let trace = plug.into_trace(&tape);
            Ok((tape.value(out).clone(), Some(trace)))
        }
    }
}

// ── Task-LoRA training ──────────────────────────────────────────────────

/// One training example: an encoded `l x d_in` input and its target vector
/// (length = head classes).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: Tensor,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Extra loss weight on the head (label) components when training
    /// against full-width targets.
    pub head_weight: f64,
    /// Per-layer learning-rate multipliers (index = layer id). Layers past
    /// the end of the list use 1.0. Ramping toward the last layer
    /// concentrates the learned correction where per-layer routing reads it.
    pub layer_lr: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 800,
            lr: 0.1,
            batch: 8,
            head_weight: 3.0,
            layer_lr: Vec::new(),
        }
    }
}

pub(crate) fn stack_samples(samples: &[&TrainSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty sample batch".into()))?;
    let (l, d) = (first.input.shape()[0], first.input.shape()[1]);
    let c = first.target.len();
    let mut xs = Vec::with_capacity(samples.len() * l * d);
    let mut ys = Vec::with_capacity(samples.len() * c);
    for s in samples {
        xs.extend_from_slice(s.input.data());
        ys.extend_from_slice(&s.target);
    }
    Ok((
        Tensor::from_vec(vec![samples.len(), l, d], xs)?,
        Tensor::from_vec(vec![samples.len(), c], ys)?,
    ))
}

/// MSE between the mean-pooled model output and the targets. Targets
/// narrower than the output width compare against its leading components.
pub(crate) fn head_loss_on_tape(
    tape: &mut Tape,
    model: &BaseModel,
    out: Var,
    targets: Var,
) -> Result<Var> {
    weighted_head_loss_on_tape(tape, model, out, targets, 1.0)
}

/// Like [`head_loss_on_tape`] with the head (label) components of
/// full-width targets up-weighted by `head_weight`.
pub(crate) fn weighted_head_loss_on_tape(
    tape: &mut Tape,
    model: &BaseModel,
    out: Var,
    targets: Var,
    head_weight: f64,
) -> Result<Var> {
    let width = tape.value(targets).shape()[1];
    if width > model.output_dim() {
        return Err(Error::Dimension(format!(
            "targets of width {width} vs output dim {}",
            model.output_dim()
        )));
    }
    let l = tape.value(out).shape()[1];
    let pooled = tape.sum_axis(out, 1)?;
    let mut pooled = tape.scale(pooled, 1.0 / l as f64)?;
    if width < model.output_dim() {
        let idx: Vec<usize> = (0..width).collect();
        pooled = tape.gather(pooled, 1, &idx)?;
    }
    let mut diff = tape.sub(pooled, targets)?;
    if head_weight != 1.0 {
        if let Some(classes) = model.classes() {
            if width > classes {
                let mut weights = vec![1.0; width];
                for w in weights.iter_mut().take(classes) {
                    *w = head_weight.sqrt();
                }
                let wv = tape.leaf(Tensor::from_vec(vec![width], weights)?);
                diff = tape.mul(diff, wv)?;
            }
        }
    }
    let sq = tape.mul(diff, diff)?;
    tape.mean_all(sq)
}

/// Trains a fresh adapter on the task data with plain fixed-step gradient
/// descent. The base model stays frozen; only A and B move. Errors if the
/// final training loss has not at least halved (a task the base model
/// already solves, loss below 1e-9, also passes).
pub fn train_task_lora<R: Rng>(
    model: &BaseModel,
    name: &str,
    task_tag: &str,
    data: &[TrainSample],
    rank: usize,
    alpha: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LoraAdapter> {
    if data.is_empty() {
        return Err(Error::Contract("task training data is empty".into()));
    }
    let mut adapter = LoraAdapter::init_for_model(name, task_tag, model, rank, alpha, rng)?;
    let initial = task_loss(model, &adapter, data)?;

    for _ in 0..cfg.steps {
        let batch: Vec<&TrainSample> = if cfg.batch >= data.len() {
            data.iter().collect()
        } else {
            (0..cfg.batch)
                .map(|_| &data[rng.random_range(0..data.len())])
                .collect()
        };
        let (x, y) = stack_samples(&batch)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let yv = tape.leaf(y);
        let vars = AdapterVars::load(&mut tape, &adapter, true);
        let var_map: Vec<(LayerId, Var, Var)> =
            vars.layers.iter().map(|(&l, &(a, b))| (l, a, b)).collect();
        let out = forward_on_tape(&mut tape, model, xv, &mut SinglePlug { vars })?;
        let loss = weighted_head_loss_on_tape(&mut tape, model, out, yv, cfg.head_weight)
            .map_err(|e| Error::Training(format!("loss diverged: {e}")))?;
        let grads = tape
            .backward(loss)
            .map_err(|e| Error::Training(format!("backward failed: {e}")))?;

        let mut deltas = BTreeMap::new();
        for (layer, av, bv) in var_map {
            let lr = cfg.lr * cfg.layer_lr.get(layer).copied().unwrap_or(1.0);
            let d = adapter.delta(layer).unwrap();
            let mut a = d.a.clone();
            let mut b = d.b.clone();
            if let Some(g) = grads.get(&av) {
                for (p, g) in a.data_mut().iter_mut().zip(g) {
                    *p -= lr * g;
                }
            }
            if let Some(g) = grads.get(&bv) {
                for (p, g) in b.data_mut().iter_mut().zip(g) {
                    *p -= lr * g;
                }
            }
            deltas.insert(layer, LoraDelta { a, b });
        }
        adapter = adapter.with_deltas(deltas)?;
    }

    let final_loss = task_loss(model, &adapter, data)?;
    if !(final_loss <= 0.5 * initial || final_loss < 1e-9) {
        return Err(Error::Training(format!(
            "loss only moved {initial:.6} -> {final_loss:.6} on task {task_tag}"
        )));
    }
    Ok(adapter)
}

/// Full-dataset head loss of the model with one adapter applied.
pub fn task_loss(model: &BaseModel, adapter: &LoraAdapter, data: &[TrainSample]) -> Result<f64> {
    let refs: Vec<&TrainSample> = data.iter().collect();
    let (x, y) = stack_samples(&refs)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let yv = tape.leaf(y);
    let vars = AdapterVars::load(&mut tape, adapter, false);
    let out = forward_on_tape(&mut tape, model, xv, &mut SinglePlug { vars })?;
    let loss = head_loss_on_tape(&mut tape, model, out, yv)?;
    tape.value(loss).item()
}

/// Convenience for callers holding `Arc`s.
pub fn as_refs(adapters: &[Arc<LoraAdapter>]) -> Vec<&LoraAdapter> {
    adapters.iter().map(|a| a.as_ref()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encode::encode_batch;

    fn toy_x(b: usize, l: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::randn(&[b, l, d], 1.0, &mut rng)
    }

    fn random_adapter(model: &BaseModel, name: &str, seed: u64) -> LoraAdapter {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut adapter = LoraAdapter::init_for_model(name, "t", model, 6, 12.0, &mut rng).unwrap();
        // Give B random content so the delta is nonzero.
        let mut deltas = BTreeMap::new();
        for (&layer, d) in adapter.layers() {
            deltas.insert(
                layer,
                LoraDelta {
                    a: d.a.clone(),
                    b: Tensor::randn(d.b.shape(), 0.3, &mut rng),
                },
            );
        }
        adapter = adapter.with_deltas(deltas).unwrap();
        adapter
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let model = BaseModel::toy(1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let adapter = LoraAdapter::init_for_model("z", "t", &model, 6, 12.0, &mut rng).unwrap();
        let x = toy_x(2, 3, 32, 3);
        let d = lora_delta(&adapter, 0, &x).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_hand_case() {
        // r=1, A=[[1,0]], B=[[1],[0]], alpha=1: delta(x) = (x0, 0).
        let mut deltas = BTreeMap::new();
        deltas.insert(
            0,
            LoraDelta {
                a: Tensor::from_vec(vec![1, 2], vec![1., 0.]).unwrap(),
                b: Tensor::from_vec(vec![2, 1], vec![1., 0.]).unwrap(),
            },
        );
        let adapter = LoraAdapter::new("h", "t", 1, 1.0, deltas).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 2], vec![3., 5.]).unwrap();
        let d = lora_delta(&adapter, 0, &x).unwrap();
        assert_eq!(d.data(), &[3., 0.]);
    }

    #[test]
    fn default_scaling_is_two() {
        let model = BaseModel::toy(4);
        let adapter = random_adapter(&model, "s", 5);
        assert_eq!(adapter.scaling(), 2.0);
        // Linearity in alpha: doubling alpha doubles the delta (layer 1
        // takes the 64-dim hidden state).
        let x = toy_x(1, 2, 64, 6);
        let d1 = lora_delta(&adapter, 1, &x).unwrap();
        let mut doubled = BTreeMap::new();
        for (&l, d) in adapter.layers() {
            doubled.insert(l, d.clone());
        }
        let adapter2 = LoraAdapter::new("s2", "t", 6, 24.0, doubled).unwrap();
        let d2 = lora_delta(&adapter2, 1, &x).unwrap();
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn untargeted_layer_is_lookup_error() {
        let mut deltas = BTreeMap::new();
        deltas.insert(
            0,
            LoraDelta {
                a: Tensor::zeros(&[1, 2]),
                b: Tensor::zeros(&[2, 1]),
            },
        );
        let adapter = LoraAdapter::new("h", "t", 1, 1.0, deltas).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 2], vec![0., 0.]).unwrap();
        assert!(matches!(lora_delta(&adapter, 3, &x), Err(Error::Lookup(_))));
    }

    #[test]
    fn mixture_single_equals_delta() {
        let model = BaseModel::toy(7);
        let adapter = random_adapter(&model, "m", 8);
        let x = toy_x(2, 3, 32, 9);
        let solo = lora_delta(&adapter, 0, &x).unwrap();
        let mixed = compose_mixture(&[&adapter], 0, &x).unwrap();
        assert_eq!(solo, mixed);
    }

    #[test]
    fn mixture_cancellation() {
        let model = BaseModel::toy(10);
        let a1 = random_adapter(&model, "p", 11);
        let mut deltas = BTreeMap::new();
        for (&l, d) in a1.layers() {
            let negb: Vec<f64> = d.b.data().iter().map(|v| -v).collect();
            deltas.insert(
                l,
                LoraDelta {
                    a: d.a.clone(),
                    b: Tensor::from_vec(d.b.shape().to_vec(), negb).unwrap(),
                },
            );
        }
        let a2 = LoraAdapter::new("n", "t", a1.rank(), a1.alpha(), deltas).unwrap();
        let x = toy_x(1, 2, 32, 12);
        let mixed = compose_mixture(&[&a1, &a2], 0, &x).unwrap();
        assert!(mixed.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn mixture_matches_loop_average_and_is_permutation_invariant() {
        let model = BaseModel::toy(13);
        let adapters: Vec<LoraAdapter> = (0..3)
            .map(|i| random_adapter(&model, &format!("a{i}"), 20 + i))
            .collect();
        let refs: Vec<&LoraAdapter> = adapters.iter().collect();
        let x = toy_x(2, 2, 64, 14);
        let mixed = compose_mixture(&refs, 1, &x).unwrap();

        // Loop-and-average oracle.
        let mut want = vec![0.0; mixed.numel()];
        for a in &refs {
            let d = lora_delta(a, 1, &x).unwrap();
            for (acc, v) in want.iter_mut().zip(d.data()) {
                *acc += v / 3.0;
            }
        }
        for (got, want) in mixed.data().iter().zip(&want) {
            assert!((got - want).abs() <= 1e-12);
        }

        let perm: Vec<&LoraAdapter> = vec![&adapters[2], &adapters[0], &adapters[1]];
        let mixed_perm = compose_mixture(&perm, 1, &x).unwrap();
        assert!(mixed.max_abs_diff(&mixed_perm) <= 1e-12);
    }

    #[test]
    fn mixture_empty_is_contract_error() {
        let x = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(compose_mixture(&[], 0, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn fusion_of_duplicates_is_identity() {
        let model = BaseModel::toy(15);
        let a = random_adapter(&model, "f", 16);
        let fused = compose_fusion(&[&a, &a]).unwrap();
        for (&l, d) in a.layers() {
            let fd = fused.delta(l).unwrap();
            assert!(d.a.max_abs_diff(&fd.a) < 1e-15);
            assert!(d.b.max_abs_diff(&fd.b) < 1e-15);
        }
    }

    #[test]
    fn fusion_of_opposites_is_zero() {
        let model = BaseModel::toy(17);
        let a1 = random_adapter(&model, "pm", 18);
        let mut deltas = BTreeMap::new();
        for (&l, d) in a1.layers() {
            let nega: Vec<f64> = d.a.data().iter().map(|v| -v).collect();
            deltas.insert(
                l,
                LoraDelta {
                    a: Tensor::from_vec(d.a.shape().to_vec(), nega).unwrap(),
                    b: d.b.clone(),
                },
            );
        }
        let a2 = LoraAdapter::new("mm", "t", a1.rank(), a1.alpha(), deltas).unwrap();
        let fused = compose_fusion(&[&a1, &a2]).unwrap();
        for (_, d) in fused.layers() {
            assert!(d.a.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn fusion_delta_differs_from_mixture_delta() {
        // mean(B_i) mean(A_i) != mean(B_i A_i) in general.
        let model = BaseModel::toy(19);
        let a1 = random_adapter(&model, "w1", 30);
        let a2 = random_adapter(&model, "w2", 31);
        let x = toy_x(1, 2, 32, 32);
        let fused = compose_fusion(&[&a1, &a2]).unwrap();
        let f = lora_delta(&fused, 0, &x).unwrap();
        let m = compose_mixture(&[&a1, &a2], 0, &x).unwrap();
        assert!(f.max_abs_diff(&m) > 1e-6, "expected a fusion/mixture gap");
    }

    #[test]
    fn fusion_rank_mismatch_names_offenders() {
        let model = BaseModel::toy(33);
        let a1 = random_adapter(&model, "r6", 34);
        let mut rng = ChaCha12Rng::seed_from_u64(35);
        let a2 = LoraAdapter::init_for_model("r3", "t", &model, 3, 12.0, &mut rng).unwrap();
        let err = compose_fusion(&[&a1, &a2]).unwrap_err().to_string();
        assert!(err.contains("r6") && err.contains("r3"), "{err}");
    }

    #[test]
    fn fusion_commutes_with_scaling() {
        let model = BaseModel::toy(36);
        let a1 = random_adapter(&model, "c1", 37);
        let a2 = random_adapter(&model, "c2", 38);
        let c = 3.5;
        let scale = |a: &LoraAdapter| {
            let mut deltas = BTreeMap::new();
            for (&l, d) in a.layers() {
                let sa: Vec<f64> = d.a.data().iter().map(|v| c * v).collect();
                let sb: Vec<f64> = d.b.data().iter().map(|v| c * v).collect();
                deltas.insert(
                    l,
                    LoraDelta {
                        a: Tensor::from_vec(d.a.shape().to_vec(), sa).unwrap(),
                        b: Tensor::from_vec(d.b.shape().to_vec(), sb).unwrap(),
                    },
                );
            }
            a.with_deltas(deltas).unwrap()
        };
        let fused_scaled = compose_fusion(&[&scale(&a1), &scale(&a2)]).unwrap();
        let fused = compose_fusion(&[&a1, &a2]).unwrap();
        for (&l, d) in fused.layers() {
            let fs = fused_scaled.delta(l).unwrap();
            for (x, y) in d.a.data().iter().zip(fs.a.data()) {
                assert!((c * x - y).abs() < 1e-12);
            }
            for (x, y) in d.b.data().iter().zip(fs.b.data()) {
                assert!((c * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_empty_set_is_base_model() {
        let model = BaseModel::toy(40);
        let x = toy_x(2, 3, 32, 41);
        let with_none = forward(&model, CompositionStrategy::Mixture, &[], None, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let base = forward_on_tape(&mut tape, &model, xv, &mut NoDelta).unwrap();
        assert_eq!(with_none, tape.value(base).clone());
    }

    #[test]
    fn forward_zero_b_adapter_equals_base_exactly() {
        let model = BaseModel::toy(42);
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let adapter = LoraAdapter::init_for_model("z", "t", &model, 6, 12.0, &mut rng).unwrap();
        let x = toy_x(2, 3, 32, 44);
        let with = forward(&model, CompositionStrategy::Mixture, &[&adapter], None, &x).unwrap();
        let base = forward(&model, CompositionStrategy::Mixture, &[], None, &x).unwrap();
        assert_eq!(with, base);
    }

    #[test]
    fn selection_equals_mixture_on_singleton() {
        let model = BaseModel::toy(45);
        let adapter = random_adapter(&model, "solo", 46);
        let x = toy_x(2, 2, 32, 47);
        let sel = forward(&model, CompositionStrategy::Selection, &[&adapter], None, &x).unwrap();
        let mix = forward(&model, CompositionStrategy::Mixture, &[&adapter], None, &x).unwrap();
        assert!(sel.max_abs_diff(&mix) <= 1e-15);
    }

    #[test]
    fn mixture_matches_dense_materialization() {
        // Compare against a model whose own weights absorb the averaged
        // dense delta mean_i (alpha_i / r_i) B_i A_i.
        let model = BaseModel::toy(48);
        let a1 = random_adapter(&model, "d1", 49);
        let a2 = random_adapter(&model, "d2", 50);
        let x = toy_x(2, 3, 32, 51);
        let mix = forward(&model, CompositionStrategy::Mixture, &[&a1, &a2], None, &x).unwrap();

        let mut tape = Tape::new();
        let mut h = tape.leaf(x.clone());
        let last = model.layer_count() - 1;
        for layer in 0..model.layer_count() {
            let l = model.layer(layer).unwrap();
            let (d_in, d_out) = model.dims_of(layer);
            // Densify: W = W0 + mean_i scaling_i * B_i A_i.
            let mut w = l.weight().clone();
            for a in [&a1, &a2] {
                let d = a.delta(layer).unwrap();
                let s = a.scaling() / 2.0;
                for r in 0..d_out {
                    for c in 0..d_in {
                        let mut acc = 0.0;
                        for k in 0..a.rank() {
                            acc += d.b.data()[r * a.rank() + k] * d.a.data()[k * d_in + c];
                        }
                        w.data_mut()[r * d_in + c] += s * acc;
                    }
                }
            }
            let wt = tape.leaf(w.transposed().unwrap());
            let bias = tape.leaf(l.bias().clone());
            let mut out = tape.matmul(h, wt).unwrap();
            out = tape.add(out, bias).unwrap();
            h = if layer < last { tape.tanh(out).unwrap() } else { out };
        }
        assert!(mix.max_abs_diff(tape.value(h)) <= 1e-10);
    }

    #[test]
    fn damole_without_router_is_config_error() {
        let model = BaseModel::toy(52);
        let adapter = random_adapter(&model, "nr", 53);
        let x = toy_x(1, 2, 32, 54);
        let err = forward(&model, CompositionStrategy::Damole, &[&adapter], None, &x);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    fn linear_task_data(model: &BaseModel, seed: u64, n: usize) -> Vec<TrainSample> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let classes = model.classes().unwrap();
        let g = Tensor::randn(&[classes, model.input_dim()], 0.5, &mut rng);
        let texts: Vec<String> = (0..n).map(|i| format!("tok{seed} w{} v{}", i % 7, i % 5)).collect();
        let x = encode_batch(&texts, 4, model.input_dim());
        (0..n)
            .map(|i| {
                let xi = Tensor::from_vec(
                    vec![4, model.input_dim()],
                    x.data()[i * 4 * model.input_dim()..(i + 1) * 4 * model.input_dim()].to_vec(),
                )
                .unwrap();
                // Target: G applied to the mean token encoding.
                let mut target = vec![0.0; classes];
                for c in 0..classes {
                    let mut acc = 0.0;
                    for t in 0..4 {
                        for dd in 0..model.input_dim() {
                            acc += g.data()[c * model.input_dim() + dd]
                                * xi.data()[t * model.input_dim() + dd];
                        }
                    }
                    target[c] = acc / 4.0;
                }
                TrainSample { input: xi, target }
            })
            .collect()
    }

    #[test]
    fn train_task_lora_converges_on_linear_task() {
        let model = BaseModel::toy(60);
        let data = linear_task_data(&model, 61, 24);
        let mut rng = ChaCha12Rng::seed_from_u64(62);
        let cfg = TrainConfig { steps: 200, lr: 0.05, batch: 8, ..Default::default() };
        let adapter =
            train_task_lora(&model, "lin", "lin", &data, 6, 12.0, &cfg, &mut rng).unwrap();
        let final_loss = task_loss(&model, &adapter, &data).unwrap();
        let mut rng2 = ChaCha12Rng::seed_from_u64(62);
        let fresh = LoraAdapter::init_for_model("f", "lin", &model, 6, 12.0, &mut rng2).unwrap();
        let initial_loss = task_loss(&model, &fresh, &data).unwrap();
        assert!(
            final_loss < 0.1 * initial_loss,
            "loss {initial_loss:.5} -> {final_loss:.5}"
        );
    }

    #[test]
    fn train_task_lora_seed_sensitivity() {
        let model = BaseModel::toy(63);
        let data = linear_task_data(&model, 64, 24);
        let cfg = TrainConfig { steps: 200, lr: 0.05, batch: 8, ..Default::default() };
        let mut r1 = ChaCha12Rng::seed_from_u64(1);
        let mut r2 = ChaCha12Rng::seed_from_u64(2);
        let a1 = train_task_lora(&model, "s1", "t", &data, 6, 12.0, &cfg, &mut r1).unwrap();
        let a2 = train_task_lora(&model, "s2", "t", &data, 6, 12.0, &cfg, &mut r2).unwrap();
        let d1 = a1.delta(0).unwrap();
        let d2 = a2.delta(0).unwrap();
        assert!(d1.a.max_abs_diff(&d2.a) > 1e-9, "seeds should differ");
    }

    #[test]
    fn train_task_lora_solved_task_keeps_delta_small() {
        // Targets are the base model's own head outputs: nothing to learn.
        let model = BaseModel::toy(65);
        let raw = linear_task_data(&model, 66, 16);
        let solved: Vec<TrainSample> = raw
            .into_iter()
            .map(|s| {
                let x3 = Tensor::from_vec(
                    vec![1, s.input.shape()[0], s.input.shape()[1]],
                    s.input.data().to_vec(),
                )
                .unwrap();
                let out = forward(&model, CompositionStrategy::Mixture, &[], None, &x3).unwrap();
                let target = model.pooled_logits(&out).unwrap().data().to_vec();
                TrainSample { input: s.input, target }
            })
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(67);
        let cfg = TrainConfig { steps: 50, lr: 0.05, batch: 8, ..Default::default() };
        let adapter =
            train_task_lora(&model, "noop", "solved", &solved, 6, 12.0, &cfg, &mut rng).unwrap();
        let b_norm: f64 = adapter
            .layers()
            .map(|(_, d)| d.b.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(b_norm < 1e-4, "B norm grew to {b_norm}");
    }

    #[test]
    fn strategy_parsing_roundtrip() {
        for s in ["selection", "mixture", "fusion", "damole"] {
            assert_eq!(CompositionStrategy::from_str(s).unwrap().to_string(), s);
        }
        assert!(CompositionStrategy::from_str("other").is_err());
    }
}
