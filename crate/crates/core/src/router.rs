//! On-the-fly mixture of LoRA experts.
//!
//! A router LoRA (A_r, B_r) scores every plugged-in adapter per token via a
//! cross-attention form: q = A_r x, k_i = B_r^T v_i, s_i = <q, k_i>/sqrt(r),
//! weights = softmax over adapters, delta = sum_i w_i v_i. With a zero
//! router every score is zero and the layer degenerates to the uniform
//! mixture. Module-level dropout during router training forces the router
//! to generalize to adapters it never saw.
//!
//! The dense softmax gate, the Gumbel-softmax gate and the parameter-level
//! merge gate live here too; they are the fixed-pool baselines the
//! retrieval-driven router is measured against.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::lora::{
    forward_on_tape, head_loss_on_tape, lora_delta_on_tape, stack_samples, AdapterVars, BaseModel,
    DeltaPlug, LayerId, LoraAdapter, LoraDelta, TrainSample,
};
use crate::tensor::{finite_diff_check, Tape, Tensor, Var};

/// Trainable router parameters, one (A_r, B_r) pair per target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterLora {
    rank: usize,
    layers: BTreeMap<LayerId, LoraDelta>,
}

impl RouterLora {
    pub fn new(rank: usize, layers: BTreeMap<LayerId, LoraDelta>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Contract("router rank must be positive".into()));
        }
        for (layer, d) in &layers {
            if d.a.shape().len() != 2 || d.a.shape()[0] != rank || d.b.shape()[1] != rank {
                return Err(Error::Dimension(format!(
                    "router layer {layer}: A {:?} / B {:?} do not match rank {rank}",
                    d.a.shape(),
                    d.b.shape()
                )));
            }
        }
        Ok(RouterLora { rank, layers })
    }

    /// Gaussian init on every model layer. Neither matrix starts at zero:
    /// with both zero the attention scores sit at a stationary point and
    /// no gradient ever flows.
    pub fn init_for_model<R: Rng>(model: &BaseModel, rank: usize, rng: &mut R) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for layer in 0..model.layer_count() {
            let (d_in, d_out) = model.dims_of(layer);
            layers.insert(
                layer,
                LoraDelta {
                    a: Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
                    b: Tensor::randn(&[d_out, rank], 1.0 / (d_out as f64).sqrt(), rng),
                },
            );
        }
        RouterLora::new(rank, layers)
    }

    /// Router seeded from the mean of the pool's adapter parameters. The
    /// averaged A reads inputs into the pool's common code space and the
    /// averaged B spans its common output directions, which starts the
    /// attention scores aligned with "how much does this value look like a
    /// correction the pool would make here". Training refines from there.
    pub fn mean_of_pool<R: Rng>(
        model: &BaseModel,
        adapters: &[&LoraAdapter],
        noise: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let first = adapters
            .first()
            .ok_or_else(|| Error::Contract("mean-of-pool init wants adapters".into()))?;
        let rank = first.rank();
        let mut layers = BTreeMap::new();
        for layer in 0..model.layer_count() {
            let (d_in, d_out) = model.dims_of(layer);
            let mut a = vec![0.0; rank * d_in];
            let mut b = vec![0.0; d_out * rank];
            for adapter in adapters {
                let d = adapter.delta(layer).ok_or_else(|| {
                    Error::Lookup(format!(
                        "adapter {} does not target layer {layer}",
                        adapter.name()
                    ))
                })?;
                if d.a.shape() != [rank, d_in] || d.b.shape() != [d_out, rank] {
                    return Err(Error::Dimension(format!(
                        "adapter {} has incompatible shapes for mean init",
                        adapter.name()
                    )));
                }
                for (acc, v) in a.iter_mut().zip(d.a.data()) {
                    *acc += v / adapters.len() as f64;
                }
                for (acc, v) in b.iter_mut().zip(d.b.data()) {
                    *acc += v / adapters.len() as f64;
                }
            }
            if noise > 0.0 {
                let na = Tensor::randn(&[rank, d_in], noise / (d_in as f64).sqrt(), rng);
                let nb = Tensor::randn(&[d_out, rank], noise / (d_out as f64).sqrt(), rng);
                for (acc, v) in a.iter_mut().zip(na.data()) {
                    *acc += v;
                }
                for (acc, v) in b.iter_mut().zip(nb.data()) {
                    *acc += v;
                }
            }
            layers.insert(
                layer,
                LoraDelta {
                    a: Tensor::from_vec(vec![rank, d_in], a)?,
                    b: Tensor::from_vec(vec![d_out, rank], b)?,
                },
            );
        }
        RouterLora::new(rank, layers)
    }

    /// All-zero router: scores vanish and routing is exactly uniform.
    pub fn zeros_for_model(model: &BaseModel, rank: usize) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for layer in 0..model.layer_count() {
            let (d_in, d_out) = model.dims_of(layer);
            layers.insert(
                layer,
                LoraDelta {
                    a: Tensor::zeros(&[rank, d_in]),
                    b: Tensor::zeros(&[d_out, rank]),
                },
            );
        }
        RouterLora::new(rank, layers)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn delta(&self, layer: LayerId) -> Option<&LoraDelta> {
        self.layers.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerId, &LoraDelta)> {
        self.layers.iter()
    }
}

/// Per-layer, per-token attention weights recorded during a routed forward.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    /// Adapter names in weight-column order.
    pub adapter_names: Vec<String>,
    /// `(layer, weights b x l x n)` per routed layer.
    pub layers: Vec<(LayerId, Tensor)>,
}

impl RoutingTrace {
    /// Weights must be nonnegative and sum to one per (layer, sample, token);
    /// fully masked lanes sum to zero instead.
    pub fn validate(&self) -> Result<()> {
        for (layer, w) in &self.layers {
            let n = *w.shape().last().unwrap();
            for lane in w.data().chunks(n) {
                let sum: f64 = lane.iter().sum();
                if lane.iter().any(|&v| v < 0.0) || ((sum - 1.0).abs() > 1e-10 && sum.abs() > 1e-10)
                {
                    return Err(Error::Contract(format!(
                        "layer {layer}: routing weights sum to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Mean weight per adapter at one layer, averaged over samples and tokens.
    pub fn mean_weights(&self, layer: LayerId) -> Option<Vec<f64>> {
        let (_, w) = self.layers.iter().find(|(l, _)| *l == layer)?;
        let n = *w.shape().last().unwrap();
        let lanes = w.numel() / n;
        let mut mean = vec![0.0; n];
        for lane in w.data().chunks(n) {
            for (m, v) in mean.iter_mut().zip(lane) {
                *m += v / lanes as f64;
            }
        }
        Some(mean)
    }

    /// Per-sample argmax of token-averaged weights at the final routed layer.
    pub fn final_layer_sample_argmax(&self) -> Vec<usize> {
        let Some((_, w)) = self.layers.last() else {
            return Vec::new();
        };
        let shape = w.shape();
        let (b, l, n) = (shape[0], shape[1], shape[2]);
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let mut mean = vec![0.0; n];
            for li in 0..l {
                for i in 0..n {
                    mean[i] += w.data()[(bi * l + li) * n + i] / l as f64;
                }
            }
            let arg = mean
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            out.push(arg);
        }
        out
    }

    /// `layer_id,sample,token,adapter,weight` rows for external plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,sample,token,adapter,weight\n");
        for (layer, w) in &self.layers {
            let shape = w.shape();
            let (b, l, n) = (shape[0], shape[1], shape[2]);
            for bi in 0..b {
                for li in 0..l {
                    for i in 0..n {
                        let v = w.data()[(bi * l + li) * n + i];
                        out.push_str(&format!(
                            "{layer},{bi},{li},{},{v}\n",
                            self.adapter_names[i]
                        ));
                    }
                }
            }
        }
        out
    }
}

// ── Routed forward ──────────────────────────────────────────────────────

/// Cross-attention routing for one layer on an existing tape.
/// Returns (delta, weights b x l x n).
pub(crate) fn route_layer_on_tape(
    tape: &mut Tape,
    router_pair: (Var, Var),
    rank: usize,
    adapters: &[AdapterVars],
    layer: LayerId,
    x: Var,
) -> Result<(Var, Var)> {
    if adapters.is_empty() {
        return Err(Error::Contract("routing over zero adapters".into()));
    }
    let (a_r, b_r) = router_pair;
    let a_r_t = tape.swap_last2(a_r)?;
    let q = tape.matmul(x, a_r_t)?;

    let mut values = Vec::with_capacity(adapters.len());
    let mut scores = Vec::with_capacity(adapters.len());
    let inv_sqrt_r = 1.0 / (rank as f64).sqrt();
    for vars in adapters {
        let v = lora_delta_on_tape(tape, vars, layer, x)?;
        let k = tape.matmul(v, b_r)?;
        let qk = tape.mul(q, k)?;
        let s = tape.sum_axis(qk, tape_last_axis(tape, qk))?;
        let s = tape.scale(s, inv_sqrt_r)?;
        values.push(v);
        scores.push(s);
    }
    let stacked = tape.stack_last(&scores)?;
    let axis = tape_last_axis(tape, stacked);
    let weights = tape.softmax(stacked, axis)?;

    let mut delta: Option<Var> = None;
    let w_axis = tape_last_axis(tape, weights);
    for (i, &v) in values.iter().enumerate() {
        let wi = tape.gather(weights, w_axis, &[i])?;
        let term = tape.mul(wi, v)?;
        delta = Some(match delta {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok((delta.unwrap(), weights))
}

fn tape_last_axis(tape: &Tape, v: Var) -> usize {
    tape.value(v).shape().len() - 1
}

/// Routed composition plug used by the full forward pass.
pub(crate) struct DamolePlug {
    router_vars: BTreeMap<LayerId, (Var, Var)>,
    rank: usize,
    adapters: Vec<AdapterVars>,
    names: Vec<String>,
    recorded: Vec<(LayerId, Var)>,
}

impl DamolePlug {
    pub fn load(
        tape: &mut Tape,
        router: &RouterLora,
        adapters: &[&LoraAdapter],
        trainable_router: bool,
    ) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Contract("routing over zero adapters".into()));
        }
        let mut router_vars = BTreeMap::new();
        for (&layer, d) in router.layers() {
            let mut a = d.a.clone();
            let mut b = d.b.clone();
            if trainable_router {
                a = a.trainable();
                b = b.trainable();
            }
            router_vars.insert(layer, (tape.leaf(a), tape.leaf(b)));
        }
        let loaded = adapters
            .iter()
            .map(|a| AdapterVars::load(tape, a, false))
            .collect();
        Ok(DamolePlug {
            router_vars,
            rank: router.rank(),
            adapters: loaded,
            names: adapters.iter().map(|a| a.name().to_string()).collect(),
            recorded: Vec::new(),
        })
    }

    pub fn router_vars(&self) -> &BTreeMap<LayerId, (Var, Var)> {
        &self.router_vars
    }

    pub fn into_trace(&self, tape: &Tape) -> RoutingTrace {
        RoutingTrace {
            adapter_names: self.names.clone(),
            layers: self
                .recorded
                .iter()
                .map(|&(l, w)| (l, tape.value(w).clone()))
                .collect(),
        }
    }
}

impl DeltaPlug for DamolePlug {
    fn delta(&mut self, tape: &mut Tape, layer: LayerId, x: Var) -> Result<Option<Var>> {
        let pair = *self
            .router_vars
            .get(&layer)
            .ok_or_else(|| Error::Lookup(format!("router does not target layer {layer}")))?;
        let (delta, weights) = route_layer_on_tape(tape, pair, self.rank, &self.adapters, layer, x)?;
        self.recorded.push((layer, weights));
        Ok(Some(delta))
    }
}

/// One-layer routed composition: returns the delta and the attention
/// weights over the adapters (`b x l x n`).
pub fn route_forward(
    layer: LayerId,
    router: &RouterLora,
    adapters: &[&LoraAdapter],
    x: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if adapters.is_empty() {
        return Err(Error::Contract("routing over zero adapters".into()));
    }
    let pair = router
        .delta(layer)
        .ok_or_else(|| Error::Lookup(format!("router does not target layer {layer}")))?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let a_r = tape.leaf(pair.a.clone());
    let b_r = tape.leaf(pair.b.clone());
    let loaded: Vec<AdapterVars> = adapters
        .iter()
        .map(|a| AdapterVars::load(&mut tape, a, false))
        .collect();
    let (delta, weights) =
        route_layer_on_tape(&mut tape, (a_r, b_r), router.rank(), &loaded, layer, xv)?;
    Ok((tape.value(delta).clone(), tape.value(weights).clone()))
}

// ── LoRA dropout ────────────────────────────────────────────────────────

/// Drops each adapter independently with probability `p`, resampling until
/// at least one survives. Survivors keep their original order.
pub fn lora_dropout<'a, R: Rng>(
    adapters: &[&'a LoraAdapter],
    p: f64,
    rng: &mut R,
) -> Result<Vec<&'a LoraAdapter>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
    }
    if adapters.is_empty() {
        return Err(Error::Contract("dropout over zero adapters".into()));
    }
    loop {
        let survivors: Vec<&LoraAdapter> = adapters
            .iter()
            .filter(|_| rng.random::<f64>() >= p)
            .copied()
            .collect();
        if !survivors.is_empty() {
            return Ok(survivors);
        }
    }
}

// ── Router training ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RouterTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Module-level dropout rate applied to the adapter pool per step.
    pub dropout_p: f64,
    /// Run the tiny-instance gradient self-check before training.
    pub grad_check: bool,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        RouterTrainConfig {
            steps: 400,
            lr: 0.1,
            batch: 8,
            dropout_p: 0.5,
            grad_check: true,
        }
    }
}

/// Gradient self-check on a deliberately tiny instance (2 layers, 2
/// adapters, 3 samples): analytic router gradients vs central differences.
pub fn router_grad_check(seed: u64) -> Result<f64> {
    let model = BaseModel::new(&[4, 5, 4], Some(2), seed)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    let adapters: Vec<LoraAdapter> = (0..2)
        .map(|i| random_dense_adapter(&model, &format!("gc{i}"), 2, 4.0, &mut rng))
        .collect();
    let refs: Vec<&LoraAdapter> = adapters.iter().collect();
    let router = RouterLora::init_for_model(&model, 2, &mut rng)?;
    let x = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
    let y = Tensor::randn(&[3, 2], 1.0, &mut rng);

    // Parameter order: per layer ascending, A_r then B_r.
    let layer_ids: Vec<LayerId> = router.layers().map(|(&l, _)| l).collect();
    let mut params = Vec::new();
    for &l in &layer_ids {
        let d = router.delta(l).unwrap();
        params.push(d.a.clone());
        params.push(d.b.clone());
    }

    let f = |p: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut layers = BTreeMap::new();
        for (i, &l) in layer_ids.iter().enumerate() {
            layers.insert(
                l,
                LoraDelta {
                    a: p[2 * i].clone(),
                    b: p[2 * i + 1].clone(),
                },
            );
        }
        let candidate = RouterLora::new(2, layers)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let mut plug = DamolePlug::load(&mut tape, &candidate, &refs, true)?;
        let vars: Vec<(Var, Var)> = layer_ids.iter().map(|l| plug.router_vars()[l]).collect();
        let out = forward_on_tape(&mut tape, &model, xv, &mut plug)?;
        let loss = head_loss_on_tape(&mut tape, &model, out, yv)?;
        let grads = tape.backward(loss)?;
        let mut flat = Vec::new();
        for &(av, bv) in &vars {
            flat.push(grads[&av].clone());
            flat.push(grads[&bv].clone());
        }
        Ok((tape.value(loss).item()?, flat))
    };
    finite_diff_check(f, &params, 1e-5)
}

fn random_dense_adapter<R: Rng>(
    model: &BaseModel,
    name: &str,
    rank: usize,
    alpha: f64,
    rng: &mut R,
) -> LoraAdapter {
    let mut deltas = BTreeMap::new();
    for layer in 0..model.layer_count() {
        let (d_in, d_out) = model.dims_of(layer);
        deltas.insert(
            layer,
            LoraDelta {
                a: Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
                b: Tensor::randn(&[d_out, rank], 0.3, rng),
            },
        );
    }
    LoraAdapter::new(name, "random", rank, alpha, deltas).expect("valid shapes")
}

/// Trains the router over the frozen adapter pool with per-step module
/// dropout. Only (A_r, B_r) move. Returns the trained router and the
/// per-step loss curve.
pub fn train_router<R: Rng>(
    model: &BaseModel,
    router: RouterLora,
    train_adapters: &[&LoraAdapter],
    data: &[TrainSample],
    cfg: &RouterTrainConfig,
    rng: &mut R,
) -> Result<(RouterLora, Vec<f64>)> {
    if router.layers().count() == 0 {
        return Err(Error::Config("router has no trainable parameters".into()));
    }
    if train_adapters.is_empty() {
        return Err(Error::Contract("router training wants at least one adapter".into()));
    }
    if data.is_empty() {
        return Err(Error::Contract("router training data is empty".into()));
    }
    if cfg.grad_check {
        let err = router_grad_check(0xC0FFEE)?;
        if err > 1e-4 {
            return Err(Error::Training(format!(
                "router gradient self-check failed: rel err {err:.3e}"
            )));
        }
    }

    let initial = routed_loss(model, &router, train_adapters, data)?;
    let mut router = router;
    let mut curve = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        let survivors = lora_dropout(train_adapters, cfg.dropout_p, rng)?;
        // Batch size >= data means deterministic full-batch steps.
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
        let mut plug = DamolePlug::load(&mut tape, &router, &survivors, true)?;
        let layer_vars: Vec<(LayerId, Var, Var)> = plug
            .router_vars()
            .iter()
            .map(|(&l, &(a, b))| (l, a, b))
            .collect();
        let out = forward_on_tape(&mut tape, model, xv, &mut plug)?;
        let loss = head_loss_on_tape(&mut tape, model, out, yv)
            .map_err(|e| Error::Training(format!("loss diverged: {e}")))?;
        curve.push(tape.value(loss).item()?);
        let grads = tape
            .backward(loss)
            .map_err(|e| Error::Training(format!("backward failed: {e}")))?;

        let mut layers = BTreeMap::new();
        for (layer, av, bv) in layer_vars {
            let d = router.delta(layer).unwrap();
            let mut a = d.a.clone();
            let mut b = d.b.clone();
            if let Some(g) = grads.get(&av) {
                for (p, g) in a.data_mut().iter_mut().zip(g) {
                    *p -= cfg.lr * g;
                }
            }
            if let Some(g) = grads.get(&bv) {
                for (p, g) in b.data_mut().iter_mut().zip(g) {
                    *p -= cfg.lr * g;
                }
            }
            layers.insert(layer, LoraDelta { a, b });
        }
        router = RouterLora::new(router.rank(), layers)?;
    }

    let final_loss = routed_loss(model, &router, train_adapters, data)?;
    if final_loss > initial + 1e-12 {
        return Err(Error::Training(format!(
            "router training regressed: {initial:.6} -> {final_loss:.6}"
        )));
    }
    Ok((router, curve))
}

/// Full-dataset head loss of the routed forward over the whole pool.
pub fn routed_loss(
    model: &BaseModel,
    router: &RouterLora,
    adapters: &[&LoraAdapter],
    data: &[TrainSample],
) -> Result<f64> {
    let refs: Vec<&TrainSample> = data.iter().collect();
    let (x, y) = stack_samples(&refs)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let yv = tape.leaf(y);
    let mut plug = DamolePlug::load(&mut tape, router, adapters, false)?;
    let out = forward_on_tape(&mut tape, model, xv, &mut plug)?;
    let loss = head_loss_on_tape(&mut tape, model, out, yv)?;
    tape.value(loss).item()
}

// ── Fixed-pool baseline gates ───────────────────────────────────────────

/// Dense softmax gate over a fixed expert count.
#[derive(Debug, Clone)]
pub struct DenseGate {
    /// `d x k`.
    weight: Tensor,
}

impl DenseGate {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "dense gate wants a d x k matrix, got {:?}",
                weight.shape()
            )));
        }
        Ok(DenseGate { weight })
    }

    pub fn init<R: Rng>(d: usize, k: usize, rng: &mut R) -> Self {
        DenseGate {
            weight: Tensor::randn(&[d, k], 1.0 / (d as f64).sqrt(), rng),
        }
    }

    pub fn expert_count(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Per-token softmax weights over the gate's fixed expert count.
/// `pool` is the adapter count being routed; a grown or shrunk pool is the
/// incompatibility this gating style cannot absorb, surfaced as an error.
pub fn dense_gate_forward(gate: &DenseGate, x: &Tensor, pool: usize) -> Result<Tensor> {
    if pool != gate.expert_count() {
        return Err(Error::Incompatible(format!(
            "gate trained for {} experts, pool has {pool}",
            gate.expert_count()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = tape.leaf(gate.weight.clone());
    let logits = tape.matmul(xv, w)?;
    let axis = tape.value(logits).shape().len() - 1;
    let weights = tape.softmax(logits, axis)?;
    Ok(tape.value(weights).clone())
}

/// One-layer combine with dense-gate weights: delta = sum_i w_i v_i.
pub fn dense_moe_delta(
    gate: &DenseGate,
    adapters: &[&LoraAdapter],
    layer: LayerId,
    x: &Tensor,
) -> Result<Tensor> {
    let weights = dense_gate_forward(gate, x, adapters.len())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let wv = tape.leaf(weights);
    let mut delta: Option<Var> = None;
    let w_axis = tape.value(wv).shape().len() - 1;
    for (i, adapter) in adapters.iter().enumerate() {
        let vars = AdapterVars::load(&mut tape, adapter, false);
        let v = lora_delta_on_tape(&mut tape, &vars, layer, xv)?;
        let wi = tape.gather(wv, w_axis, &[i])?;
        let term = tape.mul(wi, v)?;
        delta = Some(match delta {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    let delta = delta.ok_or_else(|| Error::Contract("combine over zero adapters".into()))?;
    Ok(tape.value(delta).clone())
}

/// Dense gate sharpened or flattened through Gumbel noise.
#[derive(Debug, Clone)]
pub struct GumbelGate {
    pub gate: DenseGate,
    pub temperature: f64,
}

/// softmax((log R(x)_i + g_i) / tau) with g_i ~ Gumbel(0,1), fresh per
/// token lane. Deterministic given the rng state.
pub fn gumbel_gate_forward<R: Rng>(
    gate: &GumbelGate,
    x: &Tensor,
    pool: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if !(gate.temperature > 0.0) {
        return Err(Error::Config(format!(
            "gumbel temperature {} must be positive",
            gate.temperature
        )));
    }
    let base = dense_gate_forward(&gate.gate, x, pool)?;
    let k = *base.shape().last().unwrap();
    let lanes = base.numel() / k;
    let mut data = vec![0.0; base.numel()];
    for lane in 0..lanes {
        let mut logits = Vec::with_capacity(k);
        for i in 0..k {
            let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
            let gumbel = -(-u.ln()).ln();
            logits.push((base.data()[lane * k + i].ln() + gumbel) / gate.temperature);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for i in 0..k {
            data[lane * k + i] = exps[i] / denom;
        }
    }
    Tensor::from_vec(base.shape().to_vec(), data)
}

/// Parameter-level weighted merge: theta = sum_i w_i theta_i.
pub fn weighted_parameter_merge(weights: &[f64], adapters: &[&LoraAdapter]) -> Result<LoraAdapter> {
    if weights.len() != adapters.len() {
        return Err(Error::Contract(format!(
            "{} weights for {} adapters",
            weights.len(),
            adapters.len()
        )));
    }
    let first = *adapters
        .first()
        .ok_or_else(|| Error::Contract("merge of zero adapters".into()))?;
    for other in &adapters[1..] {
        let compatible = other.rank() == first.rank()
            && first.layers().all(|(layer, d)| {
                other
                    .delta(*layer)
                    .is_some_and(|od| od.a.shape() == d.a.shape() && od.b.shape() == d.b.shape())
            });
        if !compatible {
            return Err(Error::Fusion(format!(
                "shape mismatch between {} and {}",
                first.name(),
                other.name()
            )));
        }
    }
    let mut deltas = BTreeMap::new();
    for (&layer, d0) in first.layers() {
        let mut a = vec![0.0; d0.a.numel()];
        let mut b = vec![0.0; d0.b.numel()];
        for (w, adapter) in weights.iter().zip(adapters) {
            let d = adapter.delta(layer).unwrap();
            for (acc, v) in a.iter_mut().zip(d.a.data()) {
                *acc += w * v;
            }
            for (acc, v) in b.iter_mut().zip(d.b.data()) {
                *acc += w * v;
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
    LoraAdapter::new("smear-merged", first.task_tag(), first.rank(), first.alpha(), deltas)
}

/// Gate weights from the mean-pooled token representation, then a
/// parameter-level weighted average usable as a single adapter.
pub fn smear_merge(gate: &DenseGate, adapters: &[&LoraAdapter], x: &Tensor) -> Result<LoraAdapter> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("smear input wants l x d, got {shape:?}")));
    }
    let d = *shape.last().unwrap();
    let tokens = x.numel() / d;
    let mut pooled = vec![0.0; d];
    for t in 0..tokens {
        for c in 0..d {
            pooled[c] += x.data()[t * d + c] / tokens as f64;
        }
    }
    let pooled = Tensor::from_vec(vec![1, d], pooled)?;
    let weights = dense_gate_forward(gate, &pooled, adapters.len())?;
    weighted_parameter_merge(weights.data(), adapters)
}
