//! Heterogeneous batched inference.
//!
//! A batch of prompts with per-sample retrieved adapters becomes one
//! deduplicated pool plus a `b x k` index matrix into it. Parameters are
//! gathered per sample into `b x k x ...` blocks (padded rows get all-zero
//! null parameters), and the routed forward runs once over the whole batch
//! with masked attention, matching the per-sample path to within float
//! round-off.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lora::{BaseModel, LayerId, LoraAdapter};
use crate::router::{RouterLora, RoutingTrace};
use crate::tensor::{Tape, Tensor, Var};

/// Index value parked in masked slots.
const PAD_SENTINEL: usize = 0;

/// Deduplicated adapter union plus per-sample index rows and padding mask.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pool: Vec<Arc<LoraAdapter>>,
    /// `b x k` row-major indices into `pool`; masked slots hold the sentinel.
    mapping: Vec<usize>,
    /// `b x k` row-major; `true` marks a real adapter.
    mask: Vec<bool>,
    b: usize,
    k: usize,
}

impl BatchPlan {
    pub fn batch_size(&self) -> usize {
        self.b
    }

    pub fn slots_per_sample(&self) -> usize {
        self.k
    }

    /// Unique-pool size p.
    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn pool(&self) -> &[Arc<LoraAdapter>] {
        &self.pool
    }

    pub fn index(&self, sample: usize, slot: usize) -> usize {
        self.mapping[sample * self.k + slot]
    }

    pub fn is_real(&self, sample: usize, slot: usize) -> bool {
        self.mask[sample * self.k + slot]
    }

    /// Names of the real adapters in a sample's row, slot order.
    pub fn row_names(&self, sample: usize) -> Vec<String> {
        (0..self.k)
            .filter(|&j| self.is_real(sample, j))
            .map(|j| self.pool[self.index(sample, j)].name().to_string())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool.len() > self.b * self.k {
            return Err(Error::Contract(format!(
                "pool size {} exceeds b*k = {}",
                self.pool.len(),
                self.b * self.k
            )));
        }
        let mut names: Vec<&str> = self.pool.iter().map(|a| a.name()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.pool.len() {
            return Err(Error::Contract("duplicate adapter in pool".into()));
        }
        for i in 0..self.b {
            let mut seen = Vec::new();
            for j in 0..self.k {
                let idx = self.index(i, j);
                if self.is_real(i, j) {
                    if idx >= self.pool.len() {
                        return Err(Error::Contract(format!(
                            "sample {i} slot {j}: index {idx} out of pool"
                        )));
                    }
                    if seen.contains(&idx) {
                        return Err(Error::Contract(format!(
                            "sample {i}: duplicate pool index {idx}"
                        )));
                    }
                    seen.push(idx);
                } else if idx != PAD_SENTINEL {
                    return Err(Error::Contract(format!(
                        "sample {i} slot {j}: masked slot holds {idx}, not the sentinel"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds the plan from per-sample retrieval lists (best-first order is
/// preserved). Lists shorter than `k` are padded and masked; an adapter
/// name the resolver does not know is a consistency error.
pub fn build_plan<F>(lists: &[Vec<String>], k: usize, resolve: F) -> Result<BatchPlan>
where
    F: Fn(&str) -> Option<Arc<LoraAdapter>>,
{
    if k == 0 {
        return Err(Error::Contract("plan wants k >= 1".into()));
    }
    let b = lists.len();
    let mut pool: Vec<Arc<LoraAdapter>> = Vec::new();
    let mut mapping = vec![PAD_SENTINEL; b * k];
    let mut mask = vec![false; b * k];
    for (i, list) in lists.iter().enumerate() {
        if list.len() > k {
            return Err(Error::Contract(format!(
                "sample {i} retrieved {} adapters with k = {k}",
                list.len()
            )));
        }
        for (j, name) in list.iter().enumerate() {
            let idx = match pool.iter().position(|a| a.name() == name) {
                Some(idx) => idx,
                None => {
                    let adapter = resolve(name).ok_or_else(|| {
                        Error::NotFound(format!("plan references unknown adapter '{name}'"))
                    })?;
                    pool.push(adapter);
                    pool.len() - 1
                }
            };
            mapping[i * k + j] = idx;
            mask[i * k + j] = true;
        }
    }
    let plan = BatchPlan {
        pool,
        mapping,
        mask,
        b,
        k,
    };
    plan.validate()?;
    Ok(plan)
}

/// Gathered per-sample parameters for one layer:
/// `a` is `b x k x r x d_in`, `b` is `b x k x d_out x r`, and `scale` is the
/// per-slot `alpha / rank` factor (`b x k x 1 x 1`), zero in masked slots.
pub struct GatheredParams {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: Tensor,
}

/// `A'[i,j] = A of pool[M[i,j]]`; masked slots hold null (all-zero)
/// parameters. All pool adapters must target the layer at one shared rank.
pub fn gather_params(plan: &BatchPlan, layer: LayerId) -> Result<GatheredParams> {
    let first = plan
        .pool
        .first()
        .ok_or_else(|| Error::Contract("gather over an empty pool".into()))?;
    let rank = first.rank();
    let d0 = first.delta(layer).ok_or_else(|| {
        Error::Lookup(format!("adapter {} does not target layer {layer}", first.name()))
    })?;
    let (d_in, d_out) = (d0.a.shape()[1], d0.b.shape()[0]);
    for adapter in &plan.pool[1..] {
        let d = adapter.delta(layer).ok_or_else(|| {
            Error::Lookup(format!("adapter {} does not target layer {layer}", adapter.name()))
        })?;
        if adapter.rank() != rank || d.a.shape() != [rank, d_in] || d.b.shape() != [d_out, rank] {
            return Err(Error::Dimension(format!(
                "adapter {} has incompatible shapes for batched gather",
                adapter.name()
            )));
        }
    }
    let (b, k) = (plan.b, plan.k);
    let a_block = rank * d_in;
    let b_block = d_out * rank;
    let mut a = vec![0.0; b * k * a_block];
    let mut bm = vec![0.0; b * k * b_block];
    let mut scale = vec![0.0; b * k];
    for i in 0..b {
        for j in 0..k {
            if !plan.is_real(i, j) {
                continue;
            }
            let adapter = &plan.pool[plan.index(i, j)];
            let d = adapter.delta(layer).unwrap();
            let slot = i * k + j;
            a[slot * a_block..(slot + 1) * a_block].copy_from_slice(d.a.data());
            bm[slot * b_block..(slot + 1) * b_block].copy_from_slice(d.b.data());
            scale[slot] = adapter.scaling();
        }
    }
    Ok(GatheredParams {
        a: Tensor::from_vec(vec![b, k, rank, d_in], a)?,
        b: Tensor::from_vec(vec![b, k, d_out, rank], bm)?,
        scale: Tensor::from_vec(vec![b, k, 1, 1], scale)?,
    })
}

/// Per-layer weights over the k slots.
enum WeightRule<'r> {
    /// Cross-attention scores from the router (masked softmax over slots).
    Router(&'r RouterLora),
    /// Uniform over the unmasked slots.
    Uniform,
    /// All weight on slot 0 when it is real.
    First,
}

/// Routed batched forward. Returns the output and per-layer weights as
/// `b x l x k` tensors (masked slots carry exactly zero weight).
pub fn batched_forward(
    model: &BaseModel,
    router: &RouterLora,
    plan: &BatchPlan,
    x: &Tensor,
) -> Result<(Tensor, BatchTrace)> {
    plan.validate()?;
    batched_forward_impl(model, plan, x, WeightRule::Router(router))
}

/// Uniform-mixture or top-1-selection batched forward.
pub fn batched_vanilla_forward(
    model: &BaseModel,
    plan: &BatchPlan,
    x: &Tensor,
    strategy: crate::lora::CompositionStrategy,
) -> Result<Tensor> {
    plan.validate()?;
    let rule = match strategy {
        crate::lora::CompositionStrategy::Mixture => WeightRule::Uniform,
        crate::lora::CompositionStrategy::Selection => WeightRule::First,
        other => {
            return Err(Error::Config(format!(
                "batched vanilla forward does not support {other}; fusion happens pre-batch"
            )))
        }
    };
    let (out, _) = batched_forward_impl(model, plan, x, rule)?;
    Ok(out)
}

/// Per-layer routing weights for a whole batch.
pub struct BatchTrace {
    /// `(layer, weights b x l x k)`.
    pub layers: Vec<(LayerId, Tensor)>,
}

impl BatchTrace {
    /// Single-sample view with the plan's row names; padded slots are
    /// dropped (their weight is exactly zero).
    pub fn routing_trace_for_sample(&self, plan: &BatchPlan, sample: usize) -> RoutingTrace {
        let names = plan.row_names(sample);
        let real: Vec<usize> = (0..plan.slots_per_sample())
            .filter(|&j| plan.is_real(sample, j))
            .collect();
        let layers = self
            .layers
            .iter()
            .map(|(layer, w)| {
                let shape = w.shape();
                let (l, k) = (shape[1], shape[2]);
                let mut data = Vec::with_capacity(l * real.len());
                for li in 0..l {
                    for &j in &real {
                        data.push(w.data()[(sample * l + li) * k + j]);
                    }
                }
                (
                    *layer,
                    Tensor::from_vec(vec![1, l, real.len()], data).expect("finite weights"),
                )
            })
            .collect();
        RoutingTrace {
            adapter_names: names,
            layers,
        }
    }
}

fn batched_forward_impl(
    model: &BaseModel,
    plan: &BatchPlan,
    x: &Tensor,
    rule: WeightRule<'_>,
) -> Result<(Tensor, BatchTrace)> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != plan.b {
        return Err(Error::Dimension(format!(
            "batched forward wants {} x l x d input, got {shape:?}",
            plan.b
        )));
    }
    let (b, l) = (shape[0], shape[1]);
    let k = plan.k;
    let empty_pool = plan.pool.is_empty();

    let mut tape = Tape::new();
    let mut h = tape.leaf(x.clone());
    let mut trace = Vec::new();
    let last = model.layer_count() - 1;

    for layer in 0..model.layer_count() {
        let lyr = model.layer(layer).unwrap();
        let w_t = tape.leaf(lyr.weight().transposed()?);
        let bias = tape.leaf(lyr.bias().clone());
        let mut out = tape.matmul(h, w_t)?;
        out = tape.add(out, bias)?;

        if !empty_pool {
            let gathered = gather_params(plan, layer)?;
            let d_out = gathered.b.shape()[2];
            let a_t = {
                let v = tape.leaf(gathered.a);
                tape.swap_last2(v)? // b x k x d_in x r
            };
            let b_t = {
                let v = tape.leaf(gathered.b);
                tape.swap_last2(v)? // b x k x r x d_out
            };
            let scale = tape.leaf(gathered.scale);

            let x_e = tape.reshape(h, &[b, 1, l, tape_dim(&tape, h, 2)])?;
            let xa = tape.matmul(x_e, a_t)?; // b x k x l x r
            let v_raw = tape.matmul(xa, b_t)?; // b x k x l x d_out
            let values = tape.mul(v_raw, scale)?;

            let weights_bkl = match rule {
                WeightRule::Router(router) => {
                    let pair = router.delta(layer).ok_or_else(|| {
                        Error::Lookup(format!("router does not target layer {layer}"))
                    })?;
                    let a_r = tape.leaf(pair.a.clone());
                    let b_r = tape.leaf(pair.b.clone());
                    let a_r_t = tape.swap_last2(a_r)?;
                    let q = tape.matmul(h, a_r_t)?; // b x l x r
                    let q_e = tape.reshape(q, &[b, 1, l, router.rank()])?;
                    let keys = tape.matmul(values, b_r)?; // b x k x l x r
                    let qk = tape.mul(q_e, keys)?;
                    let s = tape.sum_axis(qk, 3)?; // b x k x l
                    let s = tape.scale(s, 1.0 / (router.rank() as f64).sqrt())?;
                    // Mask before softmax: padded slots behave as -inf scores.
                    let mut mask = vec![false; b * k * l];
                    for i in 0..b {
                        for j in 0..k {
                            if plan.is_real(i, j) {
                                for li in 0..l {
                                    mask[(i * k + j) * l + li] = true;
                                }
                            }
                        }
                    }
                    tape.masked_softmax(s, 1, &mask)?
                }
                WeightRule::Uniform => {
                    let mut w = vec![0.0; b * k * l];
                    for i in 0..b {
                        let real = (0..k).filter(|&j| plan.is_real(i, j)).count();
                        if real == 0 {
                            continue;
                        }
                        for j in 0..k {
                            if plan.is_real(i, j) {
                                for li in 0..l {
                                    w[(i * k + j) * l + li] = 1.0 / real as f64;
                                }
                            }
                        }
                    }
                    tape.leaf(Tensor::from_vec(vec![b, k, l], w)?)
                }
                WeightRule::First => {
                    let mut w = vec![0.0; b * k * l];
                    for i in 0..b {
                        if plan.is_real(i, 0) {
                            for li in 0..l {
                                w[(i * k) * l + li] = 1.0;
                            }
                        }
                    }
                    tape.leaf(Tensor::from_vec(vec![b, k, l], w)?)
                }
            };

            let w_blk = tape.swap_last2(weights_bkl)?; // b x l x k for the trace
            trace.push((layer, tape.value(w_blk).clone()));

            let w_e = tape.reshape(weights_bkl, &[b, k, l, 1])?;
            let weighted = tape.mul(w_e, values)?;
            let delta = tape.sum_axis(weighted, 1)?; // b x l x d_out
            let _ = d_out;
            out = tape.add(out, delta)?;
        }

        h = if layer < last { tape.tanh(out)? } else { out };
    }
    Ok((tape.value(h).clone(), BatchTrace { layers: trace }))
}

fn tape_dim(tape: &Tape, v: Var, axis: usize) -> usize {
    tape.value(v).shape()[axis]
}
