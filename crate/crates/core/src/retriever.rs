//! Input-aware adapter retrieval.
//!
//! Queries and adapters live in one embedding space: a sample embeds as
//! E(I + x) where I is a fixed instruction prefix, and an adapter embeds as
//! the renormalized mean of the embeddings of m of its training samples.
//! The base embedding is a deterministic hashed character-n-gram map; a
//! trainable square projection sits on top and is fit with an InfoNCE
//! contrastive loss so that same-task samples pull together.

use std::collections::BTreeSet;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::encode::fnv1a64;
use crate::error::{Error, Result};
use crate::tensor::{finite_diff_check, Tape, Tensor, Var};

/// Instruction prefixed to every embedded text.
pub const DEFAULT_INSTRUCTION: &str = "Represent the sentence for similar task retrieval";

/// Embedding dimensionality (hashed n-gram buckets).
pub const EMBED_DIM: usize = 128;

/// Deterministic instructed embeddings with a trainable projection head.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    instruction: String,
    /// Square `e x e` projection, identity until trained.
    projection: Tensor,
    /// Bumped whenever the projection changes; lets an index detect staleness.
    version: u64,
    dim: usize,
}

impl Default for EmbeddingProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl EmbeddingProvider {
    pub fn new() -> Self {
        EmbeddingProvider {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            projection: Tensor::eye(EMBED_DIM),
            version: 0,
            dim: EMBED_DIM,
        }
    }

    /// Reduced-dimension provider for tests.
    #[cfg(test)]
    pub(crate) fn with_dim(dim: usize) -> Self {
        EmbeddingProvider {
            instruction: DEFAULT_INSTRUCTION.to_string(),
            projection: Tensor::eye(dim),
            version: 0,
            dim,
        }
    }

    /// Rebuilds a provider from persisted parts (see the registry module).
    pub fn restore(instruction: String, projection: Tensor, version: u64) -> Result<Self> {
        let shape = projection.shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::Dimension(format!(
                "projection must be square, got {shape:?}"
            )));
        }
        Ok(EmbeddingProvider {
            instruction,
            dim: shape[0],
            projection,
            version,
        })
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn projection(&self) -> &Tensor {
        &self.projection
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Hashed character n-gram features (n in {2, 3}) of the instructed
    /// text, L2-normalized. Same text, same vector, always.
    pub fn base_embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.is_empty() {
            return Err(Error::Domain("cannot embed empty text".into()));
        }
        let full = format!("{} {}", self.instruction, text);
        let chars: Vec<char> = full.chars().collect();
        let mut features = vec![0.0f64; self.dim];
        let mut buf = String::new();
        for n in [2usize, 3] {
            if chars.len() < n {
                continue;
            }
            for window in chars.windows(n) {
                buf.clear();
                buf.extend(window.iter());
                let h = fnv1a64(buf.as_bytes());
                let bucket = (h % self.dim as u64) as usize;
                let sign = if (h >> 63) & 1 == 1 { 1.0 } else { -1.0 };
                features[bucket] += sign;
            }
        }
        let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Domain(format!("text '{text}' produced no features")));
        }
        for f in &mut features {
            *f /= norm;
        }
        Ok(features)
    }
}

/// An adapter's position in the embedding space: the renormalized mean of
/// its sample embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEmbedding {
    vector: Vec<f64>,
    m: usize,
    source: String,
}

impl LoraEmbedding {
    pub fn new(vector: Vec<f64>, m: usize, source: impl Into<String>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Contract("adapter embedding wants m >= 1".into()));
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "adapter embedding norm {norm} is not unit"
            )));
        }
        Ok(LoraEmbedding {
            vector,
            m,
            source: source.into(),
        })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn sample_count(&self) -> usize {
        self.m
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

// ── Embedding operations ────────────────────────────────────────────────

/// E(I + x) = normalize(P . base_embed(I + x)); unit norm, deterministic.
pub fn embed_sample(provider: &EmbeddingProvider, text: &str) -> Result<Vec<f64>> {
    let base = provider.base_embed(text)?;
    let e = provider.dim();
    let p = provider.projection().data();
    let mut out = vec![0.0; e];
    for (r, slot) in out.iter_mut().enumerate() {
        let row = &p[r * e..(r + 1) * e];
        *slot = row.iter().zip(&base).map(|(w, v)| w * v).sum();
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("projection collapsed the embedding to zero".into()));
    }
    for v in &mut out {
        *v /= norm;
    }
    Ok(out)
}

/// Mean of the sample embeddings, renormalized to the unit sphere.
pub fn embed_lora(
    provider: &EmbeddingProvider,
    adapter_name: &str,
    samples: &[impl AsRef<str>],
) -> Result<LoraEmbedding> {
    if samples.is_empty() {
        return Err(Error::Contract("adapter embedding wants at least one sample".into()));
    }
    let e = provider.dim();
    let mut mean = vec![0.0; e];
    for s in samples {
        let v = embed_sample(provider, s.as_ref())?;
        for (m, x) in mean.iter_mut().zip(&v) {
            *m += x / samples.len() as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("sample embeddings cancelled out".into()));
    }
    for v in &mut mean {
        *v /= norm;
    }
    LoraEmbedding::new(mean, samples.len(), adapter_name)
}

/// Cosine similarity between the query embedding and an adapter embedding.
pub fn similarity(provider: &EmbeddingProvider, text: &str, emb: &LoraEmbedding) -> Result<f64> {
    let q = embed_sample(provider, text)?;
    Ok(q.iter().zip(emb.vector()).map(|(a, b)| a * b).sum())
}

// ── Retrieval index ─────────────────────────────────────────────────────

/// Immutable snapshot of the pool's embeddings. Rebuilt on every pool
/// change; readers swap atomically between snapshots.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    entries: Vec<(String, LoraEmbedding)>,
    version: u64,
}

impl RetrievalIndex {
    pub fn build(entries: Vec<(String, LoraEmbedding)>, version: u64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, _) in &entries {
            if !seen.insert(name.clone()) {
                return Err(Error::Conflict(format!("duplicate adapter '{name}' in index")));
            }
        }
        Ok(RetrievalIndex { entries, version })
    }

    pub fn empty() -> Self {
        RetrievalIndex {
            entries: Vec::new(),
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn entries(&self) -> &[(String, LoraEmbedding)] {
        &self.entries
    }
}

/// The k highest-similarity unmasked adapters, best first, ties broken by
/// ascending name. Returns fewer than k when the unmasked pool is smaller;
/// an empty index yields an empty list (the serving layer decides fallback).
pub fn retrieve_topk(
    index: &RetrievalIndex,
    provider: &EmbeddingProvider,
    text: &str,
    k: usize,
    mask: Option<&BTreeSet<String>>,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Contract("retrieval wants k >= 1".into()));
    }
    if index.is_empty() {
        return Ok(Vec::new());
    }
    let q = embed_sample(provider, text)?;
    let mut scored: Vec<(String, f64)> = index
        .entries
        .iter()
        .filter(|(name, _)| mask.is_none_or(|m| !m.contains(name)))
        .map(|(name, emb)| {
            let s: f64 = q.iter().zip(emb.vector()).map(|(a, b)| a * b).sum();
            (name.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

// ── Contrastive training of the projection ──────────────────────────────

#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    /// Softmax temperature.
    pub temperature: f64,
    /// Negatives per positive pair.
    pub negatives: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            temperature: 0.05,
            negatives: 7,
            steps: 300,
            lr: 0.5,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.negatives == 0 {
            return Err(Error::Config("wants at least one negative".into()));
        }
        Ok(())
    }
}

/// Embeds a base vector through the (possibly trainable) projection on the
/// tape: row = normalize(base . P^T), which is normalize(P v) as a row.
fn project_on_tape(tape: &mut Tape, p_t: Var, base: &[f64]) -> Result<Var> {
    let row = tape.leaf(Tensor::from_vec(vec![1, base.len()], base.to_vec())?);
    let projected = tape.matmul(row, p_t)?;
    tape.normalize_all(projected)
}

fn cosine_on_tape(tape: &mut Tape, u: Var, w: Var) -> Result<Var> {
    let prod = tape.mul(u, w)?;
    tape.sum_all(prod)
}

/// InfoNCE loss on the tape; scores are cosines over the shared projection.
fn contrastive_loss_on_tape(
    tape: &mut Tape,
    p_var: Var,
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<Var> {
    let p_t = tape.swap_last2(p_var)?;
    let a = project_on_tape(tape, p_t, anchor)?;
    let pos = project_on_tape(tape, p_t, positive)?;
    let s_pos = cosine_on_tape(tape, a, pos)?;
    let s_pos = tape.scale(s_pos, 1.0 / temperature)?;
    let mut scores = vec![s_pos];
    for neg in negatives {
        let n = project_on_tape(tape, p_t, neg)?;
        let s = cosine_on_tape(tape, a, n)?;
        scores.push(tape.scale(s, 1.0 / temperature)?);
    }
    let stacked = tape.stack_last(&scores)?;
    let lse = tape.logsumexp_all(stacked)?;
    tape.sub(lse, s_pos)
}

/// -log( exp(s+/g) / (exp(s+/g) + sum_j exp(s-_j/g)) ). Strictly positive;
/// falls as the positive similarity rises.
pub fn contrastive_loss(
    provider: &EmbeddingProvider,
    anchor: &str,
    positive: &str,
    negatives: &[impl AsRef<str>],
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    if negatives.is_empty() {
        return Err(Error::Contract("contrastive loss wants at least one negative".into()));
    }
    let a = provider.base_embed(anchor)?;
    let p = provider.base_embed(positive)?;
    let n: Vec<Vec<f64>> = negatives
        .iter()
        .map(|t| provider.base_embed(t.as_ref()))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let p_var = tape.leaf(provider.projection().clone());
    let loss = contrastive_loss_on_tape(&mut tape, p_var, &a, &p, &n, temperature)?;
    tape.value(loss).item()
}

/// Finite-difference check of the projection gradient on a tiny instance
/// (dimension 6), exercising the same tape path training uses.
pub fn contrastive_grad_check(seed: u64) -> Result<f64> {
    let dim = 6;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha12Rng| {
        let v = Tensor::randn(&[dim], 1.0, rng);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        v.data().iter().map(|x| x / norm).collect::<Vec<f64>>()
    };
    let anchor = unit(&mut rng);
    let positive = unit(&mut rng);
    let negatives: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng)).collect();
    let p0 = Tensor::randn(&[dim, dim], 0.5, &mut rng);

    let f = |params: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let p_var = tape.leaf(params[0].clone().trainable());
        let loss =
            contrastive_loss_on_tape(&mut tape, p_var, &anchor, &positive, &negatives, 0.5)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item()?, vec![grads[&p_var].clone()]))
    };
    finite_diff_check(f, &[p0], 1e-5)
}

/// Before/after top-1 accuracy on the training subset.
#[derive(Debug, Clone)]
pub struct RetrieverReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_top1_before: f64,
    pub train_top1_after: f64,
}

/// Trains the projection on a subset of tasks: anchors and positives come
/// from the same task, negatives from the others. Only P moves; the base
/// embedding stays fixed. The projection gradient is finite-difference
/// checked (tiny instance) before the run.
pub fn train_retriever<R: Rng>(
    provider: &mut EmbeddingProvider,
    tasks: &[(String, Vec<String>)],
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<RetrieverReport> {
    cfg.validate()?;
    if tasks.len() < 2 {
        return Err(Error::Config(
            "contrastive training wants >= 2 tasks to form negatives".into(),
        ));
    }
    for (name, samples) in tasks {
        if samples.len() < 2 {
            return Err(Error::Config(format!(
                "task {name} wants >= 2 samples for anchor/positive pairs"
            )));
        }
    }
    let fd = contrastive_grad_check(0xBEEF)?;
    if fd > 1e-4 {
        return Err(Error::Training(format!(
            "projection gradient self-check failed: rel err {fd:.3e}"
        )));
    }

    // Pre-embed the base features once; they do not depend on P.
    let base: Vec<Vec<Vec<f64>>> = tasks
        .iter()
        .map(|(_, samples)| {
            samples
                .iter()
                .map(|s| provider.base_embed(s))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let draw = |rng: &mut R| -> (usize, usize, usize, Vec<(usize, usize)>) {
        let ti = rng.random_range(0..tasks.len());
        let ai = rng.random_range(0..base[ti].len());
        let mut pi = rng.random_range(0..base[ti].len());
        while pi == ai {
            pi = rng.random_range(0..base[ti].len());
        }
        let mut negs = Vec::with_capacity(cfg.negatives);
        for _ in 0..cfg.negatives {
            let mut tj = rng.random_range(0..tasks.len());
            while tj == ti {
                tj = rng.random_range(0..tasks.len());
            }
            negs.push((tj, rng.random_range(0..base[tj].len())));
        }
        (ti, ai, pi, negs)
    };

    let mean_loss = |p: &Tensor, draws: &[(usize, usize, usize, Vec<(usize, usize)>)]| -> Result<f64> {
        let mut total = 0.0;
        for (ti, ai, pi, negs) in draws {
            let mut tape = Tape::new();
            let p_var = tape.leaf(p.clone());
            let n: Vec<Vec<f64>> = negs.iter().map(|&(t, i)| base[t][i].clone()).collect();
            let loss = contrastive_loss_on_tape(
                &mut tape,
                p_var,
                &base[*ti][*ai],
                &base[*ti][*pi],
                &n,
                cfg.temperature,
            )?;
            total += tape.value(loss).item()?;
        }
        Ok(total / draws.len() as f64)
    };

    // Fixed probe set for the loss bookkeeping.
    let probe: Vec<_> = (0..16).map(|_| draw(rng)).collect();
    let initial_loss = mean_loss(provider.projection(), &probe)?;
    let top1_before = subset_top1(provider, tasks)?;

    let mut p = provider.projection().clone();
    for _ in 0..cfg.steps {
        let (ti, ai, pi, negs) = draw(rng);
        let mut tape = Tape::new();
        let p_var = tape.leaf(p.clone().trainable());
        let n: Vec<Vec<f64>> = negs.iter().map(|&(t, i)| base[t][i].clone()).collect();
        let loss = contrastive_loss_on_tape(
            &mut tape,
            p_var,
            &base[ti][ai],
            &base[ti][pi],
            &n,
            cfg.temperature,
        )
        .map_err(|e| Error::Training(format!("contrastive loss diverged: {e}")))?;
        let grads = tape
            .backward(loss)
            .map_err(|e| Error::Training(format!("backward failed: {e}")))?;
        if let Some(g) = grads.get(&p_var) {
            for (w, g) in p.data_mut().iter_mut().zip(g) {
                *w -= cfg.lr * g;
            }
        }
    }

    if cfg.steps > 0 {
        provider.projection = p;
        provider.version += 1;
    }
    let final_loss = mean_loss(provider.projection(), &probe)?;
    let top1_after = subset_top1(provider, tasks)?;
    Ok(RetrieverReport {
        initial_loss,
        final_loss,
        train_top1_before: top1_before,
        train_top1_after: top1_after,
    })
}

/// Top-1 accuracy of task retrieval within the given subset: each sample
/// queries an index of the subset's own adapters-by-averaging.
fn subset_top1(provider: &EmbeddingProvider, tasks: &[(String, Vec<String>)]) -> Result<f64> {
    let mut entries = Vec::new();
    for (name, samples) in tasks {
        entries.push((name.clone(), embed_lora(provider, name, samples)?));
    }
    let index = RetrievalIndex::build(entries, 0)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (name, samples) in tasks {
        for s in samples {
            let top = retrieve_topk(&index, provider, s, 1, None)?;
            if top.first().is_some_and(|(n, _)| n == name) {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

// ── Index export / import ───────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct IndexDoc {
    version: u64,
    instruction: String,
    entries: Vec<IndexEntryDoc>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntryDoc {
    name: String,
    m: usize,
    /// Base64 of little-endian f64s.
    vector: String,
}

/// Versioned JSON snapshot of the index.
pub fn export_index(index: &RetrievalIndex, provider: &EmbeddingProvider) -> Result<String> {
    let doc = IndexDoc {
        version: index.version(),
        instruction: provider.instruction().to_string(),
        entries: index
            .entries()
            .iter()
            .map(|(name, emb)| {
                let mut bytes = Vec::with_capacity(emb.vector().len() * 8);
                for v in emb.vector() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                IndexEntryDoc {
                    name: name.clone(),
                    m: emb.sample_count(),
                    vector: B64.encode(bytes),
                }
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Parses an exported index; checks unit norms and name uniqueness.
pub fn import_index(json: &str) -> Result<(RetrievalIndex, String)> {
    let doc: IndexDoc = serde_json::from_str(json)?;
    let mut entries = Vec::with_capacity(doc.entries.len());
    for e in doc.entries {
        let bytes = B64
            .decode(&e.vector)
            .map_err(|err| Error::Format(format!("entry {}: {err}", e.name)))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!("entry {}: truncated vector", e.name)));
        }
        let vector: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let name = e.name.clone();
        entries.push((name, LoraEmbedding::new(vector, e.m, e.name)?));
    }
    Ok((RetrievalIndex::build(entries, doc.version)?, doc.instruction))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_sample_is_deterministic_and_unit() {
        let p = EmbeddingProvider::new();
        let a = embed_sample(&p, "north wind rises").unwrap();
        let b = embed_sample(&p, "north wind rises").unwrap();
        assert_eq!(a, b);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn identity_projection_equals_base_embed() {
        let p = EmbeddingProvider::new();
        let base = p.base_embed("quiet harbor").unwrap();
        let emb = embed_sample(&p, "quiet harbor").unwrap();
        for (a, b) in base.iter().zip(&emb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_text_is_domain_error() {
        let p = EmbeddingProvider::new();
        assert!(matches!(embed_sample(&p, ""), Err(Error::Domain(_))));
    }

    #[test]
    fn disjoint_ngram_texts_have_low_similarity() {
        // All similarity comes through the shared instruction prefix and
        // hash collisions; texts sharing no n-grams stay well apart once
        // the instruction mass cancels in the comparison below.
        let p = EmbeddingProvider::with_dim(512);
        let a = p.base_embed("qqq www eee").unwrap();
        let b = p.base_embed("zzz xxx ccc").unwrap();
        let instr = p.base_embed("-").unwrap();
        // Remove the instruction direction from both before comparing.
        let strip = |v: &[f64]| -> Vec<f64> {
            let d: f64 = v.iter().zip(&instr).map(|(x, y)| x * y).sum();
            let stripped: Vec<f64> = v.iter().zip(&instr).map(|(x, y)| x - d * y).collect();
            let n = stripped.iter().map(|x| x * x).sum::<f64>().sqrt();
            stripped.iter().map(|x| x / n).collect()
        };
        let (sa, sb) = (strip(&a), strip(&b));
        let cos: f64 = sa.iter().zip(&sb).map(|(x, y)| x * y).sum();
        assert!(cos.abs() <= 0.05, "disjoint texts still close: {cos}");
    }

    #[test]
    fn embed_lora_mean_matches_loop_oracle() {
        let p = EmbeddingProvider::new();
        let samples = ["red kite", "blue kite", "green kite"];
        let emb = embed_lora(&p, "kites", &samples).unwrap();
        let mut mean = vec![0.0; p.dim()];
        for s in &samples {
            for (m, v) in mean.iter_mut().zip(embed_sample(&p, s).unwrap()) {
                *m += v / 3.0;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in emb.vector().iter().zip(&mean) {
            assert!((a - b / norm).abs() <= 1e-12);
        }
    }

    #[test]
    fn embed_lora_single_and_duplicates_match_embed_sample() {
        let p = EmbeddingProvider::new();
        let one = embed_lora(&p, "a", &["same text"]).unwrap();
        let many = embed_lora(&p, "a", &["same text"; 5]).unwrap();
        let direct = embed_sample(&p, "same text").unwrap();
        for ((a, b), c) in one.vector().iter().zip(many.vector()).zip(&direct) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn embed_lora_empty_is_contract_error() {
        let p = EmbeddingProvider::new();
        let none: [&str; 0] = [];
        assert!(matches!(embed_lora(&p, "x", &none), Err(Error::Contract(_))));
    }

    #[test]
    fn similarity_of_defining_sample_is_one() {
        let p = EmbeddingProvider::new();
        let emb = embed_lora(&p, "solo", &["the defining sample"]).unwrap();
        let s = similarity(&p, "the defining sample", &emb).unwrap();
        assert!((s - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn similarity_matches_dot_product_oracle() {
        let p = EmbeddingProvider::new();
        let emb = embed_lora(&p, "a", &["first text", "second text"]).unwrap();
        let q = embed_sample(&p, "third text").unwrap();
        let want: f64 = q.iter().zip(emb.vector()).map(|(x, y)| x * y).sum();
        let got = similarity(&p, "third text", &emb).unwrap();
        assert!((got - want).abs() < 1e-14);
        assert!((-1.0..=1.0).contains(&got));
    }

    fn tiny_index(p: &EmbeddingProvider, names: &[&str]) -> RetrievalIndex {
        let entries = names
            .iter()
            .map(|n| {
                let samples = [format!("{n} alpha sample"), format!("{n} beta sample")];
                (n.to_string(), embed_lora(p, n, &samples).unwrap())
            })
            .collect();
        RetrievalIndex::build(entries, 1).unwrap()
    }

    #[test]
    fn topk_with_small_pool_returns_all() {
        let p = EmbeddingProvider::new();
        let index = tiny_index(&p, &["only"]);
        let got = retrieve_topk(&index, &p, "anything at all", 3, None).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, "only");
    }

    #[test]
    fn topk_matches_brute_force_with_tie_break() {
        let p = EmbeddingProvider::new();
        let index = tiny_index(&p, &["delta", "alpha", "charlie", "bravo"]);
        let query = "bravo alpha sample";
        let got = retrieve_topk(&index, &p, query, 3, None).unwrap();
        // Brute force.
        let mut scored: Vec<(String, f64)> = index
            .entries()
            .iter()
            .map(|(n, e)| (n.clone(), similarity(&p, query, e).unwrap()))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(3);
        assert_eq!(got, scored);
    }

    #[test]
    fn masking_excludes_and_preserves_order() {
        let p = EmbeddingProvider::new();
        let index = tiny_index(&p, &["a1", "b2", "c3", "d4"]);
        let full = retrieve_topk(&index, &p, "b2 alpha sample", 4, None).unwrap();
        let mut mask = BTreeSet::new();
        mask.insert(full[0].0.clone());
        let masked = retrieve_topk(&index, &p, "b2 alpha sample", 4, Some(&mask)).unwrap();
        assert!(!masked.iter().any(|(n, _)| *n == full[0].0));
        let rest: Vec<&String> = full[1..].iter().map(|(n, _)| n).collect();
        let got: Vec<&String> = masked.iter().map(|(n, _)| n).collect();
        assert_eq!(rest, got, "masking reordered the remaining adapters");
    }

    #[test]
    fn empty_index_returns_empty() {
        let p = EmbeddingProvider::new();
        let got = retrieve_topk(&RetrievalIndex::empty(), &p, "anything", 3, None).unwrap();
        assert!(got.is_empty());
    }

    #[test]
    fn contrastive_loss_symmetric_case_is_ln2() {
        // One negative with s+ = s-: loss = ln 2 regardless of temperature.
        let p = EmbeddingProvider::new();
        let anchor = "mirror case";
        let loss = contrastive_loss(&p, anchor, anchor, &[anchor], 0.05).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_positive_and_monotone() {
        let p = EmbeddingProvider::new();
        let near = contrastive_loss(
            &p,
            "sun over water",
            "sun over the water",
            &["completely different words"],
            0.5,
        )
        .unwrap();
        let far = contrastive_loss(
            &p,
            "sun over water",
            "completely different words",
            &["sun over the water"],
            0.5,
        )
        .unwrap();
        assert!(near > 0.0);
        assert!(near < far, "loss should fall as the positive gets closer");
    }

    #[test]
    fn contrastive_loss_matches_direct_formula() {
        let p = EmbeddingProvider::new();
        let (a, pos, n1, n2) = ("anchor text", "positive text", "first neg", "second neg");
        let g = 0.07;
        let emb = |t: &str| LoraEmbedding::new(embed_sample(&p, t).unwrap(), 1, t).unwrap();
        let sp = similarity(&p, a, &emb(pos)).unwrap();
        let s1 = similarity(&p, a, &emb(n1)).unwrap();
        let s2 = similarity(&p, a, &emb(n2)).unwrap();
        let want = -((sp / g).exp() / ((sp / g).exp() + (s1 / g).exp() + (s2 / g).exp())).ln();
        let got = contrastive_loss(&p, a, pos, &[n1, n2], g).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn contrastive_gamma_must_be_positive() {
        let p = EmbeddingProvider::new();
        assert!(matches!(
            contrastive_loss(&p, "a b", "c d", &["e f"], 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let err = contrastive_grad_check(seed).unwrap();
            assert!(err <= 1e-4, "seed {seed}: rel err {err:.3e}");
        }
    }

    fn toy_tasks() -> Vec<(String, Vec<String>)> {
        let specs = [
            ("tides", ["tide pool brine", "salt tide wrack", "brine pool foam"]),
            ("embers", ["ember ash glow", "ash coal ember", "glow coal soot"]),
            ("moss", ["moss fern damp", "fern damp frond", "moss frond peat"]),
        ];
        specs
            .iter()
            .map(|(n, s)| (n.to_string(), s.iter().map(|x| x.to_string()).collect()))
            .collect()
    }

    #[test]
    fn train_retriever_zero_steps_keeps_projection_bitwise() {
        let mut p = EmbeddingProvider::new();
        let before = p.projection().data().to_vec();
        let cfg = ContrastiveConfig { steps: 0, ..Default::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let report = train_retriever(&mut p, &toy_tasks(), &cfg, &mut rng).unwrap();
        assert_eq!(before, p.projection().data());
        assert_eq!(p.version(), 0);
        assert_eq!(report.initial_loss, report.final_loss);
    }

    #[test]
    fn train_retriever_single_task_is_config_error() {
        let mut p = EmbeddingProvider::new();
        let tasks = vec![toy_tasks().remove(0)];
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        assert!(matches!(
            train_retriever(&mut p, &tasks, &ContrastiveConfig::default(), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn train_retriever_lowers_loss_and_bumps_version() {
        let mut p = EmbeddingProvider::new();
        let cfg = ContrastiveConfig { steps: 150, lr: 0.5, ..Default::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let report = train_retriever(&mut p, &toy_tasks(), &cfg, &mut rng).unwrap();
        assert!(report.final_loss < report.initial_loss, "{report:?}");
        assert_eq!(p.version(), 1);
    }

    #[test]
    fn index_export_import_roundtrip() {
        let p = EmbeddingProvider::new();
        let index = tiny_index(&p, &["x1", "y2"]);
        let json = export_index(&index, &p).unwrap();
        let (back, instruction) = import_index(&json).unwrap();
        assert_eq!(instruction, DEFAULT_INSTRUCTION);
        assert_eq!(back.version(), index.version());
        assert_eq!(back.len(), 2);
        for ((n1, e1), (n2, e2)) in index.entries().iter().zip(back.entries()) {
            assert_eq!(n1, n2);
            assert_eq!(e1.vector(), e2.vector(), "vectors must round-trip bit-exactly");
            assert_eq!(e1.sample_count(), e2.sample_count());
        }
    }
}
