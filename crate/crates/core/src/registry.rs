//! The uploadable adapter pool: persistence, dynamic register/remove, and
//! end-to-end serving.
//!
//! On disk a registry is one directory with one `<name>.raml` file per
//! adapter plus `index.json` (the retriever's export format). The `.raml`
//! layout is: magic `RAML`, u16 version, u32 metadata length, UTF-8 JSON
//! metadata, then per-layer A then B matrices as little-endian f32s,
//! row-major, in metadata order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::batch::{batched_forward, batched_vanilla_forward, build_plan};
use crate::encode::encode_text;
use crate::error::{Error, Result};
use crate::lora::{
    compose_fusion, forward_traced, BaseModel, CompositionStrategy, LoraAdapter, LoraDelta,
};
use crate::retriever::{
    embed_lora, export_index, import_index, retrieve_topk, EmbeddingProvider, LoraEmbedding,
    RetrievalIndex,
};
use crate::router::{RouterLora, RoutingTrace};
use crate::tensor::Tensor;

const RAML_MAGIC: &[u8; 4] = b"RAML";
const RAML_VERSION: u16 = 1;

/// A persisted adapter plus everything needed to retrieve it again.
#[derive(Debug, Clone)]
pub struct RegistryEntry {
    pub adapter: Arc<LoraAdapter>,
    pub embedding: LoraEmbedding,
    pub task_tag: String,
    pub uploaded_at: u64,
    /// The m texts the embedding was computed from; the embedding is
    /// recomputable from these plus the provider.
    pub samples: Vec<String>,
    /// Provider version the embedding was computed under.
    pub provider_version: u64,
}

/// In-memory pool with an always-fresh retrieval index. Mutations bump the
/// version and rebuild the index before returning, so a reader never sees
/// an index that disagrees with the entries.
pub struct Registry {
    model: Arc<BaseModel>,
    provider: EmbeddingProvider,
    entries: BTreeMap<String, RegistryEntry>,
    index: Arc<RetrievalIndex>,
    version: u64,
    seq_len: usize,
}

impl Registry {
    pub fn new(model: Arc<BaseModel>, provider: EmbeddingProvider, seq_len: usize) -> Self {
        Registry {
            model,
            provider,
            entries: BTreeMap::new(),
            index: Arc::new(RetrievalIndex::empty()),
            version: 0,
            seq_len,
        }
    }

    pub fn model(&self) -> &BaseModel {
        &self.model
    }

    pub fn model_arc(&self) -> Arc<BaseModel> {
        Arc::clone(&self.model)
    }

    pub fn provider(&self) -> &EmbeddingProvider {
        &self.provider
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn index(&self) -> Arc<RetrievalIndex> {
        Arc::clone(&self.index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn entry(&self, name: &str) -> Option<&RegistryEntry> {
        self.entries.get(name)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.values()
    }

    pub fn adapter(&self, name: &str) -> Option<Arc<LoraAdapter>> {
        self.entries.get(name).map(|e| Arc::clone(&e.adapter))
    }

    fn rebuild_index(&mut self) -> Result<()> {
        let entries = self
            .entries
            .values()
            .map(|e| (e.adapter.name().to_string(), e.embedding.clone()))
            .collect();
        self.index = Arc::new(RetrievalIndex::build(entries, self.version)?);
        Ok(())
    }

    /// Adds an adapter with its representative samples. The index is
    /// rebuilt before returning: the very next query can retrieve it, with
    /// no router retraining.
    pub fn register(&mut self, adapter: LoraAdapter, samples: Vec<String>) -> Result<()> {
        if self.entries.contains_key(adapter.name()) {
            return Err(Error::Conflict(format!(
                "adapter '{}' is already registered",
                adapter.name()
            )));
        }
        adapter.validate_against(&self.model)?;
        let embedding = embed_lora(&self.provider, adapter.name(), &samples)?;
        let entry = RegistryEntry {
            task_tag: adapter.task_tag().to_string(),
            embedding,
            uploaded_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            samples,
            provider_version: self.provider.version(),
            adapter: Arc::new(adapter),
        };
        self.entries.insert(entry.adapter.name().to_string(), entry);
        self.version += 1;
        self.rebuild_index()
    }

    /// Removes an adapter; no later query can retrieve it.
    pub fn remove(&mut self, name: &str) -> Result<RegistryEntry> {
        let entry = self
            .entries
            .remove(name)
            .ok_or_else(|| Error::NotFound(format!("adapter '{name}' is not registered")))?;
        self.version += 1;
        self.rebuild_index()?;
        Ok(entry)
    }

    /// Re-embeds every entry under the current provider (after projection
    /// training) and rebuilds the index.
    pub fn refresh_embeddings(&mut self) -> Result<()> {
        let provider_version = self.provider.version();
        let mut updated = BTreeMap::new();
        for (name, mut entry) in std::mem::take(&mut self.entries) {
            entry.embedding = embed_lora(&self.provider, &name, &entry.samples)?;
            entry.provider_version = provider_version;
            updated.insert(name, entry);
        }
        self.entries = updated;
        self.version += 1;
        self.rebuild_index()
    }

    /// Swaps in a trained provider and refreshes all embeddings.
    pub fn set_provider(&mut self, provider: EmbeddingProvider) -> Result<()> {
        self.provider = provider;
        self.refresh_embeddings()
    }

    /// Mutable access for in-place provider training; call
    /// [`Registry::refresh_embeddings`] afterwards.
    pub fn provider_mut(&mut self) -> &mut EmbeddingProvider {
        &mut self.provider
    }

    /// Rounds every adapter parameter to f32 precision in place, matching
    /// what a save/load round-trip would produce.
    pub fn round_params_to_f32(&mut self) -> Result<()> {
        let mut updated = BTreeMap::new();
        for (name, mut entry) in std::mem::take(&mut self.entries) {
            let mut deltas = BTreeMap::new();
            for (&layer, d) in entry.adapter.layers() {
                let a: Vec<f64> = d.a.data().iter().map(|&v| v as f32 as f64).collect();
                let b: Vec<f64> = d.b.data().iter().map(|&v| v as f32 as f64).collect();
                deltas.insert(
                    layer,
                    LoraDelta {
                        a: Tensor::from_vec(d.a.shape().to_vec(), a)?,
                        b: Tensor::from_vec(d.b.shape().to_vec(), b)?,
                    },
                );
            }
            let rounded = LoraAdapter::new(
                entry.adapter.name(),
                entry.adapter.task_tag(),
                entry.adapter.rank(),
                entry.adapter.alpha(),
                deltas,
            )?;
            entry.adapter = Arc::new(rounded);
            updated.insert(name, entry);
        }
        self.entries = updated;
        self.version += 1;
        self.rebuild_index()
    }

    pub fn retrieve(
        &self,
        prompt: &str,
        k: usize,
        mask: Option<&BTreeSet<String>>,
    ) -> Result<Vec<(String, f64)>> {
        retrieve_topk(&self.index, &self.provider, prompt, k, mask)
    }

    pub fn encode_prompt(&self, prompt: &str) -> Tensor {
        let one = encode_text(prompt, self.seq_len, self.model.input_dim());
        Tensor::from_vec(
            vec![1, self.seq_len, self.model.input_dim()],
            one.data().to_vec(),
        )
        .expect("finite encoding")
    }

    /// Retrieve, compose, forward. An empty pool (or fully masked one)
    /// falls back to the bare base model and flags the response.
    pub fn serve(
        &self,
        router: Option<&RouterLora>,
        prompt: &str,
        k: usize,
        strategy: CompositionStrategy,
        mask: Option<&BTreeSet<String>>,
    ) -> Result<ServeOutcome> {
        let retrieved = self.retrieve(prompt, k, mask)?;
        let adapters: Vec<Arc<LoraAdapter>> = retrieved
            .iter()
            .map(|(name, _)| self.adapter(name).expect("index entry has a backing adapter"))
            .collect();
        let refs: Vec<&LoraAdapter> = adapters.iter().map(|a| a.as_ref()).collect();
        let x = self.encode_prompt(prompt);
        let (output, trace) = forward_traced(&self.model, strategy, &refs, router, &x)?;
        self.outcome(prompt, output, retrieved, trace)
    }

    fn outcome(
        &self,
        prompt: &str,
        output: Tensor,
        retrieved: Vec<(String, f64)>,
        trace: Option<RoutingTrace>,
    ) -> Result<ServeOutcome> {
        let (logits, label) = match self.model.classes() {
            Some(_) => {
                let logits = self.model.pooled_logits(&output)?;
                let label = logits.argmax_last()[0];
                (logits.data().to_vec(), Some(label))
            }
            None => (Vec::new(), None),
        };
        Ok(ServeOutcome {
            prompt: prompt.to_string(),
            empty_pool: retrieved.is_empty(),
            output,
            logits,
            label,
            retrieved,
            trace,
        })
    }

    /// Batched serving: one plan, one forward, per-prompt provenance.
    /// Output order matches input order.
    pub fn serve_batch(
        &self,
        router: Option<&RouterLora>,
        prompts: &[String],
        k: usize,
        strategy: CompositionStrategy,
    ) -> Result<Vec<ServeOutcome>> {
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let per_prompt: Vec<Vec<(String, f64)>> = prompts
            .iter()
            .map(|p| self.retrieve(p, k, None))
            .collect::<Result<_>>()?;
        let lists: Vec<Vec<String>> = per_prompt
            .iter()
            .map(|r| r.iter().map(|(n, _)| n.clone()).collect())
            .collect();

        let b = prompts.len();
        let l = self.seq_len;
        let d = self.model.input_dim();
        let x = crate::encode::encode_batch(prompts, l, d);

        let mut traces: Vec<Option<RoutingTrace>> = (0..b).map(|_| None).collect();
        let output = match strategy {
            CompositionStrategy::Damole => {
                let router = router
                    .ok_or_else(|| Error::Config("damole strategy needs a router".into()))?;
                let plan = build_plan(&lists, k, |n| self.adapter(n))?;
                let (out, btrace) = batched_forward(&self.model, router, &plan, &x)?;
                for (i, slot) in traces.iter_mut().enumerate() {
                    if !plan.row_names(i).is_empty() {
                        *slot = Some(btrace.routing_trace_for_sample(&plan, i));
                    }
                }
                out
            }
            CompositionStrategy::Mixture | CompositionStrategy::Selection => {
                let plan = build_plan(&lists, k, |n| self.adapter(n))?;
                batched_vanilla_forward(&self.model, &plan, &x, strategy)?
            }
            CompositionStrategy::Fusion => {
                // Fusion happens pre-batch: each sample's retrieved set is
                // folded into a single adapter, then batched as singletons.
                let mut fused_pool: BTreeMap<String, Arc<LoraAdapter>> = BTreeMap::new();
                let mut fused_lists = Vec::with_capacity(b);
                for list in &lists {
                    if list.is_empty() {
                        fused_lists.push(Vec::new());
                        continue;
                    }
                    let adapters: Vec<Arc<LoraAdapter>> = list
                        .iter()
                        .map(|n| self.adapter(n).expect("retrieved adapter exists"))
                        .collect();
                    let refs: Vec<&LoraAdapter> = adapters.iter().map(|a| a.as_ref()).collect();
                    let fused = compose_fusion(&refs)?;
                    let name = fused.name().to_string();
                    fused_pool.entry(name.clone()).or_insert_with(|| Arc::new(fused));
                    fused_lists.push(vec![name]);
                }
                let plan = build_plan(&fused_lists, 1, |n| fused_pool.get(n).cloned())?;
                batched_vanilla_forward(&self.model, &plan, &x, CompositionStrategy::Selection)?
            }
        };

        let ld = l * self.model.output_dim();
        let mut outcomes = Vec::with_capacity(b);
        for (i, prompt) in prompts.iter().enumerate() {
            let row = Tensor::from_vec(
                vec![1, l, self.model.output_dim()],
                output.data()[i * ld..(i + 1) * ld].to_vec(),
            )?;
            let mut outcome = self.outcome(prompt, row, per_prompt[i].clone(), traces[i].take())?;
            outcome.empty_pool = per_prompt[i].is_empty();
            outcomes.push(outcome);
        }
        Ok(outcomes)
    }

    // ── Persistence ─────────────────────────────────────────────────────

    /// Writes one `<name>.raml` per adapter plus `index.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for entry in self.entries.values() {
            let bytes = raml_bytes(&entry.adapter, &entry.samples, entry.uploaded_at)?;
            fs::write(dir.join(format!("{}.raml", entry.adapter.name())), bytes)?;
        }
        fs::write(dir.join("index.json"), export_index(&self.index, &self.provider)?)?;
        Ok(())
    }

    /// Loads a directory saved by [`Registry::save_dir`]. Adapter matrices
    /// come back exactly as stored (f32 payload); embeddings are taken from
    /// `index.json` when present (bit-exact f64), otherwise recomputed from
    /// the stored samples.
    pub fn load_dir(
        model: Arc<BaseModel>,
        provider: EmbeddingProvider,
        dir: &Path,
        seq_len: usize,
    ) -> Result<Self> {
        let mut registry = Registry::new(model, provider, seq_len);
        let index_path = dir.join("index.json");
        let saved_index = if index_path.exists() {
            let (index, _) = import_index(&fs::read_to_string(&index_path)?)?;
            Some(index)
        } else {
            None
        };

        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "raml"))
            .collect();
        paths.sort();
        for path in paths {
            let (adapter, samples, uploaded_at) = parse_raml(&fs::read(&path)?)?;
            adapter.validate_against(&registry.model)?;
            let name = adapter.name().to_string();
            let embedding = saved_index
                .as_ref()
                .and_then(|index| {
                    index
                        .entries()
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(_, e)| e.clone())
                })
                .map(Ok)
                .unwrap_or_else(|| embed_lora(&registry.provider, &name, &samples))?;
            let entry = RegistryEntry {
                task_tag: adapter.task_tag().to_string(),
                embedding,
                uploaded_at,
                samples,
                provider_version: registry.provider.version(),
                adapter: Arc::new(adapter),
            };
            registry.entries.insert(name, entry);
        }
        registry.version = saved_index.as_ref().map_or(1, |i| i.version().max(1));
        registry.rebuild_index()?;
        Ok(registry)
    }
}

/// One serving response with full provenance.
#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub prompt: String,
    /// Model output, `1 x l x d`.
    pub output: Tensor,
    /// Pooled head logits (empty when the model has no head).
    pub logits: Vec<f64>,
    pub label: Option<usize>,
    /// Retrieved adapter names with similarities, best first.
    pub retrieved: Vec<(String, f64)>,
    /// Set when the pool had nothing to offer and the base model answered.
    pub empty_pool: bool,
    /// Routing weights, present for router-composed responses.
    pub trace: Option<RoutingTrace>,
}

// ── RAML adapter file format ────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct RamlMeta {
    name: String,
    task_tag: String,
    rank: usize,
    alpha: f64,
    layers: Vec<RamlLayer>,
    m: usize,
    samples: Vec<String>,
    uploaded_at: u64,
}

#[derive(Serialize, Deserialize)]
struct RamlLayer {
    id: usize,
    d_in: usize,
    d_out: usize,
}

/// Serializes an adapter: self-describing JSON header, f32 payload.
pub fn raml_bytes(adapter: &LoraAdapter, samples: &[String], uploaded_at: u64) -> Result<Vec<u8>> {
    let meta = RamlMeta {
        name: adapter.name().to_string(),
        task_tag: adapter.task_tag().to_string(),
        rank: adapter.rank(),
        alpha: adapter.alpha(),
        layers: adapter
            .layers()
            .map(|(&id, d)| RamlLayer {
                id,
                d_in: d.a.shape()[1],
                d_out: d.b.shape()[0],
            })
            .collect(),
        m: samples.len(),
        samples: samples.to_vec(),
        uploaded_at,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(meta_json.len() + 64);
    out.extend_from_slice(RAML_MAGIC);
    out.extend_from_slice(&RAML_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    for (_, d) in adapter.layers() {
        for &v in d.a.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in d.b.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a `.raml` file back into an adapter plus its samples.
pub fn parse_raml(bytes: &[u8]) -> Result<(LoraAdapter, Vec<String>, u64)> {
    if bytes.len() < 10 || &bytes[..4] != RAML_MAGIC {
        return Err(Error::Format("missing RAML magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RAML_VERSION {
        return Err(Error::Format(format!("unsupported RAML version {version}")));
    }
    let meta_len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + meta_len {
        return Err(Error::Format("truncated metadata".into()));
    }
    let meta: RamlMeta = serde_json::from_slice(&bytes[10..10 + meta_len])?;
    let mut offset = 10 + meta_len;
    let mut deltas = BTreeMap::new();
    for layer in &meta.layers {
        let a_len = meta.rank * layer.d_in;
        let b_len = layer.d_out * meta.rank;
        let need = (a_len + b_len) * 4;
        if bytes.len() < offset + need {
            return Err(Error::Format(format!("truncated payload at layer {}", layer.id)));
        }
        let read_f32s = |off: usize, count: usize| -> Vec<f64> {
            bytes[off..off + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let a = read_f32s(offset, a_len);
        offset += a_len * 4;
        let b = read_f32s(offset, b_len);
        offset += b_len * 4;
        deltas.insert(
            layer.id,
            LoraDelta {
                a: Tensor::from_vec(vec![meta.rank, layer.d_in], a)?,
                b: Tensor::from_vec(vec![layer.d_out, meta.rank], b)?,
            },
        );
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    let adapter = LoraAdapter::new(meta.name, meta.task_tag, meta.rank, meta.alpha, deltas)?;
    Ok((adapter, meta.samples, meta.uploaded_at))
}

// ── Provider persistence (projection snapshot) ──────────────────────────

#[derive(Serialize, Deserialize)]
struct ProviderDoc {
    version: u64,
    instruction: String,
    dim: usize,
    /// Base64 of little-endian f64s, row-major.
    projection: String,
}

pub fn save_provider(provider: &EmbeddingProvider, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(provider.projection().numel() * 8);
    for v in provider.projection().data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let doc = ProviderDoc {
        version: provider.version(),
        instruction: provider.instruction().to_string(),
        dim: provider.dim(),
        projection: B64.encode(bytes),
    };
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

pub fn load_provider(path: &Path) -> Result<EmbeddingProvider> {
    let doc: ProviderDoc = serde_json::from_str(&fs::read_to_string(path)?)?;
    let bytes = B64
        .decode(&doc.projection)
        .map_err(|e| Error::Format(format!("provider projection: {e}")))?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let projection = Tensor::from_vec(vec![doc.dim, doc.dim], data)?;
    EmbeddingProvider::restore(doc.instruction, projection, doc.version)
}
