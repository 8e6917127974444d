//! Desk-scale evaluation harness: a synthetic task universe, the mixed-task
//! IID/OOD protocol, retrieval-accuracy tables, routing-weight reports, and
//! the throughput benchmark.
//!
//! Tasks are built from disjoint syllable inventories so their keyword
//! vocabularies barely overlap; a small pool of shared filler words plus
//! hash collisions in the embedding keep retrieval imperfect enough to
//! measure. Task targets are corrections on top of the frozen base model's
//! own logits: `z(x) = base_logits(x) + G meanpool(enc(x)) + bias`, so a
//! wrong adapter actively hurts while an averaged (diluted) wrong mixture
//! hurts less.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::batch::{batched_forward, batched_vanilla_forward, build_plan};
use crate::encode::{encode_batch, encode_text};
use crate::error::{Error, Result};
use crate::lora::{
    compose_fusion, forward, train_task_lora, BaseModel, CompositionStrategy, LoraAdapter,
    TrainConfig, TrainSample,
};
use crate::registry::Registry;
use crate::retriever::{train_retriever, ContrastiveConfig, EmbeddingProvider};
use crate::router::{train_router, RouterLora, RouterTrainConfig};
use crate::tensor::Tensor;

const CONSONANTS: &[char] = &[
    'b', 'c', 'd', 'f', 'g', 'h', 'j', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'w', 'z',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

const FILLERS: &[&str] = &[
    "the", "of", "to", "and", "in", "it", "is", "on", "at", "as", "by", "or", "for", "with",
    "from", "that", "this", "but", "not", "are", "was", "were", "been", "being", "have", "has",
    "had", "does", "did", "will", "would", "could", "should", "may", "might", "must", "shall",
    "into", "over", "under",
];

#[derive(Debug, Clone)]
pub struct UniverseConfig {
    pub tasks: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    pub classes: usize,
    /// Tokens the model actually sees per prompt.
    pub seq_len: usize,
    pub keywords_per_task: usize,
    /// Keywords sampled into each text (the first `seq_len` tokens are
    /// always keywords; fillers land later).
    pub keywords_per_text: usize,
    /// Per text, 1..=this many shared filler words are mixed in after the
    /// visible prefix; they are what keeps retrieval imperfect.
    pub max_fillers_per_text: usize,
    /// Fraction of texts that are keyword-sparse and filler-heavy; these
    /// are the retrieval-ambiguous samples that give the trained
    /// projection something to fix.
    pub hard_fraction: f64,
    /// Keywords in a hard text (normal texts use `keywords_per_text`).
    pub hard_keywords: usize,
    /// Filler count for hard texts.
    pub hard_tail_fillers: usize,
    /// Effective per-entry scale of each task's total correction map.
    pub map_std: f64,
    /// Rank of the correction subspace all tasks share; at or below the
    /// router rank the cross-attention scores can see the whole code.
    pub shared_map_rank: usize,
    /// Scale of the per-task 5x5-ish code inside the shared subspace; the
    /// shared (identity) component has strength 1.
    pub task_code_std: f64,
    /// Fraction of generic (off-domain, zero-correction) texts mixed into
    /// each task's training set; teaches adapters to stay quiet off-domain.
    pub negatives_fraction: f64,
    /// Leading tasks flagged as regression (MSE metric) instead of
    /// classification.
    pub regression_tasks: usize,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            tasks: 8,
            train_per_task: 48,
            test_per_task: 24,
            classes: 4,
            seq_len: 8,
            keywords_per_task: 48,
            keywords_per_text: 12,
            max_fillers_per_text: 8,
            hard_fraction: 0.35,
            hard_keywords: 4,
            hard_tail_fillers: 16,
            map_std: 0.55,
            shared_map_rank: 5,
            task_code_std: 0.05,
            negatives_fraction: 1.0,
            regression_tasks: 0,
            seed: 0,
        }
    }
}

/// One synthetic task: a private keyword vocabulary, a frozen ground-truth
/// correction on top of the base model, and its sample texts.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: usize,
    pub name: String,
    pub keywords: Vec<String>,
    /// `classes x input_dim` private correction map (the shared map lives
    /// on the universe).
    pub gmap: Tensor,
    pub gbias: Vec<f64>,
    pub regression: bool,
    pub train_texts: Vec<String>,
    pub test_texts: Vec<String>,
    /// Generic off-domain texts whose correct correction is zero.
    pub negative_texts: Vec<String>,
}

impl TaskSpec {
    /// Ground truth over the full output width: the base model's pooled
    /// output plus the shared and task-private linear corrections of the
    /// mean visible-token encoding. The classification label reads the
    /// first `classes` components.
    pub fn target_for(
        &self,
        model: &BaseModel,
        shared_map: &Tensor,
        text: &str,
        seq_len: usize,
    ) -> Result<Vec<f64>> {
        let d = model.input_dim();
        let width = self.gmap.shape()[0];
        let enc = encode_text(text, seq_len, d);
        let x = Tensor::from_vec(vec![1, seq_len, d], enc.data().to_vec())?;
        let base_out = forward(model, CompositionStrategy::Mixture, &[], None, &x)?;

        let d_out = model.output_dim();
        let l = seq_len as f64;
        let mut base_pooled = vec![0.0; d_out];
        for t in 0..seq_len {
            for c in 0..d_out {
                base_pooled[c] += base_out.data()[t * d_out + c] / l;
            }
        }

        let mut mean_enc = vec![0.0; d];
        for t in 0..seq_len {
            for c in 0..d {
                mean_enc[c] += enc.data()[t * d + c] / l;
            }
        }
        let mut z = vec![0.0; width];
        for (ci, slot) in z.iter_mut().enumerate() {
            let own = &self.gmap.data()[ci * d..(ci + 1) * d];
            let shared = &shared_map.data()[ci * d..(ci + 1) * d];
            *slot = base_pooled[ci]
                + own
                    .iter()
                    .zip(shared)
                    .zip(&mean_enc)
                    .map(|((g, s), e)| (g + s) * e)
                    .sum::<f64>()
                + self.gbias[ci];
        }
        Ok(z)
    }

    pub fn label_for(
        &self,
        model: &BaseModel,
        shared_map: &Tensor,
        text: &str,
        seq_len: usize,
    ) -> Result<usize> {
        let z = self.target_for(model, shared_map, text, seq_len)?;
        let classes = model.classes().unwrap_or(z.len());
        Ok(z[..classes]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap())
    }

    /// Domain texts with their corrected targets plus generic negatives
    /// whose target is the base model's own output (zero correction).
    pub fn train_samples(
        &self,
        model: &BaseModel,
        shared_map: &Tensor,
        seq_len: usize,
    ) -> Result<Vec<TrainSample>> {
        let mut samples: Vec<TrainSample> = self
            .train_texts
            .iter()
            .map(|text| {
                Ok(TrainSample {
                    input: encode_text(text, seq_len, model.input_dim()),
                    target: self.target_for(model, shared_map, text, seq_len)?,
                })
            })
            .collect::<Result<_>>()?;
        let d_out = model.output_dim();
        for text in &self.negative_texts {
            let enc = encode_text(text, seq_len, model.input_dim());
            let x = Tensor::from_vec(vec![1, seq_len, model.input_dim()], enc.data().to_vec())?;
            let base_out = forward(model, CompositionStrategy::Mixture, &[], None, &x)?;
            let mut target = vec![0.0; d_out];
            for t in 0..seq_len {
                for c in 0..d_out {
                    target[c] += base_out.data()[t * d_out + c] / seq_len as f64;
                }
            }
            samples.push(TrainSample { input: enc, target });
        }
        Ok(samples)
    }
}

pub struct Universe {
    pub cfg: UniverseConfig,
    /// Correction component common to every task.
    pub shared_map: Tensor,
    pub tasks: Vec<TaskSpec>,
}

impl Universe {
    pub fn target_for(&self, model: &BaseModel, task: &TaskSpec, text: &str) -> Result<Vec<f64>> {
        task.target_for(model, &self.shared_map, text, self.cfg.seq_len)
    }

    pub fn label_for(&self, model: &BaseModel, task: &TaskSpec, text: &str) -> Result<usize> {
        task.label_for(model, &self.shared_map, text, self.cfg.seq_len)
    }
}

/// Deterministic synthetic task universe. Tasks draw keywords from disjoint
/// syllable inventories, so distinct tasks share no keyword vocabulary at
/// all; the only shared text mass is the filler pool.
pub fn gen_universe(model: &BaseModel, cfg: &UniverseConfig) -> Result<Universe> {
    if cfg.tasks < 2 {
        return Err(Error::Config("universe wants at least 2 tasks".into()));
    }
    if cfg.keywords_per_text > cfg.keywords_per_task {
        return Err(Error::Config(format!(
            "{} keywords per text exceed the {} per task",
            cfg.keywords_per_text, cfg.keywords_per_task
        )));
    }
    if cfg.keywords_per_text < cfg.seq_len {
        return Err(Error::Config(format!(
            "texts need at least seq_len = {} keywords, got {}",
            cfg.seq_len, cfg.keywords_per_text
        )));
    }
    if let Some(c) = model.classes() {
        if c != cfg.classes {
            return Err(Error::Config(format!(
                "universe classes {} vs model head {c}",
                cfg.classes
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // Each task speaks from its own pair of consonants, so even character
    // bigrams rarely cross task boundaries. Small task counts get fully
    // disjoint pairs; larger pools fall back to distinct (possibly
    // overlapping) pairs.
    let mut pairs: Vec<(char, char)> = Vec::new();
    if 2 * cfg.tasks <= CONSONANTS.len() {
        let mut shuffled = CONSONANTS.to_vec();
        shuffled.shuffle(&mut rng);
        for i in 0..cfg.tasks {
            pairs.push((shuffled[2 * i], shuffled[2 * i + 1]));
        }
    } else {
        for i in 0..CONSONANTS.len() {
            for j in (i + 1)..CONSONANTS.len() {
                pairs.push((CONSONANTS[i], CONSONANTS[j]));
            }
        }
        pairs.shuffle(&mut rng);
        if pairs.len() < cfg.tasks {
            return Err(Error::Config(format!(
                "{} tasks exhaust the consonant-pair inventory",
                cfg.tasks
            )));
        }
        pairs.truncate(cfg.tasks);
    }

    let d = model.input_dim();
    let width = model.output_dim();
    // One rank-r correction subspace for the whole universe: every task's
    // map is U (I + C_t) V with a private code C_t. Factor scales chosen so
    // the total map hits the requested per-entry std.
    let r_g = cfg.shared_map_rank.max(1);
    let code_var = 1.0 + r_g as f64 * cfg.task_code_std * cfg.task_code_std;
    let s = (cfg.map_std * cfg.map_std / (r_g as f64 * code_var)).sqrt().sqrt();
    let u_fac = Tensor::randn(&[width, r_g], s, &mut rng);
    let v_fac = Tensor::randn(&[r_g, d], s, &mut rng);
    let low_rank_map = |code: &[f64]| -> Result<Tensor> {
        // U code V, code given row-major r_g x r_g.
        let mut data = vec![0.0; width * d];
        for i in 0..width {
            for j in 0..d {
                let mut acc = 0.0;
                for a in 0..r_g {
                    let mut cv = 0.0;
                    for b in 0..r_g {
                        cv += code[a * r_g + b] * v_fac.data()[b * d + j];
                    }
                    acc += u_fac.data()[i * r_g + a] * cv;
                }
                data[i * d + j] = acc;
            }
        }
        Tensor::from_vec(vec![width, d], data)
    };
    let identity_code: Vec<f64> = {
        let mut c = vec![0.0; r_g * r_g];
        for i in 0..r_g {
            c[i * r_g + i] = 1.0;
        }
        c
    };
    let shared_map = low_rank_map(&identity_code)?;

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for id in 0..cfg.tasks {
        let (c1, c2) = pairs[id];
        let mut own = Vec::new();
        for c in [c1, c2] {
            for &v in VOWELS {
                for coda in ["".to_string(), c1.to_string(), c2.to_string()] {
                    own.push(format!("{c}{v}{coda}"));
                }
            }
        }
        let mut keywords = BTreeSet::new();
        while keywords.len() < cfg.keywords_per_task {
            let a = &own[rng.random_range(0..own.len())];
            let b = &own[rng.random_range(0..own.len())];
            keywords.insert(format!("{a}{b}"));
        }
        let keywords: Vec<String> = keywords.into_iter().collect();

        // Trace-free task code: task identity deviates from the shared
        // component without a systematic gain adapters could fake.
        let mut code = Tensor::randn(&[r_g, r_g], cfg.task_code_std, &mut rng)
            .data()
            .to_vec();
        let trace: f64 = (0..r_g).map(|i| code[i * r_g + i]).sum::<f64>() / r_g as f64;
        for i in 0..r_g {
            code[i * r_g + i] -= trace;
        }
        let gmap = low_rank_map(&code)?;
        let gbias: Vec<f64> = Tensor::randn(&[width], 0.05, &mut rng).data().to_vec();

        let gen_text = |rng: &mut ChaCha12Rng| -> String {
            let hard = rng.random::<f64>() < cfg.hard_fraction;
            let (kw_count, fillers) = if hard {
                (cfg.hard_keywords.min(cfg.keywords_per_task), cfg.hard_tail_fillers)
            } else {
                (
                    cfg.keywords_per_text,
                    rng.random_range(1..=cfg.max_fillers_per_text.max(1)),
                )
            };
            let mut chosen: Vec<&String> = keywords.choose_multiple(rng, kw_count).collect();
            chosen.shuffle(rng);
            let mut tokens: Vec<String> = chosen.into_iter().cloned().collect();
            for _ in 0..fillers {
                let filler = FILLERS[rng.random_range(0..FILLERS.len())].to_string();
                // Keywords stay in front of the visible window when they can.
                let floor = cfg.seq_len.min(tokens.len());
                let pos = rng.random_range(floor..=tokens.len());
                tokens.insert(pos, filler);
            }
            tokens.join(" ")
        };
        let train_texts: Vec<String> = (0..cfg.train_per_task).map(|_| gen_text(&mut rng)).collect();
        let test_texts: Vec<String> = (0..cfg.test_per_task).map(|_| gen_text(&mut rng)).collect();

        // Generic gibberish from the full alphabet: the adapter should
        // answer these with no correction at all.
        let negatives = ((cfg.train_per_task as f64) * cfg.negatives_fraction).round() as usize;
        let gen_negative = |rng: &mut ChaCha12Rng| -> String {
            let tokens: Vec<String> = (0..cfg.keywords_per_text)
                .map(|_| {
                    if rng.random::<f64>() < 0.2 {
                        FILLERS[rng.random_range(0..FILLERS.len())].to_string()
                    } else {
                        let mut word = String::new();
                        for _ in 0..2 {
                            let c = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
                            let v = VOWELS[rng.random_range(0..VOWELS.len())];
                            let coda = CONSONANTS[rng.random_range(0..CONSONANTS.len())];
                            word.push(c);
                            word.push(v);
                            word.push(coda);
                        }
                        word
                    }
                })
                .collect();
            tokens.join(" ")
        };
        let negative_texts: Vec<String> = (0..negatives).map(|_| gen_negative(&mut rng)).collect();

        tasks.push(TaskSpec {
            id,
            name: format!("task{id:02}"),
            keywords,
            gmap,
            gbias,
            regression: id < cfg.regression_tasks,
            train_texts,
            test_texts,
            negative_texts,
        });
    }
    Ok(Universe {
        cfg: cfg.clone(),
        shared_map,
        tasks,
    })
}

// ── Pipeline preparation ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PrepareConfig {
    pub lora: TrainConfig,
    pub router: RouterTrainConfig,
    pub contrastive: ContrastiveConfig,
    /// Router rank; defaults to the task-adapter rank.
    pub router_rank: usize,
    /// Seed the router from the mean of the whole uploaded pool's adapter
    /// parameters (parameters only; no unseen task data) before training.
    pub router_mean_init: bool,
    /// Fraction of tasks whose adapters/samples train the router and the
    /// retriever projection; the rest stay unseen.
    pub train_fraction: f64,
    /// Samples per adapter used for its retrieval embedding.
    pub embed_samples: usize,
    pub train_retriever: bool,
    pub train_router: bool,
    /// Training-side seed (the universe carries its own).
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            lora: TrainConfig {
                steps: 2500,
                lr: 0.1,
                batch: 8,
                head_weight: 3.0,
                // Concentrate the learned correction in the final layer,
                // where per-layer routing reads it. Mirrors the observation
                // that higher layers carry the routing signal.
                layer_lr: vec![0.0, 0.0, 1.0],
            },
            router: RouterTrainConfig {
                steps: 300,
                lr: 0.05,
                batch: 16,
                dropout_p: 0.5,
                grad_check: true,
            },
            contrastive: ContrastiveConfig::default(),
            router_rank: 6,
            router_mean_init: true,
            train_fraction: 0.4,
            embed_samples: 20,
            train_retriever: false,
            train_router: true,
            seed: 1,
        }
    }
}

/// A fully assembled pipeline: trained per-task adapters registered in a
/// pool, and a router trained on the designated task subset.
pub struct Prepared {
    pub registry: Registry,
    pub router: RouterLora,
    pub train_task_ids: Vec<usize>,
}

pub fn prepare(model: Arc<BaseModel>, universe: &Universe, cfg: &PrepareConfig) -> Result<Prepared> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let seq_len = universe.cfg.seq_len;
    let mut registry = Registry::new(Arc::clone(&model), EmbeddingProvider::new(), seq_len);

    let mut adapters = Vec::with_capacity(universe.tasks.len());
    for task in &universe.tasks {
        let data = task.train_samples(&model, &universe.shared_map, seq_len)?;
        let adapter = train_task_lora(
            &model,
            &task.name,
            &task.name,
            &data,
            6,
            12.0,
            &cfg.lora,
            &mut rng,
        )?;
        adapters.push(adapter);
    }

    // The train subset covers train_fraction of the tasks, chosen by seed.
    let subset = ((universe.tasks.len() as f64 * cfg.train_fraction).floor() as usize)
        .clamp(2, universe.tasks.len());
    let mut ids: Vec<usize> = (0..universe.tasks.len()).collect();
    ids.shuffle(&mut rng);
    let mut train_task_ids: Vec<usize> = ids[..subset].to_vec();
    train_task_ids.sort_unstable();

    // Embedding samples per adapter, drawn from its training texts.
    let mut embed_texts = Vec::with_capacity(universe.tasks.len());
    for task in &universe.tasks {
        let m = cfg.embed_samples.min(task.train_texts.len());
        let chosen: Vec<String> = task
            .train_texts
            .choose_multiple(&mut rng, m)
            .cloned()
            .collect();
        embed_texts.push(chosen);
    }

    if cfg.train_retriever {
        let tasks: Vec<(String, Vec<String>)> = train_task_ids
            .iter()
            .map(|&id| (universe.tasks[id].name.clone(), embed_texts[id].clone()))
            .collect();
        let mut provider = EmbeddingProvider::new();
        train_retriever(&mut provider, &tasks, &cfg.contrastive, &mut rng)?;
        registry.set_provider(provider)?;
    }

    for (task, adapter) in universe.tasks.iter().zip(adapters) {
        registry.register(adapter, embed_texts[task.id].clone())?;
    }

    let init_router = |rng: &mut ChaCha12Rng| -> Result<RouterLora> {
        if cfg.router_mean_init {
            let all: Vec<Arc<LoraAdapter>> = universe
                .tasks
                .iter()
                .map(|t| registry.adapter(&t.name).unwrap())
                .collect();
            let refs: Vec<&LoraAdapter> = all.iter().map(|a| a.as_ref()).collect();
            RouterLora::mean_of_pool(&model, &refs, 0.0, rng)
        } else {
            RouterLora::init_for_model(&model, cfg.router_rank, rng)
        }
    };
    let router = if cfg.train_router {
        let train_adapters: Vec<Arc<LoraAdapter>> = train_task_ids
            .iter()
            .map(|&id| registry.adapter(&universe.tasks[id].name).unwrap())
            .collect();
        let refs: Vec<&LoraAdapter> = train_adapters.iter().map(|a| a.as_ref()).collect();
        let mut data = Vec::new();
        for &id in &train_task_ids {
            data.extend(universe.tasks[id].train_samples(&model, &universe.shared_map, seq_len)?);
        }
        let candidate = init_router(&mut rng)?;
        let (trained, _) = train_router(&model, candidate, &refs, &data, &cfg.router, &mut rng)?;
        trained
    } else {
        init_router(&mut rng)?
    };

    Ok(Prepared {
        registry,
        router,
        train_task_ids,
    })
}

// ── Retrieval accuracy ──────────────────────────────────────────────────

/// Fraction of test samples whose own-task adapter lands in the top-k.
/// `subset` restricts to the given task ids (e.g. held-out tasks).
pub fn retrieval_accuracy(
    registry: &Registry,
    universe: &Universe,
    k: usize,
    subset: Option<&[usize]>,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for task in &universe.tasks {
        if let Some(ids) = subset {
            if !ids.contains(&task.id) {
                continue;
            }
        }
        for text in &task.test_texts {
            let got = registry.retrieve(text, k, None)?;
            if got.iter().any(|(name, _)| *name == task.name) {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config("retrieval accuracy over an empty subset".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Top-k accuracy rows for each requested k.
pub struct RetrievalTable {
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
}

impl RetrievalTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,top_k_accuracy\n");
        for (k, acc) in self.ks.iter().zip(&self.accuracy) {
            out.push_str(&format!("{k},{acc}\n"));
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut out = String::from("  k   top-k accuracy\n");
        for (k, acc) in self.ks.iter().zip(&self.accuracy) {
            out.push_str(&format!("{k:>3}   {acc:.4}\n"));
        }
        out
    }
}

pub fn retrieval_table(
    registry: &Registry,
    universe: &Universe,
    ks: &[usize],
) -> Result<RetrievalTable> {
    let accuracy = ks
        .iter()
        .map(|&k| retrieval_accuracy(registry, universe, k, None))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalTable {
        ks: ks.to_vec(),
        accuracy,
    })
}

// ── Mixed-task evaluation ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Every sample may retrieve any adapter, including its own task's.
    Iid,
    /// The sample's own-task adapter is masked at retrieval time.
    Ood,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Iid => "iid",
            EvalMode::Ood => "ood",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalColumn {
    /// The sample's own adapter applied directly (upper-bound reference).
    PerfectSelection,
    Strategy(CompositionStrategy),
}

impl fmt::Display for EvalColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalColumn::PerfectSelection => f.write_str("perfect-selection"),
            EvalColumn::Strategy(s) => write!(f, "{s}"),
        }
    }
}

pub const DEFAULT_COLUMNS: [EvalColumn; 5] = [
    EvalColumn::PerfectSelection,
    EvalColumn::Strategy(CompositionStrategy::Selection),
    EvalColumn::Strategy(CompositionStrategy::Mixture),
    EvalColumn::Strategy(CompositionStrategy::Fusion),
    EvalColumn::Strategy(CompositionStrategy::Damole),
];

/// Per-task metric table: exact-match accuracy for classification tasks,
/// MSE for regression tasks. Overall is the unweighted mean over tasks.
pub struct EvalReport {
    pub mode: EvalMode,
    pub columns: Vec<String>,
    pub tasks: Vec<String>,
    /// `cells[task][column]`.
    pub cells: Vec<Vec<f64>>,
    pub overall: Vec<f64>,
    /// True when no OOD sample ever retrieved its masked adapter.
    pub provenance_clean: bool,
}

impl EvalReport {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("task,{}\n", self.columns.join(","));
        for (task, row) in self.tasks.iter().zip(&self.cells) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{task},{}\n", cells.join(",")));
        }
        let overall: Vec<String> = self.overall.iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("overall,{}\n", overall.join(",")));
        out
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("mixed-task evaluation ({})\n", self.mode);
        out.push_str(&format!("{:<10}", "task"));
        for c in &self.columns {
            out.push_str(&format!("{c:>19}"));
        }
        out.push('\n');
        for (task, row) in self.tasks.iter().zip(&self.cells) {
            out.push_str(&format!("{task:<10}"));
            for v in row {
                out.push_str(&format!("{v:>19.4}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<10}", "overall"));
        for v in &self.overall {
            out.push_str(&format!("{v:>19.4}"));
        }
        out.push('\n');
        out
    }
}

pub fn mixed_task_eval(
    prepared: &Prepared,
    universe: &Universe,
    columns: &[EvalColumn],
    mode: EvalMode,
    k: usize,
) -> Result<EvalReport> {
    let model = prepared.registry.model();
    let seq_len = universe.cfg.seq_len;
    let mut cells = vec![vec![0.0; columns.len()]; universe.tasks.len()];
    let mut provenance_clean = true;

    for (ti, task) in universe.tasks.iter().enumerate() {
        let mask: Option<BTreeSet<String>> = match mode {
            EvalMode::Iid => None,
            EvalMode::Ood => Some([task.name.clone()].into_iter().collect()),
        };
        let own = prepared
            .registry
            .adapter(&task.name)
            .ok_or_else(|| Error::NotFound(format!("adapter {} not registered", task.name)))?;

        for (ci, column) in columns.iter().enumerate() {
            let mut metric_acc = 0.0;
            for text in &task.test_texts {
                let (logits, retrieved) = match column {
                    EvalColumn::PerfectSelection => {
                        let x = prepared.registry.encode_prompt(text);
                        let out = forward(
                            model,
                            CompositionStrategy::Selection,
                            &[own.as_ref()],
                            None,
                            &x,
                        )?;
                        (model.pooled_logits(&out)?.data().to_vec(), Vec::new())
                    }
                    EvalColumn::Strategy(strategy) => {
                        let outcome = prepared.registry.serve(
                            Some(&prepared.router),
                            text,
                            k,
                            *strategy,
                            mask.as_ref(),
                        )?;
                        (outcome.logits, outcome.retrieved)
                    }
                };
                if mode == EvalMode::Ood
                    && retrieved.iter().any(|(name, _)| *name == task.name)
                {
                    provenance_clean = false;
                }
                if task.regression {
                    let z = task.target_for(model, &universe.shared_map, text, seq_len)?;
                    let zc = &z[..logits.len()];
                    let mse: f64 = logits
                        .iter()
                        .zip(zc)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        / zc.len() as f64;
                    metric_acc += mse;
                } else {
                    let want = task.label_for(model, &universe.shared_map, text, seq_len)?;
                    let got = logits
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    if got == want {
                        metric_acc += 1.0;
                    }
                }
            }
            cells[ti][ci] = metric_acc / task.test_texts.len() as f64;
        }
    }

    let overall: Vec<f64> = (0..columns.len())
        .map(|ci| cells.iter().map(|row| row[ci]).sum::<f64>() / universe.tasks.len() as f64)
        .collect();
    Ok(EvalReport {
        mode,
        columns: columns.iter().map(|c| c.to_string()).collect(),
        tasks: universe.tasks.iter().map(|t| t.name.clone()).collect(),
        cells,
        overall,
        provenance_clean,
    })
}

// ── Retrieved-count sweep ───────────────────────────────────────────────

pub struct SweepReport {
    pub ns: Vec<usize>,
    pub columns: Vec<String>,
    /// `curves[column][n_index]` = overall metric.
    pub curves: Vec<Vec<f64>>,
    pub mode: EvalMode,
}

impl SweepReport {
    pub fn curve(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|i| self.curves[i].as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("n,{}\n", self.columns.join(","));
        for (i, n) in self.ns.iter().enumerate() {
            let row: Vec<String> = self.curves.iter().map(|c| c[i].to_string()).collect();
            out.push_str(&format!("{n},{}\n", row.join(",")));
        }
        out
    }

    /// Minimal polyline chart for eyeballing the curves.
    pub fn to_svg(&self) -> String {
        svg_lines(
            &self.ns.iter().map(|n| *n as f64).collect::<Vec<_>>(),
            &self.columns,
            &self.curves,
            "retrieved adapters",
        )
    }
}

/// Overall metric as the retrieved count n grows, per strategy.
pub fn sweep_num_retrieved(
    prepared: &Prepared,
    universe: &Universe,
    ns: &[usize],
    mode: EvalMode,
) -> Result<SweepReport> {
    let columns = [
        EvalColumn::Strategy(CompositionStrategy::Selection),
        EvalColumn::Strategy(CompositionStrategy::Mixture),
        EvalColumn::Strategy(CompositionStrategy::Fusion),
        EvalColumn::Strategy(CompositionStrategy::Damole),
    ];
    let mut curves = vec![Vec::with_capacity(ns.len()); columns.len()];
    for &n in ns {
        let report = mixed_task_eval(prepared, universe, &columns, mode, n)?;
        for (ci, curve) in curves.iter_mut().enumerate() {
            curve.push(report.overall[ci]);
        }
    }
    Ok(SweepReport {
        ns: ns.to_vec(),
        columns: columns.iter().map(|c| c.to_string()).collect(),
        curves,
        mode,
    })
}

// ── Throughput benchmark ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// One shared adapter for the whole stream: the ceiling reference.
    SingleAdapter,
    Mixture,
    Fusion,
    Damole,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::SingleAdapter => "single-adapter",
            BenchMode::Mixture => "mixture",
            BenchMode::Fusion => "fusion",
            BenchMode::Damole => "damole",
        })
    }
}

pub const DEFAULT_BENCH_MODES: [BenchMode; 4] = [
    BenchMode::SingleAdapter,
    BenchMode::Mixture,
    BenchMode::Fusion,
    BenchMode::Damole,
];

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub prompts_per_run: usize,
    /// Timed repetitions per cell; the median is reported.
    pub repeats: usize,
    pub warmup: usize,
    pub k: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prompts_per_run: 192,
            repeats: 5,
            warmup: 1,
            k: 3,
        }
    }
}

pub struct BenchReport {
    pub batch_sizes: Vec<usize>,
    pub modes: Vec<String>,
    /// `tokens_per_sec[mode][batch_size_index]`.
    pub tokens_per_sec: Vec<Vec<f64>>,
}

impl BenchReport {
    pub fn row(&self, mode: &str) -> Option<&[f64]> {
        self.modes
            .iter()
            .position(|m| m == mode)
            .map(|i| self.tokens_per_sec[i].as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("mode,{}\n", join_usizes(&self.batch_sizes));
        for (mode, row) in self.modes.iter().zip(&self.tokens_per_sec) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.1}")).collect();
            out.push_str(&format!("{mode},{}\n", cells.join(",")));
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut out = String::from("throughput (first-token prompts/sec, median of repeats)\n");
        out.push_str(&format!("{:<16}", "mode"));
        for b in &self.batch_sizes {
            out.push_str(&format!("{b:>12}"));
        }
        out.push('\n');
        for (mode, row) in self.modes.iter().zip(&self.tokens_per_sec) {
            out.push_str(&format!("{mode:<16}"));
            for v in row {
                out.push_str(&format!("{v:>12.1}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_svg(&self) -> String {
        svg_lines(
            &self.batch_sizes.iter().map(|b| *b as f64).collect::<Vec<_>>(),
            &self.modes,
            &self.tokens_per_sec,
            "batch size",
        )
    }
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// First-token throughput per mode per batch size. Retrieval runs once up
/// front (identical across modes); plan building, parameter gathering and
/// the forward pass are inside the timed region. Single-threaded.
pub fn throughput_bench(
    prepared: &Prepared,
    universe: &Universe,
    batch_sizes: &[usize],
    modes: &[BenchMode],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let model = prepared.registry.model();
    let seq_len = universe.cfg.seq_len;
    let d = model.input_dim();

    // Fixed prompt stream cycled from the test texts.
    let mut prompts = Vec::with_capacity(cfg.prompts_per_run);
    let mut ti = 0usize;
    let mut si = 0usize;
    while prompts.len() < cfg.prompts_per_run {
        prompts.push(universe.tasks[ti].test_texts[si % universe.tasks[ti].test_texts.len()].clone());
        ti = (ti + 1) % universe.tasks.len();
        if ti == 0 {
            si += 1;
        }
    }
    // Retrieval happens once, outside the timed region.
    let lists: Vec<Vec<String>> = prompts
        .iter()
        .map(|p| {
            Ok(prepared
                .registry
                .retrieve(p, cfg.k, None)?
                .into_iter()
                .map(|(n, _)| n)
                .collect())
        })
        .collect::<Result<_>>()?;
    let encoded = encode_batch(&prompts, seq_len, d);
    let single = prepared
        .registry
        .adapter(&universe.tasks[0].name)
        .ok_or_else(|| Error::NotFound("bench adapter".into()))?;

    let run_once = |mode: BenchMode, batch: usize| -> Result<f64> {
        let start = Instant::now();
        let mut served = 0usize;
        let mut offset = 0usize;
        while offset < prompts.len() {
            let b = batch.min(prompts.len() - offset);
            let x = Tensor::from_vec(
                vec![b, seq_len, d],
                encoded.data()[offset * seq_len * d..(offset + b) * seq_len * d].to_vec(),
            )?;
            let chunk = &lists[offset..offset + b];
            match mode {
                BenchMode::SingleAdapter => {
                    forward(
                        model,
                        CompositionStrategy::Selection,
                        &[single.as_ref()],
                        None,
                        &x,
                    )?;
                }
                BenchMode::Mixture => {
                    let plan = build_plan(chunk, cfg.k, |n| prepared.registry.adapter(n))?;
                    batched_vanilla_forward(model, &plan, &x, CompositionStrategy::Mixture)?;
                }
                BenchMode::Fusion => {
                    let mut fused_pool = std::collections::BTreeMap::new();
                    let mut fused_lists = Vec::with_capacity(b);
                    for list in chunk {
                        if list.is_empty() {
                            fused_lists.push(Vec::new());
                            continue;
                        }
                        let adapters: Vec<Arc<LoraAdapter>> = list
                            .iter()
                            .map(|n| prepared.registry.adapter(n).expect("retrieved"))
                            .collect();
                        let refs: Vec<&LoraAdapter> =
                            adapters.iter().map(|a| a.as_ref()).collect();
                        let fused = compose_fusion(&refs)?;
                        let name = fused.name().to_string();
                        fused_pool.entry(name.clone()).or_insert_with(|| Arc::new(fused));
                        fused_lists.push(vec![name]);
                    }
                    let plan = build_plan(&fused_lists, 1, |n| fused_pool.get(n).cloned())?;
                    batched_vanilla_forward(model, &plan, &x, CompositionStrategy::Selection)?;
                }
                BenchMode::Damole => {
                    let plan = build_plan(chunk, cfg.k, |n| prepared.registry.adapter(n))?;
                    batched_forward(model, &prepared.router, &plan, &x)?;
                }
            }
            served += b;
            offset += b;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        Ok(served as f64 / secs)
    };

    let mut tokens_per_sec = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut row = Vec::with_capacity(batch_sizes.len());
        for &b in batch_sizes {
            for _ in 0..cfg.warmup {
                run_once(mode, b)?;
            }
            let mut samples: Vec<f64> = (0..cfg.repeats)
                .map(|_| run_once(mode, b))
                .collect::<Result<_>>()?;
            samples.sort_by(f64::total_cmp);
            row.push(samples[samples.len() / 2]);
        }
        tokens_per_sec.push(row);
    }
    Ok(BenchReport {
        batch_sizes: batch_sizes.to_vec(),
        modes: modes.iter().map(|m| m.to_string()).collect(),
        tokens_per_sec,
    })
}

// ── Routing heatmap ─────────────────────────────────────────────────────

pub struct HeatmapReport {
    /// Rows of (layer, task, adapter, mean weight over that task's samples).
    pub rows: Vec<(usize, String, String, f64)>,
    /// Fraction of samples whose final-layer argmax weight lands on the
    /// own-task adapter.
    pub own_top_rate: f64,
}

impl HeatmapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer_id,task,adapter,mean_weight\n");
        for (layer, task, adapter, w) in &self.rows {
            out.push_str(&format!("{layer},{task},{adapter},{w}\n"));
        }
        out
    }

    pub fn mean_weight(&self, layer: usize, task: &str, adapter: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(l, t, a, _)| *l == layer && t == task && a == adapter)
            .map(|(_, _, _, w)| *w)
    }
}

/// Mean routing weight per (layer, task, adapter) over the IID test set,
/// plus the final-layer own-adapter argmax rate.
pub fn routing_heatmap(prepared: &Prepared, universe: &Universe, k: usize) -> Result<HeatmapReport> {
    let names: Vec<String> = universe.tasks.iter().map(|t| t.name.clone()).collect();
    let layer_count = prepared.registry.model().layer_count();
    // acc[layer][task][adapter] = (sum, count over task samples).
    let mut acc = vec![vec![vec![0.0; names.len()]; universe.tasks.len()]; layer_count];
    let mut own_top = 0usize;
    let mut total = 0usize;

    for (ti, task) in universe.tasks.iter().enumerate() {
        for text in &task.test_texts {
            let outcome = prepared.registry.serve(
                Some(&prepared.router),
                text,
                k,
                CompositionStrategy::Damole,
                None,
            )?;
            let Some(trace) = outcome.trace else {
                continue;
            };
            for (layer, _) in &trace.layers {
                let weights = trace.mean_weights(*layer).unwrap_or_default();
                for (ai, adapter_name) in trace.adapter_names.iter().enumerate() {
                    if let Some(global) = names.iter().position(|n| n == adapter_name) {
                        acc[*layer][ti][global] += weights[ai];
                    }
                }
            }
            let argmax = trace.final_layer_sample_argmax();
            if let Some(&arg) = argmax.first() {
                if trace.adapter_names.get(arg).map(String::as_str) == Some(task.name.as_str()) {
                    own_top += 1;
                }
            }
            total += 1;
        }
    }

    let mut rows = Vec::new();
    for (layer, per_task) in acc.iter().enumerate() {
        for (ti, per_adapter) in per_task.iter().enumerate() {
            let n = universe.tasks[ti].test_texts.len() as f64;
            for (ai, sum) in per_adapter.iter().enumerate() {
                rows.push((layer, universe.tasks[ti].name.clone(), names[ai].clone(), sum / n));
            }
        }
    }
    Ok(HeatmapReport {
        rows,
        own_top_rate: if total == 0 { 0.0 } else { own_top as f64 / total as f64 },
    })
}

// ── Tiny SVG helper ─────────────────────────────────────────────────────

const SVG_COLORS: &[&str] = &["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

fn svg_lines(xs: &[f64], labels: &[String], curves: &[Vec<f64>], x_label: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let x_min = xs.first().copied().unwrap_or(0.0);
    let x_max = xs.last().copied().unwrap_or(1.0).max(x_min + 1e-9);
    let y_max = curves
        .iter()
        .flatten()
        .cloned()
        .fold(f64::MIN, f64::max)
        .max(1e-9);
    let sx = |x: f64| pad + (x - x_min) / (x_max - x_min) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y / y_max) * (h - 2.0 * pad);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
        w / 2.0 - 30.0,
        h - 8.0,
        x_label
    ));
    for (ci, curve) in curves.iter().enumerate() {
        let color = SVG_COLORS[ci % SVG_COLORS.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(curve)
            .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            w - pad + 4.0 - 90.0,
            pad + 16.0 * ci as f64,
            labels[ci]
        ));
    }
    out.push_str("</svg>\n");
    out
}
