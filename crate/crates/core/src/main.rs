//! Command-line front end: registry management, serving, training, and the
//! evaluation/benchmark harness.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use loramix::error::{Error, Result};
use loramix::eval::{
    gen_universe, mixed_task_eval, prepare, retrieval_table, routing_heatmap,
    sweep_num_retrieved, throughput_bench, BenchConfig, EvalMode, PrepareConfig, UniverseConfig,
    DEFAULT_BENCH_MODES, DEFAULT_COLUMNS,
};
use loramix::http::{serve_http, ServerConfig};
use loramix::lora::{BaseModel, CompositionStrategy, LoraAdapter, TrainSample};
use loramix::registry::{load_provider, parse_raml, save_provider, Registry, ServeOutcome};
use loramix::retriever::{train_retriever, ContrastiveConfig, EmbeddingProvider};
use loramix::router::{train_router, RouterLora, RouterTrainConfig};
use loramix::tensor::Tensor;

#[derive(Parser)]
#[command(name = "loramix", version, about = "Desk-scale multi-LoRA serving engine")]
struct Cli {
    /// Registry directory (adapter pool on disk).
    #[arg(long, global = true)]
    registry: Option<PathBuf>,

    /// Seed for anything stochastic.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Adapters retrieved per query.
    #[arg(long, global = true, default_value_t = 3)]
    k: usize,

    /// Composition strategy: selection | mixture | fusion | damole.
    #[arg(long, global = true, default_value = "mixture")]
    strategy: String,

    /// Parameter precision: f64 (native) or f32 (round adapters on load).
    #[arg(long, global = true, default_value = "f64")]
    precision: String,

    /// Serve the registry over HTTP on this address instead of running a
    /// subcommand, e.g. 127.0.0.1:8080.
    #[arg(long)]
    serve: Option<String>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Add an adapter file (.raml) to the registry.
    Register { file: PathBuf },
    /// Remove an adapter by name.
    Remove { name: String },
    /// List registered adapters.
    List,
    /// Serve one prompt and print the response.
    Query {
        prompt: Vec<String>,
        /// Adapter names to mask at retrieval time.
        #[arg(long, value_delimiter = ',')]
        mask: Vec<String>,
        /// Print per-layer routing weights (router strategies).
        #[arg(long)]
        trace: bool,
    },
    /// Serve a batch of prompts (one per line from --file, plus arguments).
    Batch {
        prompts: Vec<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Contrastively train the retrieval projection on a fraction of the
    /// registry's task tags.
    TrainRetriever {
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.4)]
        fraction: f64,
    },
    /// Train the router on labeled data (JSONL: {"text":..., "target":[..]})
    /// over a fraction of the registry's adapters.
    TrainRouter {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        dropout: f64,
        #[arg(long, default_value_t = 0.4)]
        fraction: f64,
    },
    /// Run the synthetic mixed-task evaluation.
    Eval {
        #[arg(long, default_value_t = 8)]
        tasks: usize,
        /// iid | ood | both
        #[arg(long, default_value = "both")]
        mode: String,
        /// Also sweep the retrieved-adapter count 1..=8.
        #[arg(long)]
        sweep: bool,
        /// Directory for CSV/SVG reports.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export the trained pool as a registry directory.
        #[arg(long)]
        save_registry: Option<PathBuf>,
    },
    /// Run the throughput benchmark.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16, 32])]
        batch_sizes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    dims: Vec<usize>,
    classes: Option<usize>,
    seed: u64,
    seq_len: usize,
}

fn model_path(dir: &Path) -> PathBuf {
    dir.join("model.json")
}

fn load_or_init_model(dir: &Path, seed: u64) -> Result<(Arc<BaseModel>, usize)> {
    let path = model_path(dir);
    let doc: ModelDoc = if path.exists() {
        serde_json::from_str(&fs::read_to_string(&path)?)?
    } else {
        let doc = ModelDoc {
            dims: vec![32, 64, 64, 32],
            classes: Some(4),
            seed,
            seq_len: UniverseConfig::default().seq_len,
        };
        fs::create_dir_all(dir)?;
        fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
        doc
    };
    Ok((
        Arc::new(BaseModel::new(&doc.dims, doc.classes, doc.seed)?),
        doc.seq_len,
    ))
}

fn open_registry(cli: &Cli) -> Result<(Registry, Option<RouterLora>)> {
    let dir = cli
        .registry
        .as_ref()
        .ok_or_else(|| Error::Config("--registry <dir> is required for this command".into()))?;
    let (model, seq_len) = load_or_init_model(dir, cli.seed)?;
    let provider = match load_provider(&dir.join("provider.json")) {
        Ok(p) => p,
        Err(_) => EmbeddingProvider::new(),
    };
    let mut registry = if dir.join("index.json").exists() {
        Registry::load_dir(model, provider, dir, seq_len)?
    } else {
        fs::create_dir_all(dir)?;
        Registry::new(model, provider, seq_len)
    };
    if cli.precision == "f32" {
        registry.round_params_to_f32()?;
    } else if cli.precision != "f64" {
        return Err(Error::Config(format!("unknown precision '{}'", cli.precision)));
    }
    let router = load_router(&dir.join("router.json")).ok();
    Ok((registry, router))
}

#[derive(Serialize, Deserialize)]
struct RouterDoc {
    rank: usize,
    layers: Vec<RouterLayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct RouterLayerDoc {
    id: usize,
    d_in: usize,
    d_out: usize,
    a: String,
    b: String,
}

fn save_router(router: &RouterLora, path: &Path) -> Result<()> {
    use base64::engine::general_purpose::STANDARD as B64;
    use base64::Engine;
    let enc = |t: &Tensor| {
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        B64.encode(bytes)
    };
    let doc = RouterDoc {
        rank: router.rank(),
        layers: router
            .layers()
            .map(|(&id, d)| RouterLayerDoc {
                id,
                d_in: d.a.shape()[1],
                d_out: d.b.shape()[0],
                a: enc(&d.a),
                b: enc(&d.b),
            })
            .collect(),
    };
    fs::write(path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn load_router(path: &Path) -> Result<RouterLora> {
    use base64::engine::general_purpose::STANDARD as B64;
    use base64::Engine;
    let doc: RouterDoc = serde_json::from_str(&fs::read_to_string(path)?)?;
    let dec = |s: &str, shape: Vec<usize>| -> Result<Tensor> {
        let bytes = B64
            .decode(s)
            .map_err(|e| Error::Format(format!("router blob: {e}")))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
    };
    let mut layers = std::collections::BTreeMap::new();
    for l in doc.layers {
        layers.insert(
            l.id,
            loramix::lora::LoraDelta {
                a: dec(&l.a, vec![doc.rank, l.d_in])?,
                b: dec(&l.b, vec![l.d_out, doc.rank])?,
            },
        );
    }
    RouterLora::new(doc.rank, layers)
}

fn print_outcome(outcome: &ServeOutcome, trace: bool) {
    let retrieved: Vec<String> = outcome
        .retrieved
        .iter()
        .map(|(n, s)| format!("{n} ({s:.3})"))
        .collect();
    println!(
        "prompt: {}\n  label: {}  logits: {:?}\n  retrieved: [{}]{}",
        outcome.prompt,
        outcome.label.map_or("-".into(), |l| l.to_string()),
        outcome
            .logits
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>(),
        retrieved.join(", "),
        if outcome.empty_pool { "  [empty pool: base model answer]" } else { "" }
    );
    if trace {
        if let Some(t) = &outcome.trace {
            for (layer, _) in &t.layers {
                if let Some(mean) = t.mean_weights(*layer) {
                    let pairs: Vec<String> = t
                        .adapter_names
                        .iter()
                        .zip(&mean)
                        .map(|(n, w)| format!("{n}={w:.3}"))
                        .collect();
                    println!("  layer {layer}: {}", pairs.join(" "));
                }
            }
        }
    }
}

fn write_report(out: &Option<PathBuf>, name: &str, content: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), content)?;
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let strategy: CompositionStrategy = cli.strategy.parse()?;

    if let Some(addr) = &cli.serve {
        let (registry, router) = open_registry(&cli)?;
        let handle = serve_http(
            Arc::new(RwLock::new(registry)),
            router.map(Arc::new),
            addr,
            ServerConfig {
                default_k: cli.k,
                default_strategy: strategy,
            },
        )?;
        println!("serving on http://{}", handle.addr());
        println!("endpoints: GET/POST /adapters, DELETE /adapters/{{name}}, POST /query, POST /batch");
        loop {
            std::thread::sleep(std::time::Duration::from_secs(3600));
        }
    }

    match cli.command.as_ref().ok_or_else(|| {
        Error::Config("a subcommand (or --serve) is required; try --help".into())
    })? {
        Command::Register { file } => {
            let (mut registry, _) = open_registry(&cli)?;
            let (adapter, samples, _) = parse_raml(&fs::read(file)?)?;
            let name = adapter.name().to_string();
            registry.register(adapter, samples)?;
            registry.save_dir(cli.registry.as_ref().unwrap())?;
            println!("registered '{name}' ({} adapters in pool)", registry.len());
        }
        Command::Remove { name } => {
            let (mut registry, _) = open_registry(&cli)?;
            registry.remove(name)?;
            let dir = cli.registry.as_ref().unwrap();
            let file = dir.join(format!("{name}.raml"));
            if file.exists() {
                fs::remove_file(file)?;
            }
            registry.save_dir(dir)?;
            println!("removed '{name}' ({} adapters left)", registry.len());
        }
        Command::List => {
            let (registry, _) = open_registry(&cli)?;
            if registry.is_empty() {
                println!("(empty pool)");
            }
            for entry in registry.entries() {
                println!(
                    "{:<16} tag={:<12} rank={} alpha={} m={} uploaded_at={}",
                    entry.adapter.name(),
                    entry.task_tag,
                    entry.adapter.rank(),
                    entry.adapter.alpha(),
                    entry.samples.len(),
                    entry.uploaded_at
                );
            }
        }
        Command::Query { prompt, mask, trace } => {
            let (registry, router) = open_registry(&cli)?;
            if prompt.is_empty() {
                return Err(Error::Config("query wants a prompt".into()));
            }
            let mask_set: Option<BTreeSet<String>> = if mask.is_empty() {
                None
            } else {
                Some(mask.iter().cloned().collect())
            };
            let outcome = registry.serve(
                router.as_ref(),
                &prompt.join(" "),
                cli.k,
                strategy,
                mask_set.as_ref(),
            )?;
            print_outcome(&outcome, *trace);
        }
        Command::Batch { prompts, file } => {
            let (registry, router) = open_registry(&cli)?;
            let mut all = prompts.clone();
            if let Some(path) = file {
                all.extend(
                    fs::read_to_string(path)?
                        .lines()
                        .filter(|l| !l.trim().is_empty())
                        .map(str::to_string),
                );
            }
            if all.is_empty() {
                return Err(Error::Config("batch wants prompts".into()));
            }
            for outcome in registry.serve_batch(router.as_ref(), &all, cli.k, strategy)? {
                print_outcome(&outcome, false);
            }
        }
        Command::TrainRetriever { steps, fraction } => {
            let (mut registry, _) = open_registry(&cli)?;
            let by_tag: Vec<(String, Vec<String>)> = registry
                .entries()
                .map(|e| (e.task_tag.clone(), e.samples.clone()))
                .collect();
            let take = ((by_tag.len() as f64 * fraction).floor() as usize).clamp(2, by_tag.len().max(2));
            let mut rng = ChaCha12Rng::seed_from_u64(cli.seed);
            let subset: Vec<(String, Vec<String>)> = by_tag.into_iter().take(take).collect();
            let cfg = ContrastiveConfig {
                steps: *steps,
                ..Default::default()
            };
            let mut provider = registry.provider().clone();
            let report = train_retriever(&mut provider, &subset, &cfg, &mut rng)?;
            registry.set_provider(provider)?;
            let dir = cli.registry.as_ref().unwrap();
            save_provider(registry.provider(), &dir.join("provider.json"))?;
            registry.save_dir(dir)?;
            println!(
                "trained on {take} tags: loss {:.4} -> {:.4}, subset top-1 {:.3} -> {:.3}",
                report.initial_loss,
                report.final_loss,
                report.train_top1_before,
                report.train_top1_after
            );
        }
        Command::TrainRouter { data, steps, dropout, fraction } => {
            let (registry, _) = open_registry(&cli)?;
            #[derive(Deserialize)]
            struct Labeled {
                text: String,
                target: Vec<f64>,
            }
            let mut samples = Vec::new();
            for line in fs::read_to_string(data)?.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let l: Labeled = serde_json::from_str(line)?;
                samples.push(TrainSample {
                    input: loramix::encode::encode_text(
                        &l.text,
                        registry.seq_len(),
                        registry.model().input_dim(),
                    ),
                    target: l.target,
                });
            }
            let names = registry.names();
            if names.is_empty() {
                return Err(Error::Config("cannot train a router over an empty pool".into()));
            }
            let take = ((names.len() as f64 * fraction).floor() as usize).clamp(1, names.len());
            let train_adapters: Vec<Arc<LoraAdapter>> = names[..take]
                .iter()
                .map(|n| registry.adapter(n).unwrap())
                .collect();
            let refs: Vec<&LoraAdapter> = train_adapters.iter().map(|a| a.as_ref()).collect();
            let all: Vec<Arc<LoraAdapter>> =
                names.iter().map(|n| registry.adapter(n).unwrap()).collect();
            let all_refs: Vec<&LoraAdapter> = all.iter().map(|a| a.as_ref()).collect();
            let mut rng = ChaCha12Rng::seed_from_u64(cli.seed);
            let router = RouterLora::mean_of_pool(registry.model(), &all_refs, 0.0, &mut rng)?;
            let cfg = RouterTrainConfig {
                steps: *steps,
                dropout_p: *dropout,
                ..Default::default()
            };
            let (router, curve) =
                train_router(registry.model(), router, &refs, &samples, &cfg, &mut rng)?;
            save_router(&router, &cli.registry.as_ref().unwrap().join("router.json"))?;
            println!(
                "router trained on {take}/{} adapters; loss {:.4} -> {:.4}",
                names.len(),
                curve.first().copied().unwrap_or(0.0),
                curve.last().copied().unwrap_or(0.0)
            );
        }
        Command::Eval { tasks, mode, sweep, out, save_registry } => {
            let model = Arc::new(BaseModel::toy(cli.seed));
            let ucfg = UniverseConfig {
                tasks: *tasks,
                seed: cli.seed,
                ..Default::default()
            };
            let universe = gen_universe(&model, &ucfg)?;
            println!("training {tasks} task adapters + router (seed {})...", cli.seed);
            let pcfg = PrepareConfig {
                seed: cli.seed ^ 0x9e37_79b9,
                train_retriever: true,
                ..Default::default()
            };
            let prepared = prepare(Arc::clone(&model), &universe, &pcfg)?;

            let table = retrieval_table(&prepared.registry, &universe, &[1, 3, 5, 8])?;
            println!("\nretrieval accuracy:\n{}", table.render_text());
            write_report(out, "retrieval.csv", &table.to_csv())?;

            let modes: Vec<EvalMode> = match mode.as_str() {
                "iid" => vec![EvalMode::Iid],
                "ood" => vec![EvalMode::Ood],
                "both" => vec![EvalMode::Iid, EvalMode::Ood],
                other => return Err(Error::Config(format!("unknown mode '{other}'"))),
            };
            for m in modes {
                let report = mixed_task_eval(&prepared, &universe, &DEFAULT_COLUMNS, m, cli.k)?;
                println!("{}", report.render_text());
                write_report(out, &format!("mixed_{m}.csv"), &report.to_csv())?;
            }

            let heat = routing_heatmap(&prepared, &universe, cli.k)?;
            println!(
                "router picks the own-task adapter at the final layer for {:.1}% of IID samples",
                heat.own_top_rate * 100.0
            );
            write_report(out, "routing_heatmap.csv", &heat.to_csv())?;

            if *sweep {
                let sweep_report = sweep_num_retrieved(
                    &prepared,
                    &universe,
                    &[1, 2, 3, 4, 5, 6, 7, 8],
                    EvalMode::Iid,
                )?;
                println!("retrieved-count sweep (overall metric per n):\n{}", sweep_report.to_csv());
                write_report(out, "sweep.csv", &sweep_report.to_csv())?;
                write_report(out, "sweep.svg", &sweep_report.to_svg())?;
            }

            if let Some(dir) = save_registry {
                prepared.registry.save_dir(dir)?;
                save_router(&prepared.router, &dir.join("router.json"))?;
                let doc = ModelDoc {
                    dims: vec![32, 64, 64, 32],
                    classes: Some(4),
                    seed: cli.seed,
                    seq_len: universe.cfg.seq_len,
                };
                fs::write(model_path(dir), serde_json::to_string_pretty(&doc)?)?;
                println!("pool exported to {}", dir.display());
            }
        }
        Command::Bench { batch_sizes, out } => {
            let model = Arc::new(BaseModel::toy(cli.seed));
            let ucfg = UniverseConfig {
                seed: cli.seed,
                ..Default::default()
            };
            let universe = gen_universe(&model, &ucfg)?;
            println!("training pool for the benchmark (seed {})...", cli.seed);
            let pcfg = PrepareConfig {
                seed: cli.seed ^ 0x9e37_79b9,
                ..Default::default()
            };
            let prepared = prepare(Arc::clone(&model), &universe, &pcfg)?;
            let report = throughput_bench(
                &prepared,
                &universe,
                batch_sizes,
                &DEFAULT_BENCH_MODES,
                &BenchConfig {
                    k: cli.k,
                    ..Default::default()
                },
            )?;
            println!("{}", report.render_text());
            write_report(out, "throughput.csv", &report.to_csv())?;
            write_report(out, "throughput.svg", &report.to_svg())?;
        }
    }
    Ok(())
}
