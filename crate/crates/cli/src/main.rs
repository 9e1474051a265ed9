use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use sglora::adapters::{flatten, load_adapter, save_adapter, unflatten, Layout};
use sglora::cvae::{load_model, resume, save_model, train, training_samples, CvaeConfig, EpochLoss, GenerateMode};
use sglora::repository::{build_repository, load_repository, save_repository, BuildOptions, Repository, TaskRecord};
use sglora::router::{build_prior, MergeMethod, RouteReport, DEFAULT_K, DEFAULT_TAU};
use sglora::semantics::{
    apply_template_with_classes, load_embeddings, stub_embed, write_embeddings, EmbeddingSource, TaskEmbedding,
    PHOTO_TEMPLATE,
};
use sglora::synthbench::{self, BenchConfig};

#[derive(Parser)]
#[command(name = "sglora", version, about = "Semantic-guided LoRA generation toolkit")]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Debug logging on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    /// Format of the summary printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Build an expert repository from checkpoint blobs and embeddings.
    BuildRepo(BuildRepoArgs),
    /// Route a task to its nearest experts and print the fusion weights.
    Route(RouteArgs),
    /// Merge experts into one adapter with a baseline method.
    Merge(MergeArgs),
    /// Train the generator on a repository's training split.
    Train(TrainArgs),
    /// Generate adapters for an unseen task.
    Generate(GenerateArgs),
    /// Run the synthetic benchmark.
    Bench(BenchArgs),
    /// Export a synthetic task family as checkpoints and embeddings.
    Synth(SynthArgs),
}

#[derive(Args)]
struct BuildRepoArgs {
    /// Directory with `layout.json` and one subdirectory of adapter blobs per task.
    #[arg(long)]
    checkpoints: PathBuf,
    /// JSONL file of task embeddings.
    #[arg(long)]
    embeddings: PathBuf,
    /// Comma-separated expert task ids.
    #[arg(long, value_delimiter = ',', required = true)]
    experts: Vec<String>,
    /// Fraction of non-expert tasks put in the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").args(["embedding", "describe"]).multiple(false)))]
struct QueryArgs {
    /// JSONL file holding the query embedding(s).
    #[arg(long)]
    embedding: Option<PathBuf>,
    /// Class name or description, embedded through the template.
    #[arg(long)]
    describe: Option<String>,
    /// Pick one record of a multi-record embedding file.
    #[arg(long)]
    query: Option<String>,
    /// Description template; must contain `<class name>`.
    #[arg(long, default_value = PHOTO_TEMPLATE)]
    template: String,
    /// Comma-separated classes for a `<class list>` placeholder.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// JSONL file searched for a record whose description equals the
    /// templated text; the stub encoder is used when none matches.
    #[arg(long)]
    lookup: Option<PathBuf>,
}

#[derive(Args)]
struct RouteArgs {
    #[arg(long)]
    repo: PathBuf,
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeName {
    #[value(alias = "model-soup")]
    Soup,
    #[value(alias = "topk-merge")]
    Topk,
    #[value(alias = "topk-weighted")]
    Weighted,
}

impl From<MergeName> for MergeMethod {
    fn from(m: MergeName) -> Self {
        match m {
            MergeName::Soup => MergeMethod::ModelSoup,
            MergeName::Topk => MergeMethod::TopkMerge,
            MergeName::Weighted => MergeMethod::TopkWeighted,
        }
    }
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    repo: PathBuf,
    #[arg(long, value_enum)]
    method: MergeName,
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    repo: PathBuf,
    /// Generator config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated training task ids (default: the training split).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    /// Continue from an existing model trained on the same repository.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss trace CSV (default: `<out>.trace.csv`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeName {
    Mean,
    Stochastic,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    repo: PathBuf,
    #[command(flatten)]
    query: QueryArgs,
    #[arg(long, value_enum, default_value_t = ModeName::Mean)]
    mode: ModeName,
    /// Number of stochastic samples; ignored in mean mode.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark config JSON; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of consecutive seeds, starting at --seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Also sweep these routing widths, e.g. `1,2,4,8`.
    #[arg(long, value_delimiter = ',')]
    k_sweep: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Benchmark config JSON describing the family.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Domain(String),
}

type CliResult<T> = Result<T, Failure>;

fn domain<T>(r: sglora::Result<T>, context: impl Display) -> CliResult<T> {
    r.map_err(|e| {
        let mut msg = format!("{context}: {e}");
        let mut src = std::error::Error::source(&e);
        while let Some(s) = src {
            msg.push_str(&format!(": {s}"));
            src = s.source();
        }
        Failure::Domain(msg)
    })
}

fn io<T>(r: std::io::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))
}

/// What a command prints, in each output format.
struct Summary {
    json: Value,
    csv: String,
    text: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(s) => {
            let out = match cli.format {
                Format::Json => serde_json::to_string_pretty(&s.json).expect("summary serializes") + "\n",
                Format::Csv => s.csv,
                Format::Text => s.text,
            };
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> CliResult<Summary> {
    match &cli.command {
        Command::BuildRepo(a) => build_repo(cli, a),
        Command::Route(a) => route(cli, a),
        Command::Merge(a) => merge(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Synth(a) => synth(cli, a),
    }
}

fn echo(command: &str, config: Value) {
    eprintln!("{command} config: {config}");
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = io(fs::read_to_string(p), p)?;
            serde_json::from_str(&text).map_err(|e| Failure::Domain(format!("{}: {e}", p.display())))
        }
    }
}

fn build_repo(cli: &Cli, a: &BuildRepoArgs) -> CliResult<Summary> {
    let seed = cli.seed.unwrap_or(0);
    echo(
        "build-repo",
        json!({
            "checkpoints": a.checkpoints, "embeddings": a.embeddings, "experts": a.experts,
            "train_fraction": a.train_fraction, "seed": seed, "out": a.out,
        }),
    );
    let layout_path = a.checkpoints.join("layout.json");
    let layout: Layout = read_json(Some(&layout_path))?;
    domain(layout.validate(), layout_path.display())?;
    let embeddings = domain(load_embeddings(&a.embeddings), "embeddings")?;

    let mut dirs: Vec<PathBuf> = io(fs::read_dir(&a.checkpoints), &a.checkpoints)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut records = Vec::new();
    let mut missing_emb = Vec::new();
    for dir in &dirs {
        let task_id = dir.file_name().expect("directory entry").to_string_lossy().to_string();
        let Some(emb) = embeddings.iter().find(|e| e.task_id == task_id) else {
            missing_emb.push(task_id);
            continue;
        };
        let mut blobs: Vec<PathBuf> = io(fs::read_dir(dir), dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "sglr"))
            .collect();
        blobs.sort();
        let mut checkpoints = Vec::with_capacity(blobs.len());
        for b in &blobs {
            let set = domain(load_adapter(b, &layout), b.display())?;
            checkpoints.push(flatten(&set).0);
        }
        records.push(TaskRecord {
            task_id,
            description: emb.description.clone(),
            embedding: emb.vector.clone(),
            checkpoints,
        });
    }
    if !missing_emb.is_empty() {
        return Err(Failure::Domain(format!(
            "{}: no embedding for checkpoint directories: {}",
            a.embeddings.display(),
            missing_emb.join(", ")
        )));
    }
    let unused: Vec<&str> = embeddings
        .iter()
        .filter(|e| !records.iter().any(|r| r.task_id == e.task_id))
        .map(|e| e.task_id.as_str())
        .collect();
    if !unused.is_empty() {
        log::warn!("embeddings without checkpoints are ignored: {}", unused.join(", "));
    }
    let options = BuildOptions {
        train_fraction: a.train_fraction,
        seed,
    };
    let (repo, warnings) = domain(build_repository(&records, &a.experts, &layout, &options), "build-repo")?;
    for w in &warnings {
        log::warn!("{w}");
    }
    domain(save_repository(&repo, &a.out), a.out.display())?;
    let m = repo.manifest();
    Ok(Summary {
        json: json!({
            "experts": m.experts.len(), "param_len": repo.param_len(), "train": m.train, "eval": m.eval,
            "repository_hash": repo.hash(), "warnings": warnings,
        }),
        csv: format!(
            "experts,param_len,train,eval,repository_hash\n{},{},{},{},{}\n",
            m.experts.len(),
            repo.param_len(),
            m.train.len(),
            m.eval.len(),
            repo.hash()
        ),
        text: format!(
            "{} experts, D = {}, {} train, {} eval\nrepository {}\n",
            m.experts.len(),
            repo.param_len(),
            m.train.len(),
            m.eval.len(),
            repo.hash()
        ),
    })
}

fn load_repo(path: &Path) -> CliResult<Repository> {
    domain(load_repository(path), path.display())
}

/// Resolves the query options into embeddings of the repository's width.
fn queries(q: &QueryArgs, dim: usize) -> CliResult<Vec<TaskEmbedding>> {
    let found = if let Some(path) = &q.embedding {
        let all = domain(load_embeddings(path), path.display())?;
        match &q.query {
            Some(id) => vec![all
                .into_iter()
                .find(|e| &e.task_id == id)
                .ok_or_else(|| Failure::Domain(format!("{}: no record {id}", path.display())))?],
            None => all,
        }
    } else if let Some(text) = &q.describe {
        let classes: Vec<&str> = q.classes.iter().map(String::as_str).collect();
        let description = domain(apply_template_with_classes(text, &classes, &q.template), "template")?;
        let looked_up = match &q.lookup {
            Some(path) => domain(load_embeddings(path), path.display())?
                .into_iter()
                .find(|e| e.description == description),
            None => None,
        };
        let emb = match looked_up {
            Some(e) => TaskEmbedding {
                task_id: text.clone(),
                source: EmbeddingSource::Ingested,
                ..e
            },
            None => {
                if q.lookup.is_some() {
                    log::warn!("no ingested embedding for {description:?}; using the stub encoder");
                }
                TaskEmbedding {
                    task_id: text.clone(),
                    ..domain(stub_embed(&description, dim), "stub encoder")?
                }
            }
        };
        vec![emb]
    } else {
        return Err(Failure::Usage("one of --embedding or --describe is required".into()));
    };
    if found.is_empty() {
        return Err(Failure::Domain("no query embeddings".into()));
    }
    if let Some(bad) = found.iter().find(|e| e.dim() != dim) {
        return Err(Failure::Domain(format!(
            "query {} has dim {}, repository embeddings have dim {dim}",
            bad.task_id,
            bad.dim()
        )));
    }
    Ok(found)
}

fn single(q: &QueryArgs, dim: usize) -> CliResult<TaskEmbedding> {
    let mut all = queries(q, dim)?;
    if all.len() > 1 {
        return Err(Failure::Domain(format!(
            "embedding file holds {} records; pick one with --query",
            all.len()
        )));
    }
    Ok(all.remove(0))
}

fn query_echo(q: &QueryArgs) -> Value {
    json!({
        "embedding": q.embedding, "describe": q.describe, "query": q.query,
        "template": q.template, "classes": q.classes, "lookup": q.lookup,
    })
}

fn route_rows(reports: &[RouteReport]) -> (String, String) {
    let mut csv = String::from("query_id,rank,task_id,similarity,weight\n");
    let mut text = String::new();
    for r in reports {
        text.push_str(&format!("{} (k = {}, tau = {})\n", r.query_id, r.k, r.tau));
        for (i, s) in r.selected.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.query_id,
                i + 1,
                s.task_id,
                s.similarity,
                s.weight
            ));
            text.push_str(&format!(
                "  {:>2}. {:<24} sim {:>8.5}  weight {:.4}\n",
                i + 1,
                s.task_id,
                s.similarity,
                s.weight
            ));
        }
    }
    (csv, text)
}

fn route(_cli: &Cli, a: &RouteArgs) -> CliResult<Summary> {
    echo(
        "route",
        json!({ "repo": a.repo, "query": query_echo(&a.query), "k": a.k, "tau": a.tau }),
    );
    let repo = load_repo(&a.repo)?;
    let qs = queries(&a.query, repo.embedding_dim())?;
    let mut reports = Vec::with_capacity(qs.len());
    for q in &qs {
        let prior = domain(build_prior::<f32>(&q.vector, repo.experts(), a.k, a.tau, None), "route")?;
        if prior.clamped {
            log::warn!("k = {} exceeds the {} experts; using all", a.k, repo.experts().len());
        }
        reports.push(prior.report(q.task_id.clone()));
    }
    let (csv, text) = route_rows(&reports);
    let json = if reports.len() == 1 {
        serde_json::to_value(&reports[0])
    } else {
        serde_json::to_value(&reports)
    }
    .expect("route reports serialize");
    Ok(Summary { json, csv, text })
}

fn merge(_cli: &Cli, a: &MergeArgs) -> CliResult<Summary> {
    let method = MergeMethod::from(a.method);
    echo(
        "merge",
        json!({ "repo": a.repo, "method": method, "query": query_echo(&a.query), "k": a.k, "tau": a.tau, "out": a.out }),
    );
    let repo = load_repo(&a.repo)?;
    let has_query = a.query.embedding.is_some() || a.query.describe.is_some();
    let (query_id, query) = match (method, has_query) {
        (MergeMethod::ModelSoup, false) => (None, vec![0.0f32; repo.embedding_dim()]),
        (MergeMethod::ModelSoup, true) => {
            log::warn!("model soup ignores the query");
            (None, vec![0.0f32; repo.embedding_dim()])
        }
        (_, false) => {
            return Err(Failure::Usage(
                "topk and weighted merges need --embedding or --describe".into(),
            ))
        }
        (_, true) => {
            let q = single(&a.query, repo.embedding_dim())?;
            (Some(q.task_id), q.vector)
        }
    };
    let merged = domain(method.merge::<f32>(&query, repo.experts(), a.k, a.tau), "merge")?;
    let set = domain(unflatten(&merged, repo.layout()), "merge")?;
    domain(save_adapter(&set, &a.out), a.out.display())?;
    let norm = merged.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let method_name = serde_json::to_value(method).expect("method serializes");
    let name = method_name.as_str().unwrap_or_default().to_string();
    Ok(Summary {
        json: json!({ "method": method_name, "query_id": query_id, "k": a.k, "tau": a.tau, "param_len": merged.len(), "l2_norm": norm, "out": a.out }),
        csv: format!(
            "method,param_len,l2_norm,out\n{name},{},{norm},{}\n",
            merged.len(),
            a.out.display()
        ),
        text: format!(
            "{name}: {} parameters, L2 norm {norm:.6}, written to {}\n",
            merged.len(),
            a.out.display()
        ),
    })
}

fn trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,total,recon,kl\n");
    for e in trace {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", e.epoch, e.total, e.recon, e.kl));
    }
    out
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CliResult<Summary> {
    let mut config: CvaeConfig = read_json(a.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    domain(config.validate(), "config")?;
    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".trace.csv");
        a.out.with_file_name(name)
    });
    echo(
        "train",
        json!({ "repo": a.repo, "config": config, "tasks": a.tasks, "resume": a.resume, "trace": trace_path, "out": a.out }),
    );
    let repo = load_repo(&a.repo)?;
    let tasks = if a.tasks.is_empty() {
        repo.manifest().train.clone()
    } else {
        a.tasks.clone()
    };
    let (model, trace) = match &a.resume {
        None => domain(train::<f32>(&repo, &tasks, &config), "train")?,
        Some(path) => {
            let start = domain(load_model(path, &repo), path.display())?;
            let samples = domain(training_samples::<f32>(&repo, &tasks, config.k, config.tau), "train")?;
            domain(resume(start, &samples, &config), "train")?
        }
    };
    domain(save_model(&model, &a.out), a.out.display())?;
    let csv = trace_csv(&trace);
    io(fs::write(&trace_path, &csv), &trace_path)?;
    let last = trace.last().copied();
    Ok(Summary {
        json: json!({
            "tasks": tasks, "epochs": trace.len(), "num_params": model.num_params(),
            "final": last, "model": a.out, "trace": trace_path,
        }),
        csv,
        text: match last {
            Some(l) => format!(
                "trained on {} tasks for {} epochs: total {:.6}, recon {:.6}, kl {:.4}\nmodel {}\n",
                tasks.len(),
                trace.len(),
                l.total,
                l.recon,
                l.kl,
                a.out.display()
            ),
            None => format!("no epochs run; model {}\n", a.out.display()),
        },
    })
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult<Summary> {
    let seed = cli.seed.unwrap_or(0);
    let mode = match a.mode {
        ModeName::Mean => GenerateMode::Mean,
        ModeName::Stochastic => GenerateMode::Stochastic,
    };
    echo(
        "generate",
        json!({ "model": a.model, "repo": a.repo, "query": query_echo(&a.query), "mode": mode, "n": a.n, "seed": seed, "out": a.out }),
    );
    let repo = load_repo(&a.repo)?;
    let model = domain(load_model(&a.model, &repo), a.model.display())?;
    let q = single(&a.query, repo.embedding_dim())?;
    let prior = domain(
        build_prior::<f32>(&q.vector, repo.experts(), model.config.k, model.config.tau, None),
        "route",
    )?;
    let sets = domain(model.generate(&prior, a.n, mode, seed), "generate")?;
    io(fs::create_dir_all(&a.out), &a.out)?;
    let mut files = Vec::with_capacity(sets.len());
    for (i, set) in sets.iter().enumerate() {
        let path = a.out.join(format!("adapter-{i:03}.sglr"));
        domain(save_adapter(set, &path), path.display())?;
        files.push(path);
    }
    let report = prior.report(q.task_id.clone());
    let mut csv = String::from("index,file\n");
    let mut text = format!("{}: routed to {}\n", q.task_id, prior.task_ids.join(", "));
    for (i, f) in files.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", f.display()));
        text.push_str(&format!("  wrote {}\n", f.display()));
    }
    Ok(Summary {
        json: json!({ "query_id": q.task_id, "mode": mode, "route": report, "files": files }),
        csv,
        text,
    })
}

fn aggregate_csv(aggs: &[synthbench::MethodAggregate]) -> String {
    let mut out = String::from("method,loss,param_l2,r1,r5,r10\n");
    for a in aggs {
        out.push_str(&format!(
            "{},{:e},{:e},{},{},{}\n",
            a.method, a.loss, a.param_l2, a.r1, a.r5, a.r10
        ));
    }
    out
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize") + "\n";
    io(fs::write(path, text), path)
}

fn bench(cli: &Cli, a: &BenchArgs) -> CliResult<Summary> {
    let config: BenchConfig = read_json(a.config.as_deref())?;
    domain(config.validate(), "config")?;
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let base = cli.seed.unwrap_or(0);
    let seeds: Vec<u64> = (base..base + a.seeds).collect();
    echo(
        "bench",
        json!({ "config": config, "seeds": seeds, "k_sweep": a.k_sweep, "out": a.out }),
    );
    let multi = domain(synthbench::run_seeds(&config, &seeds), "bench")?;
    io(fs::create_dir_all(&a.out), &a.out)?;
    for r in &multi.reports {
        write_json(&a.out.join(format!("seed-{}.json", r.seed)), r)?;
        let path = a.out.join(format!("seed-{}.csv", r.seed));
        io(fs::write(&path, r.to_csv()), &path)?;
    }
    let aggregate = json!({ "seeds": multi.seeds, "aggregates": multi.aggregates, "ordering": multi.ordering });
    write_json(&a.out.join("aggregate.json"), &aggregate)?;
    let agg_csv = aggregate_csv(&multi.aggregates);
    let path = a.out.join("aggregate.csv");
    io(fs::write(&path, &agg_csv), &path)?;
    let mut json = aggregate;
    if !a.k_sweep.is_empty() {
        let sweep = domain(synthbench::k_sweep(&config, &seeds, &a.k_sweep), "k sweep")?;
        write_json(&a.out.join("k-sweep.json"), &sweep)?;
        json["k_sweep"] = serde_json::to_value(&sweep).expect("sweep serializes");
    }
    let mut text = format!(
        "{:<20} {:>12} {:>10} {:>6} {:>6} {:>6}\n",
        "method", "loss", "param_l2", "R@1", "R@5", "R@10"
    );
    for m in &multi.aggregates {
        text.push_str(&format!(
            "{:<20} {:>12.6e} {:>10.4} {:>6.3} {:>6.3} {:>6.3}\n",
            m.method, m.loss, m.param_l2, m.r1, m.r5, m.r10
        ));
    }
    text.push_str(&format!(
        "ordering {} ({} strict pairs, oracle best: {})\n",
        if multi.ordering.passed { "holds" } else { "violated" },
        multi.ordering.strict_pairs,
        multi.ordering.oracle_best
    ));
    Ok(Summary {
        json,
        csv: agg_csv,
        text,
    })
}

fn synth(cli: &Cli, a: &SynthArgs) -> CliResult<Summary> {
    let config: BenchConfig = read_json(a.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    echo("synth", json!({ "config": config, "seed": seed, "out": a.out }));
    let family = domain(synthbench::make_family(&config, seed), "synth")?;
    let options = config.oracle_options();
    let ckpt_dir = a.out.join("checkpoints");
    io(fs::create_dir_all(&ckpt_dir), &ckpt_dir)?;
    write_json(&ckpt_dir.join("layout.json"), &family.layout)?;
    let mut embeddings = Vec::with_capacity(family.tasks.len());
    for task in &family.tasks {
        let fit = domain(synthbench::train_oracle(task, &family, &options, seed), "oracle")?;
        let dir = ckpt_dir.join(&task.task_id);
        io(fs::create_dir_all(&dir), &dir)?;
        for (j, c) in fit.record.checkpoints.iter().enumerate() {
            let set = domain(unflatten(c, &family.layout), "checkpoint")?;
            let path = dir.join(format!("ckpt-{j:03}.sglr"));
            domain(save_adapter(&set, &path), path.display())?;
        }
        embeddings.push(TaskEmbedding {
            task_id: task.task_id.clone(),
            description: fit.record.description.clone(),
            vector: task.embedding.clone(),
            source: EmbeddingSource::Ingested,
        });
    }
    let emb_path = a.out.join("embeddings.jsonl");
    domain(write_embeddings(&emb_path, &embeddings), emb_path.display())?;
    let experts: Vec<String> = config
        .expert_indices()
        .into_iter()
        .map(|i| family.tasks[i].task_id.clone())
        .collect();
    let experts_path = a.out.join("experts.txt");
    io(fs::write(&experts_path, experts.join(",") + "\n"), &experts_path)?;
    Ok(Summary {
        json: json!({ "tasks": family.tasks.len(), "param_len": family.layout.total_len(), "experts": experts, "out": a.out }),
        csv: format!(
            "tasks,param_len,experts\n{},{},{}\n",
            family.tasks.len(),
            family.layout.total_len(),
            experts.join(" ")
        ),
        text: format!(
            "{} tasks, D = {}, suggested experts {}\n",
            family.tasks.len(),
            family.layout.total_len(),
            experts.join(",")
        ),
    })
}
