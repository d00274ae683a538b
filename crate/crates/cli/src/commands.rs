use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;

use decitool::backends::{ApiExecutor, ModelBackend, RegistryExecutor};
use decitool::clustering::{fit_kmeans_traced, ClusterModel, KMeansOptions};
use decitool::datagen::{
    self, assemble_dataset, assemble_test, export_sft, generate_for_pool, load_split, read_queries, save_split,
    stats_block, AssembleConfig, DatagenTemplates, DatasetSplit, Proportions, QueryCallPair,
};
use decitool::embedding::{embed_pool, EmbeddingProvider};
use decitool::eval::{run_trials_with_traces, EvalEnv, EvalError};
use decitool::par::{self, Parallelism};
use decitool::registry::{load_pool, save_pool, split_pool, ToolPool};
use decitool::runtime::{Agent, DecisionTrace, PromptTemplates, RuntimeConfig, Stage};

use crate::config::{resolve, Config};
use crate::{Cli, Command};

/// Error with the process exit code it maps to: 1 for evaluation and
/// protocol failures, 2 for configuration and IO errors.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }

    fn failure(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }
}

trait OrConfig<T> {
    fn or_config(self) -> Result<T, CliError>;
    fn or_config_ctx<C: Display + Send + Sync + 'static>(self, ctx: C) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> OrConfig<T> for Result<T, E> {
    fn or_config(self) -> Result<T, CliError> {
        self.map_err(CliError::config)
    }

    fn or_config_ctx<C: Display + Send + Sync + 'static>(self, ctx: C) -> Result<T, CliError> {
        self.map_err(|e| CliError::config(e.into().context(ctx)))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

struct Ctx {
    cfg: Config,
    /// Directory that relative config paths resolve against.
    base: PathBuf,
    seed: u64,
    mode: Parallelism,
}

impl Ctx {
    /// A flag value (relative to the working directory) wins over the config
    /// value (relative to the config file).
    fn path(&self, flag: Option<PathBuf>, configured: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        flag.or_else(|| configured.as_ref().map(|p| resolve(&self.base, p)))
            .ok_or_else(|| CliError::config(anyhow!("no path for `{key}`: set paths.{key} or pass a flag")))
    }

    fn opt_path(&self, configured: &Option<PathBuf>) -> Option<PathBuf> {
        configured.as_ref().map(|p| resolve(&self.base, p))
    }

    fn pool(&self, path: &Path) -> CliResult<ToolPool> {
        load_pool(path).or_config()
    }

    fn clusters(&self) -> CliResult<Option<ClusterModel>> {
        self.opt_path(&self.cfg.paths.clusters)
            .map(|p| ClusterModel::load(p).or_config())
            .transpose()
    }

    /// Train and test pools merged, or the full pool when no split is
    /// configured.
    fn eval_pool(&self) -> CliResult<ToolPool> {
        let p = &self.cfg.paths;
        match (self.opt_path(&p.train_pool), self.opt_path(&p.test_pool)) {
            (Some(a), b) => {
                let mut tools = self.pool(&a)?.tools().to_vec();
                if let Some(b) = b {
                    tools.extend_from_slice(self.pool(&b)?.tools());
                }
                ToolPool::new(tools).or_config()
            }
            (None, Some(b)) => self.pool(&b),
            (None, None) => self.pool(&self.path(None, &p.pool, "pool")?),
        }
    }

    fn provider(&self) -> CliResult<Box<dyn EmbeddingProvider>> {
        self.cfg.embedding.provider().or_config()
    }

    fn backend(&self) -> CliResult<Box<dyn ModelBackend>> {
        self.cfg
            .backend
            .as_ref()
            .ok_or_else(|| CliError::config(anyhow!("no [backend] section")))?
            .build(&self.base)
            .or_config()
    }

    fn executor(&self, pool: &ToolPool) -> CliResult<RegistryExecutor> {
        let ex = match self.opt_path(&self.cfg.paths.executor) {
            Some(p) => RegistryExecutor::load(p).or_config()?,
            None => RegistryExecutor::new(BTreeMap::new()),
        };
        Ok(ex.with_pool(pool))
    }

    fn runtime(&self) -> CliResult<RuntimeConfig> {
        let templates = match self.opt_path(&self.cfg.paths.templates) {
            Some(p) => PromptTemplates::load_dir(&p).or_config_ctx(format!("templates {}", p.display()))?,
            None => PromptTemplates::default(),
        };
        let r = &self.cfg.runtime;
        Ok(RuntimeConfig {
            k: self.cfg.sampler.k,
            max_reprompts: r.max_reprompts,
            max_rounds: r.max_rounds,
            include_signature: r.include_signature,
            templates,
        })
    }
}

pub fn run(cli: Cli) -> CliResult {
    let (cfg, base) = match &cli.config {
        Some(p) => Config::load(p).or_config()?,
        None => (Config::default(), PathBuf::from(".")),
    };
    cfg.validate().or_config()?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let threads = cli.parallel.or(cfg.parallel).unwrap_or(1);
    let ctx = Ctx {
        cfg,
        base,
        seed,
        mode: Parallelism::from_threads(threads),
    };
    par::with_threads(threads, move || match cli.command {
        Command::Cluster { pool, out, m } => cmd_cluster(&ctx, pool, out, m),
        Command::SplitPool {
            pool,
            n_train,
            train_out,
            test_out,
        } => cmd_split_pool(&ctx, pool, n_train, train_out, test_out),
        Command::Build { out } => cmd_build(&ctx, out),
        Command::Eval { trials, split, out } => cmd_eval(&ctx, trials, split, out),
        Command::Demo => cmd_demo(&ctx),
        Command::ExportSft { dataset, out } => cmd_export_sft(&ctx, dataset, out),
    })
}

fn cmd_cluster(ctx: &Ctx, pool: Option<PathBuf>, out: Option<PathBuf>, m: Option<usize>) -> CliResult {
    let pool_path = ctx.path(pool, &ctx.cfg.paths.pool, "pool")?;
    let out = ctx.path(out, &ctx.cfg.paths.clusters, "clusters")?;
    let pool = ctx.pool(&pool_path)?;
    let provider = ctx.provider()?;
    let vectors = embed_pool(&pool, provider.as_ref(), ctx.mode).or_config()?;
    let c = &ctx.cfg.clustering;
    let opts = KMeansOptions {
        m: m.unwrap_or(c.m),
        seed: ctx.seed,
        max_iter: c.max_iter,
        n_init: c.n_init,
        parallelism: ctx.mode,
        ..KMeansOptions::default()
    };
    let fit = fit_kmeans_traced(&vectors, &opts).or_config()?;
    fit.model.save(&out).or_config()?;

    let sizes = fit.model.sizes();
    let widest = sizes.iter().copied().max().unwrap_or(1).max(1);
    println!(
        "clusters: {}  tools: {}  sse: {:.6}  iterations: {}",
        fit.model.m(),
        pool.len(),
        fit.sse,
        fit.iterations
    );
    println!("cluster  size");
    for (i, &n) in sizes.iter().enumerate() {
        let bar = "#".repeat((n * 40).div_ceil(widest));
        println!("{i:>7}  {n:>4}  {bar}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_split_pool(
    ctx: &Ctx,
    pool: Option<PathBuf>,
    n_train: Option<usize>,
    train_out: Option<PathBuf>,
    test_out: Option<PathBuf>,
) -> CliResult {
    let p = &ctx.cfg.paths;
    let pool = ctx.pool(&ctx.path(pool, &p.pool, "pool")?)?;
    let n_train = n_train
        .or(ctx.cfg.build.n_train)
        .ok_or_else(|| CliError::config(anyhow!("pass --n-train or set build.n_train")))?;
    let train_out = ctx.path(train_out, &p.train_pool, "train_pool")?;
    let test_out = ctx.path(test_out, &p.test_pool, "test_pool")?;
    let (train, test) = split_pool(&pool, n_train, ctx.seed).or_config()?;
    save_pool(&train, &train_out).or_config()?;
    save_pool(&test, &test_out).or_config()?;
    println!("train: {} tools -> {}", train.len(), train_out.display());
    println!("test: {} tools -> {}", test.len(), test_out.display());
    Ok(())
}

type Pairs = BTreeMap<String, Vec<QueryCallPair>>;

fn read_pairs(path: &Path) -> CliResult<Pairs> {
    let text = std::fs::read_to_string(path).or_config_ctx(format!("reading {}", path.display()))?;
    serde_json::from_str(&text).or_config_ctx(format!("parsing pairs {}", path.display()))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> CliResult {
    let text = serde_json::to_string_pretty(value).or_config()?;
    std::fs::write(path, text + "\n").or_config_ctx(format!("writing {}", path.display()))
}

/// Pre-generated pairs from `configured`, or a generate-and-check run over
/// `pool`.
fn pairs_for(ctx: &Ctx, pool: &ToolPool, configured: &Option<PathBuf>, label: &str) -> CliResult<Pairs> {
    if let Some(p) = ctx.opt_path(configured) {
        return read_pairs(&p);
    }
    let section = |s: &Option<crate::config::BackendSection>, name: &str| {
        s.as_ref()
            .ok_or_else(|| CliError::config(anyhow!("no pairs file and no [{name}] backend for {label} tools")))
            .and_then(|b| b.build(&ctx.base).or_config())
    };
    let generator = section(&ctx.cfg.generator, "generator")?;
    let checker = section(&ctx.cfg.checker, "checker")?;
    let templates = match ctx.opt_path(&ctx.cfg.paths.datagen_templates) {
        Some(p) => DatagenTemplates::load_dir(p).or_config()?,
        None => DatagenTemplates::default(),
    };
    let (pairs, report) = generate_for_pool(
        pool,
        generator.as_ref(),
        checker.as_ref(),
        ctx.cfg.build.pairs_per_tool,
        &templates,
        ctx.mode,
    )
    .map_err(CliError::failure)?;
    println!(
        "{label}: generated {} pairs, dropped {} malformed, rejected {}, kept {}, tools without pairs {}",
        report.generated,
        report.dropped,
        report.rejected,
        report.kept,
        report.failed_tools.len()
    );
    Ok(pairs)
}

fn cmd_build(ctx: &Ctx, out: Option<PathBuf>) -> CliResult {
    let p = &ctx.cfg.paths;
    let b = &ctx.cfg.build;
    let out = ctx.path(out, &p.dataset, "dataset")?;
    let queries_path = ctx.path(None, &p.nosearch_queries, "nosearch_queries")?;
    let queries = read_queries(&queries_path).or_config()?;
    if queries.is_empty() {
        return Err(CliError::config(anyhow!("{} holds no NoSearch queries", queries_path.display())));
    }
    let train_pool = ctx.pool(&ctx.path(None, &p.train_pool, "train_pool")?)?;
    let test_pool = ctx.opt_path(&p.test_pool).map(|t| ctx.pool(&t)).transpose()?;
    let clusters = ctx.clusters()?;
    let sampler = ctx.cfg.sampler.to_config(ctx.seed);
    let acfg = AssembleConfig {
        proportions: Proportions {
            call: b.call,
            nocall: b.nocall,
        },
        valid_fraction: b.valid_fraction,
        valid_quota: b.valid_quota,
        seed: ctx.seed,
        parallelism: ctx.mode,
    };
    acfg.proportions.validate().or_config()?;

    let train_pairs = pairs_for(ctx, &train_pool, &p.pairs, "train")?;
    let mut split = assemble_dataset(&train_pool, clusters.as_ref(), &train_pairs, &sampler, &queries, &acfg)
        .map_err(CliError::failure)?;
    let test_pairs = match &test_pool {
        Some(tp) => {
            let pairs = pairs_for(ctx, tp, &p.test_pairs, "test")?;
            // held-out tools are only sampled by cluster when the model covers them
            let covering = clusters
                .as_ref()
                .filter(|c| tp.names().all(|n| c.cluster_of(n).is_ok()));
            split.test = assemble_test(tp, covering, &pairs, &sampler, &acfg).map_err(CliError::failure)?;
            Some(pairs)
        }
        None => None,
    };
    split.validate(&train_pool, test_pool.as_ref()).map_err(CliError::failure)?;

    save_split(&split, &out).or_config()?;
    write_json(&train_pairs, &out.join("pairs_train.json"))?;
    if let Some(tp) = &test_pairs {
        write_json(tp, &out.join("pairs_test.json"))?;
    }
    let sft_dir = ctx.opt_path(&p.sft).unwrap_or_else(|| out.join("sft"));
    let mut pools = vec![&train_pool];
    pools.extend(test_pool.as_ref());
    export_sft(&split, &pools, &ctx.runtime()?.templates, &sft_dir).or_config()?;

    print!("{}", stats_block(&split));
    Ok(())
}

fn select_split(split: DatasetSplit, name: &str) -> CliResult<Vec<datagen::Sample>> {
    match name {
        "train" => Ok(split.train),
        "valid" => Ok(split.valid),
        "test" => Ok(split.test),
        other => Err(CliError::config(anyhow!("unknown split `{other}`"))),
    }
}

fn cmd_eval(ctx: &Ctx, trials: Option<usize>, split: Option<String>, out: Option<PathBuf>) -> CliResult {
    let e = &ctx.cfg.eval;
    let dataset = ctx.path(None, &ctx.cfg.paths.dataset, "dataset")?;
    let name = split.unwrap_or_else(|| e.split.clone());
    let samples = select_split(load_split(&dataset).or_config()?, &name)?;
    if samples.is_empty() {
        return Err(CliError::config(anyhow!("split `{name}` in {} is empty", dataset.display())));
    }
    let n_trials = trials.unwrap_or(e.trials);
    if n_trials == 0 {
        return Err(CliError::config(anyhow!("trials must be at least 1")));
    }
    let pool = ctx.eval_pool()?;
    let clusters = ctx.clusters()?;
    let backend = ctx.backend()?;
    let executor = ctx.executor(&pool)?;
    let provider = ctx.provider()?;
    let env = EvalEnv {
        backend: backend.as_ref(),
        executor: &executor,
        provider: provider.as_ref(),
        pool: &pool,
        clusters: clusters.as_ref(),
        sampler: ctx.cfg.sampler.to_config(ctx.seed),
        runtime: ctx.runtime()?,
        policy: e.policy,
        resample: e.resample,
        parallelism: ctx.mode,
    };
    let (report, traces) = run_trials_with_traces(&env, &samples, n_trials, ctx.seed).map_err(|err| match err {
        EvalError::Runtime { .. } => CliError::failure(err),
        other => CliError::config(other),
    })?;

    if let Some(dir) = out.or_else(|| ctx.opt_path(&ctx.cfg.paths.report)) {
        std::fs::create_dir_all(&dir).or_config()?;
        std::fs::write(dir.join("report.json"), report.to_json() + "\n").or_config()?;
        std::fs::write(dir.join("report.txt"), report.to_table()).or_config()?;
        let mut lines = String::new();
        for (i, trial) in traces.iter().enumerate() {
            for t in trial {
                let row = serde_json::json!({"trial": i, "sample_id": t.sample_id, "trace": t.trace});
                lines.push_str(&row.to_string());
                lines.push('\n');
            }
        }
        std::fs::write(dir.join("traces.jsonl"), lines).or_config()?;
    }
    print!("{}", report.to_table());

    let aborted = traces.iter().flatten().filter(|t| t.trace.aborted.is_some()).count();
    if aborted > 0 {
        return Err(CliError::failure(anyhow!(
            "{aborted} trace(s) aborted after repeated protocol violations"
        )));
    }
    Ok(())
}

fn stage_label(stage: Stage) -> &'static str {
    match stage {
        Stage::DecisionSearch => "decision-search",
        Stage::DecisionCall => "decision-call",
        Stage::Answer => "answer",
        Stage::Synthesis => "synthesis",
    }
}

/// Intermediate steps are prefixed with `  | `, the final answer with `>> `.
fn print_trace(w: &mut impl Write, t: &DecisionTrace) -> io::Result<()> {
    if !t.candidate_tools.is_empty() {
        writeln!(w, "  | candidates: {}", t.candidate_tools.join(", "))?;
    }
    let n = t.steps.len();
    for (i, s) in t.steps.iter().enumerate() {
        // the last step of a finished trace is the answer printed below
        if i + 1 == n && t.final_answer.is_some() && t.aborted.is_none() {
            continue;
        }
        writeln!(w, "  | [{}] {}", stage_label(s.stage), s.output.trim())?;
    }
    for c in &t.calls {
        writeln!(w, "  | api {} -> {} {}", c.command, c.response.status, c.response.body)?;
    }
    match (&t.aborted, t.branch) {
        (Some(a), _) => writeln!(w, "  | aborted at {}: {}", stage_label(a.stage), a.reason)?,
        (None, Some(b)) => writeln!(w, "  | branch: {b}")?,
        (None, None) => {}
    }
    if let Some(a) = &t.final_answer {
        writeln!(w, ">> {a}")?;
    }
    Ok(())
}

fn cmd_demo(ctx: &Ctx) -> CliResult {
    let pool = ctx.eval_pool()?;
    let backend = ctx.backend()?;
    let executor = ctx.executor(&pool)?;
    let provider = ctx.provider()?;
    let runtime = ctx.runtime()?;
    let exec: &dyn ApiExecutor = &executor;
    let agent = Agent::new(backend.as_ref(), &pool, provider.as_ref(), exec, &runtime);
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in io::stdin().lock().lines() {
        let line = line.or_config()?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        writeln!(out, "? {query}").or_config()?;
        match agent.answer(query, None) {
            Ok(t) => print_trace(&mut out, &t).or_config()?,
            Err(e) => writeln!(out, "  ! error: {e}").or_config()?,
        }
        out.flush().or_config()?;
    }
    Ok(())
}

fn cmd_export_sft(ctx: &Ctx, dataset: Option<PathBuf>, out: Option<PathBuf>) -> CliResult {
    let dataset = ctx.path(dataset, &ctx.cfg.paths.dataset, "dataset")?;
    let out = out
        .or_else(|| ctx.opt_path(&ctx.cfg.paths.sft))
        .unwrap_or_else(|| dataset.join("sft"));
    let split = load_split(&dataset).or_config()?;
    let pool = ctx.eval_pool()?;
    export_sft(&split, &[&pool], &ctx.runtime()?.templates, &out).map_err(CliError::failure)?;
    println!("wrote SFT files to {}", out.display());
    Ok(())
}
