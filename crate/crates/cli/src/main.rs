use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use autotransfer::bank::{
    append_bank, load_bank, sample_config, save_bank, DesignDistribution,
    TaskModelBank, TaskRecord,
};
use autotransfer::embedding::{train_projection, ProjectionNet, ProjectionTrainConfig};
use autotransfer::fim::{task_feature, FeatureReport, TaskFeature};
use autotransfer::graph::GraphDataset;
use autotransfer::harness::{
    curves_svg, default_suite, efficiency_curves, evaluate_loo, generate_task, write_curves_csv,
    EfficiencyConfig, Method, PriorKind, Suite, SuiteConfig, SyntheticTaskSpec,
};
use autotransfer::nn::{evaluate_config, AnchorSpec};
use autotransfer::oracle::{anchor_profile, similarity_matrix, OracleDistances};
use autotransfer::rng::derive_seed;
use autotransfer::search::{
    autotransfer_search, search, Algorithm, AutoTransferOutcome, SearchBudget, SearchConfig,
};
use autotransfer::space::DesignSpace;
use autotransfer::transfer::{
    feature_seed, load_processed, preprocess_bank, save_processed, ProcessedBankEntry,
    TransferConfig, TransferSetup,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "autotransfer", version, about = "Task-embedding transfer for GNN design search")]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the settings file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the settings file.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, extend, inspect, and preprocess task-model banks.
    #[command(subcommand)]
    Bank(BankCmd),
    /// Task features and the projection network.
    #[command(subcommand)]
    Embed(EmbedCmd),
    /// Anchor-based task distances.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Design search on a novel task.
    #[command(subcommand)]
    Search(SearchCmd),
    /// Experiments on a synthetic suite.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand)]
enum BankCmd {
    /// Generate synthetic tasks and evaluate random designs on each.
    Build {
        /// JSON array of task specs; the default suite when omitted.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate random designs on a dataset and append them to a bank.
    Ingest {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        task_id: String,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Per-task trial counts and metric summaries.
    Stats {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Embed every bank task and compute its design distribution.
    Process {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EmbedCmd {
    /// Task features of one dataset, or of every task in a bank.
    Compute {
        #[arg(long, conflicts_with = "bank", requires = "task_id")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        task_id: Option<String>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Fit the projection network to oracle distances.
    TrainProjection {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Distance matrix over the tasks of a bank.
    Distances {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SearchCmd {
    Run(SearchRun),
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Transfer,
    Uniform,
}

#[derive(Args)]
struct SearchRun {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Id of the novel task; its own bank records are ignored.
    #[arg(long, default_value = "novel")]
    task_id: String,
    #[arg(long, default_value = "random")]
    algo: Algorithm,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long)]
    d_thres: Option<f64>,
    #[arg(long, value_enum, default_value = "transfer")]
    prior: PriorArg,
    /// Projection network; required for a transfer prior unless
    /// `--processed` is given.
    #[arg(long)]
    net: Option<PathBuf>,
    /// Output of `bank process`.
    #[arg(long)]
    processed: Option<PathBuf>,
    #[arg(long, default_value = "out/result.json")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Leave-one-out ranking quality of each task similarity.
    Loo {
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Running-best curves for transfer and uniform priors.
    Curves {
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Contents of the `--config` file. Every key is optional.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct Settings {
    seed: Option<u64>,
    jobs: Option<usize>,
    /// `desk` (default), `full`, or a path to a space JSON file.
    space: Option<String>,
    suite: SuiteConfig,
    projection: ProjectionTrainConfig,
    transfer: TransferConfig,
    search: SearchConfig,
    curves: CurveSettings,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct CurveSettings {
    n_seeds: usize,
    short_trials: usize,
    long_trials: usize,
    tpe_warmup: usize,
}

impl Default for CurveSettings {
    fn default() -> Self {
        Self {
            n_seeds: 20,
            short_trials: 3,
            long_trials: 10,
            tpe_warmup: 5,
        }
    }
}

struct Ctx {
    seed: u64,
    settings: Settings,
}

impl Ctx {
    fn space(&self) -> Result<DesignSpace> {
        Ok(match self.settings.space.as_deref() {
            None | Some("desk") => DesignSpace::desk_scale(),
            Some("full") => DesignSpace::gnn_default(),
            Some(path) => DesignSpace::load(Path::new(path))?,
        })
    }

    fn anchors(&self) -> Vec<AnchorSpec> {
        AnchorSpec::default_set(self.settings.suite.anchor_hidden)
    }

    fn feature_master(&self) -> u64 {
        derive_seed(self.seed, &[4])
    }

    fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            seed: self.seed,
            ..self.settings.suite.clone()
        }
    }

    fn specs(&self, path: Option<&Path>) -> Result<Vec<SyntheticTaskSpec>> {
        match path {
            Some(p) => read_json(p),
            None => Ok(default_suite(self.seed)),
        }
    }

    fn setup(&self, net: ProjectionNet) -> Result<TransferSetup> {
        Ok(TransferSetup {
            space: self.space()?,
            anchors: self.anchors(),
            feature_cfg: self.settings.suite.feature.clone(),
            net,
            transfer: self.settings.transfer.clone(),
            seed: self.feature_master(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    task_id: String,
    z_f: Vec<f64>,
    per_anchor_alpha: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TaskStats {
    task_id: String,
    level: String,
    trials: usize,
    best_val: Option<f64>,
    median_val: Option<f64>,
    best_config: Option<String>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let settings: Settings = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Settings::default(),
    };
    let seed = cli.seed.or(settings.seed).unwrap_or(0);
    if let Some(jobs) = cli.jobs.or(settings.jobs) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let ctx = Ctx { seed, settings };
    match cli.command {
        Command::Bank(c) => bank_cmd(&ctx, c),
        Command::Embed(c) => embed_cmd(&ctx, c),
        Command::Oracle(OracleCmd::Distances { bank, out }) => oracle_distances(&ctx, &bank, &out),
        Command::Search(SearchCmd::Run(run)) => search_run(&ctx, run),
        Command::Eval(c) => eval_cmd(&ctx, c),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn splits_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("splits.json")
}

/// Loads a dataset with its saved splits, or the default split when none
/// were saved.
fn load_dataset(path: &Path, seed: u64) -> Result<GraphDataset> {
    let mut ds = GraphDataset::load(path).with_context(|| format!("loading {}", path.display()))?;
    let splits = splits_path(path);
    if splits.exists() {
        ds.load_splits(&splits)?;
    } else {
        ds.default_split(seed);
    }
    Ok(ds)
}

fn bank_dataset(bank_path: &Path, task: &TaskRecord, seed: u64) -> Result<GraphDataset> {
    let base = bank_path.parent().unwrap_or(Path::new("."));
    load_dataset(&base.join(&task.dataset_ref), seed)
}

fn random_trials(
    ctx: &Ctx,
    space: &DesignSpace,
    shell: &TaskRecord,
    dataset: &GraphDataset,
    trials: usize,
) -> Result<TaskRecord> {
    let uniform = DesignDistribution::uniform(space);
    let base = derive_seed(ctx.seed, &[autotransfer::rng::hash_str(&shell.task_id)]);
    let records = (0..trials)
        .into_par_iter()
        .map(|i| {
            let config = sample_config(&uniform, space, derive_seed(base, &[0, i as u64]))?;
            Ok(evaluate_config(&config, dataset, derive_seed(base, &[1, i as u64]))?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut task = shell.clone();
    task.trials = records;
    Ok(task)
}

fn bank_cmd(ctx: &Ctx, cmd: BankCmd) -> Result<()> {
    match cmd {
        BankCmd::Build { specs, trials, out } => {
            let specs = ctx.specs(specs.as_deref())?;
            let trials = trials.unwrap_or(ctx.settings.suite.trials_per_task);
            let space = ctx.space()?;
            let data_dir = out.join("datasets");
            fs::create_dir_all(&data_dir)?;
            let mut bank = TaskModelBank::new();
            for spec in &specs {
                let (mut shell, ds) = generate_task(spec)?;
                let file = data_dir.join(format!("{}.jsonl", spec.task_id));
                ds.save(&file)?;
                write_json(&splits_path(&file), &ds.splits)?;
                shell.dataset_ref = Path::new("datasets").join(format!("{}.jsonl", spec.task_id));
                bank.add_task(random_trials(ctx, &space, &shell, &ds, trials)?)?;
                eprintln!("{}: {} trials", spec.task_id, trials);
            }
            write_json(&out.join("specs.json"), &specs)?;
            save_bank(&bank, &out.join("bank.jsonl"))?;
            println!("{}", out.join("bank.jsonl").display());
        }
        BankCmd::Ingest {
            bank,
            dataset,
            task_id,
            trials,
        } => {
            let ds = load_dataset(&dataset, ctx.seed)?;
            let base = bank.parent().unwrap_or(Path::new("."));
            let dataset_ref = dataset.strip_prefix(base).unwrap_or(&dataset).to_path_buf();
            let shell = TaskRecord::new(&task_id, ds.level, dataset_ref);
            let trials = trials.unwrap_or(ctx.settings.suite.trials_per_task);
            let mut added = TaskModelBank::new();
            added.add_task(random_trials(ctx, &ctx.space()?, &shell, &ds, trials)?)?;
            append_bank(&added, &bank)?;
            println!("appended {trials} trials for {task_id}");
        }
        BankCmd::Stats { bank, out } => {
            let loaded = load_bank(&bank)?;
            let stats: Vec<TaskStats> = loaded
                .tasks()
                .iter()
                .map(|t| TaskStats {
                    task_id: t.task_id.clone(),
                    level: t.level.to_string(),
                    trials: t.trials.len(),
                    best_val: t.best_val(),
                    median_val: t.median_val(),
                    best_config: t
                        .trials
                        .iter()
                        .max_by(|a, b| a.val_metric.total_cmp(&b.val_metric))
                        .map(|r| r.config.to_string()),
                })
                .collect();
            for s in &stats {
                println!(
                    "{}\t{}\t{}\t{:.4}\t{:.4}",
                    s.task_id,
                    s.level,
                    s.trials,
                    s.best_val.unwrap_or(f64::NAN),
                    s.median_val.unwrap_or(f64::NAN)
                );
            }
            write_json(&out.join("bank_stats.json"), &stats)?;
        }
        BankCmd::Process { bank, net, out } => {
            let loaded = load_bank(&bank)?;
            let setup = ctx.setup(ProjectionNet::load(&net)?)?;
            let tasks: IndexMap<&str, &TaskRecord> =
                loaded.tasks().iter().map(|t| (t.task_id.as_str(), t)).collect();
            let entries = preprocess_bank(
                &loaded,
                |id| bank_dataset(&bank, tasks[id], ctx.seed).map_err(to_core),
                &setup,
            )?;
            fs::create_dir_all(&out)?;
            save_processed(&entries, &out.join("processed.jsonl"))?;
            println!("{}", out.join("processed.jsonl").display());
        }
    }
    Ok(())
}

fn to_core(e: anyhow::Error) -> autotransfer::Error {
    autotransfer::Error::InvalidArgument(format!("{e:#}"))
}

fn embed_cmd(ctx: &Ctx, cmd: EmbedCmd) -> Result<()> {
    match cmd {
        EmbedCmd::Compute {
            dataset,
            task_id,
            bank,
            out,
        } => {
            let inputs: Vec<(String, GraphDataset)> = match (dataset, bank) {
                (Some(path), _) => {
                    let id = task_id.context("--task-id is required with --dataset")?;
                    vec![(id, load_dataset(&path, ctx.seed)?)]
                }
                (None, Some(bank)) => {
                    let loaded = load_bank(&bank)?;
                    loaded
                        .tasks()
                        .iter()
                        .map(|t| Ok((t.task_id.clone(), bank_dataset(&bank, t, ctx.seed)?)))
                        .collect::<Result<_>>()?
                }
                (None, None) => bail!("pass --dataset or --bank"),
            };
            let anchors = ctx.anchors();
            let lines: Vec<FeatureLine> = inputs
                .iter()
                .map(|(id, ds)| {
                    let FeatureReport {
                        feature,
                        per_anchor_alpha,
                    } = task_feature(
                        ds,
                        &anchors,
                        &ctx.settings.suite.feature,
                        feature_seed(ctx.feature_master(), id),
                    )?;
                    Ok(FeatureLine {
                        task_id: id.clone(),
                        z_f: feature.values.to_vec(),
                        per_anchor_alpha,
                    })
                })
                .collect::<Result<_>>()?;
            fs::create_dir_all(&out)?;
            let path = out.join("features.jsonl");
            let text: String = lines
                .iter()
                .map(|l| serde_json::to_string(l).map(|s| s + "\n"))
                .collect::<serde_json::Result<_>>()?;
            fs::write(&path, text)?;
            println!("{}", path.display());
        }
        EmbedCmd::TrainProjection {
            features,
            oracle,
            out,
        } => {
            let text = fs::read_to_string(&features)
                .with_context(|| format!("reading {}", features.display()))?;
            let mut map = IndexMap::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let f: FeatureLine = serde_json::from_str(line)?;
                map.insert(f.task_id, TaskFeature::from_raw(f.z_f)?);
            }
            let distances = OracleDistances::read_csv(&oracle)?;
            let net = train_projection(&map, &distances, &ctx.settings.projection, ctx.seed)?;
            fs::create_dir_all(&out)?;
            net.save(&out.join("projection.json"))?;
            println!("{}", out.join("projection.json").display());
        }
    }
    Ok(())
}

fn oracle_distances(ctx: &Ctx, bank: &Path, out: &Path) -> Result<()> {
    let loaded = load_bank(bank)?;
    let anchors = ctx.anchors();
    let oracle_seed = derive_seed(ctx.seed, &[3]);
    let profiles = loaded
        .tasks()
        .iter()
        .map(|t| {
            let ds = bank_dataset(bank, t, ctx.seed)?;
            Ok(anchor_profile(
                &t.task_id,
                &ds,
                &anchors,
                &ctx.settings.suite.oracle,
                oracle_seed,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let distances = similarity_matrix(&profiles)?;
    fs::create_dir_all(out)?;
    distances.write_csv(&out.join("distances.csv"))?;
    write_json(&out.join("profiles.json"), &profiles)?;
    println!("{}", out.join("distances.csv").display());
    Ok(())
}

fn search_run(ctx: &Ctx, run: SearchRun) -> Result<()> {
    let space = ctx.space()?;
    let dataset = load_dataset(&run.dataset, ctx.seed)?;
    let budget = SearchBudget::new(run.trials, run.warmup, rayon::current_num_threads())?;
    let cfg = &ctx.settings.search;
    let eval_fn = |c: &autotransfer::space::DesignConfig, i: usize| {
        let (_, rec) = evaluate_config(c, &dataset, derive_seed(ctx.seed, &[7, i as u64]))?;
        Ok((rec.val_metric, rec.test_metric))
    };
    let outcome = match run.prior {
        PriorArg::Uniform => {
            let prior = DesignDistribution::uniform(&space);
            let result = search(run.algo, &space, &prior, &budget, cfg, eval_fn, ctx.seed)?;
            AutoTransferOutcome {
                result,
                prior,
                subset: vec![],
            }
        }
        PriorArg::Transfer => {
            let bank = load_bank(&run.bank)?.without(&run.task_id);
            let net_path = run
                .net
                .as_deref()
                .context("--net is required for a transfer prior")?;
            let mut setup = ctx.setup(ProjectionNet::load(net_path)?)?;
            if let Some(d) = run.d_thres {
                setup.transfer.d_thres = d;
            }
            let entries: Vec<ProcessedBankEntry> = match &run.processed {
                Some(p) => load_processed(p)?
                    .into_iter()
                    .filter(|e| e.task_id != run.task_id)
                    .collect(),
                None => {
                    let tasks: IndexMap<&str, &TaskRecord> =
                        bank.tasks().iter().map(|t| (t.task_id.as_str(), t)).collect();
                    preprocess_bank(
                        &bank,
                        |id| bank_dataset(&run.bank, tasks[id], ctx.seed).map_err(to_core),
                        &setup,
                    )?
                }
            };
            autotransfer_search(
                &entries,
                &run.task_id,
                &dataset,
                &setup,
                run.algo,
                &budget,
                cfg,
                eval_fn,
                ctx.seed,
            )?
        }
    };
    write_json(&run.out, &outcome)?;
    println!(
        "best val {:.4} after {} trials -> {}",
        outcome.result.best_val().unwrap_or(f64::NAN),
        outcome.result.trials.len(),
        run.out.display()
    );
    Ok(())
}

fn eval_cmd(ctx: &Ctx, cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Loo { specs, out } => {
            let suite = Suite::build(ctx.specs(specs.as_deref())?, ctx.space()?, ctx.suite_config())?;
            let report = evaluate_loo(
                &suite.features,
                &suite.normloss,
                &suite.oracle,
                &ctx.settings.projection,
                ctx.seed,
            )?;
            fs::create_dir_all(&out)?;
            suite.oracle.write_csv(&out.join("distances.csv"))?;
            write_json(&out.join("loo.json"), &report)?;
            for (name, (mean, std)) in [
                ("embedding", report.embedding),
                ("feature", report.feature),
                ("normalized-loss", report.normalized_loss),
            ] {
                println!("{name}\t{mean:.3} ± {std:.3}");
            }
        }
        EvalCmd::Curves {
            specs,
            n_seeds,
            out,
        } => {
            let suite = Suite::build(ctx.specs(specs.as_deref())?, ctx.space()?, ctx.suite_config())?;
            let c = &ctx.settings.curves;
            let cfg = EfficiencyConfig {
                methods: vec![
                    Method::new(Algorithm::Random, PriorKind::Transfer, c.short_trials, c.short_trials)?,
                    Method::new(Algorithm::Random, PriorKind::Uniform, c.short_trials, c.short_trials)?,
                    Method::new(Algorithm::Tpe, PriorKind::Uniform, c.long_trials, c.tpe_warmup)?,
                ],
                n_seeds: n_seeds.unwrap_or(c.n_seeds),
                target_method: 2,
                projection: ctx.settings.projection.clone(),
                transfer: ctx.settings.transfer.clone(),
                search: ctx.settings.search.clone(),
                seed: ctx.seed,
            };
            let report = efficiency_curves(&suite, &suite.task_ids(), &cfg)?;
            fs::create_dir_all(&out)?;
            write_curves_csv(&report.curves, &out.join("curves.csv"))?;
            fs::write(out.join("curves.svg"), curves_svg(&report.curves))?;
            write_json(&out.join("efficiency.json"), &report)?;
            for curve in &report.curves {
                println!("{}\t{:.4}", curve.method, curve.mean.last().copied().unwrap_or(f64::NAN));
            }
        }
    }
    Ok(())
}
