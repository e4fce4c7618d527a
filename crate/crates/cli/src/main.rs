use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use disparse_core::analysis::{density_profile, layerwise_iou, pairwise_iou, DEFAULT_DROP_THRESHOLD};
use disparse_core::arbiter::{ArbiterKind, ArbiterRule};
use disparse_core::config::{ExperimentConfig, Method, Paradigm};
use disparse_core::engine::Scope;
use disparse_core::error::{Error, Result};
use disparse_core::harness::{run, write_run, MaskFile};
use disparse_core::mask::Mask;
use disparse_core::model::Checkpoint;
use disparse_core::report::report_paths;

/// Disentangled sparsification of multitask networks.
#[derive(Parser, Debug)]
#[command(name = "disparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dense model (produces checkpoints for `prune`).
    TrainDense(RunArgs),
    /// Prune at initialization, then train with fixed masks.
    TrainStatic(RunArgs),
    /// Train with scheduled prune-and-grow mask updates.
    TrainDynamic(RunArgs),
    /// Prune a dense checkpoint, then fine-tune with fixed masks.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Dense `checkpoint.json` to prune.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Layer-wise IoU of task masks.
    AnalyzeMasks(AnalyzeArgs),
    /// Run a grid of sparsities and methods, one isolated directory each.
    Sweep(SweepArgs),
    /// Aggregate run records into a comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target sparsity; a comma-separated list runs each level in turn.
    #[arg(long, value_delimiter = ',')]
    sparsity: Vec<f64>,
    /// `disparse`, `baseline-combined`, `random` or `magnitude`.
    #[arg(long)]
    method: Option<String>,
    /// `or` or `majority`.
    #[arg(long)]
    arbiter: Option<String>,
    /// Majority vote keeps a parameter on an exact tie (even task counts).
    #[arg(long)]
    tie_keep: Option<bool>,
    /// `global` or `erk`.
    #[arg(long)]
    scope: Option<String>,
    /// Seed to run; repeat for several. Overrides the config's list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output root; run directories are created below it.
    #[arg(long, env = "DISPARSE_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// One mask file (its per-task masks are compared) or several (their
    /// shared masks are compared).
    #[arg(required = true)]
    masks: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DROP_THRESHOLD)]
    threshold: f64,
    /// Also print every pairwise profile and the per-layer densities.
    #[arg(long)]
    detail: bool,
    /// Write the IoU table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// `static`, `dynamic` or `pretrained`.
    #[arg(long, default_value = "static")]
    paradigm: String,
    /// Comma-separated methods; defaults to the config's method.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Dense checkpoint for the pretrained paradigm.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories or record files; directories are searched recursively.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Write the table here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse()
}

impl RunArgs {
    fn config(&self, paradigm: Paradigm) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        c.paradigm = paradigm;
        if let [s] = self.sparsity.as_slice() {
            c.sparsity = *s;
        }
        if let Some(m) = &self.method {
            c.method = parse(m)?;
        }
        if let Some(a) = &self.arbiter {
            c.arbiter.rule = parse::<ArbiterRule>(a)?;
        }
        if let Some(t) = self.tie_keep {
            c.arbiter.tie_keep = t;
        }
        if let Some(s) = &self.scope {
            c.scope = parse::<Scope>(s)?;
        }
        if !self.seeds.is_empty() {
            c.seeds = self.seeds.clone();
        }
        if let Some(n) = self.iterations {
            c.train.iterations = n;
        }
        if let Some(o) = &self.out {
            c.output_dir = o.display().to_string();
        }
        c.validate()?;
        Ok(c)
    }
}

/// Directory of one configuration below the output root.
fn run_group_name(c: &ExperimentConfig) -> String {
    let arbiter = match (c.method, c.arbiter) {
        (Method::Disparse, ArbiterKind { rule: ArbiterRule::Majority, tie_keep: false }) => "-majority-drop-ties".to_string(),
        (Method::Disparse, a) => format!("-{}", a.rule),
        _ => String::new(),
    };
    if c.paradigm == Paradigm::Dense {
        return "dense".to_string();
    }
    format!("{}-{}{arbiter}-s{}", c.paradigm, c.method, c.sparsity)
}

fn load_checkpoint(path: Option<&Path>, config: &ExperimentConfig) -> Result<Option<Checkpoint>> {
    let path = match (path, &config.checkpoint) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Ok(None),
    };
    Checkpoint::load(&path).map(Some)
}

/// Runs every seed of `config` once per requested sparsity.
fn run_levels(args: &RunArgs, config: &ExperimentConfig, checkpoint: Option<&Checkpoint>) -> Result<()> {
    if args.sparsity.len() < 2 || config.paradigm == Paradigm::Dense {
        return run_all(config, checkpoint);
    }
    for &s in &args.sparsity {
        let mut c = config.clone();
        c.sparsity = s;
        c.validate()?;
        run_all(&c, checkpoint)?;
    }
    Ok(())
}

fn run_all(config: &ExperimentConfig, checkpoint: Option<&Checkpoint>) -> Result<()> {
    let root = Path::new(&config.output_dir).join(run_group_name(config));
    for &seed in &config.seeds {
        let out = run(config, seed, checkpoint)?;
        let dir = root.join(format!("seed-{seed}"));
        write_run(&dir, &out)?;
        let r = &out.record;
        println!(
            "{}\tseed {seed}\tsparsity {:.6}\tval_loss {:.6}\t{}",
            dir.display(),
            r.achieved_sparsity,
            r.final_val.multitask_loss,
            r.calibration
                .as_ref()
                .and_then(|c| c.diagnostic.clone())
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            let staging = p.with_file_name(format!(
                "{}.partial",
                p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
            ));
            fs::write(&staging, text)
                .and_then(|()| fs::rename(&staging, p))
                .map_err(|e| {
                    let _ = fs::remove_file(&staging);
                    Error::io(p, e)
                })
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let files = args.masks.iter().map(|p| MaskFile::load(p)).collect::<Result<Vec<_>>>()?;
    let masks: Vec<(String, Mask)> = if let [single] = files.as_slice() {
        single
            .shared_task_masks()?
            .into_iter()
            .map(|(t, m)| (t.to_string(), m))
            .collect()
    } else {
        files
            .iter()
            .zip(&args.masks)
            .map(|(f, p)| (p.display().to_string(), f.masks.shared.clone()))
            .collect()
    };
    if masks.len() < 2 {
        return Err(Error::Config(
            "need two or more masks: pass one file with per-task masks or several files".into(),
        ));
    }
    let refs: Vec<&Mask> = masks.iter().map(|(_, m)| m).collect();
    let profile = layerwise_iou(&refs)?.with_watershed(args.threshold);
    write_or_print(args.out.as_deref(), &profile.to_tsv())?;
    match &profile.watershed_layer {
        Some(l) => eprintln!("watershed layer: {l}"),
        None => eprintln!("no watershed layer at threshold {}", args.threshold),
    }
    if args.detail {
        let named = masks
            .iter()
            .map(|(n, m)| (disparse_core::mask::TaskId::new(n.clone()), m.clone()))
            .collect();
        for ((a, b), p) in pairwise_iou(&named)? {
            println!("# pair {a} {b}");
            print!("{}", p.to_tsv());
        }
        for (name, m) in &masks {
            println!("# density {name}");
            for (id, d) in density_profile(m) {
                println!("{id}\t{d}");
            }
        }
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let paradigm: Paradigm = parse(&args.paradigm)?;
    if paradigm == Paradigm::Dense {
        return Err(Error::Config("sweep runs a pruning paradigm".into()));
    }
    let base = args.run.config(paradigm)?;
    let sparsities = if args.run.sparsity.is_empty() {
        vec![0.3, 0.5, 0.7, 0.9]
    } else {
        args.run.sparsity.clone()
    };
    let methods: Vec<Method> = if args.methods.is_empty() {
        vec![base.method]
    } else {
        args.methods.iter().map(|m| parse(m)).collect::<Result<_>>()?
    };
    let checkpoint = load_checkpoint(args.checkpoint.as_deref(), &base)?;
    let mut jobs = Vec::new();
    for &method in &methods {
        for &s in &sparsities {
            let mut c = base.clone();
            c.method = method;
            c.sparsity = s;
            c.validate()?;
            for &seed in &base.seeds {
                jobs.push((c.clone(), seed));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let failures = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..args.jobs.max(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((c, seed)) = jobs.get(i) else { break };
                let dir = Path::new(&c.output_dir)
                    .join(run_group_name(c))
                    .join(format!("seed-{seed}"));
                let result = run(c, *seed, checkpoint.as_ref()).and_then(|out| {
                    write_run(&dir, &out)?;
                    println!(
                        "{}\tseed {seed}\tsparsity {:.6}\tval_loss {:.6}",
                        dir.display(),
                        out.record.achieved_sparsity,
                        out.record.final_val.multitask_loss
                    );
                    Ok(())
                });
                if let Err(e) = result {
                    failures.lock().expect("no poisoned lock").push(format!("{}: {e}", dir.display()));
                }
            });
        }
    });
    let failures = failures.into_inner().expect("no poisoned lock");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Runtime(format!("{} runs failed:\n{}", failures.len(), failures.join("\n"))))
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDense(a) => run_all(&a.config(Paradigm::Dense)?, None),
        Command::TrainStatic(a) => run_levels(&a, &a.config(Paradigm::Static)?, None),
        Command::TrainDynamic(a) => run_levels(&a, &a.config(Paradigm::Dynamic)?, None),
        Command::Prune { run, checkpoint } => {
            let c = run.config(Paradigm::Pretrained)?;
            let ck = load_checkpoint(checkpoint.as_deref(), &c)?
                .ok_or_else(|| Error::Config("prune needs --checkpoint".into()))?;
            run_levels(&run, &c, Some(&ck))
        }
        Command::AnalyzeMasks(a) => analyze(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Report(a) => {
            let table = report_paths(&a.runs)?;
            write_or_print(a.out.as_deref(), &table)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
