use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use shiftnet::accounting::{self, reduction_table_csv, reduction_table_text, ReductionRow};
use shiftnet::analysis::{block_contributions, contributions_csv, group_correlations, record_trace};
use shiftnet::nets::{arch_by_name, reduce_resnet_config, resnet_config, shiftresnet_config, RESNET_DEPTHS};
use shiftnet::pipeline::{load_cifar10, load_cifar100, Dataset, EvalResult, Split};
use shiftnet::{
    cost_report, evaluate, load_checkpoint, run_bench, synth_dataset, train, ArchConfig, Network, ReduceMode,
    SuiteConfig, TrainOptions, TrainSchedule,
};

/// Environment variable naming the default dataset directory.
const DATA_ENV: &str = "SHIFTNET_DATA";

#[derive(Parser)]
#[command(name = "shiftnet", version, about = "Build, count, train, evaluate, benchmark and analyze shift networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP counts of an architecture.
    Count(CountArgs),
    /// Parameter and FLOP reduction rates of every ShiftResNet against its ResNet.
    Table(TableArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Run kernel microbenchmarks.
    Bench(BenchArgs),
    /// Channel correlations and contribution norms of one CSC module.
    Analyze(AnalyzeArgs),
    /// Dump or check architecture config files.
    Arch {
        #[command(subcommand)]
        command: ArchCommand,
    },
}

#[derive(Subcommand)]
enum ArchCommand {
    /// Print the config text of a named architecture.
    Dump(ArchArgs),
    /// Validate a config file and print its parameter count.
    Check {
        file: PathBuf,
        /// Emit `name,modules,params` CSV.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReduceArg {
    Module,
    Net,
}

impl From<ReduceArg> for ReduceMode {
    fn from(r: ReduceArg) -> Self {
        match r {
            ReduceArg::Module => ReduceMode::ModuleWise,
            ReduceArg::Net => ReduceMode::NetWise,
        }
    }
}

#[derive(Args, Clone)]
struct ArchArgs {
    /// resnet{20,56,110}, shiftresnet{20,56,110}, shiftnet{a,b,c}.
    #[arg(long, required_unless_present = "arch_file")]
    arch: Option<String>,
    /// Architecture config file, in place of `--arch`.
    #[arg(long, conflicts_with = "arch")]
    arch_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    expansion: f64,
    /// Classifier width; defaults to 1000 for shiftnet{a,b,c} and 10 otherwise.
    #[arg(long)]
    classes: Option<usize>,
    /// Shrink a ResNet to `--target-params` by scaling module or network widths.
    #[arg(long, requires = "target_params")]
    reduce: Option<ReduceArg>,
    #[arg(long, requires = "reduce")]
    target_params: Option<usize>,
}

impl ArchArgs {
    fn is_imagenet(&self) -> bool {
        self.arch
            .as_deref()
            .is_some_and(|a| a.to_ascii_lowercase().starts_with("shiftnet"))
    }

    fn classes(&self) -> usize {
        self.classes.unwrap_or(if self.is_imagenet() { 1000 } else { 10 })
    }

    fn resolve(&self) -> Result<ArchConfig> {
        if let Some(path) = &self.arch_file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(ArchConfig::from_text(&text)?);
        }
        let name = self.arch.as_deref().unwrap_or_default();
        if let (Some(mode), Some(target)) = (self.reduce, self.target_params) {
            let depth = name
                .to_ascii_lowercase()
                .strip_prefix("resnet")
                .and_then(|d| d.parse::<usize>().ok())
                .with_context(|| format!("--reduce needs a resnet{{20,56,110}} architecture, got {name:?}"))?;
            let (cfg, _) = reduce_resnet_config(depth, target, mode.into(), self.classes())?;
            return Ok(cfg);
        }
        Ok(arch_by_name(name, self.expansion, self.classes())?)
    }
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Square input side; defaults to 224 for shiftnet{a,b,c} and 32 otherwise.
    #[arg(long)]
    input: Option<usize>,
    /// Channels of a lone `shift_layer`.
    #[arg(long, default_value_t = 16)]
    channels: usize,
    /// Kernel side of a lone `shift_layer`.
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Emit CSV instead of text.
    #[arg(long)]
    csv: bool,
    /// Report every layer rather than totals only.
    #[arg(long)]
    layers: bool,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long, default_value_t = 32)]
    input: usize,
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CIFAR binary directory, or `synth`; defaults to $SHIFTNET_DATA.
    #[arg(long)]
    data: Option<String>,
    /// Examples in the synthetic dataset.
    #[arg(long, default_value_t = 256)]
    synth_size: usize,
    #[arg(long, default_value_t = 10)]
    synth_classes: usize,
    #[arg(long, default_value_t = 32)]
    synth_side: usize,
    #[arg(long, default_value_t = 3)]
    synth_seed: u64,
    /// Keep only the first N examples of each split.
    #[arg(long)]
    subset: Option<usize>,
}

impl DataArgs {
    fn source(&self) -> Result<String> {
        match &self.data {
            Some(d) => Ok(d.clone()),
            None => std::env::var(DATA_ENV)
                .with_context(|| format!("no --data given and ${DATA_ENV} is unset")),
        }
    }

    /// `(train, test)`; the synthetic dataset serves as both.
    fn load(&self) -> Result<(Dataset, Dataset)> {
        let src = self.source()?;
        let (train, test) = if src == "synth" {
            let d = synth_dataset(
                self.synth_size,
                self.synth_classes,
                (3, self.synth_side, self.synth_side),
                self.synth_seed,
            )?;
            (d.clone(), d)
        } else {
            let dir = Path::new(&src);
            if dir.join("train.bin").exists() {
                load_cifar100(dir)?
            } else {
                load_cifar10(dir)?
            }
        };
        match self.subset {
            Some(n) => Ok((train.take(n)?, test.take(n)?)),
            None => Ok((train, test)),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 64000)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    /// Comma-separated iterations at which the learning rate drops tenfold.
    #[arg(long, value_delimiter = ',', default_value = "32000,48000")]
    decay: Vec<usize>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random crops and flips.
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Score the whole training set in eval mode every N iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Training log as CSV (`iter,lr,loss,acc`).
    #[arg(long)]
    log_csv: Option<PathBuf>,
    /// Checkpoint manifest path; tensors go to `<out>.bin`.
    #[arg(long)]
    out: PathBuf,
    /// Emit the final summary as CSV.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Which split of a CIFAR directory to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct BenchArgs {
    /// Suite config; the built-in suite runs when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the CSV to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// CSC module id such as `g1.b0`.
    #[arg(long)]
    module: String,
    /// Correlation CSV (`group,row,col,value`).
    #[arg(long)]
    out: PathBuf,
    /// Contribution CSV; defaults to `<out>` with a `.contrib.csv` suffix.
    #[arg(long)]
    contrib_out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    max_examples: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

fn millions(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

fn count(args: &CountArgs) -> Result<String> {
    let side = args.input.unwrap_or(if args.arch.is_imagenet() { 224 } else { 32 });
    let report = if args.arch.arch.as_deref() == Some("shift_layer") {
        accounting::shift_layer_report(args.channels, args.kernel, side)?
    } else {
        let cfg = args.arch.resolve()?;
        cost_report(&cfg, (cfg.network.input_channels, side, side))?
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut s = String::new();
    match (args.layers, args.csv) {
        (true, true) => s.push_str(&report.to_csv()),
        (true, false) => s.push_str(&report.to_text()),
        (false, true) => {
            s.push_str("model,params,macs,flops_2x\n");
            let _ = writeln!(s, "{},{},{},{}", report.model, report.params, report.macs, report.flops_2x);
        }
        (false, false) => {
            let _ = writeln!(s, "model: {}", report.model);
            let _ = writeln!(s, "params: {} ({})", report.params, millions(report.params));
            let _ = writeln!(s, "macs: {} ({})", report.macs, millions(report.macs));
            let _ = writeln!(s, "flops_2x: {} ({})", report.flops_2x, millions(report.flops_2x));
        }
    }
    Ok(s)
}

fn table(args: &TableArgs) -> Result<String> {
    let input = (3, args.input, args.input);
    let mut rows = Vec::new();
    for depth in RESNET_DEPTHS {
        let base = cost_report(&resnet_config(depth, 10)?, input)?;
        for eps in [1.0, 3.0, 6.0, 9.0] {
            let shift = cost_report(&shiftresnet_config(depth, eps, 10)?, input)?;
            rows.push(ReductionRow::new(&base, &shift, eps)?);
        }
    }
    Ok(if args.csv {
        reduction_table_csv(&rows)
    } else {
        reduction_table_text(&rows)
    })
}

fn train_cmd(args: &TrainArgs) -> Result<String> {
    let cfg = args.arch.resolve()?;
    let (data, _) = args.data.load()?;
    let (decay, dropped): (Vec<usize>, Vec<usize>) = args.decay.iter().partition(|&&d| d < args.iters);
    if !dropped.is_empty() {
        eprintln!("note: decay points {dropped:?} lie beyond --iters {} and are ignored", args.iters);
    }
    let schedule = TrainSchedule {
        base_lr: args.lr,
        batch_size: args.batch,
        lr_decay_points: decay,
        max_iters: args.iters,
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        seed: args.seed,
        augment: args.augment,
        ..TrainSchedule::default()
    };
    let mut net = Network::<f32>::new(cfg, args.seed)?;
    eprintln!(
        "training {} ({} params) on {} examples for {} iterations",
        net.name(),
        net.num_parameters(),
        data.len(),
        args.iters
    );
    let opts = TrainOptions {
        log_every: args.log_every,
        checkpoint: Some(args.out.clone()),
        stop_at_accuracy: None,
        eval_every: args.eval_every,
    };
    let log = train(&mut net, &data, &schedule, &opts)?;
    for r in &log.records {
        eprintln!("iter {:>6}  lr {:.4}  loss {:.4}  acc {:.3}", r.iter, r.lr, r.loss, r.acc);
    }
    for e in &log.evals {
        eprintln!("eval after {:>6}  top1 {:.4}  loss {:.4}", e.iter + 1, e.top1, e.loss);
    }
    if let Some(p) = &args.log_csv {
        log.write_csv(p)?;
    }
    let last = log.records.last().context("training produced no log records")?;
    Ok(if args.csv {
        format!(
            "model,iters,loss,acc,checkpoint\n{},{},{},{},{}\n",
            net.name(),
            last.iter + 1,
            last.loss,
            last.acc,
            args.out.display()
        )
    } else {
        format!(
            "model: {}\niters: {}\nloss: {:.4}\nacc: {:.4}\ncheckpoint: {}\n",
            net.name(),
            last.iter + 1,
            last.loss,
            last.acc,
            args.out.display()
        )
    })
}

fn eval_cmd(args: &EvalArgs) -> Result<String> {
    let (mut net, manifest) = load_checkpoint(&args.ckpt)?;
    let (train, test) = args.data.load()?;
    let data = match args.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    let EvalResult { top1, loss } = evaluate(&mut net, &data, args.batch)?;
    let split = match data.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    Ok(if args.csv {
        format!("model,iteration,split,examples,top1,loss\n{},{},{split},{},{top1},{loss}\n", manifest.name, manifest.iteration, data.len())
    } else {
        format!(
            "model: {}\niteration: {}\nsplit: {split} ({} examples)\ntop1: {:.4}\nloss: {:.4}\n",
            manifest.name,
            manifest.iteration,
            data.len(),
            top1,
            loss
        )
    })
}

fn bench_cmd(args: &BenchArgs) -> Result<String> {
    let suite = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SuiteConfig::from_text(&text)?
        }
        None => SuiteConfig::default_suite(),
    };
    let csv = run_bench(&suite)?.to_csv();
    if let Some(p) = &args.out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(csv)
}

fn contrib_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".contrib.csv");
    PathBuf::from(s)
}

fn analyze_cmd(args: &AnalyzeArgs) -> Result<String> {
    let (mut net, _) = load_checkpoint(&args.ckpt)?;
    let (_, data) = args.data.load()?;
    let trace = record_trace(&mut net, &args.module, &data, args.batch, args.max_examples)?;
    let mut corr = String::from("group,row,col,value\n");
    let groups = group_correlations(&trace)?;
    for (g, m) in &groups {
        for i in 0..m.dim() {
            for j in 0..m.dim() {
                let _ = writeln!(corr, "{g},{i},{j},{}", m.get(i, j));
            }
        }
    }
    let block = net.csc_block(&args.module).context("module vanished after tracing")?;
    let (norms, _) = block_contributions(block)?;
    let cpath = args.contrib_out.clone().unwrap_or_else(|| contrib_path(&args.out));
    fs::write(&args.out, corr).with_context(|| format!("writing {}", args.out.display()))?;
    fs::write(&cpath, contributions_csv(&norms, &block.shift))
        .with_context(|| format!("writing {}", cpath.display()))?;
    Ok(format!(
        "module: {}\nobservations: {}\ngroups: {}\nchannels: {}\ncorrelations: {}\ncontributions: {}\n",
        args.module,
        trace.observations(),
        groups.len(),
        norms.len(),
        args.out.display(),
        cpath.display()
    ))
}

fn arch_cmd(cmd: &ArchCommand) -> Result<String> {
    match cmd {
        ArchCommand::Dump(a) => Ok(a.resolve()?.to_text()?),
        ArchCommand::Check { file, csv } => {
            let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            let cfg = ArchConfig::from_text(&text)?;
            let modules = cfg.modules()?.len();
            let params = accounting::count_params_config(&cfg)?;
            Ok(if *csv {
                format!("name,modules,params\n{},{modules},{params}\n", cfg.name())
            } else {
                format!("{}: ok, {modules} modules, {params} params\n", cfg.name())
            })
        }
    }
}

fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Count(a) => count(a),
        Command::Table(a) => table(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Arch { command } => arch_cmd(command),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
