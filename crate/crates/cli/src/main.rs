use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nunet::checkpoint;
use nunet::data::{load_dataset, synth_generate, Split, SynthConfig};
use nunet::decoder::{aggregate_contribution, NUM_NUTRIENTS, NUTRIENTS};
use nunet::encoder::ModelConfig;
use nunet::gradsuite::{run_suite, GRADCHECK_EPS, GRADCHECK_TOLERANCE};
use nunet::training::{
    ablate, eval_policy, evaluate, label_scale, predict_all, prepare, train, EvalReport, ABLATION_VARIANTS,
};
use nunet::{Error, NuNet, Result, RunConfig};

const THREADS_ENV: &str = "NUNET_THREADS";

#[derive(Parser)]
#[command(name = "nunet", version, about = "RGB-D nutrition estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGB-D dataset with analytic labels.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train_log.csv, checkpoints and model.ckpt.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; writes eval.csv.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Replace model predictions with the labels.
        #[arg(long, hide = true)]
        oracle_predictions: bool,
    },
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        /// Run config whose model section sets the fusion and full-model shapes.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Elements checked per parameter tensor (default: all).
        #[arg(long)]
        per_tensor: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate fusion and scale variants; writes ablate.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variant names (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Per-scale share of the final estimate; writes contrib.csv.
    Contrib {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run config the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}

fn resolve(args: &RunArgs, command: &str) -> Result<(RunConfig, PathBuf, PathBuf)> {
    let mut rc = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.data {
        rc.data = Some(d.clone());
    }
    if let Some(o) = &args.out {
        rc.out = Some(o.clone());
    }
    let data = rc.data.clone().ok_or_else(|| usage("no data root: pass --data or set `data` in the config"))?;
    let out = rc.out.clone().ok_or_else(|| usage("no output dir: pass --out or set `out` in the config"))?;
    rc.command.insert("command".into(), command.into());
    Ok((rc, data, out))
}

fn cmd_synth(n: usize, seed: u64, out: &Path) -> Result<()> {
    let s = synth_generate(n, seed, &SynthConfig::default(), out)?;
    println!("wrote {} dishes to {} ({} train, {} test)", s.n, out.display(), s.train, s.test);
    println!("{:<10} {:>12} {:>12}", "nutrient", "min", "max");
    for j in 0..NUM_NUTRIENTS {
        println!("{:<10} {:>12.4} {:>12.4}", NUTRIENTS[j], s.label_min[j], s.label_max[j]);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    run: &RunArgs,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let (mut rc, data, out) = resolve(run, "train")?;
    if let Some(v) = epochs {
        rc.train.epochs = v;
    }
    if max_steps.is_some() {
        rc.train.max_steps = max_steps;
    }
    if let Some(v) = batch_size {
        rc.train.batch_size = v;
    }
    if let Some(v) = lr {
        rc.train.learning_rate = v;
    }
    if let Some(v) = seed {
        rc.train.seed = v;
    }
    rc.validate()?;
    let train_set = load_dataset(&data, Split::Train)?;
    let test_set = load_dataset(&data, Split::Test)?;
    if rc.auto_output_scale && !train_set.is_empty() {
        rc.model.output_scale = label_scale(&train_set);
    }
    rc.write_resolved(&out)?;
    let (net, mut params) = NuNet::new(&rc.model)?;
    let eval_set = prepare(&test_set, &eval_policy(&net))?;
    let outcome = train(&net, &mut params, &train_set, &eval_set, &rc.train, Some(&out))?;
    println!(
        "trained {} steps over {} epochs; model saved to {}",
        outcome.steps,
        outcome.epochs.len(),
        out.join("model.ckpt").display()
    );
    if let Some(report) = outcome.epochs.last().and_then(|e| e.eval.as_ref()) {
        print!("{}", report.table());
    }
    Ok(())
}

struct Loaded {
    rc: RunConfig,
    net: NuNet,
    params: nunet::numerics::ParamSet,
    out: PathBuf,
}

fn load_checkpoint(args: &CheckpointArgs, command: &str) -> Result<Loaded> {
    let model = match &args.config {
        Some(p) => RunConfig::load(p)?.model,
        None => checkpoint::read(&args.checkpoint)?.config,
    };
    let (net, mut params) = NuNet::new(&model)?;
    checkpoint::load_into(&args.checkpoint, &model, &mut params)?;
    let out = match &args.out {
        Some(o) => o.clone(),
        None => args.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let mut rc = RunConfig {
        model,
        data: Some(args.data.clone()),
        out: Some(out.clone()),
        ..RunConfig::default()
    };
    rc.command.insert("command".into(), command.into());
    rc.command.insert("checkpoint".into(), args.checkpoint.display().to_string());
    rc.command.insert(
        "split".into(),
        match args.split {
            SplitArg::Train => "train",
            SplitArg::Test => "test",
        }
        .into(),
    );
    Ok(Loaded { rc, net, params, out })
}

fn cmd_eval(args: &CheckpointArgs, oracle: bool) -> Result<()> {
    let l = load_checkpoint(args, "eval")?;
    let samples = prepare(&load_dataset(&args.data, args.split.into())?, &eval_policy(&l.net))?;
    let truths: Vec<_> = samples.iter().map(|s| s.label).collect();
    let report = if oracle {
        EvalReport::compute(&truths, &truths)?
    } else {
        evaluate(&l.net, &l.params, &samples)?
    };
    l.rc.write_resolved(&l.out)?;
    let mut w = csv::Writer::from_path(l.out.join("eval.csv"))?;
    w.write_record(["nutrient", "mae", "mape"])?;
    for j in 0..NUM_NUTRIENTS {
        w.write_record([NUTRIENTS[j].to_string(), report.mae[j].to_string(), report.mape[j].to_string()])?;
    }
    w.write_record(["mean".to_string(), String::new(), report.mean_mape.to_string()])?;
    w.flush()?;
    println!("{} samples", report.n);
    print!("{}", report.table());
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, per_tensor: Option<usize>, seed: u64) -> Result<bool> {
    let model = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::tiny(),
    };
    let entries = run_suite(&model, per_tensor.unwrap_or(usize::MAX), seed)?;
    println!("eps = {GRADCHECK_EPS:e}, tolerance = {GRADCHECK_TOLERANCE:e}");
    println!("{:<22} {:>8} {:>14} {:>6}", "module", "checked", "worst rel err", "");
    let mut ok = true;
    for e in &entries {
        let pass = e.passed();
        ok &= pass;
        println!(
            "{:<22} {:>8} {:>14.3e} {:>6}",
            e.name,
            e.report.checked,
            e.report.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_ablate(run: &RunArgs, variants: &[String]) -> Result<()> {
    let (mut rc, data, out) = resolve(run, "ablate")?;
    let variants: Vec<String> = if variants.is_empty() {
        ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect()
    } else {
        variants.to_vec()
    };
    rc.command.insert("variants".into(), variants.join(","));
    rc.validate()?;
    let train_set = load_dataset(&data, Split::Train)?;
    let test_set = load_dataset(&data, Split::Test)?;
    if rc.auto_output_scale && !train_set.is_empty() {
        rc.model.output_scale = label_scale(&train_set);
    }
    rc.write_resolved(&out)?;
    let test_set = prepare(&test_set, &nunet::data::AugmentPolicy::eval(rc.model.image_height, rc.model.image_width))?;
    let rows = ablate(&rc.model, &rc.train, &train_set, &test_set, &variants, Some(&out))?;
    println!("{:<18} {:>10} {:>10} {:>12} {:>10}", "variant", "params", "fusion", "train loss", "mean MAPE");
    for r in rows {
        println!(
            "{:<18} {:>10} {:>10} {:>12.4} {:>10.3}",
            r.variant, r.params, r.fusion_params, r.final_train_loss, r.mean_mape
        );
    }
    Ok(())
}

fn cmd_contrib(args: &CheckpointArgs) -> Result<()> {
    let l = load_checkpoint(args, "contrib")?;
    let samples = prepare(&load_dataset(&args.data, args.split.into())?, &eval_policy(&l.net))?;
    let preds = predict_all(&l.net, &l.params, &samples)?;
    let table = aggregate_contribution(&preds)?;
    l.rc.write_resolved(&l.out)?;
    let mut w = csv::Writer::from_path(l.out.join("contrib.csv"))?;
    let mut header = vec!["scale".to_string()];
    header.extend(NUTRIENTS.iter().map(|n| n.to_string()));
    w.write_record(&header)?;
    print!("{:<6}", "scale");
    for n in NUTRIENTS {
        print!(" {n:>10}");
    }
    println!();
    let mut total = [0.0; NUM_NUTRIENTS];
    for (k, row) in table.iter().enumerate() {
        let scale = nunet::decoder::FIRST_DECODER_SCALE + k;
        let mut rec = vec![scale.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
        print!("{scale:<6}");
        for j in 0..NUM_NUTRIENTS {
            print!(" {:>+10.3}", row[j]);
            total[j] += row[j];
        }
        println!();
    }
    w.flush()?;
    print!("{:<6}", "sum");
    for t in total {
        print!(" {t:>10.3}");
    }
    println!();
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::Synth { n, seed, out } => cmd_synth(n, seed, &out)?,
        Command::Train {
            run,
            epochs,
            max_steps,
            batch_size,
            lr,
            seed,
        } => cmd_train(&run, epochs, max_steps, batch_size, lr, seed)?,
        Command::Eval {
            ckpt,
            oracle_predictions,
        } => cmd_eval(&ckpt, oracle_predictions)?,
        Command::Gradcheck {
            config,
            per_tensor,
            seed,
        } => return cmd_gradcheck(config.as_deref(), per_tensor, seed),
        Command::Ablate { run, variants } => cmd_ablate(&run, &variants)?,
        Command::Contrib { ckpt } => cmd_contrib(&ckpt)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
