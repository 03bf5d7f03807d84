//! `irpatch`: generate datasets, train detectors, optimize patches,
//! evaluate them and run parameter sweeps.
//!
//! Exit codes: 0 success, 1 `--assert-ordering` violated, 2 usage or input
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use irpatch_core::attack::{make_baseline_patch, write_attack_result, BaselineKind};
use irpatch_core::config::{RunConfig, SweepParam};
use irpatch_core::detector::{read_weights, train, write_weights, DetectorWeights, Variant, STRIDE};
use irpatch_core::eval::{clean_ap, evaluate_conditions, Condition, GtMode, DETECTION_THRESHOLD};
use irpatch_core::experiment::{baselines, ordering_holds, sweep, sweep_table_csv, write_report, OPTIMIZED};
use irpatch_core::pattern::Patch;
use irpatch_core::rng::{stream, Stream};
use irpatch_core::scene::{generate_dataset, read_dataset, write_dataset, Dataset};

#[derive(Parser)]
#[command(
    name = "irpatch",
    version,
    about = "Binary adversarial patches against a thermal person detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic thermal dataset.
    GenData(GenData),
    /// Train a detector on a dataset.
    Train(TrainCmd),
    /// Optimize a patch against one or more detectors.
    Attack(AttackCmd),
    /// Evaluate patches on the test split.
    Eval(EvalCmd),
    /// Attack and evaluate once per parameter value.
    Sweep(SweepCmd),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    /// Weight file to write; the training log goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct AttackCmd {
    /// Target detector weights; repeat for an ensemble attack.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct EvalCmd {
    /// Detectors the patches were optimized against.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    /// Detectors never attacked, reported for transfer.
    #[arg(long = "held-out")]
    held_out: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// `NAME=PATH`, a PNG path (named after its file stem), or the built-in
    /// `random` / `blank` controls.
    #[arg(long = "patch", required = true)]
    patches: Vec<String>,
    /// Do not add the random and blank controls automatically.
    #[arg(long)]
    no_baselines: bool,
    #[arg(long, value_parser = parse_gt_mode)]
    gt_mode: Option<GtMode>,
    #[arg(long)]
    out: PathBuf,
    /// Exit with status 1 unless optimized > random > blank > 0 in AP drop.
    #[arg(long)]
    assert_ordering: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct SweepCmd {
    /// One of lambda, resolution, proportion.
    #[arg(long)]
    param: Option<String>,
    /// Comma-separated values; at least two.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

fn parse_gt_mode(s: &str) -> Result<GtMode, String> {
    match s {
        "dataset" => Ok(GtMode::Dataset),
        "clean-model-output" => Ok(GtMode::CleanModelOutput),
        _ => Err(format!("unknown gt mode {s:?}; expected dataset or clean-model-output")),
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let ds = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    if let Some(s) = ds
        .scenes
        .iter()
        .find(|s| s.height() % STRIDE != 0 || s.width() % STRIDE != 0)
    {
        bail!(
            "scene {} is {}x{}; detector input sides must be multiples of {STRIDE}",
            s.id,
            s.width(),
            s.height()
        );
    }
    Ok(ds)
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<DetectorWeights>> {
    paths
        .iter()
        .map(|p| read_weights(p).with_context(|| format!("reading weights {}", p.display())))
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(cmd: GenData) -> Result<()> {
    let mut cfg = cmd.config.load()?;
    if let Some(c) = cmd.count {
        cfg.dataset.count = c;
    }
    if let Some(s) = cmd.seed {
        cfg.dataset.seed = s;
    }
    if let Some(s) = cmd.size {
        cfg.dataset.scene.size = s;
    }
    if cfg.dataset.count == 0 {
        bail!("--count must be at least 1");
    }
    let ds = generate_dataset(cfg.dataset.count, cfg.dataset.seed, &cfg.dataset.scene)?;
    write_dataset(&ds, &cmd.out).with_context(|| format!("writing dataset to {}", cmd.out.display()))?;
    println!(
        "wrote {} scenes ({} train / {} test, {} placement shortfalls) to {}",
        ds.scenes.len(),
        ds.manifest.train.len(),
        ds.manifest.test.len(),
        ds.manifest.placement_shortfall.len(),
        cmd.out.display()
    );
    Ok(())
}

fn train_cmd(cmd: TrainCmd) -> Result<()> {
    let mut cfg = cmd.config.load()?;
    if let Some(v) = cmd.variant {
        cfg.detector.variant = v;
    }
    if let Some(e) = cmd.epochs {
        cfg.detector.train.epochs = e;
    }
    if let Some(s) = cmd.seed {
        cfg.detector.train.seed = s;
    }
    let variant = Variant::by_name(&cfg.detector.variant)?;
    let ds = load_dataset(&cmd.data)?;
    let (tr, te) = (ds.train_scenes(), ds.test_scenes());
    let report = train(&tr, &te, variant, &cfg.detector.train)?;
    if let Some(parent) = cmd.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_weights(&report.weights, &cmd.out)?;
    let log = cmd.out.with_extension("log.csv");
    std::fs::write(&log, report.log_csv()).with_context(|| format!("writing {}", log.display()))?;
    let ap = |set: &[&irpatch_core::scene::Scene]| -> Result<String> {
        if set.iter().all(|s| s.boxes.is_empty()) {
            return Ok("n/a".into());
        }
        Ok(format!("{:.4}", clean_ap(&report.weights, set, DETECTION_THRESHOLD)?))
    };
    println!("train AP {}  test AP {}", ap(&tr)?, ap(&te)?);
    println!("wrote {} and {}", cmd.out.display(), log.display());
    Ok(())
}

fn attack_cmd(cmd: AttackCmd) -> Result<()> {
    let mut cfg = cmd.config.load()?;
    if let Some(l) = cmd.lambda {
        cfg.attack.lambda = l;
    }
    if let Some(i) = cmd.iterations {
        cfg.attack.iterations = i;
    }
    if let Some(s) = cmd.seed {
        cfg.attack.seed = s;
    }
    let models = load_models(&cmd.models)?;
    let ds = load_dataset(&cmd.data)?;
    let result = irpatch_core::attack::optimize_patch(&models, &ds.train_scenes(), &cfg.attack)?;
    write_attack_result(&result, &cfg.attack, &models, &cmd.out)?;
    if let (Some(first), Some(last)) = (result.trace.first(), result.trace.last()) {
        println!("loss {:.4} -> {:.4}", first.loss, last.loss);
    }
    println!(
        "black ratio {:.4}; wrote patch.png, latent.bin, trace.csv, result.json to {}",
        result.black_ratio,
        cmd.out.display()
    );
    Ok(())
}

fn patch_condition(spec: &str, side: usize, seed: u64) -> Result<Condition> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), p.to_string()),
        None => match spec {
            "random" | "blank" => (spec.to_string(), String::new()),
            _ => {
                let stem = Path::new(spec).file_stem().and_then(|s| s.to_str()).unwrap_or(spec);
                (stem.to_string(), spec.to_string())
            }
        },
    };
    let patch = match path.as_str() {
        "" => {
            let kind = if name == "random" {
                BaselineKind::Random
            } else {
                BaselineKind::Blank
            };
            make_baseline_patch(kind, side, &mut stream(seed, Stream::Baseline))?
        }
        p => {
            let soft = Patch::read_png(Path::new(p)).with_context(|| format!("reading patch {p}"))?;
            irpatch_core::pattern::binarize(&soft)
        }
    };
    Ok(Condition { name, patch })
}

fn eval_cmd(cmd: EvalCmd) -> Result<ExitCode> {
    let mut cfg = cmd.config.load()?;
    if let Some(g) = cmd.gt_mode {
        cfg.eval.gt_mode = g;
    }
    if let Some(s) = cmd.seed {
        cfg.eval.seed = s;
    }
    let mut detectors: Vec<(DetectorWeights, bool)> =
        load_models(&cmd.models)?.into_iter().map(|d| (d, true)).collect();
    detectors.extend(load_models(&cmd.held_out)?.into_iter().map(|d| (d, false)));
    let ds = load_dataset(&cmd.data)?;

    let mut conditions = Vec::new();
    let mut side = cfg.attack.side;
    for spec in &cmd.patches {
        let c = patch_condition(spec, side, cfg.eval.seed)?;
        side = c.patch.height();
        if conditions.iter().any(|x: &Condition| x.name == c.name) {
            bail!("duplicate patch condition name {:?}", c.name);
        }
        conditions.push(c);
    }
    if !cmd.no_baselines {
        for c in baselines(side, cfg.eval.seed)? {
            if !conditions.iter().any(|x| x.name == c.name) {
                conditions.push(c);
            }
        }
    }
    let report = evaluate_conditions(&detectors, &ds.test_scenes(), &conditions, &cfg.eval)?;
    write_report(&report, &cmd.out)?;
    for d in &report.detectors {
        let role = if d.attacked { "attacked" } else { "held-out" };
        println!("{} ({role}) clean AP {:.4}", d.detector, d.clean_ap);
        for c in &d.conditions {
            println!(
                "  {:<12} AP {:.4}  drop {:7.2}  ASR {:.4}",
                c.name, c.ap, c.ap_drop, c.asr
            );
        }
    }
    if cmd.assert_ordering {
        if !conditions.iter().any(|c| c.name == OPTIMIZED) {
            bail!("--assert-ordering needs a patch named {OPTIMIZED}");
        }
        if !ordering_holds(&report) {
            eprintln!("ordering optimized > random > blank > 0 violated");
            return Ok(ExitCode::from(1));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep_cmd(cmd: SweepCmd) -> Result<()> {
    let mut cfg = cmd.config.load()?;
    if let Some(p) = &cmd.param {
        cfg.sweep.param = SweepParam::by_name(p)?;
    }
    if !cmd.values.is_empty() {
        cfg.sweep.values = cmd.values.clone();
    }
    let values = cfg.sweep.resolved_values();
    if values.len() < 2 {
        bail!("a sweep needs at least two values");
    }
    let models = load_models(&cmd.models)?;
    let ds = load_dataset(&cmd.data)?;
    let rows = sweep(&models, &ds, cfg.sweep.param, &values, &cfg.attack, &cfg.eval)?;
    create_dir(&cmd.out)?;
    let table = sweep_table_csv(cfg.sweep.param, &rows);
    let path = cmd.out.join(format!("sweep_{}.csv", cfg.sweep.param.name()));
    std::fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(c) => gen_data(c)?,
        Command::Train(c) => train_cmd(c)?,
        Command::Attack(c) => attack_cmd(c)?,
        Command::Eval(c) => return eval_cmd(c),
        Command::Sweep(c) => sweep_cmd(c)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
