use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use advreg::config::KeyValues;
use advreg::dataset::{ensure_writable, fixed_gland_pool, load_cases, write_phantom_dataset, write_sim_dataset, SimSetSpec};
use advreg::eval::{evaluate_case, report, svg_metrics, Report};
use advreg::io::{load_volume, save_field, save_volume};
use advreg::sim::{PhantomConfig, SurrogateConfig};
use advreg::training::{read_metrics, register, train, Checkpoint, TrainConfig};
use advreg::transform::{AffineRanges, DisplacementField};
use advreg::volume::Grid3;

#[derive(Parser)]
#[command(name = "advreg", version, about = "Label-driven 3D registration with an adversarial deformation prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic MR/ultrasound-like phantom cases.
    Phantom(PhantomArgs),
    /// Simulate and prepare probe-induced deformation fields.
    Sim(SimArgs),
    /// Train a registration network.
    Train(TrainArgs),
    /// Register one image pair with a trained checkpoint.
    Register(RegisterArgs),
    /// Score checkpoints on phantom cases and write a report.
    Evaluate(EvaluateArgs),
    /// Render metric logs and reports as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Voxels per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Voxel size in mm.
    #[arg(long)]
    spacing: Option<f64>,
    /// Phantom config file (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    patients: usize,
    #[arg(long, default_value_t = 8)]
    per_patient: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Surrogate config file (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training cases whose fixed glands bound the field of view; synthetic
    /// glands are used when absent.
    #[arg(long)]
    cases: Option<PathBuf>,
    /// Restrict the gland pool to these case ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    case_ids: Vec<String>,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 2.0)]
    spacing: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Training config file; its keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    sims: Option<PathBuf>,
    /// adversarial, bending, l2grad or none.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// `mode=checkpoint` pairs.
    #[arg(long = "model", value_name = "MODE=PATH")]
    models: Vec<String>,
    /// Also score the untrained identity transform as mode "identity".
    #[arg(long)]
    identity: bool,
    /// Also score the ground-truth fields as mode "oracle".
    #[arg(long)]
    oracle: bool,
    /// Case ids to evaluate (comma separated); all when empty.
    #[arg(long, value_delimiter = ',')]
    cases: Vec<String>,
    /// Mode the others are tested against; defaults to the first.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Written files and a one-line summary.
struct Outcome {
    files: Vec<PathBuf>,
    summary: String,
    /// Runtime failures that still produced outputs.
    failed: bool,
}

impl Outcome {
    fn ok(files: Vec<PathBuf>, summary: String) -> Self {
        Self { files, summary, failed: false }
    }
}

fn phantom(a: PhantomArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => PhantomConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => PhantomConfig::default(),
    };
    if let Some(n) = a.grid {
        cfg.grid_n = n;
    }
    if let Some(s) = a.spacing {
        cfg.spacing = s;
    }
    cfg.validate()?;
    let files = write_phantom_dataset(&a.out, a.cases, a.seed, &cfg, a.force)?;
    Ok(Outcome::ok(files, format!("{} phantom cases on a {}³ grid", a.cases, cfg.grid_n)))
}

fn sim(a: SimArgs) -> Result<Outcome> {
    let surrogate = match &a.config {
        Some(p) => SurrogateConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SurrogateConfig::default(),
    };
    let grid = Grid3::centered(a.grid, a.spacing)?;
    let cases = match &a.cases {
        Some(dir) => {
            let mut c = load_cases(dir)?;
            if !a.case_ids.is_empty() {
                c.retain(|x| a.case_ids.contains(&x.id));
                if c.len() != a.case_ids.len() {
                    bail!(advreg::Error::Config("unknown case id in --case-ids".into()));
                }
            }
            for x in &c {
                x.grid().ensure_same(&grid, "gland pool")?;
            }
            c
        }
        None => Vec::new(),
    };
    let pool = fixed_gland_pool(&cases, &grid, &surrogate, a.seed);
    let spec = SimSetSpec {
        patients: a.patients,
        per_patient: a.per_patient,
        seed: a.seed,
        surrogate,
        train_grid: grid,
        augment: AffineRanges::default_for(&grid),
    };
    let stats = write_sim_dataset(&a.out, &spec, &pool, a.force)?;
    let files = vec![a.out.join("manifest"), a.out.join("norm_stats"), a.out.join("config")];
    Ok(Outcome::ok(
        files,
        format!(
            "{} prepared fields; mean {:?} std {:?}",
            a.patients * a.per_patient,
            stats.mean,
            stats.std
        ),
    ))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let preset = match a.preset {
        Preset::Desk => TrainConfig::desk(),
        Preset::Paper => TrainConfig::default(),
    };
    let mut kv = KeyValues::parse(&preset.to_text())?;
    if let Some(p) = &a.config {
        kv.merge(KeyValues::load(p)?);
    }
    let flags: [(&str, Option<String>); 7] = [
        ("data_dir", a.data.as_ref().map(|p| p.display().to_string())),
        ("sim_dir", a.sims.as_ref().map(|p| p.display().to_string())),
        ("regularizer_mode", a.mode.clone()),
        ("total_steps", a.steps.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("learning_rate", a.lr.map(|v| v.to_string())),
        ("baseline_weight", a.weight.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    for s in &a.set {
        kv.set_pair(s)?;
    }
    let cfg = TrainConfig::from_kv(&mut kv)?;
    kv.finish()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<Outcome> {
    let cfg = train_config(&a)?;
    let out = train(&cfg, &a.out, a.force)?;
    let last = out.log.last().map_or("no steps".to_string(), |r| format!("final label loss {:.4}", r.reg));
    Ok(Outcome::ok(out.written, format!("{} steps in mode {}; {last}", cfg.total_steps, cfg.regularizer_mode)))
}

fn register_cmd(a: RegisterArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.model)?;
    let moving = load_volume(&a.moving)?;
    let fixed = load_volume(&a.fixed)?;
    ensure_writable(&a.output, "warped.vol", a.force)?;
    let r = register(&ck.reg, &moving, &fixed)?;
    let p = |n: &str| a.output.join(n);
    save_field(&r.local, &p("local.vol"))?;
    save_field(&r.composed, &p("composed.vol"))?;
    save_volume(&r.warped, &p("warped.vol"))?;
    let aff: Vec<String> = r.affine.to_array().iter().map(|v| v.to_string()).collect();
    fs::write(p("affine.txt"), aff.join(" ") + "\n").with_context(|| "writing affine.txt")?;
    let files = ["local.vol", "composed.vol", "warped.vol", "affine.txt"].map(p).to_vec();
    Ok(Outcome::ok(files, "registered 1 pair".into()))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<Outcome> {
    let mut cases = load_cases(&a.data)?;
    if !a.cases.is_empty() {
        for id in &a.cases {
            if !cases.iter().any(|c| &c.id == id) {
                bail!(advreg::Error::Config(format!("case '{id}' not in {}", a.data.display())));
            }
        }
        cases.retain(|c| a.cases.contains(&c.id));
    }
    let mut models = Vec::new();
    for m in &a.models {
        let (mode, path) =
            m.split_once('=').ok_or_else(|| advreg::Error::Config(format!("--model '{m}' is not MODE=PATH")))?;
        models.push((mode.to_string(), Checkpoint::load(Path::new(path))?));
    }
    if models.is_empty() && !a.identity && !a.oracle {
        bail!(advreg::Error::Config("nothing to evaluate: give --model, --identity or --oracle".into()));
    }
    ensure_writable(&a.out, "report.json", a.force)?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut score = |mode: &str, case: &advreg::dataset::CaseData, field: advreg::Result<DisplacementField>| {
        match field.and_then(|f| evaluate_case(case, &f, mode)) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(format!("{mode}/{}: {e}", case.id)),
        }
    };
    for case in &cases {
        for (mode, ck) in &models {
            score(mode, case, register(&ck.reg, &case.moving, &case.fixed).map(|r| r.composed));
        }
        if a.identity {
            score("identity", case, Ok(DisplacementField::zeros(*case.grid())));
        }
        if a.oracle {
            let truth = case
                .truth
                .clone()
                .ok_or_else(|| advreg::Error::InvalidArgument(format!("case {} has no ground truth", case.id)));
            score("oracle", case, truth);
        }
    }
    let reference = a
        .reference
        .clone()
        .or_else(|| records.first().map(|r| r.mode.clone()))
        .ok_or_else(|| advreg::Error::Degenerate(format!("every case failed: {}", errors.join("; "))))?;
    let rep = report(&records, &reference, errors.clone())?;
    let files = rep.write(&a.out)?;
    print!("{}", rep.table());
    for e in &errors {
        eprintln!("error: {e}");
    }
    Ok(Outcome { files, summary: format!("{} records, {} errors", records.len(), errors.len()), failed: !errors.is_empty() })
}

fn plot_cmd(a: PlotArgs) -> Result<Outcome> {
    if a.metrics.is_none() && a.report.is_none() {
        bail!(advreg::Error::Config("nothing to plot: give --metrics and/or --report".into()));
    }
    let mut targets = Vec::new();
    if let Some(m) = &a.metrics {
        targets.push(("metrics.svg", svg_metrics(&read_metrics(m)?)));
    }
    if let Some(r) = &a.report {
        let rep = Report::load(r)?;
        targets.push(("tre.svg", rep.box_plot(advreg::eval::Metric::Tre)));
        targets.push(("dsc.svg", rep.box_plot(advreg::eval::Metric::Dsc)));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut files = Vec::new();
    for (name, _) in &targets {
        let p = a.out.join(name);
        if p.exists() && !a.force {
            bail!(advreg::Error::Exists(p));
        }
    }
    for (name, body) in targets {
        let p = a.out.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        files.push(p);
    }
    Ok(Outcome::ok(files, "plots written".into()))
}

/// 3 for invalid input or configuration, 4 for failures while running.
fn exit_code(e: &anyhow::Error) -> u8 {
    use advreg::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Io { .. } | E::NonFinite(_) | E::Degenerate(_)) => 4,
        Some(_) => 3,
        None if e.downcast_ref::<std::io::Error>().is_some() => 4,
        None => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Sim(a) => sim(a),
        Command::Train(a) => train_cmd(a),
        Command::Register(a) => register_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match res {
        Ok(o) => {
            for f in &o.files {
                println!("wrote {}", f.display());
            }
            println!("{}", o.summary);
            if o.failed {
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
