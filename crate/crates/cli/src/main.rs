use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tbps_core::harness::{
    compute_rows, compute_rows_for_world, run_experiment, write_results, ExperimentConfig,
    ResultRow,
};
use tbps_core::numgrad::{gradcheck, train_toy, write_curves, CheckReport, GRADCHECK_TOLERANCE};
use tbps_core::synth::{generate_world, World};
use tbps_core::Error;

/// Toy-training steps when neither the config nor `--steps` sets them.
const DEFAULT_TRAIN_STEPS: usize = 500;
/// Embedding width of the training preset.
const TRAIN_DIM: usize = 64;

#[derive(Parser)]
#[command(
    name = "tbps",
    version,
    about = "Synthetic text-based person search experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON, ExperimentConfig field names).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; a multi-seed grid becomes seed, seed+1, ...
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Record wall-clock milliseconds per row.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Clone)]
struct GridOverrides {
    /// Replace the beta grid.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Replace the gallery-size grid.
    #[arg(long, value_delimiter = ',')]
    gallery: Option<Vec<usize>>,
    /// Toy-training steps before evaluation.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it as JSONL.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Gallery size of the generated world.
        #[arg(long)]
        gallery: Option<usize>,
    },
    /// Run the toy trainer and write loss curves and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Train on a JSONL world instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate one grid and write results.csv and summary.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridOverrides,
        /// Evaluate a JSONL world instead of generating one per seed.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep the fusion weight over five seeds.
    SweepBeta {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridOverrides,
    },
    /// Sweep the gallery size over five seeds.
    SweepGallery {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridOverrides,
    },
    /// Evaluate the component ablation ladder.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: GridOverrides,
    },
    /// Verify analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Accepted points per loss.
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Also write gradcheck.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quick end-to-end sanity run.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
        /// Workers compared against a single-threaded run.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn load_config(
    path: Option<&Path>,
    preset: ExperimentConfig,
) -> std::result::Result<ExperimentConfig, Failure> {
    let Some(path) = path else {
        return Ok(preset);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn build_config(
    common: &Common,
    grid: Option<&GridOverrides>,
    preset: ExperimentConfig,
) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = load_config(common.config.as_deref(), preset)?;
    if let Some(seed) = common.seed {
        let n = cfg.seeds.len().max(1) as u64;
        cfg.seeds = (0..n).map(|i| seed.wrapping_add(i)).collect();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    cfg.timing |= common.timing;
    if let Some(g) = grid {
        if let Some(b) = &g.beta {
            cfg.beta_grid = b.clone();
        }
        if let Some(s) = &g.gallery {
            cfg.gallery_grid = s.clone();
        }
        if let Some(steps) = g.steps {
            cfg.train_steps = steps;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_world(path: &Path) -> std::result::Result<World, Failure> {
    let file =
        File::open(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(World::read_jsonl(BufReader::new(file))?)
}

fn print_rows(rows: &[ResultRow]) {
    for r in rows {
        println!(
            "{} seed={} mAP={:.4} top1={:.4} top5={:.4} top10={:.4}",
            r.exp_id, r.seed, r.map, r.top1, r.top5, r.top10
        );
    }
}

fn grid_command(common: &Common, grid: &GridOverrides, preset: ExperimentConfig) -> Outcome {
    let cfg = build_config(common, Some(grid), preset)?;
    let rows = run_experiment(&cfg, common.jobs.unwrap_or_else(default_jobs))?;
    print_rows(&rows);
    println!("wrote {}", cfg.out_dir.join("results.csv").display());
    Ok(())
}

fn gen(common: &Common, gallery: Option<usize>) -> Outcome {
    let mut cfg = build_config(common, None, ExperimentConfig::default())?;
    if let Some(g) = gallery {
        cfg.gallery_grid = vec![g];
        cfg.validate()?;
    }
    let world = generate_world(&cfg.world_config(cfg.seeds[0]))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let path = cfg.out_dir.join("world.jsonl");
    let file =
        File::create(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    world.write_jsonl(BufWriter::new(file))?;
    println!(
        "wrote {} ({} scenes, {} queries)",
        path.display(),
        world.scenes.len(),
        world.queries.len()
    );
    Ok(())
}

fn train_preset() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        train_steps: DEFAULT_TRAIN_STEPS,
        ..ExperimentConfig::default()
    };
    cfg.gen.dim = TRAIN_DIM;
    cfg
}

fn train(common: &Common, steps: Option<usize>, data: Option<&Path>) -> Outcome {
    let mut cfg = build_config(common, None, train_preset())?;
    if let Some(s) = steps {
        cfg.train_steps = s;
    }
    if cfg.train_steps == 0 {
        cfg.train_steps = DEFAULT_TRAIN_STEPS;
    }
    cfg.train.validate()?;
    let world = match data {
        Some(p) => read_world(p)?,
        None => generate_world(&cfg.world_config(cfg.seeds[0]))?,
    };
    let run = train_toy(&world, &cfg.train, cfg.train_steps)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    write_curves(&cfg.out_dir.join("curves.csv"), &run.records)?;
    run.state.save(&cfg.out_dir.join("checkpoint.json"))?;
    if let (Some(first), Some(last)) = (run.records.first(), run.records.last()) {
        println!(
            "step {}: L_total={:.4} db_image={:.4} db_text={:.4}",
            first.step, first.l_total, first.db_image, first.db_text
        );
        println!(
            "step {}: L_total={:.4} db_image={:.4} db_text={:.4}",
            last.step, last.l_total, last.db_image, last.db_text
        );
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn eval(common: &Common, grid: &GridOverrides, data: Option<&Path>) -> Outcome {
    let cfg = build_config(common, Some(grid), ExperimentConfig::default())?;
    let jobs = common.jobs.unwrap_or_else(default_jobs);
    let rows = match data {
        Some(p) => compute_rows_for_world(&cfg, read_world(p)?, jobs)?,
        None => compute_rows(&cfg, jobs)?,
    };
    write_results(&cfg.out_dir, &rows)?;
    print_rows(&rows);
    println!("wrote {}", cfg.out_dir.join("results.csv").display());
    Ok(())
}

fn print_checks(reports: &[CheckReport]) -> bool {
    let mut ok = true;
    for r in reports {
        println!(
            "{} {:<14} points={} skipped={} max_rel_err={:.3e} (tol {:.0e})",
            if r.passed() { "PASS" } else { "FAIL" },
            r.loss,
            r.points,
            r.skipped,
            r.max_rel_err,
            GRADCHECK_TOLERANCE
        );
        ok &= r.passed();
    }
    ok
}

fn run_gradcheck(seed: u64, points: usize, out: Option<&Path>) -> Outcome {
    if points == 0 {
        return Err(Failure::Config(
            "invalid config field `points`: must be positive".into(),
        ));
    }
    let reports = gradcheck(points, seed)?;
    let ok = print_checks(&reports);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.to_string()))?;
        let json =
            serde_json::to_string_pretty(&reports).map_err(|e| Failure::Runtime(e.to_string()))?;
        fs::write(dir.join("gradcheck.json"), json + "\n")
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn selftest(seed: u64, jobs: usize) -> Outcome {
    let mut ok = print_checks(&gradcheck(10, seed)?);

    let mut cfg = ExperimentConfig {
        beta_grid: vec![0.0, 0.5, 1.0],
        gallery_grid: vec![20, 40],
        seeds: vec![seed],
        ..ExperimentConfig::default()
    };
    cfg.gen.dim = 16;
    cfg.gen.num_identities = 10;
    cfg.gen.num_scenes = 40;
    cfg.model.num_prototypes = 16;
    let a = compute_rows(&cfg, 1)?;
    let b = compute_rows(&cfg, jobs)?;
    let same = a == b;
    println!(
        "{} deterministic grid ({} rows, jobs 1 vs {jobs})",
        if same { "PASS" } else { "FAIL" },
        a.len()
    );
    ok &= same;

    let world = generate_world(&cfg.world_config(seed))?;
    let run = train_toy(&world, &cfg.train, 20)?;
    let finite = run.state.is_finite() && run.records.iter().all(|r| r.l_total.is_finite());
    println!(
        "{} toy training (20 steps, finite state)",
        if finite { "PASS" } else { "FAIL" }
    );
    ok &= finite;

    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("selftest failed".into()))
    }
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen { common, gallery } => gen(&common, gallery),
        Command::Train {
            common,
            steps,
            data,
        } => train(&common, steps, data.as_deref()),
        Command::Eval { common, grid, data } => eval(&common, &grid, data.as_deref()),
        Command::SweepBeta { common, grid } => {
            grid_command(&common, &grid, ExperimentConfig::beta_sweep())
        }
        Command::SweepGallery { common, grid } => {
            grid_command(&common, &grid, ExperimentConfig::gallery_sweep())
        }
        Command::Ablate { common, grid } => {
            grid_command(&common, &grid, ExperimentConfig::ablation())
        }
        Command::Gradcheck { seed, points, out } => {
            run_gradcheck(seed.unwrap_or(0), points, out.as_deref())
        }
        Command::Selftest { seed, jobs } => selftest(seed.unwrap_or(0), jobs.unwrap_or(4)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
