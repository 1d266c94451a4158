use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dtrecon::pipeline::{emit_report, evaluate_workspace, run_stage, write_sequence, PipelineConfig, Stage, Workspace, ENV_PREFIX};
use dtrecon::synth::{bending_cylinder, corrupt, make_two_body, BendSpec, Corruption, SyntheticSequence, TwoBodySpec};
use dtrecon::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dtrecon", version, about = "Hole-free reconstruction of partial mesh sequences")]
struct Cli {
    /// Flat JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set reg_smooth=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
struct Dirs {
    /// Directory of frames (manifest.json or PLY/OBJ files).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for artifacts and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pairwise registration of every frame to its neighbours.
    Register(Dirs),
    /// Global alignment and template fusion.
    Template(Dirs),
    /// Patch segmentation of the template.
    Segment(Dirs),
    /// Warp the template back to every frame.
    Warp(Dirs),
    /// Score the warped frames and write the report.
    Evaluate(Dirs),
    /// Write a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Every stage followed by the report.
    All(Dirs),
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ScenarioKind {
    Bending,
    TwoBody,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum CorruptKind {
    None,
    ComplementaryThirds,
    SphereHole,
    PlaneTruncation,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "bending")]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, value_enum, default_value = "none")]
    corrupt: CorruptKind,
    /// Corruption as JSON (overrides `--corrupt`).
    #[arg(long)]
    corruption: Option<String>,
    /// Final bend (bending) or rotation (two-body) in degrees.
    #[arg(long)]
    angle: Option<f64>,
    /// Azimuthal resolution of the generated surface.
    #[arg(long)]
    segments: Option<usize>,
    /// Gaussian jitter of interior bend angles, degrees.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Gaussian vertex noise, world units.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::MissingFile(_) => 4,
        Error::Parse { .. } | Error::InvalidMesh(_) => 5,
        Error::TooManyFrames { .. } => 6,
        _ => 1,
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("`--set {kv}` is not KEY=VALUE")))
        })
        .collect()
}

fn synthesize(args: &SynthArgs) -> Result<SyntheticSequence> {
    let seq = match args.scenario {
        ScenarioKind::Bending => {
            let d = BendSpec::default();
            bending_cylinder(&BendSpec {
                frames: args.frames,
                max_bend_deg: args.angle.unwrap_or(d.max_bend_deg),
                segments: args.segments.unwrap_or(d.segments),
                angle_jitter_deg: args.jitter,
                noise_sigma: args.noise,
                seed: args.seed,
                ..d
            })?
        }
        ScenarioKind::TwoBody => {
            let d = TwoBodySpec::default();
            make_two_body(&TwoBodySpec {
                frames: args.frames,
                rotation_deg: args.angle.unwrap_or(d.rotation_deg),
                segments: args.segments.unwrap_or(d.segments),
                seed: args.seed,
                ..d
            })?
        }
    };
    let scheme = match (&args.corruption, args.corrupt) {
        (Some(json), _) => Some(serde_json::from_str::<Corruption>(json).map_err(|e| Error::Config(format!("--corruption: {e}")))?),
        (None, CorruptKind::None) => None,
        (None, CorruptKind::ComplementaryThirds) => Some(Corruption::ComplementaryThirds),
        (None, CorruptKind::SphereHole) => {
            let diag = seq.rest.bbox_diagonal();
            let (lo, hi) = seq.rest.bounds();
            let c = (lo + hi) / 2.0;
            Some(Corruption::SphereHole { start: [lo.x, c.y, c.z], end: [lo.x, c.y, hi.z], radius: 0.15 * diag })
        }
        (None, CorruptKind::PlaneTruncation) => {
            let (lo, hi) = seq.rest.bounds();
            let cut = lo.z + 0.15 * (hi.z - lo.z);
            Some(Corruption::PlaneTruncation {
                planes: vec![dtrecon::synth::Plane { point: [0.0, 0.0, cut], normal: [0.0, 0.0, 1.0] }],
            })
        }
    };
    match scheme {
        Some(s) => corrupt(&seq, &s),
        None => Ok(seq),
    }
}

fn open(dirs: &Dirs, config: PipelineConfig) -> Result<Workspace> {
    Workspace::open(&dirs.input, &dirs.out, config)
}

fn report(ws: &Workspace, ran: &[(Stage, f64)]) -> Result<()> {
    let mut eval = evaluate_workspace(ws)?;
    eval.stage_seconds = ran.iter().map(|(s, sec)| (s.name().to_string(), *sec)).collect();
    emit_report(&eval, &ws.output.join("report"))?;
    log::info!("mean hausdorff {:.4e}, mean coverage {:.4}", eval.mean_hausdorff, eval.mean_coverage);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let env = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX));
    let config = PipelineConfig::resolve(cli.config.as_deref(), env, &parse_overrides(&cli.overrides)?)?;
    if cli.print_config {
        print!("{}", config.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (see --help)".into()));
    };
    let stage_command = |dirs: &Dirs, target: Stage| -> Result<()> {
        let ws = open(dirs, config.clone())?;
        for (stage, sec) in run_stage(&ws, target)? {
            log::info!("{} took {sec:.2}s", stage.name());
        }
        Ok(())
    };
    match command {
        Command::Register(d) => stage_command(&d, Stage::Registered),
        Command::Template(d) => stage_command(&d, Stage::Template),
        Command::Segment(d) => stage_command(&d, Stage::Segmented),
        Command::Warp(d) => stage_command(&d, Stage::Warped),
        Command::Evaluate(d) => {
            let ws = open(&d, config)?;
            if !ws.valid_stages()?.iter().any(|r| r.stage == Stage::Warped) {
                return Err(Error::Stage {
                    stage: "evaluate".into(),
                    message: "no current warped frames; run `warp` or `all` first".into(),
                });
            }
            report(&ws, &[])
        }
        Command::All(d) => {
            let ws = open(&d, config)?;
            let ran = run_stage(&ws, Stage::Warped)?;
            report(&ws, &ran)
        }
        Command::Synth(args) => {
            let seq = synthesize(&args)?;
            write_sequence(&seq, &args.out)?;
            log::info!("wrote {} frames to {}", seq.frame_count(), args.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
