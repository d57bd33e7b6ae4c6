use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use resx_core::harness::output::Window;
use resx_core::harness::{self, AuditVariant, ExperimentSpec};
use resx_core::Error;
use serde_json::{json, Value};

/// Resolution-extrapolation testbed: sampling, guidance comparison and audits.
#[derive(Parser)]
#[command(name = "resx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage sampling with the spec's guidance mode.
    Sample(SpecArgs),
    /// Paired comparison of the spec's guidance modes.
    CompareGuidance(SpecArgs),
    /// Native and extrapolated velocity loss per timestep.
    LossCurve(SpecArgs),
    /// Rotary angle ranges for the spec's toolkit.
    RopeAudit(SpecArgs),
    /// Attention entropy and text mass of the toy transformer.
    EntropyAudit(SpecArgs),
    /// Render a grid dump to PNG.
    Render(RenderArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// Experiment spec (JSON).
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in spec: testbed or loss-curve.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides the spec and RESX_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the spec's list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    /// Grid dump written by `sample`.
    grid: PathBuf,
    /// PNG path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
    min: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    max: f64,
}

impl SpecArgs {
    fn load(&self) -> Result<ExperimentSpec, Error> {
        let mut spec = match (&self.spec, &self.preset) {
            (Some(path), _) => ExperimentSpec::load(path)?,
            (None, Some(name)) => ExperimentSpec::preset(name)?,
            (None, None) => ExperimentSpec::default(),
        };
        spec.apply_env_override();
        if let Some(out) = &self.out {
            spec.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            spec.seeds = vec![seed];
            spec.audit.seeds = vec![seed];
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn paths(files: &[PathBuf]) -> Value {
    files.iter().map(|p| Value::from(p.display().to_string())).collect()
}

fn file(p: &Path) -> Value {
    Value::from(p.display().to_string())
}

fn run(command: Command) -> Result<Value, Error> {
    Ok(match command {
        Command::Sample(args) => {
            let spec = args.load()?;
            let a = harness::run_sample(&spec)?;
            json!({ "command": "sample", "files": paths(&a.files), "rows": a.metrics.len() })
        }
        Command::CompareGuidance(args) => {
            let spec = args.load()?;
            let report = harness::run_guidance_comparison(&spec, &spec.modes)?;
            let medians: serde_json::Map<String, Value> =
                report.modes.iter().map(|&m| (m.name().to_string(), json!(report.median(m)))).collect();
            json!({ "command": "compare-guidance", "files": paths(&report.artifacts.files), "median_projection_error": medians })
        }
        Command::LossCurve(args) => {
            let spec = args.load()?;
            let report = harness::run_loss_curve(&spec, &spec.loss.timesteps)?;
            json!({ "command": "loss-curve", "files": [file(&report.file)], "points": report.points.len() })
        }
        Command::RopeAudit(args) => {
            let spec = args.load()?;
            let (rows, path) = harness::run_rope_audit(&spec)?;
            json!({ "command": "rope-audit", "files": [file(&path)], "rows": rows.len() })
        }
        Command::EntropyAudit(args) => {
            let spec = args.load()?;
            let report = harness::run_entropy_audit(&spec, &AuditVariant::ALL)?;
            let summary: serde_json::Map<String, Value> = AuditVariant::ALL
                .iter()
                .map(|&v| {
                    let entry = json!({
                        "median_entropy_gap": report.median_entropy_gap(v),
                        "mean_text_mass": report.mean_text_mass(v),
                    });
                    (v.name().to_string(), entry)
                })
                .collect();
            json!({ "command": "entropy-audit", "files": [file(&report.file)], "variants": summary })
        }
        Command::Render(args) => {
            let window = Window { min: args.min, max: args.max };
            harness::render(&args.grid, &args.out, window)?;
            json!({ "command": "render", "files": [file(&args.out)] })
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": "usage", "message": message.trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
