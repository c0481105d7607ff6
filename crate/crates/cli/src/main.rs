use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use magneto_encoder::circulator::CirculatorModel;
use magneto_encoder::config::RunConfig;
use magneto_encoder::encoder::{
    build_calibration, decode_trace, read_calibration, resolution_metric, write_calibration_file, write_decoded_file,
};
use magneto_encoder::jointsim::{monte_carlo, protractor_reference, simulate_joint};
use magneto_encoder::magnetostatics::{axial_profile, superpose, write_axial_profile, write_field_grid, Vec3};
use magneto_encoder::placement::{delta_d_grid, summary_json, sweep_delta_d, write_sweep_csv};
use magneto_encoder::sweep::{read_trace, synthesize_sweep, write_trace_file, ResponseCurve, RotorAssembly};
use magneto_encoder::{Error, FORMAT_VERSION};

#[derive(Parser)]
#[command(
    name = "moenc",
    version,
    about = "Magneto-optical rotary encoder simulator and decoder"
)]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rotor field along the optical axis and on a plane through the magnets.
    MapField,
    /// Synthesise an attenuation trace for a constant-velocity sweep.
    Sweep,
    /// Build the angle-to-attenuation calibration table.
    Calibrate,
    /// Decode a trace into angles with a calibration table.
    Decode {
        /// Defaults to `<out>/calibration.csv`.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Defaults to `<out>/trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sweep the axial offset between the magnets for the best resolution.
    Optimize,
    /// Monte Carlo runs of the stepped robot-joint profile.
    Jointsim,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MapField => "map-field",
            Command::Sweep => "sweep",
            Command::Calibrate => "calibrate",
            Command::Decode { .. } => "decode",
            Command::Optimize => "optimize",
            Command::Jointsim => "jointsim",
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { .. } => 3,
        Error::Io(_) => 5,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("moenc {}: {err}", cli.command.name());
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    std::fs::create_dir_all(&cli.out)?;
    let out = Output {
        dir: &cli.out,
        command: cli.command.name(),
        seed: cli.seed,
    };
    match &cli.command {
        Command::MapField => map_field(&cfg, &out),
        Command::Sweep => sweep(&cfg, &out),
        Command::Calibrate => calibrate(&cfg, &out),
        Command::Decode { calibration, trace } => {
            let calibration = calibration.clone().unwrap_or_else(|| cli.out.join("calibration.csv"));
            let trace = trace.clone().unwrap_or_else(|| cli.out.join("trace.csv"));
            decode(&cfg, &out, &calibration, &trace)
        }
        Command::Optimize => optimize(&cfg, &out),
        Command::Jointsim => jointsim(&cfg, &out),
    }
}

struct Output<'a> {
    dir: &'a Path,
    command: &'static str,
    seed: u64,
}

impl Output<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Error> {
        Ok(BufWriter::new(File::create(self.path(name))?))
    }

    /// Writes `<command>.meta.json` and `<command>.config.toml` for the config a run used.
    fn finish(&self, cfg: &RunConfig, results: Value) -> Result<(), Error> {
        let meta = json!({
            "command": self.command,
            "format_version": FORMAT_VERSION,
            "seed": self.seed,
            "config": serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
            "results": results,
        });
        let mut f = self.create(&format!("{}.meta.json", self.command))?;
        serde_json::to_writer_pretty(&mut f, &meta).map_err(|e| Error::Io(e.into()))?;
        writeln!(f)?;
        f.flush()?;
        std::fs::write(
            self.path(&format!("{}.config.toml", self.command)),
            cfg.to_toml_string()?,
        )?;
        Ok(())
    }
}

fn map_field(cfg: &RunConfig, out: &Output) -> Result<(), Error> {
    // The field does not depend on K, so no calibration is needed here.
    let model = cfg.circulator.model();
    let assembly = RotorAssembly::new(&cfg.rotor, &model)?;
    let magnets = assembly.magnets_at(0.0);
    let axis = axial_profile(&magnets, &Vec3::new(0.0, 0.0, 0.0), &Vec3::new(0.0, 0.0, 50.0), 201)?;
    let mut f = out.create("axial_profile.csv")?;
    write_axial_profile(&mut f, &axis)?;
    f.flush()?;

    let reach = cfg.rotor.radial_standoff_mm + cfg.rotor.magnet_dims_mm[2] + 20.0;
    let mut samples = Vec::new();
    for i in 0..=(reach as usize) {
        for k in 0..=50 {
            let p = Vec3::new(i as f64, 0.0, k as f64);
            if magnets.iter().any(|m| m.contains(&p)) {
                continue;
            }
            match superpose(&magnets, &p) {
                Ok(s) => samples.push(s),
                Err(Error::Domain(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    let mut f = out.create("field_grid.csv")?;
    write_field_grid(&mut f, &samples)?;
    f.flush()?;
    let peak = samples.iter().map(|s| s.b_mt.norm()).fold(0.0, f64::max);
    out.finish(cfg, json!({ "grid_points": samples.len(), "max_field_mT": peak }))
}

fn resolved(cfg: &RunConfig) -> Result<(RunConfig, CirculatorModel, RotorAssembly), Error> {
    let model = cfg.resolve_model()?;
    let assembly = RotorAssembly::new(&cfg.rotor, &model)?;
    Ok((cfg.effective(&model), model, assembly))
}

fn sweep(cfg: &RunConfig, out: &Output) -> Result<(), Error> {
    let (effective, model, assembly) = resolved(cfg)?;
    let trace = synthesize_sweep(&assembly, &model, &cfg.sweep, out.seed)?;
    write_trace_file(&out.path("trace.csv"), &trace)?;
    out.finish(
        &effective,
        json!({ "samples": trace.len(), "lumped_k_dB_per_mT": model.lumped_k_db_per_mt }),
    )
}

fn calibrate(cfg: &RunConfig, out: &Output) -> Result<(), Error> {
    let (effective, model, assembly) = resolved(cfg)?;
    let table = build_calibration(&model, &assembly, cfg.encoder.grid_step_deg)?;
    write_calibration_file(&out.path("calibration.csv"), &table)?;
    let resolution = resolution_metric(&table, cfg.encoder.decode.noise_sigma_db)?;
    out.finish(
        &effective,
        json!({
            "lumped_k_dB_per_mT": model.lumped_k_db_per_mt,
            "resolution_deg": resolution,
            "flat_threshold_dB_per_deg": table.flat_threshold(),
        }),
    )
}

fn decode(cfg: &RunConfig, out: &Output, calibration: &Path, trace: &Path) -> Result<(), Error> {
    let table = read_calibration(calibration)?;
    let trace = read_trace(trace)?;
    if trace.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "trace has no samples".into(),
        });
    }
    let decoded = decode_trace(&table, &trace, None, &cfg.encoder.decode)?;
    write_decoded_file(&out.path("decoded.csv"), &decoded)?;
    let flagged = decoded.estimates.iter().filter(|e| e.flat_flag).count();
    let span = match (decoded.unwrapped_deg.first(), decoded.unwrapped_deg.last()) {
        (Some(a), Some(b)) => b - a,
        _ => 0.0,
    };
    out.finish(
        cfg,
        json!({ "samples": decoded.estimates.len(), "flat_samples": flagged, "unwrapped_span_deg": span }),
    )
}

fn optimize(cfg: &RunConfig, out: &Output) -> Result<(), Error> {
    let (effective, model, _) = resolved(cfg)?;
    let p = &cfg.placement;
    let grid = delta_d_grid(p.d_min_mm, p.d_max_mm, p.step_mm)?;
    let result = sweep_delta_d(
        &model,
        &cfg.rotor,
        &grid,
        cfg.encoder.decode.noise_sigma_db,
        cfg.encoder.grid_step_deg,
    )?;
    let mut f = out.create("placement.csv")?;
    write_sweep_csv(&mut f, &result)?;
    f.flush()?;
    std::fs::write(out.path("placement.json"), summary_json(&result)? + "\n")?;
    out.finish(
        &effective,
        json!({ "best_delta_d_mm": result.best_delta_d_mm, "best_resolution_deg": result.best_resolution_deg }),
    )
}

fn jointsim(cfg: &RunConfig, out: &Output) -> Result<(), Error> {
    let (effective, model, assembly) = resolved(cfg)?;
    let table = build_calibration(&model, &assembly, cfg.encoder.grid_step_deg)?;
    let curve = ResponseCurve::new(&model, &assembly)?;
    let profile = cfg.joint.profile();
    let j = &cfg.joint;
    let reports = monte_carlo(&curve, &table, &profile, j.dt_s, j.noise_sigma_db, out.seed, j.runs)?;
    let first = simulate_joint(&curve, &table, &profile, j.dt_s, j.noise_sigma_db, out.seed)?;
    write_decoded_file(&out.path("joint_decoded.csv"), &first.decoded)?;
    let protractor = protractor_reference(&profile, j.protractor_step_deg, out.seed);

    let mean_abs = reports.iter().map(|r| r.mean_abs_error_deg).sum::<f64>() / reports.len() as f64;
    let worst = reports
        .iter()
        .flat_map(|r| r.per_increment_error_deg.iter())
        .fold(0.0f64, |m, e| m.max(e.abs()));
    let lost = reports.iter().filter(|r| r.diagnostic.is_some()).count();
    let report = json!({
        "runs": reports,
        "targets_deg": profile.targets_deg(),
        "protractor_deg": protractor,
        "mean_abs_error_deg": mean_abs,
        "max_abs_increment_error_deg": worst,
        "runs_with_tracking_loss": lost,
    });
    let mut f = out.create("joint_report.json")?;
    serde_json::to_writer_pretty(&mut f, &report).map_err(|e| Error::Io(e.into()))?;
    writeln!(f)?;
    f.flush()?;
    out.finish(
        &effective,
        json!({
            "mean_abs_error_deg": mean_abs,
            "max_abs_increment_error_deg": worst,
            "runs_with_tracking_loss": lost,
        }),
    )
}
