use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use trafficdiff::frenet::{candidates_or_fallback, CandidateSet};
use trafficdiff::perturb::{perturb_map, remap_agents, Perturbation};
use trafficdiff::pipeline::stages::{load_codec, save_codec};
use trafficdiff::pipeline::{
    evaluate, fit_codec, generate_many, render_svg, synth_dataset, train_init_model, train_traj_model, Dataset,
    InitModel, Models, PipelineConfig, TrajModel,
};
use trafficdiff::scene::Scenario;
use trafficdiff::Error;

/// Traffic scenario generation with two-stage diffusion.
#[derive(Parser)]
#[command(name = "trafficdiff", version)]
struct Cli {
    /// Master RNG seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of maps and ground-truth scenarios.
    Synth,
    /// Fit the trajectory PCA codec on a dataset.
    FitCodec(DataArg),
    /// Train the initialization denoiser.
    TrainInit(DataArg),
    /// Train the trajectory denoiser.
    TrainTraj {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        codec: PathBuf,
    },
    /// Sample scenarios on one map of a dataset.
    Sample(SampleArgs),
    /// Compute the metric report of generated scenarios.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Scenario file; defaults to the dataset's own scenarios.
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Reference dataset for divergences and displacement errors.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Bend or ripple every lane of a dataset and move its agents along.
    Perturb(PerturbArgs),
    /// Draw a map with optional scenario and candidates as SVG.
    Render {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Which scenario of the file to draw.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Map to draw when no scenario is given.
        #[arg(long, default_value_t = 0)]
        map: usize,
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArg {
    /// Dataset JSON written by `synth`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long, default_value_t = 0)]
    map: usize,
    #[arg(long, default_value_t = 3)]
    agents: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Pull latents toward the nearest candidate at every reverse step.
    #[arg(long)]
    guidance: bool,
    /// Also write the first scenario's candidate sets here.
    #[arg(long)]
    candidates_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Identity,
    Turn,
    DoubleTurn,
    Ripple,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, default_value_t = 0.0)]
    pivot: f64,
    #[arg(long, default_value_t = 0.0)]
    curvature: f64,
    #[arg(long)]
    second_pivot: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 20.0)]
    wavelength: f64,
    input: PathBuf,
    output: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn out_path(cli_out: &Option<PathBuf>) -> Outcome<&Path> {
    cli_out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required for this command".into()))
}

fn write(path: &Path, text: &str) -> Outcome {
    Ok(std::fs::write(path, text)?)
}

/// Runs a loader and prefixes any failure with the offending path.
fn load<T>(path: &Path, f: impl FnOnce(&Path) -> Result<T, Error>) -> Outcome<T> {
    f(path).map_err(|e| match Failure::from(e) {
        Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    load(path, |p| Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?))
}

fn run(cli: Cli) -> Outcome {
    let cfg = match &cli.config {
        Some(p) => load(p, PipelineConfig::load)?,
        None => PipelineConfig::default(),
    };
    let seed = cli.seed;
    match cli.command {
        Command::Synth => synth_dataset(&cfg, seed)?.save(out_path(&cli.out)?)?,
        Command::FitCodec(d) => save_codec(&fit_codec(&load(&d.data, Dataset::load)?)?, out_path(&cli.out)?)?,
        Command::TrainInit(d) => {
            let (model, report) = train_init_model(&load(&d.data, Dataset::load)?, &cfg, seed, None)?;
            model.save(out_path(&cli.out)?)?;
            eprintln!("{} steps, final epoch loss {:.5}", report.steps, report.epoch_loss.last().unwrap_or(&f64::NAN));
        }
        Command::TrainTraj { data, codec } => {
            let pca = load(&codec, load_codec)?;
            let (model, report) = train_traj_model(&load(&data.data, Dataset::load)?, &pca, &cfg, seed, None)?;
            model.save(out_path(&cli.out)?)?;
            eprintln!("{} steps, final epoch loss {:.5}", report.steps, report.epoch_loss.last().unwrap_or(&f64::NAN));
        }
        Command::Sample(a) => {
            let ds = load(&a.data.data, Dataset::load)?;
            let map = ds
                .maps
                .get(a.map)
                .ok_or_else(|| Failure::Usage(format!("dataset has {} maps, asked for {}", ds.maps.len(), a.map)))?;
            let init = load(&a.init, InitModel::load)?;
            let traj = load(&a.traj, TrajModel::load)?;
            let pca = load(&a.codec, load_codec)?;
            let models = Models {
                init: &init,
                traj: &traj,
                pca: &pca,
            };
            let seeds: Vec<u64> = (0..a.count as u64).map(|i| seed.wrapping_add(i)).collect();
            let scenarios = generate_many(map, a.map, a.agents, &models, &cfg, &seeds, a.guidance)?;
            write(out_path(&cli.out)?, &serde_json::to_string(&scenarios)?)?;
            if let (Some(path), Some(first)) = (&a.candidates_out, scenarios.first()) {
                let cc = cfg.candidate_config();
                let sets = first
                    .scene
                    .agents
                    .iter()
                    .map(|ag| candidates_or_fallback(ag, map, &cc))
                    .collect::<Result<Vec<_>, _>>()?;
                write(path, &serde_json::to_string(&sets)?)?;
            }
        }
        Command::Eval { data, scenarios, gt } => {
            let ds = load(&data.data, Dataset::load)?;
            let generated = match scenarios {
                Some(p) => read_json(&p)?,
                None => ds.scenarios.clone(),
            };
            let reference = gt.map(|p| load(&p, Dataset::load)).transpose()?;
            let report = evaluate(
                &generated,
                &ds.maps,
                reference.as_ref().map(|r| r.scenarios.as_slice()),
                &cfg.metrics_config(),
            )?;
            let text = serde_json::to_string_pretty(&report)?;
            match &cli.out {
                Some(p) => write(p, &text)?,
                None => println!("{text}"),
            }
        }
        Command::Perturb(a) => {
            let p = match a.kind {
                Kind::Identity => Perturbation::default(),
                Kind::Turn => Perturbation::turn(a.pivot, a.curvature),
                Kind::DoubleTurn => {
                    let second = a
                        .second_pivot
                        .ok_or_else(|| Failure::Usage("--second-pivot is required for double-turn".into()))?;
                    Perturbation::double_turn(a.pivot, second, a.curvature)
                }
                Kind::Ripple => Perturbation::ripple(a.pivot, a.amplitude, a.wavelength),
            };
            let ds = load(&a.input, Dataset::load)?;
            let maps = ds.maps.iter().map(|m| perturb_map(m, &p)).collect::<Result<Vec<_>, _>>()?;
            // Recorded futures no longer follow the bent lanes, so only the
            // initial scenes carry over.
            let scenarios = ds
                .scenarios
                .iter()
                .map(|s| {
                    let r = s.scene.map_ref;
                    Ok(Scenario {
                        scene: remap_agents(&s.scene, &ds.maps[r], &maps[r])?,
                        trajectories: Vec::new(),
                        ..s.clone()
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let dest = match (&a.output, &cli.out) {
                (Some(p), _) | (None, Some(p)) => p.clone(),
                (None, None) => return Err(Failure::Usage("give an output path".into())),
            };
            Dataset { maps, scenarios }.save(&dest)?;
        }
        Command::Render {
            data,
            scenarios,
            index,
            map,
            candidates,
        } => {
            let ds = load(&data.data, Dataset::load)?;
            let scenario = match scenarios {
                Some(p) => {
                    let all: Vec<Scenario> = read_json(&p)?;
                    Some(
                        all.get(index)
                            .cloned()
                            .ok_or_else(|| Failure::Usage(format!("scenario file has {} entries", all.len())))?,
                    )
                }
                None => None,
            };
            let map_ref = scenario.as_ref().map_or(map, |s| s.scene.map_ref);
            let vm = ds
                .maps
                .get(map_ref)
                .ok_or_else(|| Failure::Data(format!("dataset has no map {map_ref}")))?;
            let cands: Vec<CandidateSet> = match candidates {
                Some(p) => read_json(&p)?,
                None => Vec::new(),
            };
            let svg = render_svg(
                vm,
                scenario.as_ref().map(|s| &s.scene),
                &cands,
                scenario.as_ref().map_or(&[][..], |s| &s.trajectories),
            );
            write(out_path(&cli.out)?, &svg)?;
        }
    }
    Ok(())
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(3)
        }
    }
}
