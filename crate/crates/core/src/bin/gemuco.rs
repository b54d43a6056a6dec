use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use gemuco::anomaly;
use gemuco::config::{sha256_hex, ExperimentConfig, WorldKind};
use gemuco::inference::{self, ControlRequest, Observation, SimulationSession};
use gemuco::online::OnlineUpdater;
use gemuco::scenarios::{Lab, SCENARIOS};
use gemuco::structure::{self, StructureReport};
use gemuco::{Dataset, Error, GeMuCoModel, MaskVector, ParametricBias, Result};

#[derive(Parser)]
#[command(name = "gemuco", version, about = "Multisensory correlational body schema toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// World: A (arm with tool), B (tendon arm) or C (biped with tool).
    #[arg(long, global = true)]
    world: Option<WorldKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out random commands in a world and write the samples as CSV.
    Collect {
        /// State parameters, e.g. `500,30`; all configured states when absent.
        #[arg(long)]
        state: Option<String>,
        /// Samples per state.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Probe all masks, select inputs/outputs and train the final model.
    Determine {
        /// Training data; collected from the configured world when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a model on a structure report.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Stream samples through the online updater.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Initial PB: a trained state label or world parameters.
        #[arg(long)]
        state: Option<String>,
    },
    /// Estimate hidden groups of every sample.
    Estimate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        state: Option<String>,
        /// Comma-separated groups to hide; overrides the config.
        #[arg(long)]
        hide: Option<String>,
    },
    /// Optimize a control group for the configured loss.
    Control {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        state: Option<String>,
    },
    /// Simulate the state reached for each commanded row.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Commands are read from the command-group columns.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        state: Option<String>,
    },
    /// Calibrate a residual detector and score every sample.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        state: Option<String>,
        /// Residual mask over the model inputs, e.g. `110`.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Run acceptance studies end to end.
    Eval {
        /// Scenario name or `all`.
        #[arg(long, default_value = "all")]
        scenario: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Collect { .. } => "collect",
            Command::Determine { .. } => "determine",
            Command::Train { .. } => "train",
            Command::Adapt { .. } => "adapt",
            Command::Estimate { .. } => "estimate",
            Command::Control { .. } => "control",
            Command::Simulate { .. } => "simulate",
            Command::Detect { .. } => "detect",
            Command::Eval { .. } => "eval",
        }
    }
}

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    args: Vec<String>,
    seed: u64,
    config_sha256: String,
    /// Resolved configuration, flags applied.
    config: String,
    gemuco_version: &'static str,
    model_format: u32,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

struct Run {
    out_dir: PathBuf,
    cfg: ExperimentConfig,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&fs::read(path)?),
    })
}

impl Run {
    fn input(&mut self, path: &Path) -> Result<()> {
        let d = digest(path)?;
        self.inputs.push(d);
        Ok(())
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.out_dir.join(name);
        fs::write(&p, contents)?;
        self.outputs.push(digest(&p)?);
        info!("wrote {}", p.display());
        Ok(p)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write(name, &serde_json::to_string_pretty(value)?)
    }

    fn finish(self, command: &str) -> Result<()> {
        let config = self.cfg.to_toml()?;
        let m = Manifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            seed: self.cfg.seed,
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            gemuco_version: env!("CARGO_PKG_VERSION"),
            model_format: 1,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        fs::write(self.out_dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

fn parse_pair(s: &str) -> Result<[f64; 2]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Parse(format!("state `{s}`: {e}"))))
        .collect::<Result<_>>()?;
    <[f64; 2]>::try_from(v).map_err(|_| Error::Parse(format!("state `{s}` needs two numbers")))
}

/// A PB label, or world parameters mapped to the label of that state.
fn resolve_pb(model: &GeMuCoModel, cfg: &ExperimentConfig, state: Option<&str>) -> Result<ParametricBias> {
    let Some(s) = state else {
        return Ok(model.zero_pb());
    };
    let label = match parse_pair(s) {
        Ok(p) => cfg.world.world(p).state_id(),
        Err(_) => s.to_string(),
    };
    if model.pb_dim > 0 && !model.pb_table.contains_key(&label) {
        return Err(Error::InvalidConfig(format!(
            "no trained PB for state `{label}`; known: {}",
            model.pb_table.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(model.pb_for(&label))
}

fn csv_line(values: impl IntoIterator<Item = String>) -> String {
    values.into_iter().collect::<Vec<_>>().join(",") + "\n"
}

fn channel_names(layout: &gemuco::ModalityLayout) -> Vec<String> {
    layout
        .groups()
        .iter()
        .flat_map(|g| (0..g.dim).map(move |i| format!("{}_{i}", g.name)))
        .collect()
}

fn load_model(run: &mut Run, path: &Path) -> Result<GeMuCoModel> {
    run.input(path)?;
    GeMuCoModel::load(path)
}

fn load_data(run: &mut Run, path: &Path) -> Result<Dataset> {
    run.input(path)?;
    Dataset::read_csv(path)
}

fn execute(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(cli.common.world.unwrap_or(WorldKind::ArmTool)),
    };
    if let Some(k) = cli.common.world {
        cfg.world.kind = k;
    }
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
        cfg.eval.seed = s;
    }
    fs::create_dir_all(&cli.common.out_dir)?;
    let mut run = Run {
        out_dir: cli.common.out_dir.clone(),
        cfg,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    if let Some(p) = &cli.common.config {
        run.input(p)?;
    }
    let name = cli.command.name();
    let mut passed = true;
    match cli.command {
        Command::Collect { state, n } => {
            if let Some(s) = state {
                run.cfg.world.states = vec![parse_pair(&s)?];
            }
            if let Some(n) = n {
                run.cfg.world.samples_per_state = n;
            }
            let d = run.cfg.world.collect(run.cfg.seed)?;
            run.write("data.csv", &d.to_csv_string()?)?;
            println!("collected {} samples from {} state(s)", d.len(), d.state_ids().len());
        }
        Command::Determine { data } => {
            let d = match data {
                Some(p) => load_data(&mut run, &p)?,
                None => run.cfg.world.collect(run.cfg.seed)?,
            };
            let (model, report) = structure::determine_structure(&d, &run.cfg.structure)?;
            print!("{}", report.to_table());
            run.write_json("report.json", &report)?;
            run.write("report.txt", &report.to_table())?;
            run.write("model.json", &model.to_json()?)?;
        }
        Command::Train { data, report } => {
            let d = load_data(&mut run, &data)?;
            run.input(&report)?;
            let rep: StructureReport = serde_json::from_str(&fs::read_to_string(&report)?)?;
            let structure_cfg = gemuco::structure::StructureConfig {
                final_train: run.cfg.train.clone(),
                ..run.cfg.structure.clone()
            };
            let model = structure::build_final(&d, &rep, &structure_cfg)?;
            let mse = gemuco::trainer::evaluate(&model, &d, None)?;
            println!("trained on {} samples, masked MSE {mse:.6}", d.len());
            run.write("model.json", &model.to_json()?)?;
        }
        Command::Adapt { model, data, state } => {
            let m = load_model(&mut run, &model)?;
            let d = load_data(&mut run, &data)?;
            let pb = resolve_pb(&m, &run.cfg, state.as_deref())?;
            let mut u = OnlineUpdater::new(m, pb, run.cfg.online.clone())?;
            let mut updates = 0;
            for s in d.samples {
                if u.observe(s)? {
                    updates += 1;
                }
            }
            let mut traj = String::from("update,loss");
            for k in 0..u.pb().dim() {
                traj.push_str(&format!(",pb_{k}"));
            }
            traj.push('\n');
            for (i, p) in u.trajectory().iter().enumerate() {
                let loss = if i == 0 { String::new() } else { u.losses()[i - 1].to_string() };
                let mut row = vec![i.to_string(), loss];
                row.extend(p.iter().map(f64::to_string));
                traj.push_str(&csv_line(row));
            }
            run.write("pb_trajectory.csv", &traj)?;
            let (mut m, pb) = u.into_parts();
            m.pb_table.insert("adapted".into(), ParametricBias::new(pb.values.clone(), "adapted"));
            run.write("model.json", &m.to_json()?)?;
            println!("{updates} updates, final PB {:?}", pb.values);
        }
        Command::Estimate { model, data, state, hide } => {
            let m = load_model(&mut run, &model)?;
            let d = load_data(&mut run, &data)?;
            let pb = resolve_pb(&m, &run.cfg, state.as_deref())?;
            let hidden: Vec<String> = match (hide, &run.cfg.estimate) {
                (Some(h), _) => h.split(',').map(|s| s.trim().to_string()).collect(),
                (None, Some(e)) => e.hidden.clone(),
                (None, None) => {
                    return Err(Error::InvalidConfig("estimate needs --hide or an [estimate] section".into()))
                }
            };
            let hidden_ref: Vec<&str> = hidden.iter().map(String::as_str).collect();
            let mut out = csv_line(
                ["row".to_string(), "strategy".to_string()]
                    .into_iter()
                    .chain(channel_names(&m.data_layout)),
            );
            for (i, s) in d.samples.iter().enumerate() {
                let obs = Observation::new(&m, s.values.clone(), s.available.clone())?.hiding(&m, &hidden_ref)?;
                let e = inference::estimate(&m, &obs, &pb, &run.cfg.iter)?;
                let mut row = vec![i.to_string(), format!("{:?}", e.strategy)];
                row.extend(e.values.iter().map(f64::to_string));
                out.push_str(&csv_line(row));
            }
            run.write("estimates.csv", &out)?;
            println!("estimated {} rows", d.len());
        }
        Command::Control { model, state } => {
            let m = load_model(&mut run, &model)?;
            let pb = resolve_pb(&m, &run.cfg, state.as_deref())?;
            let sec = run
                .cfg
                .control
                .clone()
                .ok_or_else(|| Error::InvalidConfig("control needs a [control] section".into()))?;
            let req = ControlRequest {
                control_group: sec.control_group.clone(),
                loss: sec.loss,
                init: sec.init.unwrap_or_else(|| m.normalizer.mean.clone()),
                init_available: sec
                    .init_available
                    .unwrap_or_else(|| vec![true; m.data_layout.n_groups()]),
            };
            let r = inference::control(&m, &req, &pb, &run.cfg.iter)?;
            run.write_json("control.json", &r)?;
            let mut traj = String::from("iteration,loss\n");
            for (i, l) in r.loss_trajectory.iter().enumerate() {
                traj.push_str(&format!("{i},{l}\n"));
            }
            run.write("trajectory.csv", &traj)?;
            println!("{} = {:?} via {:?}", sec.control_group, r.control, r.strategy);
        }
        Command::Simulate { model, data, state } => {
            let m = load_model(&mut run, &model)?;
            let d = load_data(&mut run, &data)?;
            let pb = resolve_pb(&m, &run.cfg, state.as_deref())?;
            let sec = run
                .cfg
                .simulate
                .clone()
                .ok_or_else(|| Error::InvalidConfig("simulate needs a [simulate] section".into()))?;
            let range = d.layout.range_of(&sec.command_group)?;
            let mut session = SimulationSession::new(&sec.command_group, sec.constraints, pb, run.cfg.iter.clone());
            session.carry_over = sec.carry_over;
            let mut out = csv_line(
                ["row".to_string(), "final_loss".to_string()]
                    .into_iter()
                    .chain(channel_names(&m.out_layout)),
            );
            for (i, s) in d.samples.iter().enumerate() {
                let r = session.step(&m, &s.values[range.clone()])?;
                let mut row = vec![
                    i.to_string(),
                    r.loss_trajectory.last().copied().unwrap_or(f64::NAN).to_string(),
                ];
                row.extend(r.state.iter().map(f64::to_string));
                out.push_str(&csv_line(row));
            }
            run.write("simulation.csv", &out)?;
            println!("simulated {} steps", d.len());
        }
        Command::Detect { model, data, state, mask } => {
            let m = load_model(&mut run, &model)?;
            let d = load_data(&mut run, &data)?;
            let pb = resolve_pb(&m, &run.cfg, state.as_deref())?;
            let (mask, calibration) = match (&mask, &run.cfg.detect) {
                (Some(s), sec) => (s.clone(), sec.as_ref().map_or(500, |x| x.calibration)),
                (None, Some(sec)) => (sec.mask.clone(), sec.calibration),
                (None, None) => {
                    return Err(Error::InvalidConfig("detect needs --mask or a [detect] section".into()))
                }
            };
            let mask = MaskVector::parse(&mask)?;
            let residual = |values: &[f64]| -> Result<Vec<f64>> {
                let x_in = m.x_in_from_data(values)?;
                let pred = m.predict(&x_in, &mask, &pb)?;
                let target = m.x_out_from_data(values)?;
                Ok(target.iter().zip(&pred).map(|(a, b)| a - b).collect())
            };
            if d.len() <= calibration {
                return Err(Error::TooFewSamples {
                    need: calibration + 1,
                    got: d.len(),
                });
            }
            let calib: Vec<Vec<f64>> = d.samples[..calibration]
                .iter()
                .map(|s| residual(&s.values))
                .collect::<Result<_>>()?;
            let det = anomaly::calibrate(&calib)?;
            let mut out = String::from("row,score,anomalous\n");
            let mut alarms = 0;
            for (i, s) in d.samples.iter().enumerate().skip(calibration) {
                let score = det.score(&residual(&s.values)?)?;
                let flag = det.is_anomalous(score);
                alarms += usize::from(flag);
                out.push_str(&format!("{i},{score},{flag}\n"));
            }
            run.write_json("detector.json", &det)?;
            run.write("scores.csv", &out)?;
            println!(
                "threshold {:.3}, {alarms} of {} rows flagged",
                det.threshold,
                d.len() - calibration
            );
        }
        Command::Eval { scenario } => {
            let lab = Lab::new(run.cfg.eval.clone());
            let outcomes = if scenario == "all" {
                (1..=SCENARIOS.len() as u32).map(|c| lab.run(c)).collect()
            } else {
                vec![lab.run_named(&scenario)?]
            };
            for o in &outcomes {
                println!("{}", o.line());
            }
            passed = outcomes.iter().all(|o| o.passed);
            run.write_json("outcomes.json", &outcomes)?;
        }
    }
    run.finish(name)?;
    Ok(passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("GEMUCO_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: GEMUCO_THREADS: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: GEMUCO_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ (Error::Config(_) | Error::InvalidConfig(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
