//! End-to-end studies on the analytic worlds, shared by the `eval`
//! subcommand and the acceptance tests.

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::{self, AnomalyModel};
use crate::error::{Error, Result};
use crate::inference::{self, ControlRequest};
use crate::iteropt::{IterConfig, LossSpec, LossTerm};
use crate::modality::{MaskSet, MaskVector};
use crate::model::{GeMuCoModel, ParametricBias};
use crate::net::{self, NetSpec, Weights};
use crate::online::{OnlineConfig, OnlineMode, OnlineUpdater};
use crate::structure::{self, StructureConfig, StructureReport};
use crate::testbed::{self, ArmToolWorld, BipedWorld, TendonArmWorld, World};
use crate::trainer::{Dataset, MaskSource, OptimizerKind, Sample, TrainConfig};

/// Result of one acceptance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub criterion: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl Outcome {
    fn new(criterion: u32, name: &str, passed: bool, detail: String, seconds: f64) -> Self {
        Self {
            criterion,
            name: name.to_string(),
            passed,
            detail,
            seconds,
        }
    }

    fn failed(criterion: u32, name: &str, e: &Error) -> Self {
        Self::new(criterion, name, false, format!("error: {e}"), 0.0)
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<26} {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const SCENARIOS: [&str; 11] = [
    "gradient_check",
    "world_a_structure",
    "world_b_structure",
    "world_c_structure",
    "pb_self_organization",
    "online_pb_adaptation",
    "generalization",
    "optimizer_monotonicity",
    "world_b_simulation",
    "world_b_anomaly",
    "world_c_cog_control",
];

fn adam(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: lr,
        optimizer: OptimizerKind::Adam,
        seed,
        ..TrainConfig::default()
    }
}

fn structure_cfg(pb_dim: usize, probe_epochs: usize, final_epochs: usize, seed: u64) -> StructureConfig {
    StructureConfig {
        pb_dim,
        probe: TrainConfig {
            mask_source: MaskSource::All,
            ..adam(probe_epochs, 3e-3, seed)
        },
        final_train: adam(final_epochs, 3e-3, seed + 1),
        ..StructureConfig::default()
    }
}

/// Sizes and hyperparameters of every study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub seed: u64,
    pub gradient_cases: usize,
    pub arm_samples_per_state: usize,
    pub tendon_samples: usize,
    pub biped_samples_per_state: usize,
    pub arm_structure: StructureConfig,
    pub tendon_structure: StructureConfig,
    pub biped_structure: StructureConfig,
    /// Coarser thresholds of the world B comparison.
    pub tendon_c_out_wide: f64,
    pub tendon_c_in_wide: f64,
    pub iter: IterConfig,
    pub arm_online: OnlineConfig,
    /// Samples streamed in the grasp-switch study.
    pub arm_online_samples: usize,
    pub arm_weight_online: OnlineConfig,
    pub generalization_seeds: usize,
    pub generalization_trials: usize,
    pub generalization_samples: usize,
    pub biped_online: OnlineConfig,
    pub biped_online_samples: usize,
    /// Geometric prior of world B: scaled moment arms, shifted rest
    /// lengths and its own tendon compliance.
    pub tendon_prior_scale: f64,
    pub tendon_prior_shift: f64,
    pub tendon_prior_compliance: f64,
    pub tendon_online: OnlineConfig,
    pub tendon_online_samples: usize,
    pub simulation_cases: usize,
    pub simulation_iter: IterConfig,
    pub anomaly_calibration: usize,
    pub anomaly_normal_steps: usize,
    pub control_trials: usize,
    pub control_iter: IterConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 7,
            gradient_cases: 100,
            arm_samples_per_state: 1000,
            tendon_samples: 10000,
            biped_samples_per_state: 500,
            arm_structure: structure_cfg(2, 100, 200, 11),
            tendon_structure: structure_cfg(0, 200, 200, 21),
            biped_structure: structure_cfg(2, 150, 300, 31),
            tendon_c_out_wide: 0.30,
            tendon_c_in_wide: 0.30,
            iter: IterConfig::default(),
            arm_online: OnlineConfig {
                mode: OnlineMode::POnly,
                pb_lr: 0.1,
                optimizer: OptimizerKind::Adam,
                ..OnlineConfig::default()
            },
            arm_online_samples: 49,
            arm_weight_online: OnlineConfig {
                mode: OnlineMode::WOnly,
                weight_lr: 3e-3,
                optimizer: OptimizerKind::Adam,
                ..OnlineConfig::default()
            },
            generalization_seeds: 5,
            generalization_trials: 20,
            generalization_samples: 100,
            biped_online: OnlineConfig {
                mode: OnlineMode::POnly,
                pb_lr: 0.05,
                optimizer: OptimizerKind::Adam,
                ..OnlineConfig::default()
            },
            biped_online_samples: 100,
            tendon_prior_scale: 0.5,
            tendon_prior_shift: 0.0,
            tendon_prior_compliance: 0.1,
            tendon_online: OnlineConfig {
                mode: OnlineMode::Both,
                weight_lr: 1e-3,
                pb_lr: 1e-3,
                optimizer: OptimizerKind::Adam,
                buffer_capacity: 200,
                ..OnlineConfig::default()
            },
            tendon_online_samples: 1000,
            simulation_cases: 20,
            simulation_iter: IterConfig {
                gamma_max: 0.2,
                n_batch: 32,
                iterations: 300,
                ..IterConfig::default()
            },
            anomaly_calibration: 500,
            anomaly_normal_steps: 200,
            control_trials: 10,
            control_iter: IterConfig {
                iterations: 100,
                ..IterConfig::default()
            },
        }
    }
}

/// Largest relative deviation between analytic and central-difference
/// derivatives over random networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub cases: usize,
    pub max_rel_weights: f64,
    pub max_rel_input: f64,
    pub max_rel_jacobian: f64,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_weights.max(self.max_rel_input).max(self.max_rel_jacobian)
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

pub fn gradient_suite(cases: usize, seed: u64) -> Result<GradientReport> {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = GradientReport {
        cases,
        max_rel_weights: 0.0,
        max_rel_input: 0.0,
        max_rel_jacobian: 0.0,
    };
    for _ in 0..cases {
        let depth = rng.random_range(1..=4);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
        let spec = NetSpec::new(widths)?;
        let mut w = Weights::init(&spec, &mut rng);
        let x: Vec<f64> = (0..spec.input_width()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let c: Vec<f64> = (0..spec.output_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |w: &Weights, x: &[f64]| -> Result<f64> {
            let (y, _) = net::forward(&spec, w, x)?;
            Ok(y.iter().zip(&c).map(|(a, b)| a * b).sum())
        };
        let (_, trace) = net::forward(&spec, &w, &x)?;
        let (gw, gx) = net::backward(&spec, &w, &trace, &c)?;

        let flat = w.to_flat();
        let mut fd_w = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] = flat[i] + H;
            w.set_flat(&p)?;
            let up = objective(&w, &x)?;
            p[i] = flat[i] - H;
            w.set_flat(&p)?;
            let down = objective(&w, &x)?;
            fd_w[i] = (up - down) / (2.0 * H);
        }
        w.set_flat(&flat)?;
        rep.max_rel_weights = rep.max_rel_weights.max(rel_err(&gw.to_flat(), &fd_w));

        let mut fd_x = vec![0.0; x.len()];
        let mut fd_j = DMatrix::zeros(spec.output_width(), x.len());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += H;
            let mut xm = x.clone();
            xm[i] -= H;
            fd_x[i] = (objective(&w, &xp)? - objective(&w, &xm)?) / (2.0 * H);
            let (yp, _) = net::forward(&spec, &w, &xp)?;
            let (ym, _) = net::forward(&spec, &w, &xm)?;
            for o in 0..yp.len() {
                fd_j[(o, i)] = (yp[o] - ym[o]) / (2.0 * H);
            }
        }
        rep.max_rel_input = rep.max_rel_input.max(rel_err(&gx, &fd_x));
        let outs: Vec<usize> = (0..spec.output_width()).collect();
        let ins: Vec<usize> = (0..spec.input_width()).collect();
        let j = net::jacobian(&spec, &w, &x, &outs, &ins)?;
        rep.max_rel_jacobian = rep.max_rel_jacobian.max(rel_err(j.as_slice(), fd_j.as_slice()));
    }
    Ok(rep)
}

/// Rollouts of several worlds concatenated into one dataset.
pub fn collect<W: World>(worlds: &[W], n_per_world: usize, seed: u64) -> Result<Dataset> {
    let first = worlds.first().ok_or_else(|| Error::Empty("worlds".into()))?;
    let mut d = Dataset::new(first.layout());
    for (i, w) in worlds.iter().enumerate() {
        d.extend(&testbed::random_rollout(w, n_per_world, seed.wrapping_add(1000 * i as u64))?)?;
    }
    Ok(d)
}

pub fn arm_worlds() -> Vec<ArmToolWorld> {
    ArmToolWorld::grasp_grid()
        .into_iter()
        .map(|(l, a)| ArmToolWorld::new(l, a))
        .collect()
}

pub fn biped_worlds() -> Vec<BipedWorld> {
    BipedWorld::tool_grid()
        .into_iter()
        .map(|(m, l)| BipedWorld::new(m, l))
        .collect()
}

/// A trained model with the structure report that produced it.
#[derive(Debug, Clone)]
pub struct Study {
    pub report: StructureReport,
    pub model: GeMuCoModel,
    pub seconds: f64,
}

/// Average ranks, ties sharing the mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Coordinates of 2-D points along their principal axes, major axis first.
pub fn principal_coordinates(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    if points.iter().any(|p| p.len() != 2) {
        return Err(Error::InvalidConfig("principal coordinates need 2-D points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut c = Matrix2::zeros();
    for p in points {
        let d = nalgebra::Vector2::new(p[0] - mx, p[1] - my);
        c += d * d.transpose();
    }
    let eig = SymmetricEigen::new(c);
    let (i0, i1) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let (a0, a1) = (eig.eigenvectors.column(i0), eig.eigenvectors.column(i1));
    Ok(points
        .iter()
        .map(|p| {
            let d = nalgebra::Vector2::new(p[0] - mx, p[1] - my);
            [a0.dot(&d), a1.dot(&d)]
        })
        .collect())
}

/// Mean of the within-group rank correlations between a coordinate and a
/// factor, grouping by the other factor.
fn grouped_spearman(coord: &[f64], factor: &[f64], group: &[f64]) -> f64 {
    let mut keys: Vec<f64> = group.to_vec();
    keys.sort_by(f64::total_cmp);
    keys.dedup();
    let mut s = 0.0;
    for k in &keys {
        let idx: Vec<usize> = (0..group.len()).filter(|&i| group[i] == *k).collect();
        let a: Vec<f64> = idx.iter().map(|&i| coord[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| factor[i]).collect();
        s += spearman(&a, &b);
    }
    s / keys.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clamp_to(world: &(impl World + ?Sized), v: &[f64]) -> Vec<f64> {
    let (lo, hi) = world.command_bounds();
    v.iter().zip(lo.iter().zip(&hi)).map(|(x, (l, h))| x.clamp(*l, *h)).collect()
}

fn masks_text(set: &MaskSet, report: &StructureReport) -> String {
    let names: Vec<String> = set
        .iter()
        .filter(|m| report.mask_losses.iter().any(|ml| &ml.mask == *m && !ml.superset))
        .map(|m| m.to_string())
        .collect();
    format!("{{{}}}", names.join(","))
}

/// Lazily trained models shared by the studies, plus every optimizer loss
/// trajectory observed along the way.
pub struct Lab {
    pub settings: Settings,
    arm: OnceLock<std::result::Result<Study, String>>,
    tendon: OnceLock<std::result::Result<(Study, Vec<StructureReport>), String>>,
    biped: OnceLock<std::result::Result<Study, String>>,
    trajectories: Mutex<Vec<Vec<f64>>>,
}

impl Lab {
    pub fn new(settings: Settings) -> Self {
        Self {
            settings,
            arm: OnceLock::new(),
            tendon: OnceLock::new(),
            biped: OnceLock::new(),
            trajectories: Mutex::new(Vec::new()),
        }
    }

    fn record(&self, t: &[f64]) {
        if !t.is_empty() {
            self.trajectories.lock().expect("trajectory log").push(t.to_vec());
        }
    }

    pub fn trajectories(&self) -> Vec<Vec<f64>> {
        self.trajectories.lock().expect("trajectory log").clone()
    }

    pub fn arm(&self) -> Result<&Study> {
        self.arm
            .get_or_init(|| {
                let s = &self.settings;
                let t = Instant::now();
                let data = collect(&arm_worlds(), s.arm_samples_per_state, s.seed).map_err(|e| e.to_string())?;
                let (model, report) = structure::determine_structure(&data, &s.arm_structure).map_err(|e| e.to_string())?;
                Ok(Study {
                    report,
                    model,
                    seconds: t.elapsed().as_secs_f64(),
                })
            })
            .as_ref()
            .map_err(|e| Error::InvalidConfig(e.clone()))
    }

    /// The world B model (wide output threshold) and the reports at the
    /// narrow/narrow, wide/narrow and wide/wide thresholds.
    pub fn tendon(&self) -> Result<&(Study, Vec<StructureReport>)> {
        self.tendon
            .get_or_init(|| {
                let run = || -> Result<(Study, Vec<StructureReport>)> {
                    let s = &self.settings;
                    let t = Instant::now();
                    let data = testbed::random_rollout(&TendonArmWorld::default(), s.tendon_samples, s.seed)?;
                    let cfg = &s.tendon_structure;
                    let (train, eval) = data.split(cfg.eval_fraction)?;
                    let probe = structure::probe_train(&train, cfg)?;
                    let mut reports = Vec::new();
                    for (c_out, c_in) in [
                        (cfg.c_out, cfg.c_in),
                        (s.tendon_c_out_wide, cfg.c_in),
                        (s.tendon_c_out_wide, s.tendon_c_in_wide),
                    ] {
                        let c = StructureConfig {
                            c_out,
                            c_in,
                            ..cfg.clone()
                        };
                        reports.push(structure::analyze(&probe, &eval, &c)?);
                    }
                    let model = structure::build_final(&data, &reports[1], cfg)?;
                    Ok((
                        Study {
                            report: reports[1].clone(),
                            model,
                            seconds: t.elapsed().as_secs_f64(),
                        },
                        reports,
                    ))
                };
                run().map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::InvalidConfig(e.clone()))
    }

    pub fn biped(&self) -> Result<&Study> {
        self.biped
            .get_or_init(|| {
                let s = &self.settings;
                let t = Instant::now();
                let data = collect(&biped_worlds(), s.biped_samples_per_state, s.seed + 2).map_err(|e| e.to_string())?;
                let (model, report) = structure::determine_structure(&data, &s.biped_structure).map_err(|e| e.to_string())?;
                Ok(Study {
                    report,
                    model,
                    seconds: t.elapsed().as_secs_f64(),
                })
            })
            .as_ref()
            .map_err(|e| Error::InvalidConfig(e.clone()))
    }

    pub fn run(&self, criterion: u32) -> Outcome {
        let name = SCENARIOS
            .get(criterion.wrapping_sub(1) as usize)
            .copied()
            .unwrap_or("unknown");
        let t = Instant::now();
        let r = match criterion {
            1 => self.gradient_check(),
            2 => self.world_a_structure(),
            3 => self.world_b_structure(),
            4 => self.world_c_structure(),
            5 => self.pb_self_organization(),
            6 => self.online_pb_adaptation(),
            7 => self.generalization(),
            8 => self.optimizer_monotonicity(),
            9 => self.world_b_simulation(),
            10 => self.world_b_anomaly(),
            11 => self.world_c_cog_control(),
            _ => Err(Error::InvalidConfig(format!("no criterion {criterion}"))),
        };
        match r {
            Ok((passed, detail)) => Outcome::new(criterion, name, passed, detail, t.elapsed().as_secs_f64()),
            Err(e) => Outcome::failed(criterion, name, &e),
        }
    }

    pub fn run_named(&self, scenario: &str) -> Result<Outcome> {
        let i = SCENARIOS
            .iter()
            .position(|s| *s == scenario)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{scenario}`; known: {}", SCENARIOS.join(", "))))?;
        Ok(self.run(i as u32 + 1))
    }

    fn gradient_check(&self) -> Result<(bool, String)> {
        let t = Instant::now();
        let r = gradient_suite(self.settings.gradient_cases, self.settings.seed)?;
        let secs = t.elapsed().as_secs_f64();
        Ok((
            r.worst() < 1e-4 && secs < 10.0 && r.cases >= 100,
            format!(
                "{} cases, max rel err weights {:.1e}, input {:.1e}, jacobian {:.1e}",
                r.cases, r.max_rel_weights, r.max_rel_input, r.max_rel_jacobian
            ),
        ))
    }

    fn world_a_structure(&self) -> Result<(bool, String)> {
        let s = &self.settings;
        let study = self.arm()?;
        let r = &study.report;
        // determinism: a second probe on the same data must select the same structure
        let data = collect(&arm_worlds(), s.arm_samples_per_state, s.seed)?;
        let (train, eval) = data.split(s.arm_structure.eval_fraction)?;
        let again = structure::analyze(&structure::probe_train(&train, &s.arm_structure)?, &eval, &s.arm_structure)?;
        let deterministic = &again == r;
        let ok = r.out_groups == ["x_tool"] && r.in_groups == ["theta"] && deterministic && study.seconds < 180.0;
        Ok((
            ok,
            format!(
                "out {:?}, in {:?}, repeat identical: {deterministic}, {} samples in {:.0} s",
                r.out_groups,
                r.in_groups,
                data.len(),
                study.seconds
            ),
        ))
    }

    fn world_b_structure(&self) -> Result<(bool, String)> {
        let (study, reports) = self.tendon()?;
        let (narrow, wide, wide_in) = (&reports[0], &reports[1], &reports[2]);
        let loss = |g: &str| {
            narrow
                .group_losses
                .iter()
                .find(|l| l.group == g)
                .map_or(f64::NAN, |l| l.loss)
        };
        let (lt, lf, ll) = (loss("theta"), loss("f"), loss("l"));
        let c1 = lf > lt.max(ll);
        let c2 = narrow.out_groups.iter().all(|g| wide.out_groups.contains(g)) && wide.out_groups.len() > narrow.out_groups.len();
        let non_superset = |r: &StructureReport| -> Vec<MaskVector> {
            r.mask_losses
                .iter()
                .filter(|m| m.feasible && !m.superset)
                .map(|m| m.mask.clone())
                .collect()
        };
        let mut got = non_superset(wide);
        got.sort();
        let mut want = vec![MaskVector::parse("110")?, MaskVector::parse("011")?];
        want.sort();
        let c3 = got == want;
        let c4 = wide.feasible_full.is_subset_of(&wide_in.feasible_full) && wide_in.feasible_full.len() > wide.feasible_full.len();
        let ok = c1 && c2 && c3 && c4 && study.seconds < 300.0;
        Ok((
            ok,
            format!(
                "L_theta {lt:.3} L_f {lf:.3} L_l {ll:.3}; out {:?} -> {:?}; feasible {} -> {}",
                narrow.out_groups,
                wide.out_groups,
                masks_text(&wide.feasible_full, wide),
                masks_text(&wide_in.feasible_full, wide_in),
            ),
        ))
    }

    fn world_c_structure(&self) -> Result<(bool, String)> {
        let study = self.biped()?;
        let r = &study.report;
        let all_out = r.out_groups.len() == 4;
        let theta_only = MaskVector::parse("1000")?;
        let has = r.feasible_full.contains(&theta_only);
        Ok((
            all_out && has && study.seconds < 300.0,
            format!(
                "out {:?}, {} feasible masks, theta-only feasible: {has}",
                r.out_groups,
                r.feasible_full.len()
            ),
        ))
    }

    fn pb_self_organization(&self) -> Result<(bool, String)> {
        let arm = &self.arm()?.model;
        let grid = ArmToolWorld::grasp_grid();
        let pbs: Vec<Vec<f64>> = grid
            .iter()
            .map(|(l, a)| arm.pb_for(&ArmToolWorld::state_label(*l, *a)).values)
            .collect();
        let pc = principal_coordinates(&pbs)?;
        let ls: Vec<f64> = grid.iter().map(|g| g.0).collect();
        let phis: Vec<f64> = grid.iter().map(|g| g.1).collect();
        let c0: Vec<f64> = pc.iter().map(|p| p[0]).collect();
        let c1: Vec<f64> = pc.iter().map(|p| p[1]).collect();
        let a = (grouped_spearman(&c0, &ls, &phis), grouped_spearman(&c1, &phis, &ls));
        let b = (grouped_spearman(&c1, &ls, &phis), grouped_spearman(&c0, &phis, &ls));
        let score = |p: (f64, f64)| p.0.abs().min(p.1.abs());
        let (rho_l, rho_phi) = if score(a) >= score(b) { a } else { b };
        let arm_ok = rho_l.abs() >= 0.8 && rho_phi.abs() >= 0.8;

        let biped = &self.biped()?.model;
        let s = &self.settings;
        let trained: Vec<(String, ParametricBias)> = BipedWorld::tool_grid()
            .iter()
            .map(|(m, l)| {
                let id = BipedWorld::state_label(*m, *l);
                (id.clone(), biped.pb_for(&id))
            })
            .collect();
        let start = ParametricBias::new(
            (0..biped.pb_dim)
                .map(|k| mean(&trained.iter().map(|(_, p)| p.values[k]).collect::<Vec<_>>()))
                .collect(),
            "start",
        );
        let mut correct = 0;
        for (i, w) in biped_worlds().iter().enumerate() {
            let fresh = testbed::random_rollout(w, s.biped_online_samples, s.seed + 500 + i as u64)?;
            let mut u = OnlineUpdater::new(biped.clone(), start.clone(), s.biped_online.clone())?;
            for smp in fresh.samples {
                u.observe(smp)?;
            }
            let p = u.pb();
            let nearest = trained
                .iter()
                .min_by(|a, b| p.distance(&a.1).total_cmp(&p.distance(&b.1)))
                .map(|(id, _)| id.clone())
                .expect("six states");
            if nearest == w.state_id() {
                correct += 1;
            }
        }
        let biped_ok = correct >= 5;
        Ok((
            arm_ok && biped_ok,
            format!("world A rho(l) {rho_l:.2} rho(phi) {rho_phi:.2}; world C {correct}/6 classified"),
        ))
    }

    /// Mean tool-tip error of direct predictions against the noise-free world.
    fn arm_tip_error(model: &GeMuCoModel, world: &ArmToolWorld, pb: &ParametricBias, thetas: &[Vec<f64>]) -> Result<f64> {
        let mask = MaskVector::ones(1);
        let mut errs = Vec::with_capacity(thetas.len());
        for th in thetas {
            let mut raw = th.clone();
            raw.extend([0.0, 0.0]);
            let pred = model.predict_raw(&raw, &mask, pb)?;
            errs.push(testbed::oracle_error(&pred, &world.tool_tip(th)?)?);
        }
        Ok(mean(&errs))
    }

    fn online_pb_adaptation(&self) -> Result<(bool, String)> {
        let s = &self.settings;
        let model = &self.arm()?.model;
        let t = Instant::now();
        let before = ArmToolWorld::new(500.0, 60.0);
        let after = ArmToolWorld::new(500.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed + 600);
        let thetas: Vec<Vec<f64>> = (0..100).map(|_| testbed::random_command(&after, &mut rng)).collect();
        let pb0 = model.pb_for(&before.state_id());
        let pre = Self::arm_tip_error(model, &after, &pb0, &thetas)?;
        let stream = testbed::random_rollout(&after, s.arm_online_samples, s.seed + 601)?;
        let mut u = OnlineUpdater::new(model.clone(), pb0, s.arm_online.clone())?;
        let mut updates = 0;
        for smp in stream.samples {
            if u.observe(smp)? {
                updates += 1;
            }
        }
        let post = Self::arm_tip_error(model, &after, u.pb(), &thetas)?;
        let nearest = ArmToolWorld::grasp_grid()
            .into_iter()
            .map(|(l, a)| ArmToolWorld::state_label(l, a))
            .min_by(|a, b| u.pb().distance(&model.pb_for(a)).total_cmp(&u.pb().distance(&model.pb_for(b))))
            .expect("nine states");
        let secs = t.elapsed().as_secs_f64();
        Ok((
            post <= 0.5 * pre && updates >= 30 && secs < 60.0,
            format!(
                "tip error {pre:.1} mm -> {post:.1} mm after {updates} updates; nearest trained state {nearest}"
            ),
        ))
    }

    /// Input-iterated control toward `reference` near `theta_orig`; returns
    /// the realized tool-tip error.
    fn arm_control_error(
        &self,
        model: &GeMuCoModel,
        pb: &ParametricBias,
        world: &ArmToolWorld,
        theta_orig: &[f64],
        reference: &[f64],
    ) -> Result<f64> {
        let mut init = theta_orig.to_vec();
        init.extend([0.0, 0.0]);
        let req = ControlRequest {
            control_group: "theta".into(),
            loss: LossSpec::new(vec![
                LossTerm::TargetMatch {
                    group: "x_tool".into(),
                    target: reference.to_vec(),
                    weight: 1.0,
                    transform: None,
                },
                LossTerm::InputDeviation {
                    group: "theta".into(),
                    reference: theta_orig.to_vec(),
                    weight: 0.3,
                },
            ]),
            init,
            init_available: vec![true, false],
        };
        let r = inference::control(model, &req, pb, &self.settings.iter)?;
        self.record(&r.loss_trajectory);
        let theta = clamp_to(world, &r.control);
        testbed::oracle_error(&world.tool_tip(&theta)?, reference)
    }

    fn generalization(&self) -> Result<(bool, String)> {
        let s = &self.settings;
        let model = &self.arm()?.model;
        let before = ArmToolWorld::new(500.0, 30.0);
        let after = ArmToolWorld::new(500.0, 60.0);
        let pb0 = model.pb_for(&before.state_id());
        let family = |rng: &mut ChaCha8Rng, first: bool| -> Vec<f64> {
            (0..4)
                .map(|_| {
                    if first {
                        rng.random_range(-0.8..0.0)
                    } else {
                        rng.random_range(0.0..0.8)
                    }
                })
                .collect()
        };
        let mut wins = 0;
        let mut lines = Vec::new();
        for k in 0..s.generalization_seeds {
            let seed = s.seed + 700 + 10 * k as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let avail = [true, true];
            let mut stream = Vec::new();
            for _ in 0..s.generalization_samples {
                let th = family(&mut rng, true);
                stream.push(testbed::observe(&after, &th, &avail, Some(&mut rng))?);
            }
            let adapt = |cfg: &OnlineConfig| -> Result<(GeMuCoModel, ParametricBias)> {
                let mut u = OnlineUpdater::new(model.clone(), pb0.clone(), OnlineConfig { seed, ..cfg.clone() })?;
                for smp in &stream {
                    u.observe(smp.clone())?;
                }
                Ok(u.into_parts())
            };
            let (mp, pp) = adapt(&s.arm_online)?;
            let (mw, pw) = adapt(&s.arm_weight_online)?;
            let mut ep = Vec::new();
            let mut ew = Vec::new();
            for _ in 0..s.generalization_trials {
                let orig = family(&mut rng, false);
                let goal: Vec<f64> = orig.iter().map(|t| (t + rng.random_range(-0.2..0.2)).clamp(-0.8, 0.8)).collect();
                let reference = after.tool_tip(&goal)?;
                ep.push(self.arm_control_error(&mp, &pp, &after, &orig, &reference)?);
                ew.push(self.arm_control_error(&mw, &pw, &after, &orig, &reference)?);
            }
            let (p, w) = (mean(&ep), mean(&ew));
            if p <= w {
                wins += 1;
            }
            lines.push(format!("{p:.0}/{w:.0}"));
        }
        Ok((
            wins * 5 >= 4 * s.generalization_seeds && s.generalization_seeds >= 5,
            format!(
                "p_only <= w_only in {wins}/{} seeds (mm, p/w: {})",
                s.generalization_seeds,
                lines.join(" ")
            ),
        ))
    }

    fn optimizer_monotonicity(&self) -> Result<(bool, String)> {
        let t = self.trajectories();
        let bad = t
            .iter()
            .filter(|tr| tr.windows(2).any(|w| w[1] > w[0]))
            .count();
        Ok((
            !t.is_empty() && bad == 0,
            format!("{} of {} recorded runs non-increasing", t.len() - bad, t.len()),
        ))
    }

    fn world_b_simulation(&self) -> Result<(bool, String)> {
        let s = &self.settings;
        let (study, _) = self.tendon()?;
        let truth = TendonArmWorld::default();
        let prior_world = TendonArmWorld {
            compliance: s.tendon_prior_compliance,
            ..truth.perturbed(s.tendon_prior_scale, s.tendon_prior_shift, "tendon")
        };
        let prior_data = testbed::random_rollout(&prior_world, s.tendon_samples, s.seed + 900)?;
        let prior = structure::build_final(&prior_data, &study.report, &s.tendon_structure)?;
        let pb = prior.zero_pb();

        let mut rng = ChaCha8Rng::seed_from_u64(s.seed + 901);
        let mut cases = Vec::new();
        for _ in 0..s.simulation_cases {
            let theta: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
            let f: Vec<f64> = (0..4).map(|_| rng.random_range(15.0..40.0)).collect();
            cases.push((theta, f));
        }
        let sim_error = |model: &GeMuCoModel| -> Result<f64> {
            let mut sq = 0.0;
            for (theta, f) in &cases {
                let l_send = truth.lengths(theta, f)?;
                let tau = truth.joint_torque(f)?;
                let (theta_true, _) = truth.equilibrium(&l_send, &tau)?;
                let constraints = LossSpec::new(vec![
                    LossTerm::Magnitude {
                        group: "f".into(),
                        weight: 0.1,
                    },
                    LossTerm::TorqueBalance {
                        angle_group: "theta".into(),
                        tension_group: "f".into(),
                        length_group: "l".into(),
                        tau_ext: tau.clone(),
                        weight: 0.001,
                        angle_reference: None,
                    },
                ]);
                let r = inference::simulate(model, "l", &l_send, &constraints, &pb, &s.simulation_iter, None)?;
                self.record(&r.loss_trajectory);
                let th = &r.state[model.out_layout.range_of("theta")?];
                sq += th.iter().zip(&theta_true).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 2.0;
            }
            Ok((sq / cases.len() as f64).sqrt())
        };
        let before = sim_error(&prior)?;
        let stream = testbed::random_rollout(&truth, s.tendon_online_samples, s.seed + 902)?;
        let mut u = OnlineUpdater::new(prior.clone(), pb.clone(), s.tendon_online.clone())?;
        for smp in stream.samples {
            u.observe(smp)?;
        }
        let (updated, _) = u.into_parts();
        let after = sim_error(&updated)?;

        // posture clamp on the model trained on world data, and on the updated prior for reference
        let clamp_error = |model: &GeMuCoModel| -> Result<f64> {
            let mut worst: f64 = 0.0;
            for (theta, f) in cases.iter().take(5) {
                let l_send = truth.lengths(theta, f)?;
                let theta_fix: Vec<f64> = theta.iter().zip([0.1, -0.1]).map(|(t, d)| t + d).collect();
                let constraints = LossSpec::new(vec![
                    LossTerm::Magnitude {
                        group: "f".into(),
                        weight: 0.1,
                    },
                    LossTerm::InputDeviation {
                        group: "theta".into(),
                        reference: theta_fix.clone(),
                        weight: 1.0,
                    },
                ]);
                let r = inference::simulate(model, "l", &l_send, &constraints, &pb, &s.simulation_iter, None)?;
                self.record(&r.loss_trajectory);
                let th = &r.state[model.out_layout.range_of("theta")?];
                worst = worst.max(testbed::oracle_error(th, &theta_fix)?);
            }
            Ok(worst)
        };
        let clamp = clamp_error(&study.model)?;
        let clamp_updated = clamp_error(&updated)?;
        Ok((
            after <= 0.7 * before && clamp < 0.05,
            format!(
                "theta RMS {before:.3} -> {after:.3} rad ({:.0}% better); clamp error max {clamp:.3} rad (updated prior {clamp_updated:.3})",
                100.0 * (1.0 - after / before)
            ),
        ))
    }

    /// Residual of `l` predicted from `(theta, f)`, normalized.
    fn tendon_residual(model: &GeMuCoModel, s: &Sample) -> Result<Vec<f64>> {
        let x_in = model.x_in_from_data(&s.values)?;
        let pred = model.predict(&x_in, &MaskVector::parse("110")?, &model.zero_pb())?;
        let target = model.x_out_from_data(&s.values)?;
        Ok(target.iter().zip(&pred).map(|(a, b)| a - b).collect())
    }

    fn world_b_anomaly(&self) -> Result<(bool, String)> {
        let s = &self.settings;
        let model = &self.tendon()?.0.model;
        let world = TendonArmWorld::default();
        let calib = testbed::random_rollout(&world, s.anomaly_calibration, s.seed + 1000)?;
        let residuals: Vec<Vec<f64>> = calib
            .samples
            .iter()
            .map(|smp| Self::tendon_residual(model, smp))
            .collect::<Result<_>>()?;
        let det: AnomalyModel = anomaly::calibrate(&residuals)?;
        let normal = testbed::random_rollout(&world, s.anomaly_normal_steps, s.seed + 1001)?;
        let mut alarms = 0;
        for smp in &normal.samples {
            if det.is_anomalous(det.score(&Self::tendon_residual(model, smp)?)?) {
                alarms += 1;
            }
        }
        let rate = alarms as f64 / normal.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed + 1002);
        let mut worst_delay = 0;
        for muscle in 0..4 {
            let last = normal.samples.last().expect("normal steps");
            let stuck = last.values[6 + muscle];
            let faulty = world.with_fault(muscle, stuck);
            let mut delay = None;
            for step in 1..=10 {
                let cmd = testbed::random_command(&faulty, &mut rng);
                let smp = testbed::observe(&faulty, &cmd, &[true; 3], Some(&mut rng))?;
                if det.is_anomalous(det.score(&Self::tendon_residual(model, &smp)?)?) {
                    delay = Some(step);
                    break;
                }
            }
            worst_delay = worst_delay.max(delay.unwrap_or(usize::MAX));
        }
        let flagged = worst_delay <= 10;
        Ok((
            flagged && rate <= 0.02,
            format!(
                "false alarms {alarms}/{} ({:.1}%), faults flagged within {} steps, threshold {:.2}",
                normal.len(),
                100.0 * rate,
                if flagged { worst_delay.to_string() } else { ">10".into() },
                det.threshold
            ),
        ))
    }

    fn world_c_cog_control(&self) -> Result<(bool, String)> {
        let s = &self.settings;
        let model = &self.biped()?.model;
        let world = BipedWorld::new(80.0, 236.0);
        let pb = model.pb_for(&world.state_id());
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed + 1100);
        let (mut tool0, mut cog0, mut tool1, mut cog1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..s.control_trials {
            let start = testbed::random_command(&world, &mut rng);
            let goal = testbed::random_command(&world, &mut rng);
            let g = world.tool_tip(&goal)?;
            let reference = vec![g[0], g[2]];
            let init = world.observe_clean(&start)?;
            for with_cog in [false, true] {
                let mut terms = vec![LossTerm::TargetMatch {
                    group: "x_tool".into(),
                    target: reference.clone(),
                    weight: 1.0,
                    transform: None,
                }];
                if with_cog {
                    terms.push(LossTerm::Magnitude {
                        group: "x_cog".into(),
                        weight: 0.01,
                    });
                }
                let req = ControlRequest {
                    control_group: "theta".into(),
                    loss: LossSpec::new(terms),
                    init: init.clone(),
                    init_available: vec![true; 4],
                };
                let r = inference::control(model, &req, &pb, &s.control_iter)?;
                self.record(&r.loss_trajectory);
                let cmd = clamp_to(&world, &r.control);
                let tip = world.tool_tip(&cmd)?;
                let tool_err = testbed::oracle_error(&[tip[0], tip[2]], &reference)?;
                let cog = norm(&world.cog(&cmd)?);
                if with_cog {
                    tool1.push(tool_err);
                    cog1.push(cog);
                } else {
                    tool0.push(tool_err);
                    cog0.push(cog);
                }
            }
        }
        let (t0, c0, t1, c1) = (mean(&tool0), mean(&cog0), mean(&tool1), mean(&cog1));
        Ok((
            c1 < c0 && t1 <= 1.2 * t0,
            format!("CoG {c0:.2} -> {c1:.2} mm, tool error {t0:.2} -> {t1:.2} mm"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 0.5).abs() < 1e-12);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![1.5, 0.0, 1.5]);
    }

    #[test]
    fn principal_axes_of_a_line() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let pc = principal_coordinates(&pts).unwrap();
        for p in &pc {
            assert!(p[1].abs() < 1e-9);
        }
        assert!((pc[4][0] - pc[0][0]).abs() - 4.0 * 5f64.sqrt() < 1e-9);
    }

    #[test]
    fn small_gradient_suite() {
        let r = gradient_suite(10, 3).unwrap();
        assert!(r.worst() < 1e-4, "{r:?}");
    }

    #[test]
    fn outcome_line_format() {
        let o = Outcome::new(3, "world_b_structure", true, "ok".into(), 1.25);
        assert_eq!(o.line(), "[PASS]  3 world_b_structure          ok (1.2 s)");
    }
}
