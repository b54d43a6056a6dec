//! State estimation, control and simulation on top of [`crate::iteropt`].

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::iteropt::{self, IterConfig, LossSpec, LossTerm, OptContext, Variable};
use crate::modality::MaskVector;
use crate::model::{GeMuCoModel, LatentState, ParametricBias};

/// Raw values over the model's data layout with per-group availability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
    pub available: Vec<bool>,
}

impl Observation {
    pub fn new(model: &GeMuCoModel, values: Vec<f64>, available: Vec<bool>) -> Result<Self> {
        let layout = &model.data_layout;
        check_len("observation", layout.total_dim(), values.len())?;
        check_len(
            "observation availability",
            layout.n_groups(),
            available.len(),
        )?;
        for (g, &a) in available.iter().enumerate() {
            if a && layout.range(g).any(|c| !values[c].is_finite()) {
                return Err(Error::NonFinite {
                    iteration: 0,
                    what: format!("observed group `{}`", layout.groups()[g].name),
                });
            }
        }
        Ok(Self { values, available })
    }

    /// Everything available.
    pub fn full(model: &GeMuCoModel, values: Vec<f64>) -> Result<Self> {
        let n = model.data_layout.n_groups();
        Self::new(model, values, vec![true; n])
    }

    /// Same values with the named groups hidden.
    pub fn hiding(mut self, model: &GeMuCoModel, groups: &[&str]) -> Result<Self> {
        for g in groups {
            let i = model.data_layout.require(g)?;
            self.available[i] = false;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DirectMask,
    LatentIterate,
    InputIterate,
}

/// Input mask induced by per-group availability over the data layout.
fn induced_mask(model: &GeMuCoModel, available: &[bool]) -> Result<MaskVector> {
    model.mask_from_availability(available)
}

/// The largest feasible mask showing only available input groups.
pub fn nearest_feasible_mask(model: &GeMuCoModel, available_in: &MaskVector) -> Option<MaskVector> {
    model
        .feasible_masks
        .iter()
        .filter(|m| m.is_subset_of(available_in) && !m.is_zero())
        .max_by_key(|m| m.count_visible())
        .cloned()
}

pub fn select_strategy(model: &GeMuCoModel, target: &str, available: &[bool]) -> Result<Strategy> {
    check_len(
        "availability",
        model.data_layout.n_groups(),
        available.len(),
    )?;
    if !model.out_layout.contains(target) {
        return if model.in_layout.contains(target) {
            Ok(Strategy::InputIterate)
        } else {
            Err(Error::UnknownGroup(target.to_string()))
        };
    }
    let m = induced_mask(model, available)?;
    if model.feasible_masks.contains(&m) {
        Ok(Strategy::DirectMask)
    } else {
        Ok(Strategy::LatentIterate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Raw values over the data layout. Observed groups pass through.
    pub values: Vec<f64>,
    pub strategy: Strategy,
    pub loss_trajectory: Vec<f64>,
}

fn observation_term(model: &GeMuCoModel, obs: &Observation) -> Result<LossTerm> {
    Ok(LossTerm::ObservationMatch {
        target: model.out_layout.gather(&model.data_layout, &obs.values)?,
        available: model
            .out_layout
            .gather_flags(&model.data_layout, &obs.available)?,
        weight: 1.0,
    })
}

/// Latent code of the observation under its nearest feasible mask, or zero.
fn initial_latent(
    model: &GeMuCoModel,
    raw: &[f64],
    available_in: &MaskVector,
    pb: &ParametricBias,
) -> Result<Vec<f64>> {
    match nearest_feasible_mask(model, available_in) {
        Some(m) => Ok(model.encode(&model.x_in_from_data(raw)?, &m, pb)?.0),
        None => Ok(vec![0.0; model.latent_dim]),
    }
}

/// Fills every group of the union layout. Which strategy runs depends on
/// what is hidden: input-only groups need `input_iterate`, otherwise the
/// induced mask decides between a direct prediction and `latent_iterate`.
pub fn estimate(
    model: &GeMuCoModel,
    obs: &Observation,
    pb: &ParametricBias,
    cfg: &IterConfig,
) -> Result<Estimate> {
    let layout = &model.data_layout;
    check_len("observation", layout.total_dim(), obs.values.len())?;
    check_len(
        "observation availability",
        layout.n_groups(),
        obs.available.len(),
    )?;
    if !obs.available.iter().any(|&a| a) {
        return Err(Error::Empty("observation has no available group".into()));
    }
    let hidden_input_only = (0..layout.n_groups()).any(|g| {
        let name = &layout.groups()[g].name;
        !obs.available[g] && model.in_layout.contains(name) && !model.out_layout.contains(name)
    });
    let avail_in = induced_mask(model, &obs.available)?;
    let mut values = obs.values.clone();
    let (strategy, out_norm, in_raw, traj) = if hidden_input_only {
        let mask = nearest_feasible_mask(model, &model.all_visible()).ok_or_else(|| {
            Error::NoFeasiblePath("no feasible mask over the input groups".into())
        })?;
        let mut x_in = model.x_in_from_data(&obs.values)?;
        let mut frozen = Vec::new();
        for g in 0..model.n_in_groups() {
            let r = model.in_layout.range(g);
            if avail_in.visible(g) {
                frozen.extend(r);
            } else {
                for c in r {
                    x_in[c] = 0.0;
                }
            }
        }
        let icfg = IterConfig {
            variable: Variable::Input,
            frozen,
            ..cfg.clone()
        };
        let loss = LossSpec::new(vec![observation_term(model, obs)?]);
        let ctx = OptContext::new(x_in.clone(), mask, pb.values.clone());
        let r = iteropt::optimize(model, &x_in, &loss, &icfg, &ctx)?;
        (
            Strategy::InputIterate,
            r.prediction,
            Some(model.in_to_raw(&r.value)?),
            r.loss_trajectory,
        )
    } else if model.feasible_masks.contains(&avail_in) {
        let pred = model.predict(&model.x_in_from_data(&obs.values)?, &avail_in, pb)?;
        (Strategy::DirectMask, pred, None, Vec::new())
    } else {
        let z0 = initial_latent(model, &obs.values, &avail_in, pb)?;
        let loss = LossSpec::new(vec![observation_term(model, obs)?]);
        let lcfg = cfg.with_variable(Variable::Latent);
        let ctx = OptContext::latent(model, pb.values.clone());
        let r = iteropt::optimize(model, &z0, &loss, &lcfg, &ctx)?;
        (
            Strategy::LatentIterate,
            r.prediction,
            None,
            r.loss_trajectory,
        )
    };
    let out_raw = model.out_to_raw(&out_norm)?;
    let mut write = |sub: &crate::modality::ModalityLayout, x: &[f64]| -> Result<()> {
        for (g, grp) in sub.groups().iter().enumerate() {
            let d = layout.require(&grp.name)?;
            if !obs.available[d] {
                let src = sub.range(g);
                let dst = layout.range(d);
                values[dst].copy_from_slice(&x[src]);
            }
        }
        Ok(())
    };
    if let Some(x) = &in_raw {
        write(&model.in_layout, x)?;
    }
    write(&model.out_layout, &out_raw)?;
    Ok(Estimate {
        values,
        strategy,
        loss_trajectory: traj,
    })
}

/// What is optimized and where the search starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRequest {
    pub control_group: String,
    pub loss: LossSpec,
    /// Raw values over the data layout the search starts from.
    pub init: Vec<f64>,
    /// Groups of `init` that are meaningful.
    pub init_available: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResult {
    /// Raw control values.
    pub control: Vec<f64>,
    pub strategy: Strategy,
    pub loss_trajectory: Vec<f64>,
    /// Raw predicted outputs at the solution.
    pub prediction: Vec<f64>,
}

/// A single untransformed target on an input group, predictable in one pass.
fn direct_target<'a>(model: &GeMuCoModel, loss: &'a LossSpec) -> Option<(&'a str, &'a [f64])> {
    match loss.terms.as_slice() {
        [LossTerm::TargetMatch {
            group,
            target,
            transform: None,
            ..
        }] if model.in_layout.contains(group) => Some((group.as_str(), target.as_slice())),
        _ => None,
    }
}

/// Finds a control value minimizing `req.loss`. Tries a direct prediction,
/// then `input_iterate` over the control group alone, then `latent_iterate`,
/// then `input_iterate` under the nearest feasible mask.
pub fn control(
    model: &GeMuCoModel,
    req: &ControlRequest,
    pb: &ParametricBias,
    cfg: &IterConfig,
) -> Result<ControlResult> {
    let layout = &model.data_layout;
    check_len("control init", layout.total_dim(), req.init.len())?;
    check_len(
        "control init availability",
        layout.n_groups(),
        req.init_available.len(),
    )?;
    let control_is_out = model.out_layout.contains(&req.control_group);
    let control_is_in = model.in_layout.contains(&req.control_group);
    if !control_is_out && !control_is_in {
        return Err(Error::UnknownGroup(req.control_group.clone()));
    }
    if control_is_out {
        if let Some((group, target)) = direct_target(model, &req.loss) {
            let m = single_group_mask(model, group)?;
            if model.feasible_masks.contains(&m) {
                let mut raw = req.init.clone();
                let r = layout.range_of(group)?;
                check_len("target", r.len(), target.len())?;
                raw[r].copy_from_slice(target);
                let pred = model.predict_raw(&raw, &m, pb)?;
                let r = model.out_layout.range_of(&req.control_group)?;
                return Ok(ControlResult {
                    control: pred[r].to_vec(),
                    strategy: Strategy::DirectMask,
                    loss_trajectory: Vec::new(),
                    prediction: pred,
                });
            }
        }
    }
    // predicting everything from the control alone keeps command and outcome consistent
    let own = if control_is_in {
        Some(single_group_mask(model, &req.control_group)?).filter(|m| model.feasible_masks.contains(m))
    } else {
        None
    };
    if control_is_out && own.is_none() {
        let avail_in = induced_mask(model, &req.init_available)?;
        let z0 = initial_latent(model, &req.init, &avail_in, pb)?;
        let lcfg = cfg.with_variable(Variable::Latent);
        let ctx = OptContext::latent(model, pb.values.clone());
        let r = iteropt::optimize(model, &z0, &req.loss, &lcfg, &ctx)?;
        let pred = model.out_to_raw(&r.prediction)?;
        let range = model.out_layout.range_of(&req.control_group)?;
        return Ok(ControlResult {
            control: pred[range].to_vec(),
            strategy: Strategy::LatentIterate,
            loss_trajectory: r.loss_trajectory,
            prediction: pred,
        });
    }
    let mask = match own {
        Some(m) => m,
        None => nearest_feasible_mask(model, &model.all_visible())
            .ok_or_else(|| Error::NoFeasiblePath("no feasible mask over the input groups".into()))?,
    };
    let control_range = model.in_layout.range_of(&req.control_group)?;
    let frozen: Vec<usize> = (0..model.in_layout.total_dim())
        .filter(|c| !control_range.contains(c))
        .collect();
    let x0 = model.x_in_from_data(&req.init)?;
    let icfg = IterConfig {
        variable: Variable::Input,
        frozen,
        ..cfg.clone()
    };
    let ctx = OptContext::new(x0.clone(), mask, pb.values.clone());
    let r = iteropt::optimize(model, &x0, &req.loss, &icfg, &ctx)?;
    let x_raw = model.in_to_raw(&r.value)?;
    Ok(ControlResult {
        control: x_raw[control_range].to_vec(),
        strategy: Strategy::InputIterate,
        loss_trajectory: r.loss_trajectory,
        prediction: model.out_to_raw(&r.prediction)?,
    })
}

fn single_group_mask(model: &GeMuCoModel, group: &str) -> Result<MaskVector> {
    let g = model.in_layout.require(group)?;
    let mut bits = vec![false; model.n_in_groups()];
    bits[g] = true;
    Ok(MaskVector::new(bits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Raw simulated outputs.
    pub state: Vec<f64>,
    pub latent: Vec<f64>,
    pub loss_trajectory: Vec<f64>,
}

/// Latent search matching the commanded group plus constraint terms. Starts
/// from `z0` when given, else from the command encoded under its nearest
/// feasible mask.
pub fn simulate(
    model: &GeMuCoModel,
    command_group: &str,
    x_send: &[f64],
    constraints: &LossSpec,
    pb: &ParametricBias,
    cfg: &IterConfig,
    z0: Option<&LatentState>,
) -> Result<SimResult> {
    let r = model.out_layout.range_of(command_group)?;
    check_len("commanded values", r.len(), x_send.len())?;
    let mut loss = LossSpec::new(vec![LossTerm::TargetMatch {
        group: command_group.to_string(),
        target: x_send.to_vec(),
        weight: 1.0,
        transform: None,
    }]);
    loss.terms.extend(constraints.terms.iter().cloned());
    let init = match z0 {
        Some(z) => {
            check_len("latent", model.latent_dim, z.0.len())?;
            z.0.clone()
        }
        None => {
            let layout = &model.data_layout;
            let mut raw = vec![0.0; layout.total_dim()];
            let mut avail = vec![false; layout.n_groups()];
            let d = layout.require(command_group)?;
            raw[layout.range(d)].copy_from_slice(x_send);
            avail[d] = true;
            if model.in_layout.contains(command_group) {
                // unobserved groups sit at the training mean
                let mean = &model.normalizer.mean;
                for (g, a) in avail.iter().enumerate() {
                    if !a {
                        for c in layout.range(g) {
                            raw[c] = mean[c];
                        }
                    }
                }
                let avail_in = induced_mask(model, &avail)?;
                initial_latent(model, &raw, &avail_in, pb)?
            } else {
                vec![0.0; model.latent_dim]
            }
        }
    };
    let lcfg = cfg.with_variable(Variable::Latent);
    let ctx = OptContext::latent(model, pb.values.clone());
    let res = iteropt::optimize(model, &init, &loss, &lcfg, &ctx)?;
    Ok(SimResult {
        state: model.out_to_raw(&res.prediction)?,
        latent: res.value,
        loss_trajectory: res.loss_trajectory,
    })
}

/// Time-marching simulation that starts each step from the previous latent.
#[derive(Debug, Clone)]
pub struct SimulationSession {
    pub command_group: String,
    pub constraints: LossSpec,
    pub pb: ParametricBias,
    pub cfg: IterConfig,
    pub carry_over: bool,
    last: Option<LatentState>,
}

impl SimulationSession {
    pub fn new(
        command_group: impl Into<String>,
        constraints: LossSpec,
        pb: ParametricBias,
        cfg: IterConfig,
    ) -> Self {
        Self {
            command_group: command_group.into(),
            constraints,
            pb,
            cfg,
            carry_over: true,
            last: None,
        }
    }

    pub fn step(&mut self, model: &GeMuCoModel, x_send: &[f64]) -> Result<SimResult> {
        let z0 = if self.carry_over {
            self.last.as_ref()
        } else {
            None
        };
        let r = simulate(
            model,
            &self.command_group,
            x_send,
            &self.constraints,
            &self.pb,
            &self.cfg,
            z0,
        )?;
        self.last = Some(LatentState(r.latent.clone()));
        Ok(r)
    }

    pub fn reset(&mut self) {
        self.last = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::{MaskSet, ModalityLayout, Normalizer};
    use crate::net::Weights;
    use crate::trainer::{train, Dataset, OptimizerKind, Sample, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn masks(list: &[&str]) -> MaskSet {
        let mut s = MaskSet::default();
        for m in list {
            s.insert(MaskVector::parse(m).unwrap()).unwrap();
        }
        s
    }

    /// `b = a` with both groups in and out, trained until accurate.
    fn identity_model() -> GeMuCoModel {
        let layout = ModalityLayout::new([("a", 1), ("b", 1)]).unwrap();
        let mut d = Dataset::new(layout.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let a: f64 = rng.random_range(-1.0..1.0);
            d.push(Sample::fully_observed("s", vec![a, a], 2)).unwrap();
        }
        let m = GeMuCoModel::new(
            &layout,
            &["a", "b"],
            &["a", "b"],
            0,
            &Default::default(),
            d.fit_normalizer().unwrap(),
            masks(&["10", "01", "11"]),
            2,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            ..Default::default()
        };
        train(&m, &d, &cfg).unwrap().0
    }

    fn arm_like_model() -> GeMuCoModel {
        let layout = ModalityLayout::new([("q", 1), ("x", 1)]).unwrap();
        let norm = Normalizer {
            layout: layout.clone(),
            mean: vec![0.0, 0.0],
            std: vec![1.0, 1.0],
        };
        GeMuCoModel::new(
            &layout,
            &["q"],
            &["x"],
            0,
            &Default::default(),
            norm,
            masks(&["1"]),
            5,
        )
        .unwrap()
    }

    #[test]
    fn strategy_rules() {
        let m = identity_model();
        assert_eq!(
            select_strategy(&m, "b", &[true, false]).unwrap(),
            Strategy::DirectMask
        );
        assert_eq!(
            select_strategy(&m, "b", &[false, false]).unwrap(),
            Strategy::LatentIterate
        );
        assert!(select_strategy(&m, "c", &[true, true]).is_err());
        let a = arm_like_model();
        assert_eq!(
            select_strategy(&a, "q", &[false, true]).unwrap(),
            Strategy::InputIterate
        );
        assert_eq!(
            select_strategy(&a, "x", &[true, false]).unwrap(),
            Strategy::DirectMask
        );
    }

    #[test]
    fn observed_values_pass_through() {
        let m = identity_model();
        let obs = Observation::full(&m, vec![0.3, -0.2]).unwrap();
        let e = estimate(&m, &obs, &m.zero_pb(), &IterConfig::default()).unwrap();
        assert_eq!(e.values, vec![0.3, -0.2]);
    }

    #[test]
    fn direct_estimate_fills_the_hidden_group() {
        let m = identity_model();
        let obs = Observation::full(&m, vec![0.4, 0.0])
            .unwrap()
            .hiding(&m, &["b"])
            .unwrap();
        let e = estimate(&m, &obs, &m.zero_pb(), &IterConfig::default()).unwrap();
        assert_eq!(e.strategy, Strategy::DirectMask);
        assert_eq!(e.values[0], 0.4);
        assert!((e.values[1] - 0.4).abs() < 0.05, "{:?}", e.values);
    }

    #[test]
    fn input_iterate_recovers_a_hidden_input() {
        let mut m = arm_like_model();
        // out = 2 q exactly: linear layers only
        m.encoder.weights = Weights::zeros(&m.encoder.spec);
        m.decoder.weights = Weights::zeros(&m.decoder.spec);
        let enc = &mut m.encoder.weights.layers;
        let n = enc.len();
        enc[0].weight[0] = 0.1;
        for l in 1..n {
            enc[l].weight[0] = 1.0;
        }
        let dec = &mut m.decoder.weights.layers;
        let n = dec.len();
        for l in 0..n - 1 {
            dec[l].weight[0] = 1.0;
        }
        dec[n - 1].weight[0] = 1.0;
        let obs = Observation::new(&m, vec![0.0, 0.05], vec![false, true]).unwrap();
        let cfg = IterConfig {
            iterations: 200,
            gamma_max: 20.0,
            ..Default::default()
        };
        let e = estimate(&m, &obs, &m.zero_pb(), &cfg).unwrap();
        assert_eq!(e.strategy, Strategy::InputIterate);
        let pred = m
            .predict_raw(&e.values, &m.all_visible(), &m.zero_pb())
            .unwrap();
        assert!((pred[0] - 0.05).abs() < 0.01, "{pred:?} {:?}", e.values);
        assert!(e.loss_trajectory.last().unwrap() < &(0.1 * e.loss_trajectory[0]));
        assert_eq!(e.values[1], 0.05);
    }

    #[test]
    fn zero_iterations_return_the_initial_control() {
        let a = arm_like_model();
        let req = ControlRequest {
            control_group: "q".into(),
            loss: LossSpec::new(vec![LossTerm::TargetMatch {
                group: "x".into(),
                target: vec![0.5],
                weight: 1.0,
                transform: None,
            }]),
            init: vec![0.25, 0.0],
            init_available: vec![true, false],
        };
        let cfg = IterConfig {
            iterations: 0,
            ..Default::default()
        };
        let r = control(&a, &req, &a.zero_pb(), &cfg).unwrap();
        assert_eq!(r.strategy, Strategy::InputIterate);
        assert!((r.control[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn direct_control_uses_a_single_input_target() {
        let m = identity_model();
        let req = ControlRequest {
            control_group: "b".into(),
            loss: LossSpec::new(vec![LossTerm::TargetMatch {
                group: "a".into(),
                target: vec![0.6],
                weight: 1.0,
                transform: None,
            }]),
            init: vec![0.0, 0.0],
            init_available: vec![false, false],
        };
        let r = control(&m, &req, &m.zero_pb(), &IterConfig::default()).unwrap();
        assert_eq!(r.strategy, Strategy::DirectMask);
        assert!((r.control[0] - 0.6).abs() < 0.05);
    }

    #[test]
    fn simulate_on_identity_returns_the_command() {
        let m = identity_model();
        let cfg = IterConfig {
            iterations: 60,
            ..Default::default()
        };
        let r = simulate(
            &m,
            "a",
            &[0.35],
            &LossSpec::default(),
            &m.zero_pb(),
            &cfg,
            None,
        )
        .unwrap();
        assert!((r.state[0] - 0.35).abs() < 0.02, "{:?}", r.state);
        assert!((r.state[1] - 0.35).abs() < 0.05, "{:?}", r.state);
        let l = &r.loss_trajectory;
        assert!(l.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn session_carries_the_latent_over() {
        let m = identity_model();
        let cfg = IterConfig {
            iterations: 5,
            ..Default::default()
        };
        let mut s = SimulationSession::new("a", LossSpec::default(), m.zero_pb(), cfg.clone());
        let first = s.step(&m, &[0.2]).unwrap();
        let second = s.step(&m, &[0.2]).unwrap();
        assert!(second.loss_trajectory[0] <= first.loss_trajectory.last().unwrap() + 1e-12);
        s.carry_over = false;
        let third = s.step(&m, &[0.2]).unwrap();
        assert_eq!(third.loss_trajectory[0], first.loss_trajectory[0]);
    }

    #[test]
    fn empty_observation_is_rejected() {
        let m = identity_model();
        let obs = Observation::new(&m, vec![0.0, 0.0], vec![false, false]).unwrap();
        assert!(estimate(&m, &obs, &m.zero_pb(), &IterConfig::default()).is_err());
    }
}
