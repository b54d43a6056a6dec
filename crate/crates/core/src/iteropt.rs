//! Gradient descent with a grid line search over the latent state, the
//! network input, the parametric bias or the weights.
//!
//! Each outer iteration computes one gradient of the loss, evaluates the
//! candidates `v - gamma * grad` for `gamma` on a uniform grid over
//! `[0, gamma_max]` and keeps the best. Since `gamma = 0` is on the grid the
//! loss never increases.
//!
//! Loss terms compare quantities scaled by the per-channel standard
//! deviation of the training data, so differences are in normalized units.
//! The torque balance term is the exception and is evaluated in raw units.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::modality::{MaskVector, ModalityLayout};
use crate::model::GeMuCoModel;
use crate::net::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Latent,
    Input,
    Pb,
    Weights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterConfig {
    pub gamma_max: f64,
    pub n_batch: usize,
    pub iterations: usize,
    pub variable: Variable,
    /// Channels of `x_in` held fixed in `input` mode.
    pub frozen: Vec<usize>,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            gamma_max: 1.0,
            n_batch: 16,
            iterations: 30,
            variable: Variable::Latent,
            frozen: Vec::new(),
        }
    }
}

impl IterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_max > 0.0 && self.gamma_max.is_finite()) {
            return Err(Error::InvalidConfig("gamma_max must be positive".into()));
        }
        if self.n_batch < 2 {
            return Err(Error::InvalidConfig("n_batch must be >= 2".into()));
        }
        Ok(())
    }

    pub fn with_variable(&self, variable: Variable) -> Self {
        Self {
            variable,
            ..self.clone()
        }
    }
}

/// One weighted term of the objective. Vectors are in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossTerm {
    /// `weight * |pred - target|`, or `weight * |A pred - target|` in raw
    /// units when `transform` (row-major rows of `A`) is given.
    TargetMatch {
        group: String,
        target: Vec<f64>,
        weight: f64,
        #[serde(default)]
        transform: Option<Vec<Vec<f64>>>,
    },
    /// `weight * |x|` with `x` scaled per channel.
    Magnitude { group: String, weight: f64 },
    /// `weight * |x - reference|`; `x` is the candidate input when the group
    /// is optimized directly, otherwise the prediction.
    InputDeviation {
        group: String,
        reference: Vec<f64>,
        weight: f64,
    },
    /// `weight * |tau_ext + G^T f|` with `G = dl/dtheta` taken from the
    /// network at `(theta, f)`.
    TorqueBalance {
        angle_group: String,
        tension_group: String,
        length_group: String,
        tau_ext: Vec<f64>,
        weight: f64,
        /// Evaluates `G` at this angle instead of the predicted one.
        #[serde(default)]
        angle_reference: Option<Vec<f64>>,
    },
    /// `weight * |m (pred - target)|` over the output channels of the
    /// available groups; `target` spans the whole output layout.
    ObservationMatch {
        target: Vec<f64>,
        available: Vec<bool>,
        weight: f64,
    },
}

impl LossTerm {
    pub fn weight(&self) -> f64 {
        match self {
            LossTerm::TargetMatch { weight, .. }
            | LossTerm::Magnitude { weight, .. }
            | LossTerm::InputDeviation { weight, .. }
            | LossTerm::TorqueBalance { weight, .. }
            | LossTerm::ObservationMatch { weight, .. } => *weight,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
}

impl LossSpec {
    pub fn new(terms: Vec<LossTerm>) -> Self {
        Self { terms }
    }

    pub fn with(mut self, term: LossTerm) -> Self {
        self.terms.push(term);
        self
    }
}

/// Fixed quantities for the modes that do not vary them. All in normalized
/// units over the model's input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptContext {
    pub x_in: Vec<f64>,
    pub mask: MaskVector,
    pub pb: Vec<f64>,
}

impl OptContext {
    pub fn new(x_in: Vec<f64>, mask: MaskVector, pb: Vec<f64>) -> Self {
        Self { x_in, mask, pb }
    }

    /// Context for latent-only optimization where `x_in` and the mask are unused.
    pub fn latent(model: &GeMuCoModel, pb: Vec<f64>) -> Self {
        Self {
            x_in: vec![0.0; model.in_layout.total_dim()],
            mask: model.all_visible(),
            pb,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub value: Vec<f64>,
    /// Loss before the first and after every iteration.
    pub loss_trajectory: Vec<f64>,
    /// Normalized prediction at `value`.
    pub prediction: Vec<f64>,
}

impl OptResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trajectory.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug, Clone, Copy)]
enum Src {
    Out,
    In,
}

#[derive(Debug, Clone)]
enum Term {
    Target {
        range: std::ops::Range<usize>,
        target: Vec<f64>,
        weight: f64,
    },
    Mapped {
        range: std::ops::Range<usize>,
        a: DMatrix<f64>,
        target: Vec<f64>,
        mean: Vec<f64>,
        std: Vec<f64>,
        weight: f64,
    },
    /// `|x + offset|` with `offset = mean / std`, i.e. the scaled raw value.
    Magnitude {
        src: Src,
        range: std::ops::Range<usize>,
        offset: Vec<f64>,
        weight: f64,
    },
    Deviation {
        src: Src,
        range: std::ops::Range<usize>,
        reference: Vec<f64>,
        weight: f64,
    },
    Observation {
        channels: Vec<usize>,
        target: Vec<f64>,
        weight: f64,
    },
    Torque(Box<TorqueTerm>),
}

#[derive(Debug, Clone)]
struct TorqueTerm {
    theta_out: std::ops::Range<usize>,
    f_out: std::ops::Range<usize>,
    theta_in: std::ops::Range<usize>,
    f_in: std::ops::Range<usize>,
    theta_name: String,
    length_name: String,
    mask: MaskVector,
    tau: Vec<f64>,
    theta_ref: Option<Vec<f64>>,
    theta_stats: (Vec<f64>, Vec<f64>),
    f_stats: (Vec<f64>, Vec<f64>),
    weight: f64,
}

/// A loss spec resolved against a model and a variable mode.
#[derive(Debug, Clone)]
pub struct CompiledLoss {
    terms: Vec<Term>,
    in_dim: usize,
}

fn stats(model: &GeMuCoModel, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let sub = model.data_layout.subset([name])?;
    model.normalizer.stats_for(&sub)
}

fn norm_vec(v: &[f64], stats: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    v.iter()
        .zip(stats.0.iter().zip(&stats.1))
        .map(|(x, (m, s))| (x - m) / s)
        .collect()
}

/// Reads an input group directly when it is being optimized, or when no
/// prediction of it exists.
fn locate(
    model: &GeMuCoModel,
    group: &str,
    variable: Variable,
    optimized: &[bool],
) -> Result<(Src, std::ops::Range<usize>)> {
    if variable == Variable::Input {
        if let Some(g) = model.in_layout.index_of(group) {
            if optimized.get(g).copied().unwrap_or(false) || !model.out_layout.contains(group) {
                return Ok((Src::In, model.in_layout.range(g)));
            }
        }
    }
    if model.out_layout.contains(group) {
        return Ok((Src::Out, model.out_layout.range_of(group)?));
    }
    if model.data_layout.contains(group) {
        let outs: Vec<&str> = model.out_layout.names().collect();
        return Err(Error::InvalidConfig(format!(
            "loss group `{group}` is not reachable in this model (outputs: {})",
            outs.join(", ")
        )));
    }
    Err(Error::UnknownGroup(group.to_string()))
}

fn check_weight(w: f64) -> Result<()> {
    if w >= 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "loss weight {w} must be finite and >= 0"
        )))
    }
}

impl CompiledLoss {
    /// `optimized` flags the input groups that move in `input` mode.
    pub fn new(
        model: &GeMuCoModel,
        spec: &LossSpec,
        variable: Variable,
        optimized: &[bool],
    ) -> Result<Self> {
        if spec.terms.is_empty() {
            return Err(Error::InvalidConfig("loss needs at least one term".into()));
        }
        let mut terms = Vec::with_capacity(spec.terms.len());
        for t in &spec.terms {
            check_weight(t.weight())?;
            terms.push(match t {
                LossTerm::TargetMatch {
                    group,
                    target,
                    weight,
                    transform,
                } => {
                    let range = model.out_layout.range_of(group)?;
                    let st = stats(model, group)?;
                    match transform {
                        None => {
                            check_len("target", range.len(), target.len())?;
                            Term::Target {
                                range,
                                target: norm_vec(target, &st),
                                weight: *weight,
                            }
                        }
                        Some(rows) => {
                            check_len("transform rows", target.len(), rows.len())?;
                            let mut flat = Vec::with_capacity(rows.len() * range.len());
                            for r in rows {
                                check_len("transform columns", range.len(), r.len())?;
                                flat.extend_from_slice(r);
                            }
                            Term::Mapped {
                                a: DMatrix::from_row_slice(rows.len(), range.len(), &flat),
                                range,
                                target: target.clone(),
                                mean: st.0,
                                std: st.1,
                                weight: *weight,
                            }
                        }
                    }
                }
                LossTerm::Magnitude { group, weight } => {
                    let (src, range) = locate(model, group, variable, optimized)?;
                    let st = stats(model, group)?;
                    Term::Magnitude {
                        src,
                        range,
                        offset: st.0.iter().zip(&st.1).map(|(m, s)| m / s).collect(),
                        weight: *weight,
                    }
                }
                LossTerm::InputDeviation {
                    group,
                    reference,
                    weight,
                } => {
                    let (src, range) = locate(model, group, variable, optimized)?;
                    check_len("reference", range.len(), reference.len())?;
                    Term::Deviation {
                        src,
                        range,
                        reference: norm_vec(reference, &stats(model, group)?),
                        weight: *weight,
                    }
                }
                LossTerm::ObservationMatch {
                    target,
                    available,
                    weight,
                } => {
                    check_len(
                        "observation target",
                        model.out_layout.total_dim(),
                        target.len(),
                    )?;
                    check_len(
                        "observation availability",
                        model.out_layout.n_groups(),
                        available.len(),
                    )?;
                    let mut channels = Vec::new();
                    for (g, &a) in available.iter().enumerate() {
                        if a {
                            channels.extend(model.out_layout.range(g));
                        }
                    }
                    Term::Observation {
                        channels,
                        target: model.normalizer.normalize_in(&model.out_layout, target)?,
                        weight: *weight,
                    }
                }
                LossTerm::TorqueBalance {
                    angle_group,
                    tension_group,
                    length_group,
                    tau_ext,
                    weight,
                    angle_reference,
                } => {
                    let theta_in = model.in_layout.range_of(angle_group)?;
                    let f_in = model.in_layout.range_of(tension_group)?;
                    model.out_layout.range_of(length_group)?;
                    check_len("external torque", theta_in.len(), tau_ext.len())?;
                    if let Some(r) = angle_reference {
                        check_len("angle reference", theta_in.len(), r.len())?;
                    }
                    let mut bits = vec![false; model.n_in_groups()];
                    bits[model.in_layout.require(angle_group)?] = true;
                    bits[model.in_layout.require(tension_group)?] = true;
                    Term::Torque(Box::new(TorqueTerm {
                        theta_out: model.out_layout.range_of(angle_group)?,
                        f_out: model.out_layout.range_of(tension_group)?,
                        theta_in,
                        f_in,
                        theta_name: angle_group.clone(),
                        length_name: length_group.clone(),
                        mask: MaskVector::new(bits),
                        tau: tau_ext.clone(),
                        theta_ref: angle_reference.clone(),
                        theta_stats: stats(model, angle_group)?,
                        f_stats: stats(model, tension_group)?,
                        weight: *weight,
                    }))
                }
            });
        }
        Ok(Self {
            terms,
            in_dim: model.in_layout.total_dim(),
        })
    }

    /// Loss at a normalized prediction (and candidate input in `input` mode).
    pub fn value(
        &self,
        model: &GeMuCoModel,
        pred: &[f64],
        cand_in: Option<&[f64]>,
        pb: &[f64],
    ) -> Result<f64> {
        let mut total = 0.0;
        for t in &self.terms {
            total += match t {
                Term::Torque(tt) => {
                    let theta = tt.theta(pred);
                    let f = tt.tension(pred);
                    tt.eval(model, &theta, &f, pb)?
                }
                _ => simple_term(t, pred, cand_in, None, None),
            };
        }
        Ok(total)
    }

    /// Loss and its gradients w.r.t. the normalized prediction and the
    /// candidate input.
    pub fn value_and_grad(
        &self,
        model: &GeMuCoModel,
        pred: &[f64],
        cand_in: Option<&[f64]>,
        pb: &[f64],
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut d_pred = vec![0.0; pred.len()];
        let mut d_in = vec![0.0; self.in_dim];
        let mut total = 0.0;
        for t in &self.terms {
            total += match t {
                Term::Torque(tt) => tt.value_and_grad(model, pred, pb, &mut d_pred)?,
                _ => simple_term(t, pred, cand_in, Some(&mut d_pred), Some(&mut d_in)),
            };
        }
        Ok((total, d_pred, d_in))
    }
}

/// Adds `weight * r / |r|` into `grad` at `idx` and returns `weight * |r|`.
fn norm_term(
    weight: f64,
    r: &[f64],
    idx: impl Iterator<Item = usize>,
    grad: Option<&mut Vec<f64>>,
) -> f64 {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if let Some(g) = grad {
        if n > 0.0 {
            for (i, v) in idx.zip(r) {
                g[i] += weight * v / n;
            }
        }
    }
    weight * n
}

fn simple_term(
    t: &Term,
    pred: &[f64],
    cand_in: Option<&[f64]>,
    d_pred: Option<&mut Vec<f64>>,
    d_in: Option<&mut Vec<f64>>,
) -> f64 {
    let pick = |src: Src| -> (&[f64], bool) {
        match (src, cand_in) {
            (Src::In, Some(c)) => (c, true),
            _ => (pred, false),
        }
    };
    match t {
        Term::Target {
            range,
            target,
            weight,
        } => {
            let r: Vec<f64> = range
                .clone()
                .zip(target)
                .map(|(c, t)| pred[c] - t)
                .collect();
            norm_term(*weight, &r, range.clone(), d_pred)
        }
        Term::Mapped {
            range,
            a,
            target,
            mean,
            std,
            weight,
        } => {
            let raw: Vec<f64> = range
                .clone()
                .enumerate()
                .map(|(k, c)| pred[c] * std[k] + mean[k])
                .collect();
            let ax = a * nalgebra::DVector::from_vec(raw);
            let r: Vec<f64> = ax.iter().zip(target).map(|(x, t)| x - t).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if let Some(g) = d_pred {
                if n > 0.0 {
                    for (k, c) in range.clone().enumerate() {
                        let mut s = 0.0;
                        for (i, ri) in r.iter().enumerate() {
                            s += ri * a[(i, k)];
                        }
                        g[c] += weight * s * std[k] / n;
                    }
                }
            }
            weight * n
        }
        Term::Magnitude {
            src,
            range,
            offset,
            weight,
        } => {
            let (x, is_in) = pick(*src);
            let r: Vec<f64> = range.clone().zip(offset).map(|(c, o)| x[c] + o).collect();
            norm_term(
                *weight,
                &r,
                range.clone(),
                if is_in { d_in } else { d_pred },
            )
        }
        Term::Deviation {
            src,
            range,
            reference,
            weight,
        } => {
            let (x, is_in) = pick(*src);
            let r: Vec<f64> = range
                .clone()
                .zip(reference)
                .map(|(c, v)| x[c] - v)
                .collect();
            norm_term(
                *weight,
                &r,
                range.clone(),
                if is_in { d_in } else { d_pred },
            )
        }
        Term::Observation {
            channels,
            target,
            weight,
        } => {
            let r: Vec<f64> = channels.iter().map(|&c| pred[c] - target[c]).collect();
            norm_term(*weight, &r, channels.iter().copied(), d_pred)
        }
        Term::Torque(_) => unreachable!("torque terms need the model"),
    }
}

impl TorqueTerm {
    fn theta(&self, pred: &[f64]) -> Vec<f64> {
        match &self.theta_ref {
            Some(r) => r.clone(),
            None => denorm(&pred[self.theta_out.clone()], &self.theta_stats),
        }
    }

    fn tension(&self, pred: &[f64]) -> Vec<f64> {
        denorm(&pred[self.f_out.clone()], &self.f_stats)
    }

    /// `weight * |tau + G(theta, f)^T f|` for raw `theta`, `f`.
    fn eval(&self, model: &GeMuCoModel, theta: &[f64], f: &[f64], pb: &[f64]) -> Result<f64> {
        let mut x = vec![0.0; model.in_layout.total_dim()];
        x[self.theta_in.clone()].copy_from_slice(theta);
        x[self.f_in.clone()].copy_from_slice(f);
        let g = model.jacobian_raw(&x, &self.mask, pb, &self.length_name, &self.theta_name)?;
        let gtf = g.transpose() * nalgebra::DVector::from_column_slice(f);
        let n = self
            .tau
            .iter()
            .zip(gtf.iter())
            .map(|(t, v)| (t + v) * (t + v))
            .sum::<f64>()
            .sqrt();
        Ok(self.weight * n)
    }

    /// Value plus central-difference gradient in raw `(theta, f)`, chained
    /// to the normalized prediction.
    fn value_and_grad(
        &self,
        model: &GeMuCoModel,
        pred: &[f64],
        pb: &[f64],
        d_pred: &mut [f64],
    ) -> Result<f64> {
        let theta = self.theta(pred);
        let f = self.tension(pred);
        let value = self.eval(model, &theta, &f, pb)?;
        if self.weight == 0.0 {
            return Ok(value);
        }
        let step = |x: f64, s: f64| 1e-5 * s.max(x.abs() * 1e-3).max(1e-12);
        if self.theta_ref.is_none() {
            for (k, c) in self.theta_out.clone().enumerate() {
                let h = step(theta[k], self.theta_stats.1[k]);
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let d =
                    (self.eval(model, &tp, &f, pb)? - self.eval(model, &tm, &f, pb)?) / (2.0 * h);
                d_pred[c] += d * self.theta_stats.1[k];
            }
        }
        for (k, c) in self.f_out.clone().enumerate() {
            let h = step(f[k], self.f_stats.1[k]);
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[k] += h;
            fm[k] -= h;
            let d = (self.eval(model, &theta, &fp, pb)? - self.eval(model, &theta, &fm, pb)?)
                / (2.0 * h);
            d_pred[c] += d * self.f_stats.1[k];
        }
        Ok(value)
    }
}

fn denorm(x: &[f64], stats: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    x.iter()
        .zip(stats.0.iter().zip(&stats.1))
        .map(|(v, (m, s))| v * s + m)
        .collect()
}

/// Model with replaced weights, taken from a flat `[encoder, decoder]` vector.
fn with_weights(model: &GeMuCoModel, flat: &[f64]) -> Result<GeMuCoModel> {
    let mut m = model.clone();
    let n_enc = m.encoder.weights.len();
    check_len("weight vector", n_enc + m.decoder.weights.len(), flat.len())?;
    m.encoder.weights.set_flat(&flat[..n_enc])?;
    m.decoder.weights.set_flat(&flat[n_enc..])?;
    Ok(m)
}

fn flat_weights(model: &GeMuCoModel) -> Vec<f64> {
    let mut v = model.encoder.weights.to_flat();
    v.extend(model.decoder.weights.to_flat());
    v
}

/// Initial value for a variable mode taken from the model and context.
pub fn initial_value(
    model: &GeMuCoModel,
    variable: Variable,
    ctx: &OptContext,
) -> Result<Vec<f64>> {
    Ok(match variable {
        Variable::Latent => {
            model
                .encode(
                    &ctx.x_in,
                    &ctx.mask,
                    &crate::model::ParametricBias::new(ctx.pb.clone(), "ctx"),
                )?
                .0
        }
        Variable::Input => ctx.x_in.clone(),
        Variable::Pb => ctx.pb.clone(),
        Variable::Weights => flat_weights(model),
    })
}

struct Problem<'a> {
    model: &'a GeMuCoModel,
    loss: CompiledLoss,
    cfg: &'a IterConfig,
    ctx: &'a OptContext,
}

impl Problem<'_> {
    fn predict(&self, v: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        Ok(match self.cfg.variable {
            Variable::Latent => m.decoder.output(v),
            Variable::Input => m
                .decoder
                .output(&m.encoder.output(&m.encoder_input_unchecked(
                    v,
                    &self.ctx.mask,
                    &self.ctx.pb,
                ))),
            Variable::Pb => m
                .decoder
                .output(&m.encoder.output(&m.encoder_input_unchecked(
                    &self.ctx.x_in,
                    &self.ctx.mask,
                    v,
                ))),
            Variable::Weights => {
                let mm = with_weights(m, v)?;
                mm.decoder
                    .output(&mm.encoder.output(&mm.encoder_input_unchecked(
                        &self.ctx.x_in,
                        &self.ctx.mask,
                        &self.ctx.pb,
                    )))
            }
        })
    }

    fn pb<'b>(&'b self, v: &'b [f64]) -> &'b [f64] {
        match self.cfg.variable {
            Variable::Pb => v,
            _ => &self.ctx.pb,
        }
    }

    fn value(&self, v: &[f64]) -> Result<f64> {
        let pred = self.predict(v)?;
        let cand = (self.cfg.variable == Variable::Input).then_some(v);
        match self.cfg.variable {
            Variable::Weights => {
                self.loss
                    .value(&with_weights(self.model, v)?, &pred, cand, self.pb(v))
            }
            _ => self.loss.value(self.model, &pred, cand, self.pb(v)),
        }
    }

    fn value_and_grad(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = self.model;
        match self.cfg.variable {
            Variable::Latent => {
                let pred = m.decoder.output(v);
                let (l, dp, _) = self.loss.value_and_grad(m, &pred, None, &self.ctx.pb)?;
                Ok((l, m.latent_gradient(v, &dp)))
            }
            Variable::Input | Variable::Pb => {
                let is_input = self.cfg.variable == Variable::Input;
                let (x_in, pb) = if is_input {
                    (v, &self.ctx.pb[..])
                } else {
                    (&self.ctx.x_in[..], v)
                };
                let enc_input = m.encoder_input_unchecked(x_in, &self.ctx.mask, pb);
                let mut res: Result<(f64, Vec<f64>)> = Ok((0.0, Vec::new()));
                let cand = is_input.then_some(v);
                let (_, d_enc) = m.input_gradient(
                    &enc_input,
                    |pred| match self.loss.value_and_grad(m, pred, cand, pb) {
                        Ok((l, dp, di)) => {
                            res = Ok((l, di));
                            dp
                        }
                        Err(e) => {
                            res = Err(e);
                            vec![0.0; pred.len()]
                        }
                    },
                    None,
                );
                let (l, d_cand) = res?;
                if is_input {
                    let mut g: Vec<f64> = d_enc[..x_in.len()].to_vec();
                    for (grp, r) in (0..m.n_in_groups()).map(|g| (g, m.in_layout.range(g))) {
                        if !self.ctx.mask.visible(grp) {
                            for c in r {
                                g[c] = 0.0;
                            }
                        }
                    }
                    for (gi, di) in g.iter_mut().zip(&d_cand) {
                        *gi += di;
                    }
                    for &c in &self.cfg.frozen {
                        g[c] = 0.0;
                    }
                    Ok((l, g))
                } else {
                    Ok((l, d_enc[d_enc.len() - m.pb_dim..].to_vec()))
                }
            }
            Variable::Weights => {
                let mm = with_weights(m, v)?;
                let enc_input =
                    mm.encoder_input_unchecked(&self.ctx.x_in, &self.ctx.mask, &self.ctx.pb);
                let mut ge = Weights::zeros(&mm.encoder.spec);
                let mut gd = Weights::zeros(&mm.decoder.spec);
                let mut res: Result<f64> = Ok(0.0);
                mm.input_gradient(
                    &enc_input,
                    |pred| match self.loss.value_and_grad(&mm, pred, None, &self.ctx.pb) {
                        Ok((l, dp, _)) => {
                            res = Ok(l);
                            dp
                        }
                        Err(e) => {
                            res = Err(e);
                            vec![0.0; pred.len()]
                        }
                    },
                    Some((&mut ge, &mut gd)),
                );
                let l = res?;
                let mut g = ge.to_flat();
                g.extend(gd.to_flat());
                Ok((l, g))
            }
        }
    }
}

/// Evaluates the loss at `candidate` exactly as the optimizer does.
pub fn eval_loss(
    model: &GeMuCoModel,
    candidate: &[f64],
    loss: &LossSpec,
    cfg: &IterConfig,
    ctx: &OptContext,
) -> Result<f64> {
    let p = problem(model, loss, cfg, ctx)?;
    check_value(model, cfg, candidate)?;
    p.value(candidate)
}

/// Gradient of the loss at `candidate` (frozen and masked input channels zeroed).
pub fn loss_gradient(
    model: &GeMuCoModel,
    candidate: &[f64],
    loss: &LossSpec,
    cfg: &IterConfig,
    ctx: &OptContext,
) -> Result<(f64, Vec<f64>)> {
    let p = problem(model, loss, cfg, ctx)?;
    check_value(model, cfg, candidate)?;
    p.value_and_grad(candidate)
}

fn problem<'a>(
    model: &'a GeMuCoModel,
    loss: &LossSpec,
    cfg: &'a IterConfig,
    ctx: &'a OptContext,
) -> Result<Problem<'a>> {
    cfg.validate()?;
    check_len("context x_in", model.in_layout.total_dim(), ctx.x_in.len())?;
    check_len("context mask", model.n_in_groups(), ctx.mask.len())?;
    check_len("context parametric bias", model.pb_dim, ctx.pb.len())?;
    for &c in &cfg.frozen {
        if c >= model.in_layout.total_dim() {
            return Err(Error::Dimension {
                context: "frozen channel",
                expected: model.in_layout.total_dim(),
                got: c,
            });
        }
    }
    let optimized: Vec<bool> = (0..model.n_in_groups())
        .map(|g| {
            ctx.mask.visible(g) && model.in_layout.range(g).any(|c| !cfg.frozen.contains(&c))
        })
        .collect();
    Ok(Problem {
        model,
        loss: CompiledLoss::new(model, loss, cfg.variable, &optimized)?,
        cfg,
        ctx,
    })
}

fn check_value(model: &GeMuCoModel, cfg: &IterConfig, v: &[f64]) -> Result<()> {
    let expected = match cfg.variable {
        Variable::Latent => model.latent_dim,
        Variable::Input => model.in_layout.total_dim(),
        Variable::Pb => model.pb_dim,
        Variable::Weights => model.encoder.weights.len() + model.decoder.weights.len(),
    };
    check_len("optimization variable", expected, v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "initial value".into(),
        });
    }
    Ok(())
}

/// Minimizes `loss` over the variable selected in `cfg`, starting at `init`.
pub fn optimize(
    model: &GeMuCoModel,
    init: &[f64],
    loss: &LossSpec,
    cfg: &IterConfig,
    ctx: &OptContext,
) -> Result<OptResult> {
    let p = problem(model, loss, cfg, ctx)?;
    check_value(model, cfg, init)?;
    let mut v = init.to_vec();
    let mut current = p.value(&v)?;
    if !current.is_finite() {
        return Err(Error::NonFinite {
            iteration: 0,
            what: "initial loss".into(),
        });
    }
    let mut trajectory = vec![current];
    let gammas: Vec<f64> = (0..cfg.n_batch)
        .map(|k| cfg.gamma_max * k as f64 / (cfg.n_batch - 1) as f64)
        .collect();
    for it in 0..cfg.iterations {
        if v.is_empty() {
            trajectory.push(current);
            continue;
        }
        let (_, grad) = p.value_and_grad(&v)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: it,
                what: "gradient".into(),
            });
        }
        let candidates: Vec<Result<(Vec<f64>, f64)>> = gammas[1..]
            .par_iter()
            .map(|&gamma| {
                let cand: Vec<f64> = v.iter().zip(&grad).map(|(x, g)| x - gamma * g).collect();
                let l = p.value(&cand)?;
                Ok((cand, l))
            })
            .collect();
        let mut best: Option<(Vec<f64>, f64)> = None;
        for c in candidates {
            let (cand, l) = c?;
            if l.is_nan() {
                return Err(Error::NonFinite {
                    iteration: it,
                    what: "candidate loss".into(),
                });
            }
            if l < best.as_ref().map_or(current, |b| b.1) {
                best = Some((cand, l));
            }
        }
        if let Some((cand, l)) = best {
            v = cand;
            current = l;
        }
        trajectory.push(current);
    }
    let prediction = p.predict(&v)?;
    Ok(OptResult {
        value: v,
        loss_trajectory: trajectory,
        prediction,
    })
}

/// Layout helper: `(group, values)` pairs scattered into a zero vector.
pub fn compose(layout: &ModalityLayout, parts: &[(&str, &[f64])]) -> Result<Vec<f64>> {
    let mut v = vec![0.0; layout.total_dim()];
    for (name, vals) in parts {
        let r = layout.range_of(name)?;
        check_len("group values", r.len(), vals.len())?;
        v[r].copy_from_slice(vals);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::{enumerate_all_masks, Normalizer};
    use crate::model::ArchConfig;
    use crate::net::{Dense, NetSpec};

    fn identity_layer(n: usize) -> Dense {
        let mut weight = vec![0.0; n * n];
        for i in 0..n {
            weight[i * n + i] = 1.0;
        }
        Dense {
            weight,
            bias: vec![0.0; n],
        }
    }

    /// One group `a` of dim `n`; decoder is the identity on the latent.
    fn identity_decoder_model(n: usize) -> GeMuCoModel {
        let layout = ModalityLayout::new([("a", n)]).unwrap();
        let normalizer = Normalizer {
            layout: layout.clone(),
            mean: vec![0.0; n],
            std: vec![1.0; n],
        };
        let arch = ArchConfig {
            latent_dim: Some(n),
            decoder_hidden: Some(vec![]),
            encoder_hidden: Some(vec![]),
        };
        let mut m = GeMuCoModel::new(
            &layout,
            &["a"],
            &["a"],
            0,
            &arch,
            normalizer,
            enumerate_all_masks(1).unwrap(),
            1,
        )
        .unwrap();
        m.decoder.spec = NetSpec::new(vec![n, n]).unwrap();
        m.decoder.weights = Weights {
            layers: vec![identity_layer(n)],
        };
        m
    }

    fn target(t: &[f64]) -> LossSpec {
        LossSpec::new(vec![LossTerm::TargetMatch {
            group: "a".into(),
            target: t.to_vec(),
            weight: 1.0,
            transform: None,
        }])
    }

    #[test]
    fn quadratic_surrogate_converges() {
        let m = identity_decoder_model(1);
        let ctx = OptContext::latent(&m, vec![]);
        let r = optimize(&m, &[2.5], &target(&[0.7]), &IterConfig::default(), &ctx).unwrap();
        assert!((r.value[0] - 0.7).abs() < 1e-3, "{:?}", r.value);
        assert_eq!(r.loss_trajectory.len(), 31);
    }

    #[test]
    fn zero_loss_is_a_fixed_point() {
        let m = identity_decoder_model(2);
        let ctx = OptContext::latent(&m, vec![]);
        let r = optimize(
            &m,
            &[0.3, -0.1],
            &target(&[0.3, -0.1]),
            &IterConfig::default(),
            &ctx,
        )
        .unwrap();
        assert_eq!(r.value, vec![0.3, -0.1]);
        assert!(r.loss_trajectory.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let m = identity_decoder_model(2);
        let spec = LossSpec::new(vec![
            LossTerm::Magnitude {
                group: "a".into(),
                weight: 0.0,
            },
            LossTerm::TargetMatch {
                group: "a".into(),
                target: vec![5.0, 5.0],
                weight: 0.0,
                transform: None,
            },
        ]);
        let ctx = OptContext::latent(&m, vec![]);
        assert_eq!(
            eval_loss(&m, &[1.0, 2.0], &spec, &IterConfig::default(), &ctx).unwrap(),
            0.0
        );
    }

    #[test]
    fn identity_transform_at_target_is_zero() {
        let m = identity_decoder_model(2);
        let spec = LossSpec::new(vec![LossTerm::TargetMatch {
            group: "a".into(),
            target: vec![0.4, 0.2],
            weight: 1.0,
            transform: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        }]);
        let ctx = OptContext::latent(&m, vec![]);
        assert_eq!(
            eval_loss(&m, &[0.4, 0.2], &spec, &IterConfig::default(), &ctx).unwrap(),
            0.0
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let m = identity_decoder_model(1);
        let ctx = OptContext::latent(&m, vec![]);
        let cfg = IterConfig::default();
        assert!(eval_loss(&m, &[0.0], &LossSpec::default(), &cfg, &ctx).is_err());
        let neg = LossSpec::new(vec![LossTerm::Magnitude {
            group: "a".into(),
            weight: -1.0,
        }]);
        assert!(eval_loss(&m, &[0.0], &neg, &cfg, &ctx).is_err());
        let unknown = LossSpec::new(vec![LossTerm::Magnitude {
            group: "zz".into(),
            weight: 1.0,
        }]);
        assert!(matches!(
            eval_loss(&m, &[0.0], &unknown, &cfg, &ctx),
            Err(Error::UnknownGroup(_))
        ));
    }

    #[test]
    fn zero_iterations_return_init() {
        let m = identity_decoder_model(1);
        let ctx = OptContext::latent(&m, vec![]);
        let cfg = IterConfig {
            iterations: 0,
            ..IterConfig::default()
        };
        let r = optimize(&m, &[1.0], &target(&[0.0]), &cfg, &ctx).unwrap();
        assert_eq!(r.value, vec![1.0]);
        assert_eq!(r.loss_trajectory, vec![1.0]);
    }

    fn small_model(pb_dim: usize) -> GeMuCoModel {
        let layout = ModalityLayout::new([("a", 2), ("b", 1)]).unwrap();
        let normalizer = Normalizer {
            layout: layout.clone(),
            mean: vec![0.5, -1.0, 2.0],
            std: vec![2.0, 0.5, 1.5],
        };
        GeMuCoModel::new(
            &layout,
            &["a", "b"],
            &["a", "b"],
            pb_dim,
            &ArchConfig::default(),
            normalizer,
            enumerate_all_masks(2).unwrap(),
            11,
        )
        .unwrap()
    }

    fn fd_check(
        m: &GeMuCoModel,
        spec: &LossSpec,
        cfg: &IterConfig,
        ctx: &OptContext,
        v: &[f64],
        tol: f64,
    ) {
        let (_, g) = loss_gradient(m, v, spec, cfg, ctx).unwrap();
        let h = 1e-6;
        for i in 0..v.len() {
            if cfg.frozen.contains(&i) {
                assert_eq!(g[i], 0.0);
                continue;
            }
            let mut p = v.to_vec();
            let mut q = v.to_vec();
            p[i] += h;
            q[i] -= h;
            let fd = (eval_loss(m, &p, spec, cfg, ctx).unwrap()
                - eval_loss(m, &q, spec, cfg, ctx).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= tol * (1.0 + fd.abs()),
                "channel {i}: fd {fd} vs {}",
                g[i]
            );
        }
    }

    fn mixed_spec() -> LossSpec {
        LossSpec::new(vec![
            LossTerm::TargetMatch {
                group: "a".into(),
                target: vec![1.0, -1.0],
                weight: 1.0,
                transform: None,
            },
            LossTerm::TargetMatch {
                group: "a".into(),
                target: vec![0.3],
                weight: 0.5,
                transform: Some(vec![vec![1.0, 2.0]]),
            },
            LossTerm::Magnitude {
                group: "b".into(),
                weight: 0.3,
            },
            LossTerm::InputDeviation {
                group: "b".into(),
                reference: vec![2.5],
                weight: 0.2,
            },
        ])
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        let m = small_model(2);
        let spec = mixed_spec();
        let ctx = OptContext::new(
            vec![0.2, -0.4, 0.9],
            MaskVector::parse("11").unwrap(),
            vec![0.1, -0.3],
        );
        for var in [Variable::Latent, Variable::Input, Variable::Pb] {
            let cfg = IterConfig::default().with_variable(var);
            let v = initial_value(&m, var, &ctx).unwrap();
            fd_check(&m, &spec, &cfg, &ctx, &v, 1e-6);
        }
        let cfg = IterConfig {
            variable: Variable::Input,
            frozen: vec![1],
            ..IterConfig::default()
        };
        fd_check(&m, &spec, &cfg, &ctx, &ctx.x_in, 1e-6);
    }

    #[test]
    fn weight_gradient_matches_finite_differences_on_samples() {
        let m = small_model(1);
        let spec = mixed_spec();
        let ctx = OptContext::new(
            vec![0.2, -0.4, 0.9],
            MaskVector::parse("10").unwrap(),
            vec![0.4],
        );
        let cfg = IterConfig::default().with_variable(Variable::Weights);
        let v = initial_value(&m, Variable::Weights, &ctx).unwrap();
        let (_, g) = loss_gradient(&m, &v, &spec, &cfg, &ctx).unwrap();
        let h = 1e-6;
        for i in (0..v.len()).step_by(37) {
            let mut p = v.clone();
            let mut q = v.clone();
            p[i] += h;
            q[i] -= h;
            let fd = (eval_loss(&m, &p, &spec, &cfg, &ctx).unwrap()
                - eval_loss(&m, &q, &spec, &cfg, &ctx).unwrap())
                / (2.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                "weight {i}: fd {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn frozen_channels_are_bit_identical() {
        let m = small_model(0);
        let ctx = OptContext::new(
            vec![0.2, -0.4, 0.9],
            MaskVector::parse("11").unwrap(),
            vec![],
        );
        let cfg = IterConfig {
            variable: Variable::Input,
            frozen: vec![0, 2],
            ..IterConfig::default()
        };
        let r = optimize(&m, &ctx.x_in, &mixed_spec(), &cfg, &ctx).unwrap();
        assert_eq!(r.value[0].to_bits(), 0.2f64.to_bits());
        assert_eq!(r.value[2].to_bits(), 0.9f64.to_bits());
        assert!(r.loss_trajectory.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn pb_mode_without_pb_is_a_no_op() {
        let m = small_model(0);
        let ctx = OptContext::new(vec![0.0; 3], MaskVector::parse("11").unwrap(), vec![]);
        let cfg = IterConfig::default().with_variable(Variable::Pb);
        let r = optimize(&m, &[], &mixed_spec(), &cfg, &ctx).unwrap();
        assert!(r.value.is_empty());
        assert!(r.loss_trajectory.windows(2).all(|w| w[0] == w[1]));
    }

    /// Tendon toy: theta (1), f (2), l (2).
    fn torque_model() -> GeMuCoModel {
        let layout = ModalityLayout::new([("theta", 1), ("f", 2), ("l", 2)]).unwrap();
        let normalizer = Normalizer {
            layout: layout.clone(),
            mean: vec![0.0, 20.0, 20.0, 100.0, 100.0],
            std: vec![0.5, 10.0, 10.0, 5.0, 5.0],
        };
        GeMuCoModel::new(
            &layout,
            &["theta", "f", "l"],
            &["theta", "f", "l"],
            0,
            &ArchConfig::default(),
            normalizer,
            enumerate_all_masks(3).unwrap(),
            5,
        )
        .unwrap()
    }

    #[test]
    fn torque_balance_gradient_matches_composed_finite_differences() {
        let m = torque_model();
        let spec = LossSpec::new(vec![LossTerm::TorqueBalance {
            angle_group: "theta".into(),
            tension_group: "f".into(),
            length_group: "l".into(),
            tau_ext: vec![3.0],
            weight: 0.5,
            angle_reference: None,
        }]);
        let ctx = OptContext::latent(&m, vec![]);
        let cfg = IterConfig::default();
        for z in [vec![0.1, -0.2], vec![0.5, 0.3], vec![-0.4, 0.8]] {
            let mut zz = z.clone();
            zz.resize(m.latent_dim, 0.2);
            fd_check(&m, &spec, &cfg, &ctx, &zz, 1e-3);
        }
    }

    #[test]
    fn torque_balance_cancels_on_identity_jacobian() {
        // l = theta * (1, 1) through a hand-built linear model: G = [1, 1]^T.
        let layout = ModalityLayout::new([("theta", 1), ("f", 2), ("l", 2)]).unwrap();
        let normalizer = Normalizer {
            layout: layout.clone(),
            mean: vec![0.0; 5],
            std: vec![1.0; 5],
        };
        let arch = ArchConfig {
            latent_dim: Some(3),
            encoder_hidden: Some(vec![]),
            decoder_hidden: Some(vec![]),
        };
        let mut m = GeMuCoModel::new(
            &layout,
            &["theta", "f", "l"],
            &["theta", "f", "l"],
            0,
            &arch,
            normalizer,
            enumerate_all_masks(3).unwrap(),
            0,
        )
        .unwrap();
        // encoder: z = (theta, f1, f2); decoder: (theta, f1, f2, theta, theta)
        let mut ew = vec![0.0; 3 * 8];
        ew[0] = 1.0;
        ew[8 + 1] = 1.0;
        ew[16 + 2] = 1.0;
        m.encoder.weights.layers[0] = Dense {
            weight: ew,
            bias: vec![0.0; 3],
        };
        let dw = vec![
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0,
        ];
        m.decoder.weights.layers[0] = Dense {
            weight: dw,
            bias: vec![0.0; 5],
        };
        let f = [2.0, 3.0];
        let spec = LossSpec::new(vec![LossTerm::TorqueBalance {
            angle_group: "theta".into(),
            tension_group: "f".into(),
            length_group: "l".into(),
            tau_ext: vec![-(f[0] + f[1])],
            weight: 1.0,
            angle_reference: None,
        }]);
        let ctx = OptContext::latent(&m, vec![]);
        let l = eval_loss(&m, &[0.4, f[0], f[1]], &spec, &IterConfig::default(), &ctx).unwrap();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn loss_spec_parses_from_toml_records() {
        let text = r#"
            [[terms]]
            kind = "target_match"
            group = "a"
            target = [1.0, 2.0]
            weight = 1.0

            [[terms]]
            kind = "magnitude"
            group = "b"
            weight = 0.1
        "#;
        let spec: LossSpec = toml::from_str(text).unwrap();
        assert_eq!(spec.terms.len(), 2);
        assert!(toml::from_str::<LossSpec>(
            "[[terms]]\nkind = \"magnitude\"\ngroup = \"b\"\nweight = 1.0\nextra = 1\n"
        )
        .is_err());
    }
}
