//! Choosing input groups, output groups and feasible masks from data.
//!
//! A probe network over every group is trained with all masks. A group is an
//! output when it can be recovered from the others; a mask is feasible when
//! the output groups it hides can be recovered from what it leaves visible.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{enumerate_all_masks, MaskSet, MaskVector, ModalityLayout};
use crate::model::{ArchConfig, GeMuCoModel};
use crate::trainer::{self, masked_loss, Dataset, MaskSource, Prepared, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StructureConfig {
    pub c_out: f64,
    pub c_in: f64,
    pub eval_fraction: f64,
    pub pb_dim: usize,
    pub arch: ArchConfig,
    pub probe: TrainConfig,
    /// Training of the final model on the reduced structure.
    pub final_train: TrainConfig,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            c_out: 0.15,
            c_in: 0.15,
            eval_fraction: 0.2,
            pb_dim: 2,
            arch: ArchConfig::default(),
            probe: TrainConfig {
                mask_source: MaskSource::All,
                ..TrainConfig::default()
            },
            final_train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLoss {
    pub group: String,
    pub loss: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLoss {
    /// Mask over the full group layout.
    pub mask: MaskVector,
    /// `None` for masks that leave every output visible.
    pub loss: Option<f64>,
    pub superset: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub groups: Vec<String>,
    pub c_out: f64,
    pub c_in: f64,
    pub group_losses: Vec<GroupLoss>,
    pub mask_losses: Vec<MaskLoss>,
    pub out_groups: Vec<String>,
    pub in_groups: Vec<String>,
    /// Feasible masks over the full group layout.
    pub feasible_full: MaskSet,
    /// Feasible masks over the selected input groups.
    pub feasible_in: MaskSet,
}

impl StructureReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "groups: {}", self.groups.join(", "));
        let _ = writeln!(s, "output loss (c_out = {}):", self.c_out);
        for g in &self.group_losses {
            let _ = writeln!(
                s,
                "  {:<12} {:>12.6} {}",
                g.group,
                g.loss,
                if g.selected { "out" } else { "-" }
            );
        }
        let _ = writeln!(s, "mask loss (c_in = {}):", self.c_in);
        for m in &self.mask_losses {
            let loss = match m.loss {
                Some(l) => format!("{l:>12.6}"),
                None => format!("{:>12}", "superset"),
            };
            let _ = writeln!(
                s,
                "  {}  {} {}",
                m.mask,
                loss,
                if m.feasible { "feasible" } else { "-" }
            );
        }
        let _ = writeln!(s, "out: {}", self.out_groups.join(", "));
        let _ = writeln!(s, "in: {}", self.in_groups.join(", "));
        s
    }
}

/// Trains a probe model over the whole layout using every mask.
pub fn probe_train(data: &Dataset, cfg: &StructureConfig) -> Result<GeMuCoModel> {
    let layout = &data.layout;
    let names: Vec<&str> = layout.names().collect();
    let model = GeMuCoModel::new(
        layout,
        &names,
        &names,
        cfg.pb_dim,
        &cfg.arch,
        data.fit_normalizer()?,
        enumerate_all_masks(layout.n_groups())?,
        cfg.probe.seed,
    )?;
    let probe_cfg = TrainConfig {
        mask_source: MaskSource::All,
        ..cfg.probe.clone()
    };
    Ok(trainer::train(&model, data, &probe_cfg)?.0)
}

/// Mean over `eval` of the MSE on the entries of `scored` groups, predicting
/// with `mask` (further restricted to available groups).
fn masked_eval(
    probe: &GeMuCoModel,
    eval: &Dataset,
    mask: &MaskVector,
    scored: &[bool],
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in &eval.samples {
        let p = Prepared::new(probe, s, 0)?;
        let wanted: Vec<bool> = scored
            .iter()
            .zip(&p.out_avail)
            .map(|(&a, &b)| a && b)
            .collect();
        if !wanted.iter().any(|&w| w) {
            continue;
        }
        let bits: Vec<bool> = mask
            .bits()
            .iter()
            .zip(&p.in_avail)
            .map(|(&a, &b)| a && b)
            .collect();
        let m = MaskVector::new(bits);
        if m.is_zero() {
            continue;
        }
        let pred = probe.predict(&p.x_in, &m, &probe.pb_for(&s.state_id))?;
        sum += masked_loss(&probe.out_layout, &pred, &p.target, &wanted);
        n += 1;
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Per-group loss with that group alone hidden; groups below `c_out` are outputs.
pub fn determine_outputs(
    probe: &GeMuCoModel,
    eval: &Dataset,
    c_out: f64,
) -> Result<(Vec<String>, Vec<GroupLoss>)> {
    let layout = &probe.in_layout;
    let n = layout.n_groups();
    let mut losses = Vec::with_capacity(n);
    for i in 0..n {
        let mut bits = vec![true; n];
        if n > 1 {
            bits[i] = false;
        }
        let mut scored = vec![false; n];
        scored[i] = true;
        let loss =
            masked_eval(probe, eval, &MaskVector::new(bits), &scored)?.unwrap_or(f64::INFINITY);
        losses.push(GroupLoss {
            group: layout.groups()[i].name.clone(),
            loss,
            selected: loss < c_out,
        });
    }
    let out: Vec<String> = losses
        .iter()
        .filter(|g| g.selected)
        .map(|g| g.group.clone())
        .collect();
    if out.is_empty() {
        return Err(Error::NoPredictableOutputs(c_out));
    }
    Ok((out, losses))
}

/// Evaluates every mask against the chosen outputs. The loss of a mask is the
/// error on the output groups it hides; masks that hide no output are
/// feasible without evaluation.
pub fn determine_inputs(
    probe: &GeMuCoModel,
    eval: &Dataset,
    out_groups: &[String],
    c_in: f64,
) -> Result<(Vec<String>, MaskSet, Vec<MaskLoss>)> {
    let layout = &probe.in_layout;
    let n = layout.n_groups();
    let is_out: Vec<bool> = layout
        .names()
        .map(|name| out_groups.iter().any(|o| o == name))
        .collect();
    let mut losses = Vec::new();
    let mut feasible = MaskSet::default();
    for m in enumerate_all_masks(n)?.iter() {
        let hidden_out: Vec<bool> = (0..n).map(|g| is_out[g] && !m.visible(g)).collect();
        if !hidden_out.iter().any(|&h| h) {
            feasible.insert(m.clone())?;
            losses.push(MaskLoss {
                mask: m.clone(),
                loss: None,
                superset: true,
                feasible: true,
            });
            continue;
        }
        let loss = masked_eval(probe, eval, m, &hidden_out)?.unwrap_or(f64::INFINITY);
        let ok = loss < c_in;
        if ok {
            feasible.insert(m.clone())?;
        }
        losses.push(MaskLoss {
            mask: m.clone(),
            loss: Some(loss),
            superset: false,
            feasible: ok,
        });
    }
    let mut used = vec![false; n];
    for ml in losses.iter().filter(|m| m.feasible && !m.superset) {
        for (g, u) in used.iter_mut().enumerate() {
            *u |= ml.mask.visible(g);
        }
    }
    if !used.iter().any(|&u| u) {
        return Err(Error::NoFeasibleMasks(c_in));
    }
    let in_groups = layout
        .names()
        .zip(&used)
        .filter(|(_, &u)| u)
        .map(|(n, _)| n.to_string())
        .collect();
    Ok((in_groups, feasible, losses))
}

/// Restricts full-layout masks to the input groups; masks that show a
/// non-input group, or nothing, are dropped.
pub fn project_masks(
    full: &ModalityLayout,
    masks: &MaskSet,
    in_groups: &[String],
) -> Result<MaskSet> {
    let keep: Vec<bool> = full
        .names()
        .map(|n| in_groups.iter().any(|g| g == n))
        .collect();
    let mut out = MaskSet::default();
    for m in masks {
        if (0..full.n_groups()).any(|g| m.visible(g) && !keep[g]) {
            continue;
        }
        let bits: Vec<bool> = (0..full.n_groups())
            .filter(|&g| keep[g])
            .map(|g| m.visible(g))
            .collect();
        let mv = MaskVector::new(bits);
        if !mv.is_zero() {
            out.insert(mv)?;
        }
    }
    Ok(out)
}

/// Full pipeline: probe, outputs, inputs, then a fresh model trained on the
/// reduced structure.
pub fn determine_structure(
    data: &Dataset,
    cfg: &StructureConfig,
) -> Result<(GeMuCoModel, StructureReport)> {
    let (train, eval) = data.split(cfg.eval_fraction)?;
    if eval.is_empty() {
        return Err(Error::TooFewSamples {
            need: 2,
            got: data.len(),
        });
    }
    let probe = probe_train(&train, cfg)?;
    let report = analyze(&probe, &eval, cfg)?;
    let model = build_final(data, &report, cfg)?;
    Ok((model, report))
}

/// Output/input selection on an already trained probe.
pub fn analyze(
    probe: &GeMuCoModel,
    eval: &Dataset,
    cfg: &StructureConfig,
) -> Result<StructureReport> {
    let (out_groups, group_losses) = determine_outputs(probe, eval, cfg.c_out)?;
    let (in_groups, feasible_full, mask_losses) =
        determine_inputs(probe, eval, &out_groups, cfg.c_in)?;
    let feasible_in = project_masks(&probe.in_layout, &feasible_full, &in_groups)?;
    Ok(StructureReport {
        groups: probe.in_layout.names().map(str::to_string).collect(),
        c_out: cfg.c_out,
        c_in: cfg.c_in,
        group_losses,
        mask_losses,
        out_groups,
        in_groups,
        feasible_full,
        feasible_in,
    })
}

/// Trains a model from scratch with the selected groups and masks.
pub fn build_final(
    data: &Dataset,
    report: &StructureReport,
    cfg: &StructureConfig,
) -> Result<GeMuCoModel> {
    let ins: Vec<&str> = report.in_groups.iter().map(String::as_str).collect();
    let outs: Vec<&str> = report.out_groups.iter().map(String::as_str).collect();
    let model = GeMuCoModel::new(
        &data.layout,
        &ins,
        &outs,
        cfg.pb_dim,
        &cfg.arch,
        data.fit_normalizer()?,
        report.feasible_in.clone(),
        cfg.final_train.seed.wrapping_add(1),
    )?;
    Ok(trainer::train(&model, data, &cfg.final_train)?.0)
}
