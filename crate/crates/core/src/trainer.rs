//! Datasets and minibatch training with random masks and per-state
//! parametric bias.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::modality::{enumerate_all_masks, MaskVector, ModalityLayout, Normalizer};
use crate::model::{GeMuCoModel, ParametricBias};
use crate::net::Weights;

/// One time step of raw sensor data over a dataset layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state_id: String,
    pub values: Vec<f64>,
    /// Per-group availability.
    pub available: Vec<bool>,
}

impl Sample {
    pub fn new(state_id: impl Into<String>, values: Vec<f64>, available: Vec<bool>) -> Self {
        Self {
            state_id: state_id.into(),
            values,
            available,
        }
    }

    pub fn fully_observed(state_id: impl Into<String>, values: Vec<f64>, n_groups: usize) -> Self {
        Self::new(state_id, values, vec![true; n_groups])
    }
}

/// Samples sharing one layout, each tagged with the body state it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub layout: ModalityLayout,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(layout: ModalityLayout) -> Self {
        Self {
            layout,
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, s: Sample) -> Result<()> {
        check_len("sample values", self.layout.total_dim(), s.values.len())?;
        check_len(
            "sample availability",
            self.layout.n_groups(),
            s.available.len(),
        )?;
        self.samples.push(s);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.layout != self.layout {
            return Err(Error::InvalidConfig(
                "cannot merge datasets with different layouts".into(),
            ));
        }
        self.samples.extend(other.samples.iter().cloned());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// State ids in order of first appearance.
    pub fn state_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.state_id) {
                out.push(s.state_id.clone());
            }
        }
        out
    }

    /// Samples grouped by state id, in order of first appearance.
    pub fn episodes(&self) -> Vec<(String, Vec<&Sample>)> {
        let ids = self.state_ids();
        ids.into_iter()
            .map(|id| {
                let v = self.samples.iter().filter(|s| s.state_id == id).collect();
                (id, v)
            })
            .collect()
    }

    pub fn fit_normalizer(&self) -> Result<Normalizer> {
        if self.samples.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        Normalizer::fit(
            &self.layout,
            self.samples
                .iter()
                .map(|s| (s.values.as_slice(), s.available.as_slice())),
        )
    }

    /// Splits every episode, keeping the leading `1 - eval_fraction` for training.
    pub fn split(&self, eval_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::InvalidConfig(format!(
                "eval fraction {eval_fraction} outside [0, 1)"
            )));
        }
        let mut train = Dataset::new(self.layout.clone());
        let mut eval = Dataset::new(self.layout.clone());
        for (_, samples) in self.episodes() {
            let n_eval = (samples.len() as f64 * eval_fraction).round() as usize;
            let n_train = samples.len() - n_eval;
            for (i, s) in samples.into_iter().enumerate() {
                if i < n_train {
                    train.samples.push(s.clone());
                } else {
                    eval.samples.push(s.clone());
                }
            }
        }
        Ok((train, eval))
    }

    /// Restricts the dataset to a sub-layout.
    pub fn project(&self, sub: &ModalityLayout) -> Result<Dataset> {
        let mut out = Dataset::new(sub.clone());
        for s in &self.samples {
            out.samples.push(Sample {
                state_id: s.state_id.clone(),
                values: sub.gather(&self.layout, &s.values)?,
                available: sub.gather_flags(&self.layout, &s.available)?,
            });
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        self.write_records(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        self.write_records(&mut w)?;
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Parse(format!("csv flush failed: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    fn write_records<W: std::io::Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut header = vec!["state_id".to_string()];
        header.extend(self.layout.names().map(|n| format!("avail_{n}")));
        header.extend(self.layout.channel_names());
        w.write_record(&header)?;
        let groups = self.layout.channel_groups();
        for s in &self.samples {
            let mut rec = vec![s.state_id.clone()];
            rec.extend(
                s.available
                    .iter()
                    .map(|&a| if a { "1" } else { "0" }.to_string()),
            );
            for (c, v) in s.values.iter().enumerate() {
                rec.push(if s.available[groups[c]] {
                    format!("{v:?}")
                } else {
                    String::new()
                });
            }
            w.write_record(&rec)?;
        }
        Ok(())
    }

    /// Reads a dataset; group names and dims are recovered from the header.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let r = csv::Reader::from_path(path)?;
        Self::read_records(r)
    }

    pub fn from_csv_str(s: &str) -> Result<Dataset> {
        Self::read_records(csv::Reader::from_reader(s.as_bytes()))
    }

    fn read_records<R: std::io::Read>(mut r: csv::Reader<R>) -> Result<Dataset> {
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.first().map(String::as_str) != Some("state_id") {
            return Err(Error::Parse("first column must be `state_id`".into()));
        }
        let names: Vec<String> = header[1..]
            .iter()
            .take_while(|h| h.starts_with("avail_"))
            .map(|h| h["avail_".len()..].to_string())
            .collect();
        let channels = &header[1 + names.len()..];
        let mut groups: Vec<(String, usize)> = Vec::new();
        for name in &names {
            let dim = channels
                .iter()
                .filter(|c| {
                    c.rsplit_once('_')
                        .is_some_and(|(g, i)| g == name && i.parse::<usize>().is_ok())
                })
                .count();
            groups.push((name.clone(), dim));
        }
        let layout = ModalityLayout::new(groups)?;
        let expected: Vec<String> = layout.channel_names();
        if expected.as_slice() != channels {
            return Err(Error::Parse(format!(
                "channel columns {channels:?} do not match groups {names:?}"
            )));
        }
        let groups = layout.channel_groups();
        let mut data = Dataset::new(layout);
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            let state_id = rec.get(0).unwrap_or_default().to_string();
            let mut available = Vec::with_capacity(names.len());
            for g in 0..names.len() {
                match rec.get(1 + g) {
                    Some("1") => available.push(true),
                    Some("0") => available.push(false),
                    other => {
                        return Err(Error::Parse(format!(
                            "row {row}: availability flag must be 0 or 1, got {other:?}"
                        )))
                    }
                }
            }
            let mut values = Vec::with_capacity(groups.len());
            for (c, &g) in groups.iter().enumerate() {
                let cell = rec.get(1 + names.len() + c).unwrap_or_default();
                let v = if available[g] {
                    cell.parse::<f64>().map_err(|e| {
                        Error::Parse(format!("row {row}, column {}: {e}", expected[c]))
                    })?
                } else {
                    0.0
                };
                values.push(v);
            }
            data.push(Sample::new(state_id, values, available))?;
        }
        Ok(data)
    }
}

/// MSE over the scalar entries of the available output groups; zero when
/// none is available.
pub fn masked_loss(
    out_layout: &ModalityLayout,
    pred: &[f64],
    target: &[f64],
    available: &[bool],
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (g, _) in available.iter().take(out_layout.n_groups()).enumerate().filter(|(_, a)| **a) {
        for c in out_layout.range(g) {
            let d = pred[c] - target[c];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Masks drawn from the model's feasible set.
    Feasible,
    /// Masks drawn from every non-zero mask.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Parametric bias learning rate as a multiple of `learning_rate`.
    pub pb_lr_ratio: f64,
    pub mask_source: MaskSource,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-2,
            pb_lr_ratio: 10.0,
            mask_source: MaskSource::Feasible,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if !(self.pb_lr_ratio >= 0.0 && self.pb_lr_ratio.is_finite()) {
            return Err(Error::InvalidConfig(
                "pb_lr_ratio must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean masked loss per epoch.
    pub loss_history: Vec<f64>,
    /// Samples with no admissible mask.
    pub skipped: usize,
    pub pb_table: BTreeMap<String, ParametricBias>,
}

/// A sample converted to network units.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub x_in: Vec<f64>,
    pub target: Vec<f64>,
    pub out_avail: Vec<bool>,
    pub in_avail: Vec<bool>,
    pub state: usize,
}

impl Prepared {
    pub fn new(model: &GeMuCoModel, s: &Sample, state: usize) -> Result<Self> {
        let mut x_in = model.x_in_from_data(&s.values)?;
        let in_avail = model
            .in_layout
            .gather_flags(&model.data_layout, &s.available)?;
        crate::modality::apply_mask_in_place(
            &model.in_layout,
            &mut x_in,
            &MaskVector::new(in_avail.clone()),
        );
        Ok(Self {
            x_in,
            target: model.x_out_from_data(&s.values)?,
            out_avail: model
                .out_layout
                .gather_flags(&model.data_layout, &s.available)?,
            in_avail,
            state,
        })
    }

    /// A mask is admissible when it hides every unavailable input group.
    pub fn admits(&self, m: &MaskVector) -> bool {
        m.bits().iter().zip(&self.in_avail).all(|(&v, &a)| !v || a)
    }
}

pub(crate) struct BatchGrad {
    pub encoder: Weights,
    pub decoder: Weights,
    /// Per-state gradient, indexed like the `pbs` argument.
    pub pb: Vec<Vec<f64>>,
    pub loss_sum: f64,
}

const CHUNK: usize = 16;

/// Gradient of the mean masked loss over `items` (sample, mask) pairs.
pub(crate) fn batch_gradient(
    model: &GeMuCoModel,
    items: &[(&Prepared, &MaskVector)],
    pbs: &[Vec<f64>],
) -> BatchGrad {
    let scale = 1.0 / items.len().max(1) as f64;
    let chunk_grads: Vec<BatchGrad> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = BatchGrad {
                encoder: Weights::zeros(&model.encoder.spec),
                decoder: Weights::zeros(&model.decoder.spec),
                pb: vec![vec![0.0; model.pb_dim]; pbs.len()],
                loss_sum: 0.0,
            };
            for (p, m) in chunk {
                let input = model.encoder_input_unchecked(&p.x_in, m, &pbs[p.state]);
                let mut loss = 0.0;
                let (_, d_in) = model.input_gradient(
                    &input,
                    |pred| {
                        loss = masked_loss(&model.out_layout, pred, &p.target, &p.out_avail);
                        let n: usize = (0..model.out_layout.n_groups())
                            .filter(|&g| p.out_avail[g])
                            .map(|g| model.out_layout.groups()[g].dim)
                            .sum();
                        let mut d = vec![0.0; pred.len()];
                        if n > 0 {
                            let k = 2.0 * scale / n as f64;
                            for g in 0..model.out_layout.n_groups() {
                                if p.out_avail[g] {
                                    for c in model.out_layout.range(g) {
                                        d[c] = k * (pred[c] - p.target[c]);
                                    }
                                }
                            }
                        }
                        d
                    },
                    Some((&mut g.encoder, &mut g.decoder)),
                );
                g.loss_sum += loss;
                let off = d_in.len() - model.pb_dim;
                for (acc, v) in g.pb[p.state].iter_mut().zip(&d_in[off..]) {
                    *acc += v;
                }
            }
            g
        })
        .collect();
    let mut it = chunk_grads.into_iter();
    let mut total = it.next().unwrap_or_else(|| BatchGrad {
        encoder: Weights::zeros(&model.encoder.spec),
        decoder: Weights::zeros(&model.decoder.spec),
        pb: vec![vec![0.0; model.pb_dim]; pbs.len()],
        loss_sum: 0.0,
    });
    for g in it {
        total.encoder.axpy(1.0, &g.encoder);
        total.decoder.axpy(1.0, &g.decoder);
        for (a, b) in total.pb.iter_mut().zip(&g.pb) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        total.loss_sum += g.loss_sum;
    }
    total
}

/// First-order update rule over a flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) enum Stepper {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Stepper {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => Stepper::Sgd,
            OptimizerKind::Adam => Stepper::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    pub fn step<'a>(
        &mut self,
        lr: f64,
        params: impl Iterator<Item = &'a mut f64>,
        grad: impl Iterator<Item = &'a f64>,
    ) {
        match self {
            Stepper::Sgd => {
                for (p, g) in params.zip(grad) {
                    *p -= lr * g;
                }
            }
            Stepper::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                for (((p, g), mi), vi) in params.zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = B1 * *mi + (1.0 - B1) * g;
                    *vi = B2 * *vi + (1.0 - B2) * g * g;
                    *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Optimizer state for both networks and a set of parametric biases.
pub(crate) struct ModelStepper {
    encoder: Stepper,
    decoder: Stepper,
    pb: Vec<Stepper>,
}

impl ModelStepper {
    pub fn new(kind: OptimizerKind, model: &GeMuCoModel, n_states: usize) -> Self {
        Self {
            encoder: Stepper::new(kind, model.encoder.weights.len()),
            decoder: Stepper::new(kind, model.decoder.weights.len()),
            pb: (0..n_states)
                .map(|_| Stepper::new(kind, model.pb_dim))
                .collect(),
        }
    }

    pub fn step_weights(&mut self, model: &mut GeMuCoModel, g: &BatchGrad, lr: f64) {
        self.encoder
            .step(lr, model.encoder.weights.iter_mut(), g.encoder.iter());
        self.decoder
            .step(lr, model.decoder.weights.iter_mut(), g.decoder.iter());
    }

    /// Updates only the states that received data in this batch.
    pub fn step_pb(&mut self, pbs: &mut [Vec<f64>], g: &BatchGrad, touched: &[bool], lr: f64) {
        for (k, p) in pbs.iter_mut().enumerate() {
            if touched[k] {
                self.pb[k].step(lr, p.iter_mut(), g.pb[k].iter());
            }
        }
    }
}

/// Candidate masks for a model under a mask source.
pub(crate) fn mask_pool(model: &GeMuCoModel, source: MaskSource) -> Result<Vec<MaskVector>> {
    let set = match source {
        MaskSource::Feasible => model.feasible_masks.clone(),
        MaskSource::All => enumerate_all_masks(model.n_in_groups())?,
    };
    if set.is_empty() {
        return Err(Error::NoFeasibleMasks(f64::NAN));
    }
    Ok(set.iter().cloned().collect())
}

/// Trains a copy of `model` on `data`. Parametric biases start from the
/// model's table (zero for unseen states) and are learned jointly.
pub fn train(
    model: &GeMuCoModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(GeMuCoModel, TrainReport)> {
    cfg.validate()?;
    if data.layout != model.data_layout {
        return Err(Error::InvalidConfig(
            "dataset layout differs from the model's".into(),
        ));
    }
    let mut model = model.clone();
    let states = data.state_ids();
    let mut pbs: Vec<Vec<f64>> = states.iter().map(|id| model.pb_for(id).values).collect();
    let pool = mask_pool(&model, cfg.mask_source)?;

    let mut prepared = Vec::new();
    let mut admissible: Vec<Vec<usize>> = Vec::new();
    let mut skipped = 0;
    for s in &data.samples {
        let state = states.iter().position(|id| *id == s.state_id).unwrap_or(0);
        let p = Prepared::new(&model, s, state)?;
        let ok: Vec<usize> = (0..pool.len()).filter(|&i| p.admits(&pool[i])).collect();
        if ok.is_empty() {
            skipped += 1;
            continue;
        }
        prepared.push(p);
        admissible.push(ok);
    }
    if prepared.is_empty() {
        return Err(Error::Empty("no trainable samples".into()));
    }
    if skipped > 0 {
        log::warn!("{skipped} samples have no admissible mask and were skipped");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stepper = ModelStepper::new(cfg.optimizer, &model, states.len());
    let lr_p = cfg.learning_rate * cfg.pb_lr_ratio;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let masks: Vec<usize> = order
            .iter()
            .map(|&i| admissible[i][rng.random_range(0..admissible[i].len())])
            .collect();
        let mut epoch_loss = 0.0;
        for (batch, batch_masks) in order
            .chunks(cfg.batch_size)
            .zip(masks.chunks(cfg.batch_size))
        {
            let items: Vec<(&Prepared, &MaskVector)> = batch
                .iter()
                .zip(batch_masks)
                .map(|(&i, &m)| (&prepared[i], &pool[m]))
                .collect();
            let g = batch_gradient(&model, &items, &pbs);
            if !g.loss_sum.is_finite() {
                return Err(Error::NonFinite {
                    iteration: epoch,
                    what: "training loss".into(),
                });
            }
            epoch_loss += g.loss_sum;
            let mut touched = vec![false; states.len()];
            for (p, _) in &items {
                touched[p.state] = true;
            }
            stepper.step_weights(&mut model, &g, cfg.learning_rate);
            stepper.step_pb(&mut pbs, &g, &touched, lr_p);
        }
        let mean = epoch_loss / prepared.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        loss_history.push(mean);
    }
    for (id, p) in states.iter().zip(pbs) {
        model
            .pb_table
            .insert(id.clone(), ParametricBias::new(p, id.clone()));
    }
    let report = TrainReport {
        loss_history,
        skipped,
        pb_table: model.pb_table.clone(),
    };
    Ok((model, report))
}

/// Mean masked loss of `model` on `data` with each sample's largest
/// admissible mask from `masks` (or the availability mask when none is given).
pub fn evaluate(model: &GeMuCoModel, data: &Dataset, mask: Option<&MaskVector>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in &data.samples {
        let p = Prepared::new(model, s, 0)?;
        let m = match mask {
            Some(m) => {
                check_len("mask", model.n_in_groups(), m.len())?;
                let bits: Vec<bool> = m
                    .bits()
                    .iter()
                    .zip(&p.in_avail)
                    .map(|(&a, &b)| a && b)
                    .collect();
                MaskVector::new(bits)
            }
            None => MaskVector::new(p.in_avail.clone()),
        };
        if m.is_zero() {
            continue;
        }
        let pred = model.predict(&p.x_in, &m, &model.pb_for(&s.state_id))?;
        sum += masked_loss(&model.out_layout, &pred, &p.target, &p.out_avail);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no evaluable samples".into()));
    }
    Ok(sum / n as f64)
}
