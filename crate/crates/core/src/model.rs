//! Encoder/decoder pair conditioned on a group mask and a parametric bias.
//!
//! The encoder sees `[masked x_in, mask bits, p]` and produces the latent
//! state `z`; the decoder maps `z` to `x_out`. All network-side quantities are
//! in normalized units; the `*_raw` helpers convert through the stored
//! [`Normalizer`].

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::modality::{apply_mask_in_place, MaskSet, MaskVector, ModalityLayout, Normalizer};
use crate::net::{self, ForwardTrace, NetSpec, Weights};

pub const MODEL_FORMAT: &str = "gemuco-model";
pub const MODEL_VERSION: u32 = 1;

/// A network together with its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: NetSpec,
    pub weights: Weights,
}

impl Mlp {
    pub fn new(spec: NetSpec, weights: Weights) -> Result<Self> {
        spec.validate()?;
        weights.check_shape(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        net::forward(&self.spec, &self.weights, input)
    }

    pub(crate) fn trace(&self, input: &[f64]) -> ForwardTrace {
        net::forward_unchecked(&self.spec, &self.weights, input)
    }

    pub(crate) fn output(&self, input: &[f64]) -> Vec<f64> {
        net::forward_output(&self.spec, &self.weights, input)
    }

    pub(crate) fn backprop(
        &self,
        trace: &ForwardTrace,
        d_out: &[f64],
        grad: Option<&mut Weights>,
    ) -> Vec<f64> {
        net::backward_accumulate(&self.spec, &self.weights, trace, d_out, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricBias {
    pub values: Vec<f64>,
    pub label: String,
}

impl ParametricBias {
    pub fn zeros(dim: usize, label: impl Into<String>) -> Self {
        Self {
            values: vec![0.0; dim],
            label: label.into(),
        }
    }

    pub fn new(values: Vec<f64>, label: impl Into<String>) -> Self {
        Self {
            values,
            label: label.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn distance(&self, other: &ParametricBias) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Bottleneck vector `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState(pub Vec<f64>);

impl LatentState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Network sizing. `None` fields fall back to the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Encoder hidden widths; default two layers of `max(16, 4 * input width)`.
    #[serde(default)]
    pub encoder_hidden: Option<Vec<usize>>,
    /// Decoder hidden widths; same default rule applied to the latent width.
    #[serde(default)]
    pub decoder_hidden: Option<Vec<usize>>,
    /// Default `2 * max group dim`.
    #[serde(default)]
    pub latent_dim: Option<usize>,
}

fn default_hidden(input_width: usize) -> Vec<usize> {
    let w = (4 * input_width).max(16);
    vec![w, w]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeMuCoModel {
    pub format: String,
    pub version: u32,
    /// Layout of raw samples (and of the normalizer).
    pub data_layout: ModalityLayout,
    pub in_layout: ModalityLayout,
    pub out_layout: ModalityLayout,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub pb_dim: usize,
    pub latent_dim: usize,
    pub normalizer: Normalizer,
    /// Feasible masks over `in_layout`.
    pub feasible_masks: MaskSet,
    /// Trained parametric bias per state id.
    pub pb_table: BTreeMap<String, ParametricBias>,
}

impl GeMuCoModel {
    /// Fresh, randomly initialized model over the named input/output groups.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        data_layout: &ModalityLayout,
        in_groups: &[&str],
        out_groups: &[&str],
        pb_dim: usize,
        arch: &ArchConfig,
        normalizer: Normalizer,
        feasible_masks: MaskSet,
        seed: u64,
    ) -> Result<Self> {
        let in_layout = data_layout.subset(in_groups.iter().copied())?;
        let out_layout = data_layout.subset(out_groups.iter().copied())?;
        if normalizer.layout != *data_layout {
            return Err(Error::InvalidConfig(
                "normalizer layout differs from the data layout".into(),
            ));
        }
        for m in &feasible_masks {
            check_len("feasible mask", in_layout.n_groups(), m.len())?;
        }
        let max_group = in_layout
            .groups()
            .iter()
            .chain(out_layout.groups())
            .map(|g| g.dim)
            .max()
            .unwrap_or(1);
        let latent_dim = arch.latent_dim.unwrap_or(2 * max_group);
        if latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be >= 1".into()));
        }
        let enc_in = in_layout.total_dim() + in_layout.n_groups() + pb_dim;
        let mut enc_widths = vec![enc_in];
        enc_widths.extend(
            arch.encoder_hidden
                .clone()
                .unwrap_or_else(|| default_hidden(enc_in)),
        );
        enc_widths.push(latent_dim);
        let mut dec_widths = vec![latent_dim];
        dec_widths.extend(
            arch.decoder_hidden
                .clone()
                .unwrap_or_else(|| default_hidden(latent_dim)),
        );
        dec_widths.push(out_layout.total_dim());
        let enc_spec = NetSpec::new(enc_widths)?;
        let dec_spec = NetSpec::new(dec_widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_w = Weights::init(&enc_spec, &mut rng);
        let dec_w = Weights::init(&dec_spec, &mut rng);
        Ok(Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            data_layout: data_layout.clone(),
            in_layout,
            out_layout,
            encoder: Mlp::new(enc_spec, enc_w)?,
            decoder: Mlp::new(dec_spec, dec_w)?,
            pb_dim,
            latent_dim,
            normalizer,
            feasible_masks,
            pb_table: BTreeMap::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Parse(format!(
                "unexpected model format `{}`",
                self.format
            )));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::Parse(format!(
                "unsupported model version {}",
                self.version
            )));
        }
        self.encoder.weights.check_shape(&self.encoder.spec)?;
        self.decoder.weights.check_shape(&self.decoder.spec)?;
        check_len(
            "encoder input width",
            self.in_layout.total_dim() + self.in_layout.n_groups() + self.pb_dim,
            self.encoder.spec.input_width(),
        )?;
        check_len(
            "encoder output width",
            self.latent_dim,
            self.encoder.spec.output_width(),
        )?;
        check_len(
            "decoder input width",
            self.latent_dim,
            self.decoder.spec.input_width(),
        )?;
        check_len(
            "decoder output width",
            self.out_layout.total_dim(),
            self.decoder.spec.output_width(),
        )?;
        for p in self.pb_table.values() {
            check_len("parametric bias", self.pb_dim, p.dim())?;
        }
        for m in &self.feasible_masks {
            check_len("feasible mask", self.in_layout.n_groups(), m.len())?;
        }
        if !self.encoder.weights.is_finite() || !self.decoder.weights.is_finite() {
            return Err(Error::Parse("non-finite weights".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn n_in_groups(&self) -> usize {
        self.in_layout.n_groups()
    }

    /// Parametric bias for a state, zero when the state is unknown.
    pub fn pb_for(&self, state_id: &str) -> ParametricBias {
        self.pb_table
            .get(state_id)
            .cloned()
            .unwrap_or_else(|| ParametricBias::zeros(self.pb_dim, state_id))
    }

    pub fn zero_pb(&self) -> ParametricBias {
        ParametricBias::zeros(self.pb_dim, "zero")
    }

    pub fn all_visible(&self) -> MaskVector {
        MaskVector::ones(self.n_in_groups())
    }

    /// `[masked x_in, mask bits, p]`.
    pub fn encoder_input(&self, x_in: &[f64], m: &MaskVector, p: &[f64]) -> Result<Vec<f64>> {
        check_len("x_in", self.in_layout.total_dim(), x_in.len())?;
        check_len("mask", self.in_layout.n_groups(), m.len())?;
        check_len("parametric bias", self.pb_dim, p.len())?;
        Ok(self.encoder_input_unchecked(x_in, m, p))
    }

    pub(crate) fn encoder_input_unchecked(
        &self,
        x_in: &[f64],
        m: &MaskVector,
        p: &[f64],
    ) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.encoder.spec.input_width());
        v.extend_from_slice(x_in);
        apply_mask_in_place(&self.in_layout, &mut v, m);
        v.extend(m.as_f64());
        v.extend_from_slice(p);
        v
    }

    /// `z = h_enc(x_in, m, p)` on normalized `x_in`.
    pub fn encode(&self, x_in: &[f64], m: &MaskVector, p: &ParametricBias) -> Result<LatentState> {
        let input = self.encoder_input(x_in, m, &p.values)?;
        Ok(LatentState(self.encoder.output(&input)))
    }

    /// `x_out = h_dec(z)`, normalized.
    pub fn decode(&self, z: &LatentState) -> Result<Vec<f64>> {
        check_len("latent", self.latent_dim, z.0.len())?;
        if z.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                iteration: 0,
                what: "latent state".into(),
            });
        }
        Ok(self.decoder.output(&z.0))
    }

    /// `x_out = h(x_in, m, p)`, normalized.
    pub fn predict(&self, x_in: &[f64], m: &MaskVector, p: &ParametricBias) -> Result<Vec<f64>> {
        let z = self.encode(x_in, m, p)?;
        self.decode(&z)
    }

    /// Normalized `x_in` taken from a raw vector over `data_layout`.
    pub fn x_in_from_data(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let x = self.in_layout.gather(&self.data_layout, raw)?;
        self.normalizer.normalize_in(&self.in_layout, &x)
    }

    /// Normalized `x_out` taken from a raw vector over `data_layout`.
    pub fn x_out_from_data(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let x = self.out_layout.gather(&self.data_layout, raw)?;
        self.normalizer.normalize_in(&self.out_layout, &x)
    }

    pub fn out_to_raw(&self, x_out: &[f64]) -> Result<Vec<f64>> {
        self.normalizer.denormalize_in(&self.out_layout, x_out)
    }

    pub fn in_to_raw(&self, x_in: &[f64]) -> Result<Vec<f64>> {
        self.normalizer.denormalize_in(&self.in_layout, x_in)
    }

    /// Raw prediction of `x_out` from a raw sample over `data_layout`.
    pub fn predict_raw(&self, raw: &[f64], m: &MaskVector, p: &ParametricBias) -> Result<Vec<f64>> {
        let x_in = self.x_in_from_data(raw)?;
        let out = self.predict(&x_in, m, p)?;
        self.out_to_raw(&out)
    }

    /// Input mask over `in_layout` from per-group availability over `data_layout`.
    pub fn mask_from_availability(&self, available: &[bool]) -> Result<MaskVector> {
        Ok(MaskVector::new(
            self.in_layout.gather_flags(&self.data_layout, available)?,
        ))
    }

    /// Jacobian of raw output group `out_group` w.r.t. raw input group
    /// `in_group` at raw input `x_in_raw` (over `in_layout`).
    pub fn jacobian_raw(
        &self,
        x_in_raw: &[f64],
        m: &MaskVector,
        p: &[f64],
        out_group: &str,
        in_group: &str,
    ) -> Result<DMatrix<f64>> {
        let x_in = self.normalizer.normalize_in(&self.in_layout, x_in_raw)?;
        let out_range = self.out_layout.range_of(out_group)?;
        let in_range = self.in_layout.range_of(in_group)?;
        let enc_input = self.encoder_input(&x_in, m, p)?;
        let enc_trace = self.encoder.trace(&enc_input);
        let mut seed = DMatrix::zeros(enc_input.len(), in_range.len());
        for (j, c) in in_range.clone().enumerate() {
            seed[(c, j)] = 1.0;
        }
        let t_latent =
            net::push_tangents(&self.encoder.spec, &self.encoder.weights, &enc_trace, &seed);
        let dec_trace = self.decoder.trace(enc_trace.output());
        let t_out = net::push_tangents(
            &self.decoder.spec,
            &self.decoder.weights,
            &dec_trace,
            &t_latent,
        );
        let (_, in_std) = self.normalizer.stats_for(&self.in_layout)?;
        let (_, out_std) = self.normalizer.stats_for(&self.out_layout)?;
        let rows: Vec<usize> = out_range.clone().collect();
        let mut j = t_out.select_rows(&rows);
        for (r, c) in out_range.enumerate() {
            j.row_mut(r).scale_mut(out_std[c]);
        }
        for (col, c) in in_range.enumerate() {
            j.column_mut(col).scale_mut(1.0 / in_std[c]);
        }
        Ok(j)
    }

    /// Gradient of a loss w.r.t. the latent state given `dL/dx_out`.
    pub(crate) fn latent_gradient(&self, z: &[f64], d_out: &[f64]) -> Vec<f64> {
        let trace = self.decoder.trace(z);
        self.decoder.backprop(&trace, d_out, None)
    }

    /// Gradients w.r.t. the full encoder input `[x_in, mask, p]` given `dL/dx_out`,
    /// optionally accumulating weight gradients.
    pub(crate) fn input_gradient(
        &self,
        enc_input: &[f64],
        d_out_fn: impl FnOnce(&[f64]) -> Vec<f64>,
        grads: Option<(&mut Weights, &mut Weights)>,
    ) -> (Vec<f64>, Vec<f64>) {
        let enc_trace = self.encoder.trace(enc_input);
        let dec_trace = self.decoder.trace(enc_trace.output());
        let pred = dec_trace.output().to_vec();
        let d_out = d_out_fn(&pred);
        let (ge, gd) = match grads {
            Some((ge, gd)) => (Some(ge), Some(gd)),
            None => (None, None),
        };
        let d_z = self.decoder.backprop(&dec_trace, &d_out, gd);
        let d_in = self.encoder.backprop(&enc_trace, &d_z, ge);
        (pred, d_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::enumerate_all_masks;

    fn toy_model(pb_dim: usize) -> GeMuCoModel {
        let layout = ModalityLayout::new([("a", 2), ("b", 1), ("c", 1)]).unwrap();
        let normalizer = Normalizer {
            layout: layout.clone(),
            mean: vec![0.0; 4],
            std: vec![1.0; 4],
        };
        GeMuCoModel::new(
            &layout,
            &["a", "b", "c"],
            &["a", "b", "c"],
            pb_dim,
            &ArchConfig::default(),
            normalizer,
            enumerate_all_masks(3).unwrap(),
            42,
        )
        .unwrap()
    }

    #[test]
    fn shapes_follow_layouts() {
        let m = toy_model(2);
        assert_eq!(m.encoder.spec.input_width(), 4 + 3 + 2);
        assert_eq!(m.encoder.spec.layer_widths[1], 36);
        assert_eq!(m.latent_dim, 4);
        assert_eq!(m.decoder.spec.output_width(), 4);
        m.validate().unwrap();
    }

    #[test]
    fn pb_is_ignored_without_pb_dim() {
        let m = toy_model(0);
        let x = [0.1, 0.2, 0.3, 0.4];
        let mask = MaskVector::ones(3);
        let a = m.encode(&x, &mask, &ParametricBias::zeros(0, "x")).unwrap();
        let b = m.encode(&x, &mask, &ParametricBias::zeros(0, "y")).unwrap();
        assert_eq!(a, b);
        assert!(m
            .encode(&x, &mask, &ParametricBias::zeros(1, "bad"))
            .is_err());
    }

    #[test]
    fn masked_values_do_not_reach_latent() {
        let m = toy_model(2);
        let p = ParametricBias::new(vec![0.3, -0.1], "s");
        let mask = MaskVector::parse("101").unwrap();
        let a = m.encode(&[0.1, 0.2, 0.3, 0.4], &mask, &p).unwrap();
        let b = m.encode(&[0.1, 0.2, -9.0, 0.4], &mask, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_is_decode_of_encode() {
        let m = toy_model(1);
        let p = ParametricBias::new(vec![0.5], "s");
        let mask = MaskVector::parse("110").unwrap();
        let x = [0.3, -0.3, 1.0, 0.0];
        let z = m.encode(&x, &mask, &p).unwrap();
        assert_eq!(m.predict(&x, &mask, &p).unwrap(), m.decode(&z).unwrap());
        let zero = LatentState(vec![0.0; m.latent_dim]);
        assert_eq!(m.decode(&zero).unwrap(), m.decode(&zero).unwrap());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut m = toy_model(2);
        m.pb_table.insert(
            "s".into(),
            ParametricBias::new(vec![0.1 + 0.2, 1.0 / 3.0], "s"),
        );
        let back = GeMuCoModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn raw_jacobian_matches_finite_differences() {
        let mut m = toy_model(1);
        m.normalizer.mean = vec![1.0, -2.0, 0.5, 3.0];
        m.normalizer.std = vec![2.0, 0.5, 4.0, 1.5];
        let p = [0.2];
        let mask = MaskVector::parse("111").unwrap();
        let x = [1.5, -1.0, 2.0, 2.0];
        let j = m.jacobian_raw(&x, &mask, &p, "a", "b").unwrap();
        let h = 1e-5;
        let f = |v: f64| {
            let mut xx = x;
            xx[2] = v;
            let xin = m.normalizer.normalize_in(&m.in_layout, &xx).unwrap();
            let out = m
                .predict(&xin, &mask, &ParametricBias::new(p.to_vec(), "p"))
                .unwrap();
            m.out_to_raw(&out).unwrap()
        };
        let plus = f(x[2] + h);
        let minus = f(x[2] - h);
        for r in 0..2 {
            let fd = (plus[r] - minus[r]) / (2.0 * h);
            assert!(
                (fd - j[(r, 0)]).abs() < 1e-6 * (1.0 + fd.abs()),
                "{fd} vs {}",
                j[(r, 0)]
            );
        }
    }
}
