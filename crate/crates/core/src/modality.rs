//! Channel-group layouts, masks and normalization.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub dim: usize,
}

/// Ordered sensor/actuator groups making up the flattened vector `x`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Group>", into = "Vec<Group>")]
pub struct ModalityLayout {
    groups: Vec<Group>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<Group>> for ModalityLayout {
    type Error = Error;

    fn try_from(groups: Vec<Group>) -> Result<Self> {
        Self::new(groups.into_iter().map(|g| (g.name, g.dim)))
    }
}

impl From<ModalityLayout> for Vec<Group> {
    fn from(l: ModalityLayout) -> Self {
        l.groups
    }
}

impl ModalityLayout {
    pub fn new<I, S>(groups: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let groups: Vec<Group> = groups
            .into_iter()
            .map(|(name, dim)| Group {
                name: name.into(),
                dim,
            })
            .collect();
        if groups.is_empty() {
            return Err(Error::InvalidConfig(
                "layout needs at least one group".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for g in &groups {
            if g.dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "group `{}` has zero dim",
                    g.name
                )));
            }
            if !seen.insert(g.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate group `{}`",
                    g.name
                )));
            }
        }
        let mut offsets = Vec::with_capacity(groups.len());
        let mut acc = 0;
        for g in &groups {
            offsets.push(acc);
            acc += g.dim;
        }
        Ok(Self { groups, offsets })
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// `N_sensor`.
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn total_dim(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn range(&self, group: usize) -> std::ops::Range<usize> {
        let o = self.offsets[group];
        o..o + self.groups[group].dim
    }

    pub fn range_of(&self, name: &str) -> Result<std::ops::Range<usize>> {
        Ok(self.range(self.require(name)?))
    }

    /// Group index owning each scalar channel.
    pub fn channel_groups(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| std::iter::repeat_n(i, g.dim))
            .collect()
    }

    /// Human-readable scalar channel names, e.g. `theta_0`.
    pub fn channel_names(&self) -> Vec<String> {
        self.groups
            .iter()
            .flat_map(|g| (0..g.dim).map(move |i| format!("{}_{}", g.name, i)))
            .collect()
    }

    /// Layout made of the named groups, in this layout's order.
    pub fn subset<'a, I>(&self, names: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let wanted: BTreeSet<&str> = names.into_iter().collect();
        for w in &wanted {
            self.require(w)?;
        }
        Self::new(
            self.groups
                .iter()
                .filter(|g| wanted.contains(g.name.as_str()))
                .map(|g| (g.name.clone(), g.dim)),
        )
    }

    /// Gathers the groups of `self` out of a vector laid out by `source`.
    pub fn gather(&self, source: &ModalityLayout, x: &[f64]) -> Result<Vec<f64>> {
        check_len("gather source vector", source.total_dim(), x.len())?;
        let mut out = Vec::with_capacity(self.total_dim());
        for g in &self.groups {
            let r = source.range_of(&g.name)?;
            check_len("gather group dim", g.dim, r.len())?;
            out.extend_from_slice(&x[r]);
        }
        Ok(out)
    }

    /// Writes the groups of `self` (values in `x`) into `target`, laid out by
    /// `target_layout`.
    pub fn scatter(
        &self,
        x: &[f64],
        target_layout: &ModalityLayout,
        target: &mut [f64],
    ) -> Result<()> {
        check_len("scatter vector", self.total_dim(), x.len())?;
        check_len("scatter target", target_layout.total_dim(), target.len())?;
        for (i, g) in self.groups.iter().enumerate() {
            let r = target_layout.range_of(&g.name)?;
            target[r].copy_from_slice(&x[self.range(i)]);
        }
        Ok(())
    }

    /// Per-group flags of `self`, read from flags over `source`.
    pub fn gather_flags(&self, source: &ModalityLayout, flags: &[bool]) -> Result<Vec<bool>> {
        check_len("gather flags", source.n_groups(), flags.len())?;
        self.groups
            .iter()
            .map(|g| source.require(&g.name).map(|i| flags[i]))
            .collect()
    }
}

/// One bit per group; `true` means the group is visible.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaskVector(Vec<bool>);

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&b| !b)
    }

    pub fn visible(&self, group: usize) -> bool {
        self.0[group]
    }

    pub fn count_visible(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }

    /// True when every group visible in `self` is visible in `other`.
    pub fn is_subset_of(&self, other: &MaskVector) -> bool {
        self.0.iter().zip(&other.0).all(|(&a, &b)| !a || b)
    }

    /// Parses strings like `"1101"`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, ',' | ' ' | '(' | ')'))
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::Parse(format!("invalid mask character `{other}`"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if bits.is_empty() {
            return Err(Error::Parse("empty mask".into()));
        }
        Ok(Self(bits))
    }
}

impl fmt::Display for MaskVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl TryFrom<String> for MaskVector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<MaskVector> for String {
    fn from(m: MaskVector) -> Self {
        m.to_string()
    }
}

/// Deduplicated set of nonzero masks over one layout.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<MaskVector>", into = "Vec<MaskVector>")]
pub struct MaskSet(Vec<MaskVector>);

impl TryFrom<Vec<MaskVector>> for MaskSet {
    type Error = Error;

    fn try_from(masks: Vec<MaskVector>) -> Result<Self> {
        let mut set = MaskSet::default();
        for m in masks {
            set.insert(m)?;
        }
        Ok(set)
    }
}

impl From<MaskSet> for Vec<MaskVector> {
    fn from(s: MaskSet) -> Self {
        s.0
    }
}

impl MaskSet {
    /// Inserts `m`, ignoring duplicates. Rejects the all-zero mask and masks
    /// whose length disagrees with existing members.
    pub fn insert(&mut self, m: MaskVector) -> Result<bool> {
        if m.is_zero() {
            return Err(Error::InvalidConfig("all-zero mask".into()));
        }
        if let Some(first) = self.0.first() {
            check_len("mask length", first.len(), m.len())?;
        }
        if self.0.contains(&m) {
            return Ok(false);
        }
        self.0.push(m);
        Ok(true)
    }

    pub fn contains(&self, m: &MaskVector) -> bool {
        self.0.contains(m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MaskVector> {
        self.0.iter()
    }

    pub fn is_subset_of(&self, other: &MaskSet) -> bool {
        self.0.iter().all(|m| other.contains(m))
    }
}

impl<'a> IntoIterator for &'a MaskSet {
    type Item = &'a MaskVector;
    type IntoIter = std::slice::Iter<'a, MaskVector>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Every nonzero mask over `n` groups (`M_all`), `2^n - 1` members.
pub fn enumerate_all_masks(n: usize) -> Result<MaskSet> {
    if !(1..=16).contains(&n) {
        return Err(Error::InvalidConfig(format!(
            "mask enumeration supports 1..=16 groups, got {n}"
        )));
    }
    let masks = (1u32..(1u32 << n))
        .map(|code| MaskVector((0..n).map(|i| code & (1 << (n - 1 - i)) != 0).collect()))
        .collect();
    Ok(MaskSet(masks))
}

/// Zeroes the scalar entries of every hidden group.
pub fn apply_mask(layout: &ModalityLayout, x: &[f64], m: &MaskVector) -> Result<Vec<f64>> {
    check_len("masked vector", layout.total_dim(), x.len())?;
    check_len("mask bits", layout.n_groups(), m.len())?;
    let mut out = x.to_vec();
    apply_mask_in_place(layout, &mut out, m);
    Ok(out)
}

pub(crate) fn apply_mask_in_place(layout: &ModalityLayout, x: &mut [f64], m: &MaskVector) {
    for g in 0..layout.n_groups() {
        if !m.visible(g) {
            x[layout.range(g)].fill(0.0);
        }
    }
}

/// Per-channel affine standardization over a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub layout: ModalityLayout,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits statistics over the available groups of each sample.
    pub fn fit<'a, I>(layout: &ModalityLayout, samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [bool])> + Clone,
    {
        let dim = layout.total_dim();
        let groups = layout.channel_groups();
        let mut count = vec![0usize; dim];
        let mut sum = vec![0.0; dim];
        let mut any = false;
        for (values, avail) in samples.clone() {
            any = true;
            check_len("normalizer sample", dim, values.len())?;
            check_len("normalizer availability", layout.n_groups(), avail.len())?;
            for c in 0..dim {
                if avail[groups[c]] {
                    count[c] += 1;
                    sum[c] += values[c];
                }
            }
        }
        if !any {
            return Err(Error::Empty("normalizer dataset".into()));
        }
        let names = layout.channel_names();
        let mut mean = vec![0.0; dim];
        for c in 0..dim {
            if count[c] == 0 {
                return Err(Error::UnobservedChannel(names[c].clone()));
            }
            mean[c] = sum[c] / count[c] as f64;
        }
        // second pass keeps the variance numerically stable
        let mut sq = vec![0.0; dim];
        for (values, avail) in samples {
            for c in 0..dim {
                if avail[groups[c]] {
                    let d = values[c] - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self {
            layout: layout.clone(),
            mean,
            std,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("normalize", self.dim(), x.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("denormalize", self.dim(), x.len())?;
        Ok(x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    /// Normalizes a vector laid out by `sub` (a subset of this normalizer's layout).
    pub fn normalize_in(&self, sub: &ModalityLayout, x: &[f64]) -> Result<Vec<f64>> {
        let (mean, std) = self.stats_for(sub)?;
        check_len("normalize_in", mean.len(), x.len())?;
        Ok(x.iter()
            .zip(mean.iter().zip(&std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize_in(&self, sub: &ModalityLayout, x: &[f64]) -> Result<Vec<f64>> {
        let (mean, std) = self.stats_for(sub)?;
        check_len("denormalize_in", mean.len(), x.len())?;
        Ok(x.iter()
            .zip(mean.iter().zip(&std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }

    /// Mean and std vectors for the groups of `sub`.
    pub fn stats_for(&self, sub: &ModalityLayout) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            sub.gather(&self.layout, &self.mean)?,
            sub.gather(&self.layout, &self.std)?,
        ))
    }
}
