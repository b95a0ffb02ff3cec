//! Small classifiers over sparse token-bag features.
//!
//! Parameters live in one flat `Vec<f64>` with layout
//! `[W1 row-major, b1, W2 row-major, b2]`:
//!
//! * Linear (`hidden_width == 0`): `W1` is `D x K` (row `i` holds the class
//!   weights of feature `i`), `b1` has `K` entries, no second layer.
//! * MLP: `W1` is `D x H`, `b1` has `H` entries, `W2` is `H x K`, `b2` has
//!   `K` entries. The hidden nonlinearity is `tanh`.
//!
//! Rows are indexed by input feature so a sparse forward pass only touches
//! the rows of active features.

use std::fmt;
use std::io::{BufRead, Write};

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{cross_entropy_raw, softmax_into, LabelIndex, LogitVector};

/// Sparse bag of hashed token features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    indices: Vec<u32>,
    counts: Vec<f64>,
}

impl FeatureVector {
    pub fn new(indices: Vec<u32>, counts: Vec<f64>) -> Result<Self> {
        if indices.len() != counts.len() {
            return Err(Error::Shape(format!(
                "{} indices but {} counts",
                indices.len(),
                counts.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "feature indices must be strictly increasing".into(),
            ));
        }
        if counts.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput("feature counts must be positive".into()));
        }
        Ok(Self { indices, counts })
    }

    /// Builds a bag from raw token ids, merging duplicates.
    pub fn from_tokens(tokens: &[u32]) -> Self {
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        let mut indices = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for t in sorted {
            if indices.last() == Some(&t) {
                *counts.last_mut().unwrap() += 1.0;
            } else {
                indices.push(t);
                counts.push(1.0);
            }
        }
        Self { indices, counts }
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn count_of(&self, index: u32) -> f64 {
        match self.indices.binary_search(&index) {
            Ok(pos) => self.counts[pos],
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, index: u32) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.counts)
            .map(|(&i, &c)| (i as usize, c))
    }

    pub fn max_index(&self) -> Option<u32> {
        self.indices.last().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Linear,
    Mlp,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Linear => "linear",
            Arch::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub feature_dim: usize,
    /// 0 for the linear architecture; the capacity knob otherwise.
    pub hidden_width: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    /// Picks the architecture from the width: 0 means linear.
    pub fn new(feature_dim: usize, hidden_width: usize, num_classes: usize, init_seed: u64) -> Result<Self> {
        let arch = if hidden_width == 0 { Arch::Linear } else { Arch::Mlp };
        let spec = Self {
            arch,
            feature_dim,
            hidden_width,
            num_classes,
            init_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear(feature_dim: usize, num_classes: usize, init_seed: u64) -> Result<Self> {
        Self::new(feature_dim, 0, num_classes, init_seed)
    }

    pub fn mlp(feature_dim: usize, hidden_width: usize, num_classes: usize, init_seed: u64) -> Result<Self> {
        if hidden_width == 0 {
            return Err(Error::config("hidden_width", "an MLP needs at least one hidden unit"));
        }
        Self::new(feature_dim, hidden_width, num_classes, init_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        match (self.arch, self.hidden_width) {
            (Arch::Linear, 0) => Ok(()),
            (Arch::Mlp, h) if h > 0 => Ok(()),
            _ => Err(Error::config(
                "hidden_width",
                "must be 0 exactly when the architecture is linear",
            )),
        }
    }

    /// Width of the first layer's output.
    fn first_width(&self) -> usize {
        match self.arch {
            Arch::Linear => self.num_classes,
            Arch::Mlp => self.hidden_width,
        }
    }

    pub fn param_count(&self) -> usize {
        let first = self.feature_dim * self.first_width() + self.first_width();
        match self.arch {
            Arch::Linear => first,
            Arch::Mlp => first + self.hidden_width * self.num_classes + self.num_classes,
        }
    }

    /// Offsets of the bias blocks, as half-open ranges.
    pub fn bias_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let w1 = self.feature_dim * self.first_width();
        let b1 = w1..w1 + self.first_width();
        match self.arch {
            Arch::Linear => vec![b1],
            Arch::Mlp => {
                let b2_start = b1.end + self.hidden_width * self.num_classes;
                vec![b1, b2_start..b2_start + self.num_classes]
            }
        }
    }

    /// `true` for weight-matrix entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.param_count()];
        for r in self.bias_ranges() {
            mask[r].iter_mut().for_each(|m| *m = false);
        }
        mask
    }
}

/// Loss whose gradient is taken with respect to the main model.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    /// Plain cross-entropy on the model's own logits.
    Ce,
    /// Cross-entropy of the product of experts with frozen weak logits.
    Poe { weak: &'a [f64] },
    /// `PoE + alpha * CE`.
    PoeCe { weak: &'a [f64], alpha: f64 },
}

impl Objective<'_> {
    fn check(&self, num_classes: usize) -> Result<()> {
        match *self {
            Objective::Ce => Ok(()),
            Objective::Poe { weak } => check_weak(weak, num_classes),
            Objective::PoeCe { weak, alpha } => {
                if !(alpha >= 0.0 && alpha.is_finite()) {
                    return Err(Error::config("alpha", format!("must be >= 0, got {alpha}")));
                }
                check_weak(weak, num_classes)
            }
        }
    }

    /// Loss and its gradient with respect to the main model's logits.
    fn output_grad(&self, logits: &[f64], gold: usize, dz: &mut [f64]) -> f64 {
        let k = logits.len();
        match *self {
            Objective::Ce => {
                softmax_into(logits, dz);
                dz[gold] -= 1.0;
                cross_entropy_raw(logits, gold)
            }
            Objective::Poe { weak } => poe_output_grad(logits, weak, gold, dz),
            Objective::PoeCe { weak, alpha } => {
                let loss = poe_output_grad(logits, weak, gold, dz);
                if alpha == 0.0 {
                    return loss;
                }
                let mut ce = vec![0.0; k];
                softmax_into(logits, &mut ce);
                ce[gold] -= 1.0;
                for (d, c) in dz.iter_mut().zip(&ce) {
                    *d += alpha * c;
                }
                loss + alpha * cross_entropy_raw(logits, gold)
            }
        }
    }
}

fn check_weak(weak: &[f64], num_classes: usize) -> Result<()> {
    if weak.len() != num_classes {
        return Err(Error::Shape(format!(
            "frozen weak logits have {} classes, model has {num_classes}",
            weak.len()
        )));
    }
    if weak.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("non-finite frozen weak logit".into()));
    }
    Ok(())
}

fn poe_output_grad(logits: &[f64], weak: &[f64], gold: usize, dz: &mut [f64]) -> f64 {
    let combined: Vec<f64> = logits.iter().zip(weak).map(|(m, w)| m + w).collect();
    softmax_into(&combined, dz);
    dz[gold] -= 1.0;
    cross_entropy_raw(&combined, gold)
}

/// Gradient with the same layout as [`Model::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient(Vec<f64>);

impl Gradient {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Reusable buffers for forward/backward passes.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dz: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    pub(crate) fn logits(&self) -> &[f64] {
        &self.logits
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<f64>,
}

impl Model {
    /// Glorot-uniform weights from `init_seed`, zero biases.
    pub fn init(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = vec![0.0; spec.param_count()];
        let d = spec.feature_dim;
        let first = spec.first_width();
        let s1 = (6.0 / (d + first) as f64).sqrt();
        for p in &mut params[..d * first] {
            *p = rng.gen_range(-s1..s1);
        }
        if spec.arch == Arch::Mlp {
            let (h, k) = (spec.hidden_width, spec.num_classes);
            let s2 = (6.0 / (h + k) as f64).sqrt();
            let start = d * h + h;
            for p in &mut params[start..start + h * k] {
                *p = rng.gen_range(-s2..s2);
            }
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "spec needs {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_input(&self, x: &FeatureVector) -> Result<()> {
        match x.max_index() {
            Some(i) if i as usize >= self.spec.feature_dim => Err(Error::Shape(format!(
                "feature index {i} outside dimension {}",
                self.spec.feature_dim
            ))),
            _ => Ok(()),
        }
    }

    pub fn forward(&self, x: &FeatureVector) -> Result<LogitVector> {
        self.check_input(x)?;
        let mut scratch = Scratch::default();
        self.forward_into(x, &mut scratch);
        Ok(LogitVector::from_vec_unchecked(scratch.logits))
    }

    /// Forward pass into `scratch.logits` (and `scratch.hidden` for the MLP).
    /// Indices must already be in range.
    pub(crate) fn forward_into(&self, x: &FeatureVector, scratch: &mut Scratch) {
        let spec = &self.spec;
        let (d, k) = (spec.feature_dim, spec.num_classes);
        let first = spec.first_width();
        let b1 = &self.params[d * first..d * first + first];

        let layer1 = if spec.arch == Arch::Linear {
            &mut scratch.logits
        } else {
            &mut scratch.hidden
        };
        layer1.clear();
        layer1.extend_from_slice(b1);
        for (i, c) in x.iter() {
            let row = &self.params[i * first..(i + 1) * first];
            for (a, w) in layer1.iter_mut().zip(row) {
                *a += c * w;
            }
        }
        if spec.arch == Arch::Linear {
            return;
        }

        let h = spec.hidden_width;
        for a in scratch.hidden.iter_mut() {
            *a = a.tanh();
        }
        let w2_start = d * h + h;
        let w2 = &self.params[w2_start..w2_start + h * k];
        let b2 = &self.params[w2_start + h * k..];
        scratch.logits.clear();
        scratch.logits.extend_from_slice(b2);
        for (j, &a) in scratch.hidden.iter().enumerate() {
            let row = &w2[j * k..(j + 1) * k];
            for (z, w) in scratch.logits.iter_mut().zip(row) {
                *z += a * w;
            }
        }
    }

    /// Adds `scale * dL/dθ` into `grad` and returns the loss.
    /// Inputs must already be validated.
    pub(crate) fn accumulate_grad(
        &self,
        x: &FeatureVector,
        gold: usize,
        objective: &Objective<'_>,
        scale: f64,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        self.forward_into(x, scratch);
        let spec = &self.spec;
        let (d, k) = (spec.feature_dim, spec.num_classes);
        scratch.dz.resize(k, 0.0);
        let loss = objective.output_grad(&scratch.logits, gold, &mut scratch.dz);

        match spec.arch {
            Arch::Linear => {
                let b = d * k;
                for (j, g) in scratch.dz.iter().enumerate() {
                    grad[b + j] += scale * g;
                }
                for (i, c) in x.iter() {
                    let row = &mut grad[i * k..(i + 1) * k];
                    for (r, g) in row.iter_mut().zip(&scratch.dz) {
                        *r += scale * c * g;
                    }
                }
            }
            Arch::Mlp => {
                let h = spec.hidden_width;
                let w2_start = d * h + h;
                let b2_start = w2_start + h * k;
                scratch.dhidden.clear();
                scratch.dhidden.resize(h, 0.0);
                for (j, &a) in scratch.hidden.iter().enumerate() {
                    let wrow = &self.params[w2_start + j * k..w2_start + (j + 1) * k];
                    let grow = &mut grad[w2_start + j * k..w2_start + (j + 1) * k];
                    let mut back = 0.0;
                    for ((gw, w), g) in grow.iter_mut().zip(wrow).zip(&scratch.dz) {
                        *gw += scale * a * g;
                        back += w * g;
                    }
                    scratch.dhidden[j] = back * (1.0 - a * a);
                }
                for (j, g) in scratch.dz.iter().enumerate() {
                    grad[b2_start + j] += scale * g;
                }
                let b1 = d * h;
                for (j, g) in scratch.dhidden.iter().enumerate() {
                    grad[b1 + j] += scale * g;
                }
                for (i, c) in x.iter() {
                    let row = &mut grad[i * h..(i + 1) * h];
                    for (r, g) in row.iter_mut().zip(&scratch.dhidden) {
                        *r += scale * c * g;
                    }
                }
            }
        }
        loss
    }

    fn grad_with(&self, x: &FeatureVector, gold: LabelIndex, objective: Objective<'_>) -> Result<(f64, Gradient)> {
        self.check_input(x)?;
        let k = self.spec.num_classes;
        if gold.get() >= k {
            return Err(Error::InvalidLabel {
                label: gold.get(),
                num_classes: k,
            });
        }
        objective.check(k)?;
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.accumulate_grad(x, gold.get(), &objective, 1.0, &mut grad, &mut Scratch::default());
        Ok((loss, Gradient(grad)))
    }

    /// Cross-entropy loss and gradient.
    pub fn grad_ce(&self, x: &FeatureVector, gold: LabelIndex) -> Result<(f64, Gradient)> {
        self.grad_with(x, gold, Objective::Ce)
    }

    /// PoE cross-entropy with frozen weak logits; only this model receives gradient.
    pub fn grad_poe(&self, x: &FeatureVector, gold: LabelIndex, frozen_weak: &LogitVector) -> Result<(f64, Gradient)> {
        self.grad_with(x, gold, Objective::Poe { weak: frozen_weak.values() })
    }

    /// `PoE + alpha * CE`; `alpha = 0` is exactly [`Model::grad_poe`].
    pub fn grad_multiloss(
        &self,
        x: &FeatureVector,
        gold: LabelIndex,
        frozen_weak: &LogitVector,
        alpha: f64,
    ) -> Result<(f64, Gradient)> {
        self.grad_with(
            x,
            gold,
            Objective::PoeCe {
                weak: frozen_weak.values(),
                alpha,
            },
        )
    }

    /// Analytic gradient for an arbitrary objective.
    pub fn grad(&self, x: &FeatureVector, gold: LabelIndex, objective: Objective<'_>) -> Result<(f64, Gradient)> {
        self.grad_with(x, gold, objective)
    }

    /// SHA-256 over the spec and the parameter bit patterns.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(self.spec_line().as_bytes());
        for p in &self.params {
            hasher.update(p.to_bits().to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn spec_line(&self) -> String {
        format!(
            "arch={} feature_dim={} hidden_width={} num_classes={} init_seed={}",
            self.spec.arch,
            self.spec.feature_dim,
            self.spec.hidden_width,
            self.spec.num_classes,
            self.spec.init_seed
        )
    }

    /// Text dump: a version line, the spec, the parameter count, then one
    /// parameter per line in shortest round-trip decimal form.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{MODEL_MAGIC}")?;
        writeln!(out, "{}", self.spec_line())?;
        writeln!(out, "params={}", self.params.len())?;
        for p in &self.params {
            writeln!(out, "{p:?}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::parse(0, format!("unexpected end of file, expected {what}"))),
            }
        };
        let (n, magic) = next("version line")?;
        if magic.trim() != MODEL_MAGIC {
            return Err(Error::parse(n, format!("expected `{MODEL_MAGIC}`")));
        }
        let (n, spec_line) = next("spec line")?;
        let spec = parse_spec_line(&spec_line).map_err(|r| Error::parse(n, r))?;
        let (n, count_line) = next("parameter count")?;
        let count: usize = count_line
            .trim()
            .strip_prefix("params=")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::parse(n, "expected `params=<count>`"))?;
        if count != spec.param_count() {
            return Err(Error::parse(
                n,
                format!("spec needs {} parameters, header says {count}", spec.param_count()),
            ));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, l) = next("parameter")?;
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|_| Error::parse(n, format!("bad parameter `{l}`")))?;
            params.push(v);
        }
        Model::from_params(spec, params)
    }
}

pub const MODEL_MAGIC: &str = "poe-model v1";

fn parse_spec_line(line: &str) -> std::result::Result<ModelSpec, String> {
    let mut arch = None;
    let (mut d, mut h, mut k, mut seed) = (None, None, None, None);
    for field in line.split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed field `{field}`"))?;
        let num = || value.parse::<u64>().map_err(|_| format!("bad value for {key}"));
        match key {
            "arch" => {
                arch = Some(match value {
                    "linear" => Arch::Linear,
                    "mlp" => Arch::Mlp,
                    other => return Err(format!("unknown arch `{other}`")),
                })
            }
            "feature_dim" => d = Some(num()? as usize),
            "hidden_width" => h = Some(num()? as usize),
            "num_classes" => k = Some(num()? as usize),
            "init_seed" => seed = Some(num()?),
            other => return Err(format!("unknown spec field `{other}`")),
        }
    }
    let spec = ModelSpec {
        arch: arch.ok_or("missing arch")?,
        feature_dim: d.ok_or("missing feature_dim")?,
        hidden_width: h.ok_or("missing hidden_width")?,
        num_classes: k.ok_or("missing num_classes")?,
        init_seed: seed.ok_or("missing init_seed")?,
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error over entries whose magnitude exceeds the floor.
    pub max_rel_error: f64,
    /// Max absolute error over the remaining near-zero entries.
    pub max_abs_error_near_zero: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_error < rel_tol && self.max_abs_error_near_zero < abs_tol
    }
}

/// Gradient magnitude below which entries are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Bits of precision for the finite-difference reference. At epsilon 1e-5 a
/// one-ulp error in an f64 loss of order 1 already shifts the quotient by
/// about 2e-11, which exceeds the relative tolerance on gradient entries
/// near 1e-5; evaluating the loss at 128 bits removes that floor.
const REFERENCE_BITS: usize = 128;

struct ReferenceLoss {
    consts: Consts,
    /// Pre-activation and tanh of each hidden unit at the first evaluation.
    hidden_base: Vec<(BigFloat, BigFloat)>,
}

impl ReferenceLoss {
    fn new() -> Result<Self> {
        let consts = Consts::new().map_err(|e| Error::InvalidInput(format!("reference arithmetic unavailable: {e:?}")))?;
        Ok(Self { consts, hidden_base: Vec::new() })
    }

    fn eval(&mut self, model: &Model, x: &FeatureVector, gold: usize, objective: &Objective<'_>) -> BigFloat {
        const P: usize = REFERENCE_BITS;
        const RM: RoundingMode = RoundingMode::ToEven;
        let big = |v: f64| BigFloat::from_f64(v, P);
        let spec = &model.spec;
        let (d, k) = (spec.feature_dim, spec.num_classes);
        let first = spec.first_width();
        let params = &model.params;

        let mut layer1: Vec<BigFloat> = params[d * first..d * first + first].iter().map(|&b| big(b)).collect();
        for (i, c) in x.iter() {
            for (a, &w) in layer1.iter_mut().zip(&params[i * first..(i + 1) * first]) {
                *a = a.add(&big(c).mul(&big(w), P, RM), P, RM);
            }
        }
        let logits = if spec.arch == Arch::Linear {
            layer1
        } else {
            let h = spec.hidden_width;
            if self.hidden_base.is_empty() {
                self.hidden_base = layer1.iter().map(|a| (a.clone(), a.tanh(P, RM, &mut self.consts))).collect();
            }
            // a single perturbation moves at most one unit off its base value
            let hidden: Vec<BigFloat> = layer1
                .iter()
                .zip(&self.hidden_base)
                .map(|(a, (pre, act))| if a.cmp(pre) == Some(0) { act.clone() } else { a.tanh(P, RM, &mut self.consts) })
                .collect();
            let w2_start = d * h + h;
            let mut z: Vec<BigFloat> = params[w2_start + h * k..].iter().map(|&b| big(b)).collect();
            for (j, a) in hidden.iter().enumerate() {
                for (zc, &w) in z.iter_mut().zip(&params[w2_start + j * k..w2_start + (j + 1) * k]) {
                    *zc = zc.add(&a.mul(&big(w), P, RM), P, RM);
                }
            }
            z
        };

        let mut nll = |z: &[BigFloat]| -> BigFloat {
            let mut sum = big(0.0);
            for v in z {
                sum = sum.add(&v.exp(P, RM, &mut self.consts), P, RM);
            }
            sum.ln(P, RM, &mut self.consts).sub(&z[gold], P, RM)
        };
        let combined = |weak: &[f64]| -> Vec<BigFloat> {
            logits.iter().zip(weak).map(|(z, &w)| z.add(&big(w), P, RM)).collect()
        };
        match *objective {
            Objective::Ce => nll(&logits),
            Objective::Poe { weak } => nll(&combined(weak)),
            Objective::PoeCe { weak, alpha } => {
                let poe = nll(&combined(weak));
                poe.add(&big(alpha).mul(&nll(&logits), P, RM), P, RM)
            }
        }
    }
}

fn big_to_f64(v: &BigFloat, consts: &mut Consts) -> f64 {
    v.format(Radix::Dec, RoundingMode::ToEven, consts)
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(f64::NAN)
}

/// Compares the analytic gradient of `objective` against central finite
/// differences over every parameter. The differenced losses are evaluated in
/// extended precision so the comparison measures the gradient, not f64
/// roundoff in the loss.
pub fn grad_check(
    model: &Model,
    x: &FeatureVector,
    gold: LabelIndex,
    objective: Objective<'_>,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, analytic) = model.grad(x, gold, objective)?;
    let mut reference = ReferenceLoss::new()?;
    reference.eval(model, x, gold.get(), &objective);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error_near_zero: 0.0,
        checked: 0,
    };
    let first = model.spec.first_width();
    let first_layer = model.spec.feature_dim * first;
    for (idx, &a) in analytic.values().iter().enumerate() {
        // rows of inactive features are never read, so both sides agree exactly
        let numeric = if idx < first_layer && !x.contains((idx / first) as u32) {
            0.0
        } else {
            let orig = probe.params[idx];
            let (up, down) = (orig + epsilon, orig - epsilon);
            probe.params[idx] = up;
            let plus = reference.eval(&probe, x, gold.get(), &objective);
            probe.params[idx] = down;
            let minus = reference.eval(&probe, x, gold.get(), &objective);
            probe.params[idx] = orig;
            // divide by the step actually taken after rounding to f64
            let (p, rm) = (REFERENCE_BITS, RoundingMode::ToEven);
            let step = BigFloat::from_f64(up, p).sub(&BigFloat::from_f64(down, p), p, rm);
            big_to_f64(&plus.sub(&minus, p, rm).div(&step, p, rm), &mut reference.consts)
        };

        let err = (a - numeric).abs();
        let magnitude = a.abs().max(numeric.abs());
        if magnitude > GRAD_CHECK_FLOOR {
            report.max_rel_error = report.max_rel_error.max(err / magnitude);
        } else {
            report.max_abs_error_near_zero = report.max_abs_error_near_zero.max(err);
        }
        report.checked += 1;
    }
    Ok(report)
}
