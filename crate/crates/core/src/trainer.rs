//! Two-stage training: the weak model is trained with cross-entropy, frozen,
//! and its logits cached; the main model is then trained through the product
//! of experts (optionally mixed with its own cross-entropy).

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::biasgen::{DatasetBundle, Example};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec, Objective, Scratch};
use crate::numkernel::{cross_entropy_raw, softmax_into, LogitVector};
use crate::optim::{linear_schedule, AdamParams, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "poe")]
    Poe,
    #[serde(rename = "poe_ce")]
    PoeCe,
}

impl LossMode {
    pub fn needs_weak(self) -> bool {
        !matches!(self, LossMode::Ce)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Ce => "ce",
            LossMode::Poe => "poe",
            LossMode::PoeCe => "poe_ce",
        })
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ce" => Ok(LossMode::Ce),
            "poe" => Ok(LossMode::Poe),
            "poe_ce" | "poe+ce" => Ok(LossMode::PoeCe),
            other => Err(format!("unknown loss mode `{other}` (ce|poe|poe_ce)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    /// Weight of the main model's own cross-entropy in `PoeCe`.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// `None` means 5% of the total number of steps.
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::Ce,
            alpha: 0.3,
            epochs: 10,
            batch_size: 32,
            learning_rate: 5e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            warmup_steps: None,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        for (key, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps.unwrap_or(total_steps / 20)
    }

    /// Reads `<prefix>key` entries on top of `base`.
    pub fn from_kv(kv: &KeyValues, prefix: &str, base: &TrainConfig) -> Result<Self> {
        let key = |k: &str| format!("{prefix}{k}");
        let mut cfg = base.clone();
        if let Some(mode) = kv.raw(&key("loss_mode")) {
            cfg.loss_mode = mode.parse().map_err(|e: String| Error::config(key("loss_mode"), e))?;
        }
        cfg.alpha = kv.get_or(&key("alpha"), cfg.alpha)?;
        cfg.epochs = kv.get_or(&key("epochs"), cfg.epochs)?;
        cfg.batch_size = kv.get_or(&key("batch_size"), cfg.batch_size)?;
        cfg.learning_rate = kv.get_or(&key("learning_rate"), cfg.learning_rate)?;
        cfg.adam_beta1 = kv.get_or(&key("adam_beta1"), cfg.adam_beta1)?;
        cfg.adam_beta2 = kv.get_or(&key("adam_beta2"), cfg.adam_beta2)?;
        cfg.adam_eps = kv.get_or(&key("adam_eps"), cfg.adam_eps)?;
        cfg.weight_decay = kv.get_or(&key("weight_decay"), cfg.weight_decay)?;
        if let Some(w) = kv.raw(&key("warmup_steps")) {
            cfg.warmup_steps = match w {
                "auto" => None,
                n => Some(n.parse().map_err(|_| Error::config(key("warmup_steps"), "expected a count or `auto`"))?),
            };
        }
        cfg.seed = kv.get_or(&key("seed"), cfg.seed)?;
        cfg.shuffle = kv.get_bool(&key("shuffle"), cfg.shuffle)?;
        cfg.validate().map_err(|e| match e {
            Error::InvalidConfig { key: k, reason } => Error::config(key(&k), reason),
            other => other,
        })?;
        Ok(cfg)
    }

    /// Parses a standalone `key = value` file with no section prefix.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let cfg = Self::from_kv(&kv, "", &TrainConfig::default())?;
        kv.reject_unknown()?;
        Ok(cfg)
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Logits of a frozen weak model, keyed by example id.
#[derive(Clone, Debug)]
pub struct FrozenWeakLogits {
    logits: HashMap<u64, LogitVector>,
    source_checksum: String,
}

impl FrozenWeakLogits {
    pub fn from_model<'a>(model: &Model, examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let mut logits = HashMap::new();
        for e in examples {
            logits.insert(e.id, model.forward(&e.features)?);
        }
        Ok(Self {
            logits,
            source_checksum: model.checksum(),
        })
    }

    /// Same logits for every id; a uniform vector reduces PoE to CE.
    pub fn constant<'a>(values: LogitVector, examples: impl IntoIterator<Item = &'a Example>) -> Self {
        Self {
            logits: examples.into_iter().map(|e| (e.id, values.clone())).collect(),
            source_checksum: String::new(),
        }
    }

    pub fn get(&self, id: u64) -> Option<&LogitVector> {
        self.logits.get(&id)
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn source_checksum(&self) -> &str {
        &self.source_checksum
    }
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub final_model: Model,
    pub example_ids: Vec<u64>,
    /// `[epoch][example]` probability of the gold label under the model's own
    /// logits, recorded after each epoch.
    pub per_epoch_gold_prob: Vec<Vec<f64>>,
    /// Mean mini-batch loss per optimizer step.
    pub loss_curve: Vec<f64>,
    pub config: TrainConfig,
    /// Which weak checkpoint fed the PoE (always the final one).
    pub weak_checkpoint: Option<String>,
}

impl TrainRun {
    /// `example_id,epoch,gold_prob` rows, epochs counted from 0.
    pub fn write_dynamics_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::from("example_id,epoch,gold_prob\n");
        for (epoch, row) in self.per_epoch_gold_prob.iter().enumerate() {
            for (id, p) in self.example_ids.iter().zip(row) {
                use std::fmt::Write as _;
                let _ = writeln!(buf, "{id},{epoch},{p}");
            }
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }
}

fn check_data(model: &Model, data: &[Example]) -> Result<()> {
    let spec = model.spec();
    for e in data {
        if let Some(i) = e.features.max_index() {
            if i as usize >= spec.feature_dim {
                return Err(Error::Shape(format!(
                    "example {} uses feature {i}, model dimension is {}",
                    e.id, spec.feature_dim
                )));
            }
        }
        if e.gold.get() >= spec.num_classes {
            return Err(Error::InvalidLabel {
                label: e.gold.get(),
                num_classes: spec.num_classes,
            });
        }
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Mini-batch AdamW training of `model` on `data`.
pub fn train(
    mut model: Model,
    data: &[Example],
    config: &TrainConfig,
    frozen: Option<&FrozenWeakLogits>,
) -> Result<TrainRun> {
    config.validate()?;
    check_data(&model, data)?;
    let k = model.num_classes();

    let weak_rows: Vec<Option<&[f64]>> = if config.loss_mode.needs_weak() {
        let frozen = frozen.ok_or_else(|| {
            Error::config("loss_mode", format!("{} training needs frozen weak logits", config.loss_mode))
        })?;
        data.iter()
            .map(|e| {
                let w = frozen.get(e.id).ok_or(Error::MissingWeakLogits(e.id))?;
                if w.len() != k {
                    return Err(Error::Shape(format!(
                        "weak logits for example {} have {} classes, model has {k}",
                        e.id,
                        w.len()
                    )));
                }
                Ok(Some(w.values()))
            })
            .collect::<Result<_>>()?
    } else {
        vec![None; data.len()]
    };
    let objective_for = |i: usize| match (config.loss_mode, weak_rows[i]) {
        (LossMode::Poe, Some(weak)) => Objective::Poe { weak },
        (LossMode::PoeCe, Some(weak)) => Objective::PoeCe {
            weak,
            alpha: config.alpha,
        },
        _ => Objective::Ce,
    };

    let n = data.len();
    let total = config.total_steps(n);
    let warmup = config.warmup_for(total);
    let decay_mask = model.spec().weight_mask();
    let mut opt = AdamW::new(config.adam(), model.params().len());
    let mut grad = vec![0.0; model.params().len()];
    let mut scratch = Scratch::default();
    let mut loss_curve = Vec::with_capacity(total);
    let mut dynamics = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let order = epoch_order(n, config.seed, epoch, config.shuffle);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &i in batch {
                let e = &data[i];
                loss += model.accumulate_grad(&e.features, e.gold.get(), &objective_for(i), scale, &mut grad, &mut scratch);
            }
            let lr = linear_schedule(config.learning_rate, step, warmup, total);
            opt.step(model.params_mut(), &grad, lr, &decay_mask);
            loss_curve.push(loss * scale);
            step += 1;
        }
        dynamics.push(gold_probs(&model, data, &mut scratch));
    }

    Ok(TrainRun {
        final_model: model,
        example_ids: data.iter().map(|e| e.id).collect(),
        per_epoch_gold_prob: dynamics,
        loss_curve,
        config: config.clone(),
        weak_checkpoint: config.loss_mode.needs_weak().then(|| "final".to_string()),
    })
}

fn gold_probs(model: &Model, data: &[Example], scratch: &mut Scratch) -> Vec<f64> {
    let mut probs = vec![0.0; model.num_classes()];
    data.iter()
        .map(|e| {
            model.forward_into(&e.features, scratch);
            softmax_into(scratch.logits(), &mut probs);
            probs[e.gold.get()]
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub logits: Vec<LogitVector>,
    pub losses: Vec<f64>,
    pub correct: Vec<bool>,
}

impl Predictions {
    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            return 0.0;
        }
        self.correct.iter().filter(|c| **c).count() as f64 / self.correct.len() as f64
    }

    pub fn predicted(&self) -> Vec<usize> {
        self.logits.iter().map(|l| l.argmax()).collect()
    }
}

/// Per-example logits, cross-entropy losses and argmax correctness (ties go
/// to the lowest class index).
pub fn predict_all(model: &Model, data: &[Example]) -> Result<Predictions> {
    check_data(model, data)?;
    let mut scratch = Scratch::default();
    let mut out = Predictions::default();
    for e in data {
        model.forward_into(&e.features, &mut scratch);
        let logits = scratch.logits().to_vec();
        out.losses.push(cross_entropy_raw(&logits, e.gold.get()));
        let z = LogitVector::from_vec_unchecked(logits);
        out.correct.push(z.argmax() == e.gold.get());
        out.logits.push(z);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TwoStageRun {
    pub weak: TrainRun,
    pub frozen: FrozenWeakLogits,
    pub main: TrainRun,
}

/// Trains the weak model with CE, freezes it, caches its logits on every
/// split, then trains the main model against the cached logits.
pub fn run_two_stage(
    weak_spec: &ModelSpec,
    main_spec: &ModelSpec,
    bundle: &DatasetBundle,
    weak_cfg: &TrainConfig,
    main_cfg: &TrainConfig,
) -> Result<TwoStageRun> {
    if weak_cfg.loss_mode != LossMode::Ce {
        return Err(Error::config("weak.loss_mode", "the weak learner is trained with ce"));
    }
    if !main_cfg.loss_mode.needs_weak() {
        return Err(Error::config("main.loss_mode", "the main model is trained with poe or poe_ce"));
    }
    let weak = train(Model::init(weak_spec.clone())?, &bundle.train, weak_cfg, None)?;
    let frozen = FrozenWeakLogits::from_model(&weak.final_model, bundle.all_examples())?;
    let main = train(Model::init(main_spec.clone())?, &bundle.train, main_cfg, Some(&frozen))?;
    Ok(TwoStageRun { weak, frozen, main })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biasgen::Provenance;
    use crate::models::FeatureVector;
    use crate::numkernel::LabelIndex;

    fn toy_separable() -> Vec<Example> {
        // two classes, each marked by its own feature plus a shared one
        [(0u32, 0usize), (1, 1), (0, 0), (1, 1)]
            .iter()
            .enumerate()
            .map(|(i, &(f, y))| Example {
                id: i as u64,
                features: FeatureVector::from_tokens(&[f, 2]),
                gold: LabelIndex::new(y, 2).unwrap(),
                provenance: Provenance::default(),
            })
            .collect()
    }

    fn cfg(mode: LossMode, epochs: usize) -> TrainConfig {
        TrainConfig {
            loss_mode: mode,
            epochs,
            batch_size: 2,
            learning_rate: 0.05,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_toy_is_fit() {
        let data = toy_separable();
        let model = Model::init(ModelSpec::linear(3, 2, 1).unwrap()).unwrap();
        let run = train(model, &data, &cfg(LossMode::Ce, 200), None).unwrap();
        let preds = predict_all(&run.final_model, &data).unwrap();
        assert_eq!(preds.accuracy(), 1.0);
        assert_eq!(run.loss_curve.len(), 400);
        assert_eq!(run.per_epoch_gold_prob.len(), 200);
        assert!(run.per_epoch_gold_prob.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
        assert!(run.weak_checkpoint.is_none());
    }

    #[test]
    fn smoothed_ce_loss_is_non_increasing_on_toy() {
        let data = toy_separable();
        let model = Model::init(ModelSpec::linear(3, 2, 2).unwrap()).unwrap();
        let run = train(model, &data, &cfg(LossMode::Ce, 200), None).unwrap();
        let windows: Vec<f64> = run
            .loss_curve
            .chunks(50)
            .map(|w| w.iter().sum::<f64>() / w.len() as f64)
            .collect();
        for pair in windows.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{windows:?}");
        }
    }

    #[test]
    fn uniform_weak_poe_training_is_bitwise_ce() {
        let data = toy_separable();
        let spec = ModelSpec::mlp(3, 4, 2, 9).unwrap();
        let frozen = FrozenWeakLogits::constant(LogitVector::zeros(2), &data);
        let ce = train(Model::init(spec.clone()).unwrap(), &data, &cfg(LossMode::Ce, 30), None).unwrap();
        let poe = train(Model::init(spec).unwrap(), &data, &cfg(LossMode::Poe, 30), Some(&frozen)).unwrap();
        assert_eq!(ce.final_model.checksum(), poe.final_model.checksum());
    }

    #[test]
    fn poe_ce_with_zero_alpha_is_bitwise_poe() {
        let data = toy_separable();
        let spec = ModelSpec::mlp(3, 4, 2, 9).unwrap();
        let w = LogitVector::new(vec![1.5, -0.5]).unwrap();
        let frozen = FrozenWeakLogits::constant(w, &data);
        let poe = train(Model::init(spec.clone()).unwrap(), &data, &cfg(LossMode::Poe, 20), Some(&frozen)).unwrap();
        let mixed = TrainConfig {
            alpha: 0.0,
            ..cfg(LossMode::PoeCe, 20)
        };
        let poe_ce = train(Model::init(spec).unwrap(), &data, &mixed, Some(&frozen)).unwrap();
        assert_eq!(poe.final_model.checksum(), poe_ce.final_model.checksum());
        assert_eq!(poe_ce.weak_checkpoint.as_deref(), Some("final"));
    }

    #[test]
    fn single_adam_step_matches_manual_update() {
        // Two parameters: linear model with D = 1, K = 2 is 4 parameters, so
        // freeze the setup to make the arithmetic explicit.
        let spec = ModelSpec::linear(1, 2, 0).unwrap();
        let model = Model::from_params(spec, vec![0.5, -0.25, 0.0, 0.0]).unwrap();
        let data = vec![Example {
            id: 0,
            features: FeatureVector::from_tokens(&[0]),
            gold: LabelIndex::new(0, 2).unwrap(),
            provenance: Provenance::default(),
        }];
        let config = TrainConfig {
            epochs: 1,
            batch_size: 1,
            learning_rate: 0.1,
            warmup_steps: Some(0),
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let run = train(model, &data, &config, None).unwrap();
        // logits [0.5, -0.25]; p0 = sigmoid(0.75)
        let p0 = 1.0 / (1.0 + (-0.75f64).exp());
        let g = [p0 - 1.0, 1.0 - p0, p0 - 1.0, 1.0 - p0];
        let init = [0.5, -0.25, 0.0, 0.0];
        let decays = [true, true, false, false];
        // one step, warmup 0, total 1: lr = 0.1 * (1 - 0) / 1
        let lr = 0.1;
        for i in 0..4 {
            let mut want = init[i];
            if decays[i] {
                want -= lr * 0.1 * want;
            }
            want -= lr * g[i] / (g[i].abs() + 1e-8);
            assert!((run.final_model.params()[i] - want).abs() < 1e-15, "param {i}");
        }
    }

    #[test]
    fn missing_weak_logits_reported() {
        let data = toy_separable();
        let frozen = FrozenWeakLogits::constant(LogitVector::zeros(2), &data[..2]);
        let model = Model::init(ModelSpec::linear(3, 2, 0).unwrap()).unwrap();
        let err = train(model.clone(), &data, &cfg(LossMode::Poe, 1), Some(&frozen)).unwrap_err();
        assert!(matches!(err, Error::MissingWeakLogits(2)));
        assert!(matches!(
            train(model, &data, &cfg(LossMode::Poe, 1), None),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn predict_all_edge_cases() {
        let spec = ModelSpec::linear(3, 3, 0).unwrap();
        let model = Model::from_params(spec, vec![0.0; 12]).unwrap();
        let data: Vec<Example> = (0..4)
            .map(|i| Example {
                id: i,
                features: FeatureVector::from_tokens(&[i as u32 % 3]),
                gold: LabelIndex::new(i as usize % 3, 3).unwrap(),
                provenance: Provenance::default(),
            })
            .collect();
        let p = predict_all(&model, &data).unwrap();
        assert!(p.losses.iter().all(|l| (l - 3f64.ln()).abs() < 1e-15));
        // ties resolve to class 0
        assert_eq!(p.correct, vec![true, false, false, true]);
        let empty = predict_all(&model, &[]).unwrap();
        assert!(empty.logits.is_empty() && empty.losses.is_empty() && empty.correct.is_empty());
    }

    #[test]
    fn config_file_parsing() {
        let cfg = TrainConfig::parse("loss_mode = poe_ce\nalpha = 0.5\nepochs = 3\nwarmup_steps = auto\nshuffle = false\n").unwrap();
        assert_eq!(cfg.loss_mode, LossMode::PoeCe);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.shuffle);
        assert!(matches!(TrainConfig::parse("epochs = 0"), Err(Error::InvalidConfig { key, .. }) if key == "epochs"));
        assert!(matches!(TrainConfig::parse("alpha = -1"), Err(Error::InvalidConfig { key, .. }) if key == "alpha"));
        assert!(matches!(TrainConfig::parse("adam_beta1 = 1.0"), Err(Error::InvalidConfig { .. })));
        assert!(matches!(TrainConfig::parse("lr = 1"), Err(Error::InvalidConfig { key, .. }) if key == "lr"));
    }

    #[test]
    fn defaults_follow_reference_optimizer_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!(c.weight_decay, 0.1);
        assert_eq!(c.alpha, 0.3);
        assert_eq!(c.warmup_for(2000), 100);
    }
}
