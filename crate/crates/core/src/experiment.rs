//! Experiment orchestration: one seed of the full pipeline (dataset, weak
//! model, CE / PoE / PoE+CE main models, metrics, analyses) and sweeps of a
//! single knob over many seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    self, bias_report, data_map_csv, data_map_from_dynamics, default_entropy_threshold, loss_correlation,
    project_regimes, region_group_overlap, sweep_aggregate, BiasReport, OverlapSummary,
    RegimeProjection, SweepPoint, TrendSummary,
};
use crate::biasgen::{self, bundle_stats, generate, DatasetBundle, GenSpec, SignalKind, Split, SplitStats};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::models::{Model, ModelSpec};
use crate::trainer::{predict_all, train, FrozenWeakLogits, LossMode, TrainConfig, TrainRun};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Weak,
    CeMain,
    PoeMain,
    PoeCeMain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Weak, Variant::CeMain, Variant::PoeMain, Variant::PoeCeMain];
    pub const MAINS: [Variant; 3] = [Variant::CeMain, Variant::PoeMain, Variant::PoeCeMain];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Weak => "weak",
            Variant::CeMain => "ce_main",
            Variant::PoeMain => "poe_main",
            Variant::PoeCeMain => "poe_ce_main",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    PCheat,
    BiasRho,
    Alpha,
    WeakWidth,
    MainWidth,
    SignalStrength,
    TrainSize,
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Knob::PCheat => "p_cheat",
            Knob::BiasRho => "bias_rho",
            Knob::Alpha => "alpha",
            Knob::WeakWidth => "weak_width",
            Knob::MainWidth => "main_width",
            Knob::SignalStrength => "signal_strength",
            Knob::TrainSize => "train_size",
        }
    }

    /// Which main variant a trend over this knob is judged on.
    pub fn focus(self) -> Variant {
        match self {
            Knob::Alpha => Variant::PoeCeMain,
            _ => Variant::PoeMain,
        }
    }
}

impl std::str::FromStr for Knob {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            Knob::PCheat,
            Knob::BiasRho,
            Knob::Alpha,
            Knob::WeakWidth,
            Knob::MainWidth,
            Knob::SignalStrength,
            Knob::TrainSize,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown sweep axis `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxis {
    pub knob: Knob,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `gen.seed` is replaced per seed by the derived data seed.
    pub gen: GenSpec,
    pub weak_width: usize,
    pub main_width: usize,
    pub weak_train: TrainConfig,
    /// Shared by all main variants; `loss_mode` is set per variant.
    pub main_train: TrainConfig,
    pub sweep: Option<SweepAxis>,
    pub seeds: usize,
    pub base_seed: u64,
    pub out: PathBuf,
    pub entropy_threshold: Option<f64>,
    pub top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            gen: GenSpec {
                signal_strength: 0.65,
                tokens_per_example: 4,
                ..GenSpec::default()
            },
            weak_width: 0,
            main_width: 64,
            weak_train: TrainConfig {
                epochs: 6,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            main_train: TrainConfig {
                epochs: 30,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            sweep: None,
            seeds: 5,
            base_seed: 0,
            out: PathBuf::from("out"),
            entropy_threshold: None,
            top_k: 1000,
        }
    }
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { key, reason } => Error::config(format!("{prefix}{key}"), reason),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Reads every known key over the defaults and rejects the rest.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        let g = &mut cfg.gen;
        g.num_classes = kv.get_or("gen.num_classes", g.num_classes)?;
        g.vocab_size = kv.get_or("gen.vocab_size", g.vocab_size)?;
        g.feature_dim = kv.get_or("gen.feature_dim", g.feature_dim)?;
        g.tokens_per_example = kv.get_or("gen.tokens_per_example", g.tokens_per_example)?;
        g.signal_strength = kv.get_or("gen.signal_strength", g.signal_strength)?;
        if let Some(s) = kv.raw("gen.signal") {
            g.signal = s.parse::<SignalKind>().map_err(|e| Error::config("gen.signal", e))?;
        }
        g.p_cheat = kv.get_or("gen.p_cheat", g.p_cheat)?;
        g.bias_rho = kv.get_or("gen.bias_rho", g.bias_rho)?;
        g.train_size = kv.get_or("gen.train_size", g.train_size)?;
        g.eval_size = kv.get_or("gen.eval_size", g.eval_size)?;
        for key in ["gen.seed", "weak.seed", "main.seed"] {
            if kv.raw(key).is_some() {
                return Err(Error::config(key, "seeds are derived from the top-level `seed`"));
            }
        }
        for key in ["weak.loss_mode", "main.loss_mode"] {
            if kv.raw(key).is_some() {
                return Err(Error::config(key, "fixed by the pipeline (weak: ce; main: one run per mode)"));
            }
        }
        cfg.weak_width = kv.get_or("weak.hidden_width", cfg.weak_width)?;
        cfg.main_width = kv.get_or("main.hidden_width", cfg.main_width)?;
        cfg.weak_train = TrainConfig::from_kv(kv, "weak.", &cfg.weak_train)?;
        cfg.main_train = TrainConfig::from_kv(kv, "main.", &cfg.main_train)?;
        if let Some(axis) = kv.raw("sweep.axis") {
            let knob: Knob = axis.parse().map_err(|e: String| Error::config("sweep.axis", e))?;
            let values = kv
                .get_list::<f64>("sweep.values")?
                .ok_or_else(|| Error::config("sweep.values", "required when sweep.axis is set"))?;
            cfg.sweep = Some(SweepAxis { knob, values });
        } else if kv.raw("sweep.values").is_some() {
            return Err(Error::config("sweep.values", "set without sweep.axis"));
        }
        cfg.seeds = kv.get_or("seeds", cfg.seeds)?;
        cfg.base_seed = kv.get_or("seed", cfg.base_seed)?;
        if let Some(out) = kv.raw("out") {
            cfg.out = PathBuf::from(out);
        }
        cfg.entropy_threshold = kv.get("analysis.entropy_threshold")?;
        cfg.top_k = kv.get_or("analysis.top_k", cfg.top_k)?;
        kv.reject_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate().map_err(|e| prefixed("gen.", e))?;
        self.weak_train.validate().map_err(|e| prefixed("weak.", e))?;
        self.main_train.validate().map_err(|e| prefixed("main.", e))?;
        if self.seeds == 0 {
            return Err(Error::config("seeds", "must be at least 1"));
        }
        if let Some(t) = self.entropy_threshold {
            let max = (self.gen.num_classes as f64).ln();
            if !(t > 0.0 && t < max) {
                return Err(Error::config("analysis.entropy_threshold", format!("must lie in (0, {max})")));
            }
        }
        if let Some(axis) = &self.sweep {
            if axis.values.is_empty() {
                return Err(Error::config("sweep.values", "must list at least one value"));
            }
            for &v in &axis.values {
                self.with_knob(axis.knob, v)?;
            }
        }
        Ok(())
    }

    pub fn threshold(&self) -> f64 {
        self.entropy_threshold
            .unwrap_or_else(|| default_entropy_threshold(self.gen.num_classes))
    }

    /// A copy with `knob` set to `value`, validated.
    pub fn with_knob(&self, knob: Knob, value: f64) -> Result<Self> {
        let mut cfg = self.clone();
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::config("sweep.values", format!("{} needs whole numbers, got {v}", knob.name())))
            }
        };
        match knob {
            Knob::PCheat => cfg.gen.p_cheat = value,
            Knob::BiasRho => cfg.gen.bias_rho = value,
            Knob::Alpha => cfg.main_train.alpha = value,
            Knob::WeakWidth => cfg.weak_width = count(value)?,
            Knob::MainWidth => cfg.main_width = count(value)?,
            Knob::SignalStrength => cfg.gen.signal_strength = value,
            Knob::TrainSize => cfg.gen.train_size = count(value)?,
        }
        cfg.sweep = None;
        cfg.gen.validate().map_err(|e| prefixed("gen.", e))?;
        cfg.main_train.validate().map_err(|e| prefixed("main.", e))?;
        Ok(cfg)
    }

    /// Seeds for each random component of seed index `index`.
    pub fn seeds_for(&self, index: usize) -> RunSeeds {
        let s = |role: u64| derive_seed(self.base_seed, index as u64, role);
        RunSeeds {
            data: s(0),
            weak_init: s(1),
            weak_shuffle: s(2),
            main_init: s(3),
            main_shuffle: s(4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RunSeeds {
    pub data: u64,
    pub weak_init: u64,
    pub weak_shuffle: u64,
    pub main_init: u64,
    pub main_shuffle: u64,
}

/// SplitMix64 finalizer over (base, index, role).
pub fn derive_seed(base: u64, index: u64, role: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(role.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitAccuracy {
    pub train: f64,
    pub eval_clean: f64,
    pub eval_anti: f64,
}

impl SplitAccuracy {
    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::EvalClean => self.eval_clean,
            Split::EvalAnti => self.eval_anti,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub seed_index: usize,
    pub seeds: RunSeeds,
    pub genspec: String,
    pub weak_arch: String,
    pub main_arch: String,
    pub alpha: f64,
    pub weak_checkpoint: String,
    pub dataset: Vec<SplitStats>,
    pub accuracy: BTreeMap<Variant, SplitAccuracy>,
    /// Pearson correlation of each main model's eval_clean losses with the
    /// weak model's; `None` when undefined.
    pub loss_correlation: BTreeMap<Variant, Option<f64>>,
    pub checksums: BTreeMap<Variant, String>,
}

impl RunMetrics {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Everything produced by one seed of the pipeline.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub bundle: DatasetBundle,
    pub weak: TrainRun,
    pub frozen: FrozenWeakLogits,
    pub mains: Vec<(Variant, TrainRun)>,
    pub metrics: RunMetrics,
}

impl RunOutput {
    pub fn model(&self, variant: Variant) -> &Model {
        match variant {
            Variant::Weak => &self.weak.final_model,
            v => &self.mains.iter().find(|(m, _)| *m == v).expect("all mains are trained").1.final_model,
        }
    }

    pub fn run(&self, variant: Variant) -> &TrainRun {
        match variant {
            Variant::Weak => &self.weak,
            v => &self.mains.iter().find(|(m, _)| *m == v).expect("all mains are trained").1,
        }
    }
}

pub fn generate_for(cfg: &ExperimentConfig, index: usize) -> Result<DatasetBundle> {
    let spec = GenSpec {
        seed: cfg.seeds_for(index).data,
        ..cfg.gen.clone()
    };
    generate(&spec)
}

/// Runs seed `index`: generate, train the weak model with CE, freeze it,
/// then train the three main variants from the same initialization and
/// shuffling seeds.
pub fn run_seed(cfg: &ExperimentConfig, index: usize) -> Result<RunOutput> {
    let bundle = generate_for(cfg, index)?;
    run_on_bundle(cfg, index, bundle)
}

pub fn run_on_bundle(cfg: &ExperimentConfig, index: usize, bundle: DatasetBundle) -> Result<RunOutput> {
    let seeds = cfg.seeds_for(index);
    let spec = &bundle.spec;
    let (d, k) = (spec.feature_dim, spec.num_classes);
    let weak_spec = ModelSpec::new(d, cfg.weak_width, k, seeds.weak_init)?;
    let main_spec = ModelSpec::new(d, cfg.main_width, k, seeds.main_init)?;
    let weak_cfg = TrainConfig {
        loss_mode: LossMode::Ce,
        seed: seeds.weak_shuffle,
        ..cfg.weak_train.clone()
    };
    let weak = train(Model::init(weak_spec.clone())?, &bundle.train, &weak_cfg, None)?;
    let frozen = FrozenWeakLogits::from_model(&weak.final_model, bundle.all_examples())?;

    let mut mains = Vec::new();
    for (variant, mode) in [
        (Variant::CeMain, LossMode::Ce),
        (Variant::PoeMain, LossMode::Poe),
        (Variant::PoeCeMain, LossMode::PoeCe),
    ] {
        let main_cfg = TrainConfig {
            loss_mode: mode,
            seed: seeds.main_shuffle,
            ..cfg.main_train.clone()
        };
        let run = train(Model::init(main_spec.clone())?, &bundle.train, &main_cfg, Some(&frozen))?;
        mains.push((variant, run));
    }

    let mut accuracy = BTreeMap::new();
    let mut loss_corr = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    let weak_clean = predict_all(&weak.final_model, &bundle.eval_clean)?;
    let models = std::iter::once((Variant::Weak, &weak.final_model))
        .chain(mains.iter().map(|(v, r)| (*v, &r.final_model)));
    for (variant, model) in models {
        let acc = |split: Split| -> Result<f64> { Ok(predict_all(model, bundle.split(split))?.accuracy()) };
        accuracy.insert(
            variant,
            SplitAccuracy {
                train: acc(Split::Train)?,
                eval_clean: acc(Split::EvalClean)?,
                eval_anti: acc(Split::EvalAnti)?,
            },
        );
        if variant != Variant::Weak {
            let p = predict_all(model, &bundle.eval_clean)?;
            let r = match loss_correlation(&weak_clean.losses, &p.losses) {
                Ok(r) => Some(r),
                Err(Error::UndefinedCorrelation(_)) => None,
                Err(e) => return Err(e),
            };
            loss_corr.insert(variant, r);
        }
        checksums.insert(variant, model.checksum());
    }
    let metrics = RunMetrics {
        seed_index: index,
        seeds,
        genspec: spec.header(),
        weak_arch: format!("{} width={}", weak_spec.arch, cfg.weak_width),
        main_arch: format!("{} width={}", main_spec.arch, cfg.main_width),
        alpha: cfg.main_train.alpha,
        weak_checkpoint: "final".into(),
        dataset: bundle_stats(&bundle)?,
        accuracy,
        loss_correlation: loss_corr,
        checksums,
    };
    Ok(RunOutput {
        bundle,
        weak,
        frozen,
        mains,
        metrics,
    })
}

/// Diagnostics of one run: weak-model regimes on train, the bias report,
/// the weak model's data map and the regime/region overlap.
#[derive(Clone, Debug)]
pub struct RunAnalysis {
    pub num_classes: usize,
    pub regimes: RegimeProjection,
    pub bias: BiasReport,
    pub data_map: Vec<analysis::DataMapPoint>,
    pub overlap: OverlapSummary,
}

impl RunAnalysis {
    pub fn summary_json(&self) -> Result<String> {
        let top_tokens: Vec<_> = (0..self.num_classes).map(|c| self.bias.top_token(c)).collect();
        let v = serde_json::json!({
            "regimes": self.regimes.summary_json(),
            "bias_report": {
                "selected": self.bias.selected.len(),
                "short_of_candidates": self.bias.short_of_candidates,
                "top_token_per_class": top_tokens,
            },
            "overlap": self.overlap,
        });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

pub fn analyze_run(cfg: &ExperimentConfig, run: &RunOutput) -> Result<RunAnalysis> {
    analyze_parts(
        cfg,
        &run.bundle,
        &run.weak.final_model,
        &run.weak.example_ids,
        &run.weak.per_epoch_gold_prob,
    )
}

/// Same as [`analyze_run`] from stored pieces: the dataset, the frozen weak
/// model and its training dynamics (`per_epoch[epoch][train example]`).
pub fn analyze_parts(
    cfg: &ExperimentConfig,
    bundle: &DatasetBundle,
    weak: &Model,
    dynamics_ids: &[u64],
    per_epoch: &[Vec<f64>],
) -> Result<RunAnalysis> {
    let threshold = cfg.threshold();
    let train = &bundle.train;
    if dynamics_ids.len() != train.len() || dynamics_ids.iter().zip(train).any(|(id, e)| *id != e.id) {
        return Err(Error::InvalidInput(
            "training dynamics do not list the train split in order".into(),
        ));
    }
    let preds = predict_all(weak, train)?;
    let gold: Vec<usize> = train.iter().map(|e| e.gold.get()).collect();
    let regimes = project_regimes(&preds.logits, &gold, threshold)?;
    let bias = bias_report(weak, train, cfg.top_k.min(train.len()), threshold)?;
    let map = data_map_from_dynamics(dynamics_ids, per_epoch)?;
    let overlap = region_group_overlap(&map, &regimes.tags)?;
    Ok(RunAnalysis {
        num_classes: bundle.spec.num_classes,
        regimes,
        bias,
        data_map: map,
        overlap,
    })
}

pub fn write_analysis(dir: &Path, a: &RunAnalysis) -> Result<Vec<PathBuf>> {
    let files: [(&str, String); 7] = [
        ("regimes.csv", a.regimes.to_csv()),
        ("regime_grid.csv", a.regimes.grid.to_csv()),
        ("bias_selected.csv", a.bias.selected_csv()),
        ("bias_lift.csv", a.bias.lift_csv()),
        ("data_map.csv", data_map_csv(&a.data_map)),
        ("overlap.csv", a.overlap.to_csv()),
        ("analysis.json", a.summary_json()?),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

fn model_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    model.write_to(&mut buf)?;
    Ok(buf)
}

/// Writes the dataset, model dumps, dynamics, metrics and analyses of one
/// run into `dir`. Every file is written atomically and depends only on the
/// configuration and seed.
pub fn write_run_dir(dir: &Path, run: &RunOutput, analysis: Option<&RunAnalysis>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
        let path = dir.join(name);
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    let mut data = Vec::new();
    biasgen::save(&run.bundle, &mut data)?;
    put("dataset.tsv", &data)?;
    for v in Variant::ALL {
        put(&format!("{}.model", v.name()), &model_bytes(run.model(v))?)?;
        let mut dyn_csv = Vec::new();
        run.run(v).write_dynamics_csv(&mut dyn_csv)?;
        put(&format!("dynamics_{}.csv", v.name()), &dyn_csv)?;
    }
    put("metrics.json", run.metrics.to_json()?.as_bytes())?;
    if let Some(a) = analysis {
        written.extend(write_analysis(dir, a)?);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub knob_value: f64,
    pub seed_index: usize,
    pub variant: Variant,
    pub split: &'static str,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellFailure {
    pub knob_value: f64,
    pub seed_index: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub knob: Knob,
    pub rows: Vec<SweepRow>,
    pub correlations: Vec<(f64, usize, Variant, Option<f64>)>,
    pub failures: Vec<CellFailure>,
    /// Per main variant, when at least three knob values succeeded.
    pub trends: BTreeMap<Variant, TrendSummary>,
}

impl SweepResult {
    /// Mean over seeds of `variant`'s accuracy on `split`, per knob value
    /// in ascending order.
    pub fn means(&self, variant: Variant, split: Split) -> Vec<(f64, f64)> {
        let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.variant == variant && r.split == split.name()) {
            let e = acc.entry(order_key(r.knob_value)).or_insert((r.knob_value, 0.0, 0));
            e.1 += r.accuracy;
            e.2 += 1;
        }
        acc.into_values().map(|(k, s, n)| (k, s / n as f64)).collect()
    }

    /// Mean loss correlation with the weak model per knob value.
    pub fn mean_correlation(&self, variant: Variant) -> Vec<(f64, Option<f64>)> {
        let mut acc: BTreeMap<u64, (f64, Vec<Option<f64>>)> = BTreeMap::new();
        for (k, _, v, r) in &self.correlations {
            if *v == variant {
                acc.entry(order_key(*k)).or_insert((*k, Vec::new())).1.push(*r);
            }
        }
        acc.into_values()
            .map(|(k, rs)| {
                let all: Option<Vec<f64>> = rs.iter().copied().collect();
                (k, all.map(|v| v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    pub fn rows_csv(&self) -> String {
        let mut out = format!("{},seed,variant,split,accuracy\n", self.knob.name());
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.knob_value,
                r.seed_index,
                r.variant.name(),
                r.split,
                r.accuracy
            );
        }
        out
    }

    pub fn failures_csv(&self) -> String {
        let mut out = format!("{},seed,error\n", self.knob.name());
        for f in &self.failures {
            let _ = writeln!(out, "{},{},\"{}\"", f.knob_value, f.seed_index, f.error.replace('"', "'"));
        }
        out
    }

    pub fn summary_json(&self) -> Result<String> {
        let means: BTreeMap<&str, BTreeMap<&str, Vec<(f64, f64)>>> = Variant::ALL
            .iter()
            .map(|&v| {
                let per_split = Split::ALL.iter().map(|&s| (s.name(), self.means(v, s))).collect();
                (v.name(), per_split)
            })
            .collect();
        let v = serde_json::json!({
            "axis": self.knob,
            "focus_variant": self.knob.focus(),
            "means": means,
            "trends": self.trends,
            "failures": self.failures.len(),
        });
        Ok(serde_json::to_string_pretty(&v)? + "\n")
    }
}

/// Maps a finite f64 to a key whose order matches numeric order.
fn order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn worker_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))
}

/// Runs seeds `0..cfg.seeds` on `jobs` worker threads, in seed order.
pub fn run_seeds(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<Result<RunOutput>>> {
    Ok(worker_pool(jobs)?.install(|| (0..cfg.seeds).into_par_iter().map(|i| run_seed(cfg, i)).collect()))
}

/// Runs every (knob value, seed) cell on `jobs` worker threads. A failing
/// cell is recorded and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepResult> {
    let axis = cfg
        .sweep
        .clone()
        .ok_or_else(|| Error::config("sweep.axis", "no sweep axis configured"))?;
    let cells: Vec<(f64, usize)> = axis
        .values
        .iter()
        .flat_map(|&v| (0..cfg.seeds).map(move |s| (v, s)))
        .collect();
    let outcomes: Vec<((f64, usize), Result<RunMetrics>)> = worker_pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(v, s)| {
                let r = cfg.with_knob(axis.knob, v).and_then(|c| run_seed(&c, s)).map(|o| o.metrics);
                ((v, s), r)
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut correlations = Vec::new();
    let mut failures = Vec::new();
    for ((v, s), outcome) in outcomes {
        match outcome {
            Ok(m) => {
                for (variant, acc) in &m.accuracy {
                    for split in Split::ALL {
                        rows.push(SweepRow {
                            knob_value: v,
                            seed_index: s,
                            variant: *variant,
                            split: split.name(),
                            accuracy: acc.get(split),
                        });
                    }
                }
                for (variant, r) in &m.loss_correlation {
                    correlations.push((v, s, *variant, *r));
                }
            }
            Err(e) => failures.push(CellFailure {
                knob_value: v,
                seed_index: s,
                error: e.to_string(),
            }),
        }
    }
    let mut result = SweepResult {
        knob: axis.knob,
        rows,
        correlations,
        failures,
        trends: BTreeMap::new(),
    };
    for variant in Variant::MAINS {
        let clean = result.means(variant, Split::EvalClean);
        let anti = result.means(variant, Split::EvalAnti);
        if clean.len() < 3 {
            continue;
        }
        let points: Vec<SweepPoint> = clean
            .iter()
            .zip(&anti)
            .map(|(&(knob, in_dist), &(_, anti_bias))| SweepPoint { knob, in_dist, anti_bias })
            .collect();
        result.trends.insert(variant, sweep_aggregate(&points)?);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(
            "gen.train_size = 120\ngen.eval_size = 40\ngen.p_cheat = 0.9\n\
             weak.epochs = 2\nmain.epochs = 2\nmain.hidden_width = 8\nseeds = 2\n",
        )
        .unwrap();
        cfg.top_k = 50;
        cfg
    }

    #[test]
    fn parse_rejects_bad_keys_and_values() {
        let err = |text: &str| match ExperimentConfig::parse(text) {
            Err(Error::InvalidConfig { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(err("gen.p_cheat = 1.2"), "gen.p_cheat");
        assert_eq!(err("main.epochs = 0"), "main.epochs");
        assert_eq!(err("gen.colour = red"), "gen.colour");
        assert_eq!(err("sweep.axis = depth\nsweep.values = 1"), "sweep.axis");
        assert_eq!(err("sweep.axis = weak_width\nsweep.values = 0, 2.5"), "sweep.values");
        assert_eq!(err("weak.seed = 3"), "weak.seed");
        assert_eq!(err("seeds = 0"), "seeds");
        let ok = ExperimentConfig::parse("sweep.axis = alpha\nsweep.values = 0, 0.3, 1, 2\nseed = 9").unwrap();
        assert_eq!(ok.sweep.unwrap().values, vec![0.0, 0.3, 1.0, 2.0]);
        assert_eq!(ok.base_seed, 9);
    }

    #[test]
    fn derived_seeds_differ_by_role_and_index() {
        let cfg = ExperimentConfig::default();
        let (a, b) = (cfg.seeds_for(0), cfg.seeds_for(1));
        assert_ne!(a, b);
        let roles = [a.data, a.weak_init, a.weak_shuffle, a.main_init, a.main_shuffle];
        for i in 0..roles.len() {
            for j in i + 1..roles.len() {
                assert_ne!(roles[i], roles[j]);
            }
        }
    }

    #[test]
    fn run_is_deterministic_and_complete() {
        let cfg = small();
        let a = run_seed(&cfg, 0).unwrap();
        let b = run_seed(&cfg, 0).unwrap();
        assert_eq!(a.metrics.to_json().unwrap(), b.metrics.to_json().unwrap());
        assert_eq!(a.metrics.accuracy.len(), 4);
        assert_eq!(a.metrics.loss_correlation.len(), 3);
        assert_eq!(a.metrics.weak_checkpoint, "final");
        let analysis = analyze_run(&cfg, &a).unwrap();
        assert_eq!(analysis.regimes.tags.len(), 120);
        assert_eq!(analysis.data_map.len(), 120);
    }

    #[test]
    fn sweep_records_rows_and_failures() {
        let mut cfg = small();
        cfg.seeds = 1;
        cfg.sweep = Some(SweepAxis {
            knob: Knob::Alpha,
            values: vec![0.0, 0.3, 1.0],
        });
        let r = run_sweep(&cfg, 1).unwrap();
        assert!(r.failures.is_empty());
        assert_eq!(r.rows.len(), 3 * 4 * 3);
        assert!(r.trends.contains_key(&Variant::PoeCeMain));
        // alpha 0 is plain PoE
        let poe = r.means(Variant::PoeMain, Split::EvalAnti);
        let mixed = r.means(Variant::PoeCeMain, Split::EvalAnti);
        assert_eq!(poe[0], mixed[0]);
        assert!(r.rows_csv().starts_with("alpha,seed,variant,split,accuracy\n"));

        // a cell whose data cannot be generated is recorded, not fatal
        cfg.sweep = Some(SweepAxis {
            knob: Knob::TrainSize,
            values: vec![0.0, 60.0],
        });
        let r = run_sweep(&cfg, 1).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].knob_value, 0.0);
        assert!(r.trends.is_empty());
    }

    #[test]
    fn order_key_is_monotone() {
        let xs = [-2.0, -0.5, 0.0, 0.3, 1.0, 64.0];
        assert!(xs.windows(2).all(|w| order_key(w[0]) < order_key(w[1])));
    }
}
