//! Post-hoc diagnostics over trained models and training dynamics: weak-model
//! regimes, bias discovery by token lift, loss correlation, data maps and
//! sweep trend summaries. Every analysis renders a CSV (header row, LF) and
//! serializes a JSON summary.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::io::BufRead;

use serde::Serialize;

use crate::biasgen::Example;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numkernel::{cross_entropy_raw, entropy_raw, pearson, softmax_into, LogitVector};
use crate::trainer::{predict_all, TrainRun};

/// Bins per axis of the regime density grid.
pub const GRID_BINS: usize = 20;

/// Default certainty cutoff: half the maximal entropy.
pub fn default_entropy_threshold(num_classes: usize) -> f64 {
    0.5 * (num_classes as f64).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeTag {
    CertainCorrect,
    CertainIncorrect,
    Uncertain,
}

impl RegimeTag {
    pub const ALL: [RegimeTag; 3] = [
        RegimeTag::CertainCorrect,
        RegimeTag::CertainIncorrect,
        RegimeTag::Uncertain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeTag::CertainCorrect => "certain_correct",
            RegimeTag::CertainIncorrect => "certain_incorrect",
            RegimeTag::Uncertain => "uncertain",
        }
    }
}

impl fmt::Display for RegimeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Histogram over (signed loss, entropy). Signed loss is the cross-entropy,
/// negated when the prediction is wrong.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityGrid {
    pub loss_edges: Vec<f64>,
    pub entropy_edges: Vec<f64>,
    /// `counts[loss_bin][entropy_bin]`
    pub counts: Vec<Vec<usize>>,
}

impl DensityGrid {
    /// `log10(1 + count)` for each cell.
    pub fn log_counts(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| row.iter().map(|&c| (1.0 + c as f64).log10()).collect())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("loss_lo,loss_hi,entropy_lo,entropy_hi,count,log_count\n");
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    self.loss_edges[i],
                    self.loss_edges[i + 1],
                    self.entropy_edges[j],
                    self.entropy_edges[j + 1],
                    c,
                    (1.0 + c as f64).log10()
                );
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeProjection {
    pub threshold: f64,
    pub tags: Vec<RegimeTag>,
    pub signed_loss: Vec<f64>,
    pub entropy: Vec<f64>,
    pub grid: DensityGrid,
}

impl RegimeProjection {
    pub fn count(&self, tag: RegimeTag) -> usize {
        self.tags.iter().filter(|t| **t == tag).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,signed_loss,entropy,regime\n");
        for (i, ((l, h), t)) in self.signed_loss.iter().zip(&self.entropy).zip(&self.tags).enumerate() {
            let _ = writeln!(out, "{i},{l},{h},{t}");
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let counts: BTreeMap<&str, usize> = RegimeTag::ALL.iter().map(|&t| (t.name(), self.count(t))).collect();
        serde_json::json!({ "threshold": self.threshold, "total": self.tags.len(), "counts": counts })
    }
}

fn check_predictions(logits: &[LogitVector], gold: &[usize]) -> Result<usize> {
    if logits.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            logits.len(),
            gold.len()
        )));
    }
    let k = logits.first().map_or(2, |l| l.len());
    for (l, &y) in logits.iter().zip(gold) {
        if l.len() != k {
            return Err(Error::Shape(format!("mixed class counts {} and {}", k, l.len())));
        }
        if y >= k {
            return Err(Error::InvalidLabel { label: y, num_classes: k });
        }
    }
    Ok(k)
}

/// Tags each weak prediction as certain/correct, certain/incorrect or
/// uncertain (entropy at or above `threshold`) and bins the examples over
/// (signed loss, entropy).
pub fn project_regimes(weak_logits: &[LogitVector], gold: &[usize], threshold: f64) -> Result<RegimeProjection> {
    let k = check_predictions(weak_logits, gold)?;
    let max_entropy = (k as f64).ln();
    if !(threshold > 0.0 && threshold < max_entropy) {
        return Err(Error::InvalidInput(format!(
            "entropy threshold {threshold} outside (0, ln {k})"
        )));
    }
    let mut probs = vec![0.0; k];
    let mut tags = Vec::with_capacity(gold.len());
    let mut signed_loss = Vec::with_capacity(gold.len());
    let mut entropy = Vec::with_capacity(gold.len());
    for (z, &y) in weak_logits.iter().zip(gold) {
        softmax_into(z.values(), &mut probs);
        let h = entropy_raw(&probs);
        let loss = cross_entropy_raw(z.values(), y);
        let correct = z.argmax() == y;
        tags.push(match (h < threshold, correct) {
            (false, _) => RegimeTag::Uncertain,
            (true, true) => RegimeTag::CertainCorrect,
            (true, false) => RegimeTag::CertainIncorrect,
        });
        signed_loss.push(if correct { loss } else { -loss });
        entropy.push(h);
    }

    let span = signed_loss.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let span = if span > 0.0 { span } else { 1.0 };
    let edges = |lo: f64, hi: f64| -> Vec<f64> {
        (0..=GRID_BINS)
            .map(|i| lo + (hi - lo) * i as f64 / GRID_BINS as f64)
            .collect()
    };
    let bin = |v: f64, lo: f64, hi: f64| -> usize {
        (((v - lo) / (hi - lo) * GRID_BINS as f64) as usize).min(GRID_BINS - 1)
    };
    let mut counts = vec![vec![0usize; GRID_BINS]; GRID_BINS];
    for (&l, &h) in signed_loss.iter().zip(&entropy) {
        counts[bin(l, -span, span)][bin(h, 0.0, max_entropy)] += 1;
    }
    Ok(RegimeProjection {
        threshold,
        tags,
        signed_loss,
        entropy,
        grid: DensityGrid {
            loss_edges: edges(-span, span),
            entropy_edges: edges(0.0, max_entropy),
            counts,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelectedExample {
    pub id: u64,
    pub loss: f64,
    pub entropy: f64,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenLift {
    pub token: u32,
    pub class: usize,
    pub lift: f64,
    /// Selected examples predicted as `class` that contain the token.
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BiasReport {
    pub selected: Vec<SelectedExample>,
    /// Grouped by class, highest lift first within a class.
    pub token_association: Vec<TokenLift>,
    /// Set when fewer certain examples existed than were requested.
    pub short_of_candidates: bool,
}

impl BiasReport {
    pub fn top_token(&self, class: usize) -> Option<&TokenLift> {
        self.token_association.iter().find(|t| t.class == class)
    }

    pub fn selected_csv(&self) -> String {
        let mut out = String::from("example_id,loss,entropy,predicted,gold\n");
        for s in &self.selected {
            let _ = writeln!(out, "{},{},{},{},{}", s.id, s.loss, s.entropy, s.predicted, s.gold);
        }
        out
    }

    pub fn lift_csv(&self) -> String {
        let mut out = String::from("token,class,lift,support\n");
        for t in &self.token_association {
            let _ = writeln!(out, "{},{},{},{}", t.token, t.class, t.lift, t.support);
        }
        out
    }
}

/// Selects the `top_k` highest-loss examples among those the weak model is
/// certain about and measures how over-represented each token is among
/// them, per predicted class, relative to the whole of `data`.
pub fn bias_report(weak: &Model, data: &[Example], top_k: usize, threshold: f64) -> Result<BiasReport> {
    if top_k > data.len() {
        return Err(Error::InvalidInput(format!(
            "top_k {top_k} exceeds the {} available examples",
            data.len()
        )));
    }
    let k = weak.num_classes();
    if !(threshold > 0.0 && threshold < (k as f64).ln()) {
        return Err(Error::InvalidInput(format!(
            "entropy threshold {threshold} outside (0, ln {k})"
        )));
    }
    if top_k == 0 {
        return Ok(BiasReport::default());
    }
    let preds = predict_all(weak, data)?;
    let mut probs = vec![0.0; k];
    let mut candidates: Vec<(usize, SelectedExample)> = Vec::new();
    for (i, (e, z)) in data.iter().zip(&preds.logits).enumerate() {
        softmax_into(z.values(), &mut probs);
        let h = entropy_raw(&probs);
        if h < threshold {
            candidates.push((
                i,
                SelectedExample {
                    id: e.id,
                    loss: preds.losses[i],
                    entropy: h,
                    predicted: z.argmax(),
                    gold: e.gold.get(),
                },
            ));
        }
    }
    candidates.sort_by(|a, b| b.1.loss.total_cmp(&a.1.loss).then(a.1.id.cmp(&b.1.id)));
    let short = candidates.len() < top_k;
    candidates.truncate(top_k);

    let mut corpus_df: HashMap<u32, usize> = HashMap::new();
    for e in data {
        for &t in e.features.indices() {
            *corpus_df.entry(t).or_default() += 1;
        }
    }
    let mut per_class_size = vec![0usize; k];
    let mut per_class_df: Vec<HashMap<u32, usize>> = vec![HashMap::new(); k];
    for (i, s) in &candidates {
        per_class_size[s.predicted] += 1;
        for &t in data[*i].features.indices() {
            *per_class_df[s.predicted].entry(t).or_default() += 1;
        }
    }
    let n = data.len() as f64;
    let mut token_association = Vec::new();
    for c in 0..k {
        let mut rows: Vec<TokenLift> = per_class_df[c]
            .iter()
            .filter_map(|(&token, &support)| {
                let df = *corpus_df.get(&token)?;
                let lift = (support as f64 / per_class_size[c] as f64) / (df as f64 / n);
                Some(TokenLift { token, class: c, lift, support })
            })
            .collect();
        rows.sort_by(|a, b| b.lift.total_cmp(&a.lift).then(a.token.cmp(&b.token)));
        token_association.extend(rows);
    }
    Ok(BiasReport {
        selected: candidates.into_iter().map(|(_, s)| s).collect(),
        token_association,
        short_of_candidates: short,
    })
}

/// Pearson correlation between per-example losses of two models on the same
/// examples, in the same order.
pub fn loss_correlation(weak_losses: &[f64], model_losses: &[f64]) -> Result<f64> {
    pearson(weak_losses, model_losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DataMapPoint {
    pub example_id: u64,
    pub confidence: f64,
    pub variability: f64,
}

/// Mean and population standard deviation of each example's gold-label
/// probability across epochs. `per_epoch[epoch][example]`.
pub fn data_map_from_dynamics(example_ids: &[u64], per_epoch: &[Vec<f64>]) -> Result<Vec<DataMapPoint>> {
    if per_epoch.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "data maps need at least 2 epochs, got {}",
            per_epoch.len()
        )));
    }
    if let Some(row) = per_epoch.iter().find(|r| r.len() != example_ids.len()) {
        return Err(Error::Shape(format!(
            "epoch row has {} entries for {} examples",
            row.len(),
            example_ids.len()
        )));
    }
    let epochs = per_epoch.len() as f64;
    Ok(example_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let mean = per_epoch.iter().map(|r| r[i]).sum::<f64>() / epochs;
            let var = per_epoch.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / epochs;
            DataMapPoint {
                example_id: id,
                confidence: mean,
                variability: var.sqrt(),
            }
        })
        .collect())
}

pub fn data_map(run: &TrainRun) -> Result<Vec<DataMapPoint>> {
    data_map_from_dynamics(&run.example_ids, &run.per_epoch_gold_prob)
}

pub fn data_map_csv(points: &[DataMapPoint]) -> String {
    let mut out = String::from("example_id,confidence,variability\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.example_id, p.confidence, p.variability);
    }
    out
}

/// Reads `example_id,epoch,gold_prob` rows back into `(ids, per_epoch)`.
/// Every epoch must list the same ids in the same order.
pub fn read_dynamics_csv<R: BufRead>(input: R) -> Result<(Vec<u64>, Vec<Vec<f64>>)> {
    let mut ids: Vec<u64> = Vec::new();
    let mut per_epoch: Vec<Vec<f64>> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != "example_id,epoch,gold_prob" {
                return Err(Error::parse(lineno, "expected header `example_id,epoch,gold_prob`"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(lineno, format!("expected 3 fields, got {}", fields.len())));
        }
        let id: u64 = fields[0].parse().map_err(|_| Error::parse(lineno, "bad example_id"))?;
        let epoch: usize = fields[1].parse().map_err(|_| Error::parse(lineno, "bad epoch"))?;
        let p: f64 = fields[2].parse().map_err(|_| Error::parse(lineno, "bad gold_prob"))?;
        if epoch == per_epoch.len() {
            per_epoch.push(Vec::new());
        } else if epoch + 1 != per_epoch.len() {
            return Err(Error::parse(lineno, format!("epoch {epoch} out of order")));
        }
        let row = per_epoch.last_mut().expect("row pushed above");
        let pos = row.len();
        if epoch == 0 {
            ids.push(id);
        } else if ids.get(pos) != Some(&id) {
            return Err(Error::parse(lineno, format!("example {id} out of order in epoch {epoch}")));
        }
        row.push(p);
    }
    if let Some(e) = per_epoch.iter().position(|r| r.len() != ids.len()) {
        return Err(Error::InvalidInput(format!("epoch {e} is incomplete")));
    }
    Ok((ids, per_epoch))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    EasyToLearn,
    Ambiguous,
    HardToLearn,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::EasyToLearn, Region::Ambiguous, Region::HardToLearn];

    pub fn name(self) -> &'static str {
        match self {
            Region::EasyToLearn => "easy_to_learn",
            Region::Ambiguous => "ambiguous",
            Region::HardToLearn => "hard_to_learn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupStats {
    pub regime: RegimeTag,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub mean_variability: Option<f64>,
    /// Members falling in each region, in `Region::ALL` order. Regions may
    /// overlap. Empty when the table is degenerate.
    pub region_counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OverlapSummary {
    pub groups: Vec<GroupStats>,
    /// Fewer than three points: no terciles were formed.
    pub degenerate: bool,
}

impl OverlapSummary {
    pub fn group(&self, tag: RegimeTag) -> &GroupStats {
        self.groups.iter().find(|g| g.regime == tag).expect("every regime has a row")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "regime,count,mean_confidence,mean_variability,easy_to_learn,ambiguous,hard_to_learn\n",
        );
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let cell = |g: &GroupStats, i: usize| g.region_counts.get(i).map_or(String::new(), |c| c.to_string());
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                g.regime,
                g.count,
                opt(g.mean_confidence),
                opt(g.mean_variability),
                cell(g, 0),
                cell(g, 1),
                cell(g, 2)
            );
        }
        out
    }
}

/// 0-based ascending ranks, ties broken by position.
fn ordinal_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// Per-regime means on the data map and their overlap with rank-tercile
/// regions. `map` and `regimes` are aligned by position.
pub fn region_group_overlap(map: &[DataMapPoint], regimes: &[RegimeTag]) -> Result<OverlapSummary> {
    if map.len() != regimes.len() {
        return Err(Error::Shape(format!(
            "{} data-map points for {} regime tags",
            map.len(),
            regimes.len()
        )));
    }
    let n = map.len();
    let degenerate = n < 3;
    let regions: Vec<[bool; 3]> = if degenerate {
        vec![[false; 3]; n]
    } else {
        let conf = ordinal_ranks(&map.iter().map(|p| p.confidence).collect::<Vec<_>>());
        let var = ordinal_ranks(&map.iter().map(|p| p.variability).collect::<Vec<_>>());
        let bottom = |r: usize| 3 * r < n;
        let top = |r: usize| 3 * r >= 2 * n;
        (0..n)
            .map(|i| [top(conf[i]) && bottom(var[i]), top(var[i]), bottom(conf[i])])
            .collect()
    };
    let groups = RegimeTag::ALL
        .iter()
        .map(|&tag| {
            let members: Vec<usize> = (0..n).filter(|&i| regimes[i] == tag).collect();
            let mean = |f: fn(&DataMapPoint) -> f64| {
                (!members.is_empty()).then(|| members.iter().map(|&i| f(&map[i])).sum::<f64>() / members.len() as f64)
            };
            GroupStats {
                regime: tag,
                count: members.len(),
                mean_confidence: mean(|p| p.confidence),
                mean_variability: mean(|p| p.variability),
                region_counts: if degenerate {
                    Vec::new()
                } else {
                    (0..3).map(|r| members.iter().filter(|&&i| regions[i][r]).count()).collect()
                },
            }
        })
        .collect();
    Ok(OverlapSummary { groups, degenerate })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). Undefined when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let constant = |r: &[f64]| r.windows(2).all(|w| w[0] == w[1]);
    if constant(&ra) || constant(&rb) {
        return Err(Error::UndefinedCorrelation("a side has no rank variation".into()));
    }
    pearson(&ra, &rb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
    NoTrend,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub knob: f64,
    pub in_dist: f64,
    pub anti_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AxisTrend {
    pub spearman: Option<f64>,
    pub trend: Trend,
    /// Strictly monotone in the knob.
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrendSummary {
    pub points: Vec<SweepPoint>,
    pub in_dist: AxisTrend,
    pub anti_bias: AxisTrend,
}

impl TrendSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("knob,in_dist,anti_bias\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.knob, p.in_dist, p.anti_bias);
        }
        out
    }
}

fn axis_trend(knobs: &[f64], values: &[f64]) -> Result<AxisTrend> {
    let rho = match spearman(knobs, values) {
        Ok(r) => Some(r),
        Err(Error::UndefinedCorrelation(_)) => None,
        Err(e) => return Err(e),
    };
    let trend = match rho {
        Some(r) if r > 0.0 => Trend::Increasing,
        Some(r) if r < 0.0 => Trend::Decreasing,
        _ => Trend::NoTrend,
    };
    let monotone = match trend {
        Trend::Increasing => values.windows(2).all(|w| w[1] > w[0]),
        Trend::Decreasing => values.windows(2).all(|w| w[1] < w[0]),
        Trend::NoTrend => false,
    };
    Ok(AxisTrend { spearman: rho, trend, monotone })
}

/// Rank-correlates a knob with in-distribution and anti-bias accuracy.
/// Expects one (seed-averaged) point per knob value, at least three.
pub fn sweep_aggregate(results: &[SweepPoint]) -> Result<TrendSummary> {
    let mut points = results.to_vec();
    points.sort_by(|a, b| a.knob.total_cmp(&b.knob));
    if points.windows(2).any(|w| w[0].knob == w[1].knob) {
        return Err(Error::InvalidInput("duplicate knob value; average seeds first".into()));
    }
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "trend needs at least 3 knob values, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !(p.knob.is_finite() && p.in_dist.is_finite() && p.anti_bias.is_finite())) {
        return Err(Error::InvalidInput("non-finite sweep value".into()));
    }
    let knobs: Vec<f64> = points.iter().map(|p| p.knob).collect();
    let ind: Vec<f64> = points.iter().map(|p| p.in_dist).collect();
    let anti: Vec<f64> = points.iter().map(|p| p.anti_bias).collect();
    Ok(TrendSummary {
        in_dist: axis_trend(&knobs, &ind)?,
        anti_bias: axis_trend(&knobs, &anti)?,
        points,
    })
}
