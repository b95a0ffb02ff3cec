//! Synthetic token-bag classification data with a planted spurious cue.
//!
//! Token ids are laid out as
//!
//! ```text
//! [0, V)          signal vocabulary, split into K contiguous class blocks
//! [V, V + K)      bias tokens, one per class
//! [V + K, V + 2K) frame tokens (framed signal only)
//! ```
//!
//! and hashed into features by `token mod D`. The generator requires
//! `D` to hold every token id so the hash never collides and provenance can
//! be read back from the features.
//!
//! Each example draws `L` signal tokens. With probability `q` a token comes
//! from the block that indicates the gold class, otherwise from a uniformly
//! chosen other block. Under a *framed* signal every example also carries a
//! frame token `f` and the block indicating class `y` is `(y + f) mod K`, so
//! the class can only be read from the interaction of the frame and the
//! signal tokens. Marginally over frames no single token is predictive,
//! which puts the signal out of reach of a linear model while a hidden layer
//! can recover it.
//!
//! Every example also carries one bias token. On the training split it
//! names the gold class with probability `p_cheat` (or `bias_rho`) and a
//! uniformly chosen wrong class otherwise; with both at zero it is uniform.
//! On `eval_clean` it is uniform, and on `eval_anti` it always names a
//! wrong class.

use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::FeatureVector;
use crate::numkernel::{LabelIndex, ProbVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    /// Each signal block indicates one class directly.
    Direct,
    /// Block-to-class mapping is rotated by a per-example frame token.
    Framed,
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::Direct => "direct",
            SignalKind::Framed => "framed",
        })
    }
}

impl std::str::FromStr for SignalKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "direct" => Ok(SignalKind::Direct),
            "framed" => Ok(SignalKind::Framed),
            other => Err(format!("unknown signal kind `{other}` (direct|framed)")),
        }
    }
}

/// How the training split's bias token relates to the gold label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BiasMode {
    /// Uniform bias token; train and `eval_clean` are identically distributed.
    None,
    Cheating(f64),
    Soft(f64),
}

impl BiasMode {
    /// Probability that the training bias token names the gold class.
    pub fn aligned_rate(&self, num_classes: usize) -> f64 {
        match *self {
            BiasMode::None => 1.0 / num_classes as f64,
            BiasMode::Cheating(p) | BiasMode::Soft(p) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub tokens_per_example: usize,
    pub signal_strength: f64,
    pub signal: SignalKind,
    pub p_cheat: f64,
    pub bias_rho: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_classes: 3,
            vocab_size: 200,
            feature_dim: 256,
            tokens_per_example: 8,
            signal_strength: 0.8,
            signal: SignalKind::Framed,
            p_cheat: 0.0,
            bias_rho: 0.0,
            train_size: 5000,
            eval_size: 2000,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        if self.vocab_size < k {
            return Err(Error::config("vocab_size", "needs at least one signal token per class"));
        }
        if self.tokens_per_example == 0 {
            return Err(Error::config("tokens_per_example", "must be at least 1"));
        }
        let q = self.signal_strength;
        if !(q > 1.0 / k as f64 && q <= 1.0) {
            return Err(Error::config(
                "signal_strength",
                format!("must lie in (1/K, 1], got {q}"),
            ));
        }
        for (key, v) in [("p_cheat", self.p_cheat), ("bias_rho", self.bias_rho)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if self.p_cheat > 0.0 && self.bias_rho > 0.0 {
            return Err(Error::config("bias_rho", "cannot be combined with p_cheat"));
        }
        if self.train_size == 0 {
            return Err(Error::config("train_size", "must be at least 1"));
        }
        if self.eval_size == 0 {
            return Err(Error::config("eval_size", "must be at least 1"));
        }
        if self.feature_dim < self.token_count() {
            return Err(Error::config(
                "feature_dim",
                format!(
                    "must be at least {} so token hashing is collision-free",
                    self.token_count()
                ),
            ));
        }
        Ok(())
    }

    pub fn bias_mode(&self) -> BiasMode {
        if self.p_cheat > 0.0 {
            BiasMode::Cheating(self.p_cheat)
        } else if self.bias_rho > 0.0 {
            BiasMode::Soft(self.bias_rho)
        } else {
            BiasMode::None
        }
    }

    /// Number of distinct token ids the generator can emit.
    pub fn token_count(&self) -> usize {
        let frames = match self.signal {
            SignalKind::Direct => 0,
            SignalKind::Framed => self.num_classes,
        };
        self.vocab_size + self.num_classes + frames
    }

    pub fn bias_token(&self, class: usize) -> u32 {
        (self.vocab_size + class) as u32
    }

    pub fn frame_token(&self, frame: usize) -> u32 {
        (self.vocab_size + self.num_classes + frame) as u32
    }

    pub fn hash_token(&self, token: u32) -> u32 {
        token % self.feature_dim as u32
    }

    fn block_range(&self, class: usize) -> std::ops::Range<usize> {
        let (v, k) = (self.vocab_size, self.num_classes);
        class * v / k..(class + 1) * v / k
    }

    fn block_of(&self, token: usize) -> usize {
        let (v, k) = (self.vocab_size, self.num_classes);
        // inverse of block_range: largest c with c*v/k <= token
        let mut c = token * k / v;
        while c + 1 < k && (c + 1) * v / k <= token {
            c += 1;
        }
        while c > 0 && c * v / k > token {
            c -= 1;
        }
        c
    }

    pub fn header(&self) -> String {
        format!(
            "#genspec k={} v={} d={} l={} q={} signal={} p_cheat={} bias_rho={} n_train={} n_eval={} seed={}",
            self.num_classes,
            self.vocab_size,
            self.feature_dim,
            self.tokens_per_example,
            self.signal_strength,
            self.signal,
            self.p_cheat,
            self.bias_rho,
            self.train_size,
            self.eval_size,
            self.seed
        )
    }

    pub fn parse_header(line: &str) -> std::result::Result<Self, String> {
        let body = line
            .strip_prefix("#genspec")
            .ok_or("expected `#genspec` header")?;
        let mut spec = GenSpec::default();
        let mut seen = Vec::new();
        for field in body.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| format!("malformed header field `{field}`"))?;
            let bad = || format!("bad value `{value}` for `{key}`");
            match key {
                "k" => spec.num_classes = value.parse().map_err(|_| bad())?,
                "v" => spec.vocab_size = value.parse().map_err(|_| bad())?,
                "d" => spec.feature_dim = value.parse().map_err(|_| bad())?,
                "l" => spec.tokens_per_example = value.parse().map_err(|_| bad())?,
                "q" => spec.signal_strength = value.parse().map_err(|_| bad())?,
                "signal" => spec.signal = value.parse()?,
                "p_cheat" => spec.p_cheat = value.parse().map_err(|_| bad())?,
                "bias_rho" => spec.bias_rho = value.parse().map_err(|_| bad())?,
                "n_train" => spec.train_size = value.parse().map_err(|_| bad())?,
                "n_eval" => spec.eval_size = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                other => return Err(format!("unknown header field `{other}`")),
            }
            seen.push(key.to_string());
        }
        for required in ["k", "v", "d", "l", "q", "signal", "p_cheat", "bias_rho", "n_train", "n_eval", "seed"] {
            if !seen.iter().any(|s| s == required) {
                return Err(format!("header is missing `{required}`"));
            }
        }
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Provenance {
    pub bias_token_present: bool,
    pub bias_aligned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub features: FeatureVector,
    pub gold: LabelIndex,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    EvalClean,
    EvalAnti,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::EvalClean, Split::EvalAnti];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalClean => "eval_clean",
            Split::EvalAnti => "eval_anti",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub spec: GenSpec,
    pub train: Vec<Example>,
    pub eval_clean: Vec<Example>,
    pub eval_anti: Vec<Example>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::EvalClean => &self.eval_clean,
            Split::EvalAnti => &self.eval_anti,
        }
    }

    pub fn all_examples(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.eval_clean).chain(&self.eval_anti)
    }
}

/// Generates the three splits deterministically from `spec.seed`.
pub fn generate(spec: &GenSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut next_id = 0u64;
    let mut make = |split: Split, n: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let out: Vec<Example> = (0..n)
            .map(|i| draw_example(spec, split, next_id + i as u64, &mut rng))
            .collect();
        next_id += n as u64;
        out
    };
    let train = make(Split::Train, spec.train_size, 1);
    let eval_clean = make(Split::EvalClean, spec.eval_size, 2);
    let eval_anti = make(Split::EvalAnti, spec.eval_size, 3);
    Ok(DatasetBundle {
        spec: spec.clone(),
        train,
        eval_clean,
        eval_anti,
    })
}

fn wrong_class(rng: &mut ChaCha8Rng, gold: usize, k: usize) -> usize {
    let c = rng.gen_range(0..k - 1);
    if c >= gold {
        c + 1
    } else {
        c
    }
}

fn draw_example(spec: &GenSpec, split: Split, id: u64, rng: &mut ChaCha8Rng) -> Example {
    let k = spec.num_classes;
    let gold = rng.gen_range(0..k);
    let frame = match spec.signal {
        SignalKind::Direct => 0,
        SignalKind::Framed => rng.gen_range(0..k),
    };
    let mut tokens = Vec::with_capacity(spec.tokens_per_example + 2);
    for _ in 0..spec.tokens_per_example {
        let class = if rng.gen_bool(spec.signal_strength) {
            gold
        } else {
            wrong_class(rng, gold, k)
        };
        let block = spec.block_range((class + frame) % k);
        tokens.push(rng.gen_range(block) as u32);
    }
    if spec.signal == SignalKind::Framed {
        tokens.push(spec.frame_token(frame));
    }

    let bias_class = match split {
        Split::Train => match spec.bias_mode() {
            BiasMode::None => rng.gen_range(0..k),
            BiasMode::Cheating(p) | BiasMode::Soft(p) => {
                if rng.gen_bool(p) {
                    gold
                } else {
                    wrong_class(rng, gold, k)
                }
            }
        },
        Split::EvalClean => rng.gen_range(0..k),
        Split::EvalAnti => wrong_class(rng, gold, k),
    };
    tokens.push(spec.bias_token(bias_class));

    let hashed: Vec<u32> = tokens.iter().map(|&t| spec.hash_token(t)).collect();
    Example {
        id,
        features: FeatureVector::from_tokens(&hashed),
        gold: LabelIndex::new(gold, k).expect("gold drawn below K"),
        provenance: Provenance {
            bias_token_present: true,
            bias_aligned: bias_class == gold,
        },
    }
}

/// Exact class posterior under the generative process of `spec`.
///
/// With `use_bias` the bias token is read with its training-split
/// likelihood; without it the bias token is ignored. A missing frame token
/// is marginalized out.
pub fn bayes_oracle(spec: &GenSpec, x: &Example, use_bias: bool) -> Result<ProbVector> {
    spec.validate()?;
    let k = spec.num_classes;
    let v = spec.vocab_size;
    let mut block_counts = vec![0.0; k];
    let mut bias = None;
    let mut frame = None;
    for (idx, count) in x.features.iter() {
        if idx < v {
            block_counts[spec.block_of(idx)] += count;
        } else if idx < v + k {
            if bias.replace(idx - v).is_some() || count != 1.0 {
                return Err(Error::InvalidInput("more than one bias token".into()));
            }
        } else if spec.signal == SignalKind::Framed && idx < v + 2 * k {
            if frame.replace(idx - v - k).is_some() || count != 1.0 {
                return Err(Error::InvalidInput("more than one frame token".into()));
            }
        } else {
            return Err(Error::InvalidInput(format!(
                "feature {idx} is outside the generative vocabulary"
            )));
        }
    }

    let q = spec.signal_strength;
    let log_hit = q.ln();
    let log_miss = ((1.0 - q) / (k - 1) as f64).ln();
    // Block sizes are shared by every class hypothesis and cancel.
    let signal_loglik = |y: usize, f: usize| -> f64 {
        let target = (y + f) % k;
        block_counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0.0)
            .map(|(c, &n)| n * if c == target { log_hit } else { log_miss })
            .sum()
    };
    let frames: Vec<usize> = match (spec.signal, frame) {
        (SignalKind::Direct, _) => vec![0],
        (SignalKind::Framed, Some(f)) => vec![f],
        (SignalKind::Framed, None) => (0..k).collect(),
    };

    let mut log_post: Vec<f64> = (0..k)
        .map(|y| {
            let terms: Vec<f64> = frames.iter().map(|&f| signal_loglik(y, f)).collect();
            crate::numkernel::log_sum_exp(&terms)
        })
        .collect();
    if use_bias {
        if let Some(b) = bias {
            let rate = spec.bias_mode().aligned_rate(k);
            for (y, lp) in log_post.iter_mut().enumerate() {
                let p = if y == b { rate } else { (1.0 - rate) / (k - 1) as f64 };
                *lp += p.ln();
            }
        }
    }
    let mut probs = vec![0.0; k];
    if log_post.iter().all(|l| *l == f64::NEG_INFINITY) {
        return Err(Error::InvalidInput("example impossible under the spec".into()));
    }
    crate::numkernel::softmax_into(&log_post, &mut probs);
    ProbVector::new(probs)
}

/// Accuracy of the Bayes posterior's argmax over `examples`.
pub fn bayes_accuracy(spec: &GenSpec, examples: &[Example], use_bias: bool) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for x in examples {
        if bayes_oracle(spec, x, use_bias)?.argmax() == x.gold.get() {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SplitStats {
    pub split: &'static str,
    pub size: usize,
    pub bias_aligned_rate: f64,
    pub bayes_signal_only: f64,
}

/// Alignment rates and Bayes signal-only ceilings per split.
pub fn bundle_stats(bundle: &DatasetBundle) -> Result<Vec<SplitStats>> {
    Split::ALL
        .iter()
        .map(|&s| {
            let data = bundle.split(s);
            let aligned = data.iter().filter(|e| e.provenance.bias_aligned).count();
            Ok(SplitStats {
                split: s.name(),
                size: data.len(),
                bias_aligned_rate: if data.is_empty() { 0.0 } else { aligned as f64 / data.len() as f64 },
                bayes_signal_only: bayes_accuracy(&bundle.spec, data, false)?,
            })
        })
        .collect()
}

/// Writes the bundle as a `#genspec` header followed by one line per
/// example: `id<TAB>gold<TAB>bias_present<TAB>bias_aligned<TAB>idx:count,...`.
/// Examples appear in split order (train, eval_clean, eval_anti) and the
/// split sizes are taken from the header.
pub fn save<W: Write>(bundle: &DatasetBundle, mut out: W) -> Result<()> {
    let mut buf = String::new();
    buf.push_str(&bundle.spec.header());
    buf.push('\n');
    for e in bundle.all_examples() {
        use std::fmt::Write as _;
        let feats: Vec<String> = e
            .features
            .iter()
            .map(|(i, c)| format!("{i}:{c}"))
            .collect();
        let _ = writeln!(
            buf,
            "{}\t{}\t{}\t{}\t{}",
            e.id,
            e.gold.get(),
            e.provenance.bias_token_present as u8,
            e.provenance.bias_aligned as u8,
            feats.join(",")
        );
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

pub fn save_to_path(bundle: &DatasetBundle, path: &std::path::Path) -> Result<()> {
    let mut bytes = Vec::new();
    save(bundle, &mut bytes)?;
    crate::io::write_atomic(path, &bytes)
}

pub fn load<R: BufRead>(input: R) -> Result<DatasetBundle> {
    let mut lines = input.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => return Err(Error::parse(1, "empty file, expected `#genspec` header")),
    };
    let spec = GenSpec::parse_header(header.trim_end_matches('\r')).map_err(|r| Error::parse(1, r))?;
    let total = spec.train_size + 2 * spec.eval_size;
    let mut examples = Vec::with_capacity(total);
    let mut ids = std::collections::HashSet::with_capacity(total);
    let mut last_line = 1;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let e = parse_example(&line, &spec).map_err(|r| Error::parse(lineno, r))?;
        if !ids.insert(e.id) {
            return Err(Error::parse(lineno, format!("duplicate example id {}", e.id)));
        }
        examples.push(e);
        last_line = lineno;
    }
    if examples.len() != total {
        return Err(Error::parse(
            last_line,
            format!(
                "header declares {total} examples but the file ends after {} (last valid line {last_line})",
                examples.len()
            ),
        ));
    }
    let eval_anti = examples.split_off(spec.train_size + spec.eval_size);
    let eval_clean = examples.split_off(spec.train_size);
    Ok(DatasetBundle {
        spec,
        train: examples,
        eval_clean,
        eval_anti,
    })
}

pub fn load_from_path(path: &std::path::Path) -> Result<DatasetBundle> {
    let file = std::fs::File::open(path)?;
    load(std::io::BufReader::new(file))
}

fn parse_example(line: &str, spec: &GenSpec) -> std::result::Result<Example, String> {
    let cols: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
    if cols.len() != 5 {
        return Err(format!("expected 5 tab-separated columns, found {}", cols.len()));
    }
    let id: u64 = cols[0].parse().map_err(|_| format!("bad id `{}`", cols[0]))?;
    let gold: usize = cols[1].parse().map_err(|_| format!("bad gold label `{}`", cols[1]))?;
    let gold = LabelIndex::new(gold, spec.num_classes).map_err(|e| e.to_string())?;
    let flag = |s: &str, name: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("bad {name} flag `{s}`")),
    };
    let bias_token_present = flag(cols[2], "bias_present")?;
    let bias_aligned = flag(cols[3], "bias_aligned")?;
    let mut indices = Vec::new();
    let mut counts = Vec::new();
    if !cols[4].is_empty() {
        for pair in cols[4].split(',') {
            let (i, c) = pair
                .split_once(':')
                .ok_or_else(|| format!("bad feature `{pair}`"))?;
            let i: u32 = i.parse().map_err(|_| format!("bad feature index `{i}`"))?;
            if i as usize >= spec.feature_dim {
                return Err(format!("feature index {i} outside dimension {}", spec.feature_dim));
            }
            indices.push(i);
            counts.push(c.parse::<f64>().map_err(|_| format!("bad feature count `{c}`"))?);
        }
    }
    let features = FeatureVector::new(indices, counts).map_err(|e| e.to_string())?;
    let has_bias = (0..spec.num_classes).any(|c| features.contains(spec.hash_token(spec.bias_token(c))));
    if has_bias != bias_token_present {
        return Err("bias_present flag disagrees with the features".into());
    }
    if bias_aligned && !features.contains(spec.hash_token(spec.bias_token(gold.get()))) {
        return Err("bias_aligned set but the gold-class bias token is absent".into());
    }
    Ok(Example {
        id,
        features,
        gold,
        provenance: Provenance {
            bias_token_present,
            bias_aligned,
        },
    })
}

/// Shuffled copy of the indices `0..n`, used by tests and sweeps that need a
/// reproducible subsample.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
