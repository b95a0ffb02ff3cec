//! Numeric primitives: stable softmax and log-sum-exp, cross-entropy,
//! product-of-experts combination, entropies and correlation.
//!
//! Everything is in nats and `f64`.

use crate::error::{Error, Result};

/// Unnormalized class scores of length `K >= 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
        }
        Ok(Self(values))
    }

    /// All-zero logits, i.e. a uniform prediction.
    pub fn zeros(num_classes: usize) -> Self {
        Self(vec![0.0; num_classes.max(2)])
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A probability distribution over `K` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self(values))
    }

    pub fn uniform(num_classes: usize) -> Self {
        let k = num_classes.max(2);
        Self(vec![1.0 / k as f64; k])
    }

    #[cfg(test)]
    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Gold class index, checked against the class count at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelIndex(usize);

impl LabelIndex {
    pub fn new(label: usize, num_classes: usize) -> Result<Self> {
        if label >= num_classes {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        Ok(Self(label))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// `log Σ exp(x_j)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes `softmax(logits)` into `out`. Inputs are assumed finite.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &LogitVector) -> Result<ProbVector> {
    if let Some(bad) = logits.0.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(&logits.0, &mut out);
    Ok(ProbVector(out))
}

/// Product-of-experts combination in logit space: `e_j = w_j + m_j`.
pub fn poe_combine(weak: &LogitVector, main: &LogitVector) -> Result<LogitVector> {
    if weak.len() != main.len() {
        return Err(Error::Shape(format!(
            "weak logits have {} classes, main logits {}",
            weak.len(),
            main.len()
        )));
    }
    Ok(LogitVector(
        weak.0.iter().zip(&main.0).map(|(w, m)| w + m).collect(),
    ))
}

/// `-log softmax(logits)[gold]` via log-sum-exp.
pub fn cross_entropy(logits: &LogitVector, gold: LabelIndex) -> Result<f64> {
    if gold.0 >= logits.len() {
        return Err(Error::InvalidLabel {
            label: gold.0,
            num_classes: logits.len(),
        });
    }
    Ok(cross_entropy_raw(&logits.0, gold.0))
}

pub(crate) fn cross_entropy_raw(logits: &[f64], gold: usize) -> f64 {
    (log_sum_exp(logits) - logits[gold]).max(0.0)
}

/// Binary PoE loss for a positive example with main logit `m` and frozen
/// weak logit `w`: `-m - w + log(1 + exp(m + w))`, i.e. `softplus(-(m + w))`.
pub fn poe_binary_loss(m: f64, w: f64) -> Result<f64> {
    if !m.is_finite() || !w.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite logits m={m}, w={w}"
        )));
    }
    Ok(softplus(-(m + w)))
}

fn xlogx(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    Ok(-xlogx(p) - xlogx(1.0 - p))
}

pub fn categorical_entropy(p: &ProbVector) -> Result<f64> {
    // Re-validate: the vector may have been built in-crate without checks.
    let checked = ProbVector::new(p.0.clone())?;
    Ok(entropy_raw(&checked.0))
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    -p.iter().map(|&x| xlogx(x)).sum::<f64>()
}

/// Pearson correlation coefficient, clamped to `[-1, 1]`.
///
/// When exactly one side is constant the covariance is zero and the
/// coefficient is reported as 0.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "pearson inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput(
            "pearson needs at least two points".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in pearson input".into()));
    }
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    match (var_a > 0.0, var_b > 0.0) {
        (false, false) => Err(Error::UndefinedCorrelation(
            "both inputs are constant".into(),
        )),
        (true, true) => Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0)),
        _ => Ok(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    fn label(j: usize, k: usize) -> LabelIndex {
        LabelIndex::new(j, k).unwrap()
    }

    // Independent oracle: explicit product of the two distributions, then normalize.
    fn product_then_normalize(w: &[f64], m: &[f64]) -> Vec<f64> {
        let pw: Vec<f64> = w.iter().map(|x| x.exp()).collect();
        let pm: Vec<f64> = m.iter().map(|x| x.exp()).collect();
        let sw: f64 = pw.iter().sum();
        let sm: f64 = pm.iter().sum();
        let prod: Vec<f64> = pw.iter().zip(&pm).map(|(a, b)| (a / sw) * (b / sm)).collect();
        let total: f64 = prod.iter().sum();
        prod.into_iter().map(|p| p / total).collect()
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&lv(&[0.0, 0.0, 0.0])).unwrap();
        for &x in p.values() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&lv(&[1000.0, 0.0, 0.0])).unwrap();
        assert!((p.values()[0] - 1.0).abs() < 1e-15);
        assert!(p.values()[1] < 1e-300);
        assert!(p.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // exp-normalize of [1, 2, 3] evaluated at 40 significant digits
        let expected = [
            0.090_030_573_170_380_457_998_022_101_484_491_797_87,
            0.244_728_471_054_797_652_472_959_618_340_762_797_2,
            0.665_240_955_774_821_889_529_018_280_174_745_404_9,
        ];
        let p = softmax(&lv(&[1.0, 2.0, 3.0])).unwrap();
        for (got, want) in p.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        let sum: f64 = p.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(matches!(
            LogitVector::new(vec![0.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(LogitVector::new(vec![1.0]).is_err());
        let raw = LogitVector::from_vec_unchecked(vec![0.0, f64::INFINITY]);
        assert!(matches!(softmax(&raw), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn poe_combine_examples() {
        let e = poe_combine(&lv(&[1.0, 0.0]), &lv(&[0.0, 1.0])).unwrap();
        assert_eq!(e.values(), &[1.0, 1.0]);
        assert_eq!(softmax(&e).unwrap().values(), &[0.5, 0.5]);

        let m = lv(&[0.3, -1.7, 2.25]);
        let e = poe_combine(&LogitVector::zeros(3), &m).unwrap();
        assert_eq!(e, m);

        assert!(matches!(
            poe_combine(&lv(&[0.0, 0.0]), &lv(&[0.0, 0.0, 0.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn poe_combine_random_k3_matches_product_of_distributions() {
        let w = [0.42, -1.3, 2.05];
        let m = [-0.77, 0.18, 1.6];
        let e = softmax(&poe_combine(&lv(&w), &lv(&m)).unwrap()).unwrap();
        for (got, want) in e.values().iter().zip(product_then_normalize(&w, &m)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let ln2 = std::f64::consts::LN_2;
        let ln3 = 1.098_612_288_668_109_691_395_245_236_922_525_704_647_f64;
        assert!((cross_entropy(&lv(&[0.0, 0.0]), label(0, 2)).unwrap() - ln2).abs() < 1e-15);
        assert!((cross_entropy(&lv(&[0.0, 0.0, 0.0]), label(2, 3)).unwrap() - ln3).abs() < 1e-15);
        // log(e^2 + e + 1) - 2 at 40 digits
        let want = 0.407_605_964_444_380_304_482_919_904_545_070_451_5;
        assert!((cross_entropy(&lv(&[2.0, 1.0, 0.0]), label(0, 3)).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(LabelIndex::new(3, 3).is_err());
        let foreign = label(4, 5);
        assert!(matches!(
            cross_entropy(&lv(&[0.0, 0.0, 0.0]), foreign),
            Err(Error::InvalidLabel { label: 4, num_classes: 3 })
        ));
    }

    #[test]
    fn poe_binary_loss_examples() {
        assert!((poe_binary_loss(0.0, 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(poe_binary_loss(0.0, 20.0).unwrap() < 3e-9);
        // Oracle: two-class cross-entropy of the combined logits [m + w, 0].
        let (m, w) = (1.5, -2.0);
        let combined = poe_combine(&lv(&[w, 0.0]), &lv(&[m, 0.0])).unwrap();
        let ce = cross_entropy(&combined, label(0, 2)).unwrap();
        let got = poe_binary_loss(m, w).unwrap();
        assert!((got - ce).abs() < 1e-12);
        assert!((got - 0.974_076_984_180_106_680_872_997_355_081_170_749_8).abs() < 1e-15);
        assert!(poe_binary_loss(f64::NAN, 0.0).is_err());
        // No overflow in the saturated regimes.
        assert_eq!(poe_binary_loss(0.0, 1e6).unwrap(), 0.0);
        assert!((poe_binary_loss(0.0, -1e6).unwrap() - 1e6).abs() < 1e-6);
    }

    #[test]
    fn binary_entropy_examples() {
        assert!((binary_entropy(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        let want = 0.325_082_973_391_448_239_506_550_028_223_817_939_2;
        assert!((binary_entropy(0.9).unwrap() - want).abs() < 1e-15);
        assert!(binary_entropy(1.2).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn categorical_entropy_examples() {
        let ln3 = 3f64.ln();
        assert!((categorical_entropy(&ProbVector::uniform(3)).unwrap() - ln3).abs() < 1e-15);
        let one_hot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(categorical_entropy(&one_hot).unwrap(), 0.0);
        let p = ProbVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        let want = 0.801_818_552_543_337_308_560_798_109_982_503_083_2;
        assert!((categorical_entropy(&p).unwrap() - want).abs() < 1e-15);
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        let raw = ProbVector::from_vec_unchecked(vec![1.5, -0.5]);
        assert!(matches!(categorical_entropy(&raw), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        // textbook covariance formula: cov = 3/4, var = 5/4 each
        assert!((pearson(&a, &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(
            pearson(&[1.0, 1.0], &[2.0, 2.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert_eq!(pearson(&a, &[5.0; 4]).unwrap(), 0.0);
        assert!(pearson(&a, &[1.0]).is_err());
    }

    fn logits(k: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, k)
    }

    proptest! {
        #[test]
        fn softmax_of_sum_is_normalized_product((w, m) in (2usize..=8).prop_flat_map(|k| (logits(k), logits(k)))) {
            let e = softmax(&poe_combine(&lv(&w), &lv(&m)).unwrap()).unwrap();
            for (got, want) in e.values().iter().zip(product_then_normalize(&w, &m)) {
                prop_assert!((got - want).abs() < 1e-12);
            }
        }

        #[test]
        fn binary_loss_is_two_class_cross_entropy(m in -50.0f64..50.0, w in -50.0f64..50.0) {
            let ce = cross_entropy(&lv(&[m + w, 0.0]), label(0, 2)).unwrap();
            prop_assert!((poe_binary_loss(m, w).unwrap() - ce).abs() < 1e-12);
        }

        #[test]
        fn cross_entropy_shift_invariant(z in logits(5), shift in -100.0f64..100.0, gold in 0usize..5) {
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let a = cross_entropy(&lv(&z), label(gold, 5)).unwrap();
            let b = cross_entropy(&lv(&shifted), label(gold, 5)).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn constant_logits_have_max_entropy(c in -500.0f64..500.0, k in 2usize..10) {
            let p = softmax(&lv(&vec![c; k])).unwrap();
            prop_assert!((categorical_entropy(&p).unwrap() - (k as f64).ln()).abs() < 1e-12);
        }

        #[test]
        fn pearson_affine_invariant(
            a in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 6),
            sa in 0.1f64..10.0, oa in -10.0f64..10.0,
            sb in 0.1f64..10.0, ob in -10.0f64..10.0,
        ) {
            prop_assume!(a.iter().any(|x| (x - a[0]).abs() > 1e-3));
            prop_assume!(b.iter().any(|x| (x - b[0]).abs() > 1e-3));
            let r = pearson(&a, &b).unwrap();
            let ta: Vec<f64> = a.iter().map(|x| sa * x + oa).collect();
            let tb: Vec<f64> = b.iter().map(|x| sb * x + ob).collect();
            prop_assert!((pearson(&ta, &tb).unwrap() - r).abs() < 1e-10);
            prop_assert!((-1.0..=1.0).contains(&r));
        }

        #[test]
        fn binary_entropy_symmetric_and_bounded(p in 0.0f64..=1.0) {
            let h = binary_entropy(p).unwrap();
            prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-15).contains(&h));
            prop_assert!((h - binary_entropy(1.0 - p).unwrap()).abs() < 1e-12);
        }
    }
}
