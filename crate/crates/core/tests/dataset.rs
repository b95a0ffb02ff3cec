use poe_debias::biasgen::{self, bayes_accuracy, generate, permutation, DatasetBundle, Example, GenSpec, SignalKind};
use poe_debias::Error;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

fn small(seed: u64) -> GenSpec {
    GenSpec {
        train_size: 400,
        eval_size: 150,
        p_cheat: 0.8,
        seed,
        ..GenSpec::default()
    }
}

fn saved(bundle: &DatasetBundle) -> Vec<u8> {
    let mut out = Vec::new();
    biasgen::save(bundle, &mut out).unwrap();
    out
}

/// Class named by the example's bias token, if any.
fn bias_class(spec: &GenSpec, e: &Example) -> Option<usize> {
    (0..spec.num_classes).find(|&c| e.features.contains(spec.hash_token(spec.bias_token(c))))
}

fn mutual_information(pairs: &[(usize, usize)], k: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut joint = vec![vec![0.0; k]; k];
    for &(b, y) in pairs {
        joint[b][y] += 1.0;
    }
    let row: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..k).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
    let mut mi = 0.0;
    for b in 0..k {
        for y in 0..k {
            if joint[b][y] > 0.0 {
                mi += joint[b][y] / n * (joint[b][y] * n / (row[b] * col[y])).ln();
            }
        }
    }
    mi
}

fn fixed(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

#[test]
fn round_trip_is_lossless() {
    let bundle = generate(&small(3)).unwrap();
    let bytes = saved(&bundle);
    let back = biasgen::load(bytes.as_slice()).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(saved(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.tsv");
    biasgen::save_to_path(&bundle, &path).unwrap();
    assert_eq!(biasgen::load_from_path(&path).unwrap(), bundle);
}

#[test]
fn truncated_file_names_last_valid_line() {
    let bytes = saved(&generate(&small(4)).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    let kept: Vec<&str> = text.lines().take(11).collect();
    match biasgen::load(format!("{}\n", kept.join("\n")).as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 11),
        other => panic!("expected a parse error, got {other:?}"),
    }

    // cut in the middle of a feature list
    let cut = &text[..text.len() - 3];
    assert!(matches!(biasgen::load(cut.as_bytes()), Err(Error::Parse { .. })));
    assert!(matches!(biasgen::load(&b""[..]), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn three_line_fixture_parses() {
    let fixture = "\
#genspec k=3 v=200 d=256 l=3 q=0.8 signal=framed p_cheat=0.8 bias_rho=0 n_train=1 n_eval=1 seed=0
0\t1\t1\t1\t5:1,201:1,204:1
1\t0\t1\t0\t10:2,202:1,203:1
2\t2\t1\t0\t150:1,200:1,205:1
";
    let bundle = biasgen::load(fixture.as_bytes()).unwrap();
    assert_eq!((bundle.train.len(), bundle.eval_clean.len(), bundle.eval_anti.len()), (1, 1, 1));
    assert_eq!(bundle.eval_clean[0].features.iter().collect::<Vec<_>>(), vec![(10, 2.0), (202, 1.0), (203, 1.0)]);
    assert_eq!(saved(&bundle), fixture.as_bytes());
}

#[test]
fn inconsistent_provenance_is_rejected() {
    let header = "#genspec k=3 v=200 d=256 l=3 q=0.8 signal=framed p_cheat=0.8 bias_rho=0 n_train=1 n_eval=1 seed=0\n";
    for line in ["0\t1\t0\t0\t5:1,201:1\n", "0\t1\t1\t1\t5:1,202:1\n", "0\t1\t1\t0\t5:1,999:1\n", "0\t7\t1\t0\t5:1,201:1\n"] {
        let rest = "1\t0\t1\t0\t10:1,202:1\n2\t2\t1\t0\t150:1,200:1\n";
        let err = biasgen::load(format!("{header}{line}{rest}").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{line:?}: {err}");
    }
}

#[test]
fn bias_only_bayes_is_perfect_on_train_and_chance_on_clean() {
    let spec = GenSpec {
        p_cheat: 1.0,
        signal_strength: 1.0 / 3.0 + 1e-9,
        seed: 11,
        ..GenSpec::default()
    };
    let bundle = generate(&spec).unwrap();
    assert_eq!(bayes_accuracy(&spec, &bundle.train, true).unwrap(), 1.0);
    let clean = bayes_accuracy(&spec, &bundle.eval_clean, true).unwrap();
    let se = (1.0 / 3.0 * 2.0 / 3.0 / bundle.eval_clean.len() as f64).sqrt();
    assert!((clean - 1.0 / 3.0).abs() < 3.0 * se, "clean accuracy {clean}");
}

#[test]
fn unbiased_train_and_clean_are_exchangeable() {
    let gaps: Vec<f64> = (0..5)
        .map(|s| {
            let spec = GenSpec { seed: 40 + s, ..GenSpec::default() };
            let b = generate(&spec).unwrap();
            bayes_accuracy(&spec, &b.train, false).unwrap() - bayes_accuracy(&spec, &b.eval_clean, false).unwrap()
        })
        .collect();
    let mean = gaps.iter().sum::<f64>() / 5.0;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!(mean.abs() <= 2.0 * sd / 5f64.sqrt(), "gaps {gaps:?}");
}

proptest! {
    #![proptest_config(fixed(24))]

    #[test]
    fn same_seed_gives_identical_bytes(seed in any::<u64>(), p in 0.0f64..=1.0, direct in any::<bool>()) {
        let spec = GenSpec {
            p_cheat: p,
            signal: if direct { SignalKind::Direct } else { SignalKind::Framed },
            ..small(seed)
        };
        prop_assert_eq!(saved(&generate(&spec).unwrap()), saved(&generate(&spec).unwrap()));
    }

    #[test]
    fn splits_are_disjoint_and_provenance_matches_features(seed in any::<u64>(), rho in 0.0f64..=1.0) {
        let spec = GenSpec { p_cheat: 0.0, bias_rho: rho, ..small(seed) };
        let b = generate(&spec).unwrap();
        let mut ids: Vec<u64> = b.all_examples().map(|e| e.id).collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
        for e in b.all_examples() {
            let class = bias_class(&spec, e);
            prop_assert_eq!(class.is_some(), e.provenance.bias_token_present);
            prop_assert_eq!(class == Some(e.gold.get()), e.provenance.bias_aligned);
        }
    }

    #[test]
    fn anti_split_is_never_aligned(seed in any::<u64>(), p in 0.0f64..=1.0, soft in any::<bool>()) {
        let spec = if soft { GenSpec { p_cheat: 0.0, bias_rho: p, ..small(seed) } } else { GenSpec { p_cheat: p, ..small(seed) } };
        let b = generate(&spec).unwrap();
        prop_assert!(b.eval_anti.iter().all(|e| !e.provenance.bias_aligned && e.provenance.bias_token_present));
    }

    #[test]
    fn train_alignment_rate_within_three_standard_errors(seed in any::<u64>(), p in 0.05f64..0.95, soft in any::<bool>()) {
        let spec = if soft {
            GenSpec { p_cheat: 0.0, bias_rho: p, train_size: 2000, ..small(seed) }
        } else {
            GenSpec { p_cheat: p, train_size: 2000, ..small(seed) }
        };
        let b = generate(&spec).unwrap();
        let carrying: Vec<&Example> = b.train.iter().filter(|e| e.provenance.bias_token_present).collect();
        let n = carrying.len() as f64;
        let rate = carrying.iter().filter(|e| e.provenance.bias_aligned).count() as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        prop_assert!((rate - p).abs() < 3.0 * se, "rate {} vs {}", rate, p);
    }
}

#[test]
fn clean_bias_token_carries_no_label_information() {
    for seed in 0..5 {
        let spec = GenSpec { p_cheat: 0.9, seed, ..GenSpec::default() };
        let b = generate(&spec).unwrap();
        let k = spec.num_classes;
        let mut pairs: Vec<(usize, usize)> = b
            .eval_clean
            .iter()
            .map(|e| (bias_class(&spec, e).unwrap(), e.gold.get()))
            .collect();
        let observed = mutual_information(&pairs, k);
        let labels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let rounds = 500;
        let mut at_least = 0;
        for r in 0..rounds {
            let perm = permutation(labels.len(), seed * 1000 + r);
            for (pair, &j) in pairs.iter_mut().zip(&perm) {
                pair.1 = labels[j];
            }
            at_least += usize::from(mutual_information(&pairs, k) >= observed - 1e-12);
        }
        let p_value = (1 + at_least) as f64 / (1 + rounds) as f64;
        assert!(p_value > 0.01, "seed {seed}: mi {observed} p {p_value}");
    }
}
