//! Acceptance criteria. Each test prints one PASS/FAIL line; run with
//! `cargo test --test acceptance -- --nocapture` to see them.

use std::f64::consts::LN_2;

use depfair::dataset::{seeded_rng, Dataset, Example, Group};
use depfair::features::{asymmetry_matrix, band_relative_power, segment, welch_psd, MultiChannelSignal, ALPHA, TOTAL};
use depfair::harness::{render_table, run_experiment_on, CellValue, ExperimentConfig, Format, MitigationSpec};
use depfair::inprocess::{apply_reweighing, reg_plus_pipeline, reweigh_table, weighted_discrimination, RegPenaltyConfig};
use depfair::metrics::{fairness, grouped_confusion, performance, ExtendedRatio};
use depfair::model::{self, batch_loss, cross_entropy, Architecture, LossSpec, ModelParams, TrainConfig};
use depfair::postprocess::{roc_adjust, RocConfig};
use depfair::preprocess::{apply_massaging, discrimination, massaging_plan, mixup_balance, relabel_pairs, MixupConfig};
use depfair::synth::biased_preset;
use rand::seq::SliceRandom;
use rand::Rng;
use Group::{S0, S1};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id:>2} {}: {name} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

fn counts_dataset(cells: &[(Group, u8, usize)]) -> Dataset {
    let mut examples = Vec::new();
    for &(g, y, n) in cells {
        for i in 0..n {
            examples.push(Example::new(vec![i as f64 * 0.1], f64::from(y), g, format!("{g}-{y}-{i}")));
        }
    }
    Dataset::new(examples, 1, ["minority".into(), "majority".into()])
}

fn mumtaz() -> Dataset {
    counts_dataset(&[(S0, 1, 13), (S0, 0, 8), (S1, 1, 17), (S1, 0, 20)])
}

// ---------------------------------------------------------------- 1

#[derive(Clone, Copy, Debug)]
struct Q(u64, u64);

#[derive(Debug, PartialEq)]
enum OracleRatio {
    Value(u64, u64),
    Inf,
    Equal,
}

fn oracle_ratio(a: Q, b: Q) -> OracleRatio {
    // rates with empty denominators count as zero
    let (an, ad) = if a.1 == 0 { (0, 1) } else { (a.0, a.1) };
    let (bn, bd) = if b.1 == 0 { (0, 1) } else { (b.0, b.1) };
    match (an == 0, bn == 0) {
        (true, true) => OracleRatio::Equal,
        (false, true) => OracleRatio::Inf,
        _ => OracleRatio::Value(an * bd, ad * bn),
    }
}

fn ratio_matches(r: &ExtendedRatio, o: &OracleRatio) -> bool {
    match (r, o) {
        (ExtendedRatio::Finite(v), OracleRatio::Value(n, d)) => {
            let exact = *n as f64 / *d as f64;
            (v - exact).abs() <= 1e-12 * exact.max(1.0)
        }
        (ExtendedRatio::PositiveInfinity, OracleRatio::Inf) => true,
        (ExtendedRatio::EqualByConvention, OracleRatio::Equal) => true,
        _ => false,
    }
}

fn opt_matches(v: Option<f64>, num: u64, den: u64) -> bool {
    match v {
        None => den == 0,
        Some(x) => den > 0 && (x - num as f64 / den as f64).abs() <= 1e-12,
    }
}

#[test]
fn c01_metrics_match_counting_oracle() {
    let mut rng = seeded_rng(101);
    let (mut inf_cases, mut equal_cases, mut bad) = (0, 0, Vec::new());
    for trial in 0..1000 {
        let n = rng.gen_range(2..=200);
        let mut groups: Vec<Group> = (0..n).map(|_| if rng.gen_bool(0.35) { S0 } else { S1 }).collect();
        groups[0] = S0;
        groups[1] = S1;
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        // Skewed predictors make zero rates, and hence inf / equal ratios, common.
        let mode = rng.gen_range(0..4);
        let predictions: Vec<u8> = (0..n)
            .map(|i| match (mode, groups[i]) {
                (1, S1) => 0,
                (2, _) => u8::from(labels[i] == 1 && rng.gen_bool(0.9)),
                (3, _) if n < 20 => 0,
                _ => u8::from(rng.gen_bool(0.5)),
            })
            .collect();

        let mut c = [[0u64; 4]; 2]; // tp, fp, tn, fn per group
        for i in 0..n {
            let k = match (labels[i], predictions[i]) {
                (1, 1) => 0,
                (0, 1) => 1,
                (0, 0) => 2,
                _ => 3,
            };
            c[groups[i].index()][k] += 1;
        }
        let all: Vec<u64> = (0..4).map(|k| c[0][k] + c[1][k]).collect();
        let (tp, fp, tn, fn_) = (all[0], all[1], all[2], all[3]);

        let gc = grouped_confusion(&labels, &predictions, &groups).unwrap();
        let perf = performance(&gc.combined);
        let fair = fairness(&gc).unwrap();

        let f1_ok = if tp + fn_ > 0 && tp + fp > 0 {
            opt_matches(perf.f1, 2 * tp, 2 * tp + fp + fn_)
        } else {
            perf.f1.is_none()
        };
        let perf_ok = opt_matches(perf.accuracy, tp + tn, n as u64)
            && opt_matches(perf.sensitivity, tp, tp + fn_)
            && opt_matches(perf.specificity, tn, tn + fp)
            && opt_matches(perf.precision, tp, tp + fp)
            && f1_ok;

        let g = |k: usize| {
            let [tp, fp, tn, fn_] = c[k];
            (tp, fp, tn, fn_)
        };
        let (tp0, fp0, tn0, fn0) = g(0);
        let (tp1, fp1, tn1, fn1) = g(1);
        let n0 = tp0 + fp0 + tn0 + fn0;
        let n1 = tp1 + fp1 + tn1 + fn1;
        let oracles = [
            oracle_ratio(Q(tp0 + fp0, n0), Q(tp1 + fp1, n1)),
            oracle_ratio(Q(tp0, tp0 + fn0), Q(tp1, tp1 + fn1)),
            oracle_ratio(Q(fp0, fp0 + tn0), Q(fp1, fp1 + tn1)),
            oracle_ratio(Q(tp0 + tn0, n0), Q(tp1 + tn1, n1)),
        ];
        let ratios = [fair.m_sp, fair.m_eopp, fair.m_eodd, fair.m_eacc];
        for o in &oracles {
            match o {
                OracleRatio::Inf => inf_cases += 1,
                OracleRatio::Equal => equal_cases += 1,
                _ => {}
            }
        }
        let fair_ok = ratios.iter().zip(&oracles).all(|(r, o)| ratio_matches(r, o));
        if !(perf_ok && fair_ok) {
            bad.push(trial);
        }
    }
    report(
        1,
        "metrics oracle equivalence",
        bad.is_empty() && inf_cases > 0 && equal_cases > 0,
        &format!("1000 instances, {} mismatches, {inf_cases} inf and {equal_cases} equal ratios", bad.len()),
    );
}

// ---------------------------------------------------------------- 2

fn positives(ds: &Dataset) -> usize {
    ds.examples.iter().filter(|e| e.hard_label() == 1).count()
}

#[test]
fn c02_massaging_arithmetic() {
    let tables = [
        ("mumtaz", [(S0, 1, 13), (S0, 0, 8), (S1, 1, 17), (S1, 0, 20)], 3usize),
        ("modma", [(S0, 1, 11), (S0, 0, 9), (S1, 1, 13), (S1, 0, 20)], 2),
        ("rest", [(S0, 1, 12), (S0, 0, 35), (S1, 1, 34), (S1, 0, 40)], 6),
    ];
    let mut rng = seeded_rng(202);
    let mut details = Vec::new();
    let mut ok = true;
    for (name, cells, want_m) in tables {
        let ds = counts_dataset(&cells);
        let before = discrimination(&ds).unwrap().disc;
        let (m, _) = relabel_pairs(&ds).unwrap();
        let probs: Vec<f64> = (0..ds.len()).map(|_| rng.gen()).collect();
        let massaged = apply_massaging(&ds, &massaging_plan(&ds, &probs).unwrap()).unwrap();
        let after = discrimination(&massaged).unwrap().disc;
        ok &= m == want_m && positives(&massaged) == positives(&ds) && after.abs() < before.abs();
        if name == "mumtaz" {
            ok &= (before - 124.0 / 777.0).abs() < 1e-15;
        }
        details.push(format!("{name}: m={m} disc {before:.4}->{after:.4}"));
    }
    report(2, "massaging arithmetic", ok, &details.join(", "));
}

// ---------------------------------------------------------------- 3

#[test]
fn c03_reweighing_identities() {
    let t = reweigh_table(&mumtaz()).unwrap();
    let expected = [
        (1, S0, 630.0 / 754.0),
        (1, S1, 1110.0 / 986.0),
        (0, S0, 588.0 / 464.0),
        (0, S1, 1036.0 / 1160.0),
    ];
    let mut ok = expected.iter().all(|&(y, g, b)| (t.weight(y, g) - b).abs() < 1e-9);
    let mut rng = seeded_rng(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cells: Vec<(Group, u8, usize)> = [(S0, 1), (S0, 0), (S1, 1), (S1, 0)]
            .iter()
            .map(|&(g, y)| (g, y, rng.gen_range(1..60)))
            .collect();
        let mut ds = counts_dataset(&cells);
        ds.examples.shuffle(&mut rng);
        let w = apply_reweighing(&ds, &reweigh_table(&ds).unwrap());
        let sum: f64 = w.examples.iter().map(|e| e.weight).sum();
        let wd = weighted_discrimination(&w).unwrap();
        worst = worst.max((sum - ds.len() as f64).abs()).max(wd.abs());
    }
    ok &= worst < 1e-9;
    report(3, "reweighing identities", ok, &format!("worst identity residual {worst:.2e}"));
}

// ---------------------------------------------------------------- 4

fn random_batch(rng: &mut impl Rng, dim: usize) -> Vec<Example> {
    let n = rng.gen_range(4..=16);
    (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // first four rows cover every (label, group) cell
            let y = if i < 4 { (i % 2) as f64 } else { f64::from(u8::from(rng.gen_bool(0.5))) };
            let g = if i < 4 { if i < 2 { S0 } else { S1 } } else if rng.gen_bool(0.4) { S0 } else { S1 };
            let mut e = Example::new(x, y, g, format!("u{i}"));
            e.weight = rng.gen_range(0.2..2.0);
            e
        })
        .collect()
}

#[test]
fn c04_gradients_match_finite_differences() {
    let mut rng = seeded_rng(404);
    let h = 1e-5;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let lambdas = [0.0, 0.5, 2.0];
    let gammas = [1.0, 10.0, 20.0];
    for trial in 0..200 {
        let dim = rng.gen_range(1..=4);
        let arch = if trial % 2 == 0 {
            Architecture::Logistic { dim }
        } else {
            Architecture::Mlp {
                dim,
                hidden: rng.gen_range(1..=5),
            }
        };
        let mut params = ModelParams::init(arch, trial);
        for v in &mut params.values {
            *v += rng.gen_range(-0.3..0.3);
        }
        let batch = random_batch(&mut rng, dim);
        let spec = match trial % 3 {
            0 => LossSpec::Plain,
            1 => LossSpec::Weighted,
            _ => LossSpec::Regularised(RegPenaltyConfig {
                lambda_eopp: *lambdas.choose(&mut rng).unwrap(),
                lambda_eodd: *lambdas.choose(&mut rng).unwrap(),
                gamma: *gammas.choose(&mut rng).unwrap(),
                two_stage: true,
            }),
        };
        let (_, grad) = batch_loss(&params, &batch, &spec).unwrap();
        for k in 0..params.values.len() {
            let mut plus = params.clone();
            plus.values[k] += h;
            let mut minus = params.clone();
            minus.values[k] -= h;
            let numeric = (batch_loss(&plus, &batch, &spec).unwrap().0 - batch_loss(&minus, &batch, &spec).unwrap().0) / (2.0 * h);
            // floor keeps exact zeros from dividing by zero
            let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    report(
        4,
        "gradient correctness",
        worst < 1e-4,
        &format!("200 triples, {checked} partials, worst relative error {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_mixup_contract() {
    let ds = counts_dataset(&[(S0, 1, 11), (S0, 0, 10), (S1, 1, 18), (S1, 0, 19)]);
    assert_eq!((ds.group_count(S1), ds.group_count(S0)), (37, 21));
    let cfg = MixupConfig::default();
    let out = mixup_balance(&ds, &cfg, 5).unwrap();
    let appended = out.dataset.len() - ds.len();
    let ok = cfg.alpha == 0.4
        && appended == 16
        && out.dataset.examples[..ds.len()] == ds.examples[..]
        && out.dataset.examples[ds.len()..].iter().all(|e| e.group == S0)
        && out.lambdas.iter().all(|l| (0.0..=1.0).contains(l))
        && out.dataset.group_count(S0) == out.dataset.group_count(S1);
    report(5, "mixup contract", ok, &format!("{appended} minority synthetics, alpha {}", cfg.alpha));
}

// ---------------------------------------------------------------- 6

#[test]
fn c06_roc_contract() {
    let mut rng = seeded_rng(606);
    let probs: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let groups: Vec<Group> = (0..10_000).map(|_| if rng.gen_bool(0.4) { S0 } else { S1 }).collect();
    let adjusted = roc_adjust(&probs, &groups, &RocConfig::default()).unwrap();
    let plain = depfair::metrics::threshold(&probs);
    let mut changed = 0;
    let mut ok = true;
    for i in 0..probs.len() {
        if adjusted[i] != plain[i] {
            changed += 1;
            ok &= groups[i] == S0 && (0.4..=0.6).contains(&probs[i]) && adjusted[i] == 1;
        }
    }
    ok &= changed > 0;
    report(6, "roc contract", ok, &format!("{changed} of 10000 predictions changed"));
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_end_to_end_bias_mitigation() {
    let mut unfair_base = 0;
    let mut fixed = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let data = biased_preset(1.5, seed);
        let cfg = ExperimentConfig {
            mitigations: vec!["none".parse().unwrap(), "reg_plus(2,2,20)".parse().unwrap()],
            seeds: vec![seed],
            ..ExperimentConfig::default()
        };
        let table = run_experiment_on(&cfg, &data).unwrap();
        let get = |col: &str, metric: &str| match table.cell(col, metric).unwrap().value {
            CellValue::Number { mean, .. } => mean,
            CellValue::Equal => 1.0,
            _ => f64::INFINITY,
        };
        let (b_eodd, b_acc) = (get("Base", "m_eodd"), get("Base", "accuracy"));
        let (r_eodd, r_acc) = (get("reg_plus(2,2,20)", "m_eodd"), get("reg_plus(2,2,20)", "accuracy"));
        let in_band = |v: f64| (0.8..=1.2).contains(&v);
        unfair_base += usize::from(!in_band(b_eodd));
        fixed += usize::from(in_band(r_eodd) && b_acc - r_acc <= 0.10);
        rows.push(format!("s{seed}: eodd {b_eodd:.2}->{r_eodd:.2} acc {b_acc:.3}->{r_acc:.3}"));
    }
    report(
        7,
        "end-to-end bias mitigation",
        unfair_base >= 4 && fixed >= 3,
        &format!("baseline unfair {unfair_base}/5, mitigated in band {fixed}/5; {}", rows.join("; ")),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn c08_reg_plus_degeneracy() {
    let data = biased_preset(1.5, 8);
    let arch = Architecture::Logistic { dim: data.feature_dim };
    let stage1 = TrainConfig {
        epochs: 10,
        seed: 81,
        ..TrainConfig::default()
    };
    let stage2 = |reg: RegPenaltyConfig, epochs| TrainConfig {
        epochs,
        seed: 82,
        loss: LossSpec::Regularised(reg),
        ..TrainConfig::default()
    };
    let original = reg_plus_pipeline(&data, arch, &stage1, &stage2(RegPenaltyConfig::original(2.0, 2.0), 5)).unwrap();
    let plus_one = reg_plus_pipeline(&data, arch, &stage1, &stage2(RegPenaltyConfig::plus(2.0, 2.0, 1.0), 5)).unwrap();
    let zero = reg_plus_pipeline(&data, arch, &stage1, &stage2(RegPenaltyConfig::plus(2.0, 2.0, 20.0), 0)).unwrap();
    let first = model::train(&data, arch, &stage1).unwrap().params;
    let bits = |p: &ModelParams| p.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let ok = bits(&original) == bits(&plus_one) && bits(&zero) == bits(&first) && bits(&original) != bits(&first);
    report(8, "reg+ degeneracy", ok, "gamma=1 equals original, zero stage-two epochs equals stage one");
}

// ---------------------------------------------------------------- 9

fn sine(freq: f64, fs: f64, seconds: f64) -> Vec<f64> {
    let n = (fs * seconds) as usize;
    (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
        .collect()
}

#[test]
fn c09_feature_numerics() {
    // 0.25 Hz resolution: one window over the whole 4 s record.
    let a = sine(10.0, 256.0, 4.0);
    let b = sine(20.0, 256.0, 4.0);
    let single = band_relative_power(&welch_psd(&a, 256.0, 1024, 0.5).unwrap(), ALPHA, TOTAL).unwrap();
    let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let split = band_relative_power(&welch_psd(&mixed, 256.0, 1024, 0.5).unwrap(), ALPHA, TOTAL).unwrap();

    let mut rng = seeded_rng(909);
    let antisymmetric = (0..1000).all(|_| {
        let n = rng.gen_range(2..20);
        let rp: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let m = asymmetry_matrix(&rp);
        (0..n).all(|i| m.values[i][i] == 0.0 && (0..n).all(|j| m.values[i][j] == -m.values[j][i]))
    });

    let signal = MultiChannelSignal::new(vec![vec![0.0; 300 * 256]], 256.0, vec!["c".into()]).unwrap();
    let segments = segment(&signal, 4.0).unwrap().len();

    let ok = single >= 0.95 && (split - 0.5).abs() <= 0.05 && antisymmetric && segments == 75;
    report(
        9,
        "feature numerics",
        ok,
        &format!("alpha rp {single:.4}, split {split:.4}, antisymmetry {antisymmetric}, {segments} segments"),
    );
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_determinism() {
    let data = biased_preset(1.0, 10);
    let cfg = ExperimentConfig {
        train: TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        },
        fine_tune_epochs: 4,
        mitigations: ["none", "mixup", "massaging", "reweighing", "regularisation(2,2)", "reg_plus(2,2,20)", "roc(0.6)"]
            .iter()
            .map(|s| s.parse::<MitigationSpec>().unwrap())
            .collect(),
        seeds: vec![1, 2],
        ..ExperimentConfig::default()
    };
    let render = || {
        let t = run_experiment_on(&cfg, &data).unwrap();
        [Format::Markdown, Format::Csv, Format::Json].map(|f| render_table(&t, f))
    };
    let tables_equal = render() == render();

    let mut shuffled = data.clone();
    shuffled.examples.shuffle(&mut seeded_rng(1010));
    let mut params_equal = true;
    for arch in [
        Architecture::Logistic { dim: 8 },
        Architecture::Mlp { dim: 8, hidden: 6 },
    ] {
        let tc = TrainConfig {
            epochs: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = model::train(&data, arch, &tc).unwrap().params;
        let b = model::train(&shuffled, arch, &tc).unwrap().params;
        params_equal &= a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    report(
        10,
        "determinism",
        tables_equal && params_equal,
        &format!("rendered tables identical {tables_equal}, row-permuted params identical {params_equal}"),
    );
}

// ---------------------------------------------------------------- 11

#[test]
fn c11_cross_entropy_spot_values() {
    let a = cross_entropy(1.0, 0.5);
    let b = cross_entropy(0.5, 0.5);
    let ok = (a - LN_2).abs() <= 1e-12 && (b - LN_2).abs() <= 1e-12;
    report(11, "cross-entropy spot values", ok, &format!("{a:.15}, {b:.15}"));
}
