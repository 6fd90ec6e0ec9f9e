//! Acceptance criteria 1 to 10, one PASS/FAIL line each.
//!
//! Run with `cargo test --release --test acceptance -- --nocapture` to see
//! the lines as they are produced. Criteria 9 and 10 train six desk-scale
//! models twice and take a few minutes on one core.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use stag_core::accounting::{count_tunable_params, CostInputs};
use stag_core::backbone::BackboneConfig;
use stag_core::model::{Model, Strategy};
use stag_core::side::{RefineFn, StagConfig};
use stag_core::train::head_param_count;
use stag_core::{Precision, RngStream};
use stag_harness::dataset::{generate_splits, load_dataset};
use stag_harness::experiment::{run_on_dataset, ExperimentSummary};
use stag_harness::verify::{
    edgeconv_equivalence, elision, flop_ratio, geometry, gradient_check, init_identity, lr_endpoints,
    EQUIVALENCE_TOL_DOUBLE, EQUIVALENCE_TOL_SINGLE, GRADIENT_REL_TOL,
};
use stag_harness::ExperimentConfig;

const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(5);
const ELISION_BUDGET: Duration = Duration::from_secs(30);
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const TRAINING_BUDGET: Duration = Duration::from_secs(15 * 60);

/// Floor on mean stag_std test accuracy, confirmed by calibration runs at
/// the desk configuration (seeds 1, 2, 3: 0.72, 0.73, 0.65).
const ACCURACY_FLOOR: f64 = 0.70;
const SEEDS: [u64; 3] = [1, 2, 3];
const TEST_PER_CLASS: usize = 25;

type Outcome = Result<String, String>;

fn within(start: Instant, budget: Duration, what: &str) -> Result<Duration, String> {
    let t = start.elapsed();
    if t < budget {
        Ok(t)
    } else {
        Err(format!("{what} took {t:.1?}, budget {budget:?}"))
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let single = edgeconv_equivalence::<f32>(100, 0, false).map_err(|e| e.to_string())?;
    let double = edgeconv_equivalence::<f64>(100, 0, false).map_err(|e| e.to_string())?;
    if single > EQUIVALENCE_TOL_SINGLE || double > EQUIVALENCE_TOL_DOUBLE {
        return Err(format!("max diff single {single:e}, double {double:e}"));
    }
    let t = within(start, EQUIVALENCE_BUDGET, "100 instances per precision")?;
    Ok(format!("100 instances, max diff single {single:.2e}, double {double:.2e}, {t:.2?}"))
}

fn criterion_2() -> Outcome {
    flop_ratio().map_err(|e| e.to_string())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let detail = elision(&[0, 1, 2, 3], 0).map_err(|e| e.to_string())?;
    let t = within(start, ELISION_BUDGET, "elision suite")?;
    Ok(format!("L=4, A in 0..=3: {detail}; {t:.2?}"))
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let errs = gradient_check(0).map_err(|e| e.to_string())?;
    let (name, worst) = errs.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if worst > GRADIENT_REL_TOL {
        return Err(format!("{name}: relative error {worst:e}"));
    }
    let t = within(start, GRADIENT_BUDGET, "gradient check")?;
    Ok(format!("{} groups, worst {worst:.2e} ({name}), {t:.2?}", errs.len()))
}

fn criterion_5() -> Outcome {
    let single = init_identity::<f32>(0).map_err(|e| e.to_string())?;
    let double = init_identity::<f64>(0).map_err(|e| e.to_string())?;
    Ok(format!("{single} single and {double} double configurations bit-identical to the bare backbone"))
}

fn side_closed_form(d: usize, dp: usize, d_groups: usize, m_groups: usize) -> usize {
    let down = d * dp + dp;
    let graph = 3 * dp * dp + dp;
    let up = dp * d + d;
    d_groups * down + m_groups * (graph + up)
}

fn criterion_6() -> Outcome {
    let mut checked = 0;
    for (bb, classes) in [(BackboneConfig { d: 8, layers: 4, tokens: 8, heads: 2, mlp_ratio: 2, group_size: 4 }, 3), (BackboneConfig::full_scale(), 15)] {
        let inputs = CostInputs {
            backbone: bb,
            side: StagConfig::std(bb.d, bb.layers, 2).with_refine(RefineFn::EfficientEdgeConv),
            classes,
            precision: Precision::Single,
            batch_size: 32,
        };
        let head = head_param_count(bb.d, classes);
        let dp = bb.d / 2;
        // sl groups: D over all L blocks, G and U over the L - L/4 M-blocks, runs of three.
        let sl_m = bb.layers - bb.layers / 4;
        let expected = [
            (Strategy::HeadOnly, head),
            (Strategy::StagStd, side_closed_form(bb.d, dp, 1, 1) + head),
            (Strategy::StagSl, side_closed_form(bb.d, dp, bb.layers.div_ceil(3), sl_m.div_ceil(3)) + head),
        ];
        let mut counts = Vec::new();
        for (strategy, want) in expected {
            let got = count_tunable_params(&inputs, strategy).map_err(|e| e.to_string())?;
            if got != want {
                return Err(format!("d={}: {strategy} counted {got}, closed form {want}", bb.d));
            }
            counts.push(got);
        }
        let full = count_tunable_params(&inputs, Strategy::Full).map_err(|e| e.to_string())?;
        for strategy in Strategy::TABLE {
            let mut m = Model::<f32>::new(inputs.model_config(strategy), &mut RngStream::new(0, "bb"), &RngStream::new(0, "init"))
                .map_err(|e| e.to_string())?;
            m.apply_strategy(strategy).map_err(|e| e.to_string())?;
            let want = count_tunable_params(&inputs, strategy).map_err(|e| e.to_string())?;
            if m.store.tunable_count() != want {
                return Err(format!("d={}: {strategy} store holds {} tunable, counted {want}", bb.d, m.store.tunable_count()));
            }
        }
        counts.push(full);
        if !counts.windows(2).all(|w| w[0] < w[1]) {
            return Err(format!("d={}: ordering head_only < stag_std < stag_sl < full violated: {counts:?}", bb.d));
        }
        checked += 1;
    }
    let head = head_param_count(384, 15);
    let rounded = (head as f64 / 1e4).round() / 100.0;
    if head != 266_511 || rounded != 0.27 {
        return Err(format!("full-scale head count {head} ({rounded}M)"));
    }
    let full = CostInputs {
        backbone: BackboneConfig::full_scale(),
        side: StagConfig::std(384, 12, 8),
        classes: 15,
        precision: Precision::Single,
        batch_size: 32,
    };
    let std_total = count_tunable_params(&full, Strategy::StagStd).map_err(|e| e.to_string())?;
    Ok(format!(
        "{checked} scales match closed forms and stores; head 266,511 (0.27M); stag_std {std_total} vs reported 0.43M (gap documented)"
    ))
}

fn criterion_7() -> Outcome {
    lr_endpoints().map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    geometry(0).map_err(|e| e.to_string())
}

fn desk_config(data: &Path, out: &Path, strategy: Strategy) -> ExperimentConfig {
    ExperimentConfig {
        strategy: strategy.as_str().into(),
        seeds: SEEDS.to_vec(),
        deterministic: true,
        train_manifest: data.join("train/manifest.tsv"),
        test_manifest: data.join("test/manifest.tsv"),
        out_dir: out.join(strategy.as_str()),
        ..ExperimentConfig::default()
    }
}

/// Trains stag_std and head_only for every seed under `out`.
fn desk_runs(data: &Path, out: &Path) -> Result<(ExperimentSummary, ExperimentSummary), String> {
    let probe = desk_config(data, out, Strategy::StagStd);
    let dataset = load_dataset(&probe.train_manifest, &probe.test_manifest).map_err(|e| e.to_string())?;
    let stag = run_on_dataset(&probe, &dataset).map_err(|e| e.to_string())?;
    let head = run_on_dataset(&desk_config(data, out, Strategy::HeadOnly), &dataset).map_err(|e| e.to_string())?;
    Ok((stag, head))
}

/// Correct test predictions summed over seeds; accuracies are exact
/// multiples of one over the test-set size.
fn total_correct(s: &ExperimentSummary, test_size: usize) -> usize {
    s.accuracies().iter().map(|a| (a * test_size as f64).round() as usize).sum()
}

fn criterion_9(data: &Path, out: &Path) -> Outcome {
    let start = Instant::now();
    let (stag, head) = desk_runs(data, out)?;
    let t = within(start, TRAINING_BUDGET, "desk training")?;
    let test_size = 4 * TEST_PER_CLASS;
    let (cs, ch) = (total_correct(&stag, test_size), total_correct(&head, test_size));
    let floor = (ACCURACY_FLOOR * (SEEDS.len() * test_size) as f64).round() as usize;
    let line = format!(
        "stag_std mean {:.4} {:?}, head_only mean {:.4} {:?}, floor {ACCURACY_FLOOR}, {t:.0?}",
        stag.mean_test_acc,
        stag.accuracies(),
        head.mean_test_acc,
        head.accuracies()
    );
    if cs < ch {
        return Err(format!("stag_std below head_only: {line}"));
    }
    if cs < floor {
        return Err(format!("stag_std below floor ({cs} of {} correct, need {floor}): {line}", SEEDS.len() * test_size));
    }
    Ok(line)
}

fn criterion_10(data: &Path, first: &Path, second: &Path) -> Outcome {
    desk_runs(data, second)?;
    let mut compared = 0;
    for strategy in [Strategy::StagStd, Strategy::HeadOnly] {
        for seed in SEEDS {
            let name = format!("{}/metrics_seed{seed}.csv", strategy.as_str());
            let a = fs::read(first.join(&name)).map_err(|e| format!("{name}: {e}"))?;
            let b = fs::read(second.join(&name)).map_err(|e| format!("{name}: {e}"))?;
            if a != b {
                return Err(format!("{name} differs between runs"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} metrics CSVs byte-identical across two runs"))
}

fn report(n: usize, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("PASS criterion {n}: {detail}"),
        Err(detail) => println!("FAIL criterion {n}: {detail}"),
    }
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    let (first, second) = (work.path().join("run1"), work.path().join("run2"));
    generate_splits(&data, 100, TEST_PER_CLASS, 256, 0.01, 0).unwrap();

    let checks: Vec<Box<dyn Fn() -> Outcome>> = vec![
        Box::new(criterion_1),
        Box::new(criterion_2),
        Box::new(criterion_3),
        Box::new(criterion_4),
        Box::new(criterion_5),
        Box::new(criterion_6),
        Box::new(criterion_7),
        Box::new(criterion_8),
        Box::new(|| criterion_9(&data, &first)),
        Box::new(|| criterion_10(&data, &first, &second)),
    ];
    let failed: Vec<usize> = checks
        .iter()
        .enumerate()
        .filter_map(|(i, check)| (!report(i + 1, &check())).then_some(i + 1))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
