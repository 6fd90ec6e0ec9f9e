//! Multi-seed runs, evaluation of saved parameters and ablation sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stag_core::accounting::{cost_report, CostInputs, CostReport, CostTable};
use stag_core::model::{Model, ModelConfig, Strategy};
use stag_core::train::finetune::prepare_eval;
use stag_core::train::{evaluate, finetune, Dataset, EpochMetrics, FinetuneReport};
use stag_core::{weights, Error, Precision, Real, Result, RngStream};

use crate::config::ExperimentConfig;
use crate::dataset::load_dataset;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc,epoch_time_s";

pub fn cost_inputs(cfg: &ExperimentConfig, classes: usize) -> Result<CostInputs> {
    Ok(CostInputs {
        backbone: cfg.backbone(),
        side: cfg.side_template()?,
        classes,
        precision: cfg.precision()?,
        batch_size: cfg.batch_size,
    })
}

pub fn model_config(cfg: &ExperimentConfig, classes: usize) -> Result<ModelConfig> {
    let mut mc = cost_inputs(cfg, classes)?.model_config(cfg.strategy()?);
    mc.dropout = cfg.dropout;
    Ok(mc)
}

/// Backbone weights come from `backbone_seed` alone; side and head
/// initialisation from the training seed.
pub fn build_model<T: Real>(cfg: &ExperimentConfig, classes: usize, seed: u64) -> Result<Model<T>> {
    let mut backbone_rng = RngStream::new(cfg.backbone_seed, "backbone");
    Model::new(model_config(cfg, classes)?, &mut backbone_rng, &RngStream::new(seed, "init"))
}

/// Wall time is written as 0 in deterministic mode so that reruns are
/// byte-identical.
pub fn metrics_csv(metrics: &[EpochMetrics], deterministic: bool) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in metrics {
        let time = if deterministic { 0.0 } else { m.epoch_time_s };
        let _ = writeln!(s, "{},{:e},{:.8},{:.6},{:.6},{:.3}", m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc, time);
    }
    s
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub report: FinetuneReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub strategy: String,
    pub runs: Vec<SeedRun>,
    pub mean_test_acc: f64,
    pub cost: CostReport,
    pub out_dir: PathBuf,
}

impl ExperimentSummary {
    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.final_test_acc).collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut header = String::from("strategy,mean_test_acc");
        let mut row = format!("{},{:.6}", self.strategy, self.mean_test_acc);
        for r in &self.runs {
            let _ = write!(header, ",acc_seed_{}", r.seed);
            let _ = write!(row, ",{:.6}", r.report.final_test_acc);
        }
        format!("{header}\n{row}\n")
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_typed<T: Real>(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentSummary> {
    let classes = data.classes();
    let strategy = cfg.strategy()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut model = build_model::<T>(cfg, classes, seed)?;
        let report = finetune(data, &mut model, &cfg.train_config(seed)?)?;
        write(&out.join(format!("metrics_seed{seed}.csv")), metrics_csv(&report.metrics, cfg.deterministic))?;
        weights::save(&out.join(format!("params_seed{seed}.bin")), &model.store, |e| !e.frozen)?;
        runs.push(SeedRun { seed, report });
    }
    let mean = if runs.is_empty() {
        0.0
    } else {
        runs.iter().map(|r| r.report.final_test_acc).sum::<f64>() / runs.len() as f64
    };
    let cost = cost_report(&cost_inputs(cfg, classes)?, strategy)?;
    let table = CostTable { rows: vec![cost.clone()] };
    write(&out.join("cost.csv"), table.to_csv())?;
    write(&out.join("cost.txt"), table.to_text())?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let summary = ExperimentSummary { strategy: strategy.to_string(), runs, mean_test_acc: mean, cost, out_dir: out.clone() };
    write(&out.join("summary.csv"), summary.summary_csv())?;
    Ok(summary)
}

/// Fine-tunes once per seed on an already loaded dataset and writes
/// per-seed metrics and parameters, the summary, the cost report and the
/// effective config into `out_dir`.
pub fn run_on_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentSummary> {
    cfg.validate()?;
    match cfg.precision()? {
        Precision::Single => run_typed::<f32>(cfg, data),
        Precision::Double => run_typed::<f64>(cfg, data),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let data = load_dataset(&cfg.train_manifest, &cfg.test_manifest)?;
    run_on_dataset(cfg, &data)
}

fn evaluate_typed<T: Real>(cfg: &ExperimentConfig, data: &Dataset, params: &Path, seed: u64) -> Result<f64> {
    let mut model = build_model::<T>(cfg, data.classes(), seed)?;
    weights::load(params, &mut model.store)?;
    let test = prepare_eval(&model, &data.test, data.classes())?;
    evaluate(&model, &test)
}

/// Test accuracy of a saved parameter file.
pub fn evaluate_params(cfg: &ExperimentConfig, params: &Path, seed: u64) -> Result<f64> {
    let data = load_dataset(&cfg.train_manifest, &cfg.test_manifest)?;
    match cfg.precision()? {
        Precision::Single => evaluate_typed::<f32>(cfg, &data, params, seed),
        Precision::Double => evaluate_typed::<f64>(cfg, &data, params, seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    ABlocks,
    K,
    RefineFn,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "a_blocks" => Ok(SweepAxis::ABlocks),
            "k" => Ok(SweepAxis::K),
            "refine_fn" => Ok(SweepAxis::RefineFn),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (expected A, k or refine_fn)"))),
        }
    }
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ABlocks => "A",
            SweepAxis::K => "k",
            SweepAxis::RefineFn => "refine_fn",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let int = || value.parse::<usize>().map_err(|_| Error::Config(format!("{}: `{value}` is not a count", self.as_str())));
        match self {
            SweepAxis::ABlocks => cfg.a_blocks = int()?,
            SweepAxis::K => cfg.k = int()?,
            SweepAxis::RefineFn => cfg.refine_fn = value.to_string(),
        }
        cfg.validate()
    }
}

#[derive(Debug)]
pub struct SweepRow {
    pub value: String,
    pub outcome: Result<ExperimentSummary>,
}

#[derive(Debug)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "axis,value,status,mean_test_acc,tunable_params,forward_flops,backward_flops,est_memory_bytes,error\n",
        );
        for r in &self.rows {
            let _ = match &r.outcome {
                Ok(sum) => writeln!(
                    s,
                    "{},{},ok,{:.6},{},{},{},{},",
                    self.axis.as_str(),
                    r.value,
                    sum.mean_test_acc,
                    sum.cost.tunable_params,
                    sum.cost.forward_flops,
                    sum.cost.backward_flops,
                    sum.cost.est_memory_bytes
                ),
                Err(e) => writeln!(s, "{},{},error,,,,,,\"{}\"", self.axis.as_str(), r.value, e.to_string().replace('"', "'")),
            };
        }
        s
    }
}

/// One experiment per value; a failing value is recorded in its row and
/// the sweep moves on.
pub fn sweep_on_dataset(cfg: &ExperimentConfig, data: &Dataset, axis: SweepAxis, values: &[String]) -> Result<SweepTable> {
    let strategy = cfg.strategy()?;
    let ok = match axis {
        SweepAxis::ABlocks => strategy == Strategy::StagCustom,
        SweepAxis::K | SweepAxis::RefineFn => strategy.uses_side(),
    };
    if !ok {
        return Err(Error::Config(format!("sweep axis {} is not valid for strategy {strategy}", axis.as_str())));
    }
    let rows = values
        .iter()
        .map(|value| {
            let mut c = cfg.clone();
            c.out_dir = cfg.out_dir.join(format!("{}_{value}", axis.as_str()));
            let outcome = axis.apply(&mut c, value).and_then(|()| run_on_dataset(&c, data));
            SweepRow { value: value.clone(), outcome }
        })
        .collect();
    let table = SweepTable { axis, rows };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write(&cfg.out_dir.join(format!("sweep_{}.csv", axis.as_str())), table.to_csv())?;
    Ok(table)
}

pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepTable> {
    let data = load_dataset(&cfg.train_manifest, &cfg.test_manifest)?;
    sweep_on_dataset(cfg, &data, axis, values)
}
