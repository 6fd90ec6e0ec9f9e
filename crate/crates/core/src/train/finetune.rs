use std::time::Instant;

use super::{optim::AdamW, schedule::cosine_lr, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{augment, PointCloud};
use crate::matrix::Matrix;
use crate::model::{Model, Prepared};
use crate::params::ParamId;
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::{Scope, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub epoch_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub metrics: Vec<EpochMetrics>,
    /// Test accuracy of the returned parameters.
    pub final_test_acc: f64,
    pub first_batch_loss: Option<f64>,
    pub tunable_names: Vec<String>,
    pub tunable_params: usize,
}

fn label_of(cloud: &PointCloud, classes: usize) -> Result<usize> {
    let label = cloud
        .label
        .ok_or_else(|| Error::Data(format!("cloud `{}` has no label", cloud.source_id)))?;
    if label >= classes {
        return Err(Error::Label { label, classes });
    }
    Ok(label)
}

fn argmax<T: Real>(m: &Matrix<T>) -> usize {
    let row = m.row(0);
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Fraction of `inputs` classified correctly (no dropout, no augmentation).
pub fn evaluate<T: Real>(model: &Model<T>, inputs: &[(Prepared, usize)]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (prepared, label) in inputs {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, prepared, None)?;
        if argmax(tape.value(fwd.logits)) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / inputs.len() as f64)
}

/// Test clouds reduced with a fixed FPS start.
pub fn prepare_eval<T: Real>(model: &Model<T>, clouds: &[PointCloud], classes: usize) -> Result<Vec<(Prepared, usize)>> {
    clouds
        .iter()
        .map(|c| Ok((model.prepare(c, None)?, label_of(c, classes)?)))
        .collect()
}

struct SampleResult<T> {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Matrix<T>>>,
}

fn train_sample<T: Real>(
    model: &Model<T>,
    cloud: &PointCloud,
    label: usize,
    weight: T,
    tunables: &[ParamId],
    rng: &RngStream,
    deterministic: bool,
) -> Result<SampleResult<T>> {
    let augmented = augment(cloud, &mut rng.derive("augment"));
    let mut fps_rng = rng.derive("fps");
    let prepared = model.prepare(&augmented, if deterministic { None } else { Some(&mut fps_rng) })?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &prepared, Some(&mut rng.derive("dropout")))?;
    tape.set_scope(Scope::Loss);
    let ce = tape.cross_entropy(fwd.logits, label)?;
    let loss = tape.value(ce).get(0, 0).as_f64();
    let correct = argmax(tape.value(fwd.logits)) == label;
    let scaled = tape.scale(ce, weight);
    tape.backward(scaled)?;
    let grads = tunables.iter().map(|&id| tape.param_grad(id).cloned()).collect();
    Ok(SampleResult { loss, correct, grads })
}

/// Fine-tunes the tunable subset selected by `config.strategy`.
///
/// Per epoch: seeded shuffle, augmentation of each training cloud, forward,
/// cross-entropy, backward and one AdamW step per batch at the cosine
/// learning rate of the epoch. Gradients are summed in batch order, so the
/// result depends only on the seed.
pub fn finetune<T: Real>(dataset: &Dataset, model: &mut Model<T>, config: &TrainConfig) -> Result<FinetuneReport> {
    if dataset.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(side) = &model.side {
        if side.config.a_blocks == side.config.layers {
            return Err(Error::Config(
                "A = L leaves no modulation block, so the side network cannot affect the loss".into(),
            ));
        }
    }
    model.apply_strategy(config.strategy)?;
    let classes = dataset.classes();
    if classes != model.config.classes {
        return Err(Error::Config(format!(
            "dataset has {classes} classes, model head has {}",
            model.config.classes
        )));
    }
    let labels: Vec<usize> = dataset.train.iter().map(|c| label_of(c, classes)).collect::<Result<_>>()?;
    let test = prepare_eval(model, &dataset.test, classes)?;

    let tunables = model.store.tunable_ids();
    let tunable_names = tunables.iter().map(|&id| model.store.entry(id).name.clone()).collect();
    let tunable_params = model.store.tunable_count();
    let mut opt = AdamW::new(&model.store);
    let base = RngStream::new(config.seed, "finetune");
    let last = config.epochs.saturating_sub(1);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut first_batch_loss = None;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = cosine_lr(epoch, last, config.lr_max, config.lr_min)?;
        let order = base.derive("shuffle").at(epoch as u64).permutation(dataset.train.len());
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let weight = T::one() / T::lit(batch.len() as f64);
            let mut acc: Vec<Option<Matrix<T>>> = vec![None; tunables.len()];
            let mut batch_loss = 0.0;
            for &idx in batch {
                let rng = base.derive(format!("sample/{epoch}/{idx}"));
                let r = train_sample(model, &dataset.train[idx], labels[idx], weight, &tunables, &rng, config.deterministic)?;
                batch_loss += r.loss;
                correct += usize::from(r.correct);
                for (slot, g) in acc.iter_mut().zip(r.grads) {
                    match (slot.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *slot = Some(g),
                        (_, None) => {}
                    }
                }
            }
            first_batch_loss.get_or_insert(batch_loss / batch.len() as f64);
            loss_sum += batch_loss;
            opt.step(&mut model.store, &acc, lr, config.weight_decay)?;
        }
        let test_acc = evaluate(model, &test)?;
        let n = dataset.train.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc,
            epoch_time_s: start.elapsed().as_secs_f64(),
        });
    }
    let final_test_acc = match metrics.last() {
        Some(m) => m.test_acc,
        None => evaluate(model, &test)?,
    };
    Ok(FinetuneReport { metrics, final_test_acc, first_batch_loss, tunable_names, tunable_params })
}
