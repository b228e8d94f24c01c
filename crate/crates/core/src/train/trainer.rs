use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TrainingSample;
use super::loss::{loss, LossWeights, TERM_NAMES};
use super::optim::{Adam, LrSchedule};
use crate::error::{contract, Error, Result};
use crate::pipeline::VmBhiNet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weights: LossWeights,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            schedule: LrSchedule::default(),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Overfitting run: full batch of 8, Adam at 1e-3, 500 steps.
    pub fn toy() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            schedule: LrSchedule::constant(1e-3),
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// One optimizer step: batch-mean total and unweighted terms before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: [f64; 9],
}

pub fn loss_csv_header() -> String {
    format!("step,epoch,lr,total,{}", TERM_NAMES.join(","))
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let terms: Vec<String> = self.terms.iter().map(f64::to_string).collect();
        format!(
            "{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.total,
            terms.join(",")
        )
    }
}

pub fn write_loss_csv(path: &std::path::Path, trace: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", loss_csv_header())?;
    for r in trace {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    Ok(())
}

/// Batch loss as the mean of per-sample losses, built in one graph.
pub fn batch_loss(net: &VmBhiNet, batch: &[&TrainingSample], w: &LossWeights) -> Result<(Tensor, [f64; 9])> {
    let mut total = Tensor::scalar(0.0);
    let mut terms = [0.0; 9];
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let l = loss(&net.forward(&s.image)?, s, w)?;
        total = total.add(&l.total)?;
        for (acc, t) in terms.iter_mut().zip(l.terms) {
            *acc += t * scale;
        }
    }
    Ok((total.mul_scalar(scale), terms))
}

/// Forward, loss, backward and Adam over `cfg.epochs` passes through `data`.
/// `on_step` sees every record as it is produced. A non-finite loss aborts
/// with its step index.
pub fn train_loop(
    net: &VmBhiNet,
    data: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(contract("training needs at least one sample"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    cfg.weights.validate()?;
    let params = net.params.tensors();
    let mut adam = Adam::new(&params, cfg.schedule.at(0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        adam.lr = cfg.schedule.at(epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let step = trace.len();
            // accumulate in sample order so the sum does not depend on the shuffle
            let mut idx = chunk.to_vec();
            idx.sort_unstable();
            let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &data[i]).collect();
            net.params.zero_grad();
            let (total, terms) = batch_loss(net, &batch, &cfg.weights)?;
            let value = total.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            total.backward()?;
            adam.step(&params)?;
            let rec = StepRecord {
                step,
                epoch,
                lr: adam.lr,
                total: value,
                terms,
            };
            on_step(&rec);
            trace.push(rec);
        }
    }
    Ok(trace)
}
