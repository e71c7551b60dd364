//! Minibatch training of the noise estimator against the diffusion loss.
//!
//! Each epoch shuffles the pair indices, draws a fresh `(tau, eps)` per
//! sample, pollutes the action with the closed-form rule and regresses the
//! estimator output onto the drawn noise. Gradients are computed over fixed
//! 64-row chunks in parallel and reduced in chunk order, so results are
//! bitwise identical no matter how many threads run.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddpm::VarianceSchedule;
use crate::error::{Error, Result};
use crate::net::{
    adam_step, batch_backward, batch_forward, AdamConfig, AdamState, BatchWorkspace, FlatGrads,
    NetConfig, NetParams,
};
use crate::seeds::{self, Stream};

/// Rows of (conditioning, clean action) pairs the trainer can draw from.
pub trait TrainData: Sync {
    fn len(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn fill(&self, index: usize, cond: &mut [f64], action: &mut [f64]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainData for crate::dataset::TrainingPairs {
    fn len(&self) -> usize {
        self.len()
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim()
    }

    fn action_dim(&self) -> usize {
        self.action_dim()
    }

    fn fill(&self, index: usize, cond: &mut [f64], action: &mut [f64]) {
        self.write_cond(index, cond);
        action.copy_from_slice(self.action(index));
    }
}

/// Training hyperparameters. The defaults are desk-scale; the full-scale
/// settings (1500 epochs, batch 4096) are reachable through the same knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validation cadence in epochs.
    pub validation_every: usize,
    /// Cap on minibatches per epoch; `None` sweeps the whole set.
    pub max_batches_per_epoch: Option<usize>,
    /// Cap on rows used for each validation pass.
    pub max_validation_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            validation_every: 5,
            max_batches_per_epoch: None,
            max_validation_rows: 16384,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be >= 1".into()));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.validation_every == 0 {
            return Err(Error::InvalidArgument("validation cadence must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch training loss plus validation losses at their epochs.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossHistory {
    pub train: Vec<f64>,
    pub validation: Vec<(usize, f64)>,
}

/// Rows per parallel gradient chunk. Fixed so the reduction order (and thus
/// the result) is independent of thread count.
const CHUNK: usize = 64;

struct ChunkCtx {
    ws: BatchWorkspace,
    grads: FlatGrads,
}

/// A staged minibatch: inputs plus noise targets, assembled sequentially so
/// the RNG stream is consumed in a fixed order.
struct StagedBatch {
    cond: Vec<f64>,
    a_tau: Vec<f64>,
    tau: Vec<usize>,
    eps: Vec<f64>,
}

impl StagedBatch {
    fn new(cond_dim: usize, action_dim: usize, cap: usize) -> Self {
        Self {
            cond: vec![0.0; cap * cond_dim],
            a_tau: vec![0.0; cap * action_dim],
            tau: vec![0; cap],
            eps: vec![0.0; cap * action_dim],
        }
    }

    fn stage<D: TrainData + ?Sized>(
        &mut self,
        data: &D,
        indices: &[usize],
        sched: &VarianceSchedule,
        rng: &mut impl Rng,
    ) {
        let cd = data.cond_dim();
        let ad = data.action_dim();
        let mut a0 = vec![0.0; ad];
        for (row, &idx) in indices.iter().enumerate() {
            let cond = &mut self.cond[row * cd..(row + 1) * cd];
            data.fill(idx, cond, &mut a0);
            let tau = rng.gen_range(1..=sched.horizon());
            self.tau[row] = tau;
            let ab = sched.alpha_bar(tau);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for c in 0..ad {
                let e: f64 = rng.sample(StandardNormal);
                self.eps[row * ad + c] = e;
                self.a_tau[row * ad + c] = sa * a0[c] + sn * e;
            }
        }
    }
}

/// Mean loss and mean gradient of one staged batch, chunk-parallel.
/// Gradients land in `total`; the return value is the batch loss.
fn batch_loss_and_grads(
    params: &NetParams,
    batch: &StagedBatch,
    n_rows: usize,
    ctxs: &mut [ChunkCtx],
    total: &mut FlatGrads,
    compute_grads: bool,
) -> Result<f64> {
    let cfg = params.config;
    let cd = cfg.obs_dim;
    let ad = cfg.action_dim;
    let n_chunks = n_rows.div_ceil(CHUNK);
    let losses: Vec<Result<f64>> = ctxs[..n_chunks]
        .par_iter_mut()
        .enumerate()
        .map(|(ci, ctx)| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n_rows);
            let rows = hi - lo;
            for (r, i) in (lo..hi).enumerate() {
                ctx.ws.stage(
                    &cfg,
                    r,
                    &batch.cond[i * cd..(i + 1) * cd],
                    &batch.a_tau[i * ad..(i + 1) * ad],
                    batch.tau[i],
                );
            }
            batch_forward(params, &mut ctx.ws, rows)?;
            let mut loss = 0.0;
            for r in 0..rows {
                for c in 0..ad {
                    let diff = ctx.ws.out[r * ad + c] - batch.eps[(lo + r) * ad + c];
                    loss += diff * diff;
                    ctx.ws.d_out[r * ad + c] = 2.0 * diff;
                }
            }
            if compute_grads {
                ctx.grads.fill_zero();
                batch_backward(params, &mut ctx.ws, &mut ctx.grads, rows);
            }
            Ok(loss)
        })
        .collect();

    let mut loss_sum = 0.0;
    for l in losses {
        loss_sum += l?;
    }
    if compute_grads {
        total.fill_zero();
        for ctx in &ctxs[..n_chunks] {
            total.add_assign(&ctx.grads);
        }
        total.scale(1.0 / n_rows as f64);
    }
    Ok(loss_sum / n_rows as f64)
}

/// Train a fresh net on `data`, validating on `validation` every
/// `validation_every` epochs with a frozen `(tau, eps)` draw so the curve is
/// comparable across epochs.
pub fn train<D: TrainData + ?Sized>(
    data: &D,
    validation: Option<&D>,
    net_config: NetConfig,
    config: &TrainConfig,
    sched: &VarianceSchedule,
) -> Result<(NetParams, LossHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.cond_dim() != net_config.obs_dim || data.action_dim() != net_config.action_dim {
        return Err(Error::DimensionMismatch {
            what: "training data vs net config",
            expected: net_config.obs_dim,
            got: data.cond_dim(),
        });
    }

    let mut params = NetParams::init(net_config, seeds::derive(config.seed, Stream::TrainInit, 0))?;
    let mut shuffle_rng = seeds::rng(config.seed, Stream::TrainShuffle, 0);
    let mut noise_rng = seeds::rng(config.seed, Stream::TrainNoise, 0);
    let mut adam = AdamState::new(&params);
    let mut total = FlatGrads::zeros_like(&params);

    let batch_size = config.batch_size.min(data.len());
    let mut ctxs: Vec<ChunkCtx> = (0..batch_size.div_ceil(CHUNK))
        .map(|_| ChunkCtx {
            ws: BatchWorkspace::new(&net_config, CHUNK),
            grads: FlatGrads::zeros_like(&params),
        })
        .collect();
    let mut staged = StagedBatch::new(data.cond_dim(), data.action_dim(), batch_size);

    // frozen validation draws
    let val_plan: Option<(Vec<usize>, Vec<usize>, Vec<f64>)> = validation.map(|v| {
        let mut vrng = seeds::rng(config.seed, Stream::Validation, 0);
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.shuffle(&mut vrng);
        idx.truncate(config.max_validation_rows.max(1).min(v.len()));
        let taus: Vec<usize> =
            idx.iter().map(|_| vrng.gen_range(1..=sched.horizon())).collect();
        let eps: Vec<f64> = (0..idx.len() * v.action_dim())
            .map(|_| vrng.sample(StandardNormal))
            .collect();
        (idx, taus, eps)
    });

    let mut history = LossHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let full_batches = (data.len() / batch_size).max(1);
        let n_batches = config
            .max_batches_per_epoch
            .map_or(full_batches, |cap| cap.min(full_batches))
            .max(1);

        let mut epoch_loss = 0.0;
        for b in 0..n_batches {
            let lo = b * batch_size;
            let hi = (lo + batch_size).min(data.len());
            let indices = &order[lo..hi];
            staged.stage(data, indices, sched, &mut noise_rng);
            let loss =
                match batch_loss_and_grads(&params, &staged, indices.len(), &mut ctxs, &mut total, true)
                {
                    Ok(l) => l,
                    Err(Error::NonFinite(msg)) => {
                        return Err(Error::Divergence(format!("epoch {epoch} batch {b}: {msg}")))
                    }
                    Err(e) => return Err(e),
                };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch} batch {b}")));
            }
            adam_step(&mut params, &total, &mut adam, &config.adam);
            epoch_loss += loss;
        }
        history.train.push(epoch_loss / n_batches as f64);

        if epoch % config.validation_every == 0 {
            if let (Some(v), Some((idx, taus, eps))) = (validation, val_plan.as_ref()) {
                let vloss = frozen_validation_loss(&params, v, idx, taus, eps, sched, &mut ctxs)?;
                if !vloss.is_finite() {
                    return Err(Error::Divergence(format!("validation at epoch {epoch}")));
                }
                history.validation.push((epoch, vloss));
            }
        }
    }
    Ok((params, history))
}

fn frozen_validation_loss<D: TrainData + ?Sized>(
    params: &NetParams,
    data: &D,
    idx: &[usize],
    taus: &[usize],
    eps: &[f64],
    sched: &VarianceSchedule,
    ctxs: &mut [ChunkCtx],
) -> Result<f64> {
    let cd = data.cond_dim();
    let ad = data.action_dim();
    let mut staged = StagedBatch::new(cd, ad, idx.len());
    let mut a0 = vec![0.0; ad];
    for (row, &i) in idx.iter().enumerate() {
        data.fill(i, &mut staged.cond[row * cd..(row + 1) * cd], &mut a0);
        let tau = taus[row];
        staged.tau[row] = tau;
        let ab = sched.alpha_bar(tau);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        for c in 0..ad {
            let e = eps[row * ad + c];
            staged.eps[row * ad + c] = e;
            staged.a_tau[row * ad + c] = sa * a0[c] + sn * e;
        }
    }
    // loss only; chunk contexts are reused per slice of CHUNK rows
    let mut loss = 0.0;
    let mut done = 0;
    let mut dummy = FlatGrads { t: Vec::new() };
    while done < idx.len() {
        let take = (idx.len() - done).min(ctxs.len() * CHUNK);
        let sub = StagedBatch {
            cond: staged.cond[done * cd..(done + take) * cd].to_vec(),
            a_tau: staged.a_tau[done * ad..(done + take) * ad].to_vec(),
            tau: staged.tau[done..done + take].to_vec(),
            eps: staged.eps[done * ad..(done + take) * ad].to_vec(),
        };
        let l = batch_loss_and_grads(params, &sub, take, ctxs, &mut dummy, false)?;
        loss += l * take as f64;
        done += take;
    }
    Ok(loss / idx.len() as f64)
}
