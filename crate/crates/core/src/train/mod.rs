//! Training of the proposed system, its ablations and all baselines.
//!
//! The scalar end-to-end methods alternate mini-batch epochs (autoencoder
//! and codewords updated together through a straight-through quantizer)
//! with bit-allocation refreshes on a fresh subsample of encoder outputs.

pub mod config;
pub mod pca;
mod run_dir;
pub mod vector;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc::{allocate_bits, allocate_budget, AllocConfig, BitAllocation};
use crate::error::{Error, Result};
use crate::loss::{codebook_loss, composite_loss, quant_weights, LossConfig, LossSample, ReconTerm};
use crate::metrics::nmse_db;
use crate::nn::{adam_step, Activation, AdamState, Autoencoder, Identity, LatentQuantizer};
use crate::quantizer::{
    pack_bitstream, prepare_samples, quantize_vector, train_codebook, unpack_bitstream, Bitstream,
    Codebook, CodebookBank, KMeansConfig, QuantizedLatent,
};

pub use config::{LossMode, Method, ScalarPlan, TrainConfig, VECTOR_CODEBOOK_CAP};
pub use pca::{fit_pca, PcaFit};
pub use run_dir::{load_run, save_run};
pub use vector::VectorQuantizer;

/// Flattened real training and validation vectors.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Vec<f64>>,
    pub val: Vec<Vec<f64>>,
}

impl TrainData {
    pub fn new(train: Vec<Vec<f64>>, val: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = train.first() else {
            return Err(Error::Input("training split is empty".into()));
        };
        if val.is_empty() {
            return Err(Error::Input("validation split is empty".into()));
        }
        let d = first.len();
        if d == 0 || train.iter().chain(&val).any(|x| x.len() != d) {
            return Err(Error::Dimension("samples differ in length".into()));
        }
        Ok(Self { train, val })
    }

    pub fn input_dim(&self) -> usize {
        self.train[0].len()
    }
}

/// Quantizer of a trained system.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemQuantizer {
    None,
    Scalar {
        bank: CodebookBank,
        allocation: BitAllocation,
    },
    Vector(VectorQuantizer),
}

impl SystemQuantizer {
    pub fn as_latent(&self) -> &dyn LatentQuantizer {
        match self {
            SystemQuantizer::None => &Identity,
            SystemQuantizer::Scalar { bank, .. } => bank,
            SystemQuantizer::Vector(vq) => vq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch mean of the squared reconstruction error.
    pub recon_mse: f64,
    /// Batch mean of the squared quantization error.
    pub quant_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub val_nmse_db: f64,
}

/// One bit-allocation run: its total-loss trace and resulting allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RefreshRecord {
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub bits: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSystem {
    pub method: Method,
    pub config: TrainConfig,
    pub autoencoder: Autoencoder,
    pub quantizer: SystemQuantizer,
    pub history: Vec<EpochRecord>,
    pub refreshes: Vec<RefreshRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 for closed-form fits.
    pub best_epoch: usize,
}

impl TrainedSystem {
    /// Full inference path: encode, quantize, decode.
    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        let z = self.autoencoder.encode(h)?;
        let zq = self.quantizer.as_latent().quantize_latent(&z)?;
        self.autoencoder.decode(&zq)
    }

    /// Decoder applied to the unquantized latent.
    pub fn reconstruct_unquantized(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.autoencoder.decode(&self.autoencoder.encode(h)?)
    }

    pub fn nmse_db(&self, data: &[Vec<f64>]) -> Result<f64> {
        system_nmse(&self.autoencoder, self.quantizer.as_latent(), data)
    }

    pub fn nmse_unquantized_db(&self, data: &[Vec<f64>]) -> Result<f64> {
        system_nmse(&self.autoencoder, &Identity, data)
    }

    /// Latent of every sample.
    pub fn latents(&self, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        data.iter().map(|h| self.autoencoder.encode(h)).collect()
    }

    /// Total feedback bits per channel.
    pub fn total_bits(&self) -> Result<u32> {
        Ok(self.fields()?.iter().sum())
    }

    fn fields(&self) -> Result<Vec<u32>> {
        match &self.quantizer {
            SystemQuantizer::Vector(vq) => {
                Ok(vec![vq.index_bits(); self.autoencoder.latent_dim() / vq.dim])
            }
            SystemQuantizer::Scalar { allocation, .. } => Ok(allocation.bits().to_vec()),
            SystemQuantizer::None => Err(Error::Config("system has no quantizer".into())),
        }
    }

    fn field_allocation(&self) -> Result<BitAllocation> {
        let fields = self.fields()?;
        let lo = *fields.iter().min().unwrap_or(&1);
        let hi = *fields.iter().max().unwrap_or(&1);
        BitAllocation::new(fields, lo.max(1), hi.max(1))
    }

    /// User side: encode, quantize and pack the codeword indices.
    pub fn feedback(&self, h: &[f64]) -> Result<Bitstream> {
        let z = self.autoencoder.encode(h)?;
        let q = match &self.quantizer {
            SystemQuantizer::None => {
                return Err(Error::Config("system has no quantizer".into()));
            }
            SystemQuantizer::Scalar { bank, .. } => quantize_vector(&z, bank)?,
            SystemQuantizer::Vector(vq) => {
                let indices = vq.indices(&z)?;
                QuantizedLatent {
                    values: vq.reconstruct(&indices),
                    indices,
                }
            }
        };
        pack_bitstream(&q, &self.field_allocation()?)
    }

    /// Base-station side: codeword indices carried by a feedback message.
    pub fn unpack(&self, x: &Bitstream) -> Result<QuantizedLatent> {
        match &self.quantizer {
            SystemQuantizer::None => Err(Error::Config("system has no quantizer".into())),
            SystemQuantizer::Scalar { bank, allocation } => unpack_bitstream(x, allocation, bank),
            SystemQuantizer::Vector(vq) => {
                let alloc = self.field_allocation()?;
                let b = vq.index_bits();
                let bank = CodebookBank {
                    books: vec![Codebook::uniform(b, 0.0, 1.0)?; alloc.len()],
                };
                let indices = unpack_bitstream(x, &alloc, &bank)?.indices;
                Ok(QuantizedLatent {
                    values: vq.reconstruct(&indices),
                    indices,
                })
            }
        }
    }

    /// Base-station side: unpack and decode.
    pub fn reconstruct_from(&self, x: &Bitstream) -> Result<Vec<f64>> {
        self.autoencoder.decode(&self.unpack(x)?.values)
    }
}

fn system_nmse(ae: &Autoencoder, q: &dyn LatentQuantizer, data: &[Vec<f64>]) -> Result<f64> {
    let recon = data
        .iter()
        .map(|h| ae.decode(&q.quantize_latent(&ae.encode(h)?)?))
        .collect::<Result<Vec<_>>>()?;
    nmse_db(recon.iter().zip(data).map(|(a, b)| (&a[..], &b[..])))
}

/// Quantizer state carried through the epoch loop.
#[derive(Clone)]
enum Learner {
    None,
    /// Codebooks held fixed.
    Fixed {
        bank: CodebookBank,
        allocation: BitAllocation,
    },
    Scalar {
        bank: CodebookBank,
        allocation: BitAllocation,
        adam: AdamState,
        refresh_every: Option<usize>,
    },
    Vector {
        vq: VectorQuantizer,
        adam: AdamState,
    },
}

impl Learner {
    fn latent(&self) -> &dyn LatentQuantizer {
        match self {
            Learner::None => &Identity,
            Learner::Fixed { bank, .. } | Learner::Scalar { bank, .. } => bank,
            Learner::Vector { vq, .. } => vq,
        }
    }

    fn freeze(&self) -> SystemQuantizer {
        match self {
            Learner::None => SystemQuantizer::None,
            Learner::Fixed { bank, allocation }
            | Learner::Scalar {
                bank, allocation, ..
            } => SystemQuantizer::Scalar {
                bank: bank.clone(),
                allocation: allocation.clone(),
            },
            Learner::Vector { vq, .. } => SystemQuantizer::Vector(vq.clone()),
        }
    }

    fn end_epoch(&mut self) {
        match self {
            Learner::Scalar { adam, .. } | Learner::Vector { adam, .. } => adam.end_epoch(),
            _ => {}
        }
    }
}

fn bank_adam(bank: &CodebookBank, lr: f64, decay: f64) -> AdamState {
    let shapes: Vec<usize> = bank.books.iter().map(|b| b.len()).collect();
    AdamState::new(&shapes, lr, decay)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_SUBSAMPLE: u64 = 2;

fn kmeans_config(cfg: &TrainConfig) -> KMeansConfig {
    KMeansConfig {
        max_iters: cfg.kmeans_iters,
        tol: 1e-10,
        batch: cfg.alloc_samples,
    }
}

fn alloc_config(cfg: &TrainConfig, round: u64) -> AllocConfig {
    AllocConfig {
        max_iters: 10 * cfg.latent_dim,
        tol: 1e-9,
        kmeans: kmeans_config(cfg),
        seed: cfg.seed.wrapping_add(round.wrapping_mul(0x9E37_79B9)),
    }
}

/// Per-output encoder outputs over a random subsample of the training set.
fn latent_sets(
    ae: &Autoencoder,
    train: &[Vec<f64>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let n = train.len();
    let mut idx = sample_indices(rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    let mut sets = vec![Vec::with_capacity(idx.len()); ae.latent_dim()];
    for i in idx {
        for (s, v) in sets.iter_mut().zip(ae.encode(&train[i])?) {
            s.push(v);
        }
    }
    Ok(sets)
}

fn new_autoencoder(cfg: &TrainConfig, data: &TrainData, act: Activation) -> Result<Autoencoder> {
    let mut rng = rng_stream(cfg.seed, STREAM_INIT);
    Autoencoder::new(data.input_dim(), cfg.hidden_width(), cfg.latent_dim, act, &mut rng)
}

struct LoopOutput {
    autoencoder: Autoencoder,
    quantizer: SystemQuantizer,
    history: Vec<EpochRecord>,
    refreshes: Vec<RefreshRecord>,
    best_epoch: usize,
}

/// Mini-batch STE training with best-validation checkpointing.
fn run_epochs(
    mut ae: Autoencoder,
    mut learner: Learner,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    subsample_rng: &mut ChaCha8Rng,
) -> Result<LoopOutput> {
    loss_cfg.validate()?;
    let mut adam = AdamState::for_autoencoder(&ae, cfg.lr, cfg.lr_decay);
    let mut shuffle_rng = rng_stream(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut refreshes = Vec::new();
    let mut best: Option<(f64, usize, Autoencoder, SystemQuantizer)> = None;
    let m = ae.latent_dim();

    for epoch in 1..=cfg.epochs {
        let lr = adam.lr;
        order.shuffle(&mut shuffle_rng);
        let (mut recon, mut quant, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let fwds = chunk
                .iter()
                .map(|&i| ae.forward_with_ste(&data.train[i], learner.latent()))
                .collect::<Result<Vec<_>>>()?;
            let (weights, indices): (Vec<Vec<f64>>, Vec<Vec<usize>>) = match &learner {
                Learner::Scalar { bank, .. } | Learner::Fixed { bank, .. } => fwds
                    .iter()
                    .map(|f| {
                        let idx = quantize_vector(&f.z, bank)?.indices;
                        Ok((quant_weights(loss_cfg, bank, &idx), idx))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip(),
                Learner::Vector { vq, .. } => fwds
                    .iter()
                    .map(|f| Ok((vec![loss_cfg.beta; m], vq.indices(&f.z)?)))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip(),
                Learner::None => (vec![vec![0.0; m]; fwds.len()], vec![Vec::new(); fwds.len()]),
            };
            let samples: Vec<LossSample> = chunk
                .iter()
                .zip(&fwds)
                .zip(&weights)
                .map(|((&i, f), w)| LossSample {
                    h: &data.train[i],
                    h_hat: &f.h_hat,
                    z: &f.z,
                    zq: &f.zq,
                    weights: w,
                })
                .collect();
            let out = composite_loss(&samples, loss_cfg).map_err(|e| diagnose(e, epoch))?;
            let mut grads = ae.zero_grads();
            for (i, f) in fwds.iter().enumerate() {
                ae.backward_ste(f, &out.grad_h_hat[i], &out.grad_z[i], &mut grads)?;
            }
            adam_step(&mut ae, &grads, &mut adam).map_err(|e| diagnose(e, epoch))?;

            let pairs: Vec<(&[f64], &[usize])> = fwds
                .iter()
                .zip(&indices)
                .map(|(f, i)| (&f.z[..], &i[..]))
                .collect();
            match &mut learner {
                Learner::Scalar { bank, adam, .. } => {
                    let (_, g) = codebook_loss(&pairs, bank)?;
                    let mut words: Vec<Vec<f64>> =
                        bank.books.iter().map(|b| b.codewords().to_vec()).collect();
                    let mut refs: Vec<&mut Vec<f64>> = words.iter_mut().collect();
                    adam.update(&mut refs, &g).map_err(|e| diagnose(e, epoch))?;
                    for (b, w) in bank.books.iter_mut().zip(&words) {
                        b.update_codewords(|c| c.copy_from_slice(w))?;
                    }
                }
                Learner::Vector { vq, adam } => {
                    let (_, g) = vq.codebook_grad(&pairs)?;
                    adam.update(&mut [&mut vq.codebook], &[g])
                        .map_err(|e| diagnose(e, epoch))?;
                }
                _ => {}
            }
            recon += out.recon_mse;
            quant += out.quant_mse;
            total += out.loss;
            batches += 1;
        }
        adam.end_epoch();
        learner.end_epoch();

        if let Learner::Scalar {
            bank,
            allocation,
            adam: cb_adam,
            refresh_every: Some(k),
        } = &mut learner
        {
            if epoch % *k == 0 {
                let sets = latent_sets(&ae, &data.train, cfg.alloc_samples, subsample_rng)?;
                let outcome = allocate_bits(&sets, allocation, &alloc_config(cfg, epoch as u64))?;
                let changed: Vec<usize> = (0..m)
                    .filter(|&j| outcome.allocation.bits()[j] != allocation.bits()[j])
                    .collect();
                for &j in &changed {
                    bank.books[j] = outcome.bank.books[j].clone();
                }
                if !changed.is_empty() {
                    *cb_adam = bank_adam(bank, cb_adam.lr, cfg.lr_decay);
                }
                *allocation = outcome.allocation;
                refreshes.push(RefreshRecord {
                    epoch,
                    loss_history: outcome.loss_history,
                    bits: allocation.bits().to_vec(),
                });
            }
        }

        let b = batches as f64;
        let val = system_nmse(&ae, learner.latent(), &data.val)?;
        history.push(EpochRecord {
            epoch,
            recon_mse: recon / b,
            quant_loss: quant / b,
            total_loss: total / b,
            lr,
            val_nmse_db: val,
        });
        if best.as_ref().map_or(true, |(v, ..)| val < *v) {
            best = Some((val, epoch, ae.clone(), learner.freeze()));
        }
    }
    let (_, best_epoch, autoencoder, quantizer) = best.expect("at least one epoch");
    Ok(LoopOutput {
        autoencoder,
        quantizer,
        history,
        refreshes,
        best_epoch,
    })
}

fn diagnose(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}: {msg}")),
        e => e,
    }
}

fn finish(cfg: &TrainConfig, out: LoopOutput) -> TrainedSystem {
    TrainedSystem {
        method: cfg.method,
        config: cfg.clone(),
        autoencoder: out.autoencoder,
        quantizer: out.quantizer,
        history: out.history,
        refreshes: out.refreshes,
        best_epoch: out.best_epoch,
    }
}

/// Trains any method named by `cfg.method`.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainedSystem> {
    cfg.validate()?;
    match cfg.method {
        Method::Proposed | Method::ProposedVar1 | Method::ProposedVar2 => train_proposed(cfg, data),
        Method::Lloyd => train_lloyd(cfg, data, false),
        Method::LloydLog => train_lloyd(cfg, data, true),
        Method::Round => train_round(cfg, data),
        Method::Vector => train_vector(cfg, data),
        Method::Pca => train_pca(cfg, data),
        Method::Nq => train_nq(cfg, data),
    }
}

/// Alternating training of the scalar end-to-end methods.
pub fn train_proposed(cfg: &TrainConfig, data: &TrainData) -> Result<TrainedSystem> {
    cfg.validate()?;
    let plan = cfg.scalar_plan()?;
    let ae = new_autoencoder(cfg, data, Activation::Linear)?;
    let mut sub_rng = rng_stream(cfg.seed, STREAM_SUBSAMPLE);
    let sets = latent_sets(&ae, &data.train, cfg.alloc_samples, &mut sub_rng)?;
    let allocation = BitAllocation::equal(cfg.latent_dim, cfg.bits, cfg.b_min, cfg.b_max)?;
    let bank = initial_bank(&sets, cfg.bits, cfg)?;
    let learner = Learner::Scalar {
        adam: bank_adam(&bank, cfg.lr, cfg.lr_decay),
        bank,
        allocation,
        refresh_every: plan.refresh_every,
    };
    let out = run_epochs(ae, learner, &plan.loss, cfg, data, &mut sub_rng)?;
    Ok(finish(cfg, out))
}

fn initial_bank(sets: &[Vec<f64>], bits: u32, cfg: &TrainConfig) -> Result<CodebookBank> {
    let km = kmeans_config(cfg);
    let books = sets
        .iter()
        .enumerate()
        .map(|(m, s)| {
            let sorted = prepare_samples(s, km.batch, cfg.seed.wrapping_add(m as u64))?;
            train_codebook(&sorted, bits, &km)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CodebookBank { books })
}

fn train_unquantized(cfg: &TrainConfig, data: &TrainData, recon: ReconTerm) -> Result<LoopOutput> {
    let ae = new_autoencoder(cfg, data, Activation::Linear)?;
    let mut sub_rng = rng_stream(cfg.seed, STREAM_SUBSAMPLE);
    run_epochs(ae, Learner::None, &LossConfig::recon_only(recon), cfg, data, &mut sub_rng)
}

/// Autoencoder with log reconstruction loss and no quantizer.
pub fn train_nq(cfg: &TrainConfig, data: &TrainData) -> Result<TrainedSystem> {
    cfg.validate()?;
    let out = train_unquantized(cfg, data, ReconTerm::Log)?;
    Ok(TrainedSystem {
        method: Method::Nq,
        ..finish(cfg, out)
    })
}

/// Two-stage baseline: unquantized training, then per-output Lloyd-Max
/// codebooks at `B` bits each. The decoder is not retrained.
pub fn train_lloyd(cfg: &TrainConfig, data: &TrainData, use_log: bool) -> Result<TrainedSystem> {
    cfg.validate()?;
    let recon = if use_log { ReconTerm::Log } else { ReconTerm::Mse };
    let out = train_unquantized(cfg, data, recon)?;
    let stage1 = finish(cfg, out);
    let method = if use_log { Method::LloydLog } else { Method::Lloyd };
    lloyd_quantize(&stage1, &TrainConfig { method, ..cfg.clone() }, data)
}

/// Second stage of the two-stage baseline on an already trained unquantized
/// system: equal allocation, codebooks from 1-D K-means on encoder outputs.
pub fn lloyd_quantize(
    stage1: &TrainedSystem,
    cfg: &TrainConfig,
    data: &TrainData,
) -> Result<TrainedSystem> {
    cfg.validate()?;
    let mut sub_rng = rng_stream(cfg.seed, STREAM_SUBSAMPLE);
    let sets = latent_sets(&stage1.autoencoder, &data.train, cfg.alloc_samples, &mut sub_rng)?;
    let bank = initial_bank(&sets, cfg.bits, cfg)?;
    let allocation = BitAllocation::equal(cfg.latent_dim, cfg.bits, cfg.b_min, cfg.b_max)?;
    Ok(TrainedSystem {
        method: cfg.method,
        config: cfg.clone(),
        autoencoder: stage1.autoencoder.clone(),
        quantizer: SystemQuantizer::Scalar { bank, allocation },
        history: stage1.history.clone(),
        refreshes: Vec::new(),
        best_epoch: stage1.best_epoch,
    })
}

/// Sigmoid-bounded latent rounded to `2^B` uniform levels on `[0, 1]`.
pub fn train_round(cfg: &TrainConfig, data: &TrainData) -> Result<TrainedSystem> {
    cfg.validate()?;
    let ae = new_autoencoder(cfg, data, Activation::Sigmoid)?;
    let book = Codebook::uniform(cfg.bits, 0.0, 1.0)?;
    let bank = CodebookBank {
        books: vec![book; cfg.latent_dim],
    };
    let mut sub_rng = rng_stream(cfg.seed, STREAM_SUBSAMPLE);
    let loss = LossConfig::recon_only(ReconTerm::Mse);
    let allocation = BitAllocation::equal(cfg.latent_dim, cfg.bits, cfg.b_min, cfg.b_max)?;
    let learner = Learner::Fixed { bank, allocation };
    let out = run_epochs(ae, learner, &loss, cfg, data, &mut sub_rng)?;
    Ok(finish(cfg, out))
}

/// Shared vector codebook over consecutive latent groups of length `L`.
pub fn train_vector(cfg: &TrainConfig, data: &TrainData) -> Result<TrainedSystem> {
    cfg.validate()?;
    let codes = cfg.vector_codebook_len()?;
    let ae = new_autoencoder(cfg, data, Activation::Linear)?;
    let mut sub_rng = rng_stream(cfg.seed, STREAM_SUBSAMPLE);
    let n = data.train.len();
    let mut idx = sample_indices(&mut sub_rng, n, cfg.alloc_samples.min(n)).into_vec();
    idx.sort_unstable();
    let latents = idx
        .iter()
        .map(|&i| ae.encode(&data.train[i]))
        .collect::<Result<Vec<_>>>()?;
    let max_points = cfg.alloc_samples * (cfg.latent_dim / cfg.vector_l);
    let vq = VectorQuantizer::train(
        &latents,
        cfg.vector_l,
        codes,
        max_points,
        cfg.kmeans_iters,
        cfg.seed,
    )?;
    let adam = AdamState::new(&[vq.codebook.len()], cfg.lr, cfg.lr_decay);
    let loss = LossConfig::fixed(cfg.beta);
    let out = run_epochs(ae, Learner::Vector { vq, adam }, &loss, cfg, data, &mut sub_rng)?;
    Ok(finish(cfg, out))
}

/// Linear encoder/decoder from the top `M` principal components, with the
/// `M * B` bit budget allocated over the component scores.
pub fn train_pca(cfg: &TrainConfig, data: &TrainData) -> Result<TrainedSystem> {
    cfg.validate()?;
    let fit = fit_pca(&data.train, cfg.latent_dim)?;
    let mut sub_rng = rng_stream(cfg.seed, STREAM_SUBSAMPLE);
    let sets = latent_sets(&fit.autoencoder, &data.train, cfg.alloc_samples, &mut sub_rng)?;
    let budget = cfg.latent_dim as u32 * cfg.bits;
    let outcome = allocate_budget(&sets, budget, cfg.b_min, cfg.b_max, &alloc_config(cfg, 0))?;
    Ok(TrainedSystem {
        method: Method::Pca,
        config: cfg.clone(),
        autoencoder: fit.autoencoder,
        refreshes: vec![RefreshRecord {
            epoch: 0,
            loss_history: outcome.loss_history,
            bits: outcome.allocation.bits().to_vec(),
        }],
        quantizer: SystemQuantizer::Scalar {
            bank: outcome.bank,
            allocation: outcome.allocation,
        },
        history: Vec::new(),
        best_epoch: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(n: usize, seed: u64) -> TrainData {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| {
                    let a: f64 = g.sample(rng);
                    let b: f64 = 0.3 * g.sample(rng);
                    vec![a, b, a - b, 0.5 * a, 1.0 + 0.1 * b, -a]
                })
                .collect()
        };
        let train = mk(&mut rng, n);
        let val = mk(&mut rng, n / 4);
        TrainData::new(train, val).unwrap()
    }

    fn small(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            latent_dim: 4,
            bits: 2,
            epochs: 3,
            batch_size: 16,
            lr: 3e-3,
            alloc_samples: 100,
            b_max: 4,
            kmeans_iters: 30,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn proposed_runs_and_conserves_budget() {
        let data = toy_data(200, 1);
        let sys = train(&small(Method::Proposed), &data).unwrap();
        assert_eq!(sys.history.len(), 3);
        assert_eq!(sys.refreshes.len(), 3);
        let SystemQuantizer::Scalar { bank, allocation } = &sys.quantizer else {
            panic!("scalar quantizer expected");
        };
        assert_eq!(allocation.budget(), 8);
        bank.check_allocation(allocation).unwrap();
        for r in &sys.refreshes {
            assert_eq!(r.bits.iter().sum::<u32>(), 8);
            assert!(r.loss_history.windows(2).all(|w| w[1] <= w[0]));
        }
        let x = sys.feedback(&data.val[0]).unwrap();
        assert_eq!(x.len_bits, 8);
        assert_eq!(sys.reconstruct_from(&x).unwrap(), sys.reconstruct(&data.val[0]).unwrap());
    }

    #[test]
    fn identical_seeds_identical_runs() {
        let data = toy_data(120, 2);
        for m in [Method::Proposed, Method::Round, Method::Vector, Method::Lloyd] {
            let a = train(&small(m), &data).unwrap();
            let b = train(&small(m), &data).unwrap();
            assert_eq!(a, b, "{m}");
        }
    }

    #[test]
    fn round_snaps_to_grid() {
        let data = toy_data(120, 3);
        let cfg = TrainConfig {
            bits: 1,
            ..small(Method::Round)
        };
        let sys = train(&cfg, &data).unwrap();
        for h in &data.val {
            let z = sys.autoencoder.encode(h).unwrap();
            let zq = sys.quantizer.as_latent().quantize_latent(&z).unwrap();
            for (a, b) in z.iter().zip(&zq) {
                assert!(*b == 0.0 || *b == 1.0);
                assert!((a - b).abs() <= 0.5 + 1e-12);
            }
        }
    }

    #[test]
    fn var1_keeps_equal_allocation() {
        let data = toy_data(120, 4);
        let sys = train(&small(Method::ProposedVar1), &data).unwrap();
        assert!(sys.refreshes.is_empty());
        let SystemQuantizer::Scalar { allocation, .. } = &sys.quantizer else {
            panic!()
        };
        assert!(allocation.bits().iter().all(|&b| b == 2));
    }

    #[test]
    fn vector_bits_match_budget() {
        let data = toy_data(120, 5);
        let sys = train(&small(Method::Vector), &data).unwrap();
        assert_eq!(sys.total_bits().unwrap(), 8);
        let x = sys.feedback(&data.val[1]).unwrap();
        assert_eq!(sys.reconstruct_from(&x).unwrap(), sys.reconstruct(&data.val[1]).unwrap());
    }
}
