//! Training loops for the three paradigms, early stopping, evaluation and
//! the ablation grid.

pub mod ablation;
pub mod config;
pub mod evaluate;

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, PairedSample, Split, SplitManifest};
use crate::losses::{tensor as lt, write_loss_log, LossError, LossLogRow};
use crate::models::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::models::diffusion::standard_normal;
use crate::models::{
    build_denoiser, ddpm_sample, ddpm_train_step, rasters_to_tensor, tensor_to_rasters, Denoiser, DiffusionSchedule,
    Generator, ModelError, ParamStore, PatchDiscriminator, UNetDenoiser,
};
use crate::prior::{binarize, generate_soft_prior, PriorError, SegmentationBackend, SoftPrior};
use crate::raster::{concat_channels, normalize, ImagePatch, MifStack, RasterError};

pub use ablation::{ablation_markdown, check_controlled, run_ablation_grid, write_ablation_csv, AblationCell, AblationData, CellResult, Condition};
pub use config::{apply_override, canonical_hash, Arch, ConfigError, ExperimentConfig, PriorMode};
pub use evaluate::{
    eval_dir, evaluate, prediction_path, read_prediction, read_splits, read_tau, save_evaluation, write_predictions, write_splits,
    EvalOutcome, PREDICTIONS_DIR, REPORT_CSV_FILE, REPORT_FILE, SPLITS_FILE, TAU_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}; best checkpoint left in place")]
    NonFinite { epoch: usize, step: u64, detail: String },
    #[error("{0}")]
    Io(String),
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(format!("{}: {e}", path.display()))
}

/// Network input and target for one patch, both in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub case_id: String,
    pub patch_id: String,
    /// Brightfield, plus the prior channel when enabled.
    pub x: ImagePatch,
    pub target: MifStack,
    pub prior: Option<SoftPrior>,
}

/// Normalizes inputs and attaches the prior selected by `cfg.prior_mode`.
/// The backend runs once per patch.
pub fn prepare_samples(
    samples: &[PairedSample],
    cfg: &ExperimentConfig,
    backend: &dyn SegmentationBackend,
) -> Result<Vec<Prepared>, TrainError> {
    samples
        .iter()
        .map(|s| {
            let x = normalize(&s.ihc)?;
            let prior = match cfg.prior_mode {
                PriorMode::None => None,
                PriorMode::Soft => Some(match &s.prior {
                    Some(p) => p.clone(),
                    None => generate_soft_prior(&s.ihc, &s.key(), backend)?,
                }),
                PriorMode::Binary => {
                    let soft = match &s.prior {
                        Some(p) => p.clone(),
                        None => generate_soft_prior(&s.ihc, &s.key(), backend)?,
                    };
                    Some(binarize(&soft, cfg.binarize_threshold)?.to_prior())
                }
            };
            let x = match &prior {
                Some(p) => concat_channels(&x, p)?,
                None => x,
            };
            Ok(Prepared {
                case_id: s.case_id.clone(),
                patch_id: s.patch_id.clone(),
                x,
                target: s.mif.to_symmetric(),
                prior,
            })
        })
        .collect()
}

/// Networks for one experiment. Parameter names carry a `gen.`, `disc.` or
/// `den.` prefix so one checkpoint holds all of them.
pub struct Networks {
    pub store: ParamStore,
    pub generator: Option<Generator>,
    pub disc_store: Option<ParamStore>,
    pub discriminator: Option<PatchDiscriminator>,
    pub denoiser: Option<UNetDenoiser>,
    pub schedule: Option<DiffusionSchedule>,
    pub out_channels: usize,
}

const DISC_SEED_SALT: u64 = 0xD15C_0000_0000_0001;

impl Networks {
    pub fn build(cfg: &ExperimentConfig, out_channels: usize, device: &Device) -> Result<Self, TrainError> {
        let mut store = ParamStore::new(cfg.seed, device, DType::F32);
        let mut net = Self {
            store: ParamStore::new(0, device, DType::F32),
            generator: None,
            disc_store: None,
            discriminator: None,
            denoiser: None,
            schedule: None,
            out_channels,
        };
        match cfg.arch {
            Arch::Ddpm => {
                net.denoiser = Some(build_denoiser(&mut store, "den", &cfg.denoiser_spec(out_channels))?);
                net.schedule = Some(cfg.schedule()?);
            }
            arch => {
                net.generator = Some(Generator::new(&mut store, "gen", cfg.generator_spec(out_channels))?);
                if arch.is_adversarial() {
                    let mut ds = ParamStore::new(cfg.seed ^ DISC_SEED_SALT, device, DType::F32);
                    net.discriminator = Some(PatchDiscriminator::new(&mut ds, "disc", cfg.discriminator_spec(out_channels))?);
                    net.disc_store = Some(ds);
                }
            }
        }
        net.store = store;
        Ok(net)
    }

    pub fn weights(&self) -> Result<HashMap<String, Tensor>, TrainError> {
        let mut w = self.store.snapshot()?;
        if let Some(d) = &self.disc_store {
            w.extend(d.snapshot()?);
        }
        Ok(w)
    }

    pub fn load_weights(&self, w: &HashMap<String, Tensor>) -> Result<(), TrainError> {
        self.store.load(w)?;
        if let Some(d) = &self.disc_store {
            d.load(w)?;
        }
        Ok(())
    }

    pub fn meta(&self, cfg: &ExperimentConfig, channel_names: &[String], nuclear: usize) -> CheckpointMeta {
        let mut m = CheckpointMeta::new(
            serde_json::to_value(cfg).expect("config serializes"),
            cfg.hash(),
            channel_names.to_vec(),
            nuclear,
        );
        m.generator = self.generator.as_ref().map(|g| g.spec().clone());
        m.discriminator = self.discriminator.as_ref().map(|d| *d.spec());
        m.denoiser = if self.denoiser.is_some() {
            Some(cfg.denoiser_spec(self.out_channels))
        } else {
            None
        };
        m.schedule = self.schedule.clone();
        m
    }

    /// Translation of a `[B, C_in, H, W]` batch in `[-1, 1]`. Diffusion
    /// models sample with `seed`.
    pub fn predict(&self, x: &Tensor, seed: u64) -> Result<Tensor, TrainError> {
        if let Some(g) = &self.generator {
            return Ok(g.forward(x)?);
        }
        let den = self.denoiser.as_ref().expect("diffusion networks");
        let schedule = self.schedule.as_ref().expect("diffusion schedule");
        Ok(ddpm_sample(schedule, den, x, self.out_channels, seed)?)
    }
}

/// A trained model restored from its checkpoint alone.
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub meta: CheckpointMeta,
    pub networks: Networks,
    pub device: Device,
}

impl TrainedModel {
    pub fn load(path: &Path, device: &Device) -> Result<Self, TrainError> {
        let (weights, meta) = load_checkpoint(path, device)?;
        let config: ExperimentConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| TrainError::Model(ModelError::Checkpoint(format!("embedded config: {e}"))))?;
        let networks = Networks::build(&config, meta.channel_names.len(), device)?;
        networks.load_weights(&weights)?;
        Ok(Self {
            config,
            meta,
            networks,
            device: device.clone(),
        })
    }

    /// Predicted stacks in `[-1, 1]`, one per input, in batches.
    pub fn predict(&self, inputs: &[&ImagePatch]) -> Result<Vec<MifStack>, TrainError> {
        let mut out = Vec::with_capacity(inputs.len());
        let batch = self.config.batch_size.max(1);
        for (bi, chunk) in inputs.chunks(batch).enumerate() {
            let rasters: Vec<_> = chunk.iter().map(|p| p.raster()).collect();
            let x = rasters_to_tensor(&rasters, &self.device, DType::F32)?;
            let y = self.networks.predict(&x, self.config.sample_seed.wrapping_add(bi as u64))?;
            for r in tensor_to_rasters(&y)? {
                let r = r.map(|v| v.clamp(-1.0, 1.0));
                out.push(MifStack::new(
                    r,
                    crate::raster::ValueRange::Symmetric,
                    self.meta.channel_names.clone(),
                    self.meta.nuclear_channel,
                )?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub rng_seed: u64,
}

/// Minimum decrease that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            epoch: 0,
            best_val_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            rng_seed: seed,
        }
    }

    /// Records one completed epoch's validation loss; returns whether it
    /// improved on the best so far.
    pub fn record(&mut self, val_loss: f64) -> bool {
        self.epoch += 1;
        if val_loss < self.best_val_loss - IMPROVEMENT_EPS {
            self.best_val_loss = val_loss;
            self.best_epoch = self.epoch;
            self.epochs_since_improvement = 0;
            true
        } else {
            self.epochs_since_improvement += 1;
            false
        }
    }
}

pub fn early_stop_check(state: &TrainState, patience: usize) -> StopDecision {
    if state.epochs_since_improvement >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_base: f64,
    pub train_var: Option<f64>,
    pub train_total: f64,
    pub disc_loss: Option<f64>,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub improved: bool,
}

pub fn read_epoch_log(path: &Path) -> std::io::Result<Vec<EpochRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(std::io::Error::other)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub step_log: PathBuf,
    pub epoch_log: PathBuf,
    pub state: TrainState,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// Mean total loss of the final epoch.
    pub final_train_loss: f64,
}

pub const CHECKPOINT_FILE: &str = "best.safetensors";
pub const STEP_LOG_FILE: &str = "steps.csv";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

struct StepLosses {
    base: Tensor,
    var: Option<Tensor>,
    total: Tensor,
}

fn batch_tensors(items: &[&Prepared], device: &Device) -> Result<(Tensor, Tensor), TrainError> {
    let xs: Vec<_> = items.iter().map(|p| p.x.raster()).collect();
    let ys: Vec<_> = items.iter().map(|p| p.target.raster()).collect();
    Ok((rasters_to_tensor(&xs, device, DType::F32)?, rasters_to_tensor(&ys, device, DType::F32)?))
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

/// Generator-side objective for one batch. `noise_rng` drives diffusion
/// timesteps and noise.
fn generator_losses(
    cfg: &ExperimentConfig,
    nets: &Networks,
    x: &Tensor,
    y: &Tensor,
    noise_rng: &mut ChaCha8Rng,
    with_adversarial: bool,
) -> Result<StepLosses, TrainError> {
    let (pred, base) = match cfg.arch {
        Arch::Ddpm => {
            let schedule = nets.schedule.as_ref().expect("schedule");
            let den = nets.denoiser.as_ref().expect("denoiser");
            let b = y.dim(0)?;
            let t: Vec<usize> = (0..b).map(|_| noise_rng.random_range(1..=schedule.steps())).collect();
            let noise = Tensor::from_vec(standard_normal(noise_rng, y.elem_count()), y.dims(), y.device())?.to_dtype(DType::F32)?;
            let (y_t, eps) = ddpm_train_step(schedule, den as &dyn Denoiser, x, y, &t, &noise)?;
            let base = lt::mse(&eps, &noise)?;
            let x0 = if cfg.use_var_loss {
                Some(schedule.predict_x0(&y_t, &t, &eps)?.clamp(-1f32, 1f32)?)
            } else {
                None
            };
            (x0, base)
        }
        arch => {
            let g = nets.generator.as_ref().expect("generator");
            let pred = g.forward(x)?;
            let l1 = lt::l1(&pred, y)?;
            let base = if arch.is_adversarial() {
                let scaled = (l1 * cfg.lambda_l1)?;
                if with_adversarial {
                    let d = nets.discriminator.as_ref().expect("discriminator");
                    (lt::gan_generator(&d.forward(x, &pred)?)? + scaled)?
                } else {
                    scaled
                }
            } else {
                l1
            };
            (Some(pred), base)
        }
    };
    let var = match (&pred, cfg.use_var_loss) {
        (Some(p), true) => Some(lt::variance_loss(p, y, cfg.kernel_k)?),
        _ => None,
    };
    let total = match &var {
        Some(v) => (&base + (v * cfg.lambda_var)?)?,
        None => base.clone(),
    };
    Ok(StepLosses { base, var, total })
}

/// Validation loss: the generator objective without the adversarial term
/// (diffusion uses a fixed timestep/noise stream so epochs are comparable).
fn validation_loss(cfg: &ExperimentConfig, nets: &Networks, val: &[Prepared], device: &Device) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed ^ 0x5A17);
    let mut total = 0.0;
    let mut n = 0usize;
    let refs: Vec<&Prepared> = val.iter().collect();
    for chunk in refs.chunks(cfg.batch_size) {
        let (x, y) = batch_tensors(chunk, device)?;
        let l = generator_losses(cfg, nets, &x, &y, &mut rng, false)?;
        total += lt::scalar(&l.total)? * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n.max(1) as f64)
}

fn adam(vars: Vec<candle_core::Var>, cfg: &ExperimentConfig) -> Result<AdamW, TrainError> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

/// Trains `cfg` on the train split and early-stops on the validation split.
///
/// Only train and validation cases may be passed; any sample from a test
/// case aborts before the first step. The best-validation weights are kept
/// in `out_dir/best.safetensors`.
pub fn train(
    cfg: &ExperimentConfig,
    splits: &SplitManifest,
    train_set: &[Prepared],
    val_set: &[Prepared],
    channel_names: &[String],
    nuclear_channel: usize,
    out_dir: &Path,
    device: &Device,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Data(DataError::Spec("train and validation sets must be non-empty".into())));
    }
    for (set, want) in [(train_set, Split::Train), (val_set, Split::Val)] {
        if let Some(p) = set.iter().find(|p| splits.split_of(&p.case_id) != Some(want)) {
            return Err(TrainError::Data(DataError::Spec(format!(
                "sample {}/{} is not in the {want} split",
                p.case_id, p.patch_id
            ))));
        }
    }
    let seen: BTreeSet<String> = train_set.iter().chain(val_set).map(|p| p.case_id.clone()).collect();
    splits.check_disjoint(&seen)?;
    let k = channel_names.len();
    for p in train_set.iter().chain(val_set) {
        if p.x.channels() != cfg.in_channels || p.target.channels() != k {
            return Err(TrainError::Config(ConfigError::Invalid(format!(
                "{}/{} has {} input / {} target channels; config expects {} / {k}",
                p.case_id,
                p.patch_id,
                p.x.channels(),
                p.target.channels(),
                cfg.in_channels
            ))));
        }
        if p.x.height() != cfg.image_size || p.x.width() != cfg.image_size {
            return Err(TrainError::Config(ConfigError::Invalid(format!(
                "{}/{} is {}x{}, config image_size is {}",
                p.case_id,
                p.patch_id,
                p.x.height(),
                p.x.width(),
                cfg.image_size
            ))));
        }
    }

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let echo = out_dir.join(CONFIG_ECHO_FILE);
    std::fs::write(&echo, cfg.to_toml()).map_err(io_err(&echo))?;
    log::info!("training {} ({}), config hash {}", cfg.arch, cfg.prior_mode, cfg.hash());

    let nets = Networks::build(cfg, k, device)?;
    let mut opt_g = adam(nets.store.vars(), cfg)?;
    let mut opt_d = match &nets.disc_store {
        Some(ds) => Some(adam(ds.vars(), cfg)?),
        None => None,
    };
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let step_log = out_dir.join(STEP_LOG_FILE);
    let epoch_log = out_dir.join(EPOCH_LOG_FILE);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = TrainState::new(cfg.seed);
    let mut steps: Vec<LossLogRow> = Vec::new();
    let mut epochs: Vec<EpochRow> = Vec::new();
    let mut step: u64 = 0;
    let mut stopped_early = false;
    let mut final_train_loss = f64::NAN;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let flush = |steps: &[LossLogRow], epochs: &[EpochRow]| -> Result<(), TrainError> {
        write_loss_log(&step_log, steps).map_err(io_err(&step_log))?;
        let mut w = csv::Writer::from_path(&epoch_log).map_err(|e| TrainError::Io(e.to_string()))?;
        for r in epochs {
            w.serialize(r).map_err(|e| TrainError::Io(e.to_string()))?;
        }
        w.flush().map_err(io_err(&epoch_log))
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_base, mut sum_var, mut sum_total, mut sum_d) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = batch_tensors(&items, device)?;

            if let (Some(d), Some(opt)) = (&nets.discriminator, opt_d.as_mut()) {
                let fake = nets.generator.as_ref().expect("generator").forward(&x)?.detach();
                let d_loss = lt::gan_discriminator(&d.forward(&x, &y)?, &d.forward(&x, &fake)?)?;
                let dv = lt::scalar(&d_loss)?;
                if !finite(dv) {
                    flush(&steps, &epochs)?;
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        detail: format!("discriminator loss {dv}"),
                    });
                }
                opt.backward_step(&d_loss)?;
                sum_d += dv;
            }

            let l = generator_losses(cfg, &nets, &x, &y, &mut rng, true)?;
            let base = lt::scalar(&l.base)?;
            let var = l.var.as_ref().map(lt::scalar).transpose()?;
            let total = lt::scalar(&l.total)?;
            if !finite(total) || !finite(base) || var.is_some_and(|v| !finite(v)) {
                flush(&steps, &epochs)?;
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    detail: format!("L_base={base}, L_var={var:?}, L_total={total}"),
                });
            }
            opt_g.backward_step(&l.total)?;
            steps.push(LossLogRow {
                step,
                l_base: base,
                l_var: var,
                l_total: total,
                lambda_var: if cfg.use_var_loss { cfg.lambda_var } else { 0.0 },
                k: cfg.kernel_k,
            });
            sum_base += base;
            sum_var += var.unwrap_or(0.0);
            sum_total += total;
            batches += 1;
        }
        let nb = batches as f64;
        final_train_loss = sum_total / nb;
        let val = validation_loss(cfg, &nets, val_set, device)?;
        if !finite(val) {
            flush(&steps, &epochs)?;
            return Err(TrainError::NonFinite {
                epoch,
                step,
                detail: format!("validation loss {val}"),
            });
        }
        let improved = state.record(val);
        if improved {
            let mut meta = nets.meta(cfg, channel_names, nuclear_channel);
            meta.epoch = epoch;
            meta.val_loss = Some(val);
            save_checkpoint(&ckpt, &nets.weights()?, &meta)?;
        }
        epochs.push(EpochRow {
            epoch,
            train_base: sum_base / nb,
            train_var: cfg.use_var_loss.then_some(sum_var / nb),
            train_total: final_train_loss,
            disc_loss: nets.discriminator.as_ref().map(|_| sum_d / nb),
            val_loss: val,
            best_val_loss: state.best_val_loss,
            improved,
        });
        log::info!(
            "epoch {epoch}: train {final_train_loss:.5} val {val:.5} best {:.5}",
            state.best_val_loss
        );
        if early_stop_check(&state, cfg.patience) == StopDecision::Stop {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    flush(&steps, &epochs)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        step_log,
        epoch_log,
        epochs_run: state.epoch,
        state,
        stopped_early,
        final_train_loss,
    })
}
