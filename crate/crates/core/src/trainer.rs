//! Seeded training and evaluation loops and the variant × seed × cloud-count
//! experiment matrix.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloudsim::{generate_mask, CloudGenConfig, CloudMask, Provenance};
use crate::dataio::{TileSample, T_MSI};
use crate::error::{Error, Result};
use crate::evalmetrics::{aggregate, average_reports, evaluate_tile, interp_baseline, EvalReport, ReportKey};
use crate::objective::{multi_scale_loss_scaled, LossConfig, ScaledTargets};
use crate::tensor::{adam_step, AdamState, Graph, Tensor};
use crate::vit::{forward_packed, load_params, pack_input, reconstruct, save_params, target_for, ModelParams, Variant, ViTConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    EveryEpoch,
    Final,
    None,
}

/// Everything that determines a training run. Read from TOML; missing keys
/// take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_cloud_counts: Vec<usize>,
    pub n_seeds: usize,
    /// Dataset manifest, relative paths resolved against the config file.
    pub manifest: Option<PathBuf>,
    /// Root for checkpoints and logs; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    pub checkpoints: CheckpointPolicy,
    /// Mean loss on the validation tiles after every epoch.
    pub validate_each_epoch: bool,
    pub vit: ViTConfig,
    pub loss: LossConfig,
    /// Training-time cloud generator; `seed` is ignored, masks are seeded per
    /// (run seed, epoch, tile).
    pub cloud: CloudGenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-4,
            batch_size: 8,
            seed: 42,
            eval_cloud_counts: vec![20, 30, 40],
            n_seeds: 3,
            manifest: None,
            output_dir: None,
            checkpoints: CheckpointPolicy::EveryEpoch,
            validate_each_epoch: true,
            vit: ViTConfig::default(),
            loss: LossConfig::default(),
            cloud: CloudGenConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.loss.validate()?;
        self.cloud.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.n_seeds == 0 {
            return Err(Error::Config("epochs, batch_size and n_seeds must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }

    /// Parses and validates a TOML config; a relative `manifest` or
    /// `output_dir` is taken relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The `n_seeds` consecutive seeds starting at `seed`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed + i).collect()
    }

    /// `<output_dir>/<variant>/seed-<seed>`.
    pub fn run_dir(&self) -> Option<PathBuf> {
        self.output_dir.as_ref().map(|d| d.join(self.vit.variant.key()).join(format!("seed-{}", self.seed)))
    }
}

/// Stable 64-bit seed from labelled parts.
pub fn derive_seed(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("digest has 32 bytes"))
}

/// Synthetic cloud mask used for `tile` in training `epoch` of run `seed`.
pub fn train_mask(cloud: &CloudGenConfig, seed: u64, epoch: usize, tile: &TileSample) -> Result<CloudMask> {
    let s = derive_seed(&[b"train", &seed.to_le_bytes(), &(epoch as u64).to_le_bytes(), tile.id().as_bytes()]);
    tile_mask(cloud, cloud.n_clouds, s, tile)
}

/// Frozen evaluation mask of `tile` at `cloud_count`, independent of any run.
pub fn eval_mask(cloud: &CloudGenConfig, cloud_count: usize, tile: &TileSample) -> Result<CloudMask> {
    let s = derive_seed(&[b"eval", &(cloud_count as u64).to_le_bytes(), tile.id().as_bytes()]);
    tile_mask(cloud, cloud_count, s, tile)
}

fn tile_mask(cloud: &CloudGenConfig, n_clouds: usize, seed: u64, tile: &TileSample) -> Result<CloudMask> {
    let s = tile.size();
    if n_clouds == 0 {
        return Ok(CloudMask::zeros(tile.n_msi_frames(), s, s, Provenance::Synthetic));
    }
    generate_mask(&CloudGenConfig { n_clouds, seed, ..cloud.clone() }, tile.n_msi_frames(), s, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Batch means of the unweighted per-scale term sums.
    pub mse: f64,
    pub sam: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Loss history of one run. Wall-clock times are kept apart in
/// `wall_seconds` so the rest is reproducible bit for bit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_seconds: Vec<f64>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,mse,sam\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.epoch, r.loss, r.mse, r.sam);
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, val);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_seconds\n");
        for (i, w) in self.wall_seconds.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, w);
        }
        s
    }

    /// Writes `train_log.csv`, `epochs.csv` and `timing.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("train_log.csv", self.steps_csv()), ("epochs.csv", self.epochs_csv()), ("timing.csv", self.timing_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// One supervised example: a tile, plus the frame for single-frame models.
#[derive(Clone, Copy, Debug)]
struct Item {
    tile: usize,
    frame: Option<usize>,
}

fn items(cfg: &ViTConfig, tiles: &[TileSample]) -> Vec<Item> {
    let frames: Vec<Option<usize>> = if cfg.variant.is_time_series() { vec![None] } else { (0..T_MSI).map(Some).collect() };
    (0..tiles.len()).flat_map(|tile| frames.iter().map(move |&frame| Item { tile, frame })).collect()
}

struct Prepared {
    items: Vec<Item>,
    targets: Vec<ScaledTargets<f32>>,
}

fn prepare(cfg: &RunConfig, tiles: &[TileSample]) -> Result<Prepared> {
    let items = items(&cfg.vit, tiles);
    let targets = items
        .par_iter()
        .map(|it| {
            let (t, v) = target_for(&tiles[it.tile], &cfg.vit, it.frame)?;
            ScaledTargets::new(&t, &v, &cfg.loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { items, targets })
}

/// Multi-scale loss and its terms for one example; gradients when `grads`.
fn example_loss(
    params: &ModelParams,
    x: Tensor,
    targets: &ScaledTargets<f32>,
    loss: &LossConfig,
    grads: bool,
) -> Result<(crate::objective::LossTerms, Vec<Tensor>)> {
    let mut g = Graph::new();
    let pv = params.register(&mut g, grads);
    let xv = g.constant(x);
    let y = forward_packed(&mut g, xv, &pv, &params.cfg)?;
    let (l, terms) = multi_scale_loss_scaled(&mut g, y, targets, loss)?;
    if !grads {
        return Ok((terms, Vec::new()));
    }
    g.backward(l)?;
    let gs = pv
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((terms, gs))
}

/// Mean multi-scale loss over `tiles` under their frozen evaluation masks at
/// the training cloud count.
pub fn validation_loss(params: &ModelParams, cfg: &RunConfig, tiles: &[TileSample]) -> Result<Option<f64>> {
    if tiles.is_empty() {
        return Ok(None);
    }
    let prep = prepare(cfg, tiles)?;
    let losses = prep
        .items
        .par_iter()
        .zip(&prep.targets)
        .map(|(it, tg)| {
            let mask = eval_mask(&cfg.cloud, cfg.cloud.n_clouds, &tiles[it.tile])?;
            let x = pack_input(&tiles[it.tile], &mask, &params.cfg, it.frame)?;
            Ok(example_loss(params, x, tg, &cfg.loss, false)?.0.total)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

fn checkpoint_extra(cfg: &RunConfig, epoch: usize, step: usize) -> serde_json::Value {
    serde_json::json!({ "epoch": epoch, "step": step, "seed": cfg.seed, "lr": cfg.lr, "loss": cfg.loss })
}

/// Trains from the seed-`cfg.seed` initialization. Examples are shuffled each
/// epoch and each tile gets a fresh synthetic mask per epoch; per-example
/// gradients are summed in batch order and averaged before each Adam step.
pub fn train(cfg: &RunConfig, train_tiles: &[TileSample], val_tiles: &[TileSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_tiles.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut params = ModelParams::init(&cfg.vit, cfg.seed)?;
    let prep = prepare(cfg, train_tiles)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut log = TrainLog::default();
    let run_dir = cfg.run_dir();
    let start = Instant::now();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let masks = train_tiles
            .par_iter()
            .map(|t| train_mask(&cfg.cloud, cfg.seed, epoch, t))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..prep.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[b"shuffle", &cfg.seed.to_le_bytes(), &(epoch as u64).to_le_bytes()]));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let it = prep.items[i];
                    let x = pack_input(&train_tiles[it.tile], &masks[it.tile], &cfg.vit, it.frame)?;
                    example_loss(&params, x, &prep.targets[i], &cfg.loss, true)
                })
                .collect::<Result<Vec<_>>>()?;
            let n = results.len() as f64;
            let (mut loss, mut mse, mut sam) = (0.0, 0.0, 0.0);
            let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
            for (terms, gs) in &results {
                loss += terms.total;
                mse += terms.mse_sum();
                sam += terms.sam_sum();
                for (acc, g) in grads.iter_mut().zip(gs) {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
            }
            let (loss, mse, sam) = (loss / n, mse / n, sam / n);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss {loss} at step {step} (epoch {epoch})")));
            }
            let inv = 1.0 / n as f32;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            adam_step(&mut refs, &grads, &mut adam)?;
            if !params.all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {step} (epoch {epoch})")));
            }
            log.steps.push(StepRecord { step, epoch, loss, mse, sam });
            log.wall_seconds.push(start.elapsed().as_secs_f64());
            epoch_loss += loss;
            n_batches += 1;
        }
        let val_loss = if cfg.validate_each_epoch { validation_loss(&params, cfg, val_tiles)? } else { None };
        log.epochs.push(EpochRecord { epoch, train_loss: epoch_loss / n_batches as f64, val_loss });
        if let Some(dir) = &run_dir {
            let save = match cfg.checkpoints {
                CheckpointPolicy::EveryEpoch => true,
                CheckpointPolicy::Final => epoch == cfg.epochs,
                CheckpointPolicy::None => false,
            };
            if save {
                save_params(&dir.join(format!("epoch-{epoch:03}")), &params, checkpoint_extra(cfg, epoch, step))?;
            }
            log.save(dir)?;
        }
    }
    if let Some(dir) = &run_dir {
        if cfg.checkpoints != CheckpointPolicy::None {
            save_params(&dir.join("final"), &params, checkpoint_extra(cfg, cfg.epochs, step))?;
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Loads a checkpoint written by [`train`], optionally requiring `expected`.
pub fn load_checkpoint(dir: &Path, expected: Option<&ViTConfig>) -> Result<ModelParams> {
    Ok(load_params(dir, expected)?.0)
}

fn key(model: String, variant: &str, seed: String, cloud_count: Option<usize>, split: &str) -> ReportKey {
    ReportKey { model, variant: variant.into(), seed, cloud_count, split: split.into() }
}

/// Reconstructs every tile under its frozen mask at `cloud_count` and
/// aggregates the clamped metrics.
pub fn evaluate(
    params: &ModelParams,
    cfg: &RunConfig,
    tiles: &[TileSample],
    cloud_count: usize,
    split: &str,
) -> Result<EvalReport> {
    if params.cfg != cfg.vit {
        return Err(Error::Config("model parameters were built for a different config".into()));
    }
    let records = tiles
        .par_iter()
        .map(|t| {
            let mask = eval_mask(&cfg.cloud, cloud_count, t)?;
            let pred = reconstruct(params, t, &mask)?;
            evaluate_tile(&pred, t, &mask, &t.validity())
        })
        .collect::<Result<Vec<_>>>()?;
    let v = cfg.vit.variant;
    aggregate(&records, key(v.to_string(), v.key(), cfg.seed.to_string(), Some(cloud_count), split))
}

/// The temporal interpolation baseline on the same frozen masks as [`evaluate`].
pub fn evaluate_baseline(cfg: &RunConfig, tiles: &[TileSample], cloud_count: usize, split: &str) -> Result<EvalReport> {
    let records = tiles
        .par_iter()
        .map(|t| {
            let mask = eval_mask(&cfg.cloud, cloud_count, t)?;
            evaluate_tile(&interp_baseline(t, &mask)?, t, &mask, &t.validity())
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&records, key("Interp".into(), "baseline", "-".into(), Some(cloud_count), split))
}

/// A labelled evaluation set.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub split: String,
    pub tiles: Vec<TileSample>,
}

/// Trains every (variant, seed) from `base` and evaluates it on every set at
/// every `base.eval_cloud_counts`. Each variant's detail rows are followed by
/// one `(AVG)` row over all of them. Runs write below `base.output_dir`.
pub fn run_matrix(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_tiles: &[TileSample],
    sets: &[EvalSet],
) -> Result<Vec<EvalReport>> {
    let mut rows = Vec::new();
    let val = sets.first().map(|s| s.tiles.as_slice()).unwrap_or(&[]);
    for &v in variants {
        let mut detail = Vec::new();
        for &seed in seeds {
            let cfg = RunConfig { seed, vit: ViTConfig { variant: v, ..base.vit.clone() }, ..base.clone() };
            let out = train(&cfg, train_tiles, val)?;
            for set in sets {
                for &cc in &base.eval_cloud_counts {
                    detail.push(evaluate(&out.params, &cfg, &set.tiles, cc, &set.split)?);
                }
            }
        }
        if detail.is_empty() {
            continue;
        }
        let split = if sets.len() == 1 { sets[0].split.as_str() } else { "all" };
        let avg = average_reports(&detail, key(format!("{v} (AVG)"), v.key(), "AVG".into(), None, split))?;
        rows.extend(detail);
        rows.push(avg);
    }
    Ok(rows)
}
