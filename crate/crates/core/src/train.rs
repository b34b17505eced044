//! Training, evaluation and the run configuration.
//!
//! A run directory holds `config.toml` (effective configuration with all
//! defaults resolved), `history.csv` (one row per epoch), `last.ckpt`,
//! `best.ckpt` (highest validation IoU) and optional `epochNNNN.ckpt`
//! snapshots.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::ImagePair;
use crate::checkpoint::{self, Checkpoint, DType};
use crate::data::{self, batch_iterator, DatasetManifest, PairSource, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossConfig};
use crate::metrics::{self, ConfusionCounts, MetricsReport};
use crate::model::{self, Model, ModelConfig, ENCODER_PREFIX};
use crate::optim::{AdamW, AdamWConfig};

/// Environment variable recorded in checkpoint metadata; the training loop
/// is single-threaded and deterministic whether or not it is set.
pub const DETERMINISTIC_ENV: &str = "CDNET_DETERMINISTIC";

pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub encoder_lr_mult: f64,
    pub freeze_encoder_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of all optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub augment: bool,
    /// Stop after this many optimizer steps (the current epoch is still
    /// evaluated and logged).
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 0.05,
            encoder_lr_mult: 0.1,
            freeze_encoder_epochs: 0,
            epochs: 150,
            batch_size: 4,
            seed: 0,
            warmup_frac: 0.05,
            augment: true,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthData {
    pub n_train: usize,
    pub n_val: usize,
    /// Train pairs use seeds `pair.seed ..`, validation pairs the seeds
    /// right after them.
    pub pair: SynthConfig,
}

impl Default for SynthData {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_val: 16,
            pair: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root in the standard layout; mutually exclusive with `synth`.
    pub root: Option<PathBuf>,
    pub synth: Option<SynthData>,
    pub train_split: Split,
    pub val_split: Split,
    /// Reject images of any other size when loading from disk.
    pub image_size: Option<(usize, usize)>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            synth: Some(SynthData::default()),
            train_split: Split::Train,
            val_split: Split::Val,
            image_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Also keep `epochNNNN.ckpt` every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dtype: DType,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            checkpoint_dtype: DType::F64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.encoder_lr_mult > 0.0 && o.encoder_lr_mult <= 1.0) {
            return Err(Error::Config(format!(
                "encoder_lr_mult must lie in (0, 1], got {}",
                o.encoder_lr_mult
            )));
        }
        if o.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if o.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(o.base_lr.is_finite() && o.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&o.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(Error::Config("invalid AdamW coefficients".into()));
        }
        if o.grad_clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        match (&self.data.root, &self.data.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set only one of data.root and data.synth".into(),
                ))
            }
            (None, None) => return Err(Error::Config("set data.root or data.synth".into())),
            (None, Some(s)) => {
                s.pair.validate()?;
                if s.n_train == 0 {
                    return Err(Error::Config("data.synth.n_train must be >= 1".into()));
                }
            }
            (Some(_), None) => {}
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }
}

/// Training or evaluation pairs, on disk or generated in memory.
pub enum Source {
    Disk(DatasetManifest),
    Memory(Vec<ImagePair>),
}

impl PairSource for Source {
    fn len(&self) -> usize {
        match self {
            Source::Disk(m) => m.len(),
            Source::Memory(v) => v.len(),
        }
    }

    fn get(&self, index: usize) -> Result<ImagePair> {
        match self {
            Source::Disk(m) => m.get(index),
            Source::Memory(v) => v.get(index),
        }
    }
}

/// Validates every item of a disk source eagerly against `size`.
fn checked_disk(m: DatasetManifest, size: Option<(usize, usize)>) -> Result<Source> {
    if size.is_some() {
        for item in &m.items {
            data::load_item(item, size)?;
        }
    }
    Ok(Source::Disk(m))
}

pub fn synth_pairs(cfg: &SynthConfig, first_seed: u64, n: usize) -> Result<Vec<ImagePair>> {
    (0..n)
        .map(|i| data::generate_pair(&cfg.with_seed(first_seed + i as u64)))
        .collect()
}

/// `(train, val)` sources for a run.
pub fn load_sources(cfg: &DataConfig) -> Result<(Source, Source)> {
    if let Some(s) = &cfg.synth {
        let train = synth_pairs(&s.pair, s.pair.seed, s.n_train)?;
        let val = synth_pairs(&s.pair, s.pair.seed + s.n_train as u64, s.n_val)?;
        return Ok((Source::Memory(train), Source::Memory(val)));
    }
    let root = cfg
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("data.root is not set".into()))?;
    let train = checked_disk(data::load_manifest(root, cfg.train_split)?, cfg.image_size)?;
    let val = checked_disk(data::load_manifest(root, cfg.val_split)?, cfg.image_size)?;
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "L_set")]
    pub l_set: f64,
    #[serde(rename = "L_pixel")]
    pub l_pixel: f64,
    #[serde(rename = "val_F1")]
    pub val_f1: f64,
    #[serde(rename = "val_IoU")]
    pub val_iou: f64,
    /// In `[0, 1]`.
    #[serde(rename = "val_OA")]
    pub val_oa: f64,
    pub lr: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_err(path, e)))
        .collect()
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Csv {
            path: path.to_path_buf(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

/// Learning rate of the decoder-side parameters at optimizer step `step`
/// (0-based): linear warmup over the first `warmup` steps, then constant.
pub fn lr_at(base: f64, step: usize, warmup: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn total_steps(cfg: &RunConfig, n_train: usize) -> usize {
    let all = cfg.optim.epochs * steps_per_epoch(n_train, cfg.optim.batch_size);
    cfg.optim.max_steps.map_or(all, |m| m.min(all))
}

fn warmup_steps(cfg: &RunConfig, total: usize) -> usize {
    (cfg.optim.warmup_frac * total as f64).ceil() as usize
}

/// Shuffle seed for a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub per_image: Vec<(String, ConfusionCounts)>,
}

/// Global confusion counts over `source`. With `oracle`, the ground truth
/// itself is used as the prediction.
pub fn evaluate_model<S: PairSource + ?Sized>(
    model: &Model,
    source: &S,
    oracle: bool,
) -> Result<EvalOutcome> {
    if source.is_empty() {
        return Err(Error::Data("no items to evaluate".into()));
    }
    let mut total = ConfusionCounts::default();
    let mut per_image = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let pair = source.get(i)?;
        let gt = pair
            .gt
            .as_ref()
            .ok_or_else(|| Error::Data(format!("pair `{}` has no ground truth", pair.id)))?;
        let pred = if oracle {
            gt.clone()
        } else {
            model.predict(&pair)?.mask
        };
        let c = metrics::accumulate(&pred, gt, ConfusionCounts::default())?;
        total += c;
        per_image.push((pair.id.clone(), c));
    }
    Ok(EvalOutcome {
        report: metrics::report(&total)?,
        per_image,
    })
}

pub fn write_per_image_csv(path: &Path, outcome: &EvalOutcome) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        tp: u64,
        fp: u64,
        #[serde(rename = "fn")]
        fn_: u64,
        tn: u64,
        f1: f64,
        iou: f64,
        oa: f64,
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (id, c) in &outcome.per_image {
        let r = metrics::report(c)?;
        w.serialize(Row {
            id,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            f1: r.f1,
            iou: r.iou,
            oa: r.oa,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Model tensors of a checkpoint (optimizer state removed).
fn model_tensors(ckpt: &Checkpoint) -> crate::params::ParamStore {
    let mut out = crate::params::ParamStore::new();
    for (k, v) in ckpt.tensors.iter() {
        if !AdamW::is_state_tensor(k) {
            out.insert(k.clone(), v.clone());
        }
    }
    out
}

pub fn config_of(ckpt: &Checkpoint, path: &Path) -> Result<RunConfig> {
    serde_json::from_value(ckpt.config.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("embedded config: {e}"),
    })
}

/// Loads a checkpoint and rebuilds the model from its embedded config.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model)> {
    let ckpt = checkpoint::load(path)?;
    let cfg = config_of(&ckpt, path)?;
    let model = Model::from_tensors(&cfg.model, &model_tensors(&ckpt))?;
    Ok((cfg, model))
}

/// Loads checkpoint tensors into a model built from `config`.
pub fn load_model_as(path: &Path, config: &ModelConfig) -> Result<Model> {
    let ckpt = checkpoint::load(path)?;
    Model::from_tensors(config, &model_tensors(&ckpt))
}

pub fn evaluate(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    oracle: bool,
) -> Result<EvalOutcome> {
    let (_, model) = load_model(checkpoint)?;
    evaluate_model(&model, manifest, oracle)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TrainMeta {
    epoch: usize,
    step: usize,
    best_val_iou: f64,
    optimizer_steps: std::collections::BTreeMap<String, u64>,
    history: Vec<HistoryRow>,
    deterministic_env: Option<String>,
}

pub struct TrainState {
    pub model: Model,
    pub optimizer: AdamW,
    /// Number of completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub best_val_iou: f64,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn fresh(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(&cfg.model, cfg.optim.seed)?;
        let optimizer = AdamW::new(cfg.adamw(), &model.params);
        Ok(Self {
            model,
            optimizer,
            epoch: 0,
            step: 0,
            best_val_iou: f64::NEG_INFINITY,
            history: Vec::new(),
        })
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let meta: TrainMeta =
            serde_json::from_value(ckpt.meta.clone()).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("training metadata: {e}"),
            })?;
        let model = Model::from_tensors(&cfg.model, &model_tensors(&ckpt))?;
        let optimizer = AdamW::restore(
            cfg.adamw(),
            &model.params,
            &ckpt.tensors,
            meta.optimizer_steps,
        )?;
        Ok(Self {
            model,
            optimizer,
            epoch: meta.epoch,
            step: meta.step,
            best_val_iou: meta.best_val_iou,
            history: meta.history,
        })
    }

    fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut tensors = self.model.params.clone();
        for (k, v) in self.optimizer.state_tensors().iter() {
            tensors.insert(k.clone(), v.clone());
        }
        let meta = TrainMeta {
            epoch: self.epoch,
            step: self.step,
            best_val_iou: self.best_val_iou,
            optimizer_steps: self.optimizer.state_steps().clone(),
            history: self.history.clone(),
            deterministic_env: std::env::var(DETERMINISTIC_ENV).ok(),
        };
        Checkpoint {
            config: serde_json::to_value(cfg).expect("config serialises"),
            meta: serde_json::to_value(meta).expect("meta serialises"),
            tensors,
        }
    }
}

/// One optimizer step on a batch; returns the batch-mean loss breakdown.
pub fn train_step(
    cfg: &RunConfig,
    state: &mut TrainState,
    batch: &[ImagePair],
    lr: f64,
    freeze_encoder: bool,
) -> Result<LossBreakdown> {
    let targets = batch
        .iter()
        .map(|p| {
            p.gt.as_ref()
                .ok_or_else(|| Error::Data(format!("pair `{}` has no ground truth", p.id)))
                .and_then(loss::downsample_gt)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = loss::resolve_pixel_weights(&targets, cfg.loss.pixel_class_weights);
    let params = &state.model.params;
    let mut grads = params.zeros_like();
    let mut mean = LossBreakdown::default();
    let inv = 1.0 / batch.len() as f64;
    for pair in batch {
        let mut g = Graph::new();
        let b = params.bind_where(&mut g, |n| {
            !(freeze_encoder && n.starts_with(ENCODER_PREFIX))
        });
        let (vars, bd) = model::loss_graph(&mut g, &b.root(), &cfg.model, &cfg.loss, pair, weights)
            .map_err(|e| match e {
                Error::NonFiniteLoss { breakdown, .. } => Error::NonFiniteLoss {
                    step: state.step,
                    breakdown,
                },
                other => other,
            })?;
        let total = g.value(vars.total).item();
        if !bd.is_finite() || !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                breakdown: format!("{bd} (pair `{}`)", pair.id),
            });
        }
        let gr = g.backward(vars.total);
        grads.add_scaled(&b.gradients(&gr, params), inv);
        for (acc, v) in [
            (&mut mean.total, bd.total),
            (&mut mean.set, bd.set),
            (&mut mean.set_class, bd.set_class),
            (&mut mean.set_bce, bd.set_bce),
            (&mut mean.set_dice, bd.set_dice),
            (&mut mean.pixel, bd.pixel),
        ] {
            *acc += v * inv;
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            breakdown: format!("{mean} (non-finite gradient)"),
        });
    }
    if let Some(max) = cfg.optim.grad_clip {
        let norm = grads.global_norm();
        if norm > max {
            grads.scale_all(max / norm);
        }
    }
    let enc_lr = lr * cfg.optim.encoder_lr_mult;
    state.optimizer.step(&mut state.model.params, &grads, |n| {
        if n.starts_with(ENCODER_PREFIX) {
            (!freeze_encoder).then_some(enc_lr)
        } else {
            Some(lr)
        }
    });
    state.step += 1;
    Ok(mean)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint (written by an earlier run of the same
    /// configuration).
    pub resume_from: Option<PathBuf>,
    /// Stop once this many epochs are complete (for interrupted runs).
    pub stop_after_epoch: Option<usize>,
    /// Write run files to `io.out_dir`.
    pub write: bool,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub best_val_iou: f64,
    pub steps: usize,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_with(
        cfg,
        &TrainOptions {
            write: true,
            ..Default::default()
        },
    )
}

/// Runs (or resumes) training. Validation uses the val source when it is
/// non-empty and the training pairs otherwise.
pub fn train_with(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_src, val_src) = load_sources(&cfg.data)?;
    if train_src.is_empty() {
        return Err(Error::Data("training split has no items".into()));
    }
    let mut state = match &opts.resume_from {
        Some(p) => TrainState::load(cfg, p)?,
        None => TrainState::fresh(cfg)?,
    };
    let out = &cfg.io.out_dir;
    if opts.write {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join(CONFIG_FILE);
        fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
    }
    let total = total_steps(cfg, train_src.len());
    let warmup = warmup_steps(cfg, total);
    log::info!(
        "training {} parameters on {} pairs, seed {}, {} steps",
        state.model.param_count(),
        train_src.len(),
        cfg.optim.seed,
        total
    );

    let last_epoch = opts
        .stop_after_epoch
        .map_or(cfg.optim.epochs, |e| e.min(cfg.optim.epochs));
    while state.epoch < last_epoch && state.step < total {
        let epoch = state.epoch;
        let freeze = epoch < cfg.optim.freeze_encoder_epochs;
        let mut sums = LossBreakdown::default();
        let mut n_steps = 0usize;
        let mut lr = lr_at(cfg.optim.base_lr, state.step, warmup);
        let seed = epoch_seed(cfg.optim.seed, epoch);
        for batch in batch_iterator(
            &train_src,
            cfg.optim.batch_size,
            Some(seed),
            cfg.optim.augment,
        )? {
            if state.step >= total {
                break;
            }
            let batch = batch?;
            lr = lr_at(cfg.optim.base_lr, state.step, warmup);
            let bd = train_step(cfg, &mut state, &batch, lr, freeze)?;
            sums.total += bd.total;
            sums.set += bd.set;
            sums.pixel += bd.pixel;
            n_steps += 1;
        }
        let eval = if val_src.is_empty() {
            evaluate_model(&state.model, &train_src, false)?
        } else {
            evaluate_model(&state.model, &val_src, false)?
        };
        let k = n_steps.max(1) as f64;
        let row = HistoryRow {
            epoch: epoch + 1,
            l_total: sums.total / k,
            l_set: sums.set / k,
            l_pixel: sums.pixel / k,
            val_f1: eval.report.f1,
            val_iou: eval.report.iou,
            val_oa: eval.report.oa,
            lr,
        };
        log::info!(
            "epoch {} loss {:.4} (set {:.4} pixel {:.4}) val IoU {:.4} F1 {:.4}",
            row.epoch,
            row.l_total,
            row.l_set,
            row.l_pixel,
            row.val_iou,
            row.val_f1
        );
        state.history.push(row);
        state.epoch += 1;
        let improved = row.val_iou > state.best_val_iou;
        if improved {
            state.best_val_iou = row.val_iou;
        }
        if opts.write {
            write_history(&out.join(HISTORY_FILE), &state.history)?;
            let ckpt = state.checkpoint(cfg);
            let dtype = cfg.io.checkpoint_dtype;
            checkpoint::save(&out.join(LAST_CKPT), &ckpt, dtype)?;
            if improved {
                checkpoint::save(&out.join(BEST_CKPT), &ckpt, dtype)?;
            }
            if cfg.io.checkpoint_every > 0 && state.epoch % cfg.io.checkpoint_every == 0 {
                checkpoint::save(
                    &out.join(format!("epoch{:04}.ckpt", state.epoch)),
                    &ckpt,
                    dtype,
                )?;
            }
        }
    }
    Ok(TrainOutcome {
        model: state.model,
        history: state.history,
        best_val_iou: state.best_val_iou,
        steps: state.step,
    })
}
