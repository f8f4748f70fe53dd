//! Training orchestration: optimizer and schedule, dataset-mixing batch
//! sampler, the training loop, and embedding export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view, make_view_pair, resize_bilinear, sample_seed, AugmentConfig};
use crate::config::Config;
use crate::data::{
    split_integrity_check, task_specs_from_metadata, ImageStore, MetadataRecord,
    MultiChannelImage,
};
use crate::error::{Error, Result};
use crate::eval::EmbeddingStore;
use crate::frontends::{FrontendConfig, Strategy};
use crate::losses::{combined_loss, ntxent_loss, proxynca_loss, LossConfig, ProxyBank};
use crate::model::{channel_replication_embed, BackboneConfig, EmbeddingModel};
use crate::registry::ChannelRegistry;
use crate::tensor::{CheckpointEntry, GradMap, Graph, Param, ParamId, Scalar, Tensor, Var};

/// Full training configuration. Defaults are the desk-scale recipe; the
/// published recipe (15 epochs, batch 128) is restored by `paper_recipe`.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Side length of the model's training inputs.
    pub resolution: usize,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub frontend: FrontendConfig,
    pub backbone: BackboneConfig,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Depthwise,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            lr_end: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 5e-4,
            seed: 0,
            resolution: 128,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            frontend: FrontendConfig::default(),
            backbone: BackboneConfig::default(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// The published training recipe: 15 epochs at batch 128.
    pub fn paper_recipe(mut self) -> Self {
        self.epochs = 15;
        self.batch_size = 128;
        self.resolution = 128;
        self
    }

    /// Resolve from a parsed dotted-key config.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let mut tc = TrainConfig::default();
        if let Some(s) = cfg.get("train.strategy") {
            tc.strategy = Strategy::parse(s)?;
        }
        tc.epochs = cfg.get_usize("train.epochs", tc.epochs)?;
        tc.batch_size = cfg.get_usize("train.batch_size", tc.batch_size)?;
        tc.lr = cfg.get_f64("train.lr", tc.lr)?;
        tc.lr_end = cfg.get_f64("train.lr_end", tc.lr_end)?;
        tc.beta1 = cfg.get_f64("train.beta1", tc.beta1)?;
        tc.beta2 = cfg.get_f64("train.beta2", tc.beta2)?;
        tc.weight_decay = cfg.get_f64("train.weight_decay", tc.weight_decay)?;
        tc.seed = cfg.get_u64("train.seed", tc.seed)?;
        tc.resolution = cfg.get_usize("train.resolution", tc.resolution)?;
        tc.deterministic = cfg.get_bool("train.deterministic", tc.deterministic)?;

        tc.loss.alpha = cfg.get_f64("loss.alpha", tc.loss.alpha)?;
        tc.loss.proxy_temperature =
            cfg.get_f64("loss.proxy_temperature", tc.loss.proxy_temperature)?;
        tc.loss.ssl_temperature = cfg.get_f64("loss.ssl_temperature", tc.loss.ssl_temperature)?;

        tc.augment.crop_min = cfg.get_f64("augment.crop_min", tc.augment.crop_min)?;
        tc.augment.crop_max = cfg.get_f64("augment.crop_max", tc.augment.crop_max)?;
        tc.augment.flip_h = cfg.get_f64("augment.flip_h", tc.augment.flip_h)?;
        tc.augment.flip_v = cfg.get_f64("augment.flip_v", tc.augment.flip_v)?;
        tc.augment.tps_grid = cfg.get_usize("augment.tps_grid", tc.augment.tps_grid)?;
        tc.augment.tps_sigma = cfg.get_f64("augment.tps_sigma", tc.augment.tps_sigma)?;

        tc.frontend.out_channels =
            cfg.get_usize("frontend.out_channels", tc.frontend.out_channels)?;
        tc.frontend.kernel = cfg.get_usize("frontend.kernel", tc.frontend.kernel)?;
        tc.frontend.stride = cfg.get_usize("frontend.stride", tc.frontend.stride)?;
        tc.frontend.templates = cfg.get_usize("frontend.templates", tc.frontend.templates)?;
        tc.frontend.embed_dim = cfg.get_usize("frontend.embed_dim", tc.frontend.embed_dim)?;
        tc.frontend.hidden_dim = cfg.get_usize("frontend.hidden_dim", tc.frontend.hidden_dim)?;

        tc.backbone.widths = cfg.get_usize_list("backbone.widths", &tc.backbone.widths)?;
        tc.backbone.depths = cfg.get_usize_list("backbone.depths", &tc.backbone.depths)?;
        tc.backbone.embed_dim = cfg.get_usize("backbone.embed_dim", tc.backbone.embed_dim)?;

        if cfg.get_bool("train.paper_recipe", false)? {
            tc = tc.paper_recipe();
        }
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config(format!("train.lr {} must be >= 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if self.resolution % self.frontend.stride != 0 {
            return Err(Error::config(format!(
                "train.resolution {} must be divisible by the stem stride {}",
                self.resolution, self.frontend.stride
            )));
        }
        if self.backbone.widths.first() != Some(&self.frontend.out_channels) {
            return Err(Error::config(
                "backbone.widths[0] must equal frontend.out_channels".to_string(),
            ));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    /// Resolved key-value view for manifests and reports.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("train.strategy", self.strategy.name().to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr", format!("{}", self.lr));
        put("train.lr_end", format!("{}", self.lr_end));
        put("train.beta1", format!("{}", self.beta1));
        put("train.beta2", format!("{}", self.beta2));
        put("train.weight_decay", format!("{}", self.weight_decay));
        put("train.seed", self.seed.to_string());
        put("train.resolution", self.resolution.to_string());
        put("train.deterministic", self.deterministic.to_string());
        put("loss.alpha", format!("{}", self.loss.alpha));
        put("loss.proxy_temperature", format!("{}", self.loss.proxy_temperature));
        put("loss.ssl_temperature", format!("{}", self.loss.ssl_temperature));
        put("augment.crop_min", format!("{}", self.augment.crop_min));
        put("augment.crop_max", format!("{}", self.augment.crop_max));
        put("augment.flip_h", format!("{}", self.augment.flip_h));
        put("augment.flip_v", format!("{}", self.augment.flip_v));
        put("augment.tps_grid", self.augment.tps_grid.to_string());
        put("augment.tps_sigma", format!("{}", self.augment.tps_sigma));
        put("frontend.out_channels", self.frontend.out_channels.to_string());
        put("frontend.kernel", self.frontend.kernel.to_string());
        put("frontend.stride", self.frontend.stride.to_string());
        put("frontend.templates", self.frontend.templates.to_string());
        put("frontend.embed_dim", self.frontend.embed_dim.to_string());
        put("frontend.hidden_dim", self.frontend.hidden_dim.to_string());
        put(
            "backbone.widths",
            self.backbone
                .widths
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        put(
            "backbone.depths",
            self.backbone
                .depths
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        put("backbone.embed_dim", self.backbone.embed_dim.to_string());
        m
    }
}

/// Cosine decay from `base` at step 0 to `end` at the final step.
pub fn cosine_lr(base: f64, end: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    end + 0.5 * (base - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-weight-decay adaptive-moments optimizer.
pub struct AdamW<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: usize,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One optimizer step. Parameters without a gradient are untouched.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &GradMap<T>, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in params {
            let Some(grad) = grads.get(&p.id) else {
                continue;
            };
            let n = p.value.numel();
            let (m, v) = self
                .moments
                .entry(p.id)
                .or_insert_with(|| (vec![T::ZERO; n], vec![T::ZERO; n]));
            let b1 = T::from_f64(self.beta1);
            let b2 = T::from_f64(self.beta2);
            let one_b1 = T::from_f64(1.0 - self.beta1);
            let one_b2 = T::from_f64(1.0 - self.beta2);
            let lr_t = T::from_f64(lr);
            let wd = T::from_f64(lr * self.weight_decay);
            let eps = T::from_f64(self.eps);
            let ibc1 = T::from_f64(1.0 / bc1);
            let ibc2 = T::from_f64(1.0 / bc2);
            let mut new_values = p.value.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] * ibc1;
                let v_hat = v[i] * ibc2;
                let theta = new_values[i];
                new_values[i] = theta - lr_t * (m_hat / (v_hat.sqrt() + eps)) - wd * theta;
            }
            p.value = Tensor::new(p.value.shape().to_vec(), new_values).expect("same shape");
        }
    }
}

/// Batches that cover every record exactly once per epoch, with every full
/// batch containing at least one record from each expected dataset.
pub fn mixed_batch_sampler(
    dataset_of: &[String],
    expected_datasets: &[String],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("sampler: batch size must be >= 1"));
    }
    let mut queues: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for d in expected_datasets {
        queues.insert(d.as_str(), Vec::new());
    }
    for (i, d) in dataset_of.iter().enumerate() {
        queues
            .get_mut(d.as_str())
            .ok_or_else(|| Error::contract(format!("record {i} has unexpected dataset {d}")))?
            .push(i);
    }
    for (d, q) in &queues {
        if q.is_empty() {
            return Err(Error::contract(format!("dataset {d} has zero training records")));
        }
    }
    let n = dataset_of.len();
    let d_count = queues.len();
    let full_batches = n / batch_size;
    if full_batches > 0 && batch_size < d_count {
        return Err(Error::contract(format!(
            "batch size {batch_size} smaller than dataset count {d_count}"
        )));
    }
    let min_count = queues.values().map(Vec::len).min().unwrap_or(0);
    if full_batches > min_count {
        return Err(Error::contract(format!(
            "cannot place one record from every dataset in each of {full_batches} batches; \
             smallest dataset has {min_count} records"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for q in queues.values_mut() {
        q.shuffle(&mut rng);
    }
    let mut batches: Vec<Vec<usize>> = vec![Vec::with_capacity(batch_size); full_batches];
    // reserve one record per dataset per full batch
    for batch in batches.iter_mut() {
        for q in queues.values_mut() {
            batch.push(q.pop().expect("reservation feasibility checked"));
        }
    }
    // pool the leftovers and deal them out
    let mut pool: Vec<usize> = queues.values().flatten().copied().collect();
    pool.shuffle(&mut rng);
    let mut cursor = 0;
    for batch in batches.iter_mut() {
        let want = batch_size - batch.len();
        batch.extend_from_slice(&pool[cursor..cursor + want]);
        cursor += want;
        batch.shuffle(&mut rng);
    }
    if cursor < pool.len() {
        batches.push(pool[cursor..].to_vec());
    }
    Ok(batches)
}

/// A trained embedding stack: one shared model, or one model per dataset for
/// the fixed-channels baseline.
pub enum TrainedModel<T> {
    Single(EmbeddingModel<T>),
    PerDataset(BTreeMap<String, EmbeddingModel<T>>),
}

impl<T: Scalar> TrainedModel<T> {
    pub fn strategy(&self) -> Strategy {
        match self {
            TrainedModel::Single(m) => m.strategy(),
            TrainedModel::PerDataset(map) => {
                map.values().next().map(|m| m.strategy()).unwrap_or(Strategy::FixedChannels)
            }
        }
    }

    /// Deterministic eval-mode embedding; ChannelReplication concatenates
    /// per-channel embeddings, all other strategies embed once.
    pub fn embed(&self, img: &MultiChannelImage<T>) -> Result<Vec<T>> {
        match self {
            TrainedModel::Single(m) => {
                if m.strategy() == Strategy::ChannelReplication {
                    channel_replication_embed(m, img).map(|(v, _)| v)
                } else {
                    m.embed(img)
                }
            }
            TrainedModel::PerDataset(map) => {
                let m = map.get(&img.channel_set).ok_or_else(|| {
                    Error::StrategyMismatch(format!(
                        "no fixed-channels model for dataset {}",
                        img.channel_set
                    ))
                })?;
                m.embed(img)
            }
        }
    }

    /// Total trainable parameters (all per-dataset models included).
    pub fn count_parameters(&self) -> usize {
        match self {
            TrainedModel::Single(m) => m.count_parameters(),
            TrainedModel::PerDataset(map) => map.values().map(|m| m.count_parameters()).sum(),
        }
    }
}

/// Per-epoch loss history plus everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub strategy: String,
    pub classes: Vec<String>,
    pub start_unix: u64,
    pub end_unix: u64,
    pub checkpoint: String,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub checkpoint_path: PathBuf,
    pub manifest_path: PathBuf,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Train one strategy on the train split of `records` and write a checkpoint
/// plus run manifest under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    records: &[MetadataRecord],
    store: &ImageStore,
    registry: Arc<ChannelRegistry>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.strategy == Strategy::ChannelReplication {
        return Err(Error::config(
            "channel_replication reuses a fixed 3-channel model and is not trained here; \
             train fixed_channels or an adaptive strategy instead"
                .to_string(),
        ));
    }
    let specs = task_specs_from_metadata(records)?;
    let integrity = split_integrity_check(records, &specs);
    if !integrity.is_clean() {
        return Err(Error::contract(format!(
            "split integrity violations: {}",
            integrity.violations.join("; ")
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let start_unix = now_unix();

    let mut train_records: Vec<&MetadataRecord> =
        records.iter().filter(|r| r.split == "train").collect();
    if cfg.deterministic {
        train_records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }
    let classes: Vec<String> = {
        let mut c: Vec<String> = train_records.iter().map(|r| r.label.clone()).collect();
        c.sort_unstable();
        c.dedup();
        c
    };

    let checkpoint_path = out_dir.join("model.camk");
    let manifest_path = out_dir.join("manifest.json");
    let mut loss_history: Vec<f64> = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.strategy {
        Strategy::FixedChannels => {
            // one independent model per dataset, trained on its own rows
            let mut models: BTreeMap<String, EmbeddingModel<f32>> = BTreeMap::new();
            let mut epoch_losses = vec![0.0f64; cfg.epochs];
            for (dataset, channels) in registry
                .dataset_names()
                .iter()
                .map(|d| (d.clone(), registry.channel_count(d).unwrap()))
            {
                let rows: Vec<&MetadataRecord> = train_records
                    .iter()
                    .copied()
                    .filter(|r| r.dataset == dataset)
                    .collect();
                if rows.is_empty() {
                    return Err(Error::contract(format!(
                        "dataset {dataset} has zero training records"
                    )));
                }
                let mut model = EmbeddingModel::new(
                    Strategy::FixedChannels,
                    cfg.frontend,
                    cfg.backbone.clone(),
                    Arc::clone(&registry),
                    channels,
                    &mut rng,
                )?;
                let ds_classes: Vec<String> = {
                    let mut c: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
                    c.sort_unstable();
                    c.dedup();
                    c
                };
                let history = train_single(cfg, &rows, store, &mut model, &ds_classes, &mut rng)?;
                for (e, l) in history.iter().enumerate() {
                    epoch_losses[e] += l / registry.dataset_names().len() as f64;
                }
                models.insert(dataset, model);
            }
            loss_history = epoch_losses;
            save_ensemble(&models, &checkpoint_path)?;
        }
        _ => {
            let mut model = EmbeddingModel::new(
                cfg.strategy,
                cfg.frontend,
                cfg.backbone.clone(),
                Arc::clone(&registry),
                0,
                &mut rng,
            )?;
            loss_history = train_single(cfg, &train_records, store, &mut model, &classes, &mut rng)?;
            model.save_checkpoint(&checkpoint_path, &[])?;
        }
    }

    let manifest = RunManifest {
        config: cfg.echo(),
        seed: cfg.seed,
        strategy: cfg.strategy.name().to_string(),
        classes,
        start_unix,
        end_unix: now_unix(),
        checkpoint: checkpoint_path
            .file_name()
            .unwrap()
            .to_string_lossy()
            .to_string(),
        loss_history,
    };
    manifest.save(&manifest_path)?;
    Ok(TrainOutcome {
        manifest,
        checkpoint_path,
        manifest_path,
    })
}

/// Core loop for one model. Returns the per-epoch mean loss history.
fn train_single(
    cfg: &TrainConfig,
    train_records: &[&MetadataRecord],
    store: &ImageStore,
    model: &mut EmbeddingModel<f32>,
    classes: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut proxy_bank = ProxyBank::<f32>::new(
        classes.to_vec(),
        model.embed_dim(),
        cfg.loss.proxy_temperature,
        rng,
    )?;
    let mut optimizer: AdamW<f32> = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let dataset_of: Vec<String> = train_records.iter().map(|r| r.dataset.clone()).collect();
    let expected: Vec<String> = {
        let mut d = dataset_of.clone();
        d.sort_unstable();
        d.dedup();
        d
    };
    let label_index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut aug = cfg.augment;
    aug.out_size = cfg.resolution;

    let batches_per_epoch =
        mixed_batch_sampler(&dataset_of, &expected, cfg.batch_size, cfg.seed)?.len();
    let total_steps = cfg.epochs * batches_per_epoch;

    // cheap per-epoch snapshots (tensors are refcounted) for divergence recovery
    let snapshot = |model: &mut EmbeddingModel<f32>, bank: &ProxyBank<f32>| -> Vec<Tensor<f32>> {
        let mut s: Vec<Tensor<f32>> = model.params_mut().iter().map(|p| p.value.clone()).collect();
        s.push(bank.proxies.value.clone());
        s
    };
    let mut last_good = snapshot(model, &proxy_bank);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15);
        let batches = mixed_batch_sampler(&dataset_of, &expected, cfg.batch_size, epoch_seed)?;
        let mut epoch_loss = 0.0f64;
        for batch in &batches {
            let lr = cosine_lr(cfg.lr, cfg.lr_end, step, total_steps);
            match train_step(
                cfg,
                &aug,
                train_records,
                store,
                model,
                &mut proxy_bank,
                &mut optimizer,
                &label_index,
                batch,
                epoch,
                lr,
            ) {
                Ok(loss) => epoch_loss += loss,
                Err(Error::NonFinite { op }) => {
                    // divergence: restore the last epoch-end parameters so the
                    // caller can persist a usable checkpoint
                    let mut params = model.params_mut();
                    params.push(&mut proxy_bank.proxies);
                    for (p, v) in params.into_iter().zip(last_good.iter()) {
                        p.value = v.clone();
                    }
                    return Err(Error::contract(format!(
                        "training diverged (non-finite value in {op}) at epoch {epoch}; \
                         parameters rolled back to the last completed epoch"
                    )));
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        history.push(epoch_loss / batches.len() as f64);
        last_good = snapshot(model, &proxy_bank);
    }
    model.extra_checkpoint_entries = vec![CheckpointEntry::from_tensor(
        "proxies",
        &proxy_bank.proxies.value,
    )];
    Ok(history)
}

/// One optimizer step over a batch: forward every image (two views when the
/// contrastive term is active), evaluate the loss, backprop, update, and fold
/// the batch normalization statistics into the running buffers.
#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    train_records: &[&MetadataRecord],
    store: &ImageStore,
    model: &mut EmbeddingModel<f32>,
    proxy_bank: &mut ProxyBank<f32>,
    optimizer: &mut AdamW<f32>,
    label_index: &BTreeMap<&str, usize>,
    batch: &[usize],
    epoch: usize,
    lr: f64,
) -> Result<f64> {
    let use_ssl = cfg.loss.alpha > 0.0;
    let mut g: Graph<f32> = Graph::new();
    let mut emb_a: Vec<Var> = Vec::with_capacity(batch.len());
    let mut emb_b: Vec<Var> = Vec::with_capacity(if use_ssl { batch.len() } else { 0 });
    let mut labels: Vec<usize> = Vec::with_capacity(batch.len());
    let mut stat_sums: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut stat_count = 0usize;

    let accumulate_stats = |g: &Graph<f32>, norms: &[Var], sums: &mut Vec<(Vec<f64>, Vec<f64>)>, count: &mut usize| {
        if sums.is_empty() {
            for &nv in norms {
                let (m, v) = g.norm_batch_stats(nv).expect("train-mode norm");
                sums.push((
                    m.iter().map(|&x| x as f64).collect(),
                    v.iter().map(|&x| x as f64).collect(),
                ));
            }
        } else {
            for (slot, &nv) in sums.iter_mut().zip(norms) {
                let (m, v) = g.norm_batch_stats(nv).expect("train-mode norm");
                for (acc, &x) in slot.0.iter_mut().zip(m) {
                    *acc += x as f64;
                }
                for (acc, &x) in slot.1.iter_mut().zip(v) {
                    *acc += x as f64;
                }
            }
        }
        *count += 1;
    };

    for &ri in batch {
        let record = train_records[ri];
        let img = store
            .get(&record.image_id)
            .ok_or_else(|| Error::contract(format!("image {} not loaded", record.image_id)))?;
        let seed = sample_seed(cfg.seed, &record.image_id, epoch);
        let class = *label_index
            .get(record.label.as_str())
            .ok_or_else(|| Error::Index(format!("label {} not in proxy bank", record.label)))?;
        labels.push(class);

        let forward_view = |g: &mut Graph<f32>, view: Tensor<f32>| -> Result<(Var, Vec<Var>)> {
            let stem = model.frontend.forward(g, &view, &record.dataset)?;
            model.backbone.forward_with_norms(g, stem, true)
        };
        if use_ssl {
            let (va, vb) = make_view_pair(&img.data, aug, seed)?;
            let (ea, norms_a) = forward_view(&mut g, va)?;
            accumulate_stats(&g, &norms_a, &mut stat_sums, &mut stat_count);
            let (eb, norms_b) = forward_view(&mut g, vb)?;
            accumulate_stats(&g, &norms_b, &mut stat_sums, &mut stat_count);
            emb_a.push(ea);
            emb_b.push(eb);
        } else {
            let va = make_view(&img.data, aug, seed)?;
            let (ea, norms_a) = forward_view(&mut g, va)?;
            accumulate_stats(&g, &norms_a, &mut stat_sums, &mut stat_count);
            emb_a.push(ea);
        }
    }

    let matrix_a = g.stack_rows(&emb_a)?;
    let proxies = g.param(&proxy_bank.proxies)?;
    let proxy_term = proxynca_loss(&mut g, matrix_a, &labels, proxies, cfg.loss.proxy_temperature)?;
    let loss = if use_ssl {
        let matrix_b = g.stack_rows(&emb_b)?;
        let ssl_term = ntxent_loss(&mut g, matrix_a, matrix_b, cfg.loss.ssl_temperature)?;
        combined_loss(&mut g, &cfg.loss, proxy_term, ssl_term)?
    } else {
        proxy_term
    };
    let loss_value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;

    let mut params = model.params_mut();
    params.push(&mut proxy_bank.proxies);
    optimizer.step(params, &grads, lr);

    // fold the batch-mean statistics into the running buffers
    let inv = 1.0 / stat_count as f64;
    let averaged: Vec<(Vec<f32>, Vec<f32>)> = stat_sums
        .iter()
        .map(|(m, v)| {
            (
                m.iter().map(|&x| (x * inv) as f32).collect(),
                v.iter().map(|&x| (x * inv) as f32).collect(),
            )
        })
        .collect();
    model.backbone.update_running_stats(&averaged);
    Ok(loss_value)
}

fn save_ensemble(models: &BTreeMap<String, EmbeddingModel<f32>>, path: &Path) -> Result<()> {
    let mut entries: Vec<CheckpointEntry> = Vec::new();
    for (dataset, model) in models {
        for p in model.params() {
            entries.push(CheckpointEntry::from_tensor(
                format!("{dataset}/{}", p.name),
                &p.value,
            ));
        }
        for mut e in model.backbone.state_entries("") {
            e.name = format!("{dataset}/{}", e.name);
            entries.push(e);
        }
        for e in &model.extra_checkpoint_entries {
            let mut e = e.clone();
            e.name = format!("{dataset}/{}", e.name);
            entries.push(e);
        }
    }
    crate::tensor::write_checkpoint(path, &entries)
}

/// Rebuild a trained stack from a run manifest and its checkpoint.
pub fn load_trained(
    manifest: &RunManifest,
    checkpoint: &Path,
    registry: Arc<ChannelRegistry>,
) -> Result<TrainedModel<f32>> {
    let mut cfg_map = Config::new();
    for (k, v) in &manifest.config {
        cfg_map.set(k, v);
    }
    let cfg = TrainConfig::from_config(&cfg_map)?;
    let strategy = Strategy::parse(&manifest.strategy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    match strategy {
        Strategy::FixedChannels => {
            let entries = crate::tensor::read_checkpoint(checkpoint)?;
            let mut by_name: BTreeMap<String, CheckpointEntry> =
                entries.into_iter().map(|e| (e.name.clone(), e)).collect();
            let mut models = BTreeMap::new();
            for dataset in registry.dataset_names() {
                let channels = registry.channel_count(&dataset)?;
                let mut model = EmbeddingModel::new(
                    Strategy::FixedChannels,
                    cfg.frontend,
                    cfg.backbone.clone(),
                    Arc::clone(&registry),
                    channels,
                    &mut rng,
                )?;
                let prefix = format!("{dataset}/");
                for p in model.params_mut() {
                    let name = format!("{prefix}{}", p.name);
                    let e = by_name.remove(&name).ok_or_else(|| {
                        Error::format(format!("checkpoint missing parameter {name}"))
                    })?;
                    p.value = e.to_tensor()?;
                }
                let state_names: Vec<String> = by_name
                    .keys()
                    .filter(|n| n.starts_with(&prefix))
                    .cloned()
                    .collect();
                for name in state_names {
                    let stripped = name[prefix.len()..].to_string();
                    let consumed = {
                        let e = &by_name[&name];
                        model.backbone.load_state_entry(&stripped, e)?
                    };
                    if consumed {
                        by_name.remove(&name);
                    }
                }
                models.insert(dataset, model);
            }
            Ok(TrainedModel::PerDataset(models))
        }
        _ => {
            let fixed_channels = if strategy == Strategy::ChannelReplication { 3 } else { 0 };
            let mut model = EmbeddingModel::new(
                strategy,
                cfg.frontend,
                cfg.backbone.clone(),
                registry,
                fixed_channels,
                &mut rng,
            )?;
            model.load_checkpoint(checkpoint)?;
            Ok(TrainedModel::Single(model))
        }
    }
}

/// Eval-mode embeddings for every record: images are resized (no crop, no
/// augmentation) to the model's input resolution and embedded in parallel.
pub fn embed_records(
    model: &TrainedModel<f32>,
    store: &ImageStore,
    records: &[MetadataRecord],
    resolution: usize,
) -> Result<EmbeddingStore> {
    let results: Vec<(String, Result<Vec<f32>>)> = records
        .par_iter()
        .map(|r| {
            let out = (|| {
                let img = store
                    .get(&r.image_id)
                    .ok_or_else(|| Error::contract(format!("image {} not loaded", r.image_id)))?;
                let resized = MultiChannelImage {
                    data: resize_bilinear(&img.data, resolution, resolution)?,
                    channel_set: img.channel_set.clone(),
                    image_id: img.image_id.clone(),
                };
                model.embed(&resized)
            })();
            (r.image_id.clone(), out)
        })
        .collect();
    let mut store_out = EmbeddingStore::new();
    for (id, res) in results {
        store_out.insert(id, res?);
    }
    Ok(store_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn cosine_schedule_hits_both_endpoints() {
        let base = 3e-4;
        let end = 1e-7;
        let total = 470;
        assert_eq!(cosine_lr(base, end, 0, total), base);
        let last = cosine_lr(base, end, total - 1, total);
        assert!((last - end).abs() <= 1e-9, "{last}");
        // monotone decreasing
        let mut prev = base;
        for t in 1..total {
            let lr = cosine_lr(base, end, t, total);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
        assert_eq!(cosine_lr(base, end, 0, 1), base);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut p = Param::new("w", Tensor::<f64>::from_fn(&[4], |i| i as f64 + 0.5));
        let before = p.value.data().to_vec();
        let mut opt: AdamW<f64> = AdamW::new(0.9, 0.999, 5e-4);
        let mut grads: GradMap<f64> = BTreeMap::new();
        grads.insert(p.id, Tensor::from_fn(&[4], |i| (i as f64) - 1.7));
        for _ in 0..25 {
            opt.step(vec![&mut p], &grads, 0.0);
        }
        assert_eq!(p.value.data(), &before[..]);
    }

    #[test]
    fn adamw_moves_against_the_gradient() {
        let mut p = Param::new("w", Tensor::<f64>::from_fn(&[2], |_| 1.0));
        let mut opt: AdamW<f64> = AdamW::new(0.9, 0.999, 0.0);
        let mut grads: GradMap<f64> = BTreeMap::new();
        grads.insert(p.id, Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        opt.step(vec![&mut p], &grads, 0.1);
        assert!(p.value.data()[0] < 1.0);
        assert!(p.value.data()[1] > 1.0);
    }

    fn datasets_of(counts: &[(&str, usize)]) -> Vec<String> {
        counts
            .iter()
            .flat_map(|(d, n)| std::iter::repeat(d.to_string()).take(*n))
            .collect()
    }

    #[test]
    fn sampler_transversal_when_batch_equals_dataset_count() {
        let ds = datasets_of(&[("A", 5), ("B", 5), ("C", 5)]);
        let expected: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let batches = mixed_batch_sampler(&ds, &expected, 3, 1).unwrap();
        assert_eq!(batches.len(), 5);
        for b in &batches {
            let mut names: Vec<&str> = b.iter().map(|&i| ds[i].as_str()).collect();
            names.sort_unstable();
            assert_eq!(names, ["A", "B", "C"]);
        }
    }

    #[test]
    fn sampler_covers_every_record_exactly_once() {
        let ds = datasets_of(&[("A", 17), ("B", 11), ("C", 23)]);
        let expected: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let batches = mixed_batch_sampler(&ds, &expected, 8, 2).unwrap();
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..51).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_rejects_empty_datasets() {
        let ds = datasets_of(&[("A", 5)]);
        let expected: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        assert!(mixed_batch_sampler(&ds, &expected, 2, 0).is_err());
    }

    #[test]
    fn sampler_full_batches_always_mix_all_datasets() {
        let ds = datasets_of(&[("A", 40), ("B", 25), ("C", 35)]);
        let expected: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        for seed in 0..20 {
            let batches = mixed_batch_sampler(&ds, &expected, 10, seed).unwrap();
            for b in batches.iter().take(ds.len() / 10) {
                let mut names: Vec<&str> = b.iter().map(|&i| ds[i].as_str()).collect();
                names.sort_unstable();
                names.dedup();
                assert_eq!(names.len(), 3, "seed {seed}");
            }
        }
    }

    #[test]
    fn sampler_batch_composition_passes_chi_square() {
        // equal-size datasets: expected per-batch composition is uniform
        let ds = datasets_of(&[("A", 120), ("B", 120), ("C", 120)]);
        let expected: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let batch_size = 12usize;
        let full = ds.len() / batch_size;
        let df = (full * 2) as f64;
        let critical = ChiSquared::new(df).unwrap().inverse_cdf(0.99);
        let mut failures = 0;
        let epochs = 1000;
        for seed in 0..epochs {
            let batches = mixed_batch_sampler(&ds, &expected, batch_size, seed).unwrap();
            let mut stat = 0.0f64;
            for b in batches.iter().take(full) {
                let mut counts = [0.0f64; 3];
                for &i in b {
                    match ds[i].as_str() {
                        "A" => counts[0] += 1.0,
                        "B" => counts[1] += 1.0,
                        _ => counts[2] += 1.0,
                    }
                }
                let expected_count = batch_size as f64 / 3.0;
                for c in counts {
                    stat += (c - expected_count).powi(2) / expected_count;
                }
            }
            if stat > critical {
                failures += 1;
            }
        }
        // alpha = 0.01 -> about 10 expected failures in 1000; the reservation
        // step makes batches slightly more uniform than multinomial, so the
        // observed rate sits below alpha
        assert!(
            failures <= 30,
            "{failures} of {epochs} epochs failed the chi-square test"
        );
    }

    #[test]
    fn train_config_validation_catches_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.lr = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.resolution = 50; // not divisible by stem stride 4
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.loss.alpha = 1.5;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn paper_recipe_restores_published_values() {
        let cfg = TrainConfig::default().paper_recipe();
        assert_eq!(cfg.epochs, 15);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.999);
    }
}
