//! Shared mini backbone and the embedding models built on it.
//!
//! The backbone is a small staged convnet: the frontend acts as the stem,
//! then `depths[i]` conv blocks at `widths[i]` with stride-2 downsampling
//! between stages, adaptive average pooling to 1x1, and an affine head to
//! the embedding dimension. One backbone parameter set serves every dataset
//! (weight sharing); only the frontend reconfigures per channel set.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::data::MultiChannelImage;
use crate::error::{Error, Result};
use crate::frontends::{Frontend, FrontendConfig, Strategy};
use crate::registry::ChannelRegistry;
use crate::tensor::{
    read_checkpoint, write_checkpoint, CheckpointEntry, Graph, Padding, Param, Scalar,
    Tensor, Var,
};

/// Backbone geometry. Widths and per-stage depths are configurable; the
/// first width must equal the frontend's out_channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub embed_dim: usize,
    pub norm_eps: f64,
    /// Momentum for the running normalization statistics.
    pub stat_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: vec![96, 192, 384],
            depths: vec![2, 2, 4],
            embed_dim: 128,
            norm_eps: 1e-5,
            stat_momentum: 0.1,
        }
    }
}

/// conv -> spatial norm -> GELU, with running stats for eval mode.
struct ConvBlock<T> {
    weight: Param<T>,
    bias: Param<T>,
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Tensor<T>,
    running_var: Tensor<T>,
    stride: usize,
    padding: Padding,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        ConvBlock {
            weight: Param::new(
                format!("{name}/conv/weight"),
                Tensor::from_fn(&[c_out, c_in, k, k], |_| T::from_f64(rng.gen_range(-bound..bound))),
            ),
            bias: Param::new(format!("{name}/conv/bias"), Tensor::zeros(&[c_out])),
            gamma: Param::new(format!("{name}/norm/gamma"), Tensor::full(&[c_out], T::ONE)),
            beta: Param::new(format!("{name}/norm/beta"), Tensor::zeros(&[c_out])),
            running_mean: Tensor::zeros(&[c_out]),
            running_var: Tensor::full(&[c_out], T::ONE),
            stride,
            padding,
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, eps: T, train: bool) -> Result<(Var, Var)> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.conv2d(x, w, Some(b), self.stride, self.padding)?;
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        let frozen = if train {
            None
        } else {
            Some((self.running_mean.clone(), self.running_var.clone()))
        };
        let norm = g.spatial_norm(y, gamma, beta, eps, frozen)?;
        Ok((g.gelu(norm)?, norm))
    }

    /// Fold the current batch statistics of `pre_norm` into the running
    /// buffers. Called by the trainer after a training-mode forward.
    fn update_running_stats(&mut self, mean: &[T], var: &[T], momentum: f64) {
        let m = T::from_f64(momentum);
        let one_m = T::from_f64(1.0 - momentum);
        self.running_mean = Tensor::from_fn(self.running_mean.shape(), |i| {
            one_m * self.running_mean.data()[i] + m * mean[i]
        });
        self.running_var = Tensor::from_fn(self.running_var.shape(), |i| {
            one_m * self.running_var.data()[i] + m * var[i]
        });
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.weight,
            &mut self.bias,
            &mut self.gamma,
            &mut self.beta,
        ]
    }
}

/// The shared feature extractor behind every frontend.
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    blocks: Vec<ConvBlock<T>>,
    head_w: Param<T>,
    head_b: Param<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.widths.len() != cfg.depths.len() || cfg.widths.is_empty() {
            return Err(Error::config(format!(
                "backbone widths/depths must be non-empty and equal length, got {:?}/{:?}",
                cfg.widths, cfg.depths
            )));
        }
        let mut blocks = Vec::new();
        for (stage, (&width, &depth)) in cfg.widths.iter().zip(&cfg.depths).enumerate() {
            if stage > 0 {
                let prev = cfg.widths[stage - 1];
                blocks.push(ConvBlock::new(
                    &format!("backbone/down{stage}"),
                    prev,
                    width,
                    2,
                    2,
                    Padding::Valid,
                    rng,
                ));
            }
            for b in 0..depth {
                blocks.push(ConvBlock::new(
                    &format!("backbone/stage{stage}/block{b}"),
                    width,
                    width,
                    3,
                    1,
                    Padding::Same,
                    rng,
                ));
            }
        }
        let last = *cfg.widths.last().unwrap();
        let bound = (6.0 / last as f64).sqrt();
        Ok(Backbone {
            head_w: Param::new(
                "backbone/head/weight",
                Tensor::from_fn(&[cfg.embed_dim, last], |_| {
                    T::from_f64(rng.gen_range(-bound..bound))
                }),
            ),
            head_b: Param::new("backbone/head/bias", Tensor::zeros(&[cfg.embed_dim])),
            cfg,
            blocks,
        })
    }

    /// Map a stem feature map to a length-d embedding.
    pub fn forward(&self, g: &mut Graph<T>, stem: Var, train: bool) -> Result<Var> {
        self.forward_with_norms(g, stem, train).map(|(v, _)| v)
    }

    /// Like [`Backbone::forward`], also returning each block's norm node so
    /// trainers can read back the batch statistics for running updates.
    pub fn forward_with_norms(
        &self,
        g: &mut Graph<T>,
        stem: Var,
        train: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let eps = T::from_f64(self.cfg.norm_eps);
        let mut x = stem;
        let mut norms = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, norm) = block.forward(g, x, eps, train)?;
            norms.push(norm);
            x = y;
        }
        let pooled = g.adaptive_avg_pool(x, 1, 1)?;
        let flat_dim = g.shape(pooled)[0];
        let flat = g.reshape(pooled, vec![flat_dim])?;
        let w = g.param(&self.head_w)?;
        let b = g.param(&self.head_b)?;
        Ok((g.affine(w, flat, b)?, norms))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Update every block's running statistics from a recorded training
    /// forward. `stats` must hold one (mean, var) pair per block in order.
    pub fn update_running_stats(&mut self, stats: &[(Vec<T>, Vec<T>)]) {
        let momentum = self.cfg.stat_momentum;
        for (block, (mean, var)) in self.blocks.iter_mut().zip(stats) {
            block.update_running_stats(mean, var, momentum);
        }
    }

    /// Non-trainable state (running stats) as checkpoint entries.
    pub fn state_entries(&self, prefix: &str) -> Vec<CheckpointEntry> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(CheckpointEntry::from_tensor(
                format!("{prefix}backbone/state{i}/running_mean"),
                &b.running_mean,
            ));
            out.push(CheckpointEntry::from_tensor(
                format!("{prefix}backbone/state{i}/running_var"),
                &b.running_var,
            ));
        }
        out
    }

    pub fn load_state_entry(&mut self, name: &str, entry: &CheckpointEntry) -> Result<bool> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if name == format!("backbone/state{i}/running_mean") {
                b.running_mean = entry.to_tensor()?;
                return Ok(true);
            }
            if name == format!("backbone/state{i}/running_var") {
                b.running_var = entry.to_tensor()?;
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Frontend + shared backbone (+ training proxies, managed by the trainer).
pub struct EmbeddingModel<T> {
    pub frontend: Frontend<T>,
    pub backbone: Backbone<T>,
    /// Extra tensors carried into the checkpoint (e.g. trained proxies).
    pub extra_checkpoint_entries: Vec<CheckpointEntry>,
}

impl<T: Scalar> EmbeddingModel<T> {
    pub fn new(
        strategy: Strategy,
        fcfg: FrontendConfig,
        bcfg: BackboneConfig,
        registry: Arc<ChannelRegistry>,
        fixed_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if bcfg.widths.first() != Some(&fcfg.out_channels) {
            return Err(Error::config(format!(
                "frontend out_channels {} must equal first backbone width {:?}",
                fcfg.out_channels,
                bcfg.widths.first()
            )));
        }
        Ok(EmbeddingModel {
            frontend: Frontend::new(strategy, fcfg, registry, fixed_channels, rng)?,
            backbone: Backbone::new(bcfg, rng)?,
            extra_checkpoint_entries: Vec::new(),
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.frontend.strategy
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone.cfg.embed_dim
    }

    /// Record a full forward pass on `g` and return the embedding var.
    pub fn forward(&self, g: &mut Graph<T>, img: &MultiChannelImage<T>, train: bool) -> Result<Var> {
        let stem = self.frontend.forward(g, &img.data, &img.channel_set)?;
        self.backbone.forward(g, stem, train)
    }

    /// Deterministic eval-mode embedding of one image.
    pub fn embed(&self, img: &MultiChannelImage<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, img, false)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.frontend.params();
        v.extend(self.backbone.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.frontend.params_mut();
        v.extend(self.backbone.params_mut());
        v
    }

    /// Strategy parameters plus backbone parameters.
    pub fn count_parameters(&self) -> usize {
        self.frontend.count_parameters() + self.backbone.count_parameters()
    }

    pub fn save_checkpoint(&self, path: &std::path::Path, extra: &[CheckpointEntry]) -> Result<()> {
        let mut entries: Vec<CheckpointEntry> = self
            .params()
            .iter()
            .map(|p| CheckpointEntry::from_tensor(p.name.clone(), &p.value))
            .collect();
        entries.extend(self.backbone.state_entries(""));
        entries.extend_from_slice(&self.extra_checkpoint_entries);
        entries.extend_from_slice(extra);
        write_checkpoint(path, &entries)
    }

    /// Load parameters by name from a checkpoint written by `save_checkpoint`
    /// on a model with the same architecture. Returns entries that did not
    /// match any parameter (e.g. proxies), keyed by name.
    pub fn load_checkpoint(
        &mut self,
        path: &std::path::Path,
    ) -> Result<BTreeMap<String, CheckpointEntry>> {
        let entries = read_checkpoint(path)?;
        let mut by_name: BTreeMap<String, CheckpointEntry> =
            entries.into_iter().map(|e| (e.name.clone(), e)).collect();
        for p in self.params_mut() {
            let e = by_name.remove(&p.name).ok_or_else(|| {
                Error::format(format!("checkpoint missing parameter {}", p.name))
            })?;
            if e.shape != p.value.shape() {
                return Err(Error::Dimension {
                    op: "load_checkpoint",
                    lhs: e.shape.clone(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            p.value = e.to_tensor()?;
        }
        let names: Vec<String> = by_name.keys().cloned().collect();
        for name in names {
            let consumed = {
                let e = &by_name[&name];
                self.backbone.load_state_entry(&name, e)?
            };
            if consumed {
                by_name.remove(&name);
            }
        }
        Ok(by_name)
    }
}

/// Embed each channel as a replicated 3-channel image through a 3-channel
/// model and concatenate the per-channel embeddings in channel order.
/// Returns the concatenated vector and the number of forward passes used.
pub fn channel_replication_embed<T: Scalar>(
    model: &EmbeddingModel<T>,
    img: &MultiChannelImage<T>,
) -> Result<(Vec<T>, usize)> {
    if model.frontend.fixed_channels() != Some(3) {
        return Err(Error::StrategyMismatch(
            "channel_replication_embed needs a 3-channel frontend".into(),
        ));
    }
    let (c, h, w) = (
        img.data.shape()[0],
        img.data.shape()[1],
        img.data.shape()[2],
    );
    if c == 0 {
        return Err(Error::contract("image with zero channels"));
    }
    let mut out = Vec::with_capacity(c * model.embed_dim());
    for ch in 0..c {
        let plane = &img.data.data()[ch * h * w..(ch + 1) * h * w];
        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(plane);
        }
        let replicated = MultiChannelImage {
            data: Tensor::new(vec![3, h, w], data)?,
            channel_set: img.channel_set.clone(),
            image_id: img.image_id.clone(),
        };
        let mut g = Graph::new();
        let stem = model
            .frontend
            .forward(&mut g, &replicated.data, &replicated.channel_set)?;
        let emb = model.backbone.forward(&mut g, stem, false)?;
        out.extend_from_slice(g.value(emb).data());
    }
    Ok((out, c))
}

/// Average forward passes per image for a strategy over a test manifest of
/// per-image channel counts: C per image for ChannelReplication, 1 otherwise.
pub fn inference_cost(strategy: Strategy, manifest: &[usize]) -> Result<f64> {
    if manifest.is_empty() {
        return Err(Error::contract("inference_cost: empty manifest"));
    }
    match strategy {
        Strategy::ChannelReplication => {
            let total: usize = manifest.iter().sum();
            Ok(total as f64 / manifest.len() as f64)
        }
        _ => Ok(1.0),
    }
}
