//! First-layer strategies: build, for any registered channel set, a first
//! convolutional layer that produces a fixed-width feature map for the
//! shared backbone.
//!
//! Two baselines need no adaptation machinery (`ChannelReplication` embeds
//! channels one at a time through a 3-channel stem; `FixedChannels` trains
//! one whole model per channel count). The five adaptive strategies differ
//! in where their first-layer weights come from:
//!
//! * `Depthwise` — one filter bank per distinct channel, responses averaged
//!   across channels so activation scale does not depend on channel count.
//! * `SliceParam` — a bank of per-channel filter slabs, concatenated in the
//!   input's channel order to form the layer on the fly.
//! * `TargetParam` — one dedicated first layer per channel set.
//! * `TemplateMixing` — per-channel filters are linear combinations of a
//!   small set of shared templates.
//! * `HyperNet` — per-channel filters are generated from trainable channel
//!   embeddings by a small MLP, independently per channel.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::registry::{ChannelId, ChannelRegistry, ParamKey};
use crate::tensor::{Graph, Padding, Param, Scalar, Tensor, Var};

/// The seven first-layer strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    ChannelReplication,
    FixedChannels,
    Depthwise,
    SliceParam,
    TargetParam,
    TemplateMixing,
    HyperNet,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::ChannelReplication,
        Strategy::FixedChannels,
        Strategy::Depthwise,
        Strategy::SliceParam,
        Strategy::TargetParam,
        Strategy::TemplateMixing,
        Strategy::HyperNet,
    ];

    /// The five strategies where one model adapts to every channel set.
    pub const ADAPTIVE: [Strategy; 5] = [
        Strategy::Depthwise,
        Strategy::SliceParam,
        Strategy::TargetParam,
        Strategy::TemplateMixing,
        Strategy::HyperNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ChannelReplication => "channel_replication",
            Strategy::FixedChannels => "fixed_channels",
            Strategy::Depthwise => "depthwise",
            Strategy::SliceParam => "slice_param",
            Strategy::TargetParam => "target_param",
            Strategy::TemplateMixing => "template_mixing",
            Strategy::HyperNet => "hyper_net",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "channel_replication" | "channelreplication" => Ok(Strategy::ChannelReplication),
            "fixed_channels" | "fixedchannels" => Ok(Strategy::FixedChannels),
            "depthwise" => Ok(Strategy::Depthwise),
            "slice_param" | "sliceparam" => Ok(Strategy::SliceParam),
            "target_param" | "targetparam" => Ok(Strategy::TargetParam),
            "template_mixing" | "templatemixing" => Ok(Strategy::TemplateMixing),
            "hyper_net" | "hypernet" => Ok(Strategy::HyperNet),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry and strategy-specific sizes of a frontend.
#[derive(Clone, Copy, Debug)]
pub struct FrontendConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Template count for TemplateMixing.
    pub templates: usize,
    /// Channel-embedding width for HyperNet.
    pub embed_dim: usize,
    /// Hidden width of the HyperNet MLP.
    pub hidden_dim: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            out_channels: 96,
            kernel: 4,
            stride: 4,
            templates: 16,
            embed_dim: 64,
            hidden_dim: 128,
        }
    }
}

/// Shared parameter templates plus per-channel mixing coefficients.
pub struct TemplateBank<T> {
    /// Each template has shape [out_channels, 1, k, k].
    pub templates: Vec<Param<T>>,
    /// Per-channel coefficient vectors of length = template count.
    pub coefficients: BTreeMap<ParamKey, Param<T>>,
}

/// Trainable channel embeddings plus the two affine layers that map an
/// embedding to one channel's filter slab.
pub struct HyperGenerator<T> {
    pub channel_embeddings: BTreeMap<ParamKey, Param<T>>,
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
}

enum FrontendKind<T> {
    /// Plain conv stem for a fixed channel count (FixedChannels and the
    /// 3-channel stem behind ChannelReplication).
    Fixed {
        channels: usize,
        weight: Param<T>,
        bias: Param<T>,
    },
    Depthwise {
        bank: BTreeMap<ParamKey, Param<T>>,
        bias: Param<T>,
    },
    SliceParam {
        bank: BTreeMap<ParamKey, Param<T>>,
        bias: Param<T>,
    },
    TargetParam {
        heads: BTreeMap<String, (Param<T>, Param<T>)>,
    },
    TemplateMixing {
        bank: TemplateBank<T>,
        bias: Param<T>,
    },
    HyperNet {
        generator: HyperGenerator<T>,
        bias: Param<T>,
    },
}

/// A strategy-specific first convolutional layer over a channel registry.
pub struct Frontend<T> {
    pub strategy: Strategy,
    pub cfg: FrontendConfig,
    pub registry: Arc<ChannelRegistry>,
    kind: FrontendKind<T>,
}

fn fan_in_uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

fn gaussian<T: Scalar>(rng: &mut impl Rng, shape: &[usize], variance: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, variance.sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

impl<T: Scalar> Frontend<T> {
    /// Build a frontend with freshly initialized parameters.
    ///
    /// `fixed_channels` selects the input width for FixedChannels
    /// (ChannelReplication always uses 3).
    pub fn new(
        strategy: Strategy,
        cfg: FrontendConfig,
        registry: Arc<ChannelRegistry>,
        fixed_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (o, k) = (cfg.out_channels, cfg.kernel);
        let kind = match strategy {
            Strategy::ChannelReplication | Strategy::FixedChannels => {
                let channels = if strategy == Strategy::ChannelReplication {
                    3
                } else {
                    fixed_channels
                };
                if channels == 0 {
                    return Err(Error::config("fixed frontend needs >= 1 channel"));
                }
                FrontendKind::Fixed {
                    channels,
                    weight: Param::new(
                        format!("frontend/{}/{}ch/weight", strategy.name(), channels),
                        fan_in_uniform(rng, &[o, channels, k, k], channels * k * k),
                    ),
                    bias: Param::new(
                        format!("frontend/{}/{}ch/bias", strategy.name(), channels),
                        Tensor::zeros(&[o]),
                    ),
                }
            }
            Strategy::Depthwise | Strategy::SliceParam => {
                let mut bank = BTreeMap::new();
                for key in registry.param_keys() {
                    bank.insert(
                        key.clone(),
                        Param::new(
                            format!("frontend/{}/{key}/filter", strategy.name()),
                            fan_in_uniform(rng, &[o, 1, k, k], k * k),
                        ),
                    );
                }
                let bias = Param::new(
                    format!("frontend/{}/bias", strategy.name()),
                    Tensor::zeros(&[o]),
                );
                if strategy == Strategy::Depthwise {
                    FrontendKind::Depthwise { bank, bias }
                } else {
                    FrontendKind::SliceParam { bank, bias }
                }
            }
            Strategy::TargetParam => {
                let mut heads = BTreeMap::new();
                for (dataset, channels) in registry.datasets() {
                    let c = channels.len();
                    heads.insert(
                        dataset.clone(),
                        (
                            Param::new(
                                format!("frontend/target_param/{dataset}/weight"),
                                fan_in_uniform(rng, &[o, c, k, k], c * k * k),
                            ),
                            Param::new(
                                format!("frontend/target_param/{dataset}/bias"),
                                Tensor::zeros(&[o]),
                            ),
                        ),
                    );
                }
                FrontendKind::TargetParam { heads }
            }
            Strategy::TemplateMixing => {
                let templates = (0..cfg.templates)
                    .map(|t| {
                        Param::new(
                            format!("frontend/template_mixing/template{t}"),
                            fan_in_uniform(rng, &[o, 1, k, k], k * k),
                        )
                    })
                    .collect();
                let mut coefficients = BTreeMap::new();
                for key in registry.param_keys() {
                    coefficients.insert(
                        key.clone(),
                        Param::new(
                            format!("frontend/template_mixing/{key}/coeff"),
                            gaussian(rng, &[cfg.templates], 1.0 / cfg.templates as f64),
                        ),
                    );
                }
                FrontendKind::TemplateMixing {
                    bank: TemplateBank {
                        templates,
                        coefficients,
                    },
                    bias: Param::new("frontend/template_mixing/bias", Tensor::zeros(&[o])),
                }
            }
            Strategy::HyperNet => {
                let mut channel_embeddings = BTreeMap::new();
                for key in registry.param_keys() {
                    channel_embeddings.insert(
                        key.clone(),
                        Param::new(
                            format!("frontend/hyper_net/{key}/embedding"),
                            gaussian(rng, &[cfg.embed_dim], 1.0 / cfg.embed_dim as f64),
                        ),
                    );
                }
                let out_dim = o * k * k;
                FrontendKind::HyperNet {
                    generator: HyperGenerator {
                        channel_embeddings,
                        w1: Param::new(
                            "frontend/hyper_net/mlp/w1",
                            fan_in_uniform(rng, &[cfg.hidden_dim, cfg.embed_dim], cfg.embed_dim),
                        ),
                        b1: Param::new("frontend/hyper_net/mlp/b1", Tensor::zeros(&[cfg.hidden_dim])),
                        w2: Param::new(
                            "frontend/hyper_net/mlp/w2",
                            fan_in_uniform(rng, &[out_dim, cfg.hidden_dim], cfg.hidden_dim),
                        ),
                        b2: Param::new("frontend/hyper_net/mlp/b2", Tensor::zeros(&[out_dim])),
                    },
                    bias: Param::new("frontend/hyper_net/bias", Tensor::zeros(&[o])),
                }
            }
        };
        Ok(Frontend {
            strategy,
            cfg,
            registry,
            kind,
        })
    }

    /// Fixed input width, if this is a fixed-channel frontend.
    pub fn fixed_channels(&self) -> Option<usize> {
        match &self.kind {
            FrontendKind::Fixed { channels, .. } => Some(*channels),
            _ => None,
        }
    }

    /// Forward an image tensor [C,H,W] belonging to `dataset` through the
    /// frontend, producing an [out_channels, H', W'] feature map.
    pub fn forward(&self, g: &mut Graph<T>, image: &Tensor<T>, dataset: &str) -> Result<Var> {
        if image.shape().len() != 3 {
            return Err(Error::contract(format!(
                "frontend expects [C,H,W] input, got {:?}",
                image.shape()
            )));
        }
        let c = image.shape()[0];
        match &self.kind {
            FrontendKind::Fixed { channels, weight, bias } => {
                if c != *channels {
                    return Err(Error::StrategyMismatch(format!(
                        "fixed frontend built for {channels} channels, image has {c}"
                    )));
                }
                let x = g.input(image.clone())?;
                let w = g.param(weight)?;
                let b = g.param(bias)?;
                g.conv2d(x, w, Some(b), self.cfg.stride, Padding::Valid)
            }
            FrontendKind::Depthwise { bank, bias } => {
                let set = self.checked_set(dataset, c)?;
                let mut acc: Option<Var> = None;
                for (i, ch) in set.iter().enumerate() {
                    let key = self.registry.param_key(ch);
                    let filt = bank
                        .get(&key)
                        .ok_or_else(|| Error::UnknownChannel(key.to_string()))?;
                    let xc = g.input(channel_plane(image, i))?;
                    let w = g.param(filt)?;
                    let y = g.conv2d(xc, w, None, self.cfg.stride, Padding::Valid)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => g.add(a, y)?,
                    });
                }
                let summed = acc.expect("non-empty channel set");
                let averaged = g.scale(summed, T::from_f64(1.0 / set.len() as f64))?;
                let b = g.param(bias)?;
                g.add_channel_bias(averaged, b)
            }
            FrontendKind::SliceParam { bank, bias } => {
                let set = self.checked_set(dataset, c)?;
                let w = slice_filters(g, bank, &self.registry, set)?;
                let x = g.input(image.clone())?;
                let b = g.param(bias)?;
                g.conv2d(x, w, Some(b), self.cfg.stride, Padding::Valid)
            }
            FrontendKind::TargetParam { heads } => {
                self.checked_set(dataset, c)?;
                let (w, b) = heads
                    .get(dataset)
                    .ok_or_else(|| Error::UnknownChannel(format!("no head for {dataset}")))?;
                let x = g.input(image.clone())?;
                let wv = g.param(w)?;
                let bv = g.param(b)?;
                g.conv2d(x, wv, Some(bv), self.cfg.stride, Padding::Valid)
            }
            FrontendKind::TemplateMixing { bank, bias } => {
                let set = self.checked_set(dataset, c)?;
                let w = mix_templates(g, bank, &self.registry, set)?;
                let x = g.input(image.clone())?;
                let b = g.param(bias)?;
                g.conv2d(x, w, Some(b), self.cfg.stride, Padding::Valid)
            }
            FrontendKind::HyperNet { generator, bias } => {
                let set = self.checked_set(dataset, c)?;
                let w = generate_weights(
                    g,
                    generator,
                    &self.registry,
                    set,
                    self.cfg.out_channels,
                    self.cfg.kernel,
                )?;
                let x = g.input(image.clone())?;
                let b = g.param(bias)?;
                g.conv2d(x, w, Some(b), self.cfg.stride, Padding::Valid)
            }
        }
    }

    fn checked_set(&self, dataset: &str, image_channels: usize) -> Result<&[ChannelId]> {
        let set = self.registry.channel_set(dataset)?;
        if set.len() != image_channels {
            return Err(Error::Dimension {
                op: "frontend_forward",
                lhs: vec![image_channels],
                rhs: vec![set.len()],
            });
        }
        Ok(set)
    }

    /// Exact count of trainable scalars in the strategy-specific parameters.
    pub fn count_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// All trainable parameters in a fixed, deterministic order.
    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.kind {
            FrontendKind::Fixed { weight, bias, .. } => vec![weight, bias],
            FrontendKind::Depthwise { bank, bias } | FrontendKind::SliceParam { bank, bias } => {
                let mut v: Vec<&Param<T>> = bank.values().collect();
                v.push(bias);
                v
            }
            FrontendKind::TargetParam { heads } => {
                heads.values().flat_map(|(w, b)| [w, b]).collect()
            }
            FrontendKind::TemplateMixing { bank, bias } => {
                let mut v: Vec<&Param<T>> = bank.templates.iter().collect();
                v.extend(bank.coefficients.values());
                v.push(bias);
                v
            }
            FrontendKind::HyperNet { generator, bias } => {
                let mut v: Vec<&Param<T>> = generator.channel_embeddings.values().collect();
                v.extend([&generator.w1, &generator.b1, &generator.w2, &generator.b2]);
                v.push(bias);
                v
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.kind {
            FrontendKind::Fixed { weight, bias, .. } => vec![weight, bias],
            FrontendKind::Depthwise { bank, bias } | FrontendKind::SliceParam { bank, bias } => {
                let mut v: Vec<&mut Param<T>> = bank.values_mut().collect();
                v.push(bias);
                v
            }
            FrontendKind::TargetParam { heads } => heads
                .values_mut()
                .flat_map(|(w, b)| [w, b])
                .collect(),
            FrontendKind::TemplateMixing { bank, bias } => {
                let mut v: Vec<&mut Param<T>> = bank.templates.iter_mut().collect();
                v.extend(bank.coefficients.values_mut());
                v.push(bias);
                v
            }
            FrontendKind::HyperNet { generator, bias } => {
                let mut v: Vec<&mut Param<T>> =
                    generator.channel_embeddings.values_mut().collect();
                v.extend([
                    &mut generator.w1,
                    &mut generator.b1,
                    &mut generator.w2,
                    &mut generator.b2,
                ]);
                v.push(bias);
                v
            }
        }
    }

    /// Direct access to the per-channel filter bank, when the strategy has one.
    pub fn filter_bank(&self) -> Option<&BTreeMap<ParamKey, Param<T>>> {
        match &self.kind {
            FrontendKind::Depthwise { bank, .. } | FrontendKind::SliceParam { bank, .. } => {
                Some(bank)
            }
            _ => None,
        }
    }

    pub fn filter_bank_mut(&mut self) -> Option<&mut BTreeMap<ParamKey, Param<T>>> {
        match &mut self.kind {
            FrontendKind::Depthwise { bank, .. } | FrontendKind::SliceParam { bank, .. } => {
                Some(bank)
            }
            _ => None,
        }
    }

    pub fn template_bank(&self) -> Option<&TemplateBank<T>> {
        match &self.kind {
            FrontendKind::TemplateMixing { bank, .. } => Some(bank),
            _ => None,
        }
    }

    pub fn template_bank_mut(&mut self) -> Option<&mut TemplateBank<T>> {
        match &mut self.kind {
            FrontendKind::TemplateMixing { bank, .. } => Some(bank),
            _ => None,
        }
    }

    pub fn hyper_generator(&self) -> Option<&HyperGenerator<T>> {
        match &self.kind {
            FrontendKind::HyperNet { generator, .. } => Some(generator),
            _ => None,
        }
    }

    pub fn hyper_generator_mut(&mut self) -> Option<&mut HyperGenerator<T>> {
        match &mut self.kind {
            FrontendKind::HyperNet { generator, .. } => Some(generator),
            _ => None,
        }
    }

    pub fn target_heads(&self) -> Option<&BTreeMap<String, (Param<T>, Param<T>)>> {
        match &self.kind {
            FrontendKind::TargetParam { heads } => Some(heads),
            _ => None,
        }
    }

    /// The fixed stem (weight, bias), for the two non-adaptive strategies.
    pub fn fixed_stem(&self) -> Option<(&Param<T>, &Param<T>)> {
        match &self.kind {
            FrontendKind::Fixed { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn fixed_stem_mut(&mut self) -> Option<(&mut Param<T>, &mut Param<T>)> {
        match &mut self.kind {
            FrontendKind::Fixed { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }
}

/// Extract channel `i` of a [C,H,W] tensor as a [1,H,W] tensor.
fn channel_plane<T: Scalar>(image: &Tensor<T>, i: usize) -> Tensor<T> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    Tensor::new(
        vec![1, h, w],
        image.data()[i * h * w..(i + 1) * h * w].to_vec(),
    )
    .expect("channel slice")
}

/// Concatenate the bank's per-channel filter slabs [O,1,k,k] along axis 1 in
/// the channel set's order, producing [O,N,k,k].
pub fn slice_filters<T: Scalar>(
    g: &mut Graph<T>,
    bank: &BTreeMap<ParamKey, Param<T>>,
    registry: &ChannelRegistry,
    set: &[ChannelId],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(set.len());
    for ch in set {
        let key = registry.param_key(ch);
        let p = bank
            .get(&key)
            .ok_or_else(|| Error::UnknownChannel(key.to_string()))?;
        parts.push(g.param(p)?);
    }
    g.concat_axis1(&parts)
}

/// Per-channel filter = sum_t coeff[t] * template[t]; channels concatenated
/// along axis 1 in set order.
pub fn mix_templates<T: Scalar>(
    g: &mut Graph<T>,
    bank: &TemplateBank<T>,
    registry: &ChannelRegistry,
    set: &[ChannelId],
) -> Result<Var> {
    let template_vars: Vec<Var> = bank
        .templates
        .iter()
        .map(|t| g.param(t))
        .collect::<Result<_>>()?;
    let mut parts = Vec::with_capacity(set.len());
    for ch in set {
        let key = registry.param_key(ch);
        let coeff = bank
            .coefficients
            .get(&key)
            .ok_or_else(|| Error::UnknownChannel(key.to_string()))?;
        if coeff.value.numel() != bank.templates.len() {
            return Err(Error::Dimension {
                op: "mix_templates",
                lhs: vec![coeff.value.numel()],
                rhs: vec![bank.templates.len()],
            });
        }
        let cv = g.param(coeff)?;
        parts.push(g.weighted_sum(&template_vars, cv)?);
    }
    g.concat_axis1(&parts)
}

/// Generate per-channel filters from channel embeddings with the generator
/// MLP, independently per channel, and concatenate along axis 1.
pub fn generate_weights<T: Scalar>(
    g: &mut Graph<T>,
    generator: &HyperGenerator<T>,
    registry: &ChannelRegistry,
    set: &[ChannelId],
    out_channels: usize,
    kernel: usize,
) -> Result<Var> {
    let w1 = g.param(&generator.w1)?;
    let b1 = g.param(&generator.b1)?;
    let w2 = g.param(&generator.w2)?;
    let b2 = g.param(&generator.b2)?;
    let mut parts = Vec::with_capacity(set.len());
    for ch in set {
        let key = registry.param_key(ch);
        let emb = generator
            .channel_embeddings
            .get(&key)
            .ok_or_else(|| Error::UnknownChannel(key.to_string()))?;
        let e = g.param(emb)?;
        let h = g.affine(w1, e, b1)?;
        let h = g.gelu(h)?;
        let o = g.affine(w2, h, b2)?;
        parts.push(g.reshape(o, vec![out_channels, 1, kernel, kernel])?);
    }
    g.concat_axis1(&parts)
}

/// Replicate a 3-input-channel first layer to cover `target_channels` input
/// channels: slice i of the result is slice (i mod 3) of the source.
pub fn replicate_first_layer<T: Scalar>(
    src: &Tensor<T>,
    target_channels: usize,
) -> Result<Tensor<T>> {
    let s = src.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Dimension {
            op: "replicate_first_layer",
            lhs: s.to_vec(),
            rhs: vec![s.first().copied().unwrap_or(0), 3, 0, 0],
        });
    }
    if target_channels == 0 {
        return Err(Error::contract("replicate_first_layer: target_channels >= 1"));
    }
    let (o, kk) = (s[0], s[2] * s[3]);
    let mut data = vec![T::ZERO; o * target_channels * kk];
    for oi in 0..o {
        for ci in 0..target_channels {
            let src_off = (oi * 3 + ci % 3) * kk;
            let dst = (oi * target_channels + ci) * kk;
            data[dst..dst + kk].copy_from_slice(&src.data()[src_off..src_off + kk]);
        }
    }
    Tensor::new(vec![o, target_channels, s[2], s[3]], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FrontendConfig {
        FrontendConfig {
            out_channels: 2,
            kernel: 3,
            stride: 1,
            templates: 4,
            embed_dim: 5,
            hidden_dim: 6,
        }
    }

    fn registry() -> Arc<ChannelRegistry> {
        Arc::new(ChannelRegistry::chammi_default())
    }

    fn rand_image(c: usize, hw: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, hw, hw], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn every_adaptive_strategy_outputs_the_configured_width() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for strategy in Strategy::ADAPTIVE {
            let f: Frontend<f64> =
                Frontend::new(strategy, small_cfg(), Arc::clone(&reg), 0, &mut rng).unwrap();
            for (ds, c) in [("WTC", 3), ("HPA", 4), ("CP", 5)] {
                let img = rand_image(c, 8, 7);
                let mut g = Graph::new();
                let out = f.forward(&mut g, &img, ds).unwrap();
                assert_eq!(g.shape(out)[0], 2, "{strategy} on {ds}");
            }
        }
    }

    #[test]
    fn depthwise_identity_filters_give_channel_mean() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = FrontendConfig {
            out_channels: 1,
            kernel: 1,
            stride: 1,
            ..small_cfg()
        };
        let mut f: Frontend<f64> =
            Frontend::new(Strategy::Depthwise, cfg, Arc::clone(&reg), 0, &mut rng).unwrap();
        for p in f.filter_bank_mut().unwrap().values_mut() {
            p.value = Tensor::full(&[1, 1, 1, 1], 1.0);
        }
        let img = rand_image(3, 4, 9);
        let mut g = Graph::new();
        let out = f.forward(&mut g, &img, "WTC").unwrap();
        for (i, &v) in g.value(out).data().iter().enumerate() {
            let mean = (img.data()[i] + img.data()[16 + i] + img.data()[32 + i]) / 3.0;
            assert!((v - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn slice_param_forward_equals_manual_assembly_conv() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f: Frontend<f64> =
            Frontend::new(Strategy::SliceParam, small_cfg(), Arc::clone(&reg), 0, &mut rng)
                .unwrap();
        let img = rand_image(5, 8, 11);
        let mut g = Graph::new();
        let out = f.forward(&mut g, &img, "CP").unwrap();

        // independent assembly: copy filters in set order, then conv
        let bank = f.filter_bank().unwrap();
        let set = reg.channel_set("CP").unwrap();
        let (o, k) = (2usize, 3usize);
        let mut w = vec![0.0f64; o * 5 * k * k];
        for (ci, ch) in set.iter().enumerate() {
            let filt = &bank[&reg.param_key(ch)].value;
            for oi in 0..o {
                for p in 0..k * k {
                    w[(oi * 5 + ci) * k * k + p] = filt.data()[oi * k * k + p];
                }
            }
        }
        let wt = Tensor::new(vec![o, 5, k, k], w).unwrap();
        let mut g2 = Graph::new();
        let xv = g2.input(img).unwrap();
        let wv = g2.input(wt).unwrap();
        let bias = f.params().last().unwrap().value.clone();
        let bv = g2.input(bias).unwrap();
        let want = g2.conv2d(xv, wv, Some(bv), 1, Padding::Valid).unwrap();

        for (a, b) in g.value(out).data().iter().zip(g2.value(want).data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn slice_filters_single_channel_and_reorder() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let f: Frontend<f64> =
            Frontend::new(Strategy::SliceParam, small_cfg(), Arc::clone(&reg), 0, &mut rng)
                .unwrap();
        let bank = f.filter_bank().unwrap();
        let set = reg.channel_set("WTC").unwrap().to_vec();

        let mut g = Graph::new();
        let single = slice_filters(&mut g, bank, &reg, &set[..1]).unwrap();
        assert_eq!(
            g.value(single).data(),
            bank[&reg.param_key(&set[0])].value.data()
        );

        let mut g1 = Graph::new();
        let fwd = slice_filters(&mut g1, bank, &reg, &set).unwrap();
        let reordered: Vec<ChannelId> = vec![set[2].clone(), set[0].clone(), set[1].clone()];
        let mut g2 = Graph::new();
        let rev = slice_filters(&mut g2, bank, &reg, &reordered).unwrap();
        let (a, b) = (g1.value(fwd), g2.value(rev));
        let kk = 9;
        for oi in 0..2 {
            for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
                assert_eq!(
                    &b.data()[(oi * 3 + dst) * kk..(oi * 3 + dst + 1) * kk],
                    &a.data()[(oi * 3 + src) * kk..(oi * 3 + src + 1) * kk]
                );
            }
        }

        let mut g3 = Graph::new();
        let mut foreign = set[0].clone();
        foreign.dataset = "NOPE".into();
        assert!(matches!(
            slice_filters(&mut g3, bank, &reg, &[foreign]),
            Err(Error::UnknownChannel(_))
        ));
    }

    #[test]
    fn template_one_hot_coefficient_reproduces_template() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut f: Frontend<f64> =
            Frontend::new(Strategy::TemplateMixing, small_cfg(), Arc::clone(&reg), 0, &mut rng)
                .unwrap();
        let set = reg.channel_set("WTC").unwrap().to_vec();
        let key = reg.param_key(&set[0]);
        f.template_bank_mut()
            .unwrap()
            .coefficients
            .get_mut(&key)
            .unwrap()
            .value = Tensor::new(vec![4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let bank = f.template_bank().unwrap();
        let mut g = Graph::new();
        let w = mix_templates(&mut g, bank, &reg, &set).unwrap();
        let got = g.value(w);
        let tmpl = &bank.templates[2].value;
        for oi in 0..2 {
            for p in 0..9 {
                let v = got.data()[(oi * 3) * 9 + p];
                assert!((v - tmpl.data()[oi * 9 + p]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn template_zero_coefficients_give_zero_filters() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut f: Frontend<f64> =
            Frontend::new(Strategy::TemplateMixing, small_cfg(), Arc::clone(&reg), 0, &mut rng)
                .unwrap();
        for c in f.template_bank_mut().unwrap().coefficients.values_mut() {
            c.value = Tensor::zeros(&[4]);
        }
        let set = reg.channel_set("HPA").unwrap().to_vec();
        let mut g = Graph::new();
        let w = mix_templates(&mut g, f.template_bank().unwrap(), &reg, &set).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn template_mixing_matches_weighted_sum_oracle() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f: Frontend<f64> =
            Frontend::new(Strategy::TemplateMixing, small_cfg(), Arc::clone(&reg), 0, &mut rng)
                .unwrap();
        let bank = f.template_bank().unwrap();
        let set = reg.channel_set("CP").unwrap().to_vec();
        let mut g = Graph::new();
        let w = mix_templates(&mut g, bank, &reg, &set).unwrap();
        let got = g.value(w);
        for (ci, ch) in set.iter().enumerate() {
            let coeff = &bank.coefficients[&reg.param_key(ch)].value;
            for oi in 0..2 {
                for p in 0..9 {
                    let mut want = 0.0;
                    for t in 0..4 {
                        want += coeff.data()[t] * bank.templates[t].value.data()[oi * 9 + p];
                    }
                    let v = got.data()[(oi * 5 + ci) * 9 + p];
                    let rel = (v - want).abs() / want.abs().max(1.0);
                    assert!(rel <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn hypernet_zero_mlp_gives_bias_only_output() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f: Frontend<f64> =
            Frontend::new(Strategy::HyperNet, small_cfg(), Arc::clone(&reg), 0, &mut rng).unwrap();
        {
            let gen = f.hyper_generator_mut().unwrap();
            gen.w2.value = Tensor::zeros(&[2 * 9, 6]);
            gen.b2.value = Tensor::zeros(&[2 * 9]);
        }
        let img = rand_image(4, 6, 13);
        let mut g = Graph::new();
        let out = f.forward(&mut g, &img, "HPA").unwrap();
        // zero filters -> output equals the shared bias map (zero by default)
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hypernet_identical_embeddings_give_identical_slices() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut f: Frontend<f64> =
            Frontend::new(Strategy::HyperNet, small_cfg(), Arc::clone(&reg), 0, &mut rng).unwrap();
        let set = reg.channel_set("WTC").unwrap().to_vec();
        let (k0, k1) = (reg.param_key(&set[0]), reg.param_key(&set[1]));
        {
            let gen = f.hyper_generator_mut().unwrap();
            let shared = gen.channel_embeddings[&k0].value.clone();
            gen.channel_embeddings.get_mut(&k1).unwrap().value = shared;
        }
        let gen = f.hyper_generator().unwrap();
        let mut g = Graph::new();
        let w = generate_weights(&mut g, gen, &reg, &set, 2, 3).unwrap();
        let got = g.value(w);
        for oi in 0..2 {
            for p in 0..9 {
                let a = got.data()[(oi * 3) * 9 + p];
                let b = got.data()[(oi * 3 + 1) * 9 + p];
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn hypernet_matches_mlp_forward_oracle() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f: Frontend<f64> =
            Frontend::new(Strategy::HyperNet, small_cfg(), Arc::clone(&reg), 0, &mut rng).unwrap();
        let gen = f.hyper_generator().unwrap();
        let set = reg.channel_set("WTC").unwrap().to_vec();
        let mut g = Graph::new();
        let w = generate_weights(&mut g, gen, &reg, &set, 2, 3).unwrap();
        let got = g.value(w);

        let gelu = |x: f64| {
            0.5 * x
                * (1.0
                    + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
        };
        for (ci, ch) in set.iter().enumerate() {
            let e = &gen.channel_embeddings[&reg.param_key(ch)].value;
            let mut h = vec![0.0; 6];
            for (i, hv) in h.iter_mut().enumerate() {
                let mut acc = gen.b1.value.data()[i];
                for j in 0..5 {
                    acc += gen.w1.value.data()[i * 5 + j] * e.data()[j];
                }
                *hv = gelu(acc);
            }
            for oi in 0..2 {
                for p in 0..9 {
                    let row = oi * 9 + p;
                    let mut acc = gen.b2.value.data()[row];
                    for j in 0..6 {
                        acc += gen.w2.value.data()[row * 6 + j] * h[j];
                    }
                    let v = got.data()[(oi * 3 + ci) * 9 + p];
                    let rel = (v - acc).abs() / acc.abs().max(1.0);
                    assert!(rel <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn replicate_cycles_source_slices() {
        let src = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        assert_eq!(replicate_first_layer(&src, 3).unwrap().data(), src.data());
        let r5 = replicate_first_layer(&src, 5).unwrap();
        assert_eq!(r5.shape(), &[2, 5, 2, 2]);
        for oi in 0..2 {
            for ci in 0..5 {
                let want = &src.data()[(oi * 3 + ci % 3) * 4..(oi * 3 + ci % 3 + 1) * 4];
                let got = &r5.data()[(oi * 5 + ci) * 4..(oi * 5 + ci + 1) * 4];
                assert_eq!(got, want);
            }
        }
        let bad = Tensor::<f64>::zeros(&[2, 4, 2, 2]);
        assert!(replicate_first_layer(&bad, 5).is_err());
    }

    #[test]
    fn replicated_weights_convolve_like_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let src = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |_| rng.gen_range(-1.0..1.0));
        let rep = replicate_first_layer(&src, 4).unwrap();
        let img = Tensor::<f64>::full(&[4, 4, 4], 0.5);
        let mut g = Graph::new();
        let xv = g.input(img.clone()).unwrap();
        let wv = g.input(rep.clone()).unwrap();
        let out = g.conv2d(xv, wv, None, 1, Padding::Valid).unwrap();
        // direct oracle over the replicated tensor
        for oi in 0..2 {
            for oh in 0..3 {
                for ow in 0..3 {
                    let mut acc = 0.0;
                    for ci in 0..4 {
                        for ki in 0..2 {
                            for kj in 0..2 {
                                acc += rep.data()[((oi * 4 + ci) * 2 + ki) * 2 + kj] * 0.5;
                            }
                        }
                    }
                    let got = g.value(out).data()[(oi * 3 + oh) * 3 + ow];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn count_parameters_matches_enumeration_at_default_sizes() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = FrontendConfig::default();

        let dw: Frontend<f64> =
            Frontend::new(Strategy::Depthwise, cfg, Arc::clone(&reg), 0, &mut rng).unwrap();
        assert_eq!(dw.count_parameters(), 12 * 96 * 16 + 96);

        let tp: Frontend<f64> =
            Frontend::new(Strategy::TargetParam, cfg, Arc::clone(&reg), 0, &mut rng).unwrap();
        assert_eq!(tp.count_parameters(), 96 * 16 * (3 + 4 + 5) + 3 * 96);

        let hn: Frontend<f64> =
            Frontend::new(Strategy::HyperNet, cfg, Arc::clone(&reg), 0, &mut rng).unwrap();
        let mlp = (128 * 64 + 128) + (96 * 16 * 128 + 96 * 16);
        assert_eq!(hn.count_parameters(), mlp + 12 * 64 + 96);
    }

    #[test]
    fn unregistered_set_and_mismatched_fixed_count_error() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f: Frontend<f64> =
            Frontend::new(Strategy::Depthwise, small_cfg(), Arc::clone(&reg), 0, &mut rng).unwrap();
        let img = rand_image(3, 8, 5);
        let mut g = Graph::new();
        assert!(matches!(
            f.forward(&mut g, &img, "NOPE"),
            Err(Error::UnknownChannel(_))
        ));

        let fx: Frontend<f64> =
            Frontend::new(Strategy::FixedChannels, small_cfg(), Arc::clone(&reg), 4, &mut rng)
                .unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            fx.forward(&mut g, &img, "WTC"),
            Err(Error::StrategyMismatch(_))
        ));
    }

    #[test]
    fn target_param_gradients_touch_only_the_used_head() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f: Frontend<f64> =
            Frontend::new(Strategy::TargetParam, small_cfg(), Arc::clone(&reg), 0, &mut rng)
                .unwrap();
        let img = rand_image(3, 8, 17);
        let mut g = Graph::new();
        let out = f.forward(&mut g, &img, "WTC").unwrap();
        let loss = g.sum(out).unwrap();
        let grads = g.backward(loss).unwrap();
        let heads = f.target_heads().unwrap();
        assert!(grads.contains_key(&heads["WTC"].0.id));
        assert!(!grads.contains_key(&heads["HPA"].0.id));
        assert!(!grads.contains_key(&heads["CP"].0.id));
    }

    #[test]
    fn depthwise_output_invariant_under_joint_channel_permutation() {
        let reg = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f: Frontend<f64> =
            Frontend::new(Strategy::Depthwise, small_cfg(), Arc::clone(&reg), 0, &mut rng).unwrap();
        let img = rand_image(3, 8, 19);
        let mut g1 = Graph::new();
        let out1 = f.forward(&mut g1, &img, "WTC").unwrap();

        // permute image channels and move the bank filters with them
        let mut f2: Frontend<f64> = Frontend::new(
            Strategy::Depthwise,
            small_cfg(),
            Arc::clone(&reg),
            0,
            &mut ChaCha8Rng::seed_from_u64(12),
        )
        .unwrap();
        let set = reg.channel_set("WTC").unwrap().to_vec();
        let perm = [2usize, 0, 1];
        {
            let bank = f.filter_bank().unwrap();
            let orig: Vec<Tensor<f64>> = set
                .iter()
                .map(|ch| bank[&reg.param_key(ch)].value.clone())
                .collect();
            let bank2 = f2.filter_bank_mut().unwrap();
            for (i, ch) in set.iter().enumerate() {
                bank2.get_mut(&reg.param_key(ch)).unwrap().value = orig[perm[i]].clone();
            }
        }
        let hw = 64;
        let img_p = Tensor::from_fn(&[3, 8, 8], |i| {
            let (c, r) = (i / hw, i % hw);
            img.data()[perm[c] * hw + r]
        });
        let mut g2 = Graph::new();
        let out2 = f2.forward(&mut g2, &img_p, "WTC").unwrap();
        // invariance is exact in real arithmetic; permuting the summation
        // order of the per-channel responses costs at most ~1 ulp
        for (a, b) in g1.value(out1).data().iter().zip(g2.value(out2).data()) {
            assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }
}
