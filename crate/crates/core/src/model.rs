//! Convolutional autoencoder around the dual quantizer, a patch
//! discriminator, the generator/discriminator objectives and one
//! alternating optimization step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dual::{DualOutput, DualQuantizer, QuantizerConfig};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Adam, AdamConfig, Binder, ParamGroup, ParamId, ParamStore};
use crate::rng::component_rng;
use crate::tensor::Tensor;

/// Added to the adversarial gradient norm in the adaptive weight.
pub const LAMBDA_DELTA: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Number of stride-2 stages; the spatial downsample factor is
    /// `2^downsample_levels`.
    pub downsample_levels: usize,
    /// Width of the first encoder stage; doubles per stage.
    pub hidden: usize,
    pub latent_channels: usize,
    pub disc_channels: usize,
    pub disc_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample_levels: 2,
            hidden: 16,
            latent_channels: 8,
            disc_channels: 16,
            disc_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << self.downsample_levels
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_factor()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor();
        if self.image_size == 0 || self.image_size % f != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by the downsample factor {f}",
                self.image_size
            )));
        }
        if self.hidden == 0 || self.latent_channels == 0 || self.disc_channels == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.image_size >> self.disc_layers == 0 {
            return Err(Error::Config(format!(
                "{} discriminator stages are too many for {}px images",
                self.disc_layers, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    Hinge,
    /// Binary cross-entropy on logits.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub disc_start_step: u64,
    pub disc_weight: f64,
    pub lambda_max: f64,
    pub steps: u64,
    pub batch: usize,
    pub gan_loss: GanLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            disc_start_step: 500,
            disc_weight: 0.8,
            lambda_max: 1e4,
            steps: 3000,
            batch: 8,
            gan_loss: GanLoss::Hinge,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("lambda_max", self.lambda_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.disc_weight.is_finite() && self.disc_weight >= 0.0) {
            return Err(Error::Config(format!("disc_weight must be non-negative, got {}", self.disc_weight)));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    Identity,
    Relu,
    Leaky,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    transpose: bool,
    act: Act,
}

struct ConvSpec<'a> {
    name: &'a str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
    act: Act,
}

impl Conv {
    fn new(store: &mut ParamStore, group: ParamGroup, rng: &mut impl rand::Rng, s: ConvSpec) -> Self {
        let k = s.kernel;
        let (shape, fan_in) = if s.transpose {
            ([s.cin, s.cout, k, k], s.cout * k * k)
        } else {
            ([s.cout, s.cin, k, k], s.cin * k * k)
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{}.weight", s.name), group, uniform_init(rng, &shape, bound));
        let bias = store.add(format!("{}.bias", s.name), group, Tensor::zeros(&[s.cout]));
        Self {
            weight,
            bias,
            stride: s.stride,
            pad: s.pad,
            transpose: s.transpose,
            act: s.act,
        }
    }

    fn forward(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let w = b.bind(g, self.weight)?;
        let y = if self.transpose {
            g.conv_transpose2d(x, w, self.stride, self.pad)?
        } else {
            g.conv2d(x, w, self.stride, self.pad)?
        };
        let bias = b.bind(g, self.bias)?;
        let y = g.channel_bias(y, bias)?;
        match self.act {
            Act::Identity => Ok(y),
            Act::Relu => g.relu(y),
            Act::Leaky => g.leaky_relu(y, 0.2),
        }
    }
}

fn run(layers: &[Conv], g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
    layers.iter().try_fold(x, |h, l| l.forward(g, b, h))
}

/// Network parameters and quantizer.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
    pub quantizer: DualQuantizer,
    encoder: Vec<Conv>,
    decoder: Vec<Conv>,
    discriminator: Vec<Conv>,
}

impl Model {
    /// Initializes every part from its own generator derived from `seed`.
    pub fn new(config: &ModelConfig, quantizer: &QuantizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut qcfg = quantizer.clone();
        qcfg.validate(config.latent_channels)?;
        let mut store = ParamStore::new();
        let levels = config.downsample_levels;
        let width = |i: usize| config.hidden << i;

        let mut rng = component_rng(seed, "encoder");
        let mut encoder = Vec::new();
        let mut cin = 3;
        for i in 0..levels {
            encoder.push(Conv::new(
                &mut store,
                ParamGroup::Encoder,
                &mut rng,
                ConvSpec {
                    name: &format!("enc.down{i}"),
                    cin,
                    cout: width(i),
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    transpose: false,
                    act: Act::Relu,
                },
            ));
            cin = width(i);
        }
        encoder.push(Conv::new(
            &mut store,
            ParamGroup::Encoder,
            &mut rng,
            ConvSpec {
                name: "enc.out",
                cin,
                cout: config.latent_channels,
                kernel: 1,
                stride: 1,
                pad: 0,
                transpose: false,
                act: Act::Identity,
            },
        ));

        let quantizer = DualQuantizer::new(&qcfg, &mut store, &mut |l| component_rng(seed, l))?;

        let mut rng = component_rng(seed, "decoder");
        let mut decoder = Vec::new();
        let top = if levels == 0 { config.hidden } else { width(levels - 1) };
        decoder.push(Conv::new(
            &mut store,
            ParamGroup::Decoder,
            &mut rng,
            ConvSpec {
                name: "dec.in",
                cin: config.latent_channels,
                cout: top,
                kernel: 3,
                stride: 1,
                pad: 1,
                transpose: false,
                act: Act::Relu,
            },
        ));
        let mut cin = top;
        for i in (0..levels).rev() {
            let cout = if i == 0 { config.hidden } else { width(i - 1) };
            decoder.push(Conv::new(
                &mut store,
                ParamGroup::Decoder,
                &mut rng,
                ConvSpec {
                    name: &format!("dec.up{i}"),
                    cin,
                    cout,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    transpose: true,
                    act: Act::Relu,
                },
            ));
            cin = cout;
        }
        decoder.push(Conv::new(
            &mut store,
            ParamGroup::Decoder,
            &mut rng,
            ConvSpec {
                name: "dec.out",
                cin,
                cout: 3,
                kernel: 3,
                stride: 1,
                pad: 1,
                transpose: false,
                act: Act::Identity,
            },
        ));

        let mut rng = component_rng(seed, "discriminator");
        let mut discriminator = Vec::new();
        let mut cin = 3;
        for i in 0..config.disc_layers {
            let cout = config.disc_channels << i;
            discriminator.push(Conv::new(
                &mut store,
                ParamGroup::Discriminator,
                &mut rng,
                ConvSpec {
                    name: &format!("disc.conv{i}"),
                    cin,
                    cout,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    transpose: false,
                    act: Act::Leaky,
                },
            ));
            cin = cout;
        }
        discriminator.push(Conv::new(
            &mut store,
            ParamGroup::Discriminator,
            &mut rng,
            ConvSpec {
                name: "disc.logits",
                cin,
                cout: 1,
                kernel: 3,
                stride: 1,
                pad: 1,
                transpose: false,
                act: Act::Identity,
            },
        ));

        Ok(Self {
            config: config.clone(),
            store,
            quantizer,
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Weight of the decoder's final convolution.
    pub fn last_layer(&self) -> ParamId {
        self.decoder.last().expect("decoder is never empty").weight
    }

    pub fn generator_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::Encoder, ParamGroup::Decoder];
        groups.extend(self.quantizer.trainable_groups());
        groups
    }

    fn check_images(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.value(x).shape();
        let f = self.config.downsample_factor();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid("encode", format!("expected [B,3,H,W] images, got {s:?}")));
        }
        if s[2] % f != 0 || s[3] % f != 0 {
            return Err(Error::invalid(
                "encode",
                format!("image extent {}x{} is not divisible by {f}", s[2], s[3]),
            ));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        self.check_images(g, x)?;
        run(&self.encoder, g, b, x)
    }

    pub fn decode(&self, g: &mut Graph, b: &mut Binder, z_q: Var) -> Result<Var> {
        let s = g.value(z_q).shape();
        if s.len() != 4 || s[1] != self.config.latent_channels {
            return Err(Error::invalid(
                "decode",
                format!("expected {} latent channels, got {s:?}", self.config.latent_channels),
            ));
        }
        run(&self.decoder, g, b, z_q)
    }

    pub fn discriminate(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Var> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid("discriminate", format!("expected [B,3,H,W], got {s:?}")));
        }
        run(&self.discriminator, g, b, x)
    }

    /// Encoder output, quantizer output and reconstruction.
    pub fn autoencode(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<(Var, DualOutput, Var)> {
        let z = self.encode(g, b, x)?;
        let q = self.quantizer.forward(g, b, z)?;
        let x_hat = self.decode(g, b, q.z_q)?;
        Ok((z, q, x_hat))
    }

    /// Inference-only reconstruction of a batch.
    pub fn reconstruct(&self, images: &Tensor) -> Result<Reconstruction> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store, &[]);
        let x = g.constant(images.clone())?;
        let (_, q, x_hat) = self.autoencode(&mut g, &mut b, x)?;
        Ok(Reconstruction {
            x_hat: g.value(x_hat).clone(),
            z_q: g.value(q.z_q).clone(),
            global_indices: q.global.result.indices.clone(),
            local_indices: q.local.as_ref().map(|l| l.result.indices.clone()),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub x_hat: Tensor,
    pub z_q: Tensor,
    pub global_indices: Vec<usize>,
    pub local_indices: Option<Vec<usize>>,
}

/// `clamp(rec / (gan + δ), 0, lambda_max)`.
pub fn adaptive_lambda(grad_rec_norm: f64, grad_gan_norm: f64, lambda_max: f64) -> f64 {
    (grad_rec_norm / (grad_gan_norm + LAMBDA_DELTA)).clamp(0.0, lambda_max)
}

fn l2_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLosses {
    pub total: Var,
    pub l_rec: Var,
    /// `-mean(d_fake)`, when logits were supplied.
    pub l_gan: Option<Var>,
}

/// `L1(x, x̂) + quant + λ·disc_weight·(−mean d_fake)`. The adversarial term
/// is left out entirely when its weight is 0.
pub fn generator_losses(
    g: &mut Graph,
    x: Var,
    x_hat: Var,
    d_fake: Option<Var>,
    weight: f64,
    quant_loss: Var,
) -> Result<GeneratorLosses> {
    let l_rec = g.l1_loss(x, x_hat)?;
    let mut total = g.add(l_rec, quant_loss)?;
    let l_gan = match d_fake {
        Some(d) => {
            let m = g.mean(d)?;
            Some(g.neg(m)?)
        }
        None => None,
    };
    if let (Some(l), true) = (l_gan, weight != 0.0) {
        let w = g.scale(l, weight)?;
        total = g.add(total, w)?;
    }
    Ok(GeneratorLosses { total, l_rec, l_gan })
}

/// Hinge: `0.5·(mean relu(1 − d_real) + mean relu(1 + d_fake))`.
/// Vanilla: `0.5·(mean softplus(−d_real) + mean softplus(d_fake))`.
pub fn discriminator_loss(g: &mut Graph, d_real: Var, d_fake: Var, kind: GanLoss) -> Result<Var> {
    let (real, fake) = match kind {
        GanLoss::Hinge => {
            let r = g.neg(d_real)?;
            let r = g.add_scalar(r, 1.0)?;
            let f = g.add_scalar(d_fake, 1.0)?;
            (g.relu(r)?, g.relu(f)?)
        }
        GanLoss::Vanilla => {
            let r = g.neg(d_real)?;
            (g.softplus(r)?, g.softplus(d_fake)?)
        }
    };
    let real = g.mean(real)?;
    let fake = g.mean(fake)?;
    let s = g.add(real, fake)?;
    g.scale(s, 0.5)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub l_rec: f64,
    pub l_quant_g: f64,
    pub l_quant_l: Option<f64>,
    pub lambda: f64,
    pub d_loss: Option<f64>,
    pub perplexity_g: f64,
    pub perplexity_l: Option<f64>,
    pub active_g: f64,
    pub active_l: Option<f64>,
}

/// Model, optimizers and step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        let n = model.store.len();
        Ok(Self {
            config: config.clone(),
            gen_opt: Adam::new(config.adam(), n),
            disc_opt: Adam::new(config.adam(), n),
            model,
            step: 0,
        })
    }

    pub fn gan_active(&self) -> bool {
        self.step >= self.config.disc_start_step
    }

    /// Generator update, then (once the discriminator has started) a
    /// discriminator update on the same batch.
    pub fn training_step(&mut self, batch: &Tensor) -> Result<StepReport> {
        let gan = self.gan_active();
        let model = &self.model;
        let mut g = Graph::new();
        let groups = model.generator_groups();
        let mut b = Binder::new(&model.store, &groups);
        let x = g.constant(batch.clone())?;
        let (_, q, x_hat) = model.autoencode(&mut g, &mut b, x)?;

        let (losses, lambda) = if gan {
            let d_fake = model.discriminate(&mut g, &mut b, x_hat)?;
            let probe = generator_losses(&mut g, x, x_hat, Some(d_fake), 0.0, q.total_loss)?;
            let last = b.bind(&mut g, model.last_layer())?;
            let rec = g.gradients_wrt(probe.l_rec, &[last])?;
            let adv = g.gradients_wrt(probe.l_gan.expect("logits supplied"), &[last])?;
            let lambda = adaptive_lambda(l2_norm(&rec[0]), l2_norm(&adv[0]), self.config.lambda_max);
            let weight = lambda * self.config.disc_weight;
            let losses = if weight == 0.0 {
                probe
            } else {
                let w = g.scale(probe.l_gan.expect("logits supplied"), weight)?;
                GeneratorLosses {
                    total: g.add(probe.total, w)?,
                    ..probe
                }
            };
            (losses, lambda)
        } else {
            (generator_losses(&mut g, x, x_hat, None, 0.0, q.total_loss)?, 0.0)
        };
        g.backward(losses.total)?;
        let grads: Vec<(ParamId, Tensor)> = b
            .trainable_bindings(&g)
            .into_iter()
            .map(|(id, v)| (id, g.grad(v).expect("backward ran").clone()))
            .collect();
        drop(b);

        let sizes = model.quantizer.sizes();
        let (stats_g, stats_l) = q.batch_stats(sizes);
        let x_hat_value = g.value(x_hat).clone();
        let mut report = StepReport {
            step: self.step + 1,
            l_rec: g.value(losses.l_rec).item()?,
            l_quant_g: g.value(q.global.loss).item()?,
            l_quant_l: q.local.as_ref().map(|l| g.value(l.loss).item()).transpose()?,
            lambda,
            d_loss: None,
            perplexity_g: stats_g.perplexity,
            perplexity_l: stats_l.map(|s| s.perplexity),
            active_g: stats_g.active_fraction,
            active_l: stats_l.map(|s| s.active_fraction),
        };
        self.model.quantizer.record(&q);
        drop(g);
        self.gen_opt.step(&mut self.model.store, &grads)?;

        if gan {
            report.d_loss = Some(self.discriminator_step(batch, x_hat_value)?);
        }
        self.step += 1;
        Ok(report)
    }

    fn discriminator_step(&mut self, batch: &Tensor, x_hat: Tensor) -> Result<f64> {
        let model = &self.model;
        let mut g = Graph::new();
        let mut b = Binder::new(&model.store, &[ParamGroup::Discriminator]);
        let real = g.constant(batch.clone())?;
        let fake = g.constant(x_hat)?;
        let d_real = model.discriminate(&mut g, &mut b, real)?;
        let d_fake = model.discriminate(&mut g, &mut b, fake)?;
        let loss = discriminator_loss(&mut g, d_real, d_fake, self.config.gan_loss)?;
        g.backward(loss)?;
        let grads: Vec<(ParamId, Tensor)> = b
            .trainable_bindings(&g)
            .into_iter()
            .map(|(id, v)| (id, g.grad(v).expect("backward ran").clone()))
            .collect();
        let value = g.value(loss).item()?;
        drop(b);
        self.disc_opt.step(&mut self.model.store, &grads)?;
        Ok(value)
    }
}
