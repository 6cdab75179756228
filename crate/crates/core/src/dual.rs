//! Dual-codebook quantizer: the latent is split channel-wise, the global
//! half is matched against transformer-refined entries and the local half
//! against its raw entries, and the two quantized halves are concatenated
//! back in channel order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codebook::{quantize_st, usage_stats, QuantizationResult, UsageCounter, UsageStats, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Binder, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Token width. Always the global channel width; filled in on validation
    /// when omitted.
    pub embed_dim: Option<usize>,
    /// Learned per-entry positions (zero-initialized).
    pub positional: bool,
    /// Zero the attention and feed-forward output projections so every block
    /// starts as the identity.
    pub zero_init_residual: bool,
    /// Keep transformer parameters fixed during training.
    pub frozen: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            ff_dim: 64,
            embed_dim: None,
            positional: false,
            zero_init_residual: false,
            frozen: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    /// Global and local codebooks over a channel split.
    Dual,
    /// One nearest-neighbor codebook of `codebook_total` entries over all
    /// channels.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    pub split_global: usize,
    pub split_local: usize,
    pub codebook_total: usize,
    /// Defaults to half of `codebook_total`.
    pub global_size: Option<usize>,
    pub local_size: Option<usize>,
    pub transformer_on: bool,
    pub beta: f64,
    pub transformer: TransformerConfig,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            kind: QuantizerKind::Dual,
            split_global: 4,
            split_local: 4,
            codebook_total: 64,
            global_size: None,
            local_size: None,
            transformer_on: true,
            beta: DEFAULT_BETA,
            transformer: TransformerConfig::default(),
        }
    }
}

impl QuantizerConfig {
    pub fn channels(&self) -> usize {
        self.split_global + self.split_local
    }

    /// `(K_g, K_l)`; `K_l` is 0 for a single codebook.
    pub fn sizes(&self) -> (usize, usize) {
        match self.kind {
            QuantizerKind::Single => (self.codebook_total, 0),
            QuantizerKind::Dual => {
                let g = self.global_size.unwrap_or(self.codebook_total / 2);
                let l = self.local_size.unwrap_or(self.codebook_total - g);
                (g, l)
            }
        }
    }

    /// Checks the split against the latent width and fills derived fields.
    pub fn validate(&mut self, channels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.split_global + self.split_local != channels {
            return bad(format!(
                "split_global ({}) + split_local ({}) must equal latent channels ({channels})",
                self.split_global, self.split_local
            ));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        match self.kind {
            QuantizerKind::Single => {
                if self.codebook_total == 0 {
                    return bad("codebook_total must be positive".into());
                }
                return Ok(());
            }
            QuantizerKind::Dual => {}
        }
        if self.split_global == 0 || self.split_local == 0 {
            return bad(format!(
                "both halves need channels, got split_global {} split_local {}",
                self.split_global, self.split_local
            ));
        }
        let (kg, kl) = self.sizes();
        if kg == 0 || kl == 0 || kg + kl != self.codebook_total {
            return bad(format!(
                "global_size ({kg}) + local_size ({kl}) must equal codebook_total ({}) with both positive",
                self.codebook_total
            ));
        }
        let tf = &mut self.transformer;
        let embed = *tf.embed_dim.get_or_insert(self.split_global);
        if embed != self.split_global {
            return bad(format!(
                "transformer embed_dim ({embed}) must equal split_global ({})",
                self.split_global
            ));
        }
        if self.transformer_on {
            if tf.layers == 0 || tf.heads == 0 || tf.ff_dim == 0 {
                return bad("transformer layers, heads and ff_dim must be positive".into());
            }
            if embed % tf.heads != 0 {
                return bad(format!("embed_dim {embed} is not divisible by heads {}", tf.heads));
            }
        }
        Ok(())
    }
}

/// First `split_global` channels of `[B,C,H,W]`, then the rest.
pub fn split_channels(g: &mut Graph, z: Var, split_global: usize) -> Result<(Var, Var)> {
    let s = g.value(z).shape().to_vec();
    if s.len() != 4 || split_global == 0 || split_global >= s[1] {
        return Err(Error::invalid(
            "split_channels",
            format!("cannot split {s:?} at channel {split_global}"),
        ));
    }
    let a = g.narrow(z, 1, 0, split_global)?;
    let b = g.narrow(z, 1, split_global, s[1] - split_global)?;
    Ok((a, b))
}

/// `[B,C,H,W]` to one `[B·H·W, C]` token row per spatial position.
pub fn to_tokens(g: &mut Graph, z: Var) -> Result<Var> {
    let s = g.value(z).shape().to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("to_tokens", format!("expected [B,C,H,W], got {s:?}")));
    }
    let p = g.permute(z, &[0, 2, 3, 1])?;
    g.reshape(p, &[s[0] * s[2] * s[3], s[1]])
}

/// Inverse of [`to_tokens`] for a latent of shape `[b,c,h,w]`.
pub fn from_tokens(g: &mut Graph, t: Var, shape: [usize; 4]) -> Result<Var> {
    let [b, c, h, w] = shape;
    let r = g.reshape(t, &[b, h, w, c])?;
    g.permute(r, &[0, 3, 1, 2])
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Pre-norm encoder stack over the global codebook entries, one token per
/// entry.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: TransformerConfig,
    embed_dim: usize,
    blocks: Vec<Block>,
    positions: Option<ParamId>,
}

impl Transformer {
    pub fn new(
        config: &TransformerConfig,
        embed_dim: usize,
        tokens: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.layers == 0 || config.heads == 0 || embed_dim % config.heads != 0 {
            return Err(Error::invalid(
                "transformer",
                format!("embed_dim {embed_dim} with {} heads", config.heads),
            ));
        }
        let (d, f) = (embed_dim, config.ff_dim);
        let group = ParamGroup::Transformer;
        let mut linear = |store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, zero: bool| {
            let bound = if zero { 0.0 } else { 1.0 / (fan_in as f64).sqrt() };
            let w = store.add(format!("{name}.weight"), group, uniform_init(rng, &[fan_in, fan_out], bound));
            let b = store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out]));
            (w, b)
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("tf.layer{i}");
            let ln = |store: &mut ParamStore, name: &str| {
                (
                    store.add(format!("{p}.{name}.gain"), group, Tensor::ones(&[d])),
                    store.add(format!("{p}.{name}.bias"), group, Tensor::zeros(&[d])),
                )
            };
            let ln1 = ln(store, "ln1");
            let wq = linear(store, format!("{p}.attn.q"), d, d, false);
            let wk = linear(store, format!("{p}.attn.k"), d, d, false);
            let wv = linear(store, format!("{p}.attn.v"), d, d, false);
            let wo = linear(store, format!("{p}.attn.out"), d, d, config.zero_init_residual);
            let ln2 = ln(store, "ln2");
            let ff1 = linear(store, format!("{p}.ff1"), d, f, false);
            let ff2 = linear(store, format!("{p}.ff2"), f, d, config.zero_init_residual);
            blocks.push(Block {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                ff1,
                ff2,
            });
        }
        let positions = config
            .positional
            .then(|| store.add("tf.pos", group, Tensor::zeros(&[tokens, d])));
        Ok(Self {
            config: config.clone(),
            embed_dim,
            blocks,
            positions,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    fn linear(g: &mut Graph, b: &mut Binder, x: Var, (w, bias): (ParamId, ParamId)) -> Result<Var> {
        let w = b.bind(g, w)?;
        let bias = b.bind(g, bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, bias)
    }

    fn layernorm(g: &mut Graph, b: &mut Binder, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let gain = b.bind(g, gain)?;
        let bias = b.bind(g, bias)?;
        g.layernorm(x, gain, bias, LN_EPS)
    }

    fn attention(&self, g: &mut Graph, b: &mut Binder, block: &Block, x: Var) -> Result<Var> {
        let q = Self::linear(g, b, x, block.wq)?;
        let k = Self::linear(g, b, x, block.wk)?;
        let v = Self::linear(g, b, x, block.wv)?;
        let heads = self.config.heads;
        let dh = self.embed_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Self::linear(g, b, joined, block.wo)
    }

    /// Refined `[K, embed_dim]` entries.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, entries: Var) -> Result<Var> {
        let s = g.value(entries).shape();
        if s.len() != 2 || s[1] != self.embed_dim {
            return Err(Error::invalid(
                "refine_global",
                format!("entries {s:?} do not match embed_dim {}", self.embed_dim),
            ));
        }
        let mut x = entries;
        if let Some(pos) = self.positions {
            let p = b.bind(g, pos)?;
            x = g.add(x, p)?;
        }
        for block in &self.blocks {
            let h = Self::layernorm(g, b, x, block.ln1)?;
            let a = self.attention(g, b, block, h)?;
            x = g.add(x, a)?;
            let h = Self::layernorm(g, b, x, block.ln2)?;
            let h = Self::linear(g, b, h, block.ff1)?;
            let h = g.gelu(h)?;
            let f = Self::linear(g, b, h, block.ff2)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }
}

/// Runs the global codebook entries through the transformer.
pub fn refine_global(g: &mut Graph, b: &mut Binder, entries: Var, tf: &Transformer) -> Result<Var> {
    tf.forward(g, b, entries)
}

/// One codebook's parameter and usage counters.
#[derive(Clone, Debug)]
pub struct CodebookSlot {
    pub param: ParamId,
    /// Counts since the last epoch boundary.
    pub epoch: UsageCounter,
    pub cumulative: UsageCounter,
}

impl CodebookSlot {
    fn record(&mut self, indices: &[usize]) {
        self.epoch.record(indices);
        self.cumulative.record(indices);
    }
}

/// One half's quantization with its summed loss.
#[derive(Clone, Debug)]
pub struct HalfOutput {
    pub result: QuantizationResult,
    /// The table assignments were made against (refined entries for the
    /// global half).
    pub table: Var,
    /// `codebook_term + commitment_term`.
    pub loss: Var,
}

#[derive(Clone, Debug)]
pub struct DualOutput {
    pub z_q: Var,
    pub global: HalfOutput,
    /// Absent for a single codebook.
    pub local: Option<HalfOutput>,
    pub total_loss: Var,
}

impl DualOutput {
    pub fn batch_stats(&self, sizes: (usize, usize)) -> (UsageStats, Option<UsageStats>) {
        let stats = |idx: &[usize], k: usize| {
            let mut c = UsageCounter::new(k);
            c.record(idx);
            usage_stats(c.counts())
        };
        (
            stats(&self.global.result.indices, sizes.0),
            self.local.as_ref().map(|l| stats(&l.result.indices, sizes.1)),
        )
    }
}

/// Quantizer state: codebook parameters live in the shared [`ParamStore`];
/// this holds their ids, the transformer and usage counters.
#[derive(Clone, Debug)]
pub struct DualQuantizer {
    config: QuantizerConfig,
    pub global: CodebookSlot,
    pub local: Option<CodebookSlot>,
    transformer: Option<Transformer>,
}

fn codebook_init(rng: &mut impl Rng, k: usize, d: usize) -> Tensor {
    uniform_init(rng, &[k, d], 1.0 / k as f64)
}

impl DualQuantizer {
    /// Registers parameters. Each part draws from its own generator so
    /// toggling the transformer leaves every other initial value unchanged.
    pub fn new(
        config: &QuantizerConfig,
        store: &mut ParamStore,
        rngs: &mut dyn FnMut(&str) -> rand_chacha::ChaCha8Rng,
    ) -> Result<Self> {
        let mut config = config.clone();
        config.validate(config.channels())?;
        let (kg, kl) = config.sizes();
        let slot = |store: &mut ParamStore, name: &str, group, k, d, rng: &mut rand_chacha::ChaCha8Rng| {
            let param = store.add(name, group, codebook_init(rng, k, d));
            CodebookSlot {
                param,
                epoch: UsageCounter::new(k),
                cumulative: UsageCounter::new(k),
            }
        };
        let (global, local, transformer) = match config.kind {
            QuantizerKind::Single => {
                let global = slot(
                    store,
                    "global_cb",
                    ParamGroup::GlobalCodebook,
                    kg,
                    config.channels(),
                    &mut rngs("global_cb"),
                );
                (global, None, None)
            }
            QuantizerKind::Dual => {
                let global = slot(
                    store,
                    "global_cb",
                    ParamGroup::GlobalCodebook,
                    kg,
                    config.split_global,
                    &mut rngs("global_cb"),
                );
                let local = slot(
                    store,
                    "local_cb",
                    ParamGroup::LocalCodebook,
                    kl,
                    config.split_local,
                    &mut rngs("local_cb"),
                );
                let transformer = if config.transformer_on {
                    Some(Transformer::new(
                        &config.transformer,
                        config.split_global,
                        kg,
                        store,
                        &mut rngs("transformer"),
                    )?)
                } else {
                    None
                };
                (global, Some(local), transformer)
            }
        };
        Ok(Self {
            config,
            global,
            local,
            transformer,
        })
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    pub fn sizes(&self) -> (usize, usize) {
        self.config.sizes()
    }

    pub fn transformer(&self) -> Option<&Transformer> {
        self.transformer.as_ref()
    }

    /// Parameter groups updated by the generator optimizer.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::GlobalCodebook, ParamGroup::LocalCodebook];
        if self.transformer.as_ref().is_some_and(|t| !t.config.frozen) {
            groups.push(ParamGroup::Transformer);
        }
        groups
    }

    fn quantize_half(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        z: Var,
        param: ParamId,
        refine: bool,
    ) -> Result<HalfOutput> {
        let shape: [usize; 4] = g
            .value(z)
            .shape()
            .try_into()
            .map_err(|_| Error::invalid("quantize_dual", "latent must be [B,C,H,W]"))?;
        let tokens = to_tokens(g, z)?;
        let mut table = b.bind(g, param)?;
        if refine {
            if let Some(tf) = &self.transformer {
                table = tf.forward(g, b, table)?;
            }
        }
        let mut result = quantize_st(g, tokens, table, self.config.beta)?;
        let loss = g.add(result.codebook_term, result.commitment_term)?;
        result.z_q = from_tokens(g, result.z_q, shape)?;
        Ok(HalfOutput { result, table, loss })
    }

    /// Quantizes `z: [B,C,H,W]`. Does not touch usage counters; see
    /// [`DualQuantizer::record`].
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, z: Var) -> Result<DualOutput> {
        let c = g.value(z).shape().get(1).copied();
        if c != Some(self.config.channels()) || g.value(z).ndim() != 4 {
            return Err(Error::invalid(
                "quantize_dual",
                format!(
                    "latent {:?} does not have {} channels",
                    g.value(z).shape(),
                    self.config.channels()
                ),
            ));
        }
        let Some(local_slot) = &self.local else {
            let global = self.quantize_half(g, b, z, self.global.param, false)?;
            return Ok(DualOutput {
                z_q: global.result.z_q,
                total_loss: global.loss,
                global,
                local: None,
            });
        };
        let (zg, zl) = split_channels(g, z, self.config.split_global)?;
        let global = self.quantize_half(g, b, zg, self.global.param, true)?;
        let local = self.quantize_half(g, b, zl, local_slot.param, false)?;
        let z_q = g.concat(&[global.result.z_q, local.result.z_q], 1)?;
        let total_loss = g.add(global.loss, local.loss)?;
        Ok(DualOutput {
            z_q,
            global,
            local: Some(local),
            total_loss,
        })
    }

    pub fn record(&mut self, out: &DualOutput) {
        self.global.record(&out.global.result.indices);
        if let (Some(slot), Some(l)) = (&mut self.local, &out.local) {
            slot.record(&l.result.indices);
        }
    }

    pub fn reset_epoch_usage(&mut self) {
        self.global.epoch.reset();
        if let Some(l) = &mut self.local {
            l.epoch.reset();
        }
    }
}

/// Quantizes `z` with `quantizer`, binding parameters from `store` with
/// nothing trainable. Convenience for evaluation and tests.
pub fn quantize_dual(g: &mut Graph, store: &ParamStore, quantizer: &DualQuantizer, z: Var) -> Result<DualOutput> {
    let mut b = Binder::new(store, &[]);
    quantizer.forward(g, &mut b, z)
}
