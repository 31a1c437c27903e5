//! The super-resolution transformer.
//!
//! ```text
//! image [B,3,S,S]
//!   -> patch embedding (p x p patches, linear to D) + learned 2-D positions
//!   -> encoder: pre-norm transformer blocks
//!   -> decoder: pre-norm transformer blocks + final layer norm
//!   -> token grid [B,D,g,g]
//!   -> head: (conv3x3 -> pixel_shuffle(2) -> leaky_relu) per stage, conv3x3 -> 3 channels
//!   -> + input, when the residual connection is on
//! ```
//!
//! # Parameter names
//!
//! Checkpoints and weight loading match on these names:
//!
//! | name | shape |
//! |------|-------|
//! | `encoder.patch_embed.weight` | `[D, 3*p*p]` (flattened `[D, 3, p, p]`) |
//! | `encoder.patch_embed.bias` | `[D]` |
//! | `encoder.pos_embed` | `[g*g, D]` |
//! | `{encoder,decoder}.{i}.norm1.{weight,bias}` | `[D]` |
//! | `{encoder,decoder}.{i}.attn.qkv.{weight,bias}` | `[3D, D]`, `[3D]` |
//! | `{encoder,decoder}.{i}.attn.proj.{weight,bias}` | `[D, D]`, `[D]` |
//! | `{encoder,decoder}.{i}.norm2.{weight,bias}` | `[D]` |
//! | `{encoder,decoder}.{i}.mlp.fc1.{weight,bias}` | `[H, D]`, `[H]` |
//! | `{encoder,decoder}.{i}.mlp.fc2.{weight,bias}` | `[D, H]`, `[D]` |
//! | `decoder.norm.{weight,bias}` | `[D]` |
//! | `head.up.{i}.{weight,bias}` | `[4*c_i, c_{i-1}, 3, 3]`, `[4*c_i]` with `c_{-1} = D` |
//! | `head.out.{weight,bias}` | `[3, c_last, 3, 3]`, `[3]` |
//!
//! `H = round(D * mlp_ratio)`; parameters are created in table order, blocks
//! in index order.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    multi_head_attention, AttentionWeights, Element, ParamId, ParamSet, Tape, Tensor, Var,
    LAYER_NORM_EPS,
};
use crate::error::{dim_err, Error, Result};
use crate::imageops::bicubic_resize_planes;
use crate::training::checkpoint::Checkpoint;

/// Whether the network output is added to its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    On,
    Off,
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::On => "on",
            ResidualMode::Off => "off",
        })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub num_heads_encoder: usize,
    pub num_heads_decoder: usize,
    pub mlp_ratio: f64,
    pub upsample_stages: usize,
    /// Output channels of each upsampling stage.
    pub head_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub residual_mode: ResidualMode,
}

impl Default for ModelConfig {
    /// ViT-Base/16 encoder at 256x256, 8 decoder blocks with 16 heads,
    /// four x2 upsampling stages.
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            embed_dim: 768,
            encoder_depth: 12,
            decoder_depth: 8,
            num_heads_encoder: 12,
            num_heads_decoder: 16,
            mlp_ratio: 4.0,
            upsample_stages: 4,
            head_channels: default_head_channels(768, 4),
            leaky_slope: 0.2,
            residual_mode: ResidualMode::On,
        }
    }
}

/// Channel schedule halving from `embed_dim / 2` each stage.
pub fn default_head_channels(embed_dim: usize, stages: usize) -> Vec<usize> {
    (1..=stages).map(|i| (embed_dim >> i).max(1)).collect()
}

impl ModelConfig {
    /// A reduced configuration with the default head schedule and
    /// `log2(patch_size)` upsampling stages.
    pub fn small(
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        encoder_depth: usize,
        decoder_depth: usize,
        heads: usize,
    ) -> Self {
        let stages = patch_size.max(1).trailing_zeros() as usize;
        Self {
            image_size,
            patch_size,
            embed_dim,
            encoder_depth,
            decoder_depth,
            num_heads_encoder: heads,
            num_heads_decoder: heads,
            mlp_ratio: 4.0,
            upsample_stages: stages,
            head_channels: default_head_channels(embed_dim, stages),
            leaky_slope: 0.2,
            residual_mode: ResidualMode::On,
        }
    }

    /// 64x64 images, 8x8 patches, width 64, 4 encoder and 2 decoder blocks.
    pub fn micro() -> Self {
        Self::small(64, 8, 64, 4, 2, 4)
    }

    pub fn with_residual(mut self, mode: ResidualMode) -> Self {
        self.residual_mode = mode;
        self
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.embed_dim == 0 {
            return err("image_size, patch_size and embed_dim must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.patch_size.is_power_of_two()
            || self.upsample_stages != self.patch_size.trailing_zeros() as usize
        {
            return err(format!(
                "{} x2 upsampling stages cannot undo patch size {}",
                self.upsample_stages, self.patch_size
            ));
        }
        for (what, heads) in [
            ("num_heads_encoder", self.num_heads_encoder),
            ("num_heads_decoder", self.num_heads_decoder),
        ] {
            if heads == 0 || self.embed_dim % heads != 0 {
                return err(format!(
                    "embed_dim {} not divisible by {what} = {heads}",
                    self.embed_dim
                ));
            }
        }
        if self.head_channels.len() != self.upsample_stages || self.head_channels.contains(&0) {
            return err(format!(
                "head_channels {:?} must list {} positive channel counts",
                self.head_channels, self.upsample_stages
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return err(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return err(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Names of architecture fields that differ (the residual mode is not
    /// part of the architecture).
    pub fn architecture_diff(&self, other: &ModelConfig) -> Vec<String> {
        let mut diff = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => {$(
                if self.$f != other.$f {
                    diff.push(format!("{}: {:?} vs {:?}", stringify!($f), self.$f, other.$f));
                }
            )*};
        }
        cmp!(
            image_size,
            patch_size,
            embed_dim,
            encoder_depth,
            decoder_depth,
            num_heads_encoder,
            num_heads_decoder,
            mlp_ratio,
            upsample_stages,
            head_channels,
            leaky_slope
        );
        diff
    }

    /// Ordered parameter names and shapes.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let p = self.patch_size;
        let hidden = self.mlp_hidden();
        let mut out = vec![
            ("encoder.patch_embed.weight".to_string(), vec![d, 3 * p * p]),
            ("encoder.patch_embed.bias".to_string(), vec![d]),
            ("encoder.pos_embed".to_string(), vec![self.num_tokens(), d]),
        ];
        let block = |prefix: String, out: &mut Vec<(String, Vec<usize>)>| {
            for (suffix, shape) in [
                ("norm1.weight", vec![d]),
                ("norm1.bias", vec![d]),
                ("attn.qkv.weight", vec![3 * d, d]),
                ("attn.qkv.bias", vec![3 * d]),
                ("attn.proj.weight", vec![d, d]),
                ("attn.proj.bias", vec![d]),
                ("norm2.weight", vec![d]),
                ("norm2.bias", vec![d]),
                ("mlp.fc1.weight", vec![hidden, d]),
                ("mlp.fc1.bias", vec![hidden]),
                ("mlp.fc2.weight", vec![d, hidden]),
                ("mlp.fc2.bias", vec![d]),
            ] {
                out.push((format!("{prefix}.{suffix}"), shape));
            }
        };
        for i in 0..self.encoder_depth {
            block(format!("encoder.{i}"), &mut out);
        }
        for i in 0..self.decoder_depth {
            block(format!("decoder.{i}"), &mut out);
        }
        out.push(("decoder.norm.weight".into(), vec![d]));
        out.push(("decoder.norm.bias".into(), vec![d]));
        let mut cin = d;
        for (i, &c) in self.head_channels.iter().enumerate() {
            out.push((format!("head.up.{i}.weight"), vec![4 * c, cin, 3, 3]));
            out.push((format!("head.up.{i}.bias"), vec![4 * c]));
            cin = c;
        }
        out.push(("head.out.weight".into(), vec![3, cin, 3, 3]));
        out.push(("head.out.bias".into(), vec![3]));
        out
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    patch: (ParamId, ParamId),
    pos: ParamId,
    encoder: Vec<BlockIds>,
    decoder: Vec<BlockIds>,
    decoder_norm: (ParamId, ParamId),
    up: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

impl Layout {
    fn resolve<E: Element>(cfg: &ModelConfig, params: &ParamSet<E>) -> Result<Self> {
        for (name, shape) in cfg.parameter_shapes() {
            let p = params
                .by_name(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if p.tensor.shape() != shape.as_slice() {
                return Err(dim_err!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.tensor.shape()
                ));
            }
        }
        let id = |n: String| params.id(&n).expect("checked above");
        let pair = |prefix: String| (id(format!("{prefix}.weight")), id(format!("{prefix}.bias")));
        let block = |prefix: String| BlockIds {
            norm1: pair(format!("{prefix}.norm1")),
            qkv: pair(format!("{prefix}.attn.qkv")),
            proj: pair(format!("{prefix}.attn.proj")),
            norm2: pair(format!("{prefix}.norm2")),
            fc1: pair(format!("{prefix}.mlp.fc1")),
            fc2: pair(format!("{prefix}.mlp.fc2")),
        };
        Ok(Self {
            patch: pair("encoder.patch_embed".into()),
            pos: id("encoder.pos_embed".into()),
            encoder: (0..cfg.encoder_depth)
                .map(|i| block(format!("encoder.{i}")))
                .collect(),
            decoder: (0..cfg.decoder_depth)
                .map(|i| block(format!("decoder.{i}")))
                .collect(),
            decoder_norm: pair("decoder.norm".into()),
            up: (0..cfg.upsample_stages)
                .map(|i| pair(format!("head.up.{i}")))
                .collect(),
            out: pair("head.out".into()),
        })
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Final image `[B, 3, S, S]`.
    pub output: Var,
    /// Head output before the residual addition.
    pub head: Var,
}

/// Result of copying external weights into a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub matched: usize,
    /// Names present in the source whose shape did not fit, or that the
    /// model does not have.
    pub mismatched: Vec<String>,
    /// Whether the positional grid was resampled to the model's grid.
    pub resized_pos_embed: bool,
}

/// The network and its parameters.
#[derive(Debug, Clone)]
pub struct VitSr<E: Element = f32> {
    cfg: ModelConfig,
    params: ParamSet<E>,
    layout: Layout,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl VitSr<f32> {
    /// Deterministic initialization: truncated normal (std 0.02, cut at two
    /// std) for projection, convolution and positional weights; zero biases;
    /// unit layer-norm scales; an all-zero output convolution so training
    /// starts from the identity (residual) or a black image (no residual).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in cfg.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.starts_with("head.out.") || name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.contains("norm") {
                vec![1.0; n]
            } else {
                (0..n)
                    .map(|_| truncated_normal(&mut rng, 0.02) as f32)
                    .collect()
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(cfg, params)
    }

    /// Copies every `encoder.*` tensor whose name and shape match from a
    /// checkpoint file. A positional grid of a different size is resampled
    /// bicubically. Fails when nothing matches.
    pub fn load_external_encoder(&mut self, path: impl AsRef<Path>) -> Result<LoadReport> {
        let path = path.as_ref();
        let ckpt = Checkpoint::load(path)?;
        let report = self.copy_encoder_from(ckpt.tensors())?;
        if report.matched == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "no encoder tensor matched the model ({} mismatched)",
                    report.mismatched.len()
                ),
            });
        }
        Ok(report)
    }

    fn copy_encoder_from(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let d = self.cfg.embed_dim;
        let g = self.cfg.grid_size();
        for (name, src) in tensors.iter().filter(|(n, _)| n.starts_with("encoder.")) {
            let Some(dst) = self.params.by_name_mut(name) else {
                report.mismatched.push(name.clone());
                continue;
            };
            if dst.tensor.shape() == src.shape() {
                dst.tensor.data_mut().copy_from_slice(src.data());
                report.matched += 1;
                continue;
            }
            let src_side = (src.shape().first().copied().unwrap_or(0) as f64).sqrt() as usize;
            let resizable = name == "encoder.pos_embed"
                && src.shape().len() == 2
                && src.shape()[1] == d
                && src_side * src_side == src.shape()[0];
            if resizable {
                dst.tensor.data_mut().copy_from_slice(&resize_pos_grid(
                    src.data(),
                    src_side,
                    g,
                    d,
                )?);
                report.matched += 1;
                report.resized_pos_embed = true;
            } else {
                report.mismatched.push(name.clone());
            }
        }
        Ok(report)
    }
}

/// Bicubic resampling of a `[side*side, D]` positional table to `[g*g, D]`.
fn resize_pos_grid(src: &[f32], side: usize, g: usize, d: usize) -> Result<Vec<f32>> {
    let mut planes = vec![0.0f64; d * side * side];
    for t in 0..side * side {
        for c in 0..d {
            planes[c * side * side + t] = src[t * d + c] as f64;
        }
    }
    let resized = bicubic_resize_planes(&planes, d, side, side, g, g)?;
    let mut out = vec![0.0f32; g * g * d];
    for t in 0..g * g {
        for c in 0..d {
            out[t * d + c] = resized[c * g * g + t] as f32;
        }
    }
    Ok(out)
}

impl<E: Element> VitSr<E> {
    /// Wraps an existing parameter set, checking every name and shape.
    pub fn from_params(cfg: ModelConfig, params: ParamSet<E>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::resolve(&cfg, &params)?;
        if params.len() != cfg.parameter_shapes().len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, architecture expects {}",
                params.len(),
                cfg.parameter_shapes().len()
            )));
        }
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<E> {
        self.params
    }

    pub fn set_residual_mode(&mut self, mode: ResidualMode) {
        self.cfg.residual_mode = mode;
    }

    /// Same weights in another precision.
    pub fn cast<F: Element>(&self) -> VitSr<F> {
        VitSr {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Sets the output convolution to zero.
    pub fn zero_output_conv(&mut self) {
        for id in [self.layout.out.0, self.layout.out.1] {
            self.params
                .get_mut(id)
                .tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = E::zero());
        }
    }

    fn p<'a>(&'a self, tape: &mut Tape<'a, E>, id: ParamId) -> Result<Var> {
        tape.param(&self.params, id)
    }

    /// Splits `[B,3,S,S]` into `p x p` patches and projects them to tokens
    /// `[B, N, D]`, adding the positional table.
    pub fn patch_embed<'a>(&'a self, tape: &mut Tape<'a, E>, img: Var) -> Result<Var> {
        let shape = tape.shape(img).to_vec();
        let s = self.cfg.image_size;
        let p = self.cfg.patch_size;
        let g = self.cfg.grid_size();
        let batch = match shape.as_slice() {
            [b, 3, h, w] if *h == s && *w == s => *b,
            _ => {
                return Err(dim_err!(
                    "model expects [B, 3, {s}, {s}] input, got {shape:?}"
                ))
            }
        };
        let x = tape.reshape(img, [batch, 3, g, p, g, p])?;
        let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = tape.reshape(x, [batch, g * g, 3 * p * p])?;
        let (w, b) = self.layout.patch;
        let (w, b, pos) = (
            self.p(tape, w)?,
            self.p(tape, b)?,
            self.p(tape, self.layout.pos)?,
        );
        let tokens = tape.linear(x, w, Some(b))?;
        tape.add_broadcast(tokens, pos)
    }

    fn block<'a>(
        &'a self,
        tape: &mut Tape<'a, E>,
        x: Var,
        ids: &BlockIds,
        heads: usize,
    ) -> Result<Var> {
        let (g1, b1) = (self.p(tape, ids.norm1.0)?, self.p(tape, ids.norm1.1)?);
        let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let attn = AttentionWeights {
            qkv_weight: self.p(tape, ids.qkv.0)?,
            qkv_bias: self.p(tape, ids.qkv.1)?,
            proj_weight: self.p(tape, ids.proj.0)?,
            proj_bias: self.p(tape, ids.proj.1)?,
        };
        let a = multi_head_attention(tape, h, heads, &attn)?;
        let x = tape.add(x, a)?;
        let (g2, b2) = (self.p(tape, ids.norm2.0)?, self.p(tape, ids.norm2.1)?);
        let h = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS)?;
        let (w1, bb1) = (self.p(tape, ids.fc1.0)?, self.p(tape, ids.fc1.1)?);
        let h = tape.linear(h, w1, Some(bb1))?;
        let h = tape.gelu(h)?;
        let (w2, bb2) = (self.p(tape, ids.fc2.0)?, self.p(tape, ids.fc2.1)?);
        let h = tape.linear(h, w2, Some(bb2))?;
        tape.add(x, h)
    }

    pub fn encoder_forward<'a>(&'a self, tape: &mut Tape<'a, E>, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for ids in &self.layout.encoder {
            x = self.block(tape, x, ids, self.cfg.num_heads_encoder)?;
        }
        Ok(x)
    }

    pub fn decoder_forward<'a>(&'a self, tape: &mut Tape<'a, E>, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for ids in &self.layout.decoder {
            x = self.block(tape, x, ids, self.cfg.num_heads_decoder)?;
        }
        let (g, b) = self.layout.decoder_norm;
        let (g, b) = (self.p(tape, g)?, self.p(tape, b)?);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Tokens `[B, N, D]` to an image `[B, 3, S, S]`.
    pub fn upsample_head<'a>(&'a self, tape: &mut Tape<'a, E>, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        let (g, d) = (self.cfg.grid_size(), self.cfg.embed_dim);
        let batch = match shape.as_slice() {
            [b, n, dd] if *n == g * g && *dd == d => *b,
            _ => {
                return Err(dim_err!(
                    "head expects [B, {}, {d}] tokens, got {shape:?}",
                    g * g
                ))
            }
        };
        let x = tape.reshape(tokens, [batch, g, g, d])?;
        let mut x = tape.permute(x, &[0, 3, 1, 2])?;
        let slope = E::from_f64_lossy(self.cfg.leaky_slope);
        for &(w, b) in &self.layout.up {
            let (w, b) = (self.p(tape, w)?, self.p(tape, b)?);
            x = tape.conv2d(x, w, Some(b), 1)?;
            x = tape.pixel_shuffle(x, 2)?;
            x = tape.leaky_relu(x, slope)?;
        }
        let (w, b) = self.layout.out;
        let (w, b) = (self.p(tape, w)?, self.p(tape, b)?);
        tape.conv2d(x, w, Some(b), 1)
    }

    pub fn forward_parts<'a>(
        &'a self,
        tape: &mut Tape<'a, E>,
        input: Var,
    ) -> Result<ForwardOutput> {
        let tokens = self.patch_embed(tape, input)?;
        let tokens = self.encoder_forward(tape, tokens)?;
        let tokens = self.decoder_forward(tape, tokens)?;
        let head = self.upsample_head(tape, tokens)?;
        let output = match self.cfg.residual_mode {
            ResidualMode::On => tape.add(input, head)?,
            ResidualMode::Off => head,
        };
        Ok(ForwardOutput { output, head })
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a, E>, input: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, input)?.output)
    }

    /// Runs the network on a batch without keeping the tape; returns
    /// `(output, head)` tensors.
    pub fn predict(&self, input: Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let mut tape = Tape::new();
        let x = tape.input(input.with_requires_grad(false))?;
        let out = self.forward_parts(&mut tape, x)?;
        Ok((tape.to_tensor(out.output), tape.to_tensor(out.head)))
    }
}
