//! Prompt-conditioned ViT segmenter.
//!
//! Prompt tokens enter three places: appended to the patch sequence at every
//! encoder layer, as decoder queries next to the point token, and as input to
//! the controller that generates the dynamic output head.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use promptseg_autograd::{Float, ParamId, ParamStore, Tensor, Var};

use crate::mask::Mask;
use crate::nn::{Attention, Block, Graph, Init, LayerNorm, Linear, Mlp};
use crate::prompt_encoders::{EmbeddingConfig, PromptEncoder, PromptInput, Strategy, TextMode};
use crate::task_engine::Point;
use crate::{Error, Result};

/// How prompt tokens pass between encoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInjection {
    /// Fresh prompt tokens are appended at each layer and stripped afterwards.
    Reinject,
    /// Prompt tokens are appended once and their updated states carried on.
    Carry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_blocks: usize,
    pub decoder_channels: usize,
    /// `(C_in, C_out)` of each dynamic 1x1 layer; the last must emit 2.
    pub head_stack: Vec<(usize, usize)>,
    pub controller_hidden: usize,
    pub point_frequencies: usize,
    pub prompt_injection: PromptInjection,
    /// Weight of the soft-Dice term added to cross-entropy; 0 disables it.
    pub dice_loss_weight: f64,
    pub embedding: EmbeddingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x64 configuration sized for single-core CPU training.
    pub fn desk() -> Self {
        let dim = 96;
        Self {
            image_size: 64,
            patch_size: 8,
            encoder_dim: dim,
            encoder_layers: 4,
            encoder_heads: 4,
            mlp_ratio: 2,
            decoder_blocks: 2,
            decoder_channels: 16,
            head_stack: vec![(16, 8), (8, 8), (8, 2)],
            controller_hidden: dim,
            point_frequencies: 8,
            prompt_injection: PromptInjection::Reinject,
            dice_loss_weight: 0.0,
            embedding: EmbeddingConfig { token_dim: dim, ..EmbeddingConfig::default() },
        }
    }

    /// 16x16, two encoder layers; for gradient checks and fast tests.
    pub fn tiny() -> Self {
        let dim = 8;
        Self {
            image_size: 16,
            patch_size: 4,
            encoder_dim: dim,
            encoder_layers: 2,
            encoder_heads: 2,
            mlp_ratio: 2,
            decoder_blocks: 1,
            decoder_channels: 4,
            head_stack: vec![(4, 3), (3, 2)],
            controller_hidden: 8,
            point_frequencies: 3,
            prompt_injection: PromptInjection::Reinject,
            dice_loss_weight: 0.0,
            embedding: EmbeddingConfig {
                token_dim: dim,
                text_hidden_dim: 8,
                text_layers: 1,
                text_heads: 2,
                lora_rank: 2,
                lora_alpha: 4.0,
                ..EmbeddingConfig::default()
            },
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Side of the decoder feature map (one x2 upsample of the patch grid).
    pub fn feature_side(&self) -> usize {
        2 * self.grid_side()
    }

    pub fn head_len(&self) -> usize {
        dynamic_head_len(&self.head_stack)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch_size));
        }
        if self.encoder_heads == 0 || !self.encoder_dim.is_multiple_of(self.encoder_heads) {
            return bad(format!("encoder_dim {} not divisible by {} heads", self.encoder_dim, self.encoder_heads));
        }
        if self.embedding.token_dim != self.encoder_dim {
            return bad(format!(
                "prompt token dim {} must equal encoder_dim {}",
                self.embedding.token_dim, self.encoder_dim
            ));
        }
        let Some(&(first, _)) = self.head_stack.first() else {
            return bad("empty dynamic head stack".into());
        };
        if first != self.decoder_channels {
            return bad(format!("head input {first} != decoder channels {}", self.decoder_channels));
        }
        if self.head_stack.windows(2).any(|w| w[0].1 != w[1].0) {
            return bad("dynamic head layers do not chain".into());
        }
        if self.head_stack.last().map(|l| l.1) != Some(2) {
            return bad("dynamic head must emit exactly 2 channels".into());
        }
        if self.point_frequencies == 0 || self.encoder_layers == 0 || self.mlp_ratio == 0 {
            return bad("point_frequencies, encoder_layers and mlp_ratio must be positive".into());
        }
        if self.dice_loss_weight.is_nan() || self.dice_loss_weight < 0.0 {
            return bad("dice_loss_weight must be non-negative".into());
        }
        self.embedding.validate()
    }
}

/// `Σ (C_in·C_out + C_out)` over the stack.
pub fn dynamic_head_len(stack: &[(usize, usize)]) -> usize {
    stack.iter().map(|&(i, o)| i * o + o).sum()
}

/// Offsets of each layer's kernel and bias inside the flat head vector.
pub fn dynamic_head_layout(stack: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut off = 0;
    stack
        .iter()
        .map(|&(i, o)| {
            let k = off;
            off += i * o + o;
            (k, k + i * o)
        })
        .collect()
}

/// Sinusoidal features `[sin(ω_k x), cos(ω_k x), sin(ω_k y), cos(ω_k y)]`
/// with `ω_k = (π/2)·2^k`.
pub fn fourier_features(p: Point, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * freqs);
    for coord in [p.x, p.y] {
        for k in 0..freqs {
            let w = std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64;
            out.push((w * coord).sin());
            out.push((w * coord).cos());
        }
    }
    out
}

/// SAM-style decoder block: queries attend to themselves and to the image,
/// then image tokens attend back to the queries.
#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub to_image: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub ln3: LayerNorm,
    pub to_queries: Attention,
    pub ln4: LayerNorm,
}

impl TwoWayBlock {
    fn new<T: Float>(init: &mut Init<T>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(init, &format!("{name}.self_attn"), dim, heads)?,
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            to_image: Attention::new(init, &format!("{name}.to_image"), dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
            ln3: LayerNorm::new(init, &format!("{name}.ln3"), dim)?,
            to_queries: Attention::new(init, &format!("{name}.to_queries"), dim, heads)?,
            ln4: LayerNorm::new(init, &format!("{name}.ln4"), dim)?,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, q: Var, q0: Var, img: Var, pe: Var) -> Result<(Var, Var)> {
        let qp = g.tape.add(q, q0)?;
        let h = self.self_attn.forward(g, qp, qp, q, false)?;
        let q = g.tape.add(q, h)?;
        let q = self.ln1.forward(g, q)?;

        let qp = g.tape.add(q, q0)?;
        let kp = g.tape.add(img, pe)?;
        let h = self.to_image.forward(g, qp, kp, img, false)?;
        let q = g.tape.add(q, h)?;
        let q = self.ln2.forward(g, q)?;

        let h = self.mlp.forward(g, q)?;
        let q = g.tape.add(q, h)?;
        let q = self.ln3.forward(g, q)?;

        let qp = g.tape.add(q, q0)?;
        let h = self.to_queries.forward(g, kp, qp, q, false)?;
        let img = g.tape.add(img, h)?;
        let img = self.ln4.forward(g, img)?;
        Ok((q, img))
    }
}

/// Everything a forward pass exposes for inspection and loss computation.
pub struct ForwardOutput {
    /// `[H*W, 2]`, channel-last.
    pub logits: Var,
    pub prompt_tokens: Var,
    pub point_token: Var,
    pub grid: Var,
    pub pooled: Var,
    pub features: Var,
    pub head_weights: Var,
    /// Sequence length seen by self-attention at each encoder layer.
    pub encoder_seq_lens: Vec<usize>,
    pub query_count: usize,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub enc_ln: LayerNorm,
    pub prompt: PromptEncoder,
    pub point_proj: Linear,
    pub sentinel: ParamId,
    pub dec_blocks: Vec<TwoWayBlock>,
    pub dec_ln: LayerNorm,
    pub upsample: Linear,
    pub up_ln: LayerNorm,
    pub controller1: Linear,
    pub controller2: Linear,
}

impl SegModel {
    /// Builds the model and its freshly initialised parameters.
    pub fn new<T: Float>(
        config: &ModelConfig,
        strategy: Strategy,
        text_mode: TextMode,
        seed: u64,
    ) -> Result<(SegModel, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.encoder_dim;
        let p = config.patch_size;
        let heads = config.encoder_heads;
        let prompt = PromptEncoder::new(&mut store, &mut rng, strategy, text_mode, &config.embedding)?;
        let mut init = Init { store: &mut store, rng: &mut rng, trainable: true };
        let patch_embed = Linear::new(&mut init, "enc.patch", p * p * 3, d, true)?;
        let pos_embed = init.normal("enc.pos", &[config.num_patches(), d], 0.02)?;
        let blocks = (0..config.encoder_layers)
            .map(|l| Block::new(&mut init, &format!("enc.blocks.{l}"), d, heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let enc_ln = LayerNorm::new(&mut init, "enc.ln", d)?;
        let point_proj = Linear::new(&mut init, "point.proj", 4 * config.point_frequencies, d, true)?;
        let sentinel = init.normal("point.sentinel", &[1, d], 0.02)?;
        let dec_blocks = (0..config.decoder_blocks)
            .map(|l| TwoWayBlock::new(&mut init, &format!("dec.blocks.{l}"), d, heads, config.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = LayerNorm::new(&mut init, "dec.ln", d)?;
        let c = config.decoder_channels;
        let upsample = Linear::new(&mut init, "dec.up", d, 4 * c, true)?;
        let up_ln = LayerNorm::new(&mut init, "dec.up_ln", c)?;
        let ctrl_in = (strategy.token_count() + 1) * d;
        let controller1 = Linear::new(&mut init, "head.ctrl1", ctrl_in, config.controller_hidden, true)?;
        let head_len = config.head_len();
        let controller2 = Linear::with_std(&mut init, "head.ctrl2", config.controller_hidden, head_len, true, 0.01)?;
        // Start from an ordinary randomly initialised static head; the
        // controller learns prompt-dependent corrections around it.
        let bias = controller2.b.expect("controller has a bias");
        let mut static_head = vec![T::zero(); head_len];
        let dist = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
        for (&(k, _), &(cin, cout)) in dynamic_head_layout(&config.head_stack).iter().zip(&config.head_stack) {
            let std = (2.0 / cin as f64).sqrt();
            for v in &mut static_head[k..k + cin * cout] {
                *v = T::of(std * rand_distr::Distribution::sample(&dist, &mut rng));
            }
        }
        store.set(bias, Tensor::new(&[head_len], static_head)?)?;
        let model = SegModel {
            config: config.clone(),
            strategy,
            patch_embed,
            pos_embed,
            blocks,
            enc_ln,
            prompt,
            point_proj,
            sentinel,
            dec_blocks,
            dec_ln,
            upsample,
            up_ln,
            controller1,
            controller2,
        };
        Ok((model, store))
    }

    pub fn text_mode(&self) -> Option<TextMode> {
        self.prompt.text_mode()
    }

    /// Rearranges `H x W x 3` pixels into `[num_patches, p*p*3]`.
    pub fn patchify<T: Float>(&self, pixels: &[f32]) -> Result<Tensor<T>> {
        let (s, p) = (self.config.image_size, self.config.patch_size);
        if pixels.len() != s * s * 3 {
            return Err(Error::Shape(format!("expected {s}x{s}x3 pixels, got {}", pixels.len())));
        }
        let gs = s / p;
        let mut out = Vec::with_capacity(pixels.len());
        for gr in 0..gs {
            for gc in 0..gs {
                for r in 0..p {
                    let row = gr * p + r;
                    let start = (row * s + gc * p) * 3;
                    out.extend(pixels[start..start + p * 3].iter().map(|&v| T::of(v as f64)));
                }
            }
        }
        Ok(Tensor::new(&[gs * gs, p * p * 3], out)?)
    }

    /// Patch tokens with prompt tokens present in every layer's attention.
    /// Returns `(grid [N, D], pooled [1, D], per-layer sequence lengths)`.
    pub fn encode_image<T: Float>(&self, g: &mut Graph<T>, patches: Var, prompt: Var) -> Result<(Var, Var, Vec<usize>)> {
        let d = self.config.encoder_dim;
        let n = self.config.num_patches();
        let (ps, qs) = (g.tape.shape(patches).to_vec(), g.tape.shape(prompt).to_vec());
        if ps != [n, self.patch_embed.d_in] || qs.len() != 2 || qs[1] != d {
            return Err(Error::Shape(format!("encode_image: patches {ps:?}, prompt {qs:?}, dim {d}")));
        }
        let k = qs[0];
        let x = self.patch_embed.forward(g, patches)?;
        let pos = g.p(self.pos_embed);
        let mut x = g.tape.add(x, pos)?;
        let mut lens = Vec::with_capacity(self.blocks.len());
        match self.config.prompt_injection {
            PromptInjection::Reinject => {
                for b in &self.blocks {
                    let seq = g.tape.concat_rows(&[x, prompt])?;
                    lens.push(g.tape.shape(seq)[0]);
                    let y = b.forward(g, seq, false)?;
                    x = g.tape.slice_rows(y, 0, n)?;
                }
            }
            PromptInjection::Carry => {
                let mut seq = g.tape.concat_rows(&[x, prompt])?;
                for b in &self.blocks {
                    lens.push(g.tape.shape(seq)[0]);
                    seq = b.forward(g, seq, false)?;
                }
                x = g.tape.slice_rows(seq, 0, n)?;
            }
        }
        debug_assert!(lens.iter().all(|&l| l == n + k));
        let grid = self.enc_ln.forward(g, x)?;
        let pooled = g.tape.mean_rows(grid)?;
        Ok((grid, pooled, lens))
    }

    /// Point token `[1, D]`; the learned sentinel when no point is given.
    pub fn encode_point<T: Float>(&self, g: &mut Graph<T>, point: Option<Point>) -> Result<Var> {
        match point {
            None => Ok(g.p(self.sentinel)),
            Some(p) if !p.in_unit_square() => Err(Error::InvalidPoint(format!("({}, {}) outside [0,1]²", p.x, p.y))),
            Some(p) => {
                let f = fourier_features(p, self.config.point_frequencies);
                let x = g.tape.constant(Tensor::from_f64(&[1, f.len()], &f)?);
                self.point_proj.forward(g, x)
            }
        }
    }

    /// Positional encoding of patch centres through the point pathway.
    fn dense_pe<T: Float>(&self, g: &mut Graph<T>) -> Result<Var> {
        let gs = self.config.grid_side();
        let fq = self.config.point_frequencies;
        let mut feats = Vec::with_capacity(gs * gs * 4 * fq);
        for r in 0..gs {
            for c in 0..gs {
                feats.extend(fourier_features(Point::pixel_center(r, c, gs, gs), fq));
            }
        }
        let x = g.tape.constant(Tensor::from_f64(&[gs * gs, 4 * fq], &feats)?);
        self.point_proj.forward(g, x)
    }

    /// Stride-4 features `[(H/4)*(W/4), C_dec]`; also returns the query count.
    pub fn decode_mask<T: Float>(&self, g: &mut Graph<T>, grid: Var, prompt: Var, point: Var) -> Result<(Var, usize)> {
        let d = self.config.encoder_dim;
        for v in [grid, prompt, point] {
            if g.tape.shape(v).len() != 2 || g.tape.shape(v)[1] != d {
                return Err(Error::Shape(format!("decode_mask input {:?}, dim {d}", g.tape.shape(v))));
            }
        }
        let q0 = g.tape.concat_rows(&[prompt, point])?;
        let nq = g.tape.shape(q0)[0];
        let pe = self.dense_pe(g)?;
        let (mut q, mut img) = (q0, grid);
        for b in &self.dec_blocks {
            (q, img) = b.forward(g, q, q0, img, pe)?;
        }
        let img = self.dec_ln.forward(g, img)?;
        let gs = self.config.grid_side();
        let c = self.config.decoder_channels;
        let up = self.upsample.forward(g, img)?;
        let up = g.tape.reshape(up, &[gs, gs, 2, 2, c])?;
        let up = g.tape.permute(up, &[0, 2, 1, 3, 4])?;
        let up = g.tape.reshape(up, &[4 * gs * gs, c])?;
        let up = self.up_ln.forward(g, up)?;
        Ok((g.tape.gelu(up), nq))
    }

    /// Flat dynamic-head parameters `[1, L]` from prompt tokens and pooled image.
    pub fn dynamic_head_weights<T: Float>(&self, g: &mut Graph<T>, prompt: Var, pooled: Var) -> Result<Var> {
        let x = g.tape.concat_rows(&[prompt, pooled])?;
        let n = g.tape.value(x).len();
        if n != self.controller1.d_in {
            return Err(Error::Shape(format!("controller expects {} inputs, got {n}", self.controller1.d_in)));
        }
        let x = g.tape.reshape(x, &[1, n])?;
        let h = self.controller1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.controller2.forward(g, h)
    }

    /// Runs the generated 1x1 layers (ReLU between) and upsamples to full size.
    pub fn apply_dynamic_head<T: Float>(&self, g: &mut Graph<T>, features: Var, weights: Var) -> Result<Var> {
        apply_dynamic_head(g, &self.config, features, weights)
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        pixels: &[f32],
        prompt: &PromptInput<T>,
        point: Option<Point>,
    ) -> Result<ForwardOutput> {
        let patches = g.tape.constant(self.patchify(pixels)?);
        let prompt_tokens = self.prompt.encode(g, prompt)?;
        let (grid, pooled, encoder_seq_lens) = self.encode_image(g, patches, prompt_tokens)?;
        let point_token = self.encode_point(g, point)?;
        let (features, query_count) = self.decode_mask(g, grid, prompt_tokens, point_token)?;
        let head_weights = self.dynamic_head_weights(g, prompt_tokens, pooled)?;
        let logits = self.apply_dynamic_head(g, features, head_weights)?;
        Ok(ForwardOutput {
            logits,
            prompt_tokens,
            point_token,
            grid,
            pooled,
            features,
            head_weights,
            encoder_seq_lens,
            query_count,
        })
    }

    /// Mean pixel cross-entropy, plus the weighted soft-Dice term if enabled.
    pub fn loss<T: Float>(&self, g: &mut Graph<T>, logits: Var, target: &Mask) -> Result<Var> {
        let targets: Vec<usize> = target.data().iter().map(|&b| b as usize).collect();
        let ce = g.tape.cross_entropy(logits, &targets)?;
        if self.config.dice_loss_weight > 0.0 {
            let dice = g.tape.soft_dice_loss(logits, target.data())?;
            let dice = g.tape.scale(dice, T::of(self.config.dice_loss_weight));
            Ok(g.tape.add(ce, dice)?)
        } else {
            Ok(ce)
        }
    }

    /// Every parameter of the text encoder and its adapters, if any.
    pub fn text_param_ids(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        match &self.prompt {
            PromptEncoder::FreeText { text, .. } => (text.param_ids(), text.lora_ids()),
            _ => (Vec::new(), Vec::new()),
        }
    }
}

/// Free-function form of [`SegModel::apply_dynamic_head`].
pub fn apply_dynamic_head<T: Float>(g: &mut Graph<T>, config: &ModelConfig, features: Var, weights: Var) -> Result<Var> {
    let stack = &config.head_stack;
    let len = dynamic_head_len(stack);
    if g.tape.value(weights).len() != len {
        return Err(Error::Shape(format!(
            "dynamic head needs {len} weights, got {}",
            g.tape.value(weights).len()
        )));
    }
    let fs = config.feature_side();
    let fshape = g.tape.shape(features).to_vec();
    if fshape != [fs * fs, stack[0].0] {
        return Err(Error::Shape(format!("features {fshape:?}, expected [{}, {}]", fs * fs, stack[0].0)));
    }
    let flat = g.tape.reshape(weights, &[len, 1])?;
    let mut x = features;
    for (l, (&(k, b), &(cin, cout))) in dynamic_head_layout(stack).iter().zip(stack).enumerate() {
        let kernel = g.tape.slice_rows(flat, k, cin * cout)?;
        let kernel = g.tape.reshape(kernel, &[cin, cout])?;
        let bias = g.tape.slice_rows(flat, b, cout)?;
        let bias = g.tape.reshape(bias, &[cout])?;
        x = g.tape.matmul(x, kernel)?;
        x = g.tape.add_bias(x, bias)?;
        if l + 1 < stack.len() {
            x = g.tape.relu(x);
        }
    }
    let s = config.image_size;
    Ok(g.tape.resize_bilinear(x, fs, fs, s, s)?)
}

/// Channel-last `[H*W, 2]` logits rearranged to `2 x H x W`.
pub fn logits_chw<T: Float>(logits: &Tensor<T>) -> Vec<T> {
    let hw = logits.len() / 2;
    let d = logits.data();
    (0..2).flat_map(|ch| (0..hw).map(move |i| d[2 * i + ch])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_length_and_layout() {
        let stack = [(16, 8), (8, 8), (8, 2)];
        assert_eq!(dynamic_head_len(&stack), 226);
        assert_eq!(dynamic_head_layout(&stack), vec![(0, 128), (136, 200), (208, 224)]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::desk();
        c.head_stack = vec![(16, 8), (8, 3)];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.encoder_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fourier_features_separate_points() {
        let a = fourier_features(Point { x: 0.2, y: 0.7 }, 8);
        let b = fourier_features(Point { x: 0.21, y: 0.7 }, 8);
        assert_eq!(a.len(), 32);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }
}
