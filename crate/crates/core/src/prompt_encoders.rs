//! Conditioning tokens for the three prompt strategies: a 36-row fixed-ID
//! table, separate unit and task tables, or free text through a byte-level
//! causal transformer with an optional low-rank adapter.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use promptseg_autograd::{Float, ParamId, ParamStore, Tensor, Var};

use crate::nn::{sinusoidal_positions, Block, Graph, Init, LayerNorm, Linear, Lora};
use crate::task_engine::NUM_TASKS;
use crate::{Error, Result};

pub const NUM_UNITS: usize = 4;
/// Byte vocabulary plus a begin-of-text marker.
pub const VOCAB: usize = 257;
const BOS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OneSet,
    TwoSet,
    FreeText,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::OneSet, Strategy::TwoSet, Strategy::FreeText];

    pub fn code(self) -> &'static str {
        match self {
            Strategy::OneSet => "one_set",
            Strategy::TwoSet => "two_set",
            Strategy::FreeText => "free_text",
        }
    }

    /// Conditioning tokens this strategy contributes.
    pub fn token_count(self) -> usize {
        match self {
            Strategy::TwoSet => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.code() == s)
            .ok_or_else(|| Error::Domain(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Frozen,
    Lora,
}

impl TextMode {
    pub fn code(self) -> &'static str {
        match self {
            TextMode::Frozen => "frozen",
            TextMode::Lora => "lora",
        }
    }
}

impl fmt::Display for TextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(TextMode::Frozen),
            "lora" => Ok(TextMode::Lora),
            _ => Err(Error::Domain(format!("unknown text mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub token_dim: usize,
    pub text_hidden_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_prompt_bytes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// GELU between the two projection layers; `false` makes the head affine.
    pub projection_activation: bool,
    pub table_init_std: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            token_dim: 384,
            text_hidden_dim: 128,
            text_layers: 4,
            text_heads: 4,
            max_prompt_bytes: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.05,
            projection_activation: true,
            table_init_std: 0.02,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.token_dim == 0 || self.text_hidden_dim == 0 {
            return bad("embedding dims must be positive");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1");
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad("lora_dropout must lie in [0, 1)");
        }
        if self.text_heads == 0 || !self.text_hidden_dim.is_multiple_of(self.text_heads) {
            return bad("text_hidden_dim must be divisible by text_heads");
        }
        if self.max_prompt_bytes == 0 {
            return bad("max_prompt_bytes must be positive");
        }
        Ok(())
    }
}

/// Conditioning tokens extracted from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Vec<Vec<f64>>,
    pub strategy: Strategy,
}

impl PromptEmbedding {
    pub fn from_var<T: Float>(g: &Graph<T>, tokens: Var, strategy: Strategy) -> Self {
        let t = g.value(tokens);
        let d = t.shape()[1];
        Self { tokens: t.to_f64().chunks(d).map(<[f64]>::to_vec).collect(), strategy }
    }
}

/// Byte tokenisation with a leading marker.
pub fn tokenize(prompt: &str, max_bytes: usize) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if prompt.len() > max_bytes {
        return Err(Error::Domain(format!("prompt is {} bytes, limit {max_bytes}", prompt.len())));
    }
    Ok(std::iter::once(BOS).chain(prompt.bytes().map(usize::from)).collect())
}

/// Small byte-level causal transformer; the last position is the summary.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub hidden: usize,
    pub max_bytes: usize,
}

impl TextEncoder {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, cfg: &EmbeddingConfig) -> Result<Self> {
        let h = cfg.text_hidden_dim;
        let embed = init.normal(&format!("{name}.embed"), &[VOCAB, h], 0.5)?;
        let blocks = (0..cfg.text_layers)
            .map(|l| Block::new(init, &format!("{name}.blocks.{l}"), h, cfg.text_heads, 4))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(init, &format!("{name}.ln_f"), h)?;
        Ok(Self { embed, blocks, ln_f, hidden: h, max_bytes: cfg.max_prompt_bytes })
    }

    /// Freezes every base weight and adds rank-`r` adapters to the query and
    /// value projections of each block.
    pub fn apply_lora<T: Float>(
        &mut self,
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EmbeddingConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        for id in self.param_ids() {
            store.set_trainable(id, false);
        }
        let mut init = Init { store, rng, trainable: true };
        for (l, block) in self.blocks.iter_mut().enumerate() {
            let a = &mut block.attn;
            let base = format!("{name}.blocks.{l}.attn");
            a.q_lora = Some(Lora::new(&mut init, &format!("{base}.q"), a.q.d_in, a.q.d_out, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)?);
            a.v_lora = Some(Lora::new(&mut init, &format!("{base}.v"), a.v.d_in, a.v.d_out, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)?);
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.q_lora.is_some())
    }

    /// Base (non-adapter) parameters.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed, self.ln_f.gain, self.ln_f.bias];
        for b in &self.blocks {
            ids.extend([b.ln1.gain, b.ln1.bias, b.ln2.gain, b.ln2.bias]);
            for lin in [&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.mlp.fc1, &b.mlp.fc2] {
                ids.extend(lin.params());
            }
        }
        ids
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.attn.q_lora, &b.attn.v_lora])
            .flatten()
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    /// Final-position hidden state `[1, hidden]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, prompt: &str) -> Result<Var> {
        let ids = tokenize(prompt, self.max_bytes)?;
        let n = ids.len();
        let table = g.p(self.embed);
        let x = g.tape.gather_rows(table, &ids)?;
        let pos = g.tape.constant(sinusoidal_positions(n, self.hidden));
        let mut x = g.tape.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, x, true)?;
        }
        let last = g.tape.slice_rows(x, n - 1, 1)?;
        self.ln_f.forward(g, last)
    }
}

/// Two linear layers mapping the text state to the backbone token width.
#[derive(Clone, Debug)]
pub struct Projection {
    pub l1: Linear,
    pub l2: Linear,
    pub activation: bool,
}

impl Projection {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize, activation: bool) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(init, &format!("{name}.l1"), d_in, d_out, true)?,
            l2: Linear::new(init, &format!("{name}.l2"), d_out, d_out, true)?,
            activation,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = if self.activation { g.tape.gelu(h) } else { h };
        self.l2.forward(g, h)
    }
}

/// What a caller supplies to condition one forward pass.
#[derive(Clone, Debug)]
pub enum PromptInput<T> {
    /// Unit class index `0..4` and zero-based task index `0..9`.
    Ids { unit: usize, task: usize },
    Text(String),
    /// Precomputed text state; valid only while the text encoder is frozen.
    TextState(Arc<Tensor<T>>),
}

#[derive(Clone, Debug)]
pub enum PromptEncoder {
    OneSet { table: ParamId },
    TwoSet { units: ParamId, tasks: ParamId },
    FreeText { text: TextEncoder, projection: Projection, mode: TextMode },
}

fn check_ids(unit: usize, task: usize) -> Result<()> {
    if unit >= NUM_UNITS || task >= NUM_TASKS {
        return Err(Error::Domain(format!("fixed-ID indices ({unit}, {task}) out of range 4x9")));
    }
    Ok(())
}

/// Row of the 36-entry table for `(unit, task)`.
pub fn one_set_row(unit: usize, task: usize) -> Result<usize> {
    check_ids(unit, task)?;
    Ok(unit * NUM_TASKS + task)
}

impl PromptEncoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        strategy: Strategy,
        mode: TextMode,
        cfg: &EmbeddingConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let mut init = Init { store, rng, trainable: true };
        Ok(match strategy {
            Strategy::OneSet => PromptEncoder::OneSet {
                table: init.normal("prompt.one_set", &[NUM_UNITS * NUM_TASKS, d], cfg.table_init_std)?,
            },
            Strategy::TwoSet => PromptEncoder::TwoSet {
                units: init.normal("prompt.units", &[NUM_UNITS, d], cfg.table_init_std)?,
                tasks: init.normal("prompt.tasks", &[NUM_TASKS, d], cfg.table_init_std)?,
            },
            Strategy::FreeText => {
                let mut text = TextEncoder::new(&mut init, "text", cfg)?;
                let projection = Projection::new(&mut init, "prompt.proj", cfg.text_hidden_dim, d, cfg.projection_activation)?;
                match mode {
                    TextMode::Lora => text.apply_lora(store, "text", cfg, rng)?,
                    TextMode::Frozen => {
                        for id in text.param_ids() {
                            store.set_trainable(id, false);
                        }
                    }
                }
                PromptEncoder::FreeText { text, projection, mode }
            }
        })
    }

    pub fn strategy(&self) -> Strategy {
        match self {
            PromptEncoder::OneSet { .. } => Strategy::OneSet,
            PromptEncoder::TwoSet { .. } => Strategy::TwoSet,
            PromptEncoder::FreeText { .. } => Strategy::FreeText,
        }
    }

    pub fn text_mode(&self) -> Option<TextMode> {
        match self {
            PromptEncoder::FreeText { mode, .. } => Some(*mode),
            _ => None,
        }
    }

    /// Runs the frozen text encoder alone, for caching.
    pub fn text_state<T: Float>(&self, store: &ParamStore<T>, prompt: &str) -> Result<Tensor<T>> {
        match self {
            PromptEncoder::FreeText { text, mode: TextMode::Frozen, .. } => {
                let mut g = Graph::inference(store);
                let v = text.forward(&mut g, prompt)?;
                Ok(g.value(v).clone())
            }
            _ => Err(Error::Config("text states can only be cached for a frozen text encoder".into())),
        }
    }

    /// Conditioning tokens `[k, D]`.
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, input: &PromptInput<T>) -> Result<Var> {
        match (self, input) {
            (PromptEncoder::OneSet { table }, &PromptInput::Ids { unit, task }) => {
                let row = one_set_row(unit, task)?;
                let t = g.p(*table);
                Ok(g.tape.gather_rows(t, &[row])?)
            }
            (PromptEncoder::TwoSet { units, tasks }, &PromptInput::Ids { unit, task }) => {
                check_ids(unit, task)?;
                let u = g.p(*units);
                let u = g.tape.gather_rows(u, &[unit])?;
                let t = g.p(*tasks);
                let t = g.tape.gather_rows(t, &[task])?;
                Ok(g.tape.concat_rows(&[u, t])?)
            }
            (PromptEncoder::FreeText { text, projection, .. }, PromptInput::Text(s)) => {
                let h = text.forward(g, s)?;
                projection.forward(g, h)
            }
            (PromptEncoder::FreeText { projection, mode, .. }, PromptInput::TextState(state)) => {
                if *mode != TextMode::Frozen {
                    return Err(Error::Config("cached text state used with a trainable text encoder".into()));
                }
                let h = g.tape.constant((**state).clone());
                projection.forward(g, h)
            }
            (enc, _) => Err(Error::Config(format!("prompt input does not match the {} strategy", enc.strategy()))),
        }
    }
}

/// Adapter parameter count for a list of `(d_in, d_out)` projections.
pub fn lora_param_count(shapes: &[(usize, usize)], rank: usize) -> usize {
    shapes.iter().map(|&(i, o)| rank * (i + o)).sum()
}

/// Rank-8 query/value adapters on a 22-layer, 2048-wide decoder whose value
/// projection emits 4 grouped heads of 64 (the 1.1B-parameter reference text
/// model).
pub fn reference_lora_param_count() -> usize {
    let (layers, width, kv_width) = (22, 2048, 4 * 64);
    let per_layer = [(width, width), (width, kv_width)];
    layers * lora_param_count(&per_layer, 8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn table_rows_and_sizes() {
        assert_eq!(one_set_row(0, 0).unwrap(), 0);
        assert_eq!(one_set_row(3, 8).unwrap(), 35);
        assert!(one_set_row(4, 0).is_err());
        assert!(one_set_row(0, 9).is_err());
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EmbeddingConfig::default();
        PromptEncoder::new(&mut store, &mut rng, Strategy::OneSet, TextMode::Frozen, &cfg).unwrap();
        assert_eq!(store.get(store.id("prompt.one_set").unwrap()).shape(), &[36, 384]);
        let mut store = ParamStore::<f32>::new();
        PromptEncoder::new(&mut store, &mut rng, Strategy::TwoSet, TextMode::Frozen, &cfg).unwrap();
        assert_eq!(store.numel(true), 4992);
    }

    #[test]
    fn reference_adapter_count() {
        assert_eq!(reference_lora_param_count(), 1_126_400);
        assert_eq!(lora_param_count(&[(64, 64)], 8), 1024);
    }

    #[test]
    fn tokenizer_rejects_empty_and_long() {
        assert!(matches!(tokenize("", 10), Err(Error::EmptyPrompt)));
        assert!(tokenize("abcdef", 3).is_err());
        assert_eq!(tokenize("A", 3).unwrap(), vec![256, 65]);
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EmbeddingConfig { token_dim: 16, text_hidden_dim: 16, text_layers: 1, ..Default::default() };
        let enc = PromptEncoder::new(&mut store, &mut rng, Strategy::OneSet, TextMode::Frozen, &cfg).unwrap();
        let mut g = Graph::inference(&store);
        assert!(enc.encode(&mut g, &PromptInput::Text("x".into())).is_err());
        let tokens = enc.encode(&mut g, &PromptInput::Ids { unit: 1, task: 2 }).unwrap();
        assert_eq!(PromptEmbedding::from_var(&g, tokens, Strategy::OneSet).tokens.len(), 1);
    }
}
