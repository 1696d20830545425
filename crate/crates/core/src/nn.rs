//! Layers shared by the image backbone and the text encoder.
//!
//! Layers only hold [`ParamId`]s; weights live in one [`ParamStore`] per model
//! so checkpoints, optimisers and precision casts see a flat list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use promptseg_autograd::{Float, ParamId, ParamStore, Tape, Tensor, Var};

use crate::Result;

/// One forward pass: a tape bound to a parameter store.
///
/// With a dropout generator present the graph is in training mode.
pub struct Graph<'s, T> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    dropout: Option<ChaCha8Rng>,
}

impl<'s, T: Float> Graph<'s, T> {
    /// Deterministic graph (no dropout).
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self { tape: Tape::new(), store, dropout: None }
    }

    pub fn training(store: &'s ParamStore<T>, dropout_seed: u64) -> Self {
        Self { tape: Tape::new(), store, dropout: Some(ChaCha8Rng::seed_from_u64(dropout_seed)) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Inverted dropout; identity at inference or when `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout.as_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let shape = self.tape.shape(x).to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random_bool(rate) { T::zero() } else { keep });
        let m = self.tape.constant(mask);
        self.tape.mul(x, m).expect("mask has the input shape")
    }
}

/// Fills a new parameter from `N(0, std²)`.
pub fn normal_tensor<T: Float>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Builder that prefixes parameter names and shares one init generator.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub trainable: bool,
}

impl<T: Float> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = normal_tensor(shape, std, self.rng);
        Ok(self.store.insert(name, t, self.trainable)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape, T::of(value)), self.trainable)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_std(init, name, d_in, d_out, bias, (1.0 / d_in as f64).sqrt())
    }

    pub fn with_std<T: Float>(
        init: &mut Init<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let w = init.normal(&format!("{name}.w"), &[d_in, d_out], std)?;
        let b = if bias { Some(init.constant(&format!("{name}.b"), &[d_out], 0.0)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let b = self.b.map(|b| g.p(b));
        Ok(g.tape.linear(x, w, b)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Low-rank update `scale * (x A) B` added to a frozen projection.
#[derive(Clone, Debug)]
pub struct Lora {
    /// `[d_in, rank]`, small random.
    pub a: ParamId,
    /// `[rank, d_out]`, zero at creation.
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

impl Lora {
    pub fn new<T: Float>(
        init: &mut Init<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
    ) -> Result<Self> {
        let a = init.normal(&format!("{name}.lora_a"), &[d_in, rank], (1.0 / d_in as f64).sqrt())?;
        let b = init.constant(&format!("{name}.lora_b"), &[rank, d_out], 0.0)?;
        Ok(Self { a, b, scale: alpha / rank as f64, dropout })
    }

    pub fn delta<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let x = g.dropout(x, self.dropout);
        let a = g.p(self.a);
        let b = g.p(self.b);
        let h = g.tape.matmul(x, a)?;
        let h = g.tape.matmul(h, b)?;
        Ok(g.tape.scale(h, T::of(self.scale)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{name}.g"), &[dim], 1.0)?,
            bias: init.constant(&format!("{name}.b"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gain = g.p(self.gain);
        let bias = g.p(self.bias);
        Ok(g.tape.layer_norm(x, gain, bias, 1e-5)?)
    }
}

/// Multi-head attention over row-major token matrices `[N, D]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub q_lora: Option<Lora>,
    pub v_lora: Option<Lora>,
}

impl Attention {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true)?,
            heads,
            q_lora: None,
            v_lora: None,
        })
    }

    fn project<T: Float>(&self, g: &mut Graph<T>, lin: &Linear, lora: &Option<Lora>, x: Var) -> Result<Var> {
        let y = lin.forward(g, x)?;
        match lora {
            Some(l) => {
                let d = l.delta(g, x)?;
                Ok(g.tape.add(y, d)?)
            }
            None => Ok(y),
        }
    }

    fn split_heads<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.tape.shape(x).to_vec();
        let (n, d) = (s[0], s[1]);
        let x = g.tape.reshape(x, &[n, self.heads, d / self.heads])?;
        Ok(g.tape.permute(x, &[1, 0, 2])?)
    }

    /// `queries [Nq, D]` attend to `keys`/`values [Nk, D]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, queries: Var, keys: Var, values: Var, causal: bool) -> Result<Var> {
        let nq = g.tape.shape(queries)[0];
        let dim = self.q.d_out;
        let q = self.project(g, &self.q, &self.q_lora, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.project(g, &self.v, &self.v_lora, values)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let scores = g.tape.matmul_t(q, k, false, true)?;
        let scores = g.tape.scale(scores, T::of(1.0 / ((dim / self.heads) as f64).sqrt()));
        let att = if causal { g.tape.causal_softmax(scores)? } else { g.tape.softmax(scores)? };
        let y = g.tape.matmul(att, v)?;
        let y = g.tape.permute(y, &[1, 0, 2])?;
        let y = g.tape.reshape(y, &[nq, dim])?;
        self.o.forward(g, y)
    }

    pub fn self_attn<T: Float>(&self, g: &mut Graph<T>, x: Var, causal: bool) -> Result<Var> {
        self.forward(g, x, x, x, causal)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Float>(init: &mut Init<T>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(init, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(init, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(init, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var, causal: bool) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.self_attn(g, h, causal)?;
        let x = g.tape.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        Ok(g.tape.add(x, h)?)
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<T: Float>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        T::of(if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lora_starts_as_identity_update() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { store: &mut store, rng: &mut rng, trainable: true };
        let lin = Linear::new(&mut init, "w", 64, 64, false).unwrap();
        let lora = Lora::new(&mut init, "w", 64, 64, 8, 16.0, 0.0).unwrap();
        let added = store.numel(false) - 64 * 64;
        assert_eq!(added, 1024);
        let mut g = Graph::inference(&store);
        let x = g.tape.constant(Tensor::full(&[3, 64], 0.3));
        let d = lora.delta(&mut g, x).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
        let _ = lin.forward(&mut g, x).unwrap();
    }

    #[test]
    fn dropout_only_in_training() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::inference(&store);
        let x = g.tape.constant(Tensor::full(&[100], 1.0));
        assert_eq!(g.dropout(x, 0.5), x);
        let mut g = Graph::training(&store, 3);
        let x = g.tape.constant(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.5);
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!((400..600).contains(&zeros));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
