//! Causal transformer that denoises an embedding token stream conditioned on
//! the decoded embedding.
//!
//! The noised embedding is treated as a sequence of tokens; the conditioning
//! embedding is reshaped to the same token layout and prepended, giving a
//! sequence of twice the token count. A causal mask runs over the combined
//! sequence and the prediction is read from the last `tokens` positions, so
//! every predicted token sees the full conditioning stream plus the noised
//! tokens before it. The timestep enters as a sinusoidal embedding added to
//! every token after input projection, alongside sinusoidal positions.

use ndarray::{s, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_embedding, LayerNorm, LayerNormCache, Mlp, MlpCache, MultiHeadAttention,
    AttentionCache, Parameterized,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefinerConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            layers: 4,
            heads: 8,
            head_dim: 64,
        }
    }
}

impl RefinerConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "refiner layers, heads, and head_dim must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pre-norm transformer block: `x + attn(norm1(x))` then `a + mlp(norm2(a))`.
#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    mlp: Mlp,
}

struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl Block {
    fn new(width: usize, heads: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        Block {
            norm1: LayerNorm::new(width),
            attn: MultiHeadAttention::new(width, width, width, heads, head_dim, true, rng),
            norm2: LayerNorm::new(width),
            mlp: Mlp::new(&[width, 4 * width, width], rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Block {
            norm1: self.norm1.zeros_like(),
            attn: self.attn.zeros_like(),
            norm2: self.norm2.zeros_like(),
            mlp: self.mlp.zeros_like(),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, BlockCache) {
        let (n1, ln1) = self.norm1.forward(x);
        let (att, attn) = self.attn.forward(&n1, &n1);
        let a = x + &att;
        let (n2, ln2) = self.norm2.forward(&a);
        let (m, mlp) = self.mlp.forward(&n2);
        let y = &a + &m;
        (y, BlockCache { ln1, attn, ln2, mlp })
    }

    fn backward(&self, cache: &BlockCache, dy: &Array2<f64>, grad: &mut Block) -> Array2<f64> {
        let dn2 = self.mlp.backward(&cache.mlp, dy, &mut grad.mlp);
        let da = dy + &self.norm2.backward(&cache.ln2, &dn2, &mut grad.norm2);
        let (dq, dkv) = self.attn.backward(&cache.attn, &da, &mut grad.attn);
        let dn1 = dq + dkv;
        &da + &self.norm1.backward(&cache.ln1, &dn1, &mut grad.norm1)
    }
}

impl Parameterized for Block {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.norm1.visit(&mut |n, s| f(&format!("ln1.{n}"), s));
        self.attn.visit(&mut |n, s| f(&format!("attn.{n}"), s));
        self.norm2.visit(&mut |n, s| f(&format!("ln2.{n}"), s));
        self.mlp.visit(&mut |n, s| f(&format!("mlp.{n}"), s));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.norm1.visit_mut(&mut |n, s| f(&format!("ln1.{n}"), s));
        self.attn.visit_mut(&mut |n, s| f(&format!("attn.{n}"), s));
        self.norm2.visit_mut(&mut |n, s| f(&format!("ln2.{n}"), s));
        self.mlp.visit_mut(&mut |n, s| f(&format!("mlp.{n}"), s));
    }
}

/// The denoising transformer. `tokens`/`token_width` describe one embedding
/// stream; the internal sequence is `2·tokens` long.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub tokens: usize,
    pub token_width: usize,
    pub config: RefinerConfig,
    input_proj: crate::nn::Linear,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    output_proj: crate::nn::Linear,
    /// Fixed sinusoidal position table, `[2·tokens, width]`. Not a parameter.
    pos: Array2<f64>,
}

pub struct RefinerCache {
    seq: Array2<f64>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    normed: Array2<f64>,
}

impl Refiner {
    pub fn new(
        tokens: usize,
        token_width: usize,
        config: RefinerConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if tokens == 0 || token_width == 0 {
            return Err(Error::Config(
                "refiner tokens and token_width must be positive".into(),
            ));
        }
        let width = config.width();
        let seq_len = 2 * tokens;
        let mut pos = Array2::zeros((seq_len, width));
        for i in 0..seq_len {
            pos.row_mut(i).assign(&sinusoidal_embedding(i as f64, width));
        }
        Ok(Refiner {
            tokens,
            token_width,
            config,
            input_proj: crate::nn::Linear::new(token_width, width, rng),
            blocks: (0..config.layers)
                .map(|_| Block::new(width, config.heads, config.head_dim, rng))
                .collect(),
            final_norm: LayerNorm::new(width),
            output_proj: crate::nn::Linear::new(width, token_width, rng),
            pos,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Refiner {
            tokens: self.tokens,
            token_width: self.token_width,
            config: self.config,
            input_proj: self.input_proj.zeros_like(),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            final_norm: self.final_norm.zeros_like(),
            output_proj: self.output_proj.zeros_like(),
            pos: Array2::zeros(self.pos.raw_dim()),
        }
    }

    fn check_stream(&self, name: &str, x: &Array2<f64>) -> Result<()> {
        if x.dim() != (self.tokens, self.token_width) {
            return Err(Error::Validation(format!(
                "refiner {name} input has shape {:?}, expected {:?}",
                x.dim(),
                (self.tokens, self.token_width)
            )));
        }
        Ok(())
    }

    /// Denoise one step: predict the clean embedding from the noised stream
    /// `noised` at timestep `t`, conditioned on `cond`.
    pub fn forward(
        &self,
        noised: &Array2<f64>,
        t: usize,
        cond: &Array2<f64>,
    ) -> Result<(Array2<f64>, RefinerCache)> {
        self.check_stream("noised", noised)?;
        self.check_stream("conditioning", cond)?;
        let n = self.tokens;
        let width = self.config.width();

        let mut seq = Array2::zeros((2 * n, self.token_width));
        seq.slice_mut(s![..n, ..]).assign(cond);
        seq.slice_mut(s![n.., ..]).assign(noised);

        let mut h = self.input_proj.forward(&seq);
        h += &self.pos;
        let temb = sinusoidal_embedding(t as f64, width);
        h += &temb;

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h);
            h = next;
            blocks.push(cache);
        }
        let (normed, final_ln) = self.final_norm.forward(&h);
        let out_full = self.output_proj.forward(&normed);
        let out = out_full.slice(s![n.., ..]).to_owned();
        Ok((
            out,
            RefinerCache {
                seq,
                blocks,
                final_ln,
                normed,
            },
        ))
    }

    /// Returns `(d_noised, d_cond)`; parameter gradients accumulate into
    /// `grad`.
    pub fn backward(
        &self,
        cache: &RefinerCache,
        dout: &Array2<f64>,
        grad: &mut Refiner,
    ) -> (Array2<f64>, Array2<f64>) {
        let n = self.tokens;
        let mut dfull = Array2::zeros((2 * n, self.token_width));
        dfull.slice_mut(s![n.., ..]).assign(dout);
        let dnormed = self
            .output_proj
            .backward(&cache.normed, &dfull, &mut grad.output_proj);
        let mut dh = self
            .final_norm
            .backward(&cache.final_ln, &dnormed, &mut grad.final_norm);
        for i in (0..self.blocks.len()).rev() {
            dh = self.blocks[i].backward(&cache.blocks[i], &dh, &mut grad.blocks[i]);
        }
        let dseq = self.input_proj.backward(&cache.seq, &dh, &mut grad.input_proj);
        (
            dseq.slice(s![n.., ..]).to_owned(),
            dseq.slice(s![..n, ..]).to_owned(),
        )
    }
}

impl Parameterized for Refiner {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.input_proj.visit(&mut |n, s| f(&format!("in.{n}"), s));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&mut |n, s| f(&format!("block{i}.{n}"), s));
        }
        self.final_norm.visit(&mut |n, s| f(&format!("final.{n}"), s));
        self.output_proj.visit(&mut |n, s| f(&format!("out.{n}"), s));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.input_proj
            .visit_mut(&mut |n, s| f(&format!("in.{n}"), s));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&mut |n, s| f(&format!("block{i}.{n}"), s));
        }
        self.final_norm
            .visit_mut(&mut |n, s| f(&format!("final.{n}"), s));
        self.output_proj
            .visit_mut(&mut |n, s| f(&format!("out.{n}"), s));
    }
}
