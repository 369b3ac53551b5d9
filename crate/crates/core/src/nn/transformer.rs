//! Minimal post-norm transformer encoder/decoder used by both recognition
//! heads.

use super::blocks::Linear;
use super::vars::Scope;
use crate::error::Result;
use candle_core::{Device, Tensor, Var};
use candle_nn::ops::softmax_last_dim;

#[derive(Clone)]
pub struct LayerNorm {
    w: Var,
    b: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            w: scope.param("w", &[dim], super::init::Init::Ones)?,
            b: scope.param("b", &[dim], super::init::Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(candle_core::D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(candle_core::D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.w.as_tensor())?
            .broadcast_add(self.b.as_tensor())?)
    }
}

#[derive(Clone)]
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by heads {heads}");
        Ok(Self {
            wq: Linear::new(&scope.sub("wq"), dim, dim, true)?,
            wk: Linear::new(&scope.sub("wk"), dim, dim, true)?,
            wv: Linear::new(&scope.sub("wv"), dim, dim, true)?,
            wo: Linear::new(&scope.sub("wo"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// `q`: `(B, Tq, D)`, `kv`: `(B, Tk, D)`, `mask`: optional `(Tq, Tk)`
    /// with `-inf`-like values at disallowed positions.
    pub fn forward(&self, q: &Tensor, kv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, _) = q.dims3()?;
        let (_, tk, _) = kv.dims3()?;
        let hd = self.dim / self.heads;
        let split = |t: &Tensor, tt: usize| -> Result<Tensor> {
            Ok(t.reshape((b, tt, self.heads, hd))?
                .transpose(1, 2)? // (B, H, T, hd)
                .reshape((b * self.heads, tt, hd))?
                .contiguous()?)
        };
        let qh = split(&self.wq.forward(q)?, tq)?;
        let kh = split(&self.wk.forward(kv)?, tk)?;
        let vh = split(&self.wv.forward(kv)?, tk)?;
        let mut scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (hd as f64).sqrt())?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(&mask.reshape((1, tq, tk))?)?;
        }
        let attn = softmax_last_dim(&scores)?;
        let ctx = attn.matmul(&vh)?; // (B*H, Tq, hd)
        let ctx = ctx
            .reshape((b, self.heads, tq, hd))?
            .transpose(1, 2)?
            .reshape((b, tq, self.dim))?
            .contiguous()?;
        self.wo.forward(&ctx)
    }
}

#[derive(Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(scope: &Scope, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&scope.sub("l1"), dim, hidden, true)?,
            l2: Linear::new(&scope.sub("l2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }
}

#[derive(Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ff: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(scope: &Scope, dim: usize, heads: usize, ff_hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&scope.sub("attn"), dim, heads)?,
            ff: FeedForward::new(&scope.sub("ff"), dim, ff_hidden)?,
            ln1: LayerNorm::new(&scope.sub("ln1"), dim)?,
            ln2: LayerNorm::new(&scope.sub("ln2"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.ln1.forward(&(x + self.attn.forward(x, x, None)?)?)?;
        let x = self.ln2.forward(&(&x + self.ff.forward(&x)?)?)?;
        Ok(x)
    }
}

#[derive(Clone)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ff: FeedForward,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(scope: &Scope, dim: usize, heads: usize, ff_hidden: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(&scope.sub("self_attn"), dim, heads)?,
            cross_attn: MultiHeadAttention::new(&scope.sub("cross_attn"), dim, heads)?,
            ff: FeedForward::new(&scope.sub("ff"), dim, ff_hidden)?,
            ln1: LayerNorm::new(&scope.sub("ln1"), dim)?,
            ln2: LayerNorm::new(&scope.sub("ln2"), dim)?,
            ln3: LayerNorm::new(&scope.sub("ln3"), dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let x = self.ln1.forward(&(x + self.self_attn.forward(x, x, Some(causal))?)?)?;
        let x = self.ln2.forward(&(&x + self.cross_attn.forward(&x, memory, None)?)?)?;
        let x = self.ln3.forward(&(&x + self.ff.forward(&x)?)?)?;
        Ok(x)
    }
}

/// `(T, T)` additive causal mask: 0 on/below the diagonal, -1e9 above.
pub fn causal_mask(t: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f32; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = -1e9;
        }
    }
    Ok(Tensor::from_vec(data, (t, t), device)?)
}

/// Fixed sinusoidal positional encoding `(T, D)`.
pub fn positional_encoding(t: usize, d: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f32; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = 1.0f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + 2 * i] = angle.sin() as f32;
            data[pos * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(Tensor::from_vec(data, (t, d), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::randn_tensor;
    use crate::nn::{device, ParamStore};

    #[test]
    fn attention_shapes_and_determinism() {
        let dev = device();
        let store = ParamStore::new(4);
        let mha = MultiHeadAttention::new(&store.root().sub("mha"), 32, 4).unwrap();
        let mut rng = crate::nn::init::rng_for(0, "attn.x");
        let x = randn_tensor(&mut rng, &[2, 5, 32], &dev).unwrap();
        let a = mha.forward(&x, &x, None).unwrap();
        let b = mha.forward(&x, &x, None).unwrap();
        assert_eq!(a.dims(), &[2, 5, 32]);
        assert_eq!(
            a.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let dev = device();
        let store = ParamStore::new(4);
        let mha = MultiHeadAttention::new(&store.root().sub("m"), 16, 2).unwrap();
        let mut rng = crate::nn::init::rng_for(0, "causal.x");
        let x = randn_tensor(&mut rng, &[1, 4, 16], &dev).unwrap();
        let mask = causal_mask(4, &dev).unwrap();
        let full = mha.forward(&x, &x, Some(&mask)).unwrap();
        // Changing a future token must not affect earlier outputs.
        let mut bumped = x.to_vec3::<f32>().unwrap();
        for v in bumped[0][3].iter_mut() {
            *v += 5.0;
        }
        let x2 = Tensor::new(bumped, &dev).unwrap();
        let full2 = mha.forward(&x2, &x2, Some(&mask)).unwrap();
        let a = full.narrow(1, 0, 3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = full2.narrow(1, 0, 3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
