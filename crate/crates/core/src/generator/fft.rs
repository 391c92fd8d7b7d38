//! Feed-forward transformer block: self-attention and a two-layer 1-D conv
//! feed-forward, each followed by a residual connection and a CPLN site.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Builder, Conv1d, MultiHeadAttention};
use crate::norm::Cpln;
use crate::style::STYLE_DIM;

#[derive(Debug, Clone)]
pub struct FftBlock {
    attn: MultiHeadAttention,
    norm1: Cpln,
    conv1: Conv1d,
    conv2: Conv1d,
    norm2: Cpln,
}

impl FftBlock {
    pub fn new(b: &mut Builder, hidden: usize, heads: usize, kernel: usize, filter: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut b.pp("attn"), hidden, heads)?,
            norm1: Cpln::new(&mut b.pp("norm1"), hidden, STYLE_DIM)?,
            conv1: Conv1d::new(&mut b.pp("conv1"), hidden, filter, kernel, 1, 1)?,
            conv2: Conv1d::new(&mut b.pp("conv2"), filter, hidden, 1, 1, 1)?,
            norm2: Cpln::new(&mut b.pp("norm2"), hidden, STYLE_DIM)?,
        })
    }

    /// `x`: `[batch, len, hidden]`, `mask`: `[batch, len, 1]`,
    /// `bias`: attention key bias, `s`: `[batch, 128]`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, bias: &Tensor, s: &Tensor) -> Result<Tensor> {
        let a = self.attn.forward(x, bias)?;
        let x = self.norm1.forward(&(x + a)?, s)?.broadcast_mul(mask)?;
        let f = self.conv2.forward(&self.conv1.forward(&x)?.relu()?)?;
        Ok(self.norm2.forward(&(x + f)?, s)?.broadcast_mul(mask)?)
    }
}

/// Stack of [`FftBlock`]s.
#[derive(Debug, Clone)]
pub struct FftStack {
    blocks: Vec<FftBlock>,
}

impl FftStack {
    pub fn new(b: &mut Builder, n: usize, hidden: usize, heads: usize, kernel: usize, filter: usize) -> Result<Self> {
        let blocks = (0..n)
            .map(|i| FftBlock::new(&mut b.pp(format!("block{i}")), hidden, heads, kernel, filter))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor, bias: &Tensor, s: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for b in &self.blocks {
            x = b.forward(&x, mask, bias, s)?;
        }
        Ok(x)
    }
}
