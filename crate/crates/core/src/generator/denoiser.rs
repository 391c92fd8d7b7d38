//! Residual dilated-conv denoiser predicting the clean mel from a noisy one.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, timestep_encoding, Builder, Conv1d, Ctx, Linear};
use crate::norm::Cpln;
use crate::style::STYLE_DIM;

/// Width of the sinusoidal timestep code fed to the step MLP.
pub const TIMESTEP_DIM: usize = 128;

#[derive(Debug, Clone)]
struct ResidualBlock {
    step_proj: Linear,
    dilated: Conv1d,
    cond_proj: Linear,
    norm: Cpln,
    out: Linear,
    hidden: usize,
}

impl ResidualBlock {
    fn new(b: &mut Builder, hidden: usize, context: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            step_proj: Linear::new(&mut b.pp("step_proj"), hidden, hidden, true)?,
            dilated: Conv1d::new(&mut b.pp("dilated"), hidden, 2 * hidden, 3, 1, dilation)?,
            cond_proj: Linear::new(&mut b.pp("cond_proj"), context, 2 * hidden, true)?,
            norm: Cpln::new(&mut b.pp("norm"), hidden, STYLE_DIM)?,
            out: Linear::new(&mut b.pp("out"), hidden, 2 * hidden, true)?,
            hidden,
        })
    }

    /// Returns `(residual output, skip)`.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Tensor,
        step: &Tensor,
        context: &Tensor,
        mask: &Tensor,
        s: &Tensor,
        dropout: f64,
        ctx: &mut Ctx,
    ) -> Result<(Tensor, Tensor)> {
        let h = x.broadcast_add(&self.step_proj.forward(step)?.unsqueeze(1)?)?.broadcast_mul(mask)?;
        let h = (self.dilated.forward(&h)? + self.cond_proj.forward(context)?)?;
        let gate = h.narrow(D::Minus1, 0, self.hidden)?;
        let filt = h.narrow(D::Minus1, self.hidden, self.hidden)?;
        let g = (gate.tanh()? * sigmoid(&filt)?)?;
        let g = ctx.dropout(&self.norm.forward(&g, s)?, dropout)?.broadcast_mul(mask)?;
        let o = self.out.forward(&g)?.broadcast_mul(mask)?;
        let res = o.narrow(D::Minus1, 0, self.hidden)?;
        let skip = o.narrow(D::Minus1, self.hidden, self.hidden)?;
        Ok((((x + res)? * std::f64::consts::FRAC_1_SQRT_2)?, skip))
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    input: Linear,
    step1: Linear,
    step2: Linear,
    blocks: Vec<ResidualBlock>,
    skip_proj: Linear,
    output: Linear,
    mel_bins: usize,
    dropout: f64,
}

impl Denoiser {
    pub fn new(
        b: &mut Builder,
        mel_bins: usize,
        context: usize,
        hidden: usize,
        n_blocks: usize,
        dropout: f64,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::Config("denoiser needs at least one block".into()));
        }
        let blocks = (0..n_blocks)
            .map(|i| ResidualBlock::new(&mut b.pp(format!("block{i}")), hidden, context, 1 << (i % 4)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input: Linear::new(&mut b.pp("input"), mel_bins, hidden, true)?,
            step1: Linear::new(&mut b.pp("step1"), TIMESTEP_DIM, 4 * hidden, true)?,
            step2: Linear::new(&mut b.pp("step2"), 4 * hidden, hidden, true)?,
            blocks,
            skip_proj: Linear::new(&mut b.pp("skip_proj"), hidden, hidden, true)?,
            output: Linear::new(&mut b.pp("output"), hidden, mel_bins, true)?,
            mel_bins,
            dropout,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `x_t`: `[batch, frames, mel_bins]`, `context`: `[batch, frames, hidden]`,
    /// `mask`: `[batch, frames, 1]`, `ts`: one model timestep per item.
    pub fn forward(
        &self,
        x_t: &Tensor,
        context: &Tensor,
        mask: &Tensor,
        s: &Tensor,
        ts: &[usize],
        ctx: &mut Ctx,
    ) -> Result<Tensor> {
        let (b, f, m) = x_t.dims3()?;
        let (cb, cf, _) = context.dims3()?;
        if m != self.mel_bins {
            return Err(Error::Shape(format!("denoiser expects {} mel bins, got {m}", self.mel_bins)));
        }
        if (cb, cf) != (b, f) {
            return Err(Error::Shape(format!("x_t is {b}x{f} frames but context is {cb}x{cf}")));
        }
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        let temb = timestep_encoding(ts, TIMESTEP_DIM, x_t.dtype(), x_t.device())?;
        let step = self.step2.forward(&self.step1.forward(&temb)?.silu()?)?;
        let mut x = self.input.forward(x_t)?.relu()?.broadcast_mul(mask)?;
        let mut skips: Option<Tensor> = None;
        for block in &self.blocks {
            let (nx, skip) = block.forward(&x, &step, context, mask, s, self.dropout, ctx)?;
            x = nx;
            skips = Some(match skips {
                Some(acc) => (acc + skip)?,
                None => skip,
            });
        }
        let skips = (skips.expect("at least one block") * (1.0 / (self.blocks.len() as f64).sqrt()))?;
        let h = self.skip_proj.forward(&skips)?.relu()?;
        Ok(self.output.forward(&h)?.broadcast_mul(mask)?)
    }
}
