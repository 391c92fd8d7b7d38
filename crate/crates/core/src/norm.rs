//! Conditional prosodic layer normalization (CPLN).
//!
//! Each site normalizes over the feature axis and then blends two affine
//! transforms of the normalized activations:
//!
//! ```text
//! y = rho * (gamma_ln * x_hat + beta_ln) + (1 - rho) * (gamma_style * x_hat + beta_style)
//! ```
//!
//! `(gamma_style, beta_style)` come from a linear projection of the style
//! embedding; `rho` is a learned scalar kept in `[0, 1]` by clamping after
//! every optimizer step.

use candle_core::{Tensor, Var, D};

use crate::error::{Error, Result};
use crate::nn::{Builder, Init, Linear, ParamStore};

/// Floor added to the variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

pub const RHO_INIT: f64 = 0.9;

/// Per-row statistics of a normalization.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub mu: Tensor,
    pub sigma2: Tensor,
}

/// Normalizes over the last axis with the biased (1/m) variance.
pub fn layer_normalize(x: &Tensor) -> Result<(Tensor, LayerStats)> {
    let m = x.dim(D::Minus1)?;
    if m == 0 {
        return Err(Error::Shape("cannot normalize zero-width rows".into()));
    }
    let mu = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mu)?;
    let sigma2 = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let x_hat = centered.broadcast_div(&(&sigma2 + NORM_EPS)?.sqrt()?)?;
    Ok((x_hat, LayerStats { mu, sigma2 }))
}

/// Splits a `[batch, 2m]` projection of the style embedding into
/// `(gamma_style, beta_style)`, each `[batch, m]`.
pub fn style_affine_params(s: &Tensor, proj: &Linear, width: usize) -> Result<(Tensor, Tensor)> {
    let in_dim = proj.weight().dims()[0];
    if s.dim(D::Minus1)? != in_dim {
        return Err(Error::Shape(format!(
            "style embedding has {} dims, projection expects {in_dim}",
            s.dim(D::Minus1)?
        )));
    }
    let p = proj.forward(s)?;
    if p.dim(D::Minus1)? != 2 * width {
        return Err(Error::Shape(format!("projection yields {} values, need {}", p.dim(D::Minus1)?, 2 * width)));
    }
    Ok((p.narrow(D::Minus1, 0, width)?, p.narrow(D::Minus1, width, width)?))
}

/// One CPLN site.
#[derive(Debug, Clone)]
pub struct Cpln {
    gamma_ln: Tensor,
    beta_ln: Tensor,
    rho: Var,
    proj: Linear,
    width: usize,
}

impl Cpln {
    pub fn new(b: &mut Builder, width: usize, style_dim: usize) -> Result<Self> {
        let gamma_ln = b.param("gamma_ln", &[width], Init::Const(1.0))?;
        let beta_ln = b.param("beta_ln", &[width], Init::Const(0.0))?;
        let rho = b.param_var("rho", &[1], Init::Const(RHO_INIT))?;
        // gamma half of the bias starts at 1 so both branches begin as the same affine map
        let proj = Linear::with_init(
            &mut b.pp("style_proj"),
            style_dim,
            2 * width,
            Init::Normal { std: 0.1 / (style_dim as f64).sqrt() },
            Some(Init::Halves(1.0, 0.0)),
        )?;
        Ok(Self { gamma_ln, beta_ln, rho, proj, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rho(&self) -> Result<f64> {
        crate::nn::scalar_f64(self.rho.as_tensor())
    }

    pub fn set_rho(&self, rho: f64) -> Result<()> {
        let t = Tensor::new(&[rho], self.rho.device())?.to_dtype(self.rho.dtype())?;
        self.rho.set(&t)?;
        Ok(())
    }

    /// Projects `rho` back into `[0, 1]`.
    pub fn clamp_rho(&self) -> Result<()> {
        let r = self.rho()?;
        let c = r.clamp(0.0, 1.0);
        if c != r {
            self.set_rho(c)?;
        }
        Ok(())
    }

    pub fn style_affine(&self, s: &Tensor) -> Result<(Tensor, Tensor)> {
        style_affine_params(s, &self.proj, self.width)
    }

    /// `x` is `[batch, ..., width]`; `s` is `[batch, style_dim]`.
    pub fn forward(&self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims[dims.len() - 1] != self.width {
            return Err(Error::Shape(format!("CPLN width {} vs input {:?}", self.width, dims)));
        }
        if s.dims()[0] != dims[0] {
            return Err(Error::Shape(format!("style batch {} vs input batch {}", s.dims()[0], dims[0])));
        }
        let (x_hat, _) = layer_normalize(x)?;
        let (gs, bs) = self.style_affine(s)?;
        let mut shape = vec![1usize; dims.len()];
        shape[0] = dims[0];
        shape[dims.len() - 1] = self.width;
        let gs = gs.reshape(shape.as_slice())?;
        let bs = bs.reshape(shape.as_slice())?;
        let rho = self.rho.as_tensor();
        let plain = x_hat.broadcast_mul(&self.gamma_ln)?.broadcast_add(&self.beta_ln)?;
        let styled = x_hat.broadcast_mul(&gs)?.broadcast_add(&bs)?;
        Ok((plain.broadcast_mul(rho)? + styled.broadcast_mul(&rho.affine(-1.0, 1.0)?)?)?)
    }
}

pub fn is_rho_param(name: &str) -> bool {
    name == "rho" || name.ends_with(".rho")
}

/// Clamps every CPLN mixing coefficient registered in `store`.
pub fn clamp_all_rho(store: &ParamStore) -> Result<()> {
    for (name, var) in store.iter() {
        if is_rho_param(name) {
            let r = crate::nn::scalar_f64(var.as_tensor())?;
            if !(0.0..=1.0).contains(&r) {
                let t = Tensor::new(&[r.clamp(0.0, 1.0)], var.device())?.to_dtype(var.dtype())?;
                var.set(&t)?;
            }
        }
    }
    Ok(())
}

/// Number of CPLN sites registered in `store`.
pub fn count_sites(store: &ParamStore) -> usize {
    store.iter().filter(|(n, _)| is_rho_param(n)).count()
}
