//! Small neural-network toolkit on top of `candle_core` tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path names; layers hold
//! cheap clones of the underlying tensors, so optimizer updates through
//! [`candle_core::Var::set`] are visible to every layer without rebuilding.
//!
//! All sequence tensors use the `[batch, length, channels]` layout. Padded
//! positions are kept at exactly zero by multiplying with a `[batch, length, 1]`
//! mask after every sublayer, which makes padded batches compute the same values
//! as unpadded single sequences with zero boundary padding.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vec;

/// Parameter initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Normal {
        std: f64,
    },
    Uniform {
        bound: f64,
    },
    /// First half of the elements set to `.0`, second half to `.1`.
    Halves(f64, f64),
}

/// Named collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { vars: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> Builder<'a> {
        Builder { store: self, rng, prefix: String::new() }
    }

    /// Overwrites a variable with `value` (converted to the store dtype).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.vars.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!("parameter `{name}` has shape {:?}, got {:?}", var.dims(), value.dims())));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Flat f64 copy of every parameter, in name order.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f64>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let data = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                Ok((k.clone(), data))
            })
            .collect()
    }

    /// Order-sensitive FNV-1a digest of every parameter's bytes (as f32).
    pub fn digest(&self) -> Result<u64> {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, var) in &self.vars {
            let bytes = name
                .bytes()
                .chain(
                    var.as_tensor()
                        .flatten_all()?
                        .to_dtype(DType::F32)?
                        .to_vec1::<f32>()?
                        .into_iter()
                        .flat_map(|x| x.to_le_bytes()),
                )
                .collect::<Vec<u8>>();
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        Ok(h)
    }
}

/// Creates parameters under a path prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = self.path(name.as_ref());
        Builder { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> Device {
        self.store.device.clone()
    }

    pub fn param(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.param_var(name, dims, init)?.as_tensor().clone())
    }

    pub fn param_var(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Var> {
        let path = self.path(name);
        if self.store.vars.contains_key(&path) {
            return Err(Error::Config(format!("parameter `{path}` registered twice")));
        }
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Normal { std } => normal_vec(self.rng, n).into_iter().map(|x| x * std).collect(),
            Init::Uniform { bound } => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
            Init::Halves(a, b) => (0..n).map(|i| if i < n / 2 { a } else { b }).collect(),
        };
        let t = Tensor::from_vec(data, dims, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.vars.insert(path, var.clone());
        Ok(var)
    }
}

/// Per-forward state: dropout randomness in training, nothing in evaluation.
pub struct Ctx<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let mask: Vec<f32> =
            (0..x.elem_count()).map(|_| if rng.random::<f64>() < keep { (1.0 / keep) as f32 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, x.dims(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = b.param("weight", &[in_dim, out_dim], Init::Normal { std })?;
        let bias = if bias { Some(b.param("bias", &[out_dim], Init::Const(0.0))?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn with_init(
        b: &mut Builder,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = b.param("weight", &[in_dim, out_dim], weight_init)?;
        let bias = match bias_init {
            Some(init) => Some(b.param("bias", &[out_dim], init)?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = if x.rank() == 2 { x.matmul(&self.weight)? } else { x.broadcast_matmul(&self.weight)? };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// 1-D convolution over `[batch, length, channels]`, computed as an explicit
/// unfold followed by one matrix product.
///
/// The weight is stored unfolded as `[kernel * in, out]` with the kernel tap as
/// the outer index.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    in_dim: usize,
}

impl Conv1d {
    pub fn new(
        b: &mut Builder,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || dilation == 0 {
            return Err(Error::Config("conv kernel, stride and dilation must be positive".into()));
        }
        let fan_in = (in_dim * kernel) as f64;
        let weight = b.param("weight", &[kernel * in_dim, out_dim], Init::Normal { std: 1.0 / fan_in.sqrt() })?;
        let bias = b.param("bias", &[out_dim], Init::Const(0.0))?;
        let padding = dilation * (kernel - 1) / 2;
        Ok(Self { weight, bias, kernel, stride, dilation, padding, in_dim })
    }

    pub fn output_len(&self, len: usize) -> usize {
        let span = len + 2 * self.padding;
        let reach = self.dilation * (self.kernel - 1) + 1;
        if span < reach {
            0
        } else {
            (span - reach) / self.stride + 1
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, len, ch) = x.dims3()?;
        if ch != self.in_dim {
            return Err(Error::Shape(format!("conv expects {} channels, got {ch}", self.in_dim)));
        }
        let out_len = self.output_len(len);
        if out_len == 0 {
            return Err(Error::Shape(format!("sequence of length {len} too short for conv")));
        }
        let cols = if self.kernel == 1 && self.padding == 0 {
            x.clone()
        } else {
            let xp = x.pad_with_zeros(1, self.padding, self.padding)?;
            let span = (out_len - 1) * self.stride + 1;
            let taps = (0..self.kernel)
                .map(|j| xp.narrow(1, j * self.dilation, span))
                .collect::<candle_core::Result<Vec<_>>>()?;
            let refs: Vec<&Tensor> = taps.iter().collect();
            Tensor::cat(&refs, 2)?
        };
        let cols = if self.stride > 1 {
            let idx: Vec<u32> = (0..out_len).map(|i| (i * self.stride) as u32).collect();
            let idx = Tensor::from_vec(idx, out_len, x.device())?;
            cols.contiguous()?.index_select(&idx, 1)?
        } else {
            cols
        };
        Ok(cols.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(b: &mut Builder, n: usize, dim: usize) -> Result<Self> {
        let table = b.param("table", &[n, dim], Init::Normal { std: 1.0 / (dim as f64).sqrt() })?;
        Ok(Self { table, dim })
    }

    pub fn vocab(&self) -> usize {
        self.table.dims()[0]
    }

    /// `ids` is a `[batch, length]` u32 tensor.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        Ok(self.table.index_select(&flat, 0)?.reshape((b, l, self.dim))?)
    }
}

/// Plain layer normalization with learnable affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[dim], Init::Const(1.0))?,
            beta: b.param("beta", &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (xh, _) = crate::norm::layer_normalize(x)?;
        Ok(xh.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head scaled dot-product self-attention with a key padding mask.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!("hidden {hidden} not divisible by {heads} heads")));
        }
        Ok(Self {
            qkv: Linear::new(&mut b.pp("qkv"), hidden, 3 * hidden, true)?,
            out: Linear::new(&mut b.pp("out"), hidden, hidden, true)?,
            heads,
        })
    }

    /// `key_bias` is `[batch, 1, 1, length]`: zero for valid keys, a large
    /// negative number for padding (see [`attention_bias`]).
    pub fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (b, l, h) = x.dims3()?;
        let dh = h / self.heads;
        let qkv = self.qkv.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(2, i * h, h)?.reshape((b, l, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let weights = softmax_last(&scores.broadcast_add(key_bias)?)?;
        let o = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, l, h))?;
        self.out.forward(&o)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `[batch, max_len]` 0/1 mask.
pub fn sequence_mask(lengths: &[usize], max_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> =
        lengths.iter().flat_map(|&n| (0..max_len).map(move |i| if i < n { 1.0 } else { 0.0 })).collect();
    Ok(Tensor::from_vec(data, (lengths.len(), max_len), device)?.to_dtype(dtype)?)
}

/// Additive attention bias `[batch, 1, 1, len]` from a `[batch, len]` mask.
pub fn attention_bias(mask: &Tensor) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    Ok(mask.affine(1e9, -1e9)?.reshape((b, 1, 1, l))?)
}

/// Sinusoidal table row for a single position.
pub fn sinusoid(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut row = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        row[2 * i] = (position * freq).sin();
        row[2 * i + 1] = (position * freq).cos();
    }
    row
}

/// `[len, dim]` sinusoidal position encoding.
pub fn position_encoding(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..len).flat_map(|p| sinusoid(p as f64, dim)).collect();
    Ok(Tensor::from_vec(data, (len, dim), device)?.to_dtype(dtype)?)
}

/// `[batch, dim]` sinusoidal embedding of integer timesteps.
pub fn timestep_encoding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = ts.iter().flat_map(|&t| sinusoid(t as f64, dim)).collect();
    Ok(Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)?)
}

/// Host values as a tensor of the given dtype.
pub fn tensor_from(data: Vec<f32>, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn to_vec_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[allow(clippy::too_many_arguments)]
    fn direct_conv(
        x: &[f64],
        len: usize,
        cin: usize,
        w: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
        dil: usize,
    ) -> Vec<f64> {
        let pad = dil * (k - 1) / 2;
        let out_len = (len + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let mut out = vec![0.0; out_len * cout];
        for o in 0..out_len {
            for j in 0..k {
                let pos = (o * stride + j * dil) as isize - pad as isize;
                if pos < 0 || pos >= len as isize {
                    continue;
                }
                for c in 0..cin {
                    for co in 0..cout {
                        out[o * cout + co] += x[pos as usize * cin + c] * w[(j * cin + c) * cout + co];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = stream_rng(3, Stream::Init);
        for &(k, stride, dil) in &[(3, 1, 1), (5, 2, 1), (3, 1, 2), (1, 1, 1), (4, 1, 1)] {
            let mut store = ParamStore::new(DType::F64, Device::Cpu);
            let conv = {
                let mut b = store.builder(&mut rng);
                Conv1d::new(&mut b.pp("c"), 2, 3, k, stride, dil).unwrap()
            };
            let xs = normal_vec(&mut rng, 2 * 9 * 2);
            let x = Tensor::from_vec(xs.clone(), (2, 9, 2), &Device::Cpu).unwrap();
            let y = conv.forward(&x).unwrap();
            let w = conv.weight.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for bi in 0..2 {
                let expect = direct_conv(&xs[bi * 18..(bi + 1) * 18], 9, 2, &w, 3, k, stride, dil);
                let got = y.get(bi).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                assert_eq!(got.len(), expect.len(), "k={k} s={stride}");
                for (g, e) in got.iter().zip(&expect) {
                    assert!((g - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-1e3, 0.0, 1e3]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let ls = log_softmax_last(&x).unwrap().exp().unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        assert!(ls.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let x = Tensor::ones((4, 8), DType::F32, &Device::Cpu).unwrap();
        let y = Ctx::eval().dropout(&x, 0.5).unwrap();
        assert_eq!(to_vec_f32(&y).unwrap(), to_vec_f32(&x).unwrap());
        let mut r1 = stream_rng(1, Stream::Training);
        let mut r2 = stream_rng(1, Stream::Training);
        let a = Ctx::train(&mut r1).dropout(&x, 0.5).unwrap();
        let b = Ctx::train(&mut r2).dropout(&x, 0.5).unwrap();
        assert_eq!(to_vec_f32(&a).unwrap(), to_vec_f32(&b).unwrap());
        assert!(to_vec_f32(&a).unwrap().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn attention_ignores_padded_keys() {
        let mut rng = stream_rng(5, Stream::Init);
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let attn = MultiHeadAttention::new(&mut store.builder(&mut rng).pp("a"), 4, 2).unwrap();
        let short = Tensor::from_vec(normal_vec(&mut rng, 3 * 4), (1, 3, 4), &Device::Cpu).unwrap();
        let junk = Tensor::from_vec(normal_vec(&mut rng, 2 * 4), (1, 2, 4), &Device::Cpu).unwrap();
        let padded = Tensor::cat(&[&short, &junk], 1).unwrap();
        let m3 = sequence_mask(&[3], 3, DType::F64, &Device::Cpu).unwrap();
        let m5 = sequence_mask(&[3], 5, DType::F64, &Device::Cpu).unwrap();
        let a = attn.forward(&short, &attention_bias(&m3).unwrap()).unwrap();
        let b = attn.forward(&padded, &attention_bias(&m5).unwrap()).unwrap().narrow(1, 0, 3).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
    }
}
