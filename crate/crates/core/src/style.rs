//! Prompt-to-style-embedding encoder.
//!
//! A natural-language style prompt is tokenized with a leading `[CLS]` token,
//! run through a small transformer text encoder, and the hidden state at the
//! `[CLS]` position is projected to a 128-dim style embedding. One linear
//! classification head per style factor reads the embedding; their summed
//! cross-entropy is the multi-task training signal.
//!
//! Any encoder that can produce a CLS hidden vector can replace the built-in
//! transformer through [`ClsEncoder`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::nn::{
    attention_bias, log_softmax_last, position_encoding, sequence_mask, Builder, Embedding, LayerNorm, Linear,
    MultiHeadAttention,
};

/// Dimension of the style embedding consumed by every conditioning site.
pub const STYLE_DIM: usize = 128;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleFactor {
    pub name: String,
    pub num_classes: usize,
}

/// Ordered list of style factors and their class counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleFactorConfig {
    pub factors: Vec<StyleFactor>,
}

impl Default for StyleFactorConfig {
    fn default() -> Self {
        Self::new(&[("gender", 2), ("pitch", 3), ("speed", 3), ("volume", 3), ("emotion", 5)])
            .expect("default factors are valid")
    }
}

impl StyleFactorConfig {
    pub fn new(factors: &[(&str, usize)]) -> Result<Self> {
        let cfg = Self {
            factors: factors.iter().map(|(n, k)| StyleFactor { name: n.to_string(), num_classes: *k }).collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.factors {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate style factor `{}`", f.name)));
            }
            if f.num_classes < 2 {
                return Err(Error::Config(format!("factor `{}` needs at least 2 classes", f.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StyleFactor> {
        self.factors.iter().find(|f| f.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factors.iter().map(|f| f.name.as_str())
    }
}

/// Prompt text with its per-factor class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StylePrompt {
    pub text: String,
    pub labels: BTreeMap<String, usize>,
}

impl StylePrompt {
    pub fn validate(&self, cfg: &StyleFactorConfig) -> Result<()> {
        for (name, &label) in &self.labels {
            let f = cfg.get(name).ok_or_else(|| Error::Input(format!("label for unknown factor `{name}`")))?;
            if label >= f.num_classes {
                return Err(Error::Input(format!(
                    "label {label} out of range for `{name}` ({} classes)",
                    f.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Lower-cased words with surrounding punctuation stripped.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Closed word vocabulary with reserved PAD / CLS / UNK ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    ids: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: std::collections::BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let ids = words.into_iter().enumerate().map(|(i, w)| (w, (i + RESERVED.len()) as u32)).collect();
        Self { ids }
    }

    /// Number of ids including the reserved ones.
    pub fn len(&self) -> usize {
        self.ids.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Text form: one `word<TAB>id` line per word, sorted by word.
    pub fn to_text(&self) -> String {
        self.ids.iter().map(|(w, i)| format!("{w}\t{i}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (w, i) = line
                .split_once('\t')
                .ok_or_else(|| Error::Corrupt { item: "vocab".into(), reason: format!("line {}", n + 1) })?;
            let id: u32 = i
                .trim()
                .parse()
                .map_err(|_| Error::Corrupt { item: "vocab".into(), reason: format!("bad id on line {}", n + 1) })?;
            if (id as usize) < RESERVED.len() {
                return Err(Error::Corrupt { item: "vocab".into(), reason: format!("reserved id {id} reused") });
            }
            ids.insert(w.to_string(), id);
        }
        Ok(Self { ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// `[CLS]` followed by one id per word; unknown words map to `[UNK]`.
pub fn tokenize_prompt(text: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    let words = split_words(text);
    if words.is_empty() {
        return Err(Error::Input("empty style prompt".into()));
    }
    Ok(std::iter::once(CLS_ID).chain(words.iter().map(|w| vocab.id(w))).collect())
}

/// External text encoder producing one CLS hidden vector per prompt.
pub trait ClsEncoder: Send + Sync {
    fn hidden_size(&self) -> usize;
    /// `[batch, hidden_size]` hidden states at the CLS position.
    fn cls_hidden(&self, texts: &[&str]) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleEncoderConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub factors: StyleFactorConfig,
}

impl Default for StyleEncoderConfig {
    fn default() -> Self {
        Self { hidden: 64, heads: 2, layers: 2, ffn: 128, max_len: 48, factors: StyleFactorConfig::default() }
    }
}

#[derive(Debug, Clone)]
struct TextLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

/// Small post-norm transformer over prompt tokens.
#[derive(Debug, Clone)]
pub struct TextTransformer {
    embed: Embedding,
    layers: Vec<TextLayer>,
    hidden: usize,
    max_len: usize,
}

impl TextTransformer {
    pub fn new(b: &mut Builder, vocab_size: usize, cfg: &StyleEncoderConfig) -> Result<Self> {
        let embed = Embedding::new(&mut b.pp("embed"), vocab_size, cfg.hidden)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                let mut b = b.pp(format!("layer{i}"));
                Ok(TextLayer {
                    attn: MultiHeadAttention::new(&mut b.pp("attn"), cfg.hidden, cfg.heads)?,
                    ln1: LayerNorm::new(&mut b.pp("ln1"), cfg.hidden)?,
                    ff1: Linear::new(&mut b.pp("ff1"), cfg.hidden, cfg.ffn, true)?,
                    ff2: Linear::new(&mut b.pp("ff2"), cfg.ffn, cfg.hidden, true)?,
                    ln2: LayerNorm::new(&mut b.pp("ln2"), cfg.hidden)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { embed, layers, hidden: cfg.hidden, max_len: cfg.max_len })
    }

    /// Hidden states `[batch, max_len_in_batch, hidden]` for padded token rows.
    pub fn forward(&self, tokens: &[Vec<u32>], dtype: DType, device: &Device) -> Result<Tensor> {
        let lens: Vec<usize> = tokens.iter().map(Vec::len).collect();
        let max = lens.iter().copied().max().unwrap_or(0);
        if max == 0 || lens.contains(&0) {
            return Err(Error::Input("token sequence must contain at least CLS".into()));
        }
        if max > self.max_len {
            return Err(Error::Input(format!("prompt of {max} tokens exceeds max length {}", self.max_len)));
        }
        let ids: Vec<u32> =
            tokens.iter().flat_map(|t| t.iter().copied().chain(std::iter::repeat(PAD_ID)).take(max)).collect();
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= self.embed.vocab()) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        let b = tokens.len();
        let ids = Tensor::from_vec(ids, (b, max), device)?;
        let mask = sequence_mask(&lens, max, dtype, device)?;
        let bias = attention_bias(&mask)?;
        let mask3 = mask.unsqueeze(2)?;
        let pos = position_encoding(max, self.hidden, dtype, device)?;
        let mut x = self.embed.forward(&ids)?.broadcast_add(&pos)?.broadcast_mul(&mask3)?;
        for l in &self.layers {
            let a = l.attn.forward(&x, &bias)?;
            x = l.ln1.forward(&(x + a)?)?.broadcast_mul(&mask3)?;
            let f = l.ff2.forward(&l.ff1.forward(&x)?.relu()?)?;
            x = l.ln2.forward(&(x + f)?)?.broadcast_mul(&mask3)?;
        }
        Ok(x)
    }
}

enum Backbone {
    Builtin { net: TextTransformer, vocab: Vocab },
    External(Box<dyn ClsEncoder>),
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::Builtin { vocab, .. } => write!(f, "Builtin(vocab={})", vocab.len()),
            Backbone::External(e) => write!(f, "External(hidden={})", e.hidden_size()),
        }
    }
}

/// One linear head per configured factor, reading the style embedding.
#[derive(Debug, Clone)]
pub struct StyleHeads {
    heads: Vec<(String, Linear)>,
}

impl StyleHeads {
    pub fn new(b: &mut Builder, cfg: &StyleFactorConfig) -> Result<Self> {
        cfg.validate()?;
        let heads = cfg
            .factors
            .iter()
            .map(|f| Ok((f.name.clone(), Linear::new(&mut b.pp(&f.name), STYLE_DIM, f.num_classes, true)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.heads.iter().map(|(n, _)| n.as_str())
    }
}

/// Per-factor logits `[batch, num_classes]`.
pub fn classify_style(s: &Tensor, heads: &StyleHeads, cfg: &StyleFactorConfig) -> Result<BTreeMap<String, Tensor>> {
    if heads.heads.len() != cfg.factors.len() {
        return Err(Error::Config(format!("{} heads for {} configured factors", heads.heads.len(), cfg.factors.len())));
    }
    let mut out = BTreeMap::new();
    for f in &cfg.factors {
        let (_, head) = heads
            .heads
            .iter()
            .find(|(n, _)| *n == f.name)
            .ok_or_else(|| Error::Config(format!("no head for factor `{}`", f.name)))?;
        let logits = head.forward(s)?;
        if logits.dims()[logits.rank() - 1] != f.num_classes {
            return Err(Error::Config(format!("head `{}` width does not match {} classes", f.name, f.num_classes)));
        }
        out.insert(f.name.clone(), logits);
    }
    Ok(out)
}

/// Summed cross-entropy over factors. `labels[factor][i]` is the class of
/// batch item `i`, or `None` when that item carries no label for the factor;
/// each factor's term is averaged over its labeled items.
pub fn style_classification_loss(
    logits: &BTreeMap<String, Tensor>,
    labels: &BTreeMap<String, Vec<Option<usize>>>,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (name, items) in labels {
        let n_labeled = items.iter().filter(|l| l.is_some()).count();
        if n_labeled == 0 {
            continue;
        }
        let lg = logits.get(name).ok_or_else(|| Error::Input(format!("no logits for labeled factor `{name}`")))?;
        let (b, k) = lg.dims2()?;
        if b != items.len() {
            return Err(Error::Shape(format!("{} labels for batch of {b} on `{name}`", items.len())));
        }
        let mut onehot = vec![0f32; b * k];
        for (i, l) in items.iter().enumerate() {
            if let Some(c) = l {
                if *c >= k {
                    return Err(Error::Input(format!("label {c} out of range for `{name}`")));
                }
                onehot[i * k + c] = 1.0;
            }
        }
        let onehot = Tensor::from_vec(onehot, (b, k), lg.device())?.to_dtype(lg.dtype())?;
        let nll = (log_softmax_last(lg)?.mul(&onehot)?.sum_all()? * (-1.0 / n_labeled as f64))?;
        total = Some(match total {
            Some(t) => (t + nll)?,
            None => nll,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::zeros((), logits.values().next().map_or(DType::F32, |t| t.dtype()), &Device::Cpu)?),
    }
}

/// Prompt encoder with classification heads.
#[derive(Debug)]
pub struct StyleEncoder {
    backbone: Backbone,
    proj: Linear,
    heads: StyleHeads,
    cfg: StyleEncoderConfig,
    dtype: DType,
    device: Device,
}

impl StyleEncoder {
    pub fn new(b: &mut Builder, vocab: Vocab, cfg: &StyleEncoderConfig) -> Result<Self> {
        let net = TextTransformer::new(&mut b.pp("text"), vocab.len(), cfg)?;
        let proj = Linear::new(&mut b.pp("proj"), cfg.hidden, STYLE_DIM, true)?;
        let heads = StyleHeads::new(&mut b.pp("heads"), &cfg.factors)?;
        Ok(Self {
            backbone: Backbone::Builtin { net, vocab },
            proj,
            heads,
            cfg: cfg.clone(),
            dtype: b.dtype(),
            device: b.device(),
        })
    }

    /// Style encoder around an external CLS encoder; only the projection and
    /// heads are created as parameters here.
    pub fn with_external(b: &mut Builder, encoder: Box<dyn ClsEncoder>, cfg: &StyleEncoderConfig) -> Result<Self> {
        let proj = Linear::new(&mut b.pp("proj"), encoder.hidden_size(), STYLE_DIM, true)?;
        let heads = StyleHeads::new(&mut b.pp("heads"), &cfg.factors)?;
        Ok(Self {
            backbone: Backbone::External(encoder),
            proj,
            heads,
            cfg: cfg.clone(),
            dtype: b.dtype(),
            device: b.device(),
        })
    }

    pub fn config(&self) -> &StyleEncoderConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        match &self.backbone {
            Backbone::Builtin { vocab, .. } => Some(vocab),
            Backbone::External(_) => None,
        }
    }

    pub fn heads(&self) -> &StyleHeads {
        &self.heads
    }

    /// Style embeddings `[batch, 128]` for already tokenized prompts.
    pub fn encode_style(&self, tokens: &[Vec<u32>]) -> Result<Tensor> {
        match &self.backbone {
            Backbone::Builtin { net, .. } => {
                let h = net.forward(tokens, self.dtype, &self.device)?;
                let cls = h.narrow(1, 0, 1)?.squeeze(1)?;
                self.proj.forward(&cls)
            }
            Backbone::External(_) => Err(Error::Config("external encoders take raw text; use encode_prompts".into())),
        }
    }

    /// Style embeddings `[batch, 128]` for raw prompt texts.
    pub fn encode_prompts(&self, texts: &[&str]) -> Result<Tensor> {
        match &self.backbone {
            Backbone::Builtin { vocab, .. } => {
                let tokens = texts.iter().map(|t| tokenize_prompt(t, vocab)).collect::<Result<Vec<_>>>()?;
                self.encode_style(&tokens)
            }
            Backbone::External(enc) => {
                if texts.iter().any(|t| t.trim().is_empty()) {
                    return Err(Error::Input("empty style prompt".into()));
                }
                let h = enc.cls_hidden(texts)?.to_dtype(self.dtype)?;
                self.proj.forward(&h)
            }
        }
    }

    pub fn classify(&self, s: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        classify_style(s, &self.heads, &self.cfg.factors)
    }
}
