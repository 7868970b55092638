//! Conditioning signals for the denoiser: the character-level text encoder,
//! scaled dot-product attention, sinusoidal timestep embeddings and the
//! writer-style embedding table.

use glyphdiff_substrate::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::font::{self, Font};
use crate::image::{Canvas, GrayImage};
use crate::nn::{self, Init};
use crate::vocab::TokenSeq;
use crate::{Error, Result};

/// Everything a single sample is conditioned on besides `x_t` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    pub tokens: TokenSeq,
    pub writer: usize,
    pub printed: GrayImage,
}

/// Which printed image the denoiser sees. `TextOnly` replaces the rendering
/// by blank paper, leaving text and style as the only content signals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    #[default]
    Full,
    TextOnly,
}

impl ConditioningMode {
    pub fn printed(self, text: &str, canvas: Canvas, font: &Font) -> Result<GrayImage> {
        let rendered = font::render_printed(text, canvas, font)?;
        Ok(match self {
            ConditioningMode::Full => rendered,
            ConditioningMode::TextOnly => GrayImage::blank(canvas),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Full => "full",
            ConditioningMode::TextOnly => "text-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub d_text: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width as a multiple of `d_text`.
    pub ff_mult: usize,
}

impl TextEncoderConfig {
    pub const DEFAULT: TextEncoderConfig = TextEncoderConfig {
        d_text: 256,
        heads: 4,
        layers: 2,
        ff_mult: 2,
    };

    pub fn validate(&self) -> Result<()> {
        if self.d_text == 0 || self.heads == 0 || !self.d_text.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.text.d_text",
                format!("{} is not divisible by {} heads", self.d_text, self.heads),
            ));
        }
        if !self.d_text.is_multiple_of(2) {
            return Err(Error::config(
                "model.text.d_text",
                "must be even for sinusoidal positions",
            ));
        }
        if self.layers == 0 || self.ff_mult == 0 {
            return Err(Error::config(
                "model.text",
                "layers and ff_mult must be at least 1",
            ));
        }
        Ok(())
    }
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// `softmax(q k^T / sqrt(d_k)) v` for `q[n, d_k]`, `k[m, d_k]`, `v[m, d_v]`.
/// Keys whose `mask` entry is `false` receive zero weight.
pub fn attention<T: Float>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let (qs, ks, vs) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::Contract(format!(
            "attention shapes q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (qs[1] as f64).sqrt()))?;
    let weights = g.softmax_masked(scores, mask)?;
    Ok(g.matmul(weights, v)?)
}

/// Attention with the columns of `q`, `k`, `v` split into `heads` equal slices.
pub fn multi_head_attention<T: Float>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = g.shape(q)[1];
    if heads == 0 || !d.is_multiple_of(heads) || g.shape(v)[1] != d {
        return Err(Error::Contract(format!(
            "{d} columns cannot be split into {heads} heads"
        )));
    }
    if heads == 1 {
        return attention(g, q, k, v, mask);
    }
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow_cols(q, h * dh, dh)?;
        let kh = g.narrow_cols(k, h * dh, dh)?;
        let vh = g.narrow_cols(v, h * dh, dh)?;
        outs.push(attention(g, qh, kh, vh, mask)?);
    }
    Ok(g.concat_cols(&outs)?)
}

fn sinusoid(pos: f64, dim: usize) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    let freq = move |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
    let sin = (0..half).map(move |i| (pos * freq(i)).sin());
    let cos = (0..half).map(move |i| (pos * freq(i)).cos());
    sin.chain(cos)
}

/// Sinusoidal embedding of a timestep: `dim / 2` sines followed by
/// `dim / 2` cosines at frequencies `10000^(-i / (dim / 2))`. Shape `[1, dim]`.
pub fn timestep_embedding<T: Float>(t: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(
            "model.unet.emb_dim",
            format!("{dim} must be even and non-zero"),
        ));
    }
    Ok(Tensor::new(
        vec![1, dim],
        sinusoid(t as f64, dim).map(T::from_f64).collect(),
    )?)
}

/// Position table `[len, dim]` added to character embeddings.
pub fn position_table<T: Float>(len: usize, dim: usize) -> Tensor<T> {
    let data = (0..len)
        .flat_map(|p| sinusoid(p as f64, dim))
        .map(T::from_f64)
        .collect();
    Tensor::new(vec![len, dim], data).expect("non-empty position table")
}

pub fn init_text_encoder<T: Float>(
    init: &mut Init<'_, T>,
    cfg: &TextEncoderConfig,
    table_rows: usize,
) -> Result<()> {
    let d = cfg.d_text;
    init.table("text.embed", table_rows, d, 1.0)?;
    for l in 0..cfg.layers {
        let p = format!("text.layer{l}");
        init.norm(&format!("{p}.ln1"), d)?;
        for proj in ["q", "k", "v", "o"] {
            init.linear(&format!("{p}.attn.{proj}"), d, d)?;
        }
        init.norm(&format!("{p}.ln2"), d)?;
        init.linear(&format!("{p}.ff1"), d, d * cfg.ff_mult)?;
        init.linear(&format!("{p}.ff2"), d * cfg.ff_mult, d)?;
    }
    init.norm("text.ln_out", d)
}

/// Encode tokens into `[max_len, d_text]` vectors with pre-norm transformer
/// layers. Pad positions are masked out as attention keys.
pub fn encode_text<T: Float>(
    g: &mut Graph<'_, T>,
    tokens: &TokenSeq,
    cfg: &TextEncoderConfig,
) -> Result<Var> {
    let len = tokens.ids().len();
    let mask = tokens.key_mask();
    let mask = (!tokens.is_empty()).then_some(&mask[..]);
    let table = g.param("text.embed")?;
    let emb = g.embedding(table, tokens.ids())?;
    let pos = g.constant(position_table(len, cfg.d_text));
    let mut x = g.add(emb, pos)?;
    for l in 0..cfg.layers {
        let p = format!("text.layer{l}");
        let h = nn::layer_norm(g, x, &format!("{p}.ln1"))?;
        let q = nn::linear(g, h, &format!("{p}.attn.q"))?;
        let k = nn::linear(g, h, &format!("{p}.attn.k"))?;
        let v = nn::linear(g, h, &format!("{p}.attn.v"))?;
        let a = multi_head_attention(g, q, k, v, cfg.heads, mask)?;
        let a = nn::linear(g, a, &format!("{p}.attn.o"))?;
        x = g.add(x, a)?;
        let h = nn::layer_norm(g, x, &format!("{p}.ln2"))?;
        let h = nn::linear(g, h, &format!("{p}.ff1"))?;
        let h = g.silu(h)?;
        let h = nn::linear(g, h, &format!("{p}.ff2"))?;
        x = g.add(x, h)?;
    }
    nn::layer_norm(g, x, "text.ln_out")
}

pub fn init_embeddings<T: Float>(
    init: &mut Init<'_, T>,
    emb_dim: usize,
    n_styles: usize,
) -> Result<()> {
    init.linear("time.fc1", emb_dim, emb_dim)?;
    init.linear("time.fc2", emb_dim, emb_dim)?;
    init.table("style.embed", n_styles, emb_dim, 1.0)
}

/// Row `writer` of the style table, `[1, emb_dim]`.
pub fn style_embedding<T: Float>(g: &mut Graph<'_, T>, writer: usize) -> Result<Var> {
    let table = g.param("style.embed")?;
    let n_styles = g.shape(table)[0];
    if writer >= n_styles {
        return Err(Error::WriterOutOfRange {
            id: writer,
            n_styles,
        });
    }
    Ok(g.embedding(table, &[writer])?)
}

/// Style conditioning enters by elementwise addition.
pub fn combine<T: Float>(g: &mut Graph<'_, T>, t_emb: Var, s_emb: Var) -> Result<Var> {
    Ok(g.add(t_emb, s_emb)?)
}

/// Timestep embedding passed through the two-layer MLP, plus the style row.
/// `writer = None` stands for an all-zero style vector.
pub fn conditioning_vector<T: Float>(
    g: &mut Graph<'_, T>,
    t: usize,
    writer: Option<usize>,
    emb_dim: usize,
) -> Result<Var> {
    let te = g.constant(timestep_embedding(t, emb_dim)?);
    let h = nn::linear(g, te, "time.fc1")?;
    let h = g.silu(h)?;
    let h = nn::linear(g, h, "time.fc2")?;
    match writer {
        Some(w) => {
            let s = style_embedding(g, w)?;
            combine(g, h, s)
        }
        None => Ok(h),
    }
}
