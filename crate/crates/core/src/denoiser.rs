//! The noise-prediction network: a five-level U-Net over the noisy image
//! concatenated with the printed rendering, with the timestep+style vector
//! injected into every residual block and cross-attention to the text
//! encoding at the attention levels.
//!
//! Encoder level `i` (1-based) is a residual block from the previous width
//! to `base * mults[i-1]`, followed by cross-attention when `i` is an
//! attention level, followed by a stride-2 convolution when `i` is 1, 2 or
//! 5. Its pre-downsampling output is kept as a skip. The decoder visits the
//! levels in reverse: upsample (nearest + conv) where the encoder
//! downsampled, concatenate the skip, residual block, optional attention.

use glyphdiff_substrate::{Float, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{self, TextEncoderConfig};
use crate::image::{Canvas, GrayImage};
use crate::nn::{self, Init};
use crate::vocab::{TokenSeq, Vocabulary};
use crate::{Error, Result};

/// Encoder levels followed by a stride-2 downsample.
pub const DOWN_LEVELS: [usize; 3] = [1, 2, 5];
pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_mults: [usize; LEVELS],
    pub heads: usize,
    /// 1-based encoder levels carrying cross-attention (mirrored in the decoder).
    pub attn_levels: Vec<usize>,
    pub emb_dim: usize,
}

impl UNetConfig {
    pub fn with_base(base_channels: usize) -> Self {
        Self {
            in_channels: 2,
            out_channels: 1,
            base_channels,
            channel_mults: [1, 2, 2, 4, 4],
            heads: 4,
            attn_levels: vec![3, 4],
            emb_dim: 256,
        }
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        self.channel_mults.map(|m| m * self.base_channels)
    }

    pub fn is_down(level: usize) -> bool {
        DOWN_LEVELS.contains(&level)
    }

    pub fn has_attn(&self, level: usize) -> bool {
        self.attn_levels.contains(&level)
    }
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::with_base(32)
    }
}

/// Full architecture description: canvas, vocabulary, style count, U-Net
/// and text encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub canvas: Canvas,
    pub vocab: Vocabulary,
    pub n_styles: usize,
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
}

impl ModelConfig {
    /// 256x64 canvas, 64 base channels, 256-dim text.
    pub fn full(n_styles: usize) -> Result<Self> {
        Ok(Self {
            canvas: Canvas::FULL,
            vocab: Vocabulary::standard(32)?,
            n_styles,
            unet: UNetConfig::with_base(64),
            text: TextEncoderConfig::DEFAULT,
        })
    }

    /// 128x32 canvas, 32 base channels, 256-dim text.
    pub fn desk(n_styles: usize) -> Result<Self> {
        Ok(Self {
            canvas: Canvas::DESK,
            vocab: Vocabulary::standard(32)?,
            n_styles,
            unet: UNetConfig::with_base(32),
            text: TextEncoderConfig::DEFAULT,
        })
    }

    /// 72x24 canvas for words of up to eight characters, 8 base channels,
    /// 64-dim text. Small enough to train in minutes on one CPU core.
    pub fn compact(n_styles: usize) -> Result<Self> {
        Ok(Self {
            canvas: Canvas::COMPACT,
            vocab: Vocabulary::standard(8)?,
            n_styles,
            unet: UNetConfig {
                base_channels: 8,
                ..UNetConfig::with_base(8)
            },
            text: TextEncoderConfig {
                d_text: 64,
                heads: 4,
                layers: 2,
                ff_mult: 2,
            },
        })
    }

    /// Smallest legal network, for gradient checks.
    pub fn tiny(n_styles: usize) -> Result<Self> {
        Ok(Self {
            canvas: Canvas {
                width: 16,
                height: 8,
            },
            vocab: Vocabulary::new("abc".chars().collect(), 3)?,
            n_styles,
            unet: UNetConfig {
                base_channels: 4,
                channel_mults: [1, 1, 1, 1, 1],
                heads: 2,
                emb_dim: 8,
                ..UNetConfig::with_base(4)
            },
            text: TextEncoderConfig {
                d_text: 4,
                heads: 2,
                layers: 2,
                ff_mult: 1,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let u = &self.unet;
        if u.in_channels != 2 {
            return Err(Error::config(
                "model.unet.in_channels",
                "must be 2 (noisy image + printed image)",
            ));
        }
        if u.out_channels != 1 {
            return Err(Error::config("model.unet.out_channels", "must be 1"));
        }
        if u.base_channels == 0 || u.channel_mults.contains(&0) {
            return Err(Error::config(
                "model.unet.channel_mults",
                "widths must be positive",
            ));
        }
        if u.emb_dim == 0 || !u.emb_dim.is_multiple_of(2) {
            return Err(Error::config(
                "model.unet.emb_dim",
                "must be even and non-zero",
            ));
        }
        if let Some(&bad) = u.attn_levels.iter().find(|l| !(1..=LEVELS).contains(*l)) {
            return Err(Error::config(
                "model.unet.attn_levels",
                format!("level {bad} outside 1..=5"),
            ));
        }
        let w = u.widths();
        for (i, &c) in w.iter().enumerate() {
            if u.has_attn(i + 1) && c % u.heads != 0 {
                return Err(Error::config(
                    "model.unet.heads",
                    format!(
                        "level {} width {c} is not divisible by {} heads",
                        i + 1,
                        u.heads
                    ),
                ));
            }
        }
        let mut widths = vec![u.base_channels];
        widths.extend(w);
        for l in (1..=LEVELS).rev() {
            let prev = if l == LEVELS { w[LEVELS - 1] } else { w[l] };
            widths.push(prev + w[l - 1]);
        }
        if let Some(bad) = widths.iter().find(|c| !nn::groupable(**c)) {
            return Err(Error::config(
                "model.unet.base_channels",
                format!("width {bad} cannot be split into groups of min(8, channels)"),
            ));
        }
        let c = self.canvas;
        if c.width == 0
            || c.height == 0
            || !c.width.is_multiple_of(8)
            || !c.height.is_multiple_of(8)
        {
            return Err(Error::config(
                "model.canvas",
                format!("{}x{} must be positive multiples of 8", c.width, c.height),
            ));
        }
        if self.n_styles == 0 {
            return Err(Error::config("model.n_styles", "must be at least 1"));
        }
        self.text.validate()
    }
}

/// The full conditional noise predictor (text encoder, embeddings, U-Net).
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    config: ModelConfig,
}

impl Denoiser {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init<T: Float>(&self, seed: u64) -> Result<ParamSet<T>> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            params: &mut params,
            rng: &mut rng,
        };
        let cfg = &self.config;
        let u = &cfg.unet;
        conditioning::init_text_encoder(&mut init, &cfg.text, cfg.vocab.table_rows())?;
        conditioning::init_embeddings(&mut init, u.emb_dim, cfg.n_styles)?;
        let w = u.widths();
        init.conv("unet.stem", u.in_channels, u.base_channels)?;
        let mut cur = u.base_channels;
        for l in 1..=LEVELS {
            let c = w[l - 1];
            init_res(&mut init, &format!("unet.enc{l}.res"), cur, c, u.emb_dim)?;
            if u.has_attn(l) {
                init_attn(&mut init, &format!("unet.enc{l}.attn"), c, cfg.text.d_text)?;
            }
            if UNetConfig::is_down(l) {
                init.conv(&format!("unet.enc{l}.down"), c, c)?;
            }
            cur = c;
        }
        for l in (1..=LEVELS).rev() {
            let c = w[l - 1];
            if UNetConfig::is_down(l) {
                init.conv(&format!("unet.dec{l}.up"), cur, cur)?;
            }
            init_res(
                &mut init,
                &format!("unet.dec{l}.res"),
                cur + c,
                c,
                u.emb_dim,
            )?;
            if u.has_attn(l) {
                init_attn(&mut init, &format!("unet.dec{l}.attn"), c, cfg.text.d_text)?;
            }
            cur = c;
        }
        init.norm("unet.out.norm", cur)?;
        init.conv("unet.out.conv", cur, u.out_channels)?;
        Ok(params)
    }

    /// Text encoding `[max_len, d_text]` for the graph's parameters.
    pub fn encode_text<T: Float>(&self, g: &mut Graph<'_, T>, tokens: &TokenSeq) -> Result<Var> {
        conditioning::encode_text(g, tokens, &self.config.text)
    }

    /// Predicted noise `[1, H, W]` for `x_t[1, H, W]` and printed image
    /// `c_p[1, H, W]`. `text` is the encoder output and `key_mask` marks its
    /// non-pad rows; `writer = None` zeroes the style vector. If `trace` is given, the output of each encoder level
    /// (before downsampling) is appended to it.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x_t: Var,
        c_p: Var,
        t: usize,
        writer: Option<usize>,
        text: Var,
        key_mask: &[bool],
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let u = &cfg.unet;
        let want = [1, cfg.canvas.height, cfg.canvas.width];
        if g.shape(x_t) != want || g.shape(c_p) != want {
            return Err(Error::Contract(format!(
                "x_t {:?} and printed image {:?} must both be {want:?}",
                g.shape(x_t),
                g.shape(c_p)
            )));
        }
        let emb = conditioning::conditioning_vector(g, t, writer, u.emb_dim)?;
        let emb = g.silu(emb)?;
        let ctx = Ctx {
            emb,
            text,
            key_mask,
            heads: u.heads,
        };

        let input = g.concat0(&[x_t, c_p])?;
        let mut h = nn::conv(g, input, "unet.stem", 1)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 1..=LEVELS {
            h = res_block(g, h, &format!("unet.enc{l}.res"), &ctx)?;
            if u.has_attn(l) {
                h = cross_attn(g, h, &format!("unet.enc{l}.attn"), &ctx)?;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(h);
            }
            skips.push(h);
            if UNetConfig::is_down(l) {
                h = nn::conv(g, h, &format!("unet.enc{l}.down"), 2)?;
            }
        }
        for l in (1..=LEVELS).rev() {
            if UNetConfig::is_down(l) {
                h = g.upsample2x(h)?;
                h = nn::conv(g, h, &format!("unet.dec{l}.up"), 1)?;
            }
            let skip = skips.pop().expect("one skip per level");
            h = g.concat0(&[h, skip])?;
            h = res_block(g, h, &format!("unet.dec{l}.res"), &ctx)?;
            if u.has_attn(l) {
                h = cross_attn(g, h, &format!("unet.dec{l}.attn"), &ctx)?;
            }
        }
        let h = nn::group_norm(g, h, "unet.out.norm")?;
        let h = g.silu(h)?;
        nn::conv(g, h, "unet.out.conv", 1)
    }

    /// Convenience wrapper: encode `tokens`, run [`Denoiser::forward`] and
    /// return the prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_noise<T: Float>(
        &self,
        params: &ParamSet<T>,
        x_t: &Tensor<T>,
        printed: &GrayImage,
        t: usize,
        writer: usize,
        tokens: &TokenSeq,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(params);
        let x = g.constant(x_t.clone());
        let c = g.constant(printed.to_tensor());
        let text = self.encode_text(&mut g, tokens)?;
        let out = self.forward(
            &mut g,
            x,
            c,
            t,
            Some(writer),
            text,
            &tokens.key_mask(),
            None,
        )?;
        Ok(g.value(out).clone())
    }
}

/// Total number of scalar parameters.
pub fn count_parameters<T: Float>(params: &ParamSet<T>) -> usize {
    params.numel()
}

struct Ctx<'m> {
    emb: Var,
    text: Var,
    key_mask: &'m [bool],
    heads: usize,
}

fn init_res<T: Float>(
    init: &mut Init<'_, T>,
    name: &str,
    cin: usize,
    cout: usize,
    emb_dim: usize,
) -> Result<()> {
    init.norm(&format!("{name}.norm1"), cin)?;
    init.conv(&format!("{name}.conv1"), cin, cout)?;
    init.linear(&format!("{name}.emb"), emb_dim, cout)?;
    init.norm(&format!("{name}.norm2"), cout)?;
    init.conv(&format!("{name}.conv2"), cout, cout)?;
    if cin != cout {
        init.linear(&format!("{name}.skip"), cin, cout)?;
    }
    Ok(())
}

fn res_block<T: Float>(g: &mut Graph<'_, T>, x: Var, name: &str, ctx: &Ctx<'_>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let h = nn::group_norm(g, x, &format!("{name}.norm1"))?;
    let h = g.silu(h)?;
    let h = nn::conv(g, h, &format!("{name}.conv1"), 1)?;
    let e = nn::linear(g, ctx.emb, &format!("{name}.emb"))?;
    let h = g.add_channels(h, e)?;
    let h = nn::group_norm(g, h, &format!("{name}.norm2"))?;
    let h = g.silu(h)?;
    let h = nn::conv(g, h, &format!("{name}.conv2"), 1)?;
    let cout = g.shape(h)[0];
    let skip = if s[0] == cout {
        x
    } else {
        // 1x1 projection: pixels as rows, channels as columns.
        let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
        let rows = g.transpose(flat)?;
        let p = nn::linear(g, rows, &format!("{name}.skip"))?;
        let p = g.transpose(p)?;
        g.reshape(p, &[cout, s[1], s[2]])?
    };
    Ok(g.add(h, skip)?)
}

fn init_attn<T: Float>(init: &mut Init<'_, T>, name: &str, c: usize, d_text: usize) -> Result<()> {
    init.norm(&format!("{name}.norm"), c)?;
    init.linear(&format!("{name}.q"), c, c)?;
    init.linear(&format!("{name}.k"), d_text, c)?;
    init.linear(&format!("{name}.v"), d_text, c)?;
    init.linear(&format!("{name}.o"), c, c)
}

fn cross_attn<T: Float>(g: &mut Graph<'_, T>, x: Var, name: &str, ctx: &Ctx<'_>) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (c, hw) = (s[0], s[1] * s[2]);
    let h = nn::group_norm(g, x, &format!("{name}.norm"))?;
    let h = g.reshape(h, &[c, hw])?;
    let tokens = g.transpose(h)?;
    let q = nn::linear(g, tokens, &format!("{name}.q"))?;
    let k = nn::linear(g, ctx.text, &format!("{name}.k"))?;
    let v = nn::linear(g, ctx.text, &format!("{name}.v"))?;
    let a = conditioning::multi_head_attention(g, q, k, v, ctx.heads, Some(ctx.key_mask))?;
    let a = nn::linear(g, a, &format!("{name}.o"))?;
    let a = g.transpose(a)?;
    let a = g.reshape(a, &s)?;
    Ok(g.add(x, a)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::full(16).unwrap(),
            ModelConfig::desk(16).unwrap(),
            ModelConfig::compact(16).unwrap(),
            ModelConfig::tiny(2).unwrap(),
        ] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn bad_configs_name_fields() {
        let mut cfg = ModelConfig::compact(4).unwrap();
        cfg.unet.in_channels = 1;
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("in_channels"));
        let mut cfg = ModelConfig::compact(4).unwrap();
        cfg.canvas.width = 70;
        assert!(cfg.validate().unwrap_err().to_string().contains("canvas"));
        let mut cfg = ModelConfig::compact(4).unwrap();
        cfg.unet.attn_levels = vec![6];
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("attn_levels"));
    }
}
