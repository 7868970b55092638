//! Parameter initialisation and the small layer vocabulary shared by the
//! text encoder, the U-Net and the style classifier.
//!
//! Naming convention inside a [`ParamSet`]: a linear layer `p` owns `p.w`
//! (`[in, out]`) and `p.b` (`[out]`); a convolution owns `p.w`
//! (`[out, in, 3, 3]`) and `p.b`; a normalisation owns `p.gamma`, `p.beta`.

use glyphdiff_substrate::{Float, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Result;

pub const NORM_EPS: f64 = 1e-5;

/// Writes freshly initialised parameters into a [`ParamSet`].
pub struct Init<'a, T: Float> {
    pub params: &'a mut ParamSet<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Float> Init<'_, T> {
    fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(std * self.rng.sample::<f64, _>(StandardNormal)))
            .collect();
        self.params.insert(name, Tensor::new(shape, data)?)?;
        Ok(())
    }

    fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> Result<()> {
        self.params
            .insert(name, Tensor::full(shape, T::from_f64(v)))?;
        Ok(())
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(
            &format!("{name}.w"),
            vec![fan_in, fan_out],
            (1.0 / fan_in as f64).sqrt(),
        )?;
        self.constant(&format!("{name}.b"), vec![fan_out], 0.0)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Result<()> {
        let fan_in = (cin * 9) as f64;
        self.normal(
            &format!("{name}.w"),
            vec![cout, cin, 3, 3],
            (2.0 / fan_in).sqrt(),
        )?;
        self.constant(&format!("{name}.b"), vec![cout], 0.0)
    }

    pub fn norm(&mut self, name: &str, channels: usize) -> Result<()> {
        self.constant(&format!("{name}.gamma"), vec![channels], 1.0)?;
        self.constant(&format!("{name}.beta"), vec![channels], 0.0)
    }

    pub fn table(&mut self, name: &str, rows: usize, dim: usize, std: f64) -> Result<()> {
        self.normal(name, vec![rows, dim], std)
    }
}

/// `x[n, in] @ w + b`.
pub fn linear<T: Float>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_rows(y, b)?)
}

/// 3x3 convolution with bias on `x[c, h, w]`.
pub fn conv<T: Float>(g: &mut Graph<'_, T>, x: Var, name: &str, stride: usize) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.conv3x3(x, w, stride)?;
    Ok(g.add_channels(y, b)?)
}

/// Number of channel groups: groups hold `min(8, channels)` channels each.
pub fn groups_for(channels: usize) -> usize {
    channels / channels.min(8)
}

/// Whether [`groups_for`] partitions `channels` exactly.
pub fn groupable(channels: usize) -> bool {
    channels > 0 && channels.is_multiple_of(channels.min(8))
}

pub fn group_norm<T: Float>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    let c = g.shape(x)[0];
    let gamma = g.param(&format!("{name}.gamma"))?;
    let beta = g.param(&format!("{name}.beta"))?;
    Ok(g.group_norm(x, gamma, beta, groups_for(c), NORM_EPS)?)
}

pub fn layer_norm<T: Float>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    let gamma = g.param(&format!("{name}.gamma"))?;
    let beta = g.param(&format!("{name}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta, NORM_EPS)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sizes() {
        assert_eq!(groups_for(4), 1);
        assert_eq!(groups_for(8), 1);
        assert_eq!(groups_for(32), 4);
        assert!(groupable(24));
        assert!(!groupable(12));
    }
}
