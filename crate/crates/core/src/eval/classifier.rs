//! Small convolutional writer-style classifier.

use glyphdiff_substrate::{Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Canvas, GrayImage};
use crate::nn::{self, Init};
use crate::par::{self, Execution};
use crate::trainer::{Adam, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Channels of the three conv blocks; each block is a stride-1 conv
    /// followed by a stride-2 conv.
    pub widths: [usize; 3],
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            widths: [16, 24, 48],
            steps: 1500,
            batch_size: 32,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StyleClassifier {
    pub config: ClassifierConfig,
    pub canvas: Canvas,
    pub n_classes: usize,
    pub params: ParamSet<f32>,
}

fn init_params(cfg: &ClassifierConfig, n_classes: usize) -> Result<ParamSet<f32>> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = Init {
        params: &mut params,
        rng: &mut rng,
    };
    let mut cin = 1;
    for (b, &w) in cfg.widths.iter().enumerate() {
        init.conv(&format!("cls.block{b}.conv1"), cin, w)?;
        init.conv(&format!("cls.block{b}.conv2"), w, w)?;
        cin = w;
    }
    init.linear("cls.head", cin, n_classes)?;
    Ok(params)
}

/// Class logits `[1, n_classes]` for an image tensor `[1, h, w]`.
fn logits(g: &mut Graph<'_, f32>, x: &Tensor<f32>, n_blocks: usize) -> Result<Var> {
    let mut h = g.constant(x.clone());
    for b in 0..n_blocks {
        h = nn::conv(g, h, &format!("cls.block{b}.conv1"), 1)?;
        h = g.silu(h)?;
        h = nn::conv(g, h, &format!("cls.block{b}.conv2"), 2)?;
        h = g.silu(h)?;
    }
    let s = g.shape(h).to_vec();
    let flat = g.reshape(h, &[s[0], s[1] * s[2]])?;
    let pooled = g.mean_last(flat)?;
    let pooled = g.reshape(pooled, &[1, s[0]])?;
    nn::linear(g, pooled, "cls.head")
}

impl StyleClassifier {
    /// Train on labelled images. The examples are put in a canonical order
    /// first, so the result does not depend on how they were listed.
    pub fn train(
        cfg: &ClassifierConfig,
        images: &[GrayImage],
        labels: &[usize],
        n_classes: usize,
        exec: Execution,
    ) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::config(
                "classifier",
                format!("needs at least 2 styles, got {n_classes}"),
            ));
        }
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        for c in 0..n_classes {
            if !labels.contains(&c) {
                return Err(Error::config(
                    "classifier",
                    format!("style {c} has no training images"),
                ));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Contract(format!(
                "label {bad} outside 0..{n_classes}"
            )));
        }
        let canvas = images[0].canvas();
        if images.iter().any(|i| i.canvas() != canvas) {
            return Err(Error::Contract("classifier images differ in size".into()));
        }
        let mut data: Vec<(usize, Vec<u8>, Tensor<f32>)> = images
            .iter()
            .zip(labels)
            .map(|(img, &l)| (l, img.to_bytes(), img.to_tensor()))
            .collect();
        data.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));

        let mut params = init_params(cfg, n_classes)?;
        let opt_cfg = TrainConfig {
            lr: cfg.lr,
            batch_size: cfg.batch_size.max(1),
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for step in 1..=cfg.steps {
            let mut batch = Vec::with_capacity(opt_cfg.batch_size);
            while batch.len() < opt_cfg.batch_size {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let p = &params;
            let grads = par::try_map(exec, &batch, |&i| {
                let (label, _, x) = &data[i];
                let mut g = Graph::with_params(p);
                let z = logits(&mut g, x, cfg.widths.len())?;
                let prob = g.softmax(z)?;
                let onehot = g.constant(Tensor::from_fn([1, n_classes], |j| {
                    if j == *label {
                        1.0
                    } else {
                        0.0
                    }
                }));
                let loss = g.mse(prob, onehot)?;
                Ok::<_, Error>(g.backward(loss)?.param_grads(p))
            })?;
            let mut sum = params.zeros_like();
            for g in &grads {
                sum.accumulate(g)?;
            }
            sum.scale(1.0 / grads.len() as f32);
            adam.update(&mut params, &sum, &opt_cfg, step);
        }
        Ok(Self {
            config: cfg.clone(),
            canvas,
            n_classes,
            params,
        })
    }

    pub fn classify(&self, img: &GrayImage) -> Result<usize> {
        if img.canvas() != self.canvas {
            return Err(Error::Contract(format!(
                "image is {}x{}, classifier canvas is {}x{}",
                img.width(),
                img.height(),
                self.canvas.width,
                self.canvas.height
            )));
        }
        let mut g = Graph::with_params(&self.params);
        let z = logits(&mut g, &img.to_tensor(), self.config.widths.len())?;
        let scores = g.value(z).data();
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn classify_all(&self, images: &[GrayImage], exec: Execution) -> Result<Vec<usize>> {
        par::try_map(exec, images, |img| self.classify(img))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }
}
