//! A plain ReLU multilayer perceptron with hand-written backprop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{Checkpoint, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "mlp widths {:?} need at least two positive entries",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || self.batch_size == 0 || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad train config {self:?}")));
        }
        Ok(())
    }
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

#[derive(Debug, Clone)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// `outputs x inputs`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// One training example: input, local label, and the head slice it uses.
#[derive(Debug, Clone)]
pub(crate) struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    pub offset: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).unwrap();
                Layer {
                    inputs,
                    outputs,
                    weight: (0..inputs * outputs)
                        .map(|_| normal.sample(&mut rng))
                        .collect(),
                    bias: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0.. {
            let (Some(w), Some(b)) = (ckpt.get(&weight_name(i)), ckpt.get(&bias_name(i))) else {
                break;
            };
            let [outputs, inputs] = *w.shape() else {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} weight must be rank 2"
                )));
            };
            if b.shape() != [outputs] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} bias shape {:?}",
                    b.shape()
                )));
            }
            if let Some(prev) = layers.last() {
                let prev: &Layer = prev;
                if prev.outputs != inputs {
                    return Err(Error::ShapeMismatch(format!(
                        "layer {i} expects {inputs} inputs, previous layer has {}",
                        prev.outputs
                    )));
                }
            }
            layers.push(Layer {
                inputs,
                outputs,
                weight: w.data().iter().map(|&x| f64::from(x)).collect(),
                bias: b.data().iter().map(|&x| f64::from(x)).collect(),
            });
        }
        if layers.is_empty() || ckpt.len() != 2 * layers.len() {
            return Err(Error::ShapeMismatch(
                "checkpoint is not a layer{i}.weight/bias MLP".into(),
            ));
        }
        Ok(Mlp { layers })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (i, l) in self.layers.iter().enumerate() {
            let w = Tensor::new(
                vec![l.outputs, l.inputs],
                l.weight.iter().map(|&x| x as f32).collect(),
            )
            .expect("layer shape");
            let b = Tensor::new(vec![l.outputs], l.bias.iter().map(|&x| x as f32).collect())
                .expect("layer shape");
            c.insert(weight_name(i), w).expect("unique");
            c.insert(bias_name(i), b).expect("unique");
        }
        c
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let input = acts.last().unwrap();
            let mut out = l.bias.clone();
            for (o, z) in out.iter_mut().enumerate() {
                let row = &l.weight[o * l.inputs..(o + 1) * l.inputs];
                *z += row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                if li < last {
                    *z = z.max(0.0);
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward_all(x).pop().unwrap()
    }

    fn slice_loss(logits: &[f64], s: &Sample) -> (f64, Vec<f64>) {
        let z = &logits[s.offset..s.offset + s.n_classes];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let loss = -(probs[s.label].max(1e-300)).ln();
        (loss, probs)
    }

    pub fn mean_loss(&self, samples: &[Sample]) -> f64 {
        let total: f64 = samples
            .iter()
            .map(|s| Self::slice_loss(&self.logits(&s.x), s).0)
            .sum();
        total / samples.len() as f64
    }

    /// Plain mini-batch SGD with softmax cross-entropy over each sample's head
    /// slice. Returns the mean loss before training and after every epoch.
    pub fn train(&mut self, samples: &[Sample], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Empty("no training samples".into()));
        }
        let mut losses = vec![self.mean_loss(samples)];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut gw: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.weight.len()])
            .collect();
        let mut gb: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.bias.len()])
            .collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            if cfg.lr == 0.0 {
                losses.push(losses[0]);
                continue;
            }
            for batch in order.chunks(cfg.batch_size) {
                gw.iter_mut().flatten().for_each(|g| *g = 0.0);
                gb.iter_mut().flatten().for_each(|g| *g = 0.0);
                for &i in batch {
                    self.accumulate_gradient(&samples[i], &mut gw, &mut gb);
                }
                let step = cfg.lr / batch.len() as f64;
                for (l, (gwl, gbl)) in self.layers.iter_mut().zip(gw.iter().zip(&gb)) {
                    for (w, g) in l.weight.iter_mut().zip(gwl) {
                        *w -= step * g + cfg.lr * cfg.weight_decay * *w;
                    }
                    for (b, g) in l.bias.iter_mut().zip(gbl) {
                        *b -= step * g;
                    }
                }
            }
            let loss = self.mean_loss(samples);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} after epoch {epoch}")));
            }
            losses.push(loss);
        }
        Ok(losses)
    }

    fn accumulate_gradient(&self, s: &Sample, gw: &mut [Vec<f64>], gb: &mut [Vec<f64>]) {
        let acts = self.forward_all(&s.x);
        let (_, probs) = Self::slice_loss(acts.last().unwrap(), s);
        let mut delta = vec![0.0; self.output_dim()];
        for (k, p) in probs.iter().enumerate() {
            delta[s.offset + k] = *p;
        }
        delta[s.offset + s.label] -= 1.0;

        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let input = &acts[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[li][o] += d;
                for (g, &a) in gw[li][o * l.inputs..(o + 1) * l.inputs]
                    .iter_mut()
                    .zip(input)
                {
                    *g += d * a;
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; l.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev
                    .iter_mut()
                    .zip(&l.weight[o * l.inputs..(o + 1) * l.inputs])
                {
                    *p += d * w;
                }
            }
            // ReLU derivative of the previous layer's output.
            for (p, &a) in prev.iter_mut().zip(input) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}
