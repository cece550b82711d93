//! Dense feedforward network with hand-written forward and backward passes.
//!
//! Weights are stored `(out, in)` and a batch is `(batch, in)`, so a layer
//! computes `X W^T + b`. In quantized mode, constrained layers run the forward
//! pass on `ste_quantize(W)` and the backward pass hands the resulting
//! gradient straight to the real-valued `W`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{ConstraintKind, QuantGrid};
use crate::error::{Error, Result};
use crate::ndcore::{matmul_at, matmul_bt, Matrix};
use crate::quantizer::{quantize_matrix, ste_backward, LayerQuantConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub quant: LayerQuantConfig,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    generation: u64,
}

/// Which weights the forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum ForwardMode<'a> {
    FullPrecision,
    /// One entry per layer; `None` (or an exempt layer) runs full precision.
    Quantized(&'a [Option<QuantGrid>]),
}

/// Cached activations from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer; `inputs[0]` is the batch.
    pub inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pub pre: Vec<Matrix>,
    /// Weights actually used (quantized where applicable).
    pub effective_weights: Vec<Matrix>,
    generation: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }
}

impl Network {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!("layer {i} bias length {}", l.bias.len())));
            }
        }
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    /// MLP with ReLU hidden layers and a linear output layer. Weights are
    /// drawn uniformly from `+-1/sqrt(fan_in)`, biases start at zero. The
    /// first and last layers are exempt from quantization.
    pub fn mlp(sizes: &[usize], kind: ConstraintKind, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                let exempt = i == 0 || i == n - 1;
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                    activation: if i == n - 1 {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                    quant: if exempt {
                        LayerQuantConfig::exempt()
                    } else {
                        LayerQuantConfig::constrained(kind.clone())
                    },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Counter bumped by every mutable access to the layers.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub(crate) fn set_generation(&mut self, generation: u64) {
        self.generation = generation;
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access; invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut v = vec![self.input_dim()];
        v.extend(self.layers.iter().map(Layer::out_dim));
        v
    }

    /// Changes the constraint kind of every non-exempt layer.
    pub fn set_constraint_kind(&mut self, kind: &ConstraintKind) {
        for l in self.layers_mut() {
            if !l.quant.exempt {
                l.quant.kind = kind.clone();
            }
        }
    }

    pub fn forward(&self, batch: &Matrix, mode: ForwardMode<'_>) -> Result<(Matrix, ForwardTrace)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if let ForwardMode::Quantized(grids) = mode {
            if grids.len() != self.layers.len() {
                return Err(Error::Shape(format!(
                    "{} grids for {} layers",
                    grids.len(),
                    self.layers.len()
                )));
            }
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut effective = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = match mode {
                ForwardMode::Quantized(grids) if !layer.quant.exempt => match &grids[i] {
                    Some(g) => quantize_matrix(&layer.weights, g),
                    None => layer.weights.clone(),
                },
                _ => layer.weights.clone(),
            };
            let mut z = matmul_bt(&x, &w)?;
            z.add_row_vector(&layer.bias)?;
            let a = match layer.activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            inputs.push(x);
            pre.push(z);
            effective.push(w);
            x = a;
        }
        Ok((
            x,
            ForwardTrace {
                inputs,
                pre,
                effective_weights: effective,
                generation: self.generation,
            },
        ))
    }

    /// Gradients of the mean softmax cross-entropy with respect to the
    /// real-valued weights and biases.
    pub fn backward(&self, trace: &ForwardTrace, logits: &Matrix, labels: &[usize]) -> Result<Gradients> {
        if trace.generation != self.generation || trace.pre.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward trace is stale: the network changed since it was recorded".into(),
            ));
        }
        let mut delta = softmax_ce_grad(logits, labels)?;
        let n = self.layers.len();
        let mut grads = Gradients {
            weights: Vec::with_capacity(n),
            biases: Vec::with_capacity(n),
        };
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            if layer.activation == Activation::Relu {
                for (d, &z) in delta.as_mut_slice().iter_mut().zip(trace.pre[i].as_slice()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let mut gw = matmul_at(&delta, &trace.inputs[i])?;
            for g in gw.as_mut_slice() {
                *g = ste_backward(*g);
            }
            let mut gb = vec![0.0; layer.out_dim()];
            for r in 0..delta.rows() {
                for (b, &d) in gb.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            if i > 0 {
                delta = crate::ndcore::matmul(&delta, &trace.effective_weights[i])?;
            }
            grads.weights.push(gw);
            grads.biases.push(gb);
        }
        grads.weights.reverse();
        grads.biases.reverse();
        Ok(grads)
    }

    /// Forward + loss + backward in one call.
    pub fn loss_and_grad(
        &self,
        batch: &Matrix,
        labels: &[usize],
        mode: ForwardMode<'_>,
    ) -> Result<(f64, Gradients)> {
        let (logits, trace) = self.forward(batch, mode)?;
        let c = loss(&logits, labels)?;
        let g = self.backward(&trace, &logits, labels)?;
        Ok((c, g))
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, batch: &Matrix, labels: &[usize], mode: ForwardMode<'_>) -> Result<f64> {
        let (logits, _) = self.forward(batch, mode)?;
        Ok(accuracy(&logits, labels))
    }
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy over the batch.
pub fn loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = logits.row(r);
            log_sum_exp(row) - row[y]
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// `(softmax - onehot) / batch`.
pub fn softmax_ce_grad(logits: &Matrix, labels: &[usize]) -> Result<Matrix> {
    check_labels(logits, labels)?;
    let n = labels.len().max(1) as f64;
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = log_sum_exp(row);
        for (c, &z) in row.iter().enumerate() {
            let p = (z - lse).exp();
            let t = if c == y { 1.0 } else { 0.0 };
            out.set(r, c, (p - t) / n);
        }
    }
    Ok(out)
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = logits.row(*r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::make_grid;
    use crate::quantizer::scale_factor;

    fn grids_for(net: &Network) -> Vec<Option<QuantGrid>> {
        net.layers()
            .iter()
            .map(|l| {
                (!l.quant.exempt)
                    .then(|| make_grid(&l.quant.kind, scale_factor(&l.weights).unwrap()).unwrap())
            })
            .collect()
    }

    #[test]
    fn single_affine_layer() {
        let layer = Layer {
            weights: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            bias: vec![0.5, -0.5],
            activation: Activation::Identity,
            quant: LayerQuantConfig::exempt(),
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let (y, _) = net.forward(&x, ForwardMode::FullPrecision).unwrap();
        assert_eq!(y.as_slice(), &[2.5, 2.5]);
    }

    #[test]
    fn shape_errors() {
        let net = Network::mlp(&[3, 4, 2], ConstraintKind::Ternary, 0).unwrap();
        let x = Matrix::zeros(1, 2);
        assert!(matches!(net.forward(&x, ForwardMode::FullPrecision), Err(Error::Shape(_))));
        assert!(Network::mlp(&[3], ConstraintKind::Ternary, 0).is_err());
    }

    #[test]
    fn on_grid_weights_give_identical_outputs() {
        let mut net = Network::mlp(&[3, 5, 5, 2], ConstraintKind::Ternary, 4).unwrap();
        let grids = grids_for(&net);
        let g = grids[1].clone().unwrap();
        for x in net.layers_mut()[1].weights.as_mut_slice() {
            *x = crate::quantizer::ste_quantize(*x, &g);
        }
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let (a, _) = net.forward(&x, ForwardMode::FullPrecision).unwrap();
        let (b, _) = net.forward(&x, ForwardMode::Quantized(&grids)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantized_forward_equals_projected_network() {
        let net = Network::mlp(&[2, 6, 6, 3], ConstraintKind::Ternary, 9).unwrap();
        let grids = grids_for(&net);
        let mut projected = net.clone();
        for (l, g) in projected.layers_mut().iter_mut().zip(&grids) {
            if let Some(g) = g {
                l.weights = quantize_matrix(&l.weights, g);
            }
        }
        let x = Matrix::from_rows(&[vec![0.1, 0.9], vec![-0.4, 0.3]]).unwrap();
        let (a, _) = net.forward(&x, ForwardMode::Quantized(&grids)).unwrap();
        let (b, _) = projected.forward(&x, ForwardMode::FullPrecision).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Matrix::zeros(4, 5);
        let l = loss(&logits, &[0, 1, 2, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn huge_margin_gives_zero_loss() {
        let logits = Matrix::from_rows(&[vec![1000.0, 0.0], vec![0.0, 1000.0]]).unwrap();
        assert!(loss(&logits, &[0, 1]).unwrap() < 1e-300);
        assert!(softmax_ce_grad(&logits, &[0, 1]).unwrap().as_slice().iter().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn loss_matches_direct_formula() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.2], vec![1.0, 0.5, -0.5]]).unwrap();
        let labels = [2, 1];
        let mut want = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[y].exp() / z).ln();
        }
        want /= 2.0;
        assert!((loss(&logits, &labels).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Matrix::zeros(1, 2);
        assert!(matches!(loss(&logits, &[2]), Err(Error::Domain(_))));
    }

    #[test]
    fn stale_trace_rejected() {
        let mut net = Network::mlp(&[2, 3, 2], ConstraintKind::Ternary, 1).unwrap();
        let x = Matrix::zeros(1, 2);
        let (y, trace) = net.forward(&x, ForwardMode::FullPrecision).unwrap();
        net.layers_mut()[0].bias[0] = 1.0;
        assert!(matches!(net.backward(&trace, &y, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let layer = Layer {
            weights: Matrix::from_rows(&[vec![1000.0], vec![-1000.0]]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
            quant: LayerQuantConfig::exempt(),
        };
        let net = Network::from_layers(vec![layer]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let (_, g) = net.loss_and_grad(&x, &[0], ForwardMode::FullPrecision).unwrap();
        assert!(g.weights[0].as_slice().iter().all(|&v| v == 0.0));
        assert!(g.biases[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Network::mlp(&[4, 8, 8, 3], ConstraintKind::Ternary, 11).unwrap();
        let b = Network::mlp(&[4, 8, 8, 3], ConstraintKind::Ternary, 11).unwrap();
        let x = Matrix::from_rows(&[vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let (ya, _) = a.forward(&x, ForwardMode::FullPrecision).unwrap();
        let (yb, _) = b.forward(&x, ForwardMode::FullPrecision).unwrap();
        assert_eq!(
            ya.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            yb.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
