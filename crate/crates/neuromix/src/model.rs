//! Model assembly and execution: an ordered layer list mapping an input
//! batch to an `n×K` matrix of cluster relevance scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, ArchToken};
use crate::error::{Error, Result};
use crate::layers::{Layer, KERNEL_SIZE, POOL_WINDOW};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A network mapping input batches to relevance scores. The final dense
/// layer's columns hold the cluster-specific parameters; everything before
/// it is shared across clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    arch: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

/// Builds an initialized model from a validated architecture. Hidden conv
/// and dense layers are followed by ReLU; the final dense layer is linear.
/// Weights use Kaiming fan-in scaling, biases start at zero; the layout of
/// random draws is fixed, so a seed fully determines the parameters.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let tokens = arch.tokens();
    // Track the running feature shape to size each layer.
    let mut spatial: Option<(usize, usize, usize)> = match arch.input_shape() {
        [c, h, w] => Some((*c, *h, *w)),
        _ => None,
    };
    let mut flat_dim = arch.input_shape().iter().product::<usize>();
    for (i, tok) in tokens.iter().enumerate() {
        let last = i + 1 == tokens.len();
        match tok {
            ArchToken::Conv(filters) => {
                let (c, h, w) = spatial.expect("validated: conv has spatial input");
                let fan_in = c * KERNEL_SIZE * KERNEL_SIZE;
                let weight =
                    kaiming(&mut rng, vec![*filters, c, KERNEL_SIZE, KERNEL_SIZE], fan_in);
                let bias = Tensor::zeros(&[*filters]);
                layers.push(Layer::Conv2d { weight, bias, stride: 1 });
                layers.push(Layer::Relu);
                spatial = Some((*filters, h, w));
                flat_dim = filters * h * w;
            }
            ArchToken::Pool => {
                let (c, h, w) = spatial.expect("validated: pool has spatial input");
                layers.push(Layer::MaxPool2d { window: POOL_WINDOW });
                let (h, w) = (h.div_ceil(POOL_WINDOW), w.div_ceil(POOL_WINDOW));
                spatial = Some((c, h, w));
                flat_dim = c * h * w;
            }
            ArchToken::Dense(out) => {
                let weight = kaiming(&mut rng, vec![flat_dim, *out], flat_dim);
                let bias = Tensor::zeros(&[*out]);
                layers.push(Layer::Dense { weight, bias });
                if !last {
                    layers.push(Layer::Relu);
                }
                spatial = None;
                flat_dim = *out;
            }
        }
    }
    Model { arch: arch.render(), input_shape: arch.input_shape().to_vec(), layers }
}

impl Model {
    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Cluster count K (width of the final dense layer).
    pub fn clusters(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { bias, .. } => Some(bias.len()),
                _ => None,
            })
            .expect("model has a final dense layer")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Parameter tensors in a stable order (layer order, weight before bias).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Copies all parameters onto the tape as gradient-tracked leaves.
    pub fn lease_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Copies all parameters onto the tape as constants (for gradient
    /// computations with respect to the input only).
    pub fn lease_params_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|t| tape.constant(t.clone())).collect()
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != self.input_shape.len() + 1 || &shape[1..] != self.input_shape {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match model input {:?}",
                shape, self.input_shape
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass; `params` comes from one of the lease
    /// calls. Returns the `n×K` relevance scores (no final activation).
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        Ok(self.forward_tape_with_taps(tape, x, params)?.0)
    }

    /// Like [`Model::forward_tape`] but also returns the pre-activation
    /// output of every parametric layer (conv and dense, in order) for
    /// response inspection and activation maximization.
    pub fn forward_tape_with_taps(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        self.check_batch(tape.value(x).shape())?;
        let n = tape.value(x).dim(0);
        let mut cur = x;
        let mut pi = 0;
        let mut taps = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { .. } => {
                    if tape.value(cur).ndim() == 4 {
                        let flat: usize = tape.value(cur).shape()[1..].iter().product();
                        cur = tape.reshape(cur, vec![n, flat])?;
                    }
                    cur = tape.dense(cur, params[pi], params[pi + 1])?;
                    pi += 2;
                    taps.push(cur);
                }
                Layer::Conv2d { .. } => {
                    cur = tape.conv2d(cur, params[pi], params[pi + 1])?;
                    pi += 2;
                    taps.push(cur);
                }
                Layer::MaxPool2d { window } => cur = tape.maxpool2d(cur, *window)?,
                Layer::Relu => cur = tape.relu(cur),
            }
        }
        Ok((cur, taps))
    }

    /// Plain forward pass without gradient tracking.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x.shape())?;
        let n = x.dim(0);
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Dense { weight, bias } => {
                    if cur.ndim() == 4 {
                        let flat: usize = cur.shape()[1..].iter().product();
                        cur = cur.reshape(vec![n, flat])?;
                    }
                    ops::dense_forward(&cur, weight, bias)?
                }
                Layer::Conv2d { weight, bias, .. } => ops::conv2d_forward(&cur, weight, bias)?,
                Layer::MaxPool2d { window } => ops::maxpool2d_forward(&cur, *window)?.0,
                Layer::Relu => ops::relu(&cur),
            };
        }
        Ok(cur)
    }

    /// Index into [`Model::layers`] of each conv layer, in network order.
    pub fn conv_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Conv2d { .. }).then_some(i))
            .collect()
    }

    /// Ordinal of each conv layer among parametric layers (tap order).
    pub fn conv_tap_ordinals(&self) -> Vec<usize> {
        let mut taps = Vec::new();
        let mut ordinal = 0;
        for l in &self.layers {
            match l {
                Layer::Conv2d { .. } => {
                    taps.push(ordinal);
                    ordinal += 1;
                }
                Layer::Dense { .. } => ordinal += 1,
                _ => {}
            }
        }
        taps
    }
}
