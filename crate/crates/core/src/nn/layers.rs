use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Uniform fan-in initialization: `U(-a, a)` with `a = sqrt(3·gain/fan_in)`,
/// where gain is 2 ahead of a ReLU and 1 otherwise.
pub fn init_uniform(shape: &[usize], fan_in: usize, activation: Activation, rng: &mut Rng) -> Tensor {
    let gain = match activation {
        Activation::Relu => 2.0,
        Activation::Linear => 1.0,
    };
    let bound = (3.0 * gain / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape matches generated data")
}

/// Registers a freshly initialized weight; its generator depends only on
/// `(init_seed, name)`.
fn init_param(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    fan_in: usize,
    activation: Activation,
    init_seed: u64,
) -> Result<ParamId> {
    let mut rng = seed::stream(init_seed, &format!("init/{name}"), 0);
    store.add(name, init_uniform(shape, fan_in, activation, &mut rng))
}

/// Fully connected layer, activation, and dropout.
#[derive(Debug, Clone)]
pub struct DenseModule {
    weight: ParamId,
    bias: ParamId,
    activation: Activation,
    dropout_rate: f64,
    d_in: usize,
    d_out: usize,
}

impl DenseModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        dropout_rate: f64,
        init_seed: u64,
    ) -> Result<Self> {
        check_rate(dropout_rate)?;
        let weight = init_param(store, format!("{name}.weight"), &[d_in, d_out], d_in, activation, init_seed)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias,
            activation,
            dropout_rate,
            d_in,
            d_out,
        })
    }

    /// Builds a layer around explicit weights (`[d_in, d_out]`) and bias (`[d_out]`).
    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
        activation: Activation,
        dropout_rate: f64,
    ) -> Result<Self> {
        check_rate(dropout_rate)?;
        let (d_in, d_out) = match weight.shape() {
            &[i, o] if bias.shape() == [o] => (i, o),
            s => {
                return Err(Error::Dimension(format!(
                    "dense weight {s:?} with bias {:?}",
                    bias.shape()
                )))
            }
        };
        let weight = store.add(format!("{name}.weight"), weight)?;
        let bias = store.add(format!("{name}.bias"), bias)?;
        Ok(Self {
            weight,
            bias,
            activation,
            dropout_rate,
            d_in,
            d_out,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    /// `dropout(activation(x·W + b))`. Dropout is active only when `rng` is given.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let cols = tape.shape(x).last().copied().unwrap_or(0);
        if tape.shape(x).len() != 2 || cols != self.d_in {
            return Err(Error::Dimension(format!(
                "dense layer expects [batch, {}], got {:?}",
                self.d_in,
                tape.shape(x)
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        let y = tape.add_bias(y, b)?;
        let y = match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Linear => y,
        };
        tape.dropout(y, self.dropout_rate, rng)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")))
    }
}

/// Convolution, bias, ReLU, and an optional 2×2 max-pool over NHWC images.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    kernel: ParamId,
    bias: ParamId,
    size: usize,
    c_in: usize,
    c_out: usize,
    stride: usize,
    pool: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pool: bool,
        init_seed: u64,
    ) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Parameter("kernel size and stride must be >= 1".into()));
        }
        let kernel = init_param(
            store,
            format!("{name}.kernel"),
            &[size, size, c_in, c_out],
            size * size * c_in,
            Activation::Relu,
            init_seed,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self {
            kernel,
            bias,
            size,
            c_in,
            c_out,
            stride,
            pool,
        })
    }

    /// Builds a block around an explicit `[k, k, c_in, c_out]` kernel and `[c_out]` bias.
    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        pool: bool,
    ) -> Result<Self> {
        let (size, c_in, c_out) = match kernel.shape() {
            &[k, k2, ci, co] if k == k2 && bias.shape() == [co] => (k, ci, co),
            s => {
                return Err(Error::Dimension(format!(
                    "conv kernel {s:?} with bias {:?}",
                    bias.shape()
                )))
            }
        };
        if stride == 0 {
            return Err(Error::Parameter("stride must be >= 1".into()));
        }
        let kernel = store.add(format!("{name}.kernel"), kernel)?;
        let bias = store.add(format!("{name}.bias"), bias)?;
        Ok(Self {
            kernel,
            bias,
            size,
            c_in,
            c_out,
            stride,
            pool,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// Spatial output size for an input side length, or `None` if too small.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        if input < self.size {
            return None;
        }
        let conv = (input - self.size) / self.stride + 1;
        if !self.pool {
            Some(conv)
        } else if conv >= 2 {
            Some(conv / 2)
        } else {
            None
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, img: Var) -> Result<Var> {
        let s = tape.shape(img);
        if s.len() != 4 || s[3] != self.c_in {
            return Err(Error::Dimension(format!(
                "conv block expects [batch, h, w, {}], got {s:?}",
                self.c_in
            )));
        }
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(img, k, self.stride)?;
        let y = tape.add_bias(y, b)?;
        let y = tape.relu(y);
        if self.pool {
            tape.max_pool2d(y)
        } else {
            Ok(y)
        }
    }
}
