//! Named layers that resolve their weights from a [`ParamStore`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::param::ParamStore;
use crate::tensor::Tensor;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    He { fan_in: usize },
    Normal { std: f64 },
    Zeros,
}

impl Init {
    pub fn sample(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let std = match self {
            Init::Zeros => return Tensor::zeros(shape),
            Init::He { fan_in } => (2.0 / fan_in as f64).sqrt(),
            Init::Normal { std } => std,
        };
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }
}

/// Declaration of one parameter: its name, shape and initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Resolves a parameter either as a trainable leaf or, when `frozen`, as a
/// constant with no gradient path.
fn leaf(g: &mut Graph, store: &ParamStore, name: &str, frozen: bool) -> Var {
    let p = store.expect(name);
    if frozen {
        g.constant(p.tensor.clone())
    } else {
        g.param(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            d_in,
            d_out,
        }
    }

    pub fn specs(&self, weight_init: Init) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: self.weight.clone(),
                shape: vec![self.d_in, self.d_out],
                init: weight_init,
            },
            ParamSpec {
                name: self.bias.clone(),
                shape: vec![self.d_out],
                init: Init::Zeros,
            },
        ]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let w = leaf(g, store, &self.weight, frozen);
        let b = leaf(g, store, &self.bias, frozen);
        g.fully_connected(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: String,
    pub bias: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// A `kernel x kernel` convolution; 3x3 uses padding 1, 1x1 padding 0.
    pub fn new(prefix: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            c_in,
            c_out,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn specs(&self) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: self.weight.clone(),
                shape: vec![self.c_out, self.c_in, self.kernel, self.kernel],
                init: Init::He { fan_in: self.fan_in() },
            },
            ParamSpec {
                name: self.bias.clone(),
                shape: vec![self.c_out],
                init: Init::Zeros,
            },
        ]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store.expect(&self.weight));
        let b = g.param(store.expect(&self.bias));
        g.conv2d(x, k, b, self.stride, self.pad)
    }
}
