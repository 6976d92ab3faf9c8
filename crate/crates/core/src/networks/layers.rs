use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }
}

/// How the last layer of a stack is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HeadInit {
    /// Kaiming-uniform weights, zero bias (same as hidden layers).
    Kaiming,
    /// All-zero weights and bias: the head outputs its bias for every input.
    Zero,
}

fn kaiming_uniform<R: Rng + ?Sized>(fan_in: usize, n: usize, rng: &mut R) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let w = if zero {
            vec![0.0; in_dim * out_dim]
        } else {
            kaiming_uniform(in_dim, in_dim * out_dim, rng)
        };
        let weight = store.register(
            format!("{name}.weight"),
            group,
            Tensor::new(vec![in_dim, out_dim], w).expect("sized above"),
        );
        let bias = store.register(format!("{name}.bias"), group, Tensor::zeros(vec![out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(bind.var(self.weight))?.add(bind.var(self.bias))
    }
}

/// Fully connected stack; `dims` lists every width from input to output.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        activation: Activation,
        head: HeadInit,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let zero = i == last && head == HeadInit::Zero;
                Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], zero, rng)
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn head(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    /// Hidden layers use the stack's activation; the output layer is linear.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim() {
            return Err(Error::shape(
                "mlp input",
                &shape,
                &[usize::MAX, self.in_dim()],
            ));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(bind, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }
}

/// Strided 2-D convolution (or its transpose) with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
    transpose: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transpose: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let shape = if transpose {
            vec![in_ch, out_ch, kernel, kernel]
        } else {
            vec![out_ch, in_ch, kernel, kernel]
        };
        let n = shape.iter().product();
        let weight = store.register(
            format!("{name}.weight"),
            group,
            Tensor::new(shape, kaiming_uniform(fan_in, n, rng)).expect("sized above"),
        );
        let bias = store.register(
            format!("{name}.bias"),
            group,
            Tensor::zeros(vec![1, out_ch, 1, 1]),
        );
        Conv {
            weight,
            bias,
            stride,
            padding,
            transpose,
        }
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let w = bind.var(self.weight);
        let y = if self.transpose {
            x.conv_transpose2d(w, self.stride, self.padding)?
        } else {
            x.conv2d(w, self.stride, self.padding)?
        };
        y.add(bind.var(self.bias))
    }
}
