use super::{init_weight, join, Binder, Params};
use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Affine projection `x · weightᵀ + bias` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.dims() != [weight.dims()[0]] {
            return Err(shape_err("LinearParams", weight.dims(), bias.dims()));
        }
        Ok(Self { weight, bias })
    }

    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: init_weight(vec![output, input], input, rng),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![output, input]),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn identity(width: usize) -> Self {
        let mut weight = Tensor::zeros(vec![width, width]);
        for i in 0..width {
            weight.data_mut()[i * width + i] = 1.0;
        }
        Self {
            weight,
            bias: Tensor::zeros(vec![width]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn output_width(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Params for LinearParams {
    type Bound<'t> = BoundLinear<'t>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundLinear<'t> {
        BoundLinear {
            weight: binder.bind(&self.weight),
            bias: binder.bind(&self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    /// `(N, in) → (N, out)`.
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (xd, wd) = (x.dims(), self.weight.dims());
        if xd.len() != 2 {
            return Err(invalid("linear", format!("expected (N, in) input, got {xd:?}")));
        }
        if xd[1] != wd[1] {
            return Err(shape_err("linear", &xd, &wd));
        }
        x.matmul_t(&self.weight, false, true)?.add_row(&self.bias)
    }
}
