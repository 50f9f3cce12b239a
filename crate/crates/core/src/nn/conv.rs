use super::{init_weight, join, Binder, Params};
use crate::autodiff::Var;
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Same-padded square convolution with odd kernel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let d = weight.dims();
        if d.len() != 4 || d[2] != d[3] || d[2] % 2 == 0 {
            return Err(invalid("Conv2dParams", format!("kernel must be odd and square, got {d:?}")));
        }
        if bias.dims() != [d[0]] {
            return Err(invalid("Conv2dParams", format!("bias {:?} for {} outputs", bias.dims(), d[0])));
        }
        Ok(Self { weight, bias })
    }

    pub fn init(input: usize, output: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        Self::new(
            init_weight(vec![output, input, kernel, kernel], fan_in, rng),
            Tensor::zeros(vec![output]),
        )
    }

    pub fn zeros(input: usize, output: usize, kernel: usize) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![output, input, kernel, kernel]),
            Tensor::zeros(vec![output]),
        )
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }
}

impl Params for Conv2dParams {
    type Bound<'t> = BoundConv2d<'t>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }

    fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundConv2d<'t> {
        BoundConv2d {
            weight: binder.bind(&self.weight),
            bias: binder.bind(&self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv2d<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundConv2d<'t> {
    /// `(cin, h, w) → (cout, h, w)`.
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.conv2d_same(&self.weight, &self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;

    fn run(p: &Conv2dParams, x: Tensor) -> Tensor {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let conv = p.bind(&mut b);
        let x = tape.constant(x);
        conv.forward(&x).unwrap().value().as_ref().clone()
    }

    #[test]
    fn center_tap_is_identity() {
        let mut p = Conv2dParams::zeros(1, 1, 3).unwrap();
        p.weight.data_mut()[4] = 1.0;
        let mut rng = Rng::new(1);
        let x = Tensor::uniform(vec![1, 4, 5], -1.0, 1.0, &mut rng);
        assert_eq!(run(&p, x.clone()), x);
    }

    #[test]
    fn ones_kernel_counts_in_bounds_neighbors() {
        let mut p = Conv2dParams::zeros(1, 1, 3).unwrap();
        p.weight.data_mut().fill(1.0);
        let y = run(&p, Tensor::full(vec![1, 3, 3], 1.0));
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Conv2dParams::zeros(1, 1, 4).is_err());
        assert!(Conv2dParams::new(Tensor::zeros(vec![1, 1, 2, 2]), Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn param_count_single_channel_k3() {
        assert_eq!(Conv2dParams::zeros(1, 1, 3).unwrap().param_count(), 10);
    }

    #[test]
    fn gradcheck_conv() {
        for (seed, k) in [(0, 3), (1, 5), (2, 3)] {
            let mut rng = Rng::new(seed);
            let inputs = [
                Tensor::uniform(vec![2, 4, 4], -1.0, 1.0, &mut rng),
                Tensor::uniform(vec![3, 2, k, k], -1.0, 1.0, &mut rng),
                Tensor::uniform(vec![3], -1.0, 1.0, &mut rng),
            ];
            let r = check_gradients(&inputs, 1e-5, |_, v| {
                let conv = BoundConv2d { weight: v[1], bias: v[2] };
                let y = conv.forward(&v[0])?;
                Ok(y.mul(&y)?.sum())
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
