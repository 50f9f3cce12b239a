//! Neural primitives of the decoder: projections, convolutions, attention,
//! and grid sampling.

pub mod attention;
pub mod conv;
pub mod linear;
pub mod sampling;

pub use attention::{AttentionParams, BoundAttention};
pub use conv::{BoundConv2d, Conv2dParams};
pub use linear::{BoundLinear, LinearParams};
pub use sampling::{base_grid, SampleGrid};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Walks learnable tensors in a fixed order. [`Params::bind`] must register
/// tensors on the tape in the same order, so `Binder::vars` lines up with
/// `visit`.
pub trait Params {
    type Bound<'t>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
    fn bind<'t>(&self, binder: &mut Binder<'t>) -> Self::Bound<'t>;

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

/// Places parameter tensors on a tape, remembering the resulting vars.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    pub vars: Vec<Var<'t>>,
}

impl<'t> Binder<'t> {
    /// `trainable = false` records parameters as constants (inference).
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Self {
            tape,
            trainable,
            vars: Vec::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn bind(&mut self, t: &Tensor) -> Var<'t> {
        let v = if self.trainable {
            self.tape.leaf(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in `±sqrt(1/fan_in)`.
pub(crate) fn init_weight(dims: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::uniform(dims, -bound, bound, rng)
}

/// `(C, H, W)` map to `(H·W, C)` tokens, row-major over the grid.
pub fn map_to_tokens<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let d = x.dims();
    if d.len() != 3 {
        return Err(invalid("map_to_tokens", format!("expected (C, H, W), got {d:?}")));
    }
    x.reshape(vec![d[0], d[1] * d[2]])?.transpose()
}

/// `(H·W, C)` tokens back to a `(C, H, W)` map.
pub fn tokens_to_map<'t>(x: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let d = x.dims();
    if d.len() != 2 || d[0] != h * w {
        return Err(invalid("tokens_to_map", format!("{d:?} is not {h}x{w} tokens")));
    }
    x.transpose()?.reshape(vec![d[1], h, w])
}
