use super::linear::{BoundLinear, LinearParams};
use super::{join, Binder, Params};
use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Single-head cross-attention `φ_out(softmax(Q·Kᵀ/√D)·V)`.
///
/// `wq` and `wk` map the model width to `key_dim` (the `D` of the scaling);
/// `wv` and `wout` keep the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wout: LinearParams,
}

impl AttentionParams {
    pub fn init(width: usize, key_dim: usize, rng: &mut Rng) -> Self {
        Self {
            wq: LinearParams::init(width, key_dim, rng),
            wk: LinearParams::init(width, key_dim, rng),
            wv: LinearParams::init(width, width, rng),
            wout: LinearParams::init(width, width, rng),
        }
    }

    /// All four projections are the identity.
    pub fn identity(width: usize) -> Self {
        Self {
            wq: LinearParams::identity(width),
            wk: LinearParams::identity(width),
            wv: LinearParams::identity(width),
            wout: LinearParams::identity(width),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.wq.output_width()
    }

    pub fn width(&self) -> usize {
        self.wq.input_width()
    }
}

impl Params for AttentionParams {
    type Bound<'t> = BoundAttention<'t>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wout.visit(&join(prefix, "wout"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.wout.visit_mut(&join(prefix, "wout"), f);
    }

    fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundAttention<'t> {
        BoundAttention {
            wq: self.wq.bind(binder),
            wk: self.wk.bind(binder),
            wv: self.wv.bind(binder),
            wout: self.wout.bind(binder),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention<'t> {
    pub wq: BoundLinear<'t>,
    pub wk: BoundLinear<'t>,
    pub wv: BoundLinear<'t>,
    pub wout: BoundLinear<'t>,
}

impl<'t> BoundAttention<'t> {
    /// Queries `(Nq, C)` attend over keys/values `(Nk, C)`. Returns the
    /// projected output `(Nq, C)` and the attention weights `(Nq, Nk)`.
    pub fn forward(&self, q_in: &Var<'t>, kv_in: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (qd, kd) = (q_in.dims(), kv_in.dims());
        if qd.len() != 2 || kd.len() != 2 || qd[1] != kd[1] {
            return Err(shape_err("cross_attention", &qd, &kd));
        }
        let q = self.wq.forward(q_in)?;
        let k = self.wk.forward(kv_in)?;
        let v = self.wv.forward(kv_in)?;
        let key_dim = q.dims()[1];
        let scores = q.matmul_t(&k, false, true)?.scale(1.0 / (key_dim as f64).sqrt());
        let attn = scores.softmax_rows()?;
        let out = self.wout.forward(&attn.matmul(&v)?)?;
        Ok((out, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;

    #[test]
    fn single_key_gets_all_mass() {
        let mut rng = Rng::new(5);
        let p = AttentionParams::init(4, 3, &mut rng);
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let att = p.bind(&mut b);
        let q = tape.constant(Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng));
        let kv = tape.constant(Tensor::uniform(vec![1, 4], -1.0, 1.0, &mut rng));
        let (out, attn) = att.forward(&q, &kv).unwrap();
        assert!(attn.value().data().iter().all(|&a| a == 1.0));
        let v_row = att.wout.forward(&att.wv.forward(&kv).unwrap()).unwrap().value();
        for row in out.value().data().chunks(4) {
            for (a, b) in row.iter().zip(v_row.data()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mass_concentrates_on_matching_key_as_scale_grows() {
        // identity projections, orthogonal keys e0, e1, e2; query = s·e1
        let p = AttentionParams::identity(3);
        let mut prev = 0.0;
        for s in [1.0, 4.0, 16.0] {
            let tape = Tape::new();
            let mut b = Binder::new(&tape, false);
            let att = p.bind(&mut b);
            let keys = tape.constant(
                Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            );
            let q = tape.constant(Tensor::new(vec![1, 3], vec![0.0, s, 0.0]).unwrap());
            let (_, attn) = att.forward(&q, &keys).unwrap();
            let a = attn.value();
            // closed form: softmax([0, s/√3, 0])
            let e = (s / 3f64.sqrt()).exp();
            assert!((a.data()[1] - e / (e + 2.0)).abs() < 1e-12);
            assert!(a.data()[1] > prev);
            prev = a.data()[1];
        }
        assert!(prev > 0.99);
    }

    #[test]
    fn rows_sum_to_one_and_widths_checked() {
        let mut rng = Rng::new(9);
        let p = AttentionParams::init(4, 2, &mut rng);
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let att = p.bind(&mut b);
        let q = tape.constant(Tensor::uniform(vec![5, 4], -3.0, 3.0, &mut rng));
        let kv = tape.constant(Tensor::uniform(vec![7, 4], -3.0, 3.0, &mut rng));
        let (_, attn) = att.forward(&q, &kv).unwrap();
        for row in attn.value().data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(att.forward(&q, &bad).is_err());
    }

    #[test]
    fn gradcheck_cross_attention() {
        for seed in 0..3 {
            let mut rng = Rng::new(100 + seed);
            let p = AttentionParams::init(4, 4, &mut rng);
            let mut inputs = vec![
                Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng),
                Tensor::uniform(vec![2, 4], -1.0, 1.0, &mut rng),
            ];
            p.visit("", &mut |_, t| inputs.push(t.clone()));
            let mut target = rng.clone();
            let probe = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut target);
            let r = check_gradients(&inputs, 1e-5, |tape, v| {
                let lin = |i: usize| BoundLinear { weight: v[i], bias: v[i + 1] };
                let att = BoundAttention { wq: lin(2), wk: lin(4), wv: lin(6), wout: lin(8) };
                let (out, attn) = att.forward(&v[0], &v[1])?;
                let w = tape.constant(probe.clone());
                Ok(out.mul(&w)?.sum().add(&attn.mul(&attn)?.sum())?)
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
