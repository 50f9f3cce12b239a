//! Detail/semantic feature fusion.
//!
//! Detail tokens (fine grid) query the compressed semantic tokens (coarse
//! grid, half the resolution per axis) through cross-attention; in parallel
//! the semantic map is upsampled ×2 at learned offsets. The detail map, the
//! upsampled semantic map and the attention output are stacked on the
//! channel axis and compressed back to the model width.

use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};
use crate::nn::sampling::dynamic_upsample;
use crate::nn::{
    join, map_to_tokens, tokens_to_map, AttentionParams, Binder, BoundAttention, BoundLinear,
    LinearParams, Params,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const REFERENCE_ALPHA: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct DsffParams {
    pub attn: AttentionParams,
    /// `C → 8`: two coordinates for each of the four ×2 sub-positions.
    pub offset_proj: LinearParams,
    /// `3C → C`.
    pub compress: LinearParams,
    pub alpha: f64,
}

impl DsffParams {
    /// Random attention and compression; the offset projection starts at
    /// zero so the upsampler begins as plain bilinear.
    pub fn init(width: usize, key_dim: usize, alpha: f64, rng: &mut Rng) -> Self {
        Self {
            attn: AttentionParams::init(width, key_dim, rng),
            offset_proj: LinearParams::zeros(width, 8),
            compress: LinearParams::init(3 * width, width, rng),
            alpha,
        }
    }

    pub fn width(&self) -> usize {
        self.compress.output_width()
    }
}

impl Params for DsffParams {
    type Bound<'t> = BoundDsff<'t>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.offset_proj.visit(&join(prefix, "offset_proj"), f);
        self.compress.visit(&join(prefix, "compress"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.offset_proj.visit_mut(&join(prefix, "offset_proj"), f);
        self.compress.visit_mut(&join(prefix, "compress"), f);
    }

    fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundDsff<'t> {
        BoundDsff {
            attn: self.attn.bind(binder),
            offset_proj: self.offset_proj.bind(binder),
            compress: self.compress.bind(binder),
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDsff<'t> {
    pub attn: BoundAttention<'t>,
    pub offset_proj: BoundLinear<'t>,
    pub compress: BoundLinear<'t>,
    pub alpha: f64,
}

/// Output of one fusion pass.
pub struct DsffOutput<'t> {
    /// Fused map, `(C, H₁, W₁)`.
    pub fused: Var<'t>,
    /// Detail-query over semantic-key attention, `(H₁·W₁, H₂·W₂)`.
    pub attn_map: Var<'t>,
}

impl<'t> BoundDsff<'t> {
    /// Fuses a `(C, H₁, W₁)` detail map with a `(C, H₂, W₂)` semantic map,
    /// where `H₁ = 2·H₂` and `W₁ = 2·W₂`.
    pub fn forward(&self, detail: &Var<'t>, semantic: &Var<'t>) -> Result<DsffOutput<'t>> {
        let (dd, sd) = (detail.dims(), semantic.dims());
        if dd.len() != 3 || sd.len() != 3 {
            return Err(shape_err("dsff_forward", &dd, &sd));
        }
        if dd[0] != sd[0] {
            return Err(invalid(
                "dsff_forward",
                format!("channel mismatch: detail {dd:?}, semantic {sd:?}"),
            ));
        }
        if dd[1] != 2 * sd[1] || dd[2] != 2 * sd[2] {
            return Err(invalid(
                "dsff_forward",
                format!("detail grid {}x{} must be twice the semantic grid {}x{}", dd[1], dd[2], sd[1], sd[2]),
            ));
        }
        let (h, w) = (dd[1], dd[2]);
        let (attended, attn_map) = self
            .attn
            .forward(&map_to_tokens(detail)?, &map_to_tokens(semantic)?)?;
        let t_vl = tokens_to_map(&attended, h, w)?;
        let upsampled = dynamic_upsample(semantic, &self.offset_proj, self.alpha)?;
        let stacked = Var::concat(&[*detail, upsampled, t_vl])?;
        let fused = tokens_to_map(&self.compress.forward(&map_to_tokens(&stacked)?)?, h, w)?;
        Ok(DsffOutput { fused, attn_map })
    }
}

/// One attention row, min-max scaled to `0..=255` and laid out on the
/// `h × w` semantic grid. A constant row maps to mid-gray (128).
pub fn attention_heatmap(attn_map: &Tensor, query_index: usize, h: usize, w: usize) -> Result<Vec<u8>> {
    if attn_map.rank() != 2 || attn_map.dims()[1] != h * w {
        return Err(invalid(
            "export_attention_heatmap",
            format!("attention map {:?} does not match a {h}x{w} key grid", attn_map.dims()),
        ));
    }
    let rows = attn_map.dims()[0];
    if query_index >= rows {
        return Err(invalid(
            "export_attention_heatmap",
            format!("query index {query_index} out of range for {rows} queries"),
        ));
    }
    let row = &attn_map.data()[query_index * h * w..(query_index + 1) * h * w];
    let (lo, hi) = row
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let span = hi - lo;
    Ok(row
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                128
            } else {
                (255.0 * (v - lo) / span).round() as u8
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;

    fn run(p: &DsffParams, t1: &Tensor, t3: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let d = p.bind(&mut b);
        let out = d
            .forward(&tape.constant(t1.clone()), &tape.constant(t3.clone()))
            .unwrap();
        (out.fused.value().as_ref().clone(), out.attn_map.value().as_ref().clone())
    }

    #[test]
    fn shape_contract_and_row_sums() {
        let mut rng = Rng::new(1);
        let p = DsffParams::init(4, 4, REFERENCE_ALPHA, &mut rng);
        let t1 = Tensor::uniform(vec![4, 8, 8], -1.0, 1.0, &mut rng);
        let t3 = Tensor::uniform(vec![4, 4, 4], -1.0, 1.0, &mut rng);
        let (fused, attn) = run(&p, &t1, &t3);
        assert_eq!(fused.dims(), &[4, 8, 8]);
        assert_eq!(attn.dims(), &[64, 16]);
        for row in attn.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn selector_compress_reproduces_detail_branch() {
        let mut rng = Rng::new(2);
        let c = 3;
        let mut p = DsffParams::init(c, c, REFERENCE_ALPHA, &mut rng);
        p.compress = LinearParams::zeros(3 * c, c);
        for i in 0..c {
            p.compress.weight.data_mut()[i * 3 * c + i] = 1.0;
        }
        let t1 = Tensor::uniform(vec![c, 4, 6], -1.0, 1.0, &mut rng);
        let t3 = Tensor::uniform(vec![c, 2, 3], -1.0, 1.0, &mut rng);
        let (fused, _) = run(&p, &t1, &t3);
        assert_eq!(fused, t1);
    }

    #[test]
    fn rejects_bad_ratio_and_channels() {
        let mut rng = Rng::new(3);
        let p = DsffParams::init(2, 2, REFERENCE_ALPHA, &mut rng);
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let d = p.bind(&mut b);
        let t1 = tape.constant(Tensor::zeros(vec![2, 6, 6]));
        let t3 = tape.constant(Tensor::zeros(vec![2, 2, 2]));
        assert!(d.forward(&t1, &t3).is_err());
        let t3c = tape.constant(Tensor::zeros(vec![3, 3, 3]));
        assert!(d.forward(&t1, &t3c).is_err());
    }

    #[test]
    fn every_branch_reaches_the_output() {
        let mut rng = Rng::new(4);
        let c = 3;
        let mut p = DsffParams::init(c, c, REFERENCE_ALPHA, &mut rng);
        p.offset_proj = LinearParams::init(c, 8, &mut rng);
        let t1 = Tensor::uniform(vec![c, 4, 4], -1.0, 1.0, &mut rng);
        let t3 = Tensor::uniform(vec![c, 2, 2], -1.0, 1.0, &mut rng);
        let (base, _) = run(&p, &t1, &t3);
        // zero the compress columns that read each branch in turn
        for branch in 0..3 {
            let mut q = p.clone();
            for o in 0..c {
                for i in 0..c {
                    q.compress.weight.data_mut()[o * 3 * c + branch * c + i] = 0.0;
                }
            }
            let (out, _) = run(&q, &t1, &t3);
            assert!(out.max_abs_diff(&base) > 1e-6, "branch {branch} has no effect");
        }
    }

    #[test]
    fn zero_alpha_ignores_offset_weights() {
        let mut rng = Rng::new(5);
        let mut p = DsffParams::init(2, 2, 0.0, &mut rng);
        let t1 = Tensor::uniform(vec![2, 4, 4], -1.0, 1.0, &mut rng);
        let t3 = Tensor::uniform(vec![2, 2, 2], -1.0, 1.0, &mut rng);
        let (a, _) = run(&p, &t1, &t3);
        p.offset_proj = LinearParams::init(2, 8, &mut rng);
        let (b, _) = run(&p, &t1, &t3);
        assert_eq!(a, b);
    }

    #[test]
    fn heatmap_examples() {
        let uniform = Tensor::full(vec![1, 4], 0.25);
        assert_eq!(attention_heatmap(&uniform, 0, 2, 2).unwrap(), vec![128; 4]);
        let onehot = Tensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(attention_heatmap(&onehot, 0, 2, 2).unwrap(), vec![0, 0, 255, 0]);
        let ramp = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(attention_heatmap(&ramp, 0, 2, 2).unwrap(), vec![0, 85, 170, 255]);
        assert!(attention_heatmap(&ramp, 1, 2, 2).is_err());
    }

    #[test]
    fn gradcheck_through_fusion() {
        for seed in 0..3 {
            let mut rng = Rng::new(70 + seed);
            let mut p = DsffParams::init(2, 2, REFERENCE_ALPHA, &mut rng);
            p.offset_proj = LinearParams::init(2, 8, &mut rng);
            let mut inputs = vec![
                Tensor::uniform(vec![2, 4, 4], -1.0, 1.0, &mut rng),
                Tensor::uniform(vec![2, 2, 2], -1.0, 1.0, &mut rng),
            ];
            p.visit("", &mut |_, t| inputs.push(t.clone()));
            let head = Tensor::uniform(vec![2, 4, 4], -1.0, 1.0, &mut rng);
            let r = check_gradients(&inputs, 1e-5, |tape, v| {
                let lin = |i: usize| BoundLinear { weight: v[i], bias: v[i + 1] };
                let d = BoundDsff {
                    attn: BoundAttention { wq: lin(2), wk: lin(4), wv: lin(6), wout: lin(8) },
                    offset_proj: lin(10),
                    compress: lin(12),
                    alpha: REFERENCE_ALPHA,
                };
                let out = d.forward(&v[0], &v[1])?;
                let w = tape.constant(head.clone());
                Ok(out.fused.mul(&w)?.sum().sigmoid())
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}
