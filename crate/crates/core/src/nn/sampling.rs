//! Pixel-center bilinear grid sampling and the offset-driven ×2 upsampler.

use super::linear::BoundLinear;
use super::map_to_tokens;
use crate::autodiff::Var;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Continuous source coordinates `(2, h_out, w_out)` in source-pixel units,
/// row coordinate in channel 0 and column coordinate in channel 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid(Tensor);

impl SampleGrid {
    pub fn new(coords: Tensor) -> Result<Self> {
        if coords.rank() != 3 || coords.dims()[0] != 2 {
            return Err(invalid("SampleGrid", format!("expected (2, H, W), got {:?}", coords.dims())));
        }
        if !coords.all_finite() {
            return Err(Error::NonFinite { op: "SampleGrid" });
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.0.dims()[1], self.0.dims()[2])
    }
}

/// Align-to-pixel-centers grid for an integer upsampling factor `r`:
/// output pixel `(i, j)` reads source coordinate
/// `((i + 0.5)/r − 0.5, (j + 0.5)/r − 0.5)`.
pub fn base_grid(h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Result<SampleGrid> {
    if h_in == 0 || w_in == 0 || h_out == 0 || w_out == 0 {
        return Err(invalid("base_grid", "extents must be positive"));
    }
    if h_out % h_in != 0 || w_out % w_in != 0 || h_out / h_in != w_out / w_in {
        return Err(invalid(
            "base_grid",
            format!("{h_in}x{w_in} -> {h_out}x{w_out} is not a uniform integer factor"),
        ));
    }
    let r = (h_out / h_in) as f64;
    let n = h_out * w_out;
    let mut data = vec![0.0; 2 * n];
    for i in 0..h_out {
        for j in 0..w_out {
            data[i * w_out + j] = (i as f64 + 0.5) / r - 0.5;
            data[n + i * w_out + j] = (j as f64 + 0.5) / r - 0.5;
        }
    }
    SampleGrid::new(Tensor::new(vec![2, h_out, w_out], data)?)
}

/// Offset-driven ×2 upsampling of a `(C, H, W)` map.
///
/// The projection maps each position's `C` features to 8 values, which pixel
/// shuffle rearranges into a `(2, 2H, 2W)` offset field `O`; the map is then
/// sampled at `G + alpha·O`, with `G` the plain ×2 base grid.
pub fn dynamic_upsample<'t>(x: &Var<'t>, offset_proj: &BoundLinear<'t>, alpha: f64) -> Result<Var<'t>> {
    let d = x.dims();
    if d.len() != 3 {
        return Err(invalid("dynamic_upsample", format!("expected (C, H, W), got {d:?}")));
    }
    let out_width = offset_proj.weight.dims()[0];
    if out_width != 8 {
        return Err(invalid(
            "dynamic_upsample",
            format!("offset projection must produce 8 values per position, got {out_width}"),
        ));
    }
    let (h, w) = (d[1], d[2]);
    let offsets = offset_proj
        .forward(&map_to_tokens(x)?)?
        .transpose()?
        .reshape(vec![8, h, w])?
        .pixel_shuffle(2)?;
    let tape = x.tape();
    let base = tape.constant(base_grid(h, w, 2 * h, 2 * w)?.into_tensor());
    let grid = base.add(&offsets.scale(alpha))?;
    x.bilinear_sample(&grid)
}

/// Plain bilinear resize by an integer factor.
pub fn upsample_bilinear<'t>(x: &Var<'t>, h_out: usize, w_out: usize) -> Result<Var<'t>> {
    let d = x.dims();
    if d.len() != 3 {
        return Err(invalid("upsample_bilinear", format!("expected (C, H, W), got {d:?}")));
    }
    let grid = x.tape().constant(base_grid(d[1], d[2], h_out, w_out)?.into_tensor());
    x.bilinear_sample(&grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradients;
    use crate::nn::{Binder, LinearParams, Params};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn sample(x: &Tensor, grid: &Tensor) -> Tensor {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(grid.clone());
        xv.bilinear_sample(&g).unwrap().value().as_ref().clone()
    }

    #[test]
    fn identity_grid() {
        let g = base_grid(3, 4, 3, 4).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(g.coords().data()[i * 4 + j], i as f64);
                assert_eq!(g.coords().data()[12 + i * 4 + j], j as f64);
            }
        }
        let mut rng = Rng::new(0);
        let x = Tensor::uniform(vec![2, 3, 4], -5.0, 5.0, &mut rng);
        assert_eq!(x.max_abs_diff(&sample(&x, g.coords())), 0.0);
    }

    #[test]
    fn doubling_grid_quarter_offsets() {
        let g = base_grid(1, 1, 2, 2).unwrap();
        assert_eq!(&g.coords().data()[..4], &[-0.25, -0.25, 0.25, 0.25]);
        assert!(base_grid(2, 2, 3, 3).is_err());
        assert!(base_grid(2, 2, 4, 6).is_err());
    }

    #[test]
    fn midpoint_and_border_clamp() {
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 10.0]).unwrap();
        let mid = Tensor::new(vec![2, 1, 1], vec![0.0, 0.5]).unwrap();
        assert_eq!(sample(&x, &mid).item(), 5.0);
        let left = Tensor::new(vec![2, 1, 1], vec![0.0, -3.0]).unwrap();
        assert_eq!(sample(&x, &left).item(), 0.0);
        let right = Tensor::new(vec![2, 1, 1], vec![7.0, 9.0]).unwrap();
        assert_eq!(sample(&x, &right).item(), 10.0);
    }

    fn upsample_with(p: &LinearParams, x: &Tensor, alpha: f64) -> Tensor {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let proj = p.bind(&mut b);
        let xv = tape.constant(x.clone());
        dynamic_upsample(&xv, &proj, alpha).unwrap().value().as_ref().clone()
    }

    fn plain_up(x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (h, w) = (x.dims()[1], x.dims()[2]);
        upsample_bilinear(&xv, 2 * h, 2 * w).unwrap().value().as_ref().clone()
    }

    #[test]
    fn zero_offsets_and_zero_alpha_reduce_to_bilinear() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(vec![3, 3, 5], -1.0, 1.0, &mut rng);
        let zero = LinearParams::zeros(3, 8);
        assert_eq!(upsample_with(&zero, &x, 0.25), plain_up(&x));
        let random = LinearParams::init(3, 8, &mut rng);
        assert_eq!(upsample_with(&random, &x, 0.0), plain_up(&x));
        assert_ne!(upsample_with(&random, &x, 0.25), plain_up(&x));
    }

    #[test]
    fn offset_width_must_be_eight() {
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let proj = LinearParams::zeros(2, 6).bind(&mut b);
        let x = tape.constant(Tensor::zeros(vec![2, 2, 2]));
        assert!(dynamic_upsample(&x, &proj, 0.25).is_err());
    }

    #[test]
    fn offsets_bounded_by_scope_factor() {
        let mut rng = Rng::new(12);
        let x = Tensor::uniform(vec![4, 3, 3], -1.0, 1.0, &mut rng);
        let p = LinearParams::init(4, 8, &mut rng);
        let tape = Tape::new();
        let mut b = Binder::new(&tape, false);
        let proj = p.bind(&mut b);
        let xv = tape.constant(x);
        let offsets = proj
            .forward(&map_to_tokens(&xv).unwrap())
            .unwrap()
            .transpose()
            .unwrap()
            .reshape(vec![8, 3, 3])
            .unwrap()
            .pixel_shuffle(2)
            .unwrap()
            .value();
        let max_o = offsets.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let base = base_grid(3, 3, 6, 6).unwrap();
        let s: Vec<f64> = base.coords().data().iter().zip(offsets.data()).map(|(g, o)| g + 0.25 * o).collect();
        for (si, gi) in s.iter().zip(base.coords().data()) {
            assert!((si - gi).abs() <= 0.25 * max_o + 1e-15);
        }
    }

    #[test]
    fn gradcheck_bilinear_and_dynamic_upsample() {
        for seed in 0..3 {
            let mut rng = Rng::new(40 + seed);
            let x = Tensor::uniform(vec![2, 3, 3], -1.0, 1.0, &mut rng);
            let grid = Tensor::uniform(vec![2, 4, 5], -0.7, 2.7, &mut rng);
            let r = check_gradients(&[x.clone(), grid], 1e-5, |_, v| {
                let y = v[0].bilinear_sample(&v[1])?;
                Ok(y.mul(&y)?.sum())
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "bilinear {r:?}");

            let p = LinearParams::init(2, 8, &mut rng);
            let r = check_gradients(&[x, p.weight.clone(), p.bias.clone()], 1e-5, |_, v| {
                let proj = BoundLinear { weight: v[1], bias: v[2] };
                let y = dynamic_upsample(&v[0], &proj, 0.25)?;
                Ok(y.mul(&y)?.sum())
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "dynamic {r:?}");
        }
    }

    /// Direct evaluation of the interpolation formula at each output point.
    fn brute_force(x: &Tensor, grid: &Tensor) -> Vec<f64> {
        let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let n = grid.dims()[1] * grid.dims()[2];
        let at = |ch: usize, yy: usize, xx: usize| x.data()[(ch * h + yy) * w + xx];
        let mut out = Vec::new();
        for ch in 0..c {
            for p in 0..n {
                let y = grid.data()[p].clamp(0.0, (h - 1) as f64);
                let xc = grid.data()[n + p].clamp(0.0, (w - 1) as f64);
                let mut acc = 0.0;
                for yy in 0..h {
                    for xx in 0..w {
                        let wy = (1.0 - (y - yy as f64).abs()).max(0.0);
                        let wx = (1.0 - (xc - xx as f64).abs()).max(0.0);
                        acc += wy * wx * at(ch, yy, xx);
                    }
                }
                out.push(acc);
            }
        }
        out
    }

    proptest! {
        #[test]
        fn bilinear_matches_tent_oracle(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (h, w) = (1 + rng.below(5), 1 + rng.below(5));
            let x = Tensor::uniform(vec![2, h, w], -1.0, 1.0, &mut rng);
            let grid = Tensor::uniform(vec![2, 3, 4], -2.0, 6.0, &mut rng);
            let got = sample(&x, &grid);
            for (a, b) in got.data().iter().zip(brute_force(&x, &grid)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bilinear_is_convex_combination(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let x = Tensor::uniform(vec![1, 4, 4], -1.0, 1.0, &mut rng);
            let grid = Tensor::uniform(vec![2, 2, 2], -1.0, 4.0, &mut rng);
            let got = sample(&x, &grid);
            let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            for v in got.data() {
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }
}
