//! The full finite-difference suite: every differentiable operation of the
//! decoder and its losses, on small random instances.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::decoder::{BoundDecoder, BoundFusion, DecoderConfig, Variant};
use crate::dsff::{BoundDsff, REFERENCE_ALPHA};
use crate::error::{invalid, Error, Result};
use crate::gradcheck::{check_gradients, GradReport};
use crate::loss::{bce_loss, ce_loss, dice_loss};
use crate::nn::sampling::dynamic_upsample;
use crate::nn::{BoundAttention, BoundConv2d, BoundLinear};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradOp {
    Matmul,
    Softmax,
    Sigmoid,
    Linear,
    Conv2d,
    PixelShuffle,
    BilinearSample,
    DynamicUpsample,
    CrossAttention,
    DsffForward,
    InjectSeg,
    MaskHead,
    BceLoss,
    DiceLoss,
    CeLoss,
}

impl GradOp {
    pub const ALL: [GradOp; 15] = [
        GradOp::Matmul,
        GradOp::Softmax,
        GradOp::Sigmoid,
        GradOp::Linear,
        GradOp::Conv2d,
        GradOp::PixelShuffle,
        GradOp::BilinearSample,
        GradOp::DynamicUpsample,
        GradOp::CrossAttention,
        GradOp::DsffForward,
        GradOp::InjectSeg,
        GradOp::MaskHead,
        GradOp::BceLoss,
        GradOp::DiceLoss,
        GradOp::CeLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Matmul => "matmul",
            GradOp::Softmax => "softmax",
            GradOp::Sigmoid => "sigmoid",
            GradOp::Linear => "linear",
            GradOp::Conv2d => "conv2d",
            GradOp::PixelShuffle => "pixel_shuffle",
            GradOp::BilinearSample => "bilinear_sample",
            GradOp::DynamicUpsample => "dynamic_upsample",
            GradOp::CrossAttention => "cross_attention",
            GradOp::DsffForward => "dsff_forward",
            GradOp::InjectSeg => "inject_seg",
            GradOp::MaskHead => "mask_head",
            GradOp::BceLoss => "bce_loss",
            GradOp::DiceLoss => "dice_loss",
            GradOp::CeLoss => "ce_loss",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| invalid("gradcheck", format!("unknown operation {s:?}")))
    }
}

type Scalar = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

fn uniform(rng: &mut Rng, dims: &[usize]) -> Tensor {
    Tensor::uniform(dims.to_vec(), -1.0, 1.0, rng)
}

/// `Σ out ⊙ probe`, so every output coordinate carries a distinct weight.
fn probed<'t>(out: &Var<'t>, probe: &Tensor) -> Result<Var<'t>> {
    out.mul(&out.tape().constant(probe.clone()))
        .map(|v| v.sum())
}

fn lin<'t>(v: &[Var<'t>], i: usize) -> BoundLinear<'t> {
    BoundLinear {
        weight: v[i],
        bias: v[i + 1],
    }
}

/// Attention block from seven inputs starting at `v[i]`. The key bias is a
/// zero constant: it shifts every score of a row equally, so its true
/// gradient is identically zero and finite differences would only see noise.
fn attn<'t>(v: &[Var<'t>], i: usize) -> BoundAttention<'t> {
    let key_dim = v[i].dims()[0];
    let zero_bias = v[i].tape().constant(Tensor::zeros(vec![key_dim]));
    BoundAttention {
        wq: lin(v, i),
        wk: BoundLinear {
            weight: v[i + 2],
            bias: zero_bias,
        },
        wv: lin(v, i + 3),
        wout: lin(v, i + 5),
    }
}

/// Weights and biases of a `width → width` attention block with keys of
/// width `key_dim`, minus the key bias.
fn attn_inputs(rng: &mut Rng, width: usize, key_dim: usize) -> Vec<Tensor> {
    vec![
        uniform(rng, &[key_dim, width]),
        uniform(rng, &[key_dim]),
        uniform(rng, &[key_dim, width]),
        uniform(rng, &[width, width]),
        uniform(rng, &[width]),
        uniform(rng, &[width, width]),
        uniform(rng, &[width]),
    ]
}

fn head_config() -> DecoderConfig {
    DecoderConfig {
        c_llm: 4,
        c: 4,
        key_dim: Some(3),
        grid_detail: [4, 4],
        grid_semantic: [2, 2],
        head_mid_channels: 8,
        head_shuffle_r: 2,
        final_mask_hw: [16, 16],
        variant: Variant::DetailOnly,
        alpha: REFERENCE_ALPHA,
    }
}

fn conv<'t>(v: &[Var<'t>], i: usize) -> BoundConv2d<'t> {
    BoundConv2d {
        weight: v[i],
        bias: v[i + 1],
    }
}

/// A decoder whose unused parts all point at `v[0]`; inject_seg and
/// mask_head never read them.
fn partial_decoder<'t>(
    v: &[Var<'t>],
    seg_attn: Option<BoundAttention<'t>>,
    head: Option<(BoundConv2d<'t>, BoundConv2d<'t>)>,
) -> BoundDecoder<'t> {
    let unused_lin = BoundLinear { weight: v[0], bias: v[0] };
    let unused_conv = BoundConv2d { weight: v[0], bias: v[0] };
    let (head_k3, head_k5) = head.unwrap_or((unused_conv, unused_conv));
    BoundDecoder {
        variant: Variant::DetailOnly,
        phi1: None,
        phi2: unused_lin,
        fusion: BoundFusion::None,
        seg_attn: seg_attn.unwrap_or(BoundAttention {
            wq: unused_lin,
            wk: unused_lin,
            wv: unused_lin,
            wout: unused_lin,
        }),
        head_k3,
        head_k5,
    }
}

fn scalar<F>(f: F) -> Scalar
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    Box::new(f)
}

/// Random inputs and the scalar function checked for `op`.
pub fn case(op: GradOp, seed: u64) -> (Vec<Tensor>, Scalar) {
    let mut rng = Rng::derive(seed, op as u64);
    let r = &mut rng;
    match op {
        GradOp::Matmul => {
            let probe = uniform(r, &[3, 2]);
            let inputs = vec![uniform(r, &[3, 4]), uniform(r, &[4, 2])];
            (inputs, scalar(move |_, v| probed(&v[0].matmul(&v[1])?, &probe)))
        }
        GradOp::Softmax => {
            let probe = uniform(r, &[3, 5]);
            (vec![uniform(r, &[3, 5])], scalar(move |_, v| probed(&v[0].softmax_rows()?, &probe)))
        }
        GradOp::Sigmoid => {
            let probe = uniform(r, &[4, 3]);
            (vec![uniform(r, &[4, 3])], scalar(move |_, v| probed(&v[0].sigmoid(), &probe)))
        }
        GradOp::Linear => {
            let probe = uniform(r, &[4, 2]);
            let inputs = vec![uniform(r, &[4, 3]), uniform(r, &[2, 3]), uniform(r, &[2])];
            (inputs, scalar(move |_, v| probed(&lin(v, 1).forward(&v[0])?, &probe)))
        }
        GradOp::Conv2d => {
            let k = if seed % 2 == 0 { 3 } else { 5 };
            let probe = uniform(r, &[3, 4, 4]);
            let inputs = vec![uniform(r, &[2, 4, 4]), uniform(r, &[3, 2, k, k]), uniform(r, &[3])];
            (inputs, scalar(move |_, v| probed(&v[0].conv2d_same(&v[1], &v[2])?, &probe)))
        }
        GradOp::PixelShuffle => {
            let probe = uniform(r, &[2, 4, 6]);
            (vec![uniform(r, &[8, 2, 3])], scalar(move |_, v| probed(&v[0].pixel_shuffle(2)?, &probe)))
        }
        GradOp::BilinearSample => {
            let probe = uniform(r, &[2, 5, 6]);
            let mut grid = Tensor::zeros(vec![2, 5, 6]);
            for (i, g) in grid.data_mut().iter_mut().enumerate() {
                // mostly interior, with a margin that exercises the border clamp
                let c = if i < 30 { r.uniform(-0.3, 2.3) } else { r.uniform(-0.3, 3.3) };
                // keep clear of the kinks at integer coordinates
                *g = if (c - c.round()).abs() < 1e-3 { c + 2e-3 } else { c };
            }
            let inputs = vec![uniform(r, &[2, 3, 4]), grid];
            (inputs, scalar(move |_, v| probed(&v[0].bilinear_sample(&v[1])?, &probe)))
        }
        GradOp::DynamicUpsample => {
            let probe = uniform(r, &[2, 6, 6]);
            let inputs = vec![uniform(r, &[2, 3, 3]), uniform(r, &[8, 2]), uniform(r, &[8])];
            (
                inputs,
                scalar(move |_, v| probed(&dynamic_upsample(&v[0], &lin(v, 1), REFERENCE_ALPHA)?, &probe)),
            )
        }
        GradOp::CrossAttention => {
            let probe = uniform(r, &[3, 4]);
            let probe_attn = uniform(r, &[3, 2]);
            let mut inputs = vec![uniform(r, &[3, 4]), uniform(r, &[2, 4])];
            inputs.extend(attn_inputs(r, 4, 3));
            (
                inputs,
                scalar(move |_, v| {
                    let (out, a) = attn(v, 2).forward(&v[0], &v[1])?;
                    probed(&out, &probe)?.add(&probed(&a, &probe_attn)?)
                }),
            )
        }
        GradOp::DsffForward => {
            let probe = uniform(r, &[4, 4, 4]);
            let mut inputs = vec![uniform(r, &[4, 4, 4]), uniform(r, &[4, 2, 2])];
            inputs.extend(attn_inputs(r, 4, 3));
            inputs.extend([uniform(r, &[8, 4]), uniform(r, &[8]), uniform(r, &[4, 12]), uniform(r, &[4])]);
            (
                inputs,
                scalar(move |_, v| {
                    let dsff = BoundDsff {
                        attn: attn(v, 2),
                        offset_proj: lin(v, 9),
                        compress: lin(v, 11),
                        alpha: REFERENCE_ALPHA,
                    };
                    probed(&dsff.forward(&v[0], &v[1])?.fused, &probe)
                }),
            )
        }
        GradOp::InjectSeg => {
            let probes = [uniform(r, &[4, 3, 3]), uniform(r, &[4, 3, 3])];
            let mut inputs = vec![uniform(r, &[4, 3, 3]), uniform(r, &[2, 4])];
            inputs.extend(attn_inputs(r, 4, 3));
            (
                inputs,
                scalar(move |_, v| {
                    let maps = partial_decoder(v, Some(attn(v, 2)), None).inject_seg(&v[0], &v[1])?;
                    probed(&maps[0], &probes[0])?.add(&probed(&maps[1], &probes[1])?)
                }),
            )
        }
        GradOp::MaskHead => {
            let cfg = head_config();
            let probe = uniform(r, &[16, 16]);
            let inputs = vec![
                uniform(r, &[4, 4, 4]),
                uniform(r, &[8, 4, 3, 3]),
                uniform(r, &[8]),
                uniform(r, &[1, 2, 5, 5]),
                uniform(r, &[1]),
            ];
            (
                inputs,
                scalar(move |_, v| {
                    let dec = partial_decoder(v, None, Some((conv(v, 1), conv(v, 3))));
                    probed(&dec.mask_head(&cfg, &v[0])?, &probe)
                }),
            )
        }
        GradOp::BceLoss => {
            let gt = Tensor::uniform(vec![4, 4], 0.0, 1.0, r).map(f64::round);
            let p = Tensor::uniform(vec![4, 4], 0.05, 0.95, r);
            (vec![p], scalar(move |_, v| bce_loss(&v[0], &gt, 1e-7)))
        }
        GradOp::DiceLoss => {
            let gt = Tensor::uniform(vec![4, 4], 0.0, 1.0, r).map(f64::round);
            let p = Tensor::uniform(vec![4, 4], 0.05, 0.95, r);
            (vec![p], scalar(move |_, v| dice_loss(&v[0], &gt, 1.0)))
        }
        GradOp::CeLoss => {
            let targets: Vec<usize> = (0..4).map(|_| r.below(3)).collect();
            (vec![uniform(r, &[4, 3])], scalar(move |_, v| ce_loss(&v[0], &targets)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub op: GradOp,
    pub seed: u64,
    pub report: GradReport,
}

impl SuiteEntry {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.max_rel_err < tol
    }
}

pub fn check_op(op: GradOp, seed: u64) -> Result<GradReport> {
    let (inputs, f) = case(op, seed);
    check_gradients(&inputs, SUITE_EPS, f)
}

/// Every operation on `instances` seeds starting at `seed`.
pub fn run_suite(seed: u64, instances: usize) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(GradOp::ALL.len() * instances);
    for op in GradOp::ALL {
        for k in 0..instances as u64 {
            let s = seed + k;
            out.push(SuiteEntry {
                op,
                seed: s,
                report: check_op(op, s)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for op in GradOp::ALL {
            assert_eq!(op.name().parse::<GradOp>().unwrap(), op);
        }
        assert!("relu".parse::<GradOp>().is_err());
    }

    #[test]
    fn every_case_evaluates_to_a_scalar() {
        for op in GradOp::ALL {
            let (inputs, f) = case(op, 0);
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = f(&tape, &vars).unwrap();
            assert_eq!(out.value().len(), 1, "{op}");
            let grads = tape.backward(out).unwrap();
            // every input influences the result, except the query and key
            // projections of single-key attention, whose softmax is constant
            for (k, v) in vars.iter().enumerate() {
                if op == GradOp::InjectSeg && (2..5).contains(&k) {
                    continue;
                }
                assert!(grads.wrt(*v).data().iter().any(|&g| g != 0.0), "{op} input {k}");
            }
        }
    }

    #[test]
    fn all_ops_pass_on_three_seeds() {
        let entries = run_suite(11, 3).unwrap();
        assert_eq!(entries.len(), 45);
        for e in &entries {
            assert!(e.passed(SUITE_TOLERANCE), "{} seed {}: {:?}", e.op, e.seed, e.report);
        }
    }
}
