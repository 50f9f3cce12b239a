//! The full mask decoder and its fusion ablations.
//!
//! Pipeline per sample:
//! 1. project semantic tokens and segmentation tokens to the model width;
//! 2. fuse detail and semantic maps (variant-dependent);
//! 3. for every segmentation token, cross-attend from the fused map to that
//!    token and add the fused map back residually;
//! 4. 3×3 conv, pixel shuffle, 5×5 conv, then bilinear resize of the logits
//!    to the output mask size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::dsff::{BoundDsff, DsffParams, REFERENCE_ALPHA};
use crate::error::{invalid, Error, Result};
use crate::metrics::Mask;
use crate::nn::sampling::upsample_bilinear;
use crate::nn::{
    join, map_to_tokens, tokens_to_map, AttentionParams, Binder, BoundAttention, BoundConv2d,
    BoundLinear, Conv2dParams, LinearParams, Params,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which image features reach the mask head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Detail tokens only.
    #[serde(rename = "detail")]
    DetailOnly,
    /// Projected semantic tokens, plain bilinear ×2.
    #[serde(rename = "semantic")]
    SemanticOnly,
    /// Channel concat of detail and bilinear-upsampled semantic, then compress.
    #[serde(rename = "concat")]
    Concat,
    /// Full fusion module.
    #[serde(rename = "dsff")]
    Dsff,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::DetailOnly,
        Variant::SemanticOnly,
        Variant::Concat,
        Variant::Dsff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DetailOnly => "detail",
            Variant::SemanticOnly => "semantic",
            Variant::Concat => "concat",
            Variant::Dsff => "dsff",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid("build_variant", format!("unknown variant {s:?} (expected dsff|concat|semantic|detail)")))
    }
}

fn default_alpha() -> f64 {
    REFERENCE_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Language-model hidden width.
    pub c_llm: usize,
    /// Fused model width (also the detail-token width).
    pub c: usize,
    /// Attention key width; the model width when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_dim: Option<usize>,
    pub grid_detail: [usize; 2],
    pub grid_semantic: [usize; 2],
    pub head_mid_channels: usize,
    pub head_shuffle_r: usize,
    pub final_mask_hw: [usize; 2],
    pub variant: Variant,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl DecoderConfig {
    /// 64×64 images, 8×8 detail grid, 4×4 semantic grid.
    pub fn desk() -> Self {
        Self {
            c_llm: 64,
            c: 32,
            key_dim: None,
            grid_detail: [8, 8],
            grid_semantic: [4, 4],
            head_mid_channels: 32,
            head_shuffle_r: 2,
            final_mask_hw: [64, 64],
            variant: Variant::Dsff,
            alpha: REFERENCE_ALPHA,
        }
    }

    /// 448×448 images seen as 32×32 detail tokens of width 1024 and 16×16
    /// language-model tokens of width 4096.
    pub fn paper_scale() -> Self {
        Self {
            c_llm: 4096,
            c: 1024,
            key_dim: None,
            grid_detail: [32, 32],
            grid_semantic: [16, 16],
            head_mid_channels: 1024,
            head_shuffle_r: 2,
            final_mask_hw: [448, 448],
            variant: Variant::Dsff,
            alpha: REFERENCE_ALPHA,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim.unwrap_or(self.c)
    }

    /// Resolution of the head before the final resize.
    pub fn head_hw(&self) -> [usize; 2] {
        let r = self.head_shuffle_r;
        [self.grid_detail[0] * r, self.grid_detail[1] * r]
    }

    pub fn validate(&self) -> Result<()> {
        let op = "DecoderConfig";
        let positive = [
            self.c_llm,
            self.c,
            self.key_dim(),
            self.head_mid_channels,
            self.head_shuffle_r,
        ];
        if positive.contains(&0) || self.grid_semantic.contains(&0) || self.final_mask_hw.contains(&0) {
            return Err(invalid(op, "all widths and extents must be positive"));
        }
        if self.grid_detail != [2 * self.grid_semantic[0], 2 * self.grid_semantic[1]] {
            return Err(invalid(
                op,
                format!(
                    "grid_detail {:?} must be twice grid_semantic {:?}",
                    self.grid_detail, self.grid_semantic
                ),
            ));
        }
        let r2 = self.head_shuffle_r * self.head_shuffle_r;
        if self.head_mid_channels % r2 != 0 {
            return Err(invalid(
                op,
                format!(
                    "head_mid_channels {} not divisible by head_shuffle_r² = {r2}",
                    self.head_mid_channels
                ),
            ));
        }
        let [hh, hw] = self.head_hw();
        let [fh, fw] = self.final_mask_hw;
        if fh % hh != 0 || fw % hw != 0 || fh / hh != fw / hw {
            return Err(invalid(
                op,
                format!("final_mask_hw {fh}x{fw} is not a uniform integer multiple of the head's {hh}x{hw}"),
            ));
        }
        if !self.alpha.is_finite() {
            return Err(invalid(op, "alpha must be finite"));
        }
        Ok(())
    }
}

/// Variant-specific fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    None,
    /// `2C → C` compression of `[detail, upsampled semantic]`.
    Concat(LinearParams),
    Dsff(DsffParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub variant: Variant,
    /// `c_llm → c` for semantic tokens; absent for [`Variant::DetailOnly`].
    pub phi1: Option<LinearParams>,
    /// `c_llm → c` for segmentation tokens.
    pub phi2: LinearParams,
    pub fusion: Fusion,
    pub seg_attn: AttentionParams,
    pub head_k3: Conv2dParams,
    pub head_k5: Conv2dParams,
}

/// Instantiates freshly initialized weights for `config.variant`.
pub fn build_variant(config: &DecoderConfig, rng: &mut Rng) -> Result<DecoderParams> {
    config.validate()?;
    let (c, c_llm) = (config.c, config.c_llm);
    let variant = config.variant;
    let phi1 = (variant != Variant::DetailOnly).then(|| LinearParams::init(c_llm, c, rng));
    let phi2 = LinearParams::init(c_llm, c, rng);
    let fusion = match variant {
        Variant::DetailOnly | Variant::SemanticOnly => Fusion::None,
        Variant::Concat => Fusion::Concat(LinearParams::init(2 * c, c, rng)),
        Variant::Dsff => Fusion::Dsff(DsffParams::init(c, config.key_dim(), config.alpha, rng)),
    };
    let seg_attn = AttentionParams::init(c, config.key_dim(), rng);
    let r2 = config.head_shuffle_r * config.head_shuffle_r;
    let head_k3 = Conv2dParams::init(c, config.head_mid_channels, 3, rng)?;
    let head_k5 = Conv2dParams::init(config.head_mid_channels / r2, 1, 5, rng)?;
    Ok(DecoderParams {
        variant,
        phi1,
        phi2,
        fusion,
        seg_attn,
        head_k3,
        head_k5,
    })
}

impl Params for DecoderParams {
    type Bound<'t> = BoundDecoder<'t>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = &self.phi1 {
            p.visit(&join(prefix, "phi1"), f);
        }
        self.phi2.visit(&join(prefix, "phi2"), f);
        match &self.fusion {
            Fusion::None => {}
            Fusion::Concat(p) => p.visit(&join(prefix, "concat_compress"), f),
            Fusion::Dsff(p) => p.visit(&join(prefix, "dsff"), f),
        }
        self.seg_attn.visit(&join(prefix, "seg_attn"), f);
        self.head_k3.visit(&join(prefix, "head_k3"), f);
        self.head_k5.visit(&join(prefix, "head_k5"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(p) = &mut self.phi1 {
            p.visit_mut(&join(prefix, "phi1"), f);
        }
        self.phi2.visit_mut(&join(prefix, "phi2"), f);
        match &mut self.fusion {
            Fusion::None => {}
            Fusion::Concat(p) => p.visit_mut(&join(prefix, "concat_compress"), f),
            Fusion::Dsff(p) => p.visit_mut(&join(prefix, "dsff"), f),
        }
        self.seg_attn.visit_mut(&join(prefix, "seg_attn"), f);
        self.head_k3.visit_mut(&join(prefix, "head_k3"), f);
        self.head_k5.visit_mut(&join(prefix, "head_k5"), f);
    }

    fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundDecoder<'t> {
        let phi1 = self.phi1.as_ref().map(|p| p.bind(binder));
        let phi2 = self.phi2.bind(binder);
        let fusion = match &self.fusion {
            Fusion::None => BoundFusion::None,
            Fusion::Concat(p) => BoundFusion::Concat(p.bind(binder)),
            Fusion::Dsff(p) => BoundFusion::Dsff(p.bind(binder)),
        };
        BoundDecoder {
            variant: self.variant,
            phi1,
            phi2,
            fusion,
            seg_attn: self.seg_attn.bind(binder),
            head_k3: self.head_k3.bind(binder),
            head_k5: self.head_k5.bind(binder),
        }
    }
}

impl DecoderParams {
    /// Exact number of learnable scalars.
    pub fn count(&self) -> usize {
        self.param_count()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BoundFusion<'t> {
    None,
    Concat(BoundLinear<'t>),
    Dsff(BoundDsff<'t>),
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDecoder<'t> {
    pub variant: Variant,
    pub phi1: Option<BoundLinear<'t>>,
    pub phi2: BoundLinear<'t>,
    pub fusion: BoundFusion<'t>,
    pub seg_attn: BoundAttention<'t>,
    pub head_k3: BoundConv2d<'t>,
    pub head_k5: BoundConv2d<'t>,
}

/// Differentiable decoder outputs for one sample.
pub struct DecoderOutput<'t> {
    /// One `(H, W)` logit map per segmentation token, at `final_mask_hw`.
    pub logits: Vec<Var<'t>>,
    /// Compressed segmentation tokens `(S, C)`.
    pub t1_seg: Var<'t>,
    /// Fusion attention `(H₁·W₁, H₂·W₂)`, present for the full fusion variant.
    pub attn_map: Option<Var<'t>>,
}

impl<'t> BoundDecoder<'t> {
    /// Channel compression of semantic tokens `(N₂, c_llm)` and segmentation
    /// tokens `(S, c_llm)`.
    pub fn compress(&self, t2_img: &Var<'t>, seg_tokens: &Var<'t>) -> Result<(Option<Var<'t>>, Var<'t>)> {
        let t3 = match &self.phi1 {
            Some(phi1) => Some(phi1.forward(t2_img)?),
            None => None,
        };
        Ok((t3, self.phi2.forward(seg_tokens)?))
    }

    /// Image features entering segmentation-token injection, `(C, H₁, W₁)`,
    /// plus the fusion attention when there is one.
    pub fn fuse(
        &self,
        config: &DecoderConfig,
        t1_img: &Var<'t>,
        t3_img: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let [dh, dw] = config.grid_detail;
        let [sh, sw] = config.grid_semantic;
        let detail = || tokens_to_map(t1_img, dh, dw);
        let semantic = || {
            let t3 = t3_img.ok_or_else(|| invalid("decoder_forward", "variant needs semantic tokens"))?;
            tokens_to_map(&t3, sh, sw)
        };
        match (&self.fusion, self.variant) {
            (BoundFusion::None, Variant::DetailOnly) => Ok((detail()?, None)),
            (BoundFusion::None, Variant::SemanticOnly) => Ok((upsample_bilinear(&semantic()?, dh, dw)?, None)),
            (BoundFusion::Concat(compress), Variant::Concat) => {
                let up = upsample_bilinear(&semantic()?, dh, dw)?;
                let stacked = Var::concat(&[detail()?, up])?;
                let fused = compress.forward(&map_to_tokens(&stacked)?)?;
                Ok((tokens_to_map(&fused, dh, dw)?, None))
            }
            (BoundFusion::Dsff(dsff), Variant::Dsff) => {
                let out = dsff.forward(&detail()?, &semantic()?)?;
                Ok((out.fused, Some(out.attn_map)))
            }
            (_, v) => Err(invalid("decoder_forward", format!("fusion weights do not match variant {v}"))),
        }
    }

    /// For each segmentation token, cross-attention from every position of
    /// `t0_ds` to that single token, plus `t0_ds` residually.
    pub fn inject_seg(&self, t0_ds: &Var<'t>, t1_seg: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let d = t0_ds.dims();
        let s = t1_seg.dims()[0];
        if s == 0 {
            return Err(invalid("inject_seg", "no segmentation tokens"));
        }
        if d.len() != 3 || t1_seg.dims()[1] != d[0] {
            return Err(invalid(
                "inject_seg",
                format!("map {d:?} and tokens {:?} disagree on width", t1_seg.dims()),
            ));
        }
        let queries = map_to_tokens(t0_ds)?;
        (0..s)
            .map(|k| {
                let token = t1_seg.slice(k, 1)?;
                let (attended, _) = self.seg_attn.forward(&queries, &token)?;
                tokens_to_map(&attended.add(&queries)?, d[1], d[2])
            })
            .collect()
    }

    /// `(C, H, W)` → `(final_h, final_w)` logits.
    pub fn mask_head(&self, config: &DecoderConfig, t1_ds: &Var<'t>) -> Result<Var<'t>> {
        let mid = self.head_k3.forward(t1_ds)?;
        let shuffled = mid.pixel_shuffle(config.head_shuffle_r)?;
        let logits = self.head_k5.forward(&shuffled)?;
        let [fh, fw] = config.final_mask_hw;
        upsample_bilinear(&logits, fh, fw)?.reshape(vec![fh, fw])
    }

    /// Detail tokens `(N₁, C)`, semantic tokens `(N₂, c_llm)`, segmentation
    /// tokens `(S, c_llm)`.
    pub fn forward(
        &self,
        config: &DecoderConfig,
        t1_img: &Var<'t>,
        t2_img: &Var<'t>,
        seg_tokens: &Var<'t>,
    ) -> Result<DecoderOutput<'t>> {
        check_inputs(config, &t1_img.dims(), &t2_img.dims(), &seg_tokens.dims())?;
        let (t3, t1_seg) = self.compress(t2_img, seg_tokens)?;
        let (t0_ds, attn_map) = self.fuse(config, t1_img, t3)?;
        let logits = self
            .inject_seg(&t0_ds, &t1_seg)?
            .iter()
            .map(|t1_ds| self.mask_head(config, t1_ds))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderOutput {
            logits,
            t1_seg,
            attn_map,
        })
    }
}

fn check_inputs(config: &DecoderConfig, t1: &[usize], t2: &[usize], seg: &[usize]) -> Result<()> {
    let n1 = config.grid_detail[0] * config.grid_detail[1];
    let n2 = config.grid_semantic[0] * config.grid_semantic[1];
    let op = "decoder_forward";
    if t1 != [n1, config.c] {
        return Err(invalid(op, format!("detail tokens {t1:?}, expected [{n1}, {}]", config.c)));
    }
    if t2 != [n2, config.c_llm] {
        return Err(invalid(op, format!("semantic tokens {t2:?}, expected [{n2}, {}]", config.c_llm)));
    }
    if seg.len() != 2 || seg[1] != config.c_llm || seg[0] == 0 {
        return Err(invalid(op, format!("segmentation tokens {seg:?}, expected [S >= 1, {}]", config.c_llm)));
    }
    Ok(())
}

/// `[SEG]` hidden states and whether each was predicted as `[REJ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTokenSet {
    pub tokens: Tensor,
    pub rej_flags: Vec<bool>,
}

impl SegTokenSet {
    pub fn new(tokens: Tensor, rej_flags: Vec<bool>) -> Result<Self> {
        if tokens.rank() != 2 || tokens.dims()[0] != rej_flags.len() || rej_flags.is_empty() {
            return Err(invalid(
                "SegTokenSet",
                format!("{} flags for tokens {:?}", rej_flags.len(), tokens.dims()),
            ));
        }
        Ok(Self { tokens, rej_flags })
    }

    pub fn len(&self) -> usize {
        self.rej_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rej_flags.is_empty()
    }
}

/// Binarization threshold on sigmoid probabilities.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPrediction {
    pub per_token_logits: Vec<Tensor>,
    pub per_token_probs: Vec<Tensor>,
    /// Union of the binarized masks of tokens not flagged `[REJ]`.
    pub merged_binary: Mask,
    pub rej_flags: Vec<bool>,
    pub attn_map: Option<Tensor>,
}

impl MaskPrediction {
    pub fn from_logits(logits: Vec<Tensor>, rej_flags: Vec<bool>, attn_map: Option<Tensor>) -> Self {
        let probs: Vec<Tensor> = logits.iter().map(|l| l.map(sigmoid)).collect();
        let (h, w) = (logits[0].dims()[0], logits[0].dims()[1]);
        let mut merged = Mask::empty(h, w);
        for (p, &rej) in probs.iter().zip(&rej_flags) {
            if !rej {
                merged.union_with(&Mask::from_probs(p, MASK_THRESHOLD));
            }
        }
        Self {
            per_token_logits: logits,
            per_token_probs: probs,
            merged_binary: merged,
            rej_flags,
            attn_map,
        }
    }

    /// Every token was rejected.
    pub fn no_target(&self) -> bool {
        self.rej_flags.iter().all(|&r| r)
    }
}

/// Inference pass over plain tensors.
pub fn decoder_forward(
    t1_img: &Tensor,
    t2_img: &Tensor,
    seg: &SegTokenSet,
    params: &DecoderParams,
    config: &DecoderConfig,
) -> Result<MaskPrediction> {
    if params.variant != config.variant {
        return Err(invalid(
            "decoder_forward",
            format!("params built for {} but config says {}", params.variant, config.variant),
        ));
    }
    let tape = Tape::new();
    let mut binder = Binder::new(&tape, false);
    let dec = params.bind(&mut binder);
    let out = dec.forward(
        config,
        &tape.constant(t1_img.clone()),
        &tape.constant(t2_img.clone()),
        &tape.constant(seg.tokens.clone()),
    )?;
    let logits = out.logits.iter().map(|l| l.value().as_ref().clone()).collect();
    let attn = out.attn_map.map(|a| a.value().as_ref().clone());
    Ok(MaskPrediction::from_logits(logits, seg.rej_flags.clone(), attn))
}
