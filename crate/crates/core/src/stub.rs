//! Frozen stand-ins for the vision encoder and the language model.
//!
//! The vision encoder is a seeded random projection of raw patch pixels. The
//! language model pools detail tokens 2×2, lifts them to its own width, and
//! adds an expression embedding plus a relevance direction scaled by how much
//! of each region shows the referred color. Segmentation tokens embed the
//! expression, the token slot, and whether the referred color was seen
//! anywhere. None of these weights are trained.
//!
//! Color coverage is read from the image rather than from the detail tokens:
//! a low-dimensional random projection cannot tell a partly covered white
//! patch from a red one, while the real language model sees deep visual
//! features that can.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::synth::{Color, Expression, SynthSample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubConfig {
    /// Seed of the frozen stub weights, independent of the training seed.
    pub seed: u64,
    pub patch: usize,
    /// Scale of the relevance and presence directions.
    #[serde(default = "default_gain")]
    pub relevance_gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            patch: 8,
            relevance_gain: default_gain(),
        }
    }
}

/// Most segmentation tokens a sample may request.
pub const MAX_SLOTS: usize = 8;
/// Per-channel tolerance when matching a pixel to a palette color.
const COLOR_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct StubFeatures {
    /// Detail tokens `(N₁, C)`.
    pub t1_img: Tensor,
    /// Semantic tokens `(N₂, c_llm)`.
    pub t2_img: Tensor,
    /// Segmentation-token hidden states `(S, c_llm)`.
    pub seg_tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct Stub {
    cfg: StubConfig,
    c: usize,
    c_llm: usize,
    grid: [usize; 2],
    /// `(C, 3·patch²)`.
    proj: Tensor,
    bias: Vec<f64>,
    /// `(c_llm, C)`.
    lift: Tensor,
    expr_emb: Tensor,
    rel_dir: Vec<f64>,
    seg_emb: Tensor,
    slot_emb: Tensor,
    presence_dir: Vec<f64>,
}

fn gaussian(rng: &mut Rng, dims: Vec<usize>, std: f64) -> Tensor {
    let mut t = Tensor::zeros(dims);
    for v in t.data_mut() {
        *v = std * rng.normal();
    }
    t
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = m.dims()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl Stub {
    pub fn new(cfg: StubConfig, decoder: &DecoderConfig) -> Result<Self> {
        let (c, c_llm) = (decoder.c, decoder.c_llm);
        if cfg.patch == 0 || !cfg.relevance_gain.is_finite() {
            return Err(invalid("Stub::new", "patch must be positive and gain finite"));
        }
        let pix = 3 * cfg.patch * cfg.patch;
        let mut rng = Rng::new(cfg.seed);
        let proj = gaussian(&mut rng, vec![c, pix], 1.0 / (pix as f64).sqrt());
        let bias = gaussian(&mut rng, vec![c], 0.1).into_data();
        let lift = gaussian(&mut rng, vec![c_llm, c], 1.0 / (c as f64).sqrt());
        let expr_emb = gaussian(&mut rng, vec![Expression::COUNT, c_llm], 0.5);
        let rel_dir = gaussian(&mut rng, vec![c_llm], 1.0).into_data();
        let seg_emb = gaussian(&mut rng, vec![Expression::COUNT, c_llm], 0.5);
        let slot_emb = gaussian(&mut rng, vec![MAX_SLOTS, c_llm], 0.25);
        let presence_dir = gaussian(&mut rng, vec![c_llm], 1.0).into_data();
        Ok(Self {
            cfg,
            c,
            c_llm,
            grid: decoder.grid_detail,
            proj,
            bias,
            lift,
            expr_emb,
            rel_dir,
            seg_emb,
            slot_emb,
            presence_dir,
        })
    }

    pub fn config(&self) -> &StubConfig {
        &self.cfg
    }

    /// `(3, H, W)` image to `(H/p · W/p, C)` detail tokens, patches in
    /// row-major order.
    pub fn vision_encode(&self, image: &Tensor) -> Result<Tensor> {
        let p = self.cfg.patch;
        let (h, w) = match image.dims() {
            [3, h, w] => (*h, *w),
            d => return Err(invalid("stub_vision_encode", format!("expected (3, H, W), got {d:?}"))),
        };
        if h % p != 0 || w % p != 0 {
            return Err(invalid("stub_vision_encode", format!("{h}x{w} not divisible by patch {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Vec::with_capacity(gh * gw * self.c);
        let mut x = vec![0.0; 3 * p * p];
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..3 {
                    for dy in 0..p {
                        let src = ch * h * w + (py * p + dy) * w + px * p;
                        let dst = ch * p * p + dy * p;
                        x[dst..dst + p].copy_from_slice(&image.data()[src..src + p]);
                    }
                }
                let t = matvec(&self.proj, &x);
                out.extend(t.iter().zip(&self.bias).map(|(a, b)| a + b));
            }
        }
        Tensor::new(vec![gh * gw, self.c], out)
    }

    /// Fraction of each patch's pixels showing `color`, patches in
    /// row-major order.
    pub fn coverage(&self, image: &Tensor, color: Color) -> Result<Vec<f64>> {
        let p = self.cfg.patch;
        let (h, w) = match image.dims() {
            [3, h, w] if h % p == 0 && w % p == 0 => (*h, *w),
            d => return Err(invalid("stub coverage", format!("{d:?} is not a (3, H, W) image in {p}px patches"))),
        };
        let rgb = color.rgb();
        let (gh, gw) = (h / p, w / p);
        let mut out = vec![0.0; gh * gw];
        for y in 0..h {
            for x in 0..w {
                let hit = (0..3).all(|c| (image.data()[c * h * w + y * w + x] - rgb[c]).abs() < COLOR_TOLERANCE);
                if hit {
                    out[(y / p) * gw + x / p] += 1.0 / (p * p) as f64;
                }
            }
        }
        Ok(out)
    }

    /// Semantic tokens `(N₂, c_llm)` and `n_tokens` segmentation tokens.
    /// `coverage` is [`Stub::coverage`] of the referred color.
    pub fn llm(
        &self,
        t1_img: &Tensor,
        coverage: &[f64],
        expression: Expression,
        n_tokens: usize,
    ) -> Result<(Tensor, Tensor)> {
        let [gh, gw] = self.grid;
        if t1_img.dims() != [gh * gw, self.c] {
            return Err(invalid(
                "stub_llm",
                format!("detail tokens {:?}, expected [{}, {}]", t1_img.dims(), gh * gw, self.c),
            ));
        }
        if coverage.len() != gh * gw {
            return Err(invalid("stub_llm", format!("{} coverage values for {gh}x{gw} patches", coverage.len())));
        }
        if n_tokens == 0 || n_tokens > MAX_SLOTS {
            return Err(invalid("stub_llm", format!("token count {n_tokens} outside 1..={MAX_SLOTS}")));
        }
        let gain = self.cfg.relevance_gain;
        let pooled = pool2x2(t1_img, gh, gw)?;
        let (sh, sw) = (gh / 2, gw / 2);
        let e = expression.id();
        let emb = &self.expr_emb.data()[e * self.c_llm..(e + 1) * self.c_llm];
        let mut t2 = Vec::with_capacity(sh * sw * self.c_llm);
        for (j, cell) in pooled.data().chunks(self.c).enumerate() {
            let (y, x) = (j / sw, j % sw);
            let r = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|(dy, dx)| coverage[(2 * y + dy) * gw + 2 * x + dx])
                .sum::<f64>()
                / 4.0;
            let lifted = matvec(&self.lift, cell);
            t2.extend((0..self.c_llm).map(|k| lifted[k] + emb[k] + gain * r * self.rel_dir[k]));
        }
        let presence = coverage.iter().copied().fold(0.0, f64::max);
        let seg_e = &self.seg_emb.data()[e * self.c_llm..(e + 1) * self.c_llm];
        let mut seg = Vec::with_capacity(n_tokens * self.c_llm);
        for s in 0..n_tokens {
            let slot = &self.slot_emb.data()[s * self.c_llm..(s + 1) * self.c_llm];
            seg.extend((0..self.c_llm).map(|k| seg_e[k] + slot[k] + gain * presence * self.presence_dir[k]));
        }
        Ok((
            Tensor::new(vec![sh * sw, self.c_llm], t2)?,
            Tensor::new(vec![n_tokens, self.c_llm], seg)?,
        ))
    }

    pub fn features(&self, sample: &SynthSample) -> Result<StubFeatures> {
        let t1_img = self.vision_encode(&sample.image)?;
        let coverage = self.coverage(&sample.image, sample.expression.color)?;
        let (t2_img, seg_tokens) = self.llm(&t1_img, &coverage, sample.expression, sample.token_count())?;
        Ok(StubFeatures {
            t1_img,
            t2_img,
            seg_tokens,
        })
    }
}

/// Averages each 2×2 block of a `(gh·gw, C)` token grid.
pub fn pool2x2(tokens: &Tensor, gh: usize, gw: usize) -> Result<Tensor> {
    let c = tokens.dims()[1];
    if gh % 2 != 0 || gw % 2 != 0 || tokens.dims()[0] != gh * gw {
        return Err(invalid("pool2x2", format!("{:?} is not an even {gh}x{gw} grid", tokens.dims())));
    }
    let (sh, sw) = (gh / 2, gw / 2);
    let mut out = vec![0.0; sh * sw * c];
    for y in 0..gh {
        for x in 0..gw {
            let dst = ((y / 2) * sw + x / 2) * c;
            let src = (y * gw + x) * c;
            for k in 0..c {
                out[dst + k] += 0.25 * tokens.data()[src + k];
            }
        }
    }
    Tensor::new(vec![sh * sw, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_at, GenConfig, Shape};

    fn stub() -> Stub {
        Stub::new(StubConfig::default(), &DecoderConfig::desk()).unwrap()
    }

    #[test]
    fn token_counts() {
        let s = stub();
        let sample = sample_at(1, 0, &GenConfig::default()).unwrap();
        let f = s.features(&sample).unwrap();
        assert_eq!(f.t1_img.dims(), &[64, 32]);
        assert_eq!(f.t2_img.dims(), &[16, 64]);
        assert_eq!(f.t2_img.dims()[0] * 4, f.t1_img.dims()[0]);
        assert_eq!(f.seg_tokens.dims(), &[sample.token_count(), 64]);
    }

    #[test]
    fn zero_image_gives_bias_rows() {
        let s = stub();
        let t1 = s.vision_encode(&Tensor::zeros(vec![3, 64, 64])).unwrap();
        for row in t1.data().chunks(32) {
            assert_eq!(row, s.bias.as_slice());
        }
        assert!(s.vision_encode(&Tensor::zeros(vec![3, 60, 64])).is_err());
    }

    #[test]
    fn edits_stay_local_to_their_patch() {
        let s = stub();
        let img = sample_at(2, 0, &GenConfig::default()).unwrap().image;
        let mut edited = img.clone();
        // pixel (y=13, x=42) lies in patch row 1, column 5
        edited.data_mut()[64 * 64 + 13 * 64 + 42] += 0.5;
        let (a, b) = (s.vision_encode(&img).unwrap(), s.vision_encode(&edited).unwrap());
        for (i, (ra, rb)) in a.data().chunks(32).zip(b.data().chunks(32)).enumerate() {
            assert_eq!(ra == rb, i != 8 + 5, "patch {i}");
        }
    }

    #[test]
    fn expression_conditions_semantic_tokens_only() {
        let s = stub();
        let img = sample_at(3, 0, &GenConfig::default()).unwrap().image;
        let red = Expression { color: Color::Red, shape: Shape::Disk };
        let blue = Expression { color: Color::Blue, shape: Shape::Rect };
        let t1 = s.vision_encode(&img).unwrap();
        let (ta, _) = s.llm(&t1, &s.coverage(&img, red.color).unwrap(), red, 1).unwrap();
        let (tb, _) = s.llm(&t1, &s.coverage(&img, blue.color).unwrap(), blue, 1).unwrap();
        assert_ne!(ta, tb);
    }

    #[test]
    fn pooling_averages_blocks() {
        let t = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(pool2x2(&t, 2, 2).unwrap().data(), &[3.0]);
        let t = Tensor::new(vec![8, 1], (0..8).map(f64::from).collect()).unwrap();
        // grid 2x4: blocks {0,1,4,5} and {2,3,6,7}
        assert_eq!(pool2x2(&t, 2, 4).unwrap().data(), &[2.5, 4.5]);
    }

    #[test]
    fn coverage_counts_referred_pixels() {
        let s = stub();
        for i in 0..50 {
            let sample = sample_at(4, i, &GenConfig::default()).unwrap();
            let cov = s.coverage(&sample.image, sample.expression.color).unwrap();
            let gt = sample.gt_union();
            for (p, c) in cov.iter().enumerate() {
                let (py, px) = (p / 8, p % 8);
                let n = (0..64).filter(|q| gt.get(py * 8 + q / 8, px * 8 + q % 8)).count();
                assert_eq!(*c, n as f64 / 64.0);
            }
        }
    }

    #[test]
    fn semantic_tokens_without_coverage_are_lifted_pools_plus_embedding() {
        let s = stub();
        let img = sample_at(6, 0, &GenConfig::default()).unwrap().image;
        let t1 = s.vision_encode(&img).unwrap();
        let e = Expression { color: Color::Green, shape: Shape::Triangle };
        let (t2, _) = s.llm(&t1, &[0.0; 64], e, 1).unwrap();
        let pooled = pool2x2(&t1, 8, 8).unwrap();
        let emb = &s.expr_emb.data()[e.id() * 64..(e.id() + 1) * 64];
        for (row, cell) in t2.data().chunks(64).zip(pooled.data().chunks(32)) {
            let lifted = matvec(&s.lift, cell);
            for k in 0..64 {
                assert!((row[k] - lifted[k] - emb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let sample = sample_at(5, 5, &GenConfig::default()).unwrap();
        let a = stub().features(&sample).unwrap();
        let b = stub().features(&sample).unwrap();
        assert_eq!(a, b);
        let other = Stub::new(StubConfig { seed: 8, ..StubConfig::default() }, &DecoderConfig::desk()).unwrap();
        assert_ne!(other.features(&sample).unwrap().t1_img, a.t1_img);
    }
}
