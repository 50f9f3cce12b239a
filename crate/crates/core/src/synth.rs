//! Synthetic referring-segmentation tasks: flat-colored shapes on a dim
//! noise background, referred to by color and shape.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::Mask;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    White,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::White];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.9, 0.1],
            Color::Blue => [0.1, 0.1, 0.9],
            Color::White => [0.9, 0.9, 0.9],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::White => "white",
        }
    }

    fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).expect("listed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Rect,
    Disk,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Rect, Shape::Disk, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Rect => "rectangle",
            Shape::Disk => "disk",
            Shape::Triangle => "triangle",
        }
    }

    fn index(self) -> usize {
        Shape::ALL.iter().position(|&s| s == self).expect("listed")
    }
}

/// A referring expression, e.g. "red disk".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Expression {
    pub color: Color,
    pub shape: Shape,
}

impl Expression {
    pub const COUNT: usize = Color::ALL.len() * Shape::ALL.len();

    pub fn id(self) -> usize {
        self.color.index() * Shape::ALL.len() + self.shape.index()
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id >= Self::COUNT {
            return Err(invalid("Expression::from_id", format!("id {id} >= {}", Self::COUNT)));
        }
        Ok(Self {
            color: Color::ALL[id / Shape::ALL.len()],
            shape: Shape::ALL[id % Shape::ALL.len()],
        })
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub image_hw: [usize; 2],
    pub max_objects: usize,
    /// Object extents in pixels, inclusive range.
    pub min_size: usize,
    pub max_size: usize,
    /// Background pixels are uniform in `[0, noise]` per channel.
    pub noise: f64,
    /// Probability that the expression names something absent.
    pub p_empty: f64,
    /// Probability that the referred object appears twice.
    pub p_dup: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_hw: [64, 64],
            max_objects: 3,
            min_size: 14,
            max_size: 22,
            noise: 0.15,
            p_empty: 0.25,
            p_dup: 0.2,
        }
    }
}

/// Class ids of the surrogate text loss.
pub const REJ_ID: usize = 0;
pub const SEG_ID: usize = 1;

/// Placement attempts per object before it is dropped.
const PLACEMENT_TRIES: usize = 64;
/// Minimum free pixels between object boxes.
const GAP: usize = 2;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_hw;
        let op = "GenConfig";
        if self.max_objects == 0 || self.max_objects >= Color::ALL.len() {
            return Err(invalid(op, format!("max_objects must be in 1..{}", Color::ALL.len())));
        }
        if self.min_size < 3 || self.min_size > self.max_size || self.max_size > h.min(w) {
            return Err(invalid(op, "need 3 <= min_size <= max_size <= image side"));
        }
        for (name, p) in [("p_empty", self.p_empty), ("p_dup", self.p_dup)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(op, format!("{name} = {p} is not a probability")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(invalid(op, "noise must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub color: Color,
    pub shape: Shape,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `(3, H, W)` in `[0, 1]`.
    pub image: Tensor,
    pub expression: Expression,
    pub objects: Vec<Object>,
    /// One mask per referred object; empty when `no_target`.
    pub gt_masks: Vec<Mask>,
    pub no_target: bool,
    /// One class id per segmentation token: [`SEG_ID`] per target, a single
    /// [`REJ_ID`] when nothing is referred.
    pub text_target_ids: Vec<usize>,
}

impl SynthSample {
    pub fn expression_id(&self) -> usize {
        self.expression.id()
    }

    /// Union of all ground-truth masks.
    pub fn gt_union(&self) -> Mask {
        let [h, w] = [self.image.dims()[1], self.image.dims()[2]];
        let mut m = Mask::empty(h, w);
        for g in &self.gt_masks {
            m.union_with(g);
        }
        m
    }

    pub fn token_count(&self) -> usize {
        self.text_target_ids.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Placed {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
}

impl Placed {
    fn clear_of(&self, o: &Placed) -> bool {
        self.y0 + self.h + GAP <= o.y0
            || o.y0 + o.h + GAP <= self.y0
            || self.x0 + self.w + GAP <= o.x0
            || o.x0 + o.w + GAP <= self.x0
    }
}

fn rasterize(shape: Shape, p: Placed, img_h: usize, img_w: usize) -> Mask {
    let (cy, cx) = (p.y0 as f64 + p.h as f64 / 2.0, p.x0 as f64 + p.w as f64 / 2.0);
    Mask::from_fn(img_h, img_w, |y, x| {
        if y < p.y0 || y >= p.y0 + p.h || x < p.x0 || x >= p.x0 + p.w {
            return false;
        }
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match shape {
            Shape::Rect => true,
            Shape::Disk => {
                let (ry, rx) = (p.h as f64 / 2.0, p.w as f64 / 2.0);
                ((py - cy) / ry).powi(2) + ((px - cx) / rx).powi(2) <= 1.0
            }
            Shape::Triangle => {
                // apex at the top center, base along the bottom edge
                let t = (py - p.y0 as f64) / p.h as f64;
                (px - cx).abs() <= t * p.w as f64 / 2.0
            }
        }
    })
}

/// Draws one task from `rng`.
pub fn gen_sample(rng: &mut Rng, cfg: &GenConfig) -> Result<SynthSample> {
    cfg.validate()?;
    let [h, w] = cfg.image_hw;
    let n = 1 + rng.below(cfg.max_objects);
    let no_target = rng.bernoulli(cfg.p_empty);
    let dup = !no_target && n >= 2 && rng.bernoulli(cfg.p_dup);

    let mut palette = Color::ALL.to_vec();
    for i in (1..palette.len()).rev() {
        palette.swap(i, rng.below(i + 1));
    }
    let mut kinds: Vec<(Color, Shape)> = (0..n)
        .map(|i| (palette[i], Shape::ALL[rng.below(Shape::ALL.len())]))
        .collect();
    if dup {
        kinds[1] = kinds[0];
    }

    let mut placed: Vec<Placed> = Vec::new();
    let mut objects = Vec::new();
    for &(color, shape) in &kinds {
        let span = cfg.max_size - cfg.min_size + 1;
        let (oh, ow) = match shape {
            Shape::Rect => (cfg.min_size + rng.below(span), cfg.min_size + rng.below(span)),
            Shape::Disk | Shape::Triangle => {
                let d = cfg.min_size + rng.below(span);
                (d, d)
            }
        };
        let spot = (0..PLACEMENT_TRIES).find_map(|_| {
            let p = Placed {
                y0: rng.below(h - oh + 1),
                x0: rng.below(w - ow + 1),
                h: oh,
                w: ow,
            };
            placed.iter().all(|q| p.clear_of(q)).then_some(p)
        });
        if let Some(p) = spot {
            placed.push(p);
            objects.push(Object {
                color,
                shape,
                mask: rasterize(shape, p, h, w),
            });
        }
    }

    let mut image = Tensor::zeros(vec![3, h, w]);
    for v in image.data_mut() {
        *v = rng.uniform(0.0, cfg.noise);
    }
    for o in &objects {
        let rgb = o.color.rgb();
        for (i, _) in o.mask.bits().iter().enumerate().filter(|(_, &b)| b) {
            for (c, &v) in rgb.iter().enumerate() {
                image.data_mut()[c * h * w + i] = v;
            }
        }
    }

    let expression = if no_target {
        let absent: Vec<Color> = Color::ALL
            .into_iter()
            .filter(|c| objects.iter().all(|o| o.color != *c))
            .collect();
        Expression {
            color: absent[rng.below(absent.len())],
            shape: Shape::ALL[rng.below(Shape::ALL.len())],
        }
    } else {
        let t = &objects[rng.below(objects.len())];
        Expression {
            color: t.color,
            shape: t.shape,
        }
    };
    let gt_masks: Vec<Mask> = objects
        .iter()
        .filter(|o| o.color == expression.color && o.shape == expression.shape)
        .map(|o| o.mask.clone())
        .collect();
    let text_target_ids = if gt_masks.is_empty() {
        vec![REJ_ID]
    } else {
        vec![SEG_ID; gt_masks.len()]
    };
    Ok(SynthSample {
        image,
        expression,
        objects,
        gt_masks,
        no_target,
        text_target_ids,
    })
}

/// The `index`-th task of the stream identified by `seed`.
pub fn sample_at(seed: u64, index: u64, cfg: &GenConfig) -> Result<SynthSample> {
    gen_sample(&mut Rng::derive(seed, index), cfg)
}
