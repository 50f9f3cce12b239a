//! Adam training of the decoder and the `[REJ]` classifier on streamed
//! synthetic batches.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::{build_variant, BoundDecoder, DecoderConfig, DecoderParams};
use crate::error::{invalid, Error, Result};
use crate::loss::{ce_loss, mask_loss, total_loss, LossConfig};
use crate::metrics::Mask;
use crate::nn::{join, Binder, BoundLinear, LinearParams, Params};
use crate::rng::Rng;
use crate::stub::{Stub, StubConfig};
use crate::synth::{sample_at, GenConfig, SynthSample, REJ_ID, SEG_ID};
use crate::tensor::Tensor;

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub loss: LossConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub gen: GenConfig,
    #[serde(default)]
    pub stub: StubConfig,
}

impl TrainConfig {
    /// The desk reference run: 2000 steps of batch 8 at seed 42.
    pub fn desk() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 42,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            loss: LossConfig::default(),
            decoder: DecoderConfig::desk(),
            gen: GenConfig::default(),
            stub: StubConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite())
            || !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        self.loss.validate()?;
        self.decoder.validate()?;
        self.gen.validate()?;
        let [h, w] = self.gen.image_hw;
        let p = self.stub.patch;
        if [h / p.max(1), w / p.max(1)] != self.decoder.grid_detail || h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!(
                "{h}x{w} images in {p}px patches do not give the {:?} detail grid",
                self.decoder.grid_detail
            )));
        }
        Ok(())
    }
}

/// Everything that is trained: the decoder plus the `[REJ]`/`[SEG]` head on
/// compressed segmentation tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub decoder: DecoderParams,
    /// `C → 2`; class 0 is `[REJ]`, class 1 is `[SEG]`.
    pub rej_head: LinearParams,
}

impl Model {
    pub fn init(config: &DecoderConfig, rng: &mut Rng) -> Result<Self> {
        let decoder = build_variant(config, rng)?;
        let rej_head = LinearParams::init(config.c, 2, rng);
        Ok(Self { decoder, rej_head })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundModel<'t> {
    pub decoder: BoundDecoder<'t>,
    pub rej_head: BoundLinear<'t>,
}

impl Params for Model {
    type Bound<'t> = BoundModel<'t>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.rej_head.visit(&join(prefix, "rej_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.rej_head.visit_mut(&join(prefix, "rej_head"), f);
    }

    fn bind<'t>(&self, binder: &mut Binder<'t>) -> BoundModel<'t> {
        BoundModel {
            decoder: self.decoder.bind(binder),
            rej_head: self.rej_head.bind(binder),
        }
    }
}

/// `[REJ]`/`[SEG]` logits `(S, 2)` per compressed segmentation token.
pub fn rej_head<'t>(t1_seg: &Var<'t>, head: &BoundLinear<'t>) -> Result<Var<'t>> {
    head.forward(t1_seg)
}

/// `argmax == REJ`, ties going to `[SEG]`.
pub fn rej_flags(logits: &Tensor) -> Vec<bool> {
    logits
        .data()
        .chunks(2)
        .map(|row| row[REJ_ID] > row[SEG_ID])
        .collect()
}

/// Adaptive-moment descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `grads[i]` belongs to the `i`-th tensor in visit order.
    pub fn step(&mut self, params: &mut impl Params, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let (g, m, v) = (grads[i].data(), &mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.epsilon);
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub text_loss: f64,
    pub mask_loss: f64,
}

/// `step,loss,text_loss,mask_loss` rows with a header.
pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("step,loss,text_loss,mask_loss\n");
    for p in curve {
        s.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.text_loss, p.mask_loss));
    }
    s
}

/// Per-sample losses on an already bound model.
pub struct SampleLoss<'t> {
    pub text: Var<'t>,
    pub mask: Var<'t>,
}

/// Ground truth each token is trained toward: the union of referred masks
/// (empty for `[REJ]`), resized to the output resolution.
pub fn token_target(sample: &SynthSample, hw: [usize; 2]) -> Tensor {
    let m: Mask = sample.gt_union();
    m.resize_nearest(hw[0], hw[1]).to_tensor()
}

pub fn sample_loss<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    stub: &Stub,
    config: &TrainConfig,
    sample: &SynthSample,
) -> Result<SampleLoss<'t>> {
    let feats = stub.features(sample)?;
    let out = model.decoder.forward(
        &config.decoder,
        &tape.constant(feats.t1_img),
        &tape.constant(feats.t2_img),
        &tape.constant(feats.seg_tokens),
    )?;
    let logits = rej_head(&out.t1_seg, &model.rej_head)?;
    let text = ce_loss(&logits, &sample.text_target_ids)?;
    let target = token_target(sample, config.decoder.final_mask_hw);
    let mut mask = None;
    for l in &out.logits {
        let per = mask_loss(&l.sigmoid(), &target, &config.loss)?;
        mask = Some(match mask {
            None => per,
            Some(acc) => per.add(&acc)?,
        });
    }
    let mask = mask
        .ok_or_else(|| invalid("sample_loss", "no segmentation tokens"))?
        .scale(1.0 / out.logits.len() as f64);
    Ok(SampleLoss { text, mask })
}

/// Training sample `index` of a run seeded with `seed`.
pub fn train_sample(seed: u64, index: u64, gen: &GenConfig) -> Result<SynthSample> {
    sample_at(seed, index, gen)
}

/// Overflow inside the forward pass means the loss is NaN at `step`.
fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFiniteLoss { step, loss: f64::NAN },
        e => e,
    }
}

/// Stream index reserved for weight initialization.
const INIT_STREAM: u64 = u64::MAX;

pub fn init_model(config: &TrainConfig) -> Result<Model> {
    Model::init(&config.decoder, &mut Rng::derive(config.seed, INIT_STREAM))
}

pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
}

/// Stepwise optimizer over the streamed task batches of one run.
pub struct Trainer {
    config: TrainConfig,
    stub: Stub,
    model: Model,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let stub = Stub::new(config.stub, &config.decoder)?;
        let model = init_model(&config)?;
        let adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.epsilon);
        Ok(Self { config, stub, model, adam, step: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn stub(&self) -> &Stub {
        &self.stub
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// One optimizer step on batch number `steps_done()`. The run may go on
    /// past `config.steps`.
    pub fn step(&mut self) -> Result<CurvePoint> {
        let step = self.step;
        let b = self.config.batch_size;
        // diverged weights would make the loss NaN; report it before the
        // forward pass trips over them
        let mut finite = true;
        self.model.visit("", &mut |_, t| finite &= t.all_finite());
        if !finite {
            return Err(Error::NonFiniteLoss { step, loss: f64::NAN });
        }
        let tape = Tape::new();
        let mut binder = Binder::new(&tape, true);
        let bound = self.model.bind(&mut binder);
        let mut text_sum: Option<Var> = None;
        let mut mask_sum: Option<Var> = None;
        for k in 0..b {
            let sample = train_sample(self.config.seed, (step * b + k) as u64, &self.config.gen)?;
            let l = sample_loss(&tape, &bound, &self.stub, &self.config, &sample).map_err(|e| diverged(e, step))?;
            text_sum = Some(match text_sum {
                None => l.text,
                Some(acc) => acc.add(&l.text)?,
            });
            mask_sum = Some(match mask_sum {
                None => l.mask,
                Some(acc) => acc.add(&l.mask)?,
            });
        }
        let text = text_sum.expect("batch_size > 0").scale(1.0 / b as f64);
        let mask = mask_sum.expect("batch_size > 0").scale(1.0 / b as f64);
        let total = total_loss(&text, &mask, &self.config.loss)?;
        let point = CurvePoint {
            step,
            loss: total.value().item(),
            text_loss: text.value().item(),
            mask_loss: mask.value().item(),
        };
        if !point.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: point.loss });
        }
        let grads = tape.backward(total)?;
        let g: Vec<Tensor> = binder.vars.iter().map(|&v| grads.wrt(v)).collect();
        drop(binder);
        self.adam.step(&mut self.model, &g);
        self.step += 1;
        Ok(point)
    }
}

/// Runs `config.steps` optimizer steps; `on_step` sees every curve point.
pub fn train_with(config: &TrainConfig, mut on_step: impl FnMut(&CurvePoint)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut curve = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let point = trainer.step()?;
        on_step(&point);
        curve.push(point);
    }
    Ok(TrainOutcome { model: trainer.into_model(), curve })
}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(config, |_| {})
}

/// Mean of each quarter of the window-`w` moving average of the loss.
pub fn smoothed_quartiles(curve: &[CurvePoint], w: usize) -> Option<[f64; 4]> {
    if w == 0 || curve.len() < w + 3 {
        return None;
    }
    let smooth: Vec<f64> = curve
        .windows(w)
        .map(|win| win.iter().map(|p| p.loss).sum::<f64>() / w as f64)
        .collect();
    let n = smooth.len();
    let mut q = [0.0; 4];
    for (i, slot) in q.iter_mut().enumerate() {
        let part = &smooth[i * n / 4..(i + 1) * n / 4];
        *slot = part.iter().sum::<f64>() / part.len() as f64;
    }
    Some(q)
}
