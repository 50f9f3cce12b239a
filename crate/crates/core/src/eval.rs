//! Held-out evaluation under the GRES protocol.

use crate::autodiff::Tape;
use crate::decoder::{DecoderConfig, MaskPrediction};
use crate::error::Result;
use crate::metrics::{EvalRecord, Mask, MetricsReport};
use crate::nn::{Binder, Params};
use crate::stub::Stub;
use crate::synth::{sample_at, GenConfig, SynthSample};
use crate::train::{rej_flags, rej_head, Model};
use crate::checkpoint::Checkpoint;

/// Anything that turns a task into a merged mask and a no-target verdict.
pub trait Predictor {
    fn predict(&self, sample: &SynthSample) -> Result<(Mask, bool)>;
}

/// The trained decoder behind the frozen stubs.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub config: &'a DecoderConfig,
    pub stub: Stub,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(checkpoint: &'a Checkpoint) -> Result<Self> {
        Self::from_parts(&checkpoint.model, &checkpoint.config.decoder, Stub::new(checkpoint.config.stub, &checkpoint.config.decoder)?)
    }

    pub fn from_parts(model: &'a Model, config: &'a DecoderConfig, stub: Stub) -> Result<Self> {
        Ok(Self { model, config, stub })
    }

    /// Full per-token prediction, including `[REJ]` flags from the head.
    pub fn predict_full(&self, sample: &SynthSample) -> Result<MaskPrediction> {
        let feats = self.stub.features(sample)?;
        let tape = Tape::new();
        let mut binder = Binder::new(&tape, false);
        let bound = self.model.bind(&mut binder);
        let out = bound.decoder.forward(
            self.config,
            &tape.constant(feats.t1_img),
            &tape.constant(feats.t2_img),
            &tape.constant(feats.seg_tokens),
        )?;
        let flags = rej_flags(&rej_head(&out.t1_seg, &bound.rej_head)?.value());
        let logits = out.logits.iter().map(|l| l.value().as_ref().clone()).collect();
        let attn = out.attn_map.map(|a| a.value().as_ref().clone());
        Ok(MaskPrediction::from_logits(logits, flags, attn))
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, sample: &SynthSample) -> Result<(Mask, bool)> {
        let p = self.predict_full(sample)?;
        let no_target = p.no_target();
        Ok((p.merged_binary, no_target))
    }
}

/// Passes the ground truth through.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &SynthSample) -> Result<(Mask, bool)> {
        Ok((sample.gt_union(), sample.no_target))
    }
}

/// Rejects everything.
pub struct AllEmptyPredictor;

impl Predictor for AllEmptyPredictor {
    fn predict(&self, sample: &SynthSample) -> Result<(Mask, bool)> {
        let [h, w] = [sample.image.dims()[1], sample.image.dims()[2]];
        Ok((Mask::empty(h, w), true))
    }
}

/// Held-out set size used by the acceptance protocol.
pub const EVAL_SAMPLES: usize = 500;

/// Held-out stream of a run trained with `train_seed`, disjoint from its
/// training stream.
pub fn eval_seed(train_seed: u64) -> u64 {
    train_seed.wrapping_add(1)
}

/// Scores `predictor` on samples `0..n` of the stream keyed by `seed`.
/// Predictions are compared at the image resolution.
pub fn evaluate_with(predictor: &impl Predictor, gen: &GenConfig, n: usize, seed: u64) -> Result<MetricsReport> {
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let sample = sample_at(seed, i as u64, gen)?;
        let gt = sample.gt_union();
        let (pred, pred_no_target) = predictor.predict(&sample)?;
        records.push(EvalRecord {
            pred_mask: pred.resize_nearest(gt.height(), gt.width()),
            gt_mask: gt,
            gt_no_target: sample.no_target,
            pred_no_target,
        });
    }
    MetricsReport::from_records(&records)
}

/// Evaluates a checkpoint on its own task distribution.
pub fn evaluate(checkpoint: &Checkpoint, n: usize, seed: u64) -> Result<MetricsReport> {
    let predictor = ModelPredictor::new(checkpoint)?;
    evaluate_with(&predictor, &checkpoint.config.gen, n, seed)
}
