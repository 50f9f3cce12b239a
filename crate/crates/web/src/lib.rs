//! In-browser demo: a desk-scale decoder trained step by step on synthetic
//! referring tasks, with its masks and fusion attention rendered as RGBA.

use wasm_bindgen::prelude::*;

use maskdec::decoder::{Fusion, MaskPrediction};
use maskdec::dsff::attention_heatmap;
use maskdec::eval::{eval_seed, ModelPredictor};
use maskdec::export::heatmap_query;
use maskdec::metrics::Mask;
use maskdec::synth::{sample_at, SynthSample};
use maskdec::train::{TrainConfig, Trainer};

/// Smaller batches than the reference run keep each click responsive.
const DEMO_BATCH: usize = 4;

fn js(e: maskdec::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba_from_chw(sample: &SynthSample) -> Vec<u8> {
    let d = sample.image.dims();
    let plane = d[1] * d[2];
    let px = sample.image.data();
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        for c in 0..3 {
            out.push((px[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Tints `mask` pixels of an RGBA buffer towards `color`.
fn tint(rgba: &mut [u8], mask: &Mask, color: [u8; 3]) {
    for (i, &on) in mask.bits().iter().enumerate() {
        if on {
            for c in 0..3 {
                let v = &mut rgba[i * 4 + c];
                *v = ((*v as u16 + color[c] as u16) / 2) as u8;
            }
        }
    }
}

#[wasm_bindgen]
pub struct Demo {
    trainer: Trainer,
    index: u64,
    sample: SynthSample,
    alpha: f64,
    prediction: MaskPrediction,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        let mut config = TrainConfig::desk();
        config.seed = seed;
        config.batch_size = DEMO_BATCH;
        let alpha = config.decoder.alpha;
        let sample = sample_at(eval_seed(seed), 0, &config.gen).map_err(js)?;
        let trainer = Trainer::new(config).map_err(js)?;
        let prediction = predict(&trainer, &sample, alpha).map_err(js)?;
        Ok(Demo { trainer, index: 0, sample, alpha, prediction })
    }

    pub fn width(&self) -> usize {
        self.sample.image.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.sample.image.dims()[1]
    }

    pub fn expression(&self) -> String {
        self.sample.expression.to_string()
    }

    pub fn steps_done(&self) -> usize {
        self.trainer.steps_done()
    }

    /// True when the referred object is absent from the image.
    pub fn no_target(&self) -> bool {
        self.sample.no_target
    }

    /// True when the decoder rejects every segmentation token.
    pub fn predicted_no_target(&self) -> bool {
        self.prediction.no_target()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Moves to the next held-out task.
    pub fn next_sample(&mut self) -> Result<(), JsError> {
        self.index += 1;
        let seed = eval_seed(self.trainer.config().seed);
        self.sample = sample_at(seed, self.index, &self.trainer.config().gen).map_err(js)?;
        self.refresh()
    }

    /// Runs `steps` optimizer steps and returns their mean loss.
    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        let mut total = 0.0;
        for _ in 0..steps {
            total += self.trainer.step().map_err(js)?.loss;
        }
        self.refresh()?;
        Ok(total / steps.max(1) as f64)
    }

    /// Sampling scope of the fusion upsampler, applied at inference only.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<(), JsError> {
        self.alpha = alpha;
        self.refresh()
    }

    /// The task image.
    pub fn image_rgba(&self) -> Vec<u8> {
        rgba_from_chw(&self.sample)
    }

    /// The image with ground truth tinted green and the merged prediction
    /// tinted magenta.
    pub fn overlay_rgba(&self) -> Vec<u8> {
        let mut rgba = rgba_from_chw(&self.sample);
        let (h, w) = (self.height(), self.width());
        tint(&mut rgba, &self.sample.gt_union(), [0, 255, 0]);
        tint(&mut rgba, &self.prediction.merged_binary.resize_nearest(h, w), [255, 0, 255]);
        rgba
    }

    /// Mask probabilities of the first segmentation token as grayscale.
    pub fn probs_rgba(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let probs = &self.prediction.per_token_probs[0];
        let (ph, pw) = (probs.dims()[0], probs.dims()[1]);
        let mut out = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let p = probs.data()[(y * ph / h) * pw + x * pw / w];
                let v = (p * 255.0).round() as u8;
                out.extend([v, v, v, 255]);
            }
        }
        out
    }

    /// Fusion attention of the detail cell at the referred object's
    /// centroid over the semantic grid, enlarged to the image size.
    pub fn attention_rgba(&self) -> Result<Vec<u8>, JsError> {
        let cfg = &self.trainer.config().decoder;
        let (h, w) = (self.height(), self.width());
        let Some(attn) = &self.prediction.attn_map else {
            return Ok(vec![0; h * w * 4]);
        };
        let [sh, sw] = cfg.grid_semantic;
        let query = heatmap_query(&self.sample, cfg.grid_detail);
        let heat = attention_heatmap(attn, query, sh, sw).map_err(js)?;
        let mut out = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let v = heat[(y * sh / h) * sw + x * sw / w];
                out.extend([v, v, v, 255]);
            }
        }
        Ok(out)
    }

    fn refresh(&mut self) -> Result<(), JsError> {
        self.prediction = predict(&self.trainer, &self.sample, self.alpha).map_err(js)?;
        Ok(())
    }
}

fn predict(trainer: &Trainer, sample: &SynthSample, alpha: f64) -> maskdec::Result<MaskPrediction> {
    let mut model = trainer.model().clone();
    if let Fusion::Dsff(d) = &mut model.decoder.fusion {
        d.alpha = alpha;
    }
    let config = &trainer.config().decoder;
    ModelPredictor::from_parts(&model, config, trainer.stub().clone())?.predict_full(sample)
}
