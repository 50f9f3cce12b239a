//! Writes one held-out task and the decoder's answer as images.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::decoder::MASK_THRESHOLD;
use crate::dsff::attention_heatmap;
use crate::error::Result;
use crate::eval::ModelPredictor;
use crate::imageio::Image;
use crate::metrics::Mask;
use crate::synth::{sample_at, SynthSample};

/// Detail-grid query used for the heatmap: the cell holding the centroid of
/// the ground truth, or the grid center when there is no target.
pub fn heatmap_query(sample: &SynthSample, grid: [usize; 2]) -> usize {
    let gt = sample.gt_union();
    let [gh, gw] = grid;
    if gt.is_empty() {
        return (gh / 2) * gw + gw / 2;
    }
    let (mut sy, mut sx) = (0usize, 0usize);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if gt.get(y, x) {
                sy += y;
                sx += x;
            }
        }
    }
    let n = gt.count();
    let cy = (sy / n) * gh / gt.height();
    let cx = (sx / n) * gw / gt.width();
    cy * gw + cx
}

/// Writes `image.ppm`, `pred_<k>.pgm` per segmentation token, `pred_merged.pgm`,
/// `gt_<k>.pgm` per target and, for the full fusion variant, `attention.pgm`,
/// into `outdir`. Uses sample 0 of the stream keyed by `seed`. Returns the
/// written paths in that order.
pub fn export(checkpoint: &Checkpoint, seed: u64, outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir)?;
    let sample = sample_at(seed, 0, &checkpoint.config.gen)?;
    let (h, w) = (sample.image.dims()[1], sample.image.dims()[2]);
    let pred = ModelPredictor::new(checkpoint)?.predict_full(&sample)?;

    let mut written = Vec::new();
    let mut save = |name: String, img: Image| -> Result<()> {
        let path = outdir.join(name);
        img.save(&path)?;
        written.push(path);
        Ok(())
    };
    save("image.ppm".into(), Image::from_chw(&sample.image)?)?;
    for (k, probs) in pred.per_token_probs.iter().enumerate() {
        let mask = Mask::from_probs(probs, MASK_THRESHOLD).resize_nearest(h, w);
        save(format!("pred_{k}.pgm"), Image::from_mask(&mask))?;
    }
    save("pred_merged.pgm".into(), Image::from_mask(&pred.merged_binary.resize_nearest(h, w)))?;
    for (k, gt) in sample.gt_masks.iter().enumerate() {
        save(format!("gt_{k}.pgm"), Image::from_mask(gt))?;
    }
    if let Some(attn) = &pred.attn_map {
        let cfg = &checkpoint.config.decoder;
        let [sh, sw] = cfg.grid_semantic;
        let query = heatmap_query(&sample, cfg.grid_detail);
        let heat = Image::gray(sw, sh, attention_heatmap(attn, query, sh, sw)?)?;
        save("attention.pgm".into(), heat.upscale((w / sw).max(1)))?;
    }
    Ok(written)
}
