//! Photometric and cropping augmentation, one option drawn uniformly per sample.

use rand::Rng;

use super::image::{crop, resize_bilinear};
use super::Sample;
use crate::anchors::{iou, BoxCorner, GroundTruthBox};
use crate::error::Result;
use crate::tensor::init::Rng64;
use crate::tensor::Tensor;

pub const MIN_JACCARD: [f32; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];
pub const MAX_TRIALS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOption {
    Original,
    /// Random crop, applied with probability 0.5.
    RandomCrop,
    /// Crop whose surviving boxes keep at least this jaccard overlap with their originals.
    MinJaccardCrop(f32),
    RandomPatch,
    Contrast(f32),
}

impl AugmentOption {
    pub fn sample(rng: &mut Rng64) -> Self {
        match rng.gen_range(0..5) {
            0 => Self::Original,
            1 => Self::RandomCrop,
            2 => Self::MinJaccardCrop(MIN_JACCARD[rng.gen_range(0..MIN_JACCARD.len())]),
            3 => Self::RandomPatch,
            _ => Self::Contrast(rng.gen_range(0.5..=1.5)),
        }
    }
}

pub fn augment(sample: &Sample, rng: &mut Rng64, resolution: usize) -> Result<Sample> {
    let option = AugmentOption::sample(rng);
    augment_with(sample, option, rng, resolution)
}

/// Normalized crop rectangle plus its pixel bounds.
struct Crop {
    rect: BoxCorner,
    px: (usize, usize, usize, usize),
}

fn random_crop(rng: &mut Rng64, w: usize, h: usize, min_scale: f32) -> Crop {
    let scale = rng.gen_range(min_scale..=1.0f32);
    let aspect = rng.gen_range(0.5..=2.0f32).sqrt();
    let cw = ((scale * aspect).min(1.0) * w as f32).round().max(1.0) as usize;
    let ch = ((scale / aspect).min(1.0) * h as f32).round().max(1.0) as usize;
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    let (fw, fh) = (w as f32, h as f32);
    Crop {
        rect: BoxCorner::new(x0 as f32 / fw, y0 as f32 / fh, (x0 + cw) as f32 / fw, (y0 + ch) as f32 / fh),
        px: (x0, y0, x0 + cw, y0 + ch),
    }
}

fn intersect(a: &BoxCorner, b: &BoxCorner) -> BoxCorner {
    BoxCorner::new(a.xmin.max(b.xmin), a.ymin.max(b.ymin), a.xmax.min(b.xmax), a.ymax.min(b.ymax))
}

/// Ground truths whose centers fall inside the crop, clipped and remapped to crop coordinates,
/// paired with the jaccard overlap between each original box and its clipped part.
fn surviving(gts: &[GroundTruthBox], c: &BoxCorner) -> Vec<(GroundTruthBox, f32)> {
    let (cw, ch) = (c.xmax - c.xmin, c.ymax - c.ymin);
    gts.iter()
        .filter_map(|g| {
            let ctr = g.bbox.to_center();
            if !(ctr.cx > c.xmin && ctr.cx < c.xmax && ctr.cy > c.ymin && ctr.cy < c.ymax) {
                return None;
            }
            let clipped = intersect(&g.bbox, c);
            let overlap = iou(&g.bbox, &clipped);
            let remapped = BoxCorner::new(
                (clipped.xmin - c.xmin) / cw,
                (clipped.ymin - c.ymin) / ch,
                (clipped.xmax - c.xmin) / cw,
                (clipped.ymax - c.ymin) / ch,
            )
            .clip();
            (remapped.xmax > remapped.xmin && remapped.ymax > remapped.ymin)
                .then_some((GroundTruthBox { bbox: remapped, ..*g }, overlap))
        })
        .collect()
}

fn search_crop(
    sample: &Sample,
    rng: &mut Rng64,
    resolution: usize,
    min_scale: f32,
    min_overlap: Option<f32>,
) -> Result<Sample> {
    let (h, w) = (sample.image.dim(1), sample.image.dim(2));
    for _ in 0..MAX_TRIALS {
        let c = random_crop(rng, w, h, min_scale);
        let kept = surviving(&sample.gts, &c.rect);
        if !sample.gts.is_empty() && kept.is_empty() {
            continue;
        }
        if let Some(t) = min_overlap {
            if kept.iter().any(|(_, o)| *o < t) {
                continue;
            }
        }
        let (x0, y0, x1, y1) = c.px;
        let image = resize_bilinear(&crop(&sample.image, x0, y0, x1, y1)?, resolution, resolution)?;
        return Ok(Sample {
            id: sample.id.clone(),
            image,
            gts: kept.into_iter().map(|(g, _)| g).collect(),
            native_size: sample.native_size,
        });
    }
    original(sample, resolution)
}

fn original(sample: &Sample, resolution: usize) -> Result<Sample> {
    let mut out = sample.clone();
    if sample.image.dim(1) != resolution || sample.image.dim(2) != resolution {
        out.image = resize_bilinear(&sample.image, resolution, resolution)?;
    }
    Ok(out)
}

pub fn augment_with(sample: &Sample, option: AugmentOption, rng: &mut Rng64, resolution: usize) -> Result<Sample> {
    match option {
        AugmentOption::Original => original(sample, resolution),
        AugmentOption::RandomCrop => {
            if rng.gen_bool(0.5) {
                original(sample, resolution)
            } else {
                search_crop(sample, rng, resolution, 0.3, None)
            }
        }
        AugmentOption::MinJaccardCrop(t) => search_crop(sample, rng, resolution, 0.3, Some(t)),
        AugmentOption::RandomPatch => search_crop(sample, rng, resolution, 0.1, None),
        AugmentOption::Contrast(f) => {
            let mut out = original(sample, resolution)?;
            if f != 1.0 {
                let data = out.image.data().iter().map(|&v| ((v - 0.5) * f + 0.5).clamp(0.0, 1.0)).collect();
                out.image = Tensor::new(out.image.shape(), data)?;
            }
            Ok(out)
        }
    }
}
