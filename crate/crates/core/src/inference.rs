//! Post-processing of raw head outputs into scored, class-labelled boxes.

use std::path::Path;

use crate::anchors::{decode, iou, AnchorSet, BoxCorner};
use crate::data::load_image;
use crate::error::{Error, Result};
use crate::model::CvtAssd;
use crate::tensor::{self, softmax_slice, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoxCorner,
    /// 0-based object class (background excluded).
    pub class_id: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub conf_threshold: f32,
    pub nms_threshold: f32,
    pub top_k_per_class: usize,
    pub top_k: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.01, nms_threshold: 0.5, top_k_per_class: 200, top_k: 200 }
    }
}

/// Indices sorted by descending score, ties to the lower index.
fn score_order(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy non-maximum suppression; returns kept indices in descending score order.
pub fn nms(boxes: &[BoxCorner], scores: &[f32], iou_threshold: f32) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::dim("boxes", boxes.len(), scores.len(), "nms scores"));
    }
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Decodes one image: `loc` is `[A, 4]` and `conf` is `[A, C]` raw logits, row-major.
pub fn decode_detections(
    loc: &[f32],
    conf: &[f32],
    anchors: &AnchorSet,
    variances: (f32, f32),
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    let a = anchors.len();
    if loc.len() != a * 4 {
        return Err(Error::dim("anchors", a, loc.len() / 4, "decode_detections loc"));
    }
    if a == 0 || conf.len() % a != 0 {
        return Err(Error::dim("anchors", a, conf.len(), "decode_detections conf"));
    }
    let c = conf.len() / a;
    let probs = softmax_slice(conf, &[a, c], 1);
    let mut boxes: Vec<Option<BoxCorner>> = vec![None; a];
    let mut out = Vec::new();
    for class in 1..c {
        let cand: Vec<usize> = (0..a).filter(|&i| probs[i * c + class] >= cfg.conf_threshold).collect();
        if cand.is_empty() {
            continue;
        }
        let cb: Vec<BoxCorner> = cand
            .iter()
            .map(|&i| {
                *boxes[i].get_or_insert_with(|| {
                    let o = [loc[i * 4], loc[i * 4 + 1], loc[i * 4 + 2], loc[i * 4 + 3]];
                    decode(&o, &anchors.boxes[i], variances)
                })
            })
            .collect();
        let cs: Vec<f32> = cand.iter().map(|&i| probs[i * c + class]).collect();
        for k in nms(&cb, &cs, cfg.nms_threshold)?.into_iter().take(cfg.top_k_per_class) {
            out.push(Detection { bbox: cb[k], class_id: class - 1, score: cs[k] });
        }
    }
    let scores: Vec<f32> = out.iter().map(|d| d.score).collect();
    Ok(score_order(&scores).into_iter().take(cfg.top_k).map(|i| out[i]).collect())
}

/// Runs the model in inference mode on `[N, C, S, S]` images.
pub fn detect(model: &CvtAssd, images: &Tensor, anchors: &AnchorSet, cfg: &DetectConfig) -> Result<Vec<Vec<Detection>>> {
    let (loc, conf) = tensor::no_grad(|| model.forward(images, false))?;
    let (n, a, c) = (conf.dim(0), conf.dim(1), conf.dim(2));
    (0..n)
        .map(|i| {
            decode_detections(
                &loc.data()[i * a * 4..(i + 1) * a * 4],
                &conf.data()[i * a * c..(i + 1) * a * c],
                anchors,
                model.cfg.variances,
                cfg,
            )
        })
        .collect()
}

/// Loads a PPM, resizes it to the model resolution and detects.
pub fn detect_file(model: &CvtAssd, path: &Path, anchors: &AnchorSet, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let img = load_image(path, Some(model.cfg.input_size))?;
    let batch = tensor::reshape(&img, &[1, 3, model.cfg.input_size, model.cfg.input_size])?;
    Ok(detect(model, &batch, anchors, cfg)?.remove(0))
}

/// `image_id class_id score xmin ymin xmax ymax` lines.
pub fn format_dump(image_id: &str, dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = d.bbox;
        s += &format!(
            "{image_id} {} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
            d.class_id, d.score, b.xmin, b.ymin, b.xmax, b.ymax
        );
    }
    s
}

pub fn parse_dump(text: &str, origin: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::parse(origin, format!("line {}: {what}", n + 1));
        if f.len() != 7 {
            return Err(bad("expected 7 fields"));
        }
        let class_id = f[1].parse().map_err(|_| bad("bad class id"))?;
        let nums: Vec<f32> = f[2..]
            .iter()
            .map(|v| v.parse::<f32>().map_err(|_| bad("bad number")))
            .collect::<Result<_>>()?;
        out.push((
            f[0].to_string(),
            Detection { bbox: BoxCorner::new(nums[1], nums[2], nums[3], nums[4]), class_id, score: nums[0] },
        ));
    }
    Ok(out)
}
