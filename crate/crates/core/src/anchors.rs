//! Default boxes, box geometry, offset coding, ground-truth matching and
//! hard negative mining.

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Corner-form box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCorner {
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

/// Center-form box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCenter {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BoxCorner {
    pub fn new(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn to_center(self) -> BoxCenter {
        BoxCenter {
            cx: (self.xmin + self.xmax) / 2.0,
            cy: (self.ymin + self.ymax) / 2.0,
            w: self.xmax - self.xmin,
            h: self.ymax - self.ymin,
        }
    }

    pub fn area(&self) -> f32 {
        (self.xmax - self.xmin).max(0.0) * (self.ymax - self.ymin).max(0.0)
    }

    pub fn clip(self) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.xmin <= self.xmax && self.ymin <= self.ymax
    }
}

impl BoxCenter {
    pub fn to_corner(self) -> BoxCorner {
        BoxCorner {
            xmin: self.cx - self.w / 2.0,
            ymin: self.cy - self.h / 2.0,
            xmax: self.cx + self.w / 2.0,
            ymax: self.cy + self.h / 2.0,
        }
    }
}

/// Ground-truth object: box, 0-based class id, VOC "difficult" flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bbox: BoxCorner,
    pub class_id: usize,
    pub difficult: bool,
}

impl GroundTruthBox {
    pub fn new(bbox: BoxCorner, class_id: usize) -> Self {
        Self { bbox, class_id, difficult: false }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoxCorner, b: &BoxCorner) -> f32 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLevel {
    pub feature: (usize, usize),
    pub ratios: Vec<f32>,
    /// Pixels at `input_size`.
    pub min_size: f32,
    pub max_size: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub input_size: usize,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorConfig {
    pub fn from_model(cfg: &ModelConfig) -> Result<Self> {
        let levels = cfg
            .grids()?
            .into_iter()
            .zip(&cfg.levels)
            .map(|(feature, l)| AnchorLevel {
                feature,
                ratios: l.ratios.clone(),
                min_size: l.min_size,
                max_size: l.max_size,
            })
            .collect();
        Ok(Self { input_size: cfg.input_size, levels })
    }
}

/// Default boxes in center form, level-major, row-major, anchor-minor.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub boxes: Vec<BoxCenter>,
    /// Start index of each level in `boxes`.
    pub level_offsets: Vec<usize>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        let mut ends = self.level_offsets[1..].to_vec();
        ends.push(self.boxes.len());
        self.level_offsets.iter().zip(ends).map(|(s, e)| e - s).collect()
    }

    pub fn corners(&self) -> Vec<BoxCorner> {
        self.boxes.iter().map(|b| b.to_corner()).collect()
    }
}

pub fn generate_anchors(cfg: &AnchorConfig) -> Result<AnchorSet> {
    let res = cfg.input_size as f32;
    let mut boxes = Vec::new();
    let mut level_offsets = Vec::with_capacity(cfg.levels.len());
    for (li, level) in cfg.levels.iter().enumerate() {
        if level.ratios.is_empty() {
            return Err(Error::Config(format!("anchor level {}: empty aspect-ratio list", li + 1)));
        }
        if level.min_size > res || level.max_size > res * 1.25 {
            return Err(Error::Config(format!(
                "anchor level {}: sizes {}/{} exceed input resolution {res}",
                li + 1,
                level.min_size,
                level.max_size
            )));
        }
        level_offsets.push(boxes.len());
        let min = level.min_size / res;
        let mid = (level.min_size * level.max_size).sqrt() / res;
        let mut shapes = vec![(min, min), (mid, mid)];
        for &r in &level.ratios {
            let s = r.sqrt();
            shapes.push((min * s, min / s));
            shapes.push((min / s, min * s));
        }
        let (fh, fw) = level.feature;
        for i in 0..fh {
            for j in 0..fw {
                let cx = (j as f32 + 0.5) / fw as f32;
                let cy = (i as f32 + 0.5) / fh as f32;
                for &(w, h) in &shapes {
                    boxes.push(BoxCenter {
                        cx: cx.clamp(0.0, 1.0),
                        cy: cy.clamp(0.0, 1.0),
                        w: w.clamp(0.0, 1.0),
                        h: h.clamp(0.0, 1.0),
                    });
                }
            }
        }
    }
    Ok(AnchorSet { boxes, level_offsets })
}

/// SSD offsets of `gt` relative to `anchor`.
pub fn encode(gt: &BoxCenter, anchor: &BoxCenter, variances: (f32, f32)) -> Result<[f32; 4]> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Data(format!("degenerate ground-truth box {gt:?}")));
    }
    let (vc, vs) = variances;
    Ok([
        (gt.cx - anchor.cx) / (anchor.w * vc),
        (gt.cy - anchor.cy) / (anchor.h * vc),
        (gt.w / anchor.w).ln() / vs,
        (gt.h / anchor.h).ln() / vs,
    ])
}

/// Unclipped inverse of [`encode`].
pub fn decode_center(offsets: &[f32; 4], anchor: &BoxCenter, variances: (f32, f32)) -> BoxCenter {
    let (vc, vs) = variances;
    BoxCenter {
        cx: anchor.cx + offsets[0] * vc * anchor.w,
        cy: anchor.cy + offsets[1] * vc * anchor.h,
        w: anchor.w * (offsets[2] * vs).exp(),
        h: anchor.h * (offsets[3] * vs).exp(),
    }
}

/// Inverse of [`encode`], converted to corners and clipped to the image.
pub fn decode(offsets: &[f32; 4], anchor: &BoxCenter, variances: (f32, f32)) -> BoxCorner {
    decode_center(offsets, anchor, variances).to_corner().clip()
}

/// Per-anchor assignment produced by [`match_anchors`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Index into the ground-truth list, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Encoded offsets for positives, zeros for background.
    pub loc_targets: Vec<[f32; 4]>,
    /// `0` for background, `class_id + 1` for positives.
    pub labels: Vec<usize>,
}

impl MatchResult {
    pub fn num_positives(&self) -> usize {
        self.matched.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.matched[i].is_some()
    }
}

/// Assigns ground truths to anchors:
/// (a) each GT, in order, claims its highest-IoU anchor not already claimed
///     by an earlier GT (ties to the lowest index);
/// (b) every other anchor whose best IoU reaches `threshold` is positive
///     for its best GT (ties to the lowest GT index);
/// (c) the rest are background.
pub fn match_anchors(
    anchors: &AnchorSet,
    gts: &[GroundTruthBox],
    threshold: f32,
    variances: (f32, f32),
) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("match threshold {threshold} outside (0, 1)")));
    }
    let n = anchors.len();
    let mut matched: Vec<Option<usize>> = vec![None; n];
    if !gts.is_empty() {
        let corners = anchors.corners();
        // best GT per anchor
        let mut best_gt = vec![(0usize, f32::NEG_INFINITY); n];
        let mut overlaps = vec![0.0f32; n * gts.len()];
        for (i, a) in corners.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                let o = iou(a, &g.bbox);
                overlaps[i * gts.len() + j] = o;
                if o > best_gt[i].1 {
                    best_gt[i] = (j, o);
                }
            }
        }
        let mut forced = vec![false; n];
        for j in 0..gts.len() {
            let mut best: Option<(usize, f32)> = None;
            for i in 0..n {
                if forced[i] {
                    continue;
                }
                let o = overlaps[i * gts.len() + j];
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((i, o));
                }
            }
            if let Some((i, _)) = best {
                forced[i] = true;
                matched[i] = Some(j);
            }
        }
        for i in 0..n {
            if !forced[i] && best_gt[i].1 >= threshold {
                matched[i] = Some(best_gt[i].0);
            }
        }
    }
    let mut loc_targets = vec![[0.0f32; 4]; n];
    let mut labels = vec![0usize; n];
    for (i, m) in matched.iter().enumerate() {
        if let Some(j) = *m {
            loc_targets[i] = encode(&gts[j].bbox.to_center(), &anchors.boxes[i], variances)?;
            labels[i] = gts[j].class_id + 1;
        }
    }
    Ok(MatchResult { matched, loc_targets, labels })
}

/// Picks the `min(ratio * P, N_neg)` background anchors with the largest
/// confidence loss (ties to the lower index). With no positives, `P` is
/// taken as 1 so the confidence loss stays defined.
pub fn hard_negative_mine(conf_loss: &[f32], matched: &MatchResult, ratio: usize) -> Result<Vec<bool>> {
    if ratio == 0 {
        return Err(Error::Config("negative mining ratio must be positive".into()));
    }
    if conf_loss.len() != matched.matched.len() {
        return Err(Error::dim("anchors", matched.matched.len(), conf_loss.len(), "hard negative mining"));
    }
    let positives = matched.num_positives();
    let mut negatives: Vec<usize> = (0..conf_loss.len()).filter(|&i| !matched.is_positive(i)).collect();
    let k = (ratio * positives.max(1)).min(negatives.len());
    negatives.sort_by(|&a, &b| conf_loss[b].total_cmp(&conf_loss[a]).then(a.cmp(&b)));
    let mut mask = vec![false; conf_loss.len()];
    for &i in &negatives[..k] {
        mask[i] = true;
    }
    Ok(mask)
}
