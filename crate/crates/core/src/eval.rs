//! VOC- and COCO-style average precision.

use std::fmt::Write as _;

use crate::anchors::{iou, GroundTruthBox};
use crate::inference::Detection;

/// Ground truths of one image with its annotation-space size `(width, height)`.
#[derive(Debug, Clone)]
pub struct ImageGts {
    pub gts: Vec<GroundTruthBox>,
    pub size: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    AllPoint,
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBucket {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    fn contains(self, area: f64) -> bool {
        match self {
            Self::All => true,
            Self::Small => area < 32.0 * 32.0,
            Self::Medium => (32.0 * 32.0..=96.0 * 96.0).contains(&area),
            Self::Large => area > 96.0 * 96.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoMetrics {
    /// Mean over IoU 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
    pub coco: Option<CocoMetrics>,
}

fn pixel_area(b: &crate::anchors::BoxCorner, size: (usize, usize)) -> f64 {
    (b.area() as f64) * size.0 as f64 * size.1 as f64
}

/// Area under the precision/recall curve.
pub fn pr_area(recall: &[f64], precision: &[f64], mode: Interpolation) -> f64 {
    match mode {
        Interpolation::AllPoint => {
            let mut mrec = vec![0.0];
            mrec.extend_from_slice(recall);
            mrec.push(1.0);
            let mut mpre = vec![0.0];
            mpre.extend_from_slice(precision);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of one class at one IoU threshold; `None` when the class has no counted ground truth.
pub fn class_ap(
    dets: &[Vec<Detection>],
    gts: &[ImageGts],
    class: usize,
    iou_threshold: f32,
    bucket: SizeBucket,
    mode: Interpolation,
) -> Option<f64> {
    // ignored ground truths (difficult or outside the size bucket) absorb matches without counting
    let mut ignored: Vec<Vec<bool>> = Vec::with_capacity(gts.len());
    let mut npos = 0usize;
    for img in gts {
        let flags: Vec<bool> = img
            .gts
            .iter()
            .map(|g| g.class_id != class || g.difficult || !bucket.contains(pixel_area(&g.bbox, img.size)))
            .collect();
        npos += img.gts.iter().zip(&flags).filter(|(g, &ign)| g.class_id == class && !ign).count();
        ignored.push(flags);
    }
    if npos == 0 {
        return None;
    }
    let mut cand: Vec<(usize, usize)> = Vec::new();
    for (i, ds) in dets.iter().enumerate() {
        for (j, d) in ds.iter().enumerate() {
            if d.class_id == class {
                cand.push((i, j));
            }
        }
    }
    cand.sort_by(|&(ia, ja), &(ib, jb)| dets[ib][jb].score.total_cmp(&dets[ia][ja].score).then((ia, ja).cmp(&(ib, jb))));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.gts.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut recall, mut precision) = (Vec::new(), Vec::new());
    for (i, j) in cand {
        let d = &dets[i][j];
        let img = match gts.get(i) {
            Some(g) => g,
            None => {
                fp += 1;
                recall.push(tp as f64 / npos as f64);
                precision.push(tp as f64 / (tp + fp) as f64);
                continue;
            }
        };
        let mut best: Option<(usize, f32)> = None;
        let mut hits_ignored = false;
        for (k, g) in img.gts.iter().enumerate() {
            if g.class_id != class {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o < iou_threshold {
                continue;
            }
            if ignored[i][k] {
                hits_ignored = true;
            } else if !matched[i][k] && best.map_or(true, |(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        match best {
            Some((k, _)) => {
                matched[i][k] = true;
                tp += 1;
            }
            None if hits_ignored => continue,
            None if !bucket.contains(pixel_area(&d.bbox, img.size)) => continue,
            None => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    Some(pr_area(&recall, &precision, mode))
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

fn per_class(dets: &[Vec<Detection>], gts: &[ImageGts], classes: usize, t: f32, b: SizeBucket, m: Interpolation) -> Vec<Option<f64>> {
    (0..classes).map(|c| class_ap(dets, gts, c, t, b, m)).collect()
}

/// VOC protocol: per-class AP at a single IoU threshold. `dets[i]` pairs with `gts[i]`.
pub fn voc_ap(dets: &[Vec<Detection>], gts: &[ImageGts], num_classes: usize, iou_threshold: f32, mode: Interpolation) -> EvalReport {
    let per_class = per_class(dets, gts, num_classes, iou_threshold, SizeBucket::All, mode);
    let map = mean_defined(&per_class).unwrap_or(0.0);
    EvalReport { per_class, map, coco: None }
}

pub fn coco_thresholds() -> [f32; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f32 / 100.0)
}

/// COCO protocol: AP averaged over ten IoU thresholds plus size buckets.
pub fn coco_ap(dets: &[Vec<Detection>], gts: &[ImageGts], num_classes: usize) -> EvalReport {
    let mode = Interpolation::AllPoint;
    let at = |t: f32, b: SizeBucket| per_class(dets, gts, num_classes, t, b, mode);
    let sweep = |b: SizeBucket| -> (Vec<Option<f64>>, Option<f64>) {
        let tables: Vec<Vec<Option<f64>>> = coco_thresholds().iter().map(|&t| at(t, b)).collect();
        let per_class: Vec<Option<f64>> = (0..num_classes)
            .map(|c| {
                let v: Vec<Option<f64>> = tables.iter().map(|t| t[c]).collect();
                mean_defined(&v)
            })
            .collect();
        let overall = mean_defined(&per_class);
        (per_class, overall)
    };
    let (per_class, ap) = sweep(SizeBucket::All);
    let ap50 = mean_defined(&at(0.5, SizeBucket::All)).unwrap_or(0.0);
    let ap75 = mean_defined(&at(0.75, SizeBucket::All)).unwrap_or(0.0);
    let coco = CocoMetrics {
        ap: ap.unwrap_or(0.0),
        ap50,
        ap75,
        ap_small: sweep(SizeBucket::Small).1,
        ap_medium: sweep(SizeBucket::Medium).1,
        ap_large: sweep(SizeBucket::Large).1,
    };
    EvalReport { per_class, map: coco.ap, coco: Some(coco) }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{:.1}", x * 100.0))
}

impl EvalReport {
    /// Aligned table, values ×100.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let width = class_names.iter().map(|n| n.len()).chain([5]).max().unwrap_or(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>6}", "class", "AP");
        for (i, ap) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
            let _ = writeln!(s, "{name:<width$}  {:>6}", pct(*ap));
        }
        let _ = writeln!(s, "{:<width$}  {:>6}", "mAP", pct(Some(self.map)));
        if let Some(c) = &self.coco {
            for (k, v) in [
                ("AP50", Some(c.ap50)),
                ("AP75", Some(c.ap75)),
                ("AP_S", c.ap_small),
                ("AP_M", c.ap_medium),
                ("AP_L", c.ap_large),
            ] {
                let _ = writeln!(s, "{k:<width$}  {:>6}", pct(v));
            }
        }
        s
    }

    /// `class=AP` lines, values ×100 with one decimal.
    pub fn to_kv(&self, class_names: &[String]) -> String {
        let mut s = String::new();
        for (i, ap) in self.per_class.iter().enumerate() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
            let _ = writeln!(s, "{name}={}", pct(*ap));
        }
        let _ = writeln!(s, "mAP={}", pct(Some(self.map)));
        if let Some(c) = &self.coco {
            let _ = writeln!(s, "AP50={}", pct(Some(c.ap50)));
            let _ = writeln!(s, "AP75={}", pct(Some(c.ap75)));
            let _ = writeln!(s, "AP_small={}", pct(c.ap_small));
            let _ = writeln!(s, "AP_medium={}", pct(c.ap_medium));
            let _ = writeln!(s, "AP_large={}", pct(c.ap_large));
        }
        s
    }
}
