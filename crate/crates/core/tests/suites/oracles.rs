//! Equivalence checks against straight-line reference implementations.

use cvt_assd::anchors::{
    decode, decode_center, encode, generate_anchors, iou, match_anchors, AnchorConfig, AnchorLevel, AnchorSet, BoxCenter,
    BoxCorner, GroundTruthBox,
};
use cvt_assd::backbone::{attention_weights, conv_projection, map_to_tokens, mhsa, ConvAttention};
use cvt_assd::data::synth_dataset;
use cvt_assd::eval::{class_ap, ImageGts, Interpolation, SizeBucket};
use cvt_assd::head::AttentionUnit;
use cvt_assd::inference::{decode_detections, nms, DetectConfig, Detection};
use cvt_assd::nn::Linear;
use cvt_assd::tensor::init::{rng, uniform};
use cvt_assd::tensor::{conv2d, separable_conv2d, ConvSpec};
use cvt_assd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn random_box(r: &mut ChaCha8Rng) -> BoxCorner {
    let (x0, x1) = (r.gen_range(0.0..0.9f32), r.gen_range(0.0..0.9f32));
    let (y0, y1) = (r.gen_range(0.0..0.9f32), r.gen_range(0.0..0.9f32));
    BoxCorner::new(x0.min(x1), y0.min(y1), x0.max(x1) + 0.05, y0.max(y1) + 0.05)
}

/// Literal per-head, per-token scaled dot-product attention followed by the output projection.
fn mhsa_loop(q: &[f32], k: &[f32], v: &[f32], t: usize, d: usize, heads: usize, w: &[f32], b: &[f32]) -> Vec<f32> {
    let dh = d / heads;
    let mut concat = vec![0.0f32; t * d];
    for h in 0..heads {
        for i in 0..t {
            let mut scores = vec![0.0f64; t];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in 0..dh {
                    *s += (q[i * d + h * dh + c] * k[j * d + h * dh + c]) as f64;
                }
                *s /= (dh as f64).sqrt();
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..t {
                let a = (scores[j] - m).exp() / z;
                for c in 0..dh {
                    concat[i * d + h * dh + c] += (a * v[j * d + h * dh + c] as f64) as f32;
                }
            }
        }
    }
    let mut out = vec![0.0f32; t * d];
    for i in 0..t {
        for o in 0..d {
            let mut s = b[o];
            for c in 0..d {
                s += concat[i * d + c] * w[c * d + o];
            }
            out[i * d + o] = s;
        }
    }
    out
}

pub fn mhsa_matches_double_loop() {
    let (t, d, heads) = (5, 4, 2);
    let mut r = rng(3);
    let q = uniform(&[1, t, d], -1.0, 1.0, &mut r);
    let k = uniform(&[1, t, d], -1.0, 1.0, &mut r);
    let v = uniform(&[1, t, d], -1.0, 1.0, &mut r);
    let out = Linear::new(d, d, &mut r);
    out.bias.set(uniform(&[d], -0.5, 0.5, &mut r));
    let got = mhsa(&q, &k, &v, heads, &out).unwrap();
    let want = mhsa_loop(q.data(), k.data(), v.data(), t, d, heads, out.weight.get().data(), out.bias.get().data());
    assert!(max_abs_diff(got.data(), &want) < 1e-5);

    let w = attention_weights(&q, &k, heads).unwrap();
    for row in w.data().chunks(t) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

/// Non-local attention unit evaluated position by position.
fn attention_unit_loop(x: &[f32], c: usize, n: usize, wq: &[f32], wk: &[f32], wv: &[f32]) -> Vec<f32> {
    let qk = wq.len() / c;
    let feat = |i: usize, ch: usize| x[ch * n + i];
    let project = |w: &[f32], cols: usize, i: usize| -> Vec<f64> {
        (0..cols).map(|o| (0..c).map(|ch| feat(i, ch) as f64 * w[ch * cols + o] as f64).sum()).collect()
    };
    let mut out = x.to_vec();
    for i in 0..n {
        let qi = project(wq, qk, i);
        let scores: Vec<f64> =
            (0..n).map(|j| project(wk, qk, j).iter().zip(&qi).map(|(a, b)| a * b).sum()).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for j in 0..n {
            let a = (scores[j] - m).exp() / z;
            let vj = project(wv, c, j);
            for ch in 0..c {
                out[ch * n + i] += (a * vj[ch]) as f32;
            }
        }
    }
    out
}

pub fn attention_unit_matches_loop() {
    let mut r = rng(4);
    let x = uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut r);
    let unit = AttentionUnit::new(4, &mut r);
    let got = unit.forward(&x).unwrap();
    let want = attention_unit_loop(
        x.data(),
        4,
        9,
        unit.query.get().data(),
        unit.key.get().data(),
        unit.value.get().data(),
    );
    assert!(max_abs_diff(got.data(), &want) < 1e-5);
}

fn conv_loop(x: &[f32], (c, h, w): (usize, usize, usize), wt: &[f32], o: usize, k: usize, pad: usize) -> Vec<f32> {
    let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
    let mut out = vec![0.0f32; o * ho * wo];
    for oc in 0..o {
        for y in 0..ho {
            for xx in 0..wo {
                let mut s = 0.0f64;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((y + ky) as isize - pad as isize, (xx + kx) as isize - pad as isize);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += x[(ic * h + iy as usize) * w + ix as usize] as f64
                                * wt[((oc * c + ic) * k + ky) * k + kx] as f64;
                        }
                    }
                }
                out[(oc * ho + y) * wo + xx] = s as f32;
            }
        }
    }
    out
}

pub fn conv2d_matches_direct_summation() {
    let mut r = rng(5);
    let x = uniform(&[1, 3, 6, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
    let got = conv2d(&x, &ConvSpec::new(3, 4, 3, 1, 1), &w, None).unwrap();
    let want = conv_loop(x.data(), (3, 6, 5), w.data(), 4, 3, 1);
    assert!(max_abs_diff(got.data(), &want) < 1e-5);
}

pub fn separable_conv_matches_composed_dense() {
    let mut r = rng(6);
    let (c, o) = (4, 3);
    let x = uniform(&[2, c, 5, 5], -1.0, 1.0, &mut r);
    let dw = uniform(&[c, 1, 3, 3], -1.0, 1.0, &mut r);
    let pw = uniform(&[o, c, 1, 1], -1.0, 1.0, &mut r);
    let b = uniform(&[o], -1.0, 1.0, &mut r);
    let spec = ConvSpec::new(c, o, 3, 1, 1);
    let got = separable_conv2d(&x, &spec, &dw, &pw, Some(&b)).unwrap();
    let mut dense = vec![0.0f32; o * c * 9];
    for oc in 0..o {
        for ic in 0..c {
            for t in 0..9 {
                dense[(oc * c + ic) * 9 + t] = pw.data()[oc * c + ic] * dw.data()[ic * 9 + t];
            }
        }
    }
    let dense = Tensor::new(&[o, c, 3, 3], dense).unwrap();
    let want = conv2d(&x, &spec, &dense, Some(&b)).unwrap();
    assert!(max_abs_diff(got.data(), want.data()) < 1e-5);
}

pub fn pointwise_projection_is_linear_attention() {
    let mut r = rng(7);
    let (d, heads) = (6, 2);
    let attn = ConvAttention::new(d, heads, 1, &mut r).unwrap();
    for p in [&attn.q, &attn.k, &attn.v] {
        p.bias.as_ref().unwrap().set(uniform(&[d], -0.5, 0.5, &mut r));
    }
    let x = uniform(&[2, d, 3, 4], -1.0, 1.0, &mut r);
    let (tokens, grid) = map_to_tokens(&x).unwrap();
    let (q, k, v) = conv_projection(&tokens, grid, &attn).unwrap();
    for (p, got) in [(&attn.q, &q), (&attn.k, &k), (&attn.v, &v)] {
        // depthwise 1x1 is a per-channel scale, so the projection is diag(dw) * pw^T
        let (dw, pw) = (p.depthwise.get(), p.pointwise.get());
        let mut w = vec![0.0f32; d * d];
        for i in 0..d {
            for o in 0..d {
                w[i * d + o] = dw.data()[i] * pw.data()[o * d + i];
            }
        }
        let w = Tensor::new(&[d, d], w).unwrap();
        let want = cvt_assd::tensor::linear(&tokens, &w, Some(&p.bias.as_ref().unwrap().get())).unwrap();
        assert!(max_abs_diff(got.data(), want.data()) < 1e-6);
    }
}

/// Repeatedly keeps the best remaining box and strikes everything overlapping it.
fn nms_brute(boxes: &[BoxCorner], scores: &[f32], thr: f32) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.map_or(true, |b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        for i in 0..boxes.len() {
            if alive[i] && iou(&boxes[b], &boxes[i]) > thr {
                alive[i] = false;
            }
        }
        alive[b] = false;
    }
    keep
}

pub fn nms_matches_brute_force() {
    for seed in 0..1000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.gen_range(1..=10);
        let boxes: Vec<BoxCorner> = (0..n).map(|_| random_box(&mut r)).collect();
        // coarse scores so ties occur
        let scores: Vec<f32> = (0..n).map(|_| r.gen_range(0..6) as f32 / 5.0).collect();
        let thr = [0.3f32, 0.5, 0.7][seed as usize % 3];
        let kept = nms(&boxes, &scores, thr).unwrap();
        assert_eq!(kept, nms_brute(&boxes, &scores, thr), "seed {seed}");
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                assert!(iou(&boxes[i], &boxes[j]) <= thr);
            }
        }
    }
}

fn small_anchor_set(r: &mut ChaCha8Rng) -> AnchorSet {
    let n = r.gen_range(3..=12);
    let boxes = (0..n)
        .map(|_| {
            let cx = r.gen_range(0.1..0.9f32);
            let cy = r.gen_range(0.1..0.9f32);
            BoxCenter { cx, cy, w: r.gen_range(0.05..0.6), h: r.gen_range(0.05..0.6) }
        })
        .collect();
    AnchorSet { boxes, level_offsets: vec![0] }
}

/// Matching rules applied literally, one anchor at a time.
fn match_brute(anchors: &AnchorSet, gts: &[GroundTruthBox], thr: f32) -> Vec<Option<usize>> {
    let corners = anchors.corners();
    let mut out = vec![None; corners.len()];
    let mut claimed = vec![false; corners.len()];
    for (j, g) in gts.iter().enumerate() {
        let mut order: Vec<usize> = (0..corners.len()).collect();
        order.sort_by(|&a, &b| iou(&corners[b], &g.bbox).total_cmp(&iou(&corners[a], &g.bbox)).then(a.cmp(&b)));
        let pick = order.into_iter().find(|&i| !claimed[i]).unwrap();
        claimed[pick] = true;
        out[pick] = Some(j);
    }
    for (i, a) in corners.iter().enumerate() {
        if claimed[i] {
            continue;
        }
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in gts.iter().enumerate() {
            let o = iou(a, &g.bbox);
            if best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, o)) = best {
            if o >= thr {
                out[i] = Some(j);
            }
        }
    }
    out
}

pub fn matcher_matches_brute_force() {
    let variances = (0.1, 0.2);
    for seed in 0..1000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let anchors = small_anchor_set(&mut r);
        let ngt = r.gen_range(0..=anchors.len().min(4));
        let gts: Vec<GroundTruthBox> =
            (0..ngt).map(|_| GroundTruthBox::new(random_box(&mut r), r.gen_range(0..3))).collect();
        let thr = [0.3f32, 0.5][seed as usize % 2];
        let m = match_anchors(&anchors, &gts, thr, variances).unwrap();
        let want = match_brute(&anchors, &gts, thr);
        assert_eq!(m.matched, want, "seed {seed}");
        for (i, slot) in want.iter().enumerate() {
            match slot {
                Some(j) => {
                    assert_eq!(m.labels[i], gts[*j].class_id + 1);
                    assert_eq!(m.loc_targets[i], encode(&gts[*j].bbox.to_center(), &anchors.boxes[i], variances).unwrap());
                }
                None => assert_eq!(m.labels[i], 0),
            }
        }
        // every ground truth owns at least one anchor
        for j in 0..ngt {
            assert!(m.matched.contains(&Some(j)));
        }
    }
}

pub fn encode_decode_roundtrip() {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let variances = (0.1, 0.2);
    for _ in 0..1000 {
        let gt = random_box(&mut r).to_center();
        let anchor = random_box(&mut r).to_center();
        let back = decode_center(&encode(&gt, &anchor, variances).unwrap(), &anchor, variances);
        for (a, b) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h)] {
            assert!((a - b).abs() < 1e-6, "{back:?} vs {gt:?}");
        }
    }
}

/// Softmax, threshold, decode and brute-force NMS written out in one pass.
fn postprocess_reference(loc: &[f32], conf: &[f32], anchors: &AnchorSet, cfg: &DetectConfig) -> Vec<(usize, usize, f64)> {
    let a = anchors.len();
    let c = conf.len() / a;
    let mut probs = vec![0.0f64; a * c];
    for i in 0..a {
        let row = &conf[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        for k in 0..c {
            probs[i * c + k] = (row[k] as f64 - m).exp() / z;
        }
    }
    let mut all = Vec::new();
    for class in 1..c {
        let cand: Vec<usize> = (0..a).filter(|&i| probs[i * c + class] >= cfg.conf_threshold as f64).collect();
        let boxes: Vec<BoxCorner> = cand
            .iter()
            .map(|&i| decode(&[loc[i * 4], loc[i * 4 + 1], loc[i * 4 + 2], loc[i * 4 + 3]], &anchors.boxes[i], (0.1, 0.2)))
            .collect();
        let scores: Vec<f32> = cand.iter().map(|&i| probs[i * c + class] as f32).collect();
        for k in nms_brute(&boxes, &scores, cfg.nms_threshold).into_iter().take(cfg.top_k_per_class) {
            all.push((cand[k], class - 1, probs[cand[k] * c + class]));
        }
    }
    all.sort_by(|x, y| y.2.total_cmp(&x.2));
    all.truncate(cfg.top_k);
    all
}

pub fn decode_detections_matches_reference() {
    let cfg = DetectConfig { conf_threshold: 0.05, nms_threshold: 0.5, top_k_per_class: 6, top_k: 14 };
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut anchors = small_anchor_set(&mut r);
        while anchors.len() < 50 {
            anchors.boxes.extend(small_anchor_set(&mut r).boxes);
        }
        anchors.boxes.truncate(50);
        let classes = 4;
        let loc: Vec<f32> = (0..200).map(|_| r.gen_range(-1.0..1.0)).collect();
        let conf: Vec<f32> = (0..50 * classes).map(|_| r.gen_range(-2.0..2.0)).collect();
        let got = decode_detections(&loc, &conf, &anchors, (0.1, 0.2), &cfg).unwrap();
        let want = postprocess_reference(&loc, &conf, &anchors, &cfg);
        assert_eq!(got.len(), want.len(), "seed {seed}");
        for (d, &(anchor, class, score)) in got.iter().zip(&want) {
            assert_eq!(d.class_id, class);
            assert!((d.score as f64 - score).abs() < 1e-6);
            let o = [loc[anchor * 4], loc[anchor * 4 + 1], loc[anchor * 4 + 2], loc[anchor * 4 + 3]];
            assert_eq!(d.bbox, decode(&o, &anchors.boxes[anchor], (0.1, 0.2)));
            let b = d.bbox;
            assert!(b.xmin >= 0.0 && b.ymin >= 0.0 && b.xmax <= 1.0 && b.ymax <= 1.0);
        }
    }
}

/// Area under the PR curve by enumerating every cut-off of the ranked list.
fn ap_exhaustive(dets: &[(BoxCorner, f32)], gts: &[BoxCorner], thr: f32) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp_flags = Vec::new();
    for &i in &order {
        let mut best: Option<(usize, f32)> = None;
        for (j, g) in gts.iter().enumerate() {
            let o = iou(&dets[i].0, g);
            if !taken[j] && o >= thr && best.map_or(true, |(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        tp_flags.push(best.is_some());
    }
    let n = tp_flags.len();
    let prec_rec = |k: usize| -> (f64, f64) {
        let tp = tp_flags[..k].iter().filter(|&&t| t).count() as f64;
        (tp / k as f64, tp / gts.len() as f64)
    };
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=n {
        let (_, r) = prec_rec(k);
        if r > prev_recall {
            let best_p = (k..=n).map(|m| prec_rec(m).0).fold(0.0, f64::max);
            ap += (r - prev_recall) * best_p;
            prev_recall = r;
        }
    }
    ap
}

pub fn class_ap_matches_exhaustive() {
    for seed in 0..200u64 {
        let mut r = ChaCha8Rng::seed_from_u64(7000 + seed);
        let ng = r.gen_range(1..=3);
        let gts: Vec<BoxCorner> = (0..ng).map(|_| random_box(&mut r)).collect();
        let nd = r.gen_range(0..=5);
        let dets: Vec<(BoxCorner, f32)> = (0..nd)
            .map(|_| {
                let b = if r.gen_bool(0.6) {
                    let g = gts[r.gen_range(0..ng)];
                    let j = |v: f32, r: &mut ChaCha8Rng| (v + r.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0);
                    let (x0, y0, x1, y1) = (j(g.xmin, &mut r), j(g.ymin, &mut r), j(g.xmax, &mut r), j(g.ymax, &mut r));
                    BoxCorner::new(x0.min(x1), y0.min(y1), x0.max(x1) + 0.01, y0.max(y1) + 0.01)
                } else {
                    random_box(&mut r)
                };
                (b, r.gen_range(0..100) as f32 / 100.0)
            })
            .collect();
        let img = ImageGts { gts: gts.iter().map(|&b| GroundTruthBox::new(b, 0)).collect(), size: (100, 100) };
        let d: Vec<Detection> = dets.iter().map(|&(bbox, score)| Detection { bbox, class_id: 0, score }).collect();
        let got = class_ap(&[d], &[img], 0, 0.5, SizeBucket::All, Interpolation::AllPoint).unwrap();
        let want = ap_exhaustive(&dets, &gts, 0.5);
        assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
    }
}

pub fn synthetic_boxes_match_rendered_masks() {
    let s = 96;
    for sample in synth_dataset(16, 8, s, 21).unwrap() {
        let px = sample.image.data();
        for gt in &sample.gts {
            let (gx0, gy0) = ((gt.bbox.xmin * s as f32).round() as usize, (gt.bbox.ymin * s as f32).round() as usize);
            let (gx1, gy1) = ((gt.bbox.xmax * s as f32).round() as usize, (gt.bbox.ymax * s as f32).round() as usize);
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            // shapes sit at least one pixel apart, so a one-pixel margin sees only this shape
            for y in gy0.saturating_sub(1)..(gy1 + 1).min(s) {
                for x in gx0.saturating_sub(1)..(gx1 + 1).min(s) {
                    let bright = (0..3).any(|c| px[c * s * s + y * s + x] > 120.0 / 255.0);
                    if bright {
                        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
                    }
                }
            }
            for (a, b) in [(x0, gx0), (y0, gy0), (x1, gx1), (y1, gy1)] {
                assert!(a.abs_diff(b) <= 1, "{}: mask ({x0},{y0},{x1},{y1}) vs box ({gx0},{gy0},{gx1},{gy1})", sample.id);
            }
        }
    }
}

pub fn anchor_count_formula_matches_generator() {
    for cfg in [cvt_assd::ModelConfig::paper(), cvt_assd::ModelConfig::tiny()] {
        let set = generate_anchors(&AnchorConfig::from_model(&cfg).unwrap()).unwrap();
        assert_eq!(set.len(), cfg.num_anchors().unwrap());
    }
    let single = AnchorConfig {
        input_size: 300,
        levels: vec![AnchorLevel { feature: (1, 1), ratios: vec![2.0], min_size: 100.0, max_size: 200.0 }],
    };
    assert_eq!(generate_anchors(&single).unwrap().len(), 4);
}
