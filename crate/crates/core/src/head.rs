//! Detection head: residual block, feature pyramid, per-scale attention units
//! and the 3x3 location/confidence predictors.

use crate::backbone::{map_to_tokens, tokens_to_map, BackboneOutput};
use crate::config::{LevelSource, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Module, Slot};
use crate::tensor::init::{xavier_uniform, Rng64};
use crate::tensor::{self, ConvSpec, Tensor};

/// `y = F(x) + x` with `F = conv3x3 -> BN -> ReLU -> conv3x3 -> BN`.
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
}

impl ResidualBlock {
    pub fn new(channels: usize, eps: f32, rng: &mut Rng64) -> Result<Self> {
        let spec = ConvSpec::new(channels, channels, 3, 1, 1);
        Ok(Self {
            conv1: Conv2d::new(spec, false, rng)?,
            bn1: BatchNorm2d::new(channels, eps),
            conv2: Conv2d::new(spec, false, rng)?,
            bn2: BatchNorm2d::new(channels, eps),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let f = tensor::relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?);
        let f = self.bn2.forward(&self.conv2.forward(&f)?, train)?;
        tensor::add(&f, x)
    }
}

impl Module for ResidualBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
    }
}

/// Non-local self-attention over the positions of one feature map, added
/// back onto its input.
pub struct AttentionUnit {
    /// `[C, C/8]`
    pub query: Slot,
    /// `[C, C/8]`
    pub key: Slot,
    /// `[C, C]`
    pub value: Slot,
}

impl AttentionUnit {
    pub fn new(channels: usize, rng: &mut Rng64) -> Self {
        let qk = (channels / 8).max(1);
        Self {
            query: Slot::param(xavier_uniform(&[channels, qk], channels, qk, rng)),
            key: Slot::param(xavier_uniform(&[channels, qk], channels, qk, rng)),
            value: Slot::param(xavier_uniform(&[channels, channels], channels, channels, rng)),
        }
    }

    /// Row-normalized attention `softmax_j(query_i . key_j)`, shape `[N, HW, HW]`.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let (tokens, _) = map_to_tokens(x)?;
        self.weights_from_tokens(&tokens)
    }

    fn weights_from_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let q = tensor::linear(tokens, &self.query.get(), None)?;
        let k = tensor::linear(tokens, &self.key.get(), None)?;
        let scores = tensor::bmm(&q, &tensor::permute(&k, &[0, 2, 1])?)?;
        tensor::softmax(&scores, 2)
    }

    /// `x_i + sum_j a_ij value(x_j)` at every position `i`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (tokens, grid) = map_to_tokens(x)?;
        let c = self.value.shape()[0];
        if tokens.dim(2) != c {
            return Err(Error::dim("channels", c, tokens.dim(2), "attention unit"));
        }
        let attn = self.weights_from_tokens(&tokens)?;
        let v = tensor::linear(&tokens, &self.value.get(), None)?;
        let out = tensor::add(&tokens, &tensor::bmm(&attn, &v)?)?;
        tokens_to_map(&out, grid)
    }
}

impl Module for AttentionUnit {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        f(join(prefix, "query"), &self.query);
        f(join(prefix, "key"), &self.key);
        f(join(prefix, "value"), &self.value);
    }
}

/// SSD-style extra layer: 1x1 reduce, then a (usually strided) 3x3 conv.
pub struct ExtraLayer {
    pub reduce: Conv2d,
    pub reduce_bn: BatchNorm2d,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ExtraLayer {
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = tensor::relu(&self.reduce_bn.forward(&self.reduce.forward(x)?, train)?);
        Ok(tensor::relu(&self.bn.forward(&self.conv.forward(&y)?, train)?))
    }
}

impl Module for ExtraLayer {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.reduce_bn.visit(&join(prefix, "reduce_bn"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

pub enum LevelBuilder {
    Lateral { stage: usize, conv: Conv2d },
    Extra(ExtraLayer),
}

/// Ordered per-scale feature maps, each `[N, C_l, H_l, W_l]`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

/// Builds the pyramid from backbone stage features.
pub struct Pyramid {
    pub residual: Option<(usize, ResidualBlock)>,
    pub levels: Vec<LevelBuilder>,
    expected: Vec<(usize, usize, usize)>,
}

impl Pyramid {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng64) -> Result<Self> {
        let grids = cfg.grids()?;
        let mut residual = None;
        let mut levels = Vec::with_capacity(cfg.levels.len());
        for (i, l) in cfg.levels.iter().enumerate() {
            let cin = cfg.level_in_channels(i);
            match l.source {
                LevelSource::Stage(s) => {
                    if l.residual {
                        if residual.is_some() {
                            return Err(Error::Config("only one pyramid level may carry the residual block".into()));
                        }
                        residual = Some((i, ResidualBlock::new(cin, cfg.eps, rng)?));
                    }
                    let spec = ConvSpec::new(cin, l.channels, l.kernel, l.stride, l.padding);
                    levels.push(LevelBuilder::Lateral { stage: s, conv: Conv2d::new(spec, true, rng)? });
                }
                LevelSource::Previous => {
                    if l.residual {
                        return Err(Error::Config(format!("level{}: residual block needs a stage source", i + 1)));
                    }
                    let reduce = ConvSpec::new(cin, l.mid_channels, 1, 1, 0);
                    let spec = ConvSpec::new(l.mid_channels, l.channels, l.kernel, l.stride, l.padding);
                    levels.push(LevelBuilder::Extra(ExtraLayer {
                        reduce: Conv2d::new(reduce, false, rng)?,
                        reduce_bn: BatchNorm2d::new(l.mid_channels, cfg.eps),
                        conv: Conv2d::new(spec, false, rng)?,
                        bn: BatchNorm2d::new(l.channels, cfg.eps),
                    }));
                }
            }
        }
        let expected = grids
            .iter()
            .zip(&cfg.levels)
            .map(|(&(h, w), l)| (l.channels, h, w))
            .collect();
        Ok(Self { residual, levels, expected })
    }

    /// `(channels, height, width)` of every level at the configured input size.
    pub fn expected_shapes(&self) -> &[(usize, usize, usize)] {
        &self.expected
    }

    pub fn forward(&self, backbone: &BackboneOutput, train: bool) -> Result<FeaturePyramid> {
        let mut maps: Vec<Tensor> = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            let y = match level {
                LevelBuilder::Lateral { stage, conv } => {
                    let src = backbone.stage_features.get(stage - 1).ok_or_else(|| {
                        Error::Config(format!("level{} reads stage{stage}, backbone has {}", i + 1, backbone.stage_features.len()))
                    })?;
                    if src.dim(1) != conv.spec.in_channels {
                        return Err(Error::Config(format!(
                            "level{}: stage{stage} has {} channels, lateral expects {}",
                            i + 1,
                            src.dim(1),
                            conv.spec.in_channels
                        )));
                    }
                    match &self.residual {
                        Some((j, rb)) if *j == i => conv.forward(&rb.forward(src, train)?)?,
                        _ => conv.forward(src)?,
                    }
                }
                LevelBuilder::Extra(extra) => extra.forward(&maps[i - 1], train)?,
            };
            maps.push(y);
        }
        Ok(FeaturePyramid { maps })
    }
}

impl Module for Pyramid {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        if let Some((_, rb)) = &self.residual {
            rb.visit(&join(prefix, "res"), f);
        }
        for (i, l) in self.levels.iter().enumerate() {
            match l {
                LevelBuilder::Lateral { conv, .. } => conv.visit(&join(prefix, &format!("lateral{}", i + 1)), f),
                LevelBuilder::Extra(e) => e.visit(&join(prefix, &format!("extra{}", i + 1)), f),
            }
        }
    }
}

pub struct Predictor {
    pub loc: Conv2d,
    pub conf: Conv2d,
    pub anchors: usize,
}

impl Module for Predictor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.loc.visit(&join(prefix, "loc"), f);
        self.conf.visit(&join(prefix, "conf"), f);
    }
}

/// 3x3 predictors per level.
pub struct Predictors {
    pub levels: Vec<Predictor>,
    pub num_classes: usize,
}

impl Predictors {
    pub fn new(channels: &[usize], anchors_per_loc: &[usize], num_classes: usize, rng: &mut Rng64) -> Result<Self> {
        if channels.len() != anchors_per_loc.len() {
            return Err(Error::Config(format!(
                "{} pyramid levels but {} anchor counts",
                channels.len(),
                anchors_per_loc.len()
            )));
        }
        let levels = channels
            .iter()
            .zip(anchors_per_loc)
            .map(|(&c, &a)| {
                Ok(Predictor {
                    loc: Conv2d::new(ConvSpec::new(c, a * 4, 3, 1, 1), true, rng)?,
                    conf: Conv2d::new(ConvSpec::new(c, a * (num_classes + 1), 3, 1, 1), true, rng)?,
                    anchors: a,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels, num_classes })
    }

    /// Returns `loc [N, A, 4]` and `conf [N, A, classes + 1]`, rows ordered
    /// level-major, then row-major over cells, then anchor.
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<(Tensor, Tensor)> {
        if pyramid.maps.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "{} pyramid maps for {} predictor levels",
                pyramid.maps.len(),
                self.levels.len()
            )));
        }
        let flatten = |y: Tensor, width: usize| -> Result<Tensor> {
            let n = y.dim(0);
            let rows = y.numel() / (n * width);
            let y = tensor::permute(&y, &[0, 2, 3, 1])?;
            tensor::reshape(&y, &[n, rows, width])
        };
        let mut locs = Vec::with_capacity(self.levels.len());
        let mut confs = Vec::with_capacity(self.levels.len());
        for (p, x) in self.levels.iter().zip(&pyramid.maps) {
            locs.push(flatten(p.loc.forward(x)?, 4)?);
            confs.push(flatten(p.conf.forward(x)?, self.num_classes + 1)?);
        }
        Ok((tensor::concat(&locs, 1)?, tensor::concat(&confs, 1)?))
    }
}

impl Module for Predictors {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        for (i, p) in self.levels.iter().enumerate() {
            p.visit(&join(prefix, &format!("pred{}", i + 1)), f);
        }
    }
}

/// Everything between the backbone and the raw predictions.
pub struct DetectionHead {
    pub pyramid: Pyramid,
    /// Present only for levels whose token count is within the configured threshold.
    pub attention: Vec<Option<AttentionUnit>>,
    pub predictors: Predictors,
}

impl DetectionHead {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng64) -> Result<Self> {
        let pyramid = Pyramid::new(cfg, rng)?;
        let attention = pyramid
            .expected_shapes()
            .iter()
            .map(|&(c, h, w)| (h * w <= cfg.au_threshold).then(|| AttentionUnit::new(c, rng)))
            .collect();
        let channels: Vec<usize> = cfg.levels.iter().map(|l| l.channels).collect();
        let predictors = Predictors::new(&channels, &cfg.anchors_per_location(), cfg.num_classes, rng)?;
        Ok(Self { pyramid, attention, predictors })
    }

    /// Pyramid maps after the attention units.
    pub fn features(&self, backbone: &BackboneOutput, train: bool) -> Result<FeaturePyramid> {
        let raw = self.pyramid.forward(backbone, train)?;
        let maps = raw
            .maps
            .iter()
            .zip(&self.attention)
            .map(|(x, au)| match au {
                Some(au) => au.forward(x),
                None => Ok(x.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { maps })
    }

    pub fn forward(&self, backbone: &BackboneOutput, train: bool) -> Result<(Tensor, Tensor)> {
        self.predictors.forward(&self.features(backbone, train)?)
    }
}

impl Module for DetectionHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.pyramid.visit(prefix, f);
        for (i, au) in self.attention.iter().enumerate() {
            if let Some(au) = au {
                au.visit(&join(prefix, &format!("au{}", i + 1)), f);
            }
        }
        self.predictors.visit(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init::{rng, uniform};

    #[test]
    fn residual_zero_branch_is_identity() {
        let mut r = rng(0);
        let rb = ResidualBlock::new(4, 1e-5, &mut r).unwrap();
        rb.conv1.weight.set(Tensor::zeros(&[4, 4, 3, 3]));
        rb.conv2.weight.set(Tensor::zeros(&[4, 4, 3, 3]));
        let x = uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut r).requires_grad();
        for train in [true, false] {
            let y = rb.forward(&x, train).unwrap();
            assert_eq!(y.data(), x.data());
        }
        x.zero_grad();
        tensor::sum(&rb.forward(&x, true).unwrap()).backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn residual_preserves_shape() {
        let rb = ResidualBlock::new(6, 1e-5, &mut rng(1)).unwrap();
        let x = uniform(&[1, 6, 5, 4], -1.0, 1.0, &mut rng(2));
        assert_eq!(rb.forward(&x, true).unwrap().shape(), x.shape());
    }

    #[test]
    fn attention_unit_zero_value_is_identity() {
        let mut r = rng(3);
        let au = AttentionUnit::new(4, &mut r);
        au.value.set(Tensor::zeros(&[4, 4]));
        let x = uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut r);
        assert_eq!(au.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn attention_unit_single_position() {
        let mut r = rng(4);
        let au = AttentionUnit::new(8, &mut r);
        let x = uniform(&[1, 8, 1, 1], -1.0, 1.0, &mut r);
        assert_eq!(au.weights(&x).unwrap().data(), &[1.0]);
        let (tokens, _) = map_to_tokens(&x).unwrap();
        let v = tensor::linear(&tokens, &au.value.get(), None).unwrap();
        let want: Vec<f32> = x.data().iter().zip(v.data()).map(|(a, b)| a + b).collect();
        assert_eq!(au.forward(&x).unwrap().data(), &want[..]);
    }

    #[test]
    fn attention_rows_normalized() {
        let mut r = rng(5);
        let au = AttentionUnit::new(16, &mut r);
        let x = uniform(&[2, 16, 4, 3], -1.0, 1.0, &mut r);
        let a = au.weights(&x).unwrap();
        for row in a.data().chunks(12) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn predictor_count_mismatch() {
        assert!(Predictors::new(&[4, 4], &[4], 3, &mut rng(0)).is_err());
        let p = Predictors::new(&[4], &[4], 3, &mut rng(0)).unwrap();
        let pyr = FeaturePyramid { maps: vec![Tensor::zeros(&[1, 4, 1, 1]); 2] };
        assert!(p.forward(&pyr).is_err());
    }

    #[test]
    fn single_cell_level() {
        let p = Predictors::new(&[4], &[4], 20, &mut rng(0)).unwrap();
        let pyr = FeaturePyramid { maps: vec![uniform(&[1, 4, 1, 1], -1.0, 1.0, &mut rng(1))] };
        let (loc, conf) = p.forward(&pyr).unwrap();
        assert_eq!(loc.shape(), &[1, 4, 4]);
        assert_eq!(conf.shape(), &[1, 4, 21]);
    }

    #[test]
    fn tiny_pyramid_shapes() {
        let cfg = ModelConfig::tiny();
        let mut r = rng(6);
        let bb = crate::backbone::Backbone::new(&cfg.stages, cfg.eps, &mut r).unwrap();
        let head = DetectionHead::new(&cfg, &mut r).unwrap();
        let feats = bb.forward(&Tensor::zeros(&[1, 3, 96, 96])).unwrap();
        let pyr = head.pyramid.forward(&feats, false).unwrap();
        let shapes: Vec<&[usize]> = pyr.maps.iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, vec![&[1, 32, 12, 12][..], &[1, 32, 6, 6], &[1, 32, 3, 3]]);
        assert!(pyr.maps.iter().all(|m| m.data().iter().all(|v| v.is_finite())));
        let (loc, conf) = head.forward(&feats, false).unwrap();
        let a = cfg.num_anchors().unwrap();
        assert_eq!(loc.shape(), &[1, a, 4]);
        assert_eq!(conf.shape(), &[1, a, 4]);
    }

    #[test]
    fn parameter_names() {
        let cfg = ModelConfig::tiny();
        let head = DetectionHead::new(&cfg, &mut rng(0)).unwrap();
        let names: Vec<String> = head.slots().into_iter().map(|(n, _)| n).collect();
        for want in ["res.conv1.weight", "res.bn2.running_var", "lateral1.weight", "extra3.reduce.weight", "au1.query", "pred3.conf.bias"] {
            assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
        }
    }
}
