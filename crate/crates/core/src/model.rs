use crate::backbone::{Backbone, BackboneOutput};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{DetectionHead, FeaturePyramid};
use crate::nn::{Module, Slot};
use crate::tensor::init::rng;
use crate::tensor::Tensor;

/// Backbone plus detection head, Xavier-uniform initialized from a seed.
pub struct CvtAssd {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub head: DetectionHead,
}

impl CvtAssd {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng(seed);
        let backbone = Backbone::new(&cfg.stages, cfg.eps, &mut r)?;
        let head = DetectionHead::new(cfg, &mut r)?;
        Ok(Self { cfg: cfg.clone(), backbone, head })
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("expected images (N, C, H, W), got {:?}", images.shape())));
        }
        if images.dim(1) != self.cfg.in_channels {
            return Err(Error::dim("channels", self.cfg.in_channels, images.dim(1), "model input"));
        }
        let s = self.cfg.input_size;
        if images.dim(2) != s || images.dim(3) != s {
            return Err(Error::Shape(format!(
                "model expects {s}x{s} inputs, got {}x{}",
                images.dim(2),
                images.dim(3)
            )));
        }
        Ok(())
    }

    pub fn backbone_features(&self, images: &Tensor) -> Result<BackboneOutput> {
        self.check_input(images)?;
        self.backbone.forward(images)
    }

    /// Pyramid maps after attention units.
    pub fn pyramid(&self, images: &Tensor, train: bool) -> Result<FeaturePyramid> {
        self.head.features(&self.backbone_features(images)?, train)
    }

    /// Raw predictions `loc [N, A, 4]` and `conf [N, A, classes + 1]`.
    /// `train` selects batch statistics in the normalization layers of the head.
    pub fn forward(&self, images: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        self.head.forward(&self.backbone_features(images)?, train)
    }
}

impl Module for CvtAssd {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.backbone.visit(prefix, f);
        self.head.visit(&crate::nn::join(prefix, "head"), f);
    }
}
