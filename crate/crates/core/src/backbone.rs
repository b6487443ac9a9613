//! Three-stage convolutional vision transformer.
//!
//! Each stage embeds its input grid with a strided convolution, flattens it to
//! tokens, and runs a stack of pre-norm transformer blocks whose q/k/v
//! projections are depthwise-separable convolutions over the re-gridded
//! tokens. No positional embedding is added anywhere.

use crate::config::StageConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, LayerNorm, Linear, Module, SeparableConv2d, Slot};
use crate::tensor::init::Rng64;
use crate::tensor::{self, ConvSpec, Tensor};

/// Token grid height and width.
pub type Grid = (usize, usize);

/// `[N, T, D]` tokens to a `[N, D, H, W]` feature map.
pub fn tokens_to_map(tokens: &Tensor, grid: Grid) -> Result<Tensor> {
    let (n, t, d) = token_dims(tokens)?;
    if t != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "{t} tokens cannot fill a {}x{} grid",
            grid.0, grid.1
        )));
    }
    let chw = tensor::permute(tokens, &[0, 2, 1])?;
    tensor::reshape(&chw, &[n, d, grid.0, grid.1])
}

/// `[N, D, H, W]` feature map to `[N, H*W, D]` tokens.
pub fn map_to_tokens(x: &Tensor) -> Result<(Tensor, Grid)> {
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected (N, C, H, W), got {:?}", x.shape())));
    }
    let (n, d, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let flat = tensor::reshape(x, &[n, d, h * w])?;
    Ok((tensor::permute(&flat, &[0, 2, 1])?, (h, w)))
}

fn token_dims(tokens: &Tensor) -> Result<(usize, usize, usize)> {
    if tokens.rank() != 3 {
        return Err(Error::Shape(format!("expected tokens (N, T, D), got {:?}", tokens.shape())));
    }
    Ok((tokens.dim(0), tokens.dim(1), tokens.dim(2)))
}

/// Strided conv, flatten to tokens, layer norm.
pub struct TokenEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl TokenEmbed {
    pub fn new(cfg: &StageConfig, eps: f32, rng: &mut Rng64) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(cfg.embed, true, rng)?,
            norm: LayerNorm::new(cfg.dim, eps),
        })
    }
}

impl Module for TokenEmbed {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
}

/// Maps `[N, C, H, W]` to normalized tokens `[N, H'W', D]` and their grid.
pub fn conv_token_embed(x: &Tensor, embed: &TokenEmbed) -> Result<(Tensor, Grid)> {
    let spec = &embed.conv.spec;
    if x.rank() != 4 {
        return Err(Error::Shape(format!("expected (N, C, H, W), got {:?}", x.shape())));
    }
    if x.dim(1) != spec.in_channels {
        return Err(Error::dim("channels", spec.in_channels, x.dim(1), "token embedding"));
    }
    let y = embed.conv.forward(x)?;
    let (tokens, grid) = map_to_tokens(&y)?;
    Ok((embed.norm.forward(&tokens)?, grid))
}

/// Separable-conv q/k/v projections feeding multi-head attention.
pub struct ConvAttention {
    pub q: SeparableConv2d,
    pub k: SeparableConv2d,
    pub v: SeparableConv2d,
    pub out: Linear,
    pub heads: usize,
}

impl ConvAttention {
    pub fn new(dim: usize, heads: usize, proj_kernel: usize, rng: &mut Rng64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let spec = ConvSpec::new(dim, dim, proj_kernel, 1, proj_kernel / 2);
        Ok(Self {
            q: SeparableConv2d::new(spec, true, rng)?,
            k: SeparableConv2d::new(spec, true, rng)?,
            v: SeparableConv2d::new(spec, true, rng)?,
            out: Linear::new(dim, dim, rng),
            heads,
        })
    }
}

impl Module for ConvAttention {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// Re-grids tokens and applies the three separable projections (stride 1,
/// size-preserving padding), returning q, k, v as tokens.
pub fn conv_projection(tokens: &Tensor, grid: Grid, attn: &ConvAttention) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, t, _) = token_dims(tokens)?;
    if t != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "conv projection: {t} tokens but grid {}x{} = {}",
            grid.0,
            grid.1,
            grid.0 * grid.1
        )));
    }
    let map = tokens_to_map(tokens, grid)?;
    let project = |p: &SeparableConv2d| -> Result<Tensor> { Ok(map_to_tokens(&p.forward(&map)?)?.0) };
    Ok((project(&attn.q)?, project(&attn.k)?, project(&attn.v)?))
}

/// `[N, T, D]` to `[N * heads, T, D / heads]`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, t, d) = token_dims(x)?;
    let x = tensor::reshape(x, &[n, t, heads, d / heads])?;
    let x = tensor::permute(&x, &[0, 2, 1, 3])?;
    tensor::reshape(&x, &[n * heads, t, d / heads])
}

fn merge_heads(x: &Tensor, n: usize, heads: usize) -> Result<Tensor> {
    let (t, dh) = (x.dim(1), x.dim(2));
    let x = tensor::reshape(x, &[n, heads, t, dh])?;
    let x = tensor::permute(&x, &[0, 2, 1, 3])?;
    tensor::reshape(&x, &[n, t, heads * dh])
}

/// Per-head attention matrices `softmax(q_h k_h^T / sqrt(d_h))`, shape `[N * heads, T, T]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, _, d) = token_dims(q)?;
    if q.shape() != k.shape() {
        return Err(Error::Shape(format!("q {:?} vs k {:?}", q.shape(), k.shape())));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let qh = split_heads(q, heads)?;
    let kt = tensor::permute(&split_heads(k, heads)?, &[0, 2, 1])?;
    let scores = tensor::scale(&tensor::bmm(&qh, &kt)?, 1.0 / ((d / heads) as f32).sqrt());
    tensor::softmax(&scores, 2)
}

/// Multi-head scaled dot-product attention; heads are concatenated and passed
/// through the output projection `out`.
pub fn mhsa(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, out: &Linear) -> Result<Tensor> {
    let (n, _, _) = token_dims(q)?;
    if v.shape() != q.shape() {
        return Err(Error::Shape(format!("q {:?} vs v {:?}", q.shape(), v.shape())));
    }
    let attn = attention_weights(q, k, heads)?;
    let mixed = tensor::bmm(&attn, &split_heads(v, heads)?)?;
    out.forward(&merge_heads(&mixed, n, heads)?)
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Module for Mlp {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Pre-norm block: `x + MHSA(proj(LN(x)))`, then `x + MLP(LN(x))`.
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: ConvAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(cfg: &StageConfig, eps: f32, rng: &mut Rng64) -> Result<Self> {
        let hidden = cfg.dim * cfg.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(cfg.dim, eps),
            attn: ConvAttention::new(cfg.dim, cfg.heads, cfg.proj_kernel, rng)?,
            norm2: LayerNorm::new(cfg.dim, eps),
            mlp: Mlp {
                fc1: Linear::new(cfg.dim, hidden, rng),
                fc2: Linear::new(hidden, cfg.dim, rng),
            },
        })
    }

    pub fn forward(&self, tokens: &Tensor, grid: Grid) -> Result<Tensor> {
        let d = self.norm1.gamma.numel();
        let (_, _, td) = token_dims(tokens)?;
        if td != d {
            return Err(Error::dim("features", d, td, "transformer block"));
        }
        let (q, k, v) = conv_projection(&self.norm1.forward(tokens)?, grid, &self.attn)?;
        let x = tensor::add(tokens, &mhsa(&q, &k, &v, self.attn.heads, &self.attn.out)?)?;
        let h = tensor::gelu(&self.mlp.fc1.forward(&self.norm2.forward(&x)?)?);
        tensor::add(&x, &self.mlp.fc2.forward(&h)?)
    }
}

impl Module for TransformerBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
}

pub struct Stage {
    pub embed: TokenEmbed,
    pub blocks: Vec<TransformerBlock>,
}

impl Stage {
    pub fn new(cfg: &StageConfig, eps: f32, rng: &mut Rng64) -> Result<Self> {
        let embed = TokenEmbed::new(cfg, eps, rng)?;
        let blocks = (0..cfg.num_blocks)
            .map(|_| TransformerBlock::new(cfg, eps, rng))
            .collect::<Result<_>>()?;
        Ok(Self { embed, blocks })
    }

    /// `[N, C, H, W]` in, `[N, D, H', W']` out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mut tokens, grid) = conv_token_embed(x, &self.embed)?;
        for block in &self.blocks {
            tokens = block.forward(&tokens, grid)?;
        }
        tokens_to_map(&tokens, grid)
    }
}

impl Module for Stage {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (j, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{}", j + 1)), f);
        }
    }
}

/// Feature maps of the three stages, each `[N, D_i, H_i, W_i]`.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub stage_features: Vec<Tensor>,
}

pub struct Backbone {
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(cfgs: &[StageConfig], eps: f32, rng: &mut Rng64) -> Result<Self> {
        for (i, c) in cfgs.iter().enumerate() {
            c.validate(i + 1)?;
        }
        Ok(Self {
            stages: cfgs.iter().map(|c| Stage::new(c, eps, rng)).collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<BackboneOutput> {
        let mut x = image.clone();
        let mut stage_features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = stage.forward(&x)?;
            stage_features.push(x.clone());
        }
        Ok(BackboneOutput { stage_features })
    }
}

impl Module for Backbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Slot)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::tensor::init::{rng, uniform};

    fn tiny_stage(dim: usize, heads: usize, proj: usize) -> StageConfig {
        StageConfig {
            embed: ConvSpec::new(3, dim, 3, 1, 1),
            num_blocks: 1,
            heads,
            dim,
            mlp_ratio: 2,
            proj_kernel: proj,
        }
    }

    #[test]
    fn embed_shapes() {
        let mut r = rng(0);
        let cfg = ModelConfig::tiny();
        let e = TokenEmbed::new(&cfg.stages[0], 1e-5, &mut r).unwrap();
        let x = uniform(&[1, 3, 96, 96], -1.0, 1.0, &mut r);
        let (t, g) = conv_token_embed(&x, &e).unwrap();
        assert_eq!(t.shape(), &[1, 576, 8]);
        assert_eq!(g, (24, 24));

        let unit = StageConfig { embed: ConvSpec::new(3, 4, 1, 1, 0), ..tiny_stage(4, 1, 1) };
        let e = TokenEmbed::new(&unit, 1e-5, &mut r).unwrap();
        let (t, _) = conv_token_embed(&uniform(&[1, 3, 5, 7], -1.0, 1.0, &mut r), &e).unwrap();
        assert_eq!(t.dim(1), 35);
        assert!(conv_token_embed(&Tensor::zeros(&[1, 2, 5, 5]), &e).is_err());
    }

    #[test]
    fn projection_checks_grid() {
        let mut r = rng(1);
        let a = ConvAttention::new(4, 2, 3, &mut r).unwrap();
        let t = uniform(&[1, 6, 4], -1.0, 1.0, &mut r);
        assert!(conv_projection(&t, (2, 2), &a).is_err());
        let (q, k, v) = conv_projection(&t, (2, 3), &a).unwrap();
        assert_eq!(q.shape(), &[1, 6, 4]);
        assert_eq!(k.shape(), v.shape());
    }

    #[test]
    fn zero_tokens_project_to_zero() {
        let a = ConvAttention::new(4, 1, 3, &mut rng(2)).unwrap();
        let (q, k, v) = conv_projection(&Tensor::zeros(&[1, 9, 4]), (3, 3), &a).unwrap();
        for x in [q, k, v] {
            assert!(x.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_token_attention_is_projected_value() {
        let mut r = rng(3);
        let out = Linear::new(4, 4, &mut r);
        let q = uniform(&[1, 1, 4], -1.0, 1.0, &mut r);
        let v = uniform(&[1, 1, 4], -1.0, 1.0, &mut r);
        let a = attention_weights(&q, &q, 2).unwrap();
        assert!(a.data().iter().all(|&x| x == 1.0));
        let y = mhsa(&q, &q, &v, 2, &out).unwrap();
        assert_eq!(y.data(), out.forward(&v).unwrap().data());
    }

    #[test]
    fn zero_queries_average_values() {
        let mut r = rng(4);
        let out = Linear::new(4, 4, &mut r);
        let k = uniform(&[1, 5, 4], -1.0, 1.0, &mut r);
        let v = uniform(&[1, 5, 4], -1.0, 1.0, &mut r);
        let y = mhsa(&Tensor::zeros(&[1, 5, 4]), &k, &v, 2, &out).unwrap();
        let mut avg = vec![0.0f32; 4];
        for t in 0..5 {
            for d in 0..4 {
                avg[d] += v.data()[t * 4 + d] / 5.0;
            }
        }
        let want = out.forward(&Tensor::new(&[1, 1, 4], avg).unwrap()).unwrap();
        for t in 0..5 {
            for d in 0..4 {
                assert!((y.data()[t * 4 + d] - want.data()[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let q = Tensor::zeros(&[1, 2, 6]);
        assert!(matches!(attention_weights(&q, &q, 4), Err(Error::Config(_))));
        assert!(ConvAttention::new(6, 4, 3, &mut rng(0)).is_err());
    }

    #[test]
    fn zeroed_residual_branches_make_identity() {
        let mut r = rng(5);
        let b = TransformerBlock::new(&tiny_stage(4, 2, 3), 1e-5, &mut r).unwrap();
        b.attn.out.weight.set(Tensor::zeros(&[4, 4]));
        b.mlp.fc2.weight.set(Tensor::zeros(&[8, 4]));
        let x = uniform(&[1, 6, 4], -1.0, 1.0, &mut r);
        assert_eq!(b.forward(&x, (2, 3)).unwrap().data(), x.data());
    }

    #[test]
    fn tiny_backbone_grids() {
        let cfg = ModelConfig::tiny();
        let bb = Backbone::new(&cfg.stages, cfg.eps, &mut rng(6)).unwrap();
        let x = uniform(&[1, 3, 96, 96], -1.0, 1.0, &mut rng(7));
        let out = bb.forward(&x).unwrap();
        let shapes: Vec<&[usize]> = out.stage_features.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[1, 8, 24, 24][..], &[1, 16, 12, 12], &[1, 32, 6, 6]]);
        assert!(out.stage_features.iter().all(|t| t.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn doubling_input_doubles_grids() {
        let cfg = ModelConfig::tiny();
        let small = cfg.stage_grids().unwrap();
        let big = ModelConfig { input_size: 192, ..cfg }.stage_grids().unwrap();
        for (s, b) in small.iter().zip(&big) {
            assert!(b.0 == 2 * s.0 || b.0 == 2 * s.0 + 1, "{s:?} -> {b:?}");
        }
    }

    #[test]
    fn parameter_names() {
        let cfg = ModelConfig::tiny();
        let bb = Backbone::new(&cfg.stages, cfg.eps, &mut rng(0)).unwrap();
        let names: Vec<String> = bb.slots().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"stage1.embed.conv.weight".to_string()));
        assert!(names.contains(&"stage3.block1.attn.q.depthwise".to_string()));
        assert!(names.contains(&"stage2.block1.mlp.fc2.bias".to_string()));
        assert!(names.contains(&"stage1.block1.norm2.gamma".to_string()));
    }
}
