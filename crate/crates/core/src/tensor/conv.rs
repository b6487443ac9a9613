use rayon::prelude::*;

use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2D convolution over `(N, C, H, W)` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride and padding, one group.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            in_channels,
            out_channels,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec { kernel, stride, in_channels, out_channels, groups, .. } = *self;
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config(format!("kernel and stride must be positive: {self:?}")));
        }
        if in_channels == 0 || out_channels == 0 || groups == 0 {
            return Err(Error::Config(format!("channels and groups must be positive: {self:?}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Config(format!(
                "channels {in_channels}->{out_channels} not divisible by {groups} groups"
            )));
        }
        Ok(())
    }

    /// `floor((size + 2p - k) / s + 1)` per axis; errors when non-positive.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |size: usize, k: usize, s: usize, p: usize, name: &str| -> Result<usize> {
            let span = size + 2 * p;
            if span < k {
                return Err(Error::Config(format!(
                    "{name}: input {size} with padding {p} is smaller than kernel {k}"
                )));
            }
            Ok((span - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1, "width")?,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1]
    }

    /// Multiply-accumulates for one image at output size `(ho, wo)`.
    pub fn macs(&self, ho: usize, wo: usize) -> u64 {
        let [o, i, kh, kw] = self.weight_shape();
        (o * i * kh * kw) as u64 * (ho * wo) as u64
    }
}

struct Geometry {
    spec: ConvSpec,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.spec.in_channels / self.spec.groups
    }
    fn cout_g(&self) -> usize {
        self.spec.out_channels / self.spec.groups
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.spec.kernel.0 * self.spec.kernel.1
    }
    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input planes already are the column matrix.
    fn is_pointwise(&self) -> bool {
        self.spec.kernel == (1, 1) && self.spec.stride == (1, 1) && self.spec.padding == (0, 0)
    }

    /// Unfolds the channels of one group into `[cin_g * kh * kw, ho * wo]`.
    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.positions();
        for c in 0..self.cin_g() {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &mut cols[((c * kh + ki) * kw + kj) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        let out = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            *o = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], x: &mut [f32]) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.positions();
        for c in 0..self.cin_g() {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((c * kh + ki) * kw + kj) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * sh + ki) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of `input[N, C, H, W]` with `weight[C', C/groups, kh, kw]`.
pub fn conv2d(input: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    spec.validate()?;
    if input.rank() != 4 {
        return Err(Error::Shape(format!("conv2d input must be (N, C, H, W), got {:?}", input.shape())));
    }
    if input.dim(1) != spec.in_channels {
        return Err(Error::dim("channels", spec.in_channels, input.dim(1), "conv2d input"));
    }
    let ws = spec.weight_shape();
    if weight.rank() != 4 {
        return Err(Error::Shape(format!("conv2d weight must be rank 4, got {:?}", weight.shape())));
    }
    for (axis, name) in ["out_channels", "in_channels_per_group", "kernel_height", "kernel_width"].into_iter().enumerate() {
        if weight.dim(axis) != ws[axis] {
            return Err(Error::dim(name, ws[axis], weight.dim(axis), "conv2d weight"));
        }
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::dim("out_channels", spec.out_channels, b.numel(), "conv2d bias"));
        }
    }
    let (n, h, w) = (input.dim(0), input.dim(2), input.dim(3));
    let (ho, wo) = spec.output_size(h, w)?;
    let geo = Geometry { spec: *spec, h, w, ho, wo };

    let groups = spec.groups;
    let (cin_g, cout_g, rows, p) = (geo.cin_g(), geo.cout_g(), geo.col_rows(), geo.positions());
    let in_img = spec.in_channels * h * w;
    let out_img = spec.out_channels * p;
    let wd = weight.data();
    let mut data = vec![0.0f32; n * out_img];
    data.par_chunks_mut(out_img).enumerate().for_each(|(b, out)| {
        let x = &input.data()[b * in_img..(b + 1) * in_img];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * p] };
        for g in 0..groups {
            let xg = &x[g * cin_g * h * w..(g + 1) * cin_g * h * w];
            let wg = &wd[g * cout_g * rows..(g + 1) * cout_g * rows];
            let og = &mut out[g * cout_g * p..(g + 1) * cout_g * p];
            if geo.is_pointwise() {
                gemm(wg, xg, og, cout_g, rows, p, false);
            } else {
                geo.im2col(xg, &mut cols);
                gemm(wg, &cols, og, cout_g, rows, p, false);
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in out.chunks_mut(p).zip(bias.data()) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    });

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let out_shape = vec![n, spec.out_channels, ho, wo];
    Ok(Tensor::from_op(
        "conv2d",
        out_shape,
        data,
        parents,
        Box::new(move |grad, _, parents| {
            let x_all = parents[0].data();
            let wd = parents[1].data();
            let need_x = parents[0].tracks_grad();
            let need_w = parents[1].tracks_grad();
            let per_image: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
                .into_par_iter()
                .map(|b| {
                    let x = &x_all[b * in_img..(b + 1) * in_img];
                    let gy = &grad[b * out_img..(b + 1) * out_img];
                    let mut gx = if need_x { vec![0.0f32; in_img] } else { Vec::new() };
                    let mut gw = if need_w { vec![0.0f32; wd.len()] } else { Vec::new() };
                    let pointwise = geo.is_pointwise();
                    let mut cols = if pointwise { Vec::new() } else { vec![0.0f32; rows * p] };
                    for g in 0..groups {
                        let gyg = &gy[g * cout_g * p..(g + 1) * cout_g * p];
                        let xs = g * cin_g * h * w..(g + 1) * cin_g * h * w;
                        if need_w {
                            let gwg = &mut gw[g * cout_g * rows..(g + 1) * cout_g * rows];
                            if pointwise {
                                gemm_nt(gyg, &x[xs.clone()], gwg, cout_g, p, rows, false);
                            } else {
                                geo.im2col(&x[xs.clone()], &mut cols);
                                gemm_nt(gyg, &cols, gwg, cout_g, p, rows, false);
                            }
                        }
                        if need_x {
                            let wg = &wd[g * cout_g * rows..(g + 1) * cout_g * rows];
                            if pointwise {
                                gemm_tn(wg, gyg, &mut gx[xs], rows, cout_g, p, false);
                            } else {
                                gemm_tn(wg, gyg, &mut cols, rows, cout_g, p, false);
                                geo.col2im(&cols, &mut gx[xs]);
                            }
                        }
                    }
                    (gx, gw)
                })
                .collect();
            let mut gx_all = Vec::with_capacity(if need_x { n * in_img } else { 0 });
            let mut gw_all = vec![0.0f32; wd.len()];
            for (gx, gw) in per_image {
                gx_all.extend_from_slice(&gx);
                if need_w {
                    gw_all.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                }
            }
            let mut out = vec![need_x.then_some(gx_all), need_w.then_some(gw_all)];
            if parents.len() == 3 {
                let mut gb = vec![0.0f32; out_img / p];
                for img in grad.chunks(out_img) {
                    for (acc, plane) in gb.iter_mut().zip(img.chunks(p)) {
                        *acc += plane.iter().sum::<f32>();
                    }
                }
                out.push(Some(gb));
            }
            out
        }),
    ))
}

/// Depthwise convolution (`groups == C`) followed by a 1x1 pointwise convolution.
///
/// `spec` describes the composite map: kernel, stride and padding of the
/// depthwise stage and the overall `in_channels -> out_channels`.
pub fn separable_conv2d(
    input: &Tensor,
    spec: &ConvSpec,
    depthwise_weight: &Tensor,
    pointwise_weight: &Tensor,
    pointwise_bias: Option<&Tensor>,
) -> Result<Tensor> {
    let c = spec.in_channels;
    let depthwise = ConvSpec { out_channels: c, groups: c, ..*spec };
    let pointwise = ConvSpec::new(c, spec.out_channels, 1, 1, 0);
    let mid = conv2d(input, &depthwise, depthwise_weight, None)?;
    conv2d(&mid, &pointwise, pointwise_weight, pointwise_bias)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_examples() {
        assert_eq!(ConvSpec::new(3, 64, 7, 4, 2).output_size(384, 384).unwrap(), (96, 96));
        assert_eq!(ConvSpec::new(3, 64, 3, 2, 1).output_size(48, 48).unwrap(), (24, 24));
        assert!(matches!(ConvSpec::new(1, 1, 5, 1, 0).output_size(3, 3), Err(Error::Config(_))));
    }

    #[test]
    fn output_size_exhaustive() {
        for h in 1..=64usize {
            for k in [1usize, 3, 5, 7] {
                for s in 1..=4usize {
                    for p in 0..=3usize {
                        let spec = ConvSpec::new(1, 1, k, s, p);
                        let num = h as f64 + 2.0 * p as f64 - k as f64;
                        let want = (num / s as f64 + 1.0).floor();
                        match spec.output_size(h, h) {
                            Ok((ho, wo)) => {
                                assert_eq!(ho as f64, want, "h={h} k={k} s={s} p={p}");
                                assert_eq!(ho, wo);
                                let x = Tensor::ones(&[1, 1, h, h]);
                                let wt = Tensor::ones(&[1, 1, k, k]);
                                let y = conv2d(&x, &spec, &wt, None).unwrap();
                                assert_eq!(y.shape(), &[1, 1, ho, ho]);
                            }
                            Err(_) => assert!(want <= 0.0, "h={h} k={k} s={s} p={p}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn all_ones_sum_is_nine() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &ConvSpec::new(1, 1, 3, 1, 0), &w, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(&[2, 3, 4, 5], (0..120).map(|i| (i as f32 * 0.7).sin()).collect()).unwrap();
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = Tensor::new(&[3, 3, 1, 1], w).unwrap();
        let y = conv2d(&x, &ConvSpec::new(3, 3, 1, 1, 0), &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mismatch_names_axis() {
        let x = Tensor::ones(&[1, 2, 4, 4]);
        let w = Tensor::ones(&[1, 3, 3, 3]);
        match conv2d(&x, &ConvSpec::new(3, 1, 3, 1, 1), &w, None) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "channels"),
            other => panic!("{other:?}"),
        }
        let x = Tensor::ones(&[1, 3, 4, 4]);
        let w = Tensor::ones(&[1, 3, 5, 3]);
        match conv2d(&x, &ConvSpec::new(3, 1, 3, 1, 1), &w, None) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "kernel_height"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn separable_identity() {
        let x = Tensor::new(&[1, 2, 3, 3], (0..18).map(|i| i as f32).collect()).unwrap();
        let mut dw = vec![0.0; 18];
        dw[4] = 1.0;
        dw[9 + 4] = 1.0;
        let dw = Tensor::new(&[2, 1, 3, 3], dw).unwrap();
        let pw = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = separable_conv2d(&x, &ConvSpec::new(2, 2, 3, 1, 1), &dw, &pw, None).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
