use cvt_assd::gradcheck::{check, project};
use cvt_assd::tensor::init::{rng, uniform};
use cvt_assd::tensor::*;
use cvt_assd::Tensor;

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn assert_grad(name: &str, inputs: &[Tensor], f: impl Fn(&[Tensor]) -> cvt_assd::Result<Tensor>) {
    let report = check(inputs, H, f).unwrap();
    assert!(report.passes(TOL), "{name}: {report:?}");
}

pub fn elementwise() {
    let (a, b) = (rand(&[3, 4], 1), rand(&[3, 4], 2));
    assert_grad("add", &[a.clone(), b.clone()], |x| project(&add(&x[0], &x[1])?, 9));
    assert_grad("sub", &[a.clone(), b.clone()], |x| project(&sub(&x[0], &x[1])?, 9));
    assert_grad("mul", &[a.clone(), b.clone()], |x| project(&mul(&x[0], &x[1])?, 9));
    assert_grad("scale", &[a.clone()], |x| project(&scale(&x[0], -2.5), 9));
    assert_grad("gelu", &[a.clone()], |x| project(&gelu(&x[0]), 9));
    assert_grad("mean", &[a.clone()], |x| Ok(mean(&mul(&x[0], &x[0])?)));
    // Keep relu inputs away from the kink.
    let r = Tensor::new(&[6], vec![-0.9, -0.4, -0.1, 0.2, 0.5, 0.8]).unwrap();
    assert_grad("relu", &[r], |x| project(&relu(&x[0]), 9));
    let s = Tensor::new(&[6], vec![-2.0, -0.6, -0.1, 0.3, 0.7, 1.8]).unwrap();
    assert_grad("smooth_l1", &[s], |x| project(&smooth_l1(&x[0]), 9));
}

pub fn shape_ops() {
    let a = rand(&[2, 3, 4], 3);
    assert_grad("reshape", &[a.clone()], |x| project(&reshape(&x[0], &[6, 4])?, 4));
    assert_grad("permute", &[a.clone()], |x| project(&permute(&x[0], &[2, 0, 1])?, 4));
    let b = rand(&[2, 1, 4], 5);
    assert_grad("concat", &[a, b], |x| project(&concat(&[x[0].clone(), x[1].clone()], 1)?, 4));
}

pub fn products() {
    let (x, w, b) = (rand(&[2, 3, 4], 6), rand(&[4, 5], 7), rand(&[5], 8));
    assert_grad("linear", &[x.clone(), w.clone(), b], |t| project(&linear(&t[0], &t[1], Some(&t[2]))?, 1));
    assert_grad("linear_nobias", &[x, w], |t| project(&linear(&t[0], &t[1], None)?, 1));
    let (p, q) = (rand(&[2, 3, 4], 9), rand(&[2, 4, 2], 10));
    assert_grad("bmm", &[p, q], |t| project(&bmm(&t[0], &t[1])?, 1));
}

pub fn normalizations() {
    let x = rand(&[3, 5], 11);
    let (g, b) = (rand(&[5], 12), rand(&[5], 13));
    assert_grad("softmax_last", &[x.clone()], |t| project(&softmax(&t[0], 1)?, 2));
    assert_grad("softmax_first", &[x.clone()], |t| project(&softmax(&t[0], 0)?, 2));
    assert_grad("layer_norm", &[x, g, b], |t| project(&layer_norm(&t[0], &t[1], &t[2], 1e-5)?, 2));

    let x = rand(&[2, 3, 2, 2], 14);
    let (g, b) = (rand(&[3], 15), rand(&[3], 16));
    assert_grad("batch_norm_train", &[x.clone(), g.clone(), b.clone()], |t| {
        project(&batch_norm_train(&t[0], &t[1], &t[2], 1e-5)?.0, 2)
    });
    assert_grad("batch_norm_eval", &[x, g, b], |t| {
        project(&batch_norm_eval(&t[0], &t[1], &t[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?, 2)
    });
}

pub fn losses() {
    let logits = rand(&[4, 3], 17);
    assert_grad("cross_entropy", &[logits], |t| Ok(sum(&cross_entropy(&t[0], &[0, 2, 1, 2])?)));
    let x = rand(&[5, 4], 18);
    assert_grad("gather_rows", &[x], |t| project(&gather_rows(&t[0], &[4, 0, 4, 2])?, 3));
}

pub fn convolutions() {
    let x = rand(&[2, 2, 4, 3], 19);
    let spec = ConvSpec::new(2, 3, 3, 2, 1);
    let (w, b) = (rand(&[3, 2, 3, 3], 20), rand(&[3], 21));
    assert_grad("conv2d", &[x.clone(), w, b], |t| project(&conv2d(&t[0], &spec, &t[1], Some(&t[2]))?, 5));

    let x4 = rand(&[1, 4, 3, 3], 22);
    let grouped = ConvSpec::new(4, 2, 3, 1, 1).with_groups(2);
    let wg = rand(&[2, 2, 3, 3], 23);
    assert_grad("conv2d_grouped", &[x4, wg], |t| project(&conv2d(&t[0], &grouped, &t[1], None)?, 5));

    let sep = ConvSpec::new(2, 3, 3, 1, 1);
    let (dw, pw, pb) = (rand(&[2, 1, 3, 3], 24), rand(&[3, 2, 1, 1], 25), rand(&[3], 26));
    assert_grad("separable_conv2d", &[x, dw, pw, pb], |t| {
        project(&separable_conv2d(&t[0], &sep, &t[1], &t[2], Some(&t[3]))?, 5)
    });
}

/// Whole tiny detector, differentiated through a fixed random projection of
/// its raw outputs. Each probed parameter tensor has at most 64 elements.
pub fn composed_tiny_model() {
    use cvt_assd::data::{stack_images, synth_dataset};
    use cvt_assd::nn::Module;
    use cvt_assd::tensor::init::{rng, uniform};
    use cvt_assd::{CvtAssd, ModelConfig};

    let cfg = ModelConfig::tiny();
    let model = CvtAssd::new(&cfg, 0).unwrap();
    let data = synth_dataset(1, 3, cfg.input_size, 5).unwrap();
    let images = stack_images(&data.iter().collect::<Vec<_>>()).unwrap();

    // Park every ReLU input near 1 so the finite differences never straddle a kink.
    for (name, slot) in model.slots() {
        let pre_relu = name.contains("bn1.") || name.contains("reduce_bn.") || name.contains(".bn.");
        if pre_relu && name.ends_with("gamma") {
            slot.set(Tensor::full(&slot.shape(), 0.1));
        } else if pre_relu && name.ends_with("beta") {
            slot.set(Tensor::full(&slot.shape(), 1.0));
        }
    }
    let names = [
        "stage1.embed.conv.bias",
        "stage2.block1.attn.v.bias",
        "stage3.block1.norm1.gamma",
        "head.res.bn2.gamma",
        "head.lateral1.bias",
        "head.extra3.bn.beta",
        "head.pred3.conf.bias",
    ];
    let all = model.slots();
    let slots: Vec<_> = names.iter().map(|n| all.iter().find(|(k, _)| k == n).unwrap().1).collect();
    for s in &slots {
        let data: Vec<f32> = rand(&s.shape(), s.numel() as u64).data().iter().map(|v| 0.9 + 0.2 * v).collect();
        s.set(Tensor::new(&s.shape(), data).unwrap());
    }

    let r_loc = uniform(&[1, 846, 4], -1.0, 1.0, &mut rng(1));
    let r_conf = uniform(&[1, 846, 4], -1.0, 1.0, &mut rng(2));
    // accumulated in f64 so the finite differences are not swamped by summation error
    let objective = || -> f64 {
        let (loc, conf) = no_grad(|| model.forward(&images, false)).unwrap();
        let dot = |y: &Tensor, r: &Tensor| y.data().iter().zip(r.data()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>();
        dot(&loc, &r_loc) + dot(&conf, &r_conf)
    };
    let (loc, conf) = model.forward(&images, false).unwrap();
    add(&sum(&mul(&loc, &r_loc).unwrap()), &sum(&mul(&conf, &r_conf).unwrap())).unwrap().backward().unwrap();

    let h = 2e-2f32;
    for (name, s) in names.iter().zip(&slots) {
        assert!(s.numel() <= 64, "{name}");
        let analytic: Vec<f64> = s.get().grad().unwrap().iter().map(|&g| g as f64).collect();
        let base = s.get().to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let at = |delta: f32| {
                let mut d = base.clone();
                d[j] += delta;
                s.set(Tensor::new(&s.shape(), d).unwrap());
                objective()
            };
            // Richardson: cancels the h^2 term so a step large enough to beat f32 noise stays accurate
            let coarse = (at(h) - at(-h)) / (2.0 * h as f64);
            let fine = (at(h / 2.0) - at(-h / 2.0)) / h as f64;
            numeric.push((4.0 * fine - coarse) / 3.0);
        }
        s.set(Tensor::new(&s.shape(), base).unwrap());
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8);
        assert!(rel < TOL, "{name}: relative error {rel}");
    }
}
