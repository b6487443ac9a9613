//! Samples, the synthetic shapes dataset, dataset directories and augmentation.

pub mod augment;
pub mod image;
pub mod voc;

use std::path::Path;

use rand::Rng;

use crate::anchors::{BoxCorner, GroundTruthBox};
use crate::error::{Error, Result};
use crate::tensor::init::rng;
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, AugmentOption};
pub use image::{load_image, load_ppm, resize_bilinear, save_ppm};
pub use voc::{parse_voc_xml, VocAnnotation, VOC_CLASSES};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub gts: Vec<GroundTruthBox>,
    /// Width and height of the annotation space, for size-bucketed evaluation.
    pub native_size: (usize, usize),
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.image.rank() != 3 || self.image.dim(0) != 3 {
            return Err(Error::Data(format!("{}: image shape {:?}", self.id, self.image.shape())));
        }
        for g in &self.gts {
            let b = g.bbox;
            let inside = [b.xmin, b.ymin, b.xmax, b.ymax].iter().all(|v| (0.0..=1.0).contains(v));
            if !inside || b.xmax <= b.xmin || b.ymax <= b.ymin {
                return Err(Error::Data(format!("{}: invalid ground-truth box {b:?}", self.id)));
            }
        }
        Ok(())
    }
}

pub const SHAPE_NAMES: [&str; 8] = ["rectangle", "disc", "triangle", "ring", "cross", "diamond", "bar", "checker"];

/// Whether pixel `(x, y)` of a `w x h` shape box is covered by shape `class`.
fn covers(class: usize, x: usize, y: usize, w: usize, h: usize) -> bool {
    let (fx, fy) = ((x as f32 + 0.5) / w as f32, (y as f32 + 0.5) / h as f32);
    let (dx, dy) = (fx - 0.5, fy - 0.5);
    match class {
        0 | 6 => true,
        1 => dx * dx + dy * dy <= 0.25,
        2 => (dx.abs() * 2.0) <= fy + 0.5 / h as f32,
        3 => {
            let r2 = dx * dx + dy * dy;
            r2 <= 0.25 && r2 >= 0.09
        }
        4 => dx.abs() <= 1.0 / 6.0 || dy.abs() <= 1.0 / 6.0,
        5 => dx.abs() + dy.abs() <= 0.5,
        7 => ((x * 4 / w) + (y * 4 / h)) % 2 == 0,
        _ => false,
    }
}

/// Renders `n` images of `resolution x resolution` with 1 to 4 non-overlapping shapes each.
/// Pixel values are multiples of 1/255 so the dataset survives a PPM round trip exactly.
pub fn synth_dataset(n: usize, num_classes: usize, resolution: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image".into()));
    }
    if !(1..=8).contains(&num_classes) {
        return Err(Error::Config(format!("synthetic dataset supports 1..=8 classes, got {num_classes}")));
    }
    if resolution < 16 {
        return Err(Error::Config(format!("synthetic resolution {resolution} is below 16")));
    }
    let mut r = rng(seed);
    let s = resolution;
    let (lo, hi) = ((s * 3 / 20).max(4), (s * 9 / 20).max(5));
    let mut out = Vec::with_capacity(n);
    for idx in 0..n {
        let mut px: Vec<u8> = (0..3 * s * s).map(|_| r.gen_range(0..90u8)).collect();
        let want = r.gen_range(1..=4usize);
        let mut placed: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
        let mut attempts = 0;
        while placed.len() < want && attempts < 200 {
            attempts += 1;
            let class = r.gen_range(0..num_classes);
            let mut h = r.gen_range(lo..=hi);
            let mut w = r.gen_range(lo..=hi);
            if class == 6 {
                w = (h / 3).max(3);
            } else if class != 0 {
                w = h;
                h = w;
            }
            let x0 = r.gen_range(0..=s - w);
            let y0 = r.gen_range(0..=s - h);
            let clear = placed.iter().all(|&(_, px0, py0, pw, ph)| {
                x0 + w + 1 <= px0 || px0 + pw + 1 <= x0 || y0 + h + 1 <= py0 || py0 + ph + 1 <= y0
            });
            if !clear {
                continue;
            }
            let color: [u8; 3] = [r.gen_range(150..=255), r.gen_range(150..=255), r.gen_range(150..=255)];
            for y in 0..h {
                for x in 0..w {
                    if covers(class, x, y, w, h) {
                        for (c, &v) in color.iter().enumerate() {
                            px[c * s * s + (y0 + y) * s + x0 + x] = v;
                        }
                    }
                }
            }
            placed.push((class, x0, y0, w, h));
        }
        let gts = placed
            .iter()
            .map(|&(class, x0, y0, w, h)| {
                let f = |v: usize| v as f32 / s as f32;
                GroundTruthBox::new(BoxCorner::new(f(x0), f(y0), f(x0 + w), f(y0 + h)), class)
            })
            .collect();
        let image = Tensor::new(&[3, s, s], px.iter().map(|&v| v as f32 / 255.0).collect())?;
        out.push(Sample { id: format!("synth_{idx:05}"), image, gts, native_size: (s, s) });
    }
    Ok(out)
}

/// Parses `synth:<n>:<classes>:<seed>`.
pub fn parse_synth_spec(spec: &str) -> Option<Result<(usize, usize, u64)>> {
    let rest = spec.strip_prefix("synth:")?;
    let parts: Vec<&str> = rest.split(':').collect();
    let parsed = (|| {
        if parts.len() != 3 {
            return None;
        }
        Some((parts[0].parse().ok()?, parts[1].parse().ok()?, parts[2].parse().ok()?))
    })();
    Some(parsed.ok_or_else(|| Error::Usage(format!("malformed dataset spec `{spec}` (expected synth:<n>:<classes>:<seed>)"))))
}

/// Writes `<id>.ppm` files plus `labels.txt` (`id class xmin ymin xmax ymax`).
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = String::new();
    for s in samples {
        save_ppm(&s.image, &dir.join(format!("{}.ppm", s.id)))?;
        for g in &s.gts {
            let b = g.bbox;
            labels += &format!("{} {} {:.6} {:.6} {:.6} {:.6}\n", s.id, g.class_id, b.xmin, b.ymin, b.xmax, b.ymax);
        }
    }
    let path = dir.join("labels.txt");
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))
}

fn sorted_entries(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a dataset directory. Two layouts are understood:
/// `labels.txt` next to `<id>.ppm` files, or VOC-style `Annotations/*.xml`
/// with images at `PPMImages/<stem>.ppm`. Images are resized to `resolution`.
pub fn load_dataset(dir: &Path, resolution: usize) -> Result<Vec<Sample>> {
    let labels = dir.join("labels.txt");
    if labels.is_file() {
        let text = std::fs::read_to_string(&labels).map_err(|e| Error::io(&labels, e))?;
        let mut by_id: std::collections::BTreeMap<String, Vec<GroundTruthBox>> = Default::default();
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let origin = labels.display().to_string();
            if f.len() != 6 {
                return Err(Error::parse(origin, format!("line {}: expected 6 fields", n + 1)));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|_| Error::parse(&origin, format!("line {}: bad number `{s}`", n + 1)));
            let class_id = f[1].parse::<usize>().map_err(|_| Error::parse(&origin, format!("line {}: bad class", n + 1)))?;
            let bbox = BoxCorner::new(num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?);
            by_id.entry(f[0].to_string()).or_default().push(GroundTruthBox::new(bbox, class_id));
        }
        let mut out = Vec::new();
        for path in sorted_entries(dir, "ppm")? {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let raw = load_ppm(&path)?;
            let native_size = (raw.dim(2), raw.dim(1));
            let image = resize_bilinear(&raw, resolution, resolution)?;
            let sample = Sample { gts: by_id.remove(&id).unwrap_or_default(), id, image, native_size };
            sample.validate()?;
            out.push(sample);
        }
        if let Some(id) = by_id.keys().next() {
            return Err(Error::Data(format!("labels.txt names `{id}` but {id}.ppm is missing")));
        }
        return Ok(out);
    }
    let ann_dir = dir.join("Annotations");
    if ann_dir.is_dir() {
        let mut out = Vec::new();
        for xml in sorted_entries(&ann_dir, "xml")? {
            let ann = parse_voc_xml(&xml)?;
            let stem = xml.file_stem().unwrap().to_string_lossy().into_owned();
            let raw = load_ppm(&dir.join("PPMImages").join(format!("{stem}.ppm")))?;
            let image = resize_bilinear(&raw, resolution, resolution)?;
            out.push(Sample { id: stem, image, gts: ann.objects, native_size: (ann.width, ann.height) });
        }
        return Ok(out);
    }
    Err(Error::Data(format!(
        "{} holds neither labels.txt nor an Annotations directory",
        dir.display()
    )))
}

/// Resolves a `synth:` spec or a dataset directory.
pub fn open_dataset(spec: &str, resolution: usize) -> Result<Vec<Sample>> {
    match parse_synth_spec(spec) {
        Some(parsed) => {
            let (n, k, seed) = parsed?;
            synth_dataset(n, k, resolution, seed)
        }
        None => load_dataset(Path::new(spec), resolution),
    }
}

/// Stacks sample images into an `[N, 3, H, W]` batch.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("batch mixes image shapes {:?} and {:?}", shape, s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(&[samples.len(), shape[0], shape[1], shape[2]], data)
}
