//! Per-layer shape, parameter and multiply-accumulate accounting.
//!
//! MACs are computed analytically from the configuration, so the inspector
//! never runs a forward pass. Parameter counts come from the constructed
//! model and are attributed to rows by name prefix.

use std::fmt::Write as _;

use crate::config::LevelSource;
use crate::error::{Error, Result};
use crate::model::CvtAssd;
use crate::nn::Module;
use crate::tensor::ConvSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub name: String,
    /// Per-image output shape.
    pub output: Vec<usize>,
    pub params: usize,
    pub macs: u64,
    /// Token-mixing products whose cost grows with the square of the token count.
    pub attention_core: bool,
}

#[derive(Debug, Clone)]
pub struct InspectReport {
    pub rows: Vec<LayerRow>,
    pub total_params: usize,
    pub total_macs: u64,
    pub pyramid: Vec<(usize, usize, usize)>,
    pub num_anchors: usize,
}

struct Builder {
    slots: Vec<(String, usize)>,
    taken: Vec<bool>,
    rows: Vec<LayerRow>,
}

impl Builder {
    fn params(&mut self, prefixes: &[String]) -> usize {
        let mut total = 0;
        for (i, (name, n)) in self.slots.iter().enumerate() {
            if self.taken[i] {
                continue;
            }
            if prefixes.iter().any(|p| name == p || name.starts_with(&format!("{p}."))) {
                self.taken[i] = true;
                total += n;
            }
        }
        total
    }

    fn row(&mut self, name: String, prefixes: &[String], output: Vec<usize>, macs: u64, core: bool) {
        let params = self.params(prefixes);
        self.rows.push(LayerRow { name, output, params, macs, attention_core: core });
    }
}

pub fn inspect(model: &CvtAssd) -> Result<InspectReport> {
    let cfg = &model.cfg;
    cfg.validate()?;
    let slots: Vec<(String, usize)> = model
        .slots()
        .into_iter()
        .filter(|(_, s)| s.is_trainable())
        .map(|(n, s)| (n, s.numel()))
        .collect();
    let mut b = Builder { taken: vec![false; slots.len()], slots, rows: Vec::new() };
    let stage_grids = cfg.stage_grids()?;
    for (si, (st, &(h, w))) in cfg.stages.iter().zip(&stage_grids).enumerate() {
        let s = format!("stage{}", si + 1);
        let (t, d) = ((h * w) as u64, st.dim as u64);
        b.row(format!("{s}.embed"), &[format!("{s}.embed")], vec![st.dim, h, w], st.embed.macs(h, w), false);
        let proj = ConvSpec::new(st.dim, st.dim, st.proj_kernel, 1, st.proj_kernel / 2);
        let proj_macs = 3 * (st.dim as u64 * (proj.kernel.0 * proj.kernel.1) as u64 * t + d * d * t);
        for j in 1..=st.num_blocks {
            let p = format!("{s}.block{j}");
            b.row(format!("{p}.norm"), &[format!("{p}.norm1"), format!("{p}.norm2")], vec![h * w, st.dim], 0, false);
            let qkv = ["q", "k", "v"].map(|x| format!("{p}.attn.{x}"));
            b.row(format!("{p}.attn.qkv"), &qkv, vec![h * w, st.dim], proj_macs, false);
            b.row(format!("{p}.attn.core"), &[], vec![st.heads, h * w, h * w], 2 * t * t * d, true);
            b.row(format!("{p}.attn.out"), &[format!("{p}.attn.out")], vec![h * w, st.dim], t * d * d, false);
            let hidden = d * st.mlp_ratio as u64;
            b.row(format!("{p}.mlp"), &[format!("{p}.mlp")], vec![h * w, st.dim], 2 * t * d * hidden, false);
        }
    }
    let grids = cfg.grids()?;
    for (li, (l, &(h, w))) in cfg.levels.iter().zip(&grids).enumerate() {
        let n = li + 1;
        let cin = cfg.level_in_channels(li);
        match l.source {
            LevelSource::Stage(s) => {
                let (sh, sw) = stage_grids[s - 1];
                if l.residual {
                    let spec = ConvSpec::new(cin, cin, 3, 1, 1);
                    b.row("head.res".into(), &["head.res".into()], vec![cin, sh, sw], 2 * spec.macs(sh, sw), false);
                }
                let spec = ConvSpec::new(cin, l.channels, l.kernel, l.stride, l.padding);
                let name = format!("head.lateral{n}");
                b.row(name.clone(), &[name], vec![l.channels, h, w], spec.macs(h, w), false);
            }
            LevelSource::Previous => {
                let (ph, pw) = grids[li - 1];
                let reduce = ConvSpec::new(cin, l.mid_channels, 1, 1, 0).macs(ph, pw);
                let conv = ConvSpec::new(l.mid_channels, l.channels, l.kernel, l.stride, l.padding).macs(h, w);
                let name = format!("head.extra{n}");
                b.row(name.clone(), &[name], vec![l.channels, h, w], reduce + conv, false);
            }
        }
    }
    for (li, (l, &(h, w))) in cfg.levels.iter().zip(&grids).enumerate() {
        if h * w > cfg.au_threshold {
            continue;
        }
        let (t, c) = ((h * w) as u64, l.channels as u64);
        let qk = (l.channels / 8).max(1) as u64;
        let name = format!("head.au{}", li + 1);
        b.row(format!("{name}.proj"), &[name.clone()], vec![l.channels, h, w], t * c * (2 * qk + c), false);
        b.row(format!("{name}.core"), &[], vec![h * w, h * w], t * t * (qk + c), true);
    }
    for (li, (l, &(h, w))) in cfg.levels.iter().zip(&grids).enumerate() {
        let a = l.anchors_per_location();
        let loc = ConvSpec::new(l.channels, a * 4, 3, 1, 1).macs(h, w);
        let conf = ConvSpec::new(l.channels, a * (cfg.num_classes + 1), 3, 1, 1).macs(h, w);
        let name = format!("head.pred{}", li + 1);
        b.row(name.clone(), &[name], vec![h * w * a, 4 + cfg.num_classes + 1], loc + conf, false);
    }
    if let Some(i) = b.taken.iter().position(|t| !t) {
        return Err(Error::Config(format!("inspector has no row for parameter `{}`", b.slots[i].0)));
    }
    let total_params = b.rows.iter().map(|r| r.params).sum();
    debug_assert_eq!(total_params, model.num_params());
    let total_macs = b.rows.iter().map(|r| r.macs).sum();
    let pyramid = grids.iter().zip(&cfg.levels).map(|(&(h, w), l)| (l.channels, h, w)).collect();
    Ok(InspectReport { rows: b.rows, total_params, total_macs, pyramid, num_anchors: cfg.num_anchors()? })
}

impl InspectReport {
    /// Attention-core MACs of one backbone stage (1-based).
    pub fn stage_attention_macs(&self, stage: usize) -> u64 {
        let prefix = format!("stage{stage}.");
        self.rows
            .iter()
            .filter(|r| r.attention_core && r.name.starts_with(&prefix))
            .map(|r| r.macs)
            .sum()
    }

    /// Parameter totals grouped by the first path component (`stage1`, `head.lateral1`, ...).
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            let key = if r.name.starts_with("head.") {
                let rest = &r.name["head.".len()..];
                let module: String = rest.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
                format!("head.{module}")
            } else {
                r.name.split('.').next().unwrap_or("").to_string()
            };
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += r.params,
                None => out.push((key, r.params)),
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let shape = |s: &[usize]| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>16}  {:>12}  {:>16}", "layer", "output", "params", "MACs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>16}  {:>12}  {:>16}", r.name, shape(&r.output), r.params, r.macs);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "pyramid levels:");
        for (i, (c, h, wd)) in self.pyramid.iter().enumerate() {
            let _ = writeln!(s, "  level{}  {h}x{wd}x{c}", i + 1);
        }
        let _ = writeln!(s, "anchors: {}", self.num_anchors);
        let _ = writeln!(s, "parameters by module:");
        for (k, n) in self.breakdown() {
            let _ = writeln!(s, "  {k:<16} {n:>12}");
        }
        let _ = writeln!(s, "total parameters: {}", self.total_params);
        let _ = writeln!(s, "total MACs: {} ({} FLOPs)", self.total_macs, 2 * self.total_macs);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn tiny_totals_match_model() {
        let m = CvtAssd::new(&ModelConfig::tiny(), 0).unwrap();
        let r = inspect(&m).unwrap();
        assert_eq!(r.total_params, m.num_params());
        assert!(r.stage_attention_macs(1) > 0);
    }

    #[test]
    fn stage_core_macs_scale_quadratically() {
        let mut small = ModelConfig::tiny();
        small.input_size = 48;
        small.levels.truncate(2);
        let big = ModelConfig::tiny();
        let a = inspect(&CvtAssd::new(&big, 0).unwrap()).unwrap().stage_attention_macs(1);
        let b = inspect(&CvtAssd::new(&small, 0).unwrap()).unwrap().stage_attention_macs(1);
        assert_eq!(a, 16 * b);
    }
}
