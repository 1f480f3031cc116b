use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ViTConfig;
use crate::error::{FvitError, Result};
use crate::io::{decode_fvt, encode_fvt};
use crate::rng::{gaussian_sample, Rng};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    cfg: ViTConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ViTConfig,
    tensors: Vec<ManifestEntry>,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2)
    };
}

impl BlockParams {
    fn zeros(cfg: &ViTConfig) -> Self {
        let (d, f) = (cfg.embed_dim, cfg.mlp_dim());
        BlockParams {
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &self.$f)),*] };
        }
        block_fields!(list)
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &mut self.$f)),*] };
        }
        block_fields!(list)
    }
}

impl ViTParams {
    /// All-zero weights with unit layer-norm scales.
    pub fn zeros(cfg: &ViTConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(ViTParams {
            cfg: cfg.clone(),
            patch_w: Tensor::zeros(&[cfg.patch_dim(), d]),
            patch_b: Tensor::zeros(&[d]),
            cls: Tensor::zeros(&[d]),
            pos: Tensor::zeros(&[cfg.tokens(), d]),
            blocks: (0..cfg.layers).map(|_| BlockParams::zeros(cfg)).collect(),
            lnf_g: Tensor::filled(&[d], 1.0),
            lnf_b: Tensor::zeros(&[d]),
            head_w: Tensor::zeros(&[d, cfg.num_classes]),
            head_b: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    /// Gaussian initialization (std 0.02) of every weight matrix and
    /// embedding; biases start at 0, layer-norm scales at 1.
    pub fn init(cfg: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = ViTParams::zeros(cfg)?;
        for (name, t) in p.named_tensors_mut() {
            if is_weight(&name) {
                *t = gaussian_sample(rng, t.shape(), INIT_STD)?;
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ViTConfig {
        &self.cfg
    }

    /// Zero tensors with this model's shapes (gradient accumulator).
    pub fn zeros_like(&self) -> ViTParams {
        let mut z = self.clone();
        for (_, t) in z.named_tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        z
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_w".into(), &self.patch_w),
            ("patch_b".into(), &self.patch_b),
            ("cls".into(), &self.cls),
            ("pos".into(), &self.pos),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.named() {
                out.push((format!("blocks.{l}.{n}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("patch_w".into(), &mut self.patch_w),
            ("patch_b".into(), &mut self.patch_b),
            ("cls".into(), &mut self.cls),
            ("pos".into(), &mut self.pos),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in b.named_mut() {
                out.push((format!("blocks.{l}.{n}"), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ViTParams, scale: f64) {
        let src = other.named_tensors();
        for ((_, dst), (_, g)) in self.named_tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * v;
            }
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for (_, t) in self.named_tensors_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    /// Writes `<stem>.fvt` (all tensors concatenated into one flat FVT1
    /// tensor) and `<stem>.json` (config plus name/shape/offset manifest).
    /// The payload is stored as `f32`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut flat = Vec::with_capacity(self.parameter_count());
        let mut tensors = Vec::new();
        for (name, t) in self.named_tensors() {
            tensors.push(ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                offset: flat.len(),
            });
            flat.extend_from_slice(t.data());
        }
        let manifest = Manifest {
            format: "FVT1".into(),
            config: self.cfg.clone(),
            tensors,
        };
        fs::write(stem.with_extension("fvt"), encode_fvt(&Tensor::vector(flat)))?;
        fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
        let flat = decode_fvt(&fs::read(stem.with_extension("fvt"))?)?;
        let mut p = ViTParams::zeros(&manifest.config)?;
        let mut slots = p.named_tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(FvitError::Format(format!(
                "manifest lists {} tensors, model has {}",
                manifest.tensors.len(),
                slots.len()
            )));
        }
        for ((name, slot), entry) in slots.iter_mut().zip(&manifest.tensors) {
            let n: usize = entry.shape.iter().product();
            if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                return Err(FvitError::Format(format!(
                    "tensor {} {:?} does not match expected {name} {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            let data = flat
                .data()
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| FvitError::Format(format!("{} out of bounds", entry.name)))?;
            **slot = Tensor::new(entry.shape.clone(), data.to_vec())?;
        }
        drop(slots);
        Ok(p)
    }
}

/// Tensors drawn from the init distribution (everything but biases and
/// layer-norm parameters).
pub(crate) fn is_weight(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(
        leaf,
        "patch_w" | "cls" | "pos" | "wq" | "wk" | "wv" | "wo" | "w1" | "w2" | "head_w"
    )
}
