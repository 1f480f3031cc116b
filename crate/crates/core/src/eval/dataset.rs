use serde::{Deserialize, Serialize};

use crate::error::{FvitError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Cross];

    pub fn label(self) -> usize {
        self as usize
    }

    /// Whether offset `(dx, dy)` from the center lies in a shape of
    /// half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            // Apex up, base at dy = r.
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` binary foreground.
    pub mask: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Upper bound of the uniform background texture.
    pub background: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_size: 32,
            min_radius: 5.0,
            max_radius: 10.0,
            background: 0.15,
        }
    }
}

fn sample_one(cfg: &DatasetConfig, rng: &mut Rng) -> SegSample {
    let s = cfg.image_size;
    let shape = Shape::ALL[rng.below(4)];
    let r = rng.uniform_range(cfg.min_radius, cfg.max_radius);
    let cx = rng.uniform_range(r, s as f64 - r);
    let cy = rng.uniform_range(r, s as f64 - r);
    let intensity = rng.uniform_range(0.6, 1.0);

    let mut image = vec![0.0; s * s];
    let mut mask = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let texture = cfg.background * rng.uniform();
            if shape.contains(dx, dy, r) {
                mask[i] = 1.0;
                image[i] = (intensity - texture / 3.0).clamp(0.0, 1.0);
            } else {
                image[i] = texture;
            }
        }
    }
    SegSample {
        image: Tensor::new(vec![1, s, s], image).expect("sized above"),
        mask: Tensor::new(vec![s, s], mask).expect("sized above"),
        label: shape.label(),
    }
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_dataset(seed: u64, n: usize, cfg: &DatasetConfig) -> Result<Vec<SegSample>> {
    if n == 0 {
        return Err(FvitError::param("dataset size must be at least 1"));
    }
    let span = 2.0 * cfg.max_radius;
    if !(cfg.min_radius > 0.0 && cfg.min_radius <= cfg.max_radius) || span >= cfg.image_size as f64 {
        return Err(FvitError::Config(format!("shape radii do not fit: {cfg:?}")));
    }
    let root = Rng::new(seed);
    Ok((0..n as u64)
        .map(|i| sample_one(cfg, &mut root.substream(i)))
        .collect())
}

/// `(image, label)` pairs for training.
pub fn labeled(samples: &[SegSample]) -> Vec<(Tensor, usize)> {
    samples.iter().map(|s| (s.image.clone(), s.label)).collect()
}
