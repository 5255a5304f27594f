//! Synthetic datasets: shapes on textured backgrounds with exact labels.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::nn::{read_container, write_container, Dtype, StoredArray, Task};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    pub size: usize,
    pub extent: usize,
    pub seed: u64,
    /// Distance of shape colors from the local background, in intensity units.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Amplitude of the background texture.
    #[serde(default = "default_texture")]
    pub texture: f64,
    /// Segmentation only: tie each shape class to its own color direction.
    /// Off by default, so that classes differ by shape alone and colors are
    /// drawn independently of the label.
    #[serde(default)]
    pub color_coded: bool,
}

fn default_contrast() -> f64 {
    0.25
}

fn default_texture() -> f64 {
    0.08
}

impl DatasetSpec {
    pub fn segmentation(size: usize, extent: usize, seed: u64) -> Self {
        Self {
            task: Task::Segmentation,
            size,
            extent,
            seed,
            contrast: default_contrast(),
            texture: default_texture(),
            color_coded: false,
        }
    }

    pub fn classification(size: usize, extent: usize, seed: u64) -> Self {
        Self {
            task: Task::Classification,
            ..Self::segmentation(size, extent, seed)
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.task {
            Task::Segmentation => SEG_CLASSES,
            Task::Classification => CLS_CLASSES,
        }
    }
}

pub const SEG_CLASSES: usize = 4;
pub const CLS_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub num_classes: usize,
    /// Each image is `(1, 3, H, W)` in `[0, 1]`.
    pub images: Vec<Tensor>,
    /// Per-pixel labels (segmentation) or a single label (classification).
    pub labels: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn with_images(&self, images: Vec<Tensor>) -> Result<Self> {
        if images.len() != self.len() {
            return Err(Error::shape(
                "with_images",
                format!("{} images for {} labels", images.len(), self.len()),
            ));
        }
        Ok(Self {
            images,
            ..self.clone()
        })
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            task: self.task,
            num_classes: self.num_classes,
            images: self.images[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// Task metric in percent: dataset mIoU for segmentation, accuracy for
    /// classification.
    pub fn metric(&self, preds: &[Vec<usize>]) -> Result<f64> {
        if preds.len() != self.len() {
            return Err(Error::shape(
                "metric",
                format!("{} predictions for {} images", preds.len(), self.len()),
            ));
        }
        let mut cm = ConfusionMatrix::new(self.num_classes);
        for (p, y) in preds.iter().zip(&self.labels) {
            cm.add(p, y)?;
        }
        Ok(100.0
            * match self.task {
                Task::Segmentation => cm.miou(),
                Task::Classification => cm.accuracy(),
            })
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::report::sha256_hex(
            &self.to_bytes(&serde_json::Value::Null)?,
        ))
    }

    /// Serialize images (f64) and labels into an `EQCK` container; `manifest`
    /// is stored alongside (e.g. the attack that produced the images).
    pub fn to_bytes(&self, manifest: &serde_json::Value) -> Result<Vec<u8>> {
        let meta = serde_json::json!({
            "kind": "dataset",
            "task": self.task,
            "num_classes": self.num_classes,
            "manifest": manifest,
        });
        let mut arrays = Vec::with_capacity(2 * self.len());
        for (i, (x, y)) in self.images.iter().zip(&self.labels).enumerate() {
            arrays.push(StoredArray {
                name: format!("image.{i}"),
                tensor: x.clone(),
                dtype: Dtype::F64,
            });
            let labels = Tensor::new(vec![y.len()], y.iter().map(|&v| v as f64).collect())?;
            arrays.push(StoredArray {
                name: format!("label.{i}"),
                tensor: labels,
                dtype: Dtype::F32,
            });
        }
        write_container(&meta, &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (meta, arrays) = read_container(bytes)?;
        if meta["kind"] != "dataset" {
            return Err(Error::Checkpoint(
                "container does not hold a dataset".into(),
            ));
        }
        let task: Task = serde_json::from_value(meta["task"].clone())?;
        let num_classes = meta["num_classes"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing num_classes".into()))?
            as usize;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for pair in arrays.chunks(2) {
            let [x, y] = pair else {
                return Err(Error::Checkpoint("unpaired dataset arrays".into()));
            };
            images.push(x.tensor.clone());
            labels.push(y.tensor.data().iter().map(|&v| v as usize).collect());
        }
        Ok((
            Self {
                task,
                num_classes,
                images,
                labels,
            },
            meta["manifest"].clone(),
        ))
    }

    pub fn save(&self, path: &Path, manifest: &serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_bytes(manifest)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Analytic shape with pixel-center containment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
    },
    Triangle {
        a: (f64, f64),
        b: (f64, f64),
        c: (f64, f64),
    },
    Ring {
        cx: f64,
        cy: f64,
        r_in: f64,
        r_out: f64,
    },
    Cross {
        cx: f64,
        cy: f64,
        arm: f64,
        half_width: f64,
    },
}

fn edge(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

impl Shape {
    /// Whether pixel `(x, y)` (center at `x + 0.5, y + 0.5`) is inside.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh } => (px - cx).abs() <= hw && (py - cy).abs() <= hh,
            Shape::Triangle { a, b, c } => {
                let p = (px, py);
                let (d1, d2, d3) = (edge(p, a, b), edge(p, b, c), edge(p, c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            Shape::Ring {
                cx,
                cy,
                r_in,
                r_out,
            } => {
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            Shape::Cross {
                cx,
                cy,
                arm,
                half_width,
            } => {
                let (dx, dy) = ((px - cx).abs(), (py - cy).abs());
                (dx <= arm && dy <= half_width) || (dy <= arm && dx <= half_width)
            }
        }
    }
}

/// One generated image: background parameters and shapes in paint order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub extent: usize,
    pub background: [f64; 3],
    /// `(label, shape, rgb)`; later entries occlude earlier ones.
    pub shapes: Vec<(usize, Shape, [f64; 3])>,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub amplitude: f64,
    pub freq: (f64, f64),
    pub phase: f64,
    /// Per-pixel grain, row-major, shared across channels.
    pub grain: Vec<f64>,
}

impl Scene {
    pub fn label_at(&self, x: usize, y: usize) -> usize {
        self.shapes
            .iter()
            .rev()
            .find(|(_, s, _)| s.contains(x, y))
            .map_or(0, |(l, _, _)| *l)
    }

    pub fn render(&self) -> (Tensor, Vec<usize>) {
        let e = self.extent;
        let mut img = Tensor::zeros(&[1, 3, e, e]);
        let mut labels = vec![0; e * e];
        for y in 0..e {
            for x in 0..e {
                let t = &self.texture;
                let wave =
                    t.amplitude * (t.freq.0 * x as f64 + t.freq.1 * y as f64 + t.phase).sin();
                let grain = t.grain[y * e + x];
                let hit = self.shapes.iter().rev().find(|(_, s, _)| s.contains(x, y));
                labels[y * e + x] = hit.map_or(0, |(l, _, _)| *l);
                for c in 0..3 {
                    let base = match hit {
                        Some((_, _, rgb)) => rgb[c] + 0.5 * wave,
                        None => self.background[c] + wave,
                    };
                    img.data_mut()[(c * e + y) * e + x] = (base + grain).clamp(0.0, 1.0);
                }
            }
        }
        (img, labels)
    }
}

/// Color directions for shapes; the shape color is the background
/// color plus `contrast` times this direction.
const SEG_COLOR_DIRS: [[f64; 3]; 3] = [[1.0, -0.3, -0.3], [-0.3, 1.0, -0.3], [-0.3, -0.3, 1.0]];
const CLS_COLOR_DIRS: [[f64; 3]; 2] = [[0.8, 0.6, -0.6], [-0.6, 0.4, 0.9]];

fn texture(rng: &mut ChaCha8Rng, extent: usize, amplitude: f64) -> Texture {
    let grain = (0..extent * extent)
        .map(|_| rng.random_range(-0.5..0.5) * amplitude * 0.5)
        .collect();
    Texture {
        amplitude,
        freq: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
        grain,
    }
}

fn background(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let g = rng.random_range(0.35..0.65);
    [0, 1, 2].map(|_| g + rng.random_range(-0.04..0.04))
}

fn shape_color(rng: &mut ChaCha8Rng, bg: &[f64; 3], dir: &[f64; 3], contrast: f64) -> [f64; 3] {
    let c = contrast * rng.random_range(0.8..1.2);
    [0, 1, 2].map(|k| (bg[k] + c * dir[k] + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0))
}

fn random_shape(rng: &mut ChaCha8Rng, kind: usize, e: f64, center_jitter: Option<f64>) -> Shape {
    let size = rng.random_range(0.14 * e..0.26 * e);
    let (cx, cy) = match center_jitter {
        Some(j) => (
            e / 2.0 + rng.random_range(-j..=j),
            e / 2.0 + rng.random_range(-j..=j),
        ),
        None => (
            rng.random_range(0.15 * e..0.85 * e),
            rng.random_range(0.15 * e..0.85 * e),
        ),
    };
    match kind {
        0 => Shape::Circle { cx, cy, r: size },
        1 => Shape::Rect {
            cx,
            cy,
            hw: size * rng.random_range(0.7..1.1),
            hh: size * rng.random_range(0.7..1.1),
        },
        2 => Shape::Triangle {
            a: (cx, cy - 1.2 * size),
            b: (cx - 1.1 * size, cy + 0.9 * size),
            c: (cx + 1.1 * size, cy + 0.9 * size),
        },
        3 => Shape::Ring {
            cx,
            cy,
            r_in: 0.5 * size,
            r_out: 1.1 * size,
        },
        _ => Shape::Cross {
            cx,
            cy,
            arm: 1.1 * size,
            half_width: 0.35 * size,
        },
    }
}

/// Scene `index` of a dataset spec; a pure function of `(spec, index)`.
pub fn synth_scene(spec: &DatasetSpec, index: usize) -> Scene {
    let e = spec.extent;
    match spec.task {
        Task::Segmentation => {
            let mut rng = seed::child_rng(spec.seed, "data.segmentation", index as u64);
            let bg = background(&mut rng);
            let tex = texture(&mut rng, e, spec.texture);
            let count = rng.random_range(1..=3);
            let shapes = (0..count)
                .map(|_| {
                    let kind = rng.random_range(0..3);
                    let shape = random_shape(&mut rng, kind, e as f64, None);
                    let dir = if spec.color_coded {
                        kind
                    } else {
                        rng.random_range(0..3)
                    };
                    let rgb = shape_color(&mut rng, &bg, &SEG_COLOR_DIRS[dir], spec.contrast);
                    (kind + 1, shape, rgb)
                })
                .collect();
            Scene {
                extent: e,
                background: bg,
                shapes,
                texture: tex,
            }
        }
        Task::Classification => {
            let mut rng = seed::child_rng(spec.seed, "data.classification", index as u64);
            let bg = background(&mut rng);
            let tex = texture(&mut rng, e, spec.texture);
            let label = index % CLS_CLASSES;
            let (kind, family) = (label % 5, label / 5);
            let shape = random_shape(&mut rng, kind, e as f64, Some(e as f64 * 0.06));
            let rgb = shape_color(&mut rng, &bg, &CLS_COLOR_DIRS[family], spec.contrast);
            Scene {
                extent: e,
                background: bg,
                shapes: vec![(label, shape, rgb)],
                texture: tex,
            }
        }
    }
}

pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.extent < 16 {
        return Err(Error::config(format!(
            "image extent must be >= 16, got {}",
            spec.extent
        )));
    }
    let rendered = crate::parallel::map_indexed(spec.size, |i| {
        let scene = synth_scene(spec, i);
        let (img, labels) = scene.render();
        match spec.task {
            Task::Segmentation => (img, labels),
            Task::Classification => (img, vec![scene.shapes[0].0]),
        }
    });
    let (images, labels) = rendered.into_iter().unzip();
    Ok(Dataset {
        task: spec.task,
        num_classes: spec.num_classes(),
        images,
        labels,
    })
}
