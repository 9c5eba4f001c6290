//! Synthetic detection scenes: filled shapes over a noise background, with
//! ground-truth boxes taken as the tight bounds of each rendered shape mask.
//!
//! # Dataset directory layout
//!
//! ```text
//! <dir>/manifest.json              format tag, spec echo, scene list
//! <dir>/images/<id:06>.bin         one raw image per scene
//! <dir>/annotations/<id:06>.json   one annotation record per scene
//! ```
//!
//! `manifest.json` fields: `format` (`"fscascade-dataset"`), `version` (1),
//! `spec` (the generating [`SceneSpec`] or `null`), and `scenes`: a list of
//! `{ "id", "split" ("train" | "eval"), "image", "annotation" }` with paths
//! relative to the directory.
//!
//! Image files: 8-byte magic `FSIMG001`, then channels, height and width as
//! little-endian `u32`, then `channels * height * width` little-endian `f64`
//! values in `[channel][row][column]` order.
//!
//! Annotation files: `{ "scene_id", "width", "height", "boxes": [ { "class_id",
//! "x1", "y1", "x2", "y2" } ] }`. The annotation file is authoritative: editing
//! it changes what [`load_dataset`] returns.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, LabeledBox};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class `i + 1` is drawn as `classes[i]`.
    pub classes: Vec<ShapeKind>,
    pub objects_per_image: (usize, usize),
    /// Side lengths as fractions of the image side.
    pub size_range: (f64, f64),
    pub max_gt_iou: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            classes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle],
            objects_per_image: (1, 4),
            size_range: (0.15, 0.4),
            max_gt_iou: 0.2,
            noise: 0.4,
            seed: 0,
        }
    }
}

/// Placement attempts per object before generation gives up.
const RETRY_BUDGET: usize = 500;

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("size range ({lo}, {hi}) must satisfy 0 < min <= max < 1")));
        }
        if !(0.0..1.0).contains(&self.max_gt_iou) {
            return Err(Error::Config(format!("max GT IoU {} must lie in [0, 1)", self.max_gt_iou)));
        }
        let (omin, omax) = self.objects_per_image;
        if omin > omax {
            return Err(Error::Config(format!("objects range ({omin}, {omax}) is empty")));
        }
        if self.classes.is_empty() || self.height < 4 || self.width < 4 {
            return Err(Error::Config("need at least one class and an image of at least 4x4".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise amplitude {} must lie in [0, 1]", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: u64,
    pub split: Split,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub gts: Vec<LabeledBox>,
}

impl SceneRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The image as a batch of one, `[1, 3, H, W]`.
    pub fn batched_image(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(self.image.shape());
        self.image.clone().reshape(shape).expect("same element count")
    }
}

/// Per-scene seed derived from the spec seed and scene id.
pub fn scene_seed(spec_seed: u64, scene_id: u64) -> u64 {
    splitmix64(splitmix64(spec_seed) ^ scene_id.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pixel mask of one shape, as `(row-major bool mask, tight box)`.
pub fn shape_mask(kind: ShapeKind, rect: (usize, usize, usize, usize), apex: f64, width: usize, height: usize) -> Vec<bool> {
    let (x0, y0, w, h) = rect;
    let mut mask = vec![false; width * height];
    let (fx0, fy0, fw, fh) = (x0 as f64, y0 as f64, w as f64, h as f64);
    for y in y0..(y0 + h).min(height) {
        for x in x0..(x0 + w).min(width) {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let inside = match kind {
                ShapeKind::Rectangle => true,
                ShapeKind::Ellipse => {
                    let u = (px - (fx0 + fw / 2.0)) / (fw / 2.0);
                    let v = (py - (fy0 + fh / 2.0)) / (fh / 2.0);
                    u * u + v * v <= 1.0
                }
                ShapeKind::Triangle => {
                    let a = (fx0 + apex * fw, fy0);
                    let b = (fx0, fy0 + fh);
                    let c = (fx0 + fw, fy0 + fh);
                    point_in_triangle((px, py), a, b, c)
                }
            };
            mask[y * width + x] = inside;
        }
    }
    mask
}

fn point_in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0);
    let d1 = cross(a, b, p);
    let d2 = cross(b, c, p);
    let d3 = cross(c, a, p);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

/// Tight pixel bounds of a mask; `None` when it is empty.
pub fn mask_bounds(mask: &[bool], width: usize) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => (x, y, x, y),
            Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
        });
    }
    b.map(|(x1, y1, x2, y2)| BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64))
}

/// A placed object: class, tight box and its rendered mask.
#[derive(Debug, Clone)]
pub struct PlacedShape {
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: Vec<bool>,
}

/// Samples and rasterizes the objects of one scene, without painting.
pub fn place_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<PlacedShape>> {
    let (w, h) = (spec.width, spec.height);
    let (omin, omax) = spec.objects_per_image;
    let count = rng.gen_range(omin..=omax);
    let mut placed: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut ok = false;
        for _ in 0..RETRY_BUDGET {
            let class_idx = rng.gen_range(0..spec.classes.len());
            let (lo, hi) = spec.size_range;
            let bw = ((w as f64 * rng.gen_range(lo..=hi)).round() as usize).clamp(2, w);
            let bh = ((h as f64 * rng.gen_range(lo..=hi)).round() as usize).clamp(2, h);
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            let apex = rng.gen_range(0.2..=0.8);
            let mask = shape_mask(spec.classes[class_idx], (x0, y0, bw, bh), apex, w, h);
            let Some(bbox) = mask_bounds(&mask, w) else { continue };
            if bbox.area() < 4.0 || placed.iter().any(|p| iou(&p.bbox, &bbox) > spec.max_gt_iou) {
                continue;
            }
            placed.push(PlacedShape {
                class_id: class_idx + 1,
                bbox,
                mask,
            });
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Generation(format!(
                "could not place object {} of {count} within {RETRY_BUDGET} attempts; \
                 try fewer objects, smaller sizes or a looser GT IoU cap",
                placed.len() + 1
            )));
        }
    }
    Ok(placed)
}

/// Renders one scene; a pure function of `(spec.seed, scene_id)`.
pub fn generate_scene(spec: &SceneSpec, scene_id: u64, split: Split) -> Result<SceneRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(spec.seed, scene_id));
    let (w, h) = (spec.width, spec.height);
    let plane = w * h;
    let mut img = vec![0.0; 3 * plane];
    for v in img.iter_mut() {
        *v = 0.5 + spec.noise * (rng.gen::<f64>() - 0.5);
    }
    let shapes = place_shapes(spec, &mut rng)?;
    for s in &shapes {
        let color: [f64; 3] = std::array::from_fn(|_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(0.0..0.15)
            } else {
                rng.gen_range(0.85..1.0)
            }
        });
        for (i, _) in s.mask.iter().enumerate().filter(|(_, &m)| m) {
            for (ch, &c) in color.iter().enumerate() {
                let jitter = 0.25 * spec.noise * (rng.gen::<f64>() - 0.5);
                img[ch * plane + i] = (c + jitter).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SceneRecord {
        id: scene_id,
        split,
        image: Tensor::new(vec![3, h, w], img)?,
        gts: shapes
            .iter()
            .map(|s| LabeledBox {
                bbox: s.bbox,
                class_id: s.class_id,
            })
            .collect(),
    })
}

/// A collection of scenes plus the spec that produced them, if known.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: Option<SceneSpec>,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    /// Scenes `0..train` form the training split and `train..train + eval` the
    /// evaluation split.
    pub fn generate(spec: &SceneSpec, train: usize, eval: usize) -> Result<Self> {
        let records = (0..(train + eval) as u64)
            .map(|id| generate_scene(spec, id, if (id as usize) < train { Split::Train } else { Split::Eval }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: Some(spec.clone()),
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&SceneRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn train(&self) -> Vec<&SceneRecord> {
        self.split(Split::Train)
    }

    pub fn eval(&self) -> Vec<&SceneRecord> {
        self.split(Split::Eval)
    }
}

pub const DATASET_FORMAT: &str = "fscascade-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGE_MAGIC: &[u8; 8] = b"FSIMG001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub split: Split,
    pub image: String,
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: Option<SceneSpec>,
    pub scenes: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationBox {
    class_id: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Annotation {
    scene_id: u64,
    width: usize,
    height: usize,
    boxes: Vec<AnnotationBox>,
}

pub fn encode_image(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let mut out = Vec::with_capacity(20 + 8 * image.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for &d in s {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 20 || &bytes[..8] != IMAGE_MAGIC {
        return Err(Error::format(path, "not an image file (bad magic or truncated header)"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let body = &bytes[20..];
    if body.len() != 8 * n {
        return Err(Error::format(
            path,
            format!("expected {} bytes of pixel data for shape {shape:?}, found {}", 8 * n, body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut scenes = Vec::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let image = format!("images/{:06}.bin", r.id);
        let annotation = format!("annotations/{:06}.json", r.id);
        write_file(&dir.join(&image), &encode_image(&r.image))?;
        let ann = Annotation {
            scene_id: r.id,
            width: r.width(),
            height: r.height(),
            boxes: r
                .gts
                .iter()
                .map(|g| AnnotationBox {
                    class_id: g.class_id,
                    x1: g.bbox.x1,
                    y1: g.bbox.y1,
                    x2: g.bbox.x2,
                    y2: g.bbox.y2,
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&ann).expect("annotation serializes");
        write_file(&dir.join(&annotation), text.as_bytes())?;
        scenes.push(ManifestEntry {
            id: r.id,
            split: r.split,
            image,
            annotation,
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        spec: dataset.spec.clone(),
        scenes,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != DATASET_FORMAT || manifest.version != 1 {
        return Err(Error::format(
            &path,
            format!("unsupported dataset format `{}` v{}", manifest.format, manifest.version),
        ));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let ipath: PathBuf = dir.join(&entry.image);
        let image = decode_image(&read_file(&ipath)?, &ipath)?;
        if image.shape()[0] != 3 {
            return Err(Error::format(&ipath, format!("expected 3 channels, found {}", image.shape()[0])));
        }
        let apath = dir.join(&entry.annotation);
        let ann: Annotation =
            serde_json::from_slice(&read_file(&apath)?).map_err(|e| Error::format(&apath, e.to_string()))?;
        if ann.scene_id != entry.id {
            return Err(Error::format(
                &apath,
                format!("scene id {} does not match manifest id {}", ann.scene_id, entry.id),
            ));
        }
        let gts = ann
            .boxes
            .iter()
            .map(|b| {
                let bbox = BBox::new(b.x1, b.y1, b.x2, b.y2);
                if !bbox.is_valid() || b.class_id == 0 {
                    Err(Error::format(&apath, format!("invalid box {bbox:?} with class {}", b.class_id)))
                } else {
                    Ok(LabeledBox {
                        bbox,
                        class_id: b.class_id,
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(SceneRecord {
            id: entry.id,
            split: entry.split,
            image,
            gts,
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        records,
    })
}
