//! On-disk sample format: one directory per sample plus a split manifest.
//!
//! ```text
//! root/manifest.json           {"splits": {"train": ["000000", ...], ...}}
//! root/NNNNNN/rgb.png          8-bit RGB
//! root/NNNNNN/depth.png        16-bit gray, millimeters, 0 = invalid
//! root/NNNNNN/intrinsics.json  {"fx", "fy", "cx", "cy"}
//! root/NNNNNN/pose.json        {"rotation": [9, row-major], "translation": [3], "frame_id", "stamp"}
//! root/NNNNNN/footprint.png    8-bit gray, 0 or 255
//! root/NNNNNN/gt_normals.png   optional, (n + 1) / 2 · 255 per channel, black = invalid
//! root/NNNNNN/gt_traversable.png  optional, 0 or 255
//! ```

use crate::error::{invalid, io_err, Error, Result};
use crate::frame::{Intrinsics, Pose, RgbdFrame, SurfaceNormalImage};
use crate::geometry::{normals_from_depth, FootprintMask};
use diffcore::Tensor;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const SPLITS: [&str; 4] = ["train", "val", "test", "sequence"];
pub const MANIFEST: &str = "manifest.json";

/// One training / evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frame: RgbdFrame,
    pub footprint: FootprintMask,
    pub gt_normals: Option<SurfaceNormalImage>,
    pub gt_traversable: Option<Tensor>,
}

impl Sample {
    /// Ground-truth normals, falling back to normals computed from depth.
    pub fn normals_target(&self) -> Result<SurfaceNormalImage> {
        match &self.gt_normals {
            Some(n) => Ok(n.clone()),
            None => normals_from_depth(&self.frame.depth, &self.frame.intrinsics),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub splits: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        for name in self.splits.keys() {
            if !SPLITS.contains(&name.as_str()) {
                return Err(Error::UnknownSplit(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    rotation: [f64; 9],
    translation: [f64; 3],
    frame_id: u64,
    stamp: f64,
}

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| fmt_err(path, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| fmt_err(path, e))?;
    std::fs::write(path, s + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| fmt_err(path, e))
}

fn binary_image(t: &Tensor, h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if t.data()[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }]))
}

/// Writes one sample into `dir`, creating it.
pub fn write_sample(dir: &Path, s: &Sample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let f = &s.frame;
    let (h, w) = (f.height(), f.width());
    let plane = h * w;
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_u8(f.rgb.data()[p]), to_u8(f.rgb.data()[plane + p]), to_u8(f.rgb.data()[2 * plane + p])])
    });
    save_png(&rgb, &dir.join("rgb.png"))?;
    let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let d = f.depth.data()[y as usize * w + x as usize];
        Luma([(d * 1000.0).round().clamp(0.0, 65535.0) as u16])
    });
    save_png(&depth, &dir.join("depth.png"))?;
    write_json(&f.intrinsics, &dir.join("intrinsics.json"))?;
    let pose = PoseFile {
        rotation: f.pose.rotation_row_major(),
        translation: [f.pose.translation().x, f.pose.translation().y, f.pose.translation().z],
        frame_id: f.frame_id,
        stamp: f.stamp,
    };
    write_json(&pose, &dir.join("pose.json"))?;
    save_png(&binary_image(&s.footprint.mask, h, w), &dir.join("footprint.png"))?;
    if let Some(n) = &s.gt_normals {
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            if n.validity.data()[p] > 0.5 {
                Rgb(std::array::from_fn(|c| to_u8((n.normals.data()[c * plane + p] + 1.0) / 2.0)))
            } else {
                Rgb([0, 0, 0])
            }
        });
        save_png(&img, &dir.join("gt_normals.png"))?;
    }
    if let Some(t) = &s.gt_traversable {
        save_png(&binary_image(t, h, w), &dir.join("gt_traversable.png"))?;
    }
    Ok(())
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| fmt_err(path, e))
}

fn check_dims(path: &Path, got: (u32, u32), h: usize, w: usize) -> Result<()> {
    if got != (w as u32, h as u32) {
        return Err(fmt_err(path, format!("image is {}×{}, expected {w}×{h}", got.0, got.1)));
    }
    Ok(())
}

fn read_binary(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = open_image(path)?.to_luma8();
    check_dims(path, img.dimensions(), h, w)?;
    Ok(Tensor::new(&[1, h, w], img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect())?)
}

/// Reads one sample directory.
pub fn read_sample(dir: &Path) -> Result<Sample> {
    let rgb_path = dir.join("rgb.png");
    let rgb_img = open_image(&rgb_path)?.to_rgb8();
    let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    for (p, px) in rgb_img.pixels().enumerate() {
        for c in 0..3 {
            rgb[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    let depth_path = dir.join("depth.png");
    let depth_img = open_image(&depth_path)?.to_luma16();
    check_dims(&depth_path, depth_img.dimensions(), h, w)?;
    let depth: Vec<f64> = depth_img.pixels().map(|p| p[0] as f64 / 1000.0).collect();
    let intrinsics: Intrinsics = read_json(&dir.join("intrinsics.json"))?;
    let pose_path = dir.join("pose.json");
    let pf: PoseFile = read_json(&pose_path)?;
    let pose = Pose::from_row_major(&pf.rotation, &pf.translation).map_err(|e| fmt_err(&pose_path, e))?;
    let frame = RgbdFrame::new(Tensor::new(&[3, h, w], rgb)?, Tensor::new(&[1, h, w], depth)?, intrinsics, pose, pf.frame_id, pf.stamp)?;
    let mask = read_binary(&dir.join("footprint.png"), h, w)?;
    let footprint = FootprintMask::new(mask, Tensor::ones(&[1, h, w]))?;
    let np = dir.join("gt_normals.png");
    let gt_normals = if np.exists() {
        let img = open_image(&np)?.to_rgb8();
        check_dims(&np, img.dimensions(), h, w)?;
        let mut n = vec![0.0; 3 * plane];
        let mut valid = vec![0.0; plane];
        for (p, px) in img.pixels().enumerate() {
            if px.0 == [0, 0, 0] {
                continue;
            }
            let v: [f64; 3] = std::array::from_fn(|c| px[c] as f64 / 255.0 * 2.0 - 1.0);
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if len == 0.0 {
                continue;
            }
            for c in 0..3 {
                n[c * plane + p] = v[c] / len;
            }
            valid[p] = 1.0;
        }
        Some(SurfaceNormalImage::new(Tensor::new(&[3, h, w], n)?, Tensor::new(&[1, h, w], valid)?)?)
    } else {
        None
    };
    let tp = dir.join("gt_traversable.png");
    let gt_traversable = if tp.exists() { Some(read_binary(&tp, h, w)?) } else { None };
    Ok(Sample {
        frame,
        footprint,
        gt_normals,
        gt_traversable,
    })
}

/// A dataset directory and its split manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    /// Opens `root`. A directory without a manifest and without samples is
    /// an empty dataset; sample directories without a manifest all belong to
    /// the `train` split. A malformed manifest is an error.
    pub fn open(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST);
        let manifest = if mpath.exists() {
            let m: Manifest = read_json(&mpath)?;
            m.validate()?;
            m
        } else {
            let mut ids: Vec<String> = std::fs::read_dir(root)
                .map_err(io_err(root))?
                .filter_map(|e| e.ok())
                .filter(|e| e.path().is_dir())
                .filter_map(|e| e.file_name().into_string().ok())
                .filter(|n| n.len() == 6 && n.bytes().all(|b| b.is_ascii_digit()))
                .collect();
            ids.sort();
            let mut m = Manifest::default();
            if !ids.is_empty() {
                m.splits.insert("train".into(), ids);
            }
            m
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn ids(&self, split: &str) -> &[String] {
        self.manifest.splits.get(split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.manifest.splits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, id: &str) -> Result<Sample> {
        read_sample(&self.root.join(id))
    }

    /// Loads every readable sample of a split; unreadable ones are skipped
    /// with a logged diagnostic.
    pub fn load_split(&self, split: &str) -> Vec<Sample> {
        self.ids(split)
            .iter()
            .filter_map(|id| match self.load(id) {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("skipping sample {id}: {e}");
                    None
                }
            })
            .collect()
    }
}

/// Incrementally writes samples and the manifest.
#[derive(Debug)]
pub struct DatasetWriter {
    root: PathBuf,
    manifest: Manifest,
    next: usize,
}

impl DatasetWriter {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: Manifest::default(),
            next: 0,
        })
    }

    /// Writes a sample under the next free id and lists it in `split`.
    pub fn add(&mut self, split: &str, sample: &Sample) -> Result<String> {
        if !SPLITS.contains(&split) {
            return Err(invalid(format!("unknown split `{split}`")));
        }
        let id = format!("{:06}", self.next);
        write_sample(&self.root.join(&id), sample)?;
        self.next += 1;
        self.manifest.splits.entry(split.to_string()).or_default().push(id.clone());
        Ok(id)
    }

    pub fn finish(self) -> Result<Manifest> {
        write_json(&self.manifest, &self.root.join(MANIFEST))?;
        Ok(self.manifest)
    }
}
