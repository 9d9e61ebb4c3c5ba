//! Dataset directories: `manifest.json`, RGB images under `images/` and
//! 56×56 grayscale masks (0 or 255) under `masks/`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage as PngRgb};
use maskrefine_core::features::{RgbImage, RoiBox};
use maskrefine_core::quadtree::{MaskGrid, MaskKind, FINE_LEVEL, LEVEL_SIDES};
use maskrefine_core::training::{DamageClass, DatasetSplit, InstanceSample};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: String,
    pub image: String,
    pub mask: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = PngRgb::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::Data("pixel buffer does not match image size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Data(e.to_string()))?;
    Ok(out.into_inner())
}

/// Reads a 56×56 mask; pixels at or above 128 are foreground.
pub fn read_mask_png(path: &Path) -> Result<MaskGrid> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?.to_luma8();
    let side = LEVEL_SIDES[FINE_LEVEL as usize];
    if img.dimensions() != (side as u32, side as u32) {
        return Err(Error::Data(format!(
            "{}: mask is {}×{}, expected {side}×{side}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let values = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(MaskGrid::new(FINE_LEVEL, MaskKind::Binary, values)?)
}

pub fn encode_mask_png(mask: &MaskGrid) -> Result<Vec<u8>> {
    let side = mask.side() as u32;
    let raw = mask.values().iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(side, side, raw).expect("mask grid is square");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Data(e.to_string()))?;
    Ok(out.into_inner())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a split to `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, split: &DatasetSplit) -> Result<Manifest> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut samples = Vec::with_capacity(split.len());
    for (name, list) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for s in list {
            let image = format!("images/{:06}.png", s.id);
            let mask = format!("masks/{:06}.png", s.id);
            write(&dir.join(&image), &encode_rgb_png(&s.image)?)?;
            write(&dir.join(&mask), &encode_mask_png(&s.gt_mask)?)?;
            samples.push(ManifestEntry {
                id: s.id,
                split: name.into(),
                image,
                mask,
                class: s.class.name().into(),
                bbox: [s.bbox.x0, s.bbox.y0, s.bbox.x1, s.bbox.y1],
            });
        }
    }
    let manifest = Manifest { version: MANIFEST_VERSION, samples };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    write(&dir.join(MANIFEST), format!("{text}\n").as_bytes())?;
    Ok(manifest)
}

fn resolve(dir: &Path, rel: &str) -> Result<PathBuf> {
    let p = dir.join(rel);
    if !p.is_file() {
        return Err(Error::Data(format!("missing file {}", p.display())));
    }
    Ok(p)
}

/// Reads a dataset directory back into its splits, preserving manifest order.
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let path = resolve(dir, MANIFEST)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    let mut split = DatasetSplit::default();
    for e in manifest.samples {
        let class: DamageClass = e.class.parse().map_err(|err: maskrefine_core::Error| Error::Data(format!("sample {}: {err}", e.id)))?;
        let image = read_rgb_png(&resolve(dir, &e.image)?)?;
        let mask = read_mask_png(&resolve(dir, &e.mask)?)?;
        let [x0, y0, x1, y1] = e.bbox;
        let bbox = RoiBox::new(x0, y0, x1, y1);
        let sample = InstanceSample::new(e.id, image, bbox, class, mask).map_err(|err| Error::Data(err.to_string()))?;
        match e.split.as_str() {
            "train" => split.train.push(sample),
            "val" => split.val.push(sample),
            "test" => split.test.push(sample),
            other => return Err(Error::Data(format!("sample {}: unknown split {other:?}", e.id))),
        }
    }
    Ok(split)
}
