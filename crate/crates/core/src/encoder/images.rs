use std::fs;
use std::path::Path;

use crate::dataset::{ClassData, ClassId, Dataset, Image, Impression, Sample};
use crate::error::{Error, Result};

/// Loads `root/<class_id>/<impression>.png` (8-bit RGB) into a dataset with
/// pixel values scaled to [0, 1].
pub fn load_image_dir(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut classes = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let class_id = entry.file_name().to_string_lossy().into_owned();
        let mut impressions = Vec::new();
        for file in fs::read_dir(entry.path())? {
            let path = file?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let rgb = image::open(&path)?.to_rgb8();
            let (w, h) = rgb.dimensions();
            let data = rgb.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
            impressions.push(Impression {
                id: path.file_stem().unwrap().to_string_lossy().into_owned(),
                sample: Sample::Image(Image::new(h as usize, w as usize, 3, data)?),
            });
        }
        if !impressions.is_empty() {
            classes.push(ClassData {
                id: ClassId(class_id),
                impressions,
            });
        }
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories with PNGs under {}",
            root.display()
        )));
    }
    Dataset::new(classes)
}

/// Writes an image dataset in the layout read by [`load_image_dir`]. Values
/// are clamped to [0, 1] and quantized to 8 bits.
pub fn write_image_dir(ds: &Dataset, root: &Path) -> Result<()> {
    for class in ds.classes() {
        let dir = root.join(&class.id.0);
        fs::create_dir_all(&dir)?;
        for imp in &class.impressions {
            let Sample::Image(img) = &imp.sample else {
                return Err(Error::Dataset("write_image_dir needs an image dataset".into()));
            };
            let bytes: Vec<u8> = img
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
                .ok_or_else(|| Error::Dataset("image buffer size mismatch".into()))?;
            buf.save(dir.join(format!("{}.png", imp.id)))?;
        }
    }
    Ok(())
}
