//! On-disk dataset layout:
//!
//! ```text
//! root/images/<id>.png   RGB image
//! root/masks/<id>.png    8-bit single-channel or palette mask (values = class ids)
//! root/manifest.txt      one id per line (optional; otherwise images/ is listed)
//! root/splits/*.txt      optional explicit id lists
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{Error, IoContext, Result};
use crate::maps::{Image, LabelMap, SegSample, IGNORE_INDEX};

use super::{Dataset, DatasetKind, DatasetSpec};

const REMAP_TABLE: &str = include_str!("../../data/cityscapes_label_ids.txt");
pub const MANIFEST: &str = "manifest.txt";

/// Raw Cityscapes label id to training id lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct CityscapesRemap {
    table: [u8; 256],
}

impl CityscapesRemap {
    pub fn map(&self, raw: u8) -> u8 {
        self.table[usize::from(raw)]
    }
}

/// Parses the shipped remap table; ids not listed map to the ignore index.
pub fn cityscapes_remap_table() -> Result<CityscapesRemap> {
    let mut table = [IGNORE_INDEX; 256];
    for (n, line) in REMAP_TABLE.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<u8> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Load(format!("remap table line {}: `{line}`", n + 1)))
        };
        let raw = parse(parts.next())?;
        let train = parse(parts.next())?;
        table[usize::from(raw)] = train;
    }
    Ok(CityscapesRemap { table })
}

fn to_image(rgb: &RgbImage) -> Image {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::zeros(3, h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.plane_mut(c)[y as usize * w + x as usize] = f32::from(px[c]) / 255.0;
        }
    }
    img
}

fn from_image(img: &Image) -> RgbImage {
    RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let j = y as usize * img.width + x as usize;
        image::Rgb(std::array::from_fn(|c| {
            (img.plane(c)[j].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

/// Reads raw mask values; palette images yield palette indices.
fn read_mask(path: &Path) -> Result<LabelMap> {
    let file = fs::File::open(path).at(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    use png::{BitDepth, ColorType};
    match (info.color_type, info.bit_depth) {
        (ColorType::Grayscale | ColorType::Indexed, BitDepth::Eight) => {}
        other => {
            return Err(Error::Load(format!(
                "{}: mask must be 8-bit grayscale or palette, got {other:?}",
                path.display()
            )))
        }
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut values = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        values.extend_from_slice(&row[..w]);
    }
    LabelMap::from_vec(h, w, values)
}

fn read_ids(root: &Path) -> Result<Vec<String>> {
    let manifest = root.join(MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).at(&manifest)?;
        return Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect());
    }
    let dir = root.join("images");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).at(&dir)? {
        let path = entry.at(&dir)?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every sample listed by the manifest (or found under `images/`).
pub fn load_segmentation_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!("num_classes {} < 2", spec.num_classes)));
    }
    if !spec.root.is_dir() {
        return Err(Error::Load(format!("dataset root {} not found", spec.root.display())));
    }
    let ids = read_ids(&spec.root)?;
    let missing: Vec<&String> = ids
        .iter()
        .filter(|id| !spec.root.join("masks").join(format!("{id}.png")).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Load(format!("missing masks for ids {missing:?}")));
    }
    let remap = match spec.kind {
        DatasetKind::CityscapesLayout => Some(cityscapes_remap_table()?),
        _ => None,
    };
    let mut unknown: BTreeMap<u8, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = spec.root.join("images").join(format!("{id}.png"));
        let rgb = image::open(&img_path)
            .map_err(|e| Error::Load(format!("{}: {e}", img_path.display())))?
            .to_rgb8();
        let mut mask = read_mask(&spec.root.join("masks").join(format!("{id}.png")))?;
        for v in &mut mask.values {
            let raw = *v;
            let mapped = if raw == spec.ignore_index {
                IGNORE_INDEX
            } else if let Some(r) = &remap {
                r.map(raw)
            } else {
                raw
            };
            *v = if mapped != IGNORE_INDEX && usize::from(mapped) >= spec.num_classes {
                *unknown.entry(raw).or_default() += 1;
                IGNORE_INDEX
            } else {
                mapped
            };
        }
        samples.push(SegSample::new(id, to_image(&rgb), Some(mask))?);
    }
    if !unknown.is_empty() {
        log::warn!("unknown class ids mapped to ignore (id: pixel count): {unknown:?}");
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        samples,
    })
}

/// Writes the dataset in the documented layout (PNG images, 8-bit masks, manifest).
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).at(&images)?;
    fs::create_dir_all(&masks).at(&masks)?;
    let mut manifest = String::new();
    for s in &ds.samples {
        from_image(&s.image).save(images.join(format!("{}.png", s.id)))?;
        if let Some(label) = &s.label {
            let gray = GrayImage::from_raw(label.width as u32, label.height as u32, label.values.clone())
                .ok_or_else(|| Error::Contract("label buffer size".into()))?;
            gray.save(masks.join(format!("{}.png", s.id)))?;
        }
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).at(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic_dataset, SyntheticConfig};

    fn spec(root: &Path, kind: DatasetKind, k: usize) -> DatasetSpec {
        DatasetSpec {
            kind,
            root: root.to_path_buf(),
            num_classes: k,
            ignore_index: IGNORE_INDEX,
        }
    }

    #[test]
    fn synthetic_round_trip_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(4, (20, 24), 4, 3)).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_segmentation_dataset(&spec(dir.path(), DatasetKind::Synthetic, 4)).unwrap();
        assert_eq!(back.ids(), ds.ids());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.image.values.iter().zip(&b.image.values) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn missing_mask_lists_ids() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&SyntheticConfig::new(3, (16, 16), 4, 3)).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("masks/syn_00001.png")).unwrap();
        let err = load_segmentation_dataset(&spec(dir.path(), DatasetKind::Synthetic, 4)).unwrap_err();
        assert!(err.to_string().contains("syn_00001"), "{err}");
    }

    #[test]
    fn ignore_only_mask_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_synthetic_dataset(&SyntheticConfig::new(2, (16, 16), 4, 3)).unwrap();
        ds.samples[1].label.as_mut().unwrap().values.fill(IGNORE_INDEX);
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_segmentation_dataset(&spec(dir.path(), DatasetKind::Synthetic, 4)).unwrap();
        assert_eq!(back.unusable_for_supervision(), vec!["syn_00001"]);
    }

    #[test]
    fn cityscapes_table_maps_unlisted_ids_to_ignore() {
        let t = cityscapes_remap_table().unwrap();
        // independent reading of the documented table
        let expected: [(u8, u8); 8] = [(0, 255), (6, 255), (7, 0), (8, 1), (9, 255), (26, 13), (33, 18), (34, 255)];
        for (raw, train) in expected {
            assert_eq!(t.map(raw), train, "raw {raw}");
        }
        let trained: std::collections::BTreeSet<u8> = (0..=255u8).map(|r| t.map(r)).filter(|&v| v != 255).collect();
        assert_eq!(trained, (0..19).collect());
        assert_eq!(t.map(255), IGNORE_INDEX);
    }

    #[test]
    fn cityscapes_layout_remaps_and_palette_masks_decode_by_index() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        RgbImage::new(4, 1).save(dir.path().join("images/a.png")).unwrap();
        // palette PNG whose indices are raw ids 7, 26, 9, 50
        let file = fs::File::create(dir.path().join("masks/a.png")).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), 4, 1);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(vec![0u8; 3 * 256]);
        let mut w = enc.write_header().unwrap();
        w.write_image_data(&[7, 26, 9, 50]).unwrap();
        w.finish().unwrap();
        let ds = load_segmentation_dataset(&spec(dir.path(), DatasetKind::CityscapesLayout, 19)).unwrap();
        assert_eq!(ds.samples[0].label.as_ref().unwrap().values, vec![0, 13, 255, 255]);

        // same file read as VOC layout keeps raw indices, out-of-range ones ignored
        let ds = load_segmentation_dataset(&spec(dir.path(), DatasetKind::VocLayout, 21)).unwrap();
        assert_eq!(ds.samples[0].label.as_ref().unwrap().values, vec![7, 255, 9, 255]);
    }
}
