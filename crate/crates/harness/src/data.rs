//! Synthetic splits in memory and on disk.
//!
//! On disk a split is a directory of `{id}_rgb.png` / `{id}_ir.png` pairs
//! plus `annotations.jsonl`, one `{image_id, class, x1, y1, x2, y2}` object
//! per line, boxes in infrared-frame pixels.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use wmnet_core::metrics::{BBox, Detection, DetectionSet};
use wmnet_core::synth::generate_pair;
use wmnet_core::tensor::{FeatureMap, Tensor};

use crate::config::DatasetSpec;
use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            _ => Err(Error::Config(format!("unknown split {s:?} (train or val)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub rgb: FeatureMap,
    pub ir: FeatureMap,
    pub gt: DetectionSet,
}

/// Seed of pair `index` in `split`; splits never share seeds.
pub fn pair_seed(data_seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x5452_u64,
        Split::Val => 0x5641_u64,
    };
    data_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag << 40)
        .wrapping_add(index as u64)
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    let n = match split {
        Split::Train => spec.train_size,
        Split::Val => spec.val_size,
    };
    (0..n)
        .map(|i| {
            let p = generate_pair(pair_seed(spec.seed, split, i), &spec.misalignment, spec.canvas)?;
            Ok(Sample {
                id: i,
                rgb: p.rgb,
                ir: p.ir,
                gt: p.gt,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    image_id: usize,
    class: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

/// Writes `dir/{train,val}/` and a copy of the spec as `dir/spec.txt`.
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let spec_path = dir.join("spec.txt");
    fs::write(&spec_path, spec.to_kv()).map_err(io_err(&spec_path))?;
    for split in [Split::Train, Split::Val] {
        write_split(&generate_split(spec, split)?, &dir.join(split.name()))?;
    }
    Ok(())
}

pub fn write_split(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::create(&ann_path).map_err(io_err(&ann_path))?;
    let mut ann = BufWriter::new(file);
    for s in samples {
        save_png(&s.rgb, &dir.join(format!("{:05}_rgb.png", s.id)))?;
        save_png(&s.ir, &dir.join(format!("{:05}_ir.png", s.id)))?;
        for d in &s.gt.items {
            let a = Annotation {
                image_id: s.id,
                class: d.class,
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
            };
            serde_json::to_writer(&mut ann, &a)?;
            ann.write_all(b"\n").map_err(io_err(&ann_path))?;
        }
    }
    ann.flush().map_err(io_err(&ann_path))
}

/// Reads a split written by [`write_split`]. Images are 8-bit, so values
/// come back quantised to multiples of 1/255.
pub fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path).map_err(io_err(&ann_path))?;
    let mut boxes: BTreeMap<usize, Vec<Detection>> = BTreeMap::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(io_err(&ann_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: Annotation = serde_json::from_str(&line)?;
        boxes.entry(a.image_id).or_default().push(Detection {
            class: a.class,
            bbox: BBox::new(a.x1, a.y1, a.x2, a.y2),
            confidence: 1.0,
        });
    }
    // images without objects have no annotation lines, so list the files
    let mut ids: Vec<usize> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            name.strip_suffix("_ir.png")?.parse().ok()
        })
        .collect();
    ids.sort_unstable();
    ids.into_iter()
        .map(|id| {
            let gt = DetectionSet::new(boxes.remove(&id).unwrap_or_default());
            gt.validate()?;
            Ok(Sample {
                id,
                rgb: load_png(&dir.join(format!("{id:05}_rgb.png")), 3)?,
                ir: load_png(&dir.join(format!("{id:05}_ir.png")), 1)?,
                gt,
            })
        })
        .collect()
}

/// Saves a 1- or 3-channel map in [0, 1] as 8-bit PNG.
pub fn save_png(map: &FeatureMap, path: &Path) -> Result<()> {
    let (h, w, c) = map.hwc()?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match c {
        1 => image::ColorType::L8,
        3 => image::ColorType::Rgb8,
        _ => return Err(Error::Format(format!("cannot save {c}-channel map as PNG"))),
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)?;
    Ok(())
}

pub fn load_png(path: &Path, channels: usize) -> Result<FeatureMap> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => return Err(Error::Format(format!("cannot load {channels}-channel PNG"))),
    };
    let data = raw.into_iter().map(|b| b as f32 / 255.0).collect();
    Ok(Tensor::new(&[h, w, channels], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_disjoint_across_splits() {
        let train: Vec<u64> = (0..1000).map(|i| pair_seed(3, Split::Train, i)).collect();
        assert!((0..1000).all(|i| !train.contains(&pair_seed(3, Split::Val, i))));
    }

    #[test]
    fn split_names() {
        assert_eq!(Split::parse("val").unwrap(), Split::Val);
        assert!(Split::parse("test").is_err());
    }
}
