//! On-disk dataset layout: one 16-bit RGB PNG per sample plus a JSON-lines
//! manifest (`manifest.jsonl`). Every manifest record carries
//! `schema_version`, the image file name, split, labels and the full scene
//! spec, so a dataset can be regenerated or audited from the manifest alone.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledImage, Labels, Sample, SceneSpec, Split, TaskConfig};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Record {
    schema_version: u32,
    file: String,
    index: usize,
    split: Split,
    task: TaskConfig,
    dataset_seed: u64,
    labels: Labels,
    spec: SceneSpec,
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::DatasetFormat(format!("{}: {e}", path.display())))?;
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::DatasetFormat(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn read_png(path: &Path) -> Result<Image> {
    let fmt = |e: png::DecodingError| Error::DatasetFormat(format!("{}: {e}", path.display()));
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::DatasetFormat(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::DatasetFormat(format!(
            "{}: expected 16-bit RGB, found {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
        .collect();
    Ok(Image {
        height: info.height as usize,
        width: info.width as usize,
        data,
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    let mut manifest = BufWriter::new(File::create(&tmp)?);
    for s in &dataset.samples {
        let file = format!("img_{:05}.png", s.index);
        write_png(&dir.join(&file), &s.image.pixels)?;
        let rec = Record {
            schema_version: MANIFEST_SCHEMA_VERSION,
            file,
            index: s.index,
            split: s.split,
            task: dataset.config,
            dataset_seed: dataset.seed,
            labels: s.image.labels,
            spec: s.spec,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    drop(manifest);
    fs::rename(tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = File::open(dir.join(MANIFEST_FILE))?;
    let mut samples = Vec::new();
    let mut header: Option<(TaskConfig, u64)> = None;
    for (lineno, line) in BufReader::new(manifest).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        if rec.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::DatasetFormat(format!(
                "line {}: schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                lineno + 1,
                rec.schema_version
            )));
        }
        match header {
            None => header = Some((rec.task, rec.dataset_seed)),
            Some(h) if h != (rec.task, rec.dataset_seed) => {
                return Err(Error::DatasetFormat(format!("line {}: mixed datasets", lineno + 1)))
            }
            _ => {}
        }
        let pixels = read_png(&dir.join(&rec.file))?;
        samples.push(Sample {
            index: rec.index,
            spec: rec.spec,
            image: LabeledImage {
                pixels,
                labels: rec.labels,
            },
            split: rec.split,
        });
    }
    let (config, seed) = header.ok_or_else(|| Error::DatasetFormat("empty manifest".into()))?;
    Ok(Dataset { config, seed, samples })
}
