//! JSONL manifests and on-disk datasets.
//!
//! A dataset directory holds `manifest.jsonl`, `subsets.json` and an
//! `images/` folder. Manifest paths are relative to the manifest's folder.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::world::{Oracle, ReviewRecord, RuleClass, Split, Subsets};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUBSETS_FILE: &str = "subsets.json";
pub const IMAGE_DIR: &str = "images";

/// One manifest line. Field order is the canonical serialisation order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: usize,
    pub sku: usize,
    pub split: Split,
    pub label: usize,
    pub title: Vec<usize>,
    pub feedback: Vec<usize>,
    /// Candidate pool image paths.
    pub images: Vec<String>,
    /// Pool indices of the submitted sequence, primary first.
    pub sequence: Vec<usize>,
    pub oracle: Oracle,
}

impl ManifestRecord {
    pub fn validate(&self) -> Result<(), String> {
        if RuleClass::from_index(self.label).is_none() {
            return Err(format!("label {} out of range", self.label));
        }
        if self.images.is_empty() {
            return Err("no images".into());
        }
        if let Some(&i) = self.sequence.iter().find(|&&i| i >= self.images.len()) {
            return Err(format!("sequence index {i} but only {} images", self.images.len()));
        }
        Ok(())
    }

    /// Image paths resolved against `base`, failing on the first missing
    /// file.
    pub fn resolve(&self, base: &Path) -> Result<Vec<PathBuf>> {
        self.images
            .iter()
            .map(|p| {
                let path = base.join(p);
                if path.is_file() {
                    Ok(path)
                } else {
                    Err(Error::Format(format!(
                        "sku {}: missing image {}",
                        self.sku,
                        path.display()
                    )))
                }
            })
            .collect()
    }

    pub fn load(&self, base: &Path) -> Result<ReviewRecord> {
        let pool = self
            .resolve(base)?
            .iter()
            .map(|p| Image::load(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReviewRecord {
            id: self.id,
            sku: self.sku,
            split: self.split,
            label: RuleClass::from_index(self.label).ok_or_else(|| Error::Format(format!("label {}", self.label)))?,
            title: self.title.clone(),
            feedback: self.feedback.clone(),
            pool,
            sequence: self.sequence.clone(),
            oracle: self.oracle.clone(),
        })
    }
}

/// Streams records from JSONL, one line at a time. Blank lines are skipped.
pub struct ManifestReader<R> {
    lines: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> ManifestReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line: 0,
        }
    }
}

impl ManifestReader<BufReader<std::fs::File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(BufReader::new(f)))
    }
}

impl<R: BufRead> Iterator for ManifestReader<R> {
    type Item = Result<ManifestRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => {
                    return Some(Err(Error::Manifest {
                        line: self.line + 1,
                        msg: e.to_string(),
                    }))
                }
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let parsed = serde_json::from_str::<ManifestRecord>(&text)
                .map_err(|e| e.to_string())
                .and_then(|r| r.validate().map(|_| r));
            return Some(parsed.map_err(|msg| Error::Manifest { line, msg }));
        }
    }
}

pub fn write_manifest<'a>(
    w: &mut impl Write,
    records: impl IntoIterator<Item = &'a ManifestRecord>,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn image_name(id: usize, k: usize, ext: &str) -> String {
    format!("{IMAGE_DIR}/{id:06}_{k:02}.{ext}")
}

/// Writes images, manifest and subsets under `dir`. Images use `ext`
/// (`ppm`, or `png` with the feature enabled).
pub fn write_dataset(dir: &Path, records: &[ReviewRecord], subsets: &Subsets, ext: &str) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    records.par_iter().try_for_each(|r| {
        r.pool
            .iter()
            .enumerate()
            .try_for_each(|(k, img)| img.save(&dir.join(image_name(r.id, k, ext))))
    })?;
    let path = dir.join(MANIFEST_FILE);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    let manifest: Vec<ManifestRecord> = records.iter().map(|r| to_manifest(r, ext)).collect();
    write_manifest(&mut w, &manifest).map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = dir.join(SUBSETS_FILE);
    let json = serde_json::to_string_pretty(subsets).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn to_manifest(r: &ReviewRecord, ext: &str) -> ManifestRecord {
    ManifestRecord {
        id: r.id,
        sku: r.sku,
        split: r.split,
        label: r.label.index(),
        title: r.title.clone(),
        feedback: r.feedback.clone(),
        images: (0..r.pool.len()).map(|k| image_name(r.id, k, ext)).collect(),
        sequence: r.sequence.clone(),
        oracle: r.oracle.clone(),
    }
}

/// Reads a manifest and loads every referenced image.
pub fn read_records(manifest: &Path) -> Result<Vec<ReviewRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = ManifestReader::open(manifest)?.collect::<Result<Vec<_>>>()?;
    entries.par_iter().map(|m| m.load(base)).collect()
}

pub fn read_subsets(path: &Path) -> Result<Subsets> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
