//! CSV manifest format:
//!
//! ```text
//! image_path,expression,identity,gender,fmri_path,subject_id,split
//! images/a.png,3,0,1,fmri/a_s1.f32,1,train
//! images/b.png,0,2,0,,,eval
//! ```
//!
//! Paths are relative to the manifest's directory. An empty `fmri_path` marks
//! an image-only (pretraining) row.

use super::{
    fmri::{read_fmri_file, write_fmri_binary},
    grid_to_luma8, preprocess_image, AttributeTarget, Dataset, FmriRecord, ImageSample, Split,
};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_HEADER: [&str; 7] = [
    "image_path",
    "expression",
    "identity",
    "gender",
    "fmri_path",
    "subject_id",
    "split",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_path: String,
    pub expression: usize,
    pub identity: usize,
    pub gender: usize,
    pub fmri_path: Option<String>,
    pub subject_id: Option<u32>,
    pub split: Split,
    /// 1-based line in the manifest file.
    pub line: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir().join(relative)
    }

    pub fn n_identities(&self) -> usize {
        self.entries.iter().map(|e| e.identity + 1).max().unwrap_or(0)
    }
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, name: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("bad {name} `{raw}`: {e}"),
    })
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let bad = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if text.trim().is_empty() {
        return Ok(DatasetManifest {
            path: path.to_path_buf(),
            entries: Vec::new(),
        });
    }
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(bad(1, format!("header must be `{}`", MANIFEST_HEADER.join(","))));
    }
    let mut entries = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            bad(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != MANIFEST_HEADER.len() {
            return Err(bad(line, format!("expected 7 fields, found {}", row.len())));
        }
        let image_path = row[0].to_string();
        if image_path.is_empty() {
            return Err(bad(line, "empty image_path".into()));
        }
        let fmri_path = (!row[4].is_empty()).then(|| row[4].to_string());
        let subject_id = if row[5].is_empty() {
            None
        } else {
            Some(parse_field(path, line, "subject_id", &row[5])?)
        };
        if fmri_path.is_some() && subject_id.is_none() {
            return Err(bad(line, "rows with an fmri_path need a subject_id".into()));
        }
        let entry = ManifestEntry {
            image_path,
            expression: parse_field(path, line, "expression", &row[1])?,
            identity: parse_field(path, line, "identity", &row[2])?,
            gender: parse_field(path, line, "gender", &row[3])?,
            fmri_path,
            subject_id,
            split: row[6].parse().map_err(|e: Error| bad(line, e.to_string()))?,
            line,
        };
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        path: path.to_path_buf(),
        entries,
    };
    let n_id = manifest.n_identities();
    for e in &manifest.entries {
        AttributeTarget::new(e.expression, e.identity, e.gender, n_id)
            .map_err(|err| bad(e.line, err.to_string()))?;
    }
    Ok(manifest)
}

fn load_entry_image(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    image_size: usize,
    to_gray: bool,
) -> Result<ImageSample> {
    let file = manifest.resolve(&entry.image_path);
    if !file.exists() {
        return Err(Error::Parse {
            path: manifest.path.clone(),
            line: entry.line,
            message: format!("image file {} does not exist", file.display()),
        });
    }
    let raw = image::open(&file)?;
    Ok(ImageSample {
        pixels: preprocess_image(&raw, image_size, to_gray)?,
        attributes: AttributeTarget::new(
            entry.expression,
            entry.identity,
            entry.gender,
            manifest.n_identities(),
        )?,
        source_id: entry.image_path.clone(),
    })
}

/// One preprocessed sample per manifest row, in row order.
pub fn load_image_dataset(path: &Path, image_size: usize, to_gray: bool) -> Result<Vec<ImageSample>> {
    let manifest = read_manifest(path)?;
    manifest
        .entries
        .iter()
        .map(|e| load_entry_image(&manifest, e, image_size, to_gray))
        .collect()
}

/// Loads unique images (first-appearance order) and every fMRI record.
pub fn load_dataset(path: &Path, image_size: usize, to_gray: bool) -> Result<Dataset> {
    let manifest = read_manifest(path)?;
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut images = Vec::new();
    let mut splits = Vec::new();
    let mut records = Vec::new();
    for entry in &manifest.entries {
        let slot = match index.get(entry.image_path.as_str()) {
            Some(&i) => {
                if splits[i] != entry.split {
                    return Err(Error::Parse {
                        path: manifest.path.clone(),
                        line: entry.line,
                        message: format!("image {} listed under two splits", entry.image_path),
                    });
                }
                i
            }
            None => {
                images.push(load_entry_image(&manifest, entry, image_size, to_gray)?);
                splits.push(entry.split);
                index.insert(&entry.image_path, images.len() - 1);
                images.len() - 1
            }
        };
        if let (Some(fmri), Some(subject)) = (&entry.fmri_path, entry.subject_id) {
            let file = manifest.resolve(fmri);
            if !file.exists() {
                return Err(Error::Parse {
                    path: manifest.path.clone(),
                    line: entry.line,
                    message: format!("fMRI file {} does not exist", file.display()),
                });
            }
            let voxels = read_fmri_file(&file)?;
            records.push(FmriRecord::new(voxels, subject, images[slot].source_id.clone())?);
        }
    }
    Ok(Dataset {
        images,
        splits,
        records,
        n_identities: manifest.n_identities(),
    })
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes PNG images, binary fMRI vectors and `manifest.csv` under `dir`.
/// Returns the manifest path.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    let images_dir = dir.join("images");
    let fmri_dir = dir.join("fmri");
    for d in [&images_dir, &fmri_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Parse {
        path: manifest_path.clone(),
        line: 0,
        message: e.to_string(),
    };
    writer.write_record(MANIFEST_HEADER).map_err(csv_err)?;

    let mut rel_paths = Vec::with_capacity(dataset.images.len());
    for sample in &dataset.images {
        let rel = format!("images/{}.png", file_stem(&sample.source_id));
        grid_to_luma8(&sample.pixels).save(dir.join(&rel))?;
        rel_paths.push(rel);
    }
    let mut has_record = vec![false; dataset.images.len()];
    let mut rows: Vec<(usize, Option<(String, u32)>)> = Vec::new();
    for rec in &dataset.records {
        let img = dataset.image_index(&rec.stimulus_id).ok_or_else(|| {
            Error::InvalidInput(format!("record stimulus `{}` has no image", rec.stimulus_id))
        })?;
        let rel = format!("fmri/{}_s{}.f32", file_stem(&rec.stimulus_id), rec.subject_id);
        write_fmri_binary(&dir.join(&rel), &rec.voxels)?;
        has_record[img] = true;
        rows.push((img, Some((rel, rec.subject_id))));
    }
    for (i, seen) in has_record.iter().enumerate() {
        if !seen {
            rows.push((i, None));
        }
    }
    rows.sort_by_key(|(i, _)| *i);
    for (i, fmri) in rows {
        let a = &dataset.images[i].attributes;
        let (fmri_path, subject) = match fmri {
            Some((p, s)) => (p, s.to_string()),
            None => (String::new(), String::new()),
        };
        writer
            .write_record([
                rel_paths[i].as_str(),
                &a.expression.to_string(),
                &a.identity.to_string(),
                &a.gender.to_string(),
                &fmri_path,
                &subject,
                dataset.splits[i].as_str(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticSpec};
    use image::{GrayImage, Luma};

    fn write_png(dir: &Path, name: &str, value: u8) {
        GrayImage::from_pixel(8, 8, Luma([value])).save(dir.join(name)).unwrap();
    }

    #[test]
    fn rows_load_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for (n, v) in [("a.png", 0), ("b.png", 128), ("c.png", 255)] {
            write_png(dir.path(), n, v);
        }
        let manifest = dir.path().join("m.csv");
        std::fs::write(
            &manifest,
            "image_path,expression,identity,gender,fmri_path,subject_id,split\n\
             c.png,1,0,1,,,train\na.png,2,1,0,,,train\nb.png,0,1,1,,,eval\n",
        )
        .unwrap();
        let samples = load_image_dataset(&manifest, 8, true).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].source_id, "c.png");
        assert_eq!(samples[0].pixels.data[0], 1.0);
        assert_eq!(samples[1].pixels.data[0], -1.0);
        assert_eq!(samples[2].attributes.identity, 1);
    }

    #[test]
    fn empty_manifest_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.csv");
        std::fs::write(&manifest, "image_path,expression,identity,gender,fmri_path,subject_id,split\n").unwrap();
        assert!(load_image_dataset(&manifest, 8, true).unwrap().is_empty());
        std::fs::write(&manifest, "").unwrap();
        assert!(load_image_dataset(&manifest, 8, true).unwrap().is_empty());
    }

    #[test]
    fn missing_image_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 10);
        let manifest = dir.path().join("m.csv");
        std::fs::write(
            &manifest,
            "image_path,expression,identity,gender,fmri_path,subject_id,split\n\
             a.png,0,0,0,,,train\nmissing.png,0,0,0,,,train\n",
        )
        .unwrap();
        let err = load_image_dataset(&manifest, 8, true).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(err.contains("missing.png"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.csv");
        std::fs::write(
            &manifest,
            "image_path,expression,identity,gender,fmri_path,subject_id,split\n\
             a.png,0,0,0,,,train\na.png,x,0,0,,,train\n",
        )
        .unwrap();
        let err = read_manifest(&manifest).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");

        std::fs::write(
            &manifest,
            "image_path,expression,identity,gender,fmri_path,subject_id,split\na.png,9,0,0,,,train\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(&manifest).unwrap_err(), Error::Parse { line: 2, .. }));

        std::fs::write(&manifest, "path,label\na.png,0\n").unwrap();
        assert!(matches!(read_manifest(&manifest).unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn synthetic_dataset_round_trips_through_disk() {
        let spec = SyntheticSpec {
            n_identities: 2,
            n_expressions: 2,
            image_size: 16,
            n_repeats: 2,
            fmri_dim: 10,
            n_subjects: 2,
            noise_sigma: 0.1,
            seed: 11,
        };
        let data = generate_synthetic_dataset(&spec).unwrap().dataset;
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(&manifest, 16, true).unwrap();
        assert_eq!(back.images.len(), data.images.len());
        assert_eq!(back.splits, data.splits);
        assert_eq!(back.n_identities, data.n_identities);
        for (a, b) in data.images.iter().zip(&back.images) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.attributes, b.attributes);
        }
        assert_eq!(back.records.len(), data.records.len());
        for (a, b) in data.records.iter().zip(&back.records) {
            assert_eq!(a.voxels, b.voxels);
            assert_eq!(a.subject_id, b.subject_id);
        }
    }
}
