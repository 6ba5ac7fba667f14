use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::path::Path;

/// A preprocessed voxel-feature vector for one viewed stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriRecord {
    pub voxels: Vec<f32>,
    pub subject_id: u32,
    pub stimulus_id: String,
}

impl FmriRecord {
    pub fn new(voxels: Vec<f32>, subject_id: u32, stimulus_id: impl Into<String>) -> Result<Self> {
        if let Some(v) = voxels.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite voxel value {v}")));
        }
        Ok(Self {
            voxels,
            subject_id,
            stimulus_id: stimulus_id.into(),
        })
    }
}

/// Stacks records into an n × L_max matrix, right-padding each row with zeros.
pub fn pad_fmri(records: &[FmriRecord]) -> Result<DMatrix<f64>> {
    let len = records
        .iter()
        .map(|r| r.voxels.len())
        .max()
        .ok_or_else(|| Error::InvalidInput("cannot pad an empty list of fMRI records".into()))?;
    pad_fmri_to(records, len)
}

/// Like [`pad_fmri`] but pads to a fixed length shared by a whole dataset.
pub fn pad_fmri_to(records: &[FmriRecord], len: usize) -> Result<DMatrix<f64>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot pad an empty list of fMRI records".into()));
    }
    let mut m = DMatrix::zeros(records.len(), len);
    for (i, rec) in records.iter().enumerate() {
        if rec.voxels.len() > len {
            return Err(Error::Shape(format!(
                "record for `{}` has {} voxels, more than the padding length {len}",
                rec.stimulus_id,
                rec.voxels.len()
            )));
        }
        for (j, &v) in rec.voxels.iter().enumerate() {
            m[(i, j)] = v as f64;
        }
    }
    Ok(m)
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".len");
    s.into()
}

/// Writes `voxels` as little-endian f32 plus a `<path>.len` sidecar holding the count.
pub fn write_fmri_binary(path: &Path, voxels: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar(path);
    std::fs::write(&side, format!("{}\n", voxels.len())).map_err(|e| Error::io(&side, e))
}

/// Reads a voxel vector: `.csv` files hold one comma-separated row, anything
/// else is little-endian f32 with a `.len` sidecar.
pub fn read_fmri_file(path: &Path) -> Result<Vec<f32>> {
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    let voxels = if is_csv {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        line.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse::<f32>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("bad voxel value `{}`: {e}", s.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let len: usize = text.trim().parse().map_err(|e| Error::Parse {
            path: side.clone(),
            line: 1,
            message: format!("bad length `{}`: {e}", text.trim()),
        })?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 4 * len {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: format!("expected {} bytes for {len} voxels, found {}", 4 * len, bytes.len()),
            });
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    if let Some(v) = voxels.iter().find(|v| !v.is_finite()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("non-finite voxel value {v}"),
        });
    }
    Ok(voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(n: usize, fill: f32) -> FmriRecord {
        FmriRecord::new(vec![fill; n], 1, "s").unwrap()
    }

    #[test]
    fn pads_to_longest_record() {
        let m = pad_fmri(&[rec(100, 1.0), rec(120, 2.0)]).unwrap();
        assert_eq!(m.shape(), (2, 120));
        assert!((100..120).all(|j| m[(0, j)] == 0.0));
        assert!((0..100).all(|j| m[(0, j)] == 1.0));
        assert!((0..120).all(|j| m[(1, j)] == 2.0));
    }

    #[test]
    fn equal_lengths_stack_unchanged() {
        let a = FmriRecord::new(vec![1.0, 2.0, 3.0], 1, "a").unwrap();
        let b = FmriRecord::new(vec![4.0, 5.0, 6.0], 2, "b").unwrap();
        let m = pad_fmri(&[a, b]).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let single = pad_fmri(&[rec(5, 3.0)]).unwrap();
        assert_eq!(single, DMatrix::from_element(1, 5, 3.0));
    }

    #[test]
    fn empty_and_overlong_inputs_fail() {
        assert!(pad_fmri(&[]).is_err());
        assert!(pad_fmri_to(&[rec(6, 0.0)], 5).is_err());
        assert!(FmriRecord::new(vec![f32::NAN], 0, "x").is_err());
    }

    #[test]
    fn binary_and_csv_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("a.f32");
        let voxels = vec![0.5f32, -1.25, 3.0e-3];
        write_fmri_binary(&bin, &voxels).unwrap();
        assert_eq!(read_fmri_file(&bin).unwrap(), voxels);

        let csv = dir.path().join("b.csv");
        std::fs::write(&csv, "0.5,-1.25,0.003\n").unwrap();
        assert_eq!(read_fmri_file(&csv).unwrap(), voxels);

        std::fs::write(dir.path().join("a.f32.len"), "4\n").unwrap();
        assert!(read_fmri_file(&bin).is_err());
    }
}
