//! `<name>.vol.json` header + `<name>.vol.raw` little-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ProbStack, Volume, VolumeKind};
use crate::grade::NUM_CLASSES;
use crate::{Error, Result};

const HEADER_SUFFIX: &str = ".vol.json";
const RAW_SUFFIX: &str = ".vol.raw";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub kind: VolumeKind,
    /// Payload file name, relative to the header's directory.
    pub data: String,
}

/// Normalizes `foo`, `foo.vol.json` or `foo.vol.raw` to the header path.
fn header_path(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    if s.ends_with(HEADER_SUFFIX) {
        path.to_path_buf()
    } else if let Some(stem) = s.strip_suffix(RAW_SUFFIX) {
        PathBuf::from(format!("{stem}{HEADER_SUFFIX}"))
    } else {
        PathBuf::from(format!("{s}{HEADER_SUFFIX}"))
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let hpath = header_path(path.as_ref());
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(&hpath, e))?;
    let dir = hpath.parent().unwrap_or_else(|| Path::new("."));
    let dpath = dir.join(&header.data);
    let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;

    let n = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::ShapeMismatch(format!("dims {:?} overflow", header.dims)))?;
    let expected = n * header.dtype.width();
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let values: Vec<f32> = match header.dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    Volume::new(header.dims, header.spacing_mm, values, header.kind)
}

/// Writes `v` next to `path`. Label volumes are stored as `u8`, everything
/// else as little-endian `f32`.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let hpath = header_path(path.as_ref());
    let fname = hpath
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidArgument(format!("no file name in {}", hpath.display())))?;
    let stem = fname.strip_suffix(HEADER_SUFFIX).unwrap_or(&fname);
    let data_name = format!("{stem}{RAW_SUFFIX}");
    let dpath = hpath.with_file_name(&data_name);

    let dtype = match v.kind() {
        VolumeKind::Label => Dtype::U8,
        _ => Dtype::F32,
    };
    let bytes: Vec<u8> = match dtype {
        Dtype::U8 => v.values().iter().map(|&x| x as u8).collect(),
        Dtype::F32 => v.values().iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    let header = VolumeHeader {
        dims: v.dims(),
        spacing_mm: v.spacing_mm(),
        dtype,
        kind: v.kind(),
        data: data_name,
    };
    let json = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&hpath, e))?;
    fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))?;
    fs::write(&hpath, json + "\n").map_err(|e| Error::io(&hpath, e))?;
    Ok(())
}

/// Reads `prob_0` .. `prob_5` from `dir`.
pub fn read_prob_stack(dir: impl AsRef<Path>) -> Result<ProbStack> {
    let dir = dir.as_ref();
    let channels = (0..NUM_CLASSES)
        .map(|c| read_volume(dir.join(format!("prob_{c}"))))
        .collect::<Result<Vec<_>>>()?;
    ProbStack::new(channels)
}

pub fn write_prob_stack(p: &ProbStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (c, ch) in p.channels().iter().enumerate() {
        write_volume(ch, dir.join(format!("prob_{c}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(dir: &Path, name: &str, header: &VolumeHeader, bytes: &[u8]) -> PathBuf {
        let h = dir.join(format!("{name}.vol.json"));
        fs::write(&h, serde_json::to_string(header).unwrap()).unwrap();
        fs::write(dir.join(&header.data), bytes).unwrap();
        h
    }

    #[test]
    fn u8_bytes_map_x_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let header = VolumeHeader {
            dims: [2, 2, 1],
            spacing_mm: [1.0, 1.0, 3.0],
            dtype: Dtype::U8,
            kind: VolumeKind::Label,
            data: "a.vol.raw".into(),
        };
        let h = write_raw(dir.path(), "a", &header, &[0, 1, 2, 3]);
        let v = read_volume(&h).unwrap();
        assert_eq!(v.values(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(v.get(1, 0, 0), 1.0);
        assert_eq!(v.get(0, 1, 0), 2.0);
    }

    #[test]
    fn full_size_f32_payload_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let n = 96 * 96 * 24;
        let header = VolumeHeader {
            dims: [96, 96, 24],
            spacing_mm: [1.0, 1.0, 3.0],
            dtype: Dtype::F32,
            kind: VolumeKind::Intensity,
            data: "img.vol.raw".into(),
        };
        let bytes: Vec<u8> = (0..n).flat_map(|i| (i as f32 * 0.5).to_le_bytes()).collect();
        let h = write_raw(dir.path(), "img", &header, &bytes);
        let v = read_volume(&h).unwrap();
        assert_eq!(v.len(), n);
        assert_eq!(v.values()[7], 3.5);
    }

    #[test]
    fn length_mismatch_and_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let header = VolumeHeader {
            dims: [2, 2, 2],
            spacing_mm: [1.0; 3],
            dtype: Dtype::U8,
            kind: VolumeKind::Label,
            data: "b.vol.raw".into(),
        };
        let h = write_raw(dir.path(), "b", &header, &[0; 7]);
        assert!(matches!(
            read_volume(&h),
            Err(Error::LengthMismatch { expected: 8, found: 7 })
        ));
        let h = write_raw(dir.path(), "b", &header, &[0, 0, 0, 0, 0, 0, 0, 9]);
        assert!(matches!(read_volume(&h), Err(Error::InvalidLabel { index: 7, .. })));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = VolumeHeader {
            dims: [1, 1, 1],
            spacing_mm: [1.0; 3],
            dtype: Dtype::F32,
            kind: VolumeKind::Intensity,
            data: "c.vol.raw".into(),
        };
        let h = write_raw(dir.path(), "c", &header, &f32::INFINITY.to_le_bytes());
        assert!(read_volume(&h).is_err());
    }

    #[test]
    fn missing_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_volume(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn on_disk_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let lab = Volume::from_labels([1, 1, 1], [1.0; 3], &[5]).unwrap();
        write_volume(&lab, dir.path().join("lab.vol.json")).unwrap();
        assert_eq!(fs::read(dir.path().join("lab.vol.raw")).unwrap(), vec![5u8]);

        let p = Volume::new([1, 1, 1], [1.0; 3], vec![0.5], VolumeKind::Probability).unwrap();
        write_volume(&p, dir.path().join("p")).unwrap();
        assert_eq!(
            fs::read(dir.path().join("p.vol.raw")).unwrap(),
            0x3F00_0000u32.to_le_bytes().to_vec()
        );
        let text = fs::read_to_string(dir.path().join("p.vol.json")).unwrap();
        let header: VolumeHeader = serde_json::from_str(&text).unwrap();
        assert_eq!(header.dtype, Dtype::F32);
        assert_eq!(header.kind, VolumeKind::Probability);
        assert_eq!(header.data, "p.vol.raw");
    }

    #[test]
    fn unwritable_path() {
        let v = Volume::from_labels([1, 1, 1], [1.0; 3], &[1]).unwrap();
        assert!(write_volume(&v, "/nonexistent-dir/x/y.vol.json").is_err());
    }
}
