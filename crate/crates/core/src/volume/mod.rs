//! Dense 3D grids with physical voxel spacing.
//!
//! Values are stored x-fastest, z-slowest: the linear index of voxel
//! `(x, y, z)` is `x + nx * (y + ny * z)`.

mod io;
mod preprocess;

use serde::{Deserialize, Serialize};

pub use io::{read_prob_stack, read_volume, write_prob_stack, write_volume, Dtype, VolumeHeader};
pub use preprocess::{
    center_crop, normalize_min_max, preprocess, preprocess_with, resample_in_plane, NormalizeScope,
    PreprocessOptions,
};

use crate::grade::NUM_CLASSES;
use crate::{Error, Result};

/// Tolerance on the per-voxel channel sum of a [`ProbStack`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VolumeKind {
    #[serde(rename = "intensity")]
    Intensity,
    #[serde(rename = "label")]
    Label,
    #[serde(rename = "probability-channel")]
    Probability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    values: Vec<f32>,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing_mm: [f64; 3],
        values: Vec<f32>,
        kind: VolumeKind,
    ) -> Result<Self> {
        check_grid(dims, spacing_mm)?;
        let expected = dims[0] * dims[1] * dims[2];
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} need {} values, got {}",
                dims,
                expected,
                values.len()
            )));
        }
        validate_values(&values, kind)?;
        Ok(Volume {
            dims,
            spacing_mm,
            values,
            kind,
        })
    }

    pub fn filled(dims: [usize; 3], spacing_mm: [f64; 3], value: f32, kind: VolumeKind) -> Result<Self> {
        check_grid(dims, spacing_mm)?;
        let n = dims[0] * dims[1] * dims[2];
        Self::new(dims, spacing_mm, vec![value; n], kind)
    }

    /// Label volume from class codes.
    pub fn from_labels(dims: [usize; 3], spacing_mm: [f64; 3], labels: &[u8]) -> Result<Self> {
        let values = labels.iter().map(|&l| l as f32).collect();
        Self::new(dims, spacing_mm, values, VolumeKind::Label)
    }

    /// Binary (0/1) label volume from a boolean mask.
    pub fn from_mask(dims: [usize; 3], spacing_mm: [f64; 3], mask: &[bool]) -> Result<Self> {
        let values = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Self::new(dims, spacing_mm, values, VolumeKind::Label)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        voxel_volume_mm3(self.spacing_mm)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        coords_of(self.dims, index)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a])
    }

    /// Class code at a linear index. Only meaningful for label volumes.
    pub fn label_at(&self, index: usize) -> u8 {
        self.values[index] as u8
    }

    /// Foreground mask: every nonzero voxel.
    pub fn nonzero_mask(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v != 0.0).collect()
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing_mm == other.spacing_mm
    }

    pub(crate) fn ensure_same_grid(&self, other: &Volume, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: grid {:?}@{:?} vs {:?}@{:?}",
                self.dims, self.spacing_mm, other.dims, other.spacing_mm
            )))
        }
    }
}

pub fn voxel_volume_mm3(spacing_mm: [f64; 3]) -> f64 {
    spacing_mm[0] * spacing_mm[1] * spacing_mm[2]
}

pub fn coords_of(dims: [usize; 3], index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let rest = index / dims[0];
    [x, rest % dims[1], rest / dims[1]]
}

fn check_grid(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::ShapeMismatch(format!("dims {dims:?} must all be >= 1")));
    }
    if spacing_mm.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::ShapeMismatch(format!(
            "spacing {spacing_mm:?} must be finite and > 0"
        )));
    }
    Ok(())
}

fn validate_values(values: &[f32], kind: VolumeKind) -> Result<()> {
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidValue {
                index,
                value: v as f64,
                what: "finite value",
            });
        }
        match kind {
            VolumeKind::Label if !(v.fract() == 0.0 && (0.0..=5.0).contains(&v)) => {
                return Err(Error::InvalidLabel { index, value: v });
            }
            VolumeKind::Probability if !(0.0..=1.0).contains(&v) => {
                return Err(Error::InvalidValue {
                    index,
                    value: v as f64,
                    what: "probability",
                });
            }
            _ => {}
        }
    }
    Ok(())
}

/// Softmax output: six probability channels ordered as the label codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbStack {
    channels: Vec<Volume>,
}

impl ProbStack {
    pub fn new(channels: Vec<Volume>) -> Result<Self> {
        if channels.len() != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "probability stack needs {NUM_CLASSES} channels, got {}",
                channels.len()
            )));
        }
        for (c, ch) in channels.iter().enumerate() {
            if ch.kind() != VolumeKind::Probability {
                return Err(Error::InvalidArgument(format!(
                    "channel {c} has kind {:?}, expected probability",
                    ch.kind()
                )));
            }
            channels[0].ensure_same_grid(ch, "probability channels")?;
        }
        let n = channels[0].len();
        for i in 0..n {
            let sum: f64 = channels.iter().map(|ch| ch.values[i] as f64).sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::InvalidValue {
                    index: i,
                    value: sum,
                    what: "probability simplex (channel sum)",
                });
            }
        }
        Ok(ProbStack { channels })
    }

    /// Builds a stack from per-voxel class probability vectors.
    pub fn from_voxels(dims: [usize; 3], spacing_mm: [f64; 3], probs: &[[f32; NUM_CLASSES]]) -> Result<Self> {
        let channels = (0..NUM_CLASSES)
            .map(|c| {
                let values = probs.iter().map(|p| p[c]).collect();
                Volume::new(dims, spacing_mm, values, VolumeKind::Probability)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(channels)
    }

    pub fn channel(&self, class: usize) -> &Volume {
        &self.channels[class]
    }

    pub fn channels(&self) -> &[Volume] {
        &self.channels
    }

    pub fn prob(&self, index: usize, class: usize) -> f32 {
        self.channels[class].values[index]
    }

    pub fn dims(&self) -> [usize; 3] {
        self.channels[0].dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.channels[0].spacing_mm
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels[0].is_empty()
    }

    pub fn grid(&self) -> &Volume {
        &self.channels[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zone {
    #[serde(rename = "PZ")]
    Pz,
    #[serde(rename = "TZ")]
    Tz,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Zone {
    pub fn name(self) -> &'static str {
        match self {
            Zone::Pz => "PZ",
            Zone::Tz => "TZ",
            Zone::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Zone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pz" => Ok(Zone::Pz),
            "tz" => Ok(Zone::Tz),
            "" | "unknown" | "none" | "-" => Ok(Zone::Unknown),
            other => Err(Error::InvalidArgument(format!("unknown zone '{other}'"))),
        }
    }
}

/// Peripheral and transition zone masks of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoneMask {
    pz: Volume,
    tz: Volume,
}

impl ZoneMask {
    pub fn new(pz: Volume, tz: Volume) -> Result<Self> {
        pz.ensure_same_grid(&tz, "zone masks")?;
        for (name, m) in [("pz", &pz), ("tz", &tz)] {
            if let Some(i) = m.values.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidValue {
                    index: i,
                    value: m.values[i] as f64,
                    what: if name == "pz" { "binary PZ mask value" } else { "binary TZ mask value" },
                });
            }
        }
        if let Some(i) = (0..pz.len()).find(|&i| pz.values[i] != 0.0 && tz.values[i] != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "PZ and TZ masks overlap at voxel {i}"
            )));
        }
        Ok(ZoneMask { pz, tz })
    }

    pub fn pz(&self) -> &Volume {
        &self.pz
    }

    pub fn tz(&self) -> &Volume {
        &self.tz
    }

    pub fn zone_at(&self, index: usize) -> Zone {
        if self.pz.values[index] != 0.0 {
            Zone::Pz
        } else if self.tz.values[index] != 0.0 {
            Zone::Tz
        } else {
            Zone::Unknown
        }
    }

    /// Zone of a voxel set by majority vote between PZ and TZ voxels; ties go
    /// to PZ, and a set touching neither zone is `Unknown`.
    pub fn zone_of(&self, voxels: &[usize]) -> Zone {
        let (mut pz, mut tz) = (0usize, 0usize);
        for &v in voxels {
            match self.zone_at(v) {
                Zone::Pz => pz += 1,
                Zone::Tz => tz += 1,
                Zone::Unknown => {}
            }
        }
        if pz == 0 && tz == 0 {
            Zone::Unknown
        } else if pz >= tz {
            Zone::Pz
        } else {
            Zone::Tz
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(Volume::new([0, 1, 1], [1.0; 3], vec![], VolumeKind::Intensity).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0], VolumeKind::Intensity).is_err());
        assert!(Volume::new([2, 2, 2], [1.0; 3], vec![0.0; 7], VolumeKind::Intensity).is_err());
    }

    #[test]
    fn label_and_probability_ranges() {
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![6.0], VolumeKind::Label).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![1.5], VolumeKind::Label).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![1.5], VolumeKind::Probability).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![f32::NAN], VolumeKind::Intensity).is_err());
        assert!(Volume::new([1, 1, 1], [1.0; 3], vec![5.0], VolumeKind::Label).is_ok());
    }

    #[test]
    fn voxel_volume_of_default_grid() {
        let v = Volume::filled([4, 4, 4], [1.0, 1.0, 3.0], 0.0, VolumeKind::Label).unwrap();
        assert_eq!(v.voxel_volume_mm3(), 3.0);
        assert_eq!(15.0 * v.voxel_volume_mm3(), 45.0);
    }

    #[test]
    fn index_round_trip() {
        let v = Volume::filled([3, 4, 5], [1.0; 3], 0.0, VolumeKind::Intensity).unwrap();
        for i in 0..v.len() {
            let [x, y, z] = v.coords(i);
            assert_eq!(v.index(x, y, z), i);
        }
        assert_eq!(v.index(1, 0, 0), 1);
        assert_eq!(v.index(0, 1, 0), 3);
        assert_eq!(v.index(0, 0, 1), 12);
    }

    #[test]
    fn prob_stack_checks_simplex() {
        let ok = [[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]];
        assert!(ProbStack::from_voxels([1, 1, 1], [1.0; 3], &ok).is_ok());
        let bad = [[0.5, 0.4, 0.0, 0.0, 0.0, 0.0]];
        assert!(ProbStack::from_voxels([1, 1, 1], [1.0; 3], &bad).is_err());
    }

    #[test]
    fn zone_masks_must_be_disjoint() {
        let pz = Volume::from_mask([2, 1, 1], [1.0; 3], &[true, false]).unwrap();
        let tz = Volume::from_mask([2, 1, 1], [1.0; 3], &[true, true]).unwrap();
        assert!(ZoneMask::new(pz.clone(), tz).is_err());
        let tz = Volume::from_mask([2, 1, 1], [1.0; 3], &[false, true]).unwrap();
        let zm = ZoneMask::new(pz, tz).unwrap();
        assert_eq!(zm.zone_at(0), Zone::Pz);
        assert_eq!(zm.zone_at(1), Zone::Tz);
        assert_eq!(zm.zone_of(&[0, 1]), Zone::Pz);
        assert_eq!(zm.zone_of(&[1]), Zone::Tz);
    }
}
