//! In-plane resampling, center cropping and min-max intensity normalization.

use super::{Volume, VolumeKind};
use crate::{Error, Result};

/// Tolerance when comparing the requested and source slice thickness.
const Z_SPACING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizeScope {
    /// One min/max over the whole volume.
    #[default]
    Volume,
    /// Independent min/max per axial slice.
    Slice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub target_spacing: [f64; 3],
    /// In-plane crop size (width along x, height along y) in voxels.
    pub crop: [usize; 2],
    pub normalize: NormalizeScope,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            target_spacing: [1.0, 1.0, 3.0],
            crop: [96, 96],
            normalize: NormalizeScope::Volume,
        }
    }
}

/// Resample in-plane to `target_spacing`, crop `crop` voxels around the
/// image center and rescale intensities to [0, 1].
pub fn preprocess(v: &Volume, target_spacing: [f64; 3], crop: [usize; 2]) -> Result<Volume> {
    preprocess_with(
        v,
        &PreprocessOptions {
            target_spacing,
            crop,
            normalize: NormalizeScope::Volume,
        },
    )
}

pub fn preprocess_with(v: &Volume, opts: &PreprocessOptions) -> Result<Volume> {
    if v.kind() != VolumeKind::Intensity {
        return Err(Error::InvalidArgument(format!(
            "preprocess expects an intensity volume, got {:?}",
            v.kind()
        )));
    }
    if v.is_empty() {
        return Err(Error::InvalidArgument("empty volume".into()));
    }
    let sz = v.spacing_mm()[2];
    if (opts.target_spacing[2] - sz).abs() > Z_SPACING_TOL {
        return Err(Error::InvalidArgument(format!(
            "target z spacing {} differs from source {}; only in-plane resampling is supported",
            opts.target_spacing[2], sz
        )));
    }
    let resampled = resample_in_plane(v, [opts.target_spacing[0], opts.target_spacing[1]])?;
    let cropped = center_crop(&resampled, opts.crop)?;
    let normalized = normalize_min_max(&cropped, opts.normalize);
    // pin the z spacing to the requested value
    Volume::new(
        normalized.dims(),
        opts.target_spacing,
        normalized.into_values(),
        VolumeKind::Intensity,
    )
}

/// Continuous source coordinate of target voxel `j`, with both grids sharing
/// their physical center.
fn source_coord(j: usize, n_src: usize, n_dst: usize, ratio: f64) -> f64 {
    ((j as f64 + 0.5) - n_dst as f64 / 2.0) * ratio + n_src as f64 / 2.0 - 0.5
}

fn resampled_len(n: usize, src_spacing: f64, dst_spacing: f64) -> usize {
    ((n as f64 * src_spacing / dst_spacing).round() as usize).max(1)
}

/// Resamples every axial slice to the in-plane spacing `target_xy`.
/// Label volumes use nearest-neighbour lookup, everything else bilinear
/// interpolation.
pub fn resample_in_plane(v: &Volume, target_xy: [f64; 2]) -> Result<Volume> {
    if target_xy.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::InvalidArgument(format!("bad target spacing {target_xy:?}")));
    }
    let [nx, ny, nz] = v.dims();
    let [sx, sy, sz] = v.spacing_mm();
    let (mx, my) = (resampled_len(nx, sx, target_xy[0]), resampled_len(ny, sy, target_xy[1]));
    let (rx, ry) = (target_xy[0] / sx, target_xy[1] / sy);

    let xs: Vec<f64> = (0..mx)
        .map(|j| source_coord(j, nx, mx, rx).clamp(0.0, (nx - 1) as f64))
        .collect();
    let ys: Vec<f64> = (0..my)
        .map(|j| source_coord(j, ny, my, ry).clamp(0.0, (ny - 1) as f64))
        .collect();
    let nearest = v.kind() == VolumeKind::Label;
    let src = v.values();

    let mut out = Vec::with_capacity(mx * my * nz);
    for z in 0..nz {
        let plane = &src[z * nx * ny..(z + 1) * nx * ny];
        for &fy in &ys {
            for &fx in &xs {
                let value = if nearest {
                    let (ix, iy) = (fx.round() as usize, fy.round() as usize);
                    plane[ix.min(nx - 1) + nx * iy.min(ny - 1)]
                } else {
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
                    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                    let at = |x: usize, y: usize| plane[x + nx * y] as f64;
                    let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
                    let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
                    (top * (1.0 - ty) + bottom * ty) as f32
                };
                out.push(value);
            }
        }
    }
    Volume::new([mx, my, nz], [target_xy[0], target_xy[1], sz], out, v.kind())
}

/// Crops `[w, h]` voxels in-plane. The offset along each axis is
/// `floor((extent - crop) / 2)`.
pub fn center_crop(v: &Volume, crop: [usize; 2]) -> Result<Volume> {
    let [nx, ny, nz] = v.dims();
    let [w, h] = crop;
    if w == 0 || h == 0 || w > nx || h > ny {
        return Err(Error::InvalidArgument(format!(
            "crop {w}x{h} does not fit in-plane extent {nx}x{ny}"
        )));
    }
    let (ox, oy) = ((nx - w) / 2, (ny - h) / 2);
    let src = v.values();
    let mut out = Vec::with_capacity(w * h * nz);
    for z in 0..nz {
        for y in oy..oy + h {
            let row = nx * (y + ny * z);
            out.extend_from_slice(&src[row + ox..row + ox + w]);
        }
    }
    Volume::new([w, h, nz], v.spacing_mm(), out, v.kind())
}

/// Linear map `min -> 0`, `max -> 1`. Constant regions map to 0.
pub fn normalize_min_max(v: &Volume, scope: NormalizeScope) -> Volume {
    let [nx, ny, _] = v.dims();
    let chunk = match scope {
        NormalizeScope::Volume => v.len(),
        NormalizeScope::Slice => nx * ny,
    };
    let mut out = Vec::with_capacity(v.len());
    for part in v.values().chunks(chunk) {
        let (lo, hi) = part
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let range = hi as f64 - lo as f64;
        if range > 0.0 {
            out.extend(part.iter().map(|&x| ((x as f64 - lo as f64) / range) as f32));
        } else {
            out.extend(std::iter::repeat(0.0f32).take(part.len()));
        }
    }
    Volume::new(v.dims(), v.spacing_mm(), out, VolumeKind::Intensity)
        .expect("normalized values are finite and the grid is unchanged")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intensity(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut values = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, spacing, values, VolumeKind::Intensity).unwrap()
    }

    #[test]
    fn clinical_slice_to_training_grid() {
        let v = intensity([256, 256, 1], [0.78, 0.78, 3.0], |x, y, _| (x + 2 * y) as f32);
        let out = preprocess(&v, [1.0, 1.0, 3.0], [96, 96]).unwrap();
        assert_eq!(out.dims(), [96, 96, 1]);
        assert_eq!(out.spacing_mm(), [1.0, 1.0, 3.0]);
        let (lo, hi) = out
            .values()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert_eq!((lo, hi), (0.0, 1.0));
        // resampled extent is round(256 * 0.78) = 200, so the crop starts at 52
        let r = resample_in_plane(&v, [1.0, 1.0]).unwrap();
        assert_eq!(r.dims(), [200, 200, 1]);
    }

    #[test]
    fn identity_grid_is_untouched() {
        let v = intensity([96, 96, 2], [1.0, 1.0, 3.0], |x, y, z| {
            ((x * 7 + y * 3 + z * 11) % 97) as f32 / 96.0
        });
        let r = resample_in_plane(&v, [1.0, 1.0]).unwrap();
        for (a, b) in r.values().iter().zip(v.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let out = preprocess(&v, [1.0, 1.0, 3.0], [96, 96]).unwrap();
        for (a, b) in out.values().iter().zip(v.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn ramp_normalization_matches_closed_form() {
        let v = intensity([11, 1, 1], [1.0; 3], |x, _, _| 10.0 + x as f32);
        let n = normalize_min_max(&v, NormalizeScope::Volume);
        for (x, &got) in n.values().iter().enumerate() {
            let raw = 10.0 + x as f64;
            let want = (raw - 10.0) / (20.0 - 10.0);
            assert_eq!(got, want as f32);
        }
        assert_eq!(n.values()[5], 0.5);
    }

    #[test]
    fn constant_maps_to_zero() {
        let v = intensity([4, 4, 2], [1.0; 3], |_, _, _| 7.0);
        assert!(normalize_min_max(&v, NormalizeScope::Volume).values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn per_slice_scope() {
        let v = intensity([2, 1, 2], [1.0; 3], |x, _, z| (x + 10 * z) as f32 * if z == 1 { 3.0 } else { 1.0 });
        let n = normalize_min_max(&v, NormalizeScope::Slice);
        assert_eq!(n.values(), &[0.0, 1.0, 0.0, 1.0]);
        let n = normalize_min_max(&v, NormalizeScope::Volume);
        assert_eq!(n.values()[0], 0.0);
        assert_eq!(n.values()[3], 1.0);
    }

    #[test]
    fn crop_offsets_floor() {
        let v = intensity([5, 4, 1], [1.0; 3], |x, y, _| (x + 10 * y) as f32);
        let c = center_crop(&v, [2, 2]).unwrap();
        // offsets floor(3/2)=1 and floor(2/2)=1
        assert_eq!(c.values(), &[11.0, 12.0, 21.0, 22.0]);
        assert!(center_crop(&v, [6, 2]).is_err());
    }

    #[test]
    fn errors() {
        let v = intensity([8, 8, 1], [1.0, 1.0, 3.0], |x, _, _| x as f32);
        assert!(preprocess(&v, [1.0, 1.0, 1.0], [4, 4]).is_err());
        assert!(preprocess(&v, [1.0, 1.0, 3.0], [9, 4]).is_err());
        let lab = Volume::from_labels([1, 1, 1], [1.0; 3], &[1]).unwrap();
        assert!(preprocess(&lab, [1.0; 3], [1, 1]).is_err());
    }

    #[test]
    fn labels_use_nearest_neighbour() {
        let labels: Vec<u8> = (0..16).map(|i| (i % 6) as u8).collect();
        let v = Volume::from_labels([4, 4, 1], [1.0, 1.0, 3.0], &labels).unwrap();
        let r = resample_in_plane(&v, [0.5, 0.5]).unwrap();
        assert_eq!(r.dims(), [8, 8, 1]);
        assert!(r.values().iter().all(|x| x.fract() == 0.0 && labels.contains(&(*x as u8))));
    }
}
