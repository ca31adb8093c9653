//! Prostate attention gate.
//!
//! The prostate probability plane is resampled to the resolution of a lesion
//! decoder block and multiplied into every feature channel. Resampling is an
//! explicit linear operator so the backward pass can apply its adjoint.

use crate::{Error, Result};

/// `channels` planes of `height x width`, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FeatureStack {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || values.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels}x{height}x{width} features",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue {
                index: i,
                value: values[i],
                what: "finite feature",
            });
        }
        Ok(FeatureStack {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Soft attention plane with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {height}x{width} attention map",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidValue {
                index: i,
                value: values[i],
                what: "attention weight in [0, 1]",
            });
        }
        Ok(AttentionMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Sparse linear map from an `in_h x in_w` plane to `out_h x out_w`.
///
/// Integer downsampling ratios use area averaging over each block; any other
/// ratio uses center-aligned bilinear interpolation. Each output row of the
/// operator has nonnegative weights summing to one, so [0, 1] maps into [0, 1].
#[derive(Debug, Clone)]
pub struct Resampler {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl Resampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 || out_h > in_h || out_w > in_w {
            return Err(Error::ShapeMismatch(format!(
                "cannot downsample {in_h}x{in_w} attention to {out_h}x{out_w}"
            )));
        }
        let mut taps = Vec::with_capacity(out_h * out_w);
        if in_h % out_h == 0 && in_w % out_w == 0 {
            let (ky, kx) = (in_h / out_h, in_w / out_w);
            let wgt = 1.0 / (ky * kx) as f64;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut t = Vec::with_capacity(ky * kx);
                    for y in oy * ky..(oy + 1) * ky {
                        for x in ox * kx..(ox + 1) * kx {
                            t.push((y * in_w + x, wgt));
                        }
                    }
                    taps.push(t);
                }
            }
        } else {
            let axis = |n_in: usize, n_out: usize| -> Vec<[(usize, f64); 2]> {
                let ratio = n_in as f64 / n_out as f64;
                (0..n_out)
                    .map(|j| {
                        let s = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                        let i0 = s.floor() as usize;
                        let i1 = (i0 + 1).min(n_in - 1);
                        let t = s - i0 as f64;
                        [(i0, 1.0 - t), (i1, t)]
                    })
                    .collect()
            };
            let ys = axis(in_h, out_h);
            let xs = axis(in_w, out_w);
            for yt in &ys {
                for xt in &xs {
                    let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
                    for &(y, wy) in yt {
                        for &(x, wx) in xt {
                            let w = wy * wx;
                            if w == 0.0 {
                                continue;
                            }
                            let idx = y * in_w + x;
                            match t.iter_mut().find(|(i, _)| *i == idx) {
                                Some(slot) => slot.1 += w,
                                None => t.push((idx, w)),
                            }
                        }
                    }
                    taps.push(t);
                }
            }
        }
        Ok(Resampler {
            in_len: in_h * in_w,
            taps,
        })
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        debug_assert_eq!(input.len(), self.in_len);
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * input[i]).sum())
            .collect()
    }

    /// Transpose of [`Resampler::apply`].
    pub fn adjoint(&self, output_grad: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.in_len];
        for (t, &go) in self.taps.iter().zip(output_grad) {
            for &(i, w) in t {
                g[i] += w * go;
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateGradients {
    pub d_features: FeatureStack,
    /// Gradient with respect to the full-resolution attention plane.
    pub d_attention: Vec<f64>,
}

fn gate_plane(f: &FeatureStack, a: &AttentionMap) -> Result<Vec<f64>> {
    let r = Resampler::new(a.height, a.width, f.height, f.width)?;
    Ok(r.apply(&a.values))
}

/// `out_c[x] = f_c[x] * resample(a)[x]` for every channel `c`.
pub fn attention_gate_forward(f: &FeatureStack, a: &AttentionMap) -> Result<FeatureStack> {
    let gate = gate_plane(f, a)?;
    let values = f
        .values
        .chunks(f.plane())
        .flat_map(|ch| ch.iter().zip(&gate).map(|(x, g)| x * g))
        .collect();
    Ok(FeatureStack {
        values,
        ..f.clone()
    })
}

pub fn attention_gate_backward(
    f: &FeatureStack,
    a: &AttentionMap,
    d_out: &FeatureStack,
) -> Result<GateGradients> {
    if (d_out.channels, d_out.height, d_out.width) != (f.channels, f.height, f.width) {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {}x{}x{} vs features {}x{}x{}",
            d_out.channels, d_out.height, d_out.width, f.channels, f.height, f.width
        )));
    }
    let r = Resampler::new(a.height, a.width, f.height, f.width)?;
    let gate = r.apply(&a.values);
    let plane = f.plane();

    let df: Vec<f64> = d_out
        .values
        .chunks(plane)
        .flat_map(|ch| ch.iter().zip(&gate).map(|(g, a)| g * a))
        .collect();
    let mut d_gate = vec![0.0; plane];
    for (fc, gc) in f.values.chunks(plane).zip(d_out.values.chunks(plane)) {
        for ((slot, x), g) in d_gate.iter_mut().zip(fc).zip(gc) {
            *slot += g * x;
        }
    }
    Ok(GateGradients {
        d_features: FeatureStack {
            values: df,
            ..f.clone()
        },
        d_attention: r.adjoint(&d_gate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureStack {
        FeatureStack::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn random_attention(rng: &mut ChaCha8Rng, h: usize, w: usize) -> AttentionMap {
        AttentionMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn ones_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_features(&mut rng, 3, 4, 4);
        let ones = AttentionMap::new(8, 8, vec![1.0; 64]).unwrap();
        assert_eq!(attention_gate_forward(&f, &ones).unwrap(), f);
        let zeros = AttentionMap::new(8, 8, vec![0.0; 64]).unwrap();
        assert!(attention_gate_forward(&f, &zeros).unwrap().values().iter().all(|&v| v == 0.0));

        let d = random_features(&mut rng, 3, 4, 4);
        let g = attention_gate_backward(&f, &ones, &d).unwrap();
        assert_eq!(g.d_features, d);
        let fz = FeatureStack::new(3, 4, 4, vec![0.0; 48]).unwrap();
        let g = attention_gate_backward(&fz, &ones, &d).unwrap();
        assert!(g.d_attention.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_loop_same_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_features(&mut rng, 4, 5, 7);
        let a = random_attention(&mut rng, 5, 7);
        let out = attention_gate_forward(&f, &a).unwrap();
        for c in 0..4 {
            for y in 0..5 {
                for x in 0..7 {
                    let i = c * 35 + y * 7 + x;
                    assert_eq!(out.values()[i], f.values()[i] * a.values()[y * 7 + x]);
                }
            }
        }
    }

    #[test]
    fn area_pooling_for_integer_ratio() {
        let a = AttentionMap::new(2, 4, vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.25, 0.75]).unwrap();
        let r = Resampler::new(2, 4, 1, 2).unwrap();
        assert_eq!(r.apply(a.values()), vec![0.5, 0.5]);
    }

    #[test]
    fn resampler_adjoint_identity() {
        // <R x, y> == <x, R^T y>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ih, iw, oh, ow) in &[(16, 16, 8, 8), (16, 16, 12, 10), (9, 7, 4, 5), (5, 5, 5, 5)] {
            let r = Resampler::new(ih, iw, oh, ow).unwrap();
            let x: Vec<f64> = (0..ih * iw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let lhs: f64 = r.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(r.adjoint(&y)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
            // rows are convex combinations
            let ones = r.apply(&vec![1.0; ih * iw]);
            assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn magnitude_never_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_features(&mut rng, 2, 6, 6);
        let a = random_attention(&mut rng, 13, 11);
        let out = attention_gate_forward(&f, &a).unwrap();
        for (o, x) in out.values().iter().zip(f.values()) {
            assert!(o.abs() <= x.abs() + 1e-15);
        }
    }

    #[test]
    fn shape_errors() {
        let f = FeatureStack::new(1, 8, 8, vec![0.0; 64]).unwrap();
        let a = AttentionMap::new(4, 4, vec![0.5; 16]).unwrap();
        assert!(attention_gate_forward(&f, &a).is_err());
        assert!(AttentionMap::new(2, 2, vec![1.5; 4]).is_err());
        let a = AttentionMap::new(8, 8, vec![0.5; 64]).unwrap();
        let d = FeatureStack::new(2, 8, 8, vec![0.0; 128]).unwrap();
        assert!(attention_gate_backward(&f, &a, &d).is_err());
    }
}
