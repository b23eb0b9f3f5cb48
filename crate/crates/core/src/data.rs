//! Synthetic toy dataset (smooth Gaussian blobs with band-correlated
//! spectra) and dihedral data augmentation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::physics::{CodedMask, SpectralCube};
use crate::rng::CounterRng;

/// Deterministically generated fixture scenes with a train/held-out split.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub seed: u64,
    pub train: Vec<SpectralCube>,
    pub holdout: Vec<SpectralCube>,
}

/// Generate `n_train + n_holdout` scenes of smooth blobs, values in [0, 1],
/// bitwise reproducible under the seed.
pub fn generate_toy_dataset(
    seed: u64,
    n_train: usize,
    n_holdout: usize,
    height: usize,
    width: usize,
    bands: usize,
) -> Result<ToyDataset> {
    if height % 4 != 0 || width % 4 != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "toy scenes must have extents divisible by 4, got {height}x{width}"
        )));
    }
    let mut scenes = Vec::with_capacity(n_train + n_holdout);
    for scene_idx in 0..n_train + n_holdout {
        let mut rng = CounterRng::new(seed, 0x544F59 + scene_idx as u64);
        scenes.push(toy_scene(&mut rng, height, width, bands)?);
    }
    let holdout = scenes.split_off(n_train);
    Ok(ToyDataset { seed, train: scenes, holdout })
}

fn toy_scene(rng: &mut CounterRng, height: usize, width: usize, bands: usize) -> Result<SpectralCube> {
    let n_blobs = 3 + rng.below(4) as usize;
    let mut data = vec![0.0f64; height * width * bands];
    for _ in 0..n_blobs {
        let ch = rng.uniform_in(0.0, height as f64);
        let cw = rng.uniform_in(0.0, width as f64);
        let sigma = rng.uniform_in(height as f64 / 8.0, height as f64 / 3.0);
        let amp = rng.uniform_in(0.3, 1.0);
        // Smooth spectrum: wide Gaussian over the band index, so adjacent
        // bands stay strongly correlated.
        let band_center = rng.uniform_in(0.0, bands as f64);
        let band_width = rng.uniform_in(bands as f64 / 2.0, bands as f64);
        for b in 0..bands {
            let ds = (b as f64 - band_center) / band_width;
            let spectral = libm::exp(-0.5 * ds * ds);
            for h in 0..height {
                for w in 0..width {
                    let dh = (h as f64 - ch) / sigma;
                    let dw = (w as f64 - cw) / sigma;
                    data[(b * height + h) * width + w] +=
                        amp * spectral * libm::exp(-0.5 * (dh * dh + dw * dw));
                }
            }
        }
    }
    let peak = data.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for v in data.iter_mut() {
            *v /= peak;
        }
    }
    SpectralCube::new(height, width, bands, SpectralCube::default_wavelengths(bands), data)
}

/// The eight dihedral transforms of a square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dihedral {
    Identity,
    FlipH,
    FlipV,
    Rot90,
    Rot180,
    Rot270,
    Rot90FlipH,
    Rot270FlipH,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::FlipH,
        Dihedral::FlipV,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::Rot90FlipH,
        Dihedral::Rot270FlipH,
    ];

    pub fn sample(rng: &mut CounterRng) -> Dihedral {
        Dihedral::ALL[rng.below(8) as usize]
    }

    /// Source index `(h, w)` for destination `(i, j)` on an `n x n` plane.
    fn source(&self, i: usize, j: usize, n: usize) -> (usize, usize) {
        let m = n - 1;
        match self {
            Dihedral::Identity => (i, j),
            Dihedral::FlipH => (i, m - j),
            Dihedral::FlipV => (m - i, j),
            Dihedral::Rot90 => (j, m - i),
            Dihedral::Rot180 => (m - i, m - j),
            Dihedral::Rot270 => (m - j, i),
            Dihedral::Rot90FlipH => (j, i),
            Dihedral::Rot270FlipH => (m - j, m - i),
        }
    }

    pub fn apply_plane(&self, plane: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let (h, w) = self.source(i, j, n);
                out[i * n + j] = plane[h * n + w];
            }
        }
        out
    }
}

/// Apply one dihedral transform to every band of a square cube.
pub fn transform_cube(cube: &SpectralCube, t: Dihedral) -> Result<SpectralCube> {
    if cube.height != cube.width && t != Dihedral::Identity {
        return Err(CoreError::InvalidArgument(format!(
            "rotation/flip requires a square patch, got {}x{}",
            cube.height, cube.width
        )));
    }
    let n = cube.height;
    let mut data = Vec::with_capacity(cube.data().len());
    for b in 0..cube.bands {
        let plane = &cube.data()[b * n * n..(b + 1) * n * n];
        data.extend(t.apply_plane(plane, n));
    }
    SpectralCube::new(n, n, cube.bands, cube.wavelengths.clone(), data)
}

pub fn transform_mask(mask: &CodedMask, t: Dihedral) -> Result<CodedMask> {
    if mask.height != mask.width && t != Dihedral::Identity {
        return Err(CoreError::InvalidArgument(format!(
            "rotation/flip requires a square mask, got {}x{}",
            mask.height, mask.width
        )));
    }
    CodedMask::new(mask.height, mask.width, t.apply_plane(mask.data(), mask.height))
}

/// Random augmentation of a (cube, mask) pair with the same transform, so
/// measurement synthesis stays physically consistent.
pub fn augment(
    cube: &SpectralCube,
    mask: &CodedMask,
    rng: &mut CounterRng,
) -> Result<(SpectralCube, CodedMask, Dihedral)> {
    let t = Dihedral::sample(rng);
    Ok((transform_cube(cube, t)?, transform_mask(mask, t)?, t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_bitwise_reproducible() {
        let a = generate_toy_dataset(0, 8, 2, 32, 32, 8).unwrap();
        let b = generate_toy_dataset(0, 8, 2, 32, 32, 8).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.holdout, b.holdout);
        let c = generate_toy_dataset(1, 8, 2, 32, 32, 8).unwrap();
        assert_ne!(a.train[0], c.train[0]);
    }

    #[test]
    fn dataset_values_in_unit_interval() {
        let d = generate_toy_dataset(3, 4, 1, 16, 16, 6).unwrap();
        for cube in d.train.iter().chain(&d.holdout) {
            assert!(cube.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_extents_not_divisible_by_four() {
        assert!(generate_toy_dataset(0, 1, 0, 30, 32, 4).is_err());
    }

    #[test]
    fn adjacent_band_correlation_is_high() {
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..10 {
            let d = generate_toy_dataset(seed, 2, 0, 16, 16, 8).unwrap();
            for cube in &d.train {
                let plane = cube.height * cube.width;
                for b in 0..cube.bands - 1 {
                    let r = crate::metrics::pearson(
                        &cube.data()[b * plane..(b + 1) * plane],
                        &cube.data()[(b + 1) * plane..(b + 2) * plane],
                    );
                    if r.is_finite() {
                        total += r;
                        count += 1;
                    }
                }
            }
        }
        let avg = total / count as f64;
        assert!(avg > 0.7, "adjacent-band correlation {avg}");
    }

    #[test]
    fn flips_are_involutions() {
        let d = generate_toy_dataset(5, 1, 0, 8, 8, 3).unwrap();
        let cube = &d.train[0];
        for t in [Dihedral::FlipH, Dihedral::FlipV, Dihedral::Rot180] {
            let twice = transform_cube(&transform_cube(cube, t).unwrap(), t).unwrap();
            assert_eq!(&twice, cube);
        }
    }

    #[test]
    fn transforms_preserve_value_histogram() {
        let d = generate_toy_dataset(6, 1, 0, 8, 8, 3).unwrap();
        let cube = &d.train[0];
        let mut base: Vec<f64> = cube.data().to_vec();
        base.sort_by(f64::total_cmp);
        for t in Dihedral::ALL {
            let mut moved: Vec<f64> = transform_cube(cube, t).unwrap().data().to_vec();
            moved.sort_by(f64::total_cmp);
            assert_eq!(base, moved, "{t:?}");
        }
    }

    #[test]
    fn non_square_rotation_rejected() {
        let cube = SpectralCube::zeros(4, 8, 2);
        assert!(transform_cube(&cube, Dihedral::Rot90).is_err());
        assert!(transform_cube(&cube, Dihedral::Identity).is_ok());
    }
}
