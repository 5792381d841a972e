//! Intensity normalization, orthogonal view extraction and the 27-patch
//! augmentation recipe.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

/// Clip window used for classification crops.
pub const CLASSIFICATION_WINDOW: (f64, f64) = (-1000.0, 400.0);
/// Clip window used for detection volumes.
pub const DETECTION_WINDOW: (f64, f64) = (-1200.0, 600.0);

/// A `[D, H, W]` volume of Hounsfield-like values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HuVolume {
    pub shape: [usize; 3],
    pub values: Vec<f64>,
}

impl HuVolume {
    pub fn new(shape: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::dim("volume", format!("{shape:?} does not hold {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite values"));
        }
        Ok(HuVolume { shape, values })
    }
}

/// `v ← (clamp(v, lo, hi) − lo) / (hi − lo)`.
pub fn clip_normalize(volume: &HuVolume, lo: f64, hi: f64) -> Result<HuVolume> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("clip window [{lo}, {hi}] is empty")));
    }
    let values = volume
        .values
        .iter()
        .map(|v| (v.clamp(lo, hi) - lo) / (hi - lo))
        .collect();
    Ok(HuVolume {
        shape: volume.shape,
        values,
    })
}

/// Cubic crop of normalized intensities around one detected nodule.
/// Voxels are stored `[z][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleCrop {
    pub size: usize,
    pub data: Vec<f64>,
    pub patient_id: u64,
    pub rank: usize,
}

impl NoduleCrop {
    pub fn new(size: usize, data: Vec<f64>, patient_id: u64, rank: usize) -> Result<Self> {
        if size == 0 || data.len() != size * size * size {
            return Err(Error::dim(
                "crop",
                format!("a {size}³ crop needs {} voxels, got {}", size * size * size, data.len()),
            ));
        }
        let crop = NoduleCrop {
            size,
            data,
            patient_id,
            rank,
        };
        crop.check_normalized()?;
        Ok(crop)
    }

    pub fn from_volume(volume: &HuVolume, patient_id: u64, rank: usize) -> Result<Self> {
        let [d, h, w] = volume.shape;
        if d != h || h != w {
            return Err(Error::dim("crop", format!("volume {:?} is not cubic", volume.shape)));
        }
        Self::new(d, volume.values.clone(), patient_id, rank)
    }

    pub fn check_normalized(&self) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(v) => Err(Error::invalid(format!("crop voxel {v} outside [0, 1]"))),
            None => Ok(()),
        }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.size + y) * self.size + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Axial,
    Coronal,
    Sagittal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Coronal, View::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            View::Axial => "axial",
            View::Coronal => "coronal",
            View::Sagittal => "sagittal",
        }
    }
}

/// How a patch was derived from its source view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Augmentation {
    pub angle: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub noise_seed: Option<u64>,
    pub blur_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPatch {
    pub size: usize,
    pub data: Vec<f64>,
    pub view: View,
    pub augmentation: Augmentation,
}

impl ViewPatch {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.size + x]
    }

    /// `[1, S, S]` single-channel tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.size, self.size], self.data.clone()).expect("square patch")
    }

    fn with_data(&self, data: Vec<f64>) -> ViewPatch {
        ViewPatch {
            size: self.size,
            data,
            view: self.view,
            augmentation: self.augmentation.clone(),
        }
    }
}

/// Central slice along each axis (index `S/2`, floored).
pub fn extract_view(crop: &NoduleCrop, view: View) -> ViewPatch {
    let s = crop.size;
    let c = s / 2;
    let mut data = Vec::with_capacity(s * s);
    for a in 0..s {
        for b in 0..s {
            data.push(match view {
                View::Axial => crop.at(c, a, b),
                View::Coronal => crop.at(a, c, b),
                View::Sagittal => crop.at(a, b, c),
            });
        }
    }
    ViewPatch {
        size: s,
        data,
        view,
        augmentation: Augmentation::default(),
    }
}

pub fn extract_views(crop: &NoduleCrop) -> [ViewPatch; 3] {
    View::ALL.map(|v| extract_view(crop, v))
}

fn exact_trig(angle_degrees: f64) -> (f64, f64) {
    let quarter = angle_degrees / 90.0;
    if quarter.fract() == 0.0 {
        match (quarter as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        angle_degrees.to_radians().sin_cos()
    }
}

/// Rotation about the patch center with bilinear sampling; samples falling
/// outside the patch read as 0. At 90° the result is `out[y][x] = in[S-1-x][y]`.
pub fn rotate_patch(patch: &ViewPatch, angle_degrees: f64) -> Result<ViewPatch> {
    if !(-180.0..=180.0).contains(&angle_degrees) {
        return Err(Error::invalid(format!("rotation angle {angle_degrees} outside [-180, 180]")));
    }
    let s = patch.size;
    let (sin, cos) = exact_trig(angle_degrees);
    let c = (s as f64 - 1.0) / 2.0;
    let sample = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy as usize >= s || xx as usize >= s {
            0.0
        } else {
            patch.at(yy as usize, xx as usize)
        }
    };
    let mut data = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let xs = c + cos * dx + sin * dy;
            let ys = c - sin * dx + cos * dy;
            let (x0, y0) = (xs.floor(), ys.floor());
            let (fx, fy) = (xs - x0, ys - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1));
            if fy != 0.0 {
                v += fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let mut out = patch.with_data(data);
    out.augmentation.angle = Some(angle_degrees);
    Ok(out)
}

/// Additive `N(0, sigma²)` per pixel, clamped to `[0, 1]`.
pub fn add_gaussian_noise(patch: &ViewPatch, sigma: f64, rng: &mut Rng) -> Result<ViewPatch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(patch.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let data = patch
        .data
        .iter()
        .map(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    let mut out = patch.with_data(data);
    out.augmentation.noise_sigma = Some(sigma);
    Ok(out)
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian blur with radius `ceil(3·sigma)`; taps falling outside
/// the patch are dropped and the remaining weights renormalized.
pub fn gaussian_blur(patch: &ViewPatch, sigma: f64) -> Result<ViewPatch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("blur sigma {sigma} must be non-negative")));
    }
    if sigma == 0.0 {
        return Ok(patch.clone());
    }
    let s = patch.size;
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, w) in taps.iter().enumerate() {
                    let off = t as isize - radius;
                    let (yy, xx) = if horizontal {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy as usize >= s || xx as usize >= s {
                        continue;
                    }
                    acc += w * src[yy as usize * s + xx as usize];
                    norm += w;
                }
                dst[y * s + x] = acc / norm;
            }
        }
        dst
    };
    let data = pass(&pass(&patch.data, true), false);
    let mut out = patch.with_data(data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect());
    out.augmentation.blur_sigma = Some(sigma);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub blur_scales: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.05,
            blur_scales: [0.5, 1.0, 1.5],
        }
    }
}

/// Rebuilds an augmented patch from its source crop and descriptor.
pub fn regenerate(crop: &NoduleCrop, view: View, aug: &Augmentation) -> Result<ViewPatch> {
    let mut patch = extract_view(crop, view);
    if let Some(angle) = aug.angle {
        patch = rotate_patch(&patch, angle)?;
    }
    if let Some(sigma) = aug.noise_sigma {
        let seed = aug
            .noise_seed
            .ok_or_else(|| Error::invalid("noisy patch descriptor lacks a noise seed"))?;
        patch = add_gaussian_noise(&patch, sigma, &mut seeded(seed))?;
        patch.augmentation.noise_seed = Some(seed);
    }
    if let Some(sigma) = aug.blur_sigma {
        patch = gaussian_blur(&patch, sigma)?;
    }
    Ok(patch)
}

/// Per view: 3 rotations, 3 rotations with additive noise, and 3 rotations
/// blurred at the 3 scales. 27 patches, ordered view-major.
pub fn augment_27(crop: &NoduleCrop, config: &AugmentConfig, rng: &mut Rng) -> Result<Vec<ViewPatch>> {
    let mut out = Vec::with_capacity(27);
    for view in View::ALL {
        let mut angle = || rng.random_range(-180.0..=180.0);
        let mut descriptors = Vec::with_capacity(9);
        for _ in 0..3 {
            descriptors.push(Augmentation {
                angle: Some(angle()),
                ..Augmentation::default()
            });
        }
        for _ in 0..3 {
            descriptors.push(Augmentation {
                angle: Some(angle()),
                noise_sigma: Some(config.noise_sigma),
                ..Augmentation::default()
            });
        }
        for &blur in &config.blur_scales {
            descriptors.push(Augmentation {
                angle: Some(angle()),
                blur_sigma: Some(blur),
                ..Augmentation::default()
            });
        }
        for d in descriptors.iter_mut().filter(|d| d.noise_sigma.is_some()) {
            d.noise_seed = Some(rng.random());
        }
        for d in &descriptors {
            out.push(regenerate(crop, view, d)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch(size: usize, f: impl Fn(usize, usize) -> f64) -> ViewPatch {
        ViewPatch {
            size,
            data: (0..size * size).map(|i| f(i / size, i % size)).collect(),
            view: View::Axial,
            augmentation: Augmentation::default(),
        }
    }

    fn crop_from(size: usize, f: impl Fn(usize, usize, usize) -> f64) -> NoduleCrop {
        let mut data = Vec::new();
        for z in 0..size {
            for y in 0..size {
                for x in 0..size {
                    data.push(f(z, y, x));
                }
            }
        }
        NoduleCrop::new(size, data, 0, 0).unwrap()
    }

    #[test]
    fn clip_window_endpoints_and_midpoints() {
        let vol = HuVolume::new([1, 1, 5], vec![-1000.0, 400.0, -300.0, -5000.0, 9000.0]).unwrap();
        let (lo, hi) = CLASSIFICATION_WINDOW;
        let out = clip_normalize(&vol, lo, hi).unwrap();
        assert_eq!(out.values, vec![0.0, 1.0, 0.5, 0.0, 1.0]);
        let (lo, hi) = DETECTION_WINDOW;
        let out = clip_normalize(&HuVolume::new([1, 1, 1], vec![-300.0]).unwrap(), lo, hi).unwrap();
        assert_eq!(out.values, vec![0.5]);
        assert!(clip_normalize(&vol, 1.0, 1.0).is_err());
    }

    #[test]
    fn constant_crop_gives_constant_views() {
        let crop = crop_from(6, |_, _, _| 0.3);
        for v in extract_views(&crop) {
            assert!(v.data.iter().all(|&x| x == 0.3));
        }
    }

    #[test]
    fn center_spike_appears_in_every_view() {
        for size in [5, 6] {
            let c = size / 2;
            let crop = crop_from(size, |z, y, x| if (z, y, x) == (c, c, c) { 1.0 } else { 0.0 });
            for v in extract_views(&crop) {
                assert_eq!(v.at(c, c), 1.0);
                assert_eq!(v.data.iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn views_follow_axis_swaps() {
        // symmetric under swapping y and x: axial is symmetric, coronal == sagittal
        let crop = crop_from(5, |z, y, x| ((z * 3 + y * x) % 7) as f64 / 7.0);
        let [axial, coronal, sagittal] = extract_views(&crop);
        assert_eq!(coronal.data, sagittal.data);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(axial.at(y, x), axial.at(x, y));
            }
        }
    }

    #[test]
    fn non_cubic_volume_rejected() {
        let vol = HuVolume::new([2, 2, 3], vec![0.5; 12]).unwrap();
        assert!(NoduleCrop::from_volume(&vol, 0, 0).is_err());
        assert!(NoduleCrop::new(2, vec![1.5; 8], 0, 0).is_err());
    }

    #[test]
    fn rotation_identity_and_quarter_turn() {
        let p = patch(6, |y, x| ((y * 6 + x) as f64) / 36.0);
        assert_eq!(rotate_patch(&p, 0.0).unwrap().data, p.data);
        let r = rotate_patch(&p, 90.0).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(r.at(y, x), p.at(5 - x, y));
            }
        }
        assert!(rotate_patch(&p, 181.0).is_err());
    }

    #[test]
    fn rotated_constant_is_constant_inside_disc() {
        let p = patch(9, |_, _| 0.6);
        let r = rotate_patch(&p, 37.0).unwrap();
        let c = 4.0;
        for y in 0..9 {
            for x in 0..9 {
                let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                if d <= c - 1.0 {
                    assert!((r.at(y, x) - 0.6).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn noise_zero_sigma_and_seeding() {
        let p = patch(4, |y, x| 0.1 * (y + x) as f64 / 2.0);
        assert_eq!(add_gaussian_noise(&p, 0.0, &mut seeded(1)).unwrap(), p);
        let a = add_gaussian_noise(&p, 0.1, &mut seeded(3)).unwrap();
        let b = add_gaussian_noise(&p, 0.1, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn noise_is_zero_mean() {
        let sigma = 0.05;
        let p = patch(1000, |_, _| 0.5);
        let noisy = add_gaussian_noise(&p, sigma, &mut seeded(11)).unwrap();
        let mean = noisy.data.iter().map(|v| v - 0.5).sum::<f64>() / 1e6;
        assert!(mean.abs() < 3.0 * sigma / 1000.0, "mean offset {mean}");
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let p = patch(8, |_, _| 0.25);
        let b = gaussian_blur(&p, 1.5).unwrap();
        assert!(b.data.iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert_eq!(gaussian_blur(&p, 0.0).unwrap(), p);

        // radius ceil(3·1.0) = 3 fits around the center of a 15×15 patch
        let spike = patch(15, |y, x| if (y, x) == (7, 7) { 1.0 } else { 0.0 });
        let b = gaussian_blur(&spike, 1.0).unwrap();
        assert!((b.data.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn augment_27_contract() {
        let crop = crop_from(8, |z, y, x| ((z + 2 * y + 3 * x) % 8) as f64 / 8.0);
        let cfg = AugmentConfig::default();
        let a = augment_27(&crop, &cfg, &mut seeded(5)).unwrap();
        let b = augment_27(&crop, &cfg, &mut seeded(5)).unwrap();
        assert_eq!(a.len(), 27);
        assert_eq!(a, b);
        for view in View::ALL {
            assert_eq!(a.iter().filter(|p| p.view == view).count(), 9);
        }
        for p in &a {
            let angle = p.augmentation.angle.unwrap();
            assert!((-180.0..=180.0).contains(&angle));
            assert!(p.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(regenerate(&crop, p.view, &p.augmentation).unwrap(), *p);
        }
    }
}
