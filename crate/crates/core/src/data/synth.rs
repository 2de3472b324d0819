//! Deterministic mammogram-like synthetic data.
//!
//! Every view is a flat background with zero-mean periodic texture and
//! zero-mean noise, plus small bright distractor discs in both classes.
//! Malignant samples add one elliptical mass whose latent shape and position
//! are shared by all four views: centered and at full contrast in the crops,
//! smaller and at half contrast at the latent position in the whole views.
//!
//! With `difficulty = 0` nothing is clipped, so every mean pixel value is a
//! sum of per-component contributions that [`SynthParams::crop_mean_margin`]
//! bounds in closed form.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GrayImage, Label, Laterality, Sample};
use crate::error::{Error, Result};
use crate::model::View;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub background: f64,
    /// Total amplitude of the periodic texture.
    pub texture: f64,
    /// Half-width of the uniform noise before mean removal, at difficulty 0.
    pub noise: f64,
    /// Extra noise half-width per unit difficulty, drawn independently per view.
    pub noise_per_difficulty: f64,
    pub distractors: usize,
    pub distractor_intensity: f64,
    /// Largest distractor radius as a fraction of the image side.
    pub distractor_radius: f64,
    /// Mass intensity range at difficulty 0.
    pub mass_intensity: (f64, f64),
    /// Mass semi-axis range in the crop, as a fraction of the image side.
    pub mass_axis: (f64, f64),
    /// Whole-view mass size and contrast relative to the crop.
    pub whole_scale: f64,
    pub whole_contrast: f64,
    /// Fraction of mass contrast removed at difficulty 1.
    pub contrast_drop: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            background: 0.25,
            texture: 0.04,
            noise: 0.03,
            noise_per_difficulty: 0.12,
            distractors: 3,
            distractor_intensity: 0.1,
            distractor_radius: 0.06,
            mass_intensity: (0.3, 0.45),
            mass_axis: (0.18, 0.3),
            whole_scale: 0.35,
            whole_contrast: 0.5,
            contrast_drop: 0.5,
        }
    }
}

impl SynthParams {
    /// Lower bound on `mean(malignant crop) − mean(benign crop)` at
    /// difficulty 0 for images of side `size`.
    ///
    /// A lattice of unit cells covers any convex region shrunk by one pixel,
    /// so an ellipse with semi-axes `a, b` holds at least `π(a−1)(b−1)` pixel
    /// centers and a disc of radius `r` at most `π(r+1)²`.
    pub fn crop_mean_margin(&self, size: usize) -> f64 {
        let s = size as f64;
        let area = s * s;
        let a = self.mass_axis.0 * s;
        let mass_min = self.mass_intensity.0 * PI * (a - 1.0).max(0.0).powi(2) / area;
        let r = self.distractor_radius * s;
        let distractor_max = self.distractors as f64 * self.distractor_intensity * PI * (r + 1.0).powi(2) / area;
        mass_min - distractor_max
    }

    /// Largest pixel excursion above and below the background at difficulty 0.
    fn excursion(&self) -> (f64, f64) {
        let low = self.texture + 2.0 * self.noise;
        let high = low + self.distractor_intensity + self.mass_intensity.1;
        (high, low)
    }

    fn validate(&self) -> Result<()> {
        let (high, low) = self.excursion();
        if self.background - low < 0.0 || self.background + high > 1.0 {
            return Err(Error::Config(format!(
                "synthetic intensities span [{}, {}], outside [0, 1]",
                self.background - low,
                self.background + high
            )));
        }
        Ok(())
    }
}

/// Latent lesion shared by the four views of one sample.
struct Lesion {
    axes: (f64, f64),
    angle: f64,
    intensity: f64,
    /// Center in the whole views, as fractions of the side.
    position: (f64, f64),
}

struct Disc {
    center: (f64, f64),
    radius: f64,
    intensity: f64,
}

/// `n_samples` samples with alternating labels, starting benign.
///
/// Generation is a pure function of its arguments; sample `i` draws from its
/// own random stream so the first `k` samples do not depend on `n_samples`.
pub fn generate_dataset(n_samples: usize, image_size: usize, seed: u64, difficulty: f64) -> Result<Vec<Sample>> {
    generate_with(&SynthParams::default(), n_samples, image_size, seed, difficulty)
}

pub fn generate_with(
    params: &SynthParams,
    n_samples: usize,
    image_size: usize,
    seed: u64,
    difficulty: f64,
) -> Result<Vec<Sample>> {
    if n_samples < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {n_samples}")));
    }
    if image_size < 32 {
        return Err(Error::Config(format!("image size must be at least 32, got {image_size}")));
    }
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Config(format!("difficulty {difficulty} outside [0, 1]")));
    }
    params.validate()?;
    Ok((0..n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            sample(params, &mut rng, i, image_size, difficulty)
        })
        .collect())
}

fn sample(params: &SynthParams, rng: &mut ChaCha8Rng, i: usize, size: usize, difficulty: f64) -> Sample {
    let label = if i % 2 == 0 { Label::Benign } else { Label::Malignant };
    let contrast = 1.0 - params.contrast_drop * difficulty;
    let lesion = Lesion {
        axes: (
            rng.gen_range(params.mass_axis.0..=params.mass_axis.1),
            rng.gen_range(params.mass_axis.0..=params.mass_axis.1),
        ),
        angle: rng.gen_range(0.0..PI),
        intensity: rng.gen_range(params.mass_intensity.0..=params.mass_intensity.1) * contrast,
        position: (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)),
    };
    let noise = params.noise + params.noise_per_difficulty * difficulty;

    let views = View::ALL.map(|view| {
        let mut img = background(params, rng, size, noise);
        let discs: Vec<Disc> = (0..params.distractors)
            .map(|_| Disc {
                center: (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)),
                radius: rng.gen_range(0.3..=1.0) * params.distractor_radius,
                intensity: rng.gen_range(0.5..=1.0) * params.distractor_intensity,
            })
            .collect();
        paint_distractors(&mut img, size, &discs);
        if label == Label::Malignant {
            paint_mass(&mut img, size, &lesion, view, params);
        }
        GrayImage {
            width: size,
            height: size,
            pixels: img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        }
    });
    Sample {
        views,
        label,
        breast_id: format!("synth-{i:05}"),
        laterality: if (i / 2) % 2 == 0 { Laterality::Left } else { Laterality::Right },
    }
}

/// Background, texture and noise; the last two have exactly zero mean.
fn background(params: &SynthParams, rng: &mut ChaCha8Rng, size: usize, noise: f64) -> Vec<f64> {
    let s = size as f64;
    // integer frequencies complete whole periods over the image
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let fx = rng.gen_range(1..=4) as f64;
            let fy = rng.gen_range(0..=4) as f64;
            (fx, fy, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    let amp = params.texture / waves.len() as f64;
    let mut jitter: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-noise..=noise)).collect();
    let mean = jitter.iter().sum::<f64>() / jitter.len() as f64;
    jitter.iter_mut().for_each(|v| *v -= mean);

    let mut img = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph)| (2.0 * PI * (fx * c as f64 + fy * r as f64) / s + ph).cos())
                .sum();
            img.push(params.background + amp * tex + jitter[r * size + c]);
        }
    }
    img
}

/// Distractors combine by maximum so overlapping discs never exceed the
/// single-disc intensity.
fn paint_distractors(img: &mut [f64], size: usize, discs: &[Disc]) {
    let s = size as f64;
    let mut layer = vec![0.0f64; size * size];
    for d in discs {
        let (cx, cy, r) = (d.center.0 * s, d.center.1 * s, d.radius * s);
        for row in 0..size {
            for col in 0..size {
                let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    let v = &mut layer[row * size + col];
                    *v = v.max(d.intensity);
                }
            }
        }
    }
    img.iter_mut().zip(layer).for_each(|(p, l)| *p += l);
}

fn paint_mass(img: &mut [f64], size: usize, lesion: &Lesion, view: View, params: &SynthParams) {
    let s = size as f64;
    let oblique = matches!(view, View::CropMlo | View::WholeMlo);
    // the oblique projection sees the lesion rotated and slightly displaced
    let angle = lesion.angle + if oblique { PI / 6.0 } else { 0.0 };
    let whole = matches!(view, View::WholeCc | View::WholeMlo);
    let (center, scale, intensity) = if whole {
        let (x, y) = lesion.position;
        let y = if oblique { (y + 0.08).min(0.8) } else { y };
        ((x * s, y * s), params.whole_scale, lesion.intensity * params.whole_contrast)
    } else {
        ((s / 2.0, s / 2.0), 1.0, lesion.intensity)
    };
    let (a, b) = (lesion.axes.0 * s * scale, lesion.axes.1 * s * scale);
    let (sin, cos) = angle.sin_cos();
    for row in 0..size {
        for col in 0..size {
            let (dx, dy) = (col as f64 + 0.5 - center.0, row as f64 + 0.5 - center.1);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                img[row * size + col] += intensity;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(10, 32, 7, 0.3).unwrap();
        let b = generate_dataset(10, 32, 7, 0.3).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(10, 32, 8, 0.3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn prefix_does_not_depend_on_count() {
        let a = generate_dataset(4, 32, 1, 0.0).unwrap();
        let b = generate_dataset(9, 32, 1, 0.0).unwrap();
        assert_eq!(a[..], b[..4]);
    }

    #[test]
    fn labels_alternate_and_balance() {
        for n in [2, 5, 10, 11] {
            let data = generate_dataset(n, 32, 0, 0.0).unwrap();
            let pos = data.iter().filter(|s| s.label == Label::Malignant).count();
            assert!((2 * pos as i64 - n as i64).abs() <= 1);
        }
    }

    #[test]
    fn invalid_requests_are_rejected() {
        assert!(generate_dataset(1, 32, 0, 0.0).is_err());
        assert!(generate_dataset(4, 16, 0, 0.0).is_err());
        assert!(generate_dataset(4, 32, 0, 1.5).is_err());
    }

    #[test]
    fn easy_crops_separate_by_the_closed_form_margin() {
        let params = SynthParams::default();
        let size = 64;
        let margin = params.crop_mean_margin(size);
        assert!(margin > 0.0);
        let data = generate_dataset(60, size, 3, 0.0).unwrap();
        let crop_means = |label| {
            data.iter()
                .filter(move |s| s.label == label)
                .flat_map(|s| [s.view(View::CropCc).mean(), s.view(View::CropMlo).mean()])
        };
        let min_malignant = crop_means(Label::Malignant).fold(f64::INFINITY, f64::min);
        let max_benign = crop_means(Label::Benign).fold(f64::NEG_INFINITY, f64::max);
        // pixels are stored in 32 bits
        assert!(min_malignant - max_benign >= margin - 1e-5, "{min_malignant} {max_benign} {margin}");
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        for d in [0.0, 1.0] {
            for s in generate_dataset(6, 32, 2, d).unwrap() {
                for v in &s.views {
                    assert!(v.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
                }
            }
        }
    }
}
