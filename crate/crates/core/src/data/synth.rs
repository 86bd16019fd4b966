//! Parametric chest-like images: a bright body ellipse on dark air, two dark
//! lung ellipses, uniform noise, and a class-dependent finding.

use rand::Rng;

use super::{image_shape, pgm::quantize, DataError, Label, Sample};
use crate::models::IMAGE_SIZE;
use crate::seed;
use crate::tensor::Tensor;

pub const NOISE_AMPLITUDE: f32 = 0.1;
/// Peak intensity added by the opacity blob.
pub const OPACITY_PEAK: f32 = 0.5;
/// Intensity added by the bright bands of the rib-like pattern.
pub const STRIPE_AMPLITUDE: f32 = 0.25;
pub const MASK_FRACTION_RANGE: (f64, f64) = (0.10, 0.50);

const AIR: f32 = 0.0;
const BODY: f32 = 0.7;
const LUNG: f32 = 0.15;
const STRIPE_PERIOD: usize = 6;
const STRIPE_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
}

impl Ellipse {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Ground-truth geometry behind a generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGeometry {
    pub lungs: [Ellipse; 2],
    /// Opacity centre and radius (label 2).
    pub blob: Option<(f32, f32, f32)>,
    /// Row offset of the rib-like bands (label 1); bands cover rows with
    /// `(y + phase) % 6 < 3`, on body pixels outside the lungs.
    pub stripe_phase: Option<usize>,
}

fn body_ellipse() -> Ellipse {
    let mid = (IMAGE_SIZE as f32 - 1.0) / 2.0;
    Ellipse {
        cx: mid,
        cy: mid + 2.0,
        rx: 29.0,
        ry: 31.0,
    }
}

/// Renders the sample for `(seed, label)`. Pure function of its arguments.
/// Pixel values are multiples of 1/255 so they survive 8-bit PGM storage.
pub fn generate_sample(seed: u64, label: u8) -> Result<Sample, DataError> {
    generate_sample_with_geometry(seed, label).map(|(s, _)| s)
}

/// [`generate_sample`] plus the geometry it was drawn from.
pub fn generate_sample_with_geometry(seed: u64, label: u8) -> Result<(Sample, SampleGeometry), DataError> {
    let label = Label::try_from(label)?;
    let mut rng = seed::rng(seed::derive(seed, "sample", label as u64));
    let n = IMAGE_SIZE;
    let mid = (n as f32 - 1.0) / 2.0;

    let body = body_ellipse();
    let mut lung = |cx: f32| Ellipse {
        cx: cx + rng.gen_range(-2.0..2.0),
        cy: mid + rng.gen_range(-3.0..3.0),
        rx: rng.gen_range(7.0..9.0),
        ry: rng.gen_range(12.0..15.0),
    };
    let lungs = [lung(mid - 12.0), lung(mid + 12.0)];

    let mut geometry = SampleGeometry {
        lungs,
        blob: None,
        stripe_phase: None,
    };
    match label {
        Label::Normal => {}
        Label::LungOpacity => {
            let l = lungs[rng.gen_range(0..2)];
            let r = rng.gen_range(0.0f32..1.0).sqrt() * 0.5;
            let t = rng.gen_range(0.0f32..std::f32::consts::TAU);
            let radius = rng.gen_range(3.0..6.0);
            geometry.blob = Some((l.cx + r * l.rx * t.cos(), l.cy + r * l.ry * t.sin(), radius));
        }
        Label::NotNormal => geometry.stripe_phase = Some(rng.gen_range(0..STRIPE_PERIOD)),
    }

    let mut image = vec![0.0f32; n * n];
    let mut mask = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f32, y as f32);
            let in_lung = lungs.iter().any(|l| l.contains(fx, fy));
            let mut v = if in_lung {
                LUNG
            } else if body.contains(fx, fy) {
                BODY
            } else {
                AIR
            };
            if let (Some((bx, by, br)), true) = (geometry.blob, in_lung) {
                let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                v += OPACITY_PEAK * (-d2 / (2.0 * br * br)).exp();
            }
            if let Some(phase) = geometry.stripe_phase {
                if !in_lung && body.contains(fx, fy) && (y + phase) % STRIPE_PERIOD < STRIPE_WIDTH {
                    v += STRIPE_AMPLITUDE;
                }
            }
            v += rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE);
            image[y * n + x] = quantize(v) as f32 / 255.0;
            mask[y * n + x] = if in_lung { 1.0 } else { 0.0 };
        }
    }
    let shape = image_shape();
    let sample = Sample {
        id: 0,
        label,
        image: Tensor::from_vec(&shape, image)?,
        mask: Tensor::from_vec(&shape, mask)?,
    };
    Ok((sample, geometry))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fraction(mask: &Tensor<f32>) -> f64 {
        mask.data().iter().filter(|&&m| m == 1.0).count() as f64 / mask.len() as f64
    }

    fn lung_mean(s: &Sample) -> f64 {
        let (mut sum, mut count) = (0.0, 0.0);
        for (&p, &m) in s.image.data().iter().zip(s.mask.data()) {
            if m == 1.0 {
                sum += p as f64;
                count += 1.0;
            }
        }
        sum / count
    }

    #[test]
    fn pure_function_of_seed_and_label() {
        let a = generate_sample_with_geometry(11, 2).unwrap();
        let b = generate_sample_with_geometry(11, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.image, generate_sample_with_geometry(12, 2).unwrap().0.image);
    }

    #[test]
    fn invalid_label() {
        assert!(matches!(generate_sample_with_geometry(0, 3), Err(DataError::InvalidLabel(3))));
    }

    #[test]
    fn mask_fraction_in_range_over_300_samples() {
        for s in 0..300u64 {
            let (sample, _) = generate_sample_with_geometry(s, (s % 3) as u8).unwrap();
            let f = fraction(&sample.mask);
            assert!(f >= MASK_FRACTION_RANGE.0 && f <= MASK_FRACTION_RANGE.1, "seed {s}: {f}");
            assert!(sample.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            assert!(sample.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn opacity_centre_lies_in_lung_mask() {
        for s in 0..100u64 {
            let (sample, g) = generate_sample_with_geometry(s, 2).unwrap();
            let (bx, by, r) = g.blob.unwrap();
            assert!((3.0..6.0).contains(&r));
            let idx = by.round() as usize * IMAGE_SIZE + bx.round() as usize;
            assert_eq!(sample.mask.data()[idx], 1.0, "seed {s}");
        }
    }

    #[test]
    fn stripes_brighten_body_rows_but_not_lungs() {
        let body = body_ellipse();
        for s in 0..50u64 {
            let (sample, g) = generate_sample_with_geometry(s, 1).unwrap();
            let phase = g.stripe_phase.unwrap();
            // [body on, body off, lung on, lung off] sums and counts
            let mut acc = [(0.0f64, 0usize); 4];
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let i = y * IMAGE_SIZE + x;
                    let on = (y + phase) % STRIPE_PERIOD < STRIPE_WIDTH;
                    let slot = match (sample.mask.data()[i] == 1.0, on) {
                        (false, _) if !body.contains(x as f32, y as f32) => continue,
                        (false, true) => 0,
                        (false, false) => 1,
                        (true, true) => 2,
                        (true, false) => 3,
                    };
                    acc[slot].0 += sample.image.data()[i] as f64;
                    acc[slot].1 += 1;
                }
            }
            let mean = |k: usize| acc[k].0 / acc[k].1 as f64;
            assert!(mean(0) - mean(1) > 0.15, "seed {s}");
            assert!((mean(2) - mean(3)).abs() < 0.05, "seed {s}");
        }
    }

    #[test]
    fn opacity_raises_mean_lung_intensity() {
        let mut diff = 0.0;
        for s in 0..100u64 {
            let opaque = generate_sample_with_geometry(s, 2).unwrap().0;
            let normal = generate_sample_with_geometry(s, 0).unwrap().0;
            diff += lung_mean(&opaque) - lung_mean(&normal);
        }
        let diff = diff / 100.0;
        assert!(diff >= 0.05, "mean in-lung difference {diff}");
    }
}
