//! Joint image/mask augmentation: horizontal flip followed by a small
//! rotation and translation about the image centre.

use rand::Rng;

use super::Sample;
use crate::seed;
use crate::tensor::Tensor;

const MAX_ROTATION_DEG: f64 = 10.0;
const MAX_SHIFT_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams {
    pub flip: bool,
    /// Rotation in degrees; positive turns +x towards +y (clockwise on screen).
    pub angle_deg: f64,
    /// Translation in pixels.
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    /// Draws flip with p = 0.5, rotation in ±10°, shifts in ±5% of the size.
    pub fn sample(seed: u64, width: usize, height: usize) -> Self {
        let mut rng = seed::rng(seed);
        let flip = rng.gen_bool(0.5);
        let angle_deg = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        let sx = MAX_SHIFT_FRACTION * width as f64;
        let sy = MAX_SHIFT_FRACTION * height as f64;
        AffineParams {
            flip,
            angle_deg,
            tx: rng.gen_range(-sx..=sx),
            ty: rng.gen_range(-sy..=sy),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.angle_deg == 0.0 && self.tx == 0.0 && self.ty == 0.0
    }

    /// Transforms a `[C, H, W]` tensor. `nearest` selects nearest-neighbour
    /// sampling, otherwise bilinear. Pixels mapped from outside are 0.
    pub fn apply(&self, t: &Tensor<f32>, nearest: bool) -> Tensor<f32> {
        if self.is_identity() {
            return t.clone();
        }
        let [c, h, w] = match *t.shape() {
            [c, h, w] => [c, h, w],
            _ => panic!("affine transform expects [C, H, W], got {:?}", t.shape()),
        };
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let src = t.data();
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                // inverse map: undo translation, then rotation, then flip
                let dx = x as f64 - cx - self.tx;
                let dy = y as f64 - cy - self.ty;
                let mut sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                if self.flip {
                    sx = w as f64 - 1.0 - sx;
                }
                for ch in 0..c {
                    let plane = &src[ch * h * w..(ch + 1) * h * w];
                    out[ch * h * w + y * w + x] = if nearest {
                        sample_nearest(plane, w, h, sx, sy)
                    } else {
                        sample_bilinear(plane, w, h, sx, sy)
                    };
                }
            }
        }
        Tensor::from_vec(t.shape(), out).expect("shape preserved")
    }
}

fn pixel(plane: &[f32], w: usize, h: usize, x: i64, y: i64) -> f32 {
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

fn sample_nearest(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    pixel(plane, w, h, x.round() as i64, y.round() as i64)
}

fn sample_bilinear(plane: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let v = |xi, yi| pixel(plane, w, h, xi, yi) as f64;
    let top = v(x0, y0) * (1.0 - fx) + v(x0 + 1, y0) * fx;
    let bottom = v(x0, y0 + 1) * (1.0 - fx) + v(x0 + 1, y0 + 1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Random flip + affine applied jointly to image (bilinear) and mask (nearest).
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let params = AffineParams::sample(seed, w, h);
    Sample {
        id: sample.id,
        label: sample.label,
        image: params.apply(&sample.image, false),
        mask: params.apply(&sample.mask, true),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_sample, Label};
    use super::*;
    use proptest::prelude::*;

    fn flip_only() -> AffineParams {
        AffineParams {
            flip: true,
            ..AffineParams::default()
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let s = generate_sample(5, 2).unwrap();
        let once = flip_only().apply(&s.image, false);
        assert_ne!(once, s.image);
        assert_eq!(flip_only().apply(&once, false), s.image);
    }

    #[test]
    fn identity_is_bit_exact() {
        let s = generate_sample(6, 1).unwrap();
        assert_eq!(AffineParams::default().apply(&s.image, false), s.image);
    }

    #[test]
    fn rotating_a_single_pixel_moves_it_to_the_rotated_coordinate() {
        let n = 64;
        let c = (n as f64 - 1.0) / 2.0;
        let (px, py) = (c + 16.5, c + 0.5); // pixel (48, 32)
        let mut img = Tensor::zeros(&[1, n, n]);
        img.data_mut()[py as usize * n + px as usize] = 1.0;
        let p = AffineParams {
            angle_deg: 10.0,
            ..AffineParams::default()
        };
        let out = p.apply(&img, false);
        let (i, _) = out
            .data()
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let (ox, oy) = ((i % n) as f64, (i / n) as f64);
        let t = 10f64.to_radians();
        let ex = c + (px - c) * t.cos() - (py - c) * t.sin();
        let ey = c + (px - c) * t.sin() + (py - c) * t.cos();
        assert!((ox - ex).abs() <= 1.0 && (oy - ey).abs() <= 1.0, "({ox},{oy}) vs ({ex},{ey})");
    }

    #[test]
    fn augment_is_seeded() {
        let s = generate_sample(7, 0).unwrap();
        assert_eq!(augment(&s, 1), augment(&s, 1));
        assert_eq!(augment(&s, 1).label, Label::Normal);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn augmentation_keeps_mask_binary_and_image_in_range(sample_seed in 0u64..1000, aug_seed: u64) {
            let s = generate_sample(sample_seed, (sample_seed % 3) as u8).unwrap();
            let a = augment(&s, aug_seed);
            prop_assert!(a.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            prop_assert!(a.image.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
