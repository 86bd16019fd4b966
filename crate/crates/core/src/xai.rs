//! Grad-CAM heatmaps for the classifiers and how much of a heatmap falls
//! inside the lungs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{quantize, stack_images, Sample, INPUT_CENTER, INPUT_SCALE};
use crate::models::IMAGE_SIZE;
use crate::nn::{LayerSpec, Network, NetworkBuilder, NnError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum XaiError {
    #[error("invalid Grad-CAM request: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a binary PPM: {reason}")]
    Ppm { path: PathBuf, reason: String },
}

/// A `[H, W]` map in `[0, 1]` at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Tensor<f32>,
    pub target_class: usize,
    pub tap_layer: usize,
}

/// Whether `index` is a convolution output or the activation right after one.
fn is_conv_activation(net: &Network<f32>, index: usize) -> bool {
    let layers = net.layers();
    match layers.get(index).map(|l| &l.spec) {
        Some(LayerSpec::Conv2d { .. }) => true,
        Some(LayerSpec::Relu) => index > 0 && matches!(layers[index - 1].spec, LayerSpec::Conv2d { .. }),
        _ => false,
    }
}

/// `ReLU(sum_k alpha_k A_k)` for one `[K, h, w]` activation and its gradient,
/// with `alpha_k` the spatial mean of channel `k`'s gradient.
pub fn class_activation_map(activation: &Tensor<f32>, grad: &Tensor<f32>) -> Result<Tensor<f32>, XaiError> {
    let (k, h, w) = match *activation.shape() {
        [k, h, w] | [1, k, h, w] => (k, h, w),
        _ => return Err(XaiError::Config(format!("tap activation must be [K, h, w], got {:?}", activation.shape()))),
    };
    grad.ensure_shape(activation.shape())?;
    let plane = h * w;
    let mut map = vec![0.0f64; plane];
    for c in 0..k {
        let a = &activation.data()[c * plane..(c + 1) * plane];
        let g = &grad.data()[c * plane..(c + 1) * plane];
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for (m, &v) in map.iter_mut().zip(a) {
            *m += alpha * v as f64;
        }
    }
    Ok(Tensor::from_vec(&[h, w], map.into_iter().map(|v| v.max(0.0) as f32).collect())?)
}

/// Bilinear resize of a `[h, w]` map with pixel centers at half-integers,
/// clamping at the borders.
pub fn upsample_bilinear(map: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>, XaiError> {
    let [h, w] = *map.shape() else {
        return Err(XaiError::Config(format!("expected a [h, w] map, got {:?}", map.shape())));
    };
    let axis = |out: usize, size: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|d| {
                let src = ((d as f64 + 0.5) * size as f64 / out as f64 - 0.5).clamp(0.0, (size - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(size - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Tensor::from_vec(&[out_h, out_w], out)?)
}

/// Divides by the maximum; all zeros stay zeros.
pub fn normalize_max(map: &Tensor<f32>) -> Tensor<f32> {
    let max = map.data().iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        map.map(|v| (v / max).clamp(0.0, 1.0))
    } else {
        Tensor::zeros(map.shape())
    }
}

/// Grad-CAM of `target_class`'s logit at layer `tap_layer` for one model
/// input of shape `[1, C, H, W]`.
pub fn grad_cam(
    net: &mut Network<f32>,
    input: &Tensor<f32>,
    target_class: usize,
    tap_layer: usize,
) -> Result<Heatmap, XaiError> {
    if input.rank() != 4 || input.shape()[0] != 1 {
        return Err(XaiError::Config(format!("expected a single [1, C, H, W] input, got {:?}", input.shape())));
    }
    if !is_conv_activation(net, tap_layer) {
        return Err(XaiError::Config(format!("layer {tap_layer} is not a convolutional activation")));
    }
    if net.layer_output_shape(tap_layer).map(<[usize]>::len) != Some(3) {
        return Err(XaiError::Config(format!("layer {tap_layer} does not produce a [K, h, w] map")));
    }
    let logits = net.forward(input)?;
    let classes = match *logits.shape() {
        [1, c] => c,
        ref s => return Err(XaiError::Config(format!("network output {s:?} is not a logit vector"))),
    };
    if target_class >= classes {
        return Err(XaiError::Config(format!("class {target_class} out of range 0..{classes}")));
    }
    let mut seed = Tensor::zeros(&[1, classes]);
    seed.data_mut()[target_class] = 1.0;
    net.backward(&seed)?;
    let activation = net.activation(tap_layer).ok_or(NnError::NoForward)?;
    let grad = net.output_grad(tap_layer).ok_or(NnError::NoForward)?;
    let map = class_activation_map(activation, grad)?;
    let (h, w) = (input.shape()[2], input.shape()[3]);
    Ok(Heatmap {
        values: normalize_max(&upsample_bilinear(&map, h, w)?),
        target_class,
        tap_layer,
    })
}

/// [`grad_cam`] on a sample's image after the standard input normalization.
pub fn grad_cam_sample(
    net: &mut Network<f32>,
    sample: &Sample,
    target_class: usize,
    tap_layer: usize,
) -> Result<Heatmap, XaiError> {
    let input = stack_images([sample]).map_err(|e| XaiError::Config(e.to_string()))?;
    grad_cam(net, &input, target_class, tap_layer)
}

fn spatial(t: &Tensor<f32>) -> Option<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Some((h, w)),
        _ => None,
    }
}

/// Share of the heatmap's mass inside the mask; 0 for an all-zero heatmap.
pub fn lung_focus_score(heatmap: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64, XaiError> {
    let (hs, ms) = (spatial(heatmap), spatial(mask));
    if hs.is_none() || hs != ms {
        return Err(XaiError::Config(format!(
            "heatmap {:?} and mask {:?} differ in size",
            heatmap.shape(),
            mask.shape()
        )));
    }
    let total: f64 = heatmap.data().iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = heatmap
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| v as f64 * m as f64)
        .sum();
    Ok(inside / total)
}

/// Mean and median of a set of scores.
pub fn summarize(scores: &[f64]) -> Option<(f64, f64)> {
    if scores.is_empty() {
        return None;
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    Some((mean, median))
}

/// Raw-intensity band the hand-built blob detector responds to: above lung
/// tissue plus noise, below body tissue minus noise.
pub const BLOB_BAND: (f32, f32) = (0.3, 0.58);
/// Grad-CAM tap of [`blob_detector`].
pub const BLOB_DETECTOR_TAP: usize = 3;

/// A fixed-weight classifier whose class-2 logit is the mean of a tent
/// function over raw pixel intensity, zero outside [`BLOB_BAND`]. Only the
/// flanks of an opacity blob fall in that band, so its heatmap sits on the
/// blob. Expects standardized input like every other model.
pub fn blob_detector() -> Result<Network<f32>, XaiError> {
    let mut net = NetworkBuilder::new("blob-detector", &[1, IMAGE_SIZE, IMAGE_SIZE])
        .conv("band", 1, 3, 1, 0)
        .relu()
        .conv("tent", 3, 1, 1, 0)
        .relu()
        .global_avg_pool()
        .dense("fc", 1, 3)
        .build::<f32>()?;
    let (lo, hi) = BLOB_BAND;
    let peak = (lo + hi) / 2.0;
    let set = |net: &mut Network<f32>, name: &str, values: &[f32]| {
        let p = net.param_mut(name).expect("parameter exists by construction");
        p.value.data_mut().copy_from_slice(values);
    };
    // relu(x - c) on raw x is INPUT_SCALE * relu(z - (c - INPUT_CENTER) / INPUT_SCALE)
    // on standardized z; the scale is folded into the weight.
    set(&mut net, "band.weight", &[INPUT_SCALE; 3]);
    set(&mut net, "band.bias", &[INPUT_CENTER - lo, INPUT_CENTER - peak, INPUT_CENTER - hi]);
    set(&mut net, "tent.weight", &[1.0, -2.0, 1.0]);
    set(&mut net, "tent.bias", &[0.0]);
    set(&mut net, "fc.weight", &[0.0, 0.0, 1.0]);
    set(&mut net, "fc.bias", &[0.0; 3]);
    Ok(net)
}

/// Overlay bytes: P6 with the heatmap in red and the image in green and blue.
pub fn encode_overlay(image: &Tensor<f32>, heatmap: &Tensor<f32>) -> Result<Vec<u8>, XaiError> {
    let (is, hs) = (spatial(image), spatial(heatmap));
    let Some((h, w)) = is.filter(|_| is == hs) else {
        return Err(XaiError::Config(format!(
            "image {:?} and heatmap {:?} differ in size",
            image.shape(),
            heatmap.shape()
        )));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for (&p, &v) in image.data().iter().zip(heatmap.data()) {
        let gray = quantize(p);
        bytes.extend_from_slice(&[quantize(v), gray, gray]);
    }
    Ok(bytes)
}

pub fn save_overlay(image: &Tensor<f32>, heatmap: &Tensor<f32>, path: &Path) -> Result<(), XaiError> {
    let bytes = encode_overlay(image, heatmap)?;
    fs::write(path, bytes).map_err(|source| XaiError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a P6 file with maxval 255 as `(width, height, rgb bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), XaiError> {
    let bytes = fs::read(path).map_err(|source| XaiError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: &str| XaiError::Ppm {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.get(..2) != Some(b"P6") {
        return Err(bad("missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header field"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("no whitespace after header"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != 3 * w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", 3 * w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample_with_geometry;
    use crate::models::{build_network, ArchitectureId, IMAGE_SIZE};
    use crate::nn::NetworkBuilder;
    use proptest::prelude::*;

    fn t(shape: &[usize], v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_map_with_unit_gradient() {
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let map = class_activation_map(&a, &Tensor::full(&[1, 2, 2], 1.0)).unwrap();
        assert_eq!(normalize_max(&map).data(), &[0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn negative_or_zero_gradient_gives_zeros() {
        let a = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        for g in [-1.0, 0.0] {
            let map = class_activation_map(&a, &Tensor::full(&[1, 2, 2], g)).unwrap();
            let up = normalize_max(&upsample_bilinear(&map, 8, 8).unwrap());
            assert!(up.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bilinear_half_pixel_centers() {
        let up = upsample_bilinear(&t(&[1, 2], &[0.0, 1.0]), 1, 4).unwrap();
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
        let same = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(upsample_bilinear(&same, 2, 2).unwrap(), same);
    }

    #[test]
    fn focus_score_cases() {
        let mask = t(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(lung_focus_score(&t(&[2, 2], &[0.5, 1.0, 0.0, 0.0]), &mask).unwrap(), 1.0);
        assert_eq!(lung_focus_score(&Tensor::full(&[2, 2], 0.3), &mask).unwrap(), 0.5);
        assert_eq!(lung_focus_score(&Tensor::zeros(&[2, 2]), &mask).unwrap(), 0.0);
        assert!(lung_focus_score(&Tensor::zeros(&[3, 2]), &mask).is_err());
    }

    /// Logit 2 is the mean of a 1x1 conv that copies the input, so the map is
    /// the input itself.
    fn copy_network() -> Network<f32> {
        let mut net = NetworkBuilder::new("white-box", &[1, IMAGE_SIZE, IMAGE_SIZE])
            .conv("copy", 1, 1, 1, 0)
            .relu()
            .global_avg_pool()
            .dense("fc", 1, 3)
            .build::<f32>()
            .unwrap();
        net.param_mut("copy.weight").unwrap().value.fill(1.0);
        net.param_mut("copy.bias").unwrap().value.fill(0.0);
        let fc = net.param_mut("fc.weight").unwrap();
        fc.value.fill(0.0);
        fc.value.data_mut()[2] = 1.0;
        net.param_mut("fc.bias").unwrap().value.fill(0.0);
        net
    }

    #[test]
    fn white_box_heatmap_peaks_at_the_blob() {
        let mut net = copy_network();
        for seed in 0..10 {
            let (sample, geo) = generate_sample_with_geometry(seed, 2).unwrap();
            let (bx, by, r) = geo.blob.map(|(x, y, r)| (x as f64, y as f64, r as f64)).unwrap();
            let blob: Vec<f32> = (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|i| {
                    let (x, y) = ((i % IMAGE_SIZE) as f64, (i / IMAGE_SIZE) as f64);
                    let d2 = (x - bx).powi(2) + (y - by).powi(2);
                    ((-d2 / (2.0 * r * r)).exp() * sample.mask.data()[i] as f64) as f32
                })
                .collect();
            let input = t(&[1, 1, IMAGE_SIZE, IMAGE_SIZE], &blob);
            let heat = grad_cam(&mut net, &input, 2, 1).unwrap();
            let argmax = heat
                .values
                .data()
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0;
            let (ax, ay) = ((argmax % IMAGE_SIZE) as f64, (argmax / IMAGE_SIZE) as f64);
            assert!((ax - bx).abs() <= 1.0 && (ay - by).abs() <= 1.0, "seed {seed}: ({ax}, {ay}) vs ({bx}, {by})");
            // Classes 0 and 1 have zero weight, hence zero gradient.
            assert!(grad_cam(&mut net, &input, 0, 1).unwrap().values.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blob_detector_focuses_inside_the_lungs() {
        let mut net = blob_detector().unwrap();
        let scores: Vec<f64> = (0..20)
            .map(|seed| {
                let sample = crate::data::generate_sample(seed, 2).unwrap();
                let heat = grad_cam_sample(&mut net, &sample, 2, BLOB_DETECTOR_TAP).unwrap();
                lung_focus_score(&heat.values, &sample.mask).unwrap()
            })
            .collect();
        let (mean, _) = summarize(&scores).unwrap();
        assert!(mean >= 0.9, "mean focus {mean}, scores {scores:?}");
        // A normal sample has no intensities in the band at all.
        let normal = crate::data::generate_sample(3, 0).unwrap();
        let heat = grad_cam_sample(&mut net, &normal, 2, BLOB_DETECTOR_TAP).unwrap();
        assert!(heat.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tap_must_be_a_conv_map() {
        let (mut net, _) = build_network::<f32>(ArchitectureId::ClsCnnPlain, 0).unwrap();
        let input = Tensor::zeros(&[1, 1, IMAGE_SIZE, IMAGE_SIZE]);
        assert!(matches!(grad_cam(&mut net, &input, 0, 8), Err(XaiError::Config(_))));
        assert!(matches!(grad_cam(&mut net, &input, 0, 10), Err(XaiError::Config(_))));
        assert!(matches!(grad_cam(&mut net, &input, 3, 7), Err(XaiError::Config(_))));
        assert!(grad_cam(&mut net, &input, 0, 6).is_ok());
        let (mut seg, _) = build_network::<f32>(ArchitectureId::SegUnetMini, 0).unwrap();
        assert!(grad_cam(&mut seg, &input, 0, 11).is_err());
    }

    #[test]
    fn overlay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.ppm");
        let image = t(&[1, 2, 2], &[0.0, 0.5, 1.0, 0.2]);
        save_overlay(&image, &t(&[2, 2], &[0.0, 1.0, 0.25, 0.0]), &path).unwrap();
        let (w, h, px) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, [0, 0, 0, 255, 128, 128, 64, 255, 255, 0, 51, 51]);
        save_overlay(&image, &Tensor::zeros(&[2, 2]), &path).unwrap();
        assert!(read_ppm(&path).unwrap().2.chunks(3).all(|p| p[0] == 0));
        assert!(save_overlay(&image, &Tensor::zeros(&[3, 3]), &path).is_err());
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(summarize(&[0.2, 0.8, 0.5]), Some((0.5, 0.5)));
        assert_eq!(summarize(&[0.0, 1.0]), Some((0.5, 0.5)));
        assert_eq!(summarize(&[]), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn heatmaps_are_nonnegative_max_normalized_and_deterministic(
            seed: u64,
            class in 0usize..3,
            skip: bool,
        ) {
            let arch = if skip { ArchitectureId::ClsCnnSkip } else { ArchitectureId::ClsCnnPlain };
            let (mut net, _) = build_network::<f32>(arch, seed).unwrap();
            let mut rng = crate::seed::rng(seed ^ 0x5eed);
            let data: Vec<f32> = (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
            let input = t(&[1, 1, IMAGE_SIZE, IMAGE_SIZE], &data);
            let tap = arch.last_conv_activation().unwrap();
            let a = grad_cam(&mut net, &input, class, tap).unwrap();
            prop_assert_eq!(a.values.shape(), &[IMAGE_SIZE, IMAGE_SIZE]);
            prop_assert!(a.values.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let max = a.values.data().iter().copied().fold(0.0f32, f32::max);
            prop_assert!(max == 1.0 || a.values.data().iter().all(|&v| v == 0.0));
            let b = grad_cam(&mut net, &input, class, tap).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
