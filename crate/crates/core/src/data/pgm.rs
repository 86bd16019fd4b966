//! Binary PGM (P5) images, 8-bit.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::tensor::Tensor;

/// `[0, 1]` to 8 bits, rounding half up; out-of-range values are clamped.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a `[1, H, W]` or `[H, W]` tensor as P5.
pub fn write_pgm(path: &Path, image: &Tensor<f32>) -> Result<(), DataError> {
    let (h, w) = match *image.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(DataError::Pgm {
                path: path.to_path_buf(),
                reason: format!("expected [1, H, W] or [H, W], got {:?}", image.shape()),
            })
        }
    };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

/// Reads a P5 file into a `[1, H, W]` tensor with values `byte / maxval`.
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |reason: &str| DataError::Pgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = [0usize; 3];
    if bytes.get(..2) != Some(b"P5") {
        return Err(bad("missing P5 magic"));
    }
    pos += 2;
    for field in fields.iter_mut() {
        // whitespace and `#` comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("non-numeric header field"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported dimensions or maxval"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let data = &bytes[pos..];
    if data.len() < w * h {
        return Err(bad(&format!("truncated data: {} of {} bytes", data.len(), w * h)));
    }
    let scale = maxval as f32;
    let values = data[..w * h].iter().map(|&b| b as f32 / scale).collect();
    Ok(Tensor::from_vec(&[1, h, w], values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_rounds_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn constant_half_image_and_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &Tensor::full(&[1, 64, 64], 0.5)).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n64 64\n255\n".len();
        assert_eq!(bytes.len(), header + 4096);
        assert!(bytes[header..].iter().all(|&b| b == 128));
    }

    #[test]
    fn round_trip_within_one_level_and_masks_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        let vals: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).fract()).collect();
        let img = Tensor::from_vec(&[1, 8, 8], vals).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert!(img.max_abs_diff(&back).unwrap() <= 1.0 / 255.0);

        let mask = img.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        write_pgm(&path, &mask).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), mask);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# note\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm(&path).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn malformed_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pgm");
        fs::write(&path, b"P2\n2 2\n255\n").unwrap();
        assert!(matches!(read_pgm(&path), Err(DataError::Pgm { .. })));
        fs::write(&path, b"P5\n2 2\n255\n\x00\x00\x00").unwrap();
        let err = read_pgm(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }
}
