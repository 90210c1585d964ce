//! Flow evaluation metrics and bit-exact file formats.
//!
//! `.flo` files use the Middlebury layout: magic float 202021.25 ("PIEH"),
//! int32 width and height, then row-major interleaved (u,v) little-endian
//! f32 pairs. Images are binary PPM (P6, maxval 255). All writes go through
//! a temp file and a rename.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, RfpmError};
use crate::tensor::Tensor;

/// Magic float at the head of a `.flo` file; its bytes spell "PIEH".
pub const FLO_MAGIC: f32 = 202021.25;

/// Metrics over the valid pixels of one or more flow fields.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalResult {
    /// Mean end-point error in pixels.
    pub aepe: f64,
    /// Outlier percentage (KITTI rule: EPE > 3 px and > 5% of |gt|).
    pub f1_all: f64,
    /// Number of valid pixels.
    pub count: usize,
}

fn check_flow_pair(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<(usize, usize, usize)> {
    let (pb, pc, ph, pw) = pred.dims4()?;
    if pc != 2 {
        return Err(RfpmError::Shape(format!(
            "flow fields need 2 channels, got {pc}"
        )));
    }
    if gt.shape() != pred.shape() {
        return Err(RfpmError::Shape(format!(
            "pred shape {:?} != gt shape {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (vb, vc, vh, vw) = valid.dims4()?;
    if vb != pb || vc != 1 || vh != ph || vw != pw {
        return Err(RfpmError::Shape(format!(
            "valid mask shape {:?} does not match flow {:?}",
            valid.shape(),
            pred.shape()
        )));
    }
    Ok((pb, ph, pw))
}

/// Per-pixel end-point errors and ground-truth magnitudes over valid pixels.
fn epe_iter<'a>(
    pred: &'a Tensor,
    gt: &'a Tensor,
    valid: &'a Tensor,
    b: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    (0..b).flat_map(move |bi| {
        (0..h).flat_map(move |y| {
            (0..w).filter_map(move |x| {
                if valid.at4(bi, 0, y, x) == 0.0 {
                    return None;
                }
                let du = pred.at4(bi, 0, y, x) - gt.at4(bi, 0, y, x);
                let dv = pred.at4(bi, 1, y, x) - gt.at4(bi, 1, y, x);
                let mag = gt.at4(bi, 0, y, x).hypot(gt.at4(bi, 1, y, x));
                Some((du.hypot(dv), mag))
            })
        })
    })
}

/// Average end-point error over valid pixels.
pub fn aepe(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<f64> {
    let (b, h, w) = check_flow_pair(pred, gt, valid)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (epe, _) in epe_iter(pred, gt, valid, b, h, w) {
        sum += epe;
        n += 1;
    }
    if n == 0 {
        return Err(RfpmError::Degenerate("aepe over zero valid pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Percentage of outliers: pixels with EPE > 3 px AND EPE > 5% of the
/// ground-truth magnitude.
pub fn f1_all(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<f64> {
    let (b, h, w) = check_flow_pair(pred, gt, valid)?;
    let mut outliers = 0usize;
    let mut n = 0usize;
    for (epe, mag) in epe_iter(pred, gt, valid, b, h, w) {
        if epe > 3.0 && epe > 0.05 * mag {
            outliers += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(RfpmError::Degenerate("f1_all over zero valid pixels".into()));
    }
    Ok(100.0 * outliers as f64 / n as f64)
}

pub fn evaluate(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<EvalResult> {
    let (b, h, w) = check_flow_pair(pred, gt, valid)?;
    let mut sum = 0.0;
    let mut outliers = 0usize;
    let mut n = 0usize;
    for (epe, mag) in epe_iter(pred, gt, valid, b, h, w) {
        sum += epe;
        if epe > 3.0 && epe > 0.05 * mag {
            outliers += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(RfpmError::Degenerate("metrics over zero valid pixels".into()));
    }
    Ok(EvalResult {
        aepe: sum / n as f64,
        f1_all: 100.0 * outliers as f64 / n as f64,
        count: n,
    })
}

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a single-batch (1,2,H,W) flow field in Middlebury `.flo` format.
pub fn write_flo(flow: &Tensor, path: &Path) -> Result<()> {
    let (b, c, h, w) = flow.dims4()?;
    if b != 1 || c != 2 {
        return Err(RfpmError::Shape(format!(
            "write_flo expects (1,2,H,W), got {:?}",
            flow.shape()
        )));
    }
    if !flow.is_finite() {
        return Err(RfpmError::Numeric("write_flo with non-finite values".into()));
    }
    let mut bytes = Vec::with_capacity(12 + h * w * 8);
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            bytes.extend_from_slice(&(flow.at4(0, 0, y, x) as f32).to_le_bytes());
            bytes.extend_from_slice(&(flow.at4(0, 1, y, x) as f32).to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

/// Reads a `.flo` file back into a (1,2,H,W) tensor.
pub fn read_flo(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(RfpmError::Format(format!(
            "{}: shorter than the 12-byte header",
            path.display()
        )));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(RfpmError::Format(format!(
            "{}: bad magic {magic} (expected {FLO_MAGIC})",
            path.display()
        )));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(RfpmError::Format(format!(
            "{}: invalid dimensions {w}x{h}",
            path.display()
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + h * w * 8;
    if bytes.len() != expected {
        return Err(RfpmError::Format(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut flow = Tensor::zeros(&[1, 2, h, w]);
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            let u = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let v = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            flow.set4(0, 0, y, x, u as f64);
            flow.set4(0, 1, y, x, v as f64);
            off += 8;
        }
    }
    Ok(flow)
}

/// 8-bit RGB image buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Writes a binary PPM (P6, maxval 255).
pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    atomic_write(path, &bytes)
}

/// Reads a binary PPM (P6, maxval 255), tolerating comments and arbitrary
/// whitespace in the header.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(RfpmError::Format(format!(
            "{}: not a binary PPM",
            path.display()
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(RfpmError::Format(format!(
                "{}: malformed PPM header",
                path.display()
            )));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| RfpmError::Format("PPM header field overflow".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(RfpmError::Format(format!(
            "{}: only maxval 255 is supported, got {maxval}",
            path.display()
        )));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(RfpmError::Format(format!(
            "{}: truncated pixel data",
            path.display()
        )));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

/// Renders a (1,2,H,W) flow field with the color-wheel encoding: hue from
/// `atan2(v,u)`, saturation from magnitude over `max_magnitude` (clamped),
/// full value. Zero flow maps to white.
pub fn flow_to_color(flow: &Tensor, max_magnitude: Option<f64>) -> Result<RgbImage> {
    let (b, c, h, w) = flow.dims4()?;
    if b != 1 || c != 2 {
        return Err(RfpmError::Shape(format!(
            "flow_to_color expects (1,2,H,W), got {:?}",
            flow.shape()
        )));
    }
    let max_mag = match max_magnitude {
        Some(m) => {
            if m <= 0.0 {
                return Err(RfpmError::Parameter(
                    "max_magnitude must be positive".into(),
                ));
            }
            m
        }
        None => {
            let mut m = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    m = m.max(flow.at4(0, 0, y, x).hypot(flow.at4(0, 1, y, x)));
                }
            }
            m
        }
    };
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let u = flow.at4(0, 0, y, x);
            let v = flow.at4(0, 1, y, x);
            let mag = u.hypot(v);
            let sat = if max_mag > 0.0 {
                (mag / max_mag).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let hue = (v.atan2(u) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
            img.set(x, y, hsv_to_rgb(hue, sat, 1.0));
        }
    }
    Ok(img)
}

/// `h` in [0,1), `s` and `v` in [0,1].
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn valid_ones(b: usize, h: usize, w: usize) -> Tensor {
        Tensor::ones(&[b, 1, h, w])
    }

    #[test]
    fn aepe_examples() {
        let gt = Tensor::rand_uniform(&[1, 2, 4, 4], 2.0, &mut ChaCha8Rng::seed_from_u64(1));
        let valid = valid_ones(1, 4, 4);
        assert_eq!(aepe(&gt, &gt, &valid).unwrap(), 0.0);

        // constant (3,4) offset -> 3-4-5 triangle
        let mut pred = gt.clone();
        for y in 0..4 {
            for x in 0..4 {
                pred.set4(0, 0, y, x, gt.at4(0, 0, y, x) + 3.0);
                pred.set4(0, 1, y, x, gt.at4(0, 1, y, x) + 4.0);
            }
        }
        assert!((aepe(&pred, &gt, &valid).unwrap() - 5.0).abs() < 1e-12);

        // half the pixels off by (1,0), half exact -> 0.5
        let mut pred2 = gt.clone();
        for y in 0..4 {
            for x in 0..2 {
                pred2.set4(0, 0, y, x, gt.at4(0, 0, y, x) + 1.0);
            }
        }
        assert!((aepe(&pred2, &gt, &valid).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aepe_zero_valid_is_degenerate() {
        let gt = Tensor::zeros(&[1, 2, 2, 2]);
        let none = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            aepe(&gt, &gt, &none),
            Err(RfpmError::Degenerate(_))
        ));
    }

    #[test]
    fn f1_rule_cases() {
        let valid = valid_ones(1, 3, 3);
        // |gt| = 100, error 4 px: 4 > 3 but 4 < 5% of 100 -> inlier
        let gt_big = {
            let mut t = Tensor::zeros(&[1, 2, 3, 3]);
            for y in 0..3 {
                for x in 0..3 {
                    t.set4(0, 0, y, x, 100.0);
                }
            }
            t
        };
        let mut pred = gt_big.clone();
        for y in 0..3 {
            for x in 0..3 {
                pred.set4(0, 1, y, x, 4.0);
            }
        }
        assert_eq!(f1_all(&pred, &gt_big, &valid).unwrap(), 0.0);

        // |gt| = 10, error 4 px: 4 > 3 and 4 > 0.5 -> outlier
        let gt_small = {
            let mut t = Tensor::zeros(&[1, 2, 3, 3]);
            for y in 0..3 {
                for x in 0..3 {
                    t.set4(0, 0, y, x, 10.0);
                }
            }
            t
        };
        let mut pred2 = gt_small.clone();
        for y in 0..3 {
            for x in 0..3 {
                pred2.set4(0, 1, y, x, 4.0);
            }
        }
        assert_eq!(f1_all(&pred2, &gt_small, &valid).unwrap(), 100.0);

        assert_eq!(f1_all(&gt_big, &gt_big, &valid).unwrap(), 0.0);
    }

    #[test]
    fn flo_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");

        // values representable in f32 round-trip bit-exactly
        let mut flow = Tensor::zeros(&[1, 2, 3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in flow.data_mut().iter_mut() {
            *v = Tensor::rand_uniform(&[1], 8.0, &mut rng).data()[0] as f32 as f64;
        }
        write_flo(&flow, &path).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back, flow);

        // 2x2 zero flow file is exactly 44 bytes
        let z = Tensor::zeros(&[1, 2, 2, 2]);
        let zpath = dir.path().join("z.flo");
        write_flo(&z, &zpath).unwrap();
        assert_eq!(fs::metadata(&zpath).unwrap().len(), 44);
    }

    #[test]
    fn flo_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let short = dir.path().join("short.flo");
        fs::write(&short, [0u8; 8]).unwrap();
        assert!(matches!(read_flo(&short), Err(RfpmError::Format(_))));

        let bad = dir.path().join("bad.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 32]);
        fs::write(&bad, bytes).unwrap();
        assert!(matches!(read_flo(&bad), Err(RfpmError::Format(_))));

        let truncated = dir.path().join("trunc.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        fs::write(&truncated, bytes).unwrap();
        assert!(matches!(read_flo(&truncated), Err(RfpmError::Format(_))));
    }

    #[test]
    fn color_zero_flow_is_white() {
        let flow = Tensor::zeros(&[1, 2, 4, 6]);
        let img = flow_to_color(&flow, None).unwrap();
        assert_eq!(img.width, 6);
        assert_eq!(img.height, 4);
        assert!(img.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn color_opposite_flows_have_complementary_hues() {
        let mut flow = Tensor::zeros(&[1, 2, 1, 2]);
        flow.set4(0, 0, 0, 0, 5.0);
        flow.set4(0, 0, 0, 1, -5.0);
        let img = flow_to_color(&flow, Some(5.0)).unwrap();
        let a = img.get(0, 0);
        let b = img.get(1, 0);
        // hues 180 degrees apart: fully saturated channels swap dominance
        assert_ne!(a, b);
        let dom = |p: [u8; 3]| p.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
        assert_ne!(dom(a), dom(b));
    }

    #[test]
    fn ppm_round_trip_and_independent_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut img = RgbImage::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                img.set(x, y, [(x * 40) as u8, (y * 70) as u8, 200]);
            }
        }
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img);

        // the `image` crate acts as the independent decoder
        let decoded = image::open(&path).unwrap().to_rgb8();
        assert_eq!(decoded.width(), 5);
        assert_eq!(decoded.height(), 3);
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(decoded.get_pixel(x, y).0, img.get(x as usize, y as usize));
            }
        }
    }

    proptest! {
        /// aepe is invariant under a simultaneous horizontal flip (with u negation).
        #[test]
        fn prop_aepe_flip_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = Tensor::rand_uniform(&[1, 2, 4, 6], 3.0, &mut rng);
            let gt = Tensor::rand_uniform(&[1, 2, 4, 6], 3.0, &mut rng);
            let valid = valid_ones(1, 4, 6);
            let flip = |t: &Tensor| {
                let mut out = Tensor::zeros(&[1, 2, 4, 6]);
                for y in 0..4 {
                    for x in 0..6 {
                        out.set4(0, 0, y, x, -t.at4(0, 0, y, 5 - x));
                        out.set4(0, 1, y, x, t.at4(0, 1, y, 5 - x));
                    }
                }
                out
            };
            let a = aepe(&pred, &gt, &valid).unwrap();
            let b = aepe(&flip(&pred), &flip(&gt), &valid).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        /// f1_all is monotone under scaling the error field up.
        #[test]
        fn prop_f1_monotone_in_error_scale(seed in 0u64..500, scale in 1.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = Tensor::rand_uniform(&[1, 2, 4, 4], 10.0, &mut rng);
            let err = Tensor::rand_uniform(&[1, 2, 4, 4], 5.0, &mut rng);
            let valid = valid_ones(1, 4, 4);
            let apply = |s: f64| {
                let mut p = gt.clone();
                for (pv, ev) in p.data_mut().iter_mut().zip(err.data()) {
                    *pv += s * ev;
                }
                p
            };
            let base = f1_all(&apply(1.0), &gt, &valid).unwrap();
            let scaled = f1_all(&apply(scale), &gt, &valid).unwrap();
            prop_assert!(scaled >= base);
        }
    }
}
