//! PSNR/SSIM evaluation with optional codec-roundtrip normalization.

use crate::codec::{decode, encode, CodecConfig};
use crate::image::Image;
use crate::{Error, Result};

/// Sentinel reported instead of infinity when MSE is zero.
pub const PSNR_SENTINEL: f64 = 99.0;

/// Peak signal-to-noise ratio in dB: `10 log10(max^2 / MSE)`.
pub fn psnr(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if max_value <= 0.0 {
        return Err(Error::Argument("max_value must be positive".into()));
    }
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_SENTINEL))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity: 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03, averaged over all fully-contained window positions.
pub fn ssim(a: &Image, b: &Image, max_value: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * max_value) * (SSIM_K1 * max_value);
    let c2 = (SSIM_K2 * max_value) * (SSIM_K2 * max_value);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    mu_a += wgt * a[[y0 + dy, x0 + dx]];
                    mu_b += wgt * b[[y0 + dy, x0 + dx]];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = win[dy] * win[dx];
                    let da = a[[y0 + dy, x0 + dx]] - mu_a;
                    let db = b[[y0 + dy, x0 + dx]] - mu_b;
                    var_a += wgt * da * da;
                    var_b += wgt * db * db;
                    cov += wgt * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-frame and mean scores for an evaluated clip.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub frame_indices: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Whether both sides were passed through the codec before scoring.
    pub codec_roundtrip: bool,
    /// Perceptual metrics are not reported; do not compare against
    /// perceptual-score columns elsewhere.
    pub lpips: Option<f64>,
}

/// Score predicted frames against ground truth at the given indices.
///
/// With `roundtrip` set, both prediction and reference pass through the
/// codec's encode/decode first, normalizing away codec loss.
pub fn evaluate_clip(
    predicted: &[Image],
    ground_truth: &[Image],
    indices: &[usize],
    cfg: &CodecConfig,
    roundtrip: bool,
) -> Result<EvalReport> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::Argument(format!(
            "{} predicted frames vs {} ground truth",
            predicted.len(),
            ground_truth.len()
        )));
    }
    let mut psnrs = Vec::with_capacity(indices.len());
    let mut ssims = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= predicted.len() {
            return Err(Error::Argument(format!(
                "frame index {i} out of range for {} frames",
                predicted.len()
            )));
        }
        let (p, g) = if roundtrip {
            let rp = decode(&encode(std::slice::from_ref(&predicted[i]), cfg)?, cfg)?;
            let rg = decode(&encode(std::slice::from_ref(&ground_truth[i]), cfg)?, cfg)?;
            (rp.into_iter().next().unwrap(), rg.into_iter().next().unwrap())
        } else {
            (predicted[i].clone(), ground_truth[i].clone())
        };
        psnrs.push(psnr(&p, &g, 1.0)?);
        ssims.push(ssim(&p, &g, 1.0)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(EvalReport {
        frame_indices: indices.to_vec(),
        mean_psnr: mean(&psnrs),
        mean_ssim: mean(&ssims),
        psnr: psnrs,
        ssim: ssims,
        codec_roundtrip: roundtrip,
        lpips: None,
    })
}

/// Write a one-line-per-clip CSV summary.
pub fn write_csv_summary(path: &std::path::Path, reports: &[(String, EvalReport)]) -> Result<()> {
    let mut out = String::from("clip,mean_psnr,mean_ssim\n");
    for (name, r) in reports {
        out.push_str(&format!("{name},{:.4},{:.6}\n", r.mean_psnr, r.mean_ssim));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecKind;
    use ndarray::Array2;

    fn pattern(h: usize, w: usize) -> Image {
        Array2::from_shape_fn((h, w), |(y, x)| ((y * 5 + x * 3) % 7) as f64 / 6.0)
    }

    #[test]
    fn identical_images_hit_sentinel() {
        let a = pattern(16, 16);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_SENTINEL);
    }

    #[test]
    fn known_psnr_value() {
        // 8-bit images differing by +1 everywhere: 10 log10(255^2) = 48.13 dB
        let a = Array2::from_elem((8, 8), 100.0);
        let b = Array2::from_elem((8, 8), 101.0);
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 48.13).abs() < 0.005, "got {v}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = pattern(12, 12);
        let b = pattern(12, 12).mapv(|v| 1.0 - v);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        assert!(psnr(&a, &pattern(11, 12), 1.0).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = pattern(16, 16);
        let v = ssim(&a, &a, 1.0).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn ssim_negative_image_scores_low() {
        let a = Array2::from_shape_fn((24, 24), |(y, x)| ((y / 3 + x / 3) % 2) as f64);
        let b = a.mapv(|v| 1.0 - v);
        let v = ssim(&a, &b, 1.0).unwrap();
        assert!(v < 0.1, "got {v}");
    }

    #[test]
    fn ssim_symmetric_and_size_checked() {
        let a = pattern(16, 16);
        let b = pattern(16, 16).mapv(|v| (v + 0.1).min(1.0));
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        assert!(ssim(&pattern(8, 8), &pattern(8, 8), 1.0).is_err());
    }

    #[test]
    fn ssim_invariant_to_common_offset() {
        let a = pattern(16, 16).mapv(|v| v * 0.5);
        let b = a.mapv(|v| (v * 0.9) + 0.02);
        let s1 = ssim(&a, &b, 1.0).unwrap();
        let s2 = ssim(&a.mapv(|v| v + 0.2), &b.mapv(|v| v + 0.2), 1.0).unwrap();
        assert!((s1 - s2).abs() < 0.05);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = pattern(16, 16);
        let noise = Array2::from_shape_fn((16, 16), |(y, x)| {
            if (y + x) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        });
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1] {
            let b = &a + &(&noise * amp);
            let v = psnr(&a, &b, 1.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn evaluate_clip_protocol() {
        let frames: Vec<Image> = (0..4).map(|_| pattern(16, 16)).collect();
        let cfg = CodecConfig {
            kind: CodecKind::LosslessRearrange,
            d: 4,
            upsample: 1,
        };
        let rep = evaluate_clip(&frames, &frames, &[1, 2], &cfg, false).unwrap();
        assert_eq!(rep.psnr, vec![PSNR_SENTINEL; 2]);
        assert_eq!(rep.ssim, vec![1.0; 2]);
        assert_eq!(rep.mean_psnr, PSNR_SENTINEL);

        // lossless roundtrip must not change the report
        let noisy: Vec<Image> = frames.iter().map(|f| f.mapv(|v| v * 0.9)).collect();
        let plain = evaluate_clip(&noisy, &frames, &[0, 3], &cfg, false).unwrap();
        let rt = evaluate_clip(&noisy, &frames, &[0, 3], &cfg, true).unwrap();
        assert_eq!(plain.psnr, rt.psnr);
        assert_eq!(plain.ssim, rt.ssim);
        let mean = (plain.psnr[0] + plain.psnr[1]) / 2.0;
        assert!((plain.mean_psnr - mean).abs() < 1e-12);

        assert!(evaluate_clip(&noisy, &frames, &[9], &cfg, false).is_err());
    }
}
