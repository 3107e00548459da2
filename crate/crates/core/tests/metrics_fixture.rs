//! SSIM and PSNR against values computed with scikit-image 0.25
//! (`structural_similarity(gaussian_weights=True, sigma=1.5,
//! use_sample_covariance=False, data_range=1, channel_axis=2)`).

use duet_core::image::Image;
use duet_core::metrics::{psnr, ssim};

fn hashed(w: usize, h: usize, seed: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h as u64 {
        for x in 0..w as u64 {
            for c in 0..3u64 {
                let v = ((x * 73856093) ^ (y * 19349663) ^ (c * 83492791) ^ (seed * 2654435761)) % 1000;
                out.push(v as f64 / 999.0);
            }
        }
    }
    out
}

#[test]
fn matches_reference_implementation() {
    let cases = [
        (24, 20, 1, 2, 0.1, 0.9893566152591884, 27.844338599834803),
        (16, 16, 3, 4, 0.5, 0.5952503114463731, 13.717210033971291),
        (31, 12, 5, 6, 0.9, 0.013573450453384837, 8.619694434268624),
    ];
    for (w, h, s1, s2, t, want_ssim, want_psnr) in cases {
        let a = hashed(w, h, s1);
        let b: Vec<f64> = a.iter().zip(hashed(w, h, s2)).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        let a = Image::from_data(w, h, a).unwrap();
        let b = Image::from_data(w, h, b).unwrap();
        let s = ssim(&a, &b).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((s - want_ssim).abs() < 1e-9, "{w}x{h}: ssim {s} vs {want_ssim}");
        assert!((p - want_psnr).abs() < 1e-9, "{w}x{h}: psnr {p} vs {want_psnr}");
    }
}
