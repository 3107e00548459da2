//! Full-reference image metrics: PSNR and windowed SSIM.

use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP: f64 = 100.0;

fn check_pair(reference: &Image, candidate: &Image) -> Result<()> {
    if !reference.same_shape(candidate) {
        return Err(Error::invalid(
            "image.shape",
            format!(
                "{}x{} vs {}x{}",
                reference.width, reference.height, candidate.width, candidate.height
            ),
        ));
    }
    for (name, img) in [("reference", reference), ("candidate", candidate)] {
        if let Some(i) = img.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                field: name.into(),
                index: i,
            });
        }
    }
    Ok(())
}

pub fn mse(reference: &Image, candidate: &Image) -> Result<f64> {
    check_pair(reference, candidate)?;
    let n = reference.data.len() as f64;
    Ok(reference
        .data
        .iter()
        .zip(&candidate.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(reference: &Image, candidate: &Image) -> Result<f64> {
    let m = mse(reference, candidate)?;
    Ok(if m == 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

const WIN: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WIN] {
    let mut w = [0.0; WIN];
    let c = (WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over valid windows only.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; WIN]) -> Vec<f64> {
    let ow = w - WIN + 1;
    let oh = h - WIN + 1;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..WIN).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WIN).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on each channel,
/// averaged over channels.
pub fn ssim(reference: &Image, candidate: &Image) -> Result<f64> {
    check_pair(reference, candidate)?;
    let (w, h) = (reference.width, reference.height);
    if w.min(h) < WIN {
        return Err(Error::invalid("image.size", format!("min side {} < {WIN}", w.min(h))));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..3 {
        let a: Vec<f64> = reference.data.iter().skip(c).step_by(3).copied().collect();
        let b: Vec<f64> = candidate.data.iter().skip(c).step_by(3).copied().collect();
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let (mu_a, mu_b) = (filter(&a, w, h, &k), filter(&b, w, h, &k));
        let (e_aa, e_bb, e_ab) = (filter(&aa, w, h, &k), filter(&bb, w, h, &k), filter(&ab, w, h, &k));
        let n = mu_a.len();
        let mut s = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            s += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
        total += s / n as f64;
    }
    Ok((total / 3.0).clamp(-1.0, 1.0))
}
