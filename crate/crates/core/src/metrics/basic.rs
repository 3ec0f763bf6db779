//! Histogram and difference statistics: EN, SD, SF, MI.

use super::Gray8;
use crate::error::{Error, Result};

fn histogram(img: &Gray8) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in img.data() {
        h[v as usize] += 1;
    }
    h
}

fn entropy_of(counts: impl Iterator<Item = u64>, total: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy of the 256-bin histogram, in bits.
pub fn metric_en(img: &Gray8) -> f64 {
    entropy_of(histogram(img).into_iter(), img.len() as f64)
}

/// Population standard deviation of the 8-bit values.
pub fn metric_sd(img: &Gray8) -> f64 {
    let n = img.len() as f64;
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// `sqrt(RF² + CF²)`, each term averaged over the differences that exist.
pub fn metric_sf(img: &Gray8) -> f64 {
    let (h, w) = (img.height(), img.width());
    let px = |r: usize, c: usize| img.get(r, c) as f64;
    let mut rf = 0.0;
    if w > 1 {
        for r in 0..h {
            for c in 1..w {
                rf += (px(r, c) - px(r, c - 1)).powi(2);
            }
        }
        rf /= (h * (w - 1)) as f64;
    }
    let mut cf = 0.0;
    if h > 1 {
        for r in 1..h {
            for c in 0..w {
                cf += (px(r, c) - px(r - 1, c)).powi(2);
            }
        }
        cf /= ((h - 1) * w) as f64;
    }
    (rf + cf).sqrt()
}

/// Mutual information of two equally sized images from their joint histogram.
pub fn mutual_information(x: &Gray8, y: &Gray8) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::dim(
            "mutual_information",
            format!("{}x{} vs {}x{}", x.height(), x.width(), y.height(), y.width()),
        ));
    }
    let mut joint = vec![0u64; 256 * 256];
    for (&a, &b) in x.data().iter().zip(y.data()) {
        joint[a as usize * 256 + b as usize] += 1;
    }
    let n = x.len() as f64;
    let (hx, hy) = (histogram(x), histogram(y));
    let mut mi = 0.0;
    for a in 0..256 {
        if hx[a] == 0 {
            continue;
        }
        for b in 0..256 {
            let c = joint[a * 256 + b];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (pxy * n * n / (hx[a] as f64 * hy[b] as f64)).log2();
        }
    }
    Ok(mi.max(0.0))
}

/// `MI(f; a) + MI(f; b)`.
pub fn metric_mi(f: &Gray8, a: &Gray8, b: &Gray8) -> Result<f64> {
    Ok(mutual_information(f, a)? + mutual_information(f, b)?)
}
