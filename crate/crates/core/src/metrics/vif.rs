//! Pixel-domain multiscale visual information fidelity.
//!
//! Four scales; at scale `s` (1-based) the Gaussian window is
//! `N = 2^(5-s) + 1` wide with standard deviation `N/5`. From the second
//! scale on, both images are low-passed with that window ("valid" extent)
//! and decimated by two before the local statistics are taken.

use super::Gray8;
use crate::error::{Error, Result};

pub const VIF_SCALES: usize = 4;
pub const VIF_NOISE_VAR: f64 = 2.0;
const EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_gray(g: &Gray8) -> Self {
        Self {
            h: g.height(),
            w: g.width(),
            v: g.data().iter().map(|&x| x as f64).collect(),
        }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w);
        for r in (0..self.h).step_by(2) {
            for c in (0..self.w).step_by(2) {
                v.push(self.v[r * self.w + c]);
            }
        }
        Plane { h, w, v }
    }
}

fn window(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" correlation with the outer product of `k` with itself.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (h, w) = (p.h - n + 1, p.w - n + 1);
    let mut tmp = vec![0.0; p.h * w];
    for r in 0..p.h {
        for c in 0..w {
            tmp[r * w + c] = (0..n).map(|j| k[j] * p.v[r * p.w + c + j]).sum();
        }
    }
    let mut v = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            v[r * w + c] = (0..n).map(|i| k[i] * tmp[(r + i) * w + c]).sum();
        }
    }
    Plane { h, w, v }
}

fn window_width(scale: usize) -> usize {
    (1 << (VIF_SCALES - scale + 1)) + 1
}

/// Smallest square side for which every scale has at least one window.
pub fn vif_min_side() -> usize {
    (1..).find(|&n| scales_fit(n, n)).expect("some size fits")
}

fn scales_fit(mut h: usize, mut w: usize) -> bool {
    for s in 1..=VIF_SCALES {
        let n = window_width(s);
        if s > 1 {
            if h < n || w < n {
                return false;
            }
            h = (h - n + 1).div_ceil(2);
            w = (w - n + 1).div_ceil(2);
        }
        if h < n || w < n {
            return false;
        }
    }
    true
}

/// Information fidelity of `dist` with respect to `reference`.
pub fn vif_single(reference: &Gray8, dist: &Gray8) -> Result<f64> {
    if reference.height() != dist.height() || reference.width() != dist.width() {
        return Err(Error::dim("metric_vif", "image sizes differ".to_string()));
    }
    if !scales_fit(reference.height(), reference.width()) {
        return Err(Error::contract(format!(
            "metric_vif needs at least {0}×{0}, got {1}×{2}",
            vif_min_side(),
            reference.height(),
            reference.width()
        )));
    }
    let (mut r, mut d) = (Plane::from_gray(reference), Plane::from_gray(dist));
    let (mut num, mut den) = (0.0, 0.0);
    for s in 1..=VIF_SCALES {
        let k = window(window_width(s));
        if s > 1 {
            r = filter_valid(&r, &k).decimate();
            d = filter_valid(&d, &k).decimate();
        }
        let mu1 = filter_valid(&r, &k);
        let mu2 = filter_valid(&d, &k);
        let e11 = filter_valid(&r.map2(&r, |a, b| a * b), &k);
        let e22 = filter_valid(&d.map2(&d, |a, b| a * b), &k);
        let e12 = filter_valid(&r.map2(&d, |a, b| a * b), &k);
        for i in 0..mu1.v.len() {
            let (m1, m2) = (mu1.v[i], mu2.v[i]);
            let mut s1 = (e11.v[i] - m1 * m1).max(0.0);
            let s2 = (e22.v[i] - m2 * m2).max(0.0);
            let s12 = e12.v[i] - m1 * m2;
            let mut g = s12 / (s1 + EPS);
            let mut sv = s2 - g * s12;
            if s1 < EPS {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            let sv = sv.max(EPS);
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    Ok(if den > 0.0 { num / den } else { 1.0 })
}

/// `VIF(a → f) + VIF(b → f)`.
pub fn metric_vif(f: &Gray8, a: &Gray8, b: &Gray8) -> Result<f64> {
    Ok(vif_single(a, f)? + vif_single(b, f)?)
}
