//! Edge-preservation measure QAB/F.
//!
//! Sobel responses give edge strength `g = sqrt(gx² + gy²)` and orientation
//! `α = atan(gy / gx)`. For each source the relative strength and
//! orientation agreement with the fused image pass through sigmoids, and the
//! products are averaged with the source edge strengths as weights.

use std::f64::consts::FRAC_PI_2;

use super::Gray8;
use crate::error::{Error, Result};

pub const QABF_GAMMA: f64 = 1.0;
pub const QABF_KAPPA_G: f64 = -10.0;
pub const QABF_SIGMA_G: f64 = 0.5;
pub const QABF_KAPPA_A: f64 = -22.0;
pub const QABF_SIGMA_A: f64 = 0.8;

struct Edges {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn reflect(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

fn edges(img: &Gray8) -> Edges {
    let (h, w) = (img.height(), img.width());
    let px = |r: isize, c: isize| img.get(reflect(r, h), reflect(c, w)) as f64;
    let mut strength = Vec::with_capacity(h * w);
    let mut angle = Vec::with_capacity(h * w);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1))
                - (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1));
            let gy = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1))
                - (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1));
            strength.push((gx * gx + gy * gy).sqrt());
            angle.push(if gx == 0.0 { FRAC_PI_2 } else { (gy / gx).atan() });
        }
    }
    Edges { strength, angle }
}

fn preservation(src: &Edges, fused: &Edges, i: usize) -> f64 {
    let (ga, gf) = (src.strength[i], fused.strength[i]);
    let g = if ga > gf {
        gf / ga
    } else if ga < gf {
        ga / gf
    } else {
        1.0
    };
    let a = 1.0 - (src.angle[i] - fused.angle[i]).abs() / FRAC_PI_2;
    let qg = QABF_GAMMA / (1.0 + (QABF_KAPPA_G * (g - QABF_SIGMA_G)).exp());
    let qa = QABF_GAMMA / (1.0 + (QABF_KAPPA_A * (a - QABF_SIGMA_A)).exp());
    qg * qa
}

/// Edge-strength-weighted preservation of `a` and `b` edges in `f`.
/// Returns 0 when neither source has any edge.
pub fn metric_qabf(f: &Gray8, a: &Gray8, b: &Gray8) -> Result<f64> {
    for x in [a, b] {
        if x.height() != f.height() || x.width() != f.width() {
            return Err(Error::dim("metric_qabf", "image sizes differ".to_string()));
        }
    }
    if f.height() < 2 || f.width() < 2 {
        return Err(Error::contract("metric_qabf needs at least 2×2"));
    }
    let (ef, ea, eb) = (edges(f), edges(a), edges(b));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..f.len() {
        let (wa, wb) = (ea.strength[i], eb.strength[i]);
        num += preservation(&ea, &ef, i) * wa + preservation(&eb, &ef, i) * wb;
        den += wa + wb;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}
