//! Operation-count scaling of the two token mixers.
//!
//! Every op adds its arithmetic cost to the tape's counter, so running a
//! mixer once at several token counts gives an exact cost curve. A least-
//! squares line and parabola are fitted to that curve.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::Result;
use crate::nn::attention::{apply_attention, channel_attention, project_qkv, QkvProjection};
use crate::nn::ssm::{selective_scan, SsmParams};
use crate::nn::{Ctx, FeatureMap, Provenance};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Token counts (`H·W` for attention, `L` for the scan).
pub const TOKEN_COUNTS: [usize; 3] = [64, 256, 1024];
pub const MIN_R2: f64 = 0.999;
/// Largest allowed `|c₂·n²| / |c₁·n|` at the largest `n`.
pub const MAX_QUADRATIC_SHARE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixer {
    ChannelAttention,
    SelectiveScan,
}

impl Mixer {
    pub fn label(self) -> &'static str {
        match self {
            Mixer::ChannelAttention => "channel_attention",
            Mixer::SelectiveScan => "selective_scan",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub tokens: usize,
    pub flops: u64,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct Scaling {
    pub mixer: Mixer,
    pub channels: usize,
    pub samples: Vec<Sample>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Quadratic term's share of the linear term at the largest count.
    pub quadratic_share: f64,
}

impl Scaling {
    pub fn linear(&self) -> bool {
        self.r2 > MIN_R2 && self.quadratic_share <= MAX_QUADRATIC_SHARE
    }
}

/// Square-ish grid with exactly `n` cells.
fn grid(n: usize) -> (usize, usize) {
    let mut h = (n as f64).sqrt() as usize;
    while !n.is_multiple_of(h) {
        h -= 1;
    }
    (h, n / h)
}

/// One forward pass; returns its operation count and wall time.
pub fn run_once(mixer: Mixer, channels: usize, tokens: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let g = Graph::new();
    let t0;
    match mixer {
        Mixer::ChannelAttention => {
            let p = QkvProjection::new(&mut Init::new(&mut store, &mut rng), channels)?;
            let (h, w) = grid(tokens);
            let x = Tensor::from_fn(&[channels, h, w], |_| rng.random_range(-1.0..1.0));
            let cx = Ctx::new(&g, &store);
            let x = FeatureMap::new(&g, g.constant(x), Provenance::Shallow)?;
            t0 = Instant::now();
            let t = project_qkv(&cx, &x, &p)?;
            let (_, a) = channel_attention(&cx, &t)?;
            apply_attention(&cx, a, t.v)?;
        }
        Mixer::SelectiveScan => {
            let p = SsmParams::new(&mut Init::new(&mut store, &mut rng), channels, channels)?;
            let x = Tensor::from_fn(&[tokens, channels], |_| rng.random_range(-1.0..1.0));
            let cx = Ctx::new(&g, &store);
            t0 = Instant::now();
            selective_scan(&cx, g.constant(x), &p)?;
        }
    }
    Ok(Sample {
        tokens,
        flops: g.flops(),
        elapsed: t0.elapsed(),
    })
}

/// Least-squares polynomial fit of the given degree; coefficients from the
/// constant term up.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Vec<f64> {
    let k = degree + 1;
    // normal equations, solved by Gauss-Jordan elimination with pivoting
    let mut m = vec![vec![0.0; k + 1]; k];
    for (&x, &y) in xs.iter().zip(ys) {
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().take(k).enumerate() {
                *cell += x.powi((i + j) as i32);
            }
            row[k] += y * x.powi(i as i32);
        }
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .expect("non-empty");
        m.swap(col, piv);
        let d = m[col][col];
        for v in m[col].iter_mut() {
            *v /= d;
        }
        for r in 0..k {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                for (cell, p) in m[r].iter_mut().zip(&pivot_row) {
                    *cell -= f * p;
                }
            }
        }
    }
    m.iter().map(|row| row[k]).collect()
}

pub fn r_squared(xs: &[f64], ys: &[f64], coef: &[f64]) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let fit: f64 = coef.iter().enumerate().map(|(i, c)| c * x.powi(i as i32)).sum();
        ss_res += (y - fit).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn fit(mixer: Mixer, channels: usize, samples: Vec<Sample>) -> Scaling {
    let xs: Vec<f64> = samples.iter().map(|s| s.tokens as f64).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.flops as f64).collect();
    let lin = polyfit(&xs, &ys, 1);
    let quad = polyfit(&xs, &ys, 2);
    let n = xs.iter().copied().fold(0.0, f64::max);
    let quadratic_share = if quad[1] == 0.0 {
        f64::INFINITY
    } else {
        (quad[2] * n * n).abs() / (quad[1] * n).abs()
    };
    Scaling {
        mixer,
        channels,
        r2: r_squared(&xs, &ys, &lin),
        intercept: lin[0],
        slope: lin[1],
        quadratic_share,
        samples,
    }
}

pub fn measure(mixer: Mixer, channels: usize, counts: &[usize]) -> Result<Scaling> {
    let samples = counts
        .iter()
        .map(|&n| run_once(mixer, channels, n, 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(fit(mixer, channels, samples))
}

/// Both mixers at [`TOKEN_COUNTS`].
pub fn measure_all(channels: usize) -> Result<Vec<Scaling>> {
    [Mixer::ChannelAttention, Mixer::SelectiveScan]
        .into_iter()
        .map(|m| measure(m, channels, &TOKEN_COUNTS))
        .collect()
}

/// Plain-text table, one row per (mixer, token count).
pub fn table(rows: &[Scaling]) -> String {
    let mut s = format!(
        "{:<18} {:>3} {:>6} {:>12} {:>12} {:>10}\n",
        "mixer", "C", "tokens", "flops", "flops/token", "time"
    );
    for r in rows {
        for smp in &r.samples {
            s += &format!(
                "{:<18} {:>3} {:>6} {:>12} {:>12.1} {:>10.2?}\n",
                r.mixer.label(),
                r.channels,
                smp.tokens,
                smp.flops,
                smp.flops as f64 / smp.tokens as f64,
                smp.elapsed
            );
        }
        s += &format!(
            "{:<18} fit: flops = {:.1} + {:.2}·n   R² = {:.6}   quadratic share = {:.2e}   {}\n",
            r.mixer.label(),
            r.intercept,
            r.slope,
            r.r2,
            r.quadratic_share,
            if r.linear() { "linear" } else { "NOT linear" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyfit_recovers_exact_polynomials() {
        let xs = [1.0, 2.0, 5.0, 9.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 - 2.0 * x + 0.5 * x * x).collect();
        let c = polyfit(&xs, &ys, 2);
        for (got, want) in c.iter().zip([3.0, -2.0, 0.5]) {
            assert!((got - want).abs() < 1e-9, "{c:?}");
        }
        assert!((r_squared(&xs, &ys, &c) - 1.0).abs() < 1e-12);
        let line = polyfit(&xs, &ys, 1);
        assert!(r_squared(&xs, &ys, &line) < 1.0);
    }

    #[test]
    fn a_quadratic_cost_is_flagged() {
        let samples = TOKEN_COUNTS
            .iter()
            .map(|&n| Sample {
                tokens: n,
                flops: (n * n + 10 * n) as u64,
                elapsed: Duration::ZERO,
            })
            .collect();
        assert!(!fit(Mixer::SelectiveScan, 1, samples).linear());
    }

    #[test]
    fn grids_cover_the_count() {
        assert_eq!(grid(64), (8, 8));
        assert_eq!(grid(1024), (32, 32));
        assert_eq!(grid(12), (3, 4));
    }

    #[test]
    fn both_mixers_scale_linearly() {
        for r in measure_all(4).unwrap() {
            assert!(r.linear(), "{}", table(std::slice::from_ref(&r)));
            let f: Vec<u64> = r.samples.iter().map(|s| s.flops).collect();
            assert!(f.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
