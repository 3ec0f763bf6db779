//! Fusion-quality metrics on 8-bit images and their CSV report.

mod basic;
mod qabf;
mod vif;

use std::io::Write;

pub use basic::{metric_en, metric_mi, metric_sd, metric_sf, mutual_information};
pub use qabf::{metric_qabf, QABF_GAMMA, QABF_KAPPA_A, QABF_KAPPA_G, QABF_SIGMA_A, QABF_SIGMA_G};
pub use vif::{metric_vif, vif_min_side, vif_single, VIF_NOISE_VAR, VIF_SCALES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel 8-bit image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Gray8 {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::contract("empty image"));
        }
        if data.len() != h * w {
            return Err(Error::dim("gray8", format!("{h}x{w} needs {} bytes, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    /// Rounds a `[0, 1]` plane (`1×H×W` or `H×W`) to 8 bits; values outside
    /// the range are clamped.
    pub fn quantize(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(Error::dim("quantize", format!("{s:?} is not a single plane"))),
        };
        let data = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(h, w, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, self.h, self.w], |i| self.data[i] as f64 / 255.0)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub mi: f64,
    pub vif: f64,
    pub qabf: f64,
}

/// Published MSRS reference row (EN, SD, SF, MI, VIF, QAB/F). Kept to
/// exercise report formatting; this implementation does not reproduce it.
pub const MSRS_REFERENCE: MetricsReport = MetricsReport {
    en: 6.72,
    sd: 43.32,
    sf: 11.57,
    mi: 3.69,
    vif: 1.07,
    qabf: 0.71,
};

pub const CSV_HEADER: [&str; 7] = ["image_id", "en", "sd", "sf", "mi", "vif", "qabf"];

impl MetricsReport {
    pub fn compute(f: &Gray8, a: &Gray8, b: &Gray8) -> Result<Self> {
        Ok(Self {
            en: metric_en(f),
            sd: metric_sd(f),
            sf: metric_sf(f),
            mi: metric_mi(f, a, b)?,
            vif: metric_vif(f, a, b)?,
            qabf: metric_qabf(f, a, b)?,
        })
    }

    pub fn values(&self) -> [f64; 6] {
        [self.en, self.sd, self.sf, self.mi, self.vif, self.qabf]
    }

    /// Column-wise mean; `None` for an empty slice.
    pub fn mean(rows: &[MetricsReport]) -> Option<MetricsReport> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mut acc = [0.0; 6];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let [en, sd, sf, mi, vif, qabf] = acc.map(|v| v / n);
        Some(MetricsReport { en, sd, sf, mi, vif, qabf })
    }

    pub fn csv_record(&self, image_id: &str) -> Vec<String> {
        std::iter::once(image_id.to_string())
            .chain(self.values().iter().map(|v| format!("{v:.4}")))
            .collect()
    }
}

/// Writes the header, one row per image, and a trailing `mean` row.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for (id, r) in rows {
        w.write_record(r.csv_record(id))?;
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(m) = MetricsReport::mean(&reports) {
        w.write_record(m.csv_record("mean"))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_and_clamps() {
        let t = Tensor::new(&[1, 1, 4], vec![-0.2, 0.5, 0.999, 1.7]).unwrap();
        assert_eq!(Gray8::quantize(&t).unwrap().data(), &[0, 128, 255, 255]);
        assert!(Gray8::quantize(&Tensor::zeros(&[2, 2, 2])).is_err());
        assert!(matches!(Gray8::new(0, 3, vec![]), Err(Error::Contract(_))));
    }

    #[test]
    fn reference_row_formats_to_four_decimals() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("MSRS".to_string(), MSRS_REFERENCE)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "image_id,en,sd,sf,mi,vif,qabf");
        assert_eq!(lines[1], "MSRS,6.7200,43.3200,11.5700,3.6900,1.0700,0.7100");
        assert_eq!(lines[2], "mean,6.7200,43.3200,11.5700,3.6900,1.0700,0.7100");
    }

    #[test]
    fn csv_quotes_awkward_ids_and_averages() {
        let a = MetricsReport { en: 1.0, sd: 2.0, sf: 3.0, mi: 4.0, vif: 5.0, qabf: 0.5 };
        let b = MetricsReport { en: 3.0, sd: 4.0, sf: 5.0, mi: 6.0, vif: 7.0, qabf: 0.25 };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("a,1".into(), a), ("b\"2".into(), b)]).unwrap();
        let mut rd = csv::Reader::from_reader(&buf[..]);
        let recs: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(&recs[0][0], "a,1");
        assert_eq!(&recs[1][0], "b\"2");
        assert_eq!(&recs[2][0], "mean");
        assert_eq!(&recs[2][6], "0.3750");
        assert_eq!(&recs[2][1], "2.0000");
    }
}
