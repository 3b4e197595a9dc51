//! Full-reference and no-reference image quality metrics.
//!
//! Plain variants compare output and reference directly. The gamma-aligned
//! variants (`PSNR_C`, `SSIM_C`, `DeltaE_C`, `NIQE_C`) first fit a scalar
//! exponent to the output luminance via [`gamma_align`] so that global
//! brightness placement and structural fidelity are scored separately.

mod color;
mod gamma;
mod loe;
mod niqe;
mod ssim;

use std::collections::BTreeMap;
use std::path::Path;

use crate::imagecore::RgbImage;
use crate::{Error, Result};

pub use color::{ciede2000, delta_e, srgb_to_lab, Lab};
pub use gamma::{align_luminance, gamma_align};
pub use loe::loe;
pub use niqe::{fit_niqe_model, niqe, NiqeModel, NIQE_FEATURE_DIM};
pub use ssim::ssim;

/// Reported in place of the unbounded ratio for a zero-error pair; no score
/// exceeds it.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Peak signal-to-noise ratio in decibels, with the squared error pooled over
/// all pixels and channels.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "psnr needs matching shapes, got {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut acc = 0.0f64;
    for (pa, pb) in [(a.r(), b.r()), (a.g(), b.g()), (a.b(), b.b())] {
        for (&x, &y) in pa.data().iter().zip(pb.data()) {
            let d = f64::from(x) - f64::from(y);
            acc += d * d;
        }
    }
    let mse = acc / (3 * a.height() * a.width()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// One evaluated image: either a full set of metric values or the error that
/// prevented scoring it.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub image: String,
    pub values: BTreeMap<String, f64>,
    pub error: Option<String>,
}

/// Per-image metric rows plus aggregate means.
///
/// Columns appear in first-push order. The aggregate of a metric is the
/// arithmetic mean over the rows that carry it; error rows carry none.
#[derive(Clone, Debug)]
pub struct MetricReport {
    columns: Vec<String>,
    rows: Vec<MetricRow>,
    plain: bool,
    gamma_aligned: bool,
}

impl MetricReport {
    pub fn new(plain: bool, gamma_aligned: bool) -> Self {
        MetricReport {
            columns: Vec::new(),
            rows: Vec::new(),
            plain,
            gamma_aligned,
        }
    }

    pub fn push_values(&mut self, image: &str, values: &[(String, f64)]) {
        let mut map = BTreeMap::new();
        for (name, value) in values {
            if !self.columns.contains(name) {
                self.columns.push(name.clone());
            }
            map.insert(name.clone(), *value);
        }
        self.rows.push(MetricRow {
            image: image.to_string(),
            values: map,
            error: None,
        });
    }

    pub fn push_error(&mut self, image: &str, message: &str) {
        self.rows.push(MetricRow {
            image: image.to_string(),
            values: BTreeMap::new(),
            error: Some(message.to_string()),
        });
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn plain(&self) -> bool {
        self.plain
    }

    pub fn gamma_aligned(&self) -> bool {
        self.gamma_aligned
    }

    pub fn value(&self, image: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.image == image)
            .and_then(|r| r.values.get(metric).copied())
    }

    /// Column-order means over the rows that carry each metric.
    pub fn aggregate(&self) -> Vec<(String, f64)> {
        self.columns
            .iter()
            .filter_map(|col| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter_map(|r| r.values.get(col).copied())
                    .collect();
                if vals.is_empty() {
                    None
                } else {
                    Some((col.clone(), vals.iter().sum::<f64>() / vals.len() as f64))
                }
            })
            .collect()
    }

    /// One row per image, one column per metric, plus an `error` column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.write_csv_inner(path)
            .map_err(|e| Error::Data(format!("cannot write report to {}: {e}", path.display())))
    }

    fn write_csv_inner(&self, path: &Path) -> csv::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("error".to_string());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.image.clone()];
            for col in &self.columns {
                rec.push(
                    row.values
                        .get(col)
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                );
            }
            rec.push(row.error.clone().unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregate block: row counts, variant flags, and the per-metric means.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let means: serde_json::Map<String, serde_json::Value> = self
            .aggregate()
            .into_iter()
            .map(|(k, v)| (k, serde_json::json!(v)))
            .collect();
        let errors = self.rows.iter().filter(|r| r.error.is_some()).count();
        let doc = serde_json::json!({
            "images": self.rows.len(),
            "errors": errors,
            "variants": { "plain": self.plain, "gamma_aligned": self.gamma_aligned },
            "means": means,
        });
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Data(format!("cannot encode report: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Plane;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn constant(v: f32, h: usize, w: usize) -> RgbImage {
        let p = || Plane::filled(1, h, w, v);
        RgbImage::new(p(), p(), p()).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> RgbImage {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut plane = || {
            Plane::from_vec(1, h, w, (0..h * w).map(|_| rng.gen::<f32>()).collect())
        };
        let (r, g, b) = (plane(), plane(), plane());
        RgbImage::new(r, g, b).unwrap()
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let img = random_image(1, 12, 9);
        assert_eq!(psnr(&img, &img).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn constant_offset_gives_twenty_decibels() {
        let a = constant(0.5, 8, 8);
        let b = constant(0.6, 8, 8);
        let got = psnr(&a, &b).unwrap();
        // The f32 store rounds 0.6, moving the analytic 20 dB by ~2e-6.
        assert!((got - 20.0).abs() < 1e-5, "got {got}");
    }

    #[test]
    fn psnr_matches_scalar_oracle_and_is_symmetric() {
        let a = random_image(2, 14, 11);
        let b = random_image(3, 14, 11);
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for (pa, pb) in [(a.r(), b.r()), (a.g(), b.g()), (a.b(), b.b())] {
            for (&x, &y) in pa.data().iter().zip(pb.data()) {
                let d = f64::from(x) - f64::from(y);
                acc += d * d;
                n += 1;
            }
        }
        let expect = 10.0 * (1.0 / (acc / n as f64)).log10();
        let got = psnr(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
        assert_eq!(got, psnr(&b, &a).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = constant(0.5, 8, 8);
        let b = constant(0.5, 8, 9);
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn aggregate_is_the_mean_of_rows() {
        let mut report = MetricReport::new(true, false);
        report.push_values("a", &[("psnr".into(), 10.0), ("ssim".into(), 0.5)]);
        report.push_values("b", &[("psnr".into(), 20.0), ("ssim".into(), 0.7)]);
        report.push_error("c", "unreadable");
        let agg = report.aggregate();
        assert_eq!(agg[0], ("psnr".to_string(), 15.0));
        assert_eq!(agg[1].0, "ssim");
        assert!((agg[1].1 - 0.6).abs() < 1e-12);
        assert_eq!(report.rows().len(), 3);
        assert_eq!(report.value("b", "psnr"), Some(20.0));
        assert_eq!(report.value("c", "psnr"), None);
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = MetricReport::new(true, true);
        report.push_values("img0", &[("psnr".into(), 31.25), ("loe".into(), 4.0)]);
        report.push_error("img1", "bad file");

        let csv_path = dir.path().join("rows.csv");
        report.write_csv(&csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("image,psnr,loe,error"));
        assert_eq!(lines.next(), Some("img0,31.25,4,"));
        assert_eq!(lines.next(), Some("img1,,,bad file"));

        let json_path = dir.path().join("aggregate.json");
        report.write_json(&json_path).unwrap();
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(doc["images"], 2);
        assert_eq!(doc["errors"], 1);
        assert_eq!(doc["variants"]["gamma_aligned"], true);
        assert!((doc["means"]["psnr"].as_f64().unwrap() - 31.25).abs() < 1e-12);
    }
}
