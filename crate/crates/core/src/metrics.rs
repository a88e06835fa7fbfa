//! Image error metrics: MSE on the 8-bit scale, mean angular error and
//! CIEDE2000, plus mean/quartile summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WbError};
use crate::image::ImageRGB;

/// Pixels whose RGB norm falls below this are skipped by [`mae`].
pub const ANGLE_NORM_EPS: f64 = 1e-6;

fn check_dims(op: &'static str, a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(WbError::shape(op, format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

/// Mean squared error with values scaled to `[0, 255]`.
pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_dims("mse", a, b)?;
    if a.data().is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x as f64 - y as f64) * 255.0).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Angle in degrees between two RGB vectors, `None` if either is ~zero.
pub fn angular_error(a: [f32; 3], b: [f32; 3]) -> Option<f64> {
    let a = a.map(f64::from);
    let b = b.map(f64::from);
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na <= ANGLE_NORM_EPS || nb <= ANGLE_NORM_EPS {
        return None;
    }
    let cos = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    Some(cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Per-pixel angular error averaged over pixels where both vectors have
/// non-negligible norm; 0 when no pixel qualifies.
pub fn mae(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_dims("mae", a, b)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, q) in a.pixels().zip(b.pixels()) {
        if let Some(angle) = angular_error(p, q) {
            sum += angle;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub const fn new(l: f64, a: f64, b: f64) -> Self {
        Lab { l, a, b }
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB in `[0, 1]` to CIELAB under D65, 2-degree observer.
pub fn srgb_to_lab(rgb: [f32; 3]) -> Lab {
    let [r, g, b] = rgb.map(|c| srgb_to_linear((c as f64).clamp(0.0, 1.0)));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    const EPS: f64 = 216.0 / 24389.0;
    const KAPPA: f64 = 24389.0 / 27.0;
    let f = |t: f64| if t > EPS { t.cbrt() } else { (KAPPA * t + 16.0) / 116.0 };
    let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

/// CIEDE2000 with `kL = kC = kH = 1`.
pub fn ciede2000(lab1: Lab, lab2: Lab) -> f64 {
    use std::f64::consts::PI;
    let deg = |r: f64| r.to_degrees();
    let rad = |d: f64| d.to_radians();

    let c1 = lab1.a.hypot(lab1.b);
    let c2 = lab2.a.hypot(lab2.b);
    let c_bar = (c1 + c2) / 2.0;
    let c_bar7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + 25f64.powi(7))).sqrt());
    let a1p = (1.0 + g) * lab1.a;
    let a2p = (1.0 + g) * lab2.a;
    let c1p = a1p.hypot(lab1.b);
    let c2p = a2p.hypot(lab2.b);
    let hue = |b: f64, ap: f64| {
        if b == 0.0 && ap == 0.0 {
            0.0
        } else {
            let h = deg(b.atan2(ap));
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(lab1.b, a1p);
    let h2p = hue(lab2.b, a2p);

    let dl = lab2.l - lab1.l;
    let dc = c2p - c1p;
    let dh = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let d_big_h = 2.0 * (c1p * c2p).sqrt() * (rad(dh) / 2.0).sin();

    let l_bar = (lab1.l + lab2.l) / 2.0;
    let cp_bar = (c1p + c2p) / 2.0;
    let hp_bar = if c1p * c2p == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };
    let t = 1.0 - 0.17 * rad(hp_bar - 30.0).cos() + 0.24 * rad(2.0 * hp_bar).cos()
        + 0.32 * rad(3.0 * hp_bar + 6.0).cos()
        - 0.20 * rad(4.0 * hp_bar - 63.0).cos();
    let d_theta = 30.0 * (-((hp_bar - 275.0) / 25.0).powi(2)).exp();
    let cp_bar7 = cp_bar.powi(7);
    let rc = 2.0 * (cp_bar7 / (cp_bar7 + 25f64.powi(7))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * cp_bar;
    let sh = 1.0 + 0.015 * cp_bar * t;
    let rt = -(2.0 * rad(d_theta)).sin() * rc;
    let _ = PI;

    let (tl, tc, th) = (dl / sl, dc / sc, d_big_h / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

/// Mean per-pixel CIEDE2000 between two sRGB images.
pub fn delta_e_2000(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_dims("delta_e_2000", a, b)?;
    if a.pixel_count() == 0 {
        return Ok(0.0);
    }
    let sum: f64 = a
        .pixels()
        .zip(b.pixels())
        .map(|(p, q)| ciede2000(srgb_to_lab(p), srgb_to_lab(q)))
        .sum();
    Ok(sum / a.pixel_count() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
}

/// Linear interpolation between order statistics at `q * (n - 1)`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Mean and quartiles of a non-empty sample.
pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(WbError::OutOfRange {
            what: "aggregate input",
            detail: "empty list".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q1: quantile(&sorted, 0.25),
        q2: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub setting: String,
    pub mse: f64,
    pub mae_degrees: f64,
    pub delta_e2000: f64,
}

impl MetricRow {
    pub fn compute(id: impl Into<String>, setting: impl Into<String>, result: &ImageRGB, truth: &ImageRGB) -> Result<Self> {
        Ok(MetricRow {
            id: id.into(),
            setting: setting.into(),
            mse: mse(result, truth)?,
            mae_degrees: mae(result, truth)?,
            delta_e2000: delta_e_2000(result, truth)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mse: Summary,
    pub mae_degrees: Summary,
    pub delta_e2000: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<MetricRow>,
    pub aggregate: Aggregates,
}

impl MetricReport {
    pub fn from_rows(per_image: Vec<MetricRow>) -> Result<Self> {
        let col = |f: fn(&MetricRow) -> f64| per_image.iter().map(f).collect::<Vec<_>>();
        let aggregate = Aggregates {
            mse: aggregate(&col(|r| r.mse))?,
            mae_degrees: aggregate(&col(|r| r.mae_degrees))?,
            delta_e2000: aggregate(&col(|r| r.delta_e2000))?,
        };
        Ok(MetricReport { per_image, aggregate })
    }

    /// Rows restricted to one setting, re-aggregated.
    pub fn for_setting(&self, setting: &str) -> Result<MetricReport> {
        Self::from_rows(self.per_image.iter().filter(|r| r.setting == setting).cloned().collect())
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("id,setting,mse,mae_degrees,delta_e2000\n");
        for r in &self.per_image {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.id, r.setting, r.mse, r.mae_degrees, r.delta_e2000);
        }
        s
    }

    /// One row per metric with mean and quartile columns.
    pub fn aggregate_csv(&self) -> String {
        let mut s = String::from("metric,mean,q1,q2,q3\n");
        let a = &self.aggregate;
        for (name, m) in [("mse", a.mse), ("mae_degrees", a.mae_degrees), ("delta_e2000", a.delta_e2000)] {
            let _ = writeln!(s, "{name},{:.6},{:.6},{:.6},{:.6}", m.mean, m.q1, m.q2, m.q3);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
