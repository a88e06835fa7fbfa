//! Global polynomial color mapping.
//!
//! Each RGB triple is lifted to 11 monomials and a 3x11 matrix maps the lifted
//! colors of one image onto another. The matrix is fitted by least squares on
//! a small image pair and then applied to the full-resolution original.
#![allow(clippy::needless_range_loop)]

use nalgebra::{SMatrix, SVector};

use crate::error::{Result, WbError};
use crate::image::ImageRGB;

pub const POLY_TERMS: usize = 11;

/// `[R, G, B, RG, RB, GB, R^2, G^2, B^2, RGB, 1]`.
#[inline]
pub fn poly_kernel(rgb: [f32; 3]) -> [f32; POLY_TERMS] {
    let [r, g, b] = rgb;
    [r, g, b, r * g, r * b, g * b, r * r, g * g, b * b, r * g * b, 1.0]
}

fn poly_kernel_f64(rgb: [f32; 3]) -> [f64; POLY_TERMS] {
    let [r, g, b] = rgb.map(f64::from);
    [r, g, b, r * g, r * b, g * b, r * r, g * g, b * b, r * g * b, 1.0]
}

/// 3x11 matrix; row `c` produces output channel `c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MappingMatrix {
    pub rows: [[f32; POLY_TERMS]; 3],
}

impl MappingMatrix {
    pub fn zeros() -> Self {
        MappingMatrix {
            rows: [[0.0; POLY_TERMS]; 3],
        }
    }

    /// Selects the linear terms unchanged.
    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for c in 0..3 {
            m.rows[c][c] = 1.0;
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|v| v.is_finite())
    }

    #[inline]
    pub fn map_pixel(&self, rgb: [f32; 3]) -> [f32; 3] {
        let f = poly_kernel(rgb);
        self.rows.map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
    }

    /// 33 little-endian f32 values, row-major.
    pub fn to_le_bytes(&self) -> [u8; 33 * 4] {
        let mut out = [0u8; 33 * 4];
        for (i, v) in self.rows.iter().flatten().enumerate() {
            out[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 33 * 4 {
            return Err(WbError::shape("MappingMatrix::from_le_bytes", 132, bytes.len()));
        }
        let mut m = Self::zeros();
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            m.rows[i / POLY_TERMS][i % POLY_TERMS] = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        Ok(m)
    }
}

/// Streaming least-squares accumulator: Givens rotations fold each row of the
/// design matrix into an upper-triangular factor, so memory stays constant.
struct StreamingQr {
    r: [[f64; POLY_TERMS]; POLY_TERMS],
    qtb: [[f64; 3]; POLY_TERMS],
}

impl StreamingQr {
    fn new() -> Self {
        StreamingQr {
            r: [[0.0; POLY_TERMS]; POLY_TERMS],
            qtb: [[0.0; 3]; POLY_TERMS],
        }
    }

    fn push(&mut self, mut a: [f64; POLY_TERMS], mut b: [f64; 3]) {
        for j in 0..POLY_TERMS {
            if a[j] == 0.0 {
                continue;
            }
            let rjj = self.r[j][j];
            let h = rjj.hypot(a[j]);
            let (c, s) = (rjj / h, a[j] / h);
            self.r[j][j] = h;
            a[j] = 0.0;
            for k in j + 1..POLY_TERMS {
                let (x, y) = (self.r[j][k], a[k]);
                self.r[j][k] = c * x + s * y;
                a[k] = c * y - s * x;
            }
            for k in 0..3 {
                let (x, y) = (self.qtb[j][k], b[k]);
                self.qtb[j][k] = c * x + s * y;
                b[k] = c * y - s * x;
            }
        }
    }

    /// Minimum-norm solution of `R x = Q^T b` through an SVD of `R`.
    fn solve(&self) -> Result<SMatrix<f64, POLY_TERMS, 3>> {
        let r = SMatrix::<f64, POLY_TERMS, POLY_TERMS>::from_fn(|i, j| self.r[i][j]);
        let rhs = SMatrix::<f64, POLY_TERMS, 3>::from_fn(|i, j| self.qtb[i][j]);
        let svd = r.svd(true, true);
        let smax = svd.singular_values.max();
        let tol = (smax * 1e-10).max(f64::MIN_POSITIVE);
        svd.solve(&rhs, tol)
            .map_err(|e| WbError::Config(format!("least-squares solve failed: {e}")))
    }
}

/// Least-squares `M` minimizing `sum ||M psi(src) - tgt||^2` over all pixels.
/// Rank-deficient inputs (e.g. a constant image) yield the minimum-norm fit.
pub fn fit_mapping(source: &ImageRGB, target: &ImageRGB) -> Result<MappingMatrix> {
    if source.dims() != target.dims() {
        return Err(WbError::shape(
            "fit_mapping",
            format!("{:?}", source.dims()),
            format!("{:?}", target.dims()),
        ));
    }
    let mut qr = StreamingQr::new();
    for (s, t) in source.pixels().zip(target.pixels()) {
        qr.push(poly_kernel_f64(s), t.map(f64::from));
    }
    let x = qr.solve()?;
    let mut m = MappingMatrix::zeros();
    for c in 0..3 {
        for k in 0..POLY_TERMS {
            m.rows[c][k] = x[(k, c)] as f32;
        }
    }
    Ok(m)
}

/// Applies `M` per pixel without clamping.
pub fn apply_mapping_unclamped(m: &MappingMatrix, image: &ImageRGB) -> ImageRGB {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let y = m.map_pixel([px[0], px[1], px[2]]);
        px.copy_from_slice(&y);
    }
    out
}

/// Applies `M` per pixel and clamps to `[0, 1]`.
pub fn apply_mapping(m: &MappingMatrix, image: &ImageRGB) -> ImageRGB {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let y = m.map_pixel([px[0], px[1], px[2]]);
        for (d, v) in px.iter_mut().zip(y) {
            *d = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Root-mean-square of the pre-clamp fit error over all channel values.
pub fn fit_rms(m: &MappingMatrix, source: &ImageRGB, target: &ImageRGB) -> Result<f64> {
    if source.dims() != target.dims() {
        return Err(WbError::shape(
            "fit_rms",
            format!("{:?}", source.dims()),
            format!("{:?}", target.dims()),
        ));
    }
    let rows: Vec<SVector<f64, POLY_TERMS>> = m
        .rows
        .iter()
        .map(|r| SVector::from_fn(|k, _| r[k] as f64))
        .collect();
    let mut sse = 0.0;
    for (s, t) in source.pixels().zip(target.pixels()) {
        let f = SVector::<f64, POLY_TERMS>::from(poly_kernel_f64(s));
        for c in 0..3 {
            sse += (rows[c].dot(&f) - t[c] as f64).powi(2);
        }
    }
    Ok((sse / (3 * source.pixel_count()).max(1) as f64).sqrt())
}
