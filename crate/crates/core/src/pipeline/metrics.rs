//! Reference image-quality metrics on token grids.

use crate::compression::Grid;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Returned by [`psnr`] when the inputs are identical.
pub const PSNR_CAP: f64 = 99.0;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10*log10(peak^2 / MSE)`, capped at [`PSNR_CAP`] when `MSE = 0`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Domain(format!("peak {peak} must be positive")));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Mean structural similarity over 3x3 spatial windows of every frame and
/// channel (the whole frame when it is smaller than the window).
pub fn ssim(a: &Tensor, b: &Tensor, grid: Grid, peak: f64) -> Result<f64> {
    same_shape(a, b)?;
    if a.rows() != grid.tokens() {
        return Err(Error::Contract(format!("{} rows for grid {grid}", a.rows())));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (wh, ww) = (grid.h.min(3), grid.w.min(3));
    let channels = a.cols();
    let mut total = 0.0;
    let mut count = 0usize;
    for f in 0..grid.t {
        for ch in 0..channels {
            let at = |t: &Tensor, h: usize, w: usize| t.row(f * grid.h * grid.w + h * grid.w + w)[ch];
            for h0 in 0..=grid.h - wh {
                for w0 in 0..=grid.w - ww {
                    let n = (wh * ww) as f64;
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for h in h0..h0 + wh {
                        for w in w0..w0 + ww {
                            let (x, y) = (at(a, h, w), at(b, h, w));
                            sa += x;
                            sb += y;
                            saa += x * x;
                            sbb += y * y;
                            sab += x * y;
                        }
                    }
                    let (ma, mb) = (sa / n, sb / n);
                    let va = saa / n - ma * ma;
                    let vb = sbb / n - mb * mb;
                    let cov = sab / n - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Repeats the last frame of `previous` for `frames` frames.
pub fn freeze_last_frame(previous: &Tensor, grid: Grid, frames: usize) -> Result<Tensor> {
    let hw = grid.h * grid.w;
    if previous.rows() != grid.tokens() {
        return Err(Error::Contract(format!("{} rows for grid {grid}", previous.rows())));
    }
    let last = previous.slice_rows(previous.rows() - hw, hw)?;
    let copies: Vec<&Tensor> = (0..frames).map(|_| &last).collect();
    Tensor::concat_rows(&copies)
}
