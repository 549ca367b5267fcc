//! Deformable-registration math: displacement-field warping, windowed
//! normalized cross-correlation, and smoothness regularization.
//!
//! A displacement field stores, per voxel, the offset added to the voxel's
//! own coordinate to sample the moving image. Out-of-bounds samples clamp to
//! the border.

use ndarray::{Array3, Array4, Axis};

use crate::error::{Result, VolsegError};
use crate::volume::{LabelMap, LogitMap, Volume3D};

/// Guard added to both window variances so constant windows stay finite.
pub const NCC_EPS: f64 = 1e-5;

/// Per-voxel 3-vector deformation, shape (3, H, W, D), units of voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    data: Array4<f64>,
}

impl DisplacementField {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(VolsegError::Validation(format!(
                "displacement field needs 3 components, got {}",
                data.dim().0
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(VolsegError::Validation(
                "displacement field contains non-finite values".into(),
            ));
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array4::zeros((3, shape.0, shape.1, shape.2)),
        }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let d = self.data.dim();
        (d.1, d.2, d.3)
    }

    pub fn max_displacement(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Trilinear,
    Nearest,
}

#[inline]
fn clampf(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Warp a raw grid: out(p) = v(p + field(p)).
pub fn warp_grid(field: &DisplacementField, v: &Array3<f64>, interp: Interp) -> Array3<f64> {
    let (h, w, d) = v.dim();
    let f = &field.data;
    let mut out = Array3::zeros((h, w, d));
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let x = clampf(i as f64 + f[[0, i, j, k]], 0.0, (h - 1) as f64);
                let y = clampf(j as f64 + f[[1, i, j, k]], 0.0, (w - 1) as f64);
                let z = clampf(k as f64 + f[[2, i, j, k]], 0.0, (d - 1) as f64);
                out[[i, j, k]] = match interp {
                    Interp::Nearest => {
                        let xi = (x + 0.5).floor() as usize;
                        let yi = (y + 0.5).floor() as usize;
                        let zi = (z + 0.5).floor() as usize;
                        v[[xi.min(h - 1), yi.min(w - 1), zi.min(d - 1)]]
                    }
                    Interp::Trilinear => sample_trilinear(v, x, y, z),
                };
            }
        }
    }
    out
}

#[inline]
fn sample_trilinear(v: &Array3<f64>, x: f64, y: f64, z: f64) -> f64 {
    let (h, w, d) = v.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let z0 = z.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fz = z - z0;
    let i0 = x0 as usize;
    let j0 = y0 as usize;
    let k0 = z0 as usize;
    let i1 = (i0 + 1).min(h - 1);
    let j1 = (j0 + 1).min(w - 1);
    let k1 = (k0 + 1).min(d - 1);
    let c000 = v[[i0, j0, k0]];
    let c001 = v[[i0, j0, k1]];
    let c010 = v[[i0, j1, k0]];
    let c011 = v[[i0, j1, k1]];
    let c100 = v[[i1, j0, k0]];
    let c101 = v[[i1, j0, k1]];
    let c110 = v[[i1, j1, k0]];
    let c111 = v[[i1, j1, k1]];
    let c00 = c000 * (1.0 - fz) + c001 * fz;
    let c01 = c010 * (1.0 - fz) + c011 * fz;
    let c10 = c100 * (1.0 - fz) + c101 * fz;
    let c11 = c110 * (1.0 - fz) + c111 * fz;
    let c0 = c00 * (1.0 - fy) + c01 * fy;
    let c1 = c10 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fx) + c1 * fx
}

/// Backward pass of trilinear `warp_grid`. Given d(loss)/d(out), accumulates
/// gradients with respect to the input grid and the field.
///
/// Where the sampling coordinate is clamped to the border, the coordinate
/// derivative is zero along the clamped axis.
pub fn warp_grid_backward(
    field: &DisplacementField,
    v: &Array3<f64>,
    grad_out: &Array3<f64>,
    grad_v: &mut Array3<f64>,
    grad_field: &mut Array4<f64>,
) {
    let (h, w, d) = v.dim();
    let f = &field.data;
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let go = grad_out[[i, j, k]];
                if go == 0.0 {
                    continue;
                }
                let xr = i as f64 + f[[0, i, j, k]];
                let yr = j as f64 + f[[1, i, j, k]];
                let zr = k as f64 + f[[2, i, j, k]];
                let x = clampf(xr, 0.0, (h - 1) as f64);
                let y = clampf(yr, 0.0, (w - 1) as f64);
                let z = clampf(zr, 0.0, (d - 1) as f64);
                let cx = x == xr;
                let cy = y == yr;
                let cz = z == zr;
                let x0 = x.floor();
                let y0 = y.floor();
                let z0 = z.floor();
                let fx = x - x0;
                let fy = y - y0;
                let fz = z - z0;
                let i0 = x0 as usize;
                let j0 = y0 as usize;
                let k0 = z0 as usize;
                let i1 = (i0 + 1).min(h - 1);
                let j1 = (j0 + 1).min(w - 1);
                let k1 = (k0 + 1).min(d - 1);
                let wx = [1.0 - fx, fx];
                let wy = [1.0 - fy, fy];
                let wz = [1.0 - fz, fz];
                let ix = [i0, i1];
                let jy = [j0, j1];
                let kz = [k0, k1];
                let mut dx = 0.0;
                let mut dy = 0.0;
                let mut dz = 0.0;
                for (a, &ia) in ix.iter().enumerate() {
                    for (b, &jb) in jy.iter().enumerate() {
                        for (c, &kc) in kz.iter().enumerate() {
                            let val = v[[ia, jb, kc]];
                            grad_v[[ia, jb, kc]] += go * wx[a] * wy[b] * wz[c];
                            let sa = if a == 0 { -1.0 } else { 1.0 };
                            let sb = if b == 0 { -1.0 } else { 1.0 };
                            let sc = if c == 0 { -1.0 } else { 1.0 };
                            dx += sa * wy[b] * wz[c] * val;
                            dy += wx[a] * sb * wz[c] * val;
                            dz += wx[a] * wy[b] * sc * val;
                        }
                    }
                }
                if cx {
                    grad_field[[0, i, j, k]] += go * dx;
                }
                if cy {
                    grad_field[[1, i, j, k]] += go * dy;
                }
                if cz {
                    grad_field[[2, i, j, k]] += go * dz;
                }
            }
        }
    }
}

pub fn warp_volume(field: &DisplacementField, v: &Volume3D, interp: Interp) -> Result<Volume3D> {
    if field.spatial_shape() != v.shape() {
        return Err(VolsegError::Argument(format!(
            "field shape {:?} does not match volume shape {:?}",
            field.spatial_shape(),
            v.shape()
        )));
    }
    Volume3D::new(warp_grid(field, v.data(), interp), v.spacing())
}

/// Warp each class channel with the same field.
pub fn warp_logits(field: &DisplacementField, z: &LogitMap, interp: Interp) -> Result<LogitMap> {
    if field.spatial_shape() != z.spatial_shape() {
        return Err(VolsegError::Argument(format!(
            "field shape {:?} does not match logit shape {:?}",
            field.spatial_shape(),
            z.spatial_shape()
        )));
    }
    crate::volume::map_channels(z, |ch| warp_grid(field, ch, interp))
}

/// Nearest-neighbor warp of an integer label map.
pub fn warp_labels(field: &DisplacementField, l: &LabelMap) -> Result<LabelMap> {
    if field.spatial_shape() != l.shape() {
        return Err(VolsegError::Argument(format!(
            "field shape {:?} does not match label shape {:?}",
            field.spatial_shape(),
            l.shape()
        )));
    }
    let as_f = l.data().mapv(|v| v as f64);
    let warped = warp_grid(field, &as_f, Interp::Nearest);
    LabelMap::new(warped.mapv(|v| v as u8), l.num_classes())
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(VolsegError::Argument(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean over voxels of windowed NCC with mean-subtracted products. Windows
/// are clipped at the borders and variances guarded by `NCC_EPS`.
pub fn local_ncc(a: &Array3<f64>, b: &Array3<f64>, window: (usize, usize, usize)) -> Result<f64> {
    check_same_shape(a, b)?;
    if window.0 % 2 == 0 || window.1 % 2 == 0 || window.2 % 2 == 0 {
        return Err(VolsegError::Argument(format!(
            "window must be odd per axis, got {:?}",
            window
        )));
    }
    Ok(local_ncc_impl(a, b, window, None, None))
}

/// `local_ncc` plus analytic gradients with respect to both inputs.
pub fn local_ncc_grad(
    a: &Array3<f64>,
    b: &Array3<f64>,
    window: (usize, usize, usize),
) -> Result<(f64, Array3<f64>, Array3<f64>)> {
    check_same_shape(a, b)?;
    let mut ga = Array3::zeros(a.dim());
    let mut gb = Array3::zeros(b.dim());
    let v = local_ncc_impl(a, b, window, Some(&mut ga), Some(&mut gb));
    Ok((v, ga, gb))
}

fn local_ncc_impl(
    a: &Array3<f64>,
    b: &Array3<f64>,
    window: (usize, usize, usize),
    mut grad_a: Option<&mut Array3<f64>>,
    mut grad_b: Option<&mut Array3<f64>>,
) -> f64 {
    let (h, w, d) = a.dim();
    let (rx, ry, rz) = (window.0 / 2, window.1 / 2, window.2 / 2);
    let total = (h * w * d) as f64;
    let mut acc = 0.0;
    for i in 0..h {
        let i_lo = i.saturating_sub(rx);
        let i_hi = (i + rx + 1).min(h);
        for j in 0..w {
            let j_lo = j.saturating_sub(ry);
            let j_hi = (j + ry + 1).min(w);
            for k in 0..d {
                let k_lo = k.saturating_sub(rz);
                let k_hi = (k + rz + 1).min(d);
                let n = ((i_hi - i_lo) * (j_hi - j_lo) * (k_hi - k_lo)) as f64;
                let mut sa = 0.0;
                let mut sb = 0.0;
                for ii in i_lo..i_hi {
                    for jj in j_lo..j_hi {
                        for kk in k_lo..k_hi {
                            sa += a[[ii, jj, kk]];
                            sb += b[[ii, jj, kk]];
                        }
                    }
                }
                let ma = sa / n;
                let mb = sb / n;
                let mut cov = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for ii in i_lo..i_hi {
                    for jj in j_lo..j_hi {
                        for kk in k_lo..k_hi {
                            let da = a[[ii, jj, kk]] - ma;
                            let db = b[[ii, jj, kk]] - mb;
                            cov += da * db;
                            va += da * da;
                            vb += db * db;
                        }
                    }
                }
                let va = va + NCC_EPS;
                let vb = vb + NCC_EPS;
                let denom = (va * vb).sqrt();
                let ncc = cov / denom;
                acc += ncc;
                if grad_a.is_some() || grad_b.is_some() {
                    for ii in i_lo..i_hi {
                        for jj in j_lo..j_hi {
                            for kk in k_lo..k_hi {
                                let da = a[[ii, jj, kk]] - ma;
                                let db = b[[ii, jj, kk]] - mb;
                                if let Some(ga) = grad_a.as_deref_mut() {
                                    ga[[ii, jj, kk]] += (db / denom - ncc * da / va) / total;
                                }
                                if let Some(gb) = grad_b.as_deref_mut() {
                                    gb[[ii, jj, kk]] += (da / denom - ncc * db / vb) / total;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    acc / total
}

/// Mean over voxels and components of squared forward differences of each
/// displacement component along each axis; each component-axis slot averages
/// over the positions admitting a forward difference.
pub fn grad_smoothness(field: &DisplacementField) -> f64 {
    grad_smoothness_impl(&field.data, None)
}

/// `grad_smoothness` plus the analytic gradient with respect to the field.
pub fn grad_smoothness_grad(field: &DisplacementField) -> (f64, Array4<f64>) {
    let mut g = Array4::zeros(field.data.dim());
    let v = grad_smoothness_impl(&field.data, Some(&mut g));
    (v, g)
}

fn grad_smoothness_impl(f: &Array4<f64>, mut grad: Option<&mut Array4<f64>>) -> f64 {
    let (_, h, w, d) = f.dim();
    let dims = [h, w, d];
    let mut acc = 0.0;
    for c in 0..3 {
        for axis in 0..3 {
            if dims[axis] < 2 {
                continue;
            }
            let count = (h * w * d / dims[axis] * (dims[axis] - 1)) as f64;
            let norm = 1.0 / (3.0 * count);
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        let (ni, nj, nk) = match axis {
                            0 => (i + 1, j, k),
                            1 => (i, j + 1, k),
                            _ => (i, j, k + 1),
                        };
                        if ni >= h || nj >= w || nk >= d {
                            continue;
                        }
                        let diff = f[[c, ni, nj, nk]] - f[[c, i, j, k]];
                        acc += diff * diff * norm;
                        if let Some(g) = grad.as_deref_mut() {
                            g[[c, ni, nj, nk]] += 2.0 * diff * norm;
                            g[[c, i, j, k]] -= 2.0 * diff * norm;
                        }
                    }
                }
            }
        }
    }
    acc
}

/// VoxelMorph-style objective: negated windowed NCC of the warped pair plus a
/// weighted smoothness penalty on the field.
pub fn registration_loss(
    fixed: &Volume3D,
    moving: &Volume3D,
    field: &DisplacementField,
    lambda_reg: f64,
    window: (usize, usize, usize),
) -> Result<f64> {
    let warped = warp_volume(field, moving, Interp::Trilinear)?;
    let ncc = local_ncc(fixed.data(), warped.data(), window)?;
    Ok(-ncc + lambda_reg * grad_smoothness(field))
}

/// `registration_loss` plus its analytic gradient with respect to the field.
pub fn registration_loss_grad(
    fixed: &Volume3D,
    moving: &Volume3D,
    field: &DisplacementField,
    lambda_reg: f64,
    window: (usize, usize, usize),
) -> Result<(f64, Array4<f64>)> {
    let warped = warp_grid(field, moving.data(), Interp::Trilinear);
    if fixed.data().dim() != warped.dim() {
        return Err(VolsegError::Argument("shape mismatch".into()));
    }
    let (ncc, _ga, gb) = local_ncc_grad(fixed.data(), &warped, window)?;
    let (smooth, mut grad_field) = grad_smoothness_grad(field);
    grad_field.mapv_inplace(|v| v * lambda_reg);
    let mut grad_v = Array3::zeros(moving.shape());
    let neg_gb = gb.mapv(|v| -v);
    warp_grid_backward(field, moving.data(), &neg_gb, &mut grad_v, &mut grad_field);
    Ok((-ncc + lambda_reg * smooth, grad_field))
}

/// Mean NCC improvement helper used in registration evaluation: NCC of the
/// warped pair minus NCC of the unwarped pair.
pub fn ncc_improvement(
    fixed: &Volume3D,
    moving: &Volume3D,
    field: &DisplacementField,
    window: (usize, usize, usize),
) -> Result<(f64, f64)> {
    let before = local_ncc(fixed.data(), moving.data(), window)?;
    let warped = warp_volume(field, moving, Interp::Trilinear)?;
    let after = local_ncc(fixed.data(), warped.data(), window)?;
    Ok((before, after))
}
