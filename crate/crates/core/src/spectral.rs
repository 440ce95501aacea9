//! Per-channel singular value decomposition of images.
//!
//! Every routine here works in `f64` regardless of the model precision, so
//! that decompose/reconstruct round trips stay within `1e-5`.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};

/// `U diag(sigma) Vt` for one channel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSvd {
    pub u: DMatrix<f64>,
    /// Non-negative and sorted in non-increasing order.
    pub sigma: DVector<f64>,
    pub vt: DMatrix<f64>,
}

impl ChannelSvd {
    pub fn size(&self) -> usize {
        self.sigma.len()
    }

    /// The orthogonal polar factor `U Vt`, invariant to simultaneous sign
    /// flips of paired singular vectors.
    pub fn polar(&self) -> DMatrix<f64> {
        &self.u * &self.vt
    }

    fn check(&self) -> Result<()> {
        let n = self.sigma.len();
        for m in [&self.u, &self.vt] {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::shape(
                    "svd factors",
                    &[n, n],
                    &[m.nrows(), m.ncols()],
                ));
            }
        }
        Ok(())
    }
}

/// One [`ChannelSvd`] per color channel of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub channels: Vec<ChannelSvd>,
}

pub(crate) fn channel_matrix(channel: ArrayView2<'_, f64>) -> DMatrix<f64> {
    let (rows, cols) = channel.dim();
    DMatrix::from_fn(rows, cols, |r, c| channel[[r, c]])
}

fn matrix_to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(r, c)| m[(r, c)])
}

/// SVD of a single square matrix with singular values in non-increasing order.
pub fn svd_matrix(m: DMatrix<f64>) -> Result<ChannelSvd> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "channel matrix" });
    }
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NonFinite { what: "svd factors" }),
    };
    Ok(ChannelSvd {
        u,
        sigma: svd.singular_values,
        vt,
    })
}

/// Decompose each channel of a `C x n x n` image.
pub fn decompose(image: &Array3<f64>) -> Result<SvdFactors> {
    let (_, rows, cols) = image.dim();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    let channels = image
        .axis_iter(Axis(0))
        .map(|ch| svd_matrix(channel_matrix(ch)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SvdFactors { channels })
}

/// Inverse of [`decompose`]. With `clip` the result is clamped to `[0, 1]`;
/// the raw recombination is returned otherwise.
pub fn reconstruct(factors: &SvdFactors, clip: bool) -> Result<Array3<f64>> {
    let Some(first) = factors.channels.first() else {
        return Err(Error::shape("svd factors", &[1], &[0]));
    };
    let n = first.size();
    let mut out = Array3::zeros((factors.channels.len(), n, n));
    for (c, ch) in factors.channels.iter().enumerate() {
        ch.check()?;
        if ch.size() != n {
            return Err(Error::shape("svd factors", &[n], &[ch.size()]));
        }
        let m = &ch.u * DMatrix::from_diagonal(&ch.sigma) * &ch.vt;
        out.index_axis_mut(Axis(0), c).assign(&matrix_to_array(&m));
    }
    if clip {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Recombine the singular vectors of `adv` with the singular values of
/// `clean`, channel by channel. The output is not clipped.
pub fn swap_singular_values(adv: &Array3<f64>, clean: &Array3<f64>) -> Result<Array3<f64>> {
    if adv.dim() != clean.dim() {
        return Err(Error::shape(
            "singular value swap",
            adv.shape(),
            clean.shape(),
        ));
    }
    let adv_f = decompose(adv)?;
    let clean_f = decompose(clean)?;
    let channels = adv_f
        .channels
        .into_iter()
        .zip(clean_f.channels)
        .map(|(a, c)| ChannelSvd {
            u: a.u,
            sigma: c.sigma,
            vt: a.vt,
        })
        .collect();
    reconstruct(&SvdFactors { channels }, false)
}

/// `a - b` rescaled so its minimum maps to 0 and maximum to 1. A constant
/// difference maps to 0.5 everywhere.
pub fn difference_map(a: &Array3<f64>, b: &Array3<f64>) -> Result<Array3<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape("difference map", a.shape(), b.shape()));
    }
    let diff = a - b;
    let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return Ok(Array3::from_elem(diff.dim(), 0.5));
    }
    Ok(diff.mapv(|v| (v - lo) / range))
}

/// Unnormalized forward 2-D DFT of a square channel.
pub fn dft2(channel: ArrayView2<'_, f64>) -> Array2<Complex64> {
    let (rows, cols) = channel.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(cols);
    let col_fft = planner.plan_fft_forward(rows);
    let mut out = channel.mapv(|v| Complex64::new(v, 0.0));
    for mut row in out.rows_mut() {
        let mut buf: Vec<Complex64> = row.to_vec();
        row_fft.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    for mut col in out.columns_mut() {
        let mut buf: Vec<Complex64> = col.to_vec();
        col_fft.process(&mut buf);
        col.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    out
}

/// Relative gap between the spectral energy `sum sigma_i^2` and the Fourier
/// energy `(1/nm) sum |G(u,v)|^2`, one value per channel. All-zero channels
/// report 0.
pub fn parseval_residual(image: &Array3<f64>) -> Result<Vec<f64>> {
    let factors = decompose(image)?;
    let (_, rows, cols) = image.dim();
    let scale = (rows * cols) as f64;
    Ok(image
        .axis_iter(Axis(0))
        .zip(&factors.channels)
        .map(|(ch, f)| {
            let spectral: f64 = f.sigma.iter().map(|s| s * s).sum();
            if spectral == 0.0 {
                return 0.0;
            }
            let fourier: f64 = dft2(ch).iter().map(|g| g.norm_sqr()).sum::<f64>() / scale;
            (spectral - fourier).abs() / spectral
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, n, n), |_| rng.random::<f64>())
    }

    /// Cyclic Jacobi eigenvalue iteration for a symmetric matrix.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-28 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let mut img = Array3::zeros((1, 4, 4));
        for i in 0..4 {
            img[[0, i, i]] = 1.0;
        }
        let f = decompose(&img).unwrap();
        for s in f.channels[0].sigma.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [0.5, 0.5, 0.5, 0.5];
        let v = [0.6, 0.8, 0.0, 0.0];
        let img = Array3::from_shape_fn((1, 4, 4), |(_, r, c)| u[r] * v[c]);
        let sigma = &decompose(&img).unwrap().channels[0].sigma;
        assert!((sigma[0] - 1.0).abs() < 1e-12);
        for s in sigma.iter().skip(1) {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let img = random_image(&mut rng, 1, 4);
            let x = img.index_axis(Axis(0), 0);
            let xtx: Vec<Vec<f64>> = (0..4)
                .map(|i| (0..4).map(|j| (0..4).map(|k| x[[k, i]] * x[[k, j]]).sum()).collect())
                .collect();
            let expected: Vec<f64> = jacobi_eigenvalues(xtx)
                .into_iter()
                .map(|e| e.max(0.0).sqrt())
                .collect();
            let sigma = &decompose(&img).unwrap().channels[0].sigma;
            for (s, e) in sigma.iter().zip(&expected) {
                assert!((s - e).abs() < 1e-6, "{s} vs {e}");
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let img = Array3::<f64>::zeros((3, 4, 5));
        assert!(matches!(decompose(&img), Err(Error::NonSquare { .. })));
        let mut img = Array3::<f64>::zeros((3, 4, 4));
        img[[1, 2, 2]] = f64::NAN;
        assert!(matches!(decompose(&img), Err(Error::NonFinite { .. })));
        img[[1, 2, 2]] = f64::INFINITY;
        assert!(matches!(decompose(&img), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn reconstruct_closed_forms() {
        let zero = ChannelSvd {
            u: DMatrix::identity(3, 3),
            sigma: DVector::zeros(3),
            vt: DMatrix::identity(3, 3),
        };
        let out = reconstruct(&SvdFactors { channels: vec![zero] }, false).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let diag = ChannelSvd {
            u: DMatrix::identity(2, 2),
            sigma: DVector::from_vec(vec![2.0, 1.0]),
            vt: DMatrix::identity(2, 2),
        };
        let out = reconstruct(&SvdFactors { channels: vec![diag.clone()] }, false).unwrap();
        assert_eq!(out[[0, 0, 0]], 2.0);
        assert_eq!(out[[0, 1, 1]], 1.0);
        assert_eq!(out[[0, 0, 1]], 0.0);
        let clipped = reconstruct(&SvdFactors { channels: vec![diag] }, true).unwrap();
        assert_eq!(clipped[[0, 0, 0]], 1.0);
    }

    #[test]
    fn reconstruct_rejects_mismatched_factors() {
        let bad = ChannelSvd {
            u: DMatrix::identity(3, 3),
            sigma: DVector::zeros(2),
            vt: DMatrix::identity(3, 3),
        };
        assert!(reconstruct(&SvdFactors { channels: vec![bad] }, false).is_err());
    }

    #[test]
    fn swap_scaling_and_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_image(&mut rng, 3, 8);
        let scaled = x.mapv(|v| 2.5 * v);
        let out = swap_singular_values(&x, &scaled).unwrap();
        assert!(out.iter().zip(scaled.iter()).all(|(a, b)| (a - b).abs() < 1e-5));

        let a = random_image(&mut rng, 3, 8);
        let b = random_image(&mut rng, 3, 8);
        let r = swap_singular_values(&a, &b).unwrap();
        let (fr, fa, fb) = (decompose(&r).unwrap(), decompose(&a).unwrap(), decompose(&b).unwrap());
        for c in 0..3 {
            let (cr, ca, cb) = (&fr.channels[c], &fa.channels[c], &fb.channels[c]);
            assert!((&cr.sigma - &cb.sigma).amax() < 1e-5);
            // leading left subspaces coincide (random spectra are non-degenerate)
            for k in 1..=8 {
                let ur = cr.u.columns(0, k);
                let ua = ca.u.columns(0, k);
                let diff = &ur * ur.transpose() - &ua * ua.transpose();
                assert!(diff.amax() < 1e-5, "channel {c} rank {k}");
            }
        }
    }

    #[test]
    fn swap_rejects_shape_mismatch() {
        let a = Array3::<f64>::zeros((3, 4, 4));
        let b = Array3::<f64>::zeros((3, 5, 5));
        assert!(swap_singular_values(&a, &b).is_err());
    }

    #[test]
    fn difference_map_rules() {
        let a = Array3::from_elem((3, 2, 2), 0.3);
        assert!(difference_map(&a, &a).unwrap().iter().all(|&v| v == 0.5));

        let b = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| (r * 2 + c) as f64 - 1.5);
        let zero = Array3::zeros((1, 2, 2));
        let d = difference_map(&b, &zero).unwrap();
        assert_eq!(d[[0, 0, 0]], 0.0);
        assert_eq!(d[[0, 1, 1]], 1.0);

        let sign = [1.0, -1.0, -1.0, 1.0];
        let base = Array3::from_elem((1, 2, 2), 0.4);
        let pert = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| 0.4 + 0.01 * sign[r * 2 + c]);
        let d = difference_map(&pert, &base).unwrap();
        for (v, s) in d.iter().zip(sign) {
            assert!((v - if s > 0.0 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_cases() {
        let mut eye = Array3::zeros((1, 4, 4));
        for i in 0..4 {
            eye[[0, i, i]] = 1.0;
        }
        assert!(parseval_residual(&eye).unwrap()[0] <= 1e-6);
        // the oracle side: squared Frobenius norm of the identity is 4
        let fro: f64 = eye.iter().map(|v| v * v).sum();
        let fourier: f64 =
            dft2(eye.index_axis(Axis(0), 0)).iter().map(|g| g.norm_sqr()).sum::<f64>() / 16.0;
        assert!((fro - 4.0).abs() < 1e-12 && (fourier - 4.0).abs() < 1e-12);

        assert_eq!(parseval_residual(&Array3::zeros((2, 4, 4))).unwrap(), vec![0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 3, 16);
        for (c, r) in parseval_residual(&img).unwrap().into_iter().enumerate() {
            assert!(r <= 1e-6);
            let ch = img.index_axis(Axis(0), c);
            let direct: f64 = ch.iter().map(|v| v * v).sum();
            let spectral: f64 = decompose(&img).unwrap().channels[c].sigma.iter().map(|s| s * s).sum();
            assert!((direct - spectral).abs() / direct < 1e-10);
        }
    }

    #[test]
    fn dft_dc_is_channel_sum() {
        let img = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let g = dft2(img.view());
        assert!((g[[0, 0]].re - 120.0).abs() < 1e-12);
        assert!(g[[0, 0]].im.abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn round_trip_and_order(seed in any::<u64>(), n in 1usize..10, c in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, c, n);
            let f = decompose(&img).unwrap();
            for ch in &f.channels {
                prop_assert!(ch.sigma.iter().all(|&s| s >= 0.0));
                prop_assert!(ch.sigma.as_slice().windows(2).all(|w| w[0] >= w[1]));
                let eye = DMatrix::<f64>::identity(n, n);
                prop_assert!((ch.u.transpose() * &ch.u - &eye).amax() <= 1e-5);
                prop_assert!((&ch.vt * ch.vt.transpose() - &eye).amax() <= 1e-5);
            }
            let back = reconstruct(&f, false).unwrap();
            let err = back.iter().zip(img.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1e-5);
            prop_assert_eq!(decompose(&img).unwrap(), f);
        }

        #[test]
        fn swap_idempotence(seed in any::<u64>(), n in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 3, n);
            let b = random_image(&mut rng, 3, n);
            let aa = swap_singular_values(&a, &a).unwrap();
            prop_assert!(aa.iter().zip(a.iter()).all(|(x, y)| (x - y).abs() <= 1e-5));
            let ab = swap_singular_values(&a, &b).unwrap();
            let abb = swap_singular_values(&ab, &b).unwrap();
            prop_assert!(abb.iter().zip(ab.iter()).all(|(x, y)| (x - y).abs() <= 1e-5));
        }

        #[test]
        fn parseval_holds(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 3, n);
            prop_assert!(parseval_residual(&img).unwrap().iter().all(|&r| r <= 1e-6));
        }
    }
}
