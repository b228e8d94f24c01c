use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Below this rotation angle the coefficient values switch to their Taylor
/// expansion.
pub const SMALL_ANGLE: f64 = 1e-8;
/// The coefficient derivatives lose precision earlier than the values, so
/// they switch to series form at a larger angle.
const SERIES_ANGLE_FOR_DERIVATIVE: f64 = 1e-2;

/// `sin θ / θ` as a function of `s = θ²`.
fn sinc_of_sq(s: f64) -> f64 {
    let th = s.sqrt();
    if th < SMALL_ANGLE {
        1.0 - s / 6.0
    } else {
        th.sin() / th
    }
}

fn d_sinc_of_sq(s: f64) -> f64 {
    let th = s.sqrt();
    if th < SERIES_ANGLE_FOR_DERIVATIVE {
        -1.0 / 6.0 + s / 60.0 - s * s / 1680.0
    } else {
        (th * th.cos() - th.sin()) / (2.0 * th * s)
    }
}

/// `(1 - cos θ) / θ²` as a function of `s = θ²`, via `2 sin²(θ/2)` to avoid cancellation.
fn versine_of_sq(s: f64) -> f64 {
    let th = s.sqrt();
    if th < SMALL_ANGLE {
        0.5 - s / 24.0
    } else {
        let h = (0.5 * th).sin();
        2.0 * h * h / s
    }
}

fn d_versine_of_sq(s: f64) -> f64 {
    let th = s.sqrt();
    if th < SERIES_ANGLE_FOR_DERIVATIVE {
        -1.0 / 24.0 + s / 360.0 - s * s / 13440.0
    } else {
        let h = (0.5 * th).sin();
        (th * th.sin() - 4.0 * h * h) / (2.0 * s * s)
    }
}

/// Axis-angle `[n, 3]` to rotation matrices `[n, 3, 3]`:
/// `R = I + (sin θ/θ)·[a]× + ((1-cos θ)/θ²)·[a]×²` with `[a]×² = a·aᵀ - θ²·I`.
pub fn rodrigues_batch(aa: &Tensor) -> Result<Tensor> {
    if aa.ndim() != 2 || aa.dim(1) != 3 {
        return Err(shape_err("rodrigues", aa.shape(), &[3]));
    }
    let n = aa.dim(0);
    let s = aa
        .square()
        .reduce(crate::tensor::ReduceOp::Sum, &[1])?
        .reshape(&[n, 1, 1])?;
    let a = s.map_unary("rodrigues_sinc", sinc_of_sq, |s, _| d_sinc_of_sq(s));
    let b = s.map_unary("rodrigues_versine", versine_of_sq, |s, _| d_versine_of_sq(s));
    let x = aa.narrow(1, 0, 1)?;
    let y = aa.narrow(1, 1, 1)?;
    let z = aa.narrow(1, 2, 1)?;
    let zero = Tensor::zeros(&[n, 1]);
    let skew = Tensor::concat(
        &[
            zero.clone(),
            z.neg(),
            y.clone(),
            z,
            zero.clone(),
            x.neg(),
            y.neg(),
            x,
            zero,
        ],
        1,
    )?
    .reshape(&[n, 3, 3])?;
    let outer = aa.reshape(&[n, 3, 1])?.mul(&aa.reshape(&[n, 1, 3])?)?;
    let eye = Tensor::eye(3).reshape(&[1, 3, 3])?;
    // diagonal scale 1 - B·θ²
    let diag = b.mul(&s)?.neg().add_scalar(1.0);
    eye.mul(&diag)?.add(&a.mul(&skew)?)?.add(&b.mul(&outer)?)
}

/// Single axis-angle `[3]` to `[3, 3]`.
pub fn rodrigues(aa: &Tensor) -> Result<Tensor> {
    if aa.shape() != [3] {
        return Err(shape_err("rodrigues", aa.shape(), &[3]));
    }
    rodrigues_batch(&aa.reshape(&[1, 3])?)?.reshape(&[3, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::tensor::{gradcheck, GradCheckConfig};

    #[test]
    fn zero_is_identity() {
        let r = rodrigues(&Tensor::zeros(&[3])).unwrap();
        assert_eq!(r.to_vec(), Tensor::eye(3).to_vec());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues(&Tensor::new(vec![0.0, 0.0, std::f64::consts::FRAC_PI_2], &[3]).unwrap()).unwrap();
        let v = r
            .matmul(&Tensor::new(vec![1.0, 0.0, 0.0], &[3, 1]).unwrap())
            .unwrap()
            .to_vec();
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v[2].abs() < 1e-12);
    }

    #[test]
    fn coefficient_branches_are_continuous() {
        for th in [SMALL_ANGLE * 0.999, SMALL_ANGLE * 1.001] {
            let s = th * th;
            assert!((sinc_of_sq(s) - 1.0).abs() < 1e-15);
            assert!((versine_of_sq(s) - 0.5).abs() < 1e-15);
        }
        let (lo, hi) = (
            SERIES_ANGLE_FOR_DERIVATIVE * 0.9999,
            SERIES_ANGLE_FOR_DERIVATIVE * 1.0001,
        );
        assert!((d_sinc_of_sq(lo * lo) - d_sinc_of_sq(hi * hi)).abs() < 1e-9);
        assert!((d_versine_of_sq(lo * lo) - d_versine_of_sq(hi * hi)).abs() < 1e-9);
    }

    #[test]
    fn gradcheck_generic_and_near_zero() {
        let mut rng = SeededRng::new(17);
        let mut rows = rng.uniform_vec(9, -2.0, 2.0);
        rows.extend([1e-5, -2e-5, 3e-6, 0.0, 0.0, 0.0, 5e-3, 1e-3, -4e-3]);
        let aa = Tensor::param(rows, &[6, 3]).unwrap();
        let w = Tensor::from_fn(&[6, 3, 3], |i| (i as f64 * 0.53).sin());
        let report = gradcheck(
            || Ok(rodrigues_batch(&aa)?.mul(&w)?.sum_all()),
            std::slice::from_ref(&aa),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
