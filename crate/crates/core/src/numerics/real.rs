use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point width used by a tensor computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Training precision.
    #[default]
    F32,
    /// Verification precision (gradient checks, determinism runs).
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?}, expected f32 or f64")),
        }
    }
}

/// Scalar element type of a [`Tensor`](super::Tensor).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;

    /// `c = op(a) * op(b) (+ c)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
    ///
    /// `a` is stored row-major as `[m, k]`, or `[k, m]` when `trans_a`; likewise
    /// `b` is `[k, n]`, or `[n, k]` when `trans_b`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($ty:ty, $prec:expr, $kernel:path) => {
        impl Real for $ty {
            const PRECISION: Precision = $prec;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the strides above describe row-major buffers of the
                // asserted lengths, and `c` does not alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, Precision::F32, matrixmultiply::sgemm);
impl_real!(f64, Precision::F64, matrixmultiply::dgemm);
