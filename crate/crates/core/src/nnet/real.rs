//! Scalar abstraction so the same model code runs in `f32` for training and
//! `f64` for finite-difference checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every addressed element of
    /// `a`, `b` and `c` must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        View {
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        View {
            offset: 0,
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols as isize,
        }
    }

    /// Column block `[col0, col0 + width)` of a row-major matrix with `stride` columns.
    pub fn block(rows: usize, stride: usize, col0: usize, width: usize) -> Self {
        View {
            offset: col0,
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset
            + (self.rows - 1) * self.rs as usize
            + (self.cols - 1) * self.cs as usize
    }
}

/// `c = alpha * a * b + beta * c` over strided views.
pub fn gemm<R: Real>(alpha: R, a: &[R], va: View, b: &[R], vb: View, beta: R, c: &mut [R], vc: View) {
    assert_eq!(va.cols, vb.rows, "gemm inner dimension");
    assert_eq!(va.rows, vc.rows, "gemm output rows");
    assert_eq!(vb.cols, vc.cols, "gemm output cols");
    if vc.rows == 0 || vc.cols == 0 {
        return;
    }
    assert!(va.cols == 0 || va.max_index() < a.len());
    assert!(va.cols == 0 || vb.max_index() < b.len());
    assert!(vc.max_index() < c.len());
    // SAFETY: bounds of all three views were checked above.
    unsafe {
        R::gemm_raw(
            va.rows,
            va.cols,
            vb.cols,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs,
            va.cs,
            b.as_ptr().add(vb.offset),
            vb.rs,
            vb.cs,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs,
            vc.cs,
        );
    }
}

/// Numerically stable `log(exp(a) + exp(b))` that treats `-inf` as an absorbing zero.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}
