//! Thin wrapper over the system BLAS single/double precision GEMM.
//!
//! OpenBLAS is pinned to one internal thread; all parallelism in this crate
//! is owned by rayon with fixed work splits, which keeps results identical
//! across `--threads` settings. On hypervisors that mask the CPUID model
//! string OpenBLAS cannot pick its kernel set, so we force a core type
//! matching the detected instruction set before first use.

use std::os::raw::{c_char, c_int};
use std::sync::Once;

const CBLAS_ROW_MAJOR: c_int = 101;
const CBLAS_NO_TRANS: c_int = 111;
const CBLAS_TRANS: c_int = 112;

extern "C" {
    fn cblas_sgemm(
        order: c_int, trans_a: c_int, trans_b: c_int,
        m: c_int, n: c_int, k: c_int,
        alpha: f32, a: *const f32, lda: c_int, b: *const f32, ldb: c_int,
        beta: f32, c: *mut f32, ldc: c_int,
    );
    fn cblas_dgemm(
        order: c_int, trans_a: c_int, trans_b: c_int,
        m: c_int, n: c_int, k: c_int,
        alpha: f64, a: *const f64, lda: c_int, b: *const f64, ldb: c_int,
        beta: f64, c: *mut f64, ldc: c_int,
    );
    fn openblas_set_num_threads(n: c_int);
    fn openblas_get_corename() -> *const c_char;
}

static INIT: Once = Once::new();

fn init_blas() {
    INIT.call_once(|| {
        if std::env::var_os("OPENBLAS_CORETYPE").is_none() {
            let core = if is_x86_feature_detected!("avx512f") {
                Some("SKYLAKEX")
            } else if is_x86_feature_detected!("avx2") {
                Some("HASWELL")
            } else {
                None
            };
            if let Some(core) = core {
                std::env::set_var("OPENBLAS_CORETYPE", core);
            }
        }
        unsafe {
            openblas_set_num_threads(1);
            // Touching the core name forces driver initialization now, while
            // the env var above is guaranteed to be visible.
            let _ = openblas_get_corename();
        }
    });
}

macro_rules! gemm_ld_impl {
    ($name:ident, $t:ty, $cblas:ident) => {
        /// `c[m x n] (+)= a * b`, row-major with explicit leading dimensions.
        /// `trans_a` reinterprets `a` as `k x m` storage (likewise `trans_b`).
        #[allow(clippy::too_many_arguments)]
        pub fn $name(
            m: usize, k: usize, n: usize,
            a: &[$t], lda: usize, trans_a: bool,
            b: &[$t], ldb: usize, trans_b: bool,
            c: &mut [$t], ldc: usize,
            accumulate: bool,
        ) {
            init_blas();
            if m == 0 || n == 0 || k == 0 {
                return;
            }
            let beta = if accumulate { 1.0 } else { 0.0 };
            let ta = if trans_a { CBLAS_TRANS } else { CBLAS_NO_TRANS };
            let tb = if trans_b { CBLAS_TRANS } else { CBLAS_NO_TRANS };
            unsafe {
                $cblas(
                    CBLAS_ROW_MAJOR, ta, tb,
                    m as c_int, n as c_int, k as c_int,
                    1.0, a.as_ptr(), lda as c_int, b.as_ptr(), ldb as c_int,
                    beta, c.as_mut_ptr(), ldc as c_int,
                );
            }
        }
    };
}

gemm_ld_impl!(sgemm_ld, f32, cblas_sgemm);
gemm_ld_impl!(dgemm_ld, f64, cblas_dgemm);
