//! `f64` products `a · bᵀ` against a right-hand side packed once.
//!
//! `b` is stored as column panels of [`NR`] outputs, each panel laid out
//! `k`-major, so the inner loop streams contiguous memory. Every output is a
//! single sequential sum over `k`, which keeps results independent of the
//! blocking and of how many rows are multiplied at once.

use crate::Scalar;

/// Output columns per panel.
const NR: usize = 8;
/// Rows of `a` per micro-kernel call.
const MR: usize = 4;

/// `b` (`n × k`, row-major) widened to `f64` and packed into panels.
#[derive(Debug, Clone)]
pub(crate) struct PackedBt {
    n: usize,
    k: usize,
    panels: Vec<f64>,
}

impl PackedBt {
    pub(crate) fn new<T: Scalar>(b: &[T], n: usize, k: usize) -> Self {
        assert_eq!(b.len(), n * k, "PackedBt: b is not {n}x{k}");
        let n_panels = n.div_ceil(NR);
        let mut panels = vec![0.0; n_panels * k * NR];
        for j in 0..n {
            let (panel, lane) = (j / NR, j % NR);
            let base = panel * k * NR;
            for (p, v) in b[j * k..(j + 1) * k].iter().enumerate() {
                panels[base + p * NR + lane] = v.as_f64();
            }
        }
        Self { n, k, panels }
    }

    pub(crate) fn n(&self) -> usize {
        self.n
    }

    pub(crate) fn k(&self) -> usize {
        self.k
    }

    /// `a · bᵀ` for an `m × k` row-major `a`; returns `m × n` row-major.
    pub(crate) fn mul<T: Scalar>(&self, a: &[T], m: usize) -> Vec<f64> {
        let k = self.k;
        assert_eq!(a.len(), m * k, "PackedBt::mul: a is not {m}x{k}");
        let a64: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
        let mut c = vec![0.0; m * self.n];
        if k == 0 {
            return c;
        }
        let kernel = select_kernel();
        let mut tile = [0.0f64; MR * NR];
        for (pi, panel) in self.panels.chunks_exact(k * NR).enumerate() {
            let j0 = pi * NR;
            let width = NR.min(self.n - j0);
            for i0 in (0..m).step_by(MR) {
                let rows = MR.min(m - i0);
                kernel(&a64[i0 * k..(i0 + rows) * k], rows, k, panel, &mut tile);
                for r in 0..rows {
                    let dst = (i0 + r) * self.n + j0;
                    c[dst..dst + width].copy_from_slice(&tile[r * NR..r * NR + width]);
                }
            }
        }
        c
    }
}

/// Writes `rows × NR` products of `a` (`rows × k`) with one panel into `tile`.
type Kernel = fn(&[f64], usize, usize, &[f64], &mut [f64; MR * NR]);

fn select_kernel() -> Kernel {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            return x86::kernel;
        }
    }
    portable_kernel
}

fn portable_kernel(a: &[f64], rows: usize, k: usize, panel: &[f64], tile: &mut [f64; MR * NR]) {
    for r in 0..rows {
        let row = &a[r * k..(r + 1) * k];
        let mut acc = [0.0f64; NR];
        for (p, &x) in row.iter().enumerate() {
            let b = &panel[p * NR..(p + 1) * NR];
            for l in 0..NR {
                acc[l] = x.mul_add(b[l], acc[l]);
            }
        }
        tile[r * NR..(r + 1) * NR].copy_from_slice(&acc);
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{MR, NR};
    use std::arch::x86_64::*;

    pub(super) fn kernel(a: &[f64], rows: usize, k: usize, panel: &[f64], tile: &mut [f64; MR * NR]) {
        assert!(a.len() >= rows * k && panel.len() >= k * NR && rows <= MR);
        // SAFETY: only selected after runtime detection of avx2 and fma.
        unsafe {
            match rows {
                4 => block::<4>(a, k, panel, tile),
                3 => block::<3>(a, k, panel, tile),
                2 => block::<2>(a, k, panel, tile),
                _ => block::<1>(a, k, panel, tile),
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn block<const R: usize>(a: &[f64], k: usize, panel: &[f64], tile: &mut [f64; MR * NR]) {
        let mut lo = [_mm256_setzero_pd(); R];
        let mut hi = [_mm256_setzero_pd(); R];
        let (ap, bp) = (a.as_ptr(), panel.as_ptr());
        for p in 0..k {
            // SAFETY: `p < k` and the caller checked `panel.len() >= k * NR`
            // and `a.len() >= R * k`.
            unsafe {
                let b0 = _mm256_loadu_pd(bp.add(p * NR));
                let b1 = _mm256_loadu_pd(bp.add(p * NR + 4));
                for r in 0..R {
                    let x = _mm256_set1_pd(*ap.add(r * k + p));
                    lo[r] = _mm256_fmadd_pd(x, b0, lo[r]);
                    hi[r] = _mm256_fmadd_pd(x, b1, hi[r]);
                }
            }
        }
        for r in 0..R {
            // SAFETY: `r < R <= MR`, so both stores stay inside `tile`.
            unsafe {
                _mm256_storeu_pd(tile.as_mut_ptr().add(r * NR), lo[r]);
                _mm256_storeu_pd(tile.as_mut_ptr().add(r * NR + 4), hi[r]);
            }
        }
    }
}
