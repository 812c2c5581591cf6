//! Raw row-major kernels shared by the tape's forward and backward passes.
//!
//! Each output element is accumulated in a fixed order, so results are
//! bitwise reproducible regardless of how the compiler vectorizes the loops.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    dispatch::<false>(out, m, k, n, a, b);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    dispatch::<true>(out, k, m, n, a, b);
}

/// Uses 256-bit registers when the CPU has AVX. Only separate multiplies and
/// adds are emitted (no FMA), so results match the portable path bitwise.
fn dispatch<const T: bool>(out: &mut [f64], rows: usize, inner: usize, n: usize, a: &[f64], b: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the feature was detected at runtime.
        unsafe { blocked_avx::<T>(out, rows, inner, n, a, b) };
        return;
    }
    blocked::<T>(out, rows, inner, n, a, b);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn blocked_avx<const T: bool>(out: &mut [f64], rows: usize, inner: usize, n: usize, a: &[f64], b: &[f64]) {
    blocked::<T>(out, rows, inner, n, a, b);
}

/// `A[i, p]` of the left operand; `T` reads it transposed from `a[inner×rows]`.
#[inline(always)]
fn lhs<const T: bool>(a: &[f64], rows: usize, inner: usize, i: usize, p: usize) -> f64 {
    if T {
        a[p * rows + i]
    } else {
        a[i * inner + p]
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `out[rows×n] += A · b[inner×n]`. Every output
/// element accumulates its products in increasing `p`, so the result is
/// bitwise equal to the naive triple loop.
#[inline(always)]
fn blocked<const T: bool>(out: &mut [f64], rows: usize, inner: usize, n: usize, a: &[f64], b: &[f64]) {
    let row_blocks = rows / MR * MR;
    let col_blocks = n / NR * NR;
    for i0 in (0..row_blocks).step_by(MR) {
        for j0 in (0..col_blocks).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (r, acc_row) in acc.iter_mut().enumerate() {
                acc_row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for p in 0..inner {
                let bv: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("NR columns");
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let av = lhs::<T>(a, rows, inner, i0 + r, p);
                    for c in 0..NR {
                        acc_row[c] += av * bv[c];
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
            }
        }
        for r in i0..i0 + MR {
            simple_row::<T>(out, r, rows, inner, n, col_blocks, a, b);
        }
    }
    for r in row_blocks..rows {
        simple_row::<T>(out, r, rows, inner, n, 0, a, b);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn simple_row<const T: bool>(out: &mut [f64], r: usize, rows: usize, inner: usize, n: usize, from: usize, a: &[f64], b: &[f64]) {
    if from == n {
        return;
    }
    let out_row = &mut out[r * n + from..(r + 1) * n];
    for p in 0..inner {
        let av = lhs::<T>(a, rows, inner, r, p);
        for (o, &bv) in out_row.iter_mut().zip(&b[p * n + from..(p + 1) * n]) {
            *o += av * bv;
        }
    }
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, out, m, k, n);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of `logits * scale`, written into `out`.
pub fn softmax_row(logits: &[f64], scale: f64, out: &mut [f64]) {
    let max = logits
        .iter()
        .map(|v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log-softmax of `logits * scale`, written into `out`.
pub fn log_softmax_row(logits: &[f64], scale: f64, out: &mut [f64]) {
    let max = logits
        .iter()
        .map(|v| v * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v * scale - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = v * scale - lse;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}
