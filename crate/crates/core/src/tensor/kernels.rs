// Row-major GEMM helpers. Every kernel is a sequence of axpy updates over the
// output row so the summation order is fixed and independent of scheduling.

/// Column-block width held in registers by the GEMM kernel.
const BLOCK: usize = 16;

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Each output element is accumulated in `k` order, exactly as a sequence
/// of row axpys would, but a block of the output row stays in registers.
pub fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let full = n / BLOCK * BLOCK;
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for c in (0..full).step_by(BLOCK) {
            let mut acc = [0.0f32; BLOCK];
            acc.copy_from_slice(&out_row[c..c + BLOCK]);
            for (kk, &av) in a_row.iter().enumerate() {
                let b_blk: &[f32; BLOCK] = b[kk * n + c..kk * n + c + BLOCK].try_into().expect("block");
                for l in 0..BLOCK {
                    acc[l] += av * b_blk[l];
                }
            }
            out_row[c..c + BLOCK].copy_from_slice(&acc);
        }
        if full < n {
            for (kk, &av) in a_row.iter().enumerate() {
                axpy(av, &b[kk * n + full..(kk + 1) * n], &mut out_row[full..]);
            }
        }
    }
}

/// `out[k×n] += aᵀ · c` where `a` is `m×k` and `c` is `m×n`.
///
/// Sums run over `m` in ascending order for every output element; four
/// output rows and one column block are accumulated in registers at a time.
pub(crate) fn matmul_tn_into(a: &[f32], c: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    const ROWS: usize = 4;
    let full = n / BLOCK * BLOCK;
    let mut kk = 0;
    while kk + ROWS <= k {
        for col in (0..full).step_by(BLOCK) {
            let mut acc = [[0.0f32; BLOCK]; ROWS];
            for (i, acc_row) in acc.iter_mut().enumerate() {
                acc_row.copy_from_slice(&out[(kk + i) * n + col..(kk + i) * n + col + BLOCK]);
            }
            for r in 0..m {
                let c_blk: &[f32; BLOCK] = c[r * n + col..r * n + col + BLOCK].try_into().expect("block");
                let a_vals = &a[r * k + kk..r * k + kk + ROWS];
                for i in 0..ROWS {
                    let av = a_vals[i];
                    for l in 0..BLOCK {
                        acc[i][l] += av * c_blk[l];
                    }
                }
            }
            for (i, acc_row) in acc.iter().enumerate() {
                out[(kk + i) * n + col..(kk + i) * n + col + BLOCK].copy_from_slice(acc_row);
            }
        }
        kk += ROWS;
    }
    // Leftover output rows and columns take the plain row-axpy path.
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact(n)) {
        for (j, &av) in a_row.iter().enumerate() {
            let lo = if j < kk { full } else { 0 };
            if lo < n {
                axpy(av, &c_row[lo..], &mut out[j * n + lo..(j + 1) * n]);
            }
        }
    }
}

/// Returns the transpose of a `rows×cols` matrix.
pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Inner product with eight interleaved partial sums combined in a fixed
/// order, so the result does not depend on anything but the inputs.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_145_75;
const LN2_LO: f32 = 1.428_606_8e-6;

/// `eˣ` in single precision, branch-free so loops over it vectorise.
/// Accurate to a few ulp; inputs below −87 flush towards zero.
#[inline]
pub(crate) fn exp(x: f32) -> f32 {
    let x = x.clamp(-87.3, 88.7);
    // Adding and removing 1.5·2²³ rounds to nearest without a libm call.
    let n = (x * LOG2E + 12_582_912.0) - 12_582_912.0;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor polynomial of degree 7 on |r| ≤ ln2/2.
    let p = 1.0 / 5040.0;
    let p = p * r + 1.0 / 720.0;
    let p = p * r + 1.0 / 120.0;
    let p = p * r + 1.0 / 24.0;
    let p = p * r + 1.0 / 6.0;
    let p = p * r + 0.5;
    let p = p * r + 1.0;
    let p = p * r + 1.0;
    // n ∈ [−126, 128]; build 2ⁿ in two halves to stay in range.
    let ni = n as i32;
    let h = ni / 2;
    let s1 = f32::from_bits(((h + 127) as u32) << 23);
    let s2 = f32::from_bits(((ni - h + 127) as u32) << 23);
    p * s1 * s2
}

/// `tanh(x)` through [`exp`]; odd-symmetric by construction.
#[inline]
pub(crate) fn tanh(x: f32) -> f32 {
    let a = x.abs().min(20.0);
    let e = exp(-2.0 * a);
    let t = (1.0 - e) / (1.0 + e);
    t.copysign(x)
}
