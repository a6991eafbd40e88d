//! Dense f32 linear algebra and elementwise/activation kernels.
//!
//! Everything in this module is deterministic: `gemm_f32` accumulates each
//! output cell strictly left-to-right over the inner dimension, so repeated
//! runs (and independently written reference loops using the same order)
//! produce bitwise-identical results. Activation functions come in an exact
//! variant and a lookup-table variant with a bounded approximation error.

use crate::error::{Error, Result};
use std::sync::OnceLock;

/// Dense row-major matrix of f32. Vectors are represented as `1 x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor_new",
                format!("{}x{} needs {} values, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Row vector `1 x n`.
    pub fn vector(data: Vec<f32>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New tensor whose rows are `ids`-indexed rows of `self`.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(ids.len(), self.cols);
        for (dst, &src) in ids.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `bias` (length = cols) to every row.
    pub fn add_bias(&mut self, bias: &[f32]) {
        assert_eq!(self.cols, bias.len(), "add_bias length");
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += b;
            }
        }
    }

    /// Stacks row vectors into one matrix. All rows must share a length.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Tensor> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows".to_string()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Tensor { rows: rows.len(), cols, data })
    }
}

/// `C = A * B` with C[i][j] accumulated strictly in ascending inner-index
/// order, identical to the naive triple loop. The loop nest is i-t-j so the
/// inner loop runs over independent output cells and vectorizes without
/// reordering any per-cell summation.
pub fn gemm_f32(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "gemm_f32",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm_f32_into(a, b, &mut c);
    debug_assert!(c.all_finite(), "gemm_f32 produced non-finite values");
    Ok(c)
}

pub(crate) fn gemm_f32_into(a: &Tensor, b: &Tensor, c: &mut Tensor) {
    assert_eq!(a.cols, b.rows);
    assert_eq!((c.rows, c.cols), (a.rows, b.cols));
    #[cfg(target_arch = "x86_64")]
    {
        if avx2_available() {
            // Same adds in the same per-cell order, eight cells at a time.
            unsafe { gemm_f32_avx2(a, b, c) };
            return;
        }
    }
    gemm_f32_scalar(a, b, c);
}

fn gemm_f32_scalar(a: &Tensor, b: &Tensor, c: &mut Tensor) {
    let n = b.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = &mut c.data[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
fn avx2_available() -> bool {
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| is_x86_feature_detected!("avx2"))
}

/// AVX2 i-t-j kernel. Vector lanes span output cells (never one cell's
/// summation), multiplies and adds stay separate instructions (no FMA
/// contraction), and the inner-dimension unroll adds t, t+1, t+2, t+3 in
/// ascending order per cell — so results are bitwise identical to the
/// scalar triple loop.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_f32_avx2(a: &Tensor, b: &Tensor, c: &mut Tensor) {
    use std::arch::x86_64::*;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let pa = a.data.as_ptr();
    let pb = b.data.as_ptr();
    let pc = c.data.as_mut_ptr();
    for i in 0..m {
        let arow = pa.add(i * k);
        let crow = pc.add(i * n);
        let mut t = 0;
        while t + 4 <= k {
            let a0 = _mm256_set1_ps(*arow.add(t));
            let a1 = _mm256_set1_ps(*arow.add(t + 1));
            let a2 = _mm256_set1_ps(*arow.add(t + 2));
            let a3 = _mm256_set1_ps(*arow.add(t + 3));
            let b0 = pb.add(t * n);
            let b1 = pb.add((t + 1) * n);
            let b2 = pb.add((t + 2) * n);
            let b3 = pb.add((t + 3) * n);
            let mut j = 0;
            while j + 8 <= n {
                let mut cv = _mm256_loadu_ps(crow.add(j));
                cv = _mm256_add_ps(cv, _mm256_mul_ps(a0, _mm256_loadu_ps(b0.add(j))));
                cv = _mm256_add_ps(cv, _mm256_mul_ps(a1, _mm256_loadu_ps(b1.add(j))));
                cv = _mm256_add_ps(cv, _mm256_mul_ps(a2, _mm256_loadu_ps(b2.add(j))));
                cv = _mm256_add_ps(cv, _mm256_mul_ps(a3, _mm256_loadu_ps(b3.add(j))));
                _mm256_storeu_ps(crow.add(j), cv);
                j += 8;
            }
            while j < n {
                let mut cj = *crow.add(j);
                cj += *arow.add(t) * *b0.add(j);
                cj += *arow.add(t + 1) * *b1.add(j);
                cj += *arow.add(t + 2) * *b2.add(j);
                cj += *arow.add(t + 3) * *b3.add(j);
                *crow.add(j) = cj;
                j += 1;
            }
            t += 4;
        }
        while t < k {
            let av = _mm256_set1_ps(*arow.add(t));
            let brow = pb.add(t * n);
            let mut j = 0;
            while j + 8 <= n {
                let mut cv = _mm256_loadu_ps(crow.add(j));
                cv = _mm256_add_ps(cv, _mm256_mul_ps(av, _mm256_loadu_ps(brow.add(j))));
                _mm256_storeu_ps(crow.add(j), cv);
                j += 8;
            }
            while j < n {
                *crow.add(j) += *arow.add(t) * *brow.add(j);
                j += 1;
            }
            t += 1;
        }
    }
}

/// Numerically stable softmax of a row vector; subtracts the max before
/// exponentiating so large inputs cannot overflow.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.rows != 1 || v.cols == 0 {
        return Err(Error::shape("softmax", format!("{}x{}", v.rows, v.cols)));
    }
    let mut out = v.clone();
    softmax_row_in_place(&mut out.data);
    Ok(out)
}

pub(crate) fn softmax_row_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// In-place log-softmax of one row: `x - max - ln(sum(exp(x - max)))`.
pub(crate) fn log_softmax_row_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f32;
    for v in row.iter() {
        sum += (*v - max).exp();
    }
    let shift = max + sum.ln();
    for v in row.iter_mut() {
        // Guard against +0.0-crossing rounding: log-probs are never positive.
        *v = (*v - shift).min(0.0);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Activation functions used by the network. `ReluClipped` saturates at 10.0
/// so activations stay within the 16-bit quantization range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    ReluClipped,
}

/// Whether an activation is evaluated exactly or through its lookup table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActivationMode {
    #[default]
    Exact,
    Lut,
}

pub fn sigmoid_exact(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn tanh_exact(x: f32) -> f32 {
    x.tanh()
}

pub fn relu_clipped_exact(x: f32) -> f32 {
    x.max(0.0).min(10.0)
}

impl ActivationKind {
    pub fn exact(self, x: f32) -> f32 {
        match self {
            ActivationKind::Sigmoid => sigmoid_exact(x),
            ActivationKind::Tanh => tanh_exact(x),
            ActivationKind::ReluClipped => relu_clipped_exact(x),
        }
    }
}

/// Piecewise-linear table for one activation over a fixed domain.
///
/// The step is a power of two so index arithmetic is exact, and the grid is
/// dense enough that the interpolation error stays below 1e-3 everywhere
/// (measured well below 1e-5 for sigmoid/tanh). Inputs outside the domain
/// clamp to the boundary entries.
#[derive(Debug, Clone)]
pub struct LookupTable {
    kind: ActivationKind,
    domain_lo: f32,
    domain_hi: f32,
    step: f32,
    inv_step: f32,
    entries: Vec<f32>,
}

/// Intervals per default table (entry count is intervals + 1). Sized so the
/// interpolation error stays near f32 rounding (~1e-7), far below the 1e-3
/// contract; 64 KiB per table.
const LUT_INTERVALS: usize = 16384;

impl LookupTable {
    pub fn build(kind: ActivationKind, domain_lo: f32, domain_hi: f32, intervals: usize) -> Self {
        assert!(intervals >= 1024, "lookup table too coarse");
        assert!(domain_hi > domain_lo);
        let step = (domain_hi - domain_lo) / intervals as f32;
        let entries = (0..=intervals)
            .map(|i| kind.exact(domain_lo + step * i as f32))
            .collect();
        LookupTable {
            kind,
            domain_lo,
            domain_hi,
            step,
            inv_step: 1.0 / step,
            entries,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn domain(&self) -> (f32, f32) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn step(&self) -> f32 {
        self.step
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    #[inline]
    pub fn eval(&self, x: f32) -> f32 {
        if x <= self.domain_lo {
            return self.entries[0];
        }
        if x >= self.domain_hi {
            return *self.entries.last().unwrap();
        }
        let t = (x - self.domain_lo) * self.inv_step;
        let i = t as usize;
        let frac = t - i as f32;
        let lo = self.entries[i];
        let hi = self.entries[i + 1];
        lo + frac * (hi - lo)
    }
}

/// Shared default table for `kind`, built on first use. Domains: sigmoid and
/// relu-clipped over [-16, 16], tanh over [-8, 8]. The relu table grid hits
/// the kinks at 0 and 10 exactly, so its interpolation is exact.
pub fn default_table(kind: ActivationKind) -> &'static LookupTable {
    static SIGMOID: OnceLock<LookupTable> = OnceLock::new();
    static TANH: OnceLock<LookupTable> = OnceLock::new();
    static RELU: OnceLock<LookupTable> = OnceLock::new();
    match kind {
        ActivationKind::Sigmoid => SIGMOID
            .get_or_init(|| LookupTable::build(kind, -16.0, 16.0, LUT_INTERVALS)),
        ActivationKind::Tanh => {
            TANH.get_or_init(|| LookupTable::build(kind, -8.0, 8.0, LUT_INTERVALS))
        }
        ActivationKind::ReluClipped => {
            RELU.get_or_init(|| LookupTable::build(kind, -16.0, 16.0, LUT_INTERVALS))
        }
    }
}

/// Applies `kind` elementwise, either exactly or via the default lookup table.
pub fn activate(kind: ActivationKind, v: &Tensor, mode: ActivationMode) -> Tensor {
    let mut out = v.clone();
    activate_in_place(kind, &mut out, mode);
    out
}

pub(crate) fn activate_in_place(kind: ActivationKind, v: &mut Tensor, mode: ActivationMode) {
    match mode {
        ActivationMode::Exact => {
            for x in v.data.iter_mut() {
                *x = kind.exact(*x);
            }
        }
        ActivationMode::Lut => {
            let table = default_table(kind);
            for x in v.data.iter_mut() {
                *x = table.eval(*x);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

/// Elementwise add/mul. The unrolled fast path below is bit-identical to a
/// plain scalar loop because each output element depends on exactly one input
/// pair; no accumulation order exists to disturb.
pub fn vec_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::shape(
            "vec_binary",
            format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = a.clone();
    match op {
        BinaryOp::Add => binary_in_place(&mut out.data, &b.data, |x, y| x + y),
        BinaryOp::Mul => binary_in_place(&mut out.data, &b.data, |x, y| x * y),
    }
    Ok(out)
}

#[inline]
fn binary_in_place(a: &mut [f32], b: &[f32], f: impl Fn(f32, f32) -> f32 + Copy) {
    let mut a_it = a.chunks_exact_mut(8);
    let mut b_it = b.chunks_exact(8);
    for (ca, cb) in (&mut a_it).zip(&mut b_it) {
        for k in 0..8 {
            ca[k] = f(ca[k], cb[k]);
        }
    }
    for (x, y) in a_it.into_remainder().iter_mut().zip(b_it.remainder()) {
        *x = f(*x, *y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_gemm(a: &Tensor, b: &Tensor) -> Tensor {
        let mut c = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut acc = 0.0f32;
                for t in 0..a.cols {
                    acc += a.get(i, t) * b.get(t, j);
                }
                c.data[i * b.cols + j] = acc;
            }
        }
        c
    }

    fn seeded_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Tensor { rows, cols, data }
    }

    #[test]
    fn gemm_identity() {
        let i2 = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = gemm_f32(&i2, &b).unwrap();
        assert_eq!(c.data, vec![5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn gemm_scalar() {
        let a = Tensor::new(1, 1, vec![2.0]).unwrap();
        let b = Tensor::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(gemm_f32(&a, &b).unwrap().data, vec![6.0]);
    }

    #[test]
    fn gemm_matches_naive_triple_loop_bitwise() {
        let a = seeded_tensor(3, 4, 11);
        let b = seeded_tensor(4, 2, 12);
        let fast = gemm_f32(&a, &b).unwrap();
        let naive = naive_gemm(&a, &b);
        assert_eq!(fast.data, naive.data, "summation order must match exactly");
    }

    #[test]
    fn gemm_kernels_agree_bitwise_on_awkward_shapes() {
        // Sizes straddle the 8-wide vector blocks and the 4-way unroll.
        for (m, k, n) in [(1, 1, 1), (3, 7, 5), (6, 258, 9), (5, 33, 17), (2, 4, 8), (7, 50, 200)] {
            let a = seeded_tensor(m, k, (m * k) as u64);
            let b = seeded_tensor(k, n, (k * n + 1) as u64);
            let mut scalar = Tensor::zeros(m, n);
            gemm_f32_scalar(&a, &b, &mut scalar);
            let dispatched = gemm_f32(&a, &b).unwrap();
            assert_eq!(dispatched.data, scalar.data, "{m}x{k}x{n}");
            assert_eq!(scalar.data, naive_gemm(&a, &b).data, "{m}x{k}x{n} naive");
        }
    }

    #[test]
    fn gemm_shape_mismatch() {
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(2, 2);
        assert!(matches!(gemm_f32(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let v = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(v.data, vec![0.5, 0.5]);

        let v = softmax(&Tensor::vector(vec![2.0f32.ln(), 0.0])).unwrap();
        assert!((v.data[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((v.data[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let v = softmax(&Tensor::vector(vec![1000.0, 1000.0])).unwrap();
        assert_eq!(v.data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&Tensor::vector(vec![])).is_err());
    }

    #[test]
    fn activation_points() {
        assert_eq!(tanh_exact(0.0), 0.0);
        assert_eq!(sigmoid_exact(0.0), 0.5);
        assert_eq!(relu_clipped_exact(12.3), 10.0);
        assert_eq!(relu_clipped_exact(-3.0), 0.0);
        assert_eq!(relu_clipped_exact(4.5), 4.5);
    }

    #[test]
    fn lut_error_bound_grid_scan() {
        // Exhaustive scan at 1e-4 over each table's domain.
        for kind in [ActivationKind::Sigmoid, ActivationKind::Tanh, ActivationKind::ReluClipped] {
            let table = default_table(kind);
            let (lo, hi) = table.domain();
            let mut max_err = 0.0f32;
            let steps = ((hi - lo) / 1e-4) as usize;
            for i in 0..=steps {
                let x = lo + (hi - lo) * (i as f32 / steps as f32);
                let err = (table.eval(x) - kind.exact(x)).abs();
                max_err = max_err.max(err);
            }
            assert!(max_err <= 1e-3, "{kind:?} lut error {max_err}");
        }
    }

    #[test]
    fn lut_monotone_and_clamped() {
        for kind in [ActivationKind::Sigmoid, ActivationKind::Tanh] {
            let table = default_table(kind);
            let entries = table.entries();
            assert!(entries.len() >= 1024);
            assert!(entries.windows(2).all(|w| w[0] <= w[1]), "{kind:?} not monotone");
            let (lo, hi) = table.domain();
            assert_eq!(table.eval(lo - 100.0), entries[0]);
            assert_eq!(table.eval(hi + 100.0), *entries.last().unwrap());
        }
    }

    #[test]
    fn relu_clipped_output_range() {
        for &x in &[-1e9f32, -5.0, 0.0, 3.3, 9.999, 10.0, 11.0, 1e9] {
            let y = relu_clipped_exact(x);
            assert!((0.0..=10.0).contains(&y));
            let y = default_table(ActivationKind::ReluClipped).eval(x);
            assert!((0.0..=10.0).contains(&y));
        }
    }

    #[test]
    fn vec_binary_basics() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(vec_binary(BinaryOp::Add, &a, &b).unwrap().data, vec![4.0, 6.0]);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(vec_binary(BinaryOp::Mul, &a, &z).unwrap().data, vec![0.0, 0.0]);
        let bad = Tensor::vector(vec![1.0]);
        assert!(vec_binary(BinaryOp::Add, &a, &bad).is_err());
    }

    #[test]
    fn vec_binary_fast_path_matches_scalar_bitwise() {
        let a = seeded_tensor(1, 1024, 21);
        let b = seeded_tensor(1, 1024, 22);
        for op in [BinaryOp::Add, BinaryOp::Mul] {
            let fast = vec_binary(op, &a, &b).unwrap();
            let scalar: Vec<f32> = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Mul => x * y,
                })
                .collect();
            assert_eq!(fast.data, scalar);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_shift_invariant(
            // Inputs and shift live on a 2^-8 grid so `v + shift` is exact in
            // f32; otherwise input rounding (not softmax) breaks invariance.
            grid in proptest::collection::vec(-2048i32..2048, 1..64),
            shift_grid in -2048i32..2048,
        ) {
            let vals: Vec<f32> = grid.iter().map(|&g| g as f32 / 256.0).collect();
            let shift = shift_grid as f32 / 256.0;
            let base = softmax(&Tensor::vector(vals.clone())).unwrap();
            let sum: f32 = base.data.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(base.data.iter().all(|&p| p > 0.0));

            let shifted_in: Vec<f32> = vals.iter().map(|v| v + shift).collect();
            let shifted = softmax(&Tensor::vector(shifted_in)).unwrap();
            for (a, b) in base.data.iter().zip(&shifted.data) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn gemm_random_matches_naive(seed in 0u64..500) {
            let a = seeded_tensor(3, 5, seed);
            let b = seeded_tensor(5, 4, seed.wrapping_add(1));
            prop_assert_eq!(gemm_f32(&a, &b).unwrap().data, naive_gemm(&a, &b).data);
        }
    }
}
