//! 16-bit fixed-point quantization and the quantized matrix-multiply kernel.
//!
//! Weights are clipped to [-1, 1] and activations to [-16, 16] before being
//! scaled by a power of two and rounded to nearest-even, so every value fits
//! a signed 16-bit integer with headroom. Products are accumulated in 32-bit
//! integers; integer addition is associative, so the SIMD and scalar paths
//! produce bitwise-identical results.
//!
//! Weight matrices are preprocessed offline into a kernel-optimal layout:
//! rows are stored contiguously with the inner dimension zero-padded to the
//! kernel block width, so every dot product runs over aligned, contiguous
//! panels with no remainder handling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::sync::OnceLock;

/// Weights are clipped to this range before quantization.
pub const WEIGHT_CLIP: f32 = 1.0;
/// Activations are clipped to this range before quantization. Covers the
/// relu range [0, 10] and tanh outputs in [-1, 1].
pub const ACTIVATION_CLIP: f32 = 16.0;

pub const DEFAULT_FRAC_BITS_W: u8 = 10;
pub const DEFAULT_FRAC_BITS_A: u8 = 10;

/// Inner-dimension padding block, in i16 elements. One 256-bit vector.
const K_BLOCK: usize = 16;

/// Layout scheme identifier stored in model files: row-panel layout with the
/// inner dimension padded to `K_BLOCK`.
pub const LAYOUT_ROW_PANEL_16: u32 = (1 << 16) | K_BLOCK as u32;

#[inline]
fn quantize_value(v: f32, clip: f32, scale: f32) -> i16 {
    let clipped = v.max(-clip).min(clip);
    let scaled = (clipped * scale).round_ties_even();
    // Saturate: e.g. +16.0 at 11 fractional bits lands one past i16::MAX.
    scaled.max(i16::MIN as f32).min(i16::MAX as f32) as i16
}

/// Clip, scale, round-to-nearest-even, saturate — for a whole slice. The
/// SSE2 path uses `cvtps` (hardware round-to-nearest-even) and a saturating
/// pack, and is bit-identical to the scalar path.
fn quantize_slice(src: &[f32], dst: &mut [i16], clip: f32, scale: f32) {
    debug_assert_eq!(src.len(), dst.len());
    #[cfg(target_arch = "x86_64")]
    {
        // SSE2 is part of the x86_64 baseline.
        unsafe { x86::quantize_slice_sse2(src, dst, clip, scale) }
        return;
    }
    #[allow(unreachable_code)]
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = quantize_value(v, clip, scale);
    }
}

/// 16-bit weight matrix in the preprocessed row-panel layout.
///
/// `rows` is the output dimension and `cols` the inner (dot) dimension, i.e.
/// this is the left operand of `gemm_i16`. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMatrix {
    rows: usize,
    cols: usize,
    cols_padded: usize,
    frac_bits: u8,
    layout_tag: u32,
    max_abs: i32,
    data: Vec<i16>,
}

impl QuantMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn layout_tag(&self) -> u32 {
        self.layout_tag
    }

    /// Raw packed payload including padding, row-major over padded rows.
    pub fn packed(&self) -> &[i16] {
        &self.data
    }

    fn row(&self, r: usize) -> &[i16] {
        &self.data[r * self.cols_padded..(r + 1) * self.cols_padded]
    }

    /// Rebuilds a matrix from serialized parts (see the model file format).
    pub fn from_packed(
        rows: usize,
        cols: usize,
        frac_bits: u8,
        layout_tag: u32,
        data: Vec<i16>,
    ) -> Result<Self> {
        if layout_tag != LAYOUT_ROW_PANEL_16 {
            return Err(Error::Format(format!("unknown quant layout tag {layout_tag:#x}")));
        }
        let cols_padded = cols.div_ceil(K_BLOCK) * K_BLOCK;
        if data.len() != rows * cols_padded {
            return Err(Error::Format(format!(
                "quant payload length {} does not match {}x{} (padded {})",
                data.len(),
                rows,
                cols,
                cols_padded
            )));
        }
        let max_abs = data.iter().map(|&v| (v as i32).abs()).max().unwrap_or(0);
        Ok(QuantMatrix { rows, cols, cols_padded, frac_bits, layout_tag, max_abs, data })
    }

    /// Gathers a subset of rows into a new packed matrix (used to restrict
    /// the output layer to a candidate shortlist).
    pub fn gather_rows(&self, ids: &[usize]) -> QuantMatrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols_padded);
        for &id in ids {
            data.extend_from_slice(self.row(id));
        }
        let max_abs = data.iter().map(|&v| (v as i32).abs()).max().unwrap_or(0);
        QuantMatrix {
            rows: ids.len(),
            cols: self.cols,
            cols_padded: self.cols_padded,
            frac_bits: self.frac_bits,
            layout_tag: self.layout_tag,
            max_abs,
            data,
        }
    }

    /// Floats recovered by dividing by `2^frac_bits`; padding is dropped.
    pub fn dequantize(&self) -> Tensor {
        let scale = 2.0f32.powi(-(self.frac_bits as i32));
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let src = self.row(r);
            for (dst, &q) in out.row_mut(r).iter_mut().zip(src) {
                *dst = q as f32 * scale;
            }
        }
        out
    }
}

/// Clips `w` to [-1, 1], scales by `2^frac_bits_w`, rounds to nearest-even,
/// and packs rows into the kernel layout. `w` is taken in `[m x k]`
/// orientation (output dim x inner dim).
pub fn quantize_weights(w: &Tensor, frac_bits_w: u8) -> QuantMatrix {
    assert!((8..=14).contains(&frac_bits_w), "frac_bits_w out of range");
    let scale = 2.0f32.powi(frac_bits_w as i32);
    let rows = w.rows();
    let cols = w.cols();
    let cols_padded = cols.div_ceil(K_BLOCK) * K_BLOCK;
    let mut data = vec![0i16; rows * cols_padded];
    for r in 0..rows {
        let dst = &mut data[r * cols_padded..r * cols_padded + cols];
        quantize_slice(w.row(r), dst, WEIGHT_CLIP, scale);
    }
    let max_abs = data.iter().map(|&v| (v as i32).abs()).max().unwrap_or(0);
    QuantMatrix {
        rows,
        cols,
        cols_padded,
        frac_bits: frac_bits_w,
        layout_tag: LAYOUT_ROW_PANEL_16,
        max_abs,
        data,
    }
}

/// A quantized vector of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantVector {
    frac_bits: u8,
    data: Vec<i16>,
}

impl QuantVector {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn dequantize(&self) -> Tensor {
        let scale = 2.0f32.powi(-(self.frac_bits as i32));
        Tensor::vector(self.data.iter().map(|&q| q as f32 * scale).collect())
    }
}

/// Clips every element of `v` to [-16, 16], scales by `2^frac_bits_a`, and
/// rounds to nearest-even. Elements are taken in row-major order.
pub fn quantize_activations(v: &Tensor, frac_bits_a: u8) -> QuantVector {
    assert!((8..=11).contains(&frac_bits_a), "frac_bits_a out of range");
    let scale = 2.0f32.powi(frac_bits_a as i32);
    let mut data = vec![0i16; v.data().len()];
    quantize_slice(v.data(), &mut data, ACTIVATION_CLIP, scale);
    QuantVector { frac_bits: frac_bits_a, data }
}

/// A batch of quantized activation vectors, stored column-major with each
/// column padded to the kernel block so dot products are contiguous.
#[derive(Debug, Clone)]
pub struct QuantBatch {
    k: usize,
    n: usize,
    k_padded: usize,
    frac_bits: u8,
    max_abs: i32,
    data: Vec<i16>,
}

impl QuantBatch {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    fn col(&self, j: usize) -> &[i16] {
        &self.data[j * self.k_padded..(j + 1) * self.k_padded]
    }

    fn from_quantized_columns(k: usize, cols: Vec<Vec<i16>>, frac_bits: u8) -> Self {
        let k_padded = k.div_ceil(K_BLOCK) * K_BLOCK;
        let n = cols.len();
        let mut data = vec![0i16; n * k_padded];
        let mut max_abs = 0i32;
        for (j, col) in cols.iter().enumerate() {
            debug_assert_eq!(col.len(), k);
            for (d, &q) in data[j * k_padded..j * k_padded + k].iter_mut().zip(col) {
                max_abs = max_abs.max((q as i32).abs());
                *d = q;
            }
        }
        QuantBatch { k, n, k_padded, frac_bits, max_abs, data }
    }

    /// Quantizes a `k x n` tensor column-by-column (one column per batch
    /// item), the orientation of the `gemm_i16` right operand.
    pub fn from_kxn(x: &Tensor, frac_bits_a: u8) -> Self {
        assert!((8..=11).contains(&frac_bits_a), "frac_bits_a out of range");
        let scale = 2.0f32.powi(frac_bits_a as i32);
        let (k, n) = (x.rows(), x.cols());
        let k_padded = k.div_ceil(K_BLOCK) * K_BLOCK;
        let mut data = vec![0i16; n * k_padded];
        let mut colbuf = vec![0.0f32; k];
        for j in 0..n {
            for (i, c) in colbuf.iter_mut().enumerate() {
                *c = x.get(i, j);
            }
            quantize_slice(&colbuf, &mut data[j * k_padded..j * k_padded + k], ACTIVATION_CLIP, scale);
        }
        let max_abs = data.iter().map(|&v| (v as i32).abs()).max().unwrap_or(0);
        QuantBatch { k, n, k_padded, frac_bits: frac_bits_a, max_abs, data }
    }

    /// Quantizes an `n x k` row-major tensor, one batch item per row. This is
    /// the fast path used by the decoder: each contiguous row becomes one
    /// contiguous column of the batch.
    pub fn from_rows(x: &Tensor, frac_bits_a: u8) -> Self {
        assert!((8..=11).contains(&frac_bits_a), "frac_bits_a out of range");
        let scale = 2.0f32.powi(frac_bits_a as i32);
        let (n, k) = (x.rows(), x.cols());
        let k_padded = k.div_ceil(K_BLOCK) * K_BLOCK;
        let mut data = vec![0i16; n * k_padded];
        for i in 0..n {
            quantize_slice(x.row(i), &mut data[i * k_padded..i * k_padded + k], ACTIVATION_CLIP, scale);
        }
        let max_abs = data.iter().map(|&v| (v as i32).abs()).max().unwrap_or(0);
        QuantBatch { k, n, k_padded, frac_bits: frac_bits_a, max_abs, data }
    }

    /// Assembles a batch from individual quantized vectors.
    pub fn from_vectors(vectors: &[&QuantVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::shape("quant_batch", "empty batch".to_string()))?;
        let k = first.len();
        let frac_bits = first.frac_bits();
        if vectors.iter().any(|v| v.len() != k || v.frac_bits() != frac_bits) {
            return Err(Error::shape("quant_batch", "mismatched vectors".to_string()));
        }
        let cols = vectors.iter().map(|v| v.data.clone()).collect();
        Ok(Self::from_quantized_columns(k, cols, frac_bits))
    }
}

// ---------------------------------------------------------------------------
// Kernel
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kernel {
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Sse2,
    Scalar,
}

fn detect_kernel() -> Kernel {
    static KERNEL: OnceLock<Kernel> = OnceLock::new();
    *KERNEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx2") {
                return Kernel::Avx2;
            }
            return Kernel::Sse2;
        }
        #[allow(unreachable_code)]
        Kernel::Scalar
    })
}

#[inline]
fn dot_i16_scalar(a: &[i16], b: &[i16]) -> i32 {
    let mut acc = 0i32;
    for (&x, &y) in a.iter().zip(b) {
        acc = acc.wrapping_add(x as i32 * y as i32);
    }
    acc
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "sse2")]
    pub unsafe fn quantize_slice_sse2(src: &[f32], dst: &mut [i16], clip: f32, scale: f32) {
        let lo = _mm_set1_ps(-clip);
        let hi = _mm_set1_ps(clip);
        let sc = _mm_set1_ps(scale);
        let n = src.len();
        let ps = src.as_ptr();
        let pd = dst.as_mut_ptr();
        let mut i = 0;
        while i + 8 <= n {
            let a = _mm_loadu_ps(ps.add(i));
            let b = _mm_loadu_ps(ps.add(i + 4));
            let a = _mm_mul_ps(_mm_min_ps(_mm_max_ps(a, lo), hi), sc);
            let b = _mm_mul_ps(_mm_min_ps(_mm_max_ps(b, lo), hi), sc);
            // cvtps rounds to nearest-even; packs saturates i32 -> i16.
            let packed = _mm_packs_epi32(_mm_cvtps_epi32(a), _mm_cvtps_epi32(b));
            _mm_storeu_si128(pd.add(i) as *mut __m128i, packed);
            i += 8;
        }
        for j in i..n {
            dst[j] = super::quantize_value(src[j], clip, scale);
        }
    }

    #[inline]
    unsafe fn hsum_epi32_128(v: __m128i) -> i32 {
        let sh = _mm_shuffle_epi32(v, 0b01_00_11_10);
        let s2 = _mm_add_epi32(v, sh);
        let sh2 = _mm_shuffle_epi32(s2, 0b00_00_00_01);
        _mm_cvtsi128_si32(_mm_add_epi32(s2, sh2))
    }

    /// One panel of up to 8 output columns for every row: each weight block
    /// is loaded once and multiplied against all columns so weight traffic
    /// does not scale with the batch size.
    #[target_feature(enable = "avx2")]
    pub unsafe fn panel_avx2<const N: usize>(
        w: &[i16],
        kp: usize,
        rows: usize,
        x: &[i16],
        out: &mut [f32],
        out_cols: usize,
        col0: usize,
        scale: f32,
    ) {
        let pw = w.as_ptr();
        let px = x.as_ptr();
        for i in 0..rows {
            let wrow = pw.add(i * kp);
            let mut acc = [_mm256_setzero_si256(); N];
            let mut t = 0;
            while t + 16 <= kp {
                let wv = _mm256_loadu_si256(wrow.add(t) as *const __m256i);
                for (j, a) in acc.iter_mut().enumerate() {
                    let xv = _mm256_loadu_si256(px.add(j * kp + t) as *const __m256i);
                    *a = _mm256_add_epi32(*a, _mm256_madd_epi16(wv, xv));
                }
                t += 16;
            }
            let orow = i * out_cols + col0;
            for (j, a) in acc.iter().enumerate() {
                let lo = _mm256_castsi256_si128(*a);
                let hi = _mm256_extracti128_si256(*a, 1);
                out[orow + j] = hsum_epi32_128(_mm_add_epi32(lo, hi)) as f32 * scale;
            }
        }
    }

    #[target_feature(enable = "sse2")]
    pub unsafe fn panel_sse2<const N: usize>(
        w: &[i16],
        kp: usize,
        rows: usize,
        x: &[i16],
        out: &mut [f32],
        out_cols: usize,
        col0: usize,
        scale: f32,
    ) {
        let pw = w.as_ptr();
        let px = x.as_ptr();
        for i in 0..rows {
            let wrow = pw.add(i * kp);
            let mut acc = [_mm_setzero_si128(); N];
            let mut t = 0;
            while t + 8 <= kp {
                let wv = _mm_loadu_si128(wrow.add(t) as *const __m128i);
                for (j, a) in acc.iter_mut().enumerate() {
                    let xv = _mm_loadu_si128(px.add(j * kp + t) as *const __m128i);
                    *a = _mm_add_epi32(*a, _mm_madd_epi16(wv, xv));
                }
                t += 8;
            }
            let orow = i * out_cols + col0;
            for (j, a) in acc.iter().enumerate() {
                out[orow + j] = hsum_epi32_128(*a) as f32 * scale;
            }
        }
    }
}

fn gemm_i16_core(w: &QuantMatrix, x: &QuantBatch, kernel: Kernel) -> Tensor {
    let scale = 2.0f32.powi(-((w.frac_bits + x.frac_bits) as i32));
    let mut out = Tensor::zeros(w.rows, x.n);
    let n = x.n;
    match kernel {
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx2 => {
            let mut col0 = 0;
            while col0 < n {
                let group = (n - col0).min(8);
                let xs = &x.data[col0 * x.k_padded..(col0 + group) * x.k_padded];
                // Monomorphized panels keep the per-column accumulators in
                // registers.
                unsafe {
                    let args = (&w.data[..], w.cols_padded, w.rows, xs);
                    let o = (out.data_mut(), n, col0, scale);
                    match group {
                        1 => x86::panel_avx2::<1>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        2 => x86::panel_avx2::<2>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        3 => x86::panel_avx2::<3>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        4 => x86::panel_avx2::<4>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        5 => x86::panel_avx2::<5>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        6 => x86::panel_avx2::<6>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        7 => x86::panel_avx2::<7>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        _ => x86::panel_avx2::<8>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                    }
                }
                col0 += group;
            }
        }
        #[cfg(target_arch = "x86_64")]
        Kernel::Sse2 => {
            let mut col0 = 0;
            while col0 < n {
                let group = (n - col0).min(8);
                let xs = &x.data[col0 * x.k_padded..(col0 + group) * x.k_padded];
                unsafe {
                    let args = (&w.data[..], w.cols_padded, w.rows, xs);
                    let o = (out.data_mut(), n, col0, scale);
                    match group {
                        1 => x86::panel_sse2::<1>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        2 => x86::panel_sse2::<2>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        3 => x86::panel_sse2::<3>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        4 => x86::panel_sse2::<4>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        5 => x86::panel_sse2::<5>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        6 => x86::panel_sse2::<6>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        7 => x86::panel_sse2::<7>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                        _ => x86::panel_sse2::<8>(args.0, args.1, args.2, args.3, o.0, o.1, o.2, o.3),
                    }
                }
                col0 += group;
            }
        }
        Kernel::Scalar => {
            for i in 0..w.rows {
                let w_row = w.row(i);
                let out_row = out.row_mut(i);
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o = dot_i16_scalar(w_row, x.col(j)) as f32 * scale;
                }
            }
        }
    }
    out
}

fn check_shapes(w: &QuantMatrix, x: &QuantBatch) -> Result<()> {
    if w.cols != x.k {
        return Err(Error::shape(
            "gemm_i16",
            format!("{}x{} * {}x{}", w.rows, w.cols, x.k, x.n),
        ));
    }
    Ok(())
}

/// True when the conservative bound `max|w| * max|x| * k` proves that no
/// 32-bit accumulator can overflow.
fn overflow_impossible(w: &QuantMatrix, x: &QuantBatch) -> bool {
    (w.max_abs as i64) * (x.max_abs as i64) * (w.cols as i64) <= i32::MAX as i64
}

/// `W * X` with 32-bit integer accumulation, dequantized by
/// `2^-(frac_bits_w + frac_bits_a)`. Deterministic: integer accumulation is
/// exact, so every kernel path returns bitwise-identical results.
///
/// Accumulator overflow is a documented failure mode: builds with debug
/// assertions verify against a 64-bit shadow whenever a cheap a-priori bound
/// cannot rule overflow out, and panic if it occurred. Release builds
/// accumulate in 32-bit only. Use [`gemm_i16_checked`] to detect overflow
/// explicitly in any build.
pub fn gemm_i16(w: &QuantMatrix, x: &QuantBatch) -> Result<Tensor> {
    check_shapes(w, x)?;
    #[cfg(debug_assertions)]
    {
        if !overflow_impossible(w, x) {
            return gemm_i16_checked(w, x);
        }
    }
    Ok(gemm_i16_core(w, x, detect_kernel()))
}

/// Like [`gemm_i16`] but always verifies, via a 64-bit shadow accumulation
/// when needed, that no 32-bit overflow occurred; returns an error instead
/// of wrapping.
pub fn gemm_i16_checked(w: &QuantMatrix, x: &QuantBatch) -> Result<Tensor> {
    check_shapes(w, x)?;
    if overflow_impossible(w, x) {
        return Ok(gemm_i16_core(w, x, detect_kernel()));
    }
    let scale = 2.0f32.powi(-((w.frac_bits + x.frac_bits) as i32));
    let mut out = Tensor::zeros(w.rows, x.n);
    for i in 0..w.rows {
        let w_row = w.row(i);
        for j in 0..x.n {
            let x_col = x.col(j);
            let mut acc = 0i64;
            for (&a, &b) in w_row.iter().zip(x_col) {
                acc += a as i64 * b as i64;
            }
            if acc > i32::MAX as i64 || acc < i32::MIN as i64 {
                return Err(Error::Overflow(format!(
                    "gemm_i16 cell ({i},{j}) sum {acc} exceeds 32-bit range"
                )));
            }
            out.row_mut(i)[j] = acc as i32 as f32 * scale;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn seeded(rows: usize, cols: usize, lo: f32, hi: f32, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn weight_scale_examples() {
        let w = Tensor::vector(vec![1.0, -1.0, 0.5, 1.7]);
        let q = quantize_weights(&w, 10);
        assert_eq!(&q.packed()[..4], &[1024, -1024, 512, 1024]);
        assert_eq!(q.frac_bits(), 10);
        assert_eq!(q.layout_tag(), LAYOUT_ROW_PANEL_16);
    }

    #[test]
    fn round_to_nearest_even() {
        // 2.5/1024 scales to exactly 2.5 -> rounds to 2; 3.5 -> 4.
        let w = Tensor::vector(vec![2.5 / 1024.0, 3.5 / 1024.0]);
        let q = quantize_weights(&w, 10);
        assert_eq!(&q.packed()[..2], &[2, 4]);
    }

    #[test]
    fn weight_roundtrip_bound() {
        let w = seeded(17, 33, -1.5, 1.5, 42);
        let q = quantize_weights(&w, 10);
        let back = q.dequantize();
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let clipped = w.get(r, c).max(-1.0).min(1.0);
                let err = (back.get(r, c) - clipped).abs();
                assert!(err <= 2.0f32.powi(-11), "err {err} at ({r},{c})");
            }
        }
    }

    #[test]
    fn activation_examples_and_clip() {
        let v = Tensor::vector(vec![10.0, 0.0, 20.0, -20.0]);
        let q = quantize_activations(&v, 10);
        assert_eq!(q.data(), &[10240, 0, 16384, -16384]);
    }

    #[test]
    fn activation_saturates_at_max_frac_bits() {
        // +16.0 * 2^11 = 32768, one past i16::MAX; must saturate.
        let q = quantize_activations(&Tensor::vector(vec![16.0, -16.0]), 11);
        assert_eq!(q.data(), &[32767, -32768]);
    }

    #[test]
    fn activation_roundtrip_bound() {
        let v = seeded(1, 257, -16.0, 16.0, 7);
        let q = quantize_activations(&v, 10);
        let back = q.dequantize();
        for (a, b) in v.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 2.0f32.powi(-11));
        }
    }

    #[test]
    fn gemm_zero_weights() {
        let w = quantize_weights(&Tensor::zeros(4, 8), 10);
        let x = QuantBatch::from_kxn(&seeded(8, 3, -2.0, 2.0, 1), 10);
        let out = gemm_i16(&w, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gemm_identity_bound() {
        let n = 32;
        let mut id = Tensor::zeros(n, n);
        for i in 0..n {
            id.row_mut(i)[i] = 1.0;
        }
        let w = quantize_weights(&id, 10);
        let v = seeded(n, 1, -8.0, 8.0, 3);
        let x = QuantBatch::from_kxn(&v, 10);
        let out = gemm_i16(&w, &x).unwrap();
        let max_v = v.data().iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        let bound = 2.0f32.powi(-10) * (1.0 + max_v);
        for i in 0..n {
            assert!((out.get(i, 0) - v.get(i, 0)).abs() <= bound);
        }
    }

    #[test]
    fn gemm_matches_float_reference_within_one_percent() {
        let wf = seeded(96, 128, -1.0, 1.0, 5);
        let xf = seeded(128, 6, -1.0, 1.0, 6);
        let w = quantize_weights(&wf, DEFAULT_FRAC_BITS_W);
        let x = QuantBatch::from_kxn(&xf, DEFAULT_FRAC_BITS_A);
        let qq = gemm_i16(&w, &x).unwrap();
        let ff = crate::tensor::gemm_f32(&wf, &xf).unwrap();
        let max_ref = ff.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let max_diff = qq
            .data()
            .iter()
            .zip(ff.data())
            .fold(0.0f32, |m, (&a, &b)| m.max((a - b).abs()));
        assert!(max_diff <= 0.01 * max_ref, "diff {max_diff} vs ref {max_ref}");
    }

    #[test]
    fn gemm_deterministic_and_kernels_agree() {
        let wf = seeded(40, 70, -1.0, 1.0, 8);
        let xf = seeded(70, 5, -4.0, 4.0, 9);
        let w = quantize_weights(&wf, 10);
        let x = QuantBatch::from_kxn(&xf, 10);
        let a = gemm_i16(&w, &x).unwrap();
        let b = gemm_i16(&w, &x).unwrap();
        assert_eq!(a.data(), b.data());
        // Scalar fallback must agree bitwise with whatever SIMD path ran.
        let scalar = gemm_i16_core(&w, &x, Kernel::Scalar);
        assert_eq!(a.data(), scalar.data());
    }

    #[test]
    fn from_rows_equals_from_kxn_transposed() {
        let x_rows = seeded(5, 33, -3.0, 3.0, 10);
        let a = QuantBatch::from_rows(&x_rows, 10);
        let b = QuantBatch::from_kxn(&x_rows.transpose(), 10);
        assert_eq!(a.data, b.data);
        let v0 = quantize_activations(
            &Tensor::vector(x_rows.row(0).to_vec()),
            10,
        );
        let c = QuantBatch::from_vectors(&[&v0]).unwrap();
        assert_eq!(c.col(0), a.col(0));
    }

    #[test]
    fn simd_quantize_matches_scalar_bitwise() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        // Include exact tie points and the saturation edge.
        let mut vals: Vec<f32> = (0..1000).map(|_| rng.gen_range(-20.0f32..20.0)).collect();
        vals.extend([2.5 / 1024.0, 3.5 / 1024.0, 16.0, -16.0, 15.99999, 0.0, -0.0]);
        for (clip, fb) in [(ACTIVATION_CLIP, 11u8), (ACTIVATION_CLIP, 10), (WEIGHT_CLIP, 10)] {
            let scale = 2.0f32.powi(fb as i32);
            let mut fast = vec![0i16; vals.len()];
            quantize_slice(&vals, &mut fast, clip, scale);
            let scalar: Vec<i16> = vals.iter().map(|&v| quantize_value(v, clip, scale)).collect();
            assert_eq!(fast, scalar, "clip {clip} fb {fb}");
        }
    }

    #[test]
    fn panel_kernel_handles_all_batch_widths() {
        let wf = seeded(33, 48, -1.0, 1.0, 50);
        let w = quantize_weights(&wf, 10);
        for n in 1..=19usize {
            let xf = seeded(48, n, -4.0, 4.0, 50 + n as u64);
            let x = QuantBatch::from_kxn(&xf, 10);
            let fast = gemm_i16(&w, &x).unwrap();
            let scalar = gemm_i16_core(&w, &x, Kernel::Scalar);
            assert_eq!(fast.data(), scalar.data(), "n = {n}");
        }
    }

    #[test]
    fn overflow_detected() {
        // Max-magnitude weights and activations with a long inner dimension
        // push the 32-bit accumulator past its range.
        let k = 4096;
        let w = quantize_weights(&Tensor::new(1, k, vec![1.0; k]).unwrap(), 14);
        let x = QuantBatch::from_kxn(&Tensor::new(k, 1, vec![16.0; k]).unwrap(), 11);
        assert!(matches!(gemm_i16_checked(&w, &x), Err(Error::Overflow(_))));
    }

    #[test]
    fn packed_roundtrip() {
        let wf = seeded(9, 21, -1.0, 1.0, 77);
        let q = quantize_weights(&wf, 12);
        let q2 = QuantMatrix::from_packed(9, 21, 12, q.layout_tag(), q.packed().to_vec()).unwrap();
        assert_eq!(q, q2);
        assert!(QuantMatrix::from_packed(9, 21, 12, 0xdead, q.packed().to_vec()).is_err());
    }

    #[test]
    fn gather_rows_matches_manual() {
        let wf = seeded(12, 30, -1.0, 1.0, 13);
        let q = quantize_weights(&wf, 10);
        let g = q.gather_rows(&[3, 3, 7]);
        assert_eq!(g.rows(), 3);
        assert_eq!(g.row(0), q.row(3));
        assert_eq!(g.row(2), q.row(7));
    }
}
