use super::NumError;

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumError::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix: product of all leading dims.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        // x·0 is NaN exactly when x is infinite or NaN; lanes keep it vectorizable
        let mut lanes = [0.0f64; 4];
        let chunks = self.data.chunks_exact(4);
        let rest = chunks.remainder();
        for c in chunks {
            for l in 0..4 {
                lanes[l] += c[l] * 0.0;
            }
        }
        let tail: f64 = rest.iter().map(|x| x * 0.0).sum();
        (lanes[0] + lanes[1] + lanes[2] + lanes[3] + tail) == 0.0
    }

    /// Softmax along `axis`, with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, NumError> {
        if axis >= self.shape.len() {
            return Err(NumError::Dimension(format!(
                "axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let mut out = self.data.clone();
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.data[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log Σ exp(x)`. The shifted exponentials are summed exactly in fixed
/// point with 100 fractional bits, so the result depends only on the
/// multiset of inputs, not their arrangement. Terms below `2^-100` of the
/// largest are dropped.
pub fn logsumexp(row: &[f64]) -> f64 {
    logsumexp_with(row, None)
}

/// [`logsumexp`], also writing the normalised exponentials (the softmax of
/// `row`) into `probs`.
pub(crate) fn logsumexp_with(row: &[f64], mut probs: Option<&mut [f64]>) -> f64 {
    if row.iter().any(|x| x.is_nan()) {
        return f64::NAN;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    // each term is split into two exact 50-bit halves so the casts stay in
    // hardware
    const HALF: f64 = (1u64 << 50) as f64;
    let (mut hi, mut lo) = (0u128, 0u128);
    for (j, x) in row.iter().enumerate() {
        let e = (x - max).exp();
        if let Some(p) = probs.as_deref_mut() {
            p[j] = e;
        }
        let y = e * HALF;
        let h = y as u64;
        hi += h as u128;
        lo += ((y - h as f64) * HALF) as u64 as u128;
    }
    let sum = ((hi << 50) + lo) as f64 / (HALF * HALF);
    if let Some(p) = probs {
        p.iter_mut().for_each(|v| *v /= sum);
    }
    max + sum.ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

// y += a0·b0 + a1·b1 + a2·b2 + a3·b3, elementwise
#[inline(always)]
fn axpy4(y: &mut [f64], a: [f64; 4], b: [&[f64]; 4]) {
    let n = y.len();
    let (b0, b1, b2, b3) = (&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]);
    for j in 0..n {
        y[j] += a[0] * b0[j] + a[1] * b1[j] + a[2] * b2[j] + a[3] * b3[j];
    }
}

#[inline(always)]
fn axpy(y: &mut [f64], a: f64, b: &[f64]) {
    for (yv, bv) in y.iter_mut().zip(b) {
        *yv += a * bv;
    }
}

// c[m,n] += a[m,k] · b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the running CPU supports AVX2.
        unsafe { avx2::gemm_nn(a, b, c, m, k, n) };
        return;
    }
    gemm_nn_impl(a, b, c, m, k, n)
}

#[inline(always)]
fn gemm_nn_impl(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let brow = |p: usize| &b[p * n..(p + 1) * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let av = [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]];
            if av != [0.0; 4] {
                axpy4(crow, av, [brow(p), brow(p + 1), brow(p + 2), brow(p + 3)]);
            }
            p += 4;
        }
        for p in p..k {
            if arow[p] != 0.0 {
                axpy(crow, arow[p], brow(p));
            }
        }
    }
}

// c[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the running CPU supports AVX2.
        unsafe { avx2::gemm_nt(a, b, c, m, k, n) };
        return;
    }
    gemm_nt_impl(a, b, c, m, k, n)
}

#[inline(always)]
fn gemm_nt_impl(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m >= 4 {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        gemm_nn_impl(a, &bt, c, m, k, n);
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

// c[k,n] += a[m,k]ᵀ · b[m,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the running CPU supports AVX2.
        unsafe { avx2::gemm_tn(a, b, c, m, k, n) };
        return;
    }
    gemm_tn_impl(a, b, c, m, k, n)
}

#[inline(always)]
fn gemm_tn_impl(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let brow = |i: usize| &b[i * n..(i + 1) * n];
    let mut i = 0;
    while i + 4 <= m {
        for p in 0..k {
            let av = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            if av != [0.0; 4] {
                axpy4(&mut c[p * n..(p + 1) * n], av, [brow(i), brow(i + 1), brow(i + 2), brow(i + 3)]);
            }
        }
        i += 4;
    }
    for i in i..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(&mut c[p * n..(p + 1) * n], av, brow(i));
            }
        }
    }
}

// Same kernels compiled for AVX2. No fused multiply-add is enabled, so
// results match the portable build bit for bit.
#[cfg(target_arch = "x86_64")]
mod avx2 {
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        super::gemm_nn_impl(a, b, c, m, k, n)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        super::gemm_nt_impl(a, b, c, m, k, n)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        super::gemm_tn_impl(a, b, c, m, k, n)
    }
}

/// Inner product, summed in blocks of four in the same order as the
/// blocked matrix kernels, so a row of `gemm_nt` equals the matching dots.
#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut s = 0.0;
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        if x != [0.0; 4] {
            s += x[0] * y[0] + x[1] * y[1] + x[2] * y[2] + x[3] * y[3];
        }
    }
    for (x, y) in ar.iter().zip(br) {
        if *x != 0.0 {
            s += x * y;
        }
    }
    s
}
