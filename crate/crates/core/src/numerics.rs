//! Dense tensor primitives with hand-derived forward and backward passes.
//!
//! Everything is `f64` and row-major. A [`Tensor4`] is a `(B, C, H, W)` feature
//! map; a [`Matrix`] holds per-instance vectors, fully-connected weights and
//! logits. Weight matrices are stored `[out × in]`.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape("Tensor4::from_vec", n, data.len()));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Number of spatial sites `H·W`.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    /// The `H·W` plane of channel `c` in instance `b`.
    pub fn plane_slice(&self, b: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_slice_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (b * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copy of instances `rows` stacked into a new batch.
    pub fn select(&self, rows: &[usize]) -> Tensor4 {
        let per = self.shape[1] * self.plane();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.data[r * per..(r + 1) * per]);
        }
        Tensor4 {
            shape: [rows.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scale(&self, a: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| a * v).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Anything backed by a flat buffer of reals; lets elementwise ops serve
/// both tensors and matrices.
pub trait Buffer: Sized {
    fn values(&self) -> &[f64];
    fn with_values(&self, values: Vec<f64>) -> Self;
}

impl Buffer for Tensor4 {
    fn values(&self) -> &[f64] {
        &self.data
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.data.len());
        Tensor4 {
            shape: self.shape,
            data: values,
        }
    }
}

impl Buffer for Matrix {
    fn values(&self) -> &[f64] {
        &self.data
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.data.len());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: values,
        }
    }
}

/// A named trainable parameter with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamSlot {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Xavier/Glorot uniform initialization for an `[out × in]` weight.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_out: usize, fan_in: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Matrix {
        rows: fan_out,
        cols: fan_in,
        data,
    }
}

/// Per-site channel mixing, the 1×1-convolution analogue:
/// `out[b,o,h,w] = Σ_i W[o,i]·x[b,i,h,w] + bias[o]`.
pub fn site_linear_fwd(x: &Tensor4, w: &Matrix, bias: &[f64]) -> Result<Tensor4> {
    let [bsz, c_in, h, wd] = x.shape();
    if w.cols() != c_in {
        return Err(Error::shape("site_linear_fwd", c_in, w.cols()));
    }
    if bias.len() != w.rows() {
        return Err(Error::shape("site_linear_fwd bias", w.rows(), bias.len()));
    }
    let c_out = w.rows();
    let mut out = Tensor4::zeros([bsz, c_out, h, wd]);
    for b in 0..bsz {
        for o in 0..c_out {
            let dst = out.plane_slice_mut(b, o);
            dst.fill(bias[o]);
            for i in 0..c_in {
                let k = w.get(o, i);
                if k == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(x.plane_slice(b, i)) {
                    *d += k * s;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SiteLinearGrads {
    pub x: Tensor4,
    pub w: Matrix,
    pub bias: Vec<f64>,
}

/// Dot product with eight independent partial sums so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

/// Sum with eight independent partial sums.
pub fn lane_sum(a: &[f64]) -> f64 {
    let mut lanes = [0.0; 8];
    let chunks = a.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for x in chunks {
        for k in 0..8 {
            lanes[k] += x[k];
        }
    }
    lanes.iter().sum::<f64>() + tail
}

pub fn site_linear_bwd(x: &Tensor4, w: &Matrix, grad_out: &Tensor4) -> Result<SiteLinearGrads> {
    let [bsz, c_in, h, wd] = x.shape();
    let c_out = w.rows();
    if w.cols() != c_in {
        return Err(Error::shape("site_linear_bwd", c_in, w.cols()));
    }
    if grad_out.shape() != [bsz, c_out, h, wd] {
        return Err(Error::shape(
            "site_linear_bwd grad_out",
            format!("{:?}", [bsz, c_out, h, wd]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let mut gx = Tensor4::zeros(x.shape());
    let mut gw = Matrix::zeros(c_out, c_in);
    let mut gb = vec![0.0; c_out];
    for b in 0..bsz {
        for o in 0..c_out {
            let g = grad_out.plane_slice(b, o);
            gb[o] += lane_sum(g);
            for i in 0..c_in {
                gw.data[o * c_in + i] += dot(g, x.plane_slice(b, i));
                let k = w.get(o, i);
                if k != 0.0 {
                    for (d, gv) in gx.plane_slice_mut(b, i).iter_mut().zip(g) {
                        *d += k * gv;
                    }
                }
            }
        }
    }
    Ok(SiteLinearGrads {
        x: gx,
        w: gw,
        bias: gb,
    })
}

pub fn relu_fwd<T: Buffer>(x: &T) -> T {
    x.with_values(x.values().iter().map(|&v| v.max(0.0)).collect())
}

/// Gradient of ReLU; the subgradient at exactly zero is taken as 0.
pub fn relu_bwd<T: Buffer>(x: &T, grad_out: &T) -> Result<T> {
    if x.values().len() != grad_out.values().len() {
        return Err(Error::shape(
            "relu_bwd",
            x.values().len(),
            grad_out.values().len(),
        ));
    }
    Ok(x.with_values(
        x.values()
            .iter()
            .zip(grad_out.values())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

pub fn global_avg_pool_fwd(x: &Tensor4) -> Result<Matrix> {
    let p = x.plane();
    if p == 0 {
        return Err(Error::EmptySpatial);
    }
    let (bsz, c) = (x.batch(), x.channels());
    let mut out = Matrix::zeros(bsz, c);
    for b in 0..bsz {
        for ch in 0..c {
            out.data[b * c + ch] = x.plane_slice(b, ch).iter().sum::<f64>() / p as f64;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_bwd(shape: [usize; 4], grad_out: &Matrix) -> Result<Tensor4> {
    let [bsz, c, h, w] = shape;
    let p = h * w;
    if p == 0 {
        return Err(Error::EmptySpatial);
    }
    if grad_out.rows() != bsz || grad_out.cols() != c {
        return Err(Error::shape(
            "global_avg_pool_bwd",
            format!("{bsz}x{c}"),
            format!("{}x{}", grad_out.rows(), grad_out.cols()),
        ));
    }
    let mut gx = Tensor4::zeros(shape);
    for b in 0..bsz {
        for ch in 0..c {
            let g = grad_out.get(b, ch) / p as f64;
            gx.plane_slice_mut(b, ch).fill(g);
        }
    }
    Ok(gx)
}

/// Fully-connected layer `out = h·Wᵀ + bias` with `W` stored `[out × in]`.
pub fn fc_fwd(h: &Matrix, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if h.cols() != w.cols() {
        return Err(Error::shape("fc_fwd", w.cols(), h.cols()));
    }
    if bias.len() != w.rows() {
        return Err(Error::shape("fc_fwd bias", w.rows(), bias.len()));
    }
    let mut out = Matrix::zeros(h.rows(), w.rows());
    for r in 0..h.rows() {
        let hr = h.row(r);
        for o in 0..w.rows() {
            let mut acc = bias[o];
            for (a, b) in hr.iter().zip(w.row(o)) {
                acc += a * b;
            }
            out.data[r * w.rows() + o] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub h: Matrix,
    pub w: Matrix,
    pub bias: Vec<f64>,
}

pub fn fc_bwd(h: &Matrix, w: &Matrix, grad_out: &Matrix) -> Result<FcGrads> {
    if h.cols() != w.cols() || grad_out.cols() != w.rows() || grad_out.rows() != h.rows() {
        return Err(Error::shape(
            "fc_bwd",
            format!("{}x{} -> {}", h.rows(), w.cols(), w.rows()),
            format!("{}x{} -> {}", grad_out.rows(), h.cols(), grad_out.cols()),
        ));
    }
    let (n, d_in, d_out) = (h.rows(), w.cols(), w.rows());
    let mut gh = Matrix::zeros(n, d_in);
    let mut gw = Matrix::zeros(d_out, d_in);
    let mut gb = vec![0.0; d_out];
    for r in 0..n {
        for o in 0..d_out {
            let g = grad_out.get(r, o);
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            for i in 0..d_in {
                gw.data[o * d_in + i] += g * h.get(r, i);
                gh.data[r * d_in + i] += g * w.get(o, i);
            }
        }
    }
    Ok(FcGrads {
        h: gh,
        w: gw,
        bias: gb,
    })
}

/// Plain matrix product `a·b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.cols(), b.rows()));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for r in 0..a.rows() {
        for k in 0..a.cols() {
            let av = a.get(r, k);
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

pub fn transpose(a: &Matrix) -> Matrix {
    let mut t = Matrix::zeros(a.cols(), a.rows());
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            t.data[c * a.rows() + r] = a.get(r, c);
        }
    }
    t
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| sigmoid_scalar(v)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index where the worst error occurred.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Denominator floor for the relative error. Entries whose analytic and
/// numeric gradients are both below this are compared in absolute terms,
/// since central differences carry roughly `ε_machine·|f|/h` of rounding noise.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences `(f(θ+h)−f(θ−h))/2h`
/// entry by entry.
pub fn grad_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-4]"
        )));
    }
    let f0 = f(params);
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective at probe point".into()));
    }
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        checked: params.len(),
        passed: true,
    };
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let fp = f(&theta);
        theta[i] = orig - h;
        let fm = f(&theta);
        theta[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective near parameter {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
