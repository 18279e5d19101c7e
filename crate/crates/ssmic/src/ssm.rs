//! State-space kernels: continuous parameters, ZOH discretization, recurrent
//! and convolutional scans, and the input-dependent selective scan used by the
//! 2-D scan module.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Continuous state-space parameters: h'(t) = A h(t) + B x(t), y(t) = C h(t).
#[derive(Debug, Clone)]
pub struct SsmParams {
    /// A, [N x N].
    pub a: Tensor,
    /// B, [N x 1].
    pub b: Tensor,
    /// C, [1 x N].
    pub c: Tensor,
}

impl SsmParams {
    pub fn new(a: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let n = a.shape()[0];
        if a.shape() != [n, n] {
            return Err(Error::Shape(format!("A must be square, got {:?}", a.shape())));
        }
        if b.shape() != [n, 1] {
            return Err(Error::Shape(format!("B must be [{n} x 1], got {:?}", b.shape())));
        }
        if c.shape() != [1, n] {
            return Err(Error::Shape(format!("C must be [1 x {n}], got {:?}", c.shape())));
        }
        Ok(Self { a, b, c })
    }

    pub fn state_dim(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Discretized parameters: h_t = A_bar h_{t-1} + B_bar x_t.
#[derive(Debug, Clone)]
pub struct DiscreteSsmParams {
    pub a_bar: Tensor,
    pub b_bar: Tensor,
    pub step: f64,
}

/// Per-step inputs of the selective (S6) scan over a length-L sequence of
/// D-dimensional channels with diagonal state of size N per channel.
#[derive(Debug, Clone)]
pub struct SelectiveScanInputs {
    /// Input sequence, [L x D].
    pub x: Tensor,
    /// Per-step step sizes (post-softplus, all > 0), [L x D].
    pub delta: Tensor,
    /// Per-step input projections, [L x N].
    pub b_t: Tensor,
    /// Per-step output projections, [L x N].
    pub c_t: Tensor,
    /// log of -A per channel and state index, [D x N]; A = -exp(a_log).
    pub a_log: Tensor,
    /// Residual through-path gain per channel, [D].
    pub d_skip: Tensor,
}

impl SelectiveScanInputs {
    /// Shape validation only; accepts degenerate values in `delta`.
    pub fn shape_dims(&self) -> Result<(usize, usize, usize)> {
        let (l, d) = (self.x.shape()[0], self.x.shape()[1]);
        let n = self.b_t.shape()[1];
        if self.delta.shape() != [l, d] {
            return Err(Error::Shape("delta must match x".into()));
        }
        if self.b_t.shape() != [l, n] || self.c_t.shape() != [l, n] {
            return Err(Error::Shape("B_t / C_t must be [L x N]".into()));
        }
        if self.a_log.shape() != [d, n] {
            return Err(Error::Shape("A_log must be [D x N]".into()));
        }
        if self.d_skip.shape() != [d] {
            return Err(Error::Shape("D_skip must be [D]".into()));
        }
        Ok((l, d, n))
    }

    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let dims = self.shape_dims()?;
        if self.delta.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Shape("delta entries must be > 0".into()));
        }
        Ok(dims)
    }
}

/// Infinity norm of a square matrix.
fn norm_inf(m: &Tensor) -> f64 {
    let n = m.shape()[0];
    (0..n)
        .map(|i| (0..n).map(|j| m.data()[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn identity(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

/// Matrix exponential by scaling-and-squaring with a Taylor series.
pub fn matrix_exp(m: &Tensor) -> Result<Tensor> {
    let n = m.shape()[0];
    if m.shape() != [n, n] {
        return Err(Error::Shape(format!("matrix_exp wants square, got {:?}", m.shape())));
    }
    let norm = norm_inf(m);
    let s = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let scaled = m.scale(1.0 / (1u64 << s) as f64);
    // Taylor to order 18 at norm <= 0.25 is far below f64 epsilon
    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=18u32 {
        term = term.matmul(&scaled)?.scale(1.0 / k as f64);
        result = result.add(&term)?;
    }
    for _ in 0..s {
        result = result.matmul(&result)?;
    }
    Ok(result)
}

/// Solves M x = rhs (rhs [n x k]) by Gaussian elimination with partial
/// pivoting; errors when M is numerically singular.
fn solve(m: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    let n = m.shape()[0];
    let k = rhs.shape()[1];
    let mut a: Vec<f64> = m.data().to_vec();
    let mut b: Vec<f64> = rhs.data().to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .unwrap();
        if a[piv * n + col].abs() < 1e-300 {
            return Err(Error::Shape("singular matrix in ZOH discretization".into()));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..k {
                b.swap(col * k + j, piv * k + j);
            }
        }
        let d = a[col * n + col];
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            for j in 0..k {
                b[row * k + j] -= f * b[col * k + j];
            }
        }
    }
    for row in 0..n {
        let d = a[row * n + row];
        for j in 0..k {
            b[row * k + j] /= d;
        }
    }
    Tensor::new(vec![n, k], b)
}

/// Relative-term cutoff for the small-step series evaluation of B_bar.
const ZOH_SERIES_NORM_THRESHOLD: f64 = 0.5;

/// Zero-order-hold discretization: A_bar = exp(step A),
/// B_bar = (step A)^-1 (exp(step A) - I) step B. Below
/// `ZOH_SERIES_NORM_THRESHOLD` on |step A| the singular inverse is replaced by
/// the series sum_k (step A)^k / (k+1)! * step B truncated at relative term
/// 1e-14.
pub fn discretize_zoh(p: &SsmParams, step: f64) -> Result<DiscreteSsmParams> {
    if step <= 0.0 {
        return Err(Error::Shape(format!("step must be > 0, got {step}")));
    }
    let n = p.state_dim();
    let da = p.a.scale(step);
    let a_bar = matrix_exp(&da)?;
    let db = p.b.scale(step);
    let b_bar = if norm_inf(&da) < ZOH_SERIES_NORM_THRESHOLD {
        // series path, exact limit at A -> 0
        let mut acc = db.clone();
        let mut term = db.clone();
        let mut k = 1u32;
        loop {
            term = da.matmul(&term)?.scale(1.0 / (k + 1) as f64);
            acc = acc.add(&term)?;
            let tn: f64 = term.data().iter().map(|v| v.abs()).sum();
            let an: f64 = acc.data().iter().map(|v| v.abs()).sum();
            if tn <= 1e-14 * an.max(1e-300) || k > 60 {
                break;
            }
            k += 1;
        }
        acc
    } else {
        let em1 = a_bar.add(&identity(n).scale(-1.0))?;
        solve(&da, &em1.matmul(&db)?)?
    };
    Ok(DiscreteSsmParams {
        a_bar,
        b_bar,
        step,
    })
}

/// Left-to-right recurrence h_t = A_bar h_{t-1} + B_bar x_t, y_t = C h_t with
/// h_{-1} = 0.
pub fn scan_recurrent(d: &DiscreteSsmParams, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = d.a_bar.shape()[0];
    if x.shape().len() != 1 {
        return Err(Error::Shape("scan input must be 1-D".into()));
    }
    let l = x.shape()[0];
    let mut h = vec![0.0; n];
    let mut y = vec![0.0; l];
    for t in 0..l {
        let mut hn = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += d.a_bar.data()[i * n + j] * h[j];
            }
            hn[i] = acc + d.b_bar.data()[i] * x.data()[t];
        }
        h = hn;
        let mut out = 0.0;
        for i in 0..n {
            out += c.data()[i] * h[i];
        }
        y[t] = out;
    }
    Tensor::new(vec![l], y)
}

/// SSM convolution kernel K_bar = (C B_bar, C A_bar B_bar, ...,
/// C A_bar^{L-1} B_bar).
pub fn build_kernel(d: &DiscreteSsmParams, c: &Tensor, l: usize) -> Result<Tensor> {
    if l == 0 {
        return Err(Error::Shape("kernel length must be >= 1".into()));
    }
    let n = d.a_bar.shape()[0];
    let mut v: Vec<f64> = d.b_bar.data().to_vec();
    let mut k = vec![0.0; l];
    for t in 0..l {
        let mut out = 0.0;
        for i in 0..n {
            out += c.data()[i] * v[i];
        }
        k[t] = out;
        if t + 1 < l {
            let mut vn = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += d.a_bar.data()[i * n + j] * v[j];
                }
                vn[i] = acc;
            }
            v = vn;
        }
    }
    Tensor::new(vec![l], k)
}

/// Causal convolution y_t = sum_{k=0..t} K_bar_k x_{t-k}.
pub fn scan_convolutional(kernel: &Tensor, x: &Tensor) -> Result<Tensor> {
    if kernel.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "kernel length {:?} != input length {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    let l = x.shape()[0];
    let mut y = vec![0.0; l];
    for t in 0..l {
        let mut acc = 0.0;
        for k in 0..=t {
            acc += kernel.data()[k] * x.data()[t - k];
        }
        y[t] = acc;
    }
    Tensor::new(vec![l], y)
}

/// Selective (S6) scan with diagonal per-channel state:
/// h_t = exp(delta_t A) .* h_{t-1} + (delta_t B_t) x_t,
/// y_t = <C_t, h_t> + D_skip x_t, with A = -exp(A_log).
pub fn selective_scan(s: &SelectiveScanInputs) -> Result<Tensor> {
    Ok(selective_scan_with_states(s)?.0)
}

/// Same as [`selective_scan`] but also returns the hidden states
/// (flattened [D x L x N]) for use by the reverse-mode sweep.
pub fn selective_scan_with_states(s: &SelectiveScanInputs) -> Result<(Tensor, Vec<f64>)> {
    let (l, d, n) = s.dims()?;
    let mut y = vec![0.0; l * d];
    let mut states = vec![0.0; d * l * n];
    for ch in 0..d {
        let a_row: Vec<f64> = (0..n).map(|i| -s.a_log.data()[ch * n + i].exp()).collect();
        let mut h = vec![0.0; n];
        for t in 0..l {
            let dt = s.delta.data()[t * d + ch];
            let xv = s.x.data()[t * d + ch];
            let mut out = 0.0;
            for i in 0..n {
                let ab = (dt * a_row[i]).exp();
                h[i] = ab * h[i] + dt * s.b_t.data()[t * n + i] * xv;
                out += s.c_t.data()[t * n + i] * h[i];
                states[(ch * l + t) * n + i] = h[i];
            }
            y[t * d + ch] = out + s.d_skip.data()[ch] * xv;
        }
    }
    Ok((Tensor::new(vec![l, d], y)?, states))
}
