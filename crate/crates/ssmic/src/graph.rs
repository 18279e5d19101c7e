//! Reverse-mode automatic differentiation over whole-tensor operations.
//!
//! A [`Graph`] is a tape of nodes appended in topological order. Forward
//! values are plain [`Tensor`]s; each differentiable node stores a closure
//! producing the vector-Jacobian products for its parents. Graphs built in
//! inference mode skip the closures (and any auxiliary state they would
//! capture) but compute identical forward values.

use crate::error::{Error, Result};
use crate::ssm::{selective_scan_with_states, SelectiveScanInputs};
use crate::tensor::{sigmoid, Tensor};

pub type Var = usize;

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal PDF.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Graph {
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v].value.shape()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, back: Option<BackFn>) -> Var {
        let back = if self.training { back } else { None };
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        self.nodes.len() - 1
    }

    /// Leaf node. Parameters and constants are both leaves; whether a
    /// gradient is read back for a leaf is the caller's business.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, vec![], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.add(&self.nodes[b].value).expect("add");
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.sub(&self.nodes[b].value).expect("sub");
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a].value.mul(&self.nodes[b].value).expect("mul");
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.mul(p[1]).unwrap(), g.mul(p[0]).unwrap()]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a].value.scale(s);
        self.push(v, vec![a], Some(Box::new(move |g, _, _| vec![g.scale(s)])))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a].value.map(|x| x + c);
        self.push(v, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    /// Broadcast-add a [C] bias over the rows of a [T x C] tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[bias].value;
        let c = *xv.shape().last().unwrap();
        assert_eq!(bv.shape(), [c], "bias width mismatch");
        let v = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv.data()[i % c]);
        self.push(
            v,
            vec![x, bias],
            Some(Box::new(move |g, _, _| {
                let mut db = vec![0.0; c];
                for (i, &gv) in g.data().iter().enumerate() {
                    db[i % c] += gv;
                }
                vec![g.clone(), Tensor::new(vec![c], db).unwrap()]
            })),
        )
    }

    /// Broadcast-multiply a [C] vector over the rows of a [T x C] tensor.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let xv = &self.nodes[x].value;
        let rv = &self.nodes[row].value;
        let c = *xv.shape().last().unwrap();
        assert_eq!(rv.shape(), [c], "row width mismatch");
        let v = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * rv.data()[i % c]);
        self.push(
            v,
            vec![x, row],
            Some(Box::new(move |g, p, _| {
                let dx = Tensor::from_fn(g.shape(), |i| g.data()[i] * p[1].data()[i % c]);
                let mut dr = vec![0.0; c];
                for (i, &gv) in g.data().iter().enumerate() {
                    dr[i % c] += gv * p[0].data()[i];
                }
                vec![dx, Tensor::new(vec![c], dr).unwrap()]
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a]
            .value
            .matmul(&self.nodes[b].value)
            .expect("matmul");
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                let (m, k) = (p[0].shape()[0], p[0].shape()[1]);
                let n = p[1].shape()[1];
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for t in 0..n {
                            acc += g.data()[i * n + t] * p[1].data()[j * n + t];
                        }
                        da[i * k + j] = acc;
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for t in 0..m {
                            acc += p[0].data()[t * k + i] * g.data()[t * n + j];
                        }
                        db[i * n + j] = acc;
                    }
                }
                vec![
                    Tensor::new(vec![m, k], da).unwrap(),
                    Tensor::new(vec![k, n], db).unwrap(),
                ]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.exp();
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out| vec![g.mul(out).unwrap()])),
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.map(f64::ln);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[0], |gv, xv| gv / xv).unwrap()]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.tanh();
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out| {
                vec![g.zip(out, |gv, y| gv * (1.0 - y * y)).unwrap()]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.sigmoid();
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out| {
                vec![g.zip(out, |gv, y| gv * y * (1.0 - y)).unwrap()]
            })),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.softplus();
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g.zip(p[0], |gv, x| gv * sigmoid(x)).unwrap()]
            })),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a].value.silu();
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g
                    .zip(p[0], |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .unwrap()]
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.nodes[a].value.sum());
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![Tensor::full(p[0].shape(), g.data()[0])]
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a].value.len() as f64;
        let v = Tensor::scalar(self.nodes[a].value.mean());
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![Tensor::full(p[0].shape(), g.data()[0] / n)]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a].value.reshape(shape).expect("reshape");
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g.reshape(p[0].shape()).unwrap()]
            })),
        )
    }

    /// out[i] = in[map[i]]; backward scatter-adds. Covers all the index
    /// rearrangements (cross-scan, space-to-depth and inverses).
    pub fn index_map(&mut self, a: Var, out_shape: &[usize], map: Vec<usize>) -> Var {
        let av = &self.nodes[a].value;
        debug_assert_eq!(map.len(), out_shape.iter().product::<usize>());
        let v = Tensor::from_fn(out_shape, |i| av.data()[map[i]]);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut din = vec![0.0; p[0].len()];
                for (i, &src) in map.iter().enumerate() {
                    din[src] += g.data()[i];
                }
                vec![Tensor::new(p[0].shape().to_vec(), din).unwrap()]
            })),
        )
    }

    /// Concatenate two [T x C] tensors along the channel axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let (t, ca) = (av.shape()[0], av.shape()[1]);
        let cb = bv.shape()[1];
        assert_eq!(bv.shape()[0], t, "concat rows mismatch");
        let v = Tensor::from_fn(&[t, ca + cb], |i| {
            let (row, col) = (i / (ca + cb), i % (ca + cb));
            if col < ca {
                av.data()[row * ca + col]
            } else {
                bv.data()[row * cb + col - ca]
            }
        });
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                let da = Tensor::from_fn(&[t, ca], |i| {
                    g.data()[(i / ca) * (ca + cb) + i % ca]
                });
                let db = Tensor::from_fn(&[t, cb], |i| {
                    g.data()[(i / cb) * (ca + cb) + ca + i % cb]
                });
                vec![da, db]
            })),
        )
    }

    /// Columns [from, to) of a [T x C] tensor.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = &self.nodes[a].value;
        let (t, c) = (av.shape()[0], av.shape()[1]);
        assert!(from < to && to <= c, "bad column slice {from}..{to} of {c}");
        let w = to - from;
        let v = Tensor::from_fn(&[t, w], |i| av.data()[(i / w) * c + from + i % w]);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut din = vec![0.0; t * c];
                for i in 0..t * w {
                    din[(i / w) * c + from + i % w] = g.data()[i];
                }
                vec![Tensor::new(vec![t, c], din).unwrap()]
            })),
        )
    }

    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var) -> Var {
        let v = self.nodes[x]
            .value
            .conv2d_depthwise(&self.nodes[kernel].value)
            .expect("conv2d_depthwise");
        self.push(
            v,
            vec![x, kernel],
            Some(Box::new(|g, p, _| {
                let (h, w, c) = (p[0].shape()[0], p[0].shape()[1], p[0].shape()[2]);
                let k = p[1].shape()[0];
                let r = (k / 2) as isize;
                let mut dx = vec![0.0; h * w * c];
                let mut dk = vec![0.0; k * k * c];
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        for ch in 0..c {
                            let gv = g.data()[(i as usize * w + j as usize) * c + ch];
                            for ki in -r..=r {
                                for kj in -r..=r {
                                    let (ii, jj) = (i + ki, j + kj);
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    let kidx = ((ki + r) as usize * k + (kj + r) as usize) * c + ch;
                                    let xidx = (ii as usize * w + jj as usize) * c + ch;
                                    dx[xidx] += gv * p[1].data()[kidx];
                                    dk[kidx] += gv * p[0].data()[xidx];
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(vec![h, w, c], dx).unwrap(),
                    Tensor::new(vec![k, k, c], dk).unwrap(),
                ]
            })),
        )
    }

    /// Dense 2-D convolution, input [H x W x Cin], kernel [k x k x Cin x Cout],
    /// zero "same" padding. Tap iteration order (ki, kj, ci) is part of the
    /// contract so a per-position serial evaluation can reproduce it bit-exactly.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Var {
        let xv = &self.nodes[x].value;
        let kv = &self.nodes[kernel].value;
        let v = conv2d_forward(xv, kv).expect("conv2d");
        self.push(
            v,
            vec![x, kernel],
            Some(Box::new(|g, p, _| {
                let (h, w, cin) = (p[0].shape()[0], p[0].shape()[1], p[0].shape()[2]);
                let (k, cout) = (p[1].shape()[0], p[1].shape()[3]);
                let r = (k / 2) as isize;
                let mut dx = vec![0.0; h * w * cin];
                let mut dk = vec![0.0; k * k * cin * cout];
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        for ki in -r..=r {
                            for kj in -r..=r {
                                let (ii, jj) = (i + ki, j + kj);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xidx = (ii as usize * w + jj as usize) * cin + ci;
                                    let xval = p[0].data()[xidx];
                                    for co in 0..cout {
                                        let gv =
                                            g.data()[(i as usize * w + j as usize) * cout + co];
                                        let kidx = (((ki + r) as usize * k + (kj + r) as usize)
                                            * cin
                                            + ci)
                                            * cout
                                            + co;
                                        dx[xidx] += gv * p[1].data()[kidx];
                                        dk[kidx] += gv * xval;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(vec![h, w, cin], dx).unwrap(),
                    Tensor::new(vec![k, k, cin, cout], dk).unwrap(),
                ]
            })),
        )
    }

    /// RMS normalization along the last axis with a learned scale.
    pub fn rms_norm(&mut self, x: Var, scale: Var, eps: f64) -> Var {
        let xv = &self.nodes[x].value;
        let sv = &self.nodes[scale].value;
        let c = *xv.shape().last().unwrap();
        assert_eq!(sv.shape(), [c], "rms_norm scale width");
        let rows = xv.len() / c;
        let mut out = vec![0.0; xv.len()];
        for t in 0..rows {
            let row = &xv.data()[t * c..(t + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let r = (ms + eps).sqrt();
            for j in 0..c {
                out[t * c + j] = row[j] / r * sv.data()[j];
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(
            v,
            vec![x, scale],
            Some(Box::new(move |g, p, _| {
                let rows = p[0].len() / c;
                let mut dx = vec![0.0; p[0].len()];
                let mut ds = vec![0.0; c];
                for t in 0..rows {
                    let row = &p[0].data()[t * c..(t + 1) * c];
                    let grow = &g.data()[t * c..(t + 1) * c];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let r = (ms + eps).sqrt();
                    let dot: f64 = (0..c)
                        .map(|j| grow[j] * p[1].data()[j] * row[j])
                        .sum();
                    for j in 0..c {
                        dx[t * c + j] = grow[j] * p[1].data()[j] / r
                            - row[j] * dot / (c as f64 * r * r * r);
                        ds[j] += grow[j] * row[j] / r;
                    }
                }
                vec![
                    Tensor::new(p[0].shape().to_vec(), dx).unwrap(),
                    Tensor::new(vec![c], ds).unwrap(),
                ]
            })),
        )
    }

    /// max(x, bound) with the gradient passed through where x >= bound.
    pub fn lower_bound(&mut self, x: Var, bound: f64) -> Var {
        let v = self.nodes[x].value.map(|a| a.max(bound));
        self.push(
            v,
            vec![x],
            Some(Box::new(move |g, p, _| {
                vec![g
                    .zip(p[0], |gv, xv| if xv >= bound { gv } else { 0.0 })
                    .unwrap()]
            })),
        )
    }

    /// Probability of the unit-width bin around y_hat under N(mu, sigma^2):
    /// Phi((y_hat + 0.5 - mu) / sigma) - Phi((y_hat - 0.5 - mu) / sigma).
    pub fn gaussian_bin_likelihood(&mut self, y_hat: Var, mu: Var, sigma: Var) -> Var {
        let (yv, mv, sv) = (
            &self.nodes[y_hat].value,
            &self.nodes[mu].value,
            &self.nodes[sigma].value,
        );
        assert_eq!(yv.shape(), mv.shape());
        assert_eq!(yv.shape(), sv.shape());
        let v = Tensor::from_fn(yv.shape(), |i| {
            let (y, m, s) = (yv.data()[i], mv.data()[i], sv.data()[i]);
            normal_cdf((y + 0.5 - m) / s) - normal_cdf((y - 0.5 - m) / s)
        });
        self.push(
            v,
            vec![y_hat, mu, sigma],
            Some(Box::new(|g, p, _| {
                let n = p[0].len();
                let mut dy = vec![0.0; n];
                let mut dm = vec![0.0; n];
                let mut dsg = vec![0.0; n];
                for i in 0..n {
                    let (y, m, s) = (p[0].data()[i], p[1].data()[i], p[2].data()[i]);
                    let up = (y + 0.5 - m) / s;
                    let lo = (y - 0.5 - m) / s;
                    let (pu, pl) = (normal_pdf(up), normal_pdf(lo));
                    let gv = g.data()[i];
                    dy[i] = gv * (pu - pl) / s;
                    dm[i] = -gv * (pu - pl) / s;
                    dsg[i] = -gv * (up * pu - lo * pl) / s;
                }
                vec![
                    Tensor::new(p[0].shape().to_vec(), dy).unwrap(),
                    Tensor::new(p[0].shape().to_vec(), dm).unwrap(),
                    Tensor::new(p[0].shape().to_vec(), dsg).unwrap(),
                ]
            })),
        )
    }

    /// Selective scan as a single node; forward delegates to the ssm kernel,
    /// backward runs the adjoint recurrence using the stored hidden states.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        b_t: Var,
        c_t: Var,
        a_log: Var,
        d_skip: Var,
    ) -> Var {
        let inputs = SelectiveScanInputs {
            x: self.nodes[x].value.clone(),
            delta: self.nodes[delta].value.clone(),
            b_t: self.nodes[b_t].value.clone(),
            c_t: self.nodes[c_t].value.clone(),
            a_log: self.nodes[a_log].value.clone(),
            d_skip: self.nodes[d_skip].value.clone(),
        };
        // shape errors are still programming errors; a delta that went
        // non-finite during training must propagate as NaN so the caller can
        // detect divergence from the loss instead of crashing mid-step
        let dims = inputs.shape_dims().expect("selective_scan shapes");
        let (y, states) = match selective_scan_with_states(&inputs) {
            Ok(pair) => pair,
            Err(_) => {
                let (l, d, n) = dims;
                (Tensor::full(&[l, d], f64::NAN), vec![f64::NAN; l * d * n])
            }
        };
        let back: BackFn = Box::new(move |g, p, _| {
            let (l, d) = (p[0].shape()[0], p[0].shape()[1]);
            let n = p[2].shape()[1];
            let (xv, dtv, bv, cv, alv, dkv) = (p[0], p[1], p[2], p[3], p[4], p[5]);
            let mut dx = vec![0.0; l * d];
            let mut ddt = vec![0.0; l * d];
            let mut db = vec![0.0; l * n];
            let mut dc = vec![0.0; l * n];
            let mut dal = vec![0.0; d * n];
            let mut ddk = vec![0.0; d];
            for ch in 0..d {
                let a_row: Vec<f64> =
                    (0..n).map(|i| -alv.data()[ch * n + i].exp()).collect();
                // carry_i = A_bar_{t+1,i} * lambda_{t+1,i}
                let mut carry = vec![0.0; n];
                for t in (0..l).rev() {
                    let dt = dtv.data()[t * d + ch];
                    let xval = xv.data()[t * d + ch];
                    let gy = g.data()[t * d + ch];
                    ddk[ch] += gy * xval;
                    dx[t * d + ch] += gy * dkv.data()[ch];
                    for i in 0..n {
                        let h_t = states[(ch * l + t) * n + i];
                        let h_prev = if t == 0 {
                            0.0
                        } else {
                            states[(ch * l + t - 1) * n + i]
                        };
                        let lam = gy * cv.data()[t * n + i] + carry[i];
                        dc[t * n + i] += gy * h_t;
                        let a_bar = (dt * a_row[i]).exp();
                        // state transition term
                        ddt[t * d + ch] += lam * h_prev * a_bar * a_row[i];
                        let da = lam * h_prev * a_bar * dt;
                        dal[ch * n + i] += da * a_row[i];
                        // input injection term
                        ddt[t * d + ch] += lam * bv.data()[t * n + i] * xval;
                        db[t * n + i] += lam * dt * xval;
                        dx[t * d + ch] += lam * dt * bv.data()[t * n + i];
                        carry[i] = a_bar * lam;
                    }
                }
            }
            vec![
                Tensor::new(vec![l, d], dx).unwrap(),
                Tensor::new(vec![l, d], ddt).unwrap(),
                Tensor::new(vec![l, n], db).unwrap(),
                Tensor::new(vec![l, n], dc).unwrap(),
                Tensor::new(vec![d, n], dal).unwrap(),
                Tensor::new(vec![d], ddk).unwrap(),
            ]
        });
        self.push(y, vec![x, delta, b_t, c_t, a_log, d_skip], Some(back))
    }

    /// Reverse sweep from a scalar root; returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Tensor>>> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Shape("backward root must be scalar".into()));
        }
        if !self.training {
            return Err(Error::Shape(
                "backward on an inference-mode graph".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            let Some(back) = &node.back else { continue };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let pgrads = back(&g, &parent_vals, &node.value);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                match &mut grads[p] {
                    Some(acc) => *acc = acc.add(&pg).unwrap(),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(grads)
    }
}

/// Forward dense conv used by both the graph node and the serial per-position
/// entropy loop. Accumulation order: taps (ki, kj), then input channel.
pub fn conv2d_forward(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 || kernel.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "conv2d expects [HxWxCin] and [kxkxCinxCout], got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    if kernel.shape()[1] != k || kernel.shape()[2] != cin {
        return Err(Error::Shape(format!(
            "conv2d kernel {:?} does not match input {:?}",
            kernel.shape(),
            x.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(Error::Shape(format!("kernel size {k} must be odd")));
    }
    let mut out = vec![0.0; h * w * cout];
    for i in 0..h {
        for j in 0..w {
            conv2d_at(x, kernel, i, j, &mut out[(i * w + j) * cout..(i * w + j + 1) * cout]);
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

/// One output position of [`conv2d_forward`], same accumulation order.
pub fn conv2d_at(x: &Tensor, kernel: &Tensor, i: usize, j: usize, out: &mut [f64]) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (kernel.shape()[0], kernel.shape()[3]);
    let r = (k / 2) as isize;
    out.fill(0.0);
    for ki in -r..=r {
        for kj in -r..=r {
            let ii = i as isize + ki;
            let jj = j as isize + kj;
            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                continue;
            }
            for ci in 0..cin {
                let xval = x.data()[(ii as usize * w + jj as usize) * cin + ci];
                if xval == 0.0 {
                    continue;
                }
                let kbase = (((ki + r) as usize * k + (kj + r) as usize) * cin + ci) * cout;
                for (co, o) in out.iter_mut().enumerate() {
                    *o += xval * kernel.data()[kbase + co];
                }
            }
        }
    }
}
