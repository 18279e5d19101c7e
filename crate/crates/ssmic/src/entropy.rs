//! Entropy models: the per-channel factorized prior for the hyper-latent, the
//! conditional Gaussian model for the latent, the strictly causal context
//! convolution, and the entropy-parameters network fusing context with the
//! hyper decoder output.
//!
//! Everything here exists in two forms that must agree bit for bit: a
//! graph-composed, teacher-forced forward (training and rate estimation) and
//! plain single-position helpers used inside the serial coding loop.

use crate::error::{Error, Result};
use crate::graph::{conv2d_at, Graph, Var};
use crate::tensor::{round_ties_even, silu, softplus, Rng, Tensor};
use crate::transforms::{ModelConfig, ModelVars, PRIOR_LAYERS};

/// Scale floor of the conditional Gaussian.
pub const SIGMA_MIN: f64 = 0.11;
/// Likelihood floor, 2^-16.
pub const LIKELIHOOD_MIN: f64 = 1.0 / 65536.0;
/// Mass allowed outside the coded support when building code tables.
pub const TAIL_MASS: f64 = 1e-9;

/// round(y - mu) + mu, ties to even. The coded symbol is the rounded
/// residual; adding mu back gives the reconstruction used downstream.
pub fn quantize_residual(y: &Tensor, mu: &Tensor) -> Tensor {
    assert_eq!(y.shape(), mu.shape());
    Tensor::from_fn(y.shape(), |i| {
        round_ties_even(y.data()[i] - mu.data()[i]) + mu.data()[i]
    })
}

/// Plain rounding, ties to even (hyper-latent path has no mean).
pub fn quantize_round(y: &Tensor) -> Tensor {
    y.round()
}

/// Training-time quantization surrogate: adds one frozen draw of
/// U[-0.5, 0.5) per element.
pub fn add_uniform_noise(g: &mut Graph, y: Var, rng: &mut Rng) -> Var {
    let shape = g.shape(y).to_vec();
    let noise = Tensor::from_fn(&shape, |_| rng.uniform() - 0.5);
    let n = g.leaf(noise);
    g.add(y, n)
}

/// Total bits implied by per-element likelihoods: -sum(log2 p).
pub fn bits_from_likelihood(g: &mut Graph, p: Var) -> Var {
    let l = g.log(p);
    let s = g.sum(l);
    g.scale(s, -1.0 / std::f64::consts::LN_2)
}

struct PriorLayer {
    w: Var,
    b: Var,
    gate: Option<Var>,
}

/// The monotone per-channel CDF network of the factorized prior.
pub struct FactorizedPrior {
    channels: usize,
    layers: Vec<PriorLayer>,
}

impl FactorizedPrior {
    pub fn from_vars(vars: &ModelVars, cfg: &ModelConfig) -> Self {
        let channels = cfg.z_channels();
        let mut layers = Vec::with_capacity(channels * PRIOR_LAYERS);
        for ch in 0..channels {
            for l in 0..PRIOR_LAYERS {
                layers.push(PriorLayer {
                    w: vars.var(&format!("prior.ch{ch}.l{l}.w")),
                    b: vars.var(&format!("prior.ch{ch}.l{l}.b")),
                    gate: (l < PRIOR_LAYERS - 1)
                        .then(|| vars.var(&format!("prior.ch{ch}.l{l}.a"))),
                });
            }
        }
        Self { channels, layers }
    }

    /// CDF of one channel evaluated at a [T x 1] column of points.
    pub fn cdf(&self, g: &mut Graph, ch: usize, x: Var) -> Var {
        assert!(ch < self.channels);
        let mut x = x;
        for l in 0..PRIOR_LAYERS {
            let layer = &self.layers[ch * PRIOR_LAYERS + l];
            let w = g.softplus(layer.w);
            x = g.matmul(x, w);
            x = g.add_bias(x, layer.b);
            if let Some(a) = layer.gate {
                // x + tanh(a) * tanh(x): |tanh(a)| < 1 keeps this monotone
                let ta = g.tanh(a);
                let tx = g.tanh(x);
                let gated = g.mul_row(tx, ta);
                x = g.add(x, gated);
            }
        }
        g.sigmoid(x)
    }

    /// Probability of the unit bin around each element of z_hat
    /// [h x w x C or T x C], floored at [`LIKELIHOOD_MIN`].
    pub fn bin_likelihood(&self, g: &mut Graph, z_hat: Var) -> Var {
        let shape = g.shape(z_hat).to_vec();
        let c = *shape.last().unwrap();
        assert_eq!(c, self.channels, "channel mismatch");
        let t: usize = shape.iter().product::<usize>() / c;
        let flat = g.reshape(z_hat, &[t, c]);
        let mut out = None;
        for ch in 0..c {
            let col = g.slice_cols(flat, ch, ch + 1);
            let hi_x = g.add_const(col, 0.5);
            let lo_x = g.add_const(col, -0.5);
            let hi = self.cdf(g, ch, hi_x);
            let lo = self.cdf(g, ch, lo_x);
            let diff = g.sub(hi, lo);
            let p = g.lower_bound(diff, LIKELIHOOD_MIN);
            out = Some(match out {
                None => p,
                Some(acc) => g.concat_cols(acc, p),
            });
        }
        g.reshape(out.unwrap(), &shape)
    }

    /// CDF values of one channel at the given points, computed on a scratch
    /// graph from the same bound parameters.
    pub fn cdf_values(&self, g: &mut Graph, ch: usize, points: &[f64]) -> Vec<f64> {
        let x = g.leaf(Tensor::new(vec![points.len(), 1], points.to_vec()).unwrap());
        let c = self.cdf(g, ch, x);
        g.value(c).data().to_vec()
    }
}

/// Probability of the unit bin under N(mu, sigma^2), floored. Plain-tensor
/// twin of the graph op, for the serial coding loop.
pub fn gaussian_bin_probability(residual: f64, sigma: f64) -> f64 {
    let p = crate::graph::normal_cdf((residual + 0.5) / sigma)
        - crate::graph::normal_cdf((residual - 0.5) / sigma);
    p.max(LIKELIHOOD_MIN)
}

/// Strictly causal mask for a context kernel [k x k x cin x cout]: 1 for taps
/// before the center in raster order, 0 at the center and after.
pub fn causal_mask(k: usize, cin: usize, cout: usize) -> Tensor {
    let center = k / 2;
    Tensor::from_fn(&[k, k, cin, cout], |idx| {
        let tap = idx / (cin * cout);
        let (ki, kj) = (tap / k, tap % k);
        if ki < center || (ki == center && kj < center) {
            1.0
        } else {
            0.0
        }
    })
}

/// Context model parameters bound in a graph.
pub struct ContextVars {
    pub kernel: Var,
    pub bias: Var,
}

impl ContextVars {
    pub fn from_vars(vars: &ModelVars) -> Self {
        Self {
            kernel: vars.var("ctx.k"),
            bias: vars.var("ctx.b"),
        }
    }
}

/// Applies the causal mask to the raw context kernel on-graph.
pub fn masked_context_kernel(g: &mut Graph, ctx: &ContextVars) -> Var {
    let shape = g.shape(ctx.kernel).to_vec();
    let mask = g.leaf(causal_mask(shape[0], shape[2], shape[3]));
    g.mul(ctx.kernel, mask)
}

/// Teacher-forced context features phi over the whole latent:
/// [h x w x Cy] -> [h x w x 2*Cy].
pub fn context_features(g: &mut Graph, ctx: &ContextVars, y_hat: Var) -> Var {
    let k = masked_context_kernel(g, ctx);
    let conv = g.conv2d(y_hat, k);
    g.add_bias(conv, ctx.bias)
}

/// Serial twin of [`context_features`] for one position. `masked_kernel` must
/// be the value of [`masked_context_kernel`] so the tap order and the masked
/// zeros match the teacher-forced pass exactly.
pub fn context_features_at(
    y_hat: &Tensor,
    masked_kernel: &Tensor,
    bias: &Tensor,
    i: usize,
    j: usize,
    out: &mut [f64],
) {
    conv2d_at(y_hat, masked_kernel, i, j, out);
    for (o, b) in out.iter_mut().zip(bias.data()) {
        *o += b;
    }
}

/// The three pointwise layers turning [psi | phi] into (mu, sigma).
pub struct EntropyParamsVars {
    pub w: [Var; 3],
    pub b: [Var; 3],
}

impl EntropyParamsVars {
    pub fn from_vars(vars: &ModelVars) -> Self {
        Self {
            w: [vars.var("ep.l0.w"), vars.var("ep.l1.w"), vars.var("ep.l2.w")],
            b: [vars.var("ep.l0.b"), vars.var("ep.l1.b"), vars.var("ep.l2.b")],
        }
    }
}

/// Fuses hyper features psi [h x w x 2Cy] and context features phi
/// [h x w x 2Cy] into mu and sigma, each [h x w x Cy]. sigma is
/// softplus-activated and floored at [`SIGMA_MIN`].
pub fn entropy_parameters(
    g: &mut Graph,
    ep: &EntropyParamsVars,
    psi: Var,
    phi: Var,
) -> Result<(Var, Var)> {
    let shape = g.shape(psi).to_vec();
    if g.shape(phi) != shape.as_slice() || shape.len() != 3 || shape[2] % 2 != 0 {
        return Err(Error::Shape(format!(
            "entropy_parameters wants matching [hxwx2Cy] inputs, got {:?} and {:?}",
            shape,
            g.shape(phi)
        )));
    }
    let cy = shape[2] / 2;
    let t = shape[0] * shape[1];
    let psi_f = g.reshape(psi, &[t, 2 * cy]);
    let phi_f = g.reshape(phi, &[t, 2 * cy]);
    let mut x = g.concat_cols(psi_f, phi_f);
    for l in 0..3 {
        x = g.matmul(x, ep.w[l]);
        x = g.add_bias(x, ep.b[l]);
        if l < 2 {
            x = g.silu(x);
        }
    }
    let mu = g.slice_cols(x, 0, cy);
    let raw = g.slice_cols(x, cy, 2 * cy);
    let sp = g.softplus(raw);
    let sigma = g.lower_bound(sp, SIGMA_MIN);
    let mu = g.reshape(mu, &[shape[0], shape[1], cy]);
    let sigma = g.reshape(sigma, &[shape[0], shape[1], cy]);
    Ok((mu, sigma))
}

/// Entropy-parameters weights as plain tensors for the serial loop.
pub struct EntropyParamsWeights {
    pub w: [Tensor; 3],
    pub b: [Tensor; 3],
}

impl EntropyParamsWeights {
    pub fn from_store(store: &crate::transforms::WeightStore) -> Result<Self> {
        Ok(Self {
            w: [
                store.get("ep.l0.w")?.clone(),
                store.get("ep.l1.w")?.clone(),
                store.get("ep.l2.w")?.clone(),
            ],
            b: [
                store.get("ep.l0.b")?.clone(),
                store.get("ep.l1.b")?.clone(),
                store.get("ep.l2.b")?.clone(),
            ],
        })
    }
}

/// Serial twin of [`entropy_parameters`] for one position. `psi_row` and
/// `phi_row` are the 2*Cy-wide feature rows at that position; returns
/// (mu, sigma), each Cy wide, bit-identical to the teacher-forced pass.
pub fn entropy_parameters_at(
    ep: &EntropyParamsWeights,
    psi_row: &[f64],
    phi_row: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut x: Vec<f64> = psi_row.iter().chain(phi_row).copied().collect();
    for l in 0..3 {
        let w = &ep.w[l];
        let (k, n) = (w.shape()[0], w.shape()[1]);
        assert_eq!(x.len(), k);
        let mut next = vec![0.0; n];
        // same accumulation order as the graph matmul: ascending inner index
        for (j, nx) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (p, xv) in x.iter().enumerate() {
                acc += xv * w.data()[p * n + j];
            }
            *nx = acc + ep.b[l].data()[j];
        }
        if l < 2 {
            for v in next.iter_mut() {
                *v = silu(*v);
            }
        }
        x = next;
    }
    let cy = x.len() / 2;
    let mu = x[..cy].to_vec();
    let sigma = x[cy..].iter().map(|&r| softplus(r).max(SIGMA_MIN)).collect();
    (mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{init_weights, ModelConfig, ModelVars};

    fn micro_bound() -> (ModelConfig, crate::transforms::WeightStore) {
        let cfg = ModelConfig::micro();
        let w = init_weights(&cfg, 11);
        (cfg, w)
    }

    #[test]
    fn quantize_residual_ties_to_even() {
        let y = Tensor::new(vec![4], vec![2.5, 3.5, -0.5, 1.2]).unwrap();
        let mu = Tensor::zeros(&[4]);
        let q = quantize_residual(&y, &mu);
        assert_eq!(q.data(), &[2.0, 4.0, -0.0, 1.0]);
        let mu2 = Tensor::new(vec![4], vec![0.2, 0.2, 0.2, 0.2]).unwrap();
        let q2 = quantize_residual(&y, &mu2);
        // residuals 2.3, 3.3, -0.7, 1.0 -> 2, 3, -1, 1, then + mu
        assert_eq!(q2.data(), &[2.2, 3.2, -0.8, 1.2]);
    }

    #[test]
    fn noise_quantization_stays_in_band() {
        let mut g = Graph::training();
        let y = g.leaf(Tensor::zeros(&[100]));
        let mut rng = Rng::new(3);
        let noisy = add_uniform_noise(&mut g, y, &mut rng);
        for &v in g.value(noisy).data() {
            assert!((-0.5..0.5).contains(&v));
        }
    }

    #[test]
    fn prior_cdf_is_monotone_and_saturates() {
        let (cfg, w) = micro_bound();
        let mut g = Graph::inference();
        let vars = ModelVars::bind(&mut g, &w, &cfg).unwrap();
        let prior = FactorizedPrior::from_vars(&vars, &cfg);
        let points: Vec<f64> = (-600..=600).map(|i| i as f64 / 10.0).collect();
        for ch in 0..cfg.z_channels() {
            let vals = prior.cdf_values(&mut g, ch, &points);
            for win in vals.windows(2) {
                assert!(win[1] >= win[0], "CDF must be nondecreasing");
            }
            assert!(vals[0] < 1e-6, "left tail {}", vals[0]);
            assert!(vals[vals.len() - 1] > 1.0 - 1e-6, "right tail");
        }
    }

    #[test]
    fn prior_bin_likelihoods_sum_to_one() {
        let (cfg, w) = micro_bound();
        let mut g = Graph::inference();
        let vars = ModelVars::bind(&mut g, &w, &cfg).unwrap();
        let prior = FactorizedPrior::from_vars(&vars, &cfg);
        let cz = cfg.z_channels();
        let symbols: Vec<f64> = (-300..=300).map(|s| s as f64).collect();
        let t = symbols.len();
        let z = g.leaf(Tensor::from_fn(&[t, cz], |i| symbols[i / cz]));
        let p = prior.bin_likelihood(&mut g, z);
        let pv = g.value(p);
        for ch in 0..cz {
            let total: f64 = (0..t).map(|r| pv.data()[r * cz + ch]).sum();
            // the floor adds at most t * LIKELIHOOD_MIN of spurious mass
            assert!(total > 1.0 - 1e-6 && total < 1.0 + t as f64 * LIKELIHOOD_MIN);
        }
        assert!(pv.data().iter().all(|&v| v >= LIKELIHOOD_MIN));
    }

    #[test]
    fn gaussian_probability_matches_erf_oracle() {
        // independent formula: 0.5 * (erf(hi/sqrt2) - erf(lo/sqrt2))
        for &(r, s) in &[(0.0, 1.0), (1.5, 0.3), (-3.0, 2.0), (0.25, 0.11)] {
            let hi = (r + 0.5) / s;
            let lo = (r - 0.5) / s;
            let oracle = 0.5
                * (libm::erf(hi / std::f64::consts::SQRT_2)
                    - libm::erf(lo / std::f64::consts::SQRT_2));
            let got = gaussian_bin_probability(r, s);
            assert!((got - oracle.max(LIKELIHOOD_MIN)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_gaussian_matches_serial() {
        let mut g = Graph::inference();
        let y = g.leaf(Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap());
        let mu = g.leaf(Tensor::new(vec![3], vec![0.3, -0.2, 0.0]).unwrap());
        let sg = g.leaf(Tensor::new(vec![3], vec![0.5, 1.0, 0.11]).unwrap());
        let p = g.gaussian_bin_likelihood(y, mu, sg);
        let pv = g.value(p).clone();
        let ys = [0.0, 1.0, -2.0];
        let ms = [0.3, -0.2, 0.0];
        let ss = [0.5, 1.0, 0.11];
        for i in 0..3 {
            let serial = gaussian_bin_probability(ys[i] - ms[i], ss[i]);
            // graph op does not floor; serial floors
            assert!((pv.data()[i].max(LIKELIHOOD_MIN) - serial).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_is_strictly_causal() {
        let m = causal_mask(5, 2, 3);
        let ones: f64 = m.data().iter().sum();
        // 12 taps before the center, each cin*cout wide
        assert_eq!(ones, 12.0 * 2.0 * 3.0);
        // center tap and everything after must be zero
        for tap in 12..25 {
            for e in 0..6 {
                assert_eq!(m.data()[tap * 6 + e], 0.0);
            }
        }
    }

    #[test]
    fn context_depends_only_on_past() {
        let (cfg, w) = micro_bound();
        let cy = cfg.y_channels();
        let base = Tensor::from_fn(&[4, 5, cy], |i| ((i * 13 % 11) as f64) / 11.0);
        let eval = |y: &Tensor| -> Tensor {
            let mut g = Graph::inference();
            let vars = ModelVars::bind(&mut g, &w, &cfg).unwrap();
            let ctx = ContextVars::from_vars(&vars);
            let yv = g.leaf(y.clone());
            let out = context_features(&mut g, &ctx, yv);
            g.value(out).clone()
        };
        let a = eval(&base);
        // bump position (2, 2): outputs at raster order <= (2, 2) unchanged
        let mut bumped = base.clone();
        let idx = (2 * 5 + 2) * cy;
        let mut data = bumped.data().to_vec();
        data[idx] += 10.0;
        bumped = Tensor::new(vec![4, 5, cy], data).unwrap();
        let b = eval(&bumped);
        let cout = 2 * cy;
        for pos in 0..=(2 * 5 + 2) {
            for c in 0..cout {
                assert_eq!(a.data()[pos * cout + c], b.data()[pos * cout + c]);
            }
        }
        // and some strictly later position must change
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn context_is_translation_consistent() {
        let (cfg, w) = micro_bound();
        let cy = cfg.y_channels();
        let mut g = Graph::inference();
        let vars = ModelVars::bind(&mut g, &w, &cfg).unwrap();
        let ctx = ContextVars::from_vars(&vars);
        let patch = Tensor::from_fn(&[3, 3, cy], |i| ((i * 7 % 13) as f64) / 13.0);
        // embed the same 3x3 patch at two interior offsets of a zero canvas
        let embed = |oi: usize, oj: usize| {
            Tensor::from_fn(&[9, 9, cy], |idx| {
                let c = idx % cy;
                let p = idx / cy;
                let (i, j) = (p / 9, p % 9);
                if (oi..oi + 3).contains(&i) && (oj..oj + 3).contains(&j) {
                    patch.data()[((i - oi) * 3 + (j - oj)) * cy + c]
                } else {
                    0.0
                }
            })
        };
        let y1 = g.leaf(embed(3, 3));
        let y2 = g.leaf(embed(4, 5));
        let o1 = context_features(&mut g, &ctx, y1);
        let o2 = context_features(&mut g, &ctx, y2);
        let (v1, v2) = (g.value(o1).clone(), g.value(o2).clone());
        let cout = 2 * cy;
        // compare the center output of each embedded patch
        let at = |v: &Tensor, i: usize, j: usize, c: usize| v.data()[(i * 9 + j) * cout + c];
        for c in 0..cout {
            assert!((at(&v1, 4, 4, c) - at(&v2, 5, 6, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_respects_floor() {
        let (cfg, w) = micro_bound();
        let cy = cfg.y_channels();
        let mut g = Graph::inference();
        let vars = ModelVars::bind(&mut g, &w, &cfg).unwrap();
        let ep = EntropyParamsVars::from_vars(&vars);
        let psi = g.leaf(Tensor::from_fn(&[3, 3, 2 * cy], |i| (i as f64).sin() * 5.0));
        let phi = g.leaf(Tensor::from_fn(&[3, 3, 2 * cy], |i| (i as f64).cos() * 5.0));
        let (_, sigma) = entropy_parameters(&mut g, &ep, psi, phi).unwrap();
        assert!(g.value(sigma).data().iter().all(|&s| s >= SIGMA_MIN));
    }

    #[test]
    fn serial_matches_teacher_forced_bit_exact() {
        let (cfg, w) = micro_bound();
        let cy = cfg.y_channels();
        let (h, wd) = (4, 5);
        let mut rng = Rng::new(99);
        let y_hat = Tensor::from_fn(&[h, wd, cy], |_| (rng.uniform() * 8.0).round() - 4.0);
        let psi = Tensor::from_fn(&[h, wd, 2 * cy], |_| rng.normal() * 0.5);

        // teacher-forced pass
        let mut g = Graph::inference();
        let vars = ModelVars::bind(&mut g, &w, &cfg).unwrap();
        let ctx = ContextVars::from_vars(&vars);
        let ep = EntropyParamsVars::from_vars(&vars);
        let yv = g.leaf(y_hat.clone());
        let psiv = g.leaf(psi.clone());
        let phi = context_features(&mut g, &ctx, yv);
        let (mu, sigma) = entropy_parameters(&mut g, &ep, psiv, phi).unwrap();
        let masked = masked_context_kernel(&mut g, &ctx);
        let masked_k = g.value(masked).clone();
        let (mu_tf, sg_tf) = (g.value(mu).clone(), g.value(sigma).clone());

        // serial pass, position by position
        let epw = EntropyParamsWeights::from_store(&w).unwrap();
        let bias = w.get("ctx.b").unwrap().clone();
        let mut phi_row = vec![0.0; 2 * cy];
        for i in 0..h {
            for j in 0..wd {
                context_features_at(&y_hat, &masked_k, &bias, i, j, &mut phi_row);
                let psi_row = &psi.data()[(i * wd + j) * 2 * cy..(i * wd + j + 1) * 2 * cy];
                let (mu_s, sg_s) = entropy_parameters_at(&epw, psi_row, &phi_row);
                for c in 0..cy {
                    let p = (i * wd + j) * cy + c;
                    assert_eq!(mu_tf.data()[p].to_bits(), mu_s[c].to_bits());
                    assert_eq!(sg_tf.data()[p].to_bits(), sg_s[c].to_bits());
                }
            }
        }
    }

    #[test]
    fn bits_match_hand_count() {
        let mut g = Graph::inference();
        let p = g.leaf(Tensor::new(vec![3], vec![0.5, 0.25, 0.125]).unwrap());
        let bits = bits_from_likelihood(&mut g, p);
        assert!((g.value(bits).data()[0] - 6.0).abs() < 1e-12);
    }
}
