//! Rate-distortion training: the differentiable surrogate loss, Adam, and a
//! small deterministic training loop for smoke tests and demos.

use std::collections::BTreeMap;

use crate::entropy::{
    add_uniform_noise, bits_from_likelihood, context_features, entropy_parameters,
    ContextVars, EntropyParamsVars, FactorizedPrior, LIKELIHOOD_MIN,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Rng, Tensor};
use crate::transforms::{g_a, g_s, h_a, h_s, init_weights, ModelConfig, ModelVars, WeightStore};

/// Loss terms of one training forward pass.
pub struct LossParts {
    /// L = D + lambda * R.
    pub loss: Var,
    /// Mean squared error on [0, 1] pixels.
    pub distortion: Var,
    /// Estimated rate in bits per pixel.
    pub rate_bpp: Var,
}

/// Builds the rate-distortion loss on a training graph. Quantization is
/// replaced by additive U[-0.5, 0.5) noise drawn from `rng`; freezing the
/// seed freezes the loss.
pub fn rd_loss(
    g: &mut Graph,
    vars: &ModelVars,
    cfg: &ModelConfig,
    x: Var,
    lambda: f64,
    rng: &mut Rng,
) -> Result<LossParts> {
    let shape = g.shape(x).to_vec();
    let pixels = (shape[0] * shape[1]) as f64;
    let y = g_a(g, vars, cfg, x)?;
    let z = h_a(g, vars, cfg, y)?;
    let z_tilde = add_uniform_noise(g, z, rng);
    let y_tilde = add_uniform_noise(g, y, rng);

    let psi = h_s(g, vars, cfg, z_tilde)?;
    let ctx = ContextVars::from_vars(vars);
    let phi = context_features(g, &ctx, y_tilde);
    let ep = EntropyParamsVars::from_vars(vars);
    let (mu, sigma) = entropy_parameters(g, &ep, psi, phi)?;

    let p_y_raw = g.gaussian_bin_likelihood(y_tilde, mu, sigma);
    let p_y = g.lower_bound(p_y_raw, LIKELIHOOD_MIN);
    let prior = FactorizedPrior::from_vars(vars, cfg);
    let p_z = prior.bin_likelihood(g, z_tilde);

    let y_bits = bits_from_likelihood(g, p_y);
    let z_bits = bits_from_likelihood(g, p_z);
    let bits = g.add(y_bits, z_bits);
    let rate_bpp = g.scale(bits, 1.0 / pixels);

    let x_hat = g_s(g, vars, cfg, y_tilde)?;
    let diff = g.sub(x, x_hat);
    let sq = g.mul(diff, diff);
    let distortion = g.mean(sq);

    let weighted_rate = g.scale(rate_bpp, lambda);
    let loss = g.add(distortion, weighted_rate);
    Ok(LossParts {
        loss,
        distortion,
        rate_bpp,
    })
}

/// Runs backward from the loss and collects per-parameter gradients.
/// Parameters the loss does not reach get zero gradients.
pub fn parameter_gradients(
    g: &Graph,
    vars: &ModelVars,
    loss: Var,
) -> Result<BTreeMap<String, Tensor>> {
    let grads = g.backward(loss)?;
    let mut out = BTreeMap::new();
    for (path, &var) in vars.iter() {
        let grad = grads[var]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(g.shape(var)));
        if !grad.all_finite() {
            return Err(Error::NonFinite("parameter gradient"));
        }
        out.insert(path.clone(), grad);
    }
    Ok(out)
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(
        &mut self,
        store: &mut WeightStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (path, grad) in grads {
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let w = store.get_mut(path)?;
            for i in 0..grad.len() {
                let gi = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = self.lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                w.data_mut()[i] -= update;
            }
        }
        Ok(())
    }
}

/// One recorded training step.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub distortion: f64,
    pub rate_bpp: f64,
}

/// Result of a toy training run.
pub struct TrainReport {
    pub trace: Vec<StepRecord>,
    pub weights: WeightStore,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.trace.first().map(|r| r.loss).unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }
}

/// Deterministic small-scale training: fresh weights from `seed`, one image
/// per step cycled from `images`, Adam at `lr`. Aborts with
/// [`Error::Diverged`] if the loss becomes non-finite or exceeds 1000x the
/// initial loss.
pub fn train_toy(
    cfg: &ModelConfig,
    images: &[Tensor],
    steps: usize,
    lambda: f64,
    lr: f64,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Config("training needs at least one image".into()));
    }
    let mut store = init_weights(cfg, seed);
    let mut noise_rng = Rng::new(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut opt = Adam::new(lr);
    let mut trace = Vec::with_capacity(steps);
    let mut initial = f64::NAN;
    for step in 0..steps {
        let img = &images[step % images.len()];
        let mut g = Graph::training();
        let vars = ModelVars::bind(&mut g, &store, cfg)?;
        let x = g.leaf(img.clone());
        let parts = rd_loss(&mut g, &vars, cfg, x, lambda, &mut noise_rng)?;
        let loss = g.value(parts.loss).data()[0];
        let record = StepRecord {
            step,
            loss,
            distortion: g.value(parts.distortion).data()[0],
            rate_bpp: g.value(parts.rate_bpp).data()[0],
        };
        if step == 0 {
            initial = loss;
        }
        if !loss.is_finite() || loss > 1000.0 * initial {
            return Err(Error::Diverged {
                step,
                loss,
                initial,
            });
        }
        trace.push(record);
        let grads = parameter_gradients(&g, &vars, parts.loss)?;
        opt.update(&mut store, &grads)?;
    }
    Ok(TrainReport {
        trace,
        weights: store,
    })
}

/// Loss trace as CSV.
pub fn trace_csv(trace: &[StepRecord]) -> String {
    let mut out = String::from("step,loss,distortion,rate_bpp\n");
    for r in trace {
        out.push_str(&format!(
            "{},{:.12},{:.12},{:.12}\n",
            r.step, r.loss, r.distortion, r.rate_bpp
        ));
    }
    out
}
