//! Quality and complexity metrics: PSNR, BD-rate between rate-distortion
//! curves, analytic parameter/MAC counting and wall-clock benchmarking.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transforms::{parameter_specs, ModelConfig, PRIOR_LAYERS, PRIOR_WIDTH};

/// PSNR in dB between two images with values in [0, 1]. Identical inputs
/// yield infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// One rate-distortion point: bits per pixel and PSNR in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Least-squares cubic fit of log10(bpp) as a function of PSNR.
fn fit_log_rate(points: &[RdPoint]) -> Result<[f64; 4]> {
    if points.len() < 4 {
        return Err(Error::Config(format!(
            "BD-rate needs at least 4 points per curve, got {}",
            points.len()
        )));
    }
    for p in points {
        if !(p.bpp > 0.0) || !p.psnr.is_finite() {
            return Err(Error::Config(format!("bad rate-distortion point {p:?}")));
        }
    }
    // normal equations sum(x^(i+j)) c_j = sum(y x^i), solved by elimination
    let mut pow_sums = [0.0f64; 7];
    let mut rhs = [0.0f64; 4];
    for p in points {
        let y = p.bpp.log10();
        let mut xp = 1.0;
        for (i, ps) in pow_sums.iter_mut().enumerate() {
            *ps += xp;
            if i < 4 {
                rhs[i] += y * xp;
            }
            xp *= p.psnr;
        }
    }
    let mut m = [[0.0f64; 5]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = pow_sums[i + j];
        }
        m[i][4] = rhs[i];
    }
    // Gaussian elimination with partial pivoting
    for col in 0..4 {
        let piv = (col..4)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() < 1e-300 {
            return Err(Error::Config("degenerate rate-distortion curve".into()));
        }
        m.swap(col, piv);
        for row in 0..4 {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..5 {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    Ok([
        m[0][4] / m[0][0],
        m[1][4] / m[1][1],
        m[2][4] / m[2][2],
        m[3][4] / m[3][3],
    ])
}

fn poly_eval(c: &[f64; 4], x: f64) -> f64 {
    ((c[3] * x + c[2]) * x + c[1]) * x + c[0]
}

/// Bjontegaard rate difference of `test` against `anchor`, in percent.
/// Negative means the test curve needs fewer bits at equal quality. Both
/// curves are fitted with cubics in PSNR and the log-rate gap is averaged by
/// the trapezoid rule over 1000 intervals of the PSNR overlap.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    let ca = fit_log_rate(anchor)?;
    let ct = fit_log_rate(test)?;
    let min = |pts: &[RdPoint]| pts.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
    let max = |pts: &[RdPoint]| pts.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
    let lo = min(anchor).max(min(test));
    let hi = max(anchor).min(max(test));
    if !(hi > lo) {
        return Err(Error::Config(format!(
            "rate-distortion curves do not overlap ({lo:.3} .. {hi:.3} dB)"
        )));
    }
    const STEPS: usize = 1000;
    let h = (hi - lo) / STEPS as f64;
    let mut integral = 0.0;
    let mut prev = poly_eval(&ct, lo) - poly_eval(&ca, lo);
    for s in 1..=STEPS {
        let x = lo + h * s as f64;
        let d = poly_eval(&ct, x) - poly_eval(&ca, x);
        integral += 0.5 * (prev + d) * h;
        prev = d;
    }
    let avg_diff = integral / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

/// Analytic complexity of a configuration on a given padded input size.
///
/// Counting rules:
/// - a linear layer over T tokens costs T * d_in * d_out MACs;
/// - a depthwise k x k convolution costs T * k^2 * C MACs;
/// - the masked context convolution counts only its (k^2 - 1) / 2 live taps;
/// - one selective-scan path costs 3 * T * D * N MACs (state decay, input
///   injection, output read-out), and each VSS block runs 4 paths;
/// - the factorized prior costs its chain matrices twice per element (one
///   likelihood needs two CDF evaluations);
/// - normalizations, activations, rounding and additions are elementwise and
///   excluded; FLOPs are reported as exactly 2 * MACs.
#[derive(Debug, Clone)]
pub struct Complexity {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    /// (component, MACs) in evaluation order.
    pub breakdown: Vec<(String, u64)>,
}

fn vss_macs(t: u64, c: u64, cfg: &ModelConfig) -> u64 {
    let d = cfg.inner_ratio as u64 * c;
    let n = cfg.state_dim as u64;
    let k = cfg.dwconv_size as u64;
    let mlp1 = t * c * d;
    let dw = t * k * k * d;
    let per_path = t * d * d + 2 * t * d * n + 3 * t * d * n;
    let mlp2 = t * d * c;
    let mlp3 = 2 * t * c * 4 * c;
    mlp1 + dw + 4 * per_path + mlp2 + mlp3
}

pub fn count_complexity(cfg: &ModelConfig, height: usize, width: usize) -> Result<Complexity> {
    cfg.validate()?;
    let m = cfg.pad_multiple;
    let (h, w) = (height.div_ceil(m) * m, width.div_ceil(m) * m);
    let params: u64 = parameter_specs(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum();
    let mut breakdown: Vec<(String, u64)> = Vec::new();

    let encoder_stages = |breakdown: &mut Vec<(String, u64)>,
                          name: &str,
                          stages: &[crate::transforms::StageConfig],
                          c0: u64,
                          t0: u64| {
        let mut c_prev = c0;
        let mut t = t0;
        for (s, st) in stages.iter().enumerate() {
            t /= 4;
            let c = st.channels as u64;
            breakdown.push((format!("{name}.stage{s}.merge"), t * 4 * c_prev * c));
            for i in 0..st.depth {
                breakdown.push((format!("{name}.stage{s}.vss{i}"), vss_macs(t, c, cfg)));
            }
            c_prev = c;
        }
        t
    };
    let decoder_stages = |breakdown: &mut Vec<(String, u64)>,
                          name: &str,
                          stages: &[crate::transforms::StageConfig],
                          c_out0: u64,
                          t_in: u64| {
        let mut t = t_in;
        for (s, st) in stages.iter().enumerate().rev() {
            let c = st.channels as u64;
            for i in 0..st.depth {
                breakdown.push((format!("{name}.stage{s}.vss{i}"), vss_macs(t, c, cfg)));
            }
            let c_out = if s == 0 {
                c_out0
            } else {
                stages[s - 1].channels as u64
            };
            breakdown.push((format!("{name}.stage{s}.expand"), t * c * 4 * c_out));
            t *= 4;
        }
    };

    let pixels = (h * w) as u64;
    let t_y = encoder_stages(&mut breakdown, "ga", &cfg.ga_stages, 3, pixels);
    decoder_stages(&mut breakdown, "gs", &cfg.ga_stages, 3, t_y);
    let cy = cfg.y_channels() as u64;
    let t_z = encoder_stages(&mut breakdown, "ha", &cfg.ha_stages, cy, t_y);
    decoder_stages(&mut breakdown, "hs", &cfg.ha_stages, 2 * cy, t_z);

    let k = cfg.context_kernel as u64;
    let live_taps = (k * k - 1) / 2;
    breakdown.push(("ctx".into(), t_y * live_taps * cy * 2 * cy));
    breakdown.push((
        "ep".into(),
        t_y * (4 * cy * 3 * cy + 3 * cy * 2 * cy + 2 * cy * 2 * cy),
    ));
    let pw = PRIOR_WIDTH as u64;
    let chain = pw + (PRIOR_LAYERS as u64 - 2) * pw * pw + pw;
    breakdown.push(("prior".into(), t_z * cfg.z_channels() as u64 * 2 * chain));

    let macs: u64 = breakdown.iter().map(|(_, m)| m).sum();
    Ok(Complexity {
        params,
        macs,
        flops: 2 * macs,
        breakdown,
    })
}

/// Wall-clock statistics of repeated runs, in milliseconds.
#[derive(Debug, Clone)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub iterations: usize,
    /// Human-readable host description for the report.
    pub machine: String,
}

/// Times a closure after warmup runs.
pub fn bench_latency(mut f: impl FnMut(), warmup: usize, iterations: usize) -> LatencyStats {
    assert!(iterations > 0);
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
        / samples.len() as f64;
    LatencyStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        min_ms: samples.iter().copied().fold(f64::INFINITY, f64::min),
        iterations,
        machine: machine_descriptor(),
    }
}

/// CPU model and logical core count of this host.
pub fn machine_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1).map(|v| v.trim().to_string()))
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    format!("{model} ({cores} logical cores)")
}

/// Rate-distortion points as CSV.
pub fn rd_csv(label: &str, points: &[RdPoint]) -> String {
    let mut out = String::from("codec,bpp,psnr_db\n");
    for p in points {
        out.push_str(&format!("{label},{:.6},{:.4}\n", p.bpp, p.psnr));
    }
    out
}

/// Complexity breakdown as CSV.
pub fn complexity_csv(c: &Complexity) -> String {
    let mut out = String::from("component,macs\n");
    for (name, macs) in &c.breakdown {
        out.push_str(&format!("{name},{macs}\n"));
    }
    out.push_str(&format!("total,{}\n", c.macs));
    out
}
