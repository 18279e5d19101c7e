//! Command-line interface for the codec: encode/decode, evaluation,
//! BD-rate between result files, complexity reports, benchmarking and a
//! small training loop.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssmic::codec::{
    decode_image, encode_image, load_png, load_weights, parse_container, save_png, save_weights,
};
use ssmic::error::Error;
use ssmic::metrics::{
    bd_rate, bench_latency, complexity_csv, count_complexity, machine_descriptor, psnr, rd_csv,
    RdPoint,
};
use ssmic::tensor::{Rng, Tensor};
use ssmic::trainer::{trace_csv, train_toy};
use ssmic::transforms::{init_weights, ModelConfig, WeightStore};

#[derive(Parser)]
#[command(
    name = "ssmic",
    about = "Learned image codec built on selective state-space models",
    version,
    after_help = "SSMIC_THREADS is reserved for future parallel kernels; the \
current implementation is single-threaded and ignores it."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelArgs {
    /// Model configuration TOML; defaults to the built-in full model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the built-in tiny test configuration instead of the full model.
    #[arg(long, conflicts_with = "config")]
    micro: bool,
    /// Weights file; when absent, weights are freshly initialized from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Seed for weight initialization when no weights file is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig, Error> {
        if let Some(path) = &self.config {
            ModelConfig::from_toml(&std::fs::read_to_string(path)?)
        } else if self.micro {
            Ok(ModelConfig::micro())
        } else {
            Ok(ModelConfig::default())
        }
    }

    fn load(&self) -> Result<(ModelConfig, WeightStore), Error> {
        let cfg = self.config()?;
        let store = match &self.weights {
            Some(path) => load_weights(path, &cfg)?,
            None => init_weights(&cfg, self.seed),
        };
        Ok((cfg, store))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PNG into a bitstream.
    Encode {
        #[command(flatten)]
        model: ModelArgs,
        /// Rate-distortion weight recorded in the container.
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        input: PathBuf,
        /// Output bitstream path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Decompress a bitstream into a PNG.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        input: PathBuf,
        /// Output PNG path.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Encode and decode images, reporting bpp and PSNR as CSV.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        /// Input PNG files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Optional CSV output path (stdout otherwise).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Bjontegaard rate difference between two rate-distortion CSV files
    /// with "codec,bpp,psnr_db" rows.
    Bdrate {
        anchor: PathBuf,
        test: PathBuf,
    },
    /// Analytic parameter/MAC/FLOP counts at standard or given resolutions.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        /// Resolutions as WxH; defaults to 768x512, 1024x768 and 1280x1280.
        #[arg(long)]
        resolution: Vec<String>,
        /// Emit the per-component MAC breakdown as CSV.
        #[arg(long)]
        breakdown: bool,
    },
    /// Wall-clock encode benchmark on a synthetic image.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        iterations: usize,
    },
    /// Train the tiny built-in model on synthetic images.
    TrainToy {
        /// Model configuration TOML; defaults to the built-in tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 10.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Edge length of the synthetic training images.
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// Directory for the loss trace CSV and the final checkpoint.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Quick internal consistency checks.
    Selftest,
}

fn synthetic_images(n: usize, size: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let (a, b) = (rng.uniform(), rng.uniform());
            Tensor::from_fn(&[size, size, 3], |i| {
                let c = i % 3;
                let p = i / 3;
                let (y, x) = (p / size, p % size);
                (a * y as f64 / size as f64
                    + b * x as f64 / size as f64
                    + 0.1 * rng.uniform()
                    + 0.1 * c as f64)
                    .clamp(0.0, 1.0)
            })
        })
        .collect()
}

fn read_rd_csv(path: &Path) -> Result<Vec<RdPoint>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Config(format!(
                "{}:{}: expected codec,bpp,psnr_db",
                path.display(),
                ln + 1
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}:{}: bad number '{s}'", path.display(), ln + 1)))
        };
        out.push(RdPoint {
            bpp: parse(fields[1])?,
            psnr: parse(fields[2])?,
        });
    }
    Ok(out)
}

fn write_or_print(path: Option<&Path>, content: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(Error::from),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Encode {
            model,
            lambda,
            input,
            out,
        } => {
            let (cfg, store) = model.load()?;
            let img = load_png(&input)?;
            let (bytes, recon, stats) = encode_image(&cfg, &store, &img, lambda)?;
            std::fs::write(&out, &bytes)?;
            let (h, w) = (img.shape()[0], img.shape()[1]);
            println!(
                "{} -> {} ({} bytes, {:.4} bpp, {:.2} dB)",
                input.display(),
                out.display(),
                bytes.len(),
                stats.bpp(h, w),
                psnr(&img, &recon)?
            );
        }
        Command::Decode { model, input, out } => {
            let (cfg, store) = model.load()?;
            let data = std::fs::read(&input)?;
            let img = decode_image(&cfg, &store, &data)?;
            save_png(&out, &img)?;
            let (hdr, ..) = parse_container(&data)?;
            println!(
                "{} -> {} ({}x{})",
                input.display(),
                out.display(),
                hdr.width,
                hdr.height
            );
        }
        Command::Eval {
            model,
            lambda,
            inputs,
            out,
        } => {
            let (cfg, store) = model.load()?;
            let mut points = Vec::new();
            for input in &inputs {
                let img = load_png(input)?;
                let (bytes, recon, _) = encode_image(&cfg, &store, &img, lambda)?;
                let (h, w) = (img.shape()[0], img.shape()[1]);
                points.push(RdPoint {
                    bpp: (bytes.len() * 8) as f64 / (h * w) as f64,
                    psnr: psnr(&img, &recon)?,
                });
            }
            write_or_print(out.as_deref(), &rd_csv("ssmic", &points))?;
        }
        Command::Bdrate { anchor, test } => {
            let a = read_rd_csv(&anchor)?;
            let t = read_rd_csv(&test)?;
            println!("{:+.4}%", bd_rate(&a, &t)?);
        }
        Command::Flops {
            model,
            resolution,
            breakdown,
        } => {
            let cfg = model.config()?;
            let resolutions: Vec<(usize, usize)> = if resolution.is_empty() {
                vec![(768, 512), (1024, 768), (1280, 1280)]
            } else {
                resolution
                    .iter()
                    .map(|s| {
                        let (w, h) = s
                            .split_once('x')
                            .ok_or_else(|| Error::Config(format!("bad resolution '{s}'")))?;
                        Ok((
                            w.parse()
                                .map_err(|_| Error::Config(format!("bad resolution '{s}'")))?,
                            h.parse()
                                .map_err(|_| Error::Config(format!("bad resolution '{s}'")))?,
                        ))
                    })
                    .collect::<Result<_, Error>>()?
            };
            let params = count_complexity(&cfg, resolutions[0].1, resolutions[0].0)?.params;
            println!("parameters: {} ({:.2}M)", params, params as f64 / 1e6);
            for (w, h) in resolutions {
                let c = count_complexity(&cfg, h, w)?;
                println!(
                    "{w}x{h}: {:.2} GMACs, {:.2} GFLOPs, {:.1} kMACs/pixel",
                    c.macs as f64 / 1e9,
                    c.flops as f64 / 1e9,
                    c.macs as f64 / (w * h) as f64 / 1e3
                );
                if breakdown {
                    print!("{}", complexity_csv(&c));
                }
            }
        }
        Command::Bench {
            model,
            size,
            warmup,
            iterations,
        } => {
            let (cfg, store) = model.load()?;
            let img = synthetic_images(1, size, 1).remove(0);
            let stats = bench_latency(
                || {
                    encode_image(&cfg, &store, &img, 10.0).expect("bench encode");
                },
                warmup,
                iterations,
            );
            println!(
                "encode {size}x{size}: mean {:.1} ms, std {:.1} ms, min {:.1} ms over {} runs",
                stats.mean_ms, stats.std_ms, stats.min_ms, stats.iterations
            );
            println!("machine: {}", stats.machine);
        }
        Command::TrainToy {
            config,
            steps,
            lambda,
            lr,
            seed,
            size,
            out,
        } => {
            let cfg = match config {
                Some(path) => ModelConfig::from_toml(&std::fs::read_to_string(path)?)?,
                None => ModelConfig::micro(),
            };
            let images = synthetic_images(4, size, seed ^ 0xA5A5);
            let report = train_toy(&cfg, &images, steps, lambda, lr, seed)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("loss_trace.csv"), trace_csv(&report.trace))?;
            save_weights(&out.join("checkpoint.ssmw"), &cfg, &report.weights)?;
            println!(
                "{} steps: loss {:.6} -> {:.6} ({:.1}% drop); wrote {}",
                steps,
                report.initial_loss(),
                report.final_loss(),
                (1.0 - report.final_loss() / report.initial_loss()) * 100.0,
                out.display()
            );
        }
        Command::Selftest => {
            let cfg = ModelConfig::micro();
            let store = init_weights(&cfg, 0);
            let img = synthetic_images(1, 16, 2).remove(0);
            let (bytes, recon_enc, _) = encode_image(&cfg, &store, &img, 10.0)?;
            let recon_dec = decode_image(&cfg, &store, &bytes)?;
            let exact = recon_enc
                .data()
                .iter()
                .zip(recon_dec.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            println!(
                "codec roundtrip: {}",
                if exact { "PASS" } else { "FAIL" }
            );
            if !exact {
                return Err(Error::Container("roundtrip mismatch".into()));
            }
            println!("psnr vs source: {:.2} dB", psnr(&img, &recon_dec)?);
            println!("machine: {}", machine_descriptor());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Diverged { step, loss, initial }) => {
            eprintln!("error: training diverged at step {step} (loss {loss:.3e}, started at {initial:.3e})");
            ExitCode::from(3)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
