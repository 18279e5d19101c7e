//! End-to-end image codec: padding, bitstream container, code-table
//! construction, the serial latent coding loop shared verbatim by encoder and
//! decoder, weight-file serialization and PNG I/O.

use std::io::Write as _;
use std::path::Path;

use crate::entropy::{
    context_features_at, entropy_parameters_at, gaussian_bin_probability, masked_context_kernel,
    quantize_round, ContextVars, EntropyParamsWeights, FactorizedPrior, LIKELIHOOD_MIN, SIGMA_MIN,
    TAIL_MASS,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rangecoder::{CdfTable, RangeDecoder, RangeEncoder};
use crate::tensor::{round_ties_even, Tensor};
use crate::transforms::{g_a, g_s, h_a, h_s, ModelConfig, ModelVars, WeightStore};

/// Number of Gaussian scale bins for the latent code tables.
pub const NUM_SCALES: usize = 64;
/// Largest representable scale; sigma above this uses the last table.
pub const SCALE_MAX: f64 = 256.0;
/// Code-table support half-width in standard deviations.
const SUPPORT_SIGMAS: f64 = 6.0;
/// Hyper-latent support is capped at +-255; outliers take the escape path.
const Z_SUPPORT: i64 = 255;

const CONTAINER_MAGIC: &[u8; 4] = b"SSMI";
const CONTAINER_VERSION: u8 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"SSMW";
const WEIGHTS_VERSION: u8 = 1;

/// Pads an [H x W x C] image to the next multiple of `multiple` on both
/// spatial axes by edge replication.
pub fn pad_image(img: &Tensor, multiple: usize) -> Result<Tensor> {
    if img.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "pad_image wants [HxWxC], got {:?}",
            img.shape()
        )));
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return Ok(img.clone());
    }
    Ok(Tensor::from_fn(&[ph, pw, c], |idx| {
        let ch = idx % c;
        let p = idx / c;
        let (i, j) = (p / pw, p % pw);
        img.data()[(i.min(h - 1) * w + j.min(w - 1)) * c + ch]
    }))
}

/// Crops a padded [H x W x C] image back to its original size.
pub fn unpad_image(img: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if img.shape().len() != 3 || img.shape()[0] < h || img.shape()[1] < w {
        return Err(Error::Shape(format!(
            "cannot crop {:?} to {h}x{w}",
            img.shape()
        )));
    }
    let (pw, c) = (img.shape()[1], img.shape()[2]);
    Ok(Tensor::from_fn(&[h, w, c], |idx| {
        let ch = idx % c;
        let p = idx / c;
        img.data()[((p / w) * pw + p % w) * c + ch]
    }))
}

/// The log-spaced scale grid shared by encoder and decoder.
pub fn scale_grid() -> [f64; NUM_SCALES] {
    let mut out = [0.0; NUM_SCALES];
    let (lo, hi) = (SIGMA_MIN.ln(), SCALE_MAX.ln());
    for (k, o) in out.iter_mut().enumerate() {
        *o = (lo + (hi - lo) * k as f64 / (NUM_SCALES - 1) as f64).exp();
    }
    out
}

/// Smallest grid index whose scale covers sigma (clamped to the last).
pub fn scale_index(grid: &[f64; NUM_SCALES], sigma: f64) -> usize {
    grid.iter()
        .position(|&s| s >= sigma)
        .unwrap_or(NUM_SCALES - 1)
}

/// Frozen code tables; built identically on both sides from the weights.
pub struct EntropyTables {
    /// One table per scale bin; symbols -R..=R then the escape symbol.
    pub y: Vec<CdfTable>,
    /// Support half-width per scale bin.
    pub y_support: Vec<i64>,
    /// One table per z channel; symbols -255..=255 then the escape symbol.
    pub z: Vec<CdfTable>,
    pub grid: [f64; NUM_SCALES],
}

impl EntropyTables {
    pub fn build(g: &mut Graph, vars: &ModelVars, cfg: &ModelConfig) -> Result<Self> {
        let grid = scale_grid();
        let mut y = Vec::with_capacity(NUM_SCALES);
        let mut y_support = Vec::with_capacity(NUM_SCALES);
        for &s in &grid {
            let r = (s * SUPPORT_SIGMAS).ceil() as i64;
            let mut weights: Vec<f64> = (-r..=r)
                .map(|v| gaussian_bin_probability(v as f64, s))
                .collect();
            weights.push(TAIL_MASS.max(1.0 - weights.iter().sum::<f64>()));
            y.push(CdfTable::from_weights(&weights)?);
            y_support.push(r);
        }
        let prior = FactorizedPrior::from_vars(vars, cfg);
        let points_hi: Vec<f64> = (-Z_SUPPORT..=Z_SUPPORT).map(|v| v as f64 + 0.5).collect();
        let points_lo: Vec<f64> = (-Z_SUPPORT..=Z_SUPPORT).map(|v| v as f64 - 0.5).collect();
        let mut z = Vec::with_capacity(cfg.z_channels());
        for ch in 0..cfg.z_channels() {
            let hi = prior.cdf_values(g, ch, &points_hi);
            let lo = prior.cdf_values(g, ch, &points_lo);
            let mut weights: Vec<f64> = hi
                .iter()
                .zip(&lo)
                .map(|(h, l)| (h - l).max(LIKELIHOOD_MIN))
                .collect();
            weights.push(TAIL_MASS.max(1.0 - weights.iter().sum::<f64>()));
            z.push(CdfTable::from_weights(&weights)?);
        }
        Ok(Self { y, y_support, z, grid })
    }
}

/// Encodes one value against a support-plus-escape table.
fn encode_symbol(
    enc: &mut RangeEncoder,
    table: &CdfTable,
    support: i64,
    value: i64,
    exact_bits: &mut f64,
) {
    let escape = table.num_symbols() - 1;
    if value.abs() <= support {
        let s = (value + support) as usize;
        enc.encode(table, s);
        *exact_bits += table.cost_bits(s);
    } else {
        enc.encode(table, escape);
        enc.encode_raw(value.clamp(i32::MIN as i64, i32::MAX as i64) as i32 as u32 as u64, 32);
        *exact_bits += table.cost_bits(escape) + 32.0;
    }
}

/// Mirror of [`encode_symbol`].
fn decode_symbol(dec: &mut RangeDecoder, table: &CdfTable, support: i64) -> i64 {
    let escape = table.num_symbols() - 1;
    let s = dec.decode(table);
    if s == escape {
        dec.decode_raw(32) as u32 as i32 as i64
    } else {
        s as i64 - support
    }
}

enum YRole<'a, 'b> {
    Encode {
        y: &'a Tensor,
        enc: &'a mut RangeEncoder,
        exact_bits: &'a mut f64,
    },
    Decode {
        dec: &'a mut RangeDecoder<'b>,
    },
}

/// The serial, strictly causal latent coding loop. The encoder and the
/// decoder both run this exact function, so their mu/sigma sequences are
/// bit-identical by construction. Returns the reconstructed latent.
fn code_y_serial(
    cy: usize,
    h: usize,
    w: usize,
    psi: &Tensor,
    masked_k: &Tensor,
    ctx_b: &Tensor,
    epw: &EntropyParamsWeights,
    tables: &EntropyTables,
    mut role: YRole,
) -> Tensor {
    let mut y_hat = Tensor::zeros(&[h, w, cy]);
    let mut phi_row = vec![0.0; 2 * cy];
    for i in 0..h {
        for j in 0..w {
            context_features_at(&y_hat, masked_k, ctx_b, i, j, &mut phi_row);
            let p = i * w + j;
            let psi_row = &psi.data()[p * 2 * cy..(p + 1) * 2 * cy];
            let (mu, sigma) = entropy_parameters_at(epw, psi_row, &phi_row);
            for c in 0..cy {
                let k = scale_index(&tables.grid, sigma[c]);
                let table = &tables.y[k];
                let support = tables.y_support[k];
                let r = match &mut role {
                    YRole::Encode { y, enc, exact_bits } => {
                        let r = round_ties_even(y.data()[p * cy + c] - mu[c]) as i64;
                        encode_symbol(enc, table, support, r, exact_bits);
                        r
                    }
                    YRole::Decode { dec } => decode_symbol(dec, table, support),
                };
                y_hat.data_mut()[p * cy + c] = r as f64 + mu[c];
            }
        }
    }
    y_hat
}

/// Per-stream accounting from an encode.
#[derive(Debug, Clone, Copy)]
pub struct EncodeStats {
    /// Exact cost of the y stream under its code tables, in bits.
    pub y_bits_exact: f64,
    pub z_bits_exact: f64,
    pub y_bytes: usize,
    pub z_bytes: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl EncodeStats {
    /// Bits per pixel of the payload streams, over the original pixel count.
    pub fn bpp(&self, h: usize, w: usize) -> f64 {
        ((self.y_bytes + self.z_bytes) * 8) as f64 / (h * w) as f64
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_u32(data: &[u8], pos: &mut usize) -> Result<u32> {
    let end = *pos + 4;
    if end > data.len() {
        return Err(Error::Truncated {
            stream: "container header",
            needed: end,
            available: data.len(),
        });
    }
    let v = u32::from_le_bytes(data[*pos..end].try_into().unwrap());
    *pos = end;
    Ok(v)
}

/// Encodes an [H x W x 3] image with values in [0, 1]. Returns the container
/// bytes, the encoder-side reconstruction (cropped, clamped to [0, 1]) and
/// stream statistics.
pub fn encode_image(
    cfg: &ModelConfig,
    store: &WeightStore,
    img: &Tensor,
    lambda: f64,
) -> Result<(Vec<u8>, Tensor, EncodeStats)> {
    cfg.validate()?;
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(Error::Shape(format!(
            "encode_image wants [HxWx3], got {:?}",
            img.shape()
        )));
    }
    if !img.all_finite() {
        return Err(Error::NonFinite("input image"));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let padded = pad_image(img, cfg.pad_multiple)?;
    let (ph, pw) = (padded.shape()[0], padded.shape()[1]);

    let mut g = Graph::inference();
    let vars = ModelVars::bind(&mut g, store, cfg)?;
    let xv = g.leaf(padded);
    let yv = g_a(&mut g, &vars, cfg, xv)?;
    let zv = h_a(&mut g, &vars, cfg, yv)?;
    let y = g.value(yv).clone();
    let z_hat = quantize_round(g.value(zv));
    let zh_v = g.leaf(z_hat.clone());
    let psi_v = h_s(&mut g, &vars, cfg, zh_v)?;
    let psi = g.value(psi_v).clone();

    let tables = EntropyTables::build(&mut g, &vars, cfg)?;
    let ctx = ContextVars::from_vars(&vars);
    let mk = masked_context_kernel(&mut g, &ctx);
    let masked_k = g.value(mk).clone();
    let ctx_b = store.get("ctx.b")?.clone();
    let epw = EntropyParamsWeights::from_store(store)?;

    // z stream: channel-factorized, raster order
    let mut z_enc = RangeEncoder::new();
    let mut z_bits_exact = 0.0;
    let cz = cfg.z_channels();
    for p in 0..z_hat.len() / cz {
        for c in 0..cz {
            let v = z_hat.data()[p * cz + c] as i64;
            encode_symbol(&mut z_enc, &tables.z[c], Z_SUPPORT, v, &mut z_bits_exact);
        }
    }
    let z_bytes = z_enc.finish();

    // y stream: serial causal loop
    let cy = cfg.y_channels();
    let (yh, yw) = (ph / cfg.ga_factor(), pw / cfg.ga_factor());
    let mut y_enc = RangeEncoder::new();
    let mut y_bits_exact = 0.0;
    let y_hat = code_y_serial(
        cy,
        yh,
        yw,
        &psi,
        &masked_k,
        &ctx_b,
        &epw,
        &tables,
        YRole::Encode {
            y: &y,
            enc: &mut y_enc,
            exact_bits: &mut y_bits_exact,
        },
    );
    let y_bytes = y_enc.finish();

    // encoder-side reconstruction, shared with the decoder bit for bit
    let yh_v = g.leaf(y_hat);
    let xh_v = g_s(&mut g, &vars, cfg, yh_v)?;
    let x_hat = unpad_image(&g.value(xh_v).map(|v| v.clamp(0.0, 1.0)), h, w)?;

    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.push(CONTAINER_VERSION);
    out.extend_from_slice(&cfg.digest());
    out.extend_from_slice(&lambda.to_le_bytes());
    put_u32(&mut out, w as u32);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, z_bytes.len() as u32);
    put_u32(&mut out, y_bytes.len() as u32);
    let stats = EncodeStats {
        y_bits_exact,
        z_bits_exact,
        y_bytes: y_bytes.len(),
        z_bytes: z_bytes.len(),
        padded_h: ph,
        padded_w: pw,
    };
    out.extend_from_slice(&z_bytes);
    out.extend_from_slice(&y_bytes);
    Ok((out, x_hat, stats))
}

/// Parsed container header.
pub struct ContainerHeader {
    pub lambda: f64,
    pub width: usize,
    pub height: usize,
    pub digest: [u8; 8],
    pub z_len: usize,
    pub y_len: usize,
}

pub fn parse_container(data: &[u8]) -> Result<(ContainerHeader, &[u8], &[u8])> {
    if data.len() < 5 || &data[..4] != CONTAINER_MAGIC {
        return Err(Error::Container("not a codec bitstream (bad magic)".into()));
    }
    if data[4] != CONTAINER_VERSION {
        return Err(Error::Container(format!(
            "unsupported container version {}",
            data[4]
        )));
    }
    let mut pos = 5;
    if pos + 16 > data.len() {
        return Err(Error::Truncated {
            stream: "container header",
            needed: pos + 16,
            available: data.len(),
        });
    }
    let mut digest = [0u8; 8];
    digest.copy_from_slice(&data[pos..pos + 8]);
    pos += 8;
    let lambda = f64::from_le_bytes(data[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let width = read_u32(data, &mut pos)? as usize;
    let height = read_u32(data, &mut pos)? as usize;
    let z_len = read_u32(data, &mut pos)? as usize;
    let y_len = read_u32(data, &mut pos)? as usize;
    let need = pos + z_len + y_len;
    if need > data.len() {
        return Err(Error::Truncated {
            stream: "payload",
            needed: need,
            available: data.len(),
        });
    }
    let z = &data[pos..pos + z_len];
    let y = &data[pos + z_len..pos + z_len + y_len];
    Ok((
        ContainerHeader {
            lambda,
            width,
            height,
            digest,
            z_len,
            y_len,
        },
        z,
        y,
    ))
}

/// Decodes a container back to an [H x W x 3] image in [0, 1].
pub fn decode_image(cfg: &ModelConfig, store: &WeightStore, data: &[u8]) -> Result<Tensor> {
    cfg.validate()?;
    let (hdr, z_bytes, y_bytes) = parse_container(data)?;
    if hdr.digest != cfg.digest() {
        return Err(Error::Container(
            "bitstream was produced with a different model configuration".into(),
        ));
    }
    let (h, w) = (hdr.height, hdr.width);
    if h == 0 || w == 0 {
        return Err(Error::Container("zero-sized image".into()));
    }
    let m = cfg.pad_multiple;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);

    let mut g = Graph::inference();
    let vars = ModelVars::bind(&mut g, store, cfg)?;
    let tables = EntropyTables::build(&mut g, &vars, cfg)?;

    // z stream
    let f = cfg.ga_factor() * cfg.ha_factor();
    let (zh, zw, cz) = (ph / f, pw / f, cfg.z_channels());
    let mut z_dec = RangeDecoder::new(z_bytes);
    let mut z_hat = Tensor::zeros(&[zh, zw, cz]);
    for p in 0..zh * zw {
        for c in 0..cz {
            z_hat.data_mut()[p * cz + c] = decode_symbol(&mut z_dec, &tables.z[c], Z_SUPPORT) as f64;
        }
    }

    let zh_v = g.leaf(z_hat);
    let psi_v = h_s(&mut g, &vars, cfg, zh_v)?;
    let psi = g.value(psi_v).clone();

    let ctx = ContextVars::from_vars(&vars);
    let mk = masked_context_kernel(&mut g, &ctx);
    let masked_k = g.value(mk).clone();
    let ctx_b = store.get("ctx.b")?.clone();
    let epw = EntropyParamsWeights::from_store(store)?;

    let cy = cfg.y_channels();
    let (yh, yw) = (ph / cfg.ga_factor(), pw / cfg.ga_factor());
    let mut y_dec = RangeDecoder::new(y_bytes);
    let y_hat = code_y_serial(
        cy,
        yh,
        yw,
        &psi,
        &masked_k,
        &ctx_b,
        &epw,
        &tables,
        YRole::Decode { dec: &mut y_dec },
    );

    let yh_v = g.leaf(y_hat);
    let xh_v = g_s(&mut g, &vars, cfg, yh_v)?;
    unpad_image(&g.value(xh_v).map(|v| v.clamp(0.0, 1.0)), h, w)
}

/// Writes weights with the config digest and full shape metadata.
pub fn save_weights(path: &Path, cfg: &ModelConfig, store: &WeightStore) -> Result<()> {
    store.validate(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    out.extend_from_slice(&cfg.digest());
    put_u32(&mut out, store.len() as u32);
    for (name, t) in store.iter() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Loads weights, checking the digest and exact catalogue coverage.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<WeightStore> {
    let data = std::fs::read(path)?;
    if data.len() < 5 || &data[..4] != WEIGHTS_MAGIC {
        return Err(Error::Weights(format!(
            "{} is not a weights file",
            path.display()
        )));
    }
    if data[4] != WEIGHTS_VERSION {
        return Err(Error::Weights(format!(
            "unsupported weights version {}",
            data[4]
        )));
    }
    let mut pos = 5;
    if pos + 8 > data.len() {
        return Err(Error::Truncated {
            stream: "weights header",
            needed: pos + 8,
            available: data.len(),
        });
    }
    let digest: [u8; 8] = data[pos..pos + 8].try_into().unwrap();
    pos += 8;
    if digest != cfg.digest() {
        return Err(Error::Weights(
            "weights were saved for a different model configuration".into(),
        ));
    }
    let count = read_u32(&data, &mut pos)? as usize;
    let mut store = WeightStore::new();
    for _ in 0..count {
        let name_len = read_u32(&data, &mut pos)? as usize;
        if pos + name_len > data.len() {
            return Err(Error::Truncated {
                stream: "weights",
                needed: pos + name_len,
                available: data.len(),
            });
        }
        let name = std::str::from_utf8(&data[pos..pos + name_len])
            .map_err(|_| Error::Weights("non-utf8 parameter name".into()))?
            .to_string();
        pos += name_len;
        let rank = read_u32(&data, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&data, &mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let end = pos + n * 8;
        if end > data.len() {
            return Err(Error::Truncated {
                stream: "weights",
                needed: end,
                available: data.len(),
            });
        }
        let vals: Vec<f64> = data[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        store.insert(name, Tensor::new(shape, vals)?);
    }
    store.validate(cfg)?;
    Ok(store)
}

/// Loads a PNG into an [H x W x 3] tensor with values in [0, 1].
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Saves an [H x W x 3] tensor in [0, 1] as a PNG.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    if img.shape().len() != 3 || img.shape()[2] != 3 {
        return Err(Error::Shape(format!(
            "save_png wants [HxWx3], got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}
