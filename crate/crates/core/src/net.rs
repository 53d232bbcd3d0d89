//! Periodic 1D U-Net `F_θ` and the preconditioned denoiser
//! `D(x̂, σ) = c_skip x̂ + c_out F_θ(c_in x̂, c_noise)`.
//!
//! The model works in standardized units (`σ_data = 1` inside the
//! network); the training-set `σ_data` is kept alongside the weights so
//! callers can map fields in and out.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use dsk_tensor::{load_checkpoint, save_checkpoint, ParamMap, Tape, Tensor, Var, GROUP_NORM_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{check_dim, invalid, CoreError, Result};
use crate::field::Samples;
use crate::pde::SelectionMask;

const KERNEL: usize = 3;
const FREQ_MIN: f64 = 0.25;
const FREQ_MAX: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub length: usize,
    /// Channels per level; level `l` runs at `length / 2^(l+1)`.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    /// Fourier feature count is `emb_dim / 2`.
    pub emb_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            length: 192,
            channels: vec![16, 32, 64],
            res_blocks: 2,
            emb_dim: 32,
            groups: 8,
        }
    }
}

impl UNetConfig {
    /// Small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            length: 16,
            channels: vec![4, 4],
            res_blocks: 1,
            emb_dim: 8,
            groups: 2,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Total downsampling factor; the network commutes with rolls by
    /// multiples of it.
    pub fn stride(&self) -> usize {
        1 << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.res_blocks == 0 {
            return Err(invalid("unet needs at least one level and one residual block"));
        }
        if self.length == 0 || self.length % self.stride() != 0 {
            return Err(invalid(format!(
                "unet length {} must be a positive multiple of {}",
                self.length,
                self.stride()
            )));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(invalid(format!("emb_dim must be positive and even, got {}", self.emb_dim)));
        }
        if self.groups == 0 || self.channels.iter().any(|c| *c == 0 || c % self.groups != 0) {
            return Err(invalid(format!(
                "channels {:?} must be positive multiples of groups {}",
                self.channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Preconditioning constants for noise level `σ` and data scale `σ_d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Precond {
    pub fn new(sigma: f64, sigma_data: f64) -> Result<Self> {
        if !(sigma > 0.0) || !(sigma_data > 0.0) {
            return Err(invalid(format!("precondition needs sigma, sigma_data > 0, got {sigma}, {sigma_data}")));
        }
        let total = sigma * sigma + sigma_data * sigma_data;
        Ok(Self {
            c_skip: sigma_data * sigma_data / total,
            c_out: sigma * sigma_data / total.sqrt(),
            c_in: 1.0 / total.sqrt(),
            c_noise: 0.25 * sigma.ln(),
        })
    }
}

/// `[sin(2π f_k c), cos(2π f_k c)]` with `c = ¼ log σ` and `dim / 2`
/// frequencies log-spaced over `[0.25, 8]`.
pub fn fourier_noise_embedding(sigma: f64, dim: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("noise embedding needs sigma > 0, got {sigma}")));
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid(format!("embedding dimension must be positive and even, got {dim}")));
    }
    let c = 0.25 * sigma.ln();
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| {
            if half == 1 {
                1.0
            } else {
                FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(k as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (2.0 * PI * f * c).sin()).collect();
    out.extend(freqs.iter().map(|f| (2.0 * PI * f * c).cos()));
    Ok(out)
}

fn res_names(prefix: &str) -> [String; 9] {
    [
        "gn1.g", "gn1.b", "conv1.w", "conv1.b", "emb.w", "emb.b", "gn2.g", "gn2.b", "conv2.w",
    ]
    .map(|s| format!("{prefix}.{s}"))
}

/// Parameter shapes in construction order, with their init kind.
fn layout(cfg: &UNetConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let e = cfg.emb_dim;
    out.push(("embed.w".into(), vec![e, e], Init::FanIn(e)));
    out.push(("embed.b".into(), vec![e], Init::Zero));
    let c0 = cfg.channels[0];
    out.push(("pixel.w".into(), vec![c0, 1, 1], Init::FanIn(1)));
    out.push(("pixel.b".into(), vec![c0], Init::Zero));

    let res = |out: &mut Vec<_>, prefix: String, cin: usize, cout: usize| {
        let n = res_names(&prefix);
        out.push((n[0].clone(), vec![cin], Init::One));
        out.push((n[1].clone(), vec![cin], Init::Zero));
        out.push((n[2].clone(), vec![cout, cin, KERNEL], Init::FanIn(cin * KERNEL)));
        out.push((n[3].clone(), vec![cout], Init::Zero));
        out.push((n[4].clone(), vec![cout, e], Init::FanIn(e)));
        out.push((n[5].clone(), vec![cout], Init::Zero));
        out.push((n[6].clone(), vec![cout], Init::One));
        out.push((n[7].clone(), vec![cout], Init::Zero));
        out.push((n[8].clone(), vec![cout, cout, KERNEL], Init::Zero));
        if cin != cout {
            out.push((format!("{prefix}.skip.w"), vec![cout, cin, 1], Init::FanIn(cin)));
        }
    };

    let mut prev = c0;
    for (l, &c) in cfg.channels.iter().enumerate() {
        out.push((format!("down.{l}.conv.w"), vec![c, prev, KERNEL], Init::FanIn(prev * KERNEL)));
        out.push((format!("down.{l}.conv.b"), vec![c], Init::Zero));
        for r in 0..cfg.res_blocks {
            res(&mut out, format!("down.{l}.res.{r}"), c, c);
        }
        prev = c;
    }
    for r in 0..cfg.res_blocks {
        res(&mut out, format!("mid.res.{r}"), prev, prev);
    }
    for l in (0..cfg.levels()).rev() {
        let c = cfg.channels[l];
        for r in 0..cfg.res_blocks {
            let cin = if r == 0 { prev + c } else { c };
            res(&mut out, format!("up.{l}.res.{r}"), cin, c);
        }
        let next = cfg.channels[l.saturating_sub(1)];
        out.push((format!("up.{l}.conv.w"), vec![next, c, KERNEL], Init::FanIn(c * KERNEL)));
        out.push((format!("up.{l}.conv.b"), vec![next], Init::Zero));
        prev = next;
    }
    out.push(("head.gn.g".into(), vec![c0], Init::One));
    out.push(("head.gn.b".into(), vec![c0], Init::Zero));
    out.push(("head.conv.w".into(), vec![1, c0, 1], Init::Zero));
    out.push(("head.conv.b".into(), vec![1], Init::Zero));
    out
}

#[derive(Clone, Copy)]
enum Init {
    Zero,
    One,
    /// Kaiming normal, `std = √(2 / fan_in)`.
    FanIn(usize),
}

pub fn init_params(cfg: &UNetConfig, seed: u64) -> Result<ParamMap> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::FanIn(fan) => {
                let dist = Normal::new(0.0, (2.0 / fan as f64).sqrt()).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

/// Parameters registered on a tape, by name.
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    /// Registers `params` as differentiable leaves when `trainable`,
    /// otherwise as constants.
    pub fn new(tape: &mut Tape, params: &ParamMap, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound(vars)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

fn res_block(tape: &mut Tape, p: &Bound, prefix: &str, x: Var, emb: Var, groups: usize) -> Result<Var> {
    let n = res_names(prefix);
    let h = tape.group_norm(x, groups, p.get(&n[0])?, p.get(&n[1])?, GROUP_NORM_EPS)?;
    let h = tape.gelu(h)?;
    let h = tape.conv1d_circular(h, p.get(&n[2])?, Some(p.get(&n[3])?), 1)?;
    let shift = tape.linear(emb, p.get(&n[4])?, Some(p.get(&n[5])?))?;
    let h = tape.add_channel(h, shift)?;
    let h = tape.group_norm(h, groups, p.get(&n[6])?, p.get(&n[7])?, GROUP_NORM_EPS)?;
    let h = tape.gelu(h)?;
    let h = tape.conv1d_circular(h, p.get(&n[8])?, None, 1)?;
    let skip = match p.get(&format!("{prefix}.skip.w")) {
        Ok(w) => tape.conv1d_circular(x, w, None, 1)?,
        Err(_) => x,
    };
    Ok(tape.add(skip, h)?)
}

/// `F_θ(x, emb)` for `x: [B, 1, L]` and Fourier features `emb: [B, E]`.
pub fn unet_forward(cfg: &UNetConfig, tape: &mut Tape, p: &Bound, x: Var, features: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != 1 || shape[2] != cfg.length {
        return Err(invalid(format!("unet input must be [B, 1, {}], got {shape:?}", cfg.length)));
    }
    let g = cfg.groups;
    let emb = tape.linear(features, p.get("embed.w")?, Some(p.get("embed.b")?))?;
    let emb = tape.gelu(emb)?;

    let mut h = tape.conv1d_circular(x, p.get("pixel.w")?, Some(p.get("pixel.b")?), 1)?;
    let mut skips = Vec::with_capacity(cfg.levels());
    for l in 0..cfg.levels() {
        h = tape.conv1d_circular(h, p.get(&format!("down.{l}.conv.w"))?, Some(p.get(&format!("down.{l}.conv.b"))?), 2)?;
        for r in 0..cfg.res_blocks {
            h = res_block(tape, p, &format!("down.{l}.res.{r}"), h, emb, g)?;
        }
        skips.push(h);
    }
    for r in 0..cfg.res_blocks {
        h = res_block(tape, p, &format!("mid.res.{r}"), h, emb, g)?;
    }
    for l in (0..cfg.levels()).rev() {
        h = tape.concat_channels(h, skips[l])?;
        for r in 0..cfg.res_blocks {
            h = res_block(tape, p, &format!("up.{l}.res.{r}"), h, emb, g)?;
        }
        h = tape.upsample_nearest(h, 2)?;
        h = tape.conv1d_circular(h, p.get(&format!("up.{l}.conv.w"))?, Some(p.get(&format!("up.{l}.conv.b"))?), 1)?;
    }
    let h = tape.group_norm(h, g, p.get("head.gn.g")?, p.get("head.gn.b")?, GROUP_NORM_EPS)?;
    let h = tape.gelu(h)?;
    Ok(tape.conv1d_circular(h, p.get("head.conv.w")?, Some(p.get("head.conv.b")?), 1)?)
}

/// Preconditioned denoiser on a batch `x̂: [B, 1, L]` with one noise level
/// per row (standardized units).
pub fn denoiser_forward(cfg: &UNetConfig, tape: &mut Tape, p: &Bound, x_hat: Var, sigmas: &[f64]) -> Result<Var> {
    let pre = sigmas.iter().map(|s| Precond::new(*s, 1.0)).collect::<Result<Vec<_>>>()?;
    let mut feats = Vec::with_capacity(sigmas.len() * cfg.emb_dim);
    for s in sigmas {
        feats.extend(fourier_noise_embedding(*s, cfg.emb_dim)?);
    }
    let feats = tape.constant(Tensor::new(vec![sigmas.len(), cfg.emb_dim], feats)?);
    let c_in: Vec<f64> = pre.iter().map(|c| c.c_in).collect();
    let c_skip: Vec<f64> = pre.iter().map(|c| c.c_skip).collect();
    let c_out: Vec<f64> = pre.iter().map(|c| c.c_out).collect();
    let scaled = tape.scale_batch(x_hat, &c_in)?;
    let f = unet_forward(cfg, tape, p, scaled, feats)?;
    let skip = tape.scale_batch(x_hat, &c_skip)?;
    let out = tape.scale_batch(f, &c_out)?;
    Ok(tape.add(skip, out)?)
}

pub fn samples_to_tensor(x: &Samples) -> Result<Tensor> {
    Ok(Tensor::new(vec![x.len(), 1, x.dim()], x.data().to_vec())?)
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: UNetConfig,
    pub params: ParamMap,
    pub ema: ParamMap,
    /// Global std of the training set in physical units.
    pub sigma_data: f64,
}

impl DenoiserModel {
    pub fn new(config: UNetConfig, sigma_data: f64, seed: u64) -> Result<Self> {
        if !(sigma_data > 0.0) {
            return Err(invalid(format!("sigma_data must be positive, got {sigma_data}")));
        }
        let params = init_params(&config, seed)?;
        Ok(Self {
            config,
            ema: params.clone(),
            params,
            sigma_data,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Denoiser output with the given parameter set.
    pub fn apply(&self, params: &ParamMap, x_hat: &Samples, sigma: f64) -> Result<Samples> {
        check_dim("denoiser input", self.config.length, x_hat.dim())?;
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, params, false);
        let x = tape.constant(samples_to_tensor(x_hat)?);
        let d = denoiser_forward(&self.config, &mut tape, &p, x, &vec![sigma; x_hat.len()])?;
        Samples::new(x_hat.dim(), tape.value(d).data().to_vec())
    }

    /// `D` and `∇_x̂ ‖C′D − y′‖²` per row, through the EMA weights.
    pub fn apply_with_constraint_grad(
        &self,
        params: &ParamMap,
        x_hat: &Samples,
        sigma: f64,
        mask: &SelectionMask,
        y: &Samples,
    ) -> Result<(Samples, Samples)> {
        check_dim("denoiser input", self.config.length, x_hat.dim())?;
        check_dim("constraint mask", self.config.length, mask.d)?;
        check_dim("constraint values", mask.d_prime, y.dim())?;
        check_dim("constraint rows", x_hat.len(), y.len())?;
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, params, false);
        let x = tape.param(samples_to_tensor(x_hat)?);
        let d = denoiser_forward(&self.config, &mut tape, &p, x, &vec![sigma; x_hat.len()])?;
        let picked = tape.select_last(d, &mask.indices().collect::<Vec<_>>())?;
        let target = tape.constant(Tensor::new(vec![y.len(), 1, y.dim()], y.data().to_vec())?);
        let resid = tape.sub(picked, target)?;
        let loss = tape.sum_sq(resid)?;
        let grads = tape.backward(loss)?;
        let g = grads.wrt(x);
        Ok((
            Samples::new(x_hat.dim(), tape.value(d).data().to_vec())?,
            Samples::new(x_hat.dim(), g.into_data())?,
        ))
    }

    pub fn to_checkpoint(&self) -> Result<ParamMap> {
        let mut out = ParamMap::new();
        for (k, v) in &self.params {
            out.insert(format!("param.{k}"), v.clone());
        }
        for (k, v) in &self.ema {
            out.insert(format!("ema.{k}"), v.clone());
        }
        let json = serde_json::to_vec(&self.config)?;
        out.insert(
            "config.json".into(),
            Tensor::vector(json.into_iter().map(f64::from).collect()),
        );
        out.insert("config.sigma_data".into(), Tensor::scalar(self.sigma_data));
        Ok(out)
    }

    pub fn from_checkpoint(map: ParamMap) -> Result<Self> {
        let bad = |what: &str| CoreError::Format(format!("checkpoint: {what}"));
        let json = map.get("config.json").ok_or_else(|| bad("missing config.json"))?;
        let bytes: Vec<u8> = json
            .data()
            .iter()
            .map(|v| u8::try_from(*v as i64).map_err(|_| bad("config.json is not bytes")))
            .collect::<Result<_>>()?;
        let config: UNetConfig = serde_json::from_slice(&bytes)?;
        config.validate()?;
        let sigma_data = map
            .get("config.sigma_data")
            .ok_or_else(|| bad("missing config.sigma_data"))?
            .item()?;
        let mut params = ParamMap::new();
        let mut ema = ParamMap::new();
        for (k, v) in map {
            if let Some(name) = k.strip_prefix("param.") {
                params.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("ema.") {
                ema.insert(name.to_string(), v);
            }
        }
        for (name, shape, _) in layout(&config) {
            for (set, tree) in [("param", &params), ("ema", &ema)] {
                match tree.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => return Err(bad(&format!("{set}.{name} has shape {:?}, expected {shape:?}", t.shape()))),
                    None => return Err(bad(&format!("missing {set}.{name}"))),
                }
            }
        }
        if params.len() != ema.len() || params.len() != layout(&config).len() {
            return Err(bad("unexpected parameter names"));
        }
        Ok(Self {
            config,
            params,
            ema,
            sigma_data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(save_checkpoint(path, &self.to_checkpoint()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(load_checkpoint(path)?)
    }
}

impl Denoiser for DenoiserModel {
    fn dim(&self) -> usize {
        self.config.length
    }

    fn denoise(&self, x_hat: &Samples, sigma: f64) -> Result<Samples> {
        self.apply(&self.ema, x_hat, sigma)
    }

    fn denoise_with_constraint_grad(
        &self,
        x_hat: &Samples,
        sigma: f64,
        mask: &SelectionMask,
        y: &Samples,
    ) -> Result<(Samples, Samples)> {
        self.apply_with_constraint_grad(&self.ema, x_hat, sigma, mask, y)
    }
}
