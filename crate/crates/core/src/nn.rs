//! Small neural-network toolkit on top of candle tensors: a named parameter
//! store, the handful of layers the score network and critic need, and the
//! checkpoint container shared by both.
//!
//! Parameters are initialised from an explicit [`Rng`] so that a seed fully
//! determines a network.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use sha2::{Digest, Sha256};

use crate::error::contract;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Tensor> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(contract(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        self.entries.push((name, var));
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_tensor().clone())
            .ok_or_else(|| contract(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Independent copy with fresh storage, optionally cast to `dtype`.
    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        let mut out = Params::new();
        for (name, var) in &self.entries {
            out.insert(name.clone(), var.as_tensor().to_dtype(dtype)?.copy()?)?;
        }
        Ok(out)
    }

    /// Overwrites values in place from `other` (same names and shapes).
    pub fn assign_from(&self, other: &Params) -> Result<()> {
        for (name, var) in &self.entries {
            var.set(&other.get(name)?.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, v) in &self.entries {
            if !crate::sde::all_finite(v.as_tensor())? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// SHA-256 over names, shapes and little-endian f32 values, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.entries {
            h.update(name.as_bytes());
            h.update(format!("{:?}", var.dims()).as_bytes());
            for v in flat_f32(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

/// Fan-in scaled uniform initialisation.
fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    rng::uniform_tensor(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        params: &mut Params,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = params.insert(format!("{name}.weight"), init_uniform(rng, &[c_out, c_in, kernel, kernel], fan_in)?)?;
        let bias = params.insert(format!("{name}.bias"), init_uniform(rng, &[c_out], fan_in)?)?;
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    /// Zero-initialised variant, used for output layers.
    pub fn zeros(params: &mut Params, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let weight = params.insert(format!("{name}.weight"), Tensor::zeros((c_out, c_in, kernel, kernel), DType::F32, &Device::Cpu)?)?;
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(c_out, DType::F32, &Device::Cpu)?)?;
        Ok(Self { weight, bias, padding: kernel / 2 })
    }

    pub fn load(params: &Params, name: &str) -> Result<Self> {
        let weight = params.get(&format!("{name}.weight"))?;
        let padding = weight.dim(2)? / 2;
        Ok(Self { weight, bias: params.get(&format!("{name}.bias"))?, padding })
    }

    /// Same layer with constant (untracked) weights.
    pub fn detach(&self) -> Self {
        Self { weight: self.weight.detach(), bias: self.bias.detach(), padding: self.padding }
    }

    /// Same-padded stride-1 convolution, lowered to one matrix product.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (c_out, c_in, k, _) = self.weight.dims4()?;
        if c != c_in {
            return Err(contract(format!("conv expects {c_in} input channels, got {c}")));
        }
        debug_assert_eq!(self.padding, k / 2);
        let cols = x.contiguous()?.apply_op1(Im2Col { channels: c, height: h, width: w, kernel: k })?;
        let y = self
            .weight
            .reshape((c_out, c * k * k))?
            .matmul(&cols)?
            .broadcast_add(&self.bias.reshape((c_out, 1))?)?;
        Ok(y.reshape((c_out, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }
}

/// Unfolds `B x C x H x W` into a `(C k k) x (B H W)` matrix whose columns
/// are zero-padded `k x k` neighbourhoods.
struct Im2Col {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

/// Adjoint of [`Im2Col`]: scatters columns back onto the image, summing
/// overlaps.
struct Col2Im {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

/// Calls `f(cols_offset, image_offset, len)` for every contiguous run shared
/// by the unfolded matrix and the image.
fn unfold_runs(batch: usize, c: usize, h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize, usize)) {
    let p = k / 2;
    let n = batch * h * w;
    for ch in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let row = ((ch * k + dy) * k + dx) * n;
                let x_lo = p.saturating_sub(dx);
                let x_hi = (w + p).saturating_sub(dx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for b in 0..batch {
                    let plane = (b * c + ch) * h * w;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        let dst = row + (b * h + y) * w + x_lo;
                        let src = plane + (sy - p) * w + x_lo + dx - p;
                        f(dst, src, x_hi - x_lo);
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("unfold expects a contiguous tensor"),
    }
}

impl Im2Col {
    fn run<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let (c, h, w, k) = (self.channels, self.height, self.width, self.kernel);
        let batch = src.len() / (c * h * w);
        let mut out = vec![T::default(); c * k * k * batch * h * w];
        unfold_runs(batch, c, h, w, k, |d, s, n| out[d..d + n].copy_from_slice(&src[s..s + n]));
        out
    }
}

impl Col2Im {
    fn run<T: Copy + Default + std::ops::AddAssign>(&self, src: &[T]) -> Vec<T> {
        let (c, h, w, k) = (self.channels, self.height, self.width, self.kernel);
        let batch = src.len() / (c * k * k * h * w);
        let mut out = vec![T::default(); batch * c * h * w];
        unfold_runs(batch, c, h, w, k, |d, s, n| {
            for (o, v) in out[s..s + n].iter_mut().zip(&src[d..d + n]) {
                *o += *v;
            }
        });
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = layout.dims()[0];
        let shape = Shape::from((self.channels * self.kernel * self.kernel, b * self.height * self.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im { channels: self.channels, height: self.height, width: self.width, kernel: self.kernel };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let b = layout.dims()[1] / (self.height * self.width);
        let shape = Shape::from((b, self.channels, self.height, self.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous_slice(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous_slice(v, layout)?)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Im2Col { channels: self.channels, height: self.height, width: self.width, kernel: self.kernel };
        Ok(Some(grad.contiguous()?.apply_op1(op)?))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(params: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = params.insert(format!("{name}.weight"), init_uniform(rng, &[d_out, d_in], d_in)?)?;
        let bias = params.insert(format!("{name}.bias"), init_uniform(rng, &[d_out], d_in)?)?;
        Ok(Self { weight, bias })
    }

    pub fn load(params: &Params, name: &str) -> Result<Self> {
        Ok(Self { weight: params.get(&format!("{name}.weight"))?, bias: params.get(&format!("{name}.bias"))? })
    }

    pub fn detach(&self) -> Self {
        Self { weight: self.weight.detach(), bias: self.bias.detach() }
    }

    /// `x` is `batch x d_in`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Result<Self> {
        let gamma = params.insert(format!("{name}.gamma"), Tensor::ones(channels, DType::F32, &Device::Cpu)?)?;
        let beta = params.insert(format!("{name}.beta"), Tensor::zeros(channels, DType::F32, &Device::Cpu)?)?;
        Ok(Self { gamma, beta, groups: norm_groups(channels) })
    }

    pub fn load(params: &Params, name: &str) -> Result<Self> {
        let gamma = params.get(&format!("{name}.gamma"))?;
        let groups = norm_groups(gamma.dim(0)?);
        Ok(Self { gamma, beta: params.get(&format!("{name}.beta"))?, groups })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Divides each row of a `rows x d` matrix by its L2 norm.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Sinusoidal embedding of integer timesteps, `len(ts) x dim`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push((t * freq).cos() as f32);
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

const MAGIC: &str = "VSTAIN-CHECKPOINT";
pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Everything persisted in a checkpoint: free-form metadata plus tensors.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Params,
}

impl Checkpoint {
    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("unparsable metadata `{key}`")))
    }

    /// Text header, one line per entry, terminated by `end`, then the raw
    /// little-endian f32 payloads in header order:
    ///
    /// ```text
    /// VSTAIN-CHECKPOINT
    /// schema 1
    /// meta kind score_net
    /// tensor conv_in.weight f32 32,3,3,3
    /// end
    /// ```
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "schema {CHECKPOINT_SCHEMA}")?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata `{k}` cannot be encoded")));
            }
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, var) in self.params.iter() {
            let dims: Vec<String> = var.dims().iter().map(|d| d.to_string()).collect();
            writeln!(w, "tensor {name} f32 {}", dims.join(","))?;
        }
        writeln!(w, "end")?;
        for (_, var) in self.params.iter() {
            for v in flat_f32(var.as_tensor())? {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut std::io::BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let schema = next_line(&mut r)?;
        if schema != format!("schema {CHECKPOINT_SCHEMA}") {
            return Err(bad(format!("unsupported `{schema}`")));
        }
        let mut meta = BTreeMap::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let mut parts = l.splitn(3, ' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some("meta"), Some(k), Some(v)) => {
                    meta.insert(k.to_string(), v.to_string());
                }
                (Some("tensor"), Some(name), Some(rest)) => {
                    let (ty, dims) = rest.split_once(' ').ok_or_else(|| bad(format!("bad tensor line `{l}`")))?;
                    if ty != "f32" {
                        return Err(bad(format!("unsupported element type `{ty}`")));
                    }
                    let dims = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape in `{l}`")))?;
                    specs.push((name.to_string(), dims));
                }
                _ => return Err(bad(format!("unrecognised header line `{l}`"))),
            }
        }
        let mut params = Params::new();
        for (name, dims) in specs {
            let n: usize = dims.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(|_| bad(format!("payload for `{name}` truncated")))?;
            let values: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.insert(name, Tensor::from_vec(values, dims, &Device::Cpu)?)?;
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
