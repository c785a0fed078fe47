//! Conditioned 3D U-Net noise predictor.
//!
//! Layout: input conv, `n_stages` encoder stages of residual blocks (rows and
//! cols halved between stages, time never), a bottleneck with cross-attention
//! to a pooled token grid of the conditioning stack, and a mirrored decoder
//! with one skip concatenation per stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensornet::{
    init_trunc_normal, timestep_embedding, Bound, Conv3dSpec, Graph, ParamId, ParamSet, Tensor, TensorError, Var,
};

/// Number of conditioning channels the model expects.
pub const COND_CHANNELS: usize = 20;
/// Number of predicted target variables.
pub const TARGET_CHANNELS: usize = 7;
/// Constant-one input channel appended after the conditioning stack; with zero
/// padding it marks the domain border.
pub const BORDER_CHANNELS: usize = 1;

const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_channels: Vec<usize>,
    pub n_stages: usize,
    pub layers_per_block: usize,
    pub norm_groups: usize,
    pub attn_heads: usize,
    /// Side of the square token grid the conditioning stack is pooled to.
    pub token_grid: usize,
}

impl DenoiserConfig {
    /// Full-size configuration: channels (64, 128, 256, 512).
    pub fn full() -> Self {
        Self::with_channels(vec![64, 128, 256, 512])
    }

    /// Reduced configuration for CPU runs: channels (8, 16, 32, 64).
    pub fn desk() -> Self {
        Self::with_channels(vec![8, 16, 32, 64])
    }

    pub fn with_channels(block_channels: Vec<usize>) -> Self {
        Self {
            in_channels: TARGET_CHANNELS + COND_CHANNELS + BORDER_CHANNELS,
            out_channels: TARGET_CHANNELS,
            n_stages: block_channels.len(),
            block_channels,
            layers_per_block: 2,
            norm_groups: 8,
            attn_heads: 8,
            token_grid: 8,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn cond_channels(&self) -> usize {
        COND_CHANNELS
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let err = |m: String| Err(TensorError::Config(m));
        if self.block_channels.len() != self.n_stages || self.n_stages == 0 {
            return err(format!(
                "block_channels has {} entries but n_stages = {}",
                self.block_channels.len(),
                self.n_stages
            ));
        }
        if self.in_channels != self.out_channels + COND_CHANNELS + BORDER_CHANNELS {
            return err(format!(
                "in_channels {} must equal out_channels {} + {COND_CHANNELS} conditioning + {BORDER_CHANNELS} border",
                self.in_channels, self.out_channels
            ));
        }
        if self.norm_groups == 0 {
            return err("norm_groups must be positive".into());
        }
        if let Some(c) = self.block_channels.iter().find(|&&c| c == 0 || c % self.norm_groups != 0) {
            return err(format!("block channel {c} not divisible by norm_groups {}", self.norm_groups));
        }
        let deepest = *self.block_channels.last().expect("non-empty");
        if self.attn_heads == 0 || deepest % self.attn_heads != 0 {
            return err(format!("bottleneck channels {deepest} not divisible by attn_heads {}", self.attn_heads));
        }
        if self.layers_per_block == 0 || self.token_grid == 0 {
            return err("layers_per_block and token_grid must be positive".into());
        }
        Ok(())
    }

    /// Required divisor of the spatial extents.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.n_stages - 1)
    }

    fn temb_dim(&self) -> usize {
        4 * self.block_channels[0]
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvP {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormP {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: NormP,
    conv1: ConvP,
    temb: ConvP,
    norm2: NormP,
    conv2: ConvP,
    shortcut: Option<ConvP>,
}

#[derive(Clone, Debug)]
struct CrossAttn {
    norm: NormP,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out: ConvP,
}

struct Builder<'a, S> {
    params: &'a mut ParamSet<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Builder<'_, S> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvP, TensorError> {
        let fan_in = cin * k * k * k;
        let w = init_trunc_normal(&[cout, cin, k, k, k], fan_in, &mut self.rng);
        Ok(ConvP {
            w: self.params.add(format!("{name}.weight"), w)?,
            b: self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?,
        })
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) -> Result<(ParamId, Option<ParamId>), TensorError> {
        let w = self.params.add(format!("{name}.weight"), init_trunc_normal(&[fout, fin], fin, &mut self.rng))?;
        let b = if bias { Some(self.params.add(format!("{name}.bias"), Tensor::zeros(&[fout]))?) } else { None };
        Ok((w, b))
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<NormP, TensorError> {
        Ok(NormP {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::full(&[c], S::one()))?,
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]))?,
        })
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, temb: usize) -> Result<ResBlock, TensorError> {
        let norm1 = self.norm(&format!("{name}.norm1"), cin)?;
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3)?;
        let (tw, tb) = self.linear(&format!("{name}.temb"), temb, cout, true)?;
        let norm2 = self.norm(&format!("{name}.norm2"), cout)?;
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3)?;
        let shortcut = if cin != cout { Some(self.conv(&format!("{name}.shortcut"), cin, cout, 1)?) } else { None };
        Ok(ResBlock { norm1, conv1, temb: ConvP { w: tw, b: tb.expect("bias") }, norm2, conv2, shortcut })
    }
}

/// Built network: configuration plus its parameter set.
#[derive(Clone, Debug)]
pub struct Denoiser<S> {
    config: DenoiserConfig,
    pub params: ParamSet<S>,
    conv_in: ConvP,
    temb1: ConvP,
    temb2: ConvP,
    encoder: Vec<Vec<ResBlock>>,
    downs: Vec<ConvP>,
    mid_attn: CrossAttn,
    mid_res: ResBlock,
    decoder: Vec<Vec<ResBlock>>,
    ups: Vec<ConvP>,
    norm_out: NormP,
    conv_out: ConvP,
}

impl<S: Scalar> Denoiser<S> {
    /// Deterministic seeded construction.
    pub fn build(config: &DenoiserConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        let ch = &config.block_channels;
        let c0 = ch[0];
        let td = config.temb_dim();
        let conv_in = b.conv("conv_in", config.in_channels, c0, 3)?;
        let (w1, b1) = b.linear("temb.fc1", c0, td, true)?;
        let (w2, b2) = b.linear("temb.fc2", td, td, true)?;
        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        let mut cin = c0;
        for (s, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for l in 0..config.layers_per_block {
                blocks.push(b.resblock(&format!("down{s}.res{l}"), cin, c, td)?);
                cin = c;
            }
            encoder.push(blocks);
            if s + 1 < ch.len() {
                downs.push(b.conv(&format!("down{s}.downsample"), c, c, 3)?);
            }
        }
        let cm = *ch.last().expect("validated");
        let cc = config.cond_channels();
        let mid_norm = b.norm("mid.attn.norm", cm)?;
        let (wq, _) = b.linear("mid.attn.q", cm, cm, false)?;
        let (wk, _) = b.linear("mid.attn.k", cc, cm, false)?;
        let (wv, _) = b.linear("mid.attn.v", cc, cm, false)?;
        let (wo, bo) = b.linear("mid.attn.out", cm, cm, true)?;
        let mid_attn = CrossAttn { norm: mid_norm, wq, wk, wv, out: ConvP { w: wo, b: bo.expect("bias") } };
        let mid_res = b.resblock("mid.res", cm, cm, td)?;
        let mut decoder = Vec::new();
        let mut ups = Vec::new();
        let mut cur = cm;
        for s in (0..ch.len()).rev() {
            let c = ch[s];
            let mut blocks = Vec::new();
            for l in 0..config.layers_per_block {
                let cin = if l == 0 { cur + c } else { c };
                blocks.push(b.resblock(&format!("up{s}.res{l}"), cin, c, td)?);
            }
            decoder.push(blocks);
            cur = c;
            if s > 0 {
                ups.push(b.conv(&format!("up{s}.upsample"), c, ch[s - 1], 3)?);
                cur = ch[s - 1];
            }
        }
        let norm_out = b.norm("norm_out", c0)?;
        let conv_out = b.conv("conv_out", c0, config.out_channels, 3)?;
        Ok(Self {
            config: config.clone(),
            params,
            conv_in,
            temb1: ConvP { w: w1, b: b1.expect("bias") },
            temb2: ConvP { w: w2, b: b2.expect("bias") },
            encoder,
            downs,
            mid_attn,
            mid_res,
            decoder,
            ups,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_inputs(&self, z: &[usize], cond: &[usize]) -> Result<(), TensorError> {
        let c = &self.config;
        if z.len() != 4 || z[0] != c.out_channels {
            return Err(TensorError::Shape(format!("z must be [{}][T][H][W], got {z:?}", c.out_channels)));
        }
        if cond.len() != 4 || cond[0] != c.cond_channels() || cond[1..] != z[1..] {
            return Err(TensorError::Shape(format!(
                "cond must be [{}]{:?}, got {cond:?}",
                c.cond_channels(),
                &z[1..]
            )));
        }
        let m = c.spatial_multiple();
        if z[2] % m != 0 || z[3] % m != 0 || z[2] == 0 || z[3] == 0 || z[1] == 0 {
            return Err(TensorError::Shape(format!(
                "spatial extents {}x{} must be positive multiples of {m}",
                z[2], z[3]
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g` and returns the noise prediction.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, z: Var, k: usize, cond: &Tensor<S>) -> Result<Var, TensorError> {
        self.check_inputs(g.shape(z), cond.shape())?;
        let groups = self.config.norm_groups;

        let emb = timestep_embedding::<S>(k, self.config.block_channels[0])?;
        let emb = g.input(emb.reshape(&[1, self.config.block_channels[0]])?);
        let t1 = g.linear(emb, p.var(self.temb1.w), Some(p.var(self.temb1.b)))?;
        let t1 = g.silu(t1);
        let temb = g.linear(t1, p.var(self.temb2.w), Some(p.var(self.temb2.b)))?;
        let temb = g.silu(temb);

        let tokens = g.input(pool_tokens(cond, self.config.token_grid)?);
        let mut side = cond.clone().into_data();
        side.extend(std::iter::repeat(S::one()).take(cond.numel() / cond.shape()[0]));
        let mut side_shape = cond.shape().to_vec();
        side_shape[0] += BORDER_CHANNELS;
        let c_in = g.input(Tensor::new(&side_shape, side)?);
        let x = g.concat(z, c_in)?;
        let mut h = conv(g, p, x, self.conv_in, Conv3dSpec::same(3))?;

        // without gradient tracking, intermediates are dropped as soon as they are dead
        let release = |g: &mut Graph<S>, h: Var, skips: &[Var]| {
            let mut keep = vec![h, temb, tokens];
            keep.extend_from_slice(skips);
            g.release_except(&keep);
        };
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (s, blocks) in self.encoder.iter().enumerate() {
            for rb in blocks {
                h = resblock(g, p, rb, h, temb, groups)?;
                release(g, h, &skips);
            }
            skips.push(h);
            if let Some(d) = self.downs.get(s) {
                h = conv(g, p, h, *d, Conv3dSpec::down_hw())?;
            }
        }

        h = cross_attention(g, p, &self.mid_attn, h, tokens, groups, self.config.attn_heads)?;
        release(g, h, &skips);
        h = resblock(g, p, &self.mid_res, h, temb, groups)?;
        release(g, h, &skips);

        for (i, blocks) in self.decoder.iter().enumerate() {
            let skip = skips.pop().expect("one skip per stage");
            h = g.concat(h, skip)?;
            for rb in blocks {
                h = resblock(g, p, rb, h, temb, groups)?;
                release(g, h, &skips);
            }
            if let Some(u) = self.ups.get(i) {
                h = g.upsample2x(h)?;
                h = conv(g, p, h, *u, Conv3dSpec::same(3))?;
                release(g, h, &skips);
            }
        }

        h = g.group_norm(h, groups, p.var(self.norm_out.gamma), p.var(self.norm_out.beta), GN_EPS)?;
        h = g.silu(h);
        conv(g, p, h, self.conv_out, Conv3dSpec::same(3))
    }

    /// Noise prediction without gradient tracking.
    pub fn predict(&self, z: &Tensor<S>, k: usize, cond: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zv = g.input(z.clone());
        let y = self.forward(&mut g, &p, zv, k, cond)?;
        Ok(g.value(y).clone())
    }
}

fn conv<S: Scalar>(g: &mut Graph<S>, p: &Bound, x: Var, c: ConvP, spec: Conv3dSpec) -> Result<Var, TensorError> {
    g.conv3d(x, p.var(c.w), Some(p.var(c.b)), spec)
}

fn resblock<S: Scalar>(g: &mut Graph<S>, p: &Bound, rb: &ResBlock, x: Var, temb: Var, groups: usize) -> Result<Var, TensorError> {
    let h = g.group_norm(x, groups, p.var(rb.norm1.gamma), p.var(rb.norm1.beta), GN_EPS)?;
    let h = g.silu(h);
    let h = conv(g, p, h, rb.conv1, Conv3dSpec::same(3))?;
    let t = g.linear(temb, p.var(rb.temb.w), Some(p.var(rb.temb.b)))?;
    let c = g.shape(t)[1];
    let t = g.reshape(t, &[c])?;
    let h = g.add_channel(h, t)?;
    let h = g.group_norm(h, groups, p.var(rb.norm2.gamma), p.var(rb.norm2.beta), GN_EPS)?;
    let h = g.silu(h);
    let h = conv(g, p, h, rb.conv2, Conv3dSpec::same(3))?;
    let s = match rb.shortcut {
        Some(sc) => conv(g, p, x, sc, Conv3dSpec { stride: [1; 3], pad: [0; 3] })?,
        None => x,
    };
    g.add(s, h)
}

fn cross_attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    a: &CrossAttn,
    x: Var,
    tokens: Var,
    groups: usize,
    heads: usize,
) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let m = g.shape(tokens)[0];
    let dh = c / heads;
    let hn = g.group_norm(x, groups, p.var(a.norm.gamma), p.var(a.norm.beta), GN_EPS)?;
    let hn = g.reshape(hn, &[c, n])?;
    let q_in = g.permute(hn, &[1, 0])?;
    let q = g.linear(q_in, p.var(a.wq), None)?;
    let k = g.linear(tokens, p.var(a.wk), None)?;
    let v = g.linear(tokens, p.var(a.wv), None)?;
    let split = |g: &mut Graph<S>, t: Var, len: usize| -> Result<Var, TensorError> {
        let t = g.reshape(t, &[len, heads, dh])?;
        g.permute(t, &[1, 0, 2])
    };
    let q = split(g, q, n)?;
    let k = split(g, k, m)?;
    let v = split(g, v, m)?;
    let o = g.attention(q, k, v)?;
    let o = g.permute(o, &[1, 0, 2])?;
    let o = g.reshape(o, &[n, c])?;
    let o = g.linear(o, p.var(a.out.w), Some(p.var(a.out.b)))?;
    let o = g.permute(o, &[1, 0])?;
    let o = g.reshape(o, &shape)?;
    g.add(x, o)
}

/// Averages `cond [C][T][H][W]` over time and over a `grid x grid` partition of
/// the plane, returning tokens `[grid*grid][C]`.
pub fn pool_tokens<S: Scalar>(cond: &Tensor<S>, grid: usize) -> Result<Tensor<S>, TensorError> {
    let s = cond.shape();
    if s.len() != 4 || s[2] < grid || s[3] < grid {
        return Err(TensorError::Shape(format!("cannot pool {s:?} to a {grid}x{grid} token grid")));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![S::zero(); grid * grid * c];
    for gi in 0..grid {
        let (r0, r1) = (gi * h / grid, (gi + 1) * h / grid);
        for gj in 0..grid {
            let (c0, c1) = (gj * w / grid, (gj + 1) * w / grid);
            let count = (t * (r1 - r0) * (c1 - c0)) as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for ti in 0..t {
                    for r in r0..r1 {
                        let row = ((ch * t + ti) * h + r) * w;
                        acc += cond.data()[row + c0..row + c1].iter().map(|v| v.f64()).sum::<f64>();
                    }
                }
                out[(gi * grid + gj) * c + ch] = S::of(acc / count);
            }
        }
    }
    Tensor::new(&[grid * grid, c], out)
}
