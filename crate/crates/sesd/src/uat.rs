//! The U-Audio Transformer denoiser: a 1D U-Net around a transformer
//! backbone with register tokens, dynamic-position-bias self-attention,
//! position-aware cross-attention over transcript features, and
//! alpha-conditioning through scale-and-shift modulation.

use crate::conditioning::TranscriptEncoding;
use crate::params::{Init, ParamSpec, ParameterStore};
use crate::tape::{Tape, Var, MASK_NEG};
use crate::tensor::{Dtype, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UATConfig {
    pub max_frames: usize,
    pub latent_dim: usize,
    pub unet_dim: usize,
    pub unet_stages: usize,
    pub res_blocks_per_stage: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub num_registers: usize,
    pub d_text: usize,
    pub dropout_p: f64,
    pub time_sin_dim: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    pub dpb_hidden: usize,
    pub pos_hidden: usize,
    /// Ablation switch: when false the position encoder is absent and
    /// cross-attention reduces to plain dot-product attention.
    pub position_keys: bool,
}

impl Default for UATConfig {
    fn default() -> Self {
        UATConfig::desk()
    }
}

impl UATConfig {
    /// Desk-scale configuration used throughout the test corpus.
    pub fn desk() -> Self {
        UATConfig {
            max_frames: 64,
            latent_dim: 32,
            unet_dim: 64,
            unet_stages: 4,
            res_blocks_per_stage: 1,
            transformer_layers: 2,
            heads: 4,
            num_registers: 4,
            d_text: 64,
            dropout_p: 0.1,
            time_sin_dim: 32,
            time_dim: 128,
            ff_mult: 4,
            dpb_hidden: 32,
            pos_hidden: 32,
            position_keys: true,
        }
    }

    /// Full-scale configuration; only used for parameter accounting.
    pub fn paper() -> Self {
        UATConfig {
            max_frames: 1504,
            latent_dim: 128,
            unet_dim: 512,
            unet_stages: 4,
            res_blocks_per_stage: 3,
            transformer_layers: 8,
            heads: 8,
            num_registers: 8,
            d_text: 1472,
            dropout_p: 0.1,
            time_sin_dim: 512,
            time_dim: 1024,
            ff_mult: 6,
            dpb_hidden: 512,
            pos_hidden: 1024,
            position_keys: true,
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn tiny() -> Self {
        UATConfig {
            max_frames: 8,
            latent_dim: 4,
            unet_dim: 16,
            unet_stages: 1,
            res_blocks_per_stage: 1,
            transformer_layers: 1,
            heads: 2,
            num_registers: 2,
            d_text: 8,
            dropout_p: 0.0,
            time_sin_dim: 8,
            time_dim: 16,
            ff_mult: 2,
            dpb_hidden: 8,
            pos_hidden: 8,
            position_keys: true,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.unet_stages - 1)
    }

    /// Sequence length after the U-Net encoder.
    pub fn bottleneck_frames(&self, frames: usize) -> usize {
        frames / self.downsample_factor()
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet_stages == 0 {
            return Err(Error::User("unet_stages must be at least 1".into()));
        }
        if self.max_frames % self.downsample_factor() != 0 {
            return Err(Error::User(format!(
                "max_frames {} not divisible by 2^(stages-1) = {}",
                self.max_frames,
                self.downsample_factor()
            )));
        }
        if self.unet_dim % self.heads != 0 {
            return Err(Error::User("unet_dim must be divisible by heads".into()));
        }
        if self.time_sin_dim % 2 != 0 {
            return Err(Error::User("time_sin_dim must be even".into()));
        }
        Ok(())
    }
}

fn w(name: String, shape: &[usize]) -> ParamSpec {
    ParamSpec::new(name, shape, Init::TruncNormal { std: 0.02 }, true)
}

fn bias(name: String, shape: &[usize]) -> ParamSpec {
    ParamSpec::new(name, shape, Init::Zeros, false)
}

fn norm(prefix: &str, c: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec::new(format!("{prefix}.gain"), &[c], Init::Ones, false));
    out.push(ParamSpec::new(format!("{prefix}.bias"), &[c], Init::Zeros, false));
}

fn res_block(prefix: &str, c: usize, td: usize, out: &mut Vec<ParamSpec>) {
    norm(&format!("{prefix}.norm1"), c, out);
    out.push(w(format!("{prefix}.time.w"), &[td, 2 * c]));
    out.push(bias(format!("{prefix}.time.b"), &[2 * c]));
    out.push(w(format!("{prefix}.conv1.w"), &[3, c, c]));
    out.push(bias(format!("{prefix}.conv1.b"), &[c]));
    norm(&format!("{prefix}.norm2"), c, out);
    out.push(w(format!("{prefix}.conv2.w"), &[3, c, c]));
    out.push(bias(format!("{prefix}.conv2.b"), &[c]));
}

/// Full parameter layout for a configuration. The layout is the single
/// source of truth shared by initialization, parameter counting and the
/// forward builder.
pub fn layout(cfg: &UATConfig) -> Vec<ParamSpec> {
    let c = cfg.unet_dim;
    let d = cfg.latent_dim;
    let td = cfg.time_dim;
    let mut out = Vec::new();

    out.push(w("time.w1".into(), &[cfg.time_sin_dim, td]));
    out.push(bias("time.b1".into(), &[td]));
    out.push(w("time.w2".into(), &[td, td]));
    out.push(bias("time.b2".into(), &[td]));

    out.push(w("in_proj.w".into(), &[d, c]));
    out.push(bias("in_proj.b".into(), &[c]));
    out.push(ParamSpec::new("corrupt_embed", &[2, c], Init::TruncNormal { std: 0.02 }, false));

    for s in 0..cfg.unet_stages {
        for r in 0..cfg.res_blocks_per_stage {
            res_block(&format!("enc{s}.res{r}"), c, td, &mut out);
        }
        if s + 1 < cfg.unet_stages {
            out.push(w(format!("down{s}.w"), &[3, c, c]));
            out.push(bias(format!("down{s}.b"), &[c]));
        }
    }

    if cfg.num_registers > 0 {
        out.push(ParamSpec::new(
            "registers",
            &[cfg.num_registers, c],
            Init::TruncNormal { std: 0.02 },
            false,
        ));
    }
    out.push(ParamSpec::new("cond.null", &[1, cfg.d_text], Init::TruncNormal { std: 0.02 }, false));

    for l in 0..cfg.transformer_layers {
        let p = format!("tf{l}");
        norm(&format!("{p}.attn.norm"), c, &mut out);
        for nm in ["wq", "wk", "wv", "wo"] {
            out.push(w(format!("{p}.attn.{nm}"), &[c, c]));
        }
        for nm in ["bq", "bk", "bv", "bo"] {
            out.push(bias(format!("{p}.attn.{nm}"), &[c]));
        }
        out.push(w(format!("{p}.attn.dpb.w1"), &[1, cfg.dpb_hidden]));
        out.push(bias(format!("{p}.attn.dpb.b1"), &[cfg.dpb_hidden]));
        out.push(w(format!("{p}.attn.dpb.w2"), &[cfg.dpb_hidden, cfg.dpb_hidden]));
        out.push(bias(format!("{p}.attn.dpb.b2"), &[cfg.dpb_hidden]));
        out.push(w(format!("{p}.attn.dpb.w3"), &[cfg.dpb_hidden, cfg.heads]));
        out.push(bias(format!("{p}.attn.dpb.b3"), &[cfg.heads]));
        if cfg.num_registers > 0 {
            out.push(ParamSpec::new(format!("{p}.attn.dpb.reg"), &[cfg.heads], Init::Zeros, false));
        }

        norm(&format!("{p}.xattn.norm"), c, &mut out);
        out.push(w(format!("{p}.xattn.wq"), &[c, c]));
        out.push(bias(format!("{p}.xattn.bq"), &[c]));
        out.push(w(format!("{p}.xattn.wk"), &[cfg.d_text, c]));
        out.push(bias(format!("{p}.xattn.bk"), &[c]));
        out.push(w(format!("{p}.xattn.wv"), &[cfg.d_text, c]));
        out.push(bias(format!("{p}.xattn.bv"), &[c]));
        out.push(w(format!("{p}.xattn.wo"), &[c, c]));
        out.push(bias(format!("{p}.xattn.bo"), &[c]));
        if cfg.position_keys {
            out.push(w(format!("{p}.xattn.pos.w1"), &[1, cfg.pos_hidden]));
            out.push(bias(format!("{p}.xattn.pos.b1"), &[cfg.pos_hidden]));
            out.push(w(format!("{p}.xattn.pos.w2"), &[cfg.pos_hidden, c]));
            out.push(bias(format!("{p}.xattn.pos.b2"), &[c]));
        }

        norm(&format!("{p}.ff.norm"), c, &mut out);
        out.push(w(format!("{p}.ff.time.w"), &[td, 2 * c]));
        out.push(bias(format!("{p}.ff.time.b"), &[2 * c]));
        out.push(w(format!("{p}.ff.w1"), &[c, cfg.ff_mult * c]));
        out.push(bias(format!("{p}.ff.b1"), &[cfg.ff_mult * c]));
        out.push(w(format!("{p}.ff.w2"), &[cfg.ff_mult * c, c]));
        out.push(bias(format!("{p}.ff.b2"), &[c]));
    }
    norm("tf.final_norm", c, &mut out);

    for s in (0..cfg.unet_stages).rev() {
        out.push(w(format!("dec{s}.skip.w"), &[1, 2 * c, c]));
        out.push(bias(format!("dec{s}.skip.b"), &[c]));
        for r in 0..cfg.res_blocks_per_stage {
            res_block(&format!("dec{s}.res{r}"), c, td, &mut out);
        }
        if s > 0 {
            out.push(w(format!("up{s}.w"), &[3, c, c]));
            out.push(bias(format!("up{s}.b"), &[c]));
        }
    }

    norm("out_norm", c, &mut out);
    out.push(ParamSpec::new("out_proj.w", &[c, d], Init::Zeros, true));
    out.push(bias("out_proj.b".into(), &[d]));
    out
}

/// Parameter count derived purely from the configuration.
pub fn count_params(cfg: &UATConfig) -> usize {
    layout(cfg).iter().map(|p| p.num_elements()).sum()
}

pub fn init_store(cfg: &UATConfig, seed: u64, dtype: Dtype) -> Result<ParameterStore> {
    cfg.validate()?;
    ParameterStore::from_specs(&layout(cfg), seed, dtype)
}

/// Sinusoidal features of `alpha_t`: half sine, half cosine over
/// geometrically spaced frequencies with base 1e4.
pub fn alpha_sin_features(alpha: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = 1e4f64.powf(exponent);
        data[i] = (alpha * freq).sin();
        data[half + i] = (alpha * freq).cos();
    }
    Tensor::new(vec![1, dim], data, Dtype::Double).unwrap()
}

/// One denoiser invocation: latent frames (possibly prompt-spliced), the
/// schedule's alpha, transcript conditioning and the two frame masks.
pub struct DenoiseRequest<'a> {
    pub z: &'a Tensor,
    pub alpha_t: f64,
    pub enc: &'a TranscriptEncoding,
    pub valid: &'a [bool],
    pub corrupt: &'a [bool],
}

/// Anything that can produce `v_hat` from a denoise request. Samplers and
/// evaluation depend only on this surface, which lets tests substitute
/// closed-form oracles for the network.
pub trait Denoiser {
    fn denoise(&self, req: &DenoiseRequest) -> Result<Tensor>;
}

/// The U-AT bound to a parameter snapshot.
pub struct UatModel<'a> {
    pub cfg: &'a UATConfig,
    pub store: &'a ParameterStore,
}

impl Denoiser for UatModel<'_> {
    fn denoise(&self, req: &DenoiseRequest) -> Result<Tensor> {
        let mut tape = Tape::new(Dtype::Double);
        let out = build_denoise(&mut tape, self.store, self.cfg, req)?;
        Ok(tape.value(out).clone())
    }
}

fn or_pool_masks(valid: &[bool], stages: usize) -> Vec<Vec<f64>> {
    let mut levels = Vec::with_capacity(stages);
    let mut cur: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    levels.push(cur.clone());
    for _ in 1..stages {
        let next: Vec<f64> =
            cur.chunks(2).map(|p| if p.iter().any(|&x| x > 0.0) { 1.0 } else { 0.0 }).collect();
        levels.push(next.clone());
        cur = next;
    }
    levels
}

/// Scale-and-shift modulation of `h` by the time embedding through the
/// projection at `{prefix}.w/.b`: `h * (1 + gain) + shift`.
fn time_modulate(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    h: Var,
    t_emb: Var,
    c: usize,
) -> Result<Var> {
    let wt = tape.param(store, &format!("{prefix}.w"))?;
    let bt = tape.param(store, &format!("{prefix}.b"))?;
    let gs = tape.linear(t_emb, wt, bt); // [1, 2c]
    let gain = tape.slice_cols(gs, 0, c);
    let shift = tape.slice_cols(gs, c, c);
    let one_plus = tape.add_const(gain, 1.0);
    let scaled = tape.mul_row(h, one_plus);
    Ok(tape.add_row(scaled, shift))
}

fn apply_res_block(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    x: Var,
    t_emb: Var,
    mask: &[f64],
    c: usize,
) -> Result<Var> {
    let g1 = tape.param(store, &format!("{prefix}.norm1.gain"))?;
    let b1 = tape.param(store, &format!("{prefix}.norm1.bias"))?;
    let mut h = tape.layer_norm(x, g1, b1);
    h = time_modulate(tape, store, &format!("{prefix}.time"), h, t_emb, c)?;
    h = tape.gelu(h);
    let w1 = tape.param(store, &format!("{prefix}.conv1.w"))?;
    let cb1 = tape.param(store, &format!("{prefix}.conv1.b"))?;
    h = tape.conv1d(h, w1, cb1, 1, 1);
    h = tape.scale_rows(h, mask);
    let g2 = tape.param(store, &format!("{prefix}.norm2.gain"))?;
    let b2 = tape.param(store, &format!("{prefix}.norm2.bias"))?;
    h = tape.layer_norm(h, g2, b2);
    h = tape.gelu(h);
    let w2 = tape.param(store, &format!("{prefix}.conv2.w"))?;
    let cb2 = tape.param(store, &format!("{prefix}.conv2.b"))?;
    h = tape.conv1d(h, w2, cb2, 1, 1);
    h = tape.scale_rows(h, mask);
    Ok(tape.add(x, h))
}

/// Position-aware keys for cross-attention: the null row (no positional
/// offset) followed by per-byte keys `k_j + f_theta(j/m)`.
pub fn position_aware_keys(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    text_full: Var,
    m: usize,
    cfg: &UATConfig,
) -> Result<Var> {
    let wk = tape.param(store, &format!("{prefix}.wk"))?;
    let bk = tape.param(store, &format!("{prefix}.bk"))?;
    let keys = tape.linear(text_full, wk, bk); // [m+1, c]
    if !cfg.position_keys {
        return Ok(keys);
    }
    let positions: Vec<f64> = (0..m).map(|j| (j + 1) as f64 / m as f64).collect();
    let pos_in = tape.input(Tensor::new(vec![m, 1], positions, Dtype::Double)?);
    let pw1 = tape.param(store, &format!("{prefix}.pos.w1"))?;
    let pb1 = tape.param(store, &format!("{prefix}.pos.b1"))?;
    let pw2 = tape.param(store, &format!("{prefix}.pos.w2"))?;
    let pb2 = tape.param(store, &format!("{prefix}.pos.b2"))?;
    let ph = tape.linear(pos_in, pw1, pb1);
    let ph = tape.gelu(ph);
    let pos_keys = tape.linear(ph, pw2, pb2); // [m, c]
    let zero_row = tape.input(Tensor::zeros(&[1, cfg.unet_dim], Dtype::Double));
    let pos_full = tape.concat_rows(&[zero_row, pos_keys]); // [m+1, c]
    Ok(tape.add(keys, pos_full))
}

fn multihead_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    bias: Option<Var>,
    key_mask: Option<&[f64]>,
    dropout_p: f64,
) -> Var {
    let dh = tape.value(q).dim(1) / heads;
    let qh = tape.split_heads(q, heads);
    let kh = tape.split_heads(k, heads);
    let vh = tape.split_heads(v, heads);
    let logits = tape.matmul_bt(qh, kh);
    let mut scaled = tape.scale(logits, 1.0 / (dh as f64).sqrt());
    if let Some(b) = bias {
        scaled = tape.add(scaled, b);
    }
    let probs = tape.softmax_masked(scaled, key_mask);
    let probs = tape.dropout(probs, dropout_p);
    let ctx = tape.matmul(probs, vh);
    tape.merge_heads(ctx)
}

/// Builds the full U-AT forward graph and returns the `v_hat` node.
pub fn build_denoise(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &UATConfig,
    req: &DenoiseRequest,
) -> Result<Var> {
    cfg.validate()?;
    let frames = req.z.dim(0);
    if frames > cfg.max_frames {
        return Err(Error::User(format!(
            "sequence of {frames} frames exceeds max_frames {}",
            cfg.max_frames
        )));
    }
    if frames % cfg.downsample_factor() != 0 {
        return Err(Error::Shape(format!(
            "frame count {frames} not divisible by downsample factor {}",
            cfg.downsample_factor()
        )));
    }
    if req.z.dim(1) != cfg.latent_dim {
        return Err(Error::Shape(format!(
            "latent dim {} does not match config {}",
            req.z.dim(1),
            cfg.latent_dim
        )));
    }
    if req.enc.text_dim() != cfg.d_text {
        return Err(Error::Shape(format!(
            "text dim {} does not match config {}",
            req.enc.text_dim(),
            cfg.d_text
        )));
    }
    if req.valid.len() != frames || req.corrupt.len() != frames {
        return Err(Error::Shape("mask length mismatch".into()));
    }
    let c = cfg.unet_dim;
    let masks = or_pool_masks(req.valid, cfg.unet_stages);

    // alpha-conditioning
    let sin = tape.input(alpha_sin_features(req.alpha_t, cfg.time_sin_dim));
    let tw1 = tape.param(store, "time.w1")?;
    let tb1 = tape.param(store, "time.b1")?;
    let tw2 = tape.param(store, "time.w2")?;
    let tb2 = tape.param(store, "time.b2")?;
    let th = tape.linear(sin, tw1, tb1);
    let th = tape.gelu(th);
    let t_emb = tape.linear(th, tw2, tb2); // [1, time_dim]

    // input projection plus corrupted-frame embedding
    let z_in = tape.input(req.z.clone());
    let wi = tape.param(store, "in_proj.w")?;
    let bi = tape.param(store, "in_proj.b")?;
    let mut x = tape.linear(z_in, wi, bi);
    let ce = tape.param(store, "corrupt_embed")?;
    let ids: Vec<usize> = req.corrupt.iter().map(|&cr| if cr { 1 } else { 0 }).collect();
    let ce_rows = tape.embed(ce, &ids);
    x = tape.add(x, ce_rows);
    x = tape.scale_rows(x, &masks[0]);

    // U-Net encoder
    let mut skips = Vec::with_capacity(cfg.unet_stages);
    for s in 0..cfg.unet_stages {
        for r in 0..cfg.res_blocks_per_stage {
            x = apply_res_block(tape, store, &format!("enc{s}.res{r}"), x, t_emb, &masks[s], c)?;
        }
        skips.push(x);
        if s + 1 < cfg.unet_stages {
            let dw = tape.param(store, &format!("down{s}.w"))?;
            let db = tape.param(store, &format!("down{s}.b"))?;
            x = tape.conv1d(x, dw, db, 2, 1);
            x = tape.scale_rows(x, &masks[s + 1]);
        }
    }

    // transformer backbone over registers + bottleneck frames
    let nb = cfg.bottleneck_frames(frames);
    let nr = cfg.num_registers;
    if nr > 0 {
        let regs = tape.param(store, "registers")?;
        x = tape.concat_rows(&[regs, x]);
    }
    let bottom_mask: Vec<f64> = masks[cfg.unet_stages - 1].clone();
    let self_key_mask: Vec<f64> = (0..nr)
        .map(|_| 0.0)
        .chain(bottom_mask.iter().map(|&m| if m > 0.0 { 0.0 } else { MASK_NEG }))
        .collect();

    let m_text = req.enc.byte_count();
    let null = tape.param(store, "cond.null")?;
    let text_in = tape.input(req.enc.vectors.clone());
    let text_full = tape.concat_rows(&[null, text_in]); // [m+1, d_text]
    let mut xattn_key_mask = vec![0.0; m_text + 1];
    if req.enc.dropped {
        for slot in xattn_key_mask.iter_mut().skip(1) {
            *slot = MASK_NEG;
        }
    }

    for l in 0..cfg.transformer_layers {
        let p = format!("tf{l}");
        // self-attention with dynamic position bias
        {
            let g = tape.param(store, &format!("{p}.attn.norm.gain"))?;
            let b = tape.param(store, &format!("{p}.attn.norm.bias"))?;
            let h = tape.layer_norm(x, g, b);
            let wq = tape.param(store, &format!("{p}.attn.wq"))?;
            let bq = tape.param(store, &format!("{p}.attn.bq"))?;
            let wk = tape.param(store, &format!("{p}.attn.wk"))?;
            let bk = tape.param(store, &format!("{p}.attn.bk"))?;
            let wv = tape.param(store, &format!("{p}.attn.wv"))?;
            let bv = tape.param(store, &format!("{p}.attn.bv"))?;
            let q = tape.linear(h, wq, bq);
            let k = tape.linear(h, wk, bk);
            let v = tape.linear(h, wv, bv);

            let offsets: Vec<f64> = (-(nb as isize - 1)..=(nb as isize - 1))
                .map(|d| d as f64 / nb as f64)
                .collect();
            let off_in = tape.input(Tensor::new(vec![2 * nb - 1, 1], offsets, Dtype::Double)?);
            let dw1 = tape.param(store, &format!("{p}.attn.dpb.w1"))?;
            let db1 = tape.param(store, &format!("{p}.attn.dpb.b1"))?;
            let dw2 = tape.param(store, &format!("{p}.attn.dpb.w2"))?;
            let db2 = tape.param(store, &format!("{p}.attn.dpb.b2"))?;
            let dw3 = tape.param(store, &format!("{p}.attn.dpb.w3"))?;
            let db3 = tape.param(store, &format!("{p}.attn.dpb.b3"))?;
            let dh1 = tape.linear(off_in, dw1, db1);
            let dh1 = tape.gelu(dh1);
            let dh2 = tape.linear(dh1, dw2, db2);
            let dh2 = tape.gelu(dh2);
            let off_bias = tape.linear(dh2, dw3, db3); // [2nb-1, heads]
            let reg_bias = if nr > 0 {
                tape.param(store, &format!("{p}.attn.dpb.reg"))?
            } else {
                tape.input(Tensor::zeros(&[cfg.heads], Dtype::Double))
            };
            let bias3 = tape.assemble_attn_bias(off_bias, reg_bias, nb, nr);

            let attn = multihead_attention(
                tape,
                q,
                k,
                v,
                cfg.heads,
                Some(bias3),
                Some(&self_key_mask),
                cfg.dropout_p,
            );
            let wo = tape.param(store, &format!("{p}.attn.wo"))?;
            let bo = tape.param(store, &format!("{p}.attn.bo"))?;
            let out = tape.linear(attn, wo, bo);
            let out = tape.dropout(out, cfg.dropout_p);
            x = tape.add(x, out);
        }
        // position-aware cross-attention over the transcript
        {
            let g = tape.param(store, &format!("{p}.xattn.norm.gain"))?;
            let b = tape.param(store, &format!("{p}.xattn.norm.bias"))?;
            let h = tape.layer_norm(x, g, b);
            let wq = tape.param(store, &format!("{p}.xattn.wq"))?;
            let bq = tape.param(store, &format!("{p}.xattn.bq"))?;
            let q = tape.linear(h, wq, bq);
            let keys = position_aware_keys(tape, store, &format!("{p}.xattn"), text_full, m_text, cfg)?;
            let wv = tape.param(store, &format!("{p}.xattn.wv"))?;
            let bv = tape.param(store, &format!("{p}.xattn.bv"))?;
            let vals = tape.linear(text_full, wv, bv);
            let attn = multihead_attention(
                tape,
                q,
                keys,
                vals,
                cfg.heads,
                None,
                Some(&xattn_key_mask),
                cfg.dropout_p,
            );
            let wo = tape.param(store, &format!("{p}.xattn.wo"))?;
            let bo = tape.param(store, &format!("{p}.xattn.bo"))?;
            let out = tape.linear(attn, wo, bo);
            let out = tape.dropout(out, cfg.dropout_p);
            x = tape.add(x, out);
        }
        // time-modulated feed-forward
        {
            let g = tape.param(store, &format!("{p}.ff.norm.gain"))?;
            let b = tape.param(store, &format!("{p}.ff.norm.bias"))?;
            let h = tape.layer_norm(x, g, b);
            let h = time_modulate(tape, store, &format!("{p}.ff.time"), h, t_emb, c)?;
            let w1 = tape.param(store, &format!("{p}.ff.w1"))?;
            let b1 = tape.param(store, &format!("{p}.ff.b1"))?;
            let w2 = tape.param(store, &format!("{p}.ff.w2"))?;
            let b2 = tape.param(store, &format!("{p}.ff.b2"))?;
            let h = tape.linear(h, w1, b1);
            let h = tape.gelu(h);
            let h = tape.dropout(h, cfg.dropout_p);
            let h = tape.linear(h, w2, b2);
            let out = tape.dropout(h, cfg.dropout_p);
            x = tape.add(x, out);
        }
    }
    {
        let g = tape.param(store, "tf.final_norm.gain")?;
        let b = tape.param(store, "tf.final_norm.bias")?;
        x = tape.layer_norm(x, g, b);
    }
    // drop the registers; decoder sees only audio positions
    if nr > 0 {
        x = tape.slice_rows(x, nr, nb);
    }
    debug_assert_eq!(tape.value(x).dim(0), nb);
    x = tape.scale_rows(x, &masks[cfg.unet_stages - 1]);

    // U-Net decoder with skip connections
    for s in (0..cfg.unet_stages).rev() {
        let cat = tape.concat_cols(x, skips[s]);
        let sw = tape.param(store, &format!("dec{s}.skip.w"))?;
        let sb = tape.param(store, &format!("dec{s}.skip.b"))?;
        x = tape.conv1d(cat, sw, sb, 1, 0);
        x = tape.scale_rows(x, &masks[s]);
        for r in 0..cfg.res_blocks_per_stage {
            x = apply_res_block(tape, store, &format!("dec{s}.res{r}"), x, t_emb, &masks[s], c)?;
        }
        if s > 0 {
            x = tape.upsample_nearest2(x);
            let uw = tape.param(store, &format!("up{s}.w"))?;
            let ub = tape.param(store, &format!("up{s}.b"))?;
            x = tape.conv1d(x, uw, ub, 1, 1);
            x = tape.scale_rows(x, &masks[s - 1]);
        }
    }

    let g = tape.param(store, "out_norm.gain")?;
    let b = tape.param(store, "out_norm.bias")?;
    x = tape.layer_norm(x, g, b);
    let wo = tape.param(store, "out_proj.w")?;
    let bo = tape.param(store, "out_proj.b")?;
    let v_hat = tape.linear(x, wo, bo);
    Ok(tape.scale_rows(v_hat, &masks[0]))
}
