//! Multiscale transformer encoder/decoder over mesh-element tokens.
//!
//! The encoder maps a coarse-grid velocity field (one token per element) to
//! a diagonal Gaussian over the latent state: per stage, M transformer
//! blocks whose last MLP doubles the width, then 4x token mean-pooling over
//! 2x2 element blocks. The decoder mirrors the schedule (duplicate-unpool,
//! width-halving transition block, M-1 blocks) with additive skip
//! connections from the matching encoder stage, and a zero-initialized
//! output projection so the closure starts from zero.

use crate::nn::{layer_norm, linear, transformer_block, transformer_block_params};
use crate::params::{ParamBuilder, Params};
use crate::{ModelError, ModelResult};
use niles_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Element grid of the coarse mesh (tokens_x, tokens_y).
    pub grid: (usize, usize),
    /// Per-token input features d (P+1)^2.
    pub input_dim: usize,
    /// Embedding width after the input projection.
    pub base_width: usize,
    /// Pooling stages; each divides tokens by 4 and doubles the width.
    pub n_stages: usize,
    /// Transformer blocks per stage (the last one changes the width).
    pub blocks_per_stage: usize,
    pub n_heads: usize,
    /// MLP hidden ratio inside encoder/decoder blocks.
    pub mlp_ratio: usize,
    /// Transformer blocks in each SDE drift network.
    pub drift_blocks: usize,
    /// MLP hidden ratio inside drift blocks.
    pub drift_mlp_ratio: usize,
    /// Hidden width / hidden layer count of the diagonal diffusion MLP.
    pub diffusion_hidden: usize,
    pub diffusion_layers: usize,
}

impl ArchConfig {
    /// Full-scale architecture (144 tokens at order 4, two stages).
    pub fn paper() -> ArchConfig {
        ArchConfig {
            grid: (12, 12),
            input_dim: 2 * 25,
            base_width: 48,
            n_stages: 2,
            blocks_per_stage: 6,
            n_heads: 4,
            mlp_ratio: 4,
            drift_blocks: 4,
            drift_mlp_ratio: 1,
            diffusion_hidden: 32,
            diffusion_layers: 4,
        }
    }

    /// Desk-scale architecture over the 4x4/P3 coarse mesh.
    pub fn desk() -> ArchConfig {
        ArchConfig {
            grid: (4, 4),
            input_dim: 2 * 16,
            base_width: 32,
            n_stages: 1,
            blocks_per_stage: 2,
            n_heads: 4,
            mlp_ratio: 2,
            drift_blocks: 2,
            drift_mlp_ratio: 1,
            diffusion_hidden: 32,
            diffusion_layers: 4,
        }
    }

    /// Probe-sized architecture for gradient checks on a 2x2 coarse mesh.
    pub fn tiny() -> ArchConfig {
        ArchConfig {
            grid: (2, 2),
            input_dim: 2 * 16,
            base_width: 8,
            n_stages: 1,
            blocks_per_stage: 1,
            n_heads: 2,
            mlp_ratio: 1,
            drift_blocks: 1,
            drift_mlp_ratio: 1,
            diffusion_hidden: 4,
            diffusion_layers: 2,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn latent_tokens(&self) -> usize {
        self.n_tokens() >> (2 * self.n_stages)
    }

    pub fn latent_width(&self) -> usize {
        self.base_width << self.n_stages
    }

    pub fn validate(&self) -> ModelResult<()> {
        let (gx, gy) = self.grid;
        if gx % (1 << self.n_stages) != 0 || gy % (1 << self.n_stages) != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "token grid {gx}x{gy} not divisible by 2^{}",
                self.n_stages
            )));
        }
        if self.base_width % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(
                "embedding width must be divisible by the head count".into(),
            ));
        }
        if self.blocks_per_stage == 0 || self.input_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "blocks_per_stage and input_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width at the input of stage `s` (0-based).
    fn stage_width(&self, s: usize) -> usize {
        self.base_width << s
    }
}

/// 2x2-block pooling groups and the matching duplicate-unpool index for one
/// stage transition on a (gx, gy) row-major token grid.
pub fn pool_groups(gx: usize, gy: usize) -> (Rc<Vec<Vec<usize>>>, Rc<Vec<usize>>) {
    assert!(gx % 2 == 0 && gy % 2 == 0, "token grid {gx}x{gy} not poolable");
    let (ox, oy) = (gx / 2, gy / 2);
    let mut groups = Vec::with_capacity(ox * oy);
    for cy in 0..oy {
        for cx in 0..ox {
            groups.push(vec![
                (2 * cy) * gx + 2 * cx,
                (2 * cy) * gx + 2 * cx + 1,
                (2 * cy + 1) * gx + 2 * cx,
                (2 * cy + 1) * gx + 2 * cx + 1,
            ]);
        }
    }
    let mut unpool = vec![0usize; gx * gy];
    for (g, members) in groups.iter().enumerate() {
        for &m in members {
            unpool[m] = g;
        }
    }
    (Rc::new(groups), Rc::new(unpool))
}

/// Mean-pool tokens over explicit groups; identity when `factor` is 1.
pub fn pool_tokens(x: &Tensor, groups: &Rc<Vec<Vec<usize>>>) -> Tensor {
    x.group_mean_rows(Rc::clone(groups))
}

pub struct EncoderOutput {
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Stage activations for the decoder skips, finest first.
    pub skips: Vec<Tensor>,
}

/// Map a coarse velocity tensor (E, nv, 2) to element tokens (E, 2 nv):
/// u-nodes then v-nodes per token.
pub fn tokenize(v: &Tensor) -> Tensor {
    let shape = v.shape().to_vec();
    assert_eq!(shape.len(), 3, "tokenize expects (E, nv, d)");
    let (e, nv, d) = (shape[0], shape[1], shape[2]);
    let comps: Vec<Tensor> = (0..d)
        .map(|c| v.slice_last_dim(c, 1).reshape(&[e, nv]))
        .collect();
    Tensor::concat_last_dim(&comps)
}

/// Inverse of [`tokenize`]: (E, d nv) tokens back to an (E, nv, d) field.
pub fn untokenize(tokens: &Tensor, nv: usize, d: usize) -> Tensor {
    let e = tokens.shape()[0];
    assert_eq!(tokens.shape()[1], d * nv, "untokenize width mismatch");
    let comps: Vec<Tensor> = (0..d)
        .map(|c| tokens.slice_last_dim(c * nv, nv).reshape(&[e, nv, 1]))
        .collect();
    Tensor::concat_last_dim(&comps)
}

pub fn build_encoder_decoder_params(b: &mut ParamBuilder, arch: &ArchConfig) {
    // encoder
    b.linear("enc.proj", arch.input_dim, arch.base_width, false);
    b.gaussian("enc.pos", &[arch.n_tokens(), arch.base_width], 0.02);
    for s in 0..arch.n_stages {
        let w = arch.stage_width(s);
        for blk in 0..arch.blocks_per_stage {
            let w_out = if blk + 1 == arch.blocks_per_stage { 2 * w } else { w };
            transformer_block_params(b, &format!("enc.s{s}.b{blk}"), w, w_out, arch.mlp_ratio);
        }
    }
    let wl = arch.latent_width();
    b.layer_norm("enc.ln_out", wl);
    b.linear("enc.mu", wl, wl, true);
    b.linear("enc.sigma", wl, wl, true);
    // softplus(-2.25) ~= 0.1: start near the prior scale
    b.constant("enc.sigma_bias", &[wl], -2.25);

    // decoder (mirrored stages)
    for s in 0..arch.n_stages {
        // stage s consumes width latent_width / 2^s and emits half of it
        let w_in = arch.latent_width() >> s;
        transformer_block_params(b, &format!("dec.s{s}.b0"), w_in, w_in / 2, arch.mlp_ratio);
        for blk in 1..arch.blocks_per_stage {
            transformer_block_params(
                b,
                &format!("dec.s{s}.b{blk}"),
                w_in / 2,
                w_in / 2,
                arch.mlp_ratio,
            );
        }
    }
    b.layer_norm("dec.ln_out", arch.base_width);
    b.linear("dec.out", arch.base_width, arch.input_dim, true);
}

/// Encode a coarse field to the diagonal Gaussian over the initial latent
/// state, keeping per-stage activations for the decoder skips.
pub fn encode(p: &Params, arch: &ArchConfig, v: &Tensor) -> ModelResult<EncoderOutput> {
    if !v.is_finite() {
        return Err(ModelError::NonFinite("encoder input".into()));
    }
    let tokens = tokenize(v);
    if tokens.shape()[1] != arch.input_dim || tokens.shape()[0] != arch.n_tokens() {
        return Err(ModelError::ShapeMismatch(format!(
            "tokens {:?} vs architecture ({}, {})",
            tokens.shape(),
            arch.n_tokens(),
            arch.input_dim
        )));
    }
    let mut x = linear(p, "enc.proj", &tokens).add(p.p("enc.pos"));
    let (mut gx, mut gy) = arch.grid;
    let mut skips = Vec::with_capacity(arch.n_stages + 1);
    for s in 0..arch.n_stages {
        skips.push(x.clone());
        let w = arch.stage_width(s);
        for blk in 0..arch.blocks_per_stage {
            let w_out = if blk + 1 == arch.blocks_per_stage { 2 * w } else { w };
            x = transformer_block(p, &format!("enc.s{s}.b{blk}"), &x, arch.n_heads, w_out);
        }
        let (groups, _) = pool_groups(gx, gy);
        x = pool_tokens(&x, &groups);
        gx /= 2;
        gy /= 2;
    }
    skips.push(x.clone());
    let h = layer_norm(p, "enc.ln_out", &x);
    let mu = linear(p, "enc.mu", &h);
    let sigma = linear(p, "enc.sigma", &h)
        .add_bias(p.p("enc.sigma_bias"))
        .softplus();
    Ok(EncoderOutput { mu, sigma, skips })
}

/// Decode a final latent state back to a per-token LES-space increment.
/// `skips` comes from the paired encode call, or `None` when decoding prior
/// samples standalone (zeros are substituted by simply omitting the add).
pub fn decode(
    p: &Params,
    arch: &ArchConfig,
    z: &Tensor,
    skips: Option<&[Tensor]>,
) -> ModelResult<Tensor> {
    if !z.is_finite() {
        return Err(ModelError::NonFinite("decoder input".into()));
    }
    let el = arch.latent_tokens();
    let wl = arch.latent_width();
    if z.shape() != [el, wl] {
        return Err(ModelError::ShapeMismatch(format!(
            "latent {:?} vs ({el}, {wl})",
            z.shape()
        )));
    }
    let mut x = z.clone();
    if let Some(sk) = skips {
        x = x.add(&sk[arch.n_stages]);
    }
    let scale = 1 << arch.n_stages;
    let (mut gx, mut gy) = (arch.grid.0 / scale, arch.grid.1 / scale);
    for s in 0..arch.n_stages {
        // unpool first (duplicate over the 2x2 block), then the transition
        // block halves the width, then the remaining blocks
        let (_, unpool) = pool_groups(gx * 2, gy * 2);
        x = x.gather_rows(Rc::clone(&unpool));
        gx *= 2;
        gy *= 2;
        let w_in = wl >> s;
        x = transformer_block(p, &format!("dec.s{s}.b0"), &x, arch.n_heads, w_in / 2);
        for blk in 1..arch.blocks_per_stage {
            x = transformer_block(p, &format!("dec.s{s}.b{blk}"), &x, arch.n_heads, w_in / 2);
        }
        if let Some(sk) = skips {
            x = x.add(&sk[arch.n_stages - 1 - s]);
        }
    }
    Ok(linear(p, "dec.out", &layer_norm(p, "dec.ln_out", &x)))
}
