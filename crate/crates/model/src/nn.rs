//! Shared neural building blocks: linear layers, affine layer norm,
//! multi-head self-attention, pre-norm transformer blocks (optionally
//! widening or narrowing at stage boundaries), and the positive diagonal
//! MLP used for the SDE diffusion.

use crate::params::{ParamBuilder, Params};
use niles_autodiff::Tensor;

pub const LN_EPS: f64 = 1e-6;

/// y = x W + b with x (S, in), W (in, out).
pub fn linear(p: &Params, name: &str, x: &Tensor) -> Tensor {
    x.matmul(p.p(&format!("{name}.w")))
        .add_bias(p.p(&format!("{name}.b")))
}

/// Affine layer norm over the last dimension.
pub fn layer_norm(p: &Params, name: &str, x: &Tensor) -> Tensor {
    x.layer_norm(LN_EPS)
        .mul_bias(p.p(&format!("{name}.g")))
        .add_bias(p.p(&format!("{name}.b")))
}

/// Multi-head self-attention; the output projection is zero-initialized so
/// the surrounding residual block starts as the identity.
pub fn attention(p: &Params, name: &str, x: &Tensor, n_heads: usize) -> Tensor {
    let width = *x.shape().last().unwrap();
    assert_eq!(width % n_heads, 0, "width {width} not divisible by {n_heads} heads");
    let dh = width / n_heads;
    let q = linear(p, &format!("{name}.q"), x);
    let k = linear(p, &format!("{name}.k"), x);
    let v = linear(p, &format!("{name}.v"), x);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_last_dim(h * dh, dh);
        let kh = k.slice_last_dim(h * dh, dh);
        let vh = v.slice_last_dim(h * dh, dh);
        let scores = qh.matmul(&kh.transpose()).scale(scale);
        heads.push(scores.softmax().matmul(&vh));
    }
    linear(p, &format!("{name}.o"), &Tensor::concat_last_dim(&heads))
}

pub fn attention_params(b: &mut ParamBuilder, name: &str, width: usize) {
    b.linear(&format!("{name}.q"), width, width, false);
    b.linear(&format!("{name}.k"), width, width, false);
    b.linear(&format!("{name}.v"), width, width, false);
    b.linear(&format!("{name}.o"), width, width, true);
}

/// Width change applied to the residual shortcut at stage boundaries:
/// parameter-free channel duplication (widening) or pairwise mean
/// (narrowing), so the block stays well-defined under zero-initialized
/// branches.
fn resize_shortcut(x: &Tensor, w_out: usize) -> Tensor {
    let w = *x.shape().last().unwrap();
    if w_out == w {
        x.clone()
    } else if w_out == 2 * w {
        Tensor::concat_last_dim(&[x.clone(), x.clone()])
    } else if 2 * w_out == w {
        let a = x.slice_last_dim(0, w_out);
        let b = x.slice_last_dim(w_out, w_out);
        a.add(&b).scale(0.5)
    } else {
        panic!("unsupported shortcut resize {w} -> {w_out}");
    }
}

/// Pre-norm transformer block: x + Attn(LN(x)), then + MLP(LN(.)) with GeLU
/// inside the MLP. When `w_out` differs from the input width the final MLP
/// projection changes the embedding dimension and the shortcut is resized.
pub fn transformer_block(
    p: &Params,
    name: &str,
    x: &Tensor,
    n_heads: usize,
    w_out: usize,
) -> Tensor {
    let h = x.add(&attention(p, &format!("{name}.attn"), &layer_norm(p, &format!("{name}.ln1"), x), n_heads));
    let m = layer_norm(p, &format!("{name}.ln2"), &h);
    let m = linear(p, &format!("{name}.mlp1"), &m).gelu();
    let m = linear(p, &format!("{name}.mlp2"), &m);
    resize_shortcut(&h, w_out).add(&m)
}

pub fn transformer_block_params(
    b: &mut ParamBuilder,
    name: &str,
    width: usize,
    w_out: usize,
    mlp_ratio: usize,
) {
    b.layer_norm(&format!("{name}.ln1"), width);
    attention_params(b, &format!("{name}.attn"), width);
    b.layer_norm(&format!("{name}.ln2"), width);
    let hidden = (mlp_ratio * width).max(1);
    b.linear(&format!("{name}.mlp1"), width, hidden, false);
    // zero-init so the block is the identity (resp. pure shortcut) at init
    b.linear(&format!("{name}.mlp2"), hidden, w_out, true);
}

/// Per-coordinate MLP with shared weights: every scalar runs through the
/// same 1 -> hidden^L -> 1 stack (tanh activations, exp output), so the
/// Jacobian is diagonal and the output strictly positive.
pub fn mlp_diagonal(p: &Params, name: &str, x: &Tensor) -> Tensor {
    let shape = x.shape().to_vec();
    let n: usize = shape.iter().product();
    let mut h = x.reshape(&[n, 1]);
    let mut layer = 0;
    while p.contains(&format!("{name}.l{layer}.w")) {
        h = linear(p, &format!("{name}.l{layer}"), &h);
        layer += 1;
        if p.contains(&format!("{name}.l{layer}.w")) {
            h = h.tanh();
        }
    }
    h.exp().reshape(&shape)
}

pub fn mlp_diagonal_params(b: &mut ParamBuilder, name: &str, hidden: usize, n_hidden_layers: usize) {
    let mut fan_in = 1;
    for l in 0..n_hidden_layers {
        b.linear(&format!("{name}.l{l}"), fan_in, hidden, false);
        fan_in = hidden;
    }
    b.linear(&format!("{name}.l{n_hidden_layers}"), fan_in, 1, true);
}
