//! Residual sequence blocks over `(N, L, D)` tensors: EGA, EFN, CLA and the
//! global/local block built from them.

use super::params::{Bound, ParamInit};
use crate::error::{invalid, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCfg {
    pub width: usize,
    pub heads: usize,
    pub kernel: usize,
    pub factor: usize,
    pub expansion: usize,
}

pub fn lin<T: Real>(g: &mut Graph<T>, p: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

pub fn ln<T: Real>(g: &mut Graph<T>, p: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = p.var(&format!("{name}.gamma"))?;
    let beta = p.var(&format!("{name}.beta"))?;
    g.layernorm(x, gamma, beta)
}

/// `x + upsample(body(pool(LN x))) ⊙ σ(gate(LN x))`.
fn gated_downsampled<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<T>,
    prefix: &str,
    x: Var,
    factor: usize,
    body: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let len = g.shape(x)[1];
    let h = ln(g, p, &format!("{prefix}.ln"), x)?;
    let gate = lin(g, p, &format!("{prefix}.gate"), h)?;
    let gate = g.sigmoid(gate)?;
    let d = g.pool_avg(h, factor, 1)?;
    let o = body(g, d)?;
    let u = g.upsample_repeat(o, factor, 1, len)?;
    let u = g.mul(u, gate)?;
    g.add(x, u)
}

pub fn init_ega<T: Real>(init: &mut ParamInit<T>, prefix: &str, c: &BlockCfg) -> Result<()> {
    if c.width % c.heads != 0 {
        return Err(invalid(
            "ega",
            format!("{} heads do not divide width {}", c.heads, c.width),
        ));
    }
    init.layernorm(&format!("{prefix}.ln"), c.width)?;
    init.linear(&format!("{prefix}.gate"), c.width, c.width, false)?;
    init.linear(&format!("{prefix}.qkv"), c.width, 3 * c.width, false)?;
    init.linear(&format!("{prefix}.out"), c.width, c.width, true)
}

/// Efficient global attention: multi-head self-attention on the pooled sequence.
pub fn ega<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<T>,
    prefix: &str,
    x: Var,
    c: &BlockCfg,
) -> Result<Var> {
    if c.width % c.heads != 0 {
        return Err(invalid(
            "ega",
            format!("{} heads do not divide width {}", c.heads, c.width),
        ));
    }
    gated_downsampled(g, p, prefix, x, c.factor, |g, d| {
        let s = g.shape(d).to_vec();
        let (n, l, w) = (s[0], s[1], s[2]);
        let (h, dh) = (c.heads, w / c.heads);
        let qkv = lin(g, p, &format!("{prefix}.qkv"), d)?;
        // (N, L, H, dh) → (N·H, L, dh), or (N·H, dh, L) when `transposed`
        let split = |g: &mut Graph<T>, i: usize, transposed: bool| -> Result<Var> {
            let part = g.slice(qkv, 2, i * w, w)?;
            let part = g.reshape(part, &[n, l, h, dh])?;
            if transposed {
                let part = g.permute(part, &[0, 2, 3, 1])?;
                g.reshape(part, &[n * h, dh, l])
            } else {
                let part = g.permute(part, &[0, 2, 1, 3])?;
                g.reshape(part, &[n * h, l, dh])
            }
        };
        let q = split(g, 0, false)?;
        let k = split(g, 1, true)?;
        let v = split(g, 2, false)?;
        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let o = g.matmul(attn, v)?;
        let o = g.reshape(o, &[n, h, l, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[n, l, w])?;
        lin(g, p, &format!("{prefix}.out"), o)
    })
}

pub fn init_efn<T: Real>(init: &mut ParamInit<T>, prefix: &str, c: &BlockCfg) -> Result<()> {
    let hidden = c.expansion * c.width;
    init.layernorm(&format!("{prefix}.ln"), c.width)?;
    init.linear(&format!("{prefix}.gate"), c.width, c.width, false)?;
    init.linear(&format!("{prefix}.up"), c.width, 2 * hidden, false)?;
    init.linear(&format!("{prefix}.down"), hidden, c.width, true)
}

/// Efficient feed-forward network: GLU FFN on the pooled sequence.
pub fn efn<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<T>,
    prefix: &str,
    x: Var,
    c: &BlockCfg,
) -> Result<Var> {
    gated_downsampled(g, p, prefix, x, c.factor, |g, d| {
        let u = lin(g, p, &format!("{prefix}.up"), d)?;
        let u = g.glu(u)?;
        lin(g, p, &format!("{prefix}.down"), u)
    })
}

pub fn init_cla<T: Real>(init: &mut ParamInit<T>, prefix: &str, c: &BlockCfg) -> Result<()> {
    if c.kernel % 2 == 0 {
        return Err(invalid(
            "cla",
            format!("kernel size must be odd, got {}", c.kernel),
        ));
    }
    init.layernorm(&format!("{prefix}.ln"), c.width)?;
    init.linear(&format!("{prefix}.pw1"), c.width, 2 * c.width, false)?;
    init.depthwise(&format!("{prefix}.dw"), c.width, c.kernel)?;
    init.linear(&format!("{prefix}.pw2"), c.width, c.width, true)
}

/// Convolutional local attention: PConv → GLU → depthwise conv → PConv.
pub fn cla<T: Real>(g: &mut Graph<T>, p: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = ln(g, p, &format!("{prefix}.ln"), x)?;
    let h = lin(g, p, &format!("{prefix}.pw1"), h)?;
    let h = g.glu(h)?;
    let w = p.var(&format!("{prefix}.dw.w"))?;
    let b = p.var(&format!("{prefix}.dw.b"))?;
    let h = g.dconv_seq(h, w, Some(b))?;
    let h = lin(g, p, &format!("{prefix}.pw2"), h)?;
    g.add(x, h)
}

pub fn init_gl_block<T: Real>(init: &mut ParamInit<T>, prefix: &str, c: &BlockCfg) -> Result<()> {
    init_ega(init, &format!("{prefix}.ega"), c)?;
    init_efn(init, &format!("{prefix}.efn1"), c)?;
    init_cla(init, &format!("{prefix}.cla"), c)?;
    init_efn(init, &format!("{prefix}.efn2"), c)
}

/// Global Transformer (EGA, EFN) followed by local Transformer (CLA, EFN).
pub fn gl_block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<T>,
    prefix: &str,
    x: Var,
    c: &BlockCfg,
) -> Result<Var> {
    let x = ega(g, p, &format!("{prefix}.ega"), x, c)?;
    let x = efn(g, p, &format!("{prefix}.efn1"), x, c)?;
    let x = cla(g, p, &format!("{prefix}.cla"), x)?;
    efn(g, p, &format!("{prefix}.efn2"), x, c)
}
