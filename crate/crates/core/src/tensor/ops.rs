//! Differentiable operations. Forward passes live on [`Graph`]; the matching
//! backward rules are free functions dispatched from `graph.rs`.

use super::graph::{Op, Unary};
use super::kernels::{self, sigmoid, split_axis};
use super::{Graph, Real, Tensor, Var};
use crate::error::{invalid, mismatch, Result};
use crate::stft::{self, StftConfig};

const LN_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts(va.shape().to_vec(), data)
        } else {
            let out = kernels::broadcast_shape(va.shape(), vb.shape())
                .ok_or_else(|| mismatch(name, va.shape(), vb.shape()))?;
            let sa = kernels::broadcast_strides(va.shape(), &out);
            let sb = kernels::broadcast_strides(vb.shape(), &out);
            let mut data = Vec::with_capacity(out.iter().product());
            let (da, db) = (va.data(), vb.data());
            kernels::for_each_broadcast(&out, &sa, &sb, |_, ia, ib| data.push(f(da[ia], db[ib])));
            Tensor::from_parts(out, data)
        };
        self.push(name, value, op, &[a, b])
    }

    /// Elementwise sum; operands broadcast along size-1 axes of equal rank.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, kind: Unary, x: Var) -> Result<Var> {
        let v = self.value(x);
        let value = match kind {
            Unary::Neg => v.map(|a| -a),
            Unary::Sigmoid => v.map(sigmoid),
            Unary::Tanh => v.map(|a| a.tanh()),
            Unary::Relu => v.map(|a| a.max(T::zero())),
            Unary::Exp => v.map(|a| a.exp()),
            Unary::Sqrt => v.map(|a| a.sqrt()),
            Unary::Square => v.map(|a| a * a),
            Unary::Abs => v.map(|a| a.abs()),
        };
        self.push(name, value, Op::Unary(kind, x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", Unary::Neg, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", Unary::Exp, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", Unary::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", Unary::Abs, x)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let value = self.value(x).map(|a| a * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let value = self.value(x).map(|a| a + s);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// Batched matrix product `(.., p, q) · (.., q, r)`; batch axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch("matmul", sa, sb));
        }
        let rank = sa.len();
        let (p, q, r) = (sa[rank - 2], sa[rank - 1], sb[rank - 1]);
        let batch = kernels::broadcast_shape(&sa[..rank - 2], &sb[..rank - 2])
            .ok_or_else(|| mismatch("matmul", sa, sb))?;
        let st_a = kernels::broadcast_strides(&sa[..rank - 2], &batch);
        let st_b = kernels::broadcast_strides(&sb[..rank - 2], &batch);
        let nb: usize = batch.iter().product();
        let mut out = vec![T::zero(); nb * p * r];
        let (da, db) = (va.data(), vb.data());
        kernels::for_each_broadcast(&batch, &st_a, &st_b, |o, ia, ib| {
            kernels::gemm_nn(
                &da[ia * p * q..(ia + 1) * p * q],
                &db[ib * q * r..(ib + 1) * q * r],
                &mut out[o * p * r..(o + 1) * p * r],
                p,
                q,
                r,
            )
        });
        let mut shape = batch;
        shape.extend_from_slice(&[p, r]);
        self.add_macs(nb * p * q * r);
        self.push(
            "matmul",
            Tensor::from_parts(shape, out),
            Op::Matmul(a, b),
            &[a, b],
        )
    }

    /// `x (.., in) · w (in, out) + b (out)` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(mismatch("linear", xs, ws));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = vx.len() / din.max(1);
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [dout] {
                return Err(mismatch("linear bias", vb.shape(), &[dout]));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(vb.data());
            }
        }
        kernels::gemm_nn(vx.data(), vw.data(), &mut out, rows, din, dout);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        self.add_macs(rows * din * dout);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            "linear",
            Tensor::from_parts(shape, out),
            Op::Linear { x, w, b },
            &parents,
        )
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = *v
            .shape()
            .last()
            .ok_or_else(|| invalid("softmax", "rank-0 input"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let mut s = T::zero();
            for a in row.iter_mut() {
                *a = (*a - m).exp();
                s += *a;
            }
            for a in row.iter_mut() {
                *a /= s;
            }
        }
        let shape = v.shape().to_vec();
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax(x),
            &[x],
        )
    }

    /// Layer normalization over the trailing axes spanned by `gamma`'s shape.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let xs = vx.shape();
        let gs = vg.shape();
        if vg.shape() != vb.shape() || gs.len() > xs.len() || xs[xs.len() - gs.len()..] != *gs {
            return Err(mismatch("layernorm", xs, gs));
        }
        let n = vg.len();
        let groups = vx.len() / n.max(1);
        let mut xhat = vec![T::zero(); vx.len()];
        let mut rstd = vec![T::zero(); groups];
        let mut out = vec![T::zero(); vx.len()];
        let inv_n = T::of(1.0 / n as f64);
        for gi in 0..groups {
            let seg = &vx.data()[gi * n..(gi + 1) * n];
            let mean = seg.iter().copied().sum::<T>() * inv_n;
            let var = seg.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[gi] = rs;
            for j in 0..n {
                let h = (seg[j] - mean) * rs;
                xhat[gi * n + j] = h;
                out[gi * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let shape = xs.to_vec();
        self.push(
            "layernorm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Gated linear unit over the last axis: `a ⊙ σ(b)` for `x = [a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n2 = *v
            .shape()
            .last()
            .ok_or_else(|| invalid("glu", "rank-0 input"))?;
        if n2 % 2 != 0 {
            return Err(invalid("glu", format!("last axis {n2} is odd")));
        }
        let h = n2 / 2;
        let mut out = Vec::with_capacity(v.len() / 2);
        for row in v.data().chunks_exact(n2) {
            let (a, b) = row.split_at(h);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        self.push("glu", Tensor::from_parts(shape, out), Op::Glu(x), &[x])
    }

    /// Channel-last 2-D convolution: `x (B, T, F, Cin)`, `w (kt, kf, Cin, Cout)`,
    /// zero same-padding, cross-correlation convention.
    pub fn conv2d_cl(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] {
            return Err(mismatch("conv2d", xs, ws));
        }
        let (kt, kf, ci, co) = (ws[0], ws[1], ws[2], ws[3]);
        if kt % 2 == 0 || kf % 2 == 0 {
            return Err(invalid(
                "conv2d",
                format!("kernel extents must be odd, got {kt}x{kf}"),
            ));
        }
        let (nb, nt, nf) = (xs[0], xs[1], xs[2]);
        let mut out = vec![T::zero(); nb * nt * nf * co];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [co] {
                return Err(mismatch("conv2d bias", vb.shape(), &[co]));
            }
            for row in out.chunks_exact_mut(co) {
                row.copy_from_slice(vb.data());
            }
        }
        let (xd, wd) = (vx.data(), vw.data());
        let (pt, pf) = (kt / 2, kf / 2);
        for bi in 0..nb {
            for t in 0..nt {
                for f in 0..nf {
                    let o = ((bi * nt + t) * nf + f) * co;
                    let orow = &mut out[o..o + co];
                    for dt in 0..kt {
                        let Some(tt) = (t + dt).checked_sub(pt).filter(|&v| v < nt) else {
                            continue;
                        };
                        for df in 0..kf {
                            let Some(ff) = (f + df).checked_sub(pf).filter(|&v| v < nf) else {
                                continue;
                            };
                            let xo = ((bi * nt + tt) * nf + ff) * ci;
                            let wo = (dt * kf + df) * ci * co;
                            for c in 0..ci {
                                let xv = xd[xo + c];
                                if xv != T::zero() {
                                    kernels::axpy(orow, xv, &wd[wo + c * co..wo + (c + 1) * co]);
                                }
                            }
                        }
                    }
                }
            }
        }
        self.add_macs(nb * nt * nf * kt * kf * ci * co);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![nb, nt, nf, co], out),
            Op::Conv2d { x, w, b },
            &parents,
        )
    }

    /// 2-D convolution in channel-first form: `x (Cin, T, F)`, `w (Cout, Cin, kt, kf)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(invalid(
                "conv2d",
                format!("expected (Cin, T, F), got {xs:?}"),
            ));
        }
        let xcl = self.permute(x, &[1, 2, 0])?;
        let xcl = self.reshape(xcl, &[1, xs[1], xs[2], xs[0]])?;
        let wcl = self.permute(w, &[2, 3, 1, 0])?;
        let y = self.conv2d_cl(xcl, wcl, b)?;
        let co = self.shape(y)[3];
        let y = self.reshape(y, &[xs[1], xs[2], co])?;
        self.permute(y, &[2, 0, 1])
    }

    /// Depthwise 1-D convolution along the sequence axis of `x (N, L, C)` with
    /// `w (C, k)`, odd `k`, zero same-padding.
    pub fn dconv_seq(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape().to_vec(), vw.shape().to_vec());
        if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[0] {
            return Err(mismatch("conv1d_depthwise", &xs, &ws));
        }
        let (n, l, c) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        if k % 2 == 0 {
            return Err(invalid(
                "conv1d_depthwise",
                format!("kernel size must be odd, got {k}"),
            ));
        }
        let wt = transpose2(vw.data(), c, k);
        let mut out = vec![T::zero(); vx.len()];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [c] {
                return Err(mismatch("conv1d_depthwise bias", vb.shape(), &[c]));
            }
            for row in out.chunks_exact_mut(c) {
                row.copy_from_slice(vb.data());
            }
        }
        let h = k / 2;
        let xd = vx.data();
        for ni in 0..n {
            for li in 0..l {
                let o = (ni * l + li) * c;
                for j in 0..k {
                    let Some(src) = (li + j).checked_sub(h).filter(|&v| v < l) else {
                        continue;
                    };
                    let xo = (ni * l + src) * c;
                    let wrow = &wt[j * c..(j + 1) * c];
                    for ch in 0..c {
                        out[o + ch] += xd[xo + ch] * wrow[ch];
                    }
                }
            }
        }
        self.add_macs(n * l * c * k);
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            "conv1d_depthwise",
            Tensor::from_parts(xs.to_vec(), out),
            Op::DepthwiseConv { x, w, b },
            &parents,
        )
    }

    /// Depthwise 1-D convolution in channel-first form: `x (C, L)`, `w (C, k)`.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(invalid(
                "conv1d_depthwise",
                format!("expected (C, L), got {xs:?}"),
            ));
        }
        let xt = self.permute(x, &[1, 0])?;
        let xt = self.reshape(xt, &[1, xs[1], xs[0]])?;
        let y = self.dconv_seq(xt, w, None)?;
        let y = self.reshape(y, &[xs[1], xs[0]])?;
        self.permute(y, &[1, 0])
    }

    /// Mean over non-overlapping windows of `factor` along `axis`; the axis is
    /// edge-replicated up to a multiple of `factor` first.
    pub fn pool_avg(&mut self, x: Var, factor: usize, axis: usize) -> Result<Var> {
        if factor < 1 {
            return Err(invalid("pool_avg", "factor must be >= 1"));
        }
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid("pool_avg", format!("axis {axis} out of range")));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let olen = len.div_ceil(factor);
        let mut out = vec![T::zero(); outer * olen * inner];
        let inv = T::of(1.0 / factor as f64);
        let d = v.data();
        for o in 0..outer {
            for i in 0..olen {
                let dst = &mut out[(o * olen + i) * inner..(o * olen + i + 1) * inner];
                for j in 0..factor {
                    let src = (i * factor + j).min(len - 1);
                    let s = &d[(o * len + src) * inner..(o * len + src + 1) * inner];
                    for (a, &b) in dst.iter_mut().zip(s) {
                        *a += b;
                    }
                }
                for a in dst.iter_mut() {
                    *a *= inv;
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = olen;
        self.push(
            "pool_avg",
            Tensor::from_parts(oshape, out),
            Op::Pool { x, factor, axis },
            &[x],
        )
    }

    /// Repeat each element `factor` times along `axis`, then truncate to `out_len`.
    pub fn upsample_repeat(
        &mut self,
        x: Var,
        factor: usize,
        axis: usize,
        out_len: usize,
    ) -> Result<Var> {
        if factor < 1 {
            return Err(invalid("upsample_repeat", "factor must be >= 1"));
        }
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() {
            return Err(invalid(
                "upsample_repeat",
                format!("axis {axis} out of range"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if out_len > len * factor || out_len + factor <= len * factor {
            return Err(invalid(
                "upsample_repeat",
                format!("output length {out_len} incompatible with {len} x {factor}"),
            ));
        }
        if factor == 1 {
            return Ok(x);
        }
        let d = v.data();
        let mut out = Vec::with_capacity(outer * out_len * inner);
        for o in 0..outer {
            for i in 0..out_len {
                let src = i / factor;
                out.extend_from_slice(&d[(o * len + src) * inner..(o * len + src + 1) * inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = out_len;
        self.push(
            "upsample_repeat",
            Tensor::from_parts(oshape, out),
            Op::Upsample { x, factor, axis },
            &[x],
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        {
            return Err(invalid(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(x);
        }
        let (shape, data) = kernels::permute(v.data(), v.shape(), axes);
        self.push(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(mismatch("reshape", v.shape(), shape));
        }
        if v.shape() == shape {
            return Ok(x);
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let data = slice_forward(v.data(), &shape, axis, start, len);
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(
            "slice",
            Tensor::from_parts(oshape, data),
            Op::Slice { x, axis, start },
            &[x],
        )
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for x in xs {
            let s = self.shape(*x);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let v = self.value(*x);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    /// Per-bin complex matrix-vector product `y = W x̃`.
    ///
    /// `w (K, T, F, 2, Mo, J)` holds real/imag planes on axis 3;
    /// `x (T, F, 2, J)` is the tap-stacked mixture. Output `(K, T, F, 2, Mo)`.
    /// Gradients flow to `w` only.
    pub fn complex_filter(&mut self, w: Var, x: &Tensor<T>) -> Result<Var> {
        let vw = self.value(w);
        let (ws, xs) = (vw.shape(), x.shape());
        if ws.len() != 6
            || xs.len() != 4
            || ws[1..3] != xs[..2]
            || ws[3] != 2
            || xs[2] != 2
            || ws[5] != xs[3]
        {
            return Err(mismatch("complex_filter", ws, xs));
        }
        let (k, nt, nf, mo, j) = (ws[0], ws[1], ws[2], ws[4], ws[5]);
        let out = complex_filter_forward(vw.data(), x.data(), k, nt * nf, mo, j);
        self.add_macs(4 * k * nt * nf * mo * j);
        self.push(
            "complex_filter",
            Tensor::from_parts(vec![k, nt, nf, 2, mo], out),
            Op::ComplexFilter { w, x: x.clone() },
            &[w],
        )
    }

    /// Inverse STFT of `x (B, 2, T, F)` to waveforms `(B, n_samples)`.
    pub fn istft(&mut self, x: Var, cfg: StftConfig, n_samples: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 || s[1] != 2 || s[3] != cfg.bins() {
            return Err(invalid(
                "istft",
                format!("expected (B, 2, T, {}), got {s:?}", cfg.bins()),
            ));
        }
        let (b, nt, nf) = (s[0], s[2], s[3]);
        if nt != cfg.frames(n_samples) {
            return Err(invalid(
                "istft",
                format!("{nt} frames inconsistent with {n_samples} samples"),
            ));
        }
        let plane = nt * nf;
        let mut out = Vec::with_capacity(b * n_samples);
        for bi in 0..b {
            let re = &v.data()[(2 * bi) * plane..(2 * bi + 1) * plane];
            let im = &v.data()[(2 * bi + 1) * plane..(2 * bi + 2) * plane];
            out.extend(stft::istft_plane(re, im, nt, &cfg, n_samples));
        }
        self.push(
            "istft",
            Tensor::from_parts(vec![b, n_samples], out),
            Op::Istft { x, cfg },
            &[x],
        )
    }
}

pub(crate) fn transpose2<T: Real>(d: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

pub(crate) fn complex_filter_forward<T: Real>(
    w: &[T],
    x: &[T],
    k: usize,
    bins: usize,
    mo: usize,
    j: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); k * bins * 2 * mo];
    for ki in 0..k {
        for b in 0..bins {
            let xr = &x[b * 2 * j..b * 2 * j + j];
            let xi = &x[b * 2 * j + j..(b + 1) * 2 * j];
            let wbase = (ki * bins + b) * 2 * mo * j;
            let obase = (ki * bins + b) * 2 * mo;
            for o in 0..mo {
                let wr = &w[wbase + o * j..wbase + (o + 1) * j];
                let wi = &w[wbase + (mo + o) * j..wbase + (mo + o + 1) * j];
                out[obase + o] = kernels::dot(wr, xr) - kernels::dot(wi, xi);
                out[obase + mo + o] = kernels::dot(wr, xi) + kernels::dot(wi, xr);
            }
        }
    }
    out
}

pub(super) fn complex_filter_backward<T: Real>(wshape: &[usize], x: &Tensor<T>, g: &[T]) -> Vec<T> {
    let (k, bins, mo, j) = (wshape[0], wshape[1] * wshape[2], wshape[4], wshape[5]);
    let xd = x.data();
    let mut gw = vec![T::zero(); wshape.iter().product()];
    for ki in 0..k {
        for b in 0..bins {
            let xr = &xd[b * 2 * j..b * 2 * j + j];
            let xi = &xd[b * 2 * j + j..(b + 1) * 2 * j];
            let wbase = (ki * bins + b) * 2 * mo * j;
            let gbase = (ki * bins + b) * 2 * mo;
            for o in 0..mo {
                let (gr, gi) = (g[gbase + o], g[gbase + mo + o]);
                for jj in 0..j {
                    gw[wbase + o * j + jj] = gr * xr[jj] + gi * xi[jj];
                    gw[wbase + (mo + o) * j + jj] = gi * xr[jj] - gr * xi[jj];
                }
            }
        }
    }
    gw
}

pub(super) fn unary_backward<T: Real>(kind: Unary, x: &[T], y: &[T], g: &[T]) -> Vec<T> {
    let it = x.iter().zip(y).zip(g);
    match kind {
        Unary::Neg => g.iter().map(|&v| -v).collect(),
        Unary::Sigmoid => it.map(|((_, &y), &g)| g * y * (T::one() - y)).collect(),
        Unary::Tanh => it.map(|((_, &y), &g)| g * (T::one() - y * y)).collect(),
        Unary::Relu => it
            .map(|((&x, _), &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        Unary::Exp => it.map(|((_, &y), &g)| g * y).collect(),
        Unary::Sqrt => it.map(|((_, &y), &g)| g / (y + y)).collect(),
        Unary::Square => it.map(|((&x, _), &g)| g * (x + x)).collect(),
        Unary::Abs => it
            .map(|((&x, _), &g)| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
            .collect(),
    }
}

pub(super) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let (sa, sb) = (a.shape(), b.shape());
    let rank = sa.len();
    let (p, q, r) = (sa[rank - 2], sa[rank - 1], sb[rank - 1]);
    let batch = &g.shape()[..rank - 2];
    let st_a = kernels::broadcast_strides(&sa[..rank - 2], batch);
    let st_b = kernels::broadcast_strides(&sb[..rank - 2], batch);
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    kernels::for_each_broadcast(batch, &st_a, &st_b, |o, ia, ib| {
        let go = &gd[o * p * r..(o + 1) * p * r];
        kernels::gemm_nt(
            go,
            &bd[ib * q * r..(ib + 1) * q * r],
            &mut ga[ia * p * q..(ia + 1) * p * q],
            p,
            q,
            r,
        );
        kernels::gemm_tn(
            &ad[ia * p * q..(ia + 1) * p * q],
            go,
            &mut gb[ib * q * r..(ib + 1) * q * r],
            p,
            q,
            r,
        );
    });
    (ga, gb)
}

pub(super) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din.max(1);
    let gd = g.data();
    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); x.len()];
        kernels::gemm_nt(gd, w.data(), &mut gx, rows, din, dout);
        gx
    });
    let mut gw = vec![T::zero(); w.len()];
    kernels::gemm_tn(x.data(), gd, &mut gw, rows, din, dout);
    let mut gb = vec![T::zero(); dout];
    for row in gd.chunks_exact(dout) {
        for (a, &b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    (gx, gw, gb)
}

pub(super) fn softmax_backward<T: Real>(y: &[T], g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), or) in y
        .chunks_exact(n)
        .zip(g.chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
    {
        let s = kernels::dot(yr, gr);
        for i in 0..n {
            or[i] = yr[i] * (gr[i] - s);
        }
    }
    out
}

pub(super) fn layernorm_backward<T: Real>(
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = gamma.len();
    let inv_n = T::of(1.0 / n as f64);
    let mut gx = vec![T::zero(); xhat.len()];
    let mut gg = vec![T::zero(); n];
    let mut gb = vec![T::zero(); n];
    let mut dxh = vec![T::zero(); n];
    for (gi, &rs) in rstd.iter().enumerate() {
        let xh = &xhat[gi * n..(gi + 1) * n];
        let go = &g[gi * n..(gi + 1) * n];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..n {
            gg[j] += go[j] * xh[j];
            gb[j] += go[j];
            dxh[j] = go[j] * gamma[j];
            m1 += dxh[j];
            m2 += dxh[j] * xh[j];
        }
        m1 *= inv_n;
        m2 *= inv_n;
        for j in 0..n {
            gx[gi * n + j] = rs * (dxh[j] - m1 - xh[j] * m2);
        }
    }
    (gx, gg, gb)
}

pub(super) fn glu_backward<T: Real>(x: &Tensor<T>, g: &[T]) -> Vec<T> {
    let n2 = *x.shape().last().unwrap();
    let h = n2 / 2;
    let mut gx = vec![T::zero(); x.len()];
    for ((row, go), gxr) in x
        .data()
        .chunks_exact(n2)
        .zip(g.chunks_exact(h))
        .zip(gx.chunks_exact_mut(n2))
    {
        for i in 0..h {
            let (a, b) = (row[i], row[h + i]);
            let s = sigmoid(b);
            gxr[i] = go[i] * s;
            gxr[h + i] = go[i] * a * s * (T::one() - s);
        }
    }
    gx
}

pub(super) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (kt, kf, ci, co) = (ws[0], ws[1], ws[2], ws[3]);
    let (nb, nt, nf) = (xs[0], xs[1], xs[2]);
    let (pt, pf) = (kt / 2, kf / 2);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = if need_x {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); co];
    for bi in 0..nb {
        for t in 0..nt {
            for f in 0..nf {
                let o = ((bi * nt + t) * nf + f) * co;
                let grow = &gd[o..o + co];
                for (a, &b) in gb.iter_mut().zip(grow) {
                    *a += b;
                }
                for dt in 0..kt {
                    let Some(tt) = (t + dt).checked_sub(pt).filter(|&v| v < nt) else {
                        continue;
                    };
                    for df in 0..kf {
                        let Some(ff) = (f + df).checked_sub(pf).filter(|&v| v < nf) else {
                            continue;
                        };
                        let xo = ((bi * nt + tt) * nf + ff) * ci;
                        let wo = (dt * kf + df) * ci * co;
                        for c in 0..ci {
                            let wrow = wo + c * co..wo + (c + 1) * co;
                            if need_x {
                                gx[xo + c] += kernels::dot(grow, &wd[wrow.clone()]);
                            }
                            let xv = xd[xo + c];
                            if xv != T::zero() {
                                kernels::axpy(&mut gw[wrow], xv, grow);
                            }
                        }
                    }
                }
            }
        }
    }
    (need_x.then_some(gx), gw, gb)
}

pub(super) fn dconv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let xs = x.shape();
    let (n, l, c) = (xs[0], xs[1], xs[2]);
    let k = w.shape()[1];
    let h = k / 2;
    let wt = transpose2(w.data(), c, k);
    let (xd, gd) = (x.data(), g.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gwt = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); c];
    for ni in 0..n {
        for li in 0..l {
            let o = (ni * l + li) * c;
            let grow = &gd[o..o + c];
            for (a, &b) in gb.iter_mut().zip(grow) {
                *a += b;
            }
            for j in 0..k {
                let Some(src) = (li + j).checked_sub(h).filter(|&v| v < l) else {
                    continue;
                };
                let xo = (ni * l + src) * c;
                for ch in 0..c {
                    gx[xo + ch] += grow[ch] * wt[j * c + ch];
                    gwt[j * c + ch] += grow[ch] * xd[xo + ch];
                }
            }
        }
    }
    (gx, transpose2(&gwt, k, c), gb)
}

pub(super) fn pool_backward<T: Real>(
    shape: &[usize],
    factor: usize,
    axis: usize,
    g: &Tensor<T>,
) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let olen = g.shape()[axis];
    let inv = T::of(1.0 / factor as f64);
    let gd = g.data();
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for i in 0..olen {
            let src = &gd[(o * olen + i) * inner..(o * olen + i + 1) * inner];
            for j in 0..factor {
                let dst = (i * factor + j).min(len - 1);
                for (a, &b) in gx[(o * len + dst) * inner..(o * len + dst + 1) * inner]
                    .iter_mut()
                    .zip(src)
                {
                    *a += b * inv;
                }
            }
        }
    }
    gx
}

pub(super) fn upsample_backward<T: Real>(
    shape: &[usize],
    factor: usize,
    axis: usize,
    g: &Tensor<T>,
) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let olen = g.shape()[axis];
    let gd = g.data();
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for i in 0..olen {
            let dst = i / factor;
            let src = &gd[(o * olen + i) * inner..(o * olen + i + 1) * inner];
            for (a, &b) in gx[(o * len + dst) * inner..(o * len + dst + 1) * inner]
                .iter_mut()
                .zip(src)
            {
                *a += b;
            }
        }
    }
    gx
}

pub(super) fn slice_forward<T: Real>(
    d: &[T],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let (outer, full, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
    }
    out
}

pub(super) fn slice_backward<T: Real>(
    shape: &[usize],
    axis: usize,
    start: usize,
    g: &Tensor<T>,
) -> Vec<T> {
    let (outer, full, inner) = split_axis(shape, axis);
    let len = g.shape()[axis];
    let mut gx = vec![T::zero(); outer * full * inner];
    let gd = g.data();
    for o in 0..outer {
        gx[(o * full + start) * inner..(o * full + start + len) * inner]
            .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
    }
    gx
}

pub(super) fn istft_backward<T: Real>(xshape: &[usize], cfg: &StftConfig, g: &Tensor<T>) -> Vec<T> {
    let (b, nt, nf) = (xshape[0], xshape[2], xshape[3]);
    let n = g.shape()[1];
    let mut gx = Vec::with_capacity(b * 2 * nt * nf);
    for bi in 0..b {
        let (re, im) = stft::istft_plane_adjoint(&g.data()[bi * n..(bi + 1) * n], nt, cfg);
        gx.extend(re);
        gx.extend(im);
    }
    gx
}
