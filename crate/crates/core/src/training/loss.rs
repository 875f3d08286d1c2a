//! L1 losses over spectrograms and waveforms with permutation-invariant
//! source assignment.
//!
//! Estimates and targets share the layouts produced by the model: spectra
//! `(K, T, F, 2, M_out)` and waveforms `(K, M_out, N)`.

use crate::error::{invalid, mismatch, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Added under the square root of spectral magnitudes.
pub const MAG_EPS: f64 = 1e-8;

/// Scalar loss values of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l_tf: f64,
    pub l_wav: f64,
    pub l_mc: f64,
    /// `permutation[i]` is the target assigned to output `i`.
    pub permutation: Vec<usize>,
}

fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d)?;
    g.mean_all(d)
}

fn magnitude<T: Real>(g: &mut Graph<T>, re: Var, im: Var) -> Result<Var> {
    let r2 = g.square(re)?;
    let i2 = g.square(im)?;
    let s = g.add(r2, i2)?;
    let s = g.add_scalar(s, MAG_EPS)?;
    g.sqrt(s)
}

/// Spectral L1 loss for one source: `mean|‖Y‖−‖S‖| + mean|Re Y−Re S| + mean|Im Y−Im S|`.
///
/// `y` and `s` are shaped `(.., 2, M_out)` with real/imaginary on the second-last axis.
pub fn loss_tf<T: Real>(g: &mut Graph<T>, y: Var, s: Var) -> Result<Var> {
    let (ys, ss) = (g.shape(y).to_vec(), g.shape(s).to_vec());
    if ys != ss || ys.len() < 2 || ys[ys.len() - 2] != 2 {
        return Err(mismatch("loss_tf", &ys, &ss));
    }
    let ax = ys.len() - 2;
    let (yr, yi) = (g.slice(y, ax, 0, 1)?, g.slice(y, ax, 1, 1)?);
    let (sr, si) = (g.slice(s, ax, 0, 1)?, g.slice(s, ax, 1, 1)?);
    let ym = magnitude(g, yr, yi)?;
    let sm = magnitude(g, sr, si)?;
    let lm = mean_abs_diff(g, ym, sm)?;
    let lr = mean_abs_diff(g, yr, sr)?;
    let li = mean_abs_diff(g, yi, si)?;
    let l = g.add(lm, lr)?;
    g.add(l, li)
}

/// Time-domain L1 loss, `mean|y − s|`.
pub fn loss_wav<T: Real>(g: &mut Graph<T>, y: Var, s: Var) -> Result<Var> {
    if g.shape(y) != g.shape(s) {
        return Err(mismatch("loss_wav", g.shape(y), g.shape(s)));
    }
    mean_abs_diff(g, y, s)
}

/// Mixture-constraint loss `mean|Σ_k y_k − Σ_k s_k|` for waveforms `(K, M_out, N)`.
///
/// The target sum is formed per sample from the sorted addends, so it does
/// not depend on the order of the targets.
pub fn loss_mc<T: Real>(g: &mut Graph<T>, y: Var, s: &Tensor<T>) -> Result<Var> {
    let ys = g.shape(y).to_vec();
    if ys != s.shape() || ys.is_empty() {
        return Err(mismatch("loss_mc", &ys, s.shape()));
    }
    let k = ys[0];
    let rest: Vec<usize> = ys[1..].to_vec();
    let n: usize = rest.iter().product();
    let mut sum = Vec::with_capacity(n);
    let mut vals = vec![T::zero(); k];
    for i in 0..n {
        for (j, v) in vals.iter_mut().enumerate() {
            *v = s.data()[j * n + i];
        }
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite targets"));
        sum.push(vals.iter().fold(T::zero(), |a, &b| a + b));
    }
    let mut ysum = None;
    for j in 0..k {
        let part = g.slice(y, 0, j, 1)?;
        ysum = Some(match ysum {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    let mut shape = vec![1];
    shape.extend(rest);
    let target = g.constant(Tensor::new(&shape, sum)?);
    mean_abs_diff(g, ysum.expect("k >= 1"), target)
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(k), &mut vec![false; k], &mut out);
    out
}

/// Minimum-cost assignment over a pairwise matrix `cost[output][target]`;
/// ties resolve to the lexicographically first permutation.
pub fn best_permutation(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::INFINITY);
    for p in permutations(cost.len()) {
        let total = p
            .iter()
            .enumerate()
            .fold(0.0, |acc, (i, &j)| acc + cost[i][j]);
        if total < best.1 {
            best = (p, total);
        }
    }
    best
}

pub const MAX_PIT_SOURCES: usize = 4;

/// Permutation-invariant `L_TF + L_wav + L_MC`.
///
/// Every output/target pair is scored; the loss node sums only the pairs of
/// the best permutation, so gradients follow that assignment alone.
pub fn pit_loss<T: Real>(
    g: &mut Graph<T>,
    y_spec: Var,
    y_wav: Var,
    s_spec: &Tensor<T>,
    s_wav: &Tensor<T>,
) -> Result<(Var, LossReport)> {
    let k = g.shape(y_spec)[0];
    if s_spec.shape()[0] != k || s_wav.shape()[0] != k || g.shape(y_wav)[0] != k {
        return Err(invalid(
            "pit_loss",
            "source counts of estimates and targets differ",
        ));
    }
    if k > MAX_PIT_SOURCES {
        return Err(invalid(
            "pit_loss",
            format!("{k} sources exceed the exhaustive limit"),
        ));
    }
    let ts = g.constant(s_spec.clone());
    let tw = g.constant(s_wav.clone());
    let mut tf = vec![Vec::with_capacity(k); k];
    let mut wav = vec![Vec::with_capacity(k); k];
    for i in 0..k {
        let ys = g.slice(y_spec, 0, i, 1)?;
        let yw = g.slice(y_wav, 0, i, 1)?;
        for j in 0..k {
            let ss = g.slice(ts, 0, j, 1)?;
            let sw = g.slice(tw, 0, j, 1)?;
            tf[i].push(loss_tf(g, ys, ss)?);
            wav[i].push(loss_wav(g, yw, sw)?);
        }
    }
    let value = |g: &Graph<T>, v: Var| g.value(v).item().to_f64c();
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| value(g, tf[i][j]) + value(g, wav[i][j]))
                .collect()
        })
        .collect();
    let (perm, _) = best_permutation(&cost);
    let mc = loss_mc(g, y_wav, s_wav)?;
    let mut total = mc;
    let (mut l_tf, mut l_wav) = (0.0, 0.0);
    for (i, &j) in perm.iter().enumerate() {
        total = g.add(total, tf[i][j])?;
        total = g.add(total, wav[i][j])?;
        l_tf += value(g, tf[i][j]);
        l_wav += value(g, wav[i][j]);
    }
    let l_mc = value(g, mc);
    let report = LossReport {
        total: l_tf + l_wav + l_mc,
        l_tf,
        l_wav,
        l_mc,
        permutation: perm,
    };
    Ok((total, report))
}

/// Waveforms `(K, M_out, N)` from spectral estimates `(K, T, F, 2, M_out)`.
pub fn estimates_to_waveforms<T: Real>(
    g: &mut Graph<T>,
    y: Var,
    cfg: crate::stft::StftConfig,
    n_samples: usize,
) -> Result<Var> {
    let s = g.shape(y).to_vec();
    if s.len() != 5 || s[3] != 2 {
        return Err(invalid(
            "estimates_to_waveforms",
            format!("unexpected shape {s:?}"),
        ));
    }
    let (k, nt, nf, mo) = (s[0], s[1], s[2], s[4]);
    let p = g.permute(y, &[0, 4, 3, 1, 2])?;
    let p = g.reshape(p, &[k * mo, 2, nt, nf])?;
    let w = g.istft(p, cfg, n_samples)?;
    g.reshape(w, &[k, mo, n_samples])
}
