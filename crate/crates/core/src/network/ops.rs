//! Reverse-mode tape over the handful of operations the U-Net needs.
//!
//! Activations are `[N, C, H, W]`; per-frame ops treat `N` as batch x time.
//! Weight gradients are accumulated frame by frame in index order, so a
//! backward pass is bit-reproducible.

use std::collections::BTreeMap;

use super::tensor::{gemm, Scalar, Tensor};
use super::Padding;

pub(crate) type Var = usize;

pub(crate) const NORM_EPS: f64 = 1e-5;

enum Op<S> {
    Input,
    Conv {
        x: Var,
        w: usize,
        b: usize,
        k: usize,
        pad: Padding,
    },
    Temporal {
        x: Var,
        w: usize,
        b: usize,
        frames_in: usize,
    },
    Norm {
        x: Var,
        gamma: usize,
        beta: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        per_instance: bool,
    },
    FrozenNorm {
        x: Var,
        gamma: usize,
        beta: usize,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample {
        x: Var,
        periodic: bool,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Center {
        x: Var,
        frames: usize,
    },
}

/// Batch statistics observed by a training-mode batch norm.
pub(crate) struct BatchStats<S> {
    pub gamma: usize,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub(crate) struct Tape<'p, S: Scalar> {
    params: &'p [Tensor<S>],
    values: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    pub(crate) names: BTreeMap<String, Var>,
    pub(crate) batch_stats: Vec<BatchStats<S>>,
}

fn dims(t: &[usize]) -> (usize, usize, usize, usize) {
    (t[0], t[1], t[2], t[3])
}

/// Source index for a 3x3 tap offset `d` in `-1..=1`, or `None` for zero padding.
fn tap(i: usize, d: isize, n: usize, pad: Padding) -> Option<usize> {
    let j = i as isize + d;
    if (0..n as isize).contains(&j) {
        Some(j as usize)
    } else if pad == Padding::Periodic {
        Some(j.rem_euclid(n as isize) as usize)
    } else {
        None
    }
}

fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, pad: Padding, cols: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dx = kx as isize - 1;
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let Some(sy) = tap(y, ky as isize - 1, h, pad) else {
                        dst.fill(S::zero());
                        continue;
                    };
                    let src = &plane[sy * w..(sy + 1) * w];
                    match dx {
                        -1 => {
                            dst[1..].copy_from_slice(&src[..w - 1]);
                            dst[0] = tap(0, -1, w, pad).map_or(S::zero(), |i| src[i]);
                        }
                        0 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = tap(w - 1, 1, w, pad).map_or(S::zero(), |i| src[i]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], c: usize, h: usize, w: usize, pad: Padding, dx: &mut [S]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let Some(sy) = tap(y, ky as isize - 1, h, pad) else {
                        continue;
                    };
                    let g = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] = dst[x - 1] + g[x];
                            }
                            if let Some(i) = tap(0, -1, w, pad) {
                                dst[i] = dst[i] + g[0];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] = dst[x] + g[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] = dst[x + 1] + g[x];
                            }
                            if let Some(i) = tap(w - 1, 1, w, pad) {
                                dst[i] = dst[i] + g[w - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Source rows and weights of a 2x bilinear upsample (half-pixel centers).
fn upsample_taps(n: usize, periodic: bool) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let (lo, hi) = if o % 2 == 0 { (i as isize - 1, i as isize) } else { (i as isize, i as isize + 1) };
            let (wlo, whi) = if o % 2 == 0 { (0.25, 0.75) } else { (0.75, 0.25) };
            let fix = |j: isize| {
                if periodic {
                    j.rem_euclid(n as isize) as usize
                } else {
                    j.clamp(0, n as isize - 1) as usize
                }
            };
            (fix(lo), fix(hi), wlo, whi)
        })
        .collect()
}

fn sum_rows<S: Scalar>(rows: &[S], hw: usize, out: &mut [S]) {
    for (o, r) in out.iter_mut().zip(rows.chunks(hw)) {
        *o = *o + r.iter().copied().sum::<S>();
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub(crate) fn new(params: &'p [Tensor<S>]) -> Self {
        Tape {
            params,
            values: Vec::new(),
            ops: Vec::new(),
            names: BTreeMap::new(),
            batch_stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor<S> {
        &self.values[v]
    }

    pub(crate) fn into_value(mut self, v: Var) -> Tensor<S> {
        std::mem::replace(&mut self.values[v], Tensor::zeros(&[0]))
    }

    pub(crate) fn name(&mut self, v: Var, name: impl Into<String>) {
        self.names.insert(name.into(), v);
    }

    pub(crate) fn input(&mut self, x: Tensor<S>) -> Var {
        self.push(x, Op::Input)
    }

    /// Same-size convolution with a `k x k` kernel, `k` in {1, 3}.
    pub(crate) fn conv(&mut self, x: Var, w: usize, b: usize, k: usize, pad: Padding) -> Var {
        let (n, c, h, wd) = dims(self.values[x].shape());
        let weight = &self.params[w];
        let cout = weight.shape()[0];
        let kk = c * k * k;
        assert_eq!(weight.len(), cout * kk, "conv weight shape");
        let hw = h * wd;
        let mut out = Tensor::zeros(&[n, cout, h, wd]);
        let mut cols = if k == 3 { vec![S::zero(); kk * hw] } else { Vec::new() };
        let bias = self.params[b].data();
        for i in 0..n {
            let xi = self.values[x].slab(i);
            let oi = out.slab_mut(i);
            for (o, &bv) in bias.iter().enumerate() {
                oi[o * hw..(o + 1) * hw].fill(bv);
            }
            let src: &[S] = if k == 3 {
                im2col(xi, c, h, wd, pad, &mut cols);
                &cols
            } else {
                xi
            };
            gemm(cout, kk, hw, (weight.data(), kk, 1), (src, hw, 1), S::one(), oi, hw, 1);
        }
        self.push(out, Op::Conv { x, w, b, k, pad })
    }

    /// Valid kernel-3 temporal convolution over `frames_in` frames per sample.
    pub(crate) fn temporal(&mut self, x: Var, w: usize, b: usize, frames_in: usize) -> Var {
        let (nt, c, h, wd) = dims(self.values[x].shape());
        assert!(frames_in >= 3 && nt % frames_in == 0, "temporal conv needs >= 3 frames");
        let batch = nt / frames_in;
        let frames_out = frames_in - 2;
        let weight = &self.params[w];
        let cout = weight.shape()[0];
        let hw = h * wd;
        let mut out = Tensor::zeros(&[batch * frames_out, cout, h, wd]);
        let bias = self.params[b].data();
        for bi in 0..batch {
            for t in 0..frames_out {
                let oi = out.slab_mut(bi * frames_out + t);
                for (o, &bv) in bias.iter().enumerate() {
                    oi[o * hw..(o + 1) * hw].fill(bv);
                }
                for k in 0..3 {
                    let xi = self.values[x].slab(bi * frames_in + t + k);
                    gemm(cout, c, hw, (&weight.data()[k..], c * 3, 3), (xi, hw, 1), S::one(), oi, hw, 1);
                }
            }
        }
        self.push(out, Op::Temporal { x, w, b, frames_in })
    }

    /// Training-mode normalization with affine parameters. Instance norm
    /// normalizes each `(n, c)` plane; batch norm pools all `n` per channel.
    pub(crate) fn norm(&mut self, x: Var, gamma: usize, beta: usize, per_instance: bool) -> Var {
        let (n, c, h, wd) = dims(self.values[x].shape());
        let hw = h * wd;
        let xs = self.values[x].data();
        let groups = if per_instance { n * c } else { c };
        let mut mean = vec![0.0f64; groups];
        let mut var = vec![0.0f64; groups];
        let group_of = |i: usize, ch: usize| if per_instance { i * c + ch } else { ch };
        let count = if per_instance { hw } else { n * hw } as f64;
        for i in 0..n {
            for ch in 0..c {
                let g = group_of(i, ch);
                mean[g] += xs[(i * c + ch) * hw..][..hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            for ch in 0..c {
                let g = group_of(i, ch);
                let m = mean[g];
                var[g] += xs[(i * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v.to_f64_lossy() - m).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<S> = var.iter().map(|v| S::from_f64_lossy(1.0 / (v + NORM_EPS).sqrt())).collect();
        let gm = self.params[gamma].data();
        let bt = self.params[beta].data();
        let mut xhat = vec![S::zero(); xs.len()];
        let mut out = Tensor::zeros(&[n, c, h, wd]);
        let od = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let g = group_of(i, ch);
                let m = S::from_f64_lossy(mean[g]);
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for j in range {
                    let xh = (xs[j] - m) * inv_std[g];
                    xhat[j] = xh;
                    od[j] = gm[ch] * xh + bt[ch];
                }
            }
        }
        if !per_instance {
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            self.batch_stats.push(BatchStats {
                gamma,
                mean: mean.iter().map(|&m| S::from_f64_lossy(m)).collect(),
                var: var.iter().map(|&v| S::from_f64_lossy(v * unbiased)).collect(),
            });
        }
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                per_instance,
            },
        )
    }

    /// Batch norm with fixed running statistics.
    pub(crate) fn frozen_norm(&mut self, x: Var, gamma: usize, beta: usize, mean: &[S], var: &[S]) -> Var {
        let (n, c, h, wd) = dims(self.values[x].shape());
        let hw = h * wd;
        let inv_std: Vec<S> = var
            .iter()
            .map(|v| S::from_f64_lossy(1.0 / (v.to_f64_lossy() + NORM_EPS).sqrt()))
            .collect();
        let gm = self.params[gamma].data();
        let bt = self.params[beta].data();
        let xs = self.values[x].data();
        let mut out = Tensor::zeros(&[n, c, h, wd]);
        for (j, o) in out.data_mut().iter_mut().enumerate() {
            let ch = (j / hw) % c;
            *o = gm[ch] * (xs[j] - mean[ch]) * inv_std[ch] + bt[ch];
        }
        self.push(
            out,
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        )
    }

    pub(crate) fn relu(&mut self, x: Var) -> Var {
        let mut out = self.values[x].clone();
        for v in out.data_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        self.push(out, Op::Relu { x })
    }

    pub(crate) fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.values[a].clone();
        out.add_assign(&self.values[b]);
        self.push(out, Op::Add { a, b })
    }

    pub(crate) fn maxpool(&mut self, x: Var) -> Var {
        let (n, c, h, wd) = dims(self.values[x].shape());
        let (oh, ow) = (h / 2, wd / 2);
        let xs = self.values[x].data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let od = out.data_mut();
        for p in 0..n * c {
            let plane = &xs[p * h * wd..(p + 1) * h * wd];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * wd + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * wd + 2 * xx + dx;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    let o = p * oh * ow + y * ow + xx;
                    od[o] = plane[best];
                    argmax[o] = best as u32;
                }
            }
        }
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub(crate) fn upsample(&mut self, x: Var, periodic: bool) -> Var {
        let (n, c, h, wd) = dims(self.values[x].shape());
        let ty = upsample_taps(h, periodic);
        let tx = upsample_taps(wd, periodic);
        let (oh, ow) = (2 * h, 2 * wd);
        let xs = self.values[x].data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let od = out.data_mut();
        for p in 0..n * c {
            let plane = &xs[p * h * wd..(p + 1) * h * wd];
            let dst = &mut od[p * oh * ow..(p + 1) * oh * ow];
            for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (S::from_f64_lossy(wy0), S::from_f64_lossy(wy1));
                for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (S::from_f64_lossy(wx0), S::from_f64_lossy(wx1));
                    dst[y * ow + xx] = wy0 * (wx0 * plane[y0 * wd + x0] + wx1 * plane[y0 * wd + x1])
                        + wy1 * (wx0 * plane[y1 * wd + x0] + wx1 * plane[y1 * wd + x1]);
                }
            }
        }
        self.push(out, Op::Upsample { x, periodic })
    }

    pub(crate) fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, wd) = dims(self.values[a].shape());
        let cb = self.values[b].shape()[1];
        assert_eq!(self.values[b].shape(), &[n, cb, h, wd], "concat shape");
        let mut out = Tensor::zeros(&[n, ca + cb, h, wd]);
        for i in 0..n {
            let o = out.slab_mut(i);
            o[..ca * h * wd].copy_from_slice(self.values[a].slab(i));
            o[ca * h * wd..].copy_from_slice(self.values[b].slab(i));
        }
        self.push(out, Op::Concat { a, b })
    }

    /// Picks the middle frame of each sample's `frames` frames.
    pub(crate) fn center(&mut self, x: Var, frames: usize) -> Var {
        let (nt, c, h, wd) = dims(self.values[x].shape());
        if frames == 1 {
            return x;
        }
        let batch = nt / frames;
        let mut out = Tensor::zeros(&[batch, c, h, wd]);
        for bi in 0..batch {
            out.slab_mut(bi).copy_from_slice(self.values[x].slab(bi * frames + frames / 2));
        }
        self.push(out, Op::Center { x, frames })
    }

    /// Propagates `dout` from `out` back to every parameter.
    pub(crate) fn backward(&self, out: Var, dout: Tensor<S>) -> Vec<Tensor<S>> {
        let mut pg: Vec<Tensor<S>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.values.len()).map(|_| None).collect();
        assert_eq!(dout.shape(), self.values[out].shape(), "output gradient shape");
        grads[out] = Some(dout);

        fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
            match &mut grads[v] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for v in (0..self.values.len()).rev() {
            let Some(g) = grads[v].take() else { continue };
            match &self.ops[v] {
                Op::Input => {}
                &Op::Conv { x, w, b, k, pad } => {
                    let (n, c, h, wd) = dims(self.values[x].shape());
                    let hw = h * wd;
                    let weight = self.params[w].data();
                    let cout = self.params[w].shape()[0];
                    let kk = c * k * k;
                    let mut dx = Tensor::zeros(self.values[x].shape());
                    let mut cols = if k == 3 { vec![S::zero(); kk * hw] } else { Vec::new() };
                    let mut dcols = if k == 3 { vec![S::zero(); kk * hw] } else { Vec::new() };
                    for i in 0..n {
                        let gi = g.slab(i);
                        sum_rows(gi, hw, pg[b].data_mut());
                        let xi = self.values[x].slab(i);
                        let src: &[S] = if k == 3 {
                            im2col(xi, c, h, wd, pad, &mut cols);
                            &cols
                        } else {
                            xi
                        };
                        gemm(cout, hw, kk, (gi, hw, 1), (src, 1, hw), S::one(), pg[w].data_mut(), kk, 1);
                        if k == 3 {
                            gemm(kk, cout, hw, (weight, 1, kk), (gi, hw, 1), S::zero(), &mut dcols, hw, 1);
                            col2im(&dcols, c, h, wd, pad, dx.slab_mut(i));
                        } else {
                            gemm(kk, cout, hw, (weight, 1, kk), (gi, hw, 1), S::zero(), dx.slab_mut(i), hw, 1);
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::Temporal { x, w, b, frames_in } => {
                    let (nt, c, h, wd) = dims(self.values[x].shape());
                    let hw = h * wd;
                    let batch = nt / frames_in;
                    let frames_out = frames_in - 2;
                    let cout = self.params[w].shape()[0];
                    let weight = self.params[w].data();
                    let mut dx = Tensor::zeros(self.values[x].shape());
                    for bi in 0..batch {
                        for t in 0..frames_out {
                            let gi = g.slab(bi * frames_out + t);
                            sum_rows(gi, hw, pg[b].data_mut());
                            for k in 0..3 {
                                let f = bi * frames_in + t + k;
                                let xi = self.values[x].slab(f);
                                gemm(cout, hw, c, (gi, hw, 1), (xi, 1, hw), S::one(), &mut pg[w].data_mut()[k..], c * 3, 3);
                                gemm(c, cout, hw, (&weight[k..], 3, c * 3), (gi, hw, 1), S::one(), dx.slab_mut(f), hw, 1);
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    per_instance,
                } => {
                    let (n, c, h, wd) = dims(self.values[*x].shape());
                    let hw = h * wd;
                    let gm = self.params[*gamma].data();
                    let gd = g.data();
                    let groups = inv_std.len();
                    let group_of = |i: usize, ch: usize| if *per_instance { i * c + ch } else { ch };
                    let count = if *per_instance { hw } else { n * hw } as f64;
                    // per-group means of g*gamma and g*gamma*xhat
                    let mut m1 = vec![0.0f64; groups];
                    let mut m2 = vec![0.0f64; groups];
                    for i in 0..n {
                        for ch in 0..c {
                            let grp = group_of(i, ch);
                            let base = (i * c + ch) * hw;
                            let (mut s0, mut s1) = (0.0f64, 0.0f64);
                            for j in base..base + hw {
                                let dy = gd[j].to_f64_lossy();
                                s0 += dy;
                                s1 += dy * xhat[j].to_f64_lossy();
                            }
                            let gmc = gm[ch].to_f64_lossy();
                            m1[grp] += s0 * gmc;
                            m2[grp] += s1 * gmc;
                            pg[*beta].data_mut()[ch] = pg[*beta].data()[ch] + S::from_f64_lossy(s0);
                            pg[*gamma].data_mut()[ch] = pg[*gamma].data()[ch] + S::from_f64_lossy(s1);
                        }
                    }
                    let mut dx = Tensor::zeros(self.values[*x].shape());
                    let dxd = dx.data_mut();
                    for i in 0..n {
                        for ch in 0..c {
                            let grp = group_of(i, ch);
                            let a = S::from_f64_lossy(m1[grp] / count);
                            let bm = S::from_f64_lossy(m2[grp] / count);
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                dxd[j] = inv_std[grp] * (gd[j] * gm[ch] - a - xhat[j] * bm);
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::FrozenNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let c = self.values[*x].shape()[1];
                    let hw = self.values[*x].shape()[2] * self.values[*x].shape()[3];
                    let gm = self.params[*gamma].data();
                    let xs = self.values[*x].data();
                    let mut dx = Tensor::zeros(self.values[*x].shape());
                    for (j, (d, &dy)) in dx.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let ch = (j / hw) % c;
                        *d = dy * gm[ch] * inv_std[ch];
                        pg[*gamma].data_mut()[ch] = pg[*gamma].data()[ch] + dy * (xs[j] - mean[ch]) * inv_std[ch];
                        pg[*beta].data_mut()[ch] = pg[*beta].data()[ch] + dy;
                    }
                    acc(&mut grads, *x, dx);
                }
                &Op::Relu { x } => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(self.values[v].data()) {
                        if y <= S::zero() {
                            *d = S::zero();
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::Add { a, b } => {
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Op::MaxPool { x, argmax } => {
                    let (_, _, h, wd) = dims(self.values[*x].shape());
                    let (oh, ow) = (h / 2, wd / 2);
                    let mut dx = Tensor::zeros(self.values[*x].shape());
                    let dxd = dx.data_mut();
                    for (o, (&dy, &src)) in g.data().iter().zip(argmax).enumerate() {
                        let p = o / (oh * ow);
                        let j = p * h * wd + src as usize;
                        dxd[j] = dxd[j] + dy;
                    }
                    acc(&mut grads, *x, dx);
                }
                &Op::Upsample { x, periodic } => {
                    let (n, c, h, wd) = dims(self.values[x].shape());
                    let ty = upsample_taps(h, periodic);
                    let tx = upsample_taps(wd, periodic);
                    let ow = 2 * wd;
                    let mut dx = Tensor::zeros(self.values[x].shape());
                    let dxd = dx.data_mut();
                    let gd = g.data();
                    for p in 0..n * c {
                        let src = &gd[p * 4 * h * wd..(p + 1) * 4 * h * wd];
                        let dst = &mut dxd[p * h * wd..(p + 1) * h * wd];
                        for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            let (wy0, wy1) = (S::from_f64_lossy(wy0), S::from_f64_lossy(wy1));
                            for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let (wx0, wx1) = (S::from_f64_lossy(wx0), S::from_f64_lossy(wx1));
                                let d = src[y * ow + xx];
                                dst[y0 * wd + x0] = dst[y0 * wd + x0] + wy0 * wx0 * d;
                                dst[y0 * wd + x1] = dst[y0 * wd + x1] + wy0 * wx1 * d;
                                dst[y1 * wd + x0] = dst[y1 * wd + x0] + wy1 * wx0 * d;
                                dst[y1 * wd + x1] = dst[y1 * wd + x1] + wy1 * wx1 * d;
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                &Op::Concat { a, b } => {
                    let n = g.shape()[0];
                    let mut da = Tensor::zeros(self.values[a].shape());
                    let mut db = Tensor::zeros(self.values[b].shape());
                    let split = da.len() / n;
                    for i in 0..n {
                        let gi = g.slab(i);
                        da.slab_mut(i).copy_from_slice(&gi[..split]);
                        db.slab_mut(i).copy_from_slice(&gi[split..]);
                    }
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                &Op::Center { x, frames } => {
                    let mut dx = Tensor::zeros(self.values[x].shape());
                    for bi in 0..g.shape()[0] {
                        dx.slab_mut(bi * frames + frames / 2).copy_from_slice(g.slab(bi));
                    }
                    acc(&mut grads, x, dx);
                }
            }
        }
        pg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Naive direct convolution oracle.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], k: usize, pad: Padding) -> Tensor<f64> {
        let (n, c, h, wd) = dims(x.shape());
        let cout = w.shape()[0];
        let r = (k / 2) as i64;
        let mut out = Tensor::zeros(&[n, cout, h, wd]);
        for i in 0..n {
            for o in 0..cout {
                for y in 0..h as i64 {
                    for xx in 0..wd as i64 {
                        let mut s = b[o];
                        for ci in 0..c {
                            for ky in -r..=r {
                                for kx in -r..=r {
                                    let (mut sy, mut sx) = (y + ky, xx + kx);
                                    if pad == Padding::Periodic {
                                        sy = sy.rem_euclid(h as i64);
                                        sx = sx.rem_euclid(wd as i64);
                                    } else if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                        continue;
                                    }
                                    let wi = ((o * c + ci) * k + (ky + r) as usize) * k + (kx + r) as usize;
                                    s += w.data()[wi] * x.data()[((i * c + ci) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out.data_mut()[((i * cout + o) * h + y as usize) * wd + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 6], &mut rng);
        for (k, pad) in [(3, Padding::Zero), (3, Padding::Periodic), (1, Padding::Zero)] {
            let w = random(&[4, 3, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let params = vec![w.clone(), b.clone()];
            let mut tape = Tape::new(&params);
            let xi = tape.input(x.clone());
            let y = tape.conv(xi, 0, 1, k, pad);
            let want = conv_oracle(&x, &w, b.data(), k, pad);
            for (a, e) in tape.value(y).data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batch, t_in, c, cout, h, w) = (2, 5, 3, 2, 2, 3);
        let x = random(&[batch * t_in, c, h, w], &mut rng);
        let wt = random(&[cout, c, 3], &mut rng);
        let b = random(&[cout], &mut rng);
        let params = vec![wt.clone(), b.clone()];
        let mut tape = Tape::new(&params);
        let xi = tape.input(x.clone());
        let y = tape.temporal(xi, 0, 1, t_in);
        let out = tape.value(y);
        assert_eq!(out.shape(), &[batch * (t_in - 2), cout, h, w]);
        for bi in 0..batch {
            for t in 0..t_in - 2 {
                for o in 0..cout {
                    for p in 0..h * w {
                        let mut s = b.data()[o];
                        for k in 0..3 {
                            for ci in 0..c {
                                s += wt.data()[(o * c + ci) * 3 + k] * x.slab(bi * t_in + t + k)[ci * h * w + p];
                            }
                        }
                        let got = out.slab(bi * (t_in - 2) + t)[o * h * w + p];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant_and_interpolates() {
        let params: Vec<Tensor<f64>> = vec![];
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 4.0]));
        let y = tape.upsample(x, false);
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
        let z = tape.upsample(x, true);
        assert_eq!(&tape.value(z).data()[..4], &[1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn maxpool_picks_first_maximum() {
        let params: Vec<Tensor<f64>> = vec![];
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 3.0, 3.0, 2.0]));
        let y = tape.maxpool(x);
        assert_eq!(tape.value(y).data(), &[3.0]);
        let g = tape.backward(y, Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]));
        assert!(g.is_empty());
    }

    #[test]
    fn instance_norm_zero_input_is_finite() {
        let params = vec![Tensor::full(&[2], 1.0f64), Tensor::zeros(&[2])];
        let mut tape = Tape::new(&params);
        let x = tape.input(Tensor::zeros(&[3, 2, 4, 4]));
        let y = tape.norm(x, 0, 1, true);
        assert!(tape.value(y).all_finite());
        let g = tape.backward(y, Tensor::full(&[3, 2, 4, 4], 1.0));
        assert!(g.iter().all(|t| t.all_finite()));
    }
}
