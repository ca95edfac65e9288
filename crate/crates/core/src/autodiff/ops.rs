//! Differentiable operations: exactly the layer set the extractor and the
//! emotion classifier need, nothing more.
//!
//! Shapes follow the channels-first convention: 1-D feature maps are
//! `[C, T]`, 2-D maps are `[C, H, W]`, vectors are `[N]`.

use super::graph::{Graph, OpBackward, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::signal::{si_sdr_from_energies, SI_SDR_EPS};

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Output length of a strided/dilated convolution, or an error when the
/// input is too short.
pub fn conv1d_out_len(
    t: usize,
    k: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    let span = dilation * (k - 1) + 1;
    if t + 2 * padding < span {
        return Err(Error::TooShort {
            got: t,
            need: span.saturating_sub(2 * padding),
        });
    }
    Ok((t + 2 * padding - span) / stride + 1)
}

fn pad_rows(x: &Tensor, channels: usize, t: usize, padding: usize) -> Vec<f64> {
    if padding == 0 {
        return x.data().to_vec();
    }
    let tp = t + 2 * padding;
    let mut out = vec![0.0; channels * tp];
    for c in 0..channels {
        out[c * tp + padding..c * tp + padding + t].copy_from_slice(&x.data()[c * t..(c + 1) * t]);
    }
    out
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

struct Conv1d {
    stride: usize,
    padding: usize,
    dilation: usize,
}

/// 1-D cross-correlation. `x: [C_in, T]`, `w: [C_out, C_in, K]`,
/// `b: [C_out]`. Output `[C_out, T']` with
/// `T' = floor((T + 2 padding - dilation (K-1) - 1) / stride) + 1`.
pub fn conv1d(
    g: &mut Graph,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Var> {
    let (xs, ws) = (g.value(x).shape().to_vec(), g.value(w).shape().to_vec());
    if xs.len() != 2 || ws.len() != 3 || xs[0] != ws[1] {
        return Err(shape_err("conv1d", format!("x {xs:?} vs w {ws:?}")));
    }
    let (c_in, t) = (xs[0], xs[1]);
    let (c_out, k) = (ws[0], ws[2]);
    if let Some(b) = b {
        if g.value(b).shape() != [c_out] {
            return Err(shape_err(
                "conv1d",
                format!("bias {:?} vs C_out {c_out}", g.value(b).shape()),
            ));
        }
    }
    let t_out = conv1d_out_len(t, k, stride, padding, dilation)?;
    let xp = pad_rows(g.value(x), c_in, t, padding);
    let tp = t + 2 * padding;
    let wd = g.value(w).data();
    let mut y = vec![0.0; c_out * t_out];
    for o in 0..c_out {
        let yrow = &mut y[o * t_out..(o + 1) * t_out];
        for c in 0..c_in {
            let xrow = &xp[c * tp..(c + 1) * tp];
            for kk in 0..k {
                let wv = wd[(o * c_in + c) * k + kk];
                if wv == 0.0 {
                    continue;
                }
                let base = kk * dilation;
                for (ti, yv) in yrow.iter_mut().enumerate() {
                    *yv += wv * xrow[ti * stride + base];
                }
            }
        }
    }
    if let Some(bv) = b {
        let bd = g.value(bv).data();
        for o in 0..c_out {
            for yv in &mut y[o * t_out..(o + 1) * t_out] {
                *yv += bd[o];
            }
        }
    }
    let value = Tensor::from_vec(&[c_out, t_out], y)?;
    let mut parents = vec![x, w];
    if let Some(bv) = b {
        parents.push(bv);
    }
    Ok(g.push(
        value,
        parents,
        Box::new(Conv1d {
            stride,
            padding,
            dilation,
        }),
    ))
}

impl OpBackward for Conv1d {
    fn backward(
        &self,
        node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (parents[0], parents[1]);
        let (c_in, t) = (x.shape()[0], x.shape()[1]);
        let (c_out, k) = (w.shape()[0], w.shape()[2]);
        let t_out = node_value.shape()[1];
        let tp = t + 2 * self.padding;
        let dy = out_grad.data();
        let wd = w.data();

        let dx = if needs[0] {
            let mut dxp = vec![0.0; c_in * tp];
            for o in 0..c_out {
                let dyrow = &dy[o * t_out..(o + 1) * t_out];
                for c in 0..c_in {
                    let drow = &mut dxp[c * tp..(c + 1) * tp];
                    for kk in 0..k {
                        let wv = wd[(o * c_in + c) * k + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        let base = kk * self.dilation;
                        for (ti, dyv) in dyrow.iter().enumerate() {
                            drow[ti * self.stride + base] += wv * dyv;
                        }
                    }
                }
            }
            let mut dx = vec![0.0; c_in * t];
            for c in 0..c_in {
                dx[c * t..(c + 1) * t]
                    .copy_from_slice(&dxp[c * tp + self.padding..c * tp + self.padding + t]);
            }
            Some(Tensor::from_vec(&[c_in, t], dx).unwrap())
        } else {
            None
        };

        let dw = if needs[1] {
            let xp = pad_rows(x, c_in, t, self.padding);
            let mut dw = vec![0.0; c_out * c_in * k];
            for o in 0..c_out {
                let dyrow = &dy[o * t_out..(o + 1) * t_out];
                for c in 0..c_in {
                    let xrow = &xp[c * tp..(c + 1) * tp];
                    for kk in 0..k {
                        let base = kk * self.dilation;
                        let mut acc = 0.0;
                        for (ti, dyv) in dyrow.iter().enumerate() {
                            acc += dyv * xrow[ti * self.stride + base];
                        }
                        dw[(o * c_in + c) * k + kk] = acc;
                    }
                }
            }
            Some(Tensor::from_vec(&[c_out, c_in, k], dw).unwrap())
        } else {
            None
        };

        let mut grads = vec![dx, dw];
        if parents.len() == 3 {
            grads.push(if needs[2] {
                let db: Vec<f64> = (0..c_out)
                    .map(|o| dy[o * t_out..(o + 1) * t_out].iter().sum())
                    .collect();
                Some(Tensor::from_vec(&[c_out], db).unwrap())
            } else {
                None
            });
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// deconv1d (transposed convolution)
// ---------------------------------------------------------------------------

struct Deconv1d {
    stride: usize,
}

/// Transposed 1-D convolution. `x: [C_in, T]`, `w: [C_in, C_out, K]`,
/// `b: [C_out]`. Output `[C_out, (T-1) stride + K]`.
pub fn deconv1d(g: &mut Graph, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
    let (xs, ws) = (g.value(x).shape().to_vec(), g.value(w).shape().to_vec());
    if xs.len() != 2 || ws.len() != 3 || xs[0] != ws[0] {
        return Err(shape_err("deconv1d", format!("x {xs:?} vs w {ws:?}")));
    }
    let (c_in, t) = (xs[0], xs[1]);
    let (c_out, k) = (ws[1], ws[2]);
    if t == 0 {
        return Err(Error::TooShort { got: 0, need: 1 });
    }
    if let Some(b) = b {
        if g.value(b).shape() != [c_out] {
            return Err(shape_err(
                "deconv1d",
                format!("bias {:?} vs C_out {c_out}", g.value(b).shape()),
            ));
        }
    }
    let t_out = (t - 1) * stride + k;
    let xd = g.value(x).data();
    let wd = g.value(w).data();
    let mut y = vec![0.0; c_out * t_out];
    for c in 0..c_in {
        let xrow = &xd[c * t..(c + 1) * t];
        for o in 0..c_out {
            let yrow = &mut y[o * t_out..(o + 1) * t_out];
            for kk in 0..k {
                let wv = wd[(c * c_out + o) * k + kk];
                if wv == 0.0 {
                    continue;
                }
                for (ti, xv) in xrow.iter().enumerate() {
                    yrow[ti * stride + kk] += wv * xv;
                }
            }
        }
    }
    if let Some(bv) = b {
        let bd = g.value(bv).data();
        for o in 0..c_out {
            for yv in &mut y[o * t_out..(o + 1) * t_out] {
                *yv += bd[o];
            }
        }
    }
    let value = Tensor::from_vec(&[c_out, t_out], y)?;
    let mut parents = vec![x, w];
    if let Some(bv) = b {
        parents.push(bv);
    }
    Ok(g.push(value, parents, Box::new(Deconv1d { stride })))
}

impl OpBackward for Deconv1d {
    fn backward(
        &self,
        node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (parents[0], parents[1]);
        let (c_in, t) = (x.shape()[0], x.shape()[1]);
        let (c_out, k) = (w.shape()[1], w.shape()[2]);
        let t_out = node_value.shape()[1];
        let dy = out_grad.data();
        let wd = w.data();
        let xd = x.data();

        let dx = if needs[0] {
            let mut dx = vec![0.0; c_in * t];
            for c in 0..c_in {
                let drow = &mut dx[c * t..(c + 1) * t];
                for o in 0..c_out {
                    let dyrow = &dy[o * t_out..(o + 1) * t_out];
                    for kk in 0..k {
                        let wv = wd[(c * c_out + o) * k + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        for (ti, dv) in drow.iter_mut().enumerate() {
                            *dv += wv * dyrow[ti * self.stride + kk];
                        }
                    }
                }
            }
            Some(Tensor::from_vec(&[c_in, t], dx).unwrap())
        } else {
            None
        };

        let dw = if needs[1] {
            let mut dw = vec![0.0; c_in * c_out * k];
            for c in 0..c_in {
                let xrow = &xd[c * t..(c + 1) * t];
                for o in 0..c_out {
                    let dyrow = &dy[o * t_out..(o + 1) * t_out];
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for (ti, xv) in xrow.iter().enumerate() {
                            acc += xv * dyrow[ti * self.stride + kk];
                        }
                        dw[(c * c_out + o) * k + kk] = acc;
                    }
                }
            }
            Some(Tensor::from_vec(&[c_in, c_out, k], dw).unwrap())
        } else {
            None
        };

        let mut grads = vec![dx, dw];
        if parents.len() == 3 {
            grads.push(if needs[2] {
                let db: Vec<f64> = (0..c_out)
                    .map(|o| dy[o * t_out..(o + 1) * t_out].iter().sum())
                    .collect();
                Some(Tensor::from_vec(&[c_out], db).unwrap())
            } else {
                None
            });
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// conv2d (3x3-style planar convolution for the classifier)
// ---------------------------------------------------------------------------

struct Conv2d {
    padding: usize,
}

/// 2-D cross-correlation with stride 1. `x: [C_in, H, W]`,
/// `w: [C_out, C_in, KH, KW]`, `b: [C_out]`.
pub fn conv2d(g: &mut Graph, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
    let (xs, ws) = (g.value(x).shape().to_vec(), g.value(w).shape().to_vec());
    if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
        return Err(shape_err("conv2d", format!("x {xs:?} vs w {ws:?}")));
    }
    let (c_in, h, wdt) = (xs[0], xs[1], xs[2]);
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if h + 2 * padding < kh || wdt + 2 * padding < kw {
        return Err(Error::TooShort {
            got: h.min(wdt),
            need: kh.max(kw),
        });
    }
    let h_out = h + 2 * padding - kh + 1;
    let w_out = wdt + 2 * padding - kw + 1;
    let (hp, wp) = (h + 2 * padding, wdt + 2 * padding);
    // Padded copy of the input planes.
    let xd = g.value(x).data();
    let mut xp = vec![0.0; c_in * hp * wp];
    for c in 0..c_in {
        for r in 0..h {
            let src = &xd[c * h * wdt + r * wdt..c * h * wdt + (r + 1) * wdt];
            let dst = c * hp * wp + (r + padding) * wp + padding;
            xp[dst..dst + wdt].copy_from_slice(src);
        }
    }
    let wv = g.value(w).data();
    let mut y = vec![0.0; c_out * h_out * w_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for dr in 0..kh {
                for dc in 0..kw {
                    let weight = wv[((o * c_in + c) * kh + dr) * kw + dc];
                    if weight == 0.0 {
                        continue;
                    }
                    for r in 0..h_out {
                        let xrow = &xp[c * hp * wp + (r + dr) * wp + dc..];
                        let yrow = &mut y[o * h_out * w_out + r * w_out..];
                        for col in 0..w_out {
                            yrow[col] += weight * xrow[col];
                        }
                    }
                }
            }
        }
    }
    if let Some(bv) = b {
        if g.value(bv).shape() != [c_out] {
            return Err(shape_err("conv2d", "bias shape".into()));
        }
        let bd = g.value(bv).data();
        for o in 0..c_out {
            for yv in &mut y[o * h_out * w_out..(o + 1) * h_out * w_out] {
                *yv += bd[o];
            }
        }
    }
    let value = Tensor::from_vec(&[c_out, h_out, w_out], y)?;
    let mut parents = vec![x, w];
    if let Some(bv) = b {
        parents.push(bv);
    }
    Ok(g.push(value, parents, Box::new(Conv2d { padding })))
}

impl OpBackward for Conv2d {
    fn backward(
        &self,
        node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (parents[0], parents[1]);
        let (c_in, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let (h_out, w_out) = (node_value.shape()[1], node_value.shape()[2]);
        let p = self.padding;
        let (hp, wp) = (h + 2 * p, wdt + 2 * p);
        let dy = out_grad.data();
        let wv = w.data();
        let xd = x.data();

        let dx = if needs[0] {
            let mut dxp = vec![0.0; c_in * hp * wp];
            for o in 0..c_out {
                for c in 0..c_in {
                    for dr in 0..kh {
                        for dc in 0..kw {
                            let weight = wv[((o * c_in + c) * kh + dr) * kw + dc];
                            if weight == 0.0 {
                                continue;
                            }
                            for r in 0..h_out {
                                let dyrow = &dy[o * h_out * w_out + r * w_out..];
                                let drow = &mut dxp[c * hp * wp + (r + dr) * wp + dc..];
                                for col in 0..w_out {
                                    drow[col] += weight * dyrow[col];
                                }
                            }
                        }
                    }
                }
            }
            let mut dx = vec![0.0; c_in * h * wdt];
            for c in 0..c_in {
                for r in 0..h {
                    let src = c * hp * wp + (r + p) * wp + p;
                    let dst = c * h * wdt + r * wdt;
                    dx[dst..dst + wdt].copy_from_slice(&dxp[src..src + wdt]);
                }
            }
            Some(Tensor::from_vec(&[c_in, h, wdt], dx).unwrap())
        } else {
            None
        };

        let dw = if needs[1] {
            let mut xp = vec![0.0; c_in * hp * wp];
            for c in 0..c_in {
                for r in 0..h {
                    let src = &xd[c * h * wdt + r * wdt..c * h * wdt + (r + 1) * wdt];
                    let dst = c * hp * wp + (r + p) * wp + p;
                    xp[dst..dst + wdt].copy_from_slice(src);
                }
            }
            let mut dw = vec![0.0; c_out * c_in * kh * kw];
            for o in 0..c_out {
                for c in 0..c_in {
                    for dr in 0..kh {
                        for dc in 0..kw {
                            let mut acc = 0.0;
                            for r in 0..h_out {
                                let dyrow = &dy[o * h_out * w_out + r * w_out..];
                                let xrow = &xp[c * hp * wp + (r + dr) * wp + dc..];
                                for col in 0..w_out {
                                    acc += dyrow[col] * xrow[col];
                                }
                            }
                            dw[((o * c_in + c) * kh + dr) * kw + dc] = acc;
                        }
                    }
                }
            }
            Some(Tensor::from_vec(&[c_out, c_in, kh, kw], dw).unwrap())
        } else {
            None
        };

        let mut grads = vec![dx, dw];
        if parents.len() == 3 {
            grads.push(if needs[2] {
                let plane = h_out * w_out;
                let db: Vec<f64> = (0..c_out)
                    .map(|o| dy[o * plane..(o + 1) * plane].iter().sum())
                    .collect();
                Some(Tensor::from_vec(&[c_out], db).unwrap())
            } else {
                None
            });
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// element-wise and broadcast multiply
// ---------------------------------------------------------------------------

struct ElemMul {
    /// true when `b` is a per-channel vector broadcast over trailing dims.
    channel_broadcast: bool,
}

/// Hadamard product. Either both shapes equal, or `b` is a `[C]` vector
/// broadcast across the trailing dimensions of `a: [C, ...]`.
pub fn elementwise_mul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    let channel_broadcast = sa != sb;
    if channel_broadcast && (sb.len() != 1 || sa.is_empty() || sa[0] != sb[0]) {
        return Err(shape_err("elementwise_mul", format!("{sa:?} vs {sb:?}")));
    }
    let ad = g.value(a).data();
    let bd = g.value(b).data();
    let value = if channel_broadcast {
        let c = sa[0];
        let inner: usize = sa[1..].iter().product();
        let mut out = vec![0.0; c * inner];
        for ch in 0..c {
            let scale = bd[ch];
            for i in 0..inner {
                out[ch * inner + i] = ad[ch * inner + i] * scale;
            }
        }
        Tensor::from_vec(&sa, out)?
    } else {
        Tensor::from_vec(&sa, ad.iter().zip(bd).map(|(x, y)| x * y).collect())?
    };
    Ok(g.push(value, vec![a, b], Box::new(ElemMul { channel_broadcast })))
}

impl OpBackward for ElemMul {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (a, b) = (parents[0], parents[1]);
        let dy = out_grad.data();
        if self.channel_broadcast {
            let c = a.shape()[0];
            let inner: usize = a.shape()[1..].iter().product();
            let da = needs[0].then(|| {
                let mut out = vec![0.0; c * inner];
                for ch in 0..c {
                    let scale = b.data()[ch];
                    for i in 0..inner {
                        out[ch * inner + i] = dy[ch * inner + i] * scale;
                    }
                }
                Tensor::from_vec(a.shape(), out).unwrap()
            });
            let db = needs[1].then(|| {
                let mut out = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for i in 0..inner {
                        acc += dy[ch * inner + i] * a.data()[ch * inner + i];
                    }
                    out[ch] = acc;
                }
                Tensor::from_vec(&[c], out).unwrap()
            });
            vec![da, db]
        } else {
            let da = needs[0].then(|| {
                Tensor::from_vec(
                    a.shape(),
                    dy.iter().zip(b.data()).map(|(g, y)| g * y).collect(),
                )
                .unwrap()
            });
            let db = needs[1].then(|| {
                Tensor::from_vec(
                    b.shape(),
                    dy.iter().zip(a.data()).map(|(g, x)| g * x).collect(),
                )
                .unwrap()
            });
            vec![da, db]
        }
    }
}

// ---------------------------------------------------------------------------
// add / scale
// ---------------------------------------------------------------------------

struct Add;

pub fn add(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(shape_err(
            "add",
            format!("{:?} vs {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    let value = Tensor::from_vec(
        g.value(a).shape(),
        g.value(a)
            .data()
            .iter()
            .zip(g.value(b).data())
            .map(|(x, y)| x + y)
            .collect(),
    )?;
    Ok(g.push(value, vec![a, b], Box::new(Add)))
}

impl OpBackward for Add {
    fn backward(
        &self,
        _node_value: &Tensor,
        _parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![
            needs[0].then(|| out_grad.clone()),
            needs[1].then(|| out_grad.clone()),
        ]
    }
}

struct Scale {
    c: f64,
}

pub fn scale(g: &mut Graph, x: Var, c: f64) -> Var {
    let value = Tensor::from_vec(
        g.value(x).shape(),
        g.value(x).data().iter().map(|v| v * c).collect(),
    )
    .unwrap();
    g.push(value, vec![x], Box::new(Scale { c }))
}

impl OpBackward for Scale {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            Tensor::from_vec(
                parents[0].shape(),
                out_grad.data().iter().map(|g| g * self.c).collect(),
            )
            .unwrap()
        })]
    }
}

/// Mean of scalar vars; used to combine per-item batch losses.
pub fn scalar_mean(g: &mut Graph, items: &[Var]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::EmptyInput("scalar_mean"));
    }
    let mut acc = items[0];
    for &v in &items[1..] {
        acc = add(g, acc, v)?;
    }
    Ok(scale(g, acc, 1.0 / items.len() as f64))
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

struct Relu;

pub fn relu(g: &mut Graph, x: Var) -> Var {
    let value = Tensor::from_vec(
        g.value(x).shape(),
        g.value(x).data().iter().map(|v| v.max(0.0)).collect(),
    )
    .unwrap();
    g.push(value, vec![x], Box::new(Relu))
}

impl OpBackward for Relu {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            Tensor::from_vec(
                parents[0].shape(),
                parents[0]
                    .data()
                    .iter()
                    .zip(out_grad.data())
                    .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )
            .unwrap()
        })]
    }
}

struct PRelu;

/// Parametric ReLU with one learned slope per channel (`slope: [C]`,
/// `x: [C, ...]`).
pub fn prelu(g: &mut Graph, x: Var, slope: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    let c = *xs.first().ok_or_else(|| shape_err("prelu", "rank-0 input".into()))?;
    if g.value(slope).shape() != [c] {
        return Err(shape_err(
            "prelu",
            format!("slope {:?} vs channels {c}", g.value(slope).shape()),
        ));
    }
    let inner: usize = xs[1..].iter().product();
    let sd = g.value(slope).data();
    let mut out = vec![0.0; c * inner];
    for ch in 0..c {
        let a = sd[ch];
        for i in 0..inner {
            let v = g.value(x).data()[ch * inner + i];
            out[ch * inner + i] = if v > 0.0 { v } else { a * v };
        }
    }
    let value = Tensor::from_vec(&xs, out)?;
    Ok(g.push(value, vec![x, slope], Box::new(PRelu)))
}

impl OpBackward for PRelu {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, slope) = (parents[0], parents[1]);
        let c = x.shape()[0];
        let inner: usize = x.shape()[1..].iter().product();
        let dy = out_grad.data();
        let dx = needs[0].then(|| {
            let mut out = vec![0.0; c * inner];
            for ch in 0..c {
                let a = slope.data()[ch];
                for i in 0..inner {
                    let idx = ch * inner + i;
                    out[idx] = if x.data()[idx] > 0.0 { dy[idx] } else { a * dy[idx] };
                }
            }
            Tensor::from_vec(x.shape(), out).unwrap()
        });
        let dslope = needs[1].then(|| {
            let mut out = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for i in 0..inner {
                    let idx = ch * inner + i;
                    if x.data()[idx] <= 0.0 {
                        acc += dy[idx] * x.data()[idx];
                    }
                }
                out[ch] = acc;
            }
            Tensor::from_vec(&[c], out).unwrap()
        });
        vec![dx, dslope]
    }
}

struct Sigmoid;

pub fn sigmoid(g: &mut Graph, x: Var) -> Var {
    let value = Tensor::from_vec(
        g.value(x).shape(),
        g.value(x)
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect(),
    )
    .unwrap();
    g.push(value, vec![x], Box::new(Sigmoid))
}

impl OpBackward for Sigmoid {
    fn backward(
        &self,
        node_value: &Tensor,
        _parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            Tensor::from_vec(
                node_value.shape(),
                node_value
                    .data()
                    .iter()
                    .zip(out_grad.data())
                    .map(|(y, g)| g * y * (1.0 - y))
                    .collect(),
            )
            .unwrap()
        })]
    }
}

struct Softmax {
    rows: usize,
    cols: usize,
}

/// Softmax over the last dimension of a `[N]` or `[R, N]` tensor.
pub fn softmax(g: &mut Graph, x: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    let (rows, cols) = match xs.len() {
        1 => (1, xs[0]),
        2 => (xs[0], xs[1]),
        _ => return Err(shape_err("softmax", format!("rank {} input", xs.len()))),
    };
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &g.value(x).data()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (i, v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[r * cols + i] = e;
            denom += e;
        }
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v /= denom;
        }
    }
    let value = Tensor::from_vec(&xs, out)?;
    Ok(g.push(value, vec![x], Box::new(Softmax { rows, cols })))
}

impl OpBackward for Softmax {
    fn backward(
        &self,
        node_value: &Tensor,
        _parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let y = node_value.data();
            let dy = out_grad.data();
            let mut dx = vec![0.0; y.len()];
            for r in 0..self.rows {
                let o = r * self.cols;
                let dot: f64 = (0..self.cols).map(|i| dy[o + i] * y[o + i]).sum();
                for i in 0..self.cols {
                    dx[o + i] = y[o + i] * (dy[o + i] - dot);
                }
            }
            Tensor::from_vec(node_value.shape(), dx).unwrap()
        })]
    }
}

// ---------------------------------------------------------------------------
// normalization and pooling
// ---------------------------------------------------------------------------

struct GlobalLayerNorm {
    mean: f64,
    inv_std: f64,
}

pub const NORM_EPS: f64 = 1e-8;

/// Global layer norm over all of `[C, T]` with learned per-channel gain
/// and bias.
pub fn global_layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 2 {
        return Err(shape_err("global_layer_norm", format!("rank {}", xs.len())));
    }
    let c = xs[0];
    if g.value(gain).shape() != [c] || g.value(bias).shape() != [c] {
        return Err(shape_err("global_layer_norm", "gain/bias shape".into()));
    }
    let xd = g.value(x).data();
    let n = xd.len() as f64;
    let mean = xd.iter().sum::<f64>() / n;
    let var = xd.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    let t = xs[1];
    let gd = g.value(gain).data();
    let bd = g.value(bias).data();
    let mut out = vec![0.0; xd.len()];
    for ch in 0..c {
        for i in 0..t {
            out[ch * t + i] = gd[ch] * (xd[ch * t + i] - mean) * inv_std + bd[ch];
        }
    }
    let value = Tensor::from_vec(&xs, out)?;
    Ok(g.push(
        value,
        vec![x, gain, bias],
        Box::new(GlobalLayerNorm { mean, inv_std }),
    ))
}

impl OpBackward for GlobalLayerNorm {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, gain) = (parents[0], parents[1]);
        let (c, t) = (x.shape()[0], x.shape()[1]);
        let n = (c * t) as f64;
        let xd = x.data();
        let gd = gain.data();
        let dy = out_grad.data();

        // xhat and d(xhat) are shared by all three gradients.
        let xhat: Vec<f64> = xd.iter().map(|v| (v - self.mean) * self.inv_std).collect();

        let dgain = needs[1].then(|| {
            let mut out = vec![0.0; c];
            for ch in 0..c {
                out[ch] = (0..t).map(|i| dy[ch * t + i] * xhat[ch * t + i]).sum();
            }
            Tensor::from_vec(&[c], out).unwrap()
        });
        let dbias = needs[2].then(|| {
            let mut out = vec![0.0; c];
            for ch in 0..c {
                out[ch] = dy[ch * t..(ch + 1) * t].iter().sum();
            }
            Tensor::from_vec(&[c], out).unwrap()
        });
        let dx = needs[0].then(|| {
            let mut dxhat = vec![0.0; xd.len()];
            for ch in 0..c {
                for i in 0..t {
                    dxhat[ch * t + i] = dy[ch * t + i] * gd[ch];
                }
            }
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            let mut out = vec![0.0; xd.len()];
            for i in 0..xd.len() {
                out[i] = self.inv_std / n
                    * (n * dxhat[i] - sum_dxhat - xhat[i] * sum_dxhat_xhat);
            }
            Tensor::from_vec(x.shape(), out).unwrap()
        });
        vec![dx, dgain, dbias]
    }
}

struct MeanPool {
    inner: usize,
}

/// Mean over every trailing dimension: `[C, ...] -> [C]`.
pub fn mean_pool_time(g: &mut Graph, x: Var) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() < 2 {
        return Err(shape_err("mean_pool_time", format!("rank {}", xs.len())));
    }
    let c = xs[0];
    let inner: usize = xs[1..].iter().product();
    if inner == 0 {
        return Err(Error::EmptyInput("mean_pool_time"));
    }
    let xd = g.value(x).data();
    let out: Vec<f64> = (0..c)
        .map(|ch| xd[ch * inner..(ch + 1) * inner].iter().sum::<f64>() / inner as f64)
        .collect();
    let value = Tensor::from_vec(&[c], out)?;
    Ok(g.push(value, vec![x], Box::new(MeanPool { inner })))
}

impl OpBackward for MeanPool {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let x = parents[0];
            let c = x.shape()[0];
            let mut out = vec![0.0; x.numel()];
            for ch in 0..c {
                let gv = out_grad.data()[ch] / self.inner as f64;
                for v in &mut out[ch * self.inner..(ch + 1) * self.inner] {
                    *v = gv;
                }
            }
            Tensor::from_vec(x.shape(), out).unwrap()
        })]
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

struct Linear;

/// Fully connected layer on a vector: `x: [N]`, `w: [M, N]`, `b: [M]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (xs, ws) = (g.value(x).shape().to_vec(), g.value(w).shape().to_vec());
    if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
        return Err(shape_err("linear", format!("x {xs:?} vs w {ws:?}")));
    }
    let (m, n) = (ws[0], ws[1]);
    if let Some(bv) = b {
        if g.value(bv).shape() != [m] {
            return Err(shape_err("linear", "bias shape".into()));
        }
    }
    let xd = g.value(x).data();
    let wd = g.value(w).data();
    let mut out = vec![0.0; m];
    for r in 0..m {
        out[r] = wd[r * n..(r + 1) * n]
            .iter()
            .zip(xd)
            .map(|(a, b)| a * b)
            .sum();
    }
    if let Some(bv) = b {
        for (o, bb) in out.iter_mut().zip(g.value(bv).data()) {
            *o += bb;
        }
    }
    let value = Tensor::from_vec(&[m], out)?;
    let mut parents = vec![x, w];
    if let Some(bv) = b {
        parents.push(bv);
    }
    Ok(g.push(value, parents, Box::new(Linear)))
}

impl OpBackward for Linear {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (parents[0], parents[1]);
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let dy = out_grad.data();
        let dx = needs[0].then(|| {
            let mut out = vec![0.0; n];
            for r in 0..m {
                let gv = dy[r];
                for (o, wv) in out.iter_mut().zip(&w.data()[r * n..(r + 1) * n]) {
                    *o += gv * wv;
                }
            }
            Tensor::from_vec(&[n], out).unwrap()
        });
        let dw = needs[1].then(|| {
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let gv = dy[r];
                for (o, xv) in out[r * n..(r + 1) * n].iter_mut().zip(x.data()) {
                    *o = gv * xv;
                }
            }
            Tensor::from_vec(&[m, n], out).unwrap()
        });
        let mut grads = vec![dx, dw];
        if parents.len() == 3 {
            grads.push(needs[2].then(|| Tensor::from_vec(&[m], dy.to_vec()).unwrap()));
        }
        grads
    }
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

struct Reshape;

pub fn reshape(g: &mut Graph, x: Var, shape: &[usize]) -> Result<Var> {
    let value = g.value(x).reshaped(shape)?;
    Ok(g.push(value, vec![x], Box::new(Reshape)))
}

impl OpBackward for Reshape {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| out_grad.reshaped(parents[0].shape()).unwrap())]
    }
}

struct TrimOrPad {
    orig: usize,
}

/// Force a rank-1 tensor to `target_len`, truncating or zero-padding at
/// the tail. Used to match decoder output back to mixture length.
pub fn trim_or_pad(g: &mut Graph, x: Var, target_len: usize) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() != 1 {
        return Err(shape_err("trim_or_pad", format!("rank {}", xs.len())));
    }
    let orig = xs[0];
    let mut out = vec![0.0; target_len];
    let n = orig.min(target_len);
    out[..n].copy_from_slice(&g.value(x).data()[..n]);
    let value = Tensor::from_vec(&[target_len], out)?;
    Ok(g.push(value, vec![x], Box::new(TrimOrPad { orig })))
}

impl OpBackward for TrimOrPad {
    fn backward(
        &self,
        node_value: &Tensor,
        _parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let target = node_value.shape()[0];
        vec![needs[0].then(|| {
            let mut out = vec![0.0; self.orig];
            let n = self.orig.min(target);
            out[..n].copy_from_slice(&out_grad.data()[..n]);
            Tensor::from_vec(&[self.orig], out).unwrap()
        })]
    }
}

struct Stack {
    rows: usize,
    cols: usize,
}

/// Stack equal-length vectors into a `[N, K]` matrix.
pub fn stack_rows(g: &mut Graph, items: &[Var]) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::EmptyInput("stack_rows"));
    }
    let cols = g.value(items[0]).numel();
    let mut data = Vec::with_capacity(items.len() * cols);
    for &v in items {
        if g.value(v).numel() != cols {
            return Err(shape_err("stack_rows", "ragged rows".into()));
        }
        data.extend_from_slice(g.value(v).data());
    }
    let value = Tensor::from_vec(&[items.len(), cols], data)?;
    Ok(g.push(
        value,
        items.to_vec(),
        Box::new(Stack {
            rows: items.len(),
            cols,
        }),
    ))
}

impl OpBackward for Stack {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        (0..self.rows)
            .map(|r| {
                needs[r].then(|| {
                    Tensor::from_vec(
                        parents[r].shape(),
                        out_grad.data()[r * self.cols..(r + 1) * self.cols].to_vec(),
                    )
                    .unwrap()
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// temporal shift
// ---------------------------------------------------------------------------

struct TemporalShift {
    shift_each_way: usize,
}

/// Zero-parameter temporal shift: the first `floor(C * fraction)` channels
/// shift +1 frame, the next as many shift -1, the rest pass through.
/// Frames are the last axis; zero-fill at the edges.
pub fn temporal_shift(g: &mut Graph, x: Var, fraction: f64) -> Result<Var> {
    let xs = g.value(x).shape().to_vec();
    if xs.len() < 2 {
        return Err(shape_err("temporal_shift", format!("rank {}", xs.len())));
    }
    let frames = *xs.last().unwrap();
    if frames < 2 {
        return Err(Error::TooShort {
            got: frames,
            need: 2,
        });
    }
    if !(0.0..=0.5).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "shift_fraction {fraction} outside (0, 0.5]"
        )));
    }
    let c = xs[0];
    let shift_each_way = (c as f64 * fraction).floor() as usize;
    let value = apply_shift(g.value(x), shift_each_way, false);
    Ok(g.push(value, vec![x], Box::new(TemporalShift { shift_each_way })))
}

fn apply_shift(x: &Tensor, shift_each_way: usize, reverse: bool) -> Tensor {
    let shape = x.shape();
    let c = shape[0];
    let frames = *shape.last().unwrap();
    let rows_per_channel: usize = shape[1..shape.len() - 1].iter().product::<usize>().max(1);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for ch in 0..c {
        // +1 in forward becomes -1 in the adjoint and vice versa.
        let dir: i64 = if ch < shift_each_way {
            1
        } else if ch < 2 * shift_each_way {
            -1
        } else {
            0
        };
        let dir = if reverse { -dir } else { dir };
        for row in 0..rows_per_channel {
            let base = (ch * rows_per_channel + row) * frames;
            match dir {
                1 => out[base + 1..base + frames].copy_from_slice(&xd[base..base + frames - 1]),
                -1 => out[base..base + frames - 1].copy_from_slice(&xd[base + 1..base + frames]),
                _ => out[base..base + frames].copy_from_slice(&xd[base..base + frames]),
            }
        }
    }
    Tensor::from_vec(shape, out).unwrap()
}

impl OpBackward for TemporalShift {
    fn backward(
        &self,
        _node_value: &Tensor,
        _parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| apply_shift(out_grad, self.shift_each_way, true))]
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

struct CrossEntropy {
    labels: Vec<usize>,
    rows: usize,
    cols: usize,
}

/// Mean negative log likelihood of the labels under softmax(logits).
/// `logits: [K]` with one label, or `[N, K]` with `N` labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let xs = g.value(logits).shape().to_vec();
    let (rows, cols) = match xs.len() {
        1 => (1, xs[0]),
        2 => (xs[0], xs[1]),
        _ => return Err(shape_err("cross_entropy", format!("rank {}", xs.len()))),
    };
    if labels.is_empty() {
        return Err(Error::EmptyInput("cross_entropy labels"));
    }
    if labels.len() != rows {
        return Err(shape_err(
            "cross_entropy",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(shape_err(
            "cross_entropy",
            format!("label {bad} out of range for {cols} classes"),
        ));
    }
    let xd = g.value(logits).data();
    let mut total = 0.0;
    for r in 0..rows {
        let row = &xd[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsumexp = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += logsumexp - row[labels[r]];
    }
    let value = Tensor::scalar(total / rows as f64);
    Ok(g.push(
        value,
        vec![logits],
        Box::new(CrossEntropy {
            labels: labels.to_vec(),
            rows,
            cols,
        }),
    ))
}

impl OpBackward for CrossEntropy {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let xd = parents[0].data();
            let gscale = out_grad.item() / self.rows as f64;
            let mut dx = vec![0.0; xd.len()];
            for r in 0..self.rows {
                let row = &xd[r * self.cols..(r + 1) * self.cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for i in 0..self.cols {
                    let p = (row[i] - m).exp() / denom;
                    let onehot = if i == self.labels[r] { 1.0 } else { 0.0 };
                    dx[r * self.cols + i] = gscale * (p - onehot);
                }
            }
            Tensor::from_vec(parents[0].shape(), dx).unwrap()
        })]
    }
}

struct SiSnrLoss {
    ref_zero_mean: Vec<f64>,
    ref_energy: f64,
}

/// Negative SI-SDR of a rank-1 estimate against a fixed reference. The
/// forward value equals `signal::sisnr_loss` on the same samples; the
/// epsilon stabilizer is treated as constant in the backward pass (its
/// contribution is O(1e-8) relative).
pub fn sisnr_loss(g: &mut Graph, estimate: Var, reference: &[f64]) -> Result<Var> {
    let xs = g.value(estimate).shape().to_vec();
    if xs.len() != 1 || xs[0] != reference.len() {
        return Err(shape_err(
            "sisnr_loss",
            format!("estimate {xs:?} vs reference [{}]", reference.len()),
        ));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("sisnr_loss reference"));
    }
    let rmean = reference.iter().sum::<f64>() / reference.len() as f64;
    let refc: Vec<f64> = reference.iter().map(|x| x - rmean).collect();
    let ref_energy: f64 = refc.iter().map(|x| x * x).sum();
    if ref_energy / refc.len() as f64 <= crate::signal::SILENCE_FLOOR {
        return Err(Error::SilentSignal {
            context: "sisnr_loss reference (after zero-mean)",
            power: ref_energy / refc.len() as f64,
        });
    }
    let (loss, _) = sisnr_forward(g.value(estimate).data(), &refc, ref_energy);
    let value = Tensor::scalar(loss);
    Ok(g.push(
        value,
        vec![estimate],
        Box::new(SiSnrLoss {
            ref_zero_mean: refc,
            ref_energy,
        }),
    ))
}

fn sisnr_forward(est: &[f64], refc: &[f64], ref_energy: f64) -> (f64, SiSnrParts) {
    let emean = est.iter().sum::<f64>() / est.len() as f64;
    let u: Vec<f64> = est.iter().map(|x| x - emean).collect();
    let dot: f64 = u.iter().zip(refc).map(|(e, r)| e * r).sum();
    let alpha = dot / ref_energy;
    let signal_energy = alpha * alpha * ref_energy;
    let error: Vec<f64> = u.iter().zip(refc).map(|(e, r)| alpha * r - e).collect();
    let error_energy: f64 = error.iter().map(|d| d * d).sum();
    let loss = -si_sdr_from_energies(signal_energy, error_energy);
    (
        loss,
        SiSnrParts {
            u_alpha: alpha,
            error,
            signal_energy,
            error_energy,
        },
    )
}

struct SiSnrParts {
    u_alpha: f64,
    error: Vec<f64>,
    signal_energy: f64,
    error_energy: f64,
}

impl OpBackward for SiSnrLoss {
    fn backward(
        &self,
        _node_value: &Tensor,
        parents: &[&Tensor],
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let est = parents[0].data();
            let (_, parts) = sisnr_forward(est, &self.ref_zero_mean, self.ref_energy);
            let m = parts.signal_energy.max(parts.error_energy);
            let num = parts.signal_energy + SI_SDR_EPS * m;
            let den = parts.error_energy + SI_SDR_EPS * m;
            let k = 10.0 / std::f64::consts::LN_10;
            // L = -k (ln num - ln den); dN/du = 2 alpha r; dD/du = -2 e
            // (error is orthogonal to the reference).
            let gscale = out_grad.item();
            let mut du: Vec<f64> = self
                .ref_zero_mean
                .iter()
                .zip(&parts.error)
                .map(|(r, e)| {
                    gscale * (-k) * (2.0 * parts.u_alpha * r / num + 2.0 * e / den)
                })
                .collect();
            let mean = du.iter().sum::<f64>() / du.len() as f64;
            for v in &mut du {
                *v -= mean;
            }
            Tensor::from_vec(parents[0].shape(), du).unwrap()
        })]
    }
}
