//! Reverse-mode tape over [`Tensor`] values.
//!
//! Ops append nodes in topological order; `backward` walks the tape once in
//! reverse and populates gradients for every `requires_grad` leaf reachable
//! from the loss. Intermediate gradients are freed as soon as they have been
//! consumed to keep the peak footprint down.

use super::kernels as k;
use super::kernels::{GalerkinGrads, GalerkinSaved, LnParams};
use super::scalar::Scalar;
use super::{same_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Value, b: Value },
    Conv2d { x: Value, w: Value, bias: Option<Value>, stride: usize, pad: usize },
    LayerNorm { x: Value, gamma: Value, beta: Value, eps: S },
    Warp { feat: Value, flow: Value },
    Resize { x: Value, oh: usize, ow: usize },
    Add { a: Value, b: Value },
    Sub { a: Value, b: Value },
    Mul { a: Value, b: Value },
    Scale { x: Value, c: S },
    Relu { x: Value },
    LeakyRelu { x: Value, slope: S },
    Sigmoid { x: Value },
    Sum { x: Value },
    Mean { x: Value },
    Charbonnier { pred: Value, target: Value, mask: Option<Value>, eps: S },
    ConcatCh { parts: Vec<Value> },
    ConcatCols { parts: Vec<Value> },
    ImToTokens { x: Value },
    TokensToIm { x: Value, h: usize, w: usize },
    GatherRows { x: Value, idx: Vec<usize> },
    ScaleRows { x: Value, w: Value },
    Galerkin {
        q: Value,
        k: Value,
        v: Value,
        ln_k: Option<(Value, Value)>,
        ln_v: Option<(Value, Value)>,
        eps: S,
        saved: GalerkinSaved<S>,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Execution record for one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Value) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Value) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self, v: Value) {
        self.grads[v.0] = None;
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Value {
        debug_assert!(value.all_finite(), "non-finite values out of {op:?}");
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn ng(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Value {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Value {
        self.push(value, Op::Leaf, false)
    }

    // -- op builders --------------------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        k::matmul(ta.data(), tb.data(), &mut out, m, kk, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, ng))
    }

    /// x[n,C] + bias[C], broadcast over rows.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim(format!("add_bias: {sx:?} + {sb:?}")));
        }
        let c = sx[1];
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(Tensor::new(sx.to_vec(), out)?, Op::Add { a: x, b: bias }, ng))
    }

    pub fn conv2d(
        &mut self,
        x: Value,
        w: Value,
        bias: Option<Value>,
        stride: usize,
        pad: usize,
    ) -> Result<Value> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::dim(format!("conv2d: x {sx:?} w {sw:?}")));
        }
        let (cin, h, wdt) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::contract(format!("conv2d: even kernel {kh}x{kw}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::contract(format!("conv2d: stride {stride} not in {{1,2}}")));
        }
        if kh > h + 2 * pad || kw > wdt + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wdt + 2 * pad
            )));
        }
        if let Some(b) = bias {
            let sb = self.value(b).shape();
            if sb != [cout] {
                return Err(Error::dim(format!("conv2d: bias {sb:?} vs cout {cout}")));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let out = k::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias_data.as_deref(),
            cin,
            h,
            wdt,
            cout,
            kh,
            kw,
            stride,
            pad,
        );
        let oh = k::conv2d_out_dim(h, kh, stride, pad);
        let ow = k::conv2d_out_dim(wdt, kw, stride, pad);
        let ng = self.ng(x) || self.ng(w) || bias.map_or(false, |b| self.ng(b));
        Ok(self.push(
            Tensor::new(vec![cout, oh, ow], out)?,
            Op::Conv2d { x, w, bias, stride, pad },
            ng,
        ))
    }

    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: S) -> Result<Value> {
        let (sx, sg, sb) = (
            self.value(x).shape().to_vec(),
            self.value(gamma).shape().to_vec(),
            self.value(beta).shape().to_vec(),
        );
        if sx.len() != 2 || sx[1] == 0 {
            return Err(Error::dim(format!("layer_norm: x {sx:?}")));
        }
        if sg != [sx[1]] || sb != [sx[1]] {
            return Err(Error::dim(format!("layer_norm: gamma {sg:?} beta {sb:?} vs C {}", sx[1])));
        }
        let out = k::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            sx[0],
            sx[1],
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Tensor::new(sx, out)?, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    pub fn bilinear_warp(&mut self, feat: Value, flow: Value) -> Result<Value> {
        let (sf, sl) = (self.value(feat).shape().to_vec(), self.value(flow).shape().to_vec());
        if sf.len() != 3 || sl.len() != 3 || sl[0] != 2 || sf[1..] != sl[1..] {
            return Err(Error::dim(format!("bilinear_warp: feat {sf:?} flow {sl:?}")));
        }
        let out = k::warp_forward(self.value(feat).data(), self.value(flow).data(), sf[0], sf[1], sf[2]);
        let ng = self.ng(feat) || self.ng(flow);
        Ok(self.push(Tensor::new(sf, out)?, Op::Warp { feat, flow }, ng))
    }

    pub fn bilinear_resize(&mut self, x: Value, oh: usize, ow: usize) -> Result<Value> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::dim(format!("bilinear_resize: {sx:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::dim(format!("bilinear_resize: output {oh}x{ow}")));
        }
        let out = k::resize_forward(self.value(x).data(), sx[0], sx[1], sx[2], oh, ow);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![sx[0], oh, ow], out)?, Op::Resize { x, oh, ow }, ng))
    }

    /// Scale-factor form of resize: output dims ⌊s·H⌋ × ⌊s·W⌋.
    pub fn bilinear_resize_scale(&mut self, x: Value, s: f64) -> Result<Value> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 3 {
            return Err(Error::dim(format!("bilinear_resize: {sx:?}")));
        }
        if s <= 0.0 {
            return Err(Error::contract(format!("bilinear_resize: scale {s} <= 0")));
        }
        let oh = (s * sx[1] as f64).floor() as usize;
        let ow = (s * sx[2] as f64).floor() as usize;
        self.bilinear_resize(x, oh, ow)
    }

    fn binary(&mut self, a: Value, b: Value, op: &str) -> Result<()> {
        same_shape(self.value(a), self.value(b), op)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, "add")?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(self.value(a).shape().to_vec(), out)?, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, "sub")?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(self.value(a).shape().to_vec(), out)?, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, "mul")?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(self.value(a).shape().to_vec(), out)?, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, x: Value, c: S) -> Value {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, c }, ng)
    }

    pub fn relu(&mut self, x: Value) -> Value {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn leaky_relu(&mut self, x: Value, slope: S) -> Value {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { v * slope });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: Value) -> Value {
        let out = self.value(x).map(|v| S::one() / (S::one() + (-v).exp()));
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    pub fn sum(&mut self, x: Value) -> Value {
        let s: S = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Value) -> Value {
        let n = self.value(x).numel();
        let s: S = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s / S::from_f64(n as f64)), Op::Mean { x }, ng)
    }

    /// Charbonnier penalty: mean over elements of sqrt((pred-target)^2 + eps^2).
    /// With a mask, the mean runs over masked elements only:
    /// sum(mask * sqrt(d^2+eps^2)) / sum(mask), so a perfect prediction floors
    /// at exactly eps regardless of the mask.
    pub fn charbonnier(
        &mut self,
        pred: Value,
        target: Value,
        mask: Option<Value>,
        eps: S,
    ) -> Result<Value> {
        self.binary(pred, target, "charbonnier")?;
        if eps <= S::zero() {
            return Err(Error::contract("charbonnier: eps must be > 0"));
        }
        if let Some(m) = mask {
            same_shape(self.value(pred), self.value(m), "charbonnier mask")?;
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let e2 = eps * eps;
        let (num, den) = match mask {
            Some(m) => {
                let md = self.value(m).data();
                let mut num = S::zero();
                let mut den = S::zero();
                for i in 0..p.len() {
                    let d = p[i] - t[i];
                    num += md[i] * (d * d + e2).sqrt();
                    den += md[i];
                }
                (num, den.max(S::one()))
            }
            None => {
                let mut num = S::zero();
                for i in 0..p.len() {
                    let d = p[i] - t[i];
                    num += (d * d + e2).sqrt();
                }
                (num, S::from_f64(p.len() as f64))
            }
        };
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Tensor::scalar(num / den), Op::Charbonnier { pred, target, mask, eps }, ng))
    }

    /// Concatenate [Ci,H,W] tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::dim("concat_channels: no inputs"));
        }
        let (h, w) = {
            let s = self.value(parts[0]).shape();
            if s.len() != 3 {
                return Err(Error::dim(format!("concat_channels: {s:?}")));
            }
            (s[1], s[2])
        };
        let mut ctot = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::dim(format!("concat_channels: {s:?} vs {h}x{w}")));
            }
            ctot += s[0];
        }
        let mut out = Vec::with_capacity(ctot * h * w);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![ctot, h, w], out)?,
            Op::ConcatCh { parts: parts.to_vec() },
            ng,
        ))
    }

    /// Concatenate [m,Ci] tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols: no inputs"));
        }
        let m = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != m {
                return Err(Error::dim(format!("concat_cols: {s:?} vs rows {m}")));
            }
            widths.push(s[1]);
        }
        let ctot: usize = widths.iter().sum();
        let mut out = vec![S::zero(); m * ctot];
        let mut off = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..m {
                out[r * ctot + off..r * ctot + off + wd].copy_from_slice(&d[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(vec![m, ctot], out)?,
            Op::ConcatCols { parts: parts.to_vec() },
            ng,
        ))
    }

    /// [C,H,W] -> [H·W, C] row-major token grid (y outer).
    pub fn im_to_tokens(&mut self, x: Value) -> Result<Value> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("im_to_tokens: {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let n = h * w;
        let mut out = vec![S::zero(); n * c];
        for ci in 0..c {
            for p in 0..n {
                out[p * c + ci] = d[ci * n + p];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::ImToTokens { x }, ng))
    }

    /// [H·W, C] -> [C,H,W].
    pub fn tokens_to_im(&mut self, x: Value, h: usize, w: usize) -> Result<Value> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || s[0] != h * w {
            return Err(Error::dim(format!("tokens_to_im: {s:?} vs {h}x{w}")));
        }
        let c = s[1];
        let d = self.value(x).data();
        let n = h * w;
        let mut out = vec![S::zero(); c * n];
        for p in 0..n {
            for ci in 0..c {
                out[ci * n + p] = d[p * c + ci];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::TokensToIm { x, h, w }, ng))
    }

    /// Gather rows of x[n,C] by index; backward scatter-adds.
    pub fn gather_rows(&mut self, x: Value, idx: Vec<usize>) -> Result<Value> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("gather_rows: {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim(format!("gather_rows: index {bad} out of {n}")));
        }
        let d = self.value(x).data();
        let mut out = vec![S::zero(); idx.len() * c];
        for (r, &i) in idx.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&d[i * c..(i + 1) * c]);
        }
        let m = idx.len();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![m, c], out)?, Op::GatherRows { x, idx }, ng))
    }

    /// Multiply each row of x[m,C] by w[m].
    pub fn scale_rows(&mut self, x: Value, w: Value) -> Result<Value> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 2 || sw != [sx[0]] {
            return Err(Error::dim(format!("scale_rows: x {sx:?} w {sw:?}")));
        }
        let c = sx[1];
        let wd = self.value(w).data().to_vec();
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); xd.len()];
        for r in 0..sx[0] {
            let wv = wd[r];
            for j in 0..c {
                out[r * c + j] = xd[r * c + j] * wv;
            }
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(sx, out)?, Op::ScaleRows { x, w }, ng))
    }

    /// Fused Galerkin attention: z = q · (L_k(k)ᵀ · L_v(v)) / n where L_* is
    /// an optional per-row layer norm with learned affine parameters.
    pub fn galerkin_attend(
        &mut self,
        q: Value,
        kk: Value,
        v: Value,
        ln_k: Option<(Value, Value)>,
        ln_v: Option<(Value, Value)>,
        eps: S,
    ) -> Result<Value> {
        let (sq, sk, sv) = (
            self.value(q).shape().to_vec(),
            self.value(kk).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        if sq.len() != 2 || sq != sk || sq != sv {
            return Err(Error::dim(format!("galerkin_attend: q {sq:?} k {sk:?} v {sv:?}")));
        }
        let (n, c) = (sq[0], sq[1]);
        if n == 0 {
            return Err(Error::dim("galerkin_attend: empty token grid"));
        }
        for (g, b) in [ln_k, ln_v].into_iter().flatten() {
            if self.value(g).shape() != [c] || self.value(b).shape() != [c] {
                return Err(Error::dim("galerkin_attend: layer-norm params must be [C]"));
            }
        }
        let distinct = {
            let mut ids = vec![q.0, kk.0, v.0];
            ids.extend(ln_k.iter().flat_map(|&(g, b)| [g.0, b.0]));
            ids.extend(ln_v.iter().flat_map(|&(g, b)| [g.0, b.0]));
            ids.sort_unstable();
            ids.windows(2).all(|w| w[0] != w[1])
        };
        if !distinct {
            return Err(Error::contract("galerkin_attend: operands must be distinct nodes"));
        }
        let lnk = ln_k.map(|(g, b)| LnParams {
            gamma: self.value(g).data(),
            beta: self.value(b).data(),
            eps,
        });
        let lnv = ln_v.map(|(g, b)| LnParams {
            gamma: self.value(g).data(),
            beta: self.value(b).data(),
            eps,
        });
        let (z, saved) = k::galerkin_forward(
            self.value(q).data(),
            self.value(kk).data(),
            self.value(v).data(),
            n,
            c,
            lnk,
            lnv,
        );
        let ng = self.ng(q)
            || self.ng(kk)
            || self.ng(v)
            || ln_k.map_or(false, |(g, b)| self.ng(g) || self.ng(b))
            || ln_v.map_or(false, |(g, b)| self.ng(g) || self.ng(b));
        Ok(self.push(
            Tensor::new(vec![n, c], z)?,
            Op::Galerkin { q, k: kk, v, ln_k, ln_v, eps, saved },
            ng,
        ))
    }

    // -- backward ------------------------------------------------------------

    fn acc_grad(&mut self, v: Value, delta: &Tensor<S>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta.clone()),
        }
    }

    /// Take the grad buffer for `v` out of the tape, zero-initialized.
    fn take_grad_buf(&mut self, v: Value) -> Tensor<S> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    fn put_grad(&mut self, v: Value, g: Tensor<S>) {
        self.grads[v.0] = Some(g);
    }

    /// Populate gradients of every `requires_grad` leaf reachable from `loss`.
    /// Repeated calls accumulate into existing leaf gradients.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.acc_grad(loss, &Tensor::scalar(S::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor<S>) -> Result<()> {
        // Ops read input values immutably and accumulate into input grads via
        // take/put, which stays correct even when two inputs alias.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul { a, b } => {
                let (m, kk) = {
                    let s = self.value(a).shape();
                    (s[0], s[1])
                };
                let n = self.value(b).shape()[1];
                if self.ng(a) {
                    let mut da = self.take_grad_buf(a);
                    k::gemm_acc(g.data(), false, self.value(b).data(), true, da.data_mut(), m, n, kk, S::one(), S::one());
                    self.put_grad(a, da);
                }
                if self.ng(b) {
                    let mut db = self.take_grad_buf(b);
                    k::gemm_acc(self.value(a).data(), true, g.data(), false, db.data_mut(), kk, m, n, S::one(), S::one());
                    self.put_grad(b, db);
                }
            }
            &Op::Conv2d { x, w, bias, stride, pad } => {
                let (cin, h, wdt) = {
                    let s = self.value(x).shape();
                    (s[0], s[1], s[2])
                };
                let (cout, kh, kw) = {
                    let s = self.value(w).shape();
                    (s[0], s[2], s[3])
                };
                let mut dx = if self.ng(x) { Some(self.take_grad_buf(x)) } else { None };
                let mut dw = if self.ng(w) { Some(self.take_grad_buf(w)) } else { None };
                let mut db = match bias {
                    Some(b) if self.ng(b) => Some(self.take_grad_buf(b)),
                    _ => None,
                };
                k::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g.data(),
                    cin,
                    h,
                    wdt,
                    cout,
                    kh,
                    kw,
                    stride,
                    pad,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    self.put_grad(x, t);
                }
                if let Some(t) = dw {
                    self.put_grad(w, t);
                }
                if let (Some(b), Some(t)) = (bias, db) {
                    self.put_grad(b, t);
                }
            }
            &Op::LayerNorm { x, gamma, beta, eps } => {
                let (n, c) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                let mut dx = self.take_grad_buf(x);
                let mut dg = self.take_grad_buf(gamma);
                let mut db = self.take_grad_buf(beta);
                k::layer_norm_backward(
                    self.value(x).data(),
                    self.value(gamma).data(),
                    eps,
                    g.data(),
                    n,
                    c,
                    dx.data_mut(),
                    dg.data_mut(),
                    db.data_mut(),
                );
                if self.ng(x) {
                    self.put_grad(x, dx);
                }
                if self.ng(gamma) {
                    self.put_grad(gamma, dg);
                }
                if self.ng(beta) {
                    self.put_grad(beta, db);
                }
            }
            &Op::Warp { feat, flow } => {
                let (c, h, w) = {
                    let s = self.value(feat).shape();
                    (s[0], s[1], s[2])
                };
                let mut df = if self.ng(feat) { Some(self.take_grad_buf(feat)) } else { None };
                let mut dl = if self.ng(flow) { Some(self.take_grad_buf(flow)) } else { None };
                k::warp_backward(
                    self.value(feat).data(),
                    self.value(flow).data(),
                    g.data(),
                    c,
                    h,
                    w,
                    df.as_mut().map(|t| t.data_mut()),
                    dl.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = df {
                    self.put_grad(feat, t);
                }
                if let Some(t) = dl {
                    self.put_grad(flow, t);
                }
            }
            &Op::Resize { x, oh, ow } => {
                let (c, h, w) = {
                    let s = self.value(x).shape();
                    (s[0], s[1], s[2])
                };
                let mut dx = self.take_grad_buf(x);
                k::resize_backward(g.data(), c, h, w, oh, ow, dx.data_mut());
                self.put_grad(x, dx);
            }
            &Op::Add { a, b } => {
                // add_bias reuses this op: b may be [C] against a [n,C].
                if self.value(a).shape() == self.value(b).shape() {
                    self.acc_grad(a, g);
                    self.acc_grad(b, g);
                } else {
                    self.acc_grad(a, g);
                    if self.ng(b) {
                        let c = self.value(b).numel();
                        let mut db = self.take_grad_buf(b);
                        for row in g.data().chunks(c) {
                            for (d, &gv) in db.data_mut().iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                        self.put_grad(b, db);
                    }
                }
            }
            &Op::Sub { a, b } => {
                self.acc_grad(a, g);
                if self.ng(b) {
                    let neg = g.map(|v| -v);
                    self.acc_grad(b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                if self.ng(a) {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    self.acc_grad(a, &da);
                }
                if self.ng(b) {
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(self.value(a).data()).map(|(&x, &y)| x * y).collect(),
                    )?;
                    self.acc_grad(b, &db);
                }
            }
            &Op::Scale { x, c } => {
                let dx = g.map(|v| v * c);
                self.acc_grad(x, &dx);
            }
            &Op::Relu { x } => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect(),
                )?;
                self.acc_grad(x, &dx);
            }
            &Op::LeakyRelu { x, slope } => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { gv * slope })
                        .collect(),
                )?;
                self.acc_grad(x, &dx);
            }
            &Op::Sigmoid { x } => {
                let y = &self.nodes[i].value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &s)| gv * s * (S::one() - s))
                        .collect(),
                )?;
                self.acc_grad(x, &dx);
            }
            &Op::Sum { x } => {
                let gv = g.item();
                let dx = Tensor::full(self.value(x).shape(), gv);
                self.acc_grad(x, &dx);
            }
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                let gv = g.item() / S::from_f64(n as f64);
                let dx = Tensor::full(self.value(x).shape(), gv);
                self.acc_grad(x, &dx);
            }
            &Op::Charbonnier { pred, target, mask, eps } => {
                let gv = g.item();
                let p = self.value(pred).data();
                let t = self.value(target).data();
                let e2 = eps * eps;
                let md = mask.map(|m| self.value(m).data().to_vec());
                let den = match &md {
                    Some(m) => {
                        let s: S = m.iter().copied().sum();
                        s.max(S::one())
                    }
                    None => S::from_f64(p.len() as f64),
                };
                let mut dp = vec![S::zero(); p.len()];
                for idx in 0..p.len() {
                    let d = p[idx] - t[idx];
                    let w = md.as_ref().map_or(S::one(), |m| m[idx]);
                    dp[idx] = gv * w * d / (d * d + e2).sqrt() / den;
                }
                let dpt = Tensor::new(self.value(pred).shape().to_vec(), dp)?;
                self.acc_grad(pred, &dpt);
                if self.ng(target) {
                    let dn = dpt.map(|v| -v);
                    self.acc_grad(target, &dn);
                }
            }
            Op::ConcatCh { parts } => {
                let parts = parts.clone();
                let (h, w) = {
                    let s = self.value(parts[0]).shape();
                    (s[1], s[2])
                };
                let mut off = 0;
                for p in parts {
                    let c = self.value(p).shape()[0];
                    if self.ng(p) {
                        let dp = Tensor::new(
                            vec![c, h, w],
                            g.data()[off..off + c * h * w].to_vec(),
                        )?;
                        self.acc_grad(p, &dp);
                    }
                    off += c * h * w;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let m = self.value(parts[0]).shape()[0];
                let ctot = self.nodes[i].value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let c = self.value(p).shape()[1];
                    if self.ng(p) {
                        let mut d = vec![S::zero(); m * c];
                        for r in 0..m {
                            d[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data()[r * ctot + off..r * ctot + off + c]);
                        }
                        self.acc_grad(p, &Tensor::new(vec![m, c], d)?);
                    }
                    off += c;
                }
            }
            &Op::ImToTokens { x } => {
                let (c, h, w) = {
                    let s = self.value(x).shape();
                    (s[0], s[1], s[2])
                };
                let n = h * w;
                let mut d = vec![S::zero(); c * n];
                for p in 0..n {
                    for ci in 0..c {
                        d[ci * n + p] = g.data()[p * c + ci];
                    }
                }
                self.acc_grad(x, &Tensor::new(vec![c, h, w], d)?);
            }
            &Op::TokensToIm { x, h, w } => {
                let c = self.value(x).shape()[1];
                let n = h * w;
                let mut d = vec![S::zero(); n * c];
                for p in 0..n {
                    for ci in 0..c {
                        d[p * c + ci] = g.data()[ci * n + p];
                    }
                }
                self.acc_grad(x, &Tensor::new(vec![n, c], d)?);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let c = self.value(x).shape()[1];
                let mut dx = self.take_grad_buf(x);
                for (r, &isrc) in idx.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    let dst = &mut dx.data_mut()[isrc * c..(isrc + 1) * c];
                    for (d, &gv) in dst.iter_mut().zip(src) {
                        *d += gv;
                    }
                }
                if self.ng(x) {
                    self.put_grad(x, dx);
                }
            }
            &Op::ScaleRows { x, w } => {
                let (m, c) = {
                    let s = self.value(x).shape();
                    (s[0], s[1])
                };
                if self.ng(x) {
                    let wd = self.value(w).data();
                    let mut d = vec![S::zero(); m * c];
                    for r in 0..m {
                        for j in 0..c {
                            d[r * c + j] = g.data()[r * c + j] * wd[r];
                        }
                    }
                    self.acc_grad(x, &Tensor::new(vec![m, c], d)?);
                }
                if self.ng(w) {
                    let xd = self.value(x).data();
                    let mut d = vec![S::zero(); m];
                    for r in 0..m {
                        let mut s = S::zero();
                        for j in 0..c {
                            s += g.data()[r * c + j] * xd[r * c + j];
                        }
                        d[r] = s;
                    }
                    self.acc_grad(w, &Tensor::new(vec![m], d)?);
                }
            }
            Op::Galerkin { q, k: kk, v, ln_k, ln_v, eps, saved } => {
                let (q, kk, v, ln_k, ln_v, eps) = (*q, *kk, *v, *ln_k, *ln_v, *eps);
                let saved = saved.clone();
                let (n, c) = {
                    let s = self.value(q).shape();
                    (s[0], s[1])
                };
                let mut dq = if self.ng(q) { Some(self.take_grad_buf(q)) } else { None };
                let mut dk = if self.ng(kk) { Some(self.take_grad_buf(kk)) } else { None };
                let mut dv = if self.ng(v) { Some(self.take_grad_buf(v)) } else { None };
                let (mut dgk, mut dbk) = match ln_k {
                    Some((gm, bt)) => (Some(self.take_grad_buf(gm)), Some(self.take_grad_buf(bt))),
                    None => (None, None),
                };
                let (mut dgv, mut dbv) = match ln_v {
                    Some((gm, bt)) => (Some(self.take_grad_buf(gm)), Some(self.take_grad_buf(bt))),
                    None => (None, None),
                };
                {
                    let lnk = ln_k.map(|(gm, bt)| LnParams {
                        gamma: self.nodes[gm.0].value.data(),
                        beta: self.nodes[bt.0].value.data(),
                        eps,
                    });
                    let lnv = ln_v.map(|(gm, bt)| LnParams {
                        gamma: self.nodes[gm.0].value.data(),
                        beta: self.nodes[bt.0].value.data(),
                        eps,
                    });
                    let sinks = GalerkinGrads {
                        dq: dq.as_mut().map(|t| t.data_mut()),
                        dk: dk.as_mut().map(|t| t.data_mut()),
                        dv: dv.as_mut().map(|t| t.data_mut()),
                        dgamma_k: dgk.as_mut().map(|t| t.data_mut()),
                        dbeta_k: dbk.as_mut().map(|t| t.data_mut()),
                        dgamma_v: dgv.as_mut().map(|t| t.data_mut()),
                        dbeta_v: dbv.as_mut().map(|t| t.data_mut()),
                    };
                    k::galerkin_backward(
                        self.nodes[q.0].value.data(),
                        self.nodes[kk.0].value.data(),
                        self.nodes[v.0].value.data(),
                        n,
                        c,
                        lnk,
                        lnv,
                        &saved,
                        g.data(),
                        sinks,
                    );
                }
                if let Some(t) = dq {
                    self.put_grad(q, t);
                }
                if let Some(t) = dk {
                    self.put_grad(kk, t);
                }
                if let Some(t) = dv {
                    self.put_grad(v, t);
                }
                if let Some((gm, bt)) = ln_k {
                    if let (Some(dg), Some(db)) = (dgk, dbk) {
                        if self.ng(gm) {
                            self.put_grad(gm, dg);
                        }
                        if self.ng(bt) {
                            self.put_grad(bt, db);
                        }
                    }
                }
                if let Some((gm, bt)) = ln_v {
                    if let (Some(dg), Some(db)) = (dgv, dbv) {
                        if self.ng(gm) {
                            self.put_grad(gm, dg);
                        }
                        if self.ng(bt) {
                            self.put_grad(bt, db);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
