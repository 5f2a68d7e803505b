//! Reverse-mode differentiation via a Wengert tape.
//!
//! A [`GradTape`] records one forward pass as a linear sequence of nodes,
//! each holding its materialized value and the op that produced it.
//! `backward` walks the tape in reverse and accumulates gradients into
//! every node that (transitively) depends on a `requires_grad` leaf.
//!
//! A tape is confined to one forward/backward pass on one thread;
//! parallelism happens at episode granularity, one tape per episode.

use crate::error::{Error, Result};
use crate::tensor::{
    bilinear_taps, relu_scalar, resize_bilinear, resize_nearest, sigmoid_scalar, Tensor, EPS_BCE,
    EPS_MASK,
};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

/// How the second operand of an elementwise op maps onto the first.
/// Only the two expansions the pipeline needs exist; anything else is a
/// shape error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Shapes equal.
    None,
    /// b: [C] against a: [C,H,W] (prototype and bias expansion).
    Channel,
    /// b: [H,W] against a: [C,H,W] (mask expansion over channels).
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Elementwise { kind: EwKind, a: ValId, b: ValId, bc: Broadcast },
    Matmul { a: ValId, b: ValId },
    Conv2d { x: ValId, w: ValId, b: ValId, dilation: usize },
    Conv1d { x: ValId, w: ValId, b: ValId },
    DepthwiseDynamic { x: ValId, ker: ValId },
    MaskedAvgPool { x: ValId, m: ValId },
    AdaptivePool1d { x: ValId },
    Relu { x: ValId },
    Sigmoid { x: ValId },
    ResizeNearest { x: ValId },
    ResizeBilinear { x: ValId },
    Subsample { x: ValId, stride: usize },
    Reshape { x: ValId },
    ExpandChannel { x: ValId },
    Concat0 { xs: Vec<ValId> },
    ExtractFg { x: ValId, m: ValId, positions: Vec<usize> },
    BceMean { pred: ValId, target: Tensor },
    SumAll { x: ValId },
    Mean { x: ValId },
    Scale { x: ValId, c: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> ValId {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        ValId(self.nodes.len() - 1)
    }

    fn needs(&self, id: ValId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record an input. Gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> ValId {
        let needs = t.requires_grad;
        self.push(t, Op::Leaf, needs)
    }

    /// Record an input that never receives a gradient (stop-gradient).
    pub fn constant(&mut self, mut t: Tensor) -> ValId {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Gradient of the last backward pass w.r.t. this node, if tracked.
    pub fn grad(&self, id: ValId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    // ── Elementwise with the two broadcast rules ─────────────────────

    fn detect_broadcast(&self, op: &'static str, a: ValId, b: ValId) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Broadcast::None);
        }
        if sa.len() == 3 && sb.len() == 1 && sb[0] == sa[0] {
            return Ok(Broadcast::Channel);
        }
        if sa.len() == 3 && sb.len() == 2 && sb == &sa[1..] {
            return Ok(Broadcast::Spatial);
        }
        Err(shape_err(op, format!("{sa:?} vs {sb:?}: no broadcast rule applies")))
    }

    fn elementwise(&mut self, kind: EwKind, a: ValId, b: ValId) -> Result<ValId> {
        let op_name = match kind {
            EwKind::Add => "add",
            EwKind::Sub => "sub",
            EwKind::Mul => "mul",
        };
        let bc = self.detect_broadcast(op_name, a, b)?;
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let mut out = vec![0.0; ta.numel()];
        let apply = |x: f64, y: f64| match kind {
            EwKind::Add => x + y,
            EwKind::Sub => x - y,
            EwKind::Mul => x * y,
        };
        match bc {
            Broadcast::None => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = apply(ta.data[i], tb.data[i]);
                }
            }
            Broadcast::Channel => {
                let (c, h, w) = ta.dims3();
                let hw = h * w;
                for ch in 0..c {
                    let y = tb.data[ch];
                    for i in 0..hw {
                        out[ch * hw + i] = apply(ta.data[ch * hw + i], y);
                    }
                }
            }
            Broadcast::Spatial => {
                let (c, h, w) = ta.dims3();
                let hw = h * w;
                for ch in 0..c {
                    for i in 0..hw {
                        out[ch * hw + i] = apply(ta.data[ch * hw + i], tb.data[i]);
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(self.shape(a).to_vec(), out);
        Ok(self.push(value, Op::Elementwise { kind, a, b, bc }, needs))
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.elementwise(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.elementwise(EwKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.elementwise(EwKind::Mul, a, b)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let ta = &self.nodes[a.0].value.data;
        let tb = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        matmul_into(ta, tb, &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Matmul { a, b }, needs))
    }

    // ── Convolutions ─────────────────────────────────────────────────

    /// Zero-padded same-size cross-correlation with dilation.
    /// x: [Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout].
    pub fn conv2d(&mut self, x: ValId, w: ValId, bias: ValId, dilation: usize) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(shape_err("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, wcin, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::NonOddKernel { kh, kw });
        }
        if wcin != cin {
            return Err(shape_err("conv2d", format!("x has {cin} channels, w expects {wcin}")));
        }
        if sb != [cout] {
            return Err(shape_err("conv2d", format!("bias {sb:?}, want [{cout}]")));
        }
        assert!(dilation >= 1);
        let tx = &self.nodes[x.0].value.data;
        let tw = &self.nodes[w.0].value.data;
        let tb = &self.nodes[bias.0].value.data;
        let mut out = vec![0.0; cout * h * wd];
        for co in 0..cout {
            let plane = &mut out[co * h * wd..(co + 1) * h * wd];
            plane.fill(tb[co]);
            for ci in 0..cin {
                let xin = &tx[ci * h * wd..(ci + 1) * h * wd];
                let wbase = ((co * cin) + ci) * kh * kw;
                conv_plane_accum(xin, &tw[wbase..wbase + kh * kw], plane, h, wd, kh, kw, dilation);
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(
            Tensor::new(vec![cout, h, wd], out),
            Op::Conv2d { x, w, b: bias, dilation },
            needs,
        ))
    }

    /// Same-padded 1D convolution over the row axis of a [N,C] sequence.
    /// w: [Cout,Cin,k], bias: [Cout]; output [N,Cout].
    pub fn conv1d(&mut self, x: ValId, w: ValId, bias: ValId) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] {
            return Err(shape_err("conv1d", format!("x {sx:?}, w {sw:?}")));
        }
        let (n, cin) = (sx[0], sx[1]);
        let (cout, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::NonOddKernel { kh: k, kw: 1 });
        }
        if self.shape(bias) != [cout] {
            return Err(shape_err("conv1d", "bad bias shape".into()));
        }
        let half = (k - 1) / 2;
        let tx = &self.nodes[x.0].value.data;
        let tw = &self.nodes[w.0].value.data;
        let tb = &self.nodes[bias.0].value.data;
        let mut out = vec![0.0; n * cout];
        for t in 0..n {
            for co in 0..cout {
                let mut acc = tb[co];
                for dk in 0..k {
                    let src = t as isize + dk as isize - half as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ci in 0..cin {
                        acc += tx[src * cin + ci] * tw[(co * cin + ci) * k + dk];
                    }
                }
                out[t * cout + co] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![n, cout], out), Op::Conv1d { x, w, b: bias }, needs))
    }

    /// Depthwise convolution where each channel has its own kernel slice.
    /// x: [C,H,W], ker: [kh,kw,C]; gradient flows into both inputs.
    pub fn depthwise_conv2d_dynamic(&mut self, x: ValId, ker: ValId) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(ker).to_vec();
        if sx.len() != 3 || sk.len() != 3 {
            return Err(shape_err("depthwise_conv2d_dynamic", format!("x {sx:?}, ker {sk:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kc) = (sk[0], sk[1], sk[2]);
        if kc != c {
            return Err(Error::ChannelMismatch { expected: c, got: kc });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::NonOddKernel { kh, kw });
        }
        let tx = &self.nodes[x.0].value.data;
        let tk = &self.nodes[ker.0].value.data;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let xin = &tx[ch * h * w..(ch + 1) * h * w];
            let plane = &mut out[ch * h * w..(ch + 1) * h * w];
            // Kernel slice for this channel is strided: ker[i,j,ch].
            let mut kflat = vec![0.0; kh * kw];
            for (i, kv) in kflat.iter_mut().enumerate() {
                *kv = tk[i * c + ch];
            }
            conv_plane_accum(xin, &kflat, plane, h, w, kh, kw, 1);
        }
        let needs = self.needs(x) || self.needs(ker);
        Ok(self.push(Tensor::new(vec![c, h, w], out), Op::DepthwiseDynamic { x, ker }, needs))
    }

    // ── Pooling ──────────────────────────────────────────────────────

    /// p[c] = sum_hw x[c,h,w] m[h,w] / sum_hw m[h,w]. Differentiable in
    /// both arguments (the mask may be a predicted soft mask).
    pub fn masked_avg_pool(&mut self, x: ValId, m: ValId) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        let sm = self.shape(m).to_vec();
        if sx.len() != 3 || sm != sx[1..] {
            return Err(shape_err("masked_avg_pool", format!("x {sx:?}, m {sm:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let tm = &self.nodes[m.0].value.data;
        let s: f64 = tm.iter().sum();
        if s < EPS_MASK {
            return Err(Error::EmptyMask);
        }
        let tx = &self.nodes[x.0].value.data;
        let hw = h * w;
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let plane = &tx[ch * hw..(ch + 1) * hw];
            out[ch] = plane.iter().zip(tm).map(|(a, b)| a * b).sum::<f64>() / s;
        }
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(Tensor::new(vec![c], out), Op::MaskedAvgPool { x, m }, needs))
    }

    /// Adaptive 1D pooling over the row axis of [N,C].
    /// N >= target: contiguous-bin averages; N < target: nearest repetition.
    pub fn adaptive_pool1d(&mut self, x: ValId, target: usize) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(shape_err("adaptive_pool1d", format!("x {sx:?}")));
        }
        assert!(target >= 1 && sx[0] >= 1);
        let (n, c) = (sx[0], sx[1]);
        let tx = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; target * c];
        if n >= target {
            for i in 0..target {
                let (lo, hi) = pool_bin(i, n, target);
                let inv = 1.0 / (hi - lo) as f64;
                for row in lo..hi {
                    for ch in 0..c {
                        out[i * c + ch] += tx[row * c + ch];
                    }
                }
                for ch in 0..c {
                    out[i * c + ch] *= inv;
                }
            }
        } else {
            for i in 0..target {
                let src = i * n / target;
                out[i * c..(i + 1) * c].copy_from_slice(&tx[src * c..(src + 1) * c]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![target, c], out), Op::AdaptivePool1d { x }, needs))
    }

    // ── Activations / shape ops ──────────────────────────────────────

    pub fn relu(&mut self, x: ValId) -> ValId {
        let t = &self.nodes[x.0].value;
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| relu_scalar(v)).collect());
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: ValId) -> ValId {
        let t = &self.nodes[x.0].value;
        let value =
            Tensor::new(t.shape.clone(), t.data.iter().map(|&v| sigmoid_scalar(v)).collect());
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn resize_nearest(&mut self, x: ValId, oh: usize, ow: usize) -> ValId {
        let value = resize_nearest(&self.nodes[x.0].value, oh, ow);
        let needs = self.needs(x);
        self.push(value, Op::ResizeNearest { x }, needs)
    }

    pub fn resize_bilinear(&mut self, x: ValId, oh: usize, ow: usize) -> ValId {
        let value = resize_bilinear(&self.nodes[x.0].value, oh, ow);
        let needs = self.needs(x);
        self.push(value, Op::ResizeBilinear { x }, needs)
    }

    /// out[c,i,j] = x[c, i*stride, j*stride].
    pub fn subsample(&mut self, x: ValId, stride: usize) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(shape_err("subsample", format!("x {sx:?}")));
        }
        assert!(stride >= 1);
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let tx = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(ch * oh + i) * ow + j] = tx[(ch * h + i * stride) * w + j * stride];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, oh, ow], out), Op::Subsample { x, stride }, needs))
    }

    pub fn reshape(&mut self, x: ValId, shape: Vec<usize>) -> Result<ValId> {
        let t = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", t.shape)));
        }
        let value = Tensor::new(shape, t.data.clone());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// Broadcast a [C] vector to a materialized [C,H,W] field.
    pub fn expand_channel(&mut self, x: ValId, h: usize, w: usize) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 {
            return Err(shape_err("expand_channel", format!("x {sx:?}")));
        }
        let c = sx[0];
        let tx = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            out[ch * h * w..(ch + 1) * h * w].fill(tx[ch]);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, h, w], out), Op::ExpandChannel { x }, needs))
    }

    /// Concatenate along axis 0: [Ci,H,W] channel blocks or [Ni,C] row
    /// blocks; trailing dims must agree.
    pub fn concat0(&mut self, xs: &[ValId]) -> Result<ValId> {
        assert!(!xs.is_empty());
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut head = 0;
        for &id in xs {
            let s = self.shape(id);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(shape_err("concat0", format!("block {s:?} vs tail {tail:?}")));
            }
            head += s[0];
        }
        let mut shape = vec![head];
        shape.extend_from_slice(&tail);
        let mut out = Vec::with_capacity(shape.iter().product());
        for &id in xs {
            out.extend_from_slice(&self.nodes[id.0].value.data);
        }
        let needs = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(Tensor::new(shape, out), Op::Concat0 { xs: xs.to_vec() }, needs))
    }

    // ── Foreground extraction ────────────────────────────────────────

    /// Rows of (x ⊗ m) at the given spatial positions, row-major scan
    /// order. Positions are fixed (recorded) data; gradients flow into
    /// the feature entries and the mask weights at those positions.
    pub fn extract_fg_at(&mut self, x: ValId, m: ValId, positions: Vec<usize>) -> Result<ValId> {
        let sx = self.shape(x).to_vec();
        let sm = self.shape(m).to_vec();
        if sx.len() != 3 || sm != sx[1..] {
            return Err(shape_err("extract_fg", format!("x {sx:?}, m {sm:?}")));
        }
        if positions.is_empty() {
            return Err(Error::EmptyForeground);
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let hw = h * w;
        let tx = &self.nodes[x.0].value.data;
        let tm = &self.nodes[m.0].value.data;
        let n = positions.len();
        let mut out = vec![0.0; n * c];
        for (r, &p) in positions.iter().enumerate() {
            assert!(p < hw);
            let weight = tm[p];
            for ch in 0..c {
                out[r * c + ch] = tx[ch * hw + p] * weight;
            }
        }
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(Tensor::new(vec![n, c], out), Op::ExtractFg { x, m, positions }, needs))
    }

    /// Positions where the mask exceeds 1/2, row-major. For binary masks
    /// this is exactly the set of ones.
    pub fn fg_positions(&self, m: ValId) -> Vec<usize> {
        self.nodes[m.0]
            .value
            .data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    // ── Losses and reductions ────────────────────────────────────────

    /// Mean binary cross-entropy against a constant target, with the
    /// prediction clamped to [EPS_BCE, 1-EPS_BCE].
    pub fn bce_mean(&mut self, pred: ValId, target: &Tensor) -> Result<ValId> {
        let sp = self.shape(pred);
        if sp != target.shape {
            return Err(shape_err("bce_mean", format!("{sp:?} vs {:?}", target.shape)));
        }
        let tp = &self.nodes[pred.0].value.data;
        let n = tp.len() as f64;
        let mut acc = 0.0;
        for (&p, &y) in tp.iter().zip(&target.data) {
            let q = p.clamp(EPS_BCE, 1.0 - EPS_BCE);
            acc -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(acc / n),
            Op::BceMean { pred, target: target.clone() },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: ValId) -> ValId {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: ValId) -> ValId {
        let t = &self.nodes[x.0].value;
        let s: f64 = t.data.iter().sum();
        let v = s / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(v), Op::Mean { x }, needs)
    }

    pub fn scale(&mut self, x: ValId, c: f64) -> ValId {
        let t = &self.nodes[x.0].value;
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v * c).collect());
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Resets previous gradients, then
    /// populates a gradient for every requires_grad leaf exactly once
    /// (zeros if the leaf does not influence the loss).
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", lt.shape)));
        }
        if !lt.data[0].is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            // Split borrows: the op is cloned (cheap except ExtractFg /
            // BceMean, which own small vectors).
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.grads[i] = Some(g);
        }

        // Every tracked leaf ends the pass with a populated gradient.
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf)
                && self.nodes[i].needs_grad
                && self.grads[i].is_none()
            {
                self.grads[i] = Some(vec![0.0; self.nodes[i].value.numel()]);
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: ValId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, node: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Elementwise { kind, a, b, bc } => self.bw_elementwise(*kind, *a, *b, *bc, g),
            Op::Matmul { a, b } => self.bw_matmul(*a, *b, g),
            Op::Conv2d { x, w, b, dilation } => self.bw_conv2d(*x, *w, *b, *dilation, g),
            Op::Conv1d { x, w, b } => self.bw_conv1d(*x, *w, *b, g),
            Op::DepthwiseDynamic { x, ker } => self.bw_depthwise(*x, *ker, g),
            Op::MaskedAvgPool { x, m } => self.bw_masked_pool(node, *x, *m, g),
            Op::AdaptivePool1d { x } => self.bw_adaptive_pool(node, *x, g),
            Op::Relu { x } => {
                let xd = self.nodes[x.0].value.data.clone();
                self.accum(*x, |dx| {
                    for (i, gv) in g.iter().enumerate() {
                        if xd[i] > 0.0 {
                            dx[i] += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                let yd = self.nodes[node].value.data.clone();
                self.accum(*x, |dx| {
                    for (i, gv) in g.iter().enumerate() {
                        dx[i] += gv * yd[i] * (1.0 - yd[i]);
                    }
                });
            }
            Op::ResizeNearest { x } => self.bw_resize_nearest(node, *x, g),
            Op::ResizeBilinear { x } => self.bw_resize_bilinear(node, *x, g),
            Op::Subsample { x, stride } => self.bw_subsample(node, *x, *stride, g),
            Op::Reshape { x } => self.accum(*x, |dx| {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }),
            Op::ExpandChannel { x } => {
                let (c, h, w) = self.nodes[node].value.dims3();
                let hw = h * w;
                self.accum(*x, |dx| {
                    for ch in 0..c {
                        dx[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }
            Op::Concat0 { xs } => {
                let tail: usize = self.nodes[node].value.shape[1..].iter().product();
                let mut offset = 0;
                for &id in xs {
                    let head = self.shape(id)[0];
                    let block = &g[offset * tail..(offset + head) * tail];
                    self.accum(id, |dx| {
                        for (d, gv) in dx.iter_mut().zip(block) {
                            *d += gv;
                        }
                    });
                    offset += head;
                }
            }
            Op::ExtractFg { x, m, positions } => self.bw_extract_fg(*x, *m, positions, g),
            Op::BceMean { pred, target } => self.bw_bce(*pred, target, g[0]),
            Op::SumAll { x } => {
                let gv = g[0];
                self.accum(*x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[x.0].value.numel() as f64;
                let gv = g[0] / n;
                self.accum(*x, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(*x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
        }
    }

    fn bw_elementwise(&mut self, kind: EwKind, a: ValId, b: ValId, bc: Broadcast, g: &[f64]) {
        let sa = self.nodes[a.0].value.shape.clone();
        match kind {
            EwKind::Add | EwKind::Sub => {
                self.accum(a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                let sign = if kind == EwKind::Sub { -1.0 } else { 1.0 };
                self.accum_reduced(b, bc, &sa, g, None, sign);
            }
            EwKind::Mul => {
                let bd = self.nodes[b.0].value.data.clone();
                let ad = self.nodes[a.0].value.data.clone();
                match bc {
                    Broadcast::None => {
                        self.accum(a, |da| {
                            for i in 0..g.len() {
                                da[i] += g[i] * bd[i];
                            }
                        });
                        self.accum(b, |db| {
                            for i in 0..g.len() {
                                db[i] += g[i] * ad[i];
                            }
                        });
                    }
                    Broadcast::Channel | Broadcast::Spatial => {
                        let (c, h, w) = (sa[0], sa[1], sa[2]);
                        let hw = h * w;
                        self.accum(a, |da| match bc {
                            Broadcast::Channel => {
                                for ch in 0..c {
                                    for i in 0..hw {
                                        da[ch * hw + i] += g[ch * hw + i] * bd[ch];
                                    }
                                }
                            }
                            _ => {
                                for ch in 0..c {
                                    for i in 0..hw {
                                        da[ch * hw + i] += g[ch * hw + i] * bd[i];
                                    }
                                }
                            }
                        });
                        self.accum_reduced(b, bc, &sa, g, Some(&ad), 1.0);
                    }
                }
            }
        }
    }

    /// Reduce an output-shaped gradient onto a broadcast operand.
    /// With `mul_by` set the product rule applies (grad * other operand).
    fn accum_reduced(
        &mut self,
        b: ValId,
        bc: Broadcast,
        sa: &[usize],
        g: &[f64],
        mul_by: Option<&[f64]>,
        sign: f64,
    ) {
        match bc {
            Broadcast::None => self.accum(b, |db| {
                for i in 0..g.len() {
                    let m = mul_by.map_or(1.0, |a| a[i]);
                    db[i] += sign * g[i] * m;
                }
            }),
            Broadcast::Channel => {
                let (c, h, w) = (sa[0], sa[1], sa[2]);
                let hw = h * w;
                self.accum(b, |db| {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..hw {
                            let m = mul_by.map_or(1.0, |a| a[ch * hw + i]);
                            acc += g[ch * hw + i] * m;
                        }
                        db[ch] += sign * acc;
                    }
                });
            }
            Broadcast::Spatial => {
                let (c, h, w) = (sa[0], sa[1], sa[2]);
                let hw = h * w;
                self.accum(b, |db| {
                    for i in 0..hw {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let m = mul_by.map_or(1.0, |a| a[ch * hw + i]);
                            acc += g[ch * hw + i] * m;
                        }
                        db[i] += sign * acc;
                    }
                });
            }
        }
    }

    fn bw_matmul(&mut self, a: ValId, b: ValId, g: &[f64]) {
        let (m, k) = {
            let s = self.shape(a);
            (s[0], s[1])
        };
        let n = self.shape(b)[1];
        let ad = self.nodes[a.0].value.data.clone();
        let bd = self.nodes[b.0].value.data.clone();
        // dA = g . B^T
        self.accum(a, |da| {
            for i in 0..m {
                for j in 0..n {
                    let gv = g[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for t in 0..k {
                        da[i * k + t] += gv * bd[t * n + j];
                    }
                }
            }
        });
        // dB = A^T . g
        self.accum(b, |db| {
            for i in 0..m {
                for t in 0..k {
                    let av = ad[i * k + t];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[t * n + j] += av * g[i * n + j];
                    }
                }
            }
        });
    }

    fn bw_conv2d(&mut self, x: ValId, w: ValId, b: ValId, dilation: usize, g: &[f64]) {
        let (cin, h, wd) = self.nodes[x.0].value.dims3();
        let sw = self.shape(w).to_vec();
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let xd = self.nodes[x.0].value.data.clone();
        let wd_data = self.nodes[w.0].value.data.clone();
        let hw = h * wd;
        self.accum(x, |dx| {
            for co in 0..cout {
                let gp = &g[co * hw..(co + 1) * hw];
                for ci in 0..cin {
                    let wbase = (co * cin + ci) * kh * kw;
                    // dx[ci, y+di, x+dj] += g[co,y,x] * w  — a scatter with
                    // the same footprint as the forward gather.
                    conv_plane_scatter(
                        gp,
                        &wd_data[wbase..wbase + kh * kw],
                        &mut dx[ci * hw..(ci + 1) * hw],
                        h,
                        wd,
                        kh,
                        kw,
                        dilation,
                    );
                }
            }
        });
        self.accum(w, |dw| {
            for co in 0..cout {
                let gp = &g[co * hw..(co + 1) * hw];
                for ci in 0..cin {
                    let xin = &xd[ci * hw..(ci + 1) * hw];
                    let wbase = (co * cin + ci) * kh * kw;
                    conv_weight_grad(
                        xin,
                        gp,
                        &mut dw[wbase..wbase + kh * kw],
                        h,
                        wd,
                        kh,
                        kw,
                        dilation,
                    );
                }
            }
        });
        self.accum(b, |db| {
            for co in 0..cout {
                db[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
        });
    }

    fn bw_conv1d(&mut self, x: ValId, w: ValId, b: ValId, g: &[f64]) {
        let (n, cin) = {
            let s = self.shape(x);
            (s[0], s[1])
        };
        let sw = self.shape(w).to_vec();
        let (cout, k) = (sw[0], sw[2]);
        let half = (k - 1) / 2;
        let xd = self.nodes[x.0].value.data.clone();
        let wdata = self.nodes[w.0].value.data.clone();
        self.accum(x, |dx| {
            for t in 0..n {
                for co in 0..cout {
                    let gv = g[t * cout + co];
                    if gv == 0.0 {
                        continue;
                    }
                    for dk in 0..k {
                        let src = t as isize + dk as isize - half as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ci in 0..cin {
                            dx[src * cin + ci] += gv * wdata[(co * cin + ci) * k + dk];
                        }
                    }
                }
            }
        });
        self.accum(w, |dw| {
            for t in 0..n {
                for co in 0..cout {
                    let gv = g[t * cout + co];
                    if gv == 0.0 {
                        continue;
                    }
                    for dk in 0..k {
                        let src = t as isize + dk as isize - half as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ci in 0..cin {
                            dw[(co * cin + ci) * k + dk] += gv * xd[src * cin + ci];
                        }
                    }
                }
            }
        });
        self.accum(b, |db| {
            for t in 0..n {
                for co in 0..cout {
                    db[co] += g[t * cout + co];
                }
            }
        });
    }

    fn bw_depthwise(&mut self, x: ValId, ker: ValId, g: &[f64]) {
        let (c, h, w) = self.nodes[x.0].value.dims3();
        let sk = self.shape(ker).to_vec();
        let (kh, kw) = (sk[0], sk[1]);
        let xd = self.nodes[x.0].value.data.clone();
        let kd = self.nodes[ker.0].value.data.clone();
        let hw = h * w;
        self.accum(x, |dx| {
            for ch in 0..c {
                let gp = &g[ch * hw..(ch + 1) * hw];
                let mut kflat = vec![0.0; kh * kw];
                for (i, kv) in kflat.iter_mut().enumerate() {
                    *kv = kd[i * c + ch];
                }
                conv_plane_scatter(gp, &kflat, &mut dx[ch * hw..(ch + 1) * hw], h, w, kh, kw, 1);
            }
        });
        self.accum(ker, |dk| {
            for ch in 0..c {
                let gp = &g[ch * hw..(ch + 1) * hw];
                let xin = &xd[ch * hw..(ch + 1) * hw];
                let mut kgrad = vec![0.0; kh * kw];
                conv_weight_grad(xin, gp, &mut kgrad, h, w, kh, kw, 1);
                for (i, kv) in kgrad.iter().enumerate() {
                    dk[i * c + ch] += kv;
                }
            }
        });
    }

    fn bw_masked_pool(&mut self, node: usize, x: ValId, m: ValId, g: &[f64]) {
        let (c, h, w) = self.nodes[x.0].value.dims3();
        let hw = h * w;
        let md = self.nodes[m.0].value.data.clone();
        let xd = self.nodes[x.0].value.data.clone();
        let pd = self.nodes[node].value.data.clone();
        let s: f64 = md.iter().sum();
        self.accum(x, |dx| {
            for ch in 0..c {
                let gv = g[ch] / s;
                for i in 0..hw {
                    dx[ch * hw + i] += gv * md[i];
                }
            }
        });
        self.accum(m, |dm| {
            for i in 0..hw {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += g[ch] * (xd[ch * hw + i] - pd[ch]);
                }
                dm[i] += acc / s;
            }
        });
    }

    fn bw_adaptive_pool(&mut self, node: usize, x: ValId, g: &[f64]) {
        let (n, c) = {
            let s = self.shape(x);
            (s[0], s[1])
        };
        let target = self.nodes[node].value.shape[0];
        self.accum(x, |dx| {
            if n >= target {
                for i in 0..target {
                    let (lo, hi) = pool_bin(i, n, target);
                    let inv = 1.0 / (hi - lo) as f64;
                    for row in lo..hi {
                        for ch in 0..c {
                            dx[row * c + ch] += g[i * c + ch] * inv;
                        }
                    }
                }
            } else {
                for i in 0..target {
                    let src = i * n / target;
                    for ch in 0..c {
                        dx[src * c + ch] += g[i * c + ch];
                    }
                }
            }
        });
    }

    fn bw_resize_nearest(&mut self, node: usize, x: ValId, g: &[f64]) {
        let t = &self.nodes[x.0].value;
        let (c, h, w) = if t.rank() == 2 { (1, t.shape[0], t.shape[1]) } else { t.dims3() };
        let os = &self.nodes[node].value.shape;
        let (oh, ow) = if os.len() == 2 { (os[0], os[1]) } else { (os[1], os[2]) };
        self.accum(x, |dx| {
            for ch in 0..c {
                for i in 0..oh {
                    let si = i * h / oh;
                    for j in 0..ow {
                        let sj = j * w / ow;
                        dx[(ch * h + si) * w + sj] += g[(ch * oh + i) * ow + j];
                    }
                }
            }
        });
    }

    fn bw_resize_bilinear(&mut self, node: usize, x: ValId, g: &[f64]) {
        let t = &self.nodes[x.0].value;
        let (c, h, w) = if t.rank() == 2 { (1, t.shape[0], t.shape[1]) } else { t.dims3() };
        let os = &self.nodes[node].value.shape;
        let (oh, ow) = if os.len() == 2 { (os[0], os[1]) } else { (os[1], os[2]) };
        self.accum(x, |dx| {
            for ch in 0..c {
                for i in 0..oh {
                    let (i0, i1, fi) = bilinear_taps(i, oh, h);
                    for j in 0..ow {
                        let (j0, j1, fj) = bilinear_taps(j, ow, w);
                        let gv = g[(ch * oh + i) * ow + j];
                        dx[(ch * h + i0) * w + j0] += gv * (1.0 - fi) * (1.0 - fj);
                        dx[(ch * h + i0) * w + j1] += gv * (1.0 - fi) * fj;
                        dx[(ch * h + i1) * w + j0] += gv * fi * (1.0 - fj);
                        dx[(ch * h + i1) * w + j1] += gv * fi * fj;
                    }
                }
            }
        });
    }

    fn bw_subsample(&mut self, node: usize, x: ValId, stride: usize, g: &[f64]) {
        let (c, h, w) = self.nodes[x.0].value.dims3();
        let (_, oh, ow) = self.nodes[node].value.dims3();
        self.accum(x, |dx| {
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        dx[(ch * h + i * stride) * w + j * stride] += g[(ch * oh + i) * ow + j];
                    }
                }
            }
        });
    }

    fn bw_extract_fg(&mut self, x: ValId, m: ValId, positions: &[usize], g: &[f64]) {
        let (c, h, w) = self.nodes[x.0].value.dims3();
        let hw = h * w;
        let md = self.nodes[m.0].value.data.clone();
        let xd = self.nodes[x.0].value.data.clone();
        self.accum(x, |dx| {
            for (r, &p) in positions.iter().enumerate() {
                let weight = md[p];
                for ch in 0..c {
                    dx[ch * hw + p] += g[r * c + ch] * weight;
                }
            }
        });
        self.accum(m, |dm| {
            for (r, &p) in positions.iter().enumerate() {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += g[r * c + ch] * xd[ch * hw + p];
                }
                dm[p] += acc;
            }
        });
    }

    fn bw_bce(&mut self, pred: ValId, target: &Tensor, g: f64) {
        let pd = self.nodes[pred.0].value.data.clone();
        let n = pd.len() as f64;
        self.accum(pred, |dp| {
            for (i, (&p, &y)) in pd.iter().zip(&target.data).enumerate() {
                // Clamped region carries no gradient, matching finite
                // differences of the clamped loss.
                if p > EPS_BCE && p < 1.0 - EPS_BCE {
                    dp[i] += g * (p - y) / (p * (1.0 - p) * n);
                }
            }
        });
    }
}

/// Contiguous bin [lo, hi) for adaptive pooling.
fn pool_bin(i: usize, n: usize, target: usize) -> (usize, usize) {
    (i * n / target, (i + 1) * n / target)
}

/// Valid output range [lo, hi) such that adding `d` stays in [0, len).
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0);
    let hi = (len as isize - d.max(0)).max(lo);
    (lo as usize, hi as usize)
}

/// out += x (cross-)correlated with a kh x kw kernel, same padding.
/// Kernel-outer, position-inner: the inner loops are contiguous runs.
#[allow(clippy::too_many_arguments)]
fn conv_plane_accum(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
) {
    let ch = ((kh - 1) / 2) as isize;
    let cw = ((kw - 1) / 2) as isize;
    for i in 0..kh {
        let di = (i as isize - ch) * dilation as isize;
        let (y0, y1) = valid_range(di, h);
        for j in 0..kw {
            let kv = k[i * kw + j];
            if kv == 0.0 {
                continue;
            }
            let dj = (j as isize - cw) * dilation as isize;
            let (x0, x1) = valid_range(dj, w);
            for y in y0..y1 {
                let src_row = (y as isize + di) as usize * w;
                let dst_row = y * w;
                for xx in x0..x1 {
                    out[dst_row + xx] += kv * x[(src_row as isize + xx as isize + dj) as usize];
                }
            }
        }
    }
}

/// dx[p + delta] += g[p] * k[delta]: transpose of `conv_plane_accum`.
#[allow(clippy::too_many_arguments)]
fn conv_plane_scatter(
    g: &[f64],
    k: &[f64],
    dx: &mut [f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
) {
    let ch = ((kh - 1) / 2) as isize;
    let cw = ((kw - 1) / 2) as isize;
    for i in 0..kh {
        let di = (i as isize - ch) * dilation as isize;
        let (y0, y1) = valid_range(di, h);
        for j in 0..kw {
            let kv = k[i * kw + j];
            if kv == 0.0 {
                continue;
            }
            let dj = (j as isize - cw) * dilation as isize;
            let (x0, x1) = valid_range(dj, w);
            for y in y0..y1 {
                let src_row = (y as isize + di) as usize * w;
                let g_row = y * w;
                for xx in x0..x1 {
                    dx[(src_row as isize + xx as isize + dj) as usize] += kv * g[g_row + xx];
                }
            }
        }
    }
}

/// dk[delta] += sum_p g[p] * x[p + delta].
#[allow(clippy::too_many_arguments)]
fn conv_weight_grad(
    x: &[f64],
    g: &[f64],
    dk: &mut [f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
) {
    let ch = ((kh - 1) / 2) as isize;
    let cw = ((kw - 1) / 2) as isize;
    for i in 0..kh {
        let di = (i as isize - ch) * dilation as isize;
        let (y0, y1) = valid_range(di, h);
        for j in 0..kw {
            let dj = (j as isize - cw) * dilation as isize;
            let (x0, x1) = valid_range(dj, w);
            let mut acc = 0.0;
            for y in y0..y1 {
                let src_row = (y as isize + di) as usize * w;
                let g_row = y * w;
                for xx in x0..x1 {
                    acc += g[g_row + xx] * x[(src_row as isize + xx as isize + dj) as usize];
                }
            }
            dk[i * kw + j] += acc;
        }
    }
}

/// c += a . b for row-major (m,k) x (k,n).
pub fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
