use super::{Tape, Var};
use crate::tensor::{gemm, Tensor};

/// Index mapping from an output of shape `out` to an operand broadcast into
/// it. Operand shapes are left-padded with ones to the output rank.
struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn padded_strides(shape: &[usize], rank: usize, out: &[usize]) -> Vec<usize> {
    let mut padded = vec![1; rank - shape.len()];
    padded.extend_from_slice(shape);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Self {
        let out_shape = broadcast_shape(a, b)
            .unwrap_or_else(|| panic!("shapes {a:?} and {b:?} do not broadcast"));
        let rank = out_shape.len();
        Self {
            a_strides: padded_strides(a, rank, &out_shape),
            b_strides: padded_strides(b, rank, &out_shape),
            out_shape,
        }
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        let total: usize = self.out_shape.iter().product();
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for o in 0..total {
            f(o, ia, ib);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Max => a.max(b),
            BinOp::Min => a.min(b),
        }
    }

    /// Partial derivatives `(∂/∂a, ∂/∂b)`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
            BinOp::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            BinOp::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum UnOp {
    Exp,
    Sigmoid,
    Silu,
    LeakyRelu(f64),
    Atan,
    Square,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
}

impl UnOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnOp::Exp => x.exp(),
            UnOp::Sigmoid => sigmoid(x),
            UnOp::Silu => x * sigmoid(x),
            UnOp::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            UnOp::Atan => x.atan(),
            UnOp::Square => x * x,
            UnOp::Sqrt => x.sqrt(),
            UnOp::Scale(s) => s * x,
            UnOp::AddScalar(s) => x + s,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnOp::Exp => y,
            UnOp::Sigmoid => y * (1.0 - y),
            UnOp::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            UnOp::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            UnOp::Atan => 1.0 / (1.0 + x * x),
            UnOp::Square => 2.0 * x,
            UnOp::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            UnOp::Scale(s) => s,
            UnOp::AddScalar(_) => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn out_hw(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold one `(c, h, w)` image into a `(c·kh·kw) × (oh·ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let ncols = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let ncols = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    fn binary(&mut self, a: Var, b: Var, op: BinOp) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let out = av.zip_map(bv, |x, y| op.apply(x, y));
            return self.push(
                out,
                &[a, b],
                Box::new(move |g, inp, _, needs| {
                    let (x, y) = (inp[0].data(), inp[1].data());
                    let mut ga = needs[0].then(|| vec![0.0; x.len()]);
                    let mut gb = needs[1].then(|| vec![0.0; x.len()]);
                    for i in 0..x.len() {
                        let (pa, pb) = op.partials(x[i], y[i]);
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = g.data()[i] * pa;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = g.data()[i] * pb;
                        }
                    }
                    let shape = inp[0].shape().to_vec();
                    vec![
                        ga.map(|d| Tensor::from_parts(shape.clone(), d)),
                        gb.map(|d| Tensor::from_parts(shape.clone(), d)),
                    ]
                }),
            );
        }
        let bc = Broadcast::new(av.shape(), bv.shape());
        let mut out = vec![0.0; bc.out_shape.iter().product()];
        bc.for_each(|o, ia, ib| out[o] = op.apply(av.data()[ia], bv.data()[ib]));
        let out = Tensor::from_parts(bc.out_shape.clone(), out);
        self.push(
            out,
            &[a, b],
            Box::new(move |g, inp, _, _| {
                let bc = Broadcast::new(inp[0].shape(), inp[1].shape());
                let mut ga = vec![0.0; inp[0].numel()];
                let mut gb = vec![0.0; inp[1].numel()];
                bc.for_each(|o, ia, ib| {
                    let (pa, pb) = op.partials(inp[0].data()[ia], inp[1].data()[ib]);
                    ga[ia] += g.data()[o] * pa;
                    gb[ib] += g.data()[o] * pb;
                });
                vec![
                    Some(Tensor::from_parts(inp[0].shape().to_vec(), ga)),
                    Some(Tensor::from_parts(inp[1].shape().to_vec(), gb)),
                ]
            }),
        )
    }

    /// Elementwise sum with broadcasting over size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Div)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Max)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinOp::Min)
    }

    fn unary(&mut self, x: Var, op: UnOp) -> Var {
        let out = self.value(x).map(|v| op.apply(v));
        self.push(
            out,
            &[x],
            Box::new(move |g, inp, out, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(inp[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * op.derivative(x, y))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnOp::Exp)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnOp::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnOp::Silu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, UnOp::LeakyRelu(slope))
    }

    pub fn atan(&mut self, x: Var) -> Var {
        self.unary(x, UnOp::Atan)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnOp::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnOp::Sqrt)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, UnOp::Scale(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, UnOp::AddScalar(s))
    }

    /// Elementwise `max(x,0) − x·t + ln(1 + e^{−|x|})`: binary cross-entropy
    /// on logits `x` against constant targets `t`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        let out = x.zip_map(targets, |x, t| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
        let targets = targets.clone();
        self.push(
            out,
            &[logits],
            Box::new(move |g, inp, _, _| {
                let data = g
                    .data()
                    .iter()
                    .zip(inp[0].data())
                    .zip(targets.data())
                    .map(|((&g, &x), &t)| g * (sigmoid(x) - t))
                    .collect();
                vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            &[x],
            Box::new(|g, inp, _, _| vec![Some(Tensor::full(inp[0].shape().to_vec(), g.data()[0]))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Same values, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape.to_vec())
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(
            out,
            &[x],
            Box::new(|g, inp, _, _| {
                vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), g.data().to_vec()))]
            }),
        )
    }

    /// Picks `x.data[i]` for each flat index: a 1-D tensor of `indices.len()`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_parts(
            vec![indices.len()],
            indices.iter().map(|&i| xv.data()[i]).collect(),
        );
        let indices = indices.to_vec();
        self.push(
            out,
            &[x],
            Box::new(move |g, inp, _, _| {
                let mut gx = Tensor::zeros(inp[0].shape().to_vec());
                for (k, &i) in indices.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[k];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// 2-D convolution. `w` is `(c_out, c_in, kh, kw)`, `bias` is `(c_out)`;
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let (b, c, h, wd) = self.value(x).dims4();
        let wt = self.value(w);
        let (co, ci, kh, kw) = wt.dims4();
        assert_eq!(ci, c, "conv2d: input has {c} channels, kernel expects {ci}");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than input");
        let (oh, ow) = (out_hw(h, kh, stride, pad), out_hw(wd, kw, stride, pad));
        let kdim = ci * kh * kw;
        let ncols = oh * ow;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; b * co * ncols];
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kdim * ncols] };
        let xd = self.value(x).data();
        for bi in 0..b {
            let xb = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
            let colm: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, c, h, wd, kh, kw, stride, pad, oh, ow, &mut cols);
                &cols
            };
            let ob = &mut out[bi * co * ncols..(bi + 1) * co * ncols];
            if let Some(bv) = bias {
                let bvals = self.value(bv).data();
                for o in 0..co {
                    ob[o * ncols..(o + 1) * ncols].fill(bvals[o]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(co, kdim, ncols, 1.0, wt.data(), false, colm, false, beta, ob);
        }
        let out = Tensor::from_parts(vec![b, co, oh, ow], out);
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(
            out,
            &parents,
            Box::new(move |g, inp, _, needs| {
                let (xv, wv) = (inp[0], inp[1]);
                let xd = xv.data();
                let gd = g.data();
                let mut gx = needs[0].then(|| vec![0.0; xv.numel()]);
                let mut gw = needs[1].then(|| vec![0.0; wv.numel()]);
                let mut cols = vec![0.0; kdim * ncols];
                let mut dcols = vec![0.0; kdim * ncols];
                for bi in 0..b {
                    let xb = &xd[bi * c * h * wd..(bi + 1) * c * h * wd];
                    let gb = &gd[bi * co * ncols..(bi + 1) * co * ncols];
                    if let Some(gw) = gw.as_mut() {
                        let colm: &[f64] = if pointwise {
                            xb
                        } else {
                            im2col(xb, c, h, wd, kh, kw, stride, pad, oh, ow, &mut cols);
                            &cols
                        };
                        gemm(co, ncols, kdim, 1.0, gb, false, colm, true, 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxb = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
                        if pointwise {
                            gemm(kdim, co, ncols, 1.0, wv.data(), true, gb, false, 1.0, gxb);
                        } else {
                            gemm(kdim, co, ncols, 1.0, wv.data(), true, gb, false, 0.0, &mut dcols);
                            col2im(&dcols, c, h, wd, kh, kw, stride, pad, oh, ow, gxb);
                        }
                    }
                }
                let mut grads = vec![
                    gx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                    gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
                ];
                if inp.len() == 3 {
                    let mut gbias = vec![0.0; co];
                    for bi in 0..b {
                        for (o, gbo) in gbias.iter_mut().enumerate() {
                            let s = (bi * co + o) * ncols;
                            *gbo += gd[s..s + ncols].iter().sum::<f64>();
                        }
                    }
                    grads.push(Some(Tensor::from_parts(vec![co], gbias)));
                }
                grads
            }),
        )
    }

    /// Batch normalization with batch statistics over `(batch, h, w)`.
    /// Returns the output together with the batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let n = (b * plane) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                s += xd[base..base + plane].iter().sum::<f64>();
            }
            let m = s / n;
            let mut v = 0.0;
            for bi in 0..b {
                let base = (bi * c + ch) * plane;
                v += xd[base..base + plane].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / n;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let shape = vec![b, c, h, w];
        let out = Tensor::from_parts(shape.clone(), out);
        let inv = inv_std.clone();
        let v = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |gr, inp, _, _| {
                let gd = gr.data();
                let gam = inp[1].data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    let (mut sum_dxh, mut sum_dxh_xh) = (0.0, 0.0);
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            gb[ch] += gd[i];
                            gg[ch] += gd[i] * xhat[i];
                            let dxh = gd[i] * gam[ch];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[i];
                        }
                    }
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            let dxh = gd[i] * gam[ch];
                            gx[i] = inv[ch] / n * (n * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), gx)),
                    Some(Tensor::from_parts(vec![c], gg)),
                    Some(Tensor::from_parts(vec![c], gb)),
                ]
            }),
        );
        (v, mean, var)
    }

    /// Batch normalization with fixed statistics: a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = g[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c, h, w], out);
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |gr, inp, _, _| {
                let (gd, xd, gam) = (gr.data(), inp[0].data(), inp[1].data());
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for i in base..base + plane {
                            gx[i] = gd[i] * gam[ch] * inv_std[ch];
                            gg[ch] += gd[i] * (xd[i] - mean[ch]) * inv_std[ch];
                            gb[ch] += gd[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(inp[0].shape().to_vec(), gx)),
                    Some(Tensor::from_parts(vec![c], gg)),
                    Some(Tensor::from_parts(vec![c], gb)),
                ]
            }),
        )
    }

    /// Global average pooling over the spatial axes: `(b, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let xd = self.value(x).data();
        let out: Vec<f64> = (0..b * c)
            .map(|i| xd[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(
            Tensor::from_parts(vec![b, c, 1, 1], out),
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; b * c * plane];
                for i in 0..b * c {
                    gx[i * plane..(i + 1) * plane].fill(g.data()[i] / plane as f64);
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            }),
        )
    }

    /// Global max pooling over the spatial axes: `(b, c, 1, 1)`. Ties route
    /// the gradient to the first maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let xd = self.value(x).data();
        let mut arg = vec![0usize; b * c];
        let mut out = vec![0.0; b * c];
        for i in 0..b * c {
            let s = &xd[i * plane..(i + 1) * plane];
            let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
            for (k, &v) in s.iter().enumerate() {
                if v > best {
                    best = v;
                    bi = k;
                }
            }
            arg[i] = i * plane + bi;
            out[i] = best;
        }
        self.push(
            Tensor::from_parts(vec![b, c, 1, 1], out),
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; b * c * plane];
                for (i, &a) in arg.iter().enumerate() {
                    gx[a] += g.data()[i];
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            }),
        )
    }

    /// Mean over the channel axis: `(b, 1, h, w)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * plane];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for p in 0..plane {
                    out[bi * plane + p] += xd[base + p];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= c as f64);
        self.push(
            Tensor::from_parts(vec![b, 1, h, w], out),
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; b * c * plane];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for p in 0..plane {
                            gx[base + p] = g.data()[bi * plane + p] / c as f64;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            }),
        )
    }

    /// Max over the channel axis: `(b, 1, h, w)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; b * plane];
        let mut arg = vec![0usize; b * plane];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for p in 0..plane {
                    if xd[base + p] > out[bi * plane + p] {
                        out[bi * plane + p] = xd[base + p];
                        arg[bi * plane + p] = base + p;
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, 1, h, w], out),
            &[x],
            Box::new(move |g, _, _, _| {
                let mut gx = vec![0.0; b * c * plane];
                for (i, &a) in arg.iter().enumerate() {
                    gx[a] += g.data()[i];
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            }),
        )
    }

    /// Concatenate rank-4 tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (b, _, h, w) = self.value(xs[0]).dims4();
        let chans: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let (bb, c, hh, ww) = self.value(v).dims4();
                assert_eq!((bb, hh, ww), (b, h, w), "concat_channels: shape mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (k, &v) in xs.iter().enumerate() {
                let d = self.value(v).data();
                let n = chans[k] * plane;
                out.extend_from_slice(&d[bi * n..(bi + 1) * n]);
            }
        }
        self.push(
            Tensor::from_parts(vec![b, total, h, w], out),
            xs,
            Box::new(move |g, _, _, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(chans.len());
                for (k, &ck) in chans.iter().enumerate() {
                    if needs[k] {
                        let mut gk = Vec::with_capacity(b * ck * plane);
                        for bi in 0..b {
                            let s = (bi * total + offset) * plane;
                            gk.extend_from_slice(&g.data()[s..s + ck * plane]);
                        }
                        grads.push(Some(Tensor::from_parts(vec![b, ck, h, w], gk)));
                    } else {
                        grads.push(None);
                    }
                    offset += ck;
                }
                grads
            }),
        )
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let out = self.value(x).channel_slice(start, len);
        self.push(
            out,
            &[x],
            Box::new(move |g, _, _, _| {
                let plane = h * w;
                let mut gx = vec![0.0; b * c * plane];
                for bi in 0..b {
                    let d = (bi * c + start) * plane;
                    let s = bi * len * plane;
                    gx[d..d + len * plane].copy_from_slice(&g.data()[s..s + len * plane]);
                }
                vec![Some(Tensor::from_parts(vec![b, c, h, w], gx))]
            }),
        )
    }

    /// Pure index permutation: `out.data[i] = x.data[perm[i]]`.
    pub(crate) fn permute_elements(&mut self, x: Var, out_shape: Vec<usize>, perm: Vec<usize>) -> Var {
        let xd = self.value(x).data();
        let out: Vec<f64> = perm.iter().map(|&p| xd[p]).collect();
        self.push(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![0.0; inp[0].numel()];
                for (i, &p) in perm.iter().enumerate() {
                    gx[p] = g.data()[i];
                }
                vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Nearest-neighbour resize: source index `floor(dst · in / out)`.
    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        if (oh, ow) == (h, w) {
            return x;
        }
        let ys: Vec<usize> = (0..oh).map(|y| y * h / oh).collect();
        let xs: Vec<usize> = (0..ow).map(|x| x * w / ow).collect();
        let mut src = Vec::with_capacity(b * c * oh * ow);
        for bc in 0..b * c {
            for &sy in &ys {
                for &sx in &xs {
                    src.push((bc * h + sy) * w + sx);
                }
            }
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = src.iter().map(|&s| xd[s]).collect();
        self.push(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            &[x],
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![0.0; inp[0].numel()];
                for (i, &s) in src.iter().enumerate() {
                    gx[s] += g.data()[i];
                }
                vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Adaptive average pooling to `(oh, ow)` with bins
    /// `[floor(i·in/out), ceil((i+1)·in/out))`.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        if (oh, ow) == (h, w) {
            return x;
        }
        let bins = |n: usize, out: usize| -> Vec<(usize, usize)> {
            (0..out)
                .map(|i| (i * n / out, ((i + 1) * n).div_ceil(out)))
                .collect()
        };
        let (by, bx) = (bins(h, oh), bins(w, ow));
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += xd[(bc * h + y) * w + xx];
                        }
                    }
                    out[(bc * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, c, oh, ow], out),
            &[x],
            Box::new(move |g, inp, _, _| {
                let mut gx = vec![0.0; inp[0].numel()];
                for bc in 0..b * c {
                    for (oy, &(y0, y1)) in by.iter().enumerate() {
                        for (ox, &(x0, x1)) in bx.iter().enumerate() {
                            let gv = g.data()[(bc * oh + oy) * ow + ox]
                                / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gx[(bc * h + y) * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Euclidean distances between spatial positions treated as vertices:
    /// `(b, c, h, w)` → `(b, 1, n, n)` with `n = h·w`. Coincident vertices get
    /// a zero subgradient.
    pub fn pairwise_distance(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4();
        let n = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * n * n];
        for bi in 0..b {
            let xb = &xd[bi * c * n..(bi + 1) * c * n];
            let ob = &mut out[bi * n * n..(bi + 1) * n * n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let mut s = 0.0;
                    for ch in 0..c {
                        let d = xb[ch * n + i] - xb[ch * n + j];
                        s += d * d;
                    }
                    let d = s.sqrt();
                    ob[i * n + j] = d;
                    ob[j * n + i] = d;
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![b, 1, n, n], out),
            &[x],
            Box::new(move |g, inp, out, _| {
                let (xd, dd, gd) = (inp[0].data(), out.data(), g.data());
                let mut gx = vec![0.0; xd.len()];
                let mut s = vec![0.0; n * n];
                let mut row_sum = vec![0.0; n];
                for bi in 0..b {
                    let off = bi * n * n;
                    row_sum.fill(0.0);
                    for i in 0..n {
                        for j in 0..n {
                            let d = dd[off + i * n + j];
                            let v = if i != j && d > 0.0 {
                                (gd[off + i * n + j] + gd[off + j * n + i]) / d
                            } else {
                                0.0
                            };
                            s[i * n + j] = v;
                            row_sum[i] += v;
                        }
                    }
                    let xb = &xd[bi * c * n..(bi + 1) * c * n];
                    let gxb = &mut gx[bi * c * n..(bi + 1) * c * n];
                    // gx = x·diag(rowsum) − x·S   (S symmetric)
                    gemm(c, n, n, -1.0, xb, false, &s, false, 0.0, gxb);
                    for ch in 0..c {
                        for i in 0..n {
                            gxb[ch * n + i] += xb[ch * n + i] * row_sum[i];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(inp[0].shape().to_vec(), gx))]
            }),
        )
    }

    /// Vertex mixing `out[b,c,i] = Σ_j a[b,0,i,j] · v[b,c,j]` where vertices are
    /// the `h·w` spatial positions of `v`.
    pub fn vertex_matmul(&mut self, a: Var, v: Var) -> Var {
        let (b, c, h, w) = self.value(v).dims4();
        let n = h * w;
        let ashape = self.value(a).shape().to_vec();
        assert_eq!(ashape, vec![b, 1, n, n], "vertex_matmul: operator shape");
        let (ad, vd) = (self.value(a).data(), self.value(v).data());
        let mut out = vec![0.0; b * c * n];
        for bi in 0..b {
            gemm(
                c,
                n,
                n,
                1.0,
                &vd[bi * c * n..(bi + 1) * c * n],
                false,
                &ad[bi * n * n..(bi + 1) * n * n],
                true,
                0.0,
                &mut out[bi * c * n..(bi + 1) * c * n],
            );
        }
        self.push(
            Tensor::from_parts(vec![b, c, h, w], out),
            &[a, v],
            Box::new(move |g, inp, _, needs| {
                let (ad, vd, gd) = (inp[0].data(), inp[1].data(), g.data());
                let mut ga = needs[0].then(|| vec![0.0; b * n * n]);
                let mut gv = needs[1].then(|| vec![0.0; b * c * n]);
                for bi in 0..b {
                    let gb = &gd[bi * c * n..(bi + 1) * c * n];
                    if let Some(ga) = ga.as_mut() {
                        gemm(
                            n,
                            c,
                            n,
                            1.0,
                            gb,
                            true,
                            &vd[bi * c * n..(bi + 1) * c * n],
                            false,
                            0.0,
                            &mut ga[bi * n * n..(bi + 1) * n * n],
                        );
                    }
                    if let Some(gv) = gv.as_mut() {
                        gemm(
                            c,
                            n,
                            n,
                            1.0,
                            gb,
                            false,
                            &ad[bi * n * n..(bi + 1) * n * n],
                            false,
                            0.0,
                            &mut gv[bi * c * n..(bi + 1) * c * n],
                        );
                    }
                }
                vec![
                    ga.map(|d| Tensor::from_parts(vec![b, 1, n, n], d)),
                    gv.map(|d| Tensor::from_parts(vec![b, c, h, w], d)),
                ]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` with respect to its lone input.
    fn check_unary_graph(shape: &[usize], f: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::randn(shape.to_vec(), 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(&mut tape, x);
        let r = Tensor::randn(tape.value(y).shape().to_vec(), 1.0, &mut rng);
        let rv = tape.constant(r.clone());
        let prod = tape.mul(y, rv);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        let analytic = grads.wrt(x).unwrap().clone();
        let eval = |xt: Tensor| {
            let mut t = Tape::new();
            let x = t.leaf(xt);
            let y = f(&mut t, x);
            t.value(y).zip_map(&r, |a, b| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-5, "elem {i}: analytic {a} vs numeric {num}");
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng);
        let bias = Tensor::randn(vec![3], 0.5, &mut rng);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let (w, bias) = (w.clone(), bias.clone());
            check_unary_graph(&[2, 2, 5, 5], move |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(bias.clone());
                t.conv2d(x, wv, Some(bv), stride, pad)
            });
        }
    }

    #[test]
    fn conv2d_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
        check_unary_graph(&[4, 3, 3, 3], move |t, w| {
            let xv = t.constant(x.clone());
            t.conv2d(xv, w, None, 2, 1)
        });
    }

    #[test]
    fn broadcast_binary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let other = Tensor::randn(vec![2, 3, 1, 1], 1.0, &mut rng).map(|v| v.abs() + 0.5);
        check_unary_graph(&[2, 3, 2, 2], move |t, x| {
            let o = t.constant(other.clone());
            let a = t.mul(x, o);
            let b = t.div(a, o);
            let c = t.sub(b, o);
            t.add(c, x)
        });
        let spatial = Tensor::randn(vec![2, 1, 2, 2], 1.0, &mut rng);
        check_unary_graph(&[2, 3, 2, 2], move |t, x| {
            let s = t.constant(spatial.clone());
            t.mul(s, x)
        });
    }

    #[test]
    fn broadcast_gradient_flows_to_the_small_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let big = Tensor::randn(vec![2, 3, 2, 2], 1.0, &mut rng);
        check_unary_graph(&[2, 3, 1, 1], move |t, x| {
            let b = t.constant(big.clone());
            t.mul(b, x)
        });
    }

    #[test]
    fn batch_norm_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gamma = Tensor::randn(vec![3], 1.0, &mut rng);
        let beta = Tensor::randn(vec![3], 1.0, &mut rng);
        check_unary_graph(&[2, 3, 3, 3], move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            t.batch_norm_train(x, g, b, 1e-5).0
        });
    }

    #[test]
    fn pooling_and_resizing_gradients() {
        check_unary_graph(&[2, 3, 4, 4], |t, x| t.global_max_pool(x));
        check_unary_graph(&[2, 3, 4, 4], |t, x| t.global_avg_pool(x));
        check_unary_graph(&[2, 3, 4, 4], |t, x| t.channel_max(x));
        check_unary_graph(&[2, 3, 4, 4], |t, x| t.channel_mean(x));
        check_unary_graph(&[1, 2, 4, 6], |t, x| t.resize_nearest(x, 2, 3));
        check_unary_graph(&[1, 2, 2, 3], |t, x| t.resize_nearest(x, 4, 6));
        check_unary_graph(&[1, 2, 5, 7], |t, x| t.adaptive_avg_pool(x, 2, 3));
    }

    #[test]
    fn elementwise_gradients() {
        check_unary_graph(&[7], |t, x| t.sigmoid(x));
        check_unary_graph(&[7], |t, x| t.silu(x));
        check_unary_graph(&[7], |t, x| t.exp(x));
        check_unary_graph(&[7], |t, x| t.atan(x));
        check_unary_graph(&[7], |t, x| t.square(x));
        check_unary_graph(&[7], |t, x| t.leaky_relu(x, 0.1));
        check_unary_graph(&[7], |t, x| {
            let s = t.square(x);
            let s = t.add_scalar(s, 0.5);
            t.sqrt(s)
        });
        check_unary_graph(&[7], |t, x| t.bce_with_logits(x, &Tensor::full(vec![7], 0.3)));
    }

    #[test]
    fn vertex_ops_gradients() {
        check_unary_graph(&[2, 3, 2, 3], |t, x| t.pairwise_distance(x));
        check_unary_graph(&[2, 3, 2, 3], |t, x| {
            let d = t.pairwise_distance(x);
            let a = t.scale(d, -1.0);
            let a = t.exp(a);
            t.vertex_matmul(a, x)
        });
    }

    #[test]
    fn concat_slice_gather_gradients() {
        check_unary_graph(&[2, 4, 2, 2], |t, x| {
            let a = t.slice_channels(x, 0, 1);
            let b = t.slice_channels(x, 1, 3);
            let s = t.sigmoid(a);
            t.concat_channels(&[b, s, x])
        });
        check_unary_graph(&[2, 4, 2, 2], |t, x| t.gather(x, &[0, 5, 5, 31]));
    }

    #[test]
    fn pointwise_conv_matches_general_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(vec![5, 3, 1, 1], 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let wv = t.constant(w);
        let a = t.conv2d(xv, wv, None, 1, 0);
        // strided 1×1 with stride 1 and symmetric zero pad then crop equals
        // the pointwise result on the interior.
        let b = t.conv2d(xv, wv, None, 1, 1);
        let (av, bv) = (t.value(a).clone(), t.value(b).clone());
        for c in 0..5 {
            for y in 0..4 {
                for xx in 0..4 {
                    assert!((av.at4(1, c, y, xx) - bv.at4(1, c, y + 1, xx + 1)).abs() < 1e-12);
                }
            }
        }
    }
}
