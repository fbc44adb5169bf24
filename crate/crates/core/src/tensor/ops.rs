//! Forward ops and their adjoints.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::mask::Rect;
use crate::scalar::{lit, Scalar};

use super::kernels::{self, conv_out_side, ConvGeom, ConvSpec};
use super::tape::{BnBatchStats, Op, Tape, Var};
use super::Tensor;

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4]> {
    match s {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(shape_err(
            op,
            format!("expected rank-4 [B, C, H, W], got {s:?}"),
        )),
    }
}

fn dims2(op: &'static str, s: &[usize]) -> Result<[usize; 2]> {
    match s {
        &[r, c] => Ok([r, c]),
        _ => Err(shape_err(op, format!("expected rank-2, got {s:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = dims2("matmul", self.shape(a))?;
        let sb = dims2("matmul", self.shape(b))?;
        let ka = if ta { sa[0] } else { sa[1] };
        let kb = if tb { sb[1] } else { sb[0] };
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!(
                    "{sa:?}{} · {sb:?}{}",
                    if ta { "ᵀ" } else { "" },
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let (data, shape) =
            kernels::matmul(self.value(a).data(), sa, ta, self.value(b).data(), sb, tb);
        Ok(self.push(
            Op::MatMul { a, b, ta, tb },
            Tensor::from_parts(shape.to_vec(), data),
        ))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        x: &[usize],
        w: &[usize],
        spec: ConvSpec,
    ) -> Result<ConvGeom> {
        let [_, cin, h, wd] = dims4(op, x)?;
        let [cout, wcin, kh, kw] = dims4(op, w)?;
        if wcin != cin {
            return Err(shape_err(op, format!("input {x:?} vs filter {w:?}")));
        }
        let ho = conv_out_side(h, kh, spec);
        let wo = conv_out_side(wd, kw, spec);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok(ConvGeom {
                cin,
                h,
                w: wd,
                cout,
                kh,
                kw,
                ho,
                wo,
                spec,
            }),
            _ => Err(shape_err(
                op,
                format!("kernel {kh}x{kw} {spec:?} does not fit input {x:?}"),
            )),
        }
    }

    /// 2-D cross-correlation, `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let g = self.conv_geom("conv2d", self.shape(x), self.shape(w), spec)?;
        let batch = self.shape(x)[0];
        let y = kernels::conv2d_forward(&g, batch, self.value(x).data(), self.value(w).data());
        let shape = vec![batch, g.cout, g.ho, g.wo];
        Ok(self.push(Op::Conv2d { x, w, spec }, Tensor::from_parts(shape, y)))
    }

    fn conv2d_data(
        &mut self,
        gy: Var,
        w: Var,
        spec: ConvSpec,
        in_shape: [usize; 4],
    ) -> Result<Var> {
        let g = self.conv_geom("conv2d_backward_data", &in_shape, self.shape(w), spec)?;
        if self.shape(gy) != [in_shape[0], g.cout, g.ho, g.wo] {
            return Err(shape_err(
                "conv2d_backward_data",
                format!("{:?}", self.shape(gy)),
            ));
        }
        let gx = kernels::conv2d_backward_data(
            &g,
            in_shape[0],
            self.value(gy).data(),
            self.value(w).data(),
        );
        Ok(self.push(
            Op::Conv2dData { gy, w, spec },
            Tensor::from_parts(in_shape.to_vec(), gx),
        ))
    }

    fn conv2d_filter(
        &mut self,
        x: Var,
        gy: Var,
        spec: ConvSpec,
        w_shape: [usize; 4],
    ) -> Result<Var> {
        let g = self.conv_geom("conv2d_backward_filter", self.shape(x), &w_shape, spec)?;
        let batch = self.shape(x)[0];
        if self.shape(gy) != [batch, g.cout, g.ho, g.wo] {
            return Err(shape_err(
                "conv2d_backward_filter",
                format!("{:?}", self.shape(gy)),
            ));
        }
        let gw =
            kernels::conv2d_backward_filter(&g, batch, self.value(x).data(), self.value(gy).data());
        Ok(self.push(
            Op::Conv2dFilter { x, gy, spec },
            Tensor::from_parts(w_shape.to_vec(), gw),
        ))
    }

    /// Adds `b[c]` to every element of channel `c` of a `[B, C, H, W]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [bs, c, h, w] = dims4("add_channel_bias", self.shape(x))?;
        if self.shape(b) != [c] {
            return Err(shape_err(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for n in 0..bs {
            for (ch, &bv) in bias.iter().enumerate() {
                let base = (n * c + ch) * h * w;
                for v in &mut out[base..base + h * w] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(
            Op::AddChannelBias { x, b },
            Tensor::from_parts(vec![bs, c, h, w], out),
        ))
    }

    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("channel_sum", self.shape(x))?;
        let out = kernels::channel_sum(self.value(x).data(), b, c, h * w);
        Ok(self.push(Op::ChannelSum { x }, Tensor::from_parts(vec![c], out)))
    }

    fn channel_expand(&mut self, v: Var, shape: [usize; 4]) -> Result<Var> {
        let [b, c, h, w] = shape;
        if self.shape(v) != [c] {
            return Err(shape_err(
                "channel_expand",
                format!("{:?} -> {shape:?}", self.shape(v)),
            ));
        }
        let out = kernels::channel_expand(self.value(v).data(), b, c, h * w);
        Ok(self.push(
            Op::ChannelExpand { v },
            Tensor::from_parts(shape.to_vec(), out),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), v))
    }

    pub fn scalar_mul(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::ScalarMul { x, c }, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar { x }, |v| v + c)
    }

    /// `s · x` for a one-element `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err(
                "scale_by",
                format!("scale {:?} is not a scalar", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        Ok(self.unary(x, Op::ScaleBy { s, x }, |v| sv * v))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(shape_err(
                "mul_const",
                format!("{:?} vs {:?}", self.shape(x), c.shape()),
            ));
        }
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(Op::MulConst { x, c }, v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / lit::<T>(t.len() as f64);
        self.push(Op::Mean { x }, Tensor::scalar(s))
    }

    fn expand(&mut self, x: Var, shape: &[usize], scale: T) -> Var {
        let v = self.value(x).item() * scale;
        self.push(Op::Expand { x, scale }, Tensor::full(shape, v))
    }

    /// Sum over all but the leading axis: `[B, ...] -> [B]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(shape_err("sum_per_sample", "rank 0"));
        }
        let per: usize = shape[1..].iter().product();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        Ok(self.push(
            Op::SumPerSample { x },
            Tensor::from_parts(vec![shape[0]], data),
        ))
    }

    fn expand_per_sample(&mut self, x: Var, shape: &[usize]) -> Var {
        let per: usize = shape[1..].iter().product();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, per))
            .collect();
        self.push(
            Op::ExpandPerSample { x },
            Tensor::from_parts(shape.to_vec(), data),
        )
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            Op::Relu(x),
            |v| if v < T::zero() { T::zero() } else { v },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu { x, slope }, |v| {
            if v > T::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// `max(x, min)` elementwise.
    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        self.unary(
            x,
            Op::ClampMin { x, min },
            |v| if v < min { min } else { v },
        )
    }

    /// Numerically stable softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let [r, c] = dims2("softmax_rows", self.shape(x))?;
        let y = kernels::softmax_rows(self.value(x).data(), r, c);
        Ok(self.push(Op::SoftmaxRows(x), Tensor::from_parts(vec![r, c], y)))
    }

    /// Batch normalization over `[B, C, H, W]`.
    ///
    /// With `running = None` the batch statistics normalize the input and are
    /// returned so the caller can update its running averages; otherwise the
    /// given `(mean, var)` are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        let [b, c, h, w] = dims4("batch_norm", self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "batch_norm",
                format!("affine params for {c} channels"),
            ));
        }
        let spatial = h * w;
        let m = b * spatial;
        let xs = self.value(x).data();
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err("batch_norm", "running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mf = lit::<T>(m as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for n in 0..b {
                        let base = (n * c + ch) * spatial;
                        s += xs[base..base + spatial].iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut q = T::zero();
                    for n in 0..b {
                        let base = (n * c + ch) * spatial;
                        for &v in &xs[base..base + spatial] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / mf;
                }
                let unbiased = if m > 1 {
                    var.iter()
                        .map(|&v| v * mf / lit::<T>((m - 1) as f64))
                        .collect()
                } else {
                    var.clone()
                };
                let stats = BnBatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let invstd: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut y = vec![T::zero(); xs.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * spatial;
                for i in base..base + spatial {
                    let xh = (xs[i] - mean[ch]) * invstd[ch];
                    xhat[i] = xh;
                    y[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: Tensor::from_parts(vec![b, c, h, w], xhat),
            invstd: Arc::new(invstd),
            train: running.is_none(),
        };
        let out = self.push(op, Tensor::from_parts(vec![b, c, h, w], y));
        Ok((out, stats))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("upsample2x", self.shape(x))?;
        let y = kernels::upsample2x(self.value(x).data(), b * c, h, w);
        Ok(self.push(
            Op::Upsample2x(x),
            Tensor::from_parts(vec![b, c, 2 * h, 2 * w], y),
        ))
    }

    fn sumpool2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("sumpool2x", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("sumpool2x", format!("odd spatial size {h}x{w}")));
        }
        let y = kernels::sumpool2x(self.value(x).data(), b * c, h, w);
        Ok(self.push(
            Op::SumPool2x(x),
            Tensor::from_parts(vec![b, c, h / 2, w / 2], y),
        ))
    }

    /// Concatenate `[B, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = dims4(
            "concat",
            self.shape(
                *parts
                    .first()
                    .ok_or_else(|| shape_err("concat", "no inputs"))?,
            ),
        )?;
        let mut total = 0;
        for &p in parts {
            let [b, c, h, w] = dims4("concat", self.shape(p))?;
            if b != first[0] || h != first[2] || w != first[3] {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {first:?}", self.shape(p)),
                ));
            }
            total += c;
        }
        let [b, _, h, w] = first;
        let spatial = h * w;
        let mut out = Vec::with_capacity(b * total * spatial);
        for n in 0..b {
            for &p in parts {
                let c = self.shape(p)[1];
                let d = self.value(p).data();
                out.extend_from_slice(&d[n * c * spatial..(n + 1) * c * spatial]);
            }
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            Tensor::from_parts(vec![b, total, h, w], out),
        ))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = dims4("slice_channels", self.shape(x))?;
        if start + len > c || len == 0 {
            return Err(shape_err(
                "slice_channels",
                format!("[{start}, {}) of {c} channels", start + len),
            ));
        }
        let spatial = h * w;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(b * len * spatial);
        for n in 0..b {
            let base = (n * c + start) * spatial;
            out.extend_from_slice(&d[base..base + len * spatial]);
        }
        Ok(self.push(
            Op::SliceChannels { x, start },
            Tensor::from_parts(vec![b, len, h, w], out),
        ))
    }

    fn pad_channels(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let [b, c, h, w] = dims4("pad_channels", self.shape(x))?;
        let spatial = h * w;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); b * total * spatial];
        for n in 0..b {
            let dst = (n * total + start) * spatial;
            out[dst..dst + c * spatial].copy_from_slice(&d[n * c * spatial..(n + 1) * c * spatial]);
        }
        Ok(self.push(
            Op::PadChannels { x, start },
            Tensor::from_parts(vec![b, total, h, w], out),
        ))
    }

    /// Select rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let [r, c] = dims2("gather_rows", self.shape(x))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        Ok(self.push(
            Op::GatherRows { x, idx },
            Tensor::from_parts(vec![n, c], out),
        ))
    }

    /// Place the rows of `x` at `idx` of a zero `[rows, C]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        let [n, c] = dims2("scatter_rows", self.shape(x))?;
        if n != idx.len() {
            return Err(shape_err(
                "scatter_rows",
                format!("{n} rows for {} indices", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "scatter_rows",
                index: bad,
                len: rows,
            });
        }
        let d = self.value(x).data();
        let mut out = vec![T::zero(); rows * c];
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out[i * c + j] += d[k * c + j];
            }
        }
        Ok(self.push(
            Op::ScatterRows { x, idx },
            Tensor::from_parts(vec![rows, c], out),
        ))
    }

    /// Spatial crop of sample `b`: `[B, C, H, W] -> [1, C, h, w]`.
    pub fn crop(&mut self, x: Var, b: usize, rect: Rect) -> Result<Var> {
        let [bs, c, h, w] = dims4("crop", self.shape(x))?;
        if b >= bs {
            return Err(Error::IndexOutOfRange {
                op: "crop",
                index: b,
                len: bs,
            });
        }
        if rect.height == 0
            || rect.width == 0
            || rect.top + rect.height > h
            || rect.left + rect.width > w
        {
            return Err(shape_err("crop", format!("{rect:?} outside {h}x{w}")));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(c * rect.height * rect.width);
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for i in rect.top..rect.top + rect.height {
                let row = plane + i * w;
                out.extend_from_slice(&d[row + rect.left..row + rect.left + rect.width]);
            }
        }
        Ok(self.push(
            Op::Crop { x, b, rect },
            Tensor::from_parts(vec![1, c, rect.height, rect.width], out),
        ))
    }

    fn uncrop(&mut self, x: Var, b: usize, rect: Rect, full: [usize; 4]) -> Result<Var> {
        let [bs, c, h, w] = full;
        let d = self.value(x).data();
        let mut out = vec![T::zero(); bs * c * h * w];
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for (r, i) in (rect.top..rect.top + rect.height).enumerate() {
                let src = (ch * rect.height + r) * rect.width;
                let row = plane + i * w + rect.left;
                out[row..row + rect.width].copy_from_slice(&d[src..src + rect.width]);
            }
        }
        Ok(self.push(
            Op::Uncrop { x, b, rect },
            Tensor::from_parts(full.to_vec(), out),
        ))
    }

    /// Sample `b` as a position-major matrix: `[B, C, H, W] -> [H·W, C]`.
    pub fn sample_to_rows(&mut self, x: Var, b: usize) -> Result<Var> {
        let [bs, c, h, w] = dims4("sample_to_rows", self.shape(x))?;
        if b >= bs {
            return Err(Error::IndexOutOfRange {
                op: "sample_to_rows",
                index: b,
                len: bs,
            });
        }
        let hw = h * w;
        let d = &self.value(x).data()[b * c * hw..(b + 1) * c * hw];
        let mut out = vec![T::zero(); hw * c];
        for ch in 0..c {
            for p in 0..hw {
                out[p * c + ch] = d[ch * hw + p];
            }
        }
        Ok(self.push(
            Op::SampleToRows { x, b },
            Tensor::from_parts(vec![hw, c], out),
        ))
    }

    /// Inverse layout of [`Tape::sample_to_rows`], writing sample `b` of a
    /// zero batch of shape `full`.
    pub fn rows_to_sample(&mut self, x: Var, b: usize, full: [usize; 4]) -> Result<Var> {
        let [bs, c, h, w] = full;
        let hw = h * w;
        if self.shape(x) != [hw, c] || b >= bs {
            return Err(shape_err(
                "rows_to_sample",
                format!("{:?} into {full:?} at {b}", self.shape(x)),
            ));
        }
        let d = self.value(x).data();
        let mut out = vec![T::zero(); bs * c * hw];
        let dst = &mut out[b * c * hw..(b + 1) * c * hw];
        for p in 0..hw {
            for ch in 0..c {
                dst[ch * hw + p] = d[p * c + ch];
            }
        }
        Ok(self.push(
            Op::RowsToSample { x, b },
            Tensor::from_parts(full.to_vec(), out),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, v))
    }

    /// Input gradients of node `i` given its output gradient `g`, as tape ops.
    pub(crate) fn backward_node(
        &mut self,
        i: usize,
        g: Var,
        need: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[i].op.clone();
        let out = Var(i);
        let out_shape = self.nodes[i].value.shape().to_vec();
        let create_graph = self.grad_mode;
        let in_shape = |t: &Self, v: Var| t.shape(v).to_vec();
        let grads = match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, ta, tb } => {
                let ga = if need[0] {
                    Some(if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    })
                } else {
                    None
                };
                let gb = if need[1] {
                    Some(if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    })
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::Conv2d { x, w, spec } => {
                let xs = dims4("conv2d", self.shape(x))?;
                let ws = dims4("conv2d", self.shape(w))?;
                let gx = if need[0] {
                    Some(self.conv2d_data(g, w, spec, xs)?)
                } else {
                    None
                };
                let gw = if need[1] {
                    Some(self.conv2d_filter(x, g, spec, ws)?)
                } else {
                    None
                };
                vec![gx, gw]
            }
            Op::Conv2dData { gy, w, spec } => {
                let ws = dims4("conv2d", self.shape(w))?;
                let ggy = if need[0] {
                    Some(self.conv2d(g, w, spec)?)
                } else {
                    None
                };
                let gw = if need[1] {
                    Some(self.conv2d_filter(g, gy, spec, ws)?)
                } else {
                    None
                };
                vec![ggy, gw]
            }
            Op::Conv2dFilter { x, gy, spec } => {
                let xs = dims4("conv2d", self.shape(x))?;
                let gx = if need[0] {
                    Some(self.conv2d_data(gy, g, spec, xs)?)
                } else {
                    None
                };
                let ggy = if need[1] {
                    Some(self.conv2d(x, g, spec)?)
                } else {
                    None
                };
                vec![gx, ggy]
            }
            Op::AddChannelBias { .. } => {
                let gb = if need[1] {
                    Some(self.channel_sum(g)?)
                } else {
                    None
                };
                vec![Some(g), gb]
            }
            Op::ChannelSum { x } => {
                let s = dims4("channel_sum", self.shape(x))?;
                vec![Some(self.channel_expand(g, s)?)]
            }
            Op::ChannelExpand { .. } => vec![Some(self.channel_sum(g)?)],
            Op::Add(..) => vec![Some(g), Some(g)],
            Op::Sub(..) => {
                let gb = if need[1] {
                    Some(self.scalar_mul(g, -T::one()))
                } else {
                    None
                };
                vec![Some(g), gb]
            }
            Op::Mul(a, b) => {
                let ga = if need[0] { Some(self.mul(g, b)?) } else { None };
                let gb = if need[1] { Some(self.mul(g, a)?) } else { None };
                vec![ga, gb]
            }
            Op::Div(_, b) => {
                let ga = if need[0] { Some(self.div(g, b)?) } else { None };
                let gb = if need[1] {
                    let t = self.mul(g, out)?;
                    let t = self.div(t, b)?;
                    Some(self.scalar_mul(t, -T::one()))
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::ScalarMul { c, .. } => vec![Some(self.scalar_mul(g, c))],
            Op::AddScalar { .. } => vec![Some(g)],
            Op::ScaleBy { s, x } => {
                let gs = if need[0] {
                    let p = self.mul(g, x)?;
                    let total = self.sum(p);
                    let s_shape = in_shape(self, s);
                    Some(self.reshape(total, &s_shape)?)
                } else {
                    None
                };
                let gx = if need[1] {
                    Some(self.scale_by(s, g)?)
                } else {
                    None
                };
                vec![gs, gx]
            }
            Op::MulConst { c, .. } => vec![Some(self.mul_const(g, c)?)],
            Op::Sum { x } => {
                let s = in_shape(self, x);
                vec![Some(self.expand(g, &s, T::one()))]
            }
            Op::Mean { x } => {
                let s = in_shape(self, x);
                let n = lit::<T>(s.iter().product::<usize>() as f64);
                vec![Some(self.expand(g, &s, T::one() / n))]
            }
            Op::Expand { x, scale } => {
                let total = self.sum(g);
                let total = if scale == T::one() {
                    total
                } else {
                    self.scalar_mul(total, scale)
                };
                let s = in_shape(self, x);
                vec![Some(self.reshape(total, &s)?)]
            }
            Op::SumPerSample { x } => {
                let s = in_shape(self, x);
                vec![Some(self.expand_per_sample(g, &s))]
            }
            Op::ExpandPerSample { .. } => vec![Some(self.sum_per_sample(g)?)],
            Op::Square(x) => {
                let two_x = self.scalar_mul(x, lit(2.0));
                vec![Some(self.mul(g, two_x)?)]
            }
            Op::Sqrt(_) => {
                let half = self.scalar_mul(g, lit(0.5));
                vec![Some(self.div(half, out)?)]
            }
            Op::Abs(x) => {
                let sign = self.value(x).map(|v| {
                    if v > T::zero() {
                        T::one()
                    } else if v < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                });
                vec![Some(self.mul_const(g, sign)?)]
            }
            Op::Ln(x) => vec![Some(self.div(g, x)?)],
            Op::Relu(x) => {
                let m = self
                    .value(x)
                    .map(|v| if v > T::zero() { T::one() } else { T::zero() });
                vec![Some(self.mul_const(g, m)?)]
            }
            Op::LeakyRelu { x, slope } => {
                let m = self
                    .value(x)
                    .map(|v| if v > T::zero() { T::one() } else { slope });
                vec![Some(self.mul_const(g, m)?)]
            }
            Op::Sigmoid(_) => {
                // y (1 - y)
                let neg = self.scalar_mul(out, -T::one());
                let one_minus = self.add_scalar(neg, T::one());
                let d = self.mul(out, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
            Op::ClampMin { x, min } => {
                let m = self
                    .value(x)
                    .map(|v| if v > min { T::one() } else { T::zero() });
                vec![Some(self.mul_const(g, m)?)]
            }
            Op::SoftmaxRows(_) => {
                if create_graph {
                    return Err(Error::SecondOrderUnsupported("softmax_rows"));
                }
                let [r, c] = dims2("softmax_rows", &out_shape)?;
                let gx = kernels::softmax_rows_backward(
                    self.value(out).data(),
                    self.value(g).data(),
                    r,
                    c,
                );
                let v = Tensor::from_parts(out_shape.clone(), gx);
                vec![Some(
                    self.push(Op::SoftmaxRowsBackward { y: out, gy: g }, v),
                )]
            }
            Op::BatchNorm {
                gamma,
                xhat,
                invstd,
                train,
                ..
            } => {
                if create_graph {
                    return Err(Error::SecondOrderUnsupported("batch_norm"));
                }
                let gx = if need[0] {
                    let v = bn_backward_input(
                        &xhat,
                        self.value(gamma).data(),
                        &invstd,
                        train,
                        self.value(g).data(),
                    );
                    let v = Tensor::from_parts(out_shape.clone(), v);
                    Some(self.push(Op::BatchNormBackward { gy: g }, v))
                } else {
                    None
                };
                let ggamma = if need[1] {
                    let gx_hat = self.mul_const(g, xhat)?;
                    Some(self.channel_sum(gx_hat)?)
                } else {
                    None
                };
                let gbeta = if need[2] {
                    Some(self.channel_sum(g)?)
                } else {
                    None
                };
                vec![gx, ggamma, gbeta]
            }
            Op::SoftmaxRowsBackward { .. } => {
                return Err(Error::SecondOrderUnsupported("softmax_rows"))
            }
            Op::BatchNormBackward { .. } => {
                return Err(Error::SecondOrderUnsupported("batch_norm"))
            }
            Op::Upsample2x(_) => vec![Some(self.sumpool2x(g)?)],
            Op::SumPool2x(_) => vec![Some(self.upsample2x(g)?)],
            Op::Concat { parts } => {
                let mut start = 0;
                let mut out_grads = Vec::with_capacity(parts.len());
                for (k, p) in parts.iter().enumerate() {
                    let c = self.shape(*p)[1];
                    out_grads.push(if need[k] {
                        Some(self.slice_channels(g, start, c)?)
                    } else {
                        None
                    });
                    start += c;
                }
                out_grads
            }
            Op::SliceChannels { x, start } => {
                let total = self.shape(x)[1];
                vec![Some(self.pad_channels(g, start, total)?)]
            }
            Op::PadChannels { x, start } => {
                let len = self.shape(x)[1];
                vec![Some(self.slice_channels(g, start, len)?)]
            }
            Op::GatherRows { x, idx } => {
                let rows = self.shape(x)[0];
                vec![Some(self.scatter_rows(g, idx, rows)?)]
            }
            Op::ScatterRows { idx, .. } => vec![Some(self.gather_rows(g, idx)?)],
            Op::Crop { x, b, rect } => {
                let full = dims4("crop", self.shape(x))?;
                vec![Some(self.uncrop(g, b, rect, full)?)]
            }
            Op::Uncrop { b, rect, .. } => vec![Some(self.crop(g, b, rect)?)],
            Op::SampleToRows { x, b } => {
                let full = dims4("sample_to_rows", self.shape(x))?;
                vec![Some(self.rows_to_sample(g, b, full)?)]
            }
            Op::RowsToSample { b, .. } => vec![Some(self.sample_to_rows(g, b)?)],
            Op::Reshape { x } => {
                let s = in_shape(self, x);
                vec![Some(self.reshape(g, &s)?)]
            }
        };
        Ok(grads)
    }
}

fn bn_backward_input<T: Scalar>(
    xhat: &Tensor<T>,
    gamma: &[T],
    invstd: &[T],
    train: bool,
    gy: &[T],
) -> Vec<T> {
    let &[b, c, h, w] = xhat.shape() else {
        unreachable!("batch norm input is rank 4")
    };
    let spatial = h * w;
    let xhat = xhat.data();
    let mut gx = vec![T::zero(); gy.len()];
    if !train {
        for n in 0..b {
            for ch in 0..c {
                let k = gamma[ch] * invstd[ch];
                let base = (n * c + ch) * spatial;
                for i in base..base + spatial {
                    gx[i] = gy[i] * k;
                }
            }
        }
        return gx;
    }
    let m = lit::<T>((b * spatial) as f64);
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..b {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                sum_g += gy[i];
                sum_gx += gy[i] * xhat[i];
            }
        }
        let k = gamma[ch] * invstd[ch] / m;
        for n in 0..b {
            let base = (n * c + ch) * spatial;
            for i in base..base + spatial {
                gx[i] = k * (m * gy[i] - sum_g - xhat[i] * sum_gx);
            }
        }
    }
    gx
}
