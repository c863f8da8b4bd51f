use rand::Rng;

use super::graph::{GradSink, Node};
use super::{gemm, Graph, Layout, Mode, Real, Tensor, Var};
use crate::error::{arg_err, shape_err, Result};

fn val<T: Real>(nodes: &[Node<T>], v: Var) -> &[T] {
    nodes[v.0].value.data()
}

/// Output extent and leading pad of TF-style 'same' padding along one axis.
pub(crate) fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

/// Geometry of one NHWC conv2d call.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one sample into a `[oh·ow, kh·kw·cin]` patch matrix.
    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let k = self.cols();
        let cin = self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut col[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                    for kx in 0..self.kw {
                        let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                        let dst = &mut row[(ky * self.kw + kx) * cin..][..cin];
                        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * cin;
                            dst.copy_from_slice(&x[src..src + cin]);
                        }
                    }
                }
            }
        }
    }

    /// Adds a patch-matrix gradient back onto one sample's input gradient.
    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let k = self.cols();
        let cin = self.cin;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &col[(oy * self.ow + ox) * k..][..k];
                for ky in 0..self.kh {
                    let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kw + kx) * cin..][..cin];
                        let dst = (iy as usize * self.w + ix as usize) * cin;
                        for (d, &s) in dx[dst..dst + cin].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative from (input, output)
        df: fn(T, T) -> T,
    ) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        let me = Var(self.len());
        self.push(
            op,
            out,
            &[x],
            Box::new(move |g, nodes, sink| {
                let xs = val(nodes, x);
                let ys = val(nodes, me);
                let dx = sink.slot(x);
                for i in 0..g.len() {
                    dx[i] += g[i] * df(xs[i], ys[i]);
                }
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(move |g, _, sink| {
                sink.add(a, g);
                sink.add(b, g);
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(move |g, _, sink| {
                sink.add(a, g);
                if sink.wants(b) {
                    for (d, &gi) in sink.slot(b).iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(move |g, nodes, sink| {
                if sink.wants(a) {
                    let bs = val(nodes, b);
                    for ((d, &gi), &bi) in sink.slot(a).iter_mut().zip(g).zip(bs) {
                        *d += gi * bi;
                    }
                }
                if sink.wants(b) {
                    let as_ = val(nodes, a);
                    for ((d, &gi), &ai) in sink.slot(b).iter_mut().zip(g).zip(as_) {
                        *d += gi * ai;
                    }
                }
            }),
        )
    }

    /// Multiplies by a fixed elementwise factor (not differentiated).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.numel() {
            return Err(shape_err!("mul_const: {} factors for {:?}", factor.len(), xv.shape()));
        }
        let data = xv.data().iter().zip(&factor).map(|(&v, &f)| v * f).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "mul_const",
            out,
            &[x],
            Box::new(move |g, _, sink| {
                let dx = sink.slot(x);
                for i in 0..g.len() {
                    dx[i] += g[i] * factor[i];
                }
            }),
        )
    }

    /// Inverted dropout: train mode zeroes with probability `p` and scales
    /// survivors by `1/(1-p)`; eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(arg_err!("dropout probability {p} outside [0, 1)"));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.mul_const(x, mask)
    }

    /// Adds `b` (length = last dim of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.last().unwrap();
        if self.shape(b) != [n] {
            return Err(shape_err!("add_bias: bias {:?} for {:?}", self.shape(b), xs));
        }
        let bv = self.value(b).data().to_vec();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&bv).map(|(&v, &bb)| v + bb))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "add_bias",
            out,
            &[x, b],
            Box::new(move |g, _, sink| {
                sink.add(x, g);
                if sink.wants(b) {
                    let db = sink.slot(b);
                    for row in g.chunks(n) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }),
        )
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::Normal,
            self.value(b).data(),
            Layout::Normal,
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push(
            "matmul",
            out,
            &[a, b],
            Box::new(move |g, nodes, sink| {
                if sink.wants(a) {
                    let bv = val(nodes, b);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        bv,
                        Layout::Transposed,
                        T::one(),
                        sink.slot(a),
                    );
                }
                if sink.wants(b) {
                    let av = val(nodes, a);
                    gemm(
                        k,
                        m,
                        n,
                        av,
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        T::one(),
                        sink.slot(b),
                    );
                }
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, &[x], Box::new(move |g, _, sink| sink.add(x, g)))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err!("concat_last: {sa:?} and {sb:?}"));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.chunks(na).zip(bv.chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat_last",
            out,
            &[a, b],
            Box::new(move |g, _, sink| {
                if sink.wants(a) {
                    let da = sink.slot(a);
                    for (row, d) in g.chunks(na + nb).zip(da.chunks_mut(na)) {
                        for (di, &gi) in d.iter_mut().zip(&row[..na]) {
                            *di += gi;
                        }
                    }
                }
                if sink.wants(b) {
                    let db = sink.slot(b);
                    for (row, d) in g.chunks(na + nb).zip(db.chunks_mut(nb)) {
                        for (di, &gi) in d.iter_mut().zip(&row[na..]) {
                            *di += gi;
                        }
                    }
                }
            }),
        )
    }

    /// Keeps `[start, end)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap();
        if start >= end || end > n {
            return Err(shape_err!("slice_last: [{start},{end}) of {sx:?}"));
        }
        let w = end - start;
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let mut shape = sx;
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new(shape, data)?;
        self.push(
            "slice_last",
            out,
            &[x],
            Box::new(move |g, _, sink| {
                let dx = sink.slot(x);
                for (d, gr) in dx.chunks_mut(n).zip(g.chunks(w)) {
                    for (di, &gi) in d[start..end].iter_mut().zip(gr) {
                        *di += gi;
                    }
                }
            }),
        )
    }

    /// `[B,T,D]` → step `t` as `[B,D]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || t >= sx[1] {
            return Err(shape_err!("select_time: step {t} of {sx:?}"));
        }
        let (bsz, steps, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(bsz * d);
        for b in 0..bsz {
            data.extend_from_slice(&xv[(b * steps + t) * d..][..d]);
        }
        let out = Tensor::new(vec![bsz, d], data)?;
        self.push(
            "select_time",
            out,
            &[x],
            Box::new(move |g, _, sink| {
                let dx = sink.slot(x);
                for b in 0..bsz {
                    for (di, &gi) in dx[(b * steps + t) * d..][..d].iter_mut().zip(&g[b * d..][..d]) {
                        *di += gi;
                    }
                }
            }),
        )
    }

    /// Stacks `T` tensors of shape `[B,D]` into `[B,T,D]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let Some(&first) = steps.first() else {
            return Err(shape_err!("stack_time: no steps"));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 || steps.iter().any(|&v| self.shape(v) != s0.as_slice()) {
            return Err(shape_err!("stack_time: steps must share a [B,D] shape"));
        }
        let (bsz, d, tt) = (s0[0], s0[1], steps.len());
        let mut data = vec![T::zero(); bsz * tt * d];
        for (t, &v) in steps.iter().enumerate() {
            let sv = self.value(v).data();
            for b in 0..bsz {
                data[(b * tt + t) * d..][..d].copy_from_slice(&sv[b * d..][..d]);
            }
        }
        let out = Tensor::new(vec![bsz, tt, d], data)?;
        let steps = steps.to_vec();
        self.push(
            "stack_time",
            out,
            &steps.clone(),
            Box::new(move |g, _, sink| {
                for (t, &v) in steps.iter().enumerate() {
                    if !sink.wants(v) {
                        continue;
                    }
                    let dv = sink.slot(v);
                    for b in 0..bsz {
                        for (di, &gi) in dv[b * d..][..d].iter_mut().zip(&g[(b * tt + t) * d..][..d]) {
                            *di += gi;
                        }
                    }
                }
            }),
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let me = Var(self.len());
        self.push(
            "softmax",
            out,
            &[x],
            Box::new(move |g, nodes, sink| {
                let y = val(nodes, me);
                let dx = sink.slot(x);
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for i in 0..n {
                        dr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(
            "sum",
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _, sink| {
                for d in sink.slot(x) {
                    *d += g[0];
                }
            }),
        )
    }

    /// `Σ x ⊙ w` for a fixed weight tensor.
    pub fn dot_const(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        if w.shape() != self.shape(x) {
            return Err(shape_err!("dot_const: {:?} vs {:?}", w.shape(), self.shape(x)));
        }
        let s: T = self.value(x).data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        let w = w.data().to_vec();
        self.push(
            "dot_const",
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _, sink| {
                for (d, &wi) in sink.slot(x).iter_mut().zip(&w) {
                    *d += g[0] * wi;
                }
            }),
        )
    }

    /// NHWC convolution with 'same' zero padding; `w` is `[kh,kw,cin,cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let (sx, sw_) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw_.len() != 4 || sx[3] != sw_[2] {
            return Err(shape_err!("conv2d: input {sx:?} with kernel {sw_:?}"));
        }
        if self.shape(b) != [sw_[3]] {
            return Err(shape_err!("conv2d: bias {:?} for {} filters", self.shape(b), sw_[3]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(arg_err!("conv2d: zero stride"));
        }
        let (oh, pad_top) = same_padding(sx[1], sw_[0], stride.0);
        let (ow, pad_left) = same_padding(sx[2], sw_[1], stride.1);
        let geom = ConvGeom {
            h: sx[1],
            w: sx[2],
            cin: sx[3],
            kh: sw_[0],
            kw: sw_[1],
            cout: sw_[3],
            sh: stride.0,
            sw: stride.1,
            oh,
            ow,
            pad_top,
            pad_left,
        };
        let n = sx[0];
        let (rows, k, cout) = (geom.rows(), geom.cols(), geom.cout);
        let in_stride = geom.h * geom.w * geom.cin;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); n * rows * cout];
        let mut col = vec![T::zero(); rows * k];
        for s in 0..n {
            geom.im2col(&xv[s * in_stride..][..in_stride], &mut col);
            let y = &mut out[s * rows * cout..][..rows * cout];
            for row in y.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
            gemm(rows, k, cout, &col, Layout::Normal, wv, Layout::Normal, T::one(), y);
        }
        let out = Tensor::new(vec![n, oh, ow, cout], out)?;
        self.push(
            "conv2d",
            out,
            &[x, w, b],
            Box::new(move |g, nodes, sink: &mut GradSink<'_, T>| {
                let xv = val(nodes, x);
                let wv = val(nodes, w);
                let want_x = sink.wants(x);
                let want_w = sink.wants(w);
                if sink.wants(b) {
                    let db = sink.slot(b);
                    for row in g.chunks(cout) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
                let mut col = vec![T::zero(); rows * k];
                if want_w {
                    let mut dw = vec![T::zero(); k * cout];
                    for s in 0..n {
                        geom.im2col(&xv[s * in_stride..][..in_stride], &mut col);
                        let gs = &g[s * rows * cout..][..rows * cout];
                        gemm(
                            k,
                            rows,
                            cout,
                            &col,
                            Layout::Transposed,
                            gs,
                            Layout::Normal,
                            T::one(),
                            &mut dw,
                        );
                    }
                    for (d, v) in sink.slot(w).iter_mut().zip(dw) {
                        *d += v;
                    }
                }
                if want_x {
                    let dx = sink.slot(x);
                    for s in 0..n {
                        let gs = &g[s * rows * cout..][..rows * cout];
                        gemm(
                            rows,
                            cout,
                            k,
                            gs,
                            Layout::Normal,
                            wv,
                            Layout::Transposed,
                            T::zero(),
                            &mut col,
                        );
                        geom.col2im(&col, &mut dx[s * in_stride..][..in_stride]);
                    }
                }
            }),
        )
    }

    /// Max pooling with floor semantics; backward routes to the first
    /// maximal element of each window in row-major order.
    pub fn maxpool2d(&mut self, x: Var, pool: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err!("maxpool2d expects NHWC, got {sx:?}"));
        }
        let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        if pool.0 == 0 || pool.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(arg_err!("maxpool2d: zero pool or stride"));
        }
        if pool.0 > h || pool.1 > w {
            return Err(shape_err!("maxpool2d: pool {pool:?} larger than {h}x{w}"));
        }
        let oh = (h - pool.0) / stride.0 + 1;
        let ow = (w - pool.1) / stride.1 + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0;
                        for py in 0..pool.0 {
                            for px in 0..pool.1 {
                                let iy = oy * stride.0 + py;
                                let ix = ox * stride.1 + px;
                                let i = ((s * h + iy) * w + ix) * c + ch;
                                if xv[i] > best {
                                    best = xv[i];
                                    best_i = i;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i);
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        self.push(
            "maxpool2d",
            out,
            &[x],
            Box::new(move |g, _, sink| {
                let dx = sink.slot(x);
                for (&i, &gi) in argmax.iter().zip(g) {
                    dx[i] += gi;
                }
            }),
        )
    }

    /// Batch normalization with batch statistics over N,H,W (last axis is
    /// the channel). Returns the output plus the batch mean and (biased)
    /// variance so the caller can update running statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let c = self.check_bn(x, gamma, beta)?;
        let xv = self.value(x).data();
        let m = xv.len() / c;
        let mf = T::of(m as f64);
        let mut mean = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for (mu, &v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= mf);
        let mut var = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= mf);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let mut xhat = xv.to_vec();
        for row in xhat.chunks_mut(c) {
            for ((v, &mu), &is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - mu) * is;
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, &ga), &be) in row.iter_mut().zip(gv).zip(bv) {
                *v = *v * ga + be;
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let var_out = self.push(
            "batchnorm",
            out,
            &[x, gamma, beta],
            Box::new(move |g, nodes, sink| {
                let gv = val(nodes, gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dbeta[ch] += gr[ch];
                        dgamma[ch] += gr[ch] * xr[ch];
                    }
                }
                if sink.wants(x) {
                    let dx = sink.slot(x);
                    for ((dr, gr), xr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                        for ch in 0..c {
                            // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                            let t = gr[ch] - dbeta[ch] / mf - xr[ch] * dgamma[ch] / mf;
                            dr[ch] += gv[ch] * inv_std[ch] * t;
                        }
                    }
                }
                sink.add(gamma, &dgamma);
                sink.add(beta, &dbeta);
            }),
        )?;
        Ok((var_out, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let c = self.check_bn(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("batchnorm_eval: running stats for {c} channels"));
        }
        let mean = mean.to_vec();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for ch in 0..c {
                row[ch] = (row[ch] - mean[ch]) * inv_std[ch] * gv[ch] + bv[ch];
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "batchnorm",
            out,
            &[x, gamma, beta],
            Box::new(move |g, nodes, sink| {
                let xv = val(nodes, x);
                let gv = val(nodes, gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (gr, xr) in g.chunks(c).zip(xv.chunks(c)) {
                    for ch in 0..c {
                        dbeta[ch] += gr[ch];
                        dgamma[ch] += gr[ch] * (xr[ch] - mean[ch]) * inv_std[ch];
                    }
                }
                if sink.wants(x) {
                    let dx = sink.slot(x);
                    for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(c)) {
                        for ch in 0..c {
                            dr[ch] += gr[ch] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                sink.add(gamma, &dgamma);
                sink.add(beta, &dbeta);
            }),
        )
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "batchnorm: gamma {:?} / beta {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(c)
    }

    /// Average over the frequency axis of a single-channel map:
    /// `[B,F,T,1]` → `[B,T]`.
    pub fn avg_pool_freq(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[3] != 1 {
            return Err(shape_err!("avg_pool_freq expects [B,F,T,1], got {sx:?}"));
        }
        let (bsz, f, t) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let inv = T::one() / T::of(f as f64);
        let mut out = vec![T::zero(); bsz * t];
        for b in 0..bsz {
            for fi in 0..f {
                for ti in 0..t {
                    out[b * t + ti] += xv[(b * f + fi) * t + ti];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![bsz, t], out)?;
        self.push(
            "avg_pool_freq",
            out,
            &[x],
            Box::new(move |g, _, sink| {
                let dx = sink.slot(x);
                for b in 0..bsz {
                    for fi in 0..f {
                        for ti in 0..t {
                            dx[(b * f + fi) * t + ti] += g[b * t + ti] * inv;
                        }
                    }
                }
            }),
        )
    }

    /// `M'[b,f,t,c] = M[b,f,t,c] · A[b,t]`.
    pub fn scale_frames(&mut self, m: Var, a: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        if sm.len() != 4 || self.shape(a) != [sm[0], sm[2]] {
            return Err(shape_err!("scale_frames: map {sm:?} with weights {:?}", self.shape(a)));
        }
        let (bsz, f, t, c) = (sm[0], sm[1], sm[2], sm[3]);
        let mv = self.value(m).data();
        let av = self.value(a).data();
        let mut out = mv.to_vec();
        for b in 0..bsz {
            for fi in 0..f {
                for ti in 0..t {
                    let w = av[b * t + ti];
                    for v in &mut out[((b * f + fi) * t + ti) * c..][..c] {
                        *v *= w;
                    }
                }
            }
        }
        let out = Tensor::new(sm.clone(), out)?;
        self.push(
            "scale_frames",
            out,
            &[m, a],
            Box::new(move |g, nodes, sink| {
                let mv = val(nodes, m);
                let av = val(nodes, a);
                if sink.wants(m) {
                    let dm = sink.slot(m);
                    for b in 0..bsz {
                        for fi in 0..f {
                            for ti in 0..t {
                                let w = av[b * t + ti];
                                let o = ((b * f + fi) * t + ti) * c;
                                for j in o..o + c {
                                    dm[j] += g[j] * w;
                                }
                            }
                        }
                    }
                }
                if sink.wants(a) {
                    let da = sink.slot(a);
                    for b in 0..bsz {
                        for fi in 0..f {
                            for ti in 0..t {
                                let o = ((b * f + fi) * t + ti) * c;
                                let s: T = (o..o + c).map(|j| g[j] * mv[j]).sum();
                                da[b * t + ti] += s;
                            }
                        }
                    }
                }
            }),
        )
    }

    /// `[B,F,T,C]` → `[B,T,F·C]`, keeping time as the sequence axis.
    pub fn freq_time_to_seq(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err!("freq_time_to_seq expects [B,F,T,C], got {sx:?}"));
        }
        let (bsz, f, t, c) = (sx[0], sx[1], sx[2], sx[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for fi in 0..f {
                for ti in 0..t {
                    let src = ((b * f + fi) * t + ti) * c;
                    let dst = (b * t + ti) * f * c + fi * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let out = Tensor::new(vec![bsz, t, f * c], out)?;
        self.push(
            "freq_time_to_seq",
            out,
            &[x],
            Box::new(move |g, _, sink| {
                let dx = sink.slot(x);
                for b in 0..bsz {
                    for fi in 0..f {
                        for ti in 0..t {
                            let src = ((b * f + fi) * t + ti) * c;
                            let dst = (b * t + ti) * f * c + fi * c;
                            for j in 0..c {
                                dx[src + j] += g[dst + j];
                            }
                        }
                    }
                }
            }),
        )
    }

    /// `v[b,:] = Σ_t β[b,t] · h[b,t,:]`.
    pub fn weighted_sum_time(&mut self, h: Var, beta: Var) -> Result<Var> {
        let sh = self.shape(h).to_vec();
        if sh.len() != 3 || self.shape(beta) != [sh[0], sh[1]] {
            return Err(shape_err!("weighted_sum_time: {sh:?} with {:?}", self.shape(beta)));
        }
        let (bsz, t, d) = (sh[0], sh[1], sh[2]);
        let hv = self.value(h).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); bsz * d];
        for b in 0..bsz {
            for ti in 0..t {
                let w = bv[b * t + ti];
                for (o, &x) in out[b * d..][..d].iter_mut().zip(&hv[(b * t + ti) * d..][..d]) {
                    *o += w * x;
                }
            }
        }
        let out = Tensor::new(vec![bsz, d], out)?;
        self.push(
            "weighted_sum_time",
            out,
            &[h, beta],
            Box::new(move |g, nodes, sink| {
                let hv = val(nodes, h);
                let bv = val(nodes, beta);
                if sink.wants(h) {
                    let dh = sink.slot(h);
                    for b in 0..bsz {
                        for ti in 0..t {
                            let w = bv[b * t + ti];
                            for (o, &gi) in dh[(b * t + ti) * d..][..d].iter_mut().zip(&g[b * d..][..d]) {
                                *o += w * gi;
                            }
                        }
                    }
                }
                if sink.wants(beta) {
                    let db = sink.slot(beta);
                    for b in 0..bsz {
                        for ti in 0..t {
                            let s: T = hv[(b * t + ti) * d..][..d]
                                .iter()
                                .zip(&g[b * d..][..d])
                                .map(|(&x, &gi)| x * gi)
                                .sum();
                            db[b * t + ti] += s;
                        }
                    }
                }
            }),
        )
    }

    /// Mean over the batch of `−Σ_c target·log_softmax(logits)`. Targets may
    /// be soft but every row must sum to one.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.shape() != sl.as_slice() {
            return Err(shape_err!(
                "cross_entropy: logits {sl:?} vs targets {:?}",
                targets.shape()
            ));
        }
        let (bsz, c) = (sl[0], sl[1]);
        for (i, row) in targets.data().chunks(c).enumerate() {
            let s: f64 = row.iter().map(|v| v.f64()).sum();
            if (s - 1.0).abs() > 1e-4 {
                return Err(arg_err!("cross_entropy: target row {i} sums to {s}"));
            }
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut loss = T::zero();
        for (row, trow) in probs.chunks_mut(c).zip(targets.data().chunks(c)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for (&l, &t) in row.iter().zip(trow) {
                if t != T::zero() {
                    loss -= t * (l - lse);
                }
            }
            softmax_in_place(row);
        }
        let scale = T::one() / T::of(bsz as f64);
        loss *= scale;
        let targets = targets.data().to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, _, sink| {
                let dl = sink.slot(logits);
                let k = g[0] * scale;
                for ((d, &p), &t) in dl.iter_mut().zip(&probs).zip(&targets) {
                    *d += k * (p - t);
                }
            }),
        )
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
