use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::element::{gemm, Element};
use super::tensor::{numel, ParamId, ParamSet, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `y` is broadcast over the leading dims of `x`.
    AddBroadcast(Var, Var),
    Scale(Var, E),
    AddScalar(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Select {
        x: Var,
        index: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        dim: usize,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Softmax(Var),
    Gelu(Var),
    LeakyRelu(Var, E),
    PixelShuffle {
        x: Var,
        geom: ShuffleGeom,
    },
    PixelUnshuffle {
        x: Var,
        geom: ShuffleGeom,
    },
    Blur {
        x: Var,
        kernel: Vec<E>,
        planes: usize,
        h: usize,
        w: usize,
    },
}

impl<E> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Select { .. } => "select",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::PixelUnshuffle { .. } => "pixel_unshuffle",
            Op::Blur { .. } => "blur",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddBroadcast(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Abs(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::LeakyRelu(x, _) => vec![*x],
            Op::Select { x, .. }
            | Op::PixelShuffle { x, .. }
            | Op::PixelUnshuffle { x, .. }
            | Op::Blur { x, .. } => vec![*x],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<E: Element>(&self, x: &[E], col: &mut [E]) {
        let (k, pad) = (self.k, self.pad as isize);
        let opix = self.out_pixels();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * opix..(row + 1) * opix];
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - pad;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = E::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - pad;
                            *v = if ix < 0 || ix >= self.w as isize {
                                E::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<E: Element>(&self, col: &[E], dx: &mut [E]) {
        let (k, pad) = (self.k, self.pad as isize);
        let opix = self.out_pixels();
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * opix..(row + 1) * opix];
                    for oy in 0..self.oh {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = ox as isize + kx as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a shuffle between `[batch, c * r * r, h, w]` and
/// `[batch, c, h * r, w * r]`.
#[derive(Debug, Clone, Copy)]
struct ShuffleGeom {
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
}

impl ShuffleGeom {
    /// Calls `f(packed_index, spatial_index)` for every element.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let ShuffleGeom { batch, c, h, w, r } = *self;
        let (oh, ow) = (h * r, w * r);
        for b in 0..batch {
            for ci in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let pc = ci * r * r + i * r + j;
                        let packed_base = (b * c * r * r + pc) * h * w;
                        let spatial_base = (b * c + ci) * oh * ow;
                        for y in 0..h {
                            for x in 0..w {
                                f(
                                    packed_base + y * w + x,
                                    spatial_base + (y * r + i) * ow + x * r + j,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node<'a, E: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [E]>,
    op: Op<E>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<E> {
    leaves: HashMap<usize, Vec<E>>,
    params: BTreeMap<ParamId, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient with respect to a leaf created by [`Tape::input`] or
    /// [`Tape::param`]. `None` when the leaf was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[E]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[E]> {
        self.params.get(&id).map(|g| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[E])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

/// Dynamically recorded computation graph for reverse-mode differentiation.
///
/// Every op evaluates eagerly and records enough to run its vector-Jacobian
/// product later. Parameters are borrowed, not copied, for the lifetime of the
/// tape; [`Tape::backward`] consumes the tape and releases that borrow.
#[derive(Debug)]
pub struct Tape<'a, E: Element = f32> {
    nodes: Vec<Node<'a, E>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<E: Element> Default for Tape<'_, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, E: Element> Tape<'a, E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[E] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec())
            .expect("recorded nodes have consistent shapes")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> E {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [E]>, op: Op<E>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} produced {} at element {pos} of shape {shape:?}",
                op.name(),
                value[pos]
            )));
        }
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor. Gradients are tracked when the tensor has
    /// `requires_grad` set.
    pub fn input(&mut self, t: Tensor<E>) -> Result<Var> {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        let v = self.push(shape, Cow::Owned(t.into_data()), Op::Leaf)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Var> {
        self.input(Tensor::new(shape, data)?)
    }

    /// Records a parameter, borrowing its storage. Recording the same id twice
    /// returns the same handle.
    pub fn param(&mut self, params: &'a ParamSet<E>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let p = params.get(id);
        let v = self.push(
            p.tensor.shape().to_vec(),
            Cow::Borrowed(p.tensor.data()),
            Op::Param(id),
        )?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<E>, f: impl Fn(E, E) -> E) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out: Vec<E> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, Cow::Owned(out), op)
    }

    fn unary(&mut self, x: Var, op: Op<E>, f: impl Fn(E) -> E) -> Result<Var> {
        let out: Vec<E> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x + y` where `y`'s shape equals a trailing slice of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(dim_err!("add_broadcast: {ys:?} is not a suffix of {xs:?}"));
        }
        let yv = self.value(y);
        let n = yv.len();
        let out: Vec<E> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yv[i % n])
            .collect();
        let shape = xs.to_vec();
        self.push(shape, Cow::Owned(out), Op::AddBroadcast(x, y))
    }

    pub fn scale(&mut self, x: Var, s: E) -> Result<Var> {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: E) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().map(|v| v.as_f64()).sum();
        self.push(vec![], Cow::Owned(vec![E::from_f64_lossy(s)]), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        let s: f64 = vals.iter().map(|v| v.as_f64()).sum::<f64>() / vals.len() as f64;
        self.push(vec![], Cow::Owned(vec![E::from_f64_lossy(s)]), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(dim_err!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            ));
        }
        let data = self.value(x).to_vec();
        self.push(shape, Cow::Owned(data), Op::Reshape(x))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!(
                "permute: {perm:?} is not a permutation of {} axes",
                in_shape.len()
            ));
        }
        let offsets = permute_offsets(&in_shape, perm);
        let src = self.value(x);
        let out: Vec<E> = offsets.iter().map(|&o| src[o]).collect();
        let out_shape = perm.iter().map(|&p| in_shape[p]).collect();
        self.push(out_shape, Cow::Owned(out), Op::Permute(x, perm.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(dim_err!("transpose needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// `x[index]` along the first axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(dim_err!("select: index {index} out of range for {shape:?}"));
        }
        let inner = numel(&shape[1..]);
        let data = self.value(x)[index * inner..(index + 1) * inner].to_vec();
        self.push(
            shape[1..].to_vec(),
            Cow::Owned(data),
            Op::Select { x, index },
        )
    }

    /// Batched matrix product over matching leading dims:
    /// `[.., m, k] x [.., k, n] -> [.., m, n]`, or with `trans_b` the right
    /// operand is stored as `[.., n, k]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(dim_err!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(dim_err!("matmul: inner dims {k} and {kb} differ"));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![E::zero(); batch * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                false,
                &bv[i * k * n..],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        self.push(
            shape,
            Cow::Owned(out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
        )
    }

    /// `y = x w^T + b` applied over all leading dims of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() {
            return Err(dim_err!("linear: weight must be [out, in], got {ws:?}"));
        }
        let (dout, din) = (ws[0], ws[1]);
        if xs[xs.len() - 1] != din {
            return Err(dim_err!(
                "linear: input last dim {} does not match weight in-dim {din}",
                xs[xs.len() - 1]
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(dim_err!(
                    "linear: bias shape {:?}, expected [{dout}]",
                    self.shape(b)
                ));
            }
        }
        let rows = numel(&xs[..xs.len() - 1]);
        let mut out = vec![E::zero(); rows * dout];
        gemm(
            rows,
            din,
            dout,
            self.value(x),
            false,
            self.value(w),
            true,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(dout);
        self.push(
            shape,
            Cow::Owned(out),
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
        )
    }

    /// 2-D cross-correlation with stride 1 and zero padding.
    ///
    /// `x` is `[C_in, H, W]` or `[B, C_in, H, W]`; `w` is `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, h, wd) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [b, c, h, w] => (*b, *c, *h, *w),
            _ => return Err(dim_err!("conv2d: input must be 3-D or 4-D, got {xs:?}")),
        };
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(dim_err!(
                "conv2d: weight must be [out, in, k, k], got {ws:?}"
            ));
        }
        if ws[1] != cin {
            return Err(dim_err!(
                "conv2d: input has {cin} channels, weight expects {}",
                ws[1]
            ));
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(dim_err!("conv2d: kernel {k} larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(dim_err!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                ));
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            k,
            pad: padding,
            oh: h + 2 * padding - k + 1,
            ow: wd + 2 * padding - k + 1,
        };
        let (ckk, opix) = (geom.col_rows(), geom.out_pixels());
        let mut out = vec![E::zero(); batch * cout * opix];
        let mut col = vec![E::zero(); ckk * opix];
        let (xv, wv) = (self.value(x), self.value(w));
        let bv = b.map(|b| self.value(b));
        for i in 0..batch {
            geom.im2col(&xv[i * cin * h * wd..(i + 1) * cin * h * wd], &mut col);
            let y = &mut out[i * cout * opix..(i + 1) * cout * opix];
            gemm(cout, ckk, opix, wv, false, &col, false, y, false);
            if let Some(bv) = bv {
                for (row, &bb) in y.chunks_mut(opix).zip(bv) {
                    row.iter_mut().for_each(|v| *v += bb);
                }
            }
        }
        let shape = if xs.len() == 3 {
            vec![cout, geom.oh, geom.ow]
        } else {
            vec![batch, cout, geom.oh, geom.ow]
        };
        self.push(shape, Cow::Owned(out), Op::Conv2d { x, w, b, geom })
    }

    /// Normalizes over the last axis with the population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let xs = self.shape(x).to_vec();
        let dim = *xs
            .last()
            .ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(dim_err!(
                "layer_norm: gamma/beta must be [{dim}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / dim;
        let mut out = vec![E::zero(); xv.len()];
        let mut xhat = vec![E::zero(); xv.len()];
        let mut rstd = vec![E::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / dim as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = E::from_f64_lossy(rs);
            for j in 0..dim {
                let xh = E::from_f64_lossy((row[j].as_f64() - mean) * rs);
                xhat[r * dim + j] = xh;
                out[r * dim + j] = xh * gv[j] + bv[j];
            }
        }
        self.push(
            xs,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                rstd,
            },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let dim = *xs.last().ok_or_else(|| dim_err!("softmax on a scalar"))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(dim) {
            let max = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut total = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        self.push(xs, Cow::Owned(out), Op::Softmax(x))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = E::from_f64_lossy(0.5);
        let inv_sqrt2 = E::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        self.unary(x, Op::Gelu(x), |v| {
            half * v * (E::one() + (v * inv_sqrt2).erf())
        })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: E) -> Result<Var> {
        if !(slope > E::zero() && slope < E::one()) {
            return Err(Error::Config(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        self.unary(x, Op::LeakyRelu(x, slope), |v| {
            if v >= E::zero() {
                v
            } else {
                v * slope
            }
        })
    }

    fn shuffle_geom(&self, x: Var, r: usize, packed: bool) -> Result<(ShuffleGeom, Vec<usize>)> {
        let xs = self.shape(x).to_vec();
        if r == 0 {
            return Err(dim_err!("shuffle factor must be positive"));
        }
        if xs.len() < 3 {
            return Err(dim_err!("pixel shuffle needs [.., C, H, W], got {xs:?}"));
        }
        let lead = &xs[..xs.len() - 3];
        let batch = numel(lead);
        let (c, h, w) = (xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]);
        let mut out = lead.to_vec();
        if packed {
            if c % (r * r) != 0 {
                return Err(dim_err!(
                    "pixel_shuffle: {c} channels not divisible by {}",
                    r * r
                ));
            }
            let geom = ShuffleGeom {
                batch,
                c: c / (r * r),
                h,
                w,
                r,
            };
            out.extend([geom.c, h * r, w * r]);
            Ok((geom, out))
        } else {
            if h % r != 0 || w % r != 0 {
                return Err(dim_err!("pixel_unshuffle: {h}x{w} not divisible by {r}"));
            }
            let geom = ShuffleGeom {
                batch,
                c,
                h: h / r,
                w: w / r,
                r,
            };
            out.extend([c * r * r, h / r, w / r]);
            Ok((geom, out))
        }
    }

    /// `[.., C*r*r, H, W] -> [.., C, H*r, W*r]` with
    /// `out[c, h*r+i, w*r+j] = in[c*r*r + i*r + j, h, w]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (geom, shape) = self.shuffle_geom(x, r, true)?;
        let src = self.value(x);
        let mut out = vec![E::zero(); src.len()];
        geom.for_each(|p, s| out[s] = src[p]);
        self.push(shape, Cow::Owned(out), Op::PixelShuffle { x, geom })
    }

    /// Inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (geom, shape) = self.shuffle_geom(x, r, false)?;
        let src = self.value(x);
        let mut out = vec![E::zero(); src.len()];
        geom.for_each(|p, s| out[p] = src[s]);
        self.push(shape, Cow::Owned(out), Op::PixelUnshuffle { x, geom })
    }

    /// Separable filter over the last two axes with the same odd-length
    /// kernel along both, clamp-to-edge boundaries, same-size output.
    pub fn blur(&mut self, x: Var, kernel: &[E]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(dim_err!("blur needs at least 2 axes, got {xs:?}"));
        }
        if kernel.len() % 2 == 0 {
            return Err(dim_err!("blur kernel length must be odd"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = numel(&xs[..xs.len() - 2]);
        let mut tmp = vec![E::zero(); planes * h * w];
        let mut out = vec![E::zero(); planes * h * w];
        blur_rows(self.value(x), &mut tmp, kernel, planes, h, w);
        blur_cols(&tmp, &mut out, kernel, planes, h, w);
        self.push(
            xs,
            Cow::Owned(out),
            Op::Blur {
                x,
                kernel: kernel.to_vec(),
                planes,
                h,
                w,
            },
        )
    }

    /// Runs reverse-mode differentiation from a one-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            // Gradient buffer for input `v`, allocated lazily; `None` when
            // `v` needs no gradient.
            macro_rules! buf {
                ($v:expr) => {{
                    let v: Var = $v;
                    if nodes[v.0].requires_grad {
                        Some(
                            grads[v.0]
                                .get_or_insert_with(|| vec![E::zero(); nodes[v.0].value.len()]),
                        )
                    } else {
                        None
                    }
                }};
            }
            let val = |v: Var| -> &[E] { &nodes[v.0].value };

            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    match out.params.get_mut(id) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => {
                            out.params.insert(*id, g.clone());
                        }
                    }
                    out.leaves.insert(i, g);
                }
                Op::Add(a, b) => {
                    if let Some(ga) = buf!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                    }
                    if let Some(gb) = buf!(*b) {
                        gb.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = buf!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                    }
                    if let Some(gb) = buf!(*b) {
                        gb.iter_mut().zip(&g).for_each(|(d, s)| *d -= *s);
                    }
                }
                Op::Mul(a, b) => {
                    if a == b {
                        let av = val(*a);
                        if let Some(ga) = buf!(*a) {
                            for ((d, s), x) in ga.iter_mut().zip(&g).zip(av) {
                                *d += *s * (*x + *x);
                            }
                        }
                    } else {
                        let (av, bv) = (val(*a), val(*b));
                        if let Some(ga) = buf!(*a) {
                            for ((d, s), y) in ga.iter_mut().zip(&g).zip(bv) {
                                *d += *s * *y;
                            }
                        }
                        if let Some(gb) = buf!(*b) {
                            for ((d, s), x) in gb.iter_mut().zip(&g).zip(av) {
                                *d += *s * *x;
                            }
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    if let Some(ga) = buf!(*a) {
                        for ((d, s), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += *s / *y;
                        }
                    }
                    if let Some(gb) = buf!(*b) {
                        for (((d, s), x), y) in gb.iter_mut().zip(&g).zip(av).zip(bv) {
                            *d -= *s * *x / (*y * *y);
                        }
                    }
                }
                Op::AddBroadcast(x, y) => {
                    if let Some(gx) = buf!(*x) {
                        gx.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                    }
                    if let Some(gy) = buf!(*y) {
                        let n = gy.len();
                        for chunk in g.chunks(n) {
                            gy.iter_mut().zip(chunk).for_each(|(d, s)| *d += *s);
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(gx) = buf!(*x) {
                        gx.iter_mut().zip(&g).for_each(|(d, v)| *d += *v * *s);
                    }
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    if let Some(gx) = buf!(*x) {
                        gx.iter_mut().zip(&g).for_each(|(d, s)| *d += *s);
                    }
                }
                Op::Abs(x) => {
                    let xv = val(*x);
                    if let Some(gx) = buf!(*x) {
                        for ((d, s), v) in gx.iter_mut().zip(&g).zip(xv) {
                            if *v > E::zero() {
                                *d += *s;
                            } else if *v < E::zero() {
                                *d -= *s;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = buf!(*x) {
                        gx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = buf!(*x) {
                        let s = g[0] / E::from_usize(gx.len()).unwrap();
                        gx.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::Permute(x, perm) => {
                    let offsets = permute_offsets(&nodes[x.0].shape, perm);
                    if let Some(gx) = buf!(*x) {
                        for (o, s) in offsets.iter().zip(&g) {
                            gx[*o] += *s;
                        }
                    }
                }
                Op::Select { x, index } => {
                    if let Some(gx) = buf!(*x) {
                        let n = g.len();
                        gx[index * n..(index + 1) * n]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(d, s)| *d += *s);
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    trans_b,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n) = (*m, *k, *n);
                    let (av, bv) = (val(*a), val(*b));
                    if let Some(ga) = buf!(*a) {
                        for i in 0..*batch {
                            let gc = &g[i * m * n..];
                            let bb = &bv[i * k * n..];
                            let da = &mut ga[i * m * k..(i + 1) * m * k];
                            // dA = dC * B^T, where a transposed B operand is
                            // stored [n, k] and needs no transpose here.
                            gemm(m, n, k, gc, false, bb, !*trans_b, da, true);
                        }
                    }
                    if let Some(gb) = buf!(*b) {
                        for i in 0..*batch {
                            let gc = &g[i * m * n..];
                            let aa = &av[i * m * k..];
                            let db = &mut gb[i * k * n..(i + 1) * k * n];
                            if *trans_b {
                                gemm(n, m, k, gc, true, aa, false, db, true);
                            } else {
                                gemm(k, m, n, aa, true, gc, false, db, true);
                            }
                        }
                    }
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    din,
                    dout,
                } => {
                    let (rows, din, dout) = (*rows, *din, *dout);
                    let (xv, wv) = (val(*x), val(*w));
                    if let Some(gx) = buf!(*x) {
                        gemm(rows, dout, din, &g, false, wv, false, gx, true);
                    }
                    if let Some(gw) = buf!(*w) {
                        gemm(dout, rows, din, &g, true, xv, false, gw, true);
                    }
                    if let Some(b) = b {
                        if let Some(gb) = buf!(*b) {
                            for row in g.chunks(dout) {
                                gb.iter_mut().zip(row).for_each(|(d, s)| *d += *s);
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (ckk, opix) = (geom.col_rows(), geom.out_pixels());
                    let in_len = geom.cin * geom.h * geom.w;
                    let out_len = geom.cout * opix;
                    let (xv, wv) = (val(*x), val(*w));
                    let mut col = vec![E::zero(); ckk * opix];
                    if let Some(gw) = buf!(*w) {
                        for i in 0..geom.batch {
                            geom.im2col(&xv[i * in_len..(i + 1) * in_len], &mut col);
                            let gy = &g[i * out_len..(i + 1) * out_len];
                            gemm(geom.cout, opix, ckk, gy, false, &col, true, gw, true);
                        }
                    }
                    if let Some(b) = b {
                        if let Some(gb) = buf!(*b) {
                            for i in 0..geom.batch {
                                let gy = &g[i * out_len..(i + 1) * out_len];
                                for (d, row) in gb.iter_mut().zip(gy.chunks(opix)) {
                                    *d += row.iter().copied().sum::<E>();
                                }
                            }
                        }
                    }
                    if let Some(gx) = buf!(*x) {
                        for i in 0..geom.batch {
                            let gy = &g[i * out_len..(i + 1) * out_len];
                            gemm(ckk, geom.cout, opix, wv, true, gy, false, &mut col, false);
                            geom.col2im_add(&col, &mut gx[i * in_len..(i + 1) * in_len]);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    dim,
                    xhat,
                    rstd,
                } => {
                    let dim = *dim;
                    let gv = val(*gamma);
                    if let Some(gg) = buf!(*gamma) {
                        for (grow, xrow) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for j in 0..dim {
                                gg[j] += grow[j] * xrow[j];
                            }
                        }
                    }
                    if let Some(gb) = buf!(*beta) {
                        for grow in g.chunks(dim) {
                            gb.iter_mut().zip(grow).for_each(|(d, s)| *d += *s);
                        }
                    }
                    if let Some(gx) = buf!(*x) {
                        let inv_d = 1.0 / dim as f64;
                        for (r, (grow, xrow)) in g.chunks(dim).zip(xhat.chunks(dim)).enumerate() {
                            let mut mean_dxh = 0.0f64;
                            let mut mean_dxh_xh = 0.0f64;
                            for j in 0..dim {
                                let dxh = (grow[j] * gv[j]).as_f64();
                                mean_dxh += dxh;
                                mean_dxh_xh += dxh * xrow[j].as_f64();
                            }
                            mean_dxh *= inv_d;
                            mean_dxh_xh *= inv_d;
                            let rs = rstd[r].as_f64();
                            let dst = &mut gx[r * dim..(r + 1) * dim];
                            for j in 0..dim {
                                let dxh = (grow[j] * gv[j]).as_f64();
                                dst[j] += E::from_f64_lossy(
                                    rs * (dxh - mean_dxh - xrow[j].as_f64() * mean_dxh_xh),
                                );
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let dim = *node.shape.last().unwrap();
                    if let Some(gx) = buf!(*x) {
                        for ((dst, grow), yrow) in
                            gx.chunks_mut(dim).zip(g.chunks(dim)).zip(y.chunks(dim))
                        {
                            let dot: E = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                            for j in 0..dim {
                                dst[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    let half = E::from_f64_lossy(0.5);
                    let inv_sqrt2 = E::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = E::from_f64_lossy(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    if let Some(gx) = buf!(*x) {
                        for ((d, s), v) in gx.iter_mut().zip(&g).zip(xv) {
                            let cdf = half * (E::one() + (*v * inv_sqrt2).erf());
                            let pdf = (-half * *v * *v).exp() * inv_sqrt_2pi;
                            *d += *s * (cdf + *v * pdf);
                        }
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = val(*x);
                    if let Some(gx) = buf!(*x) {
                        for ((d, s), v) in gx.iter_mut().zip(&g).zip(xv) {
                            *d += if *v >= E::zero() { *s } else { *s * *slope };
                        }
                    }
                }
                Op::PixelShuffle { x, geom } => {
                    if let Some(gx) = buf!(*x) {
                        geom.for_each(|p, s| gx[p] += g[s]);
                    }
                }
                Op::PixelUnshuffle { x, geom } => {
                    if let Some(gx) = buf!(*x) {
                        geom.for_each(|p, s| gx[s] += g[p]);
                    }
                }
                Op::Blur {
                    x,
                    kernel,
                    planes,
                    h,
                    w,
                } => {
                    if let Some(gx) = buf!(*x) {
                        let mut tmp = vec![E::zero(); g.len()];
                        blur_cols_adjoint(&g, &mut tmp, kernel, *planes, *h, *w);
                        blur_rows_adjoint(&tmp, gx, kernel, *planes, *h, *w);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Source offset for each output element of a permutation, in output order.
fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(in_shape);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn blur_rows<E: Element>(
    src: &[E],
    dst: &mut [E],
    kernel: &[E],
    planes: usize,
    h: usize,
    w: usize,
) {
    let radius = (kernel.len() / 2) as isize;
    for (s, d) in src.chunks(w).zip(dst.chunks_mut(w)).take(planes * h) {
        for x in 0..w {
            let mut acc = E::zero();
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * s[clamp_index(x as isize + t as isize - radius, w)];
            }
            d[x] = acc;
        }
    }
}

fn blur_rows_adjoint<E: Element>(
    g: &[E],
    dst: &mut [E],
    kernel: &[E],
    planes: usize,
    h: usize,
    w: usize,
) {
    let radius = (kernel.len() / 2) as isize;
    for (s, d) in g.chunks(w).zip(dst.chunks_mut(w)).take(planes * h) {
        for x in 0..w {
            for (t, &kv) in kernel.iter().enumerate() {
                d[clamp_index(x as isize + t as isize - radius, w)] += kv * s[x];
            }
        }
    }
}

fn blur_cols<E: Element>(
    src: &[E],
    dst: &mut [E],
    kernel: &[E],
    planes: usize,
    h: usize,
    w: usize,
) {
    let radius = (kernel.len() / 2) as isize;
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &mut d[y * w..(y + 1) * w];
            row.iter_mut().for_each(|v| *v = E::zero());
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = clamp_index(y as isize + t as isize - radius, h);
                for (o, i) in row.iter_mut().zip(&s[sy * w..(sy + 1) * w]) {
                    *o += kv * *i;
                }
            }
        }
    }
}

fn blur_cols_adjoint<E: Element>(
    g: &[E],
    dst: &mut [E],
    kernel: &[E],
    planes: usize,
    h: usize,
    w: usize,
) {
    let radius = (kernel.len() / 2) as isize;
    for p in 0..planes {
        let s = &g[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (t, &kv) in kernel.iter().enumerate() {
                let sy = clamp_index(y as isize + t as isize - radius, h);
                let (src_row, dst_row) = (&s[y * w..(y + 1) * w], sy * w);
                for x in 0..w {
                    d[dst_row + x] += kv * src_row[x];
                }
            }
        }
    }
}
