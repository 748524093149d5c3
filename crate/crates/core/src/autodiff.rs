//! A small reverse-mode tape over `f64` n-dimensional arrays.
//!
//! Ops are coarse (linear, layer norm, multi-head attention core, NHWC
//! convolution) with hand-written backward passes, so a full forward of the
//! model records a few hundred nodes rather than millions. Every value stored
//! on the tape is in standard (row-major, contiguous) layout.

use ndarray::{concatenate, s, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

/// Receives the output gradient, the parent values, the output value and a
/// per-parent "gradient wanted" flag.
type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

pub(crate) fn view2(x: &Tensor, cols: usize) -> ArrayView2<'_, f64> {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    x.view()
        .into_shape_with_order((rows, cols))
        .expect("tape values are contiguous")
}

fn last_dim(x: &Tensor) -> usize {
    *x.shape().last().expect("rank >= 1")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = if requires_grad { backward } else { None };
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// A differentiable input (weights, or inputs under gradient check).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Vec::new(), None);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an op whose backward is supplied by the caller.
    pub fn custom<F>(&mut self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        self.push(value, parents.iter().map(|p| p.0).collect(), Some(Box::new(backward)))
    }

    /// Backpropagates from a scalar (single-element) root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let parent_values: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &parent_values, &node.value, &needs);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    if self.nodes[p].requires_grad {
                        accumulate(&mut grads[p], pg);
                    }
                }
            }
        }
        Gradients { grads }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.custom(&[a, b], value, |g, _, _, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.custom(&[x], value, move |g, _, _, _| vec![Some(g * c)])
    }

    /// Element-wise product with a fixed tensor (dropout masks, probes).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        assert_eq!(self.shape(x), c.shape(), "mul_const: shape mismatch");
        let value = self.value(x) * &c;
        self.custom(&[x], value, move |g, _, _, _| vec![Some(g * &c)])
    }

    /// Σ x ⊙ w for a fixed `w`; a scalar handy for probing gradients.
    pub fn dot_const(&mut self, x: Var, w: Tensor) -> Var {
        assert_eq!(self.shape(x), w.shape(), "dot_const: shape mismatch");
        let s = (self.value(x) * &w).sum();
        self.custom(&[x], ArrayD::from_elem(IxDyn(&[1]), s), move |g, _, _, _| vec![Some(&w * g[[0]])])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.custom(&[x], ArrayD::from_elem(IxDyn(&[1]), s), |g, p, _, _| {
            vec![Some(ArrayD::from_elem(p[0].raw_dim(), g[[0]]))]
        })
    }

    /// `x · w (+ b)` over the last axis of `x`; `w` is `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (din, dout) = {
            let ws = self.shape(w);
            assert_eq!(ws.len(), 2, "linear: weight must be 2-D");
            (ws[0], ws[1])
        };
        assert_eq!(last_dim(self.value(x)), din, "linear: inner dimension mismatch");
        let mut out_shape = self.shape(x).to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = view2(self.value(x), din).dot(&view2(self.value(w), dout));
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[dout], "linear: bias shape");
            out += &view2(self.value(b), dout).row(0);
        }
        let value = out.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom(&parents, value, move |g, p, _, needs| {
            let g2 = view2(g, dout);
            let x2 = view2(p[0], din);
            let w2 = view2(p[1], dout);
            let dx = needs[0].then(|| g2.dot(&w2.t()).into_dyn().into_shape_with_order(p[0].raw_dim()).unwrap());
            let dw = needs[1].then(|| x2.t().dot(&g2).into_dyn());
            let mut grads = vec![dx, dw];
            if p.len() == 3 {
                grads.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
            }
            grads
        })
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = last_dim(self.value(x));
        let x2 = view2(self.value(x), d);
        let rows = x2.nrows();
        let mut xhat = Array2::zeros((rows, d));
        let mut inv_std = vec![0.0; rows];
        for (r, row) in x2.outer_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gamma_row = view2(self.value(gamma), d).row(0).to_owned();
        let beta_row = view2(self.value(beta), d).row(0).to_owned();
        let out = &xhat * &gamma_row + &beta_row;
        let value = out.into_dyn().into_shape_with_order(self.value(x).raw_dim()).unwrap();
        self.custom(&[x, gamma, beta], value, move |g, p, _, needs| {
            let g2 = view2(g, d);
            let dgamma = needs[1].then(|| (&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
            let dbeta = needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
            let dx = needs[0].then(|| {
                let gam = view2(p[1], d).row(0).to_owned();
                let mut dx = Array2::zeros((rows, d));
                for r in 0..rows {
                    let dxhat = &g2.row(r) * &gam;
                    let xh = xhat.row(r);
                    let m1 = dxhat.sum() / d as f64;
                    let m2 = (&dxhat * &xh).sum() / d as f64;
                    for k in 0..d {
                        dx[[r, k]] = inv_std[r] * (dxhat[k] - m1 - xh[k] * m2);
                    }
                }
                dx.into_dyn().into_shape_with_order(p[0].raw_dim()).unwrap()
            });
            vec![dx, dgamma, dbeta]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.custom(&[x], value, |g, p, _, _| {
            let mut d = g.clone();
            d.zip_mut_with(p[0], |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0
                }
            });
            vec![Some(d)]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let value = self.value(x).mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()));
        self.custom(&[x], value, |g, p, _, _| {
            let mut d = g.clone();
            d.zip_mut_with(p[0], |gv, &v| {
                let u = C * (v + A * v * v * v);
                let th = u.tanh();
                let du = C * (1.0 + 3.0 * A * v * v);
                *gv *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
            });
            vec![Some(d)]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.custom(&[x], value, |g, p, _, _| {
            vec![Some(g.clone().into_shape_with_order(p[0].raw_dim()).unwrap())]
        })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self.value(x).clone().permuted_axes(IxDyn(axes));
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.custom(&[x], value, move |g, _, _, _| {
            vec![Some(g.clone().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.custom(parts, value, move |g, _, _, needs| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let part = need.then(|| {
                        g.slice_axis(Axis(axis), Slice::from(start..start + w))
                            .as_standard_layout()
                            .into_owned()
                    });
                    start += w;
                    part
                })
                .collect()
        })
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Var {
        let value = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .into_owned();
        self.custom(&[x], value, move |g, p, _, _| {
            let mut d = ArrayD::zeros(p[0].raw_dim());
            d.slice_axis_mut(Axis(axis), Slice::from(start..end)).assign(g);
            vec![Some(d)]
        })
    }

    /// Broadcasts axes of length one up to `shape` (same rank required).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let src = self.shape(x).to_vec();
        assert_eq!(src.len(), shape.len(), "broadcast_to: rank mismatch");
        let value = self
            .value(x)
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: incompatible shape")
            .to_owned();
        self.custom(&[x], value, move |g, _, _, _| {
            let mut d = g.clone();
            for (ax, (&s, &t)) in src.iter().zip(g.shape()).enumerate() {
                if s == 1 && t != 1 {
                    d = d.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                }
            }
            vec![Some(d)]
        })
    }

    /// Scaled dot-product attention for `groups` independent sequences of
    /// length `seq`. `q`, `k`, `v` are `[groups · seq, D]` (any leading shape
    /// with that element count), group-major; `D` splits into `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, seq: usize, heads: usize) -> Var {
        let d = last_dim(self.value(q));
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide D");
        assert_eq!(view2(self.value(q), d).nrows(), groups * seq, "attention: row count");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q2 = view2(self.value(q), d);
        let k2 = view2(self.value(k), d);
        let v2 = view2(self.value(v), d);
        let mut out = Array2::zeros((groups * seq, d));
        // probs[g * heads + h] is the seq × seq attention matrix.
        let mut probs = Vec::with_capacity(groups * heads);
        for g in 0..groups {
            let rows = s![g * seq..(g + 1) * seq, ..];
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q2.slice(rows).slice_move(cols);
                let kh = k2.slice(rows).slice_move(cols);
                let vh = v2.slice(rows).slice_move(cols);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_rows(p.view_mut());
                out.slice_mut(s![g * seq..(g + 1) * seq, h * dh..(h + 1) * dh])
                    .assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let value = out.into_dyn().into_shape_with_order(self.value(q).raw_dim()).unwrap();
        self.custom(&[q, k, v], value, move |gout, p, _, _| {
            let g2 = view2(gout, d);
            let q2 = view2(p[0], d);
            let k2 = view2(p[1], d);
            let v2 = view2(p[2], d);
            let mut dq = Array2::zeros((groups * seq, d));
            let mut dk = Array2::zeros((groups * seq, d));
            let mut dv = Array2::zeros((groups * seq, d));
            for g in 0..groups {
                let r = g * seq..(g + 1) * seq;
                for h in 0..heads {
                    let c = h * dh..(h + 1) * dh;
                    let pm = &probs[g * heads + h];
                    let go = g2.slice(s![r.clone(), c.clone()]);
                    let qh = q2.slice(s![r.clone(), c.clone()]);
                    let kh = k2.slice(s![r.clone(), c.clone()]);
                    let vh = v2.slice(s![r.clone(), c.clone()]);
                    dv.slice_mut(s![r.clone(), c.clone()]).assign(&pm.t().dot(&go));
                    let dp = go.dot(&vh.t());
                    let mut ds = &dp * pm;
                    for (mut row, prow) in ds.outer_iter_mut().zip(pm.outer_iter()) {
                        let dot: f64 = row.sum();
                        row.zip_mut_with(&prow, |x, &pv| *x -= pv * dot);
                    }
                    // ds = P ⊙ (dP − rowsum(dP ⊙ P))
                    ds *= scale;
                    dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![r.clone(), c.clone()]).assign(&ds.t().dot(&qh));
                }
            }
            let shape = p[0].raw_dim();
            vec![
                Some(dq.into_dyn().into_shape_with_order(shape.clone()).unwrap()),
                Some(dk.into_dyn().into_shape_with_order(shape.clone()).unwrap()),
                Some(dv.into_dyn().into_shape_with_order(shape).unwrap()),
            ]
        })
    }

    /// 2-D convolution in NHWC layout. `w` is `kh × kw × C_in × C_out`,
    /// `b` has `C_out` entries; `pad` is symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d: input must be NHWC");
        assert_eq!(ws.len(), 4, "conv2d: weight must be kh × kw × Cin × Cout");
        assert_eq!(xs[3], ws[2], "conv2d: channel mismatch");
        let geom = ConvGeom::new(&xs, &ws, stride, pad);
        let cols = geom.im2col(self.value(x));
        let w2 = view2(self.value(w), geom.cout);
        let mut out = cols.dot(&w2);
        out += &view2(self.value(b), geom.cout).row(0);
        let value = out
            .into_dyn()
            .into_shape_with_order(IxDyn(&[geom.n, geom.oh, geom.ow, geom.cout]))
            .unwrap();
        self.custom(&[x, w, b], value, move |g, p, _, needs| {
            let g2 = view2(g, geom.cout);
            let dx = needs[0].then(|| {
                let dcols = g2.dot(&view2(p[1], geom.cout).t());
                geom.col2im(&dcols)
            });
            let dw = needs[1].then(|| cols.t().dot(&g2).into_dyn().into_shape_with_order(p[1].raw_dim()).unwrap());
            let db = needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
            vec![dx, dw, db]
        })
    }
}

pub(crate) fn softmax_rows(mut m: ArrayViewMut2<'_, f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: (usize, usize), pad: (usize, usize)) -> Self {
        let (n, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "conv2d: kernel larger than padded input");
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        ConvGeom {
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            sh,
            sw,
            ph,
            pw,
            oh,
            ow,
        }
    }

    /// Visits every (output row, column block, input offset) triple whose
    /// source pixel lies inside the image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let kc = self.cin;
        for n in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (n * self.oh + oy) * self.ow + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.sh + ky) as isize - self.ph as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.sw + kx) as isize - self.pw as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let col = (ky * self.kw + kx) * kc;
                            let src = ((n * self.h + iy as usize) * self.w + ix as usize) * kc;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &Tensor) -> Array2<f64> {
        let width = self.kh * self.kw * self.cin;
        let mut cols = Array2::zeros((self.n * self.oh * self.ow, width));
        let src = x.as_slice().expect("contiguous");
        let dst = cols.as_slice_mut().unwrap();
        let c = self.cin;
        self.for_each_tap(|row, col, s| {
            let d = row * width + col;
            dst[d..d + c].copy_from_slice(&src[s..s + c]);
        });
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>) -> Tensor {
        let width = self.kh * self.kw * self.cin;
        let mut dx = ArrayD::zeros(IxDyn(&[self.n, self.h, self.w, self.cin]));
        let dst = dx.as_slice_mut().unwrap();
        let src = dcols.as_slice().expect("contiguous");
        let c = self.cin;
        self.for_each_tap(|row, col, s| {
            let d = row * width + col;
            for i in 0..c {
                dst[s + i] += src[d + i];
            }
        });
        dx
    }
}
