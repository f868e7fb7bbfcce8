use std::rc::Rc;

use super::{Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    Choose {
        picks: Rc<Vec<u8>>,
        inputs: Vec<Var>,
    },
    Gather {
        x: Var,
        index: Rc<Vec<usize>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    MeanAbs(Var),
    MeanSq(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// recorded order is already topological.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// 2-D convolution over NHWC input with a `[kh, kw, cin, cout]` kernel
    /// and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NHWC");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [kh,kw,cin,cout]");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch");
        assert!(stride >= 1);
        assert!(xs[1] + 2 * pad >= ws[0] && xs[2] + 2 * pad >= ws[1]);
        let geom = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            cout: ws[3],
            stride,
            pad,
            ho: (xs[1] + 2 * pad - ws[0]) / stride + 1,
            wo: (xs[2] + 2 * pad - ws[1]) / stride + 1,
        };
        if let Some(b) = b {
            assert_eq!(self.value(b).len(), geom.cout);
        }
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); geom.rows() * geom.cout];
        T::gemm(
            geom.rows(),
            geom.patch(),
            geom.cout,
            T::one(),
            &cols,
            geom.patch() as isize,
            1,
            self.value(w).data(),
            geom.cout as isize,
            1,
            T::zero(),
            &mut out,
            geom.cout as isize,
            1,
        );
        if let Some(b) = b {
            add_row_bias(&mut out, self.value(b).data());
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = if needs && self.needs(w) { cols } else { Vec::new() };
        let value = Tensor::new(vec![geom.n, geom.ho, geom.wo, geom.cout], out);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, needs)
    }

    /// Affine map over the trailing axis with a `[cin, cout]` weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().unwrap();
        assert_eq!(ws, vec![cin, ws[1]], "linear weight must be [cin, cout]");
        let cout = ws[1];
        let rows = self.value(x).len() / cin;
        let mut out = vec![T::zero(); rows * cout];
        T::gemm(
            rows,
            cin,
            cout,
            T::one(),
            self.value(x).data(),
            cin as isize,
            1,
            self.value(w).data(),
            cout as isize,
            1,
            T::zero(),
            &mut out,
            cout as isize,
            1,
        );
        if let Some(b) = b {
            add_row_bias(&mut out, self.value(b).data());
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, needs)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, s), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| gelu_parts(v).0);
        let needs = self.needs(x);
        self.push(value, Op::Gelu(x), needs)
    }

    /// Concatenates along the trailing (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1], "concat leading shape mismatch");
        let ca = *sa.last().unwrap();
        let cb = *sb.last().unwrap();
        let rows = self.value(a).len() / ca;
        let mut data = Vec::with_capacity(rows * (ca + cb));
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for r in 0..rows {
                data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
            }
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Concat { a, b, ca, cb }, needs)
    }

    /// Elementwise selection: `out[i] = inputs[picks[i]][i]`.
    pub fn choose(&mut self, picks: Rc<Vec<u8>>, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty());
        let shape = self.shape(inputs[0]).to_vec();
        for &v in inputs {
            assert_eq!(self.shape(v), &shape[..], "choose shape mismatch");
        }
        assert_eq!(picks.len(), self.value(inputs[0]).len());
        let data = picks
            .iter()
            .enumerate()
            .map(|(i, &p)| self.value(inputs[p as usize]).data()[i])
            .collect();
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::new(shape, data),
            Op::Choose {
                picks,
                inputs: inputs.to_vec(),
            },
            needs,
        )
    }

    /// Re-indexing: `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<Vec<usize>>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let data = {
            let src = self.value(x).data();
            index.iter().map(|&i| src[i]).collect()
        };
        let needs = self.needs(x);
        self.push(Tensor::new(shape.to_vec(), data), Op::Gather { x, index }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n = self.value(x).len();
        self.gather(x, Rc::new((0..n).collect()), shape)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let c = self.value(x).last_dim();
        assert_eq!(self.value(gamma).len(), c);
        assert_eq!(self.value(beta).len(), c);
        let rows = self.value(x).len() / c;
        let eps = T::from_f64_lossy(1e-5);
        let cf = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        {
            let xd = self.value(x).data();
            let g = self.value(gamma).data();
            let bt = self.value(beta).data();
            for r in 0..rows {
                let row = &xd[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() / cf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let xh = (row[j] - mean) * rs;
                    xhat[r * c + j] = xh;
                    out[r * c + j] = xh * g[j] + bt[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).last_dim();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out), Op::Softmax(x), needs)
    }

    /// Batched matrix product of `[B, M, K]` with `[B, K, N]`
    /// (or `[B, N, K]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k);
            sb[1]
        } else {
            assert_eq!(sb[1], k);
            sb[2]
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &ad[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bd[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(vec![batch, m, n], out),
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            needs,
        )
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let xd = self.value(x).data();
        let s: f64 = xd.iter().map(|v| v.abs().as_f64()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(s / xd.len() as f64));
        let needs = self.needs(x);
        self.push(value, Op::MeanAbs(x), needs)
    }

    pub fn mean_sq(&mut self, x: Var) -> Var {
        let xd = self.value(x).data();
        let s: f64 = xd.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let value = Tensor::scalar(T::from_f64_lossy(s / xd.len() as f64));
        let needs = self.needs(x);
        self.push(value, Op::MeanSq(x), needs)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, w) in terms {
            assert_eq!(self.value(v).len(), 1, "weighted_sum expects scalars");
            acc += self.scalar(v) * w;
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); geom.patch() * geom.cout];
                    T::gemm(
                        geom.patch(),
                        geom.rows(),
                        geom.cout,
                        T::one(),
                        cols,
                        1,
                        geom.patch() as isize,
                        g,
                        geom.cout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        geom.cout as isize,
                        1,
                    );
                    accumulate(grads, *w, self.shape(*w), dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, self.shape(*b), column_sums(g, geom.cout));
                    }
                }
                if self.needs(*x) && geom.stride == 1 && geom.pad < geom.kh && geom.pad < geom.kw {
                    // Stride-1 input gradient is a correlation of the output
                    // gradient with the spatially flipped, channel-swapped kernel.
                    let flipped = flip_kernel(self.value(*w).data(), geom);
                    let back = ConvGeom {
                        n: geom.n,
                        h: geom.ho,
                        w: geom.wo,
                        cin: geom.cout,
                        kh: geom.kh,
                        kw: geom.kw,
                        cout: geom.cin,
                        stride: 1,
                        pad: geom.kh - 1 - geom.pad,
                        ho: geom.h,
                        wo: geom.w,
                    };
                    debug_assert_eq!(geom.kh, geom.kw);
                    let gcols = im2col(g, &back);
                    let mut dx = vec![T::zero(); back.rows() * back.cout];
                    T::gemm(
                        back.rows(),
                        back.patch(),
                        back.cout,
                        T::one(),
                        &gcols,
                        back.patch() as isize,
                        1,
                        &flipped,
                        back.cout as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        back.cout as isize,
                        1,
                    );
                    accumulate(grads, *x, self.shape(*x), dx);
                } else if self.needs(*x) {
                    let mut dcols = vec![T::zero(); geom.rows() * geom.patch()];
                    T::gemm(
                        geom.rows(),
                        geom.cout,
                        geom.patch(),
                        T::one(),
                        g,
                        geom.cout as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        geom.cout as isize,
                        T::zero(),
                        &mut dcols,
                        geom.patch() as isize,
                        1,
                    );
                    let dx = col2im(&dcols, geom);
                    accumulate(grads, *x, self.shape(*x), dx);
                }
            }
            Op::Linear { x, w, b } => {
                let cin = self.value(*x).last_dim();
                let cout = self.value(*w).shape()[1];
                let rows = g.len() / cout;
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); cin * cout];
                    T::gemm(
                        cin,
                        rows,
                        cout,
                        T::one(),
                        self.value(*x).data(),
                        1,
                        cin as isize,
                        g,
                        cout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        cout as isize,
                        1,
                    );
                    accumulate(grads, *w, self.shape(*w), dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, self.shape(*b), column_sums(g, cout));
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * cin];
                    T::gemm(
                        rows,
                        cout,
                        cin,
                        T::one(),
                        g,
                        cout as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        cout as isize,
                        T::zero(),
                        &mut dx,
                        cin as isize,
                        1,
                    );
                    accumulate(grads, *x, self.shape(*x), dx);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, self.shape(*a), g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.shape(*b), g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, self.shape(*a), g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, self.shape(*b), g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *a, self.shape(*a), d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(&u, &v)| u * v).collect();
                    accumulate(grads, *b, self.shape(*b), d);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, self.shape(*x), g.iter().map(|&v| v * *s).collect());
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect();
                accumulate(grads, *x, self.shape(*x), d);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&u, &v)| u * gelu_parts(v).1)
                    .collect();
                accumulate(grads, *x, self.shape(*x), d);
            }
            Op::Concat { a, b, ca, cb } => {
                let rows = g.len() / (ca + cb);
                if self.needs(*a) {
                    let mut d = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    accumulate(grads, *a, self.shape(*a), d);
                }
                if self.needs(*b) {
                    let mut d = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    accumulate(grads, *b, self.shape(*b), d);
                }
            }
            Op::Choose { picks, inputs } => {
                for (j, &v) in inputs.iter().enumerate() {
                    if !self.needs(v) {
                        continue;
                    }
                    let d = g
                        .iter()
                        .zip(picks.iter())
                        .map(|(&u, &p)| if p as usize == j { u } else { T::zero() })
                        .collect();
                    accumulate(grads, v, self.shape(v), d);
                }
            }
            Op::Gather { x, index } => {
                let mut d = vec![T::zero(); self.value(*x).len()];
                for (&u, &i) in g.iter().zip(index.iter()) {
                    d[i] += u;
                }
                accumulate(grads, *x, self.shape(*x), d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).last_dim();
                let rows = g.len() / c;
                let gm = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut dg = vec![T::zero(); c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                    accumulate(grads, *gamma, self.shape(*gamma), dg);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, self.shape(*beta), column_sums(g, c));
                }
                if self.needs(*x) {
                    let cf = T::from_usize(c).unwrap();
                    let mut dx = vec![T::zero(); rows * c];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let dxh = g[r * c + j] * gm[j];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[r * c + j];
                        }
                        mean_d = mean_d / cf;
                        mean_dx = mean_dx / cf;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gm[j];
                            dx[r * c + j] = rstd[r] * (dxh - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, self.shape(*x), dx);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.needs(*a) {
                    // da[M,K] = g[M,N] · bᵀ
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bd[i * k * n..(i + 1) * k * n],
                            rsb,
                            csb,
                            T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                    accumulate(grads, *a, self.shape(*a), da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db[N,K] = gᵀ[N,M] · a[M,K]
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                gi,
                                1,
                                n as isize,
                                ai,
                                k as isize,
                                1,
                                T::zero(),
                                out,
                                k as isize,
                                1,
                            );
                        } else {
                            // db[K,N] = aᵀ[K,M] · g[M,N]
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                ai,
                                1,
                                k as isize,
                                gi,
                                n as isize,
                                1,
                                T::zero(),
                                out,
                                n as isize,
                                1,
                            );
                        }
                    }
                    accumulate(grads, *b, self.shape(*b), db);
                }
            }
            Op::MeanAbs(x) => {
                let scale = g[0] / T::from_usize(self.value(*x).len()).unwrap();
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > T::zero() {
                            scale
                        } else if v < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                accumulate(grads, *x, self.shape(*x), d);
            }
            Op::MeanSq(x) => {
                let scale = g[0] * T::from_f64_lossy(2.0) / T::from_usize(self.value(*x).len()).unwrap();
                let d = self.value(*x).data().iter().map(|&v| v * scale).collect();
                accumulate(grads, *x, self.shape(*x), d);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        accumulate(grads, v, self.shape(v), vec![g[0] * w]);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d)),
    }
}

fn add_row_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut s = vec![T::zero(); cols];
    for row in g.chunks(cols) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

/// Tanh-approximated GELU and its derivative.
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + three * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

/// `[kh,kw,cin,cout]` → `[kh,kw,cout,cin]` with both spatial axes reversed.
fn flip_kernel<T: Real>(w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            for ci in 0..g.cin {
                for co in 0..g.cout {
                    let src = ((ky * g.kw + kx) * g.cin + ci) * g.cout + co;
                    let dst = (((g.kh - 1 - ky) * g.kw + (g.kw - 1 - kx)) * g.cout + co) * g.cin + ci;
                    out[dst] = w[src];
                }
            }
        }
    }
    out
}

/// Valid kernel-column range `[lo, hi)` for output column `ox`.
#[inline]
fn tap_range(o: usize, g: &ConvGeom, k: usize, extent: usize) -> (usize, usize, isize) {
    let origin = (o * g.stride) as isize - g.pad as isize;
    let lo = (-origin).max(0) as usize;
    let hi = ((extent as isize - origin).max(0) as usize).min(k);
    (lo, hi.max(lo), origin)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = Vec::with_capacity(g.rows() * patch);
    let zero = T::zero();
    for n in 0..g.n {
        for oy in 0..g.ho {
            let (ky0, ky1, y0) = tap_range(oy, g, g.kh, g.h);
            for ox in 0..g.wo {
                let (kx0, kx1, x0) = tap_range(ox, g, g.kw, g.w);
                let run = (kx1 - kx0) * g.cin;
                let before = kx0 * g.cin;
                let after = (g.kw - kx1) * g.cin;
                cols.resize(cols.len() + ky0 * g.kw * g.cin, zero);
                for ky in ky0..ky1 {
                    let iy = (y0 + ky as isize) as usize;
                    let ix = (x0 + kx0 as isize) as usize;
                    let src = ((n * g.h + iy) * g.w + ix) * g.cin;
                    cols.resize(cols.len() + before, zero);
                    cols.extend_from_slice(&x[src..src + run]);
                    cols.resize(cols.len() + after, zero);
                }
                cols.resize(cols.len() + (g.kh - ky1) * g.kw * g.cin, zero);
            }
        }
    }
    debug_assert_eq!(cols.len(), g.rows() * patch);
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..g.ho {
            let (ky0, ky1, y0) = tap_range(oy, g, g.kh, g.h);
            for ox in 0..g.wo {
                let (kx0, kx1, x0) = tap_range(ox, g, g.kw, g.w);
                let src = &cols[row * patch..(row + 1) * patch];
                let run = (kx1 - kx0) * g.cin;
                for ky in ky0..ky1 {
                    let iy = (y0 + ky as isize) as usize;
                    let ix = (x0 + kx0 as isize) as usize;
                    let dst = ((n * g.h + iy) * g.w + ix) * g.cin;
                    let off = (ky * g.kw + kx0) * g.cin;
                    for (d, &s) in x[dst..dst + run].iter_mut().zip(&src[off..off + run]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
    x
}
