use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, SamplePlan, SampleResult};
use super::{channel_layout, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Operation selector for [`Graph::apply`].
#[derive(Clone, Debug)]
pub enum OpKind {
    /// inputs: x, weight, optional bias
    Conv2d {
        stride: usize,
        padding: usize,
    },
    /// inputs: x `(N, I)`, weight `(O, I)`, optional bias
    Linear,
    Relu,
    MaxPool2,
    AvgPool2,
    AvgPoolGlobal,
    Add,
    Sub,
    Mul,
    MulScalar(f64),
    AddScalar(f64),
    /// Concatenation along axis 1.
    Concat,
    SoftmaxChannel,
    BilinearSample {
        grid: Tensor,
    },
    FlipW,
    Clamp {
        lo: f64,
        hi: f64,
    },
    CosineSimilarity,
    Sum,
    Mean,
}

#[derive(Debug)]
enum Rec {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        n: usize,
        i: usize,
        o: usize,
    },
    Relu(usize),
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool2 {
        x: usize,
        in_shape: Vec<usize>,
    },
    AvgPoolGlobal {
        x: usize,
        plane: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst {
        x: usize,
        factor: Vec<f64>,
    },
    MulScalar(usize, f64),
    AddScalar(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Concat {
        inputs: Vec<usize>,
        chans: Vec<usize>,
    },
    Softmax(usize),
    Sample {
        x: usize,
        plan: SamplePlan,
    },
    FlipW(usize),
    Cosine {
        a: usize,
        b: usize,
        na: Vec<f64>,
        nb: Vec<f64>,
        ra: Vec<f64>,
        rb: Vec<f64>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
        inner: usize,
        classes: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    rec: Rec,
}

/// Norm floor for cosine similarity; zero vectors yield cosine 0.
pub const COSINE_EPS: f64 = 1e-8;

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, rec: Rec) -> Var {
        let index = self.nodes.len();
        // Drop the backward record when nothing upstream needs gradients.
        let rec = if requires_grad { rec } else { Rec::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            rec,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    /// Records a leaf that does not require gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Rec::Leaf)
    }

    /// Records a leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Rec::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the last backward pass, if `v` required grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Generic dispatcher over [`OpKind`].
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize, name: &'static str| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::shape(
                    name,
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
        };
        match op {
            OpKind::Conv2d { stride, padding } => match inputs {
                [x, w] => self.conv2d(*x, *w, None, stride, padding),
                [x, w, b] => self.conv2d(*x, *w, Some(*b), stride, padding),
                _ => Err(Error::shape(
                    "conv2d",
                    format!("expected 2 or 3 inputs, got {}", inputs.len()),
                )),
            },
            OpKind::Linear => match inputs {
                [x, w] => self.linear(*x, *w, None),
                [x, w, b] => self.linear(*x, *w, Some(*b)),
                _ => Err(Error::shape(
                    "linear",
                    format!("expected 2 or 3 inputs, got {}", inputs.len()),
                )),
            },
            OpKind::Relu => arity(1, "relu").and_then(|_| self.relu(inputs[0])),
            OpKind::MaxPool2 => arity(1, "max_pool2").and_then(|_| self.max_pool2(inputs[0])),
            OpKind::AvgPool2 => arity(1, "avg_pool2").and_then(|_| self.avg_pool2(inputs[0])),
            OpKind::AvgPoolGlobal => {
                arity(1, "avg_pool_global").and_then(|_| self.avg_pool_global(inputs[0]))
            }
            OpKind::Add => arity(2, "add").and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2, "sub").and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2, "mul").and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::MulScalar(s) => {
                arity(1, "mul_scalar").and_then(|_| self.mul_scalar(inputs[0], s))
            }
            OpKind::AddScalar(s) => {
                arity(1, "add_scalar").and_then(|_| self.add_scalar(inputs[0], s))
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::SoftmaxChannel => {
                arity(1, "softmax_channel").and_then(|_| self.softmax_channel(inputs[0]))
            }
            OpKind::BilinearSample { grid } => {
                arity(1, "bilinear_sample")?;
                Ok(self.bilinear_sample(inputs[0], &grid)?.0)
            }
            OpKind::FlipW => arity(1, "flip_w").and_then(|_| self.flip_w(inputs[0])),
            OpKind::Clamp { lo, hi } => {
                arity(1, "clamp").and_then(|_| self.clamp(inputs[0], lo, hi))
            }
            OpKind::CosineSimilarity => arity(2, "cosine_similarity")
                .and_then(|_| self.cosine_similarity(inputs[0], inputs[1])),
            OpKind::Sum => arity(1, "sum").and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1, "mean").and_then(|_| self.mean(inputs[0])),
        }
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let geom = ConvGeom::new(
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            stride,
            padding,
        )?;
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [geom.o] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias {:?} for {} filters",
                        self.nodes[bi].value.shape(),
                        geom.o
                    ),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            bi.map(|b| self.nodes[b].value.data()),
        );
        let rg = self.rg(&[xi, wi]) || bi.is_some_and(|b| self.nodes[b].requires_grad);
        let t = Tensor {
            shape: vec![geom.n, geom.o, geom.ho, geom.wo],
            data: out,
        };
        Ok(self.push(
            t,
            rg,
            Rec::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geom,
            },
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        let (n, i, o) = match (xs, ws) {
            (&[n, i], &[o, wi_]) if wi_ == i => (n, i, o),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("input {xs:?} vs weight {ws:?}"),
                ))
            }
        };
        if let Some(bi) = bi {
            if self.nodes[bi].value.shape() != [o] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {o} outputs", self.nodes[bi].value.shape()),
                ));
            }
        }
        let out = kernels::linear_forward(
            self.nodes[xi].value.data(),
            n,
            i,
            self.nodes[wi].value.data(),
            o,
            bi.map(|b| self.nodes[b].value.data()),
        );
        let rg = self.rg(&[xi, wi]) || bi.is_some_and(|b| self.nodes[b].requires_grad);
        Ok(self.push(
            Tensor {
                shape: vec![n, o],
                data: out,
            },
            rg,
            Rec::Linear {
                x: xi,
                w: wi,
                b: bi,
                n,
                i,
                o,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.map(|v| v.max(0.0));
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Rec::Relu(xi)))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4("max_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("input too small: {:?}", self.nodes[xi].value.shape()),
            ));
        }
        let src = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[k] > src[best] {
                            best = k;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[xi]);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, ho, wo],
                data: out,
            },
            rg,
            Rec::MaxPool2 { x: xi, argmax },
        ))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4("avg_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape(
                "avg_pool2",
                format!("input too small: {:?}", self.nodes[xi].value.shape()),
            ));
        }
        let src = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let k = base + 2 * oy * w + 2 * ox;
                    out.push(0.25 * (src[k] + src[k + 1] + src[k + w] + src[k + w + 1]));
                }
            }
        }
        let rg = self.rg(&[xi]);
        let in_shape = vec![n, c, h, w];
        Ok(self.push(
            Tensor {
                shape: vec![n, c, ho, wo],
                data: out,
            },
            rg,
            Rec::AvgPool2 { x: xi, in_shape },
        ))
    }

    pub fn avg_pool_global(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims4("avg_pool_global")?;
        let plane = h * w;
        let out: Vec<f64> = self.nodes[xi]
            .value
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(&[xi]);
        Ok(self.push(
            Tensor {
                shape: vec![n, c, 1, 1],
                data: out,
            },
            rg,
            Rec::AvgPoolGlobal { x: xi, plane },
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let t = va.zip_map(vb, f)?;
        Ok((ai, bi, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(t, rg, Rec::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(t, rg, Rec::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(t, rg, Rec::Mul(ai, bi)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi]
            .value
            .zip_map(factor, |a, b| a * b)
            .map_err(|_| {
                Error::shape(
                    "mul_const",
                    format!("{:?} vs {:?}", self.nodes[xi].value.shape(), factor.shape()),
                )
            })?;
        let rg = self.rg(&[xi]);
        Ok(self.push(
            t,
            rg,
            Rec::MulConst {
                x: xi,
                factor: factor.data().to_vec(),
            },
        ))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.map(|v| v * s);
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Rec::MulScalar(xi, s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.map(|v| v + s);
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Rec::AddScalar(xi)))
    }

    /// Clamp to `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Rec::Clamp { x: xi, lo, hi }))
    }

    /// Concatenate along axis 1. All other extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let ids = inputs
            .iter()
            .map(|v| self.idx(*v))
            .collect::<Result<Vec<_>>>()?;
        let first = self.nodes[ids[0]].value.shape().to_vec();
        if first.len() < 2 {
            return Err(Error::shape(
                "concat",
                format!("need rank >= 2, got {first:?}"),
            ));
        }
        let mut chans = Vec::with_capacity(ids.len());
        for &i in &ids {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            chans.push(s[1]);
        }
        let inner: usize = first[2..].iter().product();
        let total_c: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(first[0] * total_c * inner);
        for n in 0..first[0] {
            for (&i, &c) in ids.iter().zip(&chans) {
                data.extend_from_slice(
                    &self.nodes[i].value.data()[n * c * inner..(n + 1) * c * inner],
                );
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Rec::Concat { inputs: ids, chans },
        ))
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        if v.shape().len() < 2 {
            return Err(Error::shape(
                "softmax_channel",
                format!("need rank >= 2, got {:?}", v.shape()),
            ));
        }
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: kernels::softmax_channel(v.shape(), v.data()),
        };
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Rec::Softmax(xi)))
    }

    /// Bilinear resampling at normalized grid coordinates.
    ///
    /// Returns the sampled tensor and a `(N,1,Ho,Wo)` validity mask. Samples
    /// outside the source extent read 0 and are marked invalid. Only the
    /// feature input is differentiated.
    pub fn bilinear_sample(&mut self, x: Var, grid: &Tensor) -> Result<(Var, Tensor)> {
        let xi = self.idx(x)?;
        let plan = SamplePlan::new(self.nodes[xi].value.shape(), grid.shape(), grid.data())?;
        let data = plan.forward(self.nodes[xi].value.data());
        let mask = plan.mask_tensor();
        let t = Tensor {
            shape: vec![plan.n, plan.c, plan.h_out, plan.w_out],
            data,
        };
        let rg = self.rg(&[xi]);
        Ok((self.push(t, rg, Rec::Sample { x: xi, plan }), mask))
    }

    /// Reverse the last axis (horizontal flip of an image tensor).
    pub fn flip_w(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: kernels::flip_w(v.shape(), v.data()),
        };
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Rec::FlipW(xi)))
    }

    /// Cosine similarity over axis 1 at every other position; axis 1 of the
    /// output has extent 1.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.shape() != vb.shape() || va.shape().len() < 2 {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (outer, c, inner) = channel_layout(va.shape());
        let (da, db) = (va.data(), vb.data());
        let m = outer * inner;
        let (mut out, mut na, mut nb, mut ra, mut rb) = (
            vec![0.0; m],
            vec![0.0; m],
            vec![0.0; m],
            vec![0.0; m],
            vec![0.0; m],
        );
        for n in 0..outer {
            for p in 0..inner {
                let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for k in 0..c {
                    let j = (n * c + k) * inner + p;
                    dot += da[j] * db[j];
                    aa += da[j] * da[j];
                    bb += db[j] * db[j];
                }
                let q = n * inner + p;
                ra[q] = aa.sqrt();
                rb[q] = bb.sqrt();
                na[q] = ra[q].max(COSINE_EPS);
                nb[q] = rb[q].max(COSINE_EPS);
                out[q] = dot / (na[q] * nb[q]);
            }
        }
        let mut shape = va.shape().to_vec();
        shape[1] = 1;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(
            Tensor { shape, data: out },
            rg,
            Rec::Cosine {
                a: ai,
                b: bi,
                na,
                nb,
                ra,
                rb,
            },
        ))
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.nodes[xi].value.clone().reshape(shape)?;
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Rec::Reshape(xi)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.sum();
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), rg, Rec::Sum(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        if v.numel() == 0 {
            return Err(Error::Empty("mean"));
        }
        let s = v.sum() / v.numel() as f64;
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), rg, Rec::Mean(xi)))
    }

    /// Mean cross-entropy of `logits` (`(N,K)` or `(N,K,H,W)`) against
    /// per-position integer labels, averaged over every labelled position.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let v = &self.nodes[li].value;
        if v.shape().len() < 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits need rank >= 2, got {:?}", v.shape()),
            ));
        }
        let (outer, classes, inner) = channel_layout(v.shape());
        if labels.len() != outer * inner {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), v.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let probs = kernels::softmax_channel(v.shape(), v.data());
        let data = v.data();
        let mut total = 0.0;
        for n in 0..outer {
            for p in 0..inner {
                let at = |k: usize| (n * classes + k) * inner + p;
                let m = (0..classes)
                    .map(|k| data[at(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = m
                    + (0..classes)
                        .map(|k| (data[at(k)] - m).exp())
                        .sum::<f64>()
                        .ln();
                total += lse - data[at(labels[n * inner + p])];
            }
        }
        let loss = total / (outer * inner) as f64;
        let rg = self.rg(&[li]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Rec::CrossEntropy {
                logits: li,
                probs,
                labels: labels.to_vec(),
                inner,
                classes,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; every leaf that requires grad ends up with one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].rec, Rec::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if node.requires_grad && matches!(node.rec, Rec::Leaf) {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        data,
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, d: Vec<f64>| match &mut grads[j] {
            Some(existing) => existing.iter_mut().zip(&d).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(d),
        };
        match &nodes[i].rec {
            Rec::Leaf => {}
            Rec::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    nodes[*x].value.data(),
                    nodes[*w].value.data(),
                    g,
                    needs(*x),
                    needs(*w),
                    b.is_some_and(needs),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Rec::Linear {
                x,
                w,
                b,
                n,
                i: ni,
                o,
            } => {
                let (xd, wd) = (nodes[*x].value.data(), nodes[*w].value.data());
                if needs(*x) {
                    let mut dx = vec![0.0; n * ni];
                    for r in 0..*n {
                        for k in 0..*o {
                            let gv = g[r * o + k];
                            for (d, wv) in dx[r * ni..(r + 1) * ni]
                                .iter_mut()
                                .zip(&wd[k * ni..(k + 1) * ni])
                            {
                                *d += gv * wv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; o * ni];
                    for r in 0..*n {
                        for k in 0..*o {
                            let gv = g[r * o + k];
                            for (d, xv) in dw[k * ni..(k + 1) * ni]
                                .iter_mut()
                                .zip(&xd[r * ni..(r + 1) * ni])
                            {
                                *d += gv * xv;
                            }
                        }
                    }
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    let mut db = vec![0.0; *o];
                    for r in 0..*n {
                        for k in 0..*o {
                            db[k] += g[r * o + k];
                        }
                    }
                    acc(b, db);
                }
            }
            Rec::Relu(x) => {
                let xv = nodes[*x].value.data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Rec::MaxPool2 { x, argmax } => {
                let mut dx = vec![0.0; nodes[*x].value.numel()];
                for (gv, &k) in g.iter().zip(argmax) {
                    dx[k] += gv;
                }
                acc(*x, dx);
            }
            Rec::AvgPool2 { x, in_shape } => {
                let (h, w) = (in_shape[2], in_shape[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; in_shape.iter().product()];
                for nc in 0..in_shape[0] * in_shape[1] {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = 0.25 * g[(nc * ho + oy) * wo + ox];
                            let k = nc * h * w + 2 * oy * w + 2 * ox;
                            dx[k] += gv;
                            dx[k + 1] += gv;
                            dx[k + w] += gv;
                            dx[k + w + 1] += gv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Rec::AvgPoolGlobal { x, plane } => {
                let mut dx = Vec::with_capacity(g.len() * plane);
                for gv in g {
                    dx.extend(std::iter::repeat_n(gv / *plane as f64, *plane));
                }
                acc(*x, dx);
            }
            Rec::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Rec::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Rec::Mul(a, b) => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                if needs(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, v)| g * v).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(va).map(|(g, v)| g * v).collect());
                }
            }
            Rec::MulConst { x, factor } => {
                acc(*x, g.iter().zip(factor).map(|(g, f)| g * f).collect())
            }
            Rec::MulScalar(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Rec::AddScalar(x) => acc(*x, g.to_vec()),
            Rec::Clamp { x, lo, hi } => {
                let xv = nodes[*x].value.data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > *lo && v < *hi { *g } else { 0.0 })
                        .collect(),
                );
            }
            Rec::Concat { inputs, chans } => {
                let shape = nodes[i].value.shape();
                let total_c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut offset = 0;
                for (&j, &c) in inputs.iter().zip(chans) {
                    if needs(j) {
                        let mut d = Vec::with_capacity(shape[0] * c * inner);
                        for n in 0..shape[0] {
                            let start = (n * total_c + offset) * inner;
                            d.extend_from_slice(&g[start..start + c * inner]);
                        }
                        acc(j, d);
                    }
                    offset += c;
                }
            }
            Rec::Softmax(x) => {
                let y = nodes[i].value.data();
                let (outer, c, inner) = channel_layout(nodes[i].value.shape());
                let mut dx = vec![0.0; y.len()];
                for n in 0..outer {
                    for p in 0..inner {
                        let at = |k: usize| (n * c + k) * inner + p;
                        let dot: f64 = (0..c).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..c {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Rec::Sample { x, plan } => acc(*x, plan.backward(g)),
            Rec::FlipW(x) => acc(*x, kernels::flip_w(nodes[i].value.shape(), g)),
            Rec::Cosine {
                a,
                b,
                na,
                nb,
                ra,
                rb,
            } => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                let cos = nodes[i].value.data();
                let (outer, c, inner) = channel_layout(nodes[*a].value.shape());
                let mut da = needs(*a).then(|| vec![0.0; va.len()]);
                let mut db = needs(*b).then(|| vec![0.0; vb.len()]);
                for n in 0..outer {
                    for p in 0..inner {
                        let q = n * inner + p;
                        let gq = g[q];
                        let denom = na[q] * nb[q];
                        // When a norm is floored it is constant w.r.t. its input.
                        let sa = if ra[q] > COSINE_EPS {
                            cos[q] / (ra[q] * ra[q])
                        } else {
                            0.0
                        };
                        let sb = if rb[q] > COSINE_EPS {
                            cos[q] / (rb[q] * rb[q])
                        } else {
                            0.0
                        };
                        for k in 0..c {
                            let j = (n * c + k) * inner + p;
                            if let Some(da) = da.as_mut() {
                                da[j] += gq * (vb[j] / denom - sa * va[j]);
                            }
                            if let Some(db) = db.as_mut() {
                                db[j] += gq * (va[j] / denom - sb * vb[j]);
                            }
                        }
                    }
                }
                if let Some(da) = da {
                    acc(*a, da);
                }
                if let Some(db) = db {
                    acc(*b, db);
                }
            }
            Rec::Reshape(x) => acc(*x, g.to_vec()),
            Rec::Sum(x) => acc(*x, vec![g[0]; nodes[*x].value.numel()]),
            Rec::Mean(x) => {
                let n = nodes[*x].value.numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Rec::CrossEntropy {
                logits,
                probs,
                labels,
                inner,
                classes,
            } => {
                let count = labels.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * g[0] / count).collect();
                for (pos, &l) in labels.iter().enumerate() {
                    let (n, p) = (pos / inner, pos % inner);
                    dx[(n * classes + l) * inner + p] -= g[0] / count;
                }
                acc(*logits, dx);
            }
        }
    }
}

/// Resample a plain tensor without recording a graph.
pub fn sample_tensor(x: &Tensor, grid: &Tensor) -> Result<SampleResult> {
    let plan = SamplePlan::new(x.shape(), grid.shape(), grid.data())?;
    let data = plan.forward(x.data());
    Ok(SampleResult {
        output: Tensor {
            shape: vec![plan.n, plan.c, plan.h_out, plan.w_out],
            data,
        },
        mask: plan.mask_tensor(),
    })
}
