use super::kernels::{self, ConvGeom, GroupStats};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Gradient rule of one recorded operator.
///
/// `grad_out` has the shape of `output`; the returned vector holds one entry
/// per input, `None` where `needs[i]` is false.
pub(crate) trait Backward<T: Scalar>: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Records a computation so it can be differentiated in reverse.
///
/// A tape is single-use: build the graph, call [`Tape::backward`], drop it.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every recorded value.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or checked input).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push_op(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            rule: Some(rule),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let numel = self.value(output).numel();
        if numel != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "output must be a scalar, got shape {:?}",
                    self.shape(output)
                ),
            ));
        }
        self.backward_with(output, Tensor::full(self.shape(output), T::one()))
    }

    /// Reverse pass seeded with an explicit upstream gradient.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.rule.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| self.value(*p)).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = rule.backward(&inputs, &node.value, &g, &needs)?;
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                match grads[parent.0].as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += *v;
                        }
                    }
                    None => grads[parent.0] = Some(pg),
                }
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad).map(|data| Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                    grad: None,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    // ---- operators -------------------------------------------------------

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let bvec = self.value(bias);
        let [b, c, h, wd] = x.dims4("conv2d")?;
        let [o, wc, kh, kw] = w.dims4("conv2d")?;
        if wc != c {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square and odd, got {kh}x{kw}"),
            ));
        }
        if bvec.shape() != [o] {
            return Err(Error::shape("conv2d", w.shape(), bvec.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("padded input {:?} smaller than kernel {kh}x{kw}", x.shape()),
            ));
        }
        let geom = ConvGeom {
            batch: b,
            in_ch: c,
            height: h,
            width: wd,
            out_ch: o,
            kernel: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(x.data(), w.data(), bvec.data(), &geom);
        let value = Tensor::from_vec(&[b, o, geom.out_h, geom.out_w], out)?;
        self.push_op("conv2d", value, vec![input, weight, bias], Box::new(ConvRule { geom }))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample_nearest", "factor must be at least 1"));
        }
        let x = self.value(input);
        let [b, c, h, w] = x.dims4("upsample_nearest")?;
        let out = kernels::upsample_forward(x.data(), b * c, h, w, factor);
        let value = Tensor::from_vec(&[b, c, h * factor, w * factor], out)?;
        self.push_op(
            "upsample_nearest",
            value,
            vec![input],
            Box::new(UpsampleRule { planes: b * c, h, w, factor }),
        )
    }

    pub fn group_norm(&mut self, input: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let dims = x.dims4("group_norm")?;
        let c = dims[1];
        if groups == 0 || c % groups != 0 {
            return Err(Error::invalid(
                "group_norm",
                format!("{c} channels are not divisible into {groups} groups"),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("group_norm", "eps must be positive"));
        }
        let (ga, be) = (self.value(gamma), self.value(beta));
        if ga.shape() != [c] || be.shape() != [c] {
            return Err(Error::shape("group_norm", x.shape(), ga.shape()));
        }
        let (out, stats) =
            kernels::group_norm_forward(x.data(), dims, groups, ga.data(), be.data(), T::from_f64(eps));
        let value = Tensor::from_vec(&dims, out)?;
        self.push_op(
            "group_norm",
            value,
            vec![input, gamma, beta],
            Box::new(GroupNormRule { dims, groups, stats }),
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op("relu", value, vec![input], Box::new(ReluRule))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push_op("sigmoid", value, vec![input], Box::new(SigmoidRule))
    }

    /// `max(a, b)` elementwise; gradient at ties goes to `b`.
    pub fn elementwise_max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("elementwise_max", x.shape(), y.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| if p > q { p } else { q })
            .collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        self.push_op("elementwise_max", value, vec![a, b], Box::new(MaxRule))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        self.push_op("add", value, vec![a, b], Box::new(AddRule))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::from_vec(x.shape(), data)?;
        self.push_op("mul", value, vec![a, b], Box::new(MulRule))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let value = self.value(input).map(|v| v * f);
        self.push_op("scale", value, vec![input], Box::new(ScaleRule(f)))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total: T = self.value(input).data().iter().copied().sum();
        self.push_op("sum", Tensor::scalar(total), vec![input], Box::new(SumRule))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let [ba, ca, ha, wa] = x.dims4("concat_channels")?;
        let [bb, cb, hb, wb] = y.dims4("concat_channels")?;
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::shape("concat_channels", x.shape(), y.shape()));
        }
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let mut data = Vec::with_capacity(x.numel() + y.numel());
        for i in 0..ba {
            data.extend_from_slice(&x.data()[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&y.data()[i * pb..(i + 1) * pb]);
        }
        let value = Tensor::from_vec(&[ba, ca + cb, ha, wa], data)?;
        self.push_op(
            "concat_channels",
            value,
            vec![a, b],
            Box::new(ConcatRule { batch: ba, pa, pb }),
        )
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4("slice_channels")?;
        if start + count > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("range [{start}, {}) exceeds {c} channels", start + count),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * count * hw);
        for i in 0..b {
            let base = i * c * hw;
            data.extend_from_slice(&x.data()[base + start * hw..base + (start + count) * hw]);
        }
        let value = Tensor::from_vec(&[b, count, h, w], data)?;
        self.push_op(
            "slice_channels",
            value,
            vec![input],
            Box::new(SliceRule { batch: b, channels: c, hw, start, count }),
        )
    }
}

// ---- gradient rules ------------------------------------------------------

struct ConvRule {
    geom: ConvGeom,
}

impl<T: Scalar> Backward<T> for ConvRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let grads = kernels::conv2d_backward(inputs[0].data(), inputs[1].data(), g, &self.geom, needs[0]);
        Ok(vec![
            grads.input,
            needs[1].then_some(grads.weight),
            needs[2].then_some(grads.bias),
        ])
    }
}

struct UpsampleRule {
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
}

impl<T: Scalar> Backward<T> for UpsampleRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(kernels::upsample_backward(g, self.planes, self.h, self.w, self.factor))])
    }
}

struct GroupNormRule<T> {
    dims: [usize; 4],
    groups: usize,
    stats: GroupStats<T>,
}

impl<T: Scalar> Backward<T> for GroupNormRule<T> {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let grads = kernels::group_norm_backward(
            inputs[0].data(),
            self.dims,
            self.groups,
            inputs[1].data(),
            &self.stats,
            g,
        );
        Ok(vec![
            needs[0].then_some(grads.input),
            needs[1].then_some(grads.gamma),
            needs[2].then_some(grads.beta),
        ])
    }
}

struct ReluRule;

impl<T: Scalar> Backward<T> for ReluRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let dx = inputs[0]
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &d)| if x > T::zero() { d } else { T::zero() })
            .collect();
        Ok(vec![Some(dx)])
    }
}

struct SigmoidRule;

impl<T: Scalar> Backward<T> for SigmoidRule {
    fn backward(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let dx = out
            .data()
            .iter()
            .zip(g)
            .map(|(&s, &d)| d * s * (T::one() - s))
            .collect();
        Ok(vec![Some(dx)])
    }
}

struct MaxRule;

impl<T: Scalar> Backward<T> for MaxRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let da = needs[0].then(|| {
            a.iter()
                .zip(b)
                .zip(g)
                .map(|((&p, &q), &d)| if p > q { d } else { T::zero() })
                .collect()
        });
        let db = needs[1].then(|| {
            a.iter()
                .zip(b)
                .zip(g)
                .map(|((&p, &q), &d)| if p > q { T::zero() } else { d })
                .collect()
        });
        Ok(vec![da, db])
    }
}

struct AddRule;

impl<T: Scalar> Backward<T> for AddRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())])
    }
}

struct MulRule;

impl<T: Scalar> Backward<T> for MulRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        Ok(vec![
            needs[0].then(|| b.iter().zip(g).map(|(&q, &d)| q * d).collect()),
            needs[1].then(|| a.iter().zip(g).map(|(&p, &d)| p * d).collect()),
        ])
    }
}

struct ScaleRule<T>(T);

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.iter().map(|&d| d * self.0).collect())])
    }
}

struct SumRule;

impl<T: Scalar> Backward<T> for SumRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(vec![g[0]; inputs[0].numel()])])
    }
}

struct ConcatRule {
    batch: usize,
    pa: usize,
    pb: usize,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let mut ga = needs[0].then(|| Vec::with_capacity(self.batch * self.pa));
        let mut gb = needs[1].then(|| Vec::with_capacity(self.batch * self.pb));
        for chunk in g.chunks(self.pa + self.pb) {
            if let Some(ga) = ga.as_mut() {
                ga.extend_from_slice(&chunk[..self.pa]);
            }
            if let Some(gb) = gb.as_mut() {
                gb.extend_from_slice(&chunk[self.pa..]);
            }
        }
        Ok(vec![ga, gb])
    }
}

struct SliceRule {
    batch: usize,
    channels: usize,
    hw: usize,
    start: usize,
    count: usize,
}

impl<T: Scalar> Backward<T> for SliceRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx = vec![T::zero(); self.batch * self.channels * self.hw];
        let span = self.count * self.hw;
        for i in 0..self.batch {
            let base = i * self.channels * self.hw + self.start * self.hw;
            dx[base..base + span].copy_from_slice(&g[i * span..(i + 1) * span]);
        }
        Ok(vec![Some(dx)])
    }
}
