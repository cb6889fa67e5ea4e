//! Reverse-mode gradient tape over [`Tensor`].
//!
//! Operations append nodes in execution order, so a reverse scan of the node
//! list is a reverse topological traversal. Every operation carries a
//! hand-derived adjoint; the tape itself only dispatches.

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::kernels as k;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        dil: usize,
    },
    Deconv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        c: E,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Softmax {
        input: Var,
        group: usize,
        perm: Option<Vec<usize>>,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    GatherNeighborhood {
        input: Var,
        r: usize,
    },
    CellwiseDot {
        q: Var,
        key: Var,
    },
    CellwiseWeightedSum {
        v: Var,
        attn: Var,
    },
    Correlate {
        xs: Var,
        xt: Var,
    },
    Upscale {
        input: Var,
        axes: Vec<usize>,
    },
    Slice4d {
        input: Var,
        fixed: [usize; 2],
        source_side: bool,
    },
    CorrSlice {
        xs: Var,
        xt: Var,
        cell: [usize; 2],
        source_side: bool,
    },
    ContractTaps {
        input: Var,
        fine: [usize; 2],
        source_side: bool,
    },
    BceLoss {
        pred: Var,
        target: Tensor<E>,
    },
}

fn op_name<E: Element>(op: &Op<E>) -> &'static str {
    match op {
        Op::Leaf => "Leaf",
        Op::Conv2d { .. } => "Conv2d",
        Op::Deconv2d { .. } => "Deconv2d",
        Op::Relu { .. } => "Relu",
        Op::Add { .. } => "Add",
        Op::Mul { .. } => "Mul",
        Op::Scale { .. } => "Scale",
        Op::ConcatChannels { .. } => "ConcatChannels",
        Op::MatMul { .. } => "MatMul",
        Op::Softmax { .. } => "Softmax",
        Op::Sum { .. } => "Sum",
        Op::Reshape { .. } => "Reshape",
        Op::GatherNeighborhood { .. } => "GatherNeighborhood",
        Op::CellwiseDot { .. } => "CellwiseDot",
        Op::CellwiseWeightedSum { .. } => "CellwiseWeightedSum",
        Op::Correlate { .. } => "Correlate",
        Op::Upscale { .. } => "Upscale",
        Op::Slice4d { .. } => "Slice4d",
        Op::CorrSlice { .. } => "CorrSlice",
        Op::ContractTaps { .. } => "ContractTaps",
        Op::BceLoss { .. } => "BceLoss",
    }
}

struct Node<E: Element> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op<E>,
}

/// Ordered record of executed operations with their inputs and outputs.
pub struct GradientTape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for GradientTape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> GradientTape<E> {
    pub fn new() -> Self {
        GradientTape {
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

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Constant input that never tracks gradients.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<Tensor<E>> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref().map(|buf| {
                Tensor::new(self.nodes[v.0].value.shape().to_vec(), buf.clone())
                    .expect("grad buffer matches value shape")
            })
        })
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op<E>) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by tape op {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs(v))
    }

    // ---- forward operations -------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Result<Var> {
        let out = k::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
            dil,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_needs(&deps);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                dil,
            },
        ))
    }

    pub fn deconv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = k::deconv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_needs(&deps);
        Ok(self.push(
            out,
            rg,
            Op::Deconv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            if *v < E::ZERO {
                *v = E::ZERO;
            }
        }
        let rg = self.needs(input);
        self.push(out, rg, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += *v;
        }
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= *v;
        }
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scalar_mul(&mut self, input: Var, c: E) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.needs(input);
        self.push(out, rg, Op::Scale { input, c })
    }

    /// Concatenates two `[C,H,W]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(Error::shape(format!(
                "concat_channels expects [C,H,W] with equal spatial extents, got {sa:?} and {sb:?}"
            )));
        }
        let shape = vec![sa[0] + sb[0], sa[1], sa[2]];
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::ConcatChannels { a, b }))
    }

    /// Matrix product for `[m,k] x [k,n]` or batched `[B,m,k] x [B,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        let rg = self.any_needs(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul { a, b }))
    }

    /// Softmax over the given axes, computed with max-subtraction.
    pub fn softmax(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("softmax requires at least one axis"));
        }
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.iter().any(|&a| a >= shape.len()) {
            return Err(Error::invalid(format!(
                "softmax axis out of range for shape {shape:?}"
            )));
        }
        let group: usize = sorted.iter().map(|&a| shape[a]).product();
        // Trailing contiguous axes need no permutation.
        let trailing: Vec<usize> = (shape.len() - sorted.len()..shape.len()).collect();
        let (data, perm) = if sorted == trailing {
            (self.value(input).data().to_vec(), None)
        } else {
            let perm: Vec<usize> = (0..shape.len())
                .filter(|d| !sorted.contains(d))
                .chain(sorted.iter().copied())
                .collect();
            (permute(self.value(input), &perm), Some(perm))
        };
        let mut soft = vec![E::ZERO; data.len()];
        k::softmax_groups(&data, group, &mut soft);
        let out_data = match &perm {
            None => soft,
            Some(p) => unpermute(&soft, &shape, p),
        };
        let rg = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, out_data)?,
            rg,
            Op::Softmax { input, group, perm },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let mut s = E::ZERO;
        for &v in self.value(input).data() {
            s += v;
        }
        let rg = self.needs(input);
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// `sum(x ⊙ x)`, a convenient scalar target for gradient checks.
    pub fn sum_of_squares(&mut self, input: Var) -> Result<Var> {
        let sq = self.mul(input, input)?;
        Ok(self.sum(sq))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::Reshape { input }))
    }

    /// `[C,H,W] -> [C,H*W,r*r]` zero-padded neighborhood windows.
    pub fn gather_neighborhood(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = k::gather_neighborhood_forward(self.value(input), r)?;
        let rg = self.needs(input);
        Ok(self.push(out, rg, Op::GatherNeighborhood { input, r }))
    }

    /// Per-cell inner products: q `[C',N]`, key `[C',N,T]` -> `[N,T]`.
    pub fn cellwise_dot(&mut self, q: Var, key: Var) -> Result<Var> {
        let (sq, sk) = (self.value(q).shape(), self.value(key).shape());
        if sq.len() != 2 || sk.len() != 3 || sq[0] != sk[0] || sq[1] != sk[1] {
            return Err(Error::shape(format!(
                "cellwise_dot expects q [C,N] and key [C,N,T], got {sq:?} and {sk:?}"
            )));
        }
        let (c, n, t) = (sk[0], sk[1], sk[2]);
        let qd = self.value(q).data();
        let kd = self.value(key).data();
        let mut out = vec![E::ZERO; n * t];
        for ch in 0..c {
            for cell in 0..n {
                let qv = qd[ch * n + cell];
                let krow = &kd[(ch * n + cell) * t..(ch * n + cell + 1) * t];
                let orow = &mut out[cell * t..(cell + 1) * t];
                for (o, kv) in orow.iter_mut().zip(krow) {
                    *o += qv * *kv;
                }
            }
        }
        let rg = self.any_needs(&[q, key]);
        Ok(self.push(Tensor::new(vec![n, t], out)?, rg, Op::CellwiseDot { q, key }))
    }

    /// Per-cell value mixing: v `[C',N,T]`, attn `[N,T]` -> `[C',N]`.
    pub fn cellwise_weighted_sum(&mut self, v: Var, attn: Var) -> Result<Var> {
        let (sv, sa) = (self.value(v).shape(), self.value(attn).shape());
        if sv.len() != 3 || sa.len() != 2 || sv[1] != sa[0] || sv[2] != sa[1] {
            return Err(Error::shape(format!(
                "cellwise_weighted_sum expects v [C,N,T] and attn [N,T], got {sv:?} and {sa:?}"
            )));
        }
        let (c, n, t) = (sv[0], sv[1], sv[2]);
        let vd = self.value(v).data();
        let ad = self.value(attn).data();
        let mut out = vec![E::ZERO; c * n];
        for ch in 0..c {
            for cell in 0..n {
                let vrow = &vd[(ch * n + cell) * t..(ch * n + cell + 1) * t];
                let arow = &ad[cell * t..(cell + 1) * t];
                let mut s = E::ZERO;
                for (vv, av) in vrow.iter().zip(arow) {
                    s += *vv * *av;
                }
                out[ch * n + cell] = s;
            }
        }
        let rg = self.any_needs(&[v, attn]);
        Ok(self.push(
            Tensor::new(vec![c, n], out)?,
            rg,
            Op::CellwiseWeightedSum { v, attn },
        ))
    }

    /// Unnormalized 4-D correlation of two `[C,H,W]` feature maps.
    pub fn correlate(&mut self, xs: Var, xt: Var) -> Result<Var> {
        let out = k::correlate_forward(self.value(xs), self.value(xt))?;
        let rg = self.any_needs(&[xs, xt]);
        Ok(self.push(out, rg, Op::Correlate { xs, xt }))
    }

    /// Separable bicubic doubling of all four axes of a 4-D score tensor.
    pub fn upscale4d(&mut self, input: Var) -> Result<Var> {
        if self.value(input).rank() != 4 {
            return Err(Error::shape(format!(
                "upscale4d expects a 4-D tensor, got {:?}",
                self.value(input).shape()
            )));
        }
        self.upscale_axes(input, vec![0, 1, 2, 3])
    }

    /// Bicubic doubling of both axes of a 2-D map.
    pub fn upscale2d(&mut self, input: Var) -> Result<Var> {
        if self.value(input).rank() != 2 {
            return Err(Error::shape(format!(
                "upscale2d expects a 2-D tensor, got {:?}",
                self.value(input).shape()
            )));
        }
        self.upscale_axes(input, vec![0, 1])
    }

    fn upscale_axes(&mut self, input: Var, axes: Vec<usize>) -> Result<Var> {
        let mut cur = self.value(input).clone();
        for &a in &axes {
            cur = k::upscale_axis_forward(&cur, a);
        }
        let rg = self.needs(input);
        Ok(self.push(cur, rg, Op::Upscale { input, axes }))
    }

    /// Slice `S[i,j,:,:]` (source side) of a 4-D score tensor.
    pub fn slice_source(&mut self, input: Var, i: usize, j: usize) -> Result<Var> {
        self.slice4d(input, [i, j], true)
    }

    /// Slice `S[:,:,m,n]` (target side) of a 4-D score tensor.
    pub fn slice_target(&mut self, input: Var, m: usize, n: usize) -> Result<Var> {
        self.slice4d(input, [m, n], false)
    }

    fn slice4d(&mut self, input: Var, fixed: [usize; 2], source_side: bool) -> Result<Var> {
        let &[hs, ws, ht, wt] = self.value(input).shape() else {
            return Err(Error::shape("slice expects a 4-D score tensor"));
        };
        let (b0, b1) = if source_side { (hs, ws) } else { (ht, wt) };
        if fixed[0] >= b0 || fixed[1] >= b1 {
            return Err(Error::invalid(format!(
                "slice query {fixed:?} out of range for extents ({b0},{b1})"
            )));
        }
        let data = self.value(input).data();
        let out = if source_side {
            let base = (fixed[0] * ws + fixed[1]) * ht * wt;
            Tensor::new(vec![ht, wt], data[base..base + ht * wt].to_vec())?
        } else {
            let mut v = Vec::with_capacity(hs * ws);
            for i in 0..hs {
                for j in 0..ws {
                    v.push(data[((i * ws + j) * ht + fixed[0]) * wt + fixed[1]]);
                }
            }
            Tensor::new(vec![hs, ws], v)?
        };
        let rg = self.needs(input);
        Ok(self.push(
            out,
            rg,
            Op::Slice4d {
                input,
                fixed,
                source_side,
            },
        ))
    }

    /// One row of the 4-D correlation without materializing it:
    /// the scores of source cell `(i,j)` against every target cell.
    pub fn corr_slice_source(&mut self, xs: Var, xt: Var, i: usize, j: usize) -> Result<Var> {
        self.corr_slice(xs, xt, [i, j], true)
    }

    /// Scores of every source cell against target cell `(m,n)`.
    pub fn corr_slice_target(&mut self, xs: Var, xt: Var, m: usize, n: usize) -> Result<Var> {
        self.corr_slice(xs, xt, [m, n], false)
    }

    fn corr_slice(&mut self, xs: Var, xt: Var, cell: [usize; 2], source_side: bool) -> Result<Var> {
        let (ss, st) = (self.value(xs).shape(), self.value(xt).shape());
        if ss.len() != 3 || st.len() != 3 || ss[0] != st[0] {
            return Err(Error::shape(format!(
                "corr_slice expects [C,H,W] maps with equal channels, got {ss:?} and {st:?}"
            )));
        }
        let (fixed_shape, other_shape) = if source_side {
            (ss.to_vec(), st.to_vec())
        } else {
            (st.to_vec(), ss.to_vec())
        };
        if cell[0] >= fixed_shape[1] || cell[1] >= fixed_shape[2] {
            return Err(Error::invalid(format!(
                "corr_slice cell {cell:?} out of range for {fixed_shape:?}"
            )));
        }
        let c = ss[0];
        let (fd, od) = if source_side {
            (self.value(xs).data(), self.value(xt).data())
        } else {
            (self.value(xt).data(), self.value(xs).data())
        };
        let fixed_plane = fixed_shape[1] * fixed_shape[2];
        let other_plane = other_shape[1] * other_shape[2];
        let fixed_off = cell[0] * fixed_shape[2] + cell[1];
        let mut out = vec![E::ZERO; other_plane];
        for ch in 0..c {
            let f = fd[ch * fixed_plane + fixed_off];
            let plane = &od[ch * other_plane..(ch + 1) * other_plane];
            for (o, v) in out.iter_mut().zip(plane) {
                *o += f * *v;
            }
        }
        let rg = self.any_needs(&[xs, xt]);
        Ok(self.push(
            Tensor::new(vec![other_shape[1], other_shape[2]], out)?,
            rg,
            Op::CorrSlice {
                xs,
                xt,
                cell,
                source_side,
            },
        ))
    }

    /// Source-side bicubic contraction of a coarse 4-D score tensor at fine
    /// source cell `(fi,fj)`: equals `upscale` along the source axes followed
    /// by slicing, without materializing the upscaled tensor.
    pub fn contract_source_taps(&mut self, input: Var, fi: usize, fj: usize) -> Result<Var> {
        self.contract_taps(input, [fi, fj], true)
    }

    pub fn contract_target_taps(&mut self, input: Var, fm: usize, fnn: usize) -> Result<Var> {
        self.contract_taps(input, [fm, fnn], false)
    }

    fn contract_taps(&mut self, input: Var, fine: [usize; 2], source_side: bool) -> Result<Var> {
        let &[hs, ws, ht, wt] = self.value(input).shape() else {
            return Err(Error::shape("contract_taps expects a 4-D score tensor"));
        };
        let (c0, c1) = if source_side { (hs, ws) } else { (ht, wt) };
        if fine[0] >= 2 * c0 || fine[1] >= 2 * c1 {
            return Err(Error::invalid(format!(
                "contract_taps fine cell {fine:?} out of range for doubled ({c0},{c1})"
            )));
        }
        let taps0 = k::bicubic_double_taps::<E>(c0);
        let taps1 = k::bicubic_double_taps::<E>(c1);
        let t0 = taps0[fine[0]];
        let t1 = taps1[fine[1]];
        let data = self.value(input).data();
        let out = if source_side {
            let plane = ht * wt;
            let mut acc = vec![E::ZERO; plane];
            for &(ia, wa) in &t0 {
                for &(jb, wb) in &t1 {
                    let w = wa * wb;
                    let base = (ia * ws + jb) * plane;
                    for (o, v) in acc.iter_mut().zip(&data[base..base + plane]) {
                        *o += w * *v;
                    }
                }
            }
            Tensor::new(vec![ht, wt], acc)?
        } else {
            let mut acc = vec![E::ZERO; hs * ws];
            for &(ma, wa) in &t0 {
                for &(nb, wb) in &t1 {
                    let w = wa * wb;
                    for i in 0..hs {
                        for j in 0..ws {
                            acc[i * ws + j] += w * data[((i * ws + j) * ht + ma) * wt + nb];
                        }
                    }
                }
            }
            Tensor::new(vec![hs, ws], acc)?
        };
        let rg = self.needs(input);
        Ok(self.push(
            out,
            rg,
            Op::ContractTaps {
                input,
                fine,
                source_side,
            },
        ))
    }

    /// Binary cross entropy against a constant target map, summed over cells.
    pub fn bce_loss(&mut self, pred: Var, target: Tensor<E>) -> Result<Var> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::shape(format!(
                "bce shape mismatch: pred {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let eps = E::BCE_EPS;
        let one = E::ONE;
        let mut s = E::ZERO;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let pc = clamp(p, eps, one - eps);
            s += -(t * pc.ln() + (one - t) * (one - pc).ln());
        }
        let rg = self.needs(pred);
        Ok(self.push(Tensor::scalar(s), rg, Op::BceLoss { pred, target }))
    }

    // ---- backward -----------------------------------------------------------

    /// Populates gradients of every tracked node w.r.t. the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![E::ONE]);
        let profile = std::env::var_os("MMNET_PROF").is_some();
        let mut times: std::collections::BTreeMap<&'static str, (std::time::Duration, usize)> =
            std::collections::BTreeMap::new();
        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            if profile {
                let name = op_name(&self.nodes[idx].op);
                let t = std::time::Instant::now();
                self.step_backward(idx);
                let e = times.entry(name).or_default();
                e.0 += t.elapsed();
                e.1 += 1;
            } else {
                self.step_backward(idx);
            }
        }
        if profile {
            for (name, (dur, count)) in &times {
                eprintln!("prof backward {name}: {dur:?} over {count} nodes");
            }
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) -> &mut Vec<E> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![E::ZERO; n])
    }

    /// Adds `src` into the gradient of `v`; the first contribution becomes a
    /// plain copy instead of zero-init-plus-add.
    fn accum_grad(&mut self, v: Var, src: &[E]) {
        match &mut self.grads[v.0] {
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(src) {
                    *d += *s;
                }
            }
            slot @ None => *slot = Some(src.to_vec()),
        }
    }

    fn step_backward(&mut self, idx: usize) {
        // Move the incoming gradient out for the duration of the step (a node
        // is never its own input) and restore it afterwards so callers can
        // still query it.
        let g = Tensor::new(
            self.nodes[idx].value.shape().to_vec(),
            self.grads[idx].take().expect("grad present"),
        )
        .expect("grad shape");
        self.step_backward_inner(idx, &g);
        self.grads[idx] = Some(g.into_data());
    }

    fn step_backward_inner(&mut self, idx: usize, g: &Tensor<E>) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                dil,
            } => {
                let (input, weight, bias, stride, pad, dil) =
                    (*input, *weight, *bias, *stride, *pad, *dil);
                let want_i = self.needs(input);
                let want_w = self.needs(weight);
                let want_b = bias.map(|b| self.needs(b)).unwrap_or(false);
                let mut di = if want_i {
                    Some(std::mem::take(self.ensure_grad(input)))
                } else {
                    None
                };
                let mut dw = if want_w {
                    Some(std::mem::take(self.ensure_grad(weight)))
                } else {
                    None
                };
                let mut db = if want_b {
                    Some(std::mem::take(self.ensure_grad(bias.unwrap())))
                } else {
                    None
                };
                k::conv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    stride,
                    pad,
                    dil,
                    di.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(buf) = di {
                    self.grads[input.0] = Some(buf);
                }
                if let Some(buf) = dw {
                    self.grads[weight.0] = Some(buf);
                }
                if let Some(buf) = db {
                    self.grads[bias.unwrap().0] = Some(buf);
                }
            }
            Op::Deconv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (input, weight, bias, stride, pad) = (*input, *weight, *bias, *stride, *pad);
                let want_i = self.needs(input);
                let want_w = self.needs(weight);
                let want_b = bias.map(|b| self.needs(b)).unwrap_or(false);
                let mut di = if want_i {
                    Some(std::mem::take(self.ensure_grad(input)))
                } else {
                    None
                };
                let mut dw = if want_w {
                    Some(std::mem::take(self.ensure_grad(weight)))
                } else {
                    None
                };
                let mut db = if want_b {
                    Some(std::mem::take(self.ensure_grad(bias.unwrap())))
                } else {
                    None
                };
                k::deconv2d_backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    stride,
                    pad,
                    di.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(buf) = di {
                    self.grads[input.0] = Some(buf);
                }
                if let Some(buf) = dw {
                    self.grads[weight.0] = Some(buf);
                }
                if let Some(buf) = db {
                    self.grads[bias.unwrap().0] = Some(buf);
                }
            }
            Op::Relu { input } => {
                let input = *input;
                if self.needs(input) {
                    let mut gi = std::mem::take(self.ensure_grad(input));
                    for ((d, &v), gv) in gi
                        .iter_mut()
                        .zip(self.nodes[input.0].value.data())
                        .zip(g.data())
                    {
                        if v > E::ZERO {
                            *d += *gv;
                        }
                    }
                    self.grads[input.0] = Some(gi);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for v in [a, b] {
                    if self.needs(v) {
                        self.accum_grad(v, g.data());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let mut ga = std::mem::take(self.ensure_grad(a));
                    for ((d, s), v) in ga
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.nodes[b.0].value.data())
                    {
                        *d += *s * *v;
                    }
                    self.grads[a.0] = Some(ga);
                }
                if self.needs(b) {
                    let mut gb = std::mem::take(self.ensure_grad(b));
                    for ((d, s), v) in gb
                        .iter_mut()
                        .zip(g.data())
                        .zip(self.nodes[a.0].value.data())
                    {
                        *d += *s * *v;
                    }
                    self.grads[b.0] = Some(gb);
                }
            }
            Op::Scale { input, c } => {
                let (input, c) = (*input, *c);
                if self.needs(input) {
                    let gi = self.ensure_grad(input);
                    for (d, s) in gi.iter_mut().zip(g.data()) {
                        *d += c * *s;
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let na = self.nodes[a.0].value.numel();
                if self.needs(a) {
                    self.accum_grad(a, &g.data()[..na]);
                }
                if self.needs(b) {
                    self.accum_grad(b, &g.data()[na..]);
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let mut ga = std::mem::take(self.ensure_grad(a));
                    matmul_backward_a(&self.nodes[b.0].value, g, &mut ga);
                    self.grads[a.0] = Some(ga);
                }
                if self.needs(b) {
                    let mut gb = std::mem::take(self.ensure_grad(b));
                    matmul_backward_b(&self.nodes[a.0].value, g, &mut gb);
                    self.grads[b.0] = Some(gb);
                }
            }
            Op::Softmax { input, group, perm } => {
                let (input, group) = (*input, *group);
                let perm = perm.clone();
                if self.needs(input) {
                    let shape = self.nodes[idx].value.shape().to_vec();
                    let (y, dy) = match &perm {
                        None => (
                            self.nodes[idx].value.data().to_vec(),
                            g.data().to_vec(),
                        ),
                        Some(p) => (
                            permute(&self.nodes[idx].value, p),
                            permute(&g, p),
                        ),
                    };
                    let mut dx = vec![E::ZERO; y.len()];
                    k::softmax_groups_backward(&y, &dy, group, &mut dx);
                    let dx = match &perm {
                        None => dx,
                        Some(p) => unpermute(&dx, &shape, p),
                    };
                    let gi = self.ensure_grad(input);
                    for (d, s) in gi.iter_mut().zip(&dx) {
                        *d += *s;
                    }
                }
            }
            Op::Sum { input } => {
                let input = *input;
                if self.needs(input) {
                    let gv = g.data()[0];
                    let gi = self.ensure_grad(input);
                    for d in gi.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Reshape { input } => {
                let input = *input;
                if self.needs(input) {
                    self.accum_grad(input, g.data());
                }
            }
            Op::GatherNeighborhood { input, r } => {
                let (input, r) = (*input, *r);
                if self.needs(input) {
                    let [_, h, w] = *self.nodes[input.0].value.shape() else { unreachable!() };
                    let mut gi = std::mem::take(self.ensure_grad(input));
                    k::gather_neighborhood_adjoint(g, r, h, w, &mut gi);
                    self.grads[input.0] = Some(gi);
                }
            }
            Op::CellwiseDot { q, key } => {
                let (q, key) = (*q, *key);
                let [c, n, t] = *self.nodes[key.0].value.shape() else { unreachable!() };
                if self.needs(q) {
                    let mut gq = std::mem::take(self.ensure_grad(q));
                    let kd = self.nodes[key.0].value.data();
                    for ch in 0..c {
                        for cell in 0..n {
                            let krow = &kd[(ch * n + cell) * t..(ch * n + cell + 1) * t];
                            let grow = &g.data()[cell * t..(cell + 1) * t];
                            let mut s = E::ZERO;
                            for (kv, gv) in krow.iter().zip(grow) {
                                s += *kv * *gv;
                            }
                            gq[ch * n + cell] += s;
                        }
                    }
                    self.grads[q.0] = Some(gq);
                }
                if self.needs(key) {
                    let mut gk = std::mem::take(self.ensure_grad(key));
                    let qd = self.nodes[q.0].value.data();
                    for ch in 0..c {
                        for cell in 0..n {
                            let qv = qd[ch * n + cell];
                            let grow = &g.data()[cell * t..(cell + 1) * t];
                            let krow = &mut gk[(ch * n + cell) * t..(ch * n + cell + 1) * t];
                            for (d, gv) in krow.iter_mut().zip(grow) {
                                *d += qv * *gv;
                            }
                        }
                    }
                    self.grads[key.0] = Some(gk);
                }
            }
            Op::CellwiseWeightedSum { v, attn } => {
                let (v, attn) = (*v, *attn);
                let [c, n, t] = *self.nodes[v.0].value.shape() else { unreachable!() };
                if self.needs(v) {
                    let mut gv = std::mem::take(self.ensure_grad(v));
                    let ad = self.nodes[attn.0].value.data();
                    for ch in 0..c {
                        for cell in 0..n {
                            let gval = g.data()[ch * n + cell];
                            let arow = &ad[cell * t..(cell + 1) * t];
                            let vrow = &mut gv[(ch * n + cell) * t..(ch * n + cell + 1) * t];
                            for (d, av) in vrow.iter_mut().zip(arow) {
                                *d += gval * *av;
                            }
                        }
                    }
                    self.grads[v.0] = Some(gv);
                }
                if self.needs(attn) {
                    let mut ga = std::mem::take(self.ensure_grad(attn));
                    let vd = self.nodes[v.0].value.data();
                    for ch in 0..c {
                        for cell in 0..n {
                            let gval = g.data()[ch * n + cell];
                            let vrow = &vd[(ch * n + cell) * t..(ch * n + cell + 1) * t];
                            let arow = &mut ga[cell * t..(cell + 1) * t];
                            for (d, vv) in arow.iter_mut().zip(vrow) {
                                *d += gval * *vv;
                            }
                        }
                    }
                    self.grads[attn.0] = Some(ga);
                }
            }
            Op::Correlate { xs, xt } => {
                let (xs, xt) = (*xs, *xt);
                let want_s = self.needs(xs);
                let want_t = self.needs(xt);
                let mut ds = if want_s {
                    Some(std::mem::take(self.ensure_grad(xs)))
                } else {
                    None
                };
                let mut dt = if want_t {
                    Some(std::mem::take(self.ensure_grad(xt)))
                } else {
                    None
                };
                k::correlate_backward(
                    &self.nodes[xs.0].value,
                    &self.nodes[xt.0].value,
                    g,
                    ds.as_deref_mut(),
                    dt.as_deref_mut(),
                );
                if let Some(buf) = ds {
                    self.grads[xs.0] = Some(buf);
                }
                if let Some(buf) = dt {
                    self.grads[xt.0] = Some(buf);
                }
            }
            Op::Upscale { input, axes } => {
                let input = *input;
                let axes = axes.clone();
                if self.needs(input) {
                    // Undo the axis passes in reverse order.
                    let mut cur: Option<Tensor<E>> = None;
                    for &a in axes.iter().rev() {
                        let src = cur.as_ref().unwrap_or(g);
                        let mut shape = src.shape().to_vec();
                        shape[a] /= 2;
                        let mut buf = vec![E::ZERO; shape.iter().product()];
                        k::upscale_axis_adjoint(src, a, &mut buf);
                        cur = Some(Tensor::new(shape, buf).expect("adjoint shape"));
                    }
                    let fin = cur.as_ref().unwrap_or(g);
                    self.accum_grad(input, fin.data());
                }
            }
            Op::Slice4d {
                input,
                fixed,
                source_side,
            } => {
                let (input, fixed, source_side) = (*input, *fixed, *source_side);
                if self.needs(input) {
                    let [hs, ws, ht, wt] = *self.nodes[input.0].value.shape() else {
                        unreachable!()
                    };
                    let gi = self.ensure_grad(input);
                    if source_side {
                        let base = (fixed[0] * ws + fixed[1]) * ht * wt;
                        for (d, s) in gi[base..base + ht * wt].iter_mut().zip(g.data()) {
                            *d += *s;
                        }
                    } else {
                        for i in 0..hs {
                            for j in 0..ws {
                                gi[((i * ws + j) * ht + fixed[0]) * wt + fixed[1]] +=
                                    g.data()[i * ws + j];
                            }
                        }
                    }
                }
            }
            Op::CorrSlice {
                xs,
                xt,
                cell,
                source_side,
            } => {
                let (xs, xt, cell, source_side) = (*xs, *xt, *cell, *source_side);
                let (fixed, other) = if source_side { (xs, xt) } else { (xt, xs) };
                let c = self.nodes[xs.0].value.shape()[0];
                let fshape = self.nodes[fixed.0].value.shape().to_vec();
                let oshape = self.nodes[other.0].value.shape().to_vec();
                let fixed_plane = fshape[1] * fshape[2];
                let other_plane = oshape[1] * oshape[2];
                let fixed_off = cell[0] * fshape[2] + cell[1];
                if self.needs(fixed) {
                    let mut gf = std::mem::take(self.ensure_grad(fixed));
                    let od = self.nodes[other.0].value.data();
                    for ch in 0..c {
                        let plane = &od[ch * other_plane..(ch + 1) * other_plane];
                        let mut s = E::ZERO;
                        for (gv, v) in g.data().iter().zip(plane) {
                            s += *gv * *v;
                        }
                        gf[ch * fixed_plane + fixed_off] += s;
                    }
                    self.grads[fixed.0] = Some(gf);
                }
                if self.needs(other) {
                    let mut go = std::mem::take(self.ensure_grad(other));
                    let fv = self.nodes[fixed.0].value.data();
                    for ch in 0..c {
                        let f = fv[ch * fixed_plane + fixed_off];
                        let plane = &mut go[ch * other_plane..(ch + 1) * other_plane];
                        for (d, gv) in plane.iter_mut().zip(g.data()) {
                            *d += f * *gv;
                        }
                    }
                    self.grads[other.0] = Some(go);
                }
            }
            Op::ContractTaps {
                input,
                fine,
                source_side,
            } => {
                let (input, fine, source_side) = (*input, *fine, *source_side);
                if self.needs(input) {
                    let [hs, ws, ht, wt] = *self.nodes[input.0].value.shape() else {
                        unreachable!()
                    };
                    let (c0, c1) = if source_side { (hs, ws) } else { (ht, wt) };
                    let t0 = k::bicubic_double_taps::<E>(c0)[fine[0]];
                    let t1 = k::bicubic_double_taps::<E>(c1)[fine[1]];
                    let gi = self.ensure_grad(input);
                    if source_side {
                        let plane = ht * wt;
                        for &(ia, wa) in &t0 {
                            for &(jb, wb) in &t1 {
                                let w = wa * wb;
                                let base = (ia * ws + jb) * plane;
                                for (d, s) in gi[base..base + plane].iter_mut().zip(g.data()) {
                                    *d += w * *s;
                                }
                            }
                        }
                    } else {
                        for &(ma, wa) in &t0 {
                            for &(nb, wb) in &t1 {
                                let w = wa * wb;
                                for i in 0..hs {
                                    for j in 0..ws {
                                        gi[((i * ws + j) * ht + ma) * wt + nb] +=
                                            w * g.data()[i * ws + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::BceLoss { pred, target: _ } => {
                let pred = *pred;
                if self.needs(pred) {
                    let gv = g.data()[0];
                    let eps = E::BCE_EPS;
                    let one = E::ONE;
                    let mut gp = std::mem::take(self.ensure_grad(pred));
                    let Op::BceLoss { target, .. } = &self.nodes[idx].op else {
                        unreachable!()
                    };
                    for ((d, &p), &t) in gp
                        .iter_mut()
                        .zip(self.nodes[pred.0].value.data())
                        .zip(target.data())
                    {
                        let pc = clamp(p, eps, one - eps);
                        *d += gv * (-(t / pc) + (one - t) / (one - pc));
                    }
                    self.grads[pred.0] = Some(gp);
                }
            }
        }
    }
}

fn clamp<E: Element>(v: E, lo: E, hi: E) -> E {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn matmul_forward<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    match (a.shape(), b.shape()) {
        (&[m, ka], &[kb, n]) => {
            if ka != kb {
                return Err(Error::shape(format!("matmul inner dims {ka} vs {kb}")));
            }
            let mut out = vec![E::ZERO; m * n];
            gemm_rm(m, ka, n, a.data(), false, b.data(), false, E::ZERO, &mut out);
            Tensor::new(vec![m, n], out)
        }
        (&[ba, m, ka], &[bb, kb, n]) => {
            if ba != bb || ka != kb {
                return Err(Error::shape(format!(
                    "batched matmul mismatch: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut out = vec![E::ZERO; ba * m * n];
            for i in 0..ba {
                gemm_rm(
                    m,
                    ka,
                    n,
                    &a.data()[i * m * ka..],
                    false,
                    &b.data()[i * ka * n..],
                    false,
                    E::ZERO,
                    &mut out[i * m * n..],
                );
            }
            Tensor::new(vec![ba, m, n], out)
        }
        _ => Err(Error::shape(format!(
            "matmul expects rank 2 or batched rank 3, got {:?} x {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

fn matmul_backward_a<E: Element>(b: &Tensor<E>, g: &Tensor<E>, da: &mut [E]) {
    // dA = dC * B^T
    match b.shape() {
        &[kb, n] => {
            let m = g.shape()[0];
            gemm_rm(m, n, kb, g.data(), false, b.data(), true, E::ONE, da);
        }
        &[batch, kb, n] => {
            let m = g.shape()[1];
            for i in 0..batch {
                gemm_rm(
                    m,
                    n,
                    kb,
                    &g.data()[i * m * n..],
                    false,
                    &b.data()[i * kb * n..],
                    true,
                    E::ONE,
                    &mut da[i * m * kb..],
                );
            }
        }
        _ => unreachable!(),
    }
}

fn matmul_backward_b<E: Element>(a: &Tensor<E>, g: &Tensor<E>, db: &mut [E]) {
    // dB = A^T * dC
    match a.shape() {
        &[m, ka] => {
            let n = g.shape()[1];
            gemm_rm(ka, m, n, a.data(), true, g.data(), false, E::ONE, db);
        }
        &[batch, m, ka] => {
            let n = g.shape()[2];
            for i in 0..batch {
                gemm_rm(
                    ka,
                    m,
                    n,
                    &a.data()[i * m * ka..],
                    true,
                    &g.data()[i * m * n..],
                    false,
                    E::ONE,
                    &mut db[i * ka * n..],
                );
            }
        }
        _ => unreachable!(),
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_rm<E: Element>(
    m: usize,
    kk: usize,
    n: usize,
    a: &[E],
    at: bool,
    b: &[E],
    bt: bool,
    beta: E,
    c: &mut [E],
) {
    let (rsa, csa) = if at { (1, m as isize) } else { (kk as isize, 1) };
    let (rsb, csb) = if bt { (1, kk as isize) } else { (n as isize, 1) };
    unsafe {
        E::gemm(
            m,
            kk,
            n,
            E::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Copies tensor data into the axis order given by `perm` (new axis i is old
/// axis `perm[i]`).
fn permute<E: Element>(t: &Tensor<E>, perm: &[usize]) -> Vec<E> {
    let shape = t.shape();
    let rank = shape.len();
    let mut old_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        old_strides[i] = old_strides[i + 1] * shape[i + 1];
    }
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![E::ZERO; t.numel()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * old_strides[perm[i]];
        }
        *slot = t.data()[off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Inverse of [`permute`]: scatters permuted data back into original order.
fn unpermute<E: Element>(data: &[E], orig_shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = orig_shape.len();
    let mut old_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        old_strides[i] = old_strides[i + 1] * orig_shape[i + 1];
    }
    let new_shape: Vec<usize> = perm.iter().map(|&p| orig_shape[p]).collect();
    let mut out = vec![E::ZERO; data.len()];
    let mut idx = vec![0usize; rank];
    for &v in data {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * old_strides[perm[i]];
        }
        out[off] = v;
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}
