//! Forward and backward kernels for every differentiable operation.
//!
//! All kernels run on dense row-major `f64` arrays with fixed loop orders,
//! so results are reproducible bit for bit. There is no implicit
//! broadcasting; the only shape-extending ops are the explicit `AddRow` and
//! `TranslatePoints` forms.

use crate::error::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn};

/// Differentiable operation with its parameters.
///
/// `MatMulSorted` and the softmax denominator sum term values in ascending
/// order (by float total order) instead of index order. Sums become
/// independent of operand order, which makes attention over parts exactly
/// permutation-equivariant instead of merely up to rounding.
#[derive(Debug, Clone)]
pub enum Op {
    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    MatMul,
    /// As `MatMul` with order-independent inner sums.
    MatMulSorted,
    Add,
    Sub,
    Mul,
    /// `a[..., n] + b[n]`, broadcasting `b` over leading axes.
    AddRow,
    Scale(f64),
    AddScalar(f64),
    Concat { axis: usize },
    Relu,
    Tanh,
    /// Softmax along `axis` with an optional additive mask over that axis;
    /// `-inf` mask entries produce exactly zero probability and gradient.
    Softmax { axis: usize, mask: Option<Vec<f64>> },
    /// Normalizes the last axis to zero mean, unit variance.
    LayerNorm { eps: f64 },
    ReduceMax { axis: usize },
    ReduceMean { axis: usize },
    /// Sum of all elements; output is a 0-d scalar.
    SumAll,
    /// `x / (||x||_2 + eps)` along `axis`.
    L2Normalize { axis: usize, eps: f64 },
    Slice { axis: usize, start: usize, end: usize },
    /// Selects rows (axis 0), allowing repeats.
    GatherRows { indices: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Permute { axes: Vec<usize> },
    /// `pts[n,p,3] + t[n,3]` per part.
    TranslatePoints,
    /// Rotates `pts[n,p,3]` by quaternions `q[n,4]` in (w,x,y,z) layout.
    QuatRotate,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::MatMulSorted => "matmul_sorted",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Concat { .. } => "concat",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ReduceMax { .. } => "reduce_max",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::SumAll => "sum_all",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::TranslatePoints => "translate_points",
            Op::QuatRotate => "quat_rotate",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::MatMul | Op::MatMulSorted | Op::Add | Op::Sub | Op::Mul | Op::AddRow => 2,
            Op::TranslatePoints | Op::QuatRotate => 2,
            Op::Concat { .. } => usize::MAX, // variadic, checked separately
            _ => 1,
        }
    }
}

fn shape_err(op: &Op, detail: String) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        detail,
    }
}

/// Sums values in ascending total order; the result does not depend on the
/// order of the input slice. The slice is clobbered.
pub(crate) fn sum_sorted(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().sum()
}

/// Row-major matrix multiply with fixed i-k-j loop order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// Matrix multiply whose inner products sum in value order.
fn mm_sorted(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut scratch = vec![0.0f64; k];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            for kk in 0..k {
                scratch[kk] = arow[kk] * b[kk * n + j];
            }
            out[i * n + j] = sum_sorted(&mut scratch);
        }
    }
}

/// dA[i,kk] = sum_j g[i,j] * b[kk,j]
fn mm_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            arow[kk] += acc;
        }
    }
}

/// dB[kk,j] = sum_i a[i,kk] * g[i,j]
fn mm_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                brow[j] += aik * grow[j];
            }
        }
    }
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(op: &Op, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<MatDims> {
    let sa = a.shape();
    let sb = b.shape();
    match (sa.len(), sb.len()) {
        (2, 2) => {
            if sa[1] != sb[0] {
                return Err(shape_err(op, format!("{sa:?} x {sb:?}")));
            }
            Ok(MatDims {
                batch: 1,
                m: sa[0],
                k: sa[1],
                n: sb[1],
            })
        }
        (3, 3) => {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(shape_err(op, format!("{sa:?} x {sb:?}")));
            }
            Ok(MatDims {
                batch: sa[0],
                m: sa[1],
                k: sa[2],
                n: sb[2],
            })
        }
        _ => Err(shape_err(op, format!("{sa:?} x {sb:?}"))),
    }
}

fn as_slice(x: &ArrayD<f64>) -> &[f64] {
    x.as_slice().expect("tape arrays are standard layout")
}

fn same_shape(op: &Op, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn quat_matrix(q: &[f64]) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Partial derivatives of the rotation matrix w.r.t. each quaternion
/// component, in (w, x, y, z) order.
fn quat_matrix_grads(q: &[f64]) -> [[[f64; 3]; 3]; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]],
        [[0.0, y, z], [y, -2.0 * x, -w], [z, w, -2.0 * x]],
        [[-2.0 * y, x, w], [x, 0.0, z], [-w, z, -2.0 * y]],
        [[-2.0 * z, -w, x], [w, -2.0 * z, y], [x, y, 0.0]],
    ]
    .map(|m| m.map(|row| row.map(|e| 2.0 * e)))
}

/// Iterates lanes of the last axis as mutable slices, in row-major order.
fn for_each_lane_pair(
    x: &ArrayD<f64>,
    out: &mut ArrayD<f64>,
    mut f: impl FnMut(&[f64], &mut [f64]),
) {
    let lane = *x.shape().last().expect("lane ops need at least one axis");
    let xs = as_slice(x);
    let os = out.as_slice_mut().expect("standard layout");
    for (xi, oi) in xs.chunks_exact(lane).zip(os.chunks_exact_mut(lane)) {
        f(xi, oi);
    }
}

/// Moves `axis` to the last position; identity when already last.
fn axis_last(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let nd = x.ndim();
    if axis + 1 == nd {
        return x.clone();
    }
    let mut axes: Vec<usize> = (0..nd).filter(|&a| a != axis).collect();
    axes.push(axis);
    x.view().permuted_axes(axes).as_standard_layout().to_owned()
}

/// Inverse of [`axis_last`].
fn axis_back(x: &ArrayD<f64>, axis: usize) -> ArrayD<f64> {
    let nd = x.ndim();
    if axis + 1 == nd {
        return x.clone();
    }
    let mut axes: Vec<usize> = (0..nd - 1).collect();
    axes.insert(axis, nd - 1);
    x.view().permuted_axes(axes).as_standard_layout().to_owned()
}

pub(crate) fn forward(op: &Op, inputs: &[&ArrayD<f64>]) -> Result<ArrayD<f64>> {
    if !matches!(op, Op::Concat { .. }) && inputs.len() != op.arity() {
        return Err(shape_err(
            op,
            format!("expected {} inputs, got {}", op.arity(), inputs.len()),
        ));
    }
    let out = match op {
        Op::MatMul | Op::MatMulSorted => {
            let (a, b) = (inputs[0], inputs[1]);
            let d = matmul_dims(op, a, b)?;
            let mut out = vec![0.0; d.batch * d.m * d.n];
            let (sa, sb) = (as_slice(a), as_slice(b));
            for bi in 0..d.batch {
                let ao = bi * d.m * d.k;
                let bo = bi * d.k * d.n;
                let co = bi * d.m * d.n;
                let dst = &mut out[co..co + d.m * d.n];
                if matches!(op, Op::MatMulSorted) {
                    mm_sorted(&sa[ao..ao + d.m * d.k], &sb[bo..bo + d.k * d.n], d.m, d.k, d.n, dst);
                } else {
                    mm(&sa[ao..ao + d.m * d.k], &sb[bo..bo + d.k * d.n], d.m, d.k, d.n, dst);
                }
            }
            let shape: Vec<usize> = if a.ndim() == 3 {
                vec![d.batch, d.m, d.n]
            } else {
                vec![d.m, d.n]
            };
            ArrayD::from_shape_vec(IxDyn(&shape), out).expect("shape consistent")
        }
        Op::Add => {
            same_shape(op, inputs[0], inputs[1])?;
            inputs[0] + inputs[1]
        }
        Op::Sub => {
            same_shape(op, inputs[0], inputs[1])?;
            inputs[0] - inputs[1]
        }
        Op::Mul => {
            same_shape(op, inputs[0], inputs[1])?;
            inputs[0] * inputs[1]
        }
        Op::AddRow => {
            let (a, b) = (inputs[0], inputs[1]);
            let n = *a.shape().last().unwrap_or(&0);
            if b.ndim() != 1 || b.shape()[0] != n {
                return Err(shape_err(op, format!("{:?} + {:?}", a.shape(), b.shape())));
            }
            let mut out = a.clone();
            let bs = as_slice(b);
            for_each_lane_pair(a, &mut out, |xi, oi| {
                for j in 0..n {
                    oi[j] = xi[j] + bs[j];
                }
            });
            out
        }
        Op::Scale(c) => inputs[0].mapv(|v| v * c),
        Op::AddScalar(c) => inputs[0].mapv(|v| v + c),
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(shape_err(op, "no inputs".into()));
            }
            let views: Vec<_> = inputs.iter().map(|x| x.view()).collect();
            ndarray::concatenate(Axis(*axis), &views)
                .map_err(|e| shape_err(op, e.to_string()))?
                .as_standard_layout()
                .to_owned()
        }
        Op::Relu => inputs[0].mapv(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Tanh => inputs[0].mapv(f64::tanh),
        Op::Softmax { axis, mask } => {
            let x = inputs[0];
            if *axis >= x.ndim() {
                return Err(shape_err(op, format!("axis {axis} of {:?}", x.shape())));
            }
            let lane = x.shape()[*axis];
            if let Some(m) = mask {
                if m.len() != lane {
                    return Err(shape_err(
                        op,
                        format!("mask length {} vs axis {lane}", m.len()),
                    ));
                }
            }
            let moved = axis_last(x, *axis);
            let mut out = moved.clone();
            let mut err = None;
            let mut scratch = vec![0.0f64; lane];
            for_each_lane_pair(&moved, &mut out, |xi, oi| {
                let biased = |j: usize| xi[j] + mask.as_ref().map_or(0.0, |m| m[j]);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..lane {
                    let v = biased(j);
                    if v > mx {
                        mx = v;
                    }
                }
                if mx == f64::NEG_INFINITY {
                    err = Some(Error::AllMasked);
                    return;
                }
                for j in 0..lane {
                    let v = biased(j) - mx;
                    scratch[j] = v.exp();
                    oi[j] = scratch[j];
                }
                let denom = sum_sorted(&mut scratch);
                for o in oi.iter_mut() {
                    *o /= denom;
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            axis_back(&out, *axis)
        }
        Op::LayerNorm { eps } => {
            let x = inputs[0];
            let lane = *x
                .shape()
                .last()
                .ok_or_else(|| shape_err(op, "scalar input".into()))?;
            if lane == 0 {
                return Err(shape_err(op, "empty lane".into()));
            }
            let mut out = x.clone();
            for_each_lane_pair(x, &mut out, |xi, oi| {
                let mu = xi.iter().sum::<f64>() / lane as f64;
                let var = xi.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / lane as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..lane {
                    oi[j] = (xi[j] - mu) * inv;
                }
            });
            out
        }
        Op::ReduceMax { axis } | Op::ReduceMean { axis } => {
            let x = inputs[0];
            if *axis >= x.ndim() || x.shape()[*axis] == 0 {
                return Err(shape_err(op, format!("axis {axis} of {:?}", x.shape())));
            }
            let moved = axis_last(x, *axis);
            let lane = *moved.shape().last().unwrap();
            let out_shape: Vec<usize> = moved.shape()[..moved.ndim() - 1].to_vec();
            let xs = as_slice(&moved);
            let vals: Vec<f64> = xs
                .chunks_exact(lane)
                .map(|c| {
                    if matches!(op, Op::ReduceMax { .. }) {
                        // Max by total order: independent of element order,
                        // including the -0.0/+0.0 edge.
                        c.iter()
                            .copied()
                            .fold(f64::NEG_INFINITY, |a, b| if b.total_cmp(&a).is_gt() { b } else { a })
                    } else {
                        c.iter().sum::<f64>() / lane as f64
                    }
                })
                .collect();
            ArrayD::from_shape_vec(IxDyn(&out_shape), vals).expect("shape consistent")
        }
        Op::SumAll => {
            let s: f64 = as_slice(inputs[0]).iter().sum();
            ArrayD::from_elem(IxDyn(&[]), s)
        }
        Op::L2Normalize { axis, eps } => {
            let x = inputs[0];
            if *axis >= x.ndim() {
                return Err(shape_err(op, format!("axis {axis} of {:?}", x.shape())));
            }
            let moved = axis_last(x, *axis);
            let mut out = moved.clone();
            for_each_lane_pair(&moved, &mut out, |xi, oi| {
                let n = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = n + eps;
                for (o, v) in oi.iter_mut().zip(xi) {
                    *o = v / s;
                }
            });
            axis_back(&out, *axis)
        }
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            if *axis >= x.ndim() || start >= end || *end > x.shape()[*axis] {
                return Err(shape_err(
                    op,
                    format!("range {start}..{end} on axis {axis} of {:?}", x.shape()),
                ));
            }
            x.slice_axis(Axis(*axis), ndarray::Slice::from(*start..*end))
                .as_standard_layout()
                .to_owned()
        }
        Op::GatherRows { indices } => {
            let x = inputs[0];
            let rows = x.shape().first().copied().unwrap_or(0);
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(shape_err(op, format!("index {bad} of {rows} rows")));
            }
            if indices.is_empty() {
                return Err(shape_err(op, "empty index list".into()));
            }
            let picked: Vec<_> = indices
                .iter()
                .map(|&i| x.index_axis(Axis(0), i).insert_axis(Axis(0)))
                .collect();
            ndarray::concatenate(Axis(0), &picked)
                .map_err(|e| shape_err(op, e.to_string()))?
                .as_standard_layout()
                .to_owned()
        }
        Op::Reshape { shape } => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.len() {
                return Err(shape_err(
                    op,
                    format!("{:?} -> {:?}", x.shape(), shape),
                ));
            }
            x.to_shape(IxDyn(shape))
                .map_err(|e| shape_err(op, e.to_string()))?
                .to_owned()
        }
        Op::Permute { axes } => {
            let x = inputs[0];
            let mut seen = vec![false; x.ndim()];
            if axes.len() != x.ndim() || axes.iter().any(|&a| a >= x.ndim() || std::mem::replace(&mut seen[a], true)) {
                return Err(shape_err(op, format!("axes {axes:?} on {:?}", x.shape())));
            }
            x.view()
                .permuted_axes(axes.clone())
                .as_standard_layout()
                .to_owned()
        }
        Op::TranslatePoints => {
            let (p, t) = (inputs[0], inputs[1]);
            let sp = p.shape();
            if sp.len() != 3 || t.shape() != [sp[0], sp[2]] {
                return Err(shape_err(
                    op,
                    format!("{:?} + {:?}", p.shape(), t.shape()),
                ));
            }
            let (n, m, d) = (sp[0], sp[1], sp[2]);
            let mut out = p.clone();
            let ts = as_slice(t);
            let os = out.as_slice_mut().unwrap();
            for i in 0..n {
                for j in 0..m {
                    for k in 0..d {
                        os[(i * m + j) * d + k] += ts[i * d + k];
                    }
                }
            }
            out
        }
        Op::QuatRotate => {
            let (q, p) = (inputs[0], inputs[1]);
            let (sq, sp) = (q.shape(), p.shape());
            if sq.len() != 2 || sq[1] != 4 || sp.len() != 3 || sp[2] != 3 || sp[0] != sq[0] {
                return Err(shape_err(op, format!("q {sq:?}, pts {sp:?}")));
            }
            let (n, m) = (sp[0], sp[1]);
            let mut out = vec![0.0; n * m * 3];
            let (qs, ps) = (as_slice(q), as_slice(p));
            for i in 0..n {
                let r = quat_matrix(&qs[i * 4..i * 4 + 4]);
                for j in 0..m {
                    let src = &ps[(i * m + j) * 3..(i * m + j) * 3 + 3];
                    let dst = &mut out[(i * m + j) * 3..(i * m + j) * 3 + 3];
                    for a in 0..3 {
                        dst[a] = r[a][0] * src[0] + r[a][1] * src[1] + r[a][2] * src[2];
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[n, m, 3]), out).expect("shape consistent")
        }
    };
    if !as_slice(&out).iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok(out)
}

/// Gradient contributions for each input. `needs[i]` is false when input i
/// does not require a gradient; the kernel then returns `None` for it.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&ArrayD<f64>],
    output: &ArrayD<f64>,
    grad: &ArrayD<f64>,
    needs: &[bool],
) -> Vec<Option<ArrayD<f64>>> {
    match op {
        Op::MatMul | Op::MatMulSorted => {
            let (a, b) = (inputs[0], inputs[1]);
            let d = matmul_dims(op, a, b).expect("checked in forward");
            let (sa, sb, sg) = (as_slice(a), as_slice(b), as_slice(grad));
            let da = needs[0].then(|| {
                let mut out = vec![0.0; sa.len()];
                for bi in 0..d.batch {
                    mm_grad_a(
                        &sg[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                        &sb[bi * d.k * d.n..(bi + 1) * d.k * d.n],
                        d.m,
                        d.k,
                        d.n,
                        &mut out[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                    );
                }
                ArrayD::from_shape_vec(a.raw_dim(), out).unwrap()
            });
            let db = needs[1].then(|| {
                let mut out = vec![0.0; sb.len()];
                for bi in 0..d.batch {
                    mm_grad_b(
                        &sa[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                        &sg[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                        d.m,
                        d.k,
                        d.n,
                        &mut out[bi * d.k * d.n..(bi + 1) * d.k * d.n],
                    );
                }
                ArrayD::from_shape_vec(b.raw_dim(), out).unwrap()
            });
            vec![da, db]
        }
        Op::Add => vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ],
        Op::Sub => vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.mapv(|v| -v)),
        ],
        Op::Mul => vec![
            needs[0].then(|| grad * inputs[1]),
            needs[1].then(|| grad * inputs[0]),
        ],
        Op::AddRow => {
            let n = inputs[1].shape()[0];
            let da = needs[0].then(|| grad.clone());
            let db = needs[1].then(|| {
                let mut acc = vec![0.0; n];
                for lane in as_slice(grad).chunks_exact(n) {
                    for j in 0..n {
                        acc[j] += lane[j];
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[n]), acc).unwrap()
            });
            vec![da, db]
        }
        Op::Scale(c) => vec![needs[0].then(|| grad.mapv(|v| v * c))],
        Op::AddScalar(_) => vec![needs[0].then(|| grad.clone())],
        Op::Concat { axis } => {
            let mut offset = 0;
            inputs
                .iter()
                .zip(needs)
                .map(|(x, &need)| {
                    let w = x.shape()[*axis];
                    let piece = need.then(|| {
                        grad.slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + w))
                            .as_standard_layout()
                            .to_owned()
                    });
                    offset += w;
                    piece
                })
                .collect()
        }
        Op::Relu => vec![needs[0].then(|| {
            let mut g = grad.clone();
            g.zip_mut_with(inputs[0], |gv, &xv| {
                if xv <= 0.0 {
                    *gv = 0.0;
                }
            });
            g
        })],
        Op::Tanh => vec![needs[0].then(|| {
            let mut g = grad.clone();
            g.zip_mut_with(output, |gv, &yv| *gv *= 1.0 - yv * yv);
            g
        })],
        Op::Softmax { axis, .. } => vec![needs[0].then(|| {
            let y = axis_last(output, *axis);
            let g = axis_last(grad, *axis);
            let lane = *y.shape().last().unwrap();
            let mut dx = y.clone();
            let (ys, gs) = (as_slice(&y), as_slice(&g));
            let ds = dx.as_slice_mut().unwrap();
            for li in 0..ys.len() / lane {
                let o = li * lane;
                let mut s = 0.0;
                for j in 0..lane {
                    s += gs[o + j] * ys[o + j];
                }
                for j in 0..lane {
                    ds[o + j] = ys[o + j] * (gs[o + j] - s);
                }
            }
            axis_back(&dx, *axis)
        })],
        Op::LayerNorm { eps } => vec![needs[0].then(|| {
            let x = inputs[0];
            let lane = *x.shape().last().unwrap();
            let mut dx = x.clone();
            let (xs, gs) = (as_slice(x), as_slice(grad));
            let ds = dx.as_slice_mut().unwrap();
            for li in 0..xs.len() / lane {
                let o = li * lane;
                let xi = &xs[o..o + lane];
                let gi = &gs[o..o + lane];
                let nf = lane as f64;
                let mu = xi.iter().sum::<f64>() / nf;
                let var = xi.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                let inv = 1.0 / (var + eps).sqrt();
                let mean_g = gi.iter().sum::<f64>() / nf;
                let mut mean_gy = 0.0;
                for j in 0..lane {
                    mean_gy += gi[j] * (xi[j] - mu) * inv;
                }
                mean_gy /= nf;
                for j in 0..lane {
                    let yj = (xi[j] - mu) * inv;
                    ds[o + j] = inv * (gi[j] - mean_g - yj * mean_gy);
                }
            }
            dx
        })],
        Op::ReduceMax { axis } => vec![needs[0].then(|| {
            let x = axis_last(inputs[0], *axis);
            let lane = *x.shape().last().unwrap();
            let mut dx = ArrayD::zeros(x.raw_dim());
            let xs = as_slice(&x);
            let gs = as_slice(grad);
            let ds = dx.as_slice_mut().unwrap();
            for li in 0..xs.len() / lane {
                let o = li * lane;
                let xi = &xs[o..o + lane];
                // First index attaining the максимум gets the gradient.
                let mut best = 0;
                for j in 1..lane {
                    if xi[j] > xi[best] {
                        best = j;
                    }
                }
                ds[o + best] = gs[li];
            }
            axis_back(&dx, *axis)
        })],
        Op::ReduceMean { axis } => vec![needs[0].then(|| {
            let moved = axis_last(inputs[0], *axis);
            let lane = *moved.shape().last().unwrap();
            let mut dx = ArrayD::zeros(moved.raw_dim());
            let gs = as_slice(grad);
            let ds = dx.as_slice_mut().unwrap();
            for li in 0..ds.len() / lane {
                let gv = gs[li] / lane as f64;
                for j in 0..lane {
                    ds[li * lane + j] = gv;
                }
            }
            axis_back(&dx, *axis)
        })],
        Op::SumAll => vec![needs[0].then(|| {
            let g = grad.first().copied().expect("scalar grad");
            ArrayD::from_elem(inputs[0].raw_dim(), g)
        })],
        Op::L2Normalize { axis, eps } => vec![needs[0].then(|| {
            let x = axis_last(inputs[0], *axis);
            let g = axis_last(grad, *axis);
            let lane = *x.shape().last().unwrap();
            let mut dx = x.clone();
            let (xs, gs) = (as_slice(&x), as_slice(&g));
            let ds = dx.as_slice_mut().unwrap();
            for li in 0..xs.len() / lane {
                let o = li * lane;
                let xi = &xs[o..o + lane];
                let gi = &gs[o..o + lane];
                let n = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = n + eps;
                let gx: f64 = gi.iter().zip(xi).map(|(gv, xv)| gv * xv).sum();
                for j in 0..lane {
                    let correction = if n > 0.0 { xi[j] * gx / (n * s * s) } else { 0.0 };
                    ds[o + j] = gi[j] / s - correction;
                }
            }
            axis_back(&dx, *axis)
        })],
        Op::Slice { axis, start, end } => vec![needs[0].then(|| {
            let mut dx = ArrayD::zeros(inputs[0].raw_dim());
            dx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                .assign(grad);
            dx
        })],
        Op::GatherRows { indices } => vec![needs[0].then(|| {
            let mut dx = ArrayD::zeros(inputs[0].raw_dim());
            for (pos, &i) in indices.iter().enumerate() {
                let mut row = dx.index_axis_mut(Axis(0), i);
                row += &grad.index_axis(Axis(0), pos);
            }
            dx
        })],
        Op::Reshape { .. } => vec![needs[0].then(|| {
            grad.to_shape(inputs[0].raw_dim())
                .expect("same element count")
                .to_owned()
        })],
        Op::Permute { axes } => vec![needs[0].then(|| {
            let mut inverse = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            grad.view()
                .permuted_axes(inverse)
                .as_standard_layout()
                .to_owned()
        })],
        Op::TranslatePoints => {
            let sp = inputs[0].shape();
            let (n, m, d) = (sp[0], sp[1], sp[2]);
            let dp = needs[0].then(|| grad.clone());
            let dt = needs[1].then(|| {
                let gs = as_slice(grad);
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..m {
                        for k in 0..d {
                            out[i * d + k] += gs[(i * m + j) * d + k];
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[n, d]), out).unwrap()
            });
            vec![dp, dt]
        }
        Op::QuatRotate => {
            let (q, p) = (inputs[0], inputs[1]);
            let (n, m) = (p.shape()[0], p.shape()[1]);
            let (qs, ps, gs) = (as_slice(q), as_slice(p), as_slice(grad));
            let dq = needs[0].then(|| {
                let mut out = vec![0.0; n * 4];
                for i in 0..n {
                    // dL/dR[a][b] = sum_j g[i,j,a] * p[i,j,b]
                    let mut dr = [[0.0f64; 3]; 3];
                    for j in 0..m {
                        let o = (i * m + j) * 3;
                        for a in 0..3 {
                            for b in 0..3 {
                                dr[a][b] += gs[o + a] * ps[o + b];
                            }
                        }
                    }
                    let dmats = quat_matrix_grads(&qs[i * 4..i * 4 + 4]);
                    for (c, dmat) in dmats.iter().enumerate() {
                        let mut acc = 0.0;
                        for a in 0..3 {
                            for b in 0..3 {
                                acc += dr[a][b] * dmat[a][b];
                            }
                        }
                        out[i * 4 + c] = acc;
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[n, 4]), out).unwrap()
            });
            let dp = needs[1].then(|| {
                let mut out = vec![0.0; n * m * 3];
                for i in 0..n {
                    let r = quat_matrix(&qs[i * 4..i * 4 + 4]);
                    for j in 0..m {
                        let o = (i * m + j) * 3;
                        for b in 0..3 {
                            out[o + b] =
                                r[0][b] * gs[o] + r[1][b] * gs[o + 1] + r[2][b] * gs[o + 2];
                        }
                    }
                }
                ArrayD::from_shape_vec(IxDyn(&[n, m, 3]), out).unwrap()
            });
            vec![dq, dp]
        }
    }
}
