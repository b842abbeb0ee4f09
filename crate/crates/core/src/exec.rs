//! Ground-truth graph interpreter with direct naive kernels.
//!
//! This executor runs both rank-5 (Conv3D) source graphs and rank-4 lowered
//! graphs, so it plays the GPU-reference role and the accelerator role. It is
//! the oracle the lowering pass is verified against: no im2col, no FFT, just
//! loops. Conv kernels accumulate in f64 and round to the element type on
//! store, so accumulation-order effects stay as small as possible.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::graph::{bias_key, Graph, GraphError, Node, OpKind};
use crate::quant::QuantTable;
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, Shape, TensorError};
use crate::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node {node}: {message}")]
    Node { node: String, message: String },
    #[error("node {node}: rank-{rank} tensor exceeds the rank-{max} execution limit")]
    RankLimit { node: String, rank: usize, max: usize },
    #[error("no quantization scale for tensor {0:?}")]
    MissingScale(String),
}

/// Outputs and per-node wall times of one graph execution.
#[derive(Debug, Clone)]
pub struct ExecResult {
    /// One entry per requested graph output.
    pub outputs: BTreeMap<String, Tensor>,
    /// Seconds spent evaluating each node.
    pub times: BTreeMap<String, f64>,
}

/// Execution knobs; the default runs plain float with no rank limit.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOpts<'a> {
    /// Abort if any materialized tensor exceeds this rank. The pipeline's
    /// infer stage sets 4 to mirror the accelerator constraint.
    pub max_rank: Option<usize>,
    /// Simulate fixed-point execution: snap every tensor to its int8 grid
    /// and run convs as integer-affine ops.
    pub quant: Option<&'a QuantTable>,
}

/// Direct 3D convolution with zero padding:
/// `y[b,o,d,h,w] = bias[o] + sum_{c,i,j,k} x[b,c,d*sD-pD+i,h*sH-pH+j,w*sW-pW+k] * w[o,c,i,j,k]`.
pub fn conv3d<T: Scalar>(
    x: &DenseTensor<T>,
    w: &DenseTensor<T>,
    bias: &DenseTensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<DenseTensor<T>, ExecError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.rank() != 5 || ws.rank() != 5 {
        return Err(ExecError::Shape(format!(
            "conv3d expects rank-5 input and weight, got {xs} and {ws}"
        )));
    }
    if xs.dim(1) != ws.dim(1) {
        return Err(ExecError::Shape(format!(
            "channel mismatch: input {xs} vs weight {ws}"
        )));
    }
    let (out_ch, k) = (ws.dim(0), [ws.dim(2), ws.dim(3), ws.dim(4)]);
    if bias.shape().dims() != [out_ch] {
        return Err(ExecError::Shape(format!(
            "bias shape {} does not match {out_ch} output channels",
            bias.shape()
        )));
    }
    let spatial = [xs.dim(2), xs.dim(3), xs.dim(4)];
    let mut out_sp = [0usize; 3];
    for a in 0..3 {
        let padded = spatial[a] + 2 * pad[a];
        if padded < k[a] {
            return Err(ExecError::Shape(format!(
                "kernel {} exceeds padded extent {padded} on axis {a}",
                k[a]
            )));
        }
        out_sp[a] = (padded - k[a]) / stride[a] + 1;
    }
    let (batch, in_ch) = (xs.dim(0), xs.dim(1));
    let out_shape = Shape::new([batch, out_ch, out_sp[0], out_sp[1], out_sp[2]])?;

    let xd = x.data();
    let wd = w.data();
    let (sd, sh, sw) = (spatial[0], spatial[1], spatial[2]);
    let mut data = Vec::with_capacity(out_shape.num_elements());
    for b in 0..batch {
        for o in 0..out_ch {
            let bias_o = bias.data()[o].widen();
            for od in 0..out_sp[0] {
                for oh in 0..out_sp[1] {
                    for ow in 0..out_sp[2] {
                        let mut acc = bias_o;
                        for c in 0..in_ch {
                            let x_base = (b * in_ch + c) * sd;
                            let w_base = (o * in_ch + c) * k[0];
                            for i in 0..k[0] {
                                let d = od * stride[0] + i;
                                let Some(d) = d.checked_sub(pad[0]).filter(|&v| v < sd) else {
                                    continue;
                                };
                                for j in 0..k[1] {
                                    let h = oh * stride[1] + j;
                                    let Some(h) = h.checked_sub(pad[1]).filter(|&v| v < sh)
                                    else {
                                        continue;
                                    };
                                    for l in 0..k[2] {
                                        let wl = ow * stride[2] + l;
                                        let Some(wl) =
                                            wl.checked_sub(pad[2]).filter(|&v| v < sw)
                                        else {
                                            continue;
                                        };
                                        let xi = ((x_base + d) * sh + h) * sw + wl;
                                        let wi = ((w_base + i) * k[1] + j) * k[2] + l;
                                        acc += xd[xi].widen() * wd[wi].widen();
                                    }
                                }
                            }
                        }
                        data.push(T::narrow(acc));
                    }
                }
            }
        }
    }
    Ok(DenseTensor::new(out_shape, data)?)
}

/// 2D analogue of [`conv3d`].
pub fn conv2d<T: Scalar>(
    x: &DenseTensor<T>,
    w: &DenseTensor<T>,
    bias: &DenseTensor<T>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<DenseTensor<T>, ExecError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.rank() != 4 || ws.rank() != 4 {
        return Err(ExecError::Shape(format!(
            "conv2d expects rank-4 input and weight, got {xs} and {ws}"
        )));
    }
    if xs.dim(1) != ws.dim(1) {
        return Err(ExecError::Shape(format!(
            "channel mismatch: input {xs} vs weight {ws}"
        )));
    }
    let (out_ch, k) = (ws.dim(0), [ws.dim(2), ws.dim(3)]);
    if bias.shape().dims() != [out_ch] {
        return Err(ExecError::Shape(format!(
            "bias shape {} does not match {out_ch} output channels",
            bias.shape()
        )));
    }
    let spatial = [xs.dim(2), xs.dim(3)];
    let mut out_sp = [0usize; 2];
    for a in 0..2 {
        let padded = spatial[a] + 2 * pad[a];
        if padded < k[a] {
            return Err(ExecError::Shape(format!(
                "kernel {} exceeds padded extent {padded} on axis {a}",
                k[a]
            )));
        }
        out_sp[a] = (padded - k[a]) / stride[a] + 1;
    }
    let (batch, in_ch) = (xs.dim(0), xs.dim(1));
    let out_shape = Shape::new([batch, out_ch, out_sp[0], out_sp[1]])?;

    let xd = x.data();
    let wd = w.data();
    let (sh, sw) = (spatial[0], spatial[1]);
    let mut data = Vec::with_capacity(out_shape.num_elements());
    for b in 0..batch {
        for o in 0..out_ch {
            let bias_o = bias.data()[o].widen();
            for oh in 0..out_sp[0] {
                for ow in 0..out_sp[1] {
                    let mut acc = bias_o;
                    for c in 0..in_ch {
                        let x_base = (b * in_ch + c) * sh;
                        let w_base = (o * in_ch + c) * k[0];
                        for j in 0..k[0] {
                            let h = oh * stride[0] + j;
                            let Some(h) = h.checked_sub(pad[0]).filter(|&v| v < sh) else {
                                continue;
                            };
                            for l in 0..k[1] {
                                let wl = ow * stride[1] + l;
                                let Some(wl) = wl.checked_sub(pad[1]).filter(|&v| v < sw) else {
                                    continue;
                                };
                                let xi = ((x_base + h) * sw) + wl;
                                let wi = ((w_base + j) * k[1]) + l;
                                acc += xd[xi].widen() * wd[wi].widen();
                            }
                        }
                    }
                    data.push(T::narrow(acc));
                }
            }
        }
    }
    Ok(DenseTensor::new(out_shape, data)?)
}

pub fn relu<T: Scalar>(x: &DenseTensor<T>) -> DenseTensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    DenseTensor::new(x.shape().clone(), data).expect("relu preserves finiteness")
}

pub fn add<T: Scalar>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>, ExecError> {
    if a.shape() != b.shape() {
        return Err(ExecError::Shape(format!(
            "add operands differ: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(DenseTensor::new(a.shape().clone(), data)?)
}

/// Concatenate along `axis`; operands must agree on every other extent.
pub fn concat<T: Scalar>(parts: &[&DenseTensor<T>], axis: usize) -> Result<DenseTensor<T>, ExecError> {
    let first = parts.first().ok_or_else(|| ExecError::Shape("concat of nothing".into()))?;
    let rank = first.shape().rank();
    if axis >= rank {
        return Err(ExecError::Shape(format!("concat axis {axis} out of range")));
    }
    let mut dims = first.shape().dims().to_vec();
    for p in &parts[1..] {
        let s = p.shape();
        let ok = s.rank() == rank
            && s.dims().iter().enumerate().all(|(a, &d)| a == axis || d == dims[a]);
        if !ok {
            return Err(ExecError::Shape(format!(
                "concat operand {s} incompatible on axis {axis}"
            )));
        }
        dims[axis] += s.dim(axis);
    }
    let out_shape = Shape::new(dims)?;

    // row-major: copy per (outer, part) block of axis*inner elements
    let outer: usize = first.shape().dims()[..axis].iter().product();
    let inner: usize = first.shape().dims()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.num_elements());
    for o in 0..outer {
        for p in parts {
            let block = p.shape().dim(axis) * inner;
            let start = o * block;
            data.extend_from_slice(&p.data()[start..start + block]);
        }
    }
    Ok(DenseTensor::new(out_shape, data)?)
}

/// Copy channels `[start, start + len)` (axis 1).
pub fn channel_slice<T: Scalar>(
    x: &DenseTensor<T>,
    start: usize,
    len: usize,
) -> Result<DenseTensor<T>, ExecError> {
    let s = x.shape();
    if s.rank() < 2 {
        return Err(ExecError::Shape(format!("channel slice needs rank >= 2, got {s}")));
    }
    if start + len > s.dim(1) {
        return Err(ExecError::Shape(format!(
            "slice [{start}, {}) exceeds {} channels",
            start + len,
            s.dim(1)
        )));
    }
    let mut dims = s.dims().to_vec();
    dims[1] = len;
    let out_shape = Shape::new(dims)?;
    let inner: usize = s.dims()[2..].iter().product();
    let mut data = Vec::with_capacity(out_shape.num_elements());
    for b in 0..s.dim(0) {
        let base = (b * s.dim(1) + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Ok(DenseTensor::new(out_shape, data)?)
}

/// Replicate each `(h, w)` cell `fh x fw` times (last two axes).
pub fn nearest_upsample<T: Scalar>(
    x: &DenseTensor<T>,
    fh: usize,
    fw: usize,
) -> Result<DenseTensor<T>, ExecError> {
    let s = x.shape();
    if s.rank() < 3 || fh == 0 || fw == 0 {
        return Err(ExecError::Shape(format!("cannot upsample {s} by {fh}x{fw}")));
    }
    let rank = s.rank();
    let (h, w) = (s.dim(rank - 2), s.dim(rank - 1));
    let mut dims = s.dims().to_vec();
    dims[rank - 2] *= fh;
    dims[rank - 1] *= fw;
    let out_shape = Shape::new(dims)?;
    let outer: usize = s.dims()[..rank - 2].iter().product();
    let mut data = Vec::with_capacity(out_shape.num_elements());
    for o in 0..outer {
        let plane = &x.data()[o * h * w..(o + 1) * h * w];
        for oh in 0..h * fh {
            for ow in 0..w * fw {
                data.push(plane[(oh / fh) * w + ow / fw]);
            }
        }
    }
    Ok(DenseTensor::new(out_shape, data)?)
}

/// Execute `g` on the given named inputs in deterministic topological order.
pub fn run_graph(g: &Graph, inputs: &BTreeMap<String, Tensor>) -> Result<ExecResult, ExecError> {
    run_graph_with(g, inputs, ExecOpts::default())
}

pub fn run_graph_with(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    opts: ExecOpts<'_>,
) -> Result<ExecResult, ExecError> {
    g.require_valid()?;
    let mut env: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, shape) in &g.inputs {
        let t = inputs
            .get(name)
            .ok_or_else(|| ExecError::Shape(format!("missing graph input {name:?}")))?;
        if t.shape() != shape {
            return Err(ExecError::Shape(format!(
                "input {name:?} has shape {}, declared {shape}",
                t.shape()
            )));
        }
        check_rank_limit(name, t, &opts)?;
        let t = match opts.quant {
            Some(table) => table.snap(name, t)?,
            None => t.clone(),
        };
        env.insert(name.clone(), t);
    }

    let mut times = BTreeMap::new();
    for id in g.topo_order()? {
        let node = g.node(&id).expect("topo ids exist");
        let start = Instant::now();
        let value = eval_node(g, node, &env, &opts).map_err(|e| match e {
            e @ (ExecError::Node { .. } | ExecError::RankLimit { .. } | ExecError::MissingScale(_)) => e,
            other => ExecError::Node {
                node: id.clone(),
                message: other.to_string(),
            },
        })?;
        check_rank_limit(&id, &value, &opts)?;
        times.insert(id.clone(), start.elapsed().as_secs_f64());
        env.insert(id, value);
    }

    let mut outputs = BTreeMap::new();
    for out in &g.outputs {
        let t = env
            .get(out)
            .ok_or_else(|| ExecError::Shape(format!("unknown output {out:?}")))?;
        outputs.insert(out.clone(), t.clone());
    }
    Ok(ExecResult { outputs, times })
}

fn check_rank_limit(name: &str, t: &Tensor, opts: &ExecOpts<'_>) -> Result<(), ExecError> {
    if let Some(max) = opts.max_rank {
        if t.shape().rank() > max {
            return Err(ExecError::RankLimit {
                node: name.to_string(),
                rank: t.shape().rank(),
                max,
            });
        }
    }
    Ok(())
}

fn eval_node(
    g: &Graph,
    node: &Node,
    env: &BTreeMap<String, Tensor>,
    opts: &ExecOpts<'_>,
) -> Result<Tensor, ExecError> {
    let operand = |i: usize| -> Result<&Tensor, ExecError> {
        let name = &node.inputs[i];
        env.get(name)
            .ok_or_else(|| ExecError::Shape(format!("operand {name:?} not materialized")))
    };
    let weight_pair = || -> Result<(&Tensor, &Tensor), ExecError> {
        let wname = node.weight.as_ref().expect("validated conv has weight");
        Ok((
            g.weights
                .get(wname)
                .ok_or_else(|| ExecError::Shape(format!("missing weight {wname:?}")))?,
            g.weights
                .get(&bias_key(wname))
                .ok_or_else(|| ExecError::Shape(format!("missing bias for {wname:?}")))?,
        ))
    };

    let value = match &node.kind {
        OpKind::Conv3D { stride, pad, .. } => {
            let (w, b) = weight_pair()?;
            match opts.quant {
                None => conv3d(operand(0)?, w, b, *stride, *pad)?,
                Some(table) => {
                    let wname = node.weight.as_ref().unwrap();
                    let (sw, sx) = (table.weight_scale(wname)?, table.scale(&node.inputs[0])?);
                    let qw = table.quantize_i32(sw, w);
                    let qx = table.quantize_i32(sx, operand(0)?);
                    integer_conv(&qx, &qw, b, &stride[..], &pad[..], sw * sx)?
                }
            }
        }
        OpKind::Conv2D { stride, pad, .. } => {
            let (w, b) = weight_pair()?;
            match opts.quant {
                None => conv2d(operand(0)?, w, b, *stride, *pad)?,
                Some(table) => {
                    let wname = node.weight.as_ref().unwrap();
                    let (sw, sx) = (table.weight_scale(wname)?, table.scale(&node.inputs[0])?);
                    let qw = table.quantize_i32(sw, w);
                    let qx = table.quantize_i32(sx, operand(0)?);
                    integer_conv(&qx, &qw, b, &stride[..], &pad[..], sw * sx)?
                }
            }
        }
        OpKind::ReLU => relu(operand(0)?),
        OpKind::Add => add(operand(0)?, operand(1)?)?,
        OpKind::Concat { axis } => {
            let parts: Vec<&Tensor> =
                node.inputs.iter().map(|n| env.get(n).expect("validated refs")).collect();
            concat(&parts, *axis)?
        }
        OpKind::ChannelSlice { start, len } => channel_slice(operand(0)?, *start, *len)?,
        OpKind::NearestUpsample { fh, fw } => nearest_upsample(operand(0)?, *fh, *fw)?,
    };
    match opts.quant {
        Some(table) => Ok(table.snap(&node.id, &value)?),
        None => Ok(value),
    }
}

/// Integer-affine convolution on pre-quantized operands: accumulate
/// `sum q_x * q_w` in i64, dequantize by `scale = s_x * s_w`, add the float
/// bias. Dispatches on rank; `stride`/`pad` carry 3 entries for conv3d and
/// 2 for conv2d.
fn integer_conv(
    qx: &QuantizedTensor,
    qw: &QuantizedTensor,
    bias: &Tensor,
    stride: &[usize],
    pad: &[usize],
    scale: f64,
) -> Result<Tensor, ExecError> {
    let (xs, ws) = (&qx.shape, &qw.shape);
    let rank = xs.rank();
    if ws.rank() != rank || (rank != 4 && rank != 5) {
        return Err(ExecError::Shape(format!(
            "integer conv expects matching rank-4/5 operands, got {xs} and {ws}"
        )));
    }
    if xs.dim(1) != ws.dim(1) {
        return Err(ExecError::Shape(format!("channel mismatch: {xs} vs {ws}")));
    }
    let spatial_axes = rank - 2;
    let out_ch = ws.dim(0);
    let mut out_sp = Vec::with_capacity(spatial_axes);
    for a in 0..spatial_axes {
        let input = xs.dim(2 + a);
        let k = ws.dim(2 + a);
        let padded = input + 2 * pad[a];
        if padded < k {
            return Err(ExecError::Shape(format!(
                "kernel {k} exceeds padded extent {padded} on axis {a}"
            )));
        }
        out_sp.push((padded - k) / stride[a] + 1);
    }
    let mut out_dims = vec![xs.dim(0), out_ch];
    out_dims.extend(&out_sp);
    let out_shape = Shape::new(out_dims)?;

    let in_ch = xs.dim(1);
    let in_sp: Vec<usize> = (0..spatial_axes).map(|a| xs.dim(2 + a)).collect();
    let k: Vec<usize> = (0..spatial_axes).map(|a| ws.dim(2 + a)).collect();
    let in_sp_stride: usize = in_sp.iter().product();
    let k_stride: usize = k.iter().product();

    let mut data = Vec::with_capacity(out_shape.num_elements());
    let mut out_idx = vec![0usize; spatial_axes];
    for b in 0..xs.dim(0) {
        for o in 0..out_ch {
            out_idx.iter_mut().for_each(|v| *v = 0);
            for _ in 0..out_sp.iter().product::<usize>() {
                let mut acc: i64 = 0;
                let mut tap = vec![0usize; spatial_axes];
                for c in 0..in_ch {
                    let x_base = (b * in_ch + c) * in_sp_stride;
                    let w_base = (o * in_ch + c) * k_stride;
                    tap.iter_mut().for_each(|v| *v = 0);
                    'taps: for _ in 0..k_stride {
                        // input coordinate per axis; skip taps falling in padding
                        let mut x_off = 0usize;
                        let mut w_off = 0usize;
                        let mut in_range = true;
                        for a in 0..spatial_axes {
                            let coord = out_idx[a] * stride[a] + tap[a];
                            match coord.checked_sub(pad[a]).filter(|&v| v < in_sp[a]) {
                                Some(v) => x_off = x_off * in_sp[a] + v,
                                None => {
                                    in_range = false;
                                    break;
                                }
                            }
                        }
                        for a in 0..spatial_axes {
                            w_off = w_off * k[a] + tap[a];
                        }
                        if in_range {
                            acc += qx.data[x_base + x_off] as i64 * qw.data[w_base + w_off] as i64;
                        }
                        // advance tap multi-index
                        for a in (0..spatial_axes).rev() {
                            tap[a] += 1;
                            if tap[a] < k[a] {
                                continue 'taps;
                            }
                            tap[a] = 0;
                        }
                        break;
                    }
                }
                data.push((acc as f64 * scale + bias.data()[o] as f64) as f32);
                for a in (0..spatial_axes).rev() {
                    out_idx[a] += 1;
                    if out_idx[a] < out_sp[a] {
                        break;
                    }
                    out_idx[a] = 0;
                }
            }
        }
    }
    Ok(Tensor::new(out_shape, data)?)
}

/// Int8 tensor used by the simulated fixed-point path.
pub(crate) struct QuantizedTensor {
    pub shape: Shape,
    pub data: Vec<i32>,
}
