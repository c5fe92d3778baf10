//! Deterministic execution engine for the supported graph operator set:
//! `Conv`, `Relu`, `MaxPool`, `GlobalAveragePool`, `Flatten`, `Gemm`
//! (transposed weights), `Softmax`, `Add` and `BatchNormalization` with
//! frozen running statistics.
//!
//! A [`Network`] is compiled once from a `ModelProto` and then evaluated on
//! NCHW float batches. The forward pass can record a [`Tape`] of all
//! intermediate activations, and [`Network::backward`] propagates a gradient
//! seeded at any named value back to every trainable parameter — enough to
//! fine-tune all weights with [`Adam`]. Matrix products go through a single
//! sequential kernel, so repeated runs over the same bytes produce identical
//! results down to the last bit.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView3, Axis, Ix2, Ix4};

use crate::backbone::onnx::ModelProto;
use crate::error::{Error, Result};

/// A named weight tensor. Running statistics of a frozen batch-norm layer
/// are kept here too, flagged non-trainable so the optimizer skips them.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub trainable: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Conv { stride: usize, pad: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    GlobalAveragePool,
    Flatten,
    Gemm,
    Softmax,
    Add,
    BatchNorm { epsilon: f32 },
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Value(usize),
    Param(usize),
}

#[derive(Debug, Clone)]
struct CompiledNode {
    name: String,
    op: Op,
    inputs: Vec<Slot>,
    output: usize,
}

/// Intermediate activations from one forward pass, reused by [`Network::backward`].
pub struct Tape {
    values: Vec<Option<ArrayD<f32>>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

pub struct Network {
    template: ModelProto,
    params: Vec<Param>,
    nodes: Vec<CompiledNode>,
    value_ids: HashMap<String, usize>,
    value_count: usize,
    input_name: String,
    output_names: Vec<String>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .field("input", &self.input_name)
            .field("outputs", &self.output_names)
            .finish()
    }
}

fn graph_err(detail: impl Into<String>) -> Error {
    Error::Graph(detail.into())
}

impl Network {
    /// Compiles a decoded model into an executable node list, validating that
    /// every node is in the supported operator set and that the graph is
    /// topologically ordered with exactly one data input.
    pub fn compile(model: &ModelProto) -> Result<Network> {
        let graph = &model.graph;
        let mut params = Vec::new();
        let mut param_ids = HashMap::new();
        for init in &graph.initializers {
            let shape: Vec<usize> = init.dims.iter().map(|&d| d.max(0) as usize).collect();
            let value = ArrayD::from_shape_vec(shape, init.values.clone())
                .map_err(|e| graph_err(format!("initializer `{}`: {e}", init.name)))?;
            param_ids.insert(init.name.clone(), params.len());
            params.push(Param { name: init.name.clone(), value, trainable: true });
        }

        let data_inputs: Vec<&str> = graph
            .inputs
            .iter()
            .map(|i| i.name.as_str())
            .filter(|n| !param_ids.contains_key(*n))
            .collect();
        if data_inputs.len() != 1 {
            return Err(graph_err(format!(
                "expected exactly one data input, found {}",
                data_inputs.len()
            )));
        }
        let input_name = data_inputs[0].to_string();

        let mut value_ids = HashMap::new();
        value_ids.insert(input_name.clone(), 0usize);
        let mut nodes = Vec::new();

        for node in &graph.nodes {
            let resolve = |name: &str| -> Result<Slot> {
                if let Some(&p) = param_ids.get(name) {
                    Ok(Slot::Param(p))
                } else if let Some(&v) = value_ids.get(name) {
                    Ok(Slot::Value(v))
                } else {
                    Err(graph_err(format!(
                        "node `{}` reads `{name}` before it is produced",
                        node.name
                    )))
                }
            };
            let inputs: Vec<Slot> =
                node.inputs.iter().map(|n| resolve(n)).collect::<Result<_>>()?;

            let op = match node.op_type.as_str() {
                "Conv" => {
                    let strides = node.attr_ints("strides").unwrap_or(&[1, 1]);
                    let pads = node.attr_ints("pads").unwrap_or(&[0, 0, 0, 0]);
                    if strides.len() != 2 || strides[0] != strides[1] {
                        return Err(graph_err(format!(
                            "node `{}`: only square strides are supported",
                            node.name
                        )));
                    }
                    if pads.len() != 4 || pads.iter().any(|&p| p != pads[0]) {
                        return Err(graph_err(format!(
                            "node `{}`: only uniform padding is supported",
                            node.name
                        )));
                    }
                    if let Some(d) = node.attr_ints("dilations") {
                        if d.iter().any(|&v| v != 1) {
                            return Err(graph_err(format!(
                                "node `{}`: dilations are not supported",
                                node.name
                            )));
                        }
                    }
                    if node.attr_i("group").unwrap_or(1) != 1 {
                        return Err(graph_err(format!(
                            "node `{}`: grouped convolution is not supported",
                            node.name
                        )));
                    }
                    Op::Conv { stride: strides[0] as usize, pad: pads[0] as usize }
                }
                "Relu" => Op::Relu,
                "MaxPool" => {
                    let kernel = node
                        .attr_ints("kernel_shape")
                        .ok_or_else(|| graph_err(format!("node `{}`: missing kernel_shape", node.name)))?;
                    let strides = node.attr_ints("strides").unwrap_or(kernel);
                    if kernel.len() != 2 || kernel[0] != kernel[1] || strides[0] != strides[1] {
                        return Err(graph_err(format!(
                            "node `{}`: only square pooling windows are supported",
                            node.name
                        )));
                    }
                    if let Some(pads) = node.attr_ints("pads") {
                        if pads.iter().any(|&p| p != 0) {
                            return Err(graph_err(format!(
                                "node `{}`: padded pooling is not supported",
                                node.name
                            )));
                        }
                    }
                    Op::MaxPool { kernel: kernel[0] as usize, stride: strides[0] as usize }
                }
                "GlobalAveragePool" => Op::GlobalAveragePool,
                "Flatten" => {
                    if node.attr_i("axis").unwrap_or(1) != 1 {
                        return Err(graph_err(format!(
                            "node `{}`: Flatten is only supported along axis 1",
                            node.name
                        )));
                    }
                    Op::Flatten
                }
                "Gemm" => {
                    if node.attr_i("transB").unwrap_or(0) != 1
                        || node.attr_i("transA").unwrap_or(0) != 0
                    {
                        return Err(graph_err(format!(
                            "node `{}`: Gemm requires transA=0, transB=1",
                            node.name
                        )));
                    }
                    let alpha = node.attr_f("alpha").unwrap_or(1.0);
                    let beta = node.attr_f("beta").unwrap_or(1.0);
                    if alpha != 1.0 || beta != 1.0 {
                        return Err(graph_err(format!(
                            "node `{}`: Gemm requires alpha=beta=1",
                            node.name
                        )));
                    }
                    Op::Gemm
                }
                "Softmax" => {
                    let axis = node.attr_i("axis").unwrap_or(-1);
                    if axis != 1 && axis != -1 {
                        return Err(graph_err(format!(
                            "node `{}`: Softmax is only supported along the class axis",
                            node.name
                        )));
                    }
                    Op::Softmax
                }
                "Add" => Op::Add,
                "BatchNormalization" => {
                    Op::BatchNorm { epsilon: node.attr_f("epsilon").unwrap_or(1e-5) }
                }
                other => {
                    return Err(graph_err(format!(
                        "node `{}` uses unsupported operator `{other}`",
                        node.name
                    )))
                }
            };

            // Frozen batch norm: running mean/variance are buffers, not weights.
            if matches!(op, Op::BatchNorm { .. }) {
                if inputs.len() != 5 {
                    return Err(graph_err(format!(
                        "node `{}`: BatchNormalization needs 5 inputs",
                        node.name
                    )));
                }
                for slot in &inputs[3..5] {
                    match slot {
                        Slot::Param(p) => params[*p].trainable = false,
                        Slot::Value(_) => {
                            return Err(graph_err(format!(
                                "node `{}`: running statistics must be initializers",
                                node.name
                            )))
                        }
                    }
                }
            }

            if node.outputs.len() != 1 {
                return Err(graph_err(format!(
                    "node `{}` must have exactly one output",
                    node.name
                )));
            }
            let out_name = &node.outputs[0];
            if value_ids.contains_key(out_name) || param_ids.contains_key(out_name) {
                return Err(graph_err(format!("value `{out_name}` is produced twice")));
            }
            let out_id = value_ids.len();
            value_ids.insert(out_name.clone(), out_id);
            nodes.push(CompiledNode { name: node.name.clone(), op, inputs, output: out_id });
        }

        let output_names: Vec<String> = graph.outputs.iter().map(|o| o.name.clone()).collect();
        for name in &output_names {
            if !value_ids.contains_key(name) {
                return Err(graph_err(format!("graph output `{name}` is never produced")));
            }
        }

        Ok(Network {
            template: model.clone(),
            params,
            nodes,
            value_count: value_ids.len(),
            value_ids,
            input_name,
            output_names,
        })
    }

    pub fn input_name(&self) -> &str {
        &self.input_name
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Name of the value feeding the final `Softmax` node, i.e. the logits.
    pub fn logits_name(&self) -> Option<&str> {
        let softmax = self.nodes.iter().rev().find(|n| matches!(n.op, Op::Softmax))?;
        let Slot::Value(id) = softmax.inputs[0] else { return None };
        self.value_ids.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str())
    }

    /// Rebuilds the model with the current parameter values, preserving the
    /// original graph structure.
    pub fn to_model(&self) -> ModelProto {
        let mut model = self.template.clone();
        for init in &mut model.graph.initializers {
            if let Some(param) = self.param(&init.name) {
                init.dims = param.value.shape().iter().map(|&d| d as i64).collect();
                init.values = param.value.iter().copied().collect();
            }
        }
        model
    }

    /// Runs the graph on a batch, recording every intermediate activation.
    pub fn forward(&self, input: &Array4<f32>) -> Result<Tape> {
        let mut values: Vec<Option<ArrayD<f32>>> = vec![None; self.value_count];
        let mut pool_argmax: Vec<Option<Vec<usize>>> = vec![None; self.nodes.len()];
        values[0] = Some(input.clone().into_dyn());

        for (node_idx, node) in self.nodes.iter().enumerate() {
            let fetch = |slot: &Slot| -> &ArrayD<f32> {
                match slot {
                    Slot::Param(p) => &self.params[*p].value,
                    Slot::Value(v) => values[*v].as_ref().expect("topological order"),
                }
            };
            let out = match &node.op {
                Op::Conv { stride, pad } => {
                    let x = fetch(&node.inputs[0]);
                    let w = fetch(&node.inputs[1]);
                    let b = node.inputs.get(2).map(&fetch);
                    conv_forward(x, w, b, *stride, *pad, &node.name)?
                }
                Op::Relu => fetch(&node.inputs[0]).mapv(|v| v.max(0.0)),
                Op::MaxPool { kernel, stride } => {
                    let (out, argmax) =
                        maxpool_forward(fetch(&node.inputs[0]), *kernel, *stride, &node.name)?;
                    pool_argmax[node_idx] = Some(argmax);
                    out
                }
                Op::GlobalAveragePool => gap_forward(fetch(&node.inputs[0]), &node.name)?,
                Op::Flatten => {
                    let x = fetch(&node.inputs[0]);
                    let n = x.shape()[0];
                    let rest: usize = x.shape()[1..].iter().product();
                    ArrayD::from_shape_vec(vec![n, rest], x.iter().copied().collect())
                        .expect("flatten shape")
                }
                Op::Gemm => {
                    let x = as_2d(fetch(&node.inputs[0]), &node.name)?;
                    let w = as_2d(fetch(&node.inputs[1]), &node.name)?;
                    if x.ncols() != w.ncols() {
                        return Err(graph_err(format!(
                            "node `{}`: Gemm input has {} features but weights expect {}",
                            node.name,
                            x.ncols(),
                            w.ncols()
                        )));
                    }
                    let mut y = x.dot(&w.t());
                    if let Some(slot) = node.inputs.get(2) {
                        let b = fetch(slot);
                        let b = Array1::from_iter(b.iter().copied());
                        y += &b;
                    }
                    y.into_dyn()
                }
                Op::Softmax => softmax_forward(fetch(&node.inputs[0]), &node.name)?,
                Op::Add => {
                    let a = fetch(&node.inputs[0]);
                    let b = fetch(&node.inputs[1]);
                    if a.shape() != b.shape() {
                        return Err(graph_err(format!(
                            "node `{}`: Add operands have shapes {:?} and {:?}",
                            node.name,
                            a.shape(),
                            b.shape()
                        )));
                    }
                    a + b
                }
                Op::BatchNorm { epsilon } => {
                    let x = fetch(&node.inputs[0]);
                    let scale = fetch(&node.inputs[1]);
                    let bias = fetch(&node.inputs[2]);
                    let mean = fetch(&node.inputs[3]);
                    let var = fetch(&node.inputs[4]);
                    batchnorm_forward(x, scale, bias, mean, var, *epsilon, &node.name)?
                }
            };
            values[node.output] = Some(out);
        }

        Ok(Tape { values, pool_argmax })
    }

    /// Looks up a recorded activation by its graph value name.
    pub fn value<'t>(&self, tape: &'t Tape, name: &str) -> Option<&'t ArrayD<f32>> {
        let id = *self.value_ids.get(name)?;
        tape.values[id].as_ref()
    }

    /// Propagates `seed` (the loss gradient at value `seed_name`) back through
    /// the graph. Returns one gradient per parameter index; entries stay
    /// `None` for parameters the seed does not reach and for frozen buffers.
    pub fn backward(
        &self,
        tape: &Tape,
        seed_name: &str,
        seed: ArrayD<f32>,
    ) -> Result<Vec<Option<ArrayD<f32>>>> {
        let seed_id = *self
            .value_ids
            .get(seed_name)
            .ok_or_else(|| graph_err(format!("unknown value `{seed_name}`")))?;
        let expect = tape.values[seed_id]
            .as_ref()
            .ok_or_else(|| graph_err(format!("value `{seed_name}` was not computed")))?;
        if seed.shape() != expect.shape() {
            return Err(graph_err(format!(
                "gradient seed for `{seed_name}` has shape {:?}, expected {:?}",
                seed.shape(),
                expect.shape()
            )));
        }

        let mut grad_v: Vec<Option<ArrayD<f32>>> = vec![None; self.value_count];
        let mut grad_p: Vec<Option<ArrayD<f32>>> = vec![None; self.params.len()];
        grad_v[seed_id] = Some(seed);

        let accumulate = |store: &mut Vec<Option<ArrayD<f32>>>, id: usize, g: ArrayD<f32>| {
            match &mut store[id] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for (node_idx, node) in self.nodes.iter().enumerate().rev() {
            let Some(gout) = grad_v[node.output].take() else { continue };
            let fetch = |slot: &Slot| -> &ArrayD<f32> {
                match slot {
                    Slot::Param(p) => &self.params[*p].value,
                    Slot::Value(v) => tape.values[*v].as_ref().expect("topological order"),
                }
            };
            match &node.op {
                Op::Conv { stride, pad } => {
                    let x = fetch(&node.inputs[0]);
                    let w = fetch(&node.inputs[1]);
                    let (gx, gw, gb) = conv_backward(x, w, &gout, *stride, *pad);
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx);
                    }
                    if let Slot::Param(p) = node.inputs[1] {
                        if self.params[p].trainable {
                            accumulate(&mut grad_p, p, gw);
                        }
                    }
                    if let Some(Slot::Param(p)) = node.inputs.get(2) {
                        if self.params[*p].trainable {
                            accumulate(&mut grad_p, *p, gb);
                        }
                    }
                }
                Op::Relu => {
                    let x = fetch(&node.inputs[0]);
                    let gx = ndarray::Zip::from(&gout)
                        .and(x)
                        .map_collect(|&g, &v| if v > 0.0 { g } else { 0.0 });
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx);
                    }
                }
                Op::MaxPool { .. } => {
                    let x = fetch(&node.inputs[0]);
                    let argmax = tape.pool_argmax[node_idx].as_ref().expect("recorded in forward");
                    let gx = maxpool_backward(x, &gout, argmax);
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx);
                    }
                }
                Op::GlobalAveragePool => {
                    let x = fetch(&node.inputs[0]);
                    let (n, c, h, w) = dims4(x);
                    let scale = 1.0 / (h * w) as f32;
                    let mut gx = ArrayD::zeros(x.raw_dim());
                    for bi in 0..n {
                        for ci in 0..c {
                            let g = gout[[bi, ci, 0, 0]] * scale;
                            for i in 0..h {
                                for j in 0..w {
                                    gx[[bi, ci, i, j]] = g;
                                }
                            }
                        }
                    }
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx);
                    }
                }
                Op::Flatten => {
                    let x = fetch(&node.inputs[0]);
                    let gx = ArrayD::from_shape_vec(x.raw_dim(), gout.iter().copied().collect())
                        .expect("flatten gradient shape");
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx);
                    }
                }
                Op::Gemm => {
                    let x = as_2d(fetch(&node.inputs[0]), &node.name)?;
                    let w = as_2d(fetch(&node.inputs[1]), &node.name)?;
                    let g = as_2d(&gout, &node.name)?;
                    let gx = g.dot(&w).into_dyn();
                    let gw = g.t().dot(&x).into_dyn();
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx);
                    }
                    if let Slot::Param(p) = node.inputs[1] {
                        if self.params[p].trainable {
                            accumulate(&mut grad_p, p, gw);
                        }
                    }
                    if let Some(Slot::Param(p)) = node.inputs.get(2) {
                        if self.params[*p].trainable {
                            let gb = g.sum_axis(Axis(0)).into_dyn();
                            accumulate(&mut grad_p, *p, gb);
                        }
                    }
                }
                Op::Softmax => {
                    let y = tape.values[node.output].as_ref().expect("topological order");
                    let y = as_2d(y, &node.name)?;
                    let g = as_2d(&gout, &node.name)?;
                    let mut gx = Array2::<f32>::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot: f32 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..y.ncols() {
                            gx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                        }
                    }
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx.into_dyn());
                    }
                }
                Op::Add => {
                    for slot in &node.inputs {
                        if let Slot::Value(v) = slot {
                            accumulate(&mut grad_v, *v, gout.clone());
                        }
                    }
                }
                Op::BatchNorm { epsilon } => {
                    let x = fetch(&node.inputs[0]);
                    let scale = fetch(&node.inputs[1]);
                    let mean = fetch(&node.inputs[3]);
                    let var = fetch(&node.inputs[4]);
                    let (n, c, h, w) = dims4(x);
                    let mut gscale = ArrayD::<f32>::zeros(scale.raw_dim());
                    let mut gbias = ArrayD::<f32>::zeros(scale.raw_dim());
                    let mut gx = ArrayD::<f32>::zeros(x.raw_dim());
                    for ci in 0..c {
                        let inv_std = 1.0 / (var[[ci]] + epsilon).sqrt();
                        let a = scale[[ci]] * inv_std;
                        let mut ds = 0.0f32;
                        let mut db = 0.0f32;
                        for bi in 0..n {
                            for i in 0..h {
                                for j in 0..w {
                                    let g = gout[[bi, ci, i, j]];
                                    let xhat = (x[[bi, ci, i, j]] - mean[[ci]]) * inv_std;
                                    ds += g * xhat;
                                    db += g;
                                    gx[[bi, ci, i, j]] = g * a;
                                }
                            }
                        }
                        gscale[[ci]] = ds;
                        gbias[[ci]] = db;
                    }
                    if let Slot::Value(v) = node.inputs[0] {
                        accumulate(&mut grad_v, v, gx);
                    }
                    if let Slot::Param(p) = node.inputs[1] {
                        if self.params[p].trainable {
                            accumulate(&mut grad_p, p, gscale);
                        }
                    }
                    if let Slot::Param(p) = node.inputs[2] {
                        if self.params[p].trainable {
                            accumulate(&mut grad_p, p, gbias);
                        }
                    }
                }
            }
        }

        Ok(grad_p)
    }
}

fn dims4(x: &ArrayD<f32>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

fn as_2d<'a>(x: &'a ArrayD<f32>, node: &str) -> Result<ndarray::ArrayView2<'a, f32>> {
    x.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| graph_err(format!("node `{node}`: expected a 2-d tensor, got {:?}", x.shape())))
}

fn im2col(
    x: &ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[ch, si as usize, sj as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f32> {
    let mut x = ndarray::Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        x[[ch, si as usize, sj as usize]] += col[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    x
}

fn conv_out_side(len: usize, kernel: usize, stride: usize, pad: usize, node: &str) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < kernel {
        return Err(graph_err(format!(
            "node `{node}`: input side {len} too small for kernel {kernel} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn conv_forward(
    x: &ArrayD<f32>,
    w: &ArrayD<f32>,
    b: Option<&ArrayD<f32>>,
    stride: usize,
    pad: usize,
    node: &str,
) -> Result<ArrayD<f32>> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(graph_err(format!("node `{node}`: Conv expects 4-d input and weights")));
    }
    let (n, c, h, wd) = dims4(x);
    let (k, wc, kh, kw) = dims4(w);
    if wc != c {
        return Err(graph_err(format!(
            "node `{node}`: input has {c} channels but weights expect {wc}"
        )));
    }
    let oh = conv_out_side(h, kh, stride, pad, node)?;
    let ow = conv_out_side(wd, kw, stride, pad, node)?;
    let w_mat = Array2::from_shape_vec((k, c * kh * kw), w.iter().copied().collect())
        .expect("weight layout");
    let x4 = x.view().into_dimensionality::<Ix4>().expect("checked ndim");
    let mut out = Array4::<f32>::zeros((n, k, oh, ow));
    for bi in 0..n {
        let col = im2col(&x4.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
        let mut y = w_mat.dot(&col);
        if let Some(b) = b {
            for (mut row, bias) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
                row += *bias;
            }
        }
        let mut dst = out.index_axis_mut(Axis(0), bi);
        for ki in 0..k {
            for oi in 0..oh {
                for oj in 0..ow {
                    dst[[ki, oi, oj]] = y[[ki, oi * ow + oj]];
                }
            }
        }
    }
    Ok(out.into_dyn())
}

fn conv_backward(
    x: &ArrayD<f32>,
    w: &ArrayD<f32>,
    gout: &ArrayD<f32>,
    stride: usize,
    pad: usize,
) -> (ArrayD<f32>, ArrayD<f32>, ArrayD<f32>) {
    let (n, c, h, wd) = dims4(x);
    let (k, _, kh, kw) = dims4(w);
    let (_, _, oh, ow) = dims4(gout);
    let w_mat = Array2::from_shape_vec((k, c * kh * kw), w.iter().copied().collect())
        .expect("weight layout");
    let x4 = x.view().into_dimensionality::<Ix4>().expect("conv input rank");
    let g4 = gout.view().into_dimensionality::<Ix4>().expect("conv gradient rank");

    let mut gx = Array4::<f32>::zeros((n, c, h, wd));
    let mut gw_mat = Array2::<f32>::zeros((k, c * kh * kw));
    let mut gb = Array1::<f32>::zeros(k);
    for bi in 0..n {
        let g = g4.index_axis(Axis(0), bi);
        let mut g_mat = Array2::<f32>::zeros((k, oh * ow));
        for ki in 0..k {
            for oi in 0..oh {
                for oj in 0..ow {
                    let v = g[[ki, oi, oj]];
                    g_mat[[ki, oi * ow + oj]] = v;
                    gb[ki] += v;
                }
            }
        }
        let col = im2col(&x4.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
        gw_mat += &g_mat.dot(&col.t());
        let gcol = w_mat.t().dot(&g_mat);
        let gxi = col2im(&gcol, c, h, wd, kh, kw, stride, pad, oh, ow);
        gx.index_axis_mut(Axis(0), bi).assign(&gxi);
    }
    let gw = ArrayD::from_shape_vec(w.raw_dim(), gw_mat.iter().copied().collect())
        .expect("weight gradient shape");
    (gx.into_dyn(), gw, gb.into_dyn())
}

fn maxpool_forward(
    x: &ArrayD<f32>,
    kernel: usize,
    stride: usize,
    node: &str,
) -> Result<(ArrayD<f32>, Vec<usize>)> {
    if x.ndim() != 4 {
        return Err(graph_err(format!("node `{node}`: MaxPool expects a 4-d input")));
    }
    let (n, c, h, w) = dims4(x);
    if h < kernel || w < kernel {
        return Err(graph_err(format!(
            "node `{node}`: input {h}x{w} is smaller than the {kernel}x{kernel} window"
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Array4::<f32>::zeros((n, c, oh, ow));
    let mut argmax = vec![0usize; n * c * oh * ow];
    let mut cursor = 0;
    for bi in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let si = oi * stride + ki;
                            let sj = oj * stride + kj;
                            let v = x[[bi, ci, si, sj]];
                            if v > best {
                                best = v;
                                best_idx = si * w + sj;
                            }
                        }
                    }
                    out[[bi, ci, oi, oj]] = best;
                    argmax[cursor] = best_idx;
                    cursor += 1;
                }
            }
        }
    }
    Ok((out.into_dyn(), argmax))
}

fn maxpool_backward(x: &ArrayD<f32>, gout: &ArrayD<f32>, argmax: &[usize]) -> ArrayD<f32> {
    let (n, c, h, w) = dims4(x);
    let (_, _, oh, ow) = dims4(gout);
    let mut gx = Array4::<f32>::zeros((n, c, h, w));
    let mut cursor = 0;
    for bi in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let flat = argmax[cursor];
                    cursor += 1;
                    gx[[bi, ci, flat / w, flat % w]] += gout[[bi, ci, oi, oj]];
                }
            }
        }
    }
    gx.into_dyn()
}

fn gap_forward(x: &ArrayD<f32>, node: &str) -> Result<ArrayD<f32>> {
    if x.ndim() != 4 {
        return Err(graph_err(format!("node `{node}`: GlobalAveragePool expects a 4-d input")));
    }
    let (n, c, h, w) = dims4(x);
    let scale = 1.0 / (h * w) as f32;
    let mut out = Array4::<f32>::zeros((n, c, 1, 1));
    for bi in 0..n {
        for ci in 0..c {
            let mut sum = 0.0f32;
            for i in 0..h {
                for j in 0..w {
                    sum += x[[bi, ci, i, j]];
                }
            }
            out[[bi, ci, 0, 0]] = sum * scale;
        }
    }
    Ok(out.into_dyn())
}

fn softmax_forward(x: &ArrayD<f32>, node: &str) -> Result<ArrayD<f32>> {
    let x = as_2d(x, node)?;
    let mut out = Array2::<f32>::zeros(x.raw_dim());
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[[r, c]] = e;
            sum += e;
        }
        for c in 0..row.len() {
            out[[r, c]] /= sum;
        }
    }
    Ok(out.into_dyn())
}

fn batchnorm_forward(
    x: &ArrayD<f32>,
    scale: &ArrayD<f32>,
    bias: &ArrayD<f32>,
    mean: &ArrayD<f32>,
    var: &ArrayD<f32>,
    epsilon: f32,
    node: &str,
) -> Result<ArrayD<f32>> {
    if x.ndim() != 4 {
        return Err(graph_err(format!("node `{node}`: BatchNormalization expects a 4-d input")));
    }
    let (n, c, h, w) = dims4(x);
    if [scale.len(), bias.len(), mean.len(), var.len()].iter().any(|&l| l != c) {
        return Err(graph_err(format!(
            "node `{node}`: per-channel tensors must have length {c}"
        )));
    }
    let mut out = ArrayD::<f32>::zeros(x.raw_dim());
    for ci in 0..c {
        let inv_std = 1.0 / (var[[ci]] + epsilon).sqrt();
        let a = scale[[ci]] * inv_std;
        let b = bias[[ci]] - mean[[ci]] * a;
        for bi in 0..n {
            for i in 0..h {
                for j in 0..w {
                    out[[bi, ci, i, j]] = a * x[[bi, ci, i, j]] + b;
                }
            }
        }
    }
    Ok(out)
}

/// Adam optimizer over a network's trainable parameters, with bias-corrected
/// first and second moments.
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    epsilon: f32,
    step_count: u64,
    moment1: Vec<Option<ArrayD<f32>>>,
    moment2: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(lr: f32, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moment1: vec![None; param_count],
            moment2: vec![None; param_count],
        }
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[Option<ArrayD<f32>>]) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, param) in params.iter_mut().enumerate() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads[idx].as_ref() else { continue };
            let m = self.moment1[idx].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.moment2[idx].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::onnx::{
        AttributeProto, Dim, GraphProto, NodeProto, TensorProto, ValueInfoProto,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> TensorProto {
        let len: usize = dims.iter().product();
        TensorProto {
            name: name.into(),
            dims: dims.iter().map(|&d| d as i64).collect(),
            values: (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }

    /// A 2x8x8 network touching every supported operator.
    fn test_model(seed: u64) -> ModelProto {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |name: &str, inputs: Vec<&str>, out: &str, stride: i64, pad: i64| NodeProto {
            name: name.into(),
            op_type: "Conv".into(),
            inputs: inputs.into_iter().map(String::from).collect(),
            outputs: vec![out.into()],
            attributes: vec![
                AttributeProto::ints("strides", vec![stride, stride]),
                AttributeProto::ints("pads", vec![pad; 4]),
                AttributeProto::ints("kernel_shape", vec![3, 3]),
            ],
        };
        let unary = |name: &str, op: &str, input: &str, out: &str| NodeProto {
            name: name.into(),
            op_type: op.into(),
            inputs: vec![input.into()],
            outputs: vec![out.into()],
            attributes: vec![],
        };
        let mut initializers = vec![
            tensor("conv1_w", &[3, 2, 3, 3], &mut rng),
            tensor("conv1_b", &[3], &mut rng),
            tensor("bn_scale", &[3], &mut rng),
            tensor("bn_bias", &[3], &mut rng),
            tensor("bn_mean", &[3], &mut rng),
            tensor("conv2_w", &[3, 3, 3, 3], &mut rng),
            tensor("conv2_b", &[3], &mut rng),
            tensor("conv3_w", &[4, 3, 3, 3], &mut rng),
            tensor("conv3_b", &[4], &mut rng),
            tensor("fc_w", &[5, 4], &mut rng),
            tensor("fc_b", &[5], &mut rng),
        ];
        initializers.push(TensorProto {
            name: "bn_var".into(),
            dims: vec![3],
            values: (0..3).map(|_| rng.gen_range(0.5..1.5)).collect(),
        });
        ModelProto {
            ir_version: 8,
            producer_name: "evkit-test".into(),
            opset_version: 13,
            graph: GraphProto {
                name: "every-op".into(),
                nodes: vec![
                    conv("conv1", vec!["input", "conv1_w", "conv1_b"], "c1", 2, 1),
                    NodeProto {
                        name: "bn".into(),
                        op_type: "BatchNormalization".into(),
                        inputs: ["c1", "bn_scale", "bn_bias", "bn_mean", "bn_var"]
                            .map(String::from)
                            .to_vec(),
                        outputs: vec!["b1".into()],
                        attributes: vec![AttributeProto::float("epsilon", 1e-5)],
                    },
                    unary("relu1", "Relu", "b1", "r1"),
                    conv("conv2", vec!["r1", "conv2_w", "conv2_b"], "c2", 1, 1),
                    unary("relu2", "Relu", "c2", "r2"),
                    NodeProto {
                        name: "residual".into(),
                        op_type: "Add".into(),
                        inputs: vec!["r2".into(), "r1".into()],
                        outputs: vec!["sum".into()],
                        attributes: vec![],
                    },
                    NodeProto {
                        name: "pool".into(),
                        op_type: "MaxPool".into(),
                        inputs: vec!["sum".into()],
                        outputs: vec!["p1".into()],
                        attributes: vec![
                            AttributeProto::ints("kernel_shape", vec![2, 2]),
                            AttributeProto::ints("strides", vec![2, 2]),
                        ],
                    },
                    conv("conv3", vec!["p1", "conv3_w", "conv3_b"], "c3", 1, 1),
                    unary("gap", "GlobalAveragePool", "c3", "g1"),
                    unary("flatten", "Flatten", "g1", "intermediate"),
                    NodeProto {
                        name: "fc".into(),
                        op_type: "Gemm".into(),
                        inputs: ["intermediate", "fc_w", "fc_b"].map(String::from).to_vec(),
                        outputs: vec!["logits".into()],
                        attributes: vec![AttributeProto::int("transB", 1)],
                    },
                    unary("softmax", "Softmax", "logits", "output"),
                ],
                initializers,
                inputs: vec![ValueInfoProto {
                    name: "input".into(),
                    shape: vec![
                        Dim::Param("batch".into()),
                        Dim::Value(2),
                        Dim::Value(8),
                        Dim::Value(8),
                    ],
                }],
                outputs: vec![
                    ValueInfoProto {
                        name: "intermediate".into(),
                        shape: vec![Dim::Param("batch".into()), Dim::Value(4)],
                    },
                    ValueInfoProto {
                        name: "output".into(),
                        shape: vec![Dim::Param("batch".into()), Dim::Value(5)],
                    },
                ],
            },
        }
    }

    fn test_network(seed: u64) -> Network {
        Network::compile(&test_model(seed)).unwrap()
    }

    fn test_input(seed: u64, n: usize) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 2, 8, 8), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn forward_shapes_and_probabilities() {
        let net = test_network(7);
        let tape = net.forward(&test_input(1, 3)).unwrap();
        let inter = net.value(&tape, "intermediate").unwrap();
        assert_eq!(inter.shape(), &[3, 4]);
        let out = net.value(&tape, "output").unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        for row in out.view().into_dimensionality::<Ix2>().unwrap().axis_iter(Axis(0)) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5, "softmax row sums to {sum}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = test_network(7);
        let x = test_input(1, 2);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        let ya = net.value(&a, "output").unwrap();
        let yb = net.value(&b, "output").unwrap();
        assert!(ya.iter().zip(yb.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn logits_value_is_softmax_input() {
        let net = test_network(7);
        assert_eq!(net.logits_name(), Some("logits"));
    }

    #[test]
    fn batchnorm_statistics_are_frozen() {
        let net = test_network(7);
        let frozen: Vec<&str> = net
            .params()
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(frozen, vec!["bn_mean", "bn_var"]);
    }

    /// Central-difference check of every trainable parameter against the
    /// analytic backward pass, with the loss L = sum(w .* output).
    #[test]
    fn gradients_match_finite_differences() {
        let mut net = test_network(11);
        let x = test_input(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = Array2::from_shape_fn((2, 5), |_| rng.gen_range(-1.0f32..1.0));

        let loss = |net: &Network| -> f64 {
            let tape = net.forward(&x).unwrap();
            let out = net.value(&tape, "output").unwrap();
            out.iter()
                .zip(weights.iter())
                .map(|(&y, &w)| (y as f64) * (w as f64))
                .sum()
        };

        let tape = net.forward(&x).unwrap();
        let grads = net.backward(&tape, "output", weights.clone().into_dyn()).unwrap();

        let h = 1e-3f32;
        let mut checked = 0usize;
        for idx in 0..net.params().len() {
            if !net.params()[idx].trainable {
                assert!(grads[idx].is_none());
                continue;
            }
            let analytic = grads[idx].as_ref().unwrap().clone();
            let len = net.params()[idx].value.len();
            for flat in 0..len {
                let orig = net.params_mut()[idx].value.as_slice_mut().unwrap()[flat];
                net.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig + h;
                let up = loss(&net);
                net.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig - h;
                let down = loss(&net);
                net.params_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig;
                let numeric = ((up - down) / (2.0 * h as f64)) as f32;
                let a = analytic.as_slice().unwrap()[flat];
                let tol = 1e-3 + 2e-2 * a.abs().max(numeric.abs());
                assert!(
                    (a - numeric).abs() <= tol,
                    "param {} [{flat}]: analytic {a}, numeric {numeric}",
                    net.params()[idx].name
                );
                checked += 1;
            }
        }
        assert!(checked > 250, "expected to probe every weight, probed {checked}");
    }

    #[test]
    fn backward_seeded_at_intermediate_skips_head() {
        let net = test_network(7);
        let x = test_input(1, 1);
        let tape = net.forward(&x).unwrap();
        let seed = ArrayD::from_elem(vec![1, 4], 1.0f32);
        let grads = net.backward(&tape, "intermediate", seed).unwrap();
        let by_name: HashMap<&str, bool> = net
            .params()
            .iter()
            .zip(&grads)
            .map(|(p, g)| (p.name.as_str(), g.is_some()))
            .collect();
        assert!(!by_name["fc_w"], "head weights sit after the seed point");
        assert!(by_name["conv1_w"], "body weights must receive gradient");
    }

    #[test]
    fn adam_reduces_simple_loss() {
        // Minimize ||p||^2 for a single parameter tensor; gradient = 2p.
        let mut params = vec![Param {
            name: "w".into(),
            value: ArrayD::from_shape_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
            trainable: true,
        }];
        let mut adam = Adam::new(0.1, 1);
        let norm = |p: &ArrayD<f32>| p.iter().map(|v| v * v).sum::<f32>();
        let start = norm(&params[0].value);
        for _ in 0..200 {
            let g = Some(params[0].value.mapv(|v| 2.0 * v));
            adam.step(&mut params, &[g]);
        }
        let end = norm(&params[0].value);
        assert!(end < start * 1e-3, "started at {start}, ended at {end}");
    }

    #[test]
    fn to_model_round_trips_parameters() {
        let mut net = test_network(7);
        net.params_mut()[0].value[[0, 0, 0, 0]] = 42.0;
        let model = net.to_model();
        let reloaded = Network::compile(&model).unwrap();
        assert_eq!(reloaded.params()[0].value[[0, 0, 0, 0]], 42.0);
        let x = test_input(1, 1);
        let a = net.forward(&x).unwrap();
        let b = reloaded.forward(&x).unwrap();
        let ya = net.value(&a, "output").unwrap();
        let yb = reloaded.value(&b, "output").unwrap();
        assert!(ya.iter().zip(yb.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn unsupported_operator_is_rejected() {
        let mut model = test_model(7);
        model.graph.nodes[2].op_type = "LeakyRelu".into();
        let err = Network::compile(&model).unwrap_err();
        assert!(err.to_string().contains("LeakyRelu"));
    }

    #[test]
    fn out_of_order_graph_is_rejected() {
        let mut model = test_model(7);
        model.graph.nodes.swap(0, 3);
        assert!(Network::compile(&model).is_err());
    }
}
