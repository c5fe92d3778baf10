//! Reader/writer for the ONNX interchange format, covering the message subset
//! a feed-forward image classifier needs: `ModelProto`/`GraphProto` with
//! nodes, float initializers, and tensor-typed value infos.
//!
//! The protobuf wire format is decoded directly (varint, fixed32/64 and
//! length-delimited fields); unknown fields are skipped so files produced by
//! common exporters load as long as they stay within the supported operator
//! set. The writer emits canonical bytes (fields in ascending order, weights
//! as little-endian `raw_data`), so serializing the same model twice yields
//! identical files.

use crate::error::{Error, Result};

pub const DATA_TYPE_FLOAT: i32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelProto {
    pub ir_version: i64,
    pub producer_name: String,
    pub opset_version: i64,
    pub graph: GraphProto,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GraphProto {
    pub name: String,
    pub nodes: Vec<NodeProto>,
    pub initializers: Vec<TensorProto>,
    pub inputs: Vec<ValueInfoProto>,
    pub outputs: Vec<ValueInfoProto>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeProto {
    pub name: String,
    pub op_type: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: Vec<AttributeProto>,
}

impl NodeProto {
    pub fn attr_i(&self, name: &str) -> Option<i64> {
        self.attributes.iter().find(|a| a.name == name).and_then(|a| match &a.value {
            AttrValue::Int(v) => Some(*v),
            _ => None,
        })
    }

    pub fn attr_f(&self, name: &str) -> Option<f32> {
        self.attributes.iter().find(|a| a.name == name).and_then(|a| match &a.value {
            AttrValue::Float(v) => Some(*v),
            _ => None,
        })
    }

    pub fn attr_ints(&self, name: &str) -> Option<&[i64]> {
        self.attributes.iter().find(|a| a.name == name).and_then(|a| match &a.value {
            AttrValue::Ints(v) => Some(v.as_slice()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeProto {
    pub name: String,
    pub value: AttrValue,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Float(f32),
    Int(i64),
    Bytes(Vec<u8>),
    Floats(Vec<f32>),
    Ints(Vec<i64>),
}

impl AttributeProto {
    pub fn int(name: &str, v: i64) -> Self {
        Self { name: name.into(), value: AttrValue::Int(v) }
    }

    pub fn float(name: &str, v: f32) -> Self {
        Self { name: name.into(), value: AttrValue::Float(v) }
    }

    pub fn ints(name: &str, v: Vec<i64>) -> Self {
        Self { name: name.into(), value: AttrValue::Ints(v) }
    }
}

/// A named float tensor (weights are always float in the supported set).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorProto {
    pub name: String,
    pub dims: Vec<i64>,
    pub values: Vec<f32>,
}

impl TensorProto {
    pub fn len_from_dims(&self) -> usize {
        self.dims.iter().product::<i64>().max(0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dim {
    Value(i64),
    Param(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValueInfoProto {
    pub name: String,
    pub shape: Vec<Dim>,
}

// ---------------------------------------------------------------------------
// wire-level reader
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

const WIRE_VARINT: u32 = 0;
const WIRE_FIXED64: u32 = 1;
const WIRE_LEN: u32 = 2;
const WIRE_FIXED32: u32 = 5;

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn varint(&mut self) -> Result<u64> {
        let mut out: u64 = 0;
        for shift in 0..10 {
            let byte = *self
                .buf
                .get(self.pos)
                .ok_or_else(|| Error::OnnxDecode("truncated varint".into()))?;
            self.pos += 1;
            out |= ((byte & 0x7f) as u64) << (shift * 7);
            if byte & 0x80 == 0 {
                return Ok(out);
            }
        }
        Err(Error::OnnxDecode("varint overflow".into()))
    }

    fn tag(&mut self) -> Result<(u32, u32)> {
        let v = self.varint()?;
        Ok(((v >> 3) as u32, (v & 7) as u32))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.varint()? as usize;
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::OnnxDecode("truncated length-delimited field".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::OnnxDecode("invalid utf-8 string".into()))
    }

    fn fixed32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        if end > self.buf.len() {
            return Err(Error::OnnxDecode("truncated fixed32".into()));
        }
        let v = u32::from_le_bytes(self.buf[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(v)
    }

    fn skip(&mut self, wire: u32) -> Result<()> {
        match wire {
            WIRE_VARINT => {
                self.varint()?;
            }
            WIRE_FIXED64 => {
                self.pos += 8;
                if self.pos > self.buf.len() {
                    return Err(Error::OnnxDecode("truncated fixed64".into()));
                }
            }
            WIRE_LEN => {
                self.bytes()?;
            }
            WIRE_FIXED32 => {
                self.fixed32()?;
            }
            other => {
                return Err(Error::OnnxDecode(format!("unsupported wire type {other}")));
            }
        }
        Ok(())
    }
}

fn parse_model(buf: &[u8]) -> Result<ModelProto> {
    let mut r = Reader::new(buf);
    let mut model = ModelProto::default();
    while !r.done() {
        let (field, wire) = r.tag()?;
        match (field, wire) {
            (1, WIRE_VARINT) => model.ir_version = r.varint()? as i64,
            (2, WIRE_LEN) => model.producer_name = r.string()?,
            (7, WIRE_LEN) => model.graph = parse_graph(r.bytes()?)?,
            (8, WIRE_LEN) => {
                // OperatorSetIdProto { domain = 1, version = 2 }
                let mut inner = Reader::new(r.bytes()?);
                while !inner.done() {
                    let (f, w) = inner.tag()?;
                    match (f, w) {
                        (2, WIRE_VARINT) => model.opset_version = inner.varint()? as i64,
                        _ => inner.skip(w)?,
                    }
                }
            }
            _ => r.skip(wire)?,
        }
    }
    Ok(model)
}

fn parse_graph(buf: &[u8]) -> Result<GraphProto> {
    let mut r = Reader::new(buf);
    let mut graph = GraphProto::default();
    while !r.done() {
        let (field, wire) = r.tag()?;
        match (field, wire) {
            (1, WIRE_LEN) => graph.nodes.push(parse_node(r.bytes()?)?),
            (2, WIRE_LEN) => graph.name = r.string()?,
            (5, WIRE_LEN) => graph.initializers.push(parse_tensor(r.bytes()?)?),
            (11, WIRE_LEN) => graph.inputs.push(parse_value_info(r.bytes()?)?),
            (12, WIRE_LEN) => graph.outputs.push(parse_value_info(r.bytes()?)?),
            _ => r.skip(wire)?,
        }
    }
    Ok(graph)
}

fn parse_node(buf: &[u8]) -> Result<NodeProto> {
    let mut r = Reader::new(buf);
    let mut node = NodeProto::default();
    while !r.done() {
        let (field, wire) = r.tag()?;
        match (field, wire) {
            (1, WIRE_LEN) => node.inputs.push(r.string()?),
            (2, WIRE_LEN) => node.outputs.push(r.string()?),
            (3, WIRE_LEN) => node.name = r.string()?,
            (4, WIRE_LEN) => node.op_type = r.string()?,
            (5, WIRE_LEN) => node.attributes.push(parse_attribute(r.bytes()?)?),
            _ => r.skip(wire)?,
        }
    }
    Ok(node)
}

fn parse_attribute(buf: &[u8]) -> Result<AttributeProto> {
    let mut r = Reader::new(buf);
    let mut name = String::new();
    let mut value = None;
    let mut floats: Vec<f32> = Vec::new();
    let mut ints: Vec<i64> = Vec::new();
    while !r.done() {
        let (field, wire) = r.tag()?;
        match (field, wire) {
            (1, WIRE_LEN) => name = r.string()?,
            (2, WIRE_FIXED32) => value = Some(AttrValue::Float(f32::from_bits(r.fixed32()?))),
            (3, WIRE_VARINT) => value = Some(AttrValue::Int(r.varint()? as i64)),
            (4, WIRE_LEN) => value = Some(AttrValue::Bytes(r.bytes()?.to_vec())),
            (7, WIRE_FIXED32) => floats.push(f32::from_bits(r.fixed32()?)),
            (7, WIRE_LEN) => {
                let mut inner = Reader::new(r.bytes()?);
                while !inner.done() {
                    floats.push(f32::from_bits(inner.fixed32()?));
                }
            }
            (8, WIRE_VARINT) => ints.push(r.varint()? as i64),
            (8, WIRE_LEN) => {
                let mut inner = Reader::new(r.bytes()?);
                while !inner.done() {
                    ints.push(inner.varint()? as i64);
                }
            }
            (20, WIRE_VARINT) => {
                r.varint()?; // attribute type enum; the populated field already tells us
            }
            _ => r.skip(wire)?,
        }
    }
    let value = if !ints.is_empty() {
        AttrValue::Ints(ints)
    } else if !floats.is_empty() {
        AttrValue::Floats(floats)
    } else {
        value.ok_or_else(|| Error::OnnxDecode(format!("attribute `{name}` has no value")))?
    };
    Ok(AttributeProto { name, value })
}

fn parse_tensor(buf: &[u8]) -> Result<TensorProto> {
    let mut r = Reader::new(buf);
    let mut tensor = TensorProto::default();
    let mut data_type = DATA_TYPE_FLOAT;
    let mut raw: Option<Vec<u8>> = None;
    while !r.done() {
        let (field, wire) = r.tag()?;
        match (field, wire) {
            (1, WIRE_VARINT) => tensor.dims.push(r.varint()? as i64),
            (1, WIRE_LEN) => {
                let mut inner = Reader::new(r.bytes()?);
                while !inner.done() {
                    tensor.dims.push(inner.varint()? as i64);
                }
            }
            (2, WIRE_VARINT) => data_type = r.varint()? as i32,
            (4, WIRE_FIXED32) => tensor.values.push(f32::from_bits(r.fixed32()?)),
            (4, WIRE_LEN) => {
                let mut inner = Reader::new(r.bytes()?);
                while !inner.done() {
                    tensor.values.push(f32::from_bits(inner.fixed32()?));
                }
            }
            (8, WIRE_LEN) => tensor.name = r.string()?,
            (9, WIRE_LEN) => raw = Some(r.bytes()?.to_vec()),
            _ => r.skip(wire)?,
        }
    }
    if data_type != DATA_TYPE_FLOAT {
        return Err(Error::OnnxDecode(format!(
            "initializer `{}` has data type {data_type}; only float tensors are supported",
            tensor.name
        )));
    }
    if let Some(raw) = raw {
        if raw.len() % 4 != 0 {
            return Err(Error::OnnxDecode(format!(
                "initializer `{}` raw data length {} is not a multiple of 4",
                tensor.name,
                raw.len()
            )));
        }
        tensor.values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
    }
    if tensor.values.len() != tensor.len_from_dims() {
        return Err(Error::OnnxDecode(format!(
            "initializer `{}`: {} values but dims {:?}",
            tensor.name,
            tensor.values.len(),
            tensor.dims
        )));
    }
    Ok(tensor)
}

fn parse_value_info(buf: &[u8]) -> Result<ValueInfoProto> {
    let mut r = Reader::new(buf);
    let mut info = ValueInfoProto::default();
    while !r.done() {
        let (field, wire) = r.tag()?;
        match (field, wire) {
            (1, WIRE_LEN) => info.name = r.string()?,
            (2, WIRE_LEN) => {
                // TypeProto { tensor_type = 1 } -> Tensor { elem_type = 1, shape = 2 }
                let mut type_r = Reader::new(r.bytes()?);
                while !type_r.done() {
                    let (f, w) = type_r.tag()?;
                    if (f, w) == (1, WIRE_LEN) {
                        let mut tensor_r = Reader::new(type_r.bytes()?);
                        while !tensor_r.done() {
                            let (tf, tw) = tensor_r.tag()?;
                            if (tf, tw) == (2, WIRE_LEN) {
                                info.shape = parse_shape(tensor_r.bytes()?)?;
                            } else {
                                tensor_r.skip(tw)?;
                            }
                        }
                    } else {
                        type_r.skip(w)?;
                    }
                }
            }
            _ => r.skip(wire)?,
        }
    }
    Ok(info)
}

fn parse_shape(buf: &[u8]) -> Result<Vec<Dim>> {
    let mut r = Reader::new(buf);
    let mut dims = Vec::new();
    while !r.done() {
        let (field, wire) = r.tag()?;
        if (field, wire) == (1, WIRE_LEN) {
            let mut dim_r = Reader::new(r.bytes()?);
            let mut dim = None;
            while !dim_r.done() {
                let (f, w) = dim_r.tag()?;
                match (f, w) {
                    (1, WIRE_VARINT) => dim = Some(Dim::Value(dim_r.varint()? as i64)),
                    (2, WIRE_LEN) => dim = Some(Dim::Param(dim_r.string()?)),
                    _ => dim_r.skip(w)?,
                }
            }
            dims.push(dim.unwrap_or(Dim::Value(-1)));
        } else {
            r.skip(wire)?;
        }
    }
    Ok(dims)
}

// ---------------------------------------------------------------------------
// wire-level writer
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn varint(&mut self, mut v: u64) {
        loop {
            let byte = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                self.buf.push(byte);
                break;
            }
            self.buf.push(byte | 0x80);
        }
    }

    fn tag(&mut self, field: u32, wire: u32) {
        self.varint(((field as u64) << 3) | wire as u64);
    }

    fn int(&mut self, field: u32, v: i64) {
        self.tag(field, WIRE_VARINT);
        self.varint(v as u64);
    }

    fn float(&mut self, field: u32, v: f32) {
        self.tag(field, WIRE_FIXED32);
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn bytes(&mut self, field: u32, v: &[u8]) {
        self.tag(field, WIRE_LEN);
        self.varint(v.len() as u64);
        self.buf.extend_from_slice(v);
    }

    fn string(&mut self, field: u32, v: &str) {
        self.bytes(field, v.as_bytes());
    }

    fn message(&mut self, field: u32, inner: Writer) {
        self.bytes(field, &inner.buf);
    }
}

const ATTR_TYPE_FLOAT: i64 = 1;
const ATTR_TYPE_INT: i64 = 2;
const ATTR_TYPE_STRING: i64 = 3;
const ATTR_TYPE_FLOATS: i64 = 6;
const ATTR_TYPE_INTS: i64 = 7;

fn write_attribute(attr: &AttributeProto) -> Writer {
    let mut w = Writer::new();
    w.string(1, &attr.name);
    match &attr.value {
        AttrValue::Float(v) => {
            w.float(2, *v);
            w.int(20, ATTR_TYPE_FLOAT);
        }
        AttrValue::Int(v) => {
            w.int(3, *v);
            w.int(20, ATTR_TYPE_INT);
        }
        AttrValue::Bytes(v) => {
            w.bytes(4, v);
            w.int(20, ATTR_TYPE_STRING);
        }
        AttrValue::Floats(vs) => {
            let mut packed = Writer::new();
            for v in vs {
                packed.buf.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            w.bytes(7, &packed.buf);
            w.int(20, ATTR_TYPE_FLOATS);
        }
        AttrValue::Ints(vs) => {
            let mut packed = Writer::new();
            for v in vs {
                packed.varint(*v as u64);
            }
            w.bytes(8, &packed.buf);
            w.int(20, ATTR_TYPE_INTS);
        }
    }
    w
}

fn write_tensor(t: &TensorProto) -> Writer {
    let mut w = Writer::new();
    let mut dims = Writer::new();
    for d in &t.dims {
        dims.varint(*d as u64);
    }
    w.bytes(1, &dims.buf);
    w.int(2, DATA_TYPE_FLOAT as i64);
    w.string(8, &t.name);
    let mut raw = Vec::with_capacity(t.values.len() * 4);
    for v in &t.values {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    w.bytes(9, &raw);
    w
}

fn write_value_info(info: &ValueInfoProto) -> Writer {
    let mut shape = Writer::new();
    for dim in &info.shape {
        let mut d = Writer::new();
        match dim {
            Dim::Value(v) => d.int(1, *v),
            Dim::Param(p) => d.string(2, p),
        }
        shape.message(1, d);
    }
    let mut tensor = Writer::new();
    tensor.int(1, DATA_TYPE_FLOAT as i64);
    tensor.message(2, shape);
    let mut type_proto = Writer::new();
    type_proto.message(1, tensor);
    let mut w = Writer::new();
    w.string(1, &info.name);
    w.message(2, type_proto);
    w
}

fn write_node(node: &NodeProto) -> Writer {
    let mut w = Writer::new();
    for input in &node.inputs {
        w.string(1, input);
    }
    for output in &node.outputs {
        w.string(2, output);
    }
    w.string(3, &node.name);
    w.string(4, &node.op_type);
    for attr in &node.attributes {
        w.message(5, write_attribute(attr));
    }
    w
}

pub fn encode_model(model: &ModelProto) -> Vec<u8> {
    let mut graph = Writer::new();
    for node in &model.graph.nodes {
        graph.message(1, write_node(node));
    }
    graph.string(2, &model.graph.name);
    for init in &model.graph.initializers {
        graph.message(5, write_tensor(init));
    }
    for input in &model.graph.inputs {
        graph.message(11, write_value_info(input));
    }
    for output in &model.graph.outputs {
        graph.message(12, write_value_info(output));
    }

    let mut w = Writer::new();
    w.int(1, model.ir_version);
    w.string(2, &model.producer_name);
    w.message(7, graph);
    let mut opset = Writer::new();
    opset.string(1, "");
    opset.int(2, model.opset_version);
    w.message(8, opset);
    w.buf
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelProto> {
    parse_model(bytes)
}

pub fn read_model(path: &std::path::Path) -> Result<ModelProto> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes)
}

pub fn write_model(path: &std::path::Path, model: &ModelProto) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_model() -> ModelProto {
        ModelProto {
            ir_version: 8,
            producer_name: "evkit".into(),
            opset_version: 13,
            graph: GraphProto {
                name: "tiny".into(),
                nodes: vec![
                    NodeProto {
                        name: "conv1".into(),
                        op_type: "Conv".into(),
                        inputs: vec!["input".into(), "w1".into(), "b1".into()],
                        outputs: vec!["c1".into()],
                        attributes: vec![
                            AttributeProto::ints("strides", vec![2, 2]),
                            AttributeProto::ints("pads", vec![1, 1, 1, 1]),
                            AttributeProto::ints("kernel_shape", vec![3, 3]),
                        ],
                    },
                    NodeProto {
                        name: "sm".into(),
                        op_type: "Softmax".into(),
                        inputs: vec!["c1".into()],
                        outputs: vec!["output".into()],
                        attributes: vec![AttributeProto::int("axis", 1)],
                    },
                ],
                initializers: vec![TensorProto {
                    name: "w1".into(),
                    dims: vec![2, 3, 3, 3],
                    values: (0..54).map(|i| i as f32 * 0.5 - 4.0).collect(),
                }],
                inputs: vec![ValueInfoProto {
                    name: "input".into(),
                    shape: vec![
                        Dim::Param("batch".into()),
                        Dim::Value(3),
                        Dim::Value(224),
                        Dim::Value(224),
                    ],
                }],
                outputs: vec![ValueInfoProto {
                    name: "output".into(),
                    shape: vec![Dim::Param("batch".into()), Dim::Value(2)],
                }],
            },
        }
    }

    #[test]
    fn round_trip_preserves_model() {
        let model = sample_model();
        let bytes = encode_model(&model);
        let decoded = decode_model(&bytes).unwrap();
        assert_eq!(decoded, model);
    }

    #[test]
    fn encoding_is_deterministic() {
        let model = sample_model();
        assert_eq!(encode_model(&model), encode_model(&model));
    }

    #[test]
    fn truncated_input_fails() {
        let bytes = encode_model(&sample_model());
        assert!(decode_model(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn garbage_fails() {
        assert!(decode_model(&[0xff, 0xff, 0xff, 0xff, 0xff, 0xff]).is_err());
    }

    #[test]
    fn unknown_fields_are_skipped() {
        // Append a length-delimited field number 63 at model level. The tag
        // value (63 << 3) | 2 = 506 needs two varint bytes: 0xfa, 0x03.
        let mut bytes = encode_model(&sample_model());
        bytes.extend_from_slice(&[0xfa, 0x03, 3, 1, 2, 3]);
        let decoded = decode_model(&bytes).unwrap();
        assert_eq!(decoded, sample_model());
    }
}
