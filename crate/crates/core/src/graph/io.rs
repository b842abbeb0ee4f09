//! On-disk graph format.
//!
//! Graph file: one UTF-8 JSON object
//! `{"inputs": {name: [dims]}, "nodes": [...], "outputs": [ids], "weights_file": path}`
//! with `weights_file` relative to the graph file's directory.
//!
//! Weights file: little-endian binary. Magic `VXW1`, `u32` entry count, then
//! per entry: `u16` name length, name bytes, `u8` rank, `u32` dims[rank],
//! `f32` data row-major.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, Node};
use crate::tensor::Shape;
use crate::Tensor;

const WEIGHTS_MAGIC: &[u8; 4] = b"VXW1";

#[derive(Serialize, Deserialize)]
struct GraphFile {
    inputs: BTreeMap<String, Vec<usize>>,
    nodes: Vec<Node>,
    outputs: Vec<String>,
    weights_file: String,
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> GraphError {
    let context = context.into();
    move |source| GraphError::Io { context, source }
}

/// Write `graph` as JSON at `path` plus a sibling `<stem>.vxw` weights file.
pub fn save_graph(graph: &Graph, path: &Path) -> Result<(), GraphError> {
    let weights_name = format!(
        "{}.vxw",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("weights")
    );
    let file = GraphFile {
        inputs: graph
            .inputs
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect(),
        nodes: graph.nodes.clone(),
        outputs: graph.outputs.clone(),
        weights_file: weights_name.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("graph serializes");
    fs::write(path, json + "\n").map_err(io_err(format!("writing {}", path.display())))?;
    let weights_path = path.with_file_name(&weights_name);
    save_weights(&graph.weights, &weights_path)
}

/// Read a graph JSON file and its weights file back into memory.
pub fn load_graph(path: &Path) -> Result<Graph, GraphError> {
    let text =
        fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    let file: GraphFile = serde_json::from_str(&text).map_err(|e| GraphError::Parse {
        context: format!("{} (line {}, column {})", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut inputs = BTreeMap::new();
    for (name, dims) in file.inputs {
        let shape = Shape::new(dims).map_err(|e| GraphError::Parse {
            context: format!("{}: input {name:?}", path.display()),
            message: e.to_string(),
        })?;
        inputs.insert(name, shape);
    }
    let weights_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&file.weights_file);
    let weights = load_weights(&weights_path)?;
    Ok(Graph {
        inputs,
        nodes: file.nodes,
        outputs: file.outputs,
        weights,
    })
}

/// Serialize a named tensor map in the binary weights format. Entries are
/// written in key order so the bytes are deterministic.
pub fn save_weights(weights: &BTreeMap<String, Tensor>, path: &Path) -> Result<(), GraphError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&u32::try_from(weights.len()).expect("entry count fits u32").to_le_bytes());
    for (name, tensor) in weights {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&u16::try_from(name_bytes.len()).expect("name fits u16").to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.shape().rank() as u8);
        for &d in tensor.shape().dims() {
            buf.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f =
        fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
    f.write_all(&buf).map_err(io_err(format!("writing {}", path.display())))
}

/// Parse a binary weights file. Also used for calibration input sets, which
/// share the format.
pub fn load_weights(path: &Path) -> Result<BTreeMap<String, Tensor>, GraphError> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    let truncated = |name: &str| GraphError::WeightFormat {
        path: path.display().to_string(),
        name: name.to_string(),
    };
    let mut r = bytes.as_slice();

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("<header>"))?;
    if &magic != WEIGHTS_MAGIC {
        return Err(GraphError::Parse {
            context: path.display().to_string(),
            message: format!("bad magic {magic:?}, expected {WEIGHTS_MAGIC:?}"),
        });
    }
    let count = read_u32(&mut r).ok_or_else(|| truncated("<header>"))?;

    let mut weights = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u16(&mut r).ok_or_else(|| truncated("<name>"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| truncated("<name>"))?;
        let name = String::from_utf8(name_bytes).map_err(|e| GraphError::Parse {
            context: path.display().to_string(),
            message: format!("weight name is not UTF-8: {e}"),
        })?;

        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(|_| truncated(&name))?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            dims.push(read_u32(&mut r).ok_or_else(|| truncated(&name))? as usize);
        }
        let shape = Shape::new(dims).map_err(|e| GraphError::Parse {
            context: format!("{}: weight {name:?}", path.display()),
            message: e.to_string(),
        })?;

        let mut data = Vec::with_capacity(shape.num_elements());
        for _ in 0..shape.num_elements() {
            let mut le = [0u8; 4];
            r.read_exact(&mut le).map_err(|_| truncated(&name))?;
            data.push(f32::from_le_bytes(le));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| GraphError::Parse {
            context: format!("{}: weight {name:?}", path.display()),
            message: e.to_string(),
        })?;
        weights.insert(name, tensor);
    }
    Ok(weights)
}

fn read_u16(r: &mut &[u8]) -> Option<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).ok()?;
    Some(u16::from_le_bytes(b))
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}
