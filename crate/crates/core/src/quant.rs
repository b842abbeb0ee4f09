//! Simulated int8 fixed-point execution for rank-4 graphs.
//!
//! Quantization is per-tensor symmetric: `scale = max_abs / 127`, zero point
//! 0, 8 bits. Scales are calibrated by running the float graph over a set of
//! calibration inputs; execution snaps every tensor onto its grid and runs
//! convolutions as integer-affine ops (see [`crate::exec`]).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::exec::{self, ExecError, ExecOpts, QuantizedTensor};
use crate::graph::Graph;
use crate::lowering::check_rank4;
use crate::tensor::max_abs_diff;
use crate::Tensor;

/// Smallest admissible scale; applied when a calibration tensor is all zero.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Per-tensor symmetric quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantSpec {
    /// Grid step; positive, covers the calibration max-abs at code 127.
    pub scale: f64,
}

impl QuantSpec {
    pub const ZERO_POINT: i32 = 0;
    pub const BITS: u32 = 8;
    pub const QMAX: i32 = 127;

    fn from_max_abs(max_abs: f64) -> (Self, bool) {
        let floored = max_abs < SCALE_FLOOR * Self::QMAX as f64;
        let scale = if floored {
            SCALE_FLOOR
        } else {
            max_abs / Self::QMAX as f64
        };
        (QuantSpec { scale }, floored)
    }
}

/// Tensor name -> quantization spec. Activations (graph inputs and node
/// outputs) and conv weights live in separate namespaces because a weight
/// may share its name with the node that owns it.
#[derive(Debug, Clone, Default, Serialize)]
pub struct QuantTable {
    pub activations: BTreeMap<String, QuantSpec>,
    pub weights: BTreeMap<String, QuantSpec>,
}

impl QuantTable {
    pub fn scale(&self, name: &str) -> Result<f64, ExecError> {
        self.activations
            .get(name)
            .map(|s| s.scale)
            .ok_or_else(|| ExecError::MissingScale(name.to_string()))
    }

    pub fn weight_scale(&self, name: &str) -> Result<f64, ExecError> {
        self.weights
            .get(name)
            .map(|s| s.scale)
            .ok_or_else(|| ExecError::MissingScale(format!("weight {name}")))
    }

    /// `dequant(quant(x))`: snap every element onto the tensor's int8 grid.
    pub fn snap(&self, name: &str, t: &Tensor) -> Result<Tensor, ExecError> {
        let scale = self.scale(name)?;
        let data = t
            .data()
            .iter()
            .map(|&v| (quantize_value(v, scale) as f64 * scale) as f32)
            .collect();
        Ok(Tensor::new(t.shape().clone(), data)?)
    }

    pub(crate) fn quantize_i32(&self, scale: f64, t: &Tensor) -> QuantizedTensor {
        QuantizedTensor {
            shape: t.shape().clone(),
            data: t.data().iter().map(|&v| quantize_value(v, scale)).collect(),
        }
    }
}

fn quantize_value(v: f32, scale: f64) -> i32 {
    let q = (v as f64 / scale).round();
    q.clamp(-(QuantSpec::QMAX as f64), QuantSpec::QMAX as f64) as i32
}

/// Calibration outcome: the scales plus the simulated-vs-float error per
/// graph output.
#[derive(Debug, Clone, Serialize)]
pub struct QuantReport {
    pub scales: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    /// Max over calibration sets of `max_abs_diff(quantized, float)`.
    pub output_max_abs_diff: BTreeMap<String, f64>,
}

/// A rank-4 graph bundled with its calibrated quantization table.
#[derive(Debug, Clone)]
pub struct QuantizedGraph {
    pub graph: Graph,
    pub table: QuantTable,
}

/// Calibrate per-tensor scales over `calibration` input sets and measure the
/// simulated-int8 error against the float execution.
pub fn quantize(
    g4: &Graph,
    calibration: &[BTreeMap<String, Tensor>],
) -> Result<(QuantizedGraph, QuantReport), ExecError> {
    if calibration.is_empty() {
        return Err(ExecError::Shape("calibration set is empty".into()));
    }
    let rank4 = check_rank4(g4);
    if !rank4.is_empty() {
        return Err(ExecError::Shape(format!(
            "graph is not rank4-clean: {}",
            rank4[0]
        )));
    }

    // observe every intermediate by treating all nodes as outputs
    let mut probe = g4.clone();
    probe.outputs = g4.nodes.iter().map(|n| n.id.clone()).collect();

    let tensor_max = |t: &Tensor| t.data().iter().fold(0.0f64, |acc, &v| acc.max(v.abs() as f64));
    let mut act_max: BTreeMap<String, f64> = BTreeMap::new();
    for inputs in calibration {
        for (name, t) in inputs {
            let entry = act_max.entry(name.clone()).or_insert(0.0);
            *entry = entry.max(tensor_max(t));
        }
        let result = exec::run_graph(&probe, inputs)?;
        for (name, t) in &result.outputs {
            let entry = act_max.entry(name.clone()).or_insert(0.0);
            *entry = entry.max(tensor_max(t));
        }
    }

    let mut table = QuantTable::default();
    let mut warnings = Vec::new();
    for (name, &m) in &act_max {
        let (spec, floored) = QuantSpec::from_max_abs(m);
        if floored {
            warnings.push(format!(
                "tensor {name:?} is all zero over calibration; scale floored to {SCALE_FLOOR}"
            ));
        }
        table.activations.insert(name.clone(), spec);
    }
    for (name, w) in &g4.weights {
        let (spec, floored) = QuantSpec::from_max_abs(tensor_max(w));
        if floored {
            warnings.push(format!(
                "weight {name:?} is all zero; scale floored to {SCALE_FLOOR}"
            ));
        }
        table.weights.insert(name.clone(), spec);
    }

    // simulated-int8 error per graph output, worst case over the sets
    let mut output_max_abs_diff: BTreeMap<String, f64> = BTreeMap::new();
    for inputs in calibration {
        let float = exec::run_graph(g4, inputs)?;
        let quantized = exec::run_graph_with(
            g4,
            inputs,
            ExecOpts {
                quant: Some(&table),
                ..ExecOpts::default()
            },
        )?;
        for (name, t) in &float.outputs {
            let diff = max_abs_diff(&quantized.outputs[name], t)?;
            let entry = output_max_abs_diff.entry(name.clone()).or_insert(0.0);
            *entry = entry.max(diff);
        }
    }

    let report = QuantReport {
        scales: table
            .activations
            .iter()
            .map(|(k, v)| (k.clone(), v.scale))
            .chain(table.weights.iter().map(|(k, v)| (format!("{k} (weight)"), v.scale)))
            .collect(),
        warnings,
        output_max_abs_diff,
    };
    Ok((QuantizedGraph { graph: g4.clone(), table }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, OpKind};
    use crate::tensor::Shape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(dims: &[usize]) -> Shape {
        Shape::new(dims).unwrap()
    }

    fn identity_1x1_graph() -> Graph {
        let w = Tensor::new(shape(&[1, 1, 1, 1]), vec![1.0]).unwrap();
        let b = Tensor::zeros(shape(&[1]));
        GraphBuilder::new()
            .input("x", [1, 1, 2, 2])
            .conv(
                "c",
                OpKind::Conv2D { out_ch: 1, kernel: [1, 1], stride: [1, 1], pad: [0, 0] },
                "x",
                w,
                b,
            )
            .output("c")
            .build()
            .unwrap()
    }

    #[test]
    fn exact_grid_values_quantize_without_error() {
        // inputs on the k/127 grid and weight exactly 1.0: the identity conv
        // reproduces the input, so the snapped output lands back on the grid
        let g = identity_1x1_graph();
        let x = Tensor::new(
            shape(&[1, 1, 2, 2]),
            vec![127.0 / 127.0, -64.0 / 127.0, 3.0 / 127.0, 0.0],
        )
        .unwrap();
        let calib = vec![BTreeMap::from([("x".to_string(), x)])];
        let (_, report) = quantize(&g, &calib).unwrap();
        assert_eq!(report.output_max_abs_diff["c"], 0.0);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn all_zero_calibration_floors_scale_and_warns() {
        let g = identity_1x1_graph();
        let x = Tensor::zeros(shape(&[1, 1, 2, 2]));
        let calib = vec![BTreeMap::from([("x".to_string(), x)])];
        let (qg, report) = quantize(&g, &calib).unwrap();
        assert!(!report.warnings.is_empty());
        assert_eq!(qg.table.scale("x").unwrap(), SCALE_FLOOR);
    }

    #[test]
    fn rejects_non_rank4_graphs() {
        let w = Tensor::zeros(shape(&[1, 1, 1, 1, 1]));
        let b = Tensor::zeros(shape(&[1]));
        let g = GraphBuilder::new()
            .input("x", [1, 1, 2, 2, 2])
            .conv(
                "c",
                OpKind::Conv3D {
                    out_ch: 1,
                    kernel: [1, 1, 1],
                    stride: [1, 1, 1],
                    pad: [0, 0, 0],
                },
                "x",
                w,
                b,
            )
            .output("c")
            .build()
            .unwrap();
        let calib = vec![BTreeMap::from([(
            "x".to_string(),
            Tensor::zeros(shape(&[1, 1, 2, 2, 2])),
        )])];
        assert!(quantize(&g, &calib).is_err());
    }

    #[test]
    fn two_layer_error_stays_within_interval_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut random = |dims: &[usize]| -> Tensor {
            let s = shape(dims);
            let data = (0..s.num_elements()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Tensor::new(s, data).unwrap()
        };
        let (w1, b1) = (random(&[3, 2, 3, 3]), random(&[3]));
        let (w2, b2) = (random(&[2, 3, 3, 3]), random(&[2]));
        let g = GraphBuilder::new()
            .input("x", [1, 2, 6, 6])
            .conv(
                "c1",
                OpKind::Conv2D { out_ch: 3, kernel: [3, 3], stride: [1, 1], pad: [1, 1] },
                "x",
                w1.clone(),
                b1,
            )
            .node("r1", OpKind::ReLU, &["c1"])
            .conv(
                "c2",
                OpKind::Conv2D { out_ch: 2, kernel: [3, 3], stride: [1, 1], pad: [1, 1] },
                "r1",
                w2.clone(),
                b2,
            )
            .output("c2")
            .build()
            .unwrap();
        let calib: Vec<BTreeMap<String, Tensor>> = (0..3)
            .map(|_| BTreeMap::from([("x".to_string(), random(&[1, 2, 6, 6]))]))
            .collect();
        let (qg, report) = quantize(&g, &calib).unwrap();

        // interval-arithmetic bound on |quantized - float| per layer:
        //   conv: e_out = taps * (|x|_max * s_w/2 + |w|_max * e_in) + s_out/2
        //   relu: 1-Lipschitz, then the snap adds s_out/2
        // where the input snap contributes e_in = s_in/2.
        let s = |name: &str| qg.table.scale(name).unwrap();
        let sw = |name: &str| qg.table.weight_scale(name).unwrap();
        let wmax = |w: &Tensor| w.data().iter().fold(0.0f64, |a, &v| a.max(v.abs() as f64));
        let xmax = |name: &str| s(name) * QuantSpec::QMAX as f64;
        let taps1 = (2 * 3 * 3) as f64;
        let taps2 = (3 * 3 * 3) as f64;
        let e_x = s("x") / 2.0;
        let e_c1 = taps1 * (xmax("x") * sw("c1") / 2.0 + wmax(&w1) * e_x) + s("c1") / 2.0;
        let e_r1 = e_c1 + s("r1") / 2.0;
        let e_c2 = taps2 * (xmax("r1") * sw("c2") / 2.0 + wmax(&w2) * e_r1) + s("c2") / 2.0;
        let measured = report.output_max_abs_diff["c2"];
        assert!(
            measured <= 5.0 * e_c2,
            "measured {measured} exceeds 5x interval bound {e_c2}"
        );
        assert!(measured > 0.0);
    }

    proptest! {
        // rounding bound: snapping moves an in-range value by at most scale/2
        #[test]
        fn prop_snap_error_within_half_scale(v in -1.0f32..1.0) {
            let mut table = QuantTable::default();
            table.activations.insert("t".into(), QuantSpec { scale: 1.0 / 127.0 });
            let t = Tensor::new(shape(&[1]), vec![v]).unwrap();
            let snapped = table.snap("t", &t).unwrap();
            let err = (snapped.data()[0] - v).abs() as f64;
            prop_assert!(err <= 0.5 / 127.0 + 1e-9);
        }
    }
}
