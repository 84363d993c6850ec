//! Per-layer tolerance schedules and whole-model conversion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::residual::{ternary_residual_sq, LayerConversion, Provenance, QuantizedModel, TraceStep};
use crate::store::{LayerKind, ModelManifest, Network};

/// Default squared tolerance of the earliest layer under depth grading.
pub const DEPTH_GRADED_FIRST: f64 = 0.005;
/// Default squared tolerance of the deepest layer under depth grading.
pub const DEPTH_GRADED_LAST: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Uniform,
    DepthGraded,
    ComputeAware,
    Explicit,
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Uniform => "uniform",
            ScheduleMode::DepthGraded => "depth_graded",
            ScheduleMode::ComputeAware => "compute_aware",
            ScheduleMode::Explicit => "explicit",
        })
    }
}

/// `pattern` is a layer name in which `*` matches any run of characters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub pattern: String,
    pub epsilon_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub mode: ScheduleMode,
    pub entries: Vec<ScheduleEntry>,
}

/// Parameters for [`make_schedule`]; every value is a squared tolerance in
/// `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    Uniform {
        epsilon_sq: f64,
    },
    /// Linear in depth from `first` to `last`, with `first ≤ last`.
    DepthGraded {
        first: f64,
        last: f64,
    },
    /// Layers ranked by FLOPs; the lightest gets `min`, the heaviest `cap`.
    ComputeAware {
        min: f64,
        cap: f64,
    },
}

fn check_eps_sq(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must lie in (0, 1], got {v}")))
    }
}

/// Glob match supporting `*` only.
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for part in &parts[1..parts.len() - 1] {
        match rest.find(part) {
            Some(pos) => rest = &rest[pos + part.len()..],
            None => return false,
        }
    }
    true
}

impl BudgetSchedule {
    /// Parses a schedule file: a JSON list of `{pattern, epsilon_sq}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ScheduleEntry> = serde_json::from_str(text)?;
        let schedule = Self {
            mode: ScheduleMode::Explicit,
            entries,
        };
        for e in &schedule.entries {
            check_eps_sq(e.epsilon_sq, &format!("epsilon_sq of {:?}", e.pattern))?;
        }
        Ok(schedule)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    /// Squared tolerance for every fc/conv layer of `manifest`, in order.
    /// Each layer must match exactly one entry.
    pub fn resolve(&self, manifest: &ModelManifest) -> Result<Vec<(String, f64)>> {
        let mut used = vec![false; self.entries.len()];
        let mut out = Vec::new();
        for decl in manifest.quantized_layers() {
            let hits: Vec<usize> = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| pattern_matches(&e.pattern, &decl.name))
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [i] => {
                    let e = &self.entries[*i];
                    check_eps_sq(e.epsilon_sq, &format!("epsilon_sq of {:?}", e.pattern))?;
                    used[*i] = true;
                    out.push((decl.name.clone(), e.epsilon_sq));
                }
                [] => {
                    return Err(Error::invalid(format!(
                        "no schedule entry matches layer {:?}",
                        decl.name
                    )))
                }
                many => {
                    let patterns: Vec<&str> = many.iter().map(|&i| self.entries[i].pattern.as_str()).collect();
                    return Err(Error::invalid(format!(
                        "layer {:?} is matched by several schedule entries: {patterns:?}",
                        decl.name
                    )));
                }
            }
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::invalid(format!(
                "schedule entry {:?} matches no fc/conv layer",
                self.entries[i].pattern
            )));
        }
        Ok(out)
    }
}

/// Multiplications per layer: fc `out·in`, conv `out_spatial·kh·kw·C_in·C_out`,
/// batch-norm one per activation, zero elsewhere.
pub fn flops_per_layer(net: &Network) -> Vec<(String, u64)> {
    net.layers()
        .iter()
        .enumerate()
        .map(|(i, decl)| {
            let flops = match decl.kind {
                LayerKind::Fc => net.weight(i).map_or(0, |w| w.len() as u64),
                LayerKind::Conv2d => {
                    let out = net.output_shape(i);
                    let w = net.weight(i).expect("conv has weight");
                    (out[1] * out[2]) as u64 * w.len() as u64
                }
                LayerKind::BnScale => net.output_shape(i).iter().product::<usize>() as u64,
                LayerKind::Relu | LayerKind::Maxpool | LayerKind::Avgpool => 0,
            };
            (decl.name.clone(), flops)
        })
        .collect()
}

pub fn flops_map(net: &Network) -> BTreeMap<String, u64> {
    flops_per_layer(net).into_iter().collect()
}

pub fn make_schedule(net: &Network, spec: ScheduleSpec) -> Result<BudgetSchedule> {
    let names: Vec<String> = net.manifest().quantized_layers().map(|d| d.name.clone()).collect();
    if names.is_empty() {
        return Err(Error::invalid("network has no fc/conv layer to schedule"));
    }
    let ladder = |lo: f64, hi: f64, pos: usize, steps: usize| {
        if steps <= 1 {
            lo
        } else {
            let t = pos as f64 / (steps - 1) as f64;
            lo * (1.0 - t) + hi * t
        }
    };
    let (mode, values): (ScheduleMode, Vec<f64>) = match spec {
        ScheduleSpec::Uniform { epsilon_sq } => {
            check_eps_sq(epsilon_sq, "epsilon_sq")?;
            (ScheduleMode::Uniform, vec![epsilon_sq; names.len()])
        }
        ScheduleSpec::DepthGraded { first, last } => {
            check_eps_sq(first, "first epsilon_sq")?;
            check_eps_sq(last, "last epsilon_sq")?;
            if first > last {
                return Err(Error::invalid(format!(
                    "depth grading needs first <= last, got {first} > {last}"
                )));
            }
            let n = names.len();
            (
                ScheduleMode::DepthGraded,
                (0..n).map(|i| ladder(first, last, i, n)).collect(),
            )
        }
        ScheduleSpec::ComputeAware { min, cap } => {
            check_eps_sq(min, "minimum epsilon_sq")?;
            check_eps_sq(cap, "epsilon_sq cap")?;
            if min > cap {
                return Err(Error::invalid(format!(
                    "compute-aware needs min <= cap, got {min} > {cap}"
                )));
            }
            let flops = flops_map(net);
            let layer_flops: Vec<u64> = names.iter().map(|n| flops[n]).collect();
            let mut distinct = layer_flops.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let values = layer_flops
                .iter()
                .map(|f| {
                    let rank = distinct.binary_search(f).expect("present");
                    ladder(min, cap, rank, distinct.len())
                })
                .collect();
            (ScheduleMode::ComputeAware, values)
        }
    };
    Ok(BudgetSchedule {
        mode,
        entries: names
            .into_iter()
            .zip(values)
            .map(|(pattern, epsilon_sq)| ScheduleEntry { pattern, epsilon_sq })
            .collect(),
    })
}

/// Result of [`convert_model`].
#[derive(Debug, Clone)]
pub struct ModelConversion {
    pub model: QuantizedModel,
    /// One record per fc/conv layer, in network order.
    pub layers: Vec<LayerConversion>,
}

impl ModelConversion {
    pub fn cost_report(&self, net: &Network, x: f64, c_ratio: f64) -> CostReport {
        CostReport::from_model(&self.model, &flops_map(net), x, c_ratio)
    }

    /// Iteration log of every layer as CSV
    /// (`iteration,layer,block,E_k_before,delta_after`).
    pub fn write_trace_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        write_trace_csv(self.layers.iter().flat_map(|l| l.trace.iter()), writer)
    }
}

pub fn write_trace_csv<'a, W: std::io::Write>(steps: impl IntoIterator<Item = &'a TraceStep>, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(writer);
    let mut any = false;
    for step in steps {
        w.serialize(step).map_err(|e| Error::format(e.to_string()))?;
        any = true;
    }
    if !any {
        w.write_record(["iteration", "layer", "block", "E_k_before", "delta_after"])
            .map_err(|e| Error::format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Converts every fc/conv layer of `net` under `schedule`. Layers are
/// processed in parallel; the result does not depend on scheduling. A layer
/// that cannot reach its tolerance fails the whole conversion, reporting the
/// first such layer in network order.
pub fn convert_model(
    net: &Network,
    block_size: usize,
    schedule: &BudgetSchedule,
    max_levels: usize,
) -> Result<ModelConversion> {
    let budgets = schedule.resolve(net.manifest())?;
    let jobs: Vec<(usize, f64)> = budgets
        .iter()
        .map(|(name, eps_sq)| (net.layer_index(name).expect("resolved from manifest"), *eps_sq))
        .collect();
    let results: Vec<Result<LayerConversion>> = jobs
        .par_iter()
        .map(|&(i, eps_sq)| {
            let decl = &net.layers()[i];
            let w = net
                .weight(i)
                .expect("fc/conv has weight")
                .clone()
                .with_name(decl.name.clone());
            // an exhausted layer keeps its delta and is flagged in `termination`
            ternary_residual_sq(&w, block_size, eps_sq, max_levels)
        })
        .collect();
    let layers = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut dense = Vec::new();
    for (i, decl) in net.layers().iter().enumerate() {
        if decl.kind == LayerKind::BnScale {
            let w = net.weight(i).expect("bn has scale");
            dense.push(w.clone().with_name(format!("{}.weight", decl.name)));
        }
        if let Some(b) = net.bias(i) {
            dense.push(b.clone().with_name(format!("{}.bias", decl.name)));
        }
    }
    let model = QuantizedModel {
        manifest: strip_refs(net.manifest()),
        layers: layers.iter().map(|c| c.layer.clone()).collect(),
        dense,
        provenance: Provenance {
            block_size,
            max_levels,
            schedule_mode: schedule.mode.to_string(),
            scales_8bit: false,
        },
    };
    model.validate()?;
    Ok(ModelConversion { model, layers })
}

/// The manifest without file references, which are meaningless inside a
/// container.
fn strip_refs(manifest: &ModelManifest) -> ModelManifest {
    let mut m = manifest.clone();
    for l in &mut m.layers {
        l.weight_ref = None;
        l.bias_ref = None;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::DEFAULT_MAX_LEVELS;
    use crate::store::{HyperParams, LayerDecl, LayerParams, Tensor};
    use crate::toy::{gaussian_tensor, toy_network};

    fn fc_net(dims: &[usize]) -> Network {
        let mut layers = Vec::new();
        let mut params = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            layers.push(LayerDecl::new(format!("fc{}", i + 1), LayerKind::Fc));
            params.push(LayerParams {
                weight: Some(gaussian_tensor("w", &[pair[1], pair[0]], 0.3, i as u64)),
                bias: None,
            });
        }
        Network::new(
            ModelManifest {
                input_shape: vec![dims[0]],
                layers,
            },
            params,
        )
        .unwrap()
    }

    fn values(s: &BudgetSchedule) -> Vec<f64> {
        s.entries.iter().map(|e| e.epsilon_sq).collect()
    }

    #[test]
    fn glob() {
        assert!(pattern_matches("*", "conv1"));
        assert!(pattern_matches("conv*", "conv1"));
        assert!(pattern_matches("*1", "conv1"));
        assert!(pattern_matches("c*v*", "conv1"));
        assert!(!pattern_matches("fc*", "conv1"));
        assert!(!pattern_matches("conv1*1", "conv1"));
        assert!(pattern_matches("fc1", "fc1"));
        assert!(!pattern_matches("fc1", "fc10"));
    }

    #[test]
    fn uniform_schedule() {
        let net = fc_net(&[4, 4, 4, 4]);
        let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 0.01 }).unwrap();
        assert_eq!(values(&s), vec![0.01, 0.01, 0.01]);
        assert!(make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 0.0 }).is_err());
        assert!(make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 1.5 }).is_err());
    }

    #[test]
    fn depth_graded_schedule() {
        let net = fc_net(&[4, 4, 4, 4, 4]);
        let s = make_schedule(
            &net,
            ScheduleSpec::DepthGraded {
                first: 0.005,
                last: 0.06,
            },
        )
        .unwrap();
        let v = values(&s);
        assert_eq!(v.len(), 4);
        assert_eq!((v[0], v[3]), (0.005, 0.06));
        assert!(v.windows(2).all(|p| p[0] <= p[1]));
        assert!(make_schedule(&net, ScheduleSpec::DepthGraded { first: 0.1, last: 0.01 }).is_err());
    }

    #[test]
    fn compute_aware_loosens_heavy_layers() {
        // fc1 has 4·8 = 32 multiplies, fc2 8·40 = 320.
        let net = fc_net(&[4, 8, 40]);
        let flops = flops_per_layer(&net);
        assert_eq!(flops[1].1, 10 * flops[0].1);
        let s = make_schedule(&net, ScheduleSpec::ComputeAware { min: 0.005, cap: 0.05 }).unwrap();
        let v = values(&s);
        assert!(v[1] >= v[0]);
        assert_eq!(v, vec![0.005, 0.05]);
    }

    #[test]
    fn flop_counts() {
        let net = fc_net(&[20, 10]);
        assert_eq!(flops_per_layer(&net), vec![("fc1".to_string(), 200)]);

        let mut conv = LayerDecl::new("conv", LayerKind::Conv2d);
        conv.hyperparams = HyperParams {
            stride: Some(1),
            pad: Some(0),
            ..HyperParams::default()
        };
        let net = Network::new(
            ModelManifest {
                input_shape: vec![2, 7, 7],
                layers: vec![conv],
            },
            vec![LayerParams {
                weight: Some(Tensor::zeros("w", vec![4, 2, 3, 3]).unwrap()),
                bias: None,
            }],
        )
        .unwrap();
        assert_eq!(flops_per_layer(&net)[0].1, 25 * 9 * 2 * 4);

        let toy = toy_network(0);
        let per_layer = flops_per_layer(&toy);
        let total: u64 = per_layer.iter().map(|(_, f)| f).sum();
        assert_eq!(total, 64 * 72 + 256 + 16 * 288 + 512 + 160);
    }

    #[test]
    fn resolve_requires_exactly_one_match() {
        let net = fc_net(&[4, 4, 4]);
        let parse = |s: &str| BudgetSchedule::from_json(s).unwrap();
        let ok = parse(r#"[{"pattern": "fc1", "epsilon_sq": 0.1}, {"pattern": "fc2", "epsilon_sq": 0.2}]"#);
        assert_eq!(ok.resolve(net.manifest()).unwrap()[1], ("fc2".into(), 0.2));
        let overlap = parse(r#"[{"pattern": "fc*", "epsilon_sq": 0.1}, {"pattern": "fc2", "epsilon_sq": 0.2}]"#);
        assert!(overlap.resolve(net.manifest()).is_err());
        let missing = parse(r#"[{"pattern": "fc1", "epsilon_sq": 0.1}]"#);
        assert!(missing.resolve(net.manifest()).is_err());
        let unused = parse(r#"[{"pattern": "*", "epsilon_sq": 0.1}, {"pattern": "conv*", "epsilon_sq": 0.2}]"#);
        assert!(unused.resolve(net.manifest()).is_err());
        assert!(BudgetSchedule::from_json(r#"[{"pattern": "*", "epsilon_sq": 0}]"#).is_err());
    }

    #[test]
    fn epsilon_one_gives_base_model() {
        let net = toy_network(0);
        let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 1.0 }).unwrap();
        let conv = convert_model(&net, 64, &s, DEFAULT_MAX_LEVELS).unwrap();
        assert_eq!(conv.model.blocks_factor(), 1.0);
        assert_eq!(conv.model.provenance.schedule_mode, "uniform");
    }

    #[test]
    fn conversion_respects_budgets_and_is_deterministic() {
        let net = toy_network(0);
        let s = make_schedule(
            &net,
            ScheduleSpec::DepthGraded {
                first: 0.005,
                last: 0.06,
            },
        )
        .unwrap();
        let a = convert_model(&net, 16, &s, DEFAULT_MAX_LEVELS).unwrap();
        let b = convert_model(&net, 16, &s, DEFAULT_MAX_LEVELS).unwrap();
        assert_eq!(a.model, b.model);
        for (layer, (_, eps_sq)) in a.model.layers.iter().zip(s.resolve(net.manifest()).unwrap()) {
            assert!(layer.delta <= eps_sq, "{} {} > {}", layer.name, layer.delta, eps_sq);
        }
    }

    #[test]
    fn tighter_budgets_never_use_fewer_levels() {
        for seed in 0..4 {
            let net = toy_network(seed);
            let mut prev = 0;
            for eps_sq in [0.5, 0.1, 0.03, 0.01, 0.003] {
                let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: eps_sq }).unwrap();
                let levels = convert_model(&net, 32, &s, DEFAULT_MAX_LEVELS)
                    .unwrap()
                    .model
                    .total_levels();
                assert!(levels >= prev, "seed {seed}: {levels} < {prev} at {eps_sq}");
                prev = levels;
            }
        }
    }

    #[test]
    fn cap_failure_names_the_layer() {
        let net = toy_network(0);
        let s = make_schedule(&net, ScheduleSpec::Uniform { epsilon_sq: 1e-6 }).unwrap();
        match convert_model(&net, 64, &s, 2) {
            Err(Error::NotConverged { layer, .. }) => assert_eq!(layer, "conv1"),
            other => panic!("{other:?}"),
        }
    }
}
