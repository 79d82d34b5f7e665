//! Layer registry, verification runs, counter reports and timed sweeps.

use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::kernels::{operand_layouts, Executor, KernelCounters, KernelInputs, Mode};
use crate::oracle::{dense_bwi, dense_bww, dense_fwd, expected_fma_counts, max_relative_error, FmaCountReport};
use crate::plan::{plan, plan_bww, CheckOn, Component, KernelPlan, DEFAULT_REGISTER_BUDGET};
use crate::shape::ConvShape;
use crate::simd::VectorSpec;
use crate::sparsity::{gen_sparse_stream, measure_sparsity};
use crate::tensor::{pack, unpack, BlockedTensor, Layout, PlainTensor};

pub const DESK_BATCH: usize = 4;
pub const DESK_SCALE: usize = 2;
pub const FULL_BATCH: usize = 16;
pub const TOLERANCE: f64 = 1e-4;
pub const WARMUP_CALLS: usize = 2;

/// Seed streams for the three operands of a problem.
const INPUT_STREAM: u64 = 0;
const FILTER_STREAM: u64 = 1;
const OUTPUT_GRAD_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub name: &'static str,
    pub network: &'static str,
    /// Full-size dims with a minibatch of [`FULL_BATCH`].
    pub shape: ConvShape,
}

impl LayerConfig {
    /// Spatial dims divided by `scale` (rounded up) with the given
    /// minibatch. Padding and strides are unchanged.
    pub fn scaled(&self, batch: usize, scale: usize) -> ConvShape {
        let scale = scale.max(1);
        ConvShape {
            batch,
            height: self.shape.height.div_ceil(scale),
            width: self.shape.width.div_ceil(scale),
            ..self.shape
        }
    }
}

const fn layer(
    name: &'static str,
    network: &'static str,
    c: usize,
    k: usize,
    hw: usize,
    filter: usize,
    stride: usize,
) -> LayerConfig {
    let pad = if filter % 2 == 1 { (filter - 1) / 2 } else { 0 };
    LayerConfig {
        name,
        network,
        shape: ConvShape {
            batch: FULL_BATCH,
            in_channels: c,
            out_channels: k,
            height: hw,
            width: hw,
            filter_h: filter,
            filter_w: filter,
            stride_h: stride,
            stride_w: stride,
            pad_h: pad,
            pad_w: pad,
        },
    }
}

/// Every evaluated layer except each network's first.
pub const LAYERS: [LayerConfig; 27] = [
    layer("vgg1_2", "vgg", 64, 64, 224, 3, 1),
    layer("vgg2_1", "vgg", 64, 128, 112, 3, 1),
    layer("vgg2_2", "vgg", 128, 128, 112, 3, 1),
    layer("vgg3_1", "vgg", 128, 256, 56, 3, 1),
    layer("vgg3_2", "vgg", 256, 256, 56, 3, 1),
    layer("vgg4_1", "vgg", 256, 512, 28, 3, 1),
    layer("vgg4_2", "vgg", 512, 512, 28, 3, 1),
    layer("vgg5_1", "vgg", 512, 512, 14, 3, 1),
    layer("resnet2_1a", "resnet", 64, 64, 56, 1, 1),
    layer("resnet2_1b", "resnet", 256, 64, 56, 1, 1),
    layer("resnet2_2", "resnet", 64, 64, 56, 3, 1),
    layer("resnet2_3", "resnet", 64, 256, 56, 1, 1),
    layer("resnet3_1a", "resnet", 256, 128, 56, 1, 1),
    layer("resnet3_1b", "resnet", 512, 128, 28, 1, 1),
    layer("resnet3_2", "resnet", 128, 128, 28, 3, 1),
    layer("resnet3_2/r", "resnet", 128, 128, 56, 3, 2),
    layer("resnet3_3", "resnet", 128, 512, 28, 1, 1),
    layer("resnet4_1a", "resnet", 512, 256, 28, 1, 1),
    layer("resnet4_1b", "resnet", 1024, 256, 14, 1, 1),
    layer("resnet4_2", "resnet", 256, 256, 14, 3, 1),
    layer("resnet4_2/r", "resnet", 256, 256, 28, 3, 2),
    layer("resnet4_3", "resnet", 256, 1024, 14, 1, 1),
    layer("resnet5_1a", "resnet", 1024, 512, 14, 1, 1),
    layer("resnet5_1b", "resnet", 2048, 512, 7, 1, 1),
    layer("resnet5_2", "resnet", 512, 512, 7, 3, 1),
    layer("resnet5_2/r", "resnet", 512, 512, 14, 3, 2),
    layer("resnet5_3", "resnet", 512, 2048, 7, 1, 1),
];

pub fn find_layer(name: &str) -> Option<LayerConfig> {
    LAYERS.iter().copied().find(|l| l.name == name)
}

/// Parses `C,K,H,W,R,S,O,P` with optional trailing `PADW,PADH`; padding
/// defaults to same-padding per direction.
pub fn parse_shape(text: &str, batch: usize) -> Result<ConvShape> {
    let values: Vec<usize> = text
        .split(',')
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Shape(format!("cannot parse {text:?} as comma-separated integers")))?;
    if values.len() != 8 && values.len() != 10 {
        return Err(Error::Shape(format!(
            "expected C,K,H,W,R,S,O,P[,PADW,PADH], got {} values",
            values.len()
        )));
    }
    let same = |f: usize| if f % 2 == 1 { (f - 1) / 2 } else { 0 };
    let shape = ConvShape {
        batch,
        in_channels: values[0],
        out_channels: values[1],
        height: values[2],
        width: values[3],
        filter_w: values[4],
        filter_h: values[5],
        stride_w: values[6],
        stride_h: values[7],
        pad_w: values.get(8).copied().unwrap_or(same(values[4])),
        pad_h: values.get(9).copied().unwrap_or(same(values[5])),
    };
    shape.validate()?;
    Ok(shape)
}

/// Plans `component`; for BWW `check_on` picks the checked operand.
pub fn plan_for(
    shape: &ConvShape,
    component: Component,
    check_on: CheckOn,
    lanes: usize,
    budget: usize,
) -> Result<KernelPlan> {
    let spec = VectorSpec::new(lanes)?;
    match component {
        Component::Bww => plan_bww(shape, check_on, spec, budget),
        _ => plan(shape, component, spec, budget),
    }
}

/// Operand with the higher measured sparsity; ties go to the input.
pub fn choose_check_on(input: &PlainTensor, output_grad: &PlainTensor) -> CheckOn {
    if measure_sparsity(output_grad) > measure_sparsity(input) {
        CheckOn::OutputGrad
    } else {
        CheckOn::Input
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub shape: ConvShape,
    pub component: Component,
    /// Sparsity of the zero-checked operand. The other operand is dense.
    pub sparsity: f64,
    pub lanes: usize,
    pub seed: u64,
    pub register_budget: usize,
    /// BWW only; `None` picks the sparser operand.
    pub check_on: Option<CheckOn>,
    /// Sparsity of the BWW operand that is not the main target; lets the
    /// automatic `check_on` choice see two sparse tensors.
    pub secondary_sparsity: f64,
}

impl ProblemSpec {
    pub fn new(shape: ConvShape, component: Component, sparsity: f64) -> Self {
        Self {
            shape,
            component,
            sparsity,
            lanes: VectorSpec::default().lanes(),
            seed: 0,
            register_budget: DEFAULT_REGISTER_BUDGET,
            check_on: None,
            secondary_sparsity: 0.0,
        }
    }
}

/// Generated operands in both plain and blocked form, plus the plan.
#[derive(Debug, Clone)]
pub struct Problem {
    pub shape: ConvShape,
    pub plan: KernelPlan,
    /// Plain operands in [`KernelInputs`] order.
    pub plain: (PlainTensor, PlainTensor),
    pub blocked: (BlockedTensor, BlockedTensor),
}

impl Problem {
    pub fn build(spec: &ProblemSpec) -> Result<Self> {
        let s = spec.shape;
        s.validate()?;
        s.check_channel_blocking(spec.lanes)?;
        let filter = || gen_sparse_stream(s.filter_dims(), 0.0, spec.seed, FILTER_STREAM);
        let (plain, check_on) = match spec.component {
            Component::Fwd => {
                let d = gen_sparse_stream(s.input_dims(), spec.sparsity, spec.seed, INPUT_STREAM);
                ((d, filter()), CheckOn::Input)
            }
            Component::Bwi => {
                let dy = gen_sparse_stream(s.output_dims(), spec.sparsity, spec.seed, OUTPUT_GRAD_STREAM);
                ((dy, filter()), CheckOn::OutputGrad)
            }
            Component::Bww => {
                let (d_sparsity, dy_sparsity) = match spec.check_on {
                    Some(CheckOn::OutputGrad) => (spec.secondary_sparsity, spec.sparsity),
                    _ => (spec.sparsity, spec.secondary_sparsity),
                };
                let d = gen_sparse_stream(s.input_dims(), d_sparsity, spec.seed, INPUT_STREAM);
                let dy = gen_sparse_stream(s.output_dims(), dy_sparsity, spec.seed, OUTPUT_GRAD_STREAM);
                let check_on = spec.check_on.unwrap_or_else(|| choose_check_on(&d, &dy));
                ((d, dy), check_on)
            }
        };
        let plan = plan_for(&s, spec.component, check_on, spec.lanes, spec.register_budget)?;
        Self::from_plain(s, plan, plain)
    }

    /// Packs caller-supplied operands for `plan`.
    pub fn from_plain(shape: ConvShape, plan: KernelPlan, plain: (PlainTensor, PlainTensor)) -> Result<Self> {
        let (first_layout, second_layout, _) = operand_layouts(&plan);
        let blocked = (
            pack(&plain.0, first_layout, plan.lanes)?,
            pack(&plain.1, second_layout, plan.lanes)?,
        );
        Ok(Self {
            shape,
            plan,
            plain,
            blocked,
        })
    }

    pub fn inputs(&self) -> KernelInputs<'_> {
        let (a, b) = (&self.blocked.0, &self.blocked.1);
        match self.plan.component {
            Component::Fwd => KernelInputs::Fwd { input: a, filter: b },
            Component::Bwi => KernelInputs::Bwi { output_grad: a, filter: b },
            Component::Bww => KernelInputs::Bww { input: a, output_grad: b },
        }
    }

    /// The zero-checked operand.
    pub fn checked(&self) -> &PlainTensor {
        match (self.plan.component, self.plan.check_on) {
            (Component::Bww, CheckOn::OutputGrad) => &self.plain.1,
            _ => &self.plain.0,
        }
    }

    pub fn run(&self, exec: &Executor, mode: Mode) -> Result<(BlockedTensor, KernelCounters)> {
        exec.run(self.inputs(), &self.shape, &self.plan, mode)
    }

    pub fn reference(&self) -> Result<PlainTensor> {
        let (a, b) = &self.plain;
        match self.plan.component {
            Component::Fwd => dense_fwd(a, b, &self.shape),
            Component::Bwi => dense_bwi(a, b, &self.shape),
            Component::Bww => dense_bww(a, b, &self.shape),
        }
    }

    pub fn expected_counts(&self) -> Result<FmaCountReport> {
        expected_fma_counts(&self.shape, &self.plan, self.checked())
    }

    /// Relabels the second operand with a wrong layout tag, leaving its
    /// storage untouched. The next run must fail with a layout error.
    pub fn corrupt_second_layout(&mut self) {
        let wrong = match self.blocked.1.layout() {
            Layout::KcrsBlocked => Layout::Nchwc,
            _ => Layout::KcrsBlocked,
        };
        self.blocked.1 = self.blocked.1.clone().with_layout_tag(wrong);
    }
}

/// Counters a kernel in `mode` must report for the launch described by
/// `report`. `ring_peak` is left at zero.
pub fn expected_counters(report: &FmaCountReport, mode: Mode) -> KernelCounters {
    match mode {
        Mode::Sparse => KernelCounters {
            checked_vectors: report.checked_vectors,
            nonzero_lanes: report.nonzero_elements,
            executed_vector_fmas: report.executed_vector_fmas,
            output_vector_loads: report.output_vector_loads,
            output_vector_stores: report.output_vector_stores,
            ring_peak: 0,
        },
        Mode::Dense => KernelCounters {
            checked_vectors: 0,
            nonzero_lanes: 0,
            executed_vector_fmas: report.dense_total,
            output_vector_loads: report.output_vector_loads,
            output_vector_stores: report.output_vector_stores,
            ring_peak: 0,
        },
    }
}

/// Equal in every additive field.
pub fn counters_match(actual: &KernelCounters, expected: &KernelCounters) -> bool {
    KernelCounters { ring_peak: 0, ..*actual } == KernelCounters { ring_peak: 0, ..*expected }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub max_rel_error: f64,
    pub counters: KernelCounters,
    pub expected: FmaCountReport,
    pub counters_match: bool,
    pub ring_within_budget: bool,
    pub output: PlainTensor,
    pub reference: PlainTensor,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE && self.counters_match && self.ring_within_budget
    }
}

pub fn verify(problem: &Problem, exec: &Executor, mode: Mode) -> Result<VerifyReport> {
    let (out, counters) = problem.run(exec, mode)?;
    let output = unpack(&out);
    let reference = problem.reference()?;
    let expected = problem.expected_counts()?;
    Ok(VerifyReport {
        max_rel_error: max_relative_error(output.data(), reference.data()),
        counters,
        counters_match: counters_match(&counters, &expected_counters(&expected, mode)),
        ring_within_budget: counters.ring_peak as usize <= problem.plan.ring_size,
        expected,
        output,
        reference,
    })
}

/// Side-by-side counter table; the flag is true when every row matches.
pub fn counter_rows(actual: &KernelCounters, report: &FmaCountReport, mode: Mode) -> (Vec<(&'static str, u64, u64)>, bool) {
    let expected = expected_counters(report, mode);
    let skipped = report.dense_total - actual.executed_vector_fmas.min(report.dense_total);
    let expected_skipped = report.dense_total - expected.executed_vector_fmas;
    let rows = vec![
        ("checked_vectors", actual.checked_vectors, expected.checked_vectors),
        ("nonzero_lanes", actual.nonzero_lanes, expected.nonzero_lanes),
        ("executed_vector_fmas", actual.executed_vector_fmas, expected.executed_vector_fmas),
        ("skipped_vector_fmas", skipped, expected_skipped),
        ("output_vector_loads", actual.output_vector_loads, expected.output_vector_loads),
        ("output_vector_stores", actual.output_vector_stores, expected.output_vector_stores),
    ];
    let ok = rows.iter().all(|&(_, a, e)| a == e);
    (rows, ok)
}

/// Median wall time in nanoseconds of `repeats` calls after
/// [`WARMUP_CALLS`] untimed ones.
pub fn median_ns<T>(repeats: usize, mut call: impl FnMut() -> T) -> f64 {
    for _ in 0..WARMUP_CALLS {
        std::hint::black_box(call());
    }
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(call());
            start.elapsed().as_nanos() as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

pub fn geomean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub layer: String,
    pub component: Component,
    pub sparsity: f64,
    pub mode: Mode,
    pub workers: usize,
    /// `None` on summary rows.
    pub median_ns: Option<f64>,
    pub exec_fmas: Option<u64>,
    pub speedup_vs_dense: f64,
    /// Dense-mode median on the same inputs; not part of the CSV.
    pub dense_ns: Option<f64>,
}

pub const SWEEP_HEADER: [&str; 8] = [
    "layer",
    "component",
    "sparsity",
    "mode",
    "workers",
    "median_ns",
    "exec_fmas",
    "speedup_vs_dense",
];

pub const CURVES_HEADER: [&str; 5] = ["layer", "component", "sparsity", "median_ns", "dense_ns"];

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub layers: Vec<(String, ConvShape)>,
    pub components: Vec<Component>,
    pub grid: Vec<f64>,
    pub modes: Vec<Mode>,
    pub lanes: usize,
    pub workers: usize,
    pub repeats: usize,
    pub seed: u64,
    pub check_on: Option<CheckOn>,
}

/// Times sparse and dense mode on identical inputs for every
/// `(layer, component, sparsity)` and returns one record per requested
/// mode. `progress` sees each record as it is produced.
pub fn sweep(config: &SweepConfig, mut progress: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    let exec = Executor::new(config.workers)?;
    let mut records = Vec::new();
    for (name, shape) in &config.layers {
        for &component in &config.components {
            for &sparsity in &config.grid {
                let problem = Problem::build(&ProblemSpec {
                    lanes: config.lanes,
                    seed: config.seed,
                    check_on: config.check_on,
                    ..ProblemSpec::new(*shape, component, sparsity)
                })?;
                let timed = |mode: Mode| -> Result<(f64, u64)> {
                    let (_, counters) = problem.run(&exec, mode)?;
                    let ns = median_ns(config.repeats, || problem.run(&exec, mode));
                    Ok((ns, counters.executed_vector_fmas))
                };
                let (dense_ns, dense_fmas) = timed(Mode::Dense)?;
                let sparse = if config.modes.contains(&Mode::Sparse) {
                    Some(timed(Mode::Sparse)?)
                } else {
                    None
                };
                for &mode in &config.modes {
                    let (ns, fmas) = match mode {
                        Mode::Sparse => sparse.expect("timed above"),
                        Mode::Dense => (dense_ns, dense_fmas),
                    };
                    let record = BenchRecord {
                        layer: name.clone(),
                        component,
                        sparsity,
                        mode,
                        workers: config.workers,
                        median_ns: Some(ns),
                        exec_fmas: Some(fmas),
                        speedup_vs_dense: if mode == Mode::Dense { 1.0 } else { dense_ns / ns },
                        dense_ns: Some(dense_ns),
                    };
                    progress(&record);
                    records.push(record);
                }
            }
        }
    }
    Ok(records)
}

/// One geometric-mean row per `(component, sparsity, mode)` across layers,
/// in first-appearance order.
pub fn summarize(records: &[BenchRecord]) -> Vec<BenchRecord> {
    let mut keys: Vec<(Component, u64, Mode, usize)> = Vec::new();
    for r in records {
        let key = (r.component, r.sparsity.to_bits(), r.mode, r.workers);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(component, bits, mode, workers)| {
            let speedups: Vec<f64> = records
                .iter()
                .filter(|r| (r.component, r.sparsity.to_bits(), r.mode, r.workers) == (component, bits, mode, workers))
                .map(|r| r.speedup_vs_dense)
                .collect();
            BenchRecord {
                layer: "geomean".into(),
                component,
                sparsity: f64::from_bits(bits),
                mode,
                workers,
                median_ns: None,
                exec_fmas: None,
                speedup_vs_dense: geomean(&speedups),
                dense_ns: None,
            }
        })
        .collect()
}

/// Writes the records followed by their summary rows.
pub fn write_sweep_csv(w: impl Write, records: &[BenchRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SWEEP_HEADER)?;
    for r in records.iter().chain(summarize(records).iter()) {
        out.write_record([
            r.layer.clone(),
            r.component.to_string(),
            r.sparsity.to_string(),
            r.mode.to_string(),
            r.workers.to_string(),
            r.median_ns.map(|v| format!("{v:.0}")).unwrap_or_default(),
            r.exec_fmas.map(|v| v.to_string()).unwrap_or_default(),
            format!("{:.4}", r.speedup_vs_dense),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Time-versus-sparsity curves from the sparse-mode records.
pub fn write_curves_csv(w: impl Write, records: &[BenchRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVES_HEADER)?;
    for r in records.iter().filter(|r| r.mode == Mode::Sparse) {
        let (Some(ns), Some(dense)) = (r.median_ns, r.dense_ns) else { continue };
        out.write_record([
            r.layer.clone(),
            r.component.to_string(),
            r.sparsity.to_string(),
            format!("{ns:.0}"),
            format!("{dense:.0}"),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Lowest sparsity at which the sparse kernel is at least as fast as the
/// dense one, interpolating linearly between grid points. `points` are
/// `(sparsity, speedup)` in ascending sparsity.
pub fn crossover_sparsity(points: &[(f64, f64)]) -> Option<f64> {
    let first = points.first()?;
    if first.1 >= 1.0 {
        return Some(first.0);
    }
    points.windows(2).find_map(|w| {
        let ((s0, v0), (s1, v1)) = (w[0], w[1]);
        (v0 < 1.0 && v1 >= 1.0).then(|| s0 + (1.0 - v0) / (v1 - v0) * (s1 - s0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_matches_the_layer_table() {
        assert_eq!(LAYERS.len(), 27);
        let r5_1b = find_layer("resnet5_1b").unwrap().shape;
        assert_eq!((r5_1b.in_channels, r5_1b.out_channels, r5_1b.height, r5_1b.width), (2048, 512, 7, 7));
        let strided = find_layer("resnet3_2/r").unwrap().shape;
        assert_eq!(strided.output_size().unwrap(), (28, 28));
        assert_eq!(find_layer("vgg3_1").unwrap().shape.output_size().unwrap(), (56, 56));
        let mut names: Vec<&str> = LAYERS.iter().map(|l| l.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 27);
        assert_eq!(LAYERS.iter().filter(|l| l.network == "vgg").count(), 8);
        for l in LAYERS {
            assert!(l.shape.validate().is_ok(), "{}", l.name);
            assert!(l.shape.check_channel_blocking(16).is_ok(), "{}", l.name);
        }
    }

    #[test]
    fn every_layer_plans_within_budget() {
        for l in LAYERS {
            for lanes in [4, 8, 16] {
                for component in Component::ALL {
                    for check_on in [CheckOn::Input, CheckOn::OutputGrad] {
                        let p = plan_for(&l.shape, component, check_on, lanes, 30).unwrap();
                        assert!(p.ring_size <= 30, "{} {component} V={lanes}", l.name);
                    }
                }
            }
        }
    }

    #[test]
    fn scaling_rounds_up() {
        let l = find_layer("resnet5_2").unwrap();
        let s = l.scaled(4, 2);
        assert_eq!((s.batch, s.height, s.width), (4, 4, 4));
        assert_eq!(l.scaled(16, 1), ConvShape { batch: 16, ..l.shape });
    }

    #[test]
    fn shape_parsing() {
        let s = parse_shape("16,32,8,8,3,3,2,2", 2).unwrap();
        assert_eq!((s.pad_w, s.pad_h, s.stride_w, s.batch), (1, 1, 2, 2));
        let s = parse_shape("16,32,8,8,3,3,1,1,0,0", 2).unwrap();
        assert_eq!(s.pad_w, 0);
        assert!(parse_shape("16,32,8", 2).is_err());
        assert!(parse_shape("a,b,c,d,e,f,g,h", 2).is_err());
    }

    #[test]
    fn geomean_and_summary() {
        assert!((geomean(&[1.0, 4.0]) - 2.0).abs() < 1e-12);
        assert!((geomean(&[2.0, 8.0, 4.0]) - 4.0).abs() < 1e-12);
        let rec = |layer: &str, s: f64, speedup: f64| BenchRecord {
            layer: layer.into(),
            component: Component::Fwd,
            sparsity: s,
            mode: Mode::Sparse,
            workers: 1,
            median_ns: Some(1.0),
            exec_fmas: Some(1),
            speedup_vs_dense: speedup,
            dense_ns: Some(1.0),
        };
        let records = vec![rec("a", 0.5, 1.0), rec("b", 0.5, 4.0), rec("a", 0.9, 3.0), rec("b", 0.9, 3.0)];
        let summary = summarize(&records);
        assert_eq!(summary.len(), 2);
        assert!((summary[0].speedup_vs_dense - 2.0).abs() < 1e-12);
        assert!((summary[1].speedup_vs_dense - 3.0).abs() < 1e-12);
        assert_eq!(summary[0].layer, "geomean");

        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("layer,component,sparsity,mode,workers,median_ns,exec_fmas,speedup_vs_dense\n"));
        assert!(text.contains("geomean,fwd,0.5,sparse,1,,,2.0000"));
    }

    #[test]
    fn crossover_interpolates() {
        assert_eq!(crossover_sparsity(&[(0.0, 1.1), (0.1, 1.2)]), Some(0.0));
        let s = crossover_sparsity(&[(0.0, 0.9), (0.1, 0.95), (0.2, 1.05)]).unwrap();
        assert!((s - 0.15).abs() < 1e-12);
        assert_eq!(crossover_sparsity(&[(0.0, 0.5), (0.5, 0.9)]), None);
    }

    #[test]
    fn median_uses_the_middle_call() {
        let mut calls = 0;
        let _ = median_ns(5, || calls += 1);
        assert_eq!(calls, 5 + WARMUP_CALLS);
    }

    #[test]
    fn bww_check_on_follows_the_sparser_operand() {
        let shape = ConvShape::same(4, 16, 16, 6, 6, 3, 1);
        let mut spec = ProblemSpec::new(shape, Component::Bww, 0.2);
        spec.lanes = 4;
        spec.secondary_sparsity = 0.6;
        assert_eq!(Problem::build(&spec).unwrap().plan.check_on, CheckOn::OutputGrad);
        spec.secondary_sparsity = 0.0;
        assert_eq!(Problem::build(&spec).unwrap().plan.check_on, CheckOn::Input);
    }

    #[test]
    fn corrupted_layout_is_rejected() {
        let shape = ConvShape::same(2, 16, 16, 6, 6, 3, 1);
        let mut spec = ProblemSpec::new(shape, Component::Fwd, 0.5);
        spec.lanes = 8;
        let mut problem = Problem::build(&spec).unwrap();
        let exec = Executor::new(1).unwrap();
        assert!(verify(&problem, &exec, Mode::Sparse).unwrap().passed());
        problem.corrupt_second_layout();
        assert!(matches!(problem.run(&exec, Mode::Sparse), Err(Error::LayoutMismatch { .. })));
    }
}
