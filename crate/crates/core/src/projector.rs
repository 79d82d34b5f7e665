//! Training-time projection from measured time-versus-sparsity curves and a
//! sparsity profile.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::plan::Component;
use crate::sparsity::{SparsityProfile, SparsitySource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchNormMode {
    /// Normalization between conv and ReLU: the output gradient is dense.
    BatchNorm,
    None,
}

impl FromStr for BatchNormMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "on" | "batchnorm" => Ok(BatchNormMode::BatchNorm),
            "off" | "none" => Ok(BatchNormMode::None),
            other => Err(format!("unknown batchnorm mode {other:?} (expected on or off)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectiveSparsity {
    Sparse(f64),
    /// Run the dense baseline.
    Dense,
}

/// Sparsity a component sees for `layer` at `epoch`.
pub fn component_sparsity(
    profile: &SparsityProfile,
    layer: &str,
    epoch: u32,
    component: Component,
    batchnorm: BatchNormMode,
) -> Result<EffectiveSparsity> {
    let lookup = |source: SparsitySource| {
        profile
            .get(layer, epoch, source)
            .ok_or_else(|| Error::Coverage(vec![format!("profile {layer} epoch {epoch} {source}")]))
    };
    Ok(match (component, batchnorm) {
        (Component::Fwd, _) | (Component::Bww, BatchNormMode::BatchNorm) => {
            EffectiveSparsity::Sparse(lookup(SparsitySource::Activation)?)
        }
        (Component::Bwi, BatchNormMode::BatchNorm) => EffectiveSparsity::Dense,
        (Component::Bwi, BatchNormMode::None) => EffectiveSparsity::Sparse(lookup(SparsitySource::OutputGrad)?),
        (Component::Bww, BatchNormMode::None) => {
            let d = lookup(SparsitySource::Activation)?;
            let dy = lookup(SparsitySource::OutputGrad)?;
            EffectiveSparsity::Sparse(d.max(dy))
        }
    })
}

/// Sparse-mode time as a function of sparsity for one `(layer, component)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeCurve {
    pub layer: String,
    pub component: Component,
    /// `(sparsity, ns)`, strictly increasing in sparsity.
    points: Vec<(f64, f64)>,
    pub dense_ns: f64,
}

impl TimeCurve {
    pub fn new(layer: impl Into<String>, component: Component, points: Vec<(f64, f64)>, dense_ns: f64) -> Result<Self> {
        let layer = layer.into();
        let bad = |why: &str| Error::Shape(format!("time curve {layer} {component}: {why}"));
        if points.len() < 2 {
            return Err(bad("needs at least two points"));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(bad("sparsity points must be strictly increasing"));
        }
        if points.iter().any(|&(s, t)| !s.is_finite() || !(t > 0.0 && t.is_finite())) || !(dense_ns > 0.0) {
            return Err(bad("times must be positive"));
        }
        Ok(Self {
            layer,
            component,
            points,
            dense_ns,
        })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Linear interpolation, clamped to the end points.
    pub fn at(&self, sparsity: f64) -> f64 {
        let (lo, hi) = (self.points[0], self.points[self.points.len() - 1]);
        if sparsity < lo.0 || sparsity > hi.0 {
            log::warn!(
                "sparsity {sparsity} outside the measured range [{}, {}] of {} {}; clamping",
                lo.0,
                hi.0,
                self.layer,
                self.component
            );
            return if sparsity < lo.0 { lo.1 } else { hi.1 };
        }
        let i = self.points.partition_point(|p| p.0 <= sparsity).clamp(1, self.points.len() - 1);
        let ((s0, t0), (s1, t1)) = (self.points[i - 1], self.points[i]);
        t0 + (sparsity - s0) / (s1 - s0) * (t1 - t0)
    }

    pub fn time(&self, sparsity: EffectiveSparsity) -> f64 {
        match sparsity {
            EffectiveSparsity::Sparse(s) => self.at(s),
            EffectiveSparsity::Dense => self.dense_ns,
        }
    }
}

pub fn load_curves(path: &Path) -> Result<Vec<TimeCurve>> {
    parse_curves(std::fs::File::open(path)?, path)
}

/// Reads `layer,component,sparsity,median_ns,dense_ns` rows. Rows are
/// grouped by `(layer, component)`; a curve's dense time is the mean of its
/// rows' `dense_ns`.
pub fn parse_curves(reader: impl Read, origin: &Path) -> Result<Vec<TimeCurve>> {
    let err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(origin),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != crate::harness::CURVES_HEADER {
        return Err(err(1, format!("expected header {}", crate::harness::CURVES_HEADER.join(","))));
    }
    let mut order: Vec<(String, Component)> = Vec::new();
    let mut rows: HashMap<(String, Component), (Vec<(f64, f64)>, Vec<f64>)> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != 5 {
            return Err(err(line, format!("expected 5 fields, found {}", record.len())));
        }
        let component: Component = record[1].parse().map_err(|e| err(line, e))?;
        let number = |idx: usize, name: &str| {
            record[idx]
                .parse::<f64>()
                .map_err(|_| err(line, format!("{name} {:?} is not a number", &record[idx])))
        };
        let (s, t, dense) = (number(2, "sparsity")?, number(3, "median_ns")?, number(4, "dense_ns")?);
        let key = (record[0].to_string(), component);
        let entry = rows.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Default::default()
        });
        entry.0.push((s, t));
        entry.1.push(dense);
    }
    order
        .into_iter()
        .map(|key| {
            let (mut points, dense) = rows.remove(&key).expect("grouped above");
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let dense_ns = dense.iter().sum::<f64>() / dense.len() as f64;
            TimeCurve::new(key.0, key.1, points, dense_ns)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    pub network: String,
    pub batchnorm: BatchNormMode,
    /// Per-iteration cost of the network's first layer, excluded from the
    /// curves and identical in both totals.
    pub first_layer_ns: f64,
    /// Use only the first `epochs` profiled epochs; `None` uses all.
    pub epochs: Option<usize>,
    pub iters_per_epoch: u64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            network: String::new(),
            batchnorm: BatchNormMode::None,
            first_layer_ns: 0.0,
            epochs: None,
            iters_per_epoch: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Totals {
    pub sparse_ns: f64,
    pub dense_ns: f64,
}

impl Totals {
    fn add(&mut self, sparse: f64, dense: f64) {
        self.sparse_ns += sparse;
        self.dense_ns += dense;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    pub network: String,
    pub epochs: Vec<u32>,
    /// FWD, BWI and BWW totals over all layers, epochs and iterations.
    pub components: [(Component, Totals); 3],
    pub first_layer_ns: f64,
    pub speedup_incl_first: f64,
    pub speedup_excl_first: f64,
}

impl ProjectionReport {
    pub fn conv_totals(&self) -> Totals {
        let mut t = Totals::default();
        for (_, c) in &self.components {
            t.add(c.sparse_ns, c.dense_ns);
        }
        t
    }

    /// `(label, sparse, dense, sparse / total dense incl. first layer)`
    /// rows for FWD, BWI, BWW and the first layer.
    pub fn breakdown(&self) -> Vec<(String, f64, f64, f64)> {
        let denominator = self.conv_totals().dense_ns + self.first_layer_ns;
        let mut rows: Vec<(String, f64, f64, f64)> = self
            .components
            .iter()
            .map(|(c, t)| (c.to_string(), t.sparse_ns, t.dense_ns, t.sparse_ns / denominator))
            .collect();
        rows.push((
            "first_layer".into(),
            self.first_layer_ns,
            self.first_layer_ns,
            self.first_layer_ns / denominator,
        ));
        rows
    }

    pub fn breakdown_csv(&self) -> String {
        let mut out = String::from("component,sparse_ns,dense_ns,normalized_to_dense\n");
        for (label, sparse, dense, normalized) in self.breakdown() {
            out.push_str(&format!("{label},{sparse},{dense},{normalized:.6}\n"));
        }
        out
    }
}

impl fmt::Display for ProjectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = if self.network.is_empty() { "network" } else { &self.network };
        writeln!(f, "{name}: {} epoch(s)", self.epochs.len())?;
        writeln!(f, "{:<12} {:>16} {:>16} {:>10}", "component", "sparse_ns", "dense_ns", "of dense")?;
        for (label, sparse, dense, normalized) in self.breakdown() {
            writeln!(f, "{label:<12} {sparse:>16.0} {dense:>16.0} {normalized:>10.4}")?;
        }
        writeln!(f, "speedup incl. first layer: {:.4}", self.speedup_incl_first)?;
        write!(f, "speedup excl. first layer: {:.4}", self.speedup_excl_first)
    }
}

/// Projects total conv-layer training time for every `(layer, component)`
/// in the profile. Missing curves or profile entries are collected and
/// reported together.
pub fn project(curves: &[TimeCurve], profile: &SparsityProfile, config: &ProjectionConfig) -> Result<ProjectionReport> {
    let by_key: HashMap<(&str, Component), &TimeCurve> =
        curves.iter().map(|c| ((c.layer.as_str(), c.component), c)).collect();
    let mut epochs = profile.epochs();
    if let Some(n) = config.epochs {
        epochs.truncate(n);
    }
    let mut layers = profile.layers();
    for c in curves {
        if !layers.contains(&c.layer) {
            layers.push(c.layer.clone());
        }
    }

    let mut missing = Vec::new();
    if epochs.is_empty() {
        missing.extend(layers.iter().map(|l| format!("profile {l} (no epochs)")));
        if layers.is_empty() {
            missing.push("profile (no entries)".into());
        }
    }
    let mut components = Component::ALL.map(|c| (c, Totals::default()));
    let iters = config.iters_per_epoch as f64;
    for &epoch in &epochs {
        for layer in &layers {
            for (component, totals) in components.iter_mut() {
                let curve = by_key.get(&(layer.as_str(), *component));
                if curve.is_none() && epoch == epochs[0] {
                    missing.push(format!("curve {layer} {component}"));
                }
                match component_sparsity(profile, layer, epoch, *component, config.batchnorm) {
                    Ok(s) => {
                        if let Some(curve) = curve {
                            totals.add(curve.time(s) * iters, curve.dense_ns * iters);
                        }
                    }
                    Err(Error::Coverage(m)) => {
                        for entry in m {
                            if !missing.contains(&entry) {
                                missing.push(entry);
                            }
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }

    let first_layer_ns = config.first_layer_ns * iters * epochs.len() as f64;
    let conv = components.iter().fold(Totals::default(), |mut t, (_, c)| {
        t.add(c.sparse_ns, c.dense_ns);
        t
    });
    Ok(ProjectionReport {
        network: config.network.clone(),
        epochs,
        components,
        first_layer_ns,
        speedup_incl_first: (conv.dense_ns + first_layer_ns) / (conv.sparse_ns + first_layer_ns),
        speedup_excl_first: conv.dense_ns / conv.sparse_ns,
    })
}
