//! Synthetic sparse data, ReLU and per-layer sparsity profiles.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::PlainTensor;

/// Deterministic RNG for one tensor. Distinct `stream`s under the same seed
/// give independent sequences.
pub fn tensor_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn relu(t: &PlainTensor) -> PlainTensor {
    map(t, |x| if x > 0.0 { x } else { 0.0 })
}

/// Gradient through a ReLU: `upstream` where `pre_activation > 0`, else 0.
pub fn relu_grad_mask(pre_activation: &PlainTensor, upstream: &PlainTensor) -> Result<PlainTensor> {
    upstream.require_dims("upstream gradient", pre_activation.dims())?;
    let data = pre_activation
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    PlainTensor::from_vec(pre_activation.dims(), data)
}

fn map(t: &PlainTensor, f: impl Fn(f32) -> f32) -> PlainTensor {
    PlainTensor::from_vec(t.dims(), t.data().iter().map(|&x| f(x)).collect())
        .expect("same dims")
}

/// Each element is zero with probability `sparsity`, otherwise uniform in
/// `[0.1, 1.0]`.
pub fn gen_sparse(dims: [usize; 4], sparsity: f64, seed: u64) -> PlainTensor {
    gen_sparse_stream(dims, sparsity, seed, 0)
}

pub fn gen_sparse_stream(dims: [usize; 4], sparsity: f64, seed: u64, stream: u64) -> PlainTensor {
    let sparsity = sparsity.clamp(0.0, 1.0);
    let mut rng = tensor_rng(seed, stream);
    let len = dims.iter().product();
    let data = (0..len)
        .map(|_| {
            if rng.gen::<f64>() < sparsity {
                0.0
            } else {
                rng.gen_range(0.1f32..=1.0)
            }
        })
        .collect();
    PlainTensor::from_vec(dims, data).expect("length from dims")
}

/// Standard-normal pre-activations passed through ReLU.
pub fn gen_gaussian_relu(dims: [usize; 4], seed: u64, stream: u64) -> PlainTensor {
    relu(&gen_gaussian(dims, seed, stream))
}

pub fn gen_gaussian(dims: [usize; 4], seed: u64, stream: u64) -> PlainTensor {
    let mut rng = tensor_rng(seed, stream);
    let len = dims.iter().product();
    let data = (0..len).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    PlainTensor::from_vec(dims, data).expect("length from dims")
}

/// Uniform values in `[-1, 1)`.
pub fn gen_signed(dims: [usize; 4], seed: u64, stream: u64) -> PlainTensor {
    let mut rng = tensor_rng(seed, stream);
    let len = dims.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    PlainTensor::from_vec(dims, data).expect("length from dims")
}

/// Fraction of elements that are exactly zero.
pub fn measure_sparsity(t: &PlainTensor) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    let zeros = t.data().iter().filter(|&&x| x == 0.0).count();
    zeros as f64 / t.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SparsitySource {
    Activation,
    OutputGrad,
}

impl SparsitySource {
    pub fn tag(self) -> &'static str {
        match self {
            SparsitySource::Activation => "activation",
            SparsitySource::OutputGrad => "output_grad",
        }
    }
}

impl fmt::Display for SparsitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SparsitySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "activation" => Ok(SparsitySource::Activation),
            "output_grad" => Ok(SparsitySource::OutputGrad),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub layer: String,
    pub epoch: u32,
    pub source: SparsitySource,
    pub sparsity: f64,
}

/// Measured sparsity per layer, epoch and source for one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsityProfile {
    pub network: String,
    pub entries: Vec<ProfileEntry>,
}

pub const PROFILE_HEADER: [&str; 5] = ["network", "layer", "epoch", "source", "sparsity"];

impl SparsityProfile {
    pub fn get(&self, layer: &str, epoch: u32, source: SparsitySource) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.epoch == epoch && e.source == source)
            .map(|e| e.sparsity)
    }

    /// Layer names in first-appearance order.
    pub fn layers(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.layer.as_str()))
            .map(|e| e.layer.clone())
            .collect()
    }

    /// Sorted distinct epochs.
    pub fn epochs(&self) -> Vec<u32> {
        let mut epochs: Vec<u32> = self.entries.iter().map(|e| e.epoch).collect();
        epochs.sort_unstable();
        epochs.dedup();
        epochs
    }

    pub fn to_csv(&self) -> String {
        let mut out = PROFILE_HEADER.join(",");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.network, e.layer, e.epoch, e.source, e.sparsity
            ));
        }
        out
    }
}

pub fn load_profile(path: &Path) -> Result<SparsityProfile> {
    let file = std::fs::File::open(path)?;
    parse_profile(file, path)
}

/// Parses `network,layer,epoch,source,sparsity` rows after a mandatory
/// header. `origin` only labels error messages.
pub fn parse_profile(reader: impl Read, origin: &Path) -> Result<SparsityProfile> {
    let err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(origin),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != PROFILE_HEADER {
        return Err(err(1, format!("expected header {}", PROFILE_HEADER.join(","))));
    }

    let mut profile = SparsityProfile::default();
    let mut keys = HashSet::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != 5 {
            return Err(err(line, format!("expected 5 fields, found {}", record.len())));
        }
        let network = &record[0];
        if profile.entries.is_empty() {
            profile.network = network.to_owned();
        } else if profile.network != network {
            return Err(err(
                line,
                format!("network {network:?} differs from {:?}", profile.network),
            ));
        }
        let epoch = record[2]
            .parse::<u32>()
            .map_err(|_| err(line, format!("bad epoch {:?}", &record[2])))?;
        let source = record[3].parse::<SparsitySource>().map_err(|m| err(line, m))?;
        let sparsity = record[4]
            .parse::<f64>()
            .map_err(|_| err(line, format!("bad sparsity {:?}", &record[4])))?;
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(err(line, format!("sparsity {sparsity} outside [0, 1]")));
        }
        let layer = record[1].to_owned();
        if !keys.insert((layer.clone(), epoch, source)) {
            return Err(err(
                line,
                format!("duplicate entry for {layer}, epoch {epoch}, {source}"),
            ));
        }
        profile.entries.push(ProfileEntry {
            layer,
            epoch,
            source,
            sparsity,
        });
    }
    Ok(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(values: &[f32]) -> PlainTensor {
        PlainTensor::from_vec([1, 1, 1, values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[-1.0, 0.0, 3.0])).data(), &[0.0, 0.0, 3.0]);
        assert!(relu(&t(&[-1.0, -2.0, -1e-9])).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn relu_of_normal_is_half_sparse() {
        let r = gen_gaussian_relu([1, 1, 1, 100_000], 7, 0);
        let s = measure_sparsity(&r);
        assert!((s - 0.5).abs() < 0.02, "sparsity {s}");
    }

    #[test]
    fn relu_grad_mask_examples() {
        let g = relu_grad_mask(&t(&[-1.0, 2.0, 0.0]), &t(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0, 0.0]);
        let up = t(&[1.0, -2.0, 3.0]);
        assert_eq!(relu_grad_mask(&t(&[1.0, 1.0, 1.0]), &up).unwrap(), up);
        assert!(relu_grad_mask(&t(&[1.0]), &up).is_err());
    }

    #[test]
    fn relu_grad_mask_on_random_input_matches_direct_masking() {
        let pre = gen_gaussian([2, 3, 4, 5], 1, 0);
        let up = gen_sparse_stream([2, 3, 4, 5], 0.3, 1, 1);
        let g = relu_grad_mask(&pre, &up).unwrap();
        for ((&x, &u), &out) in pre.data().iter().zip(up.data()).zip(g.data()) {
            assert_eq!(out, if x > 0.0 { u } else { 0.0 });
        }
        assert!(measure_sparsity(&g) >= measure_sparsity(&up));
    }

    #[test]
    fn gen_sparse_extremes_and_concentration() {
        let dims = [1, 1, 100, 1000];
        assert_eq!(measure_sparsity(&gen_sparse(dims, 1.0, 0)), 1.0);
        assert_eq!(measure_sparsity(&gen_sparse(dims, 0.0, 0)), 0.0);
        let s = measure_sparsity(&gen_sparse(dims, 0.8, 9));
        assert!((s - 0.8).abs() < 0.01, "{s}");
        let s = measure_sparsity(&gen_sparse(dims, 0.3, 10));
        assert!((s - 0.3).abs() < 0.01, "{s}");
        assert_eq!(gen_sparse(dims, 0.5, 4), gen_sparse(dims, 0.5, 4));
        assert_ne!(gen_sparse(dims, 0.5, 4), gen_sparse(dims, 0.5, 5));
    }

    #[test]
    fn measure_examples() {
        assert_eq!(measure_sparsity(&t(&[0.0, 0.0, 1.0, 2.0])), 0.5);
        assert_eq!(measure_sparsity(&t(&[0.0, -0.0])), 1.0);
    }

    #[test]
    fn profile_parsing() {
        let origin = Path::new("profile.csv");
        let empty = parse_profile("network,layer,epoch,source,sparsity\n".as_bytes(), origin).unwrap();
        assert!(empty.entries.is_empty());

        let one = parse_profile(
            "network,layer,epoch,source,sparsity\nresnet50,resnet3_2,17,activation,0.63\n".as_bytes(),
            origin,
        )
        .unwrap();
        assert_eq!(one.network, "resnet50");
        assert_eq!(one.get("resnet3_2", 17, SparsitySource::Activation), Some(0.63));

        let bad = parse_profile(
            "network,layer,epoch,source,sparsity\nnet,a,0,activation,0.5\nnet,b,0,activation,1.2\n".as_bytes(),
            origin,
        )
        .unwrap_err();
        assert!(matches!(bad, Error::Parse { line: 3, .. }), "{bad}");

        let dup = parse_profile(
            "network,layer,epoch,source,sparsity\nnet,a,0,activation,0.5\nnet,a,0,activation,0.6\n".as_bytes(),
            origin,
        );
        assert!(matches!(dup, Err(Error::Parse { line: 3, .. })));

        let no_header = parse_profile("net,a,0,activation,0.5\n".as_bytes(), origin);
        assert!(matches!(no_header, Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn profile_csv_round_trip() {
        let p = SparsityProfile {
            network: "vgg16".into(),
            entries: vec![
                ProfileEntry { layer: "vgg3_1".into(), epoch: 0, source: SparsitySource::Activation, sparsity: 0.5 },
                ProfileEntry { layer: "vgg3_1".into(), epoch: 0, source: SparsitySource::OutputGrad, sparsity: 0.75 },
            ],
        };
        let back = parse_profile(p.to_csv().as_bytes(), Path::new("x")).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.layers(), vec!["vgg3_1".to_string()]);
        assert_eq!(back.epochs(), vec![0]);
    }

    proptest! {
        #[test]
        fn relu_is_idempotent_and_only_adds_zeros(seed in any::<u64>(), n in 1usize..200) {
            let x = gen_signed([1, 1, 1, n], seed, 3);
            let once = relu(&x);
            prop_assert_eq!(relu(&once), once.clone());
            prop_assert!(measure_sparsity(&once) >= measure_sparsity(&x));
        }

        #[test]
        fn generated_non_zeros_stay_away_from_zero(seed in any::<u64>(), s in 0.0f64..1.0) {
            let x = gen_sparse([1, 1, 1, 256], s, seed);
            prop_assert!(x.data().iter().all(|&v| v == 0.0 || (0.1..=1.0).contains(&v)));
        }
    }
}
