//! Synthetic class-structured datasets and a plain-text feature format.
//!
//! Class centers are unit vectors in the first `signal_dim` input
//! coordinates, rejection-sampled to keep a minimum pairwise angle. Samples
//! are `center + spread · N(0, I)` over all `input_dim` coordinates and are
//! not normalized. The first `train_classes` centers form the training
//! split; the rest are held out as unseen test classes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::graph::dot;
use crate::nn::Tensor;

const CENTER_ATTEMPTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub total_classes: usize,
    pub train_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Leading coordinates that carry class information; zero means all.
    pub signal_dim: usize,
    pub cluster_spread: f64,
    pub min_angle_deg: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            total_classes: 128,
            train_classes: 64,
            samples_per_class: 40,
            input_dim: 64,
            signal_dim: 0,
            cluster_spread: 0.15,
            min_angle_deg: 30.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn effective_signal_dim(&self) -> usize {
        if self.signal_dim == 0 {
            self.input_dim
        } else {
            self.signal_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.train_classes == 0 || self.train_classes >= self.total_classes {
            bad.push(format!(
                "train_classes must be in 1..total_classes ({}), got {}",
                self.total_classes, self.train_classes
            ));
        }
        if self.samples_per_class == 0 {
            bad.push("samples_per_class must be positive".into());
        }
        if self.input_dim == 0 {
            bad.push("input_dim must be positive".into());
        }
        if self.signal_dim > self.input_dim {
            bad.push(format!(
                "signal_dim {} exceeds input_dim {}",
                self.signal_dim, self.input_dim
            ));
        }
        if !(self.cluster_spread >= 0.0) {
            bad.push("cluster_spread must be nonnegative".into());
        }
        if !(0.0..180.0).contains(&self.min_angle_deg) {
            bad.push("min_angle_deg must be in [0, 180)".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(bad.join("; ")))
        }
    }
}

/// Inputs with contiguous 0-based labels. `class_ids` records the global
/// class index (into the spec's center list) behind every local label.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub class_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::dim("Dataset", inputs.rows(), labels.len()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            inputs,
            labels,
            classes,
            class_ids: (0..classes).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Hex SHA-256 over labels and the raw little-endian input values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.labels {
            h.update((*l as u64).to_le_bytes());
        }
        for v in self.inputs.data() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Rows with the given indices, labels unchanged.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        idx.iter().for_each(|&i| data.extend_from_slice(self.inputs.row(i)));
        Ok(Dataset {
            inputs: Tensor::matrix(idx.len(), d, data)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            class_ids: self.class_ids.clone(),
        })
    }
}

fn random_centers(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let s = spec.effective_signal_dim();
    let max_cos = spec.min_angle_deg.to_radians().cos();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.total_classes);
    let mut attempts = 0;
    while centers.len() < spec.total_classes {
        attempts += 1;
        if attempts > CENTER_ATTEMPTS * spec.total_classes {
            return Err(Error::Spec(format!(
                "could not place {} centers {}° apart in {s} dims after {} attempts; \
                 use fewer classes, a smaller angle or a larger signal_dim",
                spec.total_classes,
                spec.min_angle_deg,
                attempts - 1
            )));
        }
        let mut v: Vec<f64> = (0..s).map(|_| rng.sample(StandardNormal)).collect();
        let n = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        if centers.iter().all(|c| dot(c, &v) <= max_cos) {
            v.resize(spec.input_dim, 0.0);
            centers.push(v);
        }
    }
    Ok(centers)
}

fn draw_samples(center: &[f64], count: usize, spread: f64, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    for _ in 0..count {
        out.extend(center.iter().map(|c| c + spread * rng.sample::<f64, _>(StandardNormal)));
    }
}

/// Class centers of a spec, in global class order.
pub fn class_centers(spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    random_centers(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

fn build_split(
    centers: &[Vec<f64>],
    global: &[usize],
    per_class: usize,
    spread: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let d = centers[0].len();
    let mut data = Vec::with_capacity(global.len() * per_class * d);
    let mut labels = Vec::with_capacity(global.len() * per_class);
    for (local, &c) in global.iter().enumerate() {
        draw_samples(&centers[c], per_class, spread, rng, &mut data);
        labels.extend(std::iter::repeat_n(local, per_class));
    }
    Ok(Dataset {
        inputs: Tensor::matrix(labels.len(), d, data)?,
        labels,
        classes: global.len(),
        class_ids: global.to_vec(),
    })
}

/// Class-disjoint `(train, unseen test)` pair.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = random_centers(spec, &mut rng)?;
    let train_ids: Vec<usize> = (0..spec.train_classes).collect();
    let test_ids: Vec<usize> = (spec.train_classes..spec.total_classes).collect();
    let train = build_split(
        &centers,
        &train_ids,
        spec.samples_per_class,
        spec.cluster_spread,
        &mut rng,
    )?;
    let test = build_split(
        &centers,
        &test_ids,
        spec.samples_per_class,
        spec.cluster_spread,
        &mut rng,
    )?;
    Ok((train, test))
}

/// For every `k`, a training set of `k` seeded-random training classes with
/// `⌊total_samples / k⌋` samples each. All sets share one sample pool per
/// class, so the same class contributes the same leading samples whatever
/// `k` is; the unseen test split is the one from [`make_synthetic`].
pub fn fixed_budget_split(spec: &SyntheticSpec, class_counts: &[usize], total_samples: usize) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if let Some(&k) = class_counts.iter().find(|&&k| k == 0 || k > spec.train_classes) {
        return Err(Error::Spec(format!(
            "class count {k} must be in 1..={} (available training classes)",
            spec.train_classes
        )));
    }
    let Some(&kmin) = class_counts.iter().min() else {
        return Ok(Vec::new());
    };
    let centers = class_centers(spec)?;
    let pool_size = total_samples / kmin;
    if pool_size == 0 {
        return Err(Error::Spec(format!(
            "total_samples {total_samples} is smaller than k = {kmin}"
        )));
    }
    let mut pool = Vec::with_capacity(spec.train_classes);
    for c in 0..spec.train_classes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15 ^ c as u64);
        let mut rows = Vec::with_capacity(pool_size * spec.input_dim);
        draw_samples(&centers[c], pool_size, spec.cluster_spread, &mut rng, &mut rows);
        pool.push(rows);
    }
    let d = spec.input_dim;
    class_counts
        .iter()
        .map(|&k| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(k as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            let mut ids: Vec<usize> = (0..spec.train_classes).collect();
            ids.shuffle(&mut rng);
            ids.truncate(k);
            ids.sort_unstable();
            let per = total_samples / k;
            let mut data = Vec::with_capacity(k * per * d);
            let mut labels = Vec::with_capacity(k * per);
            for (local, &c) in ids.iter().enumerate() {
                data.extend_from_slice(&pool[c][..per * d]);
                labels.extend(std::iter::repeat_n(local, per));
            }
            Ok(Dataset {
                inputs: Tensor::matrix(labels.len(), d, data)?,
                labels,
                classes: k,
                class_ids: ids,
            })
        })
        .collect()
}

/// Writes `# dim=<D> classes=<C>` followed by `label,v1,…,vD` rows with
/// 1-based labels.
pub fn write_feature_file(path: &Path, data: &Dataset) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# dim={} classes={}", data.dim(), data.classes);
    for i in 0..data.len() {
        let _ = write!(s, "{}", data.labels[i] + 1);
        for v in data.inputs.row(i) {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_feature_file(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_text(&text, &path.display().to_string())
}

fn header_field(header: &str, key: &str) -> Option<usize> {
    header
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key)?.strip_prefix('=')?.parse().ok())
}

pub fn parse_feature_text(text: &str, origin: &str) -> Result<Dataset> {
    let schema = |detail: String| Error::Schema {
        path: origin.to_string(),
        detail,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| schema("empty feature file".into()))?;
    let header = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| schema("first line must be `# dim=<D> classes=<C>`".into()))?;
    let dim = header_field(header, "dim").ok_or_else(|| schema("header lacks dim".into()))?;
    let classes = header_field(header, "classes").ok_or_else(|| schema("header lacks classes".into()))?;
    if dim == 0 {
        return Err(schema("dim must be positive".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines {
        let parse = |detail: String| Error::Parse {
            path: origin.to_string(),
            line: n + 1,
            detail,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(parse(format!(
                "expected label and {dim} values, found {} fields",
                fields.len()
            )));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| parse(format!("bad label `{}`", fields[0])))?;
        if label == 0 || label > classes {
            return Err(parse(format!("label {label} outside 1..={classes}")));
        }
        labels.push(label - 1);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| parse(format!("bad value `{f}`")))?;
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(schema("no data rows".into()));
    }
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(schema(format!(
            "labels not contiguous: class {} has no rows",
            missing + 1
        )));
    }
    Ok(Dataset {
        inputs: Tensor::matrix(labels.len(), dim, data)?,
        labels,
        classes,
        class_ids: (0..classes).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            total_classes: 4,
            train_classes: 2,
            samples_per_class: 5,
            input_dim: 6,
            signal_dim: 0,
            cluster_spread: 0.05,
            min_angle_deg: 30.0,
            seed: 1,
        }
    }

    #[test]
    fn splits_are_class_disjoint() {
        let (train, test) = make_synthetic(&small()).unwrap();
        assert!(train.class_ids.iter().all(|c| !test.class_ids.contains(c)));
        assert_eq!((train.len(), test.len()), (10, 10));
        assert_eq!(train.classes, 2);
    }

    #[test]
    fn zero_spread_reproduces_centers() {
        let spec = SyntheticSpec {
            cluster_spread: 0.0,
            ..small()
        };
        let centers = class_centers(&spec).unwrap();
        let (train, test) = make_synthetic(&spec).unwrap();
        for i in 0..train.len() {
            assert_eq!(train.inputs.row(i), &centers[train.class_ids[train.labels[i]]][..]);
        }
        for i in 0..test.len() {
            assert_eq!(test.inputs.row(i), &centers[test.class_ids[test.labels[i]]][..]);
        }
    }

    #[test]
    fn signal_subspace_is_respected() {
        let spec = SyntheticSpec {
            signal_dim: 3,
            cluster_spread: 0.0,
            ..small()
        };
        let (train, _) = make_synthetic(&spec).unwrap();
        assert!(train.inputs.row(0)[3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impossible_angle_is_reported() {
        let spec = SyntheticSpec {
            total_classes: 10,
            train_classes: 5,
            input_dim: 2,
            min_angle_deg: 100.0,
            ..small()
        };
        assert!(matches!(make_synthetic(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn fixed_budget_arithmetic() {
        let spec = SyntheticSpec {
            total_classes: 96,
            train_classes: 48,
            input_dim: 16,
            min_angle_deg: 20.0,
            ..small()
        };
        let sets = fixed_budget_split(&spec, &[12, 24, 48], 1200).unwrap();
        let per: Vec<usize> = sets.iter().map(|s| s.len() / s.classes).collect();
        assert_eq!(per, vec![100, 50, 25]);
        for (s, k) in sets.iter().zip([12, 24, 48]) {
            assert!(1200 - s.len() < k);
        }
        let mut all = sets[2].class_ids.clone();
        all.sort_unstable();
        assert_eq!(all, (0..48).collect::<Vec<_>>());
        assert!(fixed_budget_split(&spec, &[49], 1200).is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let (train, _) = make_synthetic(&small()).unwrap();
        write_feature_file(&path, &train).unwrap();
        let back = load_feature_file(&path).unwrap();
        assert_eq!(back.inputs, train.inputs);
        assert_eq!(back.labels, train.labels);
    }

    #[test]
    fn feature_file_errors() {
        let short = "# dim=3 classes=1\n1,0.1,0.2,0.3\n1,0.5,0.6\n";
        match parse_feature_text(short, "mem") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_feature_text("", "mem"), Err(Error::Schema { .. })));
        assert!(matches!(
            parse_feature_text("# dim=2 classes=1\n", "mem"),
            Err(Error::Schema { .. })
        ));
        assert!(matches!(
            parse_feature_text("# dim=1 classes=2\n1,0.5\n", "mem"),
            Err(Error::Schema { .. })
        ));
    }
}
