//! Synthetic datasets, class-sorted shard partitioning and mixed
//! main/out-of-distribution evaluation sets.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Sample { features, label }
    }
}

/// Labelled samples with a fixed feature dimension and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    num_classes: usize,
    dim: usize,
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(num_classes: usize, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::invalid("dataset needs at least one class and one feature"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {} but there are {num_classes} classes",
                    s.label
                )));
            }
            if s.features.len() != dim {
                return Err(Error::shape(format!(
                    "sample {i} has {} features, expected {dim}",
                    s.features.len()
                )));
            }
        }
        Ok(LabeledDataset {
            num_classes,
            dim,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Labels that occur at least once.
    pub fn label_set(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn subset(&self, indices: impl IntoIterator<Item = usize>) -> LabeledDataset {
        LabeledDataset {
            num_classes: self.num_classes,
            dim: self.dim,
            samples: indices.into_iter().map(|i| self.samples[i].clone()).collect(),
        }
    }

    /// Writes feature columns followed by a `label` column.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.features.iter().map(f64::to_string).collect();
            rec.push(s.label.to_string());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let dim = r.headers().map_err(|e| csv_err(path, e))?.len().saturating_sub(1);
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("{}: bad number {s:?}: {e}", path.display())))
            };
            let features = rec.iter().take(dim).map(parse).collect::<Result<Vec<_>>>()?;
            let label = rec
                .get(dim)
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::invalid(format!("{}: bad label", path.display())))?;
            samples.push(Sample::new(features, label));
        }
        LabeledDataset::new(num_classes, dim, samples)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("dataset.num_classes", "must be at least 2"));
        }
        if self.per_class < 1 {
            return Err(Error::config("dataset.per_class", "must be at least 1"));
        }
        if self.dim < 1 {
            return Err(Error::config("dataset.dim", "must be at least 1"));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(Error::config("dataset.spread", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Gaussian blobs: class `c` has a mean drawn once from `N(0, I)` and
/// samples `mean + spread * N(0, I)`. Train and test are drawn from
/// independent streams with exactly `per_class` samples per class each.
pub fn generate_synthetic(spec: &SyntheticSpec, master_seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut mean_rng = seed::rng(master_seed, &[stream::DATA_MEANS]);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dim).map(|_| StandardNormal.sample(&mut mean_rng)).collect())
        .collect();
    let draw = |tag: u64| {
        let mut rng = seed::rng(master_seed, &[tag]);
        let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..spec.per_class {
                let features = mean
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + spec.spread * z
                    })
                    .collect();
                samples.push(Sample::new(features, label));
            }
        }
        LabeledDataset::new(spec.num_classes, spec.dim, samples)
    };
    Ok((draw(stream::DATA_TRAIN)?, draw(stream::DATA_TEST)?))
}

/// Sorts `train` by label (ties by original index), cuts it into
/// `num_shards` equal contiguous shards, shuffles the shards and deals
/// `shards_per_client` to each of `num_clients` clients.
pub fn shard_partition(
    train: &LabeledDataset,
    num_shards: usize,
    num_clients: usize,
    shards_per_client: usize,
    master_seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if num_shards == 0 || num_clients == 0 || shards_per_client == 0 {
        return Err(Error::invalid("shard counts must be positive"));
    }
    if num_shards != num_clients * shards_per_client {
        return Err(Error::invalid(format!(
            "num_shards ({num_shards}) must equal clients ({num_clients}) x shards per client ({shards_per_client})"
        )));
    }
    if !train.len().is_multiple_of(num_shards) || train.is_empty() {
        return Err(Error::invalid(format!(
            "{num_shards} shards do not divide {} training samples",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| (train.samples[i].label, i));
    let shard_size = train.len() / num_shards;

    let mut shards: Vec<usize> = (0..num_shards).collect();
    shards.shuffle(&mut seed::rng(master_seed, &[stream::SHARDS]));

    Ok(shards
        .chunks(shards_per_client)
        .map(|dealt| {
            train.subset(
                dealt
                    .iter()
                    .flat_map(|&s| order[s * shard_size..(s + 1) * shard_size].iter().copied()),
            )
        })
        .collect())
}

/// A client's evaluation set: every test sample of its main classes plus
/// `round(rho * |main|)` samples drawn from the other classes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub main: LabeledDataset,
    pub ood: LabeledDataset,
    pub rho: f64,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.main.len() + self.ood.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn build_eval_set(
    main_classes: &BTreeSet<usize>,
    test: &LabeledDataset,
    rho: f64,
    seed: u64,
) -> Result<EvalSet> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::invalid(format!("rho must be finite and non-negative, got {rho}")));
    }
    let (main_idx, other_idx): (Vec<usize>, Vec<usize>) =
        (0..test.len()).partition(|&i| main_classes.contains(&test.samples[i].label));
    let required = (rho * main_idx.len() as f64).round() as usize;
    if required > other_idx.len() {
        return Err(Error::InsufficientSamples {
            required,
            available: other_idx.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, other_idx.len(), required)
        .into_iter()
        .map(|j| other_idx[j])
        .collect();
    picked.sort_unstable();
    Ok(EvalSet {
        main: test.subset(main_idx),
        ood: test.subset(picked),
        rho,
    })
}
