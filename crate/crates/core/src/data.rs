//! Bags, datasets and cross-validation splits.
//!
//! Canonical file format: UTF-8 CSV with header `bag_id,label,f0,...,f{D-1}`,
//! one row per instance, `.` as decimal separator. Rows of a bag need not be
//! contiguous; bags keep the order of their first row.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// A weakly labelled set of instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    /// 0 or 1.
    pub label: u8,
    /// `N x D`, one row per instance.
    pub instances: Matrix,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }

    pub fn label_f64(&self) -> f64 {
        f64::from(self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub dim: usize,
    /// Where the data came from (file path, generator settings).
    pub provenance: String,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, provenance: impl Into<String>) -> Result<Self> {
        let dim = bags.first().map_or(0, Bag::dim);
        for b in &bags {
            if b.is_empty() {
                return Err(Error::Integrity(format!("bag {:?} has no instances", b.id)));
            }
            if b.dim() != dim {
                return Err(Error::Integrity(format!(
                    "bag {:?} has {} features, expected {dim}",
                    b.id,
                    b.dim()
                )));
            }
            if b.label > 1 {
                return Err(Error::Integrity(format!("bag {:?} has label {}", b.id, b.label)));
            }
        }
        Ok(Self {
            bags,
            dim,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.bags.iter().map(|b| b.label).collect()
    }

    pub fn num_positive(&self) -> usize {
        self.bags.iter().filter(|b| b.label == 1).count()
    }

    pub fn min_bag_size(&self) -> usize {
        self.bags.iter().map(Bag::len).min().unwrap_or(0)
    }

    pub fn num_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    /// Copies of the bags at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Vec<Bag> {
        indices.iter().map(|&i| self.bags[i].clone()).collect()
    }

    /// Requires at least one bag of each class.
    pub fn check_trainable(&self) -> Result<()> {
        let pos = self.num_positive();
        if pos == 0 || pos == self.len() {
            return Err(Error::config(format!(
                "dataset needs bags of both classes ({pos} positive of {})",
                self.len()
            )));
        }
        Ok(())
    }
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: msg.into(),
    }
}

/// Parses the canonical CSV format.
pub fn read_bags<R: Read>(reader: R, provenance: impl Into<String>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "bag_id" || &header[1] != "label" {
        return Err(parse_err(
            1,
            "header must be `bag_id,label,f0,...` with at least one feature",
        ));
    }
    let dim = header.len() - 2;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", dim + 2, record.len()),
            ));
        }
        let id = record[0].to_string();
        let label = match record[1].trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(parse_err(line, format!("label must be 0 or 1, got {other:?}"))),
        };
        let slot = match index.get(&id) {
            Some(&s) => {
                if labels[s] != label {
                    return Err(Error::Integrity(format!(
                        "bag {id:?} has rows with labels {} and {label} (line {line})",
                        labels[s]
                    )));
                }
                s
            }
            None => {
                index.insert(id.clone(), ids.len());
                ids.push(id);
                labels.push(label);
                rows.push(Vec::new());
                ids.len() - 1
            }
        };
        for (j, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("feature f{j} is not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature f{j} is not finite")));
            }
            rows[slot].push(v);
        }
    }
    let bags = ids
        .into_iter()
        .zip(labels)
        .zip(rows)
        .map(|((id, label), data)| {
            let n = data.len() / dim;
            Ok(Bag {
                id,
                label,
                instances: Matrix::new(n, dim, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(bags, provenance)
}

pub fn load_bags(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_bags(std::io::BufReader::new(file), path.display().to_string())
}

/// Writes the canonical CSV format. Values are written in their shortest
/// round-trip form, so reading the output back is bit-exact.
pub fn write_bags<W: Write>(writer: W, dataset: &Dataset) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    let mut header = vec!["bag_id".to_string(), "label".to_string()];
    header.extend((0..dataset.dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_io)?;
    let mut record: Vec<String> = Vec::with_capacity(dataset.dim + 2);
    for bag in &dataset.bags {
        for row in bag.instances.iter_rows() {
            record.clear();
            record.push(bag.id.clone());
            record.push(bag.label.to_string());
            record.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&record).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_bags(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let file = File::create(path)?;
    write_bags(std::io::BufWriter::new(file), dataset)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Per-feature z-scoring fitted on a set of bags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation over all instances; constant
    /// features keep unit scale.
    pub fn fit(bags: &[Bag]) -> Self {
        let dim = bags.first().map_or(0, Bag::dim);
        let mut mean = vec![0.0; dim];
        let mut count = 0usize;
        for b in bags {
            for row in b.instances.iter_rows() {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += x;
                }
                count += 1;
            }
        }
        let denom = count.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= denom);
        let mut var = vec![0.0; dim];
        for b in bags {
            for row in b.instances.iter_rows() {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / denom).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, bag: &Bag) -> Bag {
        let mut instances = bag.instances.clone();
        for r in 0..instances.rows() {
            for ((x, m), s) in instances.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Bag {
            id: bag.id.clone(),
            label: bag.label,
            instances,
        }
    }

    pub fn apply_all(&self, bags: &[Bag]) -> Vec<Bag> {
        bags.iter().map(|b| self.apply(b)).collect()
    }
}

/// Settings of the synthetic bag generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_bags: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub dim: usize,
    pub positive_fraction: f64,
    /// Distance of the witness mean from the background mean.
    pub separation: f64,
    /// Fraction of instances in a positive bag that are witnesses.
    pub witness_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_bags: 200,
            min_instances: 10,
            max_instances: 30,
            dim: 16,
            positive_fraction: 0.5,
            separation: 1.5,
            witness_rate: 0.1,
            seed: 0,
        }
    }
}

/// Generated dataset plus the hidden instance labels (for oracle tests).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub instance_labels: Vec<Vec<bool>>,
}

/// Generates bags following the standard MIL rule: a bag is positive iff it
/// contains at least one positive instance.
///
/// Background instances are `N(0, I)`. A positive bag of `N` instances has
/// `ceil(witness_rate * N)` of them replaced by draws from `N(s·u, I)`, with
/// `u` a random unit direction fixed per dataset.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    if !(spec.witness_rate > 0.0 && spec.witness_rate <= 1.0) {
        return Err(Error::config(format!(
            "witness rate must lie in (0, 1], got {}",
            spec.witness_rate
        )));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::config(format!(
            "separation must be finite and >= 0, got {}",
            spec.separation
        )));
    }
    if spec.min_instances == 0 || spec.min_instances > spec.max_instances || spec.dim == 0 {
        return Err(Error::config("need 1 <= min_instances <= max_instances and dim >= 1"));
    }
    if !(0.0..=1.0).contains(&spec.positive_fraction) {
        return Err(Error::config("positive fraction must lie in [0, 1]"));
    }
    let mut dir_rng = seed::stream(spec.seed, "synth.direction", &[]);
    let mut direction: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut dir_rng)).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    direction.iter_mut().for_each(|x| *x /= norm);

    let n_pos = (spec.positive_fraction * spec.n_bags as f64).round() as usize;
    let mut labels: Vec<u8> = (0..spec.n_bags).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut seed::stream(spec.seed, "synth.labels", &[]));

    let mut bags = Vec::with_capacity(spec.n_bags);
    let mut instance_labels = Vec::with_capacity(spec.n_bags);
    for (b, &label) in labels.iter().enumerate() {
        let mut rng = seed::stream(spec.seed, "synth.bag", &[b as u64]);
        let n = rng.random_range(spec.min_instances..=spec.max_instances);
        let mut data: Vec<f64> = (0..n * spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut witness = vec![false; n];
        if label == 1 {
            let count = ((spec.witness_rate * n as f64).ceil() as usize).clamp(1, n);
            for i in rand::seq::index::sample(&mut rng, n, count) {
                witness[i] = true;
                for (x, u) in data[i * spec.dim..(i + 1) * spec.dim].iter_mut().zip(&direction) {
                    *x += spec.separation * u;
                }
            }
        }
        bags.push(Bag {
            id: format!("synth-{b:04}"),
            label,
            instances: Matrix::new(n, spec.dim, data)?,
        });
        instance_labels.push(witness);
    }
    let provenance = format!(
        "synthetic(n_bags={}, instances={}..={}, dim={}, positive_fraction={}, separation={}, witness_rate={}, seed={})",
        spec.n_bags,
        spec.min_instances,
        spec.max_instances,
        spec.dim,
        spec.positive_fraction,
        spec.separation,
        spec.witness_rate,
        spec.seed
    );
    Ok(SynthDataset {
        dataset: Dataset::new(bags, provenance)?,
        instance_labels,
    })
}

/// Repeated stratified k-fold assignment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: usize,
    /// `assignments[repeat][fold]` = sorted held-out bag indices.
    pub assignments: Vec<Vec<Vec<usize>>>,
}

impl SplitPlan {
    pub fn repeats(&self) -> usize {
        self.assignments.len()
    }

    pub fn test_indices(&self, repeat: usize, fold: usize) -> &[usize] {
        &self.assignments[repeat][fold]
    }

    /// Every index not held out in `(repeat, fold)`, ascending.
    pub fn train_indices(&self, repeat: usize, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.assignments[repeat]
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Per repeat: shuffle each class with a repeat-specific seed, then deal
/// positives and then negatives round-robin into the folds.
pub fn kfold_splits(labels: &[u8], folds: usize, repeats: usize, seed: u64) -> Result<SplitPlan> {
    if folds < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {folds}")));
    }
    if repeats < 1 {
        return Err(Error::config("need at least 1 repeat"));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    let smallest = pos.len().min(neg.len());
    if folds > smallest {
        return Err(Error::config(format!(
            "{folds} folds need at least {folds} bags per class, smallest class has {smallest}"
        )));
    }
    let mut assignments = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let mut rng = seed::stream(seed, "splits", &[r as u64]);
        let mut p = pos.clone();
        let mut n = neg.clone();
        p.shuffle(&mut rng);
        n.shuffle(&mut rng);
        let mut buckets = vec![Vec::new(); folds];
        for (slot, i) in p.into_iter().chain(n).enumerate() {
            buckets[slot % folds].push(i);
        }
        for b in &mut buckets {
            b.sort_unstable();
        }
        assignments.push(buckets);
    }
    Ok(SplitPlan {
        seed,
        folds,
        assignments,
    })
}
