//! Turns a [`DataConfig`] into training/test inputs and targets.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use nalgebra::DVector;
use ntklab::data::{self, Dataset};
use ntklab::TargetSet;

use crate::config::DataConfig;

/// Dimension of the synthetic stand-in for digit images.
pub const IDX_FALLBACK_DIM: usize = 784;

#[derive(Debug, Clone)]
pub struct Inputs {
    pub train: Vec<DVector<f64>>,
    /// Class labels of the training points, when the source has them.
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub test: Vec<DVector<f64>>,
    /// Explicit target rows (CSV source only).
    pub targets: Option<TargetSet>,
    /// Set when the requested source was replaced by another one.
    pub substitution: Option<String>,
}

impl Inputs {
    pub fn dim(&self) -> usize {
        self.train.first().map_or(0, |p| p.len())
    }

    /// Targets over `classes` columns, label-smoothed by `eps` unless the
    /// source supplied explicit rows.
    pub fn targets(&self, eps: f64) -> Result<TargetSet> {
        if let Some(t) = &self.targets {
            return Ok(t.clone());
        }
        let labels = self.labels.as_ref().context("data source has neither labels nor targets")?;
        Ok(TargetSet::smoothed(labels, self.classes, eps)?)
    }

    fn from_split(ds: Dataset, n_train: usize, substitution: Option<String>) -> Self {
        let test = ds.points[n_train..].to_vec();
        Self {
            train: ds.points[..n_train].to_vec(),
            labels: Some(ds.labels[..n_train].to_vec()),
            classes: ds.classes,
            test,
            targets: None,
            substitution,
        }
    }
}

fn read_points(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut points = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        match rec.iter().map(str::parse::<f64>).collect::<Result<Vec<_>, _>>() {
            Ok(row) => points.push(DVector::from_vec(row)),
            Err(_) if line == 0 => continue,
            Err(e) => return Err(e).with_context(|| format!("{} row {}", path.display(), line + 1)),
        }
    }
    Ok(points)
}

pub fn load(cfg: &DataConfig) -> Result<Inputs> {
    let inputs = match cfg {
        DataConfig::Toy {
            n_train,
            classes,
            seed,
            test_grid,
        } => {
            let ds = data::toy_1d(*n_train, *classes, *seed)?;
            Inputs {
                train: ds.points,
                labels: Some(ds.labels),
                classes: ds.classes,
                test: data::grid_1d(test_grid.lo, test_grid.hi, test_grid.count),
                targets: None,
                substitution: None,
            }
        }
        DataConfig::Synthetic {
            n_train,
            n_test,
            dim,
            separation,
            seed,
        } => Inputs::from_split(data::synthetic_blobs(n_train + n_test, *dim, *separation, *seed)?, *n_train, None),
        DataConfig::Idx {
            images,
            labels,
            n_train,
            n_test,
            seed,
            fallback_separation,
        } => {
            let total = n_train + n_test;
            if images.is_file() && labels.is_file() {
                let ds = data::idx_parity(images, labels)?.balanced_subset(total.div_ceil(2), *seed)?;
                Inputs::from_split(ds, *n_train, None)
            } else {
                let note = format!(
                    "IDX files {} / {} not found; substituted synthetic two-class blobs (d = {IDX_FALLBACK_DIM}, separation {fallback_separation}, seed {seed})",
                    images.display(),
                    labels.display()
                );
                let ds = data::synthetic_blobs(total, IDX_FALLBACK_DIM, *fallback_separation, *seed)?;
                Inputs::from_split(ds, *n_train, Some(note))
            }
        }
        DataConfig::Inline {
            train,
            labels,
            classes,
            test,
        } => Inputs {
            train: train.iter().map(|r| DVector::from_column_slice(r)).collect(),
            labels: Some(labels.clone()),
            classes: *classes,
            test: test.iter().map(|r| DVector::from_column_slice(r)).collect(),
            targets: None,
            substitution: None,
        },
        DataConfig::Csv { train, targets, test } => {
            let t = TargetSet::from_csv(targets).with_context(|| format!("reading {}", targets.display()))?;
            let train = read_points(train)?;
            ensure!(t.len() == train.len(), "{} training points but {} target rows", train.len(), t.len());
            Inputs {
                train,
                labels: None,
                classes: t.columns(),
                test: read_points(test)?,
                targets: Some(t),
                substitution: None,
            }
        }
    };
    ensure!(!inputs.train.is_empty(), "no training points");
    let d = inputs.dim();
    ensure!(
        inputs.train.iter().chain(&inputs.test).all(|p| p.len() == d),
        "all inputs must have dimension {d}"
    );
    Ok(inputs)
}
