//! Run directories, assertions and the machine-readable summary.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// One checked claim of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    /// Measured value; absent for yes/no checks.
    pub value: Option<f64>,
    /// Bound the value was compared against.
    pub bound: Option<f64>,
    pub detail: String,
}

impl Assertion {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= bound,
            value: Some(value),
            bound: Some(bound),
            detail: detail.into(),
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value >= bound,
            value: Some(value),
            bound: Some(bound),
            detail: detail.into(),
        }
    }

    /// Strict `value > bound`.
    pub fn above(name: impl Into<String>, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self {
            passed: value > bound,
            ..Self::at_least(name, value, bound, detail)
        }
    }

    /// Strict `value < bound`.
    pub fn below(name: impl Into<String>, value: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self {
            passed: value < bound,
            ..Self::at_most(name, value, bound, detail)
        }
    }

    pub fn holds(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            value: None,
            bound: None,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        match (self.value, self.bound) {
            (Some(v), Some(b)) => format!("{verdict} {}: {v:.6e} vs bound {b:.6e} ({})", self.name, self.detail),
            _ => format!("{verdict} {}: {}", self.name, self.detail),
        }
    }
}

/// What an experiment produced besides its files.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Outcome {
    pub assertions: Vec<Assertion>,
    pub metrics: BTreeMap<String, Value>,
    pub notes: Vec<String>,
}

impl Outcome {
    pub fn check(&mut self, a: Assertion) {
        self.assertions.push(a);
    }

    pub fn metric(&mut self, name: &str, value: impl Serialize) {
        self.metrics.insert(name.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub metrics: BTreeMap<String, Value>,
    pub notes: Vec<String>,
    pub files: Vec<String>,
}

/// An output directory; remembers every file written through it.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn register(&mut self, name: &str) -> Result<PathBuf> {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.register(name)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
        let path = self.register(name)?;
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(csv::Writer::from_writer(BufWriter::new(file)))
    }

    /// A raw file handle for writers that produce their own CSV.
    pub fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.register(name)?;
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }
}
