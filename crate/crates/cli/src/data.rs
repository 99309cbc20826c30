//! CSV ingestion into a design and response.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use poquim_core::simulation::CustomTerm;
use poquim_core::{DesignSpec, ModelSpec, OneWayLayout, TermKind};

use crate::config::{FixedConfig, RandomConfig};
use crate::error::{CliError, Result};

/// Raw table: header names and string cells, with the file line of each row.
pub struct Table {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let err = |message: String| CliError::Data {
            path: path.to_owned(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| err(e.to_string()))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| err(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if headers.iter().all(String::is_empty) {
            return Err(err("missing header row".into()));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| err(e.to_string()))?;
            let line = record.position().map_or(0, |p| p.line());
            rows.push((line, record.iter().map(str::to_owned).collect()));
        }
        if rows.is_empty() {
            return Err(err("no observations after the header".into()));
        }
        Ok(Self {
            path: path.to_owned(),
            headers,
            rows,
        })
    }

    fn error(&self, message: String) -> CliError {
        CliError::Data {
            path: self.path.clone(),
            message,
        }
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| self.error(format!("no column named '{name}' in the header")))
    }

    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|(line, cells)| {
                let cell = cells[c].as_str();
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(self.error(format!("line {line}, column '{name}': '{cell}' is not a finite number"))),
                }
            })
            .collect()
    }

    /// Level index of every row, numbered by first appearance.
    pub fn factor(&self, name: &str) -> Result<(Vec<usize>, Vec<String>)> {
        let c = self.column(name)?;
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut labels = Vec::new();
        let levels = self
            .rows
            .iter()
            .map(|(_, cells)| {
                let next = seen.len();
                *seen.entry(cells[c].as_str()).or_insert_with(|| {
                    labels.push(cells[c].clone());
                    next
                })
            })
            .collect();
        Ok((levels, labels))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }
}

/// Data bound to a model: the fitted spec plus what is needed to rebuild
/// a one-way layout.
pub struct Dataset {
    pub model: ModelSpec,
    pub factors: Vec<Vec<usize>>,
    pub levels: Vec<Vec<String>>,
}

pub fn build(table: &Table, response: &str, fixed: &FixedConfig, random: &[RandomConfig]) -> Result<Dataset> {
    let n = table.len();
    let y = table.numeric(response)?;
    let mut columns = Vec::new();
    let mut fixed_labels = Vec::new();
    if fixed.intercept {
        columns.push(vec![1.0; n]);
        fixed_labels.push("intercept".to_owned());
    }
    for name in &fixed.covariates {
        columns.push(table.numeric(name)?);
        fixed_labels.push(name.clone());
    }
    let x: Vec<Vec<f64>> = (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
    let mut terms = Vec::new();
    let mut factors = Vec::new();
    let mut level_names = Vec::new();
    for r in random {
        let (levels, labels) = table.factor(&r.factor)?;
        let weights = r.weight.as_deref().map(|w| table.numeric(w)).transpose()?;
        terms.push(CustomTerm {
            name: r.label(),
            levels: levels.clone(),
            weights,
        });
        factors.push(levels);
        level_names.push(labels);
    }
    let design = DesignSpec::Custom { x, fixed_labels, terms }.build()?;
    Ok(Dataset {
        model: ModelSpec::new(DVector::from_vec(y), Arc::new(design))?,
        factors,
        levels: level_names,
    })
}

impl Dataset {
    /// The balanced one-way layout behind an intercept-only model with a
    /// single indicator term, regrouped by level.
    pub fn one_way_layout(&self) -> Option<OneWayLayout> {
        let design = &self.model.design;
        let intercept_only = design.n_fixed() == 1 && design.x().iter().all(|&v| v == 1.0);
        if !intercept_only || design.n_terms() != 1 || design.term(0).kind != TermKind::Factor {
            return None;
        }
        let groups = &self.factors[0];
        let m = self.levels[0].len();
        let mut members: Vec<Vec<f64>> = vec![Vec::new(); m];
        for (i, &g) in groups.iter().enumerate() {
            members[g].push(self.model.y[i]);
        }
        let n = members[0].len();
        if members.iter().any(|g| g.len() != n) {
            return None;
        }
        OneWayLayout::new(m, n, members.concat()).ok()
    }
}
