//! Case files, load profiles, sidecar annotations, mappings and reports.
//!
//! Two case formats are read: the MATPOWER subset handled by [`matpower`]
//! and a native JSON document that mirrors [`Grid`] field by field. Only the
//! native format is written, so `parse_case(&write_case(g))` reproduces `g`
//! exactly.

mod matpower;

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::grid_model::{validate, BranchId, GenId, Grid};
use crate::reduction::BusMapping;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{entity}: {message}")]
    Semantic { entity: String, message: String },
    #[error("profile row {row}: {message}")]
    Profile { row: usize, message: String },
    #[error("profile is empty")]
    EmptyProfile,
    #[error("annotation row {row}: {message}")]
    Annotation { row: usize, message: String },
}

/// Parses a case, logging and discarding warnings.
pub fn parse_case(text: &str) -> Result<Grid, CaseError> {
    let (grid, warnings) = parse_case_with_warnings(text, "case")?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(grid)
}

/// Parses either format. `name` is used for MATPOWER input only; native
/// documents carry their own name. Validation failures are reported as
/// semantic errors naming the first offending entity.
pub fn parse_case_with_warnings(text: &str, name: &str) -> Result<(Grid, Vec<String>), CaseError> {
    let mut warnings = Vec::new();
    let grid = if text.trim_start().starts_with('{') {
        serde_json::from_str::<Grid>(text).map_err(|e| CaseError::Syntax {
            line: e.line(),
            message: e.to_string(),
        })?
    } else {
        matpower::parse(text, name, &mut warnings)?
    };
    let report = validate(&grid);
    if let Some(first) = report.violations.first() {
        return Err(CaseError::Semantic {
            entity: grid.name.clone(),
            message: first.to_string(),
        });
    }
    Ok((grid, warnings))
}

/// Native JSON document, newline terminated.
pub fn write_case(grid: &Grid) -> String {
    let mut text = serde_json::to_string_pretty(grid).expect("grid serializes");
    text.push('\n');
    text
}

/// Applies a sidecar CSV. The header selects the kind: `branch_id,length_km`
/// or `generator_id,is_conventional`.
pub fn apply_annotations(grid: &Grid, text: &str) -> Result<Grid, CaseError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CaseError::Annotation {
            row: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut grid = grid.clone();
    let branch_pos: HashMap<BranchId, usize> =
        grid.branches.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
    let gen_pos: HashMap<GenId, usize> =
        grid.generators.iter().enumerate().map(|(i, g)| (g.id, i)).collect();

    let kind = match header.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["branch_id", "length_km"] => 0,
        ["generator_id", "is_conventional"] => 1,
        _ => {
            return Err(CaseError::Annotation {
                row: 1,
                message: format!("unrecognized header `{}`", header.join(",")),
            })
        }
    };

    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let bad = |message: String| CaseError::Annotation { row, message };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", record.len())));
        }
        let id: u32 = record[0].parse().map_err(|_| bad(format!("bad id `{}`", &record[0])))?;
        if kind == 0 {
            let pos = *branch_pos
                .get(&BranchId(id))
                .ok_or_else(|| bad(format!("unknown branch {id}")))?;
            let length: f64 = record[1]
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| bad(format!("bad length `{}`", &record[1])))?;
            grid.branches[pos].length_km = Some(length);
        } else {
            let pos = *gen_pos
                .get(&GenId(id))
                .ok_or_else(|| bad(format!("unknown generator {id}")))?;
            let flag = match record[1].to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => return Err(bad(format!("bad flag `{other}`"))),
            };
            grid.generators[pos].is_conventional = flag;
        }
    }
    Ok(grid)
}

/// Hourly load scale factors applied to every load of a reference scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadProfile {
    pub name: String,
    pub scale_factors: Vec<f64>,
}

/// Largest factor accepted by [`parse_profile`].
pub const MAX_SCALE_FACTOR: f64 = 1.5;

/// One factor per line, or CSV rows whose last field is the factor. A
/// non-numeric first row is taken as a header; blank lines and `#`
/// comments are skipped. Row numbers in errors are 1-based file lines.
pub fn parse_profile(text: &str) -> Result<LoadProfile, CaseError> {
    let mut factors = Vec::new();
    let mut seen_row = false;
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line.rsplit(',').next().unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(f) if f.is_finite() && (0.0..=MAX_SCALE_FACTOR).contains(&f) => factors.push(f),
            Ok(f) => {
                return Err(CaseError::Profile {
                    row,
                    message: format!("factor {f} outside [0, {MAX_SCALE_FACTOR}]"),
                })
            }
            Err(_) if !seen_row && field.chars().any(|c| c.is_ascii_alphabetic()) && line.contains(',') => {
                // header
            }
            Err(_) => {
                return Err(CaseError::Profile {
                    row,
                    message: format!("not a number: `{field}`"),
                })
            }
        }
        seen_row = true;
    }
    if factors.is_empty() {
        return Err(CaseError::EmptyProfile);
    }
    Ok(LoadProfile {
        name: "profile".into(),
        scale_factors: factors,
    })
}

/// CSV `original_bus,retained_bus`, sorted by original bus.
pub fn write_mapping(mapping: &BusMapping) -> String {
    let mut out = String::from("original_bus,retained_bus\n");
    for (from, to) in mapping.iter() {
        out.push_str(&format!("{},{}\n", from.0, to.0));
    }
    out
}

pub fn parse_mapping(text: &str) -> Result<BusMapping, CaseError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut pairs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let bad = |message: String| CaseError::Annotation { row, message };
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", record.len())));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| bad(format!("bad bus id `{s}`")));
        pairs.push((parse(&record[0])?, parse(&record[1])?));
    }
    BusMapping::from_pairs(pairs.into_iter().map(|(a, b)| (crate::BusId(a), crate::BusId(b))))
        .map_err(|e| CaseError::Annotation {
            row: 0,
            message: e.to_string(),
        })
}

/// Pretty JSON; floats use the shortest round-trip representation, so a
/// zero error is written as `0.0`.
pub fn write_report<T: Serialize>(report: &T) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}
