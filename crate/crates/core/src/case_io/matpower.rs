//! Reader for the subset of the MATPOWER case format used by public
//! transmission benchmarks.
//!
//! Supported: `mpc.baseMVA`, `mpc.bus`, `mpc.gen`, `mpc.branch` and
//! `mpc.gencost` (polynomial costs up to the linear term, two-point
//! piecewise-linear costs). Everything else is skipped with a warning.

use std::collections::{BTreeMap, HashMap};

use crate::grid_model::{
    Branch, BranchId, BranchKind, Bus, BusId, GenId, Generator, Grid, Load, LoadId,
};

use super::CaseError;

struct Table {
    /// Line number of each row.
    lines: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

struct RawCase {
    base_mva: Option<f64>,
    tables: BTreeMap<String, Table>,
}

fn strip_comment(line: &str) -> &str {
    // `%` inside quoted strings only occurs in cell arrays, which are skipped
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn parse_number(token: &str, line: usize) -> Result<f64, CaseError> {
    match token {
        "Inf" | "inf" | "+Inf" => Ok(f64::INFINITY),
        "-Inf" | "-inf" => Ok(f64::NEG_INFINITY),
        _ => token.parse::<f64>().map_err(|_| CaseError::Syntax {
            line,
            message: format!("expected a number, found `{token}`"),
        }),
    }
}

/// Appends the rows found in one line of matrix text. Rows end at `;` or at
/// the end of the line.
fn push_rows(text: &str, line: usize, table: &mut Table) -> Result<(), CaseError> {
    for chunk in text.split(';') {
        let row = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| parse_number(t, line))
            .collect::<Result<Vec<f64>, _>>()?;
        if !row.is_empty() {
            table.rows.push(row);
            table.lines.push(line);
        }
    }
    Ok(())
}

fn scan(text: &str, warnings: &mut Vec<String>) -> Result<RawCase, CaseError> {
    enum State {
        Top,
        Matrix { name: String, table: Table, start: usize },
        Cell { name: String, start: usize },
    }

    let mut raw = RawCase {
        base_mva: None,
        tables: BTreeMap::new(),
    };
    let mut state = State::Top;

    for (idx, full_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(full_line);
        state = match state {
            State::Top => {
                let trimmed = line.trim();
                let Some(rest) = trimmed.strip_prefix("mpc.") else {
                    continue;
                };
                let Some((name, rhs)) = rest.split_once('=') else {
                    return Err(CaseError::Syntax {
                        line: line_no,
                        message: "expected `=` after field name".into(),
                    });
                };
                let name = name.trim().to_string();
                let rhs = rhs.trim();
                if let Some(body) = rhs.strip_prefix('[') {
                    let mut table = Table {
                        lines: Vec::new(),
                        rows: Vec::new(),
                    };
                    match body.split_once(']') {
                        Some((inner, _)) => {
                            push_rows(inner, line_no, &mut table)?;
                            raw.tables.insert(name, table);
                            State::Top
                        }
                        None => {
                            push_rows(body, line_no, &mut table)?;
                            State::Matrix { name, table, start: line_no }
                        }
                    }
                } else if rhs.starts_with('{') {
                    if rhs.contains('}') {
                        warnings.push(format!("line {line_no}: ignoring field mpc.{name}"));
                        State::Top
                    } else {
                        State::Cell { name, start: line_no }
                    }
                } else if name == "baseMVA" {
                    let value = rhs.trim_end_matches(';').trim();
                    raw.base_mva = Some(parse_number(value, line_no)?);
                    State::Top
                } else {
                    if name != "version" {
                        warnings.push(format!("line {line_no}: ignoring field mpc.{name}"));
                    }
                    State::Top
                }
            }
            State::Matrix { name, mut table, start } => match line.split_once(']') {
                Some((inner, _)) => {
                    push_rows(inner, line_no, &mut table)?;
                    raw.tables.insert(name, table);
                    State::Top
                }
                None => {
                    push_rows(line, line_no, &mut table)?;
                    State::Matrix { name, table, start }
                }
            },
            State::Cell { name, start } => {
                if line.contains('}') {
                    warnings.push(format!("line {start}: ignoring field mpc.{name}"));
                    State::Top
                } else {
                    State::Cell { name, start }
                }
            }
        };
    }

    match state {
        State::Top => Ok(raw),
        State::Matrix { name, start, .. } | State::Cell { name, start } => Err(CaseError::Syntax {
            line: start,
            message: format!("unterminated value for mpc.{name}"),
        }),
    }
}

fn require<'a>(raw: &'a RawCase, name: &str) -> Result<&'a Table, CaseError> {
    raw.tables.get(name).ok_or_else(|| CaseError::Semantic {
        entity: format!("mpc.{name}"),
        message: "required table missing".into(),
    })
}

fn check_width(table: &Table, name: &str, width: usize) -> Result<(), CaseError> {
    for (row, line) in table.rows.iter().zip(&table.lines) {
        if row.len() < width {
            return Err(CaseError::Syntax {
                line: *line,
                message: format!("mpc.{name} row has {} columns, need at least {width}", row.len()),
            });
        }
    }
    Ok(())
}

fn as_id(value: f64, line: usize) -> Result<u32, CaseError> {
    if value.fract() != 0.0 || value < 0.0 || value > u32::MAX as f64 {
        return Err(CaseError::Syntax {
            line,
            message: format!("expected an integer id, found {value}"),
        });
    }
    Ok(value as u32)
}

/// Linear and constant cost coefficients from one gencost row.
fn cost_terms(row: &[f64], line: usize, gen: u32, warnings: &mut Vec<String>) -> Result<(f64, f64), CaseError> {
    let bad = |message: String| CaseError::Semantic {
        entity: format!("generator {gen}"),
        message,
    };
    if row.len() < 4 {
        return Err(CaseError::Syntax {
            line,
            message: "gencost row needs at least 4 columns".into(),
        });
    }
    let model = row[0] as i64;
    let n = row[3] as usize;
    let coeffs = &row[4..];
    match model {
        2 => {
            if coeffs.len() < n {
                return Err(CaseError::Syntax {
                    line,
                    message: format!("gencost row declares {n} coefficients, has {}", coeffs.len()),
                });
            }
            let c = &coeffs[..n];
            if c.len() > 2 && c[..c.len() - 2].iter().any(|&v| v != 0.0) {
                warnings.push(format!(
                    "line {line}: generator {gen}: ignoring higher-order cost terms"
                ));
            }
            let linear = if n >= 2 { c[n - 2] } else { 0.0 };
            let constant = if n >= 1 { c[n - 1] } else { 0.0 };
            Ok((linear, constant))
        }
        1 => {
            if n != 2 || coeffs.len() < 4 {
                return Err(bad("piecewise-linear costs with more than one segment are not supported".into()));
            }
            let (p0, f0, p1, f1) = (coeffs[0], coeffs[1], coeffs[2], coeffs[3]);
            if p1 == p0 {
                return Err(bad("degenerate piecewise-linear cost".into()));
            }
            let slope = (f1 - f0) / (p1 - p0);
            Ok((slope, f0 - slope * p0))
        }
        other => Err(bad(format!("unknown cost model {other}"))),
    }
}

pub(super) fn parse(text: &str, name: &str, warnings: &mut Vec<String>) -> Result<Grid, CaseError> {
    let raw = scan(text, warnings)?;
    let base_mva = match raw.base_mva {
        Some(v) if v > 0.0 && v.is_finite() => v,
        Some(v) => {
            return Err(CaseError::Semantic {
                entity: "mpc.baseMVA".into(),
                message: format!("must be positive, found {v}"),
            })
        }
        None => {
            return Err(CaseError::Semantic {
                entity: "mpc.baseMVA".into(),
                message: "required field missing".into(),
            })
        }
    };
    for field in raw.tables.keys() {
        if !matches!(field.as_str(), "bus" | "gen" | "branch" | "gencost") {
            warnings.push(format!("ignoring table mpc.{field}"));
        }
    }

    let bus_table = require(&raw, "bus")?;
    let gen_table = require(&raw, "gen")?;
    let branch_table = require(&raw, "branch")?;
    check_width(bus_table, "bus", 10)?;
    check_width(gen_table, "gen", 10)?;
    check_width(branch_table, "branch", 11)?;

    let mut grid = Grid {
        name: name.to_string(),
        ..Grid::default()
    };
    let mut kv: HashMap<BusId, f64> = HashMap::new();
    let mut isolated = Vec::new();
    for (row, &line) in bus_table.rows.iter().zip(&bus_table.lines) {
        let id = BusId(as_id(row[0], line)?);
        let bus_type = row[1] as i64;
        let base_kv = row[9];
        if bus_type == 4 {
            warnings.push(format!("line {line}: dropping isolated bus {}", id.0));
            isolated.push(id);
            continue;
        }
        if !(base_kv > 0.0) {
            return Err(CaseError::Semantic {
                entity: format!("bus {}", id.0),
                message: format!("base voltage must be positive, found {base_kv}"),
            });
        }
        if kv.insert(id, base_kv).is_some() {
            return Err(CaseError::Semantic {
                entity: format!("bus {}", id.0),
                message: "duplicate bus id".into(),
            });
        }
        let base_kv2 = base_kv * base_kv;
        grid.buses.push(Bus {
            id,
            base_kv,
            shunt_conductance: row[4] / base_kv2,
            shunt_susceptance: row[5] / base_kv2,
            is_reference: bus_type == 3,
        });
        if row[2] != 0.0 {
            grid.loads.push(Load {
                id: LoadId(grid.loads.len() as u32 + 1),
                bus: id,
                p_demand: row[2],
            });
        }
    }

    let unknown_bus = |entity: String, bus: BusId| CaseError::Semantic {
        entity,
        message: format!("unknown bus {}", bus.0),
    };

    let gencost = raw.tables.get("gencost");
    if gencost.is_none() {
        warnings.push("no mpc.gencost table; all generator costs set to zero".into());
    }
    for (i, (row, &line)) in gen_table.rows.iter().zip(&gen_table.lines).enumerate() {
        let id = GenId(i as u32 + 1);
        let bus = BusId(as_id(row[0], line)?);
        if row[7] <= 0.0 {
            warnings.push(format!("line {line}: skipping out-of-service generator {}", id.0));
            continue;
        }
        if isolated.contains(&bus) {
            warnings.push(format!("line {line}: skipping generator {} at isolated bus", id.0));
            continue;
        }
        if !kv.contains_key(&bus) {
            return Err(unknown_bus(format!("generator {}", id.0), bus));
        }
        let (cost_linear, cost_constant) = match gencost {
            Some(table) => match (table.rows.get(i), table.lines.get(i)) {
                (Some(cost_row), Some(&cost_line)) => cost_terms(cost_row, cost_line, id.0, warnings)?,
                _ => {
                    return Err(CaseError::Semantic {
                        entity: format!("generator {}", id.0),
                        message: "missing gencost row".into(),
                    })
                }
            },
            None => (0.0, 0.0),
        };
        grid.generators.push(Generator {
            id,
            bus,
            p_min: row[9],
            p_max: row[8],
            cost_linear,
            cost_constant,
            is_conventional: true,
        });
    }

    for (i, (row, &line)) in branch_table.rows.iter().zip(&branch_table.lines).enumerate() {
        let id = BranchId(i as u32 + 1);
        let src = BusId(as_id(row[0], line)?);
        let dst = BusId(as_id(row[1], line)?);
        if row[10] <= 0.0 {
            warnings.push(format!("line {line}: skipping out-of-service branch {}", id.0));
            continue;
        }
        if isolated.contains(&src) || isolated.contains(&dst) {
            warnings.push(format!("line {line}: skipping branch {} at isolated bus", id.0));
            continue;
        }
        let src_kv = *kv.get(&src).ok_or_else(|| unknown_bus(format!("branch {}", id.0), src))?;
        let dst_kv = *kv.get(&dst).ok_or_else(|| unknown_bus(format!("branch {}", id.0), dst))?;
        let ratio = row[8];
        let shift = row[9];
        let kind = if src_kv != dst_kv || (ratio != 0.0 && ratio != 1.0) || shift != 0.0 {
            BranchKind::Transformer
        } else {
            BranchKind::Line
        };
        let z_base = src_kv * src_kv / base_mva;
        let rate = row[5];
        grid.branches.push(Branch {
            id,
            src_bus: src,
            dst_bus: dst,
            series_resistance: row[2] * z_base,
            series_reactance: row[3] * z_base,
            total_charging_susceptance: row[4] / z_base,
            rating: if rate > 0.0 && rate.is_finite() { Some(rate) } else { None },
            kind,
            length_km: None,
        });
    }

    Ok(grid)
}
