//! CSV dataset formats.
//!
//! Classification (also used for the conjugate model with an empty feature
//! block): header `silo_id,global_index,label,x0..x{d-1}`.
//!
//! Mixed model: header `subject,visit,smoke,age_c,y`; silo assignment is not
//! part of the file and is chosen at load time.

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Row, SiloShard, Unit};
use crate::{Error, Result};

fn parse_f64(field: &str, line_no: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::InvalidArgument(format!("line {line_no}: bad number {field:?}")))
}

fn parse_usize(field: &str, line_no: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::InvalidArgument(format!("line {line_no}: bad integer {field:?}")))
}

/// Write one row per unit. Feature count is taken from the first row.
pub fn write_classification_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let d = dataset
        .shards
        .iter()
        .flat_map(|s| s.units.iter())
        .next()
        .map_or(0, |u| u.rows[0].features.len());
    let mut out = String::from("silo_id,global_index,label");
    for j in 0..d {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for shard in &dataset.shards {
        for unit in &shard.units {
            let row = &unit.rows[0];
            let _ = write!(out, "{},{},{}", shard.silo_id, unit.global_index, row.label);
            for x in &row.features {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_classification_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "silo_id" || cols[1] != "global_index" || cols[2] != "label" {
        return Err(Error::InvalidArgument(format!(
            "expected header silo_id,global_index,label,x0.., got {header:?}"
        )));
    }
    let d = cols.len() - 3;
    let mut per_silo: Vec<Vec<Unit>> = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + d {
            return Err(Error::InvalidArgument(format!(
                "line {line_no}: expected {} fields, got {}",
                3 + d,
                fields.len()
            )));
        }
        let silo = parse_usize(fields[0], line_no)?;
        let global_index = parse_usize(fields[1], line_no)? as u64;
        let label = parse_f64(fields[2], line_no)?;
        let features = fields[3..]
            .iter()
            .map(|f| parse_f64(f, line_no))
            .collect::<Result<Vec<f64>>>()?;
        if per_silo.len() <= silo {
            per_silo.resize_with(silo + 1, Vec::new);
        }
        per_silo[silo].push(Unit {
            global_index,
            rows: vec![Row { features, label }],
        });
    }
    let dataset = Dataset {
        shards: per_silo
            .into_iter()
            .enumerate()
            .map(|(silo_id, units)| SiloShard { silo_id, units })
            .collect(),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// One row per visit, subjects in any order but contiguous per subject.
pub fn write_glmm_csv(units: &[Unit], path: &Path) -> Result<()> {
    let mut out = String::from("subject,visit,smoke,age_c,y\n");
    for unit in units {
        for (v, row) in unit.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                unit.global_index, v, row.features[0], row.features[1], row.label
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load subjects, then split them across `j_silos` contiguous shards.
pub fn load_glmm_csv(path: &Path, j_silos: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty csv".into()))?;
    if header != "subject,visit,smoke,age_c,y" {
        return Err(Error::InvalidArgument(format!(
            "expected header subject,visit,smoke,age_c,y, got {header:?}"
        )));
    }
    let mut subjects: Vec<(u64, Vec<Row>)> = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "line {line_no}: expected 5 fields, got {}",
                fields.len()
            )));
        }
        let subject = parse_usize(fields[0], line_no)? as u64;
        let smoke = parse_f64(fields[2], line_no)?;
        let age = parse_f64(fields[3], line_no)?;
        let y = parse_f64(fields[4], line_no)?;
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "line {line_no}: binary label expected, got {y}"
            )));
        }
        let row = Row {
            features: vec![smoke, age],
            label: y,
        };
        match subjects.last_mut() {
            Some((s, rows)) if *s == subject => rows.push(row),
            _ => subjects.push((subject, vec![row])),
        }
    }
    let units: Vec<Unit> = subjects
        .into_iter()
        .map(|(global_index, rows)| Unit { global_index, rows })
        .collect();
    let dataset = Dataset::partition_contiguous(units, j_silos)?;
    dataset.validate()?;
    Ok(dataset)
}
