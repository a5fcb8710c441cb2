//! CSV ingestion and output.
//!
//! Dialect: comma separated, UTF-8, first row is the header, `.` decimal
//! separator. Categorical cells must equal one of the declared levels exactly.

use std::io::{Read, Write};

use mindep::{Column, ColumnKind, Dataset, Value};

use crate::config::ColumnConfig;
use crate::CliError;

fn parse_cell(kind: &ColumnKind, cell: &str) -> Result<Value, String> {
    let v = match kind {
        ColumnKind::Continuous | ColumnKind::Circular => cell
            .trim()
            .parse::<f64>()
            .map(Value::Real)
            .map_err(|_| format!("{cell:?} is not a number"))?,
        ColumnKind::Count => cell
            .trim()
            .parse::<i64>()
            .map(Value::Int)
            .map_err(|_| format!("{cell:?} is not an integer count"))?,
        ColumnKind::Categorical { levels, .. } => levels
            .iter()
            .position(|l| l == cell)
            .map(Value::Level)
            .ok_or_else(|| format!("{cell:?} is not one of the levels {levels:?}"))?,
    };
    kind.check_value(v)?;
    Ok(v)
}

/// Reads the declared columns, in declaration order, from a CSV source.
/// Row numbers in errors count the header as line 1.
pub fn read_dataset<R: Read>(source: R, schema: &[ColumnConfig]) -> Result<Dataset, CliError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(source);
    let header = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("cannot read the header: {e}")))?
        .clone();
    let width = header.len();
    let index: Vec<usize> = schema
        .iter()
        .map(|c| {
            header.iter().position(|h| h == c.name).ok_or_else(|| {
                CliError::Config(format!("column {:?} is not in the CSV header", c.name))
            })
        })
        .collect::<Result<_, _>>()?;
    let mut values: Vec<Vec<Value>> = vec![Vec::new(); schema.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| CliError::Data(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(CliError::Data(format!(
                "row {line} has {} fields, the header has {width}",
                record.len()
            )));
        }
        for ((col, &j), out) in schema.iter().zip(&index).zip(values.iter_mut()) {
            let v = parse_cell(&col.kind, &record[j])
                .map_err(|m| CliError::Data(format!("row {line}, column {}: {m}", col.name)))?;
            out.push(v);
        }
    }
    let columns = schema
        .iter()
        .zip(values)
        .map(|(c, v)| Column::new(c.name.clone(), c.kind.clone(), v))
        .collect();
    Dataset::new(columns).map_err(|e| CliError::Data(e.to_string()))
}

fn format_value(kind: &ColumnKind, v: Value) -> String {
    match (kind, v) {
        (ColumnKind::Categorical { levels, .. }, Value::Level(l)) => levels[l].clone(),
        (_, Value::Real(x)) => format!("{x:?}"),
        (_, v) => v.to_string(),
    }
}

/// Writes a dataset with a header row; reals use the shortest round-trip form.
pub fn write_dataset<W: Write>(sink: W, data: &Dataset) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(data.columns().iter().map(|c| c.name.as_str()))
        .map_err(io)?;
    for t in 0..data.n_rows() {
        w.write_record(
            data.columns()
                .iter()
                .map(|c| format_value(&c.kind, c.values[t])),
        )
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<ColumnConfig> {
        vec![
            ColumnConfig {
                name: "b".into(),
                kind: ColumnKind::Count,
            },
            ColumnConfig {
                name: "a".into(),
                kind: ColumnKind::Continuous,
            },
            ColumnConfig {
                name: "s".into(),
                kind: ColumnKind::categorical(["f", "m"]),
            },
        ]
    }

    #[test]
    fn reads_in_schema_order() {
        let src = "a,b,s,extra\n1.5,2,m,x\n-0.25,0,f,y\n";
        let d = read_dataset(src.as_bytes(), &schema()).unwrap();
        assert_eq!(d.n_rows(), 2);
        assert_eq!(d.column(0).name, "b");
        assert_eq!(d.column(0).values, vec![Value::Int(2), Value::Int(0)]);
        assert_eq!(d.column(1).values, vec![Value::Real(1.5), Value::Real(-0.25)]);
        assert_eq!(d.column(2).values, vec![Value::Level(1), Value::Level(0)]);
    }

    #[test]
    fn ragged_row_reports_its_line() {
        let src = "a,b,s\n1.5,2,m\n1.0,3\n";
        match read_dataset(src.as_bytes(), &schema()) {
            Err(CliError::Data(m)) => assert!(m.contains("row 3"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_cells_and_missing_columns() {
        let bad_level = "a,b,s\n1.5,2,M\n";
        assert!(matches!(
            read_dataset(bad_level.as_bytes(), &schema()),
            Err(CliError::Data(m)) if m.contains("row 2, column s")
        ));
        let negative = "a,b,s\n1.5,-2,m\n";
        assert!(read_dataset(negative.as_bytes(), &schema()).is_err());
        let missing = "a,s\n1.5,m\n";
        assert!(matches!(
            read_dataset(missing.as_bytes(), &schema()),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn write_read_round_trip() {
        let src = "b,a,s\n2,0.1,m\n0,-3.0000000000000004,f\n";
        let d = read_dataset(src.as_bytes(), &schema()).unwrap();
        let mut out = Vec::new();
        write_dataset(&mut out, &d).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), src);
    }
}
