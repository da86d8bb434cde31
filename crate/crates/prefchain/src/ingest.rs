//! Categorized trip CSVs.
//!
//! Columns are written in canonical order: the six profile attributes,
//! trip purpose, start hour, mode, duration bin, and an optional
//! `household_id` link column. Readers accept any column order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use prefchain_core::graph::HOUSEHOLD_KEY;
use prefchain_core::schema::{AgentProfile, Attribute, Output, TripRecord};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("row {row}: invalid value {value:?} in column {column:?}")]
    SchemaViolation { row: usize, column: String, value: String },
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("reference data has no records")]
    EmptyReference,
}

/// Canonical column order, without the optional link column.
pub fn canonical_columns() -> Vec<&'static str> {
    Attribute::INPUTS.iter().map(|a| a.name()).chain(Output::ALL.iter().map(|o| o.name())).collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<TripRecord>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    read_records(file)
}

/// Rows are numbered from 1, not counting the header.
pub fn read_records<R: Read>(input: R) -> Result<Vec<TripRecord>, IngestError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers().map_err(|e| IngestError::Malformed { row: 0, message: e.to_string() })?.clone();
    let position = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut columns = Vec::new();
    for name in canonical_columns() {
        columns.push((name, position(name).ok_or_else(|| IngestError::MissingColumn(name.to_string()))?));
    }
    let household = position(HOUSEHOLD_KEY);

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| IngestError::Malformed { row: row_no, message: e.to_string() })?;
        let cell = |idx: usize| row.get(idx).unwrap_or("");
        let violation = |column: &str, value: &str| IngestError::SchemaViolation {
            row: row_no,
            column: column.to_string(),
            value: value.to_string(),
        };
        let mut values = Vec::with_capacity(columns.len());
        for &(name, idx) in &columns {
            values.push((name, cell(idx)));
        }
        let profile_pairs = values[..Attribute::PROFILE.len()].iter().copied();
        let profile = AgentProfile::from_pairs(profile_pairs).map_err(|e| match e {
            prefchain_core::schema::SchemaError::InvalidValue { column, value } => {
                IngestError::SchemaViolation { row: row_no, column, value }
            }
            other => IngestError::Malformed { row: row_no, message: other.to_string() },
        })?;
        let get = |name: &str| values.iter().find(|(n, _)| *n == name).map(|(_, v)| *v).unwrap_or("");
        let parse = |attr: Attribute| {
            let v = get(attr.name());
            attr.parse(v).map_err(|_| violation(attr.name(), v))
        };
        let trip_purpose = parse(Attribute::TripPurpose)?;
        let start_time: u8 = parse(Attribute::StartTime)?
            .parse()
            .map_err(|_| violation(Attribute::StartTime.name(), get(Attribute::StartTime.name())))?;
        let output = |o: Output| {
            let v = get(o.name());
            o.parse(v).map_err(|_| violation(o.name(), v))
        };
        let primary_mode = output(Output::PrimaryMode)?;
        let duration_minutes = output(Output::DurationMinutes)?;
        let household = household.map(cell).filter(|v| !v.is_empty()).map(str::to_string);
        records.push(TripRecord { profile, trip_purpose, start_time, primary_mode, duration_minutes, household });
    }
    Ok(records)
}

/// Reads a reference file, which must hold at least one record.
pub fn read_reference(path: &Path) -> Result<Vec<TripRecord>, IngestError> {
    let records = read_csv(path)?;
    if records.is_empty() {
        return Err(IngestError::EmptyReference);
    }
    Ok(records)
}

/// Writes the link column only when some record carries a household key.
pub fn write_records<W: Write>(records: &[TripRecord], output: W) -> std::io::Result<()> {
    let with_household = records.iter().any(|r| r.household.is_some());
    let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(output);
    let mut header = canonical_columns();
    if with_household {
        header.push(HOUSEHOLD_KEY);
    }
    writer.write_record(&header)?;
    for r in records {
        let mut row: Vec<&str> = Attribute::INPUTS.iter().map(|&a| r.input(a)).collect();
        row.extend(Output::ALL.iter().map(|&o| r.choice(o)));
        if with_household {
            row.push(r.household.as_deref().unwrap_or(""));
        }
        writer.write_record(&row)?;
    }
    writer.flush()
}

pub fn write_csv(path: &Path, records: &[TripRecord]) -> std::io::Result<()> {
    write_records(records, File::create(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOLDEN: &str = "\
age_group,income_group,employment_status,household_size,available_vehicles,education,trip_purpose,start_time,primary_mode,duration_minutes
25-34,$50k-$100k,employed,2,one,bachelors_degree,work,8,private_auto,20-30
65+,Under $10k,not_in_labor_force,1,zero,high_school,shop,10,walking,0-10
Under 18,$100k-$150k,under_16,4,two,k_12,school,7,auto_passenger,10-20
";

    #[test]
    fn golden_rows() {
        let records = read_records(GOLDEN.as_bytes()).unwrap();
        assert_eq!(records.len(), 3);
        let r = &records[0];
        assert_eq!(r.profile.age_group, "25-34");
        assert_eq!(r.profile.income_group, "$50k-$100k");
        assert_eq!((r.trip_purpose, r.start_time), ("work", 8));
        assert_eq!((r.primary_mode, r.duration_minutes), ("private_auto", "20-30"));
        assert_eq!(records[2].profile.employment_status, "under_16");
        assert_eq!(records[1].household, None);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let records = read_records(GOLDEN.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_records(&records, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), GOLDEN);
    }

    #[test]
    fn reordered_header_is_canonicalized() {
        let mut lines = GOLDEN.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let order: Vec<usize> = (0..header.len()).rev().collect();
        let mut shuffled = String::new();
        let permute = |line: &str| {
            let cells: Vec<&str> = line.split(',').collect();
            order.iter().map(|&i| cells[i]).collect::<Vec<_>>().join(",")
        };
        shuffled.push_str(&permute(&header.join(",")));
        shuffled.push('\n');
        for line in lines {
            shuffled.push_str(&permute(line));
            shuffled.push('\n');
        }
        let mut out = Vec::new();
        write_records(&read_records(shuffled.as_bytes()).unwrap(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), GOLDEN);
    }

    #[test]
    fn bad_age_names_row_and_column() {
        let bad = GOLDEN.replacen("25-34", "17", 1);
        match read_records(bad.as_bytes()) {
            Err(IngestError::SchemaViolation { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (1, "age_group", "17"));
            }
            other => panic!("{other:?}"),
        }
        let bad = GOLDEN.replacen("0-10", "60-70", 1);
        assert!(matches!(read_records(bad.as_bytes()), Err(IngestError::SchemaViolation { row: 2, .. })));
        let bad = GOLDEN.replacen(",8,", ",24,", 1);
        assert!(matches!(read_records(bad.as_bytes()), Err(IngestError::SchemaViolation { row: 1, .. })));
    }

    #[test]
    fn missing_column() {
        let bad = GOLDEN.replacen("education", "schooling", 1);
        assert!(matches!(read_records(bad.as_bytes()), Err(IngestError::MissingColumn(c)) if c == "education"));
    }

    #[test]
    fn household_column_round_trips() {
        let text = GOLDEN
            .lines()
            .enumerate()
            .map(|(i, l)| match i {
                0 => format!("{l},household_id"),
                1 => format!("{l},h1"),
                _ => format!("{l},"),
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n";
        let records = read_records(text.as_bytes()).unwrap();
        assert_eq!(records[0].household.as_deref(), Some("h1"));
        let mut out = Vec::new();
        write_records(&records, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn empty_reference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, GOLDEN.lines().next().unwrap()).unwrap();
        assert!(matches!(read_reference(&path), Err(IngestError::EmptyReference)));
    }
}
