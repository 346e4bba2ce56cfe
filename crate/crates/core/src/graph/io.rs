use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Fkg, FkgBuilder, LabelRecord};
use crate::error::{Error, Result};

/// Locations of the three files that make up a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FkgPaths {
    pub triples: PathBuf,
    pub attributes: PathBuf,
    pub labels: PathBuf,
}

impl FkgPaths {
    /// Conventional names inside a dataset directory.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            triples: dir.join("triples.tsv"),
            attributes: dir.join("attributes.csv"),
            labels: dir.join("labels.csv"),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Loads triples (TSV), company attributes (CSV) and labels (CSV).
///
/// Company instances are numbered in attribute-row order and take entity ids
/// `0..N`; other entities follow in order of first appearance in the triples file.
pub fn load_fkg(triples_path: &Path, attrs_path: &Path, labels_path: &Path) -> Result<Fkg> {
    let mut builder = read_attributes(attrs_path)?;
    read_triples(triples_path, &mut builder)?;
    read_labels(labels_path, &mut builder)?;
    Ok(builder.build())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(File::open(path)?))
}

fn parse_year(path: &Path, line: usize, field: &str, what: &str) -> Result<i32> {
    field
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} `{field}` is not an integer year")))
}

fn read_attributes(path: &Path) -> Result<FkgBuilder> {
    let mut reader = csv_reader(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(FkgBuilder::new(Vec::new()));
    }
    if header.len() < 2 || &header[0] != "company_key" || &header[1] != "year" {
        return Err(parse_err(path, 1, "header must start with `company_key,year`"));
    }
    let names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let width = header.len();
    let mut builder = FkgBuilder::new(names);
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(parse_err(
                path,
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let year = parse_year(path, line, &record[1], "year")?;
        let values = record
            .iter()
            .skip(2)
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .map(Some)
                        .ok_or_else(|| parse_err(path, line, format!("bad attribute value `{cell}`")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        builder.add_company(&record[0], year, &values).map_err(|e| match e {
            Error::Schema(m) => parse_err(path, line, m),
            other => other,
        })?;
    }
    Ok(builder)
}

fn read_triples(path: &Path, builder: &mut FkgBuilder) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(parse_err(
                path,
                lineno,
                format!("expected `head<TAB>relation<TAB>tail`, found {} fields", cols.len()),
            ));
        }
        builder
            .add_triple(cols[0], cols[1], cols[2])
            .map_err(|e| match e {
                Error::Schema(m) => Error::Schema(format!("{}:{lineno}: {m}", path.display())),
                Error::Reference(m) => Error::Reference(format!("{}:{lineno}: {m}", path.display())),
                other => other,
            })?;
    }
    Ok(())
}

fn read_labels(path: &Path, builder: &mut FkgBuilder) -> Result<()> {
    let mut reader = csv_reader(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(());
    }
    let expected = ["company_key", "year", "label", "violation_year", "declared_year"];
    if header.iter().ne(expected) {
        return Err(parse_err(path, 1, format!("header must be `{}`", expected.join(","))));
    }
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != expected.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", expected.len(), record.len()),
            ));
        }
        let year = parse_year(path, line, &record[1], "year")?;
        let fraud = match &record[2] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line, format!("label `{other}` is not 0 or 1"))),
        };
        let optional_year = |field: &str, what: &str| -> Result<Option<i32>> {
            if field.is_empty() {
                Ok(None)
            } else {
                parse_year(path, line, field, what).map(Some)
            }
        };
        let label = LabelRecord {
            fraud,
            violation_year: optional_year(&record[3], "violation_year")?,
            declared_year: optional_year(&record[4], "declared_year")?,
            record_year: year,
        };
        builder.set_label(&record[0], year, label).map_err(|e| match e {
            Error::Reference(m) => Error::Reference(format!("{}:{line}: {m}", path.display())),
            Error::Schema(m) => parse_err(path, line, m),
            other => other,
        })?;
    }
    Ok(())
}

fn fmt_opt_year(y: Option<i32>) -> String {
    y.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the three files in the format read by [`load_fkg`].
pub fn write_fkg(fkg: &Fkg, paths: &FkgPaths) -> Result<()> {
    for p in [&paths.triples, &paths.attributes, &paths.labels] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(File::create(&paths.triples)?);
    for t in fkg.triples() {
        writeln!(
            out,
            "{}\t{}\t{}",
            fkg.entity(t.head).key,
            fkg.relations()[t.relation.0],
            fkg.entity(t.tail).key
        )?;
    }
    out.flush()?;

    let mut w = csv::Writer::from_path(&paths.attributes)?;
    let mut header = vec!["company_key".to_string(), "year".to_string()];
    header.extend(fkg.attribute_names().iter().cloned());
    w.write_record(&header)?;
    let attrs = fkg.attributes();
    for (i, c) in fkg.companies().iter().enumerate() {
        let mut row = vec![c.company_key.clone(), c.year.to_string()];
        row.extend((0..attrs.cols()).map(|j| attrs.get(i, j).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(&paths.labels)?;
    w.write_record(["company_key", "year", "label", "violation_year", "declared_year"])?;
    for (c, label) in fkg.companies().iter().zip(fkg.labels()) {
        if let Some(l) = label {
            w.write_record([
                c.company_key.clone(),
                c.year.to_string(),
                if l.fraud { "1" } else { "0" }.to_string(),
                fmt_opt_year(l.violation_year),
                fmt_opt_year(l.declared_year),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
