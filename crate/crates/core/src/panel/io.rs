//! CSV ingestion for the panel formats: long-format case panel
//! (`district,year,month,cases,population`), per-covariate files
//! (`district,year,month,<name>`), and an undirected adjacency edge list.

use std::collections::HashMap;
use std::path::Path;

use crate::calendar::YearMonth;
use crate::error::{Error, Result};
use crate::panel::{Covariate, PanelParts};

/// Read a long-format case panel. Districts keep file order of first
/// appearance; months are sorted ascending and every (district, month)
/// cell must appear exactly once.
pub fn read_cases_csv(path: impl AsRef<Path>) -> Result<PanelParts> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    expect_headers(&mut rdr, &["district", "year", "month", "cases", "population"], path)?;

    let mut districts: Vec<String> = Vec::new();
    let mut district_idx: HashMap<String, usize> = HashMap::new();
    let mut records: Vec<(usize, YearMonth, i64, f64)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let district = rec.get(0).unwrap_or("").trim().to_string();
        if district.is_empty() {
            return Err(Error::data(format!("{}: empty district on row {}", path.display(), line + 2)));
        }
        let ym = parse_year_month(&rec, 1, 2, path, line)?;
        let cases: i64 = parse_field(&rec, 3, "cases", path, line)?;
        let population: f64 = parse_field(&rec, 4, "population", path, line)?;
        let di = *district_idx.entry(district.clone()).or_insert_with(|| {
            districts.push(district);
            districts.len() - 1
        });
        records.push((di, ym, cases, population));
    }
    if records.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }

    let mut months: Vec<YearMonth> = records.iter().map(|r| r.1).collect();
    months.sort();
    months.dedup();
    let first = months[0];
    let t_len = months.len();
    let month_idx = |ym: YearMonth| -> Option<usize> {
        let d = ym.months_since(first);
        (0..t_len as i64).contains(&d).then_some(d as usize)
    };

    let n = districts.len();
    let mut cases = vec![i64::MIN; n * t_len];
    let mut population = vec![f64::NAN; n * t_len];
    for (di, ym, c, p) in records {
        let Some(t) = month_idx(ym) else {
            // Month set has a gap; placement by offset would misalign.
            return Err(Error::data(format!(
                "{}: months are not contiguous around {ym}",
                path.display()
            )));
        };
        if months[t] != ym {
            return Err(Error::data(format!(
                "{}: months are not contiguous around {ym}",
                path.display()
            )));
        }
        let cell = di * t_len + t;
        if cases[cell] != i64::MIN {
            return Err(Error::data(format!(
                "{}: duplicate row for {} {ym}",
                path.display(),
                districts[di]
            )));
        }
        cases[cell] = c;
        population[cell] = p;
    }
    for di in 0..n {
        for t in 0..t_len {
            if cases[di * t_len + t] == i64::MIN {
                return Err(Error::data(format!(
                    "{}: missing row for {} {}",
                    path.display(),
                    districts[di],
                    months[t]
                )));
            }
        }
    }

    Ok(PanelParts {
        districts,
        months,
        cases,
        population,
        covariates: Default::default(),
        edges: Vec::new(),
    })
}

/// Read one covariate file and attach it to the parts, aligned to the
/// panel's districts and months. Every cell must be present exactly once.
pub fn read_covariate_csv(path: impl AsRef<Path>, parts: &mut PanelParts) -> Result<String> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols.len() != 4 || cols[0] != "district" || cols[1] != "year" || cols[2] != "month" {
        return Err(Error::data(format!(
            "{}: expected header district,year,month,<name>, got {}",
            path.display(),
            cols.join(",")
        )));
    }
    let name = cols[3].to_string();
    if name.is_empty() {
        return Err(Error::data(format!("{}: covariate column has no name", path.display())));
    }

    let n = parts.districts.len();
    let t_len = parts.months.len();
    let district_idx: HashMap<&str, usize> =
        parts.districts.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let first = parts.months[0];
    let mut values = vec![f64::NAN; n * t_len];
    let mut seen = vec![false; n * t_len];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let district = rec.get(0).unwrap_or("").trim();
        let Some(&di) = district_idx.get(district) else {
            return Err(Error::data(format!(
                "{}: unknown district {district:?} on row {}",
                path.display(),
                line + 2
            )));
        };
        let ym = parse_year_month(&rec, 1, 2, path, line)?;
        let d = ym.months_since(first);
        if d < 0 || d as usize >= t_len {
            continue; // outside the panel window; harmless
        }
        let t = d as usize;
        let v: f64 = parse_field(&rec, 3, &name, path, line)?;
        let cell = di * t_len + t;
        if seen[cell] {
            return Err(Error::data(format!(
                "{}: duplicate row for {district} {ym}",
                path.display()
            )));
        }
        seen[cell] = true;
        values[cell] = v;
    }
    for di in 0..n {
        for t in 0..t_len {
            if !seen[di * t_len + t] {
                return Err(Error::data(format!(
                    "{}: covariate {name} missing for {} {}",
                    path.display(),
                    parts.districts[di],
                    parts.months[t]
                )));
            }
        }
    }
    parts.covariates.insert(name.clone(), Covariate { unit: String::new(), values });
    Ok(name)
}

/// Read the undirected edge list (`district_a,district_b`, one per line).
/// A header row is accepted and skipped.
pub fn read_adjacency_edges(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line.eq_ignore_ascii_case("district_a,district_b") {
            continue;
        }
        let mut fields = line.split(',');
        let (a, b) = (fields.next(), fields.next());
        match (a, b, fields.next()) {
            (Some(a), Some(b), None) => edges.push((a.trim().to_string(), b.trim().to_string())),
            _ => {
                return Err(Error::data(format!(
                    "{}: line {} is not `district_a,district_b`",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(edges)
}

/// Write a covariate matrix in the panel covariate format.
pub fn write_covariate_csv(
    path: impl AsRef<Path>,
    name: &str,
    districts: &[String],
    months: &[YearMonth],
    values: &[f64],
) -> Result<()> {
    let path = path.as_ref();
    let t_len = months.len();
    if values.len() != districts.len() * t_len {
        return Err(Error::invalid("covariate values do not match districts x months"));
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    w.write_record(["district", "year", "month", name])
        .map_err(|e| Error::data(e.to_string()))?;
    for (di, d) in districts.iter().enumerate() {
        for (t, ym) in months.iter().enumerate() {
            w.write_record([
                d.as_str(),
                &ym.year.to_string(),
                &ym.month.to_string(),
                &format_float(values[di * t_len + t]),
            ])
            .map_err(|e| Error::data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Decimal formatting used by all CSV emitters: shortest round-trip form,
/// so rewrites of equal values are byte-identical.
pub fn format_float(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn expect_headers(
    rdr: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
    path: &Path,
) -> Result<()> {
    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::data(format!(
            "{}: expected header {}, got {}",
            path.display(),
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn parse_year_month(
    rec: &csv::StringRecord,
    year_col: usize,
    month_col: usize,
    path: &Path,
    line: usize,
) -> Result<YearMonth> {
    let year: i32 = parse_field(rec, year_col, "year", path, line)?;
    let month: u8 = parse_field(rec, month_col, "month", path, line)?;
    YearMonth::new(year, month)
        .map_err(|e| Error::data(format!("{}: row {}: {e}", path.display(), line + 2)))
}

fn parse_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    col: usize,
    what: &str,
    path: &Path,
    line: usize,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = rec.get(col).unwrap_or("").trim();
    raw.parse().map_err(|e| {
        Error::data(format!(
            "{}: row {}: bad {what} value {raw:?}: {e}",
            path.display(),
            line + 2
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    #[test]
    fn round_trip_small_panel() {
        let dir = tempfile::tempdir().unwrap();
        let panel = write_tmp(
            &dir,
            "cases.csv",
            "district,year,month,cases,population\n\
             B,2010,1,3,50000\n\
             A,2010,1,5,100000\n\
             B,2010,2,4,50000\n\
             A,2010,2,6,100000\n",
        );
        let adj = write_tmp(&dir, "adj.csv", "district_a,district_b\nB,A\n");
        let mut parts = read_cases_csv(&panel).unwrap();
        parts.edges = read_adjacency_edges(&adj).unwrap();
        let built = parts.build().unwrap();
        // First-appearance order: B before A.
        assert_eq!(built.districts(), &["B".to_string(), "A".to_string()]);
        assert_eq!(built.cases(0, 1), 4);
        assert_eq!(built.cases(1, 0), 5);
        assert_eq!(built.population(1, 1), 100000.0);
    }

    #[test]
    fn missing_cell_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let panel = write_tmp(
            &dir,
            "cases.csv",
            "district,year,month,cases,population\n\
             A,2010,1,5,100000\n\
             A,2010,2,6,100000\n\
             B,2010,1,3,50000\n",
        );
        let err = read_cases_csv(&panel).unwrap_err().to_string();
        assert!(err.contains("missing row"), "{err}");
    }

    #[test]
    fn month_gap_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let panel = write_tmp(
            &dir,
            "cases.csv",
            "district,year,month,cases,population\n\
             A,2010,1,5,100000\n\
             A,2010,3,6,100000\n",
        );
        let err = read_cases_csv(&panel).unwrap_err().to_string();
        assert!(err.contains("contiguous"), "{err}");
    }

    #[test]
    fn covariate_aligns_and_requires_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let panel = write_tmp(
            &dir,
            "cases.csv",
            "district,year,month,cases,population\n\
             A,2010,1,5,100000\n\
             A,2010,2,6,100000\n",
        );
        let cov = write_tmp(
            &dir,
            "tmin.csv",
            "district,year,month,tmin\nA,2010,2,21.5\nA,2010,1,20.0\nA,2009,12,19.0\n",
        );
        let mut parts = read_cases_csv(&panel).unwrap();
        let name = read_covariate_csv(&cov, &mut parts).unwrap();
        assert_eq!(name, "tmin");
        assert_eq!(parts.covariates["tmin"].values, vec![20.0, 21.5]);

        let gap = write_tmp(&dir, "rain.csv", "district,year,month,rain\nA,2010,1,4.0\n");
        let err = read_covariate_csv(&gap, &mut parts).unwrap_err().to_string();
        assert!(err.contains("missing"), "{err}");
    }

    #[test]
    fn covariate_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let months = vec![
            crate::calendar::YearMonth::new(2010, 1).unwrap(),
            crate::calendar::YearMonth::new(2010, 2).unwrap(),
        ];
        let districts = vec!["A".to_string()];
        let path = dir.path().join("rh.csv");
        write_covariate_csv(&path, "rh", &districts, &months, &[70.25, 68.0]).unwrap();

        let panel = write_tmp(
            &dir,
            "cases.csv",
            "district,year,month,cases,population\n\
             A,2010,1,5,100000\n\
             A,2010,2,6,100000\n",
        );
        let mut parts = read_cases_csv(&panel).unwrap();
        read_covariate_csv(&path, &mut parts).unwrap();
        assert_eq!(parts.covariates["rh"].values, vec![70.25, 68.0]);
    }
}
