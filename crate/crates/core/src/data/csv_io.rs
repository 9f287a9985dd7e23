use std::path::Path;

use crate::data::{Dataset, SplitTag, Targets};
use crate::error::{Error, Result};
use crate::ndcore::Tensor;

/// Reads a numeric table with a header row. `target` names the target
/// column; `None` selects the last column. Row and column numbers in errors
/// are 1-based and count data rows only (the header is row 0).
pub fn load_csv(path: &Path, target: Option<&str>, delimiter: u8) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Data(format!(
            "{} needs at least one feature and one target column",
            path.display()
        )));
    }
    let target_idx = match target {
        None => header.len() - 1,
        Some(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("target column '{name}' not found in header {header:?}")))?,
    };

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != header.len() {
            return Err(Error::DataCell {
                row,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::DataCell {
                row,
                column: j + 1,
                message: format!("non-numeric value '{cell}' in column '{}'", header[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::DataCell {
                    row,
                    column: j + 1,
                    message: format!("non-finite value '{cell}'"),
                });
            }
            if j == target_idx {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let x = Tensor::new(vec![n, header.len() - 1], features)?;
    let y = Tensor::new(vec![n, 1], targets)?;
    let mut names = header.clone();
    let target_name = names.remove(target_idx);
    Ok(Dataset {
        x,
        y: Targets::Real(y),
        feature_names: names,
        target_name,
        split: SplitTag::Full,
    })
}

/// Writes features then the target column, comma-separated with a header.
/// Values use the shortest representation that parses back to the same bits.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let y = dataset.y.as_real()?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = dataset.feature_names.clone();
    header.push(dataset.target_name.clone());
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(y.get2(i, 0).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("t.csv");
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn small_file_parses_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a,b,y\n1,2,3\n4.5,-1,0.25\n0,0,1e3\n");
        let d = load_csv(&p, None, b',').unwrap();
        assert_eq!(d.x.shape(), &[3, 2]);
        assert_eq!(d.x.data(), &[1.0, 2.0, 4.5, -1.0, 0.0, 0.0]);
        assert_eq!(d.y.as_real().unwrap().data(), &[3.0, 0.25, 1000.0]);
        assert_eq!(d.feature_names, vec!["a", "b"]);

        let d = load_csv(&p, Some("a"), b',').unwrap();
        assert_eq!(d.y.as_real().unwrap().data(), &[1.0, 4.5, 0.0]);
        assert_eq!(d.feature_names, vec!["b", "y"]);
    }

    #[test]
    fn errors_name_the_offending_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a,y\n1,2\nfoo,3\n");
        match load_csv(&p, None, b',') {
            Err(Error::DataCell { row, column, .. }) => assert_eq!((row, column), (2, 1)),
            other => panic!("{other:?}"),
        }
        let msg = load_csv(&p, None, b',').unwrap_err().to_string();
        assert!(msg.contains("row 2"), "{msg}");

        let p = write(&dir, "a,y\n1,2\n3\n");
        assert!(matches!(load_csv(&p, None, b','), Err(Error::DataCell { row: 2, .. })));
        let p = write(&dir, "a,y\n1,2\n");
        assert!(matches!(load_csv(&p, Some("z"), b','), Err(Error::Data(_))));
    }

    #[test]
    fn semicolon_delimiter() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a;y\n1;2\n");
        let d = load_csv(&p, None, b';').unwrap();
        assert_eq!(d.y.as_real().unwrap().data(), &[2.0]);
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(200, 5, (-1.0, 1.0)).unwrap();
        let p = dir.path().join("rt.csv");
        save_csv(&d, &p).unwrap();
        let back = load_csv(&p, None, b',').unwrap();
        for (a, b) in back.x.data().iter().zip(d.x.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert_eq!(back.y, d.y);
    }
}
