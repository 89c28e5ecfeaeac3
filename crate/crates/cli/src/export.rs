//! `export-plots`: one tab-separated table per diagnostic name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kinemix_core::diagnostics::{parse_record, Record};

use crate::{Failure, EXIT_OK};

pub const HEADER: &str = "t\tvalue\ttolerance\tpass\tcheck_ref\n";

fn num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:e}")
    }
}

/// File stem for a record name.
pub fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' }).collect()
}

pub fn read_records(dir: &Path) -> Result<Vec<Record>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::config(format!("run directory {} does not exist", dir.display())));
    }
    let path = dir.join("records.ndjson");
    let text = fs::read_to_string(&path)
        .map_err(|_| Failure::config(format!("{} has no records.ndjson; is it a completed run directory?", dir.display())))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_record(line).map_err(|e| Failure::config(format!("{}:{}: {e}", path.display(), k + 1)))?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(Failure::config(format!("{} is empty", path.display())));
    }
    Ok(out)
}

pub fn export_plots(dir: &Path) -> Result<u8, Failure> {
    let records = read_records(dir)?;
    let mut groups: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
    for r in &records {
        groups.entry(r.name.as_str()).or_default().push(r);
    }
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    let mut index = String::from("name\tfile\trows\tcheck_ref\n");
    for (name, rows) in &groups {
        let file = format!("{}.tsv", file_stem(name));
        let mut s = String::from(HEADER);
        for r in rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", num(r.t), num(r.value), num(r.tolerance), r.pass, r.check_ref);
        }
        fs::write(plots.join(&file), s)?;
        let _ = writeln!(index, "{name}\t{file}\t{}\t{}", rows.len(), rows[0].check_ref);
    }
    fs::write(plots.join("index.tsv"), index)?;
    println!("exported {} tables from {} records to {}", groups.len(), records.len(), plots.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_and_names() {
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(num(f64::NAN), "nan");
        assert_eq!(num(0.25), "2.5e-1");
        assert_eq!(file_stem("energy.ratio"), "energy.ratio");
        assert_eq!(file_stem("a/b c"), "a_b_c");
    }

    #[test]
    fn empty_and_missing_dirs_fail() {
        let d = tempfile::tempdir().unwrap();
        assert!(export_plots(d.path()).is_err());
        fs::write(d.path().join("records.ndjson"), "\n").unwrap();
        assert!(export_plots(d.path()).is_err());
        fs::write(d.path().join("records.ndjson"), "{not json}\n").unwrap();
        let e = export_plots(d.path()).unwrap_err();
        assert!(e.message.contains(":1:"), "{}", e.message);
        assert!(export_plots(&d.path().join("missing")).is_err());
    }
}
