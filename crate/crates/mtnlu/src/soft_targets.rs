//! Soft-target files.
//!
//! ```text
//! #format	mtnlu-soft-targets/1
//! #task	snli
//! #kind	probabilities
//! #n_class	3
//! #teachers	2
//! #config_hash	5f0c…
//! u17	0.25	0.5	0.25
//! ```
//!
//! `n_class` is `regression` for one-value rows and `variable` for ranking
//! rows of differing widths. Values are written in shortest round-trip
//! form, so reading a file back gives the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mtnlu_core::distill::{SoftKind, SoftTargetSet};

use crate::error::{read_to_string, CliError, Result};

pub const FORMAT: &str = "mtnlu-soft-targets/1";

pub fn to_text(set: &SoftTargetSet) -> String {
    let mut s = String::new();
    let n_class = match (set.kind, set.n_class) {
        (SoftKind::Regression, _) => "regression".to_string(),
        (_, Some(k)) => k.to_string(),
        (_, None) => "variable".to_string(),
    };
    writeln!(s, "#format\t{FORMAT}").unwrap();
    writeln!(s, "#task\t{}", set.task).unwrap();
    writeln!(s, "#kind\t{}", set.kind.as_str()).unwrap();
    writeln!(s, "#n_class\t{n_class}").unwrap();
    writeln!(s, "#teachers\t{}", set.teachers).unwrap();
    writeln!(s, "#config_hash\t{}", set.config_hash).unwrap();
    for (uid, row) in &set.rows {
        s.push_str(uid);
        for v in row {
            write!(s, "\t{v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse(text: &str, origin: &str) -> Result<SoftTargetSet> {
    let err = |line: usize, msg: String| CliError::data(format!("{origin}, line {line}: {msg}"));
    let mut header: BTreeMap<&str, &str> = BTreeMap::new();
    let mut rows = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(h) = line.strip_prefix('#') {
            if !rows.is_empty() {
                return Err(err(n, "header line after data".into()));
            }
            let (k, v) = h.split_once('\t').ok_or_else(|| err(n, format!("malformed header {line:?}")))?;
            header.insert(k, v);
            continue;
        }
        let mut cols = line.split('\t');
        let uid = cols.next().unwrap_or_default();
        let row = cols
            .map(|c| c.parse::<f64>().map_err(|_| err(n, format!("value {c:?} is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if uid.is_empty() || row.is_empty() {
            return Err(err(n, "expected a uid followed by values".into()));
        }
        if rows.insert(uid.to_string(), row).is_some() {
            return Err(err(n, format!("duplicate uid {uid:?}")));
        }
    }
    let get = |k: &str| {
        header
            .get(k)
            .copied()
            .ok_or_else(|| CliError::data(format!("{origin}: missing header {k}")))
    };
    if get("format")? != FORMAT {
        return Err(CliError::data(format!(
            "{origin}: unsupported format {:?}; expected {FORMAT}",
            get("format")?
        )));
    }
    let kind = SoftKind::parse(get("kind")?)?;
    let n_class = match get("n_class")? {
        "regression" | "variable" => None,
        k => Some(
            k.parse()
                .map_err(|_| CliError::data(format!("{origin}: n_class {k:?} is not a count")))?,
        ),
    };
    let set = SoftTargetSet {
        task: get("task")?.to_string(),
        kind,
        n_class: if kind == SoftKind::Regression { Some(1) } else { n_class },
        teachers: get("teachers")?
            .parse()
            .map_err(|_| CliError::data(format!("{origin}: bad teacher count")))?,
        config_hash: get("config_hash")?.to_string(),
        rows,
    };
    set.validate()?;
    Ok(set)
}

pub fn save(path: &Path, set: &SoftTargetSet) -> Result<()> {
    crate::error::write_file(path, to_text(set))
}

pub fn load(path: &Path) -> Result<SoftTargetSet> {
    parse(&read_to_string(path, CliError::Data)?, &path.display().to_string())
}
