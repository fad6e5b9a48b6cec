//! CSV and JSON-lines writers. Every row carries the run's config hash and
//! seed as trailing fields.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;

/// Provenance appended to every emitted row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

/// A flat table row with a fixed column order.
pub trait TableRow: Serialize {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

/// Formats an optional value as an empty cell when absent.
pub(crate) fn opt_cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<R: TableRow, W: Write>(out: W, rows: &[R], stamp: &Stamp) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = R::header().to_vec();
    header.extend(["config_hash", "seed"]);
    w.write_record(&header)?;
    for row in rows {
        let mut fields = row.fields();
        fields.push(stamp.config_hash.clone());
        fields.push(stamp.seed.to_string());
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<R: TableRow, W: Write>(mut out: W, rows: &[R], stamp: &Stamp) -> Result<()> {
    for row in rows {
        let mut value = serde_json::to_value(row)?;
        if let serde_json::Value::Object(map) = &mut value {
            map.insert("config_hash".into(), stamp.config_hash.clone().into());
            map.insert("seed".into(), stamp.seed.into());
        }
        serde_json::to_writer(&mut out, &value)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
