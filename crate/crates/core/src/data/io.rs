//! JSONL persistence.
//!
//! Line 1 is a header object; every following line is one instance:
//!
//! ```text
//! {"num_classes":3,"labels":["SUPPORTS","REFUTES","NEI"],"vocab":[...],"provenance":{...}}
//! {"id":"original-0-0","claim":["w3","kw7"],"evidence":["w1","kw7","w9"],"label":"SUPPORTS"}
//! ```
//!
//! `vocab` and `provenance` are optional. Without `vocab`, token ids are
//! assigned in order of first appearance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{label_index, Dataset, Instance, Provenance, Vocab, LABEL_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JsonlHeader {
    pub num_classes: usize,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    claim: Vec<&'a str>,
    evidence: Vec<&'a str>,
    label: &'a str,
}

#[derive(Deserialize)]
struct RecordIn {
    id: String,
    claim: Vec<String>,
    evidence: Vec<String>,
    label: String,
}

pub fn write_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    let header = JsonlHeader {
        num_classes: ds.num_classes,
        labels: LABEL_NAMES[..ds.num_classes.min(LABEL_NAMES.len())]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        vocab: Some(ds.vocab.clone()),
        provenance: Some(ds.provenance.clone()),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let tok = |ids: &[usize]| -> Result<Vec<&str>> {
        ids.iter()
            .map(|&t| {
                ds.vocab.token(t).ok_or(Error::IndexOutOfRange {
                    op: "write_jsonl",
                    index: t,
                    bound: ds.vocab.len(),
                })
            })
            .collect()
    };
    for inst in &ds.instances {
        let label = LABEL_NAMES.get(inst.label).ok_or(Error::IndexOutOfRange {
            op: "write_jsonl label",
            index: inst.label,
            bound: LABEL_NAMES.len(),
        })?;
        let rec = RecordOut {
            id: &inst.id,
            claim: tok(&inst.claim)?,
            evidence: tok(&inst.evidence)?,
            label,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let header: JsonlHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| parse_err(1, format!("header: {e}")))?,
        None => return Err(parse_err(1, "missing header line".into())),
    };
    if header.num_classes == 0 || header.num_classes > LABEL_NAMES.len() {
        return Err(parse_err(1, format!("unsupported num_classes {}", header.num_classes)));
    }
    if header
        .labels
        .iter()
        .map(String::as_str)
        .ne(LABEL_NAMES[..header.num_classes].iter().copied())
    {
        return Err(parse_err(
            1,
            format!("labels must be {:?}", &LABEL_NAMES[..header.num_classes]),
        ));
    }
    let mut vocab = header.vocab.unwrap_or_default();
    let provenance = header
        .provenance
        .unwrap_or_else(|| Provenance::external(&path.display().to_string()));
    let mut instances = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordIn = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let label = label_index(&rec.label).map_err(|_| parse_err(lineno, format!("unknown label {:?}", rec.label)))?;
        if label >= header.num_classes {
            return Err(parse_err(
                lineno,
                format!("label {:?} outside header classes", rec.label),
            ));
        }
        if rec.claim.is_empty() || rec.evidence.is_empty() {
            return Err(parse_err(lineno, "empty claim or evidence".into()));
        }
        instances.push(Instance {
            id: rec.id,
            claim: rec.claim.iter().map(|t| vocab.intern(t.as_str())).collect(),
            evidence: rec.evidence.iter().map(|t| vocab.intern(t.as_str())).collect(),
            label,
        });
    }
    let ds = Dataset {
        instances,
        vocab,
        num_classes: header.num_classes,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}
