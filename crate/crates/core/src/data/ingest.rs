use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::data::{Interaction, InteractionLog};
use crate::error::{Error, Result};

/// Line accounting from [`ingest`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    /// Non-blank, non-comment lines seen.
    pub lines: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

/// Reads a `user<TAB>item<TAB>timestamp` file. Lines starting with `#` and
/// blank lines are ignored; exact duplicate triples are dropped.
pub fn ingest(path: impl AsRef<Path>) -> Result<(InteractionLog, IngestReport)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_tsv(reader: impl BufRead) -> Result<(InteractionLog, IngestReport)> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        report.lines += 1;
        let Some(rec) = parse_line(line) else {
            report.malformed += 1;
            continue;
        };
        if seen.insert(rec.clone()) {
            records.push(rec);
        } else {
            report.duplicates += 1;
        }
    }
    if report.malformed * 100 > report.lines {
        return Err(Error::Format(format!(
            "{} of {} lines malformed (more than 1%)",
            report.malformed, report.lines
        )));
    }
    Ok((InteractionLog::new(records), report))
}

fn parse_line(line: &str) -> Option<Interaction> {
    let mut fields = line.split('\t');
    let user = fields.next()?;
    let item = fields.next()?;
    let ts = fields.next()?;
    if fields.next().is_some() || user.is_empty() || item.is_empty() {
        return None;
    }
    let timestamp = ts.trim().parse().ok()?;
    Some(Interaction::new(user, item, timestamp))
}

/// Writes a log in the same format [`ingest`] reads.
pub fn write_tsv(log: &InteractionLog, mut out: impl Write) -> std::io::Result<()> {
    for r in &log.records {
        writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
    }
    Ok(())
}
