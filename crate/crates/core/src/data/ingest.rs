use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionLog};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// `user,item,rating,timestamp` with an optional header row.
    AmazonCsv,
    /// JSON lines with `user_id`, `business_id` and either `timestamp` or `date`.
    YelpJson,
    /// `user<TAB>item<TAB>timestamp`.
    CanonicalTsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amazon_csv" => Ok(Self::AmazonCsv),
            "yelp_json" => Ok(Self::YelpJson),
            "canonical_tsv" => Ok(Self::CanonicalTsv),
            other => Err(Error::config(format!(
                "unknown format `{other}` (expected amazon_csv, yelp_json or canonical_tsv)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AmazonCsv => "amazon_csv",
            Self::YelpJson => "yelp_json",
            Self::CanonicalTsv => "canonical_tsv",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

fn parse_timestamp(s: &str) -> Option<i64> {
    let t: i64 = s.trim().parse().ok()?;
    (t >= 0).then_some(t)
}

fn parse_amazon(line: &str) -> Option<Interaction> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 || fields[0].is_empty() || fields[1].is_empty() {
        return None;
    }
    fields[2].parse::<f64>().ok()?;
    Some(Interaction {
        user: fields[0].to_owned(),
        item: fields[1].to_owned(),
        timestamp: parse_timestamp(fields[3])?,
    })
}

fn parse_yelp(line: &str) -> Option<Interaction> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let user = v.get("user_id")?.as_str()?;
    let item = v.get("business_id")?.as_str()?;
    if user.is_empty() || item.is_empty() {
        return None;
    }
    let timestamp = match (v.get("timestamp"), v.get("date")) {
        (Some(t), _) => t.as_i64().filter(|&t| t >= 0)?,
        (None, Some(d)) => NaiveDateTime::parse_from_str(d.as_str()?, "%Y-%m-%d %H:%M:%S")
            .ok()?
            .and_utc()
            .timestamp(),
        _ => return None,
    };
    Some(Interaction {
        user: user.to_owned(),
        item: item.to_owned(),
        timestamp,
    })
}

fn parse_tsv(line: &str) -> Option<Interaction> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 || fields[0].is_empty() || fields[1].is_empty() {
        return None;
    }
    Some(Interaction {
        user: fields[0].to_owned(),
        item: fields[1].to_owned(),
        timestamp: parse_timestamp(fields[2])?,
    })
}

/// Reads a log, skipping (and counting) malformed rows and duplicate triples.
pub fn ingest_reader(reader: impl BufRead, format: Format) -> Result<(InteractionLog, IngestReport)> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let parsed = match format {
            Format::AmazonCsv => parse_amazon(line),
            Format::YelpJson => parse_yelp(line),
            Format::CanonicalTsv => parse_tsv(line),
        };
        if i == 0 && parsed.is_none() && format == Format::AmazonCsv {
            continue;
        }
        report.rows += 1;
        match parsed {
            Some(rec) => {
                if seen.insert(rec.clone()) {
                    records.push(rec);
                } else {
                    report.duplicates += 1;
                }
            }
            None => report.malformed += 1,
        }
    }
    if report.rows > 0 && report.malformed * 2 > report.rows {
        return Err(Error::data(format!(
            "{} of {} rows are malformed",
            report.malformed, report.rows
        )));
    }
    if report.malformed > 0 {
        log::warn!("skipped {} malformed rows of {}", report.malformed, report.rows);
    }
    Ok((InteractionLog { records }, report))
}

pub fn ingest(path: &Path, format: Format) -> Result<(InteractionLog, IngestReport)> {
    let file = std::fs::File::open(path)?;
    ingest_reader(BufReader::new(file), format)
}

/// Writes the canonical TSV form.
pub fn export_canonical(log: &InteractionLog, mut out: impl Write) -> Result<()> {
    for r in &log.records {
        writeln!(out, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_rows() {
        let (log, report) = ingest_reader("a\tx\t1\nb\ty\t2\na\ty\t3\n".as_bytes(), Format::CanonicalTsv).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(report.malformed, 0);
    }

    #[test]
    fn missing_timestamp_is_counted() {
        let (log, report) = ingest_reader("a\tx\t1\nb\ty\t\na\ty\t3\n".as_bytes(), Format::CanonicalTsv).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(report.malformed, 1);
    }

    #[test]
    fn mostly_malformed_is_an_error() {
        let r = ingest_reader("a\tx\nb\ty\na\ty\t3\n".as_bytes(), Format::CanonicalTsv);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn duplicates_removed() {
        let (log, report) = ingest_reader("a\tx\t1\na\tx\t1\n".as_bytes(), Format::CanonicalTsv).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(report.duplicates, 1);
    }

    #[test]
    fn amazon_with_header() {
        let src = "user,item,rating,timestamp\nA1,B1,5.0,1000\nA2,B1,3,1001\n";
        let (log, report) = ingest_reader(src.as_bytes(), Format::AmazonCsv).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(report.rows, 2);
        assert_eq!(log.records[1].timestamp, 1001);
    }

    #[test]
    fn yelp_dates_and_timestamps() {
        let src = concat!(
            r#"{"user_id":"u","business_id":"b","date":"1970-01-02 00:00:00"}"#,
            "\n",
            r#"{"user_id":"u","business_id":"c","timestamp":5}"#,
            "\n"
        );
        let (log, _) = ingest_reader(src.as_bytes(), Format::YelpJson).unwrap();
        assert_eq!(log.records[0].timestamp, 86_400);
        assert_eq!(log.records[1].timestamp, 5);
    }

    #[test]
    fn unknown_format_name() {
        assert!("parquet".parse::<Format>().is_err());
        assert_eq!("yelp_json".parse::<Format>().unwrap(), Format::YelpJson);
    }
}
