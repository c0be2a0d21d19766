use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RawEvent;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    /// Picked from the header line: tab, semicolon or comma, whichever occurs most.
    #[default]
    Auto,
    Comma,
    Tab,
    Semicolon,
}

impl Delimiter {
    fn byte(self, header: &str) -> u8 {
        match self {
            Delimiter::Comma => b',',
            Delimiter::Tab => b'\t',
            Delimiter::Semicolon => b';',
            Delimiter::Auto => b"\t;,"
                .iter()
                .copied()
                .max_by_key(|&b| header.bytes().filter(|&c| c == b).count())
                .filter(|&b| header.as_bytes().contains(&b))
                .unwrap_or(b','),
        }
    }
}

/// Column layout of a delimited click log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatDescriptor {
    pub delimiter: Delimiter,
    pub session_column: String,
    pub timestamp_column: String,
    pub item_column: String,
}

impl Default for FormatDescriptor {
    fn default() -> Self {
        Self {
            delimiter: Delimiter::Auto,
            session_column: "session_id".into(),
            timestamp_column: "timestamp".into(),
            item_column: "item_id".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub events: Vec<RawEvent>,
    /// Rows dropped for missing or unparsable fields.
    pub skipped: usize,
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    raw.parse::<i64>().ok().or_else(|| {
        raw.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|v| v.floor() as i64)
    })
}

pub fn ingest(path: &Path, format: &FormatDescriptor) -> Result<Ingested> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = String::new();
    BufReader::new(file)
        .read_line(&mut header)
        .map_err(|e| Error::io(path, e))?;
    if header.trim().is_empty() {
        return Err(Error::NoRows(path.to_owned()));
    }
    let delimiter = format.delimiter.byte(&header);

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))
    };
    let session_col = column(&format.session_column)?;
    let time_col = column(&format.timestamp_column)?;
    let item_col = column(&format.item_column)?;

    let mut events = Vec::new();
    let mut skipped = 0;
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let field = |i: usize| record.get(i).filter(|s| !s.is_empty());
        match (field(session_col), field(time_col).and_then(parse_timestamp), field(item_col)) {
            (Some(s), Some(t), Some(i)) => events.push(RawEvent {
                session_key: s.to_owned(),
                timestamp: t,
                item_key: i.to_owned(),
            }),
            _ => skipped += 1,
        }
    }
    if events.is_empty() {
        return Err(Error::NoRows(path.to_owned()));
    }
    if skipped > 0 {
        log::info!("{}: skipped {skipped} malformed rows", path.display());
    }
    Ok(Ingested { events, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn well_formed_rows() {
        let f = write("session_id,timestamp,item_id\n1,10,a\n1,11,b\n2,12,a\n");
        let got = ingest(f.path(), &FormatDescriptor::default()).unwrap();
        assert_eq!(got.events.len(), 3);
        assert_eq!(got.skipped, 0);
        assert_eq!(got.events[1].item_key, "b");
        assert_eq!(got.events[2].timestamp, 12);
    }

    #[test]
    fn malformed_row_is_skipped_and_counted() {
        let f = write("session_id,timestamp,item_id\n1,10,a\n1,notatime,b\n2,12,a\n2,13,c\n");
        let got = ingest(f.path(), &FormatDescriptor::default()).unwrap();
        assert_eq!(got.events.len(), 3);
        assert_eq!(got.skipped, 1);
    }

    #[test]
    fn missing_field_is_skipped() {
        let f = write("session_id,timestamp,item_id\n1,10\n1,11,b\n");
        let got = ingest(f.path(), &FormatDescriptor::default()).unwrap();
        assert_eq!(got.events.len(), 1);
        assert_eq!(got.skipped, 1);
    }

    #[test]
    fn empty_file_has_zero_parsable_rows() {
        let f = write("");
        let err = ingest(f.path(), &FormatDescriptor::default()).unwrap_err();
        assert!(err.to_string().contains("zero parsable rows"), "{err}");
        let f = write("session_id,timestamp,item_id\n");
        assert!(matches!(
            ingest(f.path(), &FormatDescriptor::default()),
            Err(Error::NoRows(_))
        ));
    }

    #[test]
    fn tab_and_semicolon_are_detected_with_custom_columns() {
        let f = write("sid\tts\titem\n1\t5\tx\n");
        let format = FormatDescriptor {
            session_column: "sid".into(),
            timestamp_column: "ts".into(),
            item_column: "item".into(),
            ..Default::default()
        };
        assert_eq!(ingest(f.path(), &format).unwrap().events.len(), 1);
        let f = write("sessionId;userId;itemId;timeframe\n1;;9;100\n");
        let format = FormatDescriptor {
            session_column: "sessionId".into(),
            timestamp_column: "timeframe".into(),
            item_column: "itemId".into(),
            ..Default::default()
        };
        let got = ingest(f.path(), &format).unwrap();
        assert_eq!(got.events[0].item_key, "9");
        assert_eq!(got.events[0].timestamp, 100);
    }

    #[test]
    fn unknown_column_is_an_error() {
        let f = write("a,b,c\n1,2,3\n");
        assert!(matches!(
            ingest(f.path(), &FormatDescriptor::default()),
            Err(Error::MissingColumn(c)) if c == "session_id"
        ));
    }

    #[test]
    fn unreadable_file() {
        let err = ingest(Path::new("/nonexistent/file.csv"), &FormatDescriptor::default());
        assert!(matches!(err, Err(Error::Io { .. })));
    }
}
