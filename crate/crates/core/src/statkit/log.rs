use std::fs::File;
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ALOG_MAGIC: &[u8; 4] = b"ALOG";
const ALOG_VERSION: u8 = 1;
const NO_TOKEN: u32 = u32::MAX;

/// One recorded row: where it came from and its non-zero count per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u32,
    pub pos: u32,
    pub token: Option<u32>,
    pub counts: Vec<u32>,
}

/// Per-row, per-layer non-zero counts of hidden activations.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActivationLog {
    pub layers: usize,
    pub records: Vec<LogRecord>,
}

impl ActivationLog {
    pub fn new(layers: usize) -> Self {
        ActivationLog {
            layers,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<()> {
        if rec.counts.len() != self.layers {
            return Err(Error::Statistics(format!(
                "record has {} layer counts, log has {} layers",
                rec.counts.len(),
                self.layers
            )));
        }
        self.records.push(rec);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    /// `ALOG` magic, version byte, u32 layer count, then per row
    /// `seq, pos, token (u32::MAX for none), counts[layers]`, all u32 LE.
    Alog,
    /// Header `seq,pos,token,nnz_layer_0,…`; `token` empty when absent.
    Csv,
}

/// Writes the binary `ALOG` form.
pub fn write_alog<W: Write>(mut out: W, log: &ActivationLog) -> Result<()> {
    out.write_all(ALOG_MAGIC)?;
    out.write_all(&[ALOG_VERSION])?;
    out.write_all(&(log.layers as u32).to_le_bytes())?;
    for r in &log.records {
        if r.counts.len() != log.layers {
            return Err(Error::Statistics("record layer count disagrees with the log".into()));
        }
        let token = r.token.unwrap_or(NO_TOKEN);
        for v in [r.seq, r.pos, token].iter().chain(&r.counts) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes the CSV form.
pub fn write_log_csv<W: Write>(out: W, log: &ActivationLog) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["seq".to_string(), "pos".into(), "token".into()];
    header.extend((0..log.layers).map(|l| format!("nnz_layer_{l}")));
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![
            r.seq.to_string(),
            r.pos.to_string(),
            r.token.map(|t| t.to_string()).unwrap_or_default(),
        ];
        row.extend(r.counts.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

enum Source {
    Alog(Box<dyn Read>),
    Csv(csv::StringRecordsIntoIter<Box<dyn Read>>),
}

/// A record-at-a-time reader over either log format.
pub struct LogStream {
    layers: usize,
    format: LogFormat,
    source: Source,
    row: u64,
}

impl LogStream {
    /// Detects the format from the leading bytes.
    pub fn new<R: Read + 'static>(reader: R) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let head = reader.fill_buf()?;
        if head.starts_with(ALOG_MAGIC) {
            let mut fixed = [0u8; 9];
            reader
                .read_exact(&mut fixed)
                .map_err(|_| Error::Format("truncated ALOG header".into()))?;
            if fixed[4] != ALOG_VERSION {
                return Err(Error::Format(format!("unsupported ALOG version {}", fixed[4])));
            }
            let layers = u32::from_le_bytes(fixed[5..9].try_into().expect("4 bytes")) as usize;
            return Ok(LogStream {
                layers,
                format: LogFormat::Alog,
                source: Source::Alog(Box::new(reader)),
                row: 0,
            });
        }
        let mut rdr = csv::Reader::from_reader(Box::new(reader) as Box<dyn Read>);
        let header = rdr.headers()?.clone();
        let fields: Vec<&str> = header.iter().collect();
        if fields.len() < 3 || fields[..3] != ["seq", "pos", "token"] {
            return Err(Error::Format(
                "activation log is neither ALOG nor a seq,pos,token CSV".into(),
            ));
        }
        for (l, f) in fields[3..].iter().enumerate() {
            if *f != format!("nnz_layer_{l}") {
                return Err(Error::Format(format!("unexpected CSV column {f:?}")));
            }
        }
        Ok(LogStream {
            layers: fields.len() - 3,
            format: LogFormat::Csv,
            source: Source::Csv(rdr.into_records()),
            row: 0,
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(File::open(path)?)
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn format(&self) -> LogFormat {
        self.format
    }

    fn next_alog(r: &mut dyn Read, layers: usize, row: u64) -> Option<Result<LogRecord>> {
        let width = 4 * (3 + layers);
        let mut buf = vec![0u8; width];
        let mut filled = 0;
        while filled < width {
            match r.read(&mut buf[filled..]) {
                Ok(0) if filled == 0 => return None,
                Ok(0) => return Some(Err(Error::Format(format!("truncated ALOG record {row}")))),
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Some(Err(e.into())),
            }
        }
        let words: Vec<u32> = buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Some(Ok(LogRecord {
            seq: words[0],
            pos: words[1],
            token: (words[2] != NO_TOKEN).then_some(words[2]),
            counts: words[3..].to_vec(),
        }))
    }

    fn parse_csv(rec: &csv::StringRecord, layers: usize, row: u64) -> Result<LogRecord> {
        let bad = |what: &str| Error::Format(format!("CSV row {row}: bad {what}"));
        if rec.len() != layers + 3 {
            return Err(bad("field count"));
        }
        let num = |i: usize, what: &str| rec[i].trim().parse::<u32>().map_err(|_| bad(what));
        let token = match rec[2].trim() {
            "" => None,
            _ => Some(num(2, "token")?),
        };
        Ok(LogRecord {
            seq: num(0, "seq")?,
            pos: num(1, "pos")?,
            token,
            counts: (0..layers).map(|l| num(3 + l, "count")).collect::<Result<_>>()?,
        })
    }
}

impl Iterator for LogStream {
    type Item = Result<LogRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let row = self.row;
        self.row += 1;
        match &mut self.source {
            Source::Alog(r) => Self::next_alog(r.as_mut(), self.layers, row),
            Source::Csv(it) => it.next().map(|r| {
                r.map_err(Error::from)
                    .and_then(|r| Self::parse_csv(&r, self.layers, row))
            }),
        }
    }
}

/// Reads a whole log file into memory.
pub fn read_log(path: impl AsRef<Path>) -> Result<ActivationLog> {
    collect(LogStream::open(path)?)
}

/// Reads a whole log from bytes in either format.
pub fn read_log_bytes(bytes: &[u8]) -> Result<ActivationLog> {
    collect(LogStream::new(Cursor::new(bytes.to_vec()))?)
}

fn collect(stream: LogStream) -> Result<ActivationLog> {
    let mut log = ActivationLog::new(stream.layers());
    for rec in stream {
        log.push(rec?)?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ActivationLog {
        ActivationLog {
            layers: 2,
            records: vec![
                LogRecord {
                    seq: 0,
                    pos: 0,
                    token: Some(5),
                    counts: vec![3, 0],
                },
                LogRecord {
                    seq: 0,
                    pos: 1,
                    token: None,
                    counts: vec![7, 12],
                },
            ],
        }
    }

    #[test]
    fn alog_round_trip() {
        let mut buf = Vec::new();
        write_alog(&mut buf, &sample()).unwrap();
        assert_eq!(&buf[..4], b"ALOG");
        assert_eq!(buf.len(), 9 + 2 * 4 * 5);
        assert_eq!(read_log_bytes(&buf).unwrap(), sample());
        assert!(matches!(read_log_bytes(&buf[..buf.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_log_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("seq,pos,token,nnz_layer_0,nnz_layer_1\n0,0,5,3,0\n0,1,,7,12\n"));
        assert_eq!(read_log_bytes(&buf).unwrap(), sample());
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_log_bytes(b"a,b\n1,2\n").is_err());
        assert!(read_log_bytes(b"seq,pos,token,nnz_layer_0\n1,x,,3\n").is_err());
    }
}
