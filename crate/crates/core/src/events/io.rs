//! Text format: a header line `W H t_start t_end` followed by one `t x y p`
//! record per line. Binary format: magic `EVB1`, then little-endian
//! `u32 W, u32 H, f64 t_start, f64 t_end, u64 count` and fixed 17-byte
//! records `f64 t, u32 x, u32 y, i8 p`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 4] = b"EVB1";
const RECORD_BYTES: usize = 17;

/// Reads either format, detected from the leading magic bytes.
pub fn read_events(path: &Path) -> Result<EventStream> {
    let mut head = [0u8; 4];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    if n == 4 && &head == BINARY_MAGIC {
        read_events_binary(path)
    } else {
        read_events_text(path)
    }
}

/// Writes the binary format for `.evb` paths and the text format otherwise.
pub fn write_events(stream: &EventStream, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "evb") {
        write_events_binary(stream, path)
    } else {
        write_events_text(stream, path)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| parse_err(line, format!("bad {what} {tok:?}")))
}

pub fn read_events_text(path: &Path) -> Result<EventStream> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "missing header")),
    };
    let mut toks = header.split_whitespace();
    let width: usize = field(toks.next(), 1, "width")?;
    let height: usize = field(toks.next(), 1, "height")?;
    let t_start: f64 = field(toks.next(), 1, "t_start")?;
    let t_end: f64 = field(toks.next(), 1, "t_end")?;
    if toks.next().is_some() {
        return Err(parse_err(1, "trailing header fields"));
    }
    let mut stream = EventStream::empty(width, height, t_start, t_end).map_err(|e| parse_err(1, e.to_string()))?;

    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let t: f64 = field(toks.next(), lineno, "timestamp")?;
        let x: u32 = field(toks.next(), lineno, "x")?;
        let y: u32 = field(toks.next(), lineno, "y")?;
        let p: i64 = field(toks.next(), lineno, "polarity")?;
        if toks.next().is_some() {
            return Err(parse_err(lineno, "trailing fields"));
        }
        let p = Polarity::from_i64(p).ok_or_else(|| parse_err(lineno, format!("polarity must be +1 or -1, got {p}")))?;
        push_checked(&mut stream, Event::new(x, y, t, p), lineno)?;
    }
    Ok(stream)
}

fn push_checked(stream: &mut EventStream, e: Event, line: usize) -> Result<()> {
    if e.x as usize >= stream.width || e.y as usize >= stream.height {
        return Err(parse_err(line, format!("event ({}, {}) outside sensor", e.x, e.y)));
    }
    if !e.t.is_finite() || e.t < stream.t_start || e.t > stream.t_end {
        return Err(parse_err(line, format!("timestamp {} outside window", e.t)));
    }
    if stream.events.last().is_some_and(|prev| e.t < prev.t) {
        return Err(parse_err(line, "events not sorted by time"));
    }
    stream.events.push(e);
    Ok(())
}

pub fn write_events_text(stream: &EventStream, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    // `{:?}` prints the shortest representation that parses back to the
    // same f64.
    writeln!(w, "{} {} {:?} {:?}", stream.width, stream.height, stream.t_start, stream.t_end).map_err(io)?;
    for e in &stream.events {
        writeln!(w, "{:?} {} {} {}", e.t, e.x, e.y, e.p.as_i8()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_events_binary(stream: &EventStream, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + stream.len() * RECORD_BYTES);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&(stream.width as u32).to_le_bytes());
    buf.extend_from_slice(&(stream.height as u32).to_le_bytes());
    buf.extend_from_slice(&stream.t_start.to_le_bytes());
    buf.extend_from_slice(&stream.t_end.to_le_bytes());
    buf.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in &stream.events {
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.push(e.p.as_i8() as u8);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_events_binary(path: &Path) -> Result<EventStream> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Records are numbered from 1 so errors read like line numbers; the
    // header is record 0.
    let header_len = 4 + 4 + 4 + 8 + 8 + 8;
    if buf.len() < header_len || &buf[..4] != BINARY_MAGIC {
        return Err(parse_err(0, "truncated or missing binary header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let (width, height) = (u32_at(4) as usize, u32_at(8) as usize);
    let (t_start, t_end) = (f64_at(12), f64_at(20));
    let count = u64::from_le_bytes(buf[28..36].try_into().unwrap()) as usize;
    if buf.len() != header_len + count * RECORD_BYTES {
        return Err(parse_err(0, format!("expected {count} records, file size disagrees")));
    }
    let mut stream = EventStream::empty(width, height, t_start, t_end).map_err(|e| parse_err(0, e.to_string()))?;
    stream.events.reserve(count);
    for i in 0..count {
        let o = header_len + i * RECORD_BYTES;
        let t = f64_at(o);
        let (x, y) = (u32_at(o + 8), u32_at(o + 12));
        let raw = buf[o + 16] as i8;
        let p = Polarity::from_i64(raw as i64)
            .ok_or_else(|| parse_err(i + 1, format!("polarity must be +1 or -1, got {raw}")))?;
        push_checked(&mut stream, Event::new(x, y, t, p), i + 1)?;
    }
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EventStream {
        EventStream::new(
            5,
            3,
            0.0,
            0.7,
            vec![
                Event::new(0, 0, 0.1, Polarity::Positive),
                Event::new(4, 2, 0.1 + 0.2, Polarity::Negative),
                Event::new(2, 1, 0.7, Polarity::Positive),
            ],
        )
        .unwrap()
    }

    #[test]
    fn text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.evt");
        write_events(&sample(), &p).unwrap();
        assert_eq!(read_events(&p).unwrap(), sample());
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.evb");
        write_events(&sample(), &p).unwrap();
        assert_eq!(read_events(&p).unwrap(), sample());
    }

    #[test]
    fn zero_polarity_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.evt");
        fs::write(&p, "4 4 0 1\n0.1 0 0 1\n0.2 1 1 0\n").unwrap();
        match read_events(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.evt");
        fs::write(&p, "32 24 0.5 1.5\n").unwrap();
        let s = read_events(&p).unwrap();
        assert_eq!((s.width, s.height, s.t_start, s.t_end), (32, 24, 0.5, 1.5));
        assert!(s.is_empty());
    }

    #[test]
    fn missing_header_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.evt");
        fs::write(&p, "").unwrap();
        assert!(matches!(read_events(&p), Err(Error::Parse { line: 1, .. })));
        fs::write(&p, "4 4 0 1\n0.1 zero 0 1\n").unwrap();
        assert!(matches!(read_events(&p), Err(Error::Parse { line: 2, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn both_formats_round_trip_bit_exactly(
            raw in prop::collection::vec((0u32..7, 0u32..5, 0.0f64..3.0, any::<bool>()), 0..50)
        ) {
            let mut ev: Vec<Event> = raw.into_iter()
                .map(|(x, y, t, p)| Event::new(x, y, t, if p { Polarity::Positive } else { Polarity::Negative }))
                .collect();
            ev.sort_by(|a, b| a.t.total_cmp(&b.t));
            let s = EventStream::new(7, 5, 0.0, 3.0, ev).unwrap();
            let dir = tempfile::tempdir().unwrap();
            for name in ["a.evt", "a.evb"] {
                let p = dir.path().join(name);
                write_events(&s, &p).unwrap();
                let back = read_events(&p).unwrap();
                prop_assert_eq!(back.events.len(), s.events.len());
                for (a, b) in back.events.iter().zip(&s.events) {
                    prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
                    prop_assert_eq!((a.x, a.y, a.p), (b.x, b.y, b.p));
                }
            }
        }
    }
}
