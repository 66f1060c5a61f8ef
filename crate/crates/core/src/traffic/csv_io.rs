//! Flat CSV flow format.
//!
//! Columns: `flow_id, packet_index, arrival_time_s, size_bytes, chaff, label`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Flow, Label, PacketEvent};
use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = [
    "flow_id",
    "packet_index",
    "arrival_time_s",
    "size_bytes",
    "chaff",
    "label",
];

pub fn load_flows(path: &Path) -> Result<Vec<Flow>> {
    let file = File::open(path)?;
    read_flows(file, path)
}

/// Parses flows from any reader; `origin` is used in error messages.
pub fn read_flows<R: Read>(reader: R, origin: &Path) -> Result<Vec<Flow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Label, Vec<PacketEvent>)> = HashMap::new();

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line()) as usize;
        if i == 0 && rec.get(0) == Some(HEADER[0]) {
            continue;
        }
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        if rec.len() != HEADER.len() {
            return Err(bad(format!("expected {} columns, found {}", HEADER.len(), rec.len())));
        }
        let id = rec[0].to_string();
        let time: f64 = rec[2]
            .parse()
            .map_err(|_| bad(format!("bad arrival_time_s `{}`", &rec[2])))?;
        if !time.is_finite() || time < 0.0 {
            return Err(bad(format!("arrival time {time} is not a non-negative number")));
        }
        let size: u32 = rec[3]
            .parse()
            .map_err(|_| bad(format!("bad size_bytes `{}`", &rec[3])))?;
        if size == 0 {
            return Err(bad("packet size must be at least 1".into()));
        }
        let chaff = match &rec[4] {
            "" | "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(bad(format!("bad chaff flag `{other}`"))),
        };
        let label: Label = rec[5].parse().map_err(|e: Error| bad(e.to_string()))?;

        let entry = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (label, Vec::new())
        });
        if let Some(prev) = entry.1.last() {
            if time < prev.arrival_time {
                return Err(Error::NonMonotone {
                    path: origin.to_path_buf(),
                    line,
                    flow: id,
                });
            }
        }
        entry.1.push(PacketEvent {
            arrival_time: time,
            size,
            chaff,
        });
    }

    order
        .into_iter()
        .map(|id| {
            let (label, events) = groups.remove(&id).expect("grouped id");
            Flow::new(id, label, events)
        })
        .collect()
}

pub fn save_flows(path: &Path, flows: &[Flow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path)?;
    write_flows(file, flows)
}

pub fn write_flows<W: Write>(writer: W, flows: &[Flow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEADER)?;
    for f in flows {
        for (i, e) in f.events().iter().enumerate() {
            w.write_record([
                f.id.clone(),
                i.to_string(),
                e.arrival_time.to_string(),
                e.size.to_string(),
                u8::from(e.chaff).to_string(),
                f.label.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<Vec<Flow>> {
        read_flows(text.as_bytes(), &PathBuf::from("mem.csv"))
    }

    #[test]
    fn two_rows_make_one_flow() {
        let flows = parse(
            "flow_id,packet_index,arrival_time_s,size_bytes,chaff,label\n\
             f1,0,0.0,100,0,benign\n\
             f1,1,0.001,200,0,benign\n",
        )
        .unwrap();
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].ipds(), vec![0.0, 0.001]);
        assert!(flows[0].events().iter().all(|e| !e.chaff));
    }

    #[test]
    fn empty_input_gives_no_flows() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn non_monotone_timestamps_are_reported() {
        let err = parse("f1,0,0.5,100,0,benign\nf1,1,0.2,80,0,benign\n").unwrap_err();
        match err {
            Error::NonMonotone { line, flow, .. } => {
                assert_eq!(line, 2);
                assert_eq!(flow, "f1");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let err = parse("flow_id,packet_index,arrival_time_s,size_bytes,chaff,label\nf1,0,abc,100,0,benign\n")
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn chaff_column_defaults_to_false() {
        let flows = parse("f1,0,0.0,100,,malicious\n").unwrap();
        assert!(!flows[0].events()[0].chaff);
        assert_eq!(flows[0].label, Label::Malicious);
    }
}
