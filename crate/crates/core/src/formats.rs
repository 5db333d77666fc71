//! On-disk formats.
//!
//! * Packet records: UTF-8 CSV lines
//!   `src_ip,src_port,dst_ip,dst_port,proto,timestamp,direction,payload_len`.
//!   Lines starting with `#` and blank lines are ignored.
//! * Mapping table: CSV lines `inbound_port,outbound_port,created_at`, same
//!   comment rules.
//! * Pair dataset: JSON lines. The first line is a header
//!   `{"schema_version":1,"n":N,"labels":[...]}`, every following line is one
//!   pair `{"label":..,"tunnel":..,"tls":{..},"tun":{..}}` where each side
//!   holds `key`, `start_time` and the unpadded `tokens`.
//! * Flow file: JSON lines with header
//!   `{"schema_version":1,"n":N,"kind":"tls"|"tunnel","labels":[...]}` and one
//!   flow per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::flow::{
    FlowKey, FlowKind, FlowSequence, PacketRecord, ParallelFlowPair, Protocol, VOCAB_SIZE,
};
use crate::ingest::{MappingEntry, MappingTable};

pub const SCHEMA_VERSION: u64 = 1;

const PACKET_FIELDS: [&str; 8] = [
    "src_ip",
    "src_port",
    "dst_ip",
    "dst_port",
    "proto",
    "timestamp",
    "direction",
    "payload_len",
];

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Yields `(1-based line number, trimmed line)` for non-comment lines.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push((i + 1, t.to_string()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    field: &str,
    raw: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .parse::<T>()
        .map_err(|e| Error::parse(path, line, field, format!("`{raw}`: {e}")))
}

pub fn read_packet_records(path: &Path) -> Result<Vec<PacketRecord>> {
    let mut out = Vec::new();
    for (line, text) in data_lines(path)? {
        let cols: Vec<&str> = text.split(',').collect();
        if cols.len() != PACKET_FIELDS.len() {
            let field = PACKET_FIELDS.get(cols.len()).copied().unwrap_or("payload_len");
            return Err(Error::parse(
                path,
                line,
                field,
                format!("expected {} columns, found {}", PACKET_FIELDS.len(), cols.len()),
            ));
        }
        let timestamp: f64 = parse_field(path, line, "timestamp", cols[5])?;
        if !timestamp.is_finite() {
            return Err(Error::parse(path, line, "timestamp", "not finite"));
        }
        out.push(PacketRecord {
            src_ip: cols[0].trim().to_string(),
            src_port: parse_field(path, line, "src_port", cols[1])?,
            dst_ip: cols[2].trim().to_string(),
            dst_port: parse_field(path, line, "dst_port", cols[3])?,
            protocol: parse_field::<Protocol>(path, line, "proto", cols[4])?,
            timestamp,
            direction: parse_field(path, line, "direction", cols[6])?,
            payload_len: parse_field(path, line, "payload_len", cols[7])?,
        });
    }
    Ok(out)
}

pub fn write_packet_records<'a, I>(path: &Path, records: I) -> Result<usize>
where
    I: IntoIterator<Item = &'a PacketRecord>,
{
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "# {}", PACKET_FIELDS.join(",")).map_err(io)?;
    let mut count = 0;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.src_ip,
            r.src_port,
            r.dst_ip,
            r.dst_port,
            r.protocol,
            r.timestamp,
            r.direction,
            r.payload_len
        )
        .map_err(io)?;
        count += 1;
    }
    w.flush().map_err(io)?;
    Ok(count)
}

pub fn read_mapping_table(path: &Path) -> Result<MappingTable> {
    let mut entries = Vec::new();
    for (line, text) in data_lines(path)? {
        let cols: Vec<&str> = text.split(',').collect();
        let names = ["inbound_port", "outbound_port", "created_at"];
        if cols.len() != 3 {
            return Err(Error::parse(
                path,
                line,
                names.get(cols.len()).copied().unwrap_or("created_at"),
                format!("expected 3 columns, found {}", cols.len()),
            ));
        }
        let inbound: u16 = parse_field(path, line, names[0], cols[0])?;
        let outbound: u16 = parse_field(path, line, names[1], cols[1])?;
        for (name, port) in [(names[0], inbound), (names[1], outbound)] {
            if port == 0 {
                return Err(Error::parse(path, line, name, "port 0 is not valid"));
            }
        }
        entries.push(MappingEntry {
            inbound,
            outbound,
            created_at: parse_field(path, line, names[2], cols[2])?,
        });
    }
    MappingTable::new(entries)
}

pub fn write_mapping_table(path: &Path, table: &MappingTable) -> Result<usize> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "# inbound_port,outbound_port,created_at").map_err(io)?;
    for e in table.entries() {
        writeln!(w, "{},{},{}", e.inbound, e.outbound, e.created_at).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(table.len())
}

/// Header of a pair dataset file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetHeader {
    pub n: usize,
    pub labels: Vec<String>,
}

fn key_json(k: &FlowKey) -> Value {
    json!({
        "src_ip": k.src_ip,
        "src_port": k.src_port,
        "dst_ip": k.dst_ip,
        "dst_port": k.dst_port,
        "proto": k.protocol.to_string(),
    })
}

fn side_json(f: &FlowSequence) -> Value {
    json!({
        "key": key_json(&f.key),
        "start_time": f.start_time,
        "tokens": f.valid_tokens(),
    })
}

/// Field access on a parsed JSON line that reports the dotted field path.
struct Fields<'a> {
    path: &'a Path,
    line: usize,
}

impl Fields<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::parse(self.path, self.line, field, msg)
    }

    fn get<'v>(&self, obj: &'v Value, prefix: &str, name: &str) -> Result<&'v Value> {
        let field = join(prefix, name);
        obj.as_object()
            .ok_or_else(|| self.err(prefix, "expected an object"))?
            .get(name)
            .ok_or_else(|| self.err(&field, "missing"))
    }

    fn uint(&self, obj: &Value, prefix: &str, name: &str, max: u64) -> Result<u64> {
        let field = join(prefix, name);
        let v = self
            .get(obj, prefix, name)?
            .as_u64()
            .ok_or_else(|| self.err(&field, "expected a non-negative integer"))?;
        if v > max {
            return Err(self.err(&field, format!("{v} exceeds {max}")));
        }
        Ok(v)
    }

    fn float(&self, obj: &Value, prefix: &str, name: &str) -> Result<f64> {
        let field = join(prefix, name);
        self.get(obj, prefix, name)?
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.err(&field, "expected a finite number"))
    }

    fn string(&self, obj: &Value, prefix: &str, name: &str) -> Result<String> {
        let field = join(prefix, name);
        self.get(obj, prefix, name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(&field, "expected a string"))
    }

    fn labels(&self, obj: &Value) -> Result<Vec<String>> {
        match obj.get("labels") {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| self.err("labels", "expected strings"))
                })
                .collect(),
            Some(_) => Err(self.err("labels", "expected an array")),
        }
    }

    fn header(&self, v: &Value) -> Result<usize> {
        let version = self.uint(v, "", "schema_version", u64::MAX)?;
        if version != SCHEMA_VERSION {
            return Err(self.err(
                "schema_version",
                format!("unsupported version {version}, expected {SCHEMA_VERSION}"),
            ));
        }
        let n = self.uint(v, "", "n", u32::MAX as u64)? as usize;
        if n == 0 {
            return Err(self.err("n", "must be >= 1"));
        }
        Ok(n)
    }

    fn key(&self, obj: &Value, prefix: &str) -> Result<FlowKey> {
        let k = self.get(obj, prefix, "key")?;
        let p = join(prefix, "key");
        let proto = self.string(k, &p, "proto")?;
        Ok(FlowKey {
            src_ip: self.string(k, &p, "src_ip")?,
            src_port: self.uint(k, &p, "src_port", u16::MAX as u64)? as u16,
            dst_ip: self.string(k, &p, "dst_ip")?,
            dst_port: self.uint(k, &p, "dst_port", u16::MAX as u64)? as u16,
            protocol: proto
                .parse()
                .map_err(|e: String| self.err(&join(&p, "proto"), e))?,
        })
    }

    fn flow(
        &self,
        obj: &Value,
        prefix: &str,
        n: usize,
        label: Option<usize>,
        kind: FlowKind,
    ) -> Result<FlowSequence> {
        let tokens_field = join(prefix, "tokens");
        let raw = self
            .get(obj, prefix, "tokens")?
            .as_array()
            .ok_or_else(|| self.err(&tokens_field, "expected an array"))?
            .iter()
            .map(|t| {
                t.as_u64()
                    .filter(|&t| t >= 1 && (t as usize) < VOCAB_SIZE)
                    .map(|t| t as u16)
                    .ok_or_else(|| self.err(&tokens_field, format!("invalid token {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if raw.is_empty() {
            return Err(self.err(&tokens_field, "empty token list"));
        }
        if raw.len() > n {
            return Err(self.err(
                &tokens_field,
                format!("{} tokens exceed n = {n}", raw.len()),
            ));
        }
        FlowSequence::from_tokens(
            self.key(obj, prefix)?,
            self.float(obj, prefix, "start_time")?,
            &raw,
            n,
            label,
            kind,
        )
        .map_err(|e| self.err(&tokens_field, e.to_string()))
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn parse_line(path: &Path, line: usize, text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::parse(path, line, "<record>", e.to_string()))
}

fn check_label(f: &Fields<'_>, label: u64, labels: &[String]) -> Result<usize> {
    if !labels.is_empty() && label as usize >= labels.len() {
        return Err(f.err(
            "label",
            format!("{label} outside the {} declared labels", labels.len()),
        ));
    }
    Ok(label as usize)
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, pairs: &[ParallelFlowPair]) -> Result<usize> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let head = json!({
        "schema_version": SCHEMA_VERSION,
        "n": header.n,
        "labels": header.labels,
    });
    writeln!(w, "{head}").map_err(io)?;
    for p in pairs {
        if p.tls.seq_len() != header.n || p.tun.seq_len() != header.n {
            return Err(Error::InvalidInput(format!(
                "pair sequence length differs from header n = {}",
                header.n
            )));
        }
        let mut rec = Map::new();
        rec.insert("label".into(), json!(p.label));
        rec.insert("tunnel".into(), json!(p.tunnel));
        rec.insert("tls".into(), side_json(&p.tls));
        rec.insert("tun".into(), side_json(&p.tun));
        writeln!(w, "{}", Value::Object(rec)).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(pairs.len())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<ParallelFlowPair>)> {
    let lines = data_lines(path)?;
    let Some((first, head_text)) = lines.first() else {
        return Err(Error::parse(path, 1, "schema_version", "missing header line"));
    };
    let f = Fields { path, line: *first };
    let head = parse_line(path, *first, head_text)?;
    let n = f.header(&head)?;
    let header = DatasetHeader {
        n,
        labels: f.labels(&head)?,
    };
    let mut pairs = Vec::with_capacity(lines.len().saturating_sub(1));
    for (line, text) in &lines[1..] {
        let f = Fields { path, line: *line };
        let v = parse_line(path, *line, text)?;
        let label = check_label(&f, f.uint(&v, "", "label", u32::MAX as u64)?, &header.labels)?;
        let tunnel = match v.get("tunnel") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(f.err("tunnel", "expected a string or null")),
        };
        let tls_v = f.get(&v, "", "tls")?;
        let tun_v = f.get(&v, "", "tun")?;
        let tls = f.flow(tls_v, "tls", n, Some(label), FlowKind::Tls)?;
        let tun = f.flow(tun_v, "tun", n, Some(label), FlowKind::Tunnel)?;
        pairs.push(
            ParallelFlowPair::new(tls, tun, label, tunnel)
                .map_err(|e| f.err("label", e.to_string()))?,
        );
    }
    Ok((header, pairs))
}

pub fn write_flows(path: &Path, header: &DatasetHeader, kind: FlowKind, flows: &[FlowSequence]) -> Result<usize> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let kind_name = match kind {
        FlowKind::Tls => "tls",
        FlowKind::Tunnel => "tunnel",
    };
    let head = json!({
        "schema_version": SCHEMA_VERSION,
        "n": header.n,
        "kind": kind_name,
        "labels": header.labels,
    });
    writeln!(w, "{head}").map_err(io)?;
    for fl in flows {
        if fl.kind != kind {
            return Err(Error::InvalidInput(format!(
                "flow {} has kind {}, file kind is {kind_name}",
                fl.key, fl.kind
            )));
        }
        let mut rec = side_json(fl);
        rec["label"] = json!(fl.label);
        writeln!(w, "{rec}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(flows.len())
}

pub fn read_flows(path: &Path) -> Result<(DatasetHeader, FlowKind, Vec<FlowSequence>)> {
    let lines = data_lines(path)?;
    let Some((first, head_text)) = lines.first() else {
        return Err(Error::parse(path, 1, "schema_version", "missing header line"));
    };
    let f = Fields { path, line: *first };
    let head = parse_line(path, *first, head_text)?;
    let n = f.header(&head)?;
    let kind = match f.string(&head, "", "kind")?.as_str() {
        "tls" => FlowKind::Tls,
        "tunnel" | "tun" => FlowKind::Tunnel,
        other => return Err(f.err("kind", format!("unknown flow kind `{other}`"))),
    };
    let header = DatasetHeader {
        n,
        labels: f.labels(&head)?,
    };
    let mut flows = Vec::new();
    for (line, text) in &lines[1..] {
        let f = Fields { path, line: *line };
        let v = parse_line(path, *line, text)?;
        let label = match v.get("label") {
            None | Some(Value::Null) => None,
            Some(_) => Some(check_label(
                &f,
                f.uint(&v, "", "label", u32::MAX as u64)?,
                &header.labels,
            )?),
        };
        flows.push(f.flow(&v, "", n, label, kind)?);
    }
    Ok((header, kind, flows))
}
