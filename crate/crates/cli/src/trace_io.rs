//! Line-oriented text format for context traces.
//!
//! ```text
//! tcc-trace 1
//! record level=0 stride=4 stage=before round=0 item=0 query=8,8 query_px=34,34 keys=4 entries=5
//! key cell=3,5 px=14,22 score=0.81 gate=0.69
//! attn rank=1 entry=0 weight=0.42
//! ```
//!
//! Each `record` line is followed by its `key` lines and then its `attn`
//! lines, in descending weight order. Floats are written in shortest
//! round-trip form, so parsing restores the exact bits.

use std::collections::HashMap;

use tcc_core::synth::{TraceAttention, TraceKey, TraceRecord};
use tcc_core::tcc::Stage;

pub const FORMAT_LINE: &str = "tcc-trace 1";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("trace line {line}: {detail}")]
pub struct TraceParseError {
    pub line: usize,
    pub detail: String,
}

pub fn render(records: &[TraceRecord]) -> String {
    let mut s = String::from(FORMAT_LINE);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "record level={} stride={} stage={} round={} item={} query={},{} query_px={},{} keys={} entries={}\n",
            r.level,
            r.stride,
            r.stage.name(),
            r.round,
            r.item,
            r.query_cell.0,
            r.query_cell.1,
            r.query_pixel.0,
            r.query_pixel.1,
            r.keys.len(),
            r.attention.len()
        ));
        for k in &r.keys {
            s.push_str(&format!(
                "key cell={},{} px={},{} score={} gate={}\n",
                k.cell.0, k.cell.1, k.pixel.0, k.pixel.1, k.score, k.gate
            ));
        }
        for a in &r.attention {
            s.push_str(&format!("attn rank={} entry={} weight={}\n", a.rank, a.entry, a.weight));
        }
    }
    s
}

struct Fields<'a> {
    line: usize,
    map: HashMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, rest: &[&'a str]) -> Result<Self, TraceParseError> {
        let mut map = HashMap::new();
        for f in rest {
            let (k, v) = f.split_once('=').ok_or_else(|| err(line, format!("malformed field `{f}`")))?;
            map.insert(k, v);
        }
        Ok(Self { line, map })
    }

    fn raw(&self, key: &str) -> Result<&'a str, TraceParseError> {
        self.map.get(key).copied().ok_or_else(|| err(self.line, format!("missing `{key}`")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T, TraceParseError> {
        self.raw(key)?.parse().map_err(|_| err(self.line, format!("bad value for `{key}`")))
    }

    fn pair(&self, key: &str) -> Result<(usize, usize), TraceParseError> {
        let v = self.raw(key)?;
        let bad = || err(self.line, format!("`{key}` must be `x,y`"));
        let (a, b) = v.split_once(',').ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    }
}

fn err(line: usize, detail: String) -> TraceParseError {
    TraceParseError { line, detail }
}

pub fn parse(text: &str) -> Result<Vec<TraceRecord>, TraceParseError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, FORMAT_LINE)) => {}
        _ => return Err(err(1, format!("expected `{FORMAT_LINE}`"))),
    }
    let mut records = Vec::new();
    let mut lines = lines.filter(|(_, l)| !l.trim().is_empty()).peekable();
    while let Some((no, line)) = lines.next() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts[0] != "record" {
            return Err(err(no, format!("expected `record`, found `{}`", parts[0])));
        }
        let f = Fields::new(no, &parts[1..])?;
        let stage = match f.raw("stage")? {
            "before" => Stage::BeforeFusion,
            "after" => Stage::AfterFusion,
            other => return Err(err(no, format!("unknown stage `{other}`"))),
        };
        let (n_keys, n_entries): (usize, usize) = (f.get("keys")?, f.get("entries")?);
        let mut next = |kind: &str| -> Result<Fields<'_>, TraceParseError> {
            let (no, line) = lines.next().ok_or_else(|| err(no, format!("record ends before its `{kind}` lines")))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts[0] != kind {
                return Err(err(no, format!("expected `{kind}`, found `{}`", parts[0])));
            }
            Fields::new(no, &parts[1..])
        };
        let mut keys = Vec::with_capacity(n_keys);
        for _ in 0..n_keys {
            let k = next("key")?;
            keys.push(TraceKey {
                cell: k.pair("cell")?,
                pixel: k.pair("px")?,
                score: k.get("score")?,
                gate: k.get("gate")?,
            });
        }
        let mut attention = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let a = next("attn")?;
            attention.push(TraceAttention {
                rank: a.get("rank")?,
                entry: a.get("entry")?,
                weight: a.get("weight")?,
            });
        }
        records.push(TraceRecord {
            level: f.get("level")?,
            stride: f.get("stride")?,
            stage,
            round: f.get("round")?,
            item: f.get("item")?,
            query_cell: f.pair("query")?,
            query_pixel: f.pair("query_px")?,
            keys,
            attention,
        });
    }
    Ok(records)
}
