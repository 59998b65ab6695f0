//! Click-log ingestion: event records, the relation schema, and per-pair
//! co-occurrence statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Separator for multi-valued cells.
pub const MULTI_SEP: char = '|';

/// One categorical feature: a value of a schema field. Doubles as a graph node identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureRef {
    pub field: String,
    pub value: String,
}

impl FeatureRef {
    pub fn new(field: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            value: value.into(),
        }
    }
}

impl fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.field, self.value)
    }
}

/// Declared fields and the field pairs whose crosses are tracked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSchema {
    fields: Vec<String>,
    relations: Vec<(usize, usize)>,
}

impl RelationSchema {
    pub fn new<S: AsRef<str>>(fields: &[S], relations: &[(S, S)]) -> Result<Self> {
        let fields: Vec<String> = fields.iter().map(|f| f.as_ref().to_string()).collect();
        for (i, f) in fields.iter().enumerate() {
            if f.is_empty() || f == "label" || f.contains(['\t', '=', ',', MULTI_SEP]) {
                return Err(Error::Schema(format!("illegal field name `{f}`")));
            }
            if fields[..i].contains(f) {
                return Err(Error::Schema(format!("field `{f}` declared twice")));
            }
        }
        if fields.len() > u16::MAX as usize {
            return Err(Error::Schema("too many fields".into()));
        }
        let lookup = |name: &str| {
            fields
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| Error::Schema(format!("relation references undeclared field `{name}`")))
        };
        let mut rels: Vec<(usize, usize)> = Vec::new();
        for (a, b) in relations {
            let (a, b) = (lookup(a.as_ref())?, lookup(b.as_ref())?);
            if a == b {
                return Err(Error::Schema(format!(
                    "relation `{0},{0}` must join two distinct fields",
                    fields[a]
                )));
            }
            if rels.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
                return Err(Error::Schema(format!(
                    "duplicate relation `{},{}`",
                    fields[a], fields[b]
                )));
            }
            rels.push((a, b));
        }
        Ok(Self {
            fields,
            relations: rels,
        })
    }

    /// Reads `fields=a,b,c` and repeated `relation=a,b` entries.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let fields: Vec<&str> = cfg
            .get("fields")
            .ok_or_else(|| Error::Schema("missing `fields=` entry".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        let mut relations = Vec::new();
        for r in cfg.get_all("relation") {
            let (a, b) = r
                .split_once(',')
                .ok_or_else(|| Error::Schema(format!("relation `{r}` is not `fieldA,fieldB`")))?;
            relations.push((a.trim(), b.trim()));
        }
        Self::new(&fields, &relations)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_config(&KvConfig::load(path)?)
    }

    pub fn to_config(&self) -> KvConfig {
        let mut cfg = KvConfig::default();
        cfg.push("fields", self.fields.join(","));
        for &(a, b) in &self.relations {
            cfg.push("relation", format!("{},{}", self.fields[a], self.fields[b]));
        }
        cfg
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f == name)
    }

    /// Relations as (left field index, right field index).
    pub fn relations(&self) -> &[(usize, usize)] {
        &self.relations
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    /// Finds the relation joining two fields; `true` means the arguments were
    /// given in reverse of the declared orientation.
    pub fn relation_between(&self, a: &str, b: &str) -> Option<(usize, bool)> {
        let (a, b) = (self.field_index(a)?, self.field_index(b)?);
        self.relations.iter().enumerate().find_map(|(r, &(x, y))| {
            if (x, y) == (a, b) {
                Some((r, false))
            } else if (x, y) == (b, a) {
                Some((r, true))
            } else {
                None
            }
        })
    }
}

/// One labeled impression. `cells[f]` holds the value(s) of schema field `f`;
/// multi-valued cells carry more than one token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub label: u8,
    pub cells: Vec<Vec<String>>,
}

impl EventRecord {
    pub fn new(label: u8, cells: Vec<Vec<String>>) -> Self {
        Self { label, cells }
    }

    /// Single-valued convenience constructor.
    pub fn single<S: Into<String>>(label: u8, values: impl IntoIterator<Item = S>) -> Self {
        Self {
            label,
            cells: values.into_iter().map(|v| vec![v.into()]).collect(),
        }
    }

    pub fn values(&self, field: usize) -> &[String] {
        &self.cells[field]
    }

    /// First value of every field as feature refs.
    pub fn features(&self, schema: &RelationSchema) -> Vec<FeatureRef> {
        schema
            .fields()
            .iter()
            .zip(&self.cells)
            .map(|(f, c)| FeatureRef::new(f.clone(), c[0].clone()))
            .collect()
    }

    /// All (left, right) value pairs this record contributes under relation `r`.
    pub fn pairs<'a>(
        &'a self,
        schema: &RelationSchema,
        r: usize,
    ) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        let (a, b) = schema.relations()[r];
        let right = &self.cells[b];
        self.cells[a]
            .iter()
            .flat_map(move |x| right.iter().map(move |y| (x.as_str(), y.as_str())))
    }
}

/// Iterator over a TSV click log.
pub struct EventLogReader<'s, R> {
    lines: std::io::Lines<R>,
    schema: &'s RelationSchema,
    line_no: usize,
    /// column index -> schema field index; `None` until the first line is seen.
    columns: Option<Vec<usize>>,
}

/// Streams records from a TSV log with header `label<TAB>field...`.
///
/// When the first line is not a header, columns follow the schema's field order.
pub fn parse_event_log<R: BufRead>(input: R, schema: &RelationSchema) -> EventLogReader<'_, R> {
    EventLogReader {
        lines: input.lines(),
        schema,
        line_no: 0,
        columns: None,
    }
}

impl<R: BufRead> EventLogReader<'_, R> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            message: message.into(),
        }
    }

    fn read_header(&self, line: &str) -> Result<Vec<usize>> {
        let mut cols = Vec::new();
        for name in line.split('\t').skip(1) {
            let name = name.trim();
            let f = self
                .schema
                .field_index(name)
                .ok_or_else(|| self.err(format!("unknown field `{name}` in header")))?;
            if cols.contains(&f) {
                return Err(self.err(format!("field `{name}` repeated in header")));
            }
            cols.push(f);
        }
        if cols.len() != self.schema.fields().len() {
            let missing: Vec<&str> = (0..self.schema.fields().len())
                .filter(|f| !cols.contains(f))
                .map(|f| self.schema.fields()[f].as_str())
                .collect();
            return Err(self.err(format!("header is missing field(s) {}", missing.join(","))));
        }
        Ok(cols)
    }

    fn read_record(&self, line: &str, cols: &[usize]) -> Result<EventRecord> {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != cols.len() + 1 {
            return Err(self.err(format!(
                "expected {} columns, found {}",
                cols.len() + 1,
                parts.len()
            )));
        }
        let label = match parts[0].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(self.err(format!("non-binary label `{other}`"))),
        };
        let mut cells = vec![Vec::new(); cols.len()];
        for (raw, &f) in parts[1..].iter().zip(cols) {
            let field = &self.schema.fields()[f];
            let mut raw = raw.trim_end_matches('\r');
            if let Some(rest) = raw.strip_prefix(field.as_str()).and_then(|r| r.strip_prefix('=')) {
                raw = rest;
            } else if let Some((prefix, _)) = raw.split_once('=') {
                if self.schema.field_index(prefix).is_some() {
                    return Err(self.err(format!(
                        "value for field `{prefix}` found in column `{field}`"
                    )));
                }
            }
            let values: Vec<String> = raw.split(MULTI_SEP).map(str::to_string).collect();
            if values.iter().any(String::is_empty) {
                return Err(self.err(format!("empty value for field `{field}`")));
            }
            cells[f] = values;
        }
        Ok(EventRecord { label, cells })
    }
}

impl<R: BufRead> Iterator for EventLogReader<'_, R> {
    type Item = Result<EventRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            if self.columns.is_none() {
                if line.split('\t').next().map(str::trim) == Some("label") {
                    let cols = self.read_header(&line);
                    match cols {
                        Ok(c) => {
                            self.columns = Some(c);
                            continue;
                        }
                        Err(e) => return Some(Err(e)),
                    }
                }
                self.columns = Some((0..self.schema.fields().len()).collect());
            }
            let cols = self.columns.clone().expect("columns set above");
            return Some(self.read_record(&line, &cols));
        }
    }
}

pub fn read_event_log(path: &Path, schema: &RelationSchema) -> Result<Vec<EventRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_event_log(std::io::BufReader::new(file), schema).collect()
}

pub fn write_event_log<W: Write>(
    mut out: W,
    schema: &RelationSchema,
    events: &[EventRecord],
) -> Result<()> {
    write!(out, "label")?;
    for f in schema.fields() {
        write!(out, "\t{f}")?;
    }
    writeln!(out)?;
    for ev in events {
        write!(out, "{}", ev.label)?;
        for cell in &ev.cells {
            write!(out, "\t{}", cell.join("|"))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Key of one cross pair: relation index plus the left/right values in the
/// relation's declared field order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub relation: usize,
    pub left: String,
    pub right: String,
}

impl PairKey {
    pub fn new(relation: usize, left: impl Into<String>, right: impl Into<String>) -> Self {
        Self {
            relation,
            left: left.into(),
            right: right.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairStats {
    pub count: u64,
    pub click_count: u64,
}

pub type PairStatsMap = BTreeMap<PairKey, PairStats>;

/// Single-pass tally of pair co-occurrences; shards merge by summation.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    schema: RelationSchema,
    stats: HashMap<PairKey, PairStats>,
    events: u64,
}

impl StatsAccumulator {
    pub fn new(schema: &RelationSchema) -> Self {
        Self {
            schema: schema.clone(),
            stats: HashMap::new(),
            events: 0,
        }
    }

    pub fn push(&mut self, event: &EventRecord) {
        self.events += 1;
        for r in 0..self.schema.relation_count() {
            for (l, rt) in event.pairs(&self.schema, r) {
                let e = self
                    .stats
                    .entry(PairKey::new(r, l, rt))
                    .or_default();
                e.count += 1;
                e.click_count += u64::from(event.label);
            }
        }
    }

    pub fn merge(&mut self, other: StatsAccumulator) {
        self.events += other.events;
        for (k, v) in other.stats {
            let e = self.stats.entry(k).or_default();
            e.count += v.count;
            e.click_count += v.click_count;
        }
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn finish(self) -> PairStatsMap {
        self.stats.into_iter().collect()
    }
}

/// Tallies count and click count for every relation pair in `events`.
pub fn accumulate_stats<'a, I>(events: I, schema: &RelationSchema) -> PairStatsMap
where
    I: IntoIterator<Item = &'a EventRecord>,
{
    let mut acc = StatsAccumulator::new(schema);
    for ev in events {
        acc.push(ev);
    }
    acc.finish()
}

/// Same result as [`accumulate_stats`], with the input split into `shards`
/// chunks tallied in parallel.
pub fn accumulate_stats_sharded(
    events: &[EventRecord],
    schema: &RelationSchema,
    shards: usize,
) -> PairStatsMap {
    let chunk = events.len().div_ceil(shards.max(1)).max(1);
    events
        .par_chunks(chunk)
        .map(|part| {
            let mut acc = StatsAccumulator::new(schema);
            part.iter().for_each(|e| acc.push(e));
            acc
        })
        .reduce(
            || StatsAccumulator::new(schema),
            |mut a, b| {
                a.merge(b);
                a
            },
        )
        .finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> RelationSchema {
        RelationSchema::new(&["user", "item", "shop"], &[("user", "item"), ("item", "shop")]).unwrap()
    }

    fn parse(text: &str) -> Result<Vec<EventRecord>> {
        parse_event_log(text.as_bytes(), &schema()).collect()
    }

    #[test]
    fn parses_prefixed_cells() {
        let recs = parse("1\tuser=U1\titem=I7\tshop=S2\n0\tuser=U1\titem=I7\tshop=S2\n").unwrap();
        assert_eq!(recs[0], EventRecord::single(1, ["U1", "I7", "S2"]));
        assert_eq!(recs[1].label, 0);
        assert_eq!(
            recs[0].features(&schema())[1],
            FeatureRef::new("item", "I7")
        );
    }

    #[test]
    fn header_reorders_columns() {
        let recs = parse("label\tshop\tuser\titem\n1\tS2\tU1\tI7|I8\n").unwrap();
        assert_eq!(recs[0].cells[0], vec!["U1"]);
        assert_eq!(recs[0].cells[1], vec!["I7", "I8"]);
        assert_eq!(recs[0].cells[2], vec!["S2"]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let e = parse("label\tuser\titem\tshop\n1\tU\tI\tS\n2\tU1\tI7\tS2\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 3") && msg.contains("non-binary label"), "{msg}");

        let e = parse("1\tU1\tI7\n").unwrap_err();
        assert!(e.to_string().contains("expected 4 columns"));

        let e = parse("label\tuser\titem\tcolor\n").unwrap_err();
        assert!(e.to_string().contains("unknown field `color`"));

        let e = parse("1\tuser=U1\tshop=S2\titem=I7\n").unwrap_err();
        assert!(e.to_string().contains("found in column `item`"));
    }

    #[test]
    fn schema_validation() {
        assert!(RelationSchema::new(&["a", "b"], &[("a", "a")]).is_err());
        assert!(RelationSchema::new(&["a", "b"], &[("a", "c")]).is_err());
        assert!(RelationSchema::new(&["a", "b"], &[("a", "b"), ("b", "a")]).is_err());
        assert!(RelationSchema::new(&["a", "a"], &[] as &[(&str, &str)]).is_err());
        let cfg = KvConfig::parse("fields=user,item\nrelation=user,item\n").unwrap();
        let s = RelationSchema::from_config(&cfg).unwrap();
        assert_eq!(s.relation_between("item", "user"), Some((0, true)));
        assert_eq!(RelationSchema::from_config(&s.to_config()).unwrap(), s);
    }

    #[test]
    fn tally_of_three_events() {
        let s = schema();
        let evs = vec![
            EventRecord::single(1, ["U1", "I7", "S2"]),
            EventRecord::single(0, ["U1", "I7", "S3"]),
            EventRecord::single(1, ["U1", "I7", "S2"]),
        ];
        let stats = accumulate_stats(&evs, &s);
        assert_eq!(
            stats[&PairKey::new(0, "U1", "I7")],
            PairStats {
                count: 3,
                click_count: 2
            }
        );
        assert_eq!(stats[&PairKey::new(1, "I7", "S3")].click_count, 0);
        assert!(accumulate_stats(&[], &s).is_empty());
    }

    #[test]
    fn multi_valued_cells_expand() {
        let s = schema();
        let evs = vec![EventRecord::new(
            1,
            vec![vec!["U1".into()], vec!["A".into(), "B".into()], vec!["S".into()]],
        )];
        let stats = accumulate_stats(&evs, &s);
        assert_eq!(stats.len(), 4);
        assert_eq!(stats[&PairKey::new(0, "U1", "B")].count, 1);
    }

    #[test]
    fn write_then_parse() {
        let s = schema();
        let evs = vec![
            EventRecord::single(1, ["U1", "I7", "S2"]),
            EventRecord::new(0, vec![vec!["U2".into()], vec!["A".into(), "B".into()], vec!["S".into()]]),
        ];
        let mut buf = Vec::new();
        write_event_log(&mut buf, &s, &evs).unwrap();
        let back: Vec<_> = parse_event_log(buf.as_slice(), &s).collect::<Result<_>>().unwrap();
        assert_eq!(back, evs);
    }
}
