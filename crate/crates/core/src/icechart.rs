//! Ice chart records and the four-class regional labels derived from them.
//!
//! A chart polygon carries a simplified egg code: total concentration `ct`
//! and up to three partial concentrations (`ca`, `cb`, `cc`, in tenths) with
//! their stages of development (`sa`, `sb`, `sc`). Labels are stored
//! class-indexed: `[open water, young ice, first-year ice, multiyear ice]`.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// Concentration threshold above which a polygon counts as dominated by one
/// class.
pub const DEFAULT_DOMINANCE_THRESHOLD: f64 = 0.65;

/// Chart CSV header line.
pub const CHART_HEADER: &str = "polygon_id,ct,ca,cb,cc,sa,sb,sc";

/// One of the four aggregated stage-of-development classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StageEntry(u8);

impl StageEntry {
    pub const OPEN_WATER: StageEntry = StageEntry(0);
    pub const YOUNG_ICE: StageEntry = StageEntry(1);
    pub const FIRST_YEAR_ICE: StageEntry = StageEntry(2);
    pub const MULTIYEAR_ICE: StageEntry = StageEntry(3);

    pub fn new(value: u8) -> Result<Self> {
        if (value as usize) < NUM_CLASSES {
            Ok(StageEntry(value))
        } else {
            Err(Error::arg(format!("stage entry {value} outside 0..=3")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "open water",
            1 => "young ice",
            2 => "first-year ice",
            _ => "multiyear ice",
        }
    }
}

impl fmt::Display for StageEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A simplified egg code. Concentrations are in tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EggCode {
    ct: u8,
    partials: [u8; 3],
    stages: [StageEntry; 3],
}

impl EggCode {
    /// Builds an egg code, enforcing `ca + cb + cc = ct` and the 0..=10 range.
    pub fn new(ct: u8, partials: [u8; 3], stages: [StageEntry; 3]) -> Result<Self> {
        if ct > 10 {
            return Err(Error::arg(format!("ct {ct} outside 0..=10")));
        }
        if let Some(c) = partials.iter().find(|&&c| c > 10) {
            return Err(Error::arg(format!("partial concentration {c} outside 0..=10")));
        }
        let sum: u8 = partials.iter().sum();
        if sum != ct {
            return Err(Error::arg("ca+cb+cc ≠ ct"));
        }
        Ok(EggCode {
            ct,
            partials,
            stages,
        })
    }

    pub fn ct(&self) -> u8 {
        self.ct
    }

    /// `[ca, cb, cc]`
    pub fn partials(&self) -> [u8; 3] {
        self.partials
    }

    /// `[sa, sb, sc]`
    pub fn stages(&self) -> [StageEntry; 3] {
        self.stages
    }

    /// Converts to the class-indexed concentration vector.
    pub fn to_label(&self) -> RegionalLabel {
        eggcode_to_label(self)
    }
}

/// Class-indexed concentration vector summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionalLabel {
    conc: [f64; NUM_CLASSES],
}

impl RegionalLabel {
    pub fn new(conc: [f64; NUM_CLASSES]) -> Result<Self> {
        if conc.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::arg(format!("label component outside [0,1]: {conc:?}")));
        }
        let sum: f64 = conc.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::arg(format!("label sums to {sum}, not 1")));
        }
        Ok(RegionalLabel { conc })
    }

    pub fn conc(&self) -> [f64; NUM_CLASSES] {
        self.conc
    }

    pub fn get(&self, class: usize) -> f64 {
        self.conc[class]
    }
}

/// A chart entry: either an egg code or a polygon excluded from training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChartEntry {
    Coded(EggCode),
    Excluded,
}

impl ChartEntry {
    pub fn label(&self) -> Option<RegionalLabel> {
        match self {
            ChartEntry::Coded(e) => Some(e.to_label()),
            ChartEntry::Excluded => None,
        }
    }
}

/// Polygon id → chart entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChartTable {
    entries: BTreeMap<u32, ChartEntry>,
}

impl ChartTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an entry; fails if the id is already present.
    pub fn insert(&mut self, polygon_id: u32, entry: ChartEntry) -> Result<()> {
        if self.entries.insert(polygon_id, entry).is_some() {
            return Err(Error::arg(format!("duplicate polygon id {polygon_id}")));
        }
        Ok(())
    }

    pub fn get(&self, polygon_id: u32) -> Option<&ChartEntry> {
        self.entries.get(&polygon_id)
    }

    pub fn contains(&self, polygon_id: u32) -> bool {
        self.entries.contains_key(&polygon_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending polygon id order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &ChartEntry)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    /// Serialises to the chart CSV format.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CHART_HEADER);
        out.push('\n');
        for (id, entry) in self.iter() {
            match entry {
                ChartEntry::Excluded => out.push_str(&format!("{id},X\n")),
                ChartEntry::Coded(e) => {
                    let [ca, cb, cc] = e.partials();
                    let [sa, sb, sc] = e.stages();
                    out.push_str(&format!(
                        "{id},{},{ca},{cb},{cc},{sa},{sb},{sc}\n",
                        e.ct()
                    ));
                }
            }
        }
        out
    }
}

/// Maps external (SIGRID-3 style) stage codes onto the four classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMapping {
    codes: BTreeMap<u32, StageEntry>,
}

impl Default for StageMapping {
    /// Codes 0–3 map to themselves. SIGRID-3 codes: 55 (ice free) → open
    /// water; 81–85 (new ice, nilas, young, grey, grey-white; all thinner
    /// than 30 cm) → young ice; 86–93 (first-year stages) → first-year ice;
    /// 95–97 (old, second-year, multiyear) → multiyear ice. Glacier ice (98),
    /// undetermined (99) and "no stage" (80) are deliberately left unmapped.
    fn default() -> Self {
        let mut codes = BTreeMap::new();
        for v in 0..NUM_CLASSES as u8 {
            codes.insert(v as u32, StageEntry(v));
        }
        codes.insert(55, StageEntry::OPEN_WATER);
        for c in [81, 82, 83, 84, 85] {
            codes.insert(c, StageEntry::YOUNG_ICE);
        }
        for c in [86, 87, 88, 89, 91, 93] {
            codes.insert(c, StageEntry::FIRST_YEAR_ICE);
        }
        for c in [95, 96, 97] {
            codes.insert(c, StageEntry::MULTIYEAR_ICE);
        }
        StageMapping { codes }
    }
}

impl StageMapping {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u32, StageEntry)>) -> Self {
        StageMapping {
            codes: pairs.into_iter().collect(),
        }
    }

    /// Parses the override CSV `external_code,entry`. A header line is
    /// optional.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut codes = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let row = i + 1;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("external_code")) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    row,
                    msg: format!("expected 2 columns, found {}", fields.len()),
                });
            }
            let code: u32 = fields[0].parse().map_err(|_| Error::Parse {
                row,
                msg: format!("non-integer code {:?}", fields[0]),
            })?;
            let entry = fields[1]
                .parse::<u8>()
                .ok()
                .and_then(|v| StageEntry::new(v).ok())
                .ok_or_else(|| Error::Parse {
                    row,
                    msg: format!("invalid stage entry {:?}", fields[1]),
                })?;
            if codes.insert(code, entry).is_some() {
                return Err(Error::Parse {
                    row,
                    msg: format!("duplicate code {code}"),
                });
            }
        }
        Ok(StageMapping { codes })
    }

    pub fn get(&self, code: u32) -> Option<StageEntry> {
        self.codes.get(&code).copied()
    }
}

/// Looks up an external stage code.
pub fn map_stage(code: u32, mapping: &StageMapping) -> Result<StageEntry> {
    mapping
        .get(code)
        .ok_or_else(|| Error::arg(format!("unmapped stage code {code}")))
}

/// Converts an egg code to its class-indexed label.
///
/// Open water receives `(10 - ct) / 10`; each partial adds `c / 10` to the
/// class named by its stage. Partials sharing a stage accumulate.
pub fn eggcode_to_label(e: &EggCode) -> RegionalLabel {
    let mut tenths = [0u32; NUM_CLASSES];
    tenths[0] = 10 - e.ct as u32;
    for (c, s) in e.partials.iter().zip(e.stages) {
        if s == StageEntry::OPEN_WATER && *c > 0 {
            log::warn!("partial concentration {c} carries the open-water stage");
        }
        tenths[s.index()] += *c as u32;
    }
    // Integer tenths keep the sum exact.
    RegionalLabel {
        conc: tenths.map(|t| t as f64 / 10.0),
    }
}

/// Quantises a label to an egg code.
///
/// All four classes are rounded to whole tenths with the largest-remainder
/// rule so the tenths sum to ten (ties go to the lower class index). Ice
/// classes then fill the stage slots thickest first.
pub fn label_to_eggcode(l: &RegionalLabel) -> EggCode {
    let tenths = quantize_tenths(&l.conc);
    let ct = 10 - tenths[0];
    let mut partials = [0u8; 3];
    let mut stages = [StageEntry::OPEN_WATER; 3];
    let mut slot = 0;
    for class in (1..NUM_CLASSES).rev() {
        if tenths[class] > 0 {
            partials[slot] = tenths[class];
            stages[slot] = StageEntry(class as u8);
            slot += 1;
        }
    }
    EggCode {
        ct,
        partials,
        stages,
    }
}

fn quantize_tenths(conc: &[f64; NUM_CLASSES]) -> [u8; NUM_CLASSES] {
    let scaled = conc.map(|c| (c * 10.0).clamp(0.0, 10.0));
    let mut q = scaled.map(|s| s.floor() as u8);
    let assigned: u32 = q.iter().map(|&v| v as u32).sum();
    let missing = 10u32.saturating_sub(assigned) as usize;
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(missing) {
        q[i] += 1;
    }
    q
}

/// Returns the class whose concentration strictly exceeds `threshold`.
pub fn dominant_class(l: &RegionalLabel, threshold: f64) -> Option<StageEntry> {
    let (idx, max) = l
        .conc
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
    (max > threshold).then_some(StageEntry(idx as u8))
}

/// Parses a chart CSV with the default stage mapping.
pub fn parse_chart(text: &str) -> Result<ChartTable> {
    parse_chart_with_mapping(text, &StageMapping::default())
}

/// Parses a chart CSV, translating stage fields through `mapping`.
///
/// Row numbers in errors count data rows from 1 (the header is row 0).
pub fn parse_chart_with_mapping(text: &str, mapping: &StageMapping) -> Result<ChartTable> {
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some(h) if h == CHART_HEADER => {}
        Some(h) => {
            return Err(Error::Parse {
                row: 0,
                msg: format!("unexpected header {h:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                row: 0,
                msg: "missing header".into(),
            })
        }
    }
    let mut table = ChartTable::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, entry) = parse_row(line, row, mapping)?;
        table.insert(id, entry).map_err(|_| Error::Parse {
            row,
            msg: format!("duplicate polygon id {id}"),
        })?;
    }
    Ok(table)
}

fn parse_row(line: &str, row: usize, mapping: &StageMapping) -> Result<(u32, ChartEntry)> {
    let err = |msg: String| Error::Parse { row, msg };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let int = |s: &str, name: &str| -> Result<u32> {
        s.parse::<u32>()
            .map_err(|_| err(format!("non-integer {name} field {s:?}")))
    };
    let id = int(fields[0], "polygon_id")?;
    if fields.len() == 2 && fields[1] == "X" {
        return Ok((id, ChartEntry::Excluded));
    }
    if fields.len() != 8 {
        return Err(err(format!("expected 8 columns, found {}", fields.len())));
    }
    let mut conc = [0u8; 4];
    for (k, name) in ["ct", "ca", "cb", "cc"].iter().enumerate() {
        let v = int(fields[1 + k], name)?;
        if v > 10 {
            return Err(err(format!("{name} {v} outside 0..=10")));
        }
        conc[k] = v as u8;
    }
    let mut stages = [StageEntry::OPEN_WATER; 3];
    for (k, name) in ["sa", "sb", "sc"].iter().enumerate() {
        let code = int(fields[5 + k], name)?;
        stages[k] = mapping
            .get(code)
            .ok_or_else(|| err(format!("unmapped stage code {code} in {name}")))?;
    }
    let partials = [conc[1], conc[2], conc[3]];
    if partials.iter().map(|&c| c as u32).sum::<u32>() != conc[0] as u32 {
        return Err(err("ca+cb+cc ≠ ct".into()));
    }
    let egg = EggCode::new(conc[0], partials, stages).map_err(|e| err(e.to_string()))?;
    Ok((id, ChartEntry::Coded(egg)))
}
