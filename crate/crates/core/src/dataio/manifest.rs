use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSet {
    Fluorescent,
    Brightfield,
    All,
}

impl ChannelSet {
    pub fn n_channels(self) -> usize {
        match self {
            ChannelSet::Fluorescent => 5,
            ChannelSet::Brightfield => 3,
            ChannelSet::All => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelSet::Fluorescent => "fluorescent",
            ChannelSet::Brightfield => "brightfield",
            ChannelSet::All => "all",
        }
    }
}

impl fmt::Display for ChannelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChannelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fluorescent" => Ok(ChannelSet::Fluorescent),
            "brightfield" => Ok(ChannelSet::Brightfield),
            "all" => Ok(ChannelSet::All),
            other => Err(Error::Config(format!("unknown channel set {other:?}"))),
        }
    }
}

/// One imaged site of one well, for one channel set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub plate_id: String,
    pub well_position: String,
    pub site_index: u32,
    pub cell_line: String,
    pub perturbation: String,
    pub image_path: String,
    pub channel_set: ChannelSet,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WellKey {
    pub plate_id: String,
    pub well_position: String,
}

/// Identity of one site image within a manifest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteKey {
    pub plate_id: String,
    pub well_position: String,
    pub site_index: u32,
    pub channel_set: ChannelSet,
}

impl SiteRecord {
    pub fn site_key(&self) -> SiteKey {
        SiteKey {
            plate_id: self.plate_id.clone(),
            well_position: self.well_position.clone(),
            site_index: self.site_index,
            channel_set: self.channel_set,
        }
    }

    pub fn well_key(&self) -> WellKey {
        WellKey {
            plate_id: self.plate_id.clone(),
            well_position: self.well_position.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SiteRecord>,
    pub root: PathBuf,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestLine {
    Record(SiteRecord),
    Metadata { metadata: BTreeMap<String, String> },
}

impl DatasetManifest {
    pub fn new(records: Vec<SiteRecord>, root: impl Into<PathBuf>) -> Result<Self> {
        let violations = validate_records(&records);
        if !violations.is_empty() {
            return Err(Error::Manifest(violations));
        }
        Ok(Self {
            records,
            root: root.into(),
            metadata: BTreeMap::new(),
        })
    }

    pub fn image_path(&self, record: &SiteRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    /// Sites of each well for `channel_set`, ordered by site index.
    pub fn wells(&self, channel_set: ChannelSet) -> BTreeMap<WellKey, Vec<&SiteRecord>> {
        let mut out: BTreeMap<WellKey, Vec<&SiteRecord>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.channel_set == channel_set) {
            out.entry(r.well_key()).or_default().push(r);
        }
        for sites in out.values_mut() {
            sites.sort_by_key(|r| r.site_index);
        }
        out
    }

    /// Per-well perturbation and cell line.
    pub fn well_labels(&self) -> BTreeMap<WellKey, (String, String)> {
        self.records
            .iter()
            .map(|r| (r.well_key(), (r.perturbation.clone(), r.cell_line.clone())))
            .collect()
    }

    pub fn channel_sets(&self) -> BTreeSet<ChannelSet> {
        self.records.iter().map(|r| r.channel_set).collect()
    }
}

/// Returns every invariant violation found in `records`, each naming the
/// offending key. An empty list means the records form a valid manifest.
pub fn validate_records(records: &[SiteRecord]) -> Vec<String> {
    let mut violations = Vec::new();

    let mut seen = BTreeSet::new();
    for r in records {
        let key = (&r.plate_id, &r.well_position, r.site_index, r.channel_set);
        if !seen.insert(key) {
            violations.push(format!(
                "duplicate site key (plate={}, well={}, site={}, channels={})",
                r.plate_id, r.well_position, r.site_index, r.channel_set
            ));
        }
    }

    let mut sites: BTreeMap<(&str, &str, ChannelSet), BTreeSet<u32>> = BTreeMap::new();
    for r in records {
        sites
            .entry((&r.plate_id, &r.well_position, r.channel_set))
            .or_default()
            .insert(r.site_index);
    }
    for ((plate, well, cs), idx) in &sites {
        let n = idx.len();
        if n != 9 && n != 16 {
            violations.push(format!(
                "well (plate={plate}, well={well}, channels={cs}) has {n} sites, expected 9 or 16"
            ));
        } else if idx.iter().next_back().copied() != Some(n as u32 - 1) {
            violations.push(format!(
                "well (plate={plate}, well={well}, channels={cs}) site indices are not 0..{n}"
            ));
        }
    }

    let mut in_plate: BTreeMap<(&str, &str), BTreeSet<&str>> = BTreeMap::new();
    let mut by_position: BTreeMap<&str, BTreeMap<&str, &str>> = BTreeMap::new();
    let mut plate_lines: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        in_plate
            .entry((&r.plate_id, &r.well_position))
            .or_default()
            .insert(&r.perturbation);
        by_position
            .entry(&r.well_position)
            .or_default()
            .entry(&r.plate_id)
            .or_insert(&r.perturbation);
        plate_lines.entry(&r.plate_id).or_default().insert(&r.cell_line);
    }
    for ((plate, well), perts) in &in_plate {
        if perts.len() > 1 {
            violations.push(format!(
                "plate {plate} well {well} maps to several perturbations {perts:?}"
            ));
        }
    }
    for (well, plates) in &by_position {
        let distinct: BTreeSet<&str> = plates.values().copied().collect();
        if distinct.len() > 1 {
            let listing: Vec<String> = plates.iter().map(|(p, x)| format!("{p}:{x}")).collect();
            violations.push(format!(
                "well position {well} maps to different perturbations across plates ({})",
                listing.join(", ")
            ));
        }
    }
    for (plate, lines) in &plate_lines {
        if lines.len() > 1 {
            violations.push(format!("plate {plate} mixes cell lines {lines:?}"));
        }
    }
    violations
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut metadata = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Json {
            context: format!("{}:{}", path.display(), i + 1),
            source: e,
        })?;
        match parsed {
            ManifestLine::Record(r) => records.push(r),
            ManifestLine::Metadata { metadata: m } => metadata.extend(m),
        }
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = DatasetManifest::new(records, root)?;
    manifest.metadata = metadata;
    Ok(manifest)
}

pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    if !manifest.metadata.is_empty() {
        let line = serde_json::json!({ "metadata": manifest.metadata });
        writeln!(out, "{line}").unwrap();
    }
    for r in &manifest.records {
        let line = serde_json::to_string(r).map_err(|e| Error::Json {
            context: "manifest record".into(),
            source: e,
        })?;
        writeln!(out, "{line}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
