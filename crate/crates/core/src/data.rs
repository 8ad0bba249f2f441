//! Trial segmentation, spike binning, the built-in phoneme taxonomies, a
//! synthetic generator with a planted class hierarchy, and dataset I/O.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

pub const AO_PRE: f64 = 0.5;
pub const AO_POST: f64 = 1.5;
pub const BIN_WINDOW: f64 = 0.100;
pub const BIN_STRIDE: f64 = 0.025;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{location}: {message}")]
    Parse { location: String, message: String },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("trial has no AO marker")]
    MissingMarker,
    #[error("invalid markers: {0}")]
    InvalidMarkers(String),
    #[error("segment of {length} s is shorter than the {window} s window")]
    TooShort { length: f64, window: f64 },
    #[error("invalid binning: {0}")]
    InvalidBinning(String),
    #[error("unknown taxonomy `{0}`")]
    UnknownTaxonomy(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("dataset is empty")]
    Empty,
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Parse { location: location.into(), message: message.into() }
}

/// Event times of one trial, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Markers {
    pub prompt: Option<f64>,
    pub go: Option<f64>,
    pub ao_start: Option<f64>,
    pub ao_end: Option<f64>,
    pub end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    /// Ascending spike times per unit.
    pub units: Vec<Vec<f64>>,
    pub markers: Markers,
    /// Length of the recording span in seconds, measured from time 0.
    pub length: f64,
}

impl SpikeTrain {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn total_spikes(&self) -> usize {
        self.units.iter().map(Vec::len).sum()
    }
}

/// Keeps spikes in `[AO - 0.5, AO + 1.5)` and shifts them so the segment starts at 0.
pub fn segment_trial(spikes: &SpikeTrain) -> Result<SpikeTrain, DataError> {
    let m = &spikes.markers;
    let ao = m.ao_start.ok_or(DataError::MissingMarker)?;
    if let (Some(go), Some(end)) = (m.go, m.end) {
        if !(go <= ao && ao <= end) {
            return Err(DataError::InvalidMarkers(format!("AO {ao} is not between Go {go} and end {end}")));
        }
    }
    let start = ao - AO_PRE;
    let stop = ao + AO_POST;
    let units = spikes
        .units
        .iter()
        .map(|u| u.iter().filter(|&&t| t >= start && t < stop).map(|t| t - start).collect())
        .collect();
    let shift = |t: Option<f64>| t.map(|v| v - start);
    Ok(SpikeTrain {
        units,
        markers: Markers {
            prompt: shift(m.prompt),
            go: shift(m.go),
            ao_start: Some(AO_PRE),
            ao_end: shift(m.ao_end),
            end: shift(m.end),
        },
        length: AO_PRE + AO_POST,
    })
}

/// Number of bins `floor((length - window)/stride) + 1`.
pub fn bin_count(length: f64, window: f64, stride: f64) -> Result<usize, DataError> {
    if !(window > 0.0 && stride > 0.0) {
        return Err(DataError::InvalidBinning("window and stride must be positive".into()));
    }
    if length < window {
        return Err(DataError::TooShort { length, window });
    }
    // Relative slack absorbs decimal representation error such as 1.9/0.025.
    Ok(((length - window) / stride * (1.0 + 1e-12)).floor() as usize + 1)
}

/// `N × T` spike counts; bin `t` covers `[t·stride, t·stride + window)`.
pub fn bin_spikes(spikes: &SpikeTrain, window: f64, stride: f64) -> Result<Vec<Vec<u32>>, DataError> {
    let t_bins = bin_count(spikes.length, window, stride)?;
    Ok(spikes
        .units
        .iter()
        .map(|unit| {
            let mut counts = vec![0u32; t_bins];
            for &s in unit {
                for (t, c) in counts.iter_mut().enumerate() {
                    let lo = t as f64 * stride;
                    if s >= lo && s < lo + window {
                        *c += 1;
                    }
                }
            }
            counts
        })
        .collect())
}

/// A node of a class hierarchy; leaves carry class indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaxNode {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TaxNode>,
}

impl TaxNode {
    fn group(name: &str, children: Vec<TaxNode>) -> Self {
        Self { name: name.to_string(), class: None, children }
    }

    fn leaf(name: &str, class: usize) -> Self {
        Self { name: name.to_string(), class: Some(class), children: Vec::new() }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Class indices under this node, in tree order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        if let Some(c) = self.class {
            out.push(c);
        }
        for ch in &self.children {
            ch.collect_leaves(out);
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(TaxNode::depth).max().unwrap_or(0)
    }
}

/// A labeled class hierarchy with per-class movement and manner tags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Taxonomy {
    pub name: String,
    pub classes: Vec<String>,
    /// Movement (or mouth) group per class.
    pub movement: Vec<String>,
    /// Manner tag per class, when defined.
    pub manner: Vec<Option<String>>,
    pub root: TaxNode,
}

pub const MOVEMENT_GROUPS: [&str; 7] = ["LL", "LT", "TTT", "TTG", "TTH", "TBH", "TDS"];
pub const MANNER_GROUPS: [&str; 5] = ["PL", "AFF", "FR", "NA", "LA"];
pub const MOUTH_GROUPS: [&str; 4] = ["OM", "ET", "RM", "CM"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaxonomyKind {
    Consonant21,
    VowelMouth4 { per_group: usize },
}

impl std::str::FromStr for TaxonomyKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "consonant21" => Ok(Self::Consonant21),
            "vowel_mouth4" => Ok(Self::VowelMouth4 { per_group: 6 }),
            _ => Err(DataError::UnknownTaxonomy(s.to_string())),
        }
    }
}

impl Taxonomy {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    /// Movement groups in tree order.
    pub fn movement_groups(&self) -> Vec<String> {
        self.root.children.iter().map(|n| n.name.clone()).collect()
    }

    /// Group id per class at the given tree level (1 = top-level groups).
    pub fn groups_at_level(&self, level: usize) -> Vec<usize> {
        let mut out = vec![0; self.num_classes()];
        let mut next = 0;
        fn walk(n: &TaxNode, depth: usize, level: usize, out: &mut [usize], next: &mut usize) {
            if depth == level || n.is_leaf() {
                for c in n.leaves() {
                    out[c] = *next;
                }
                *next += 1;
                return;
            }
            for ch in &n.children {
                walk(ch, depth + 1, level, out, next);
            }
        }
        walk(&self.root, 0, level, &mut out, &mut next);
        out
    }
}

/// Built-in hierarchies: the 21 Mandarin initials grouped by articulator
/// movement then manner, or the four vowel mouth-shape groups.
pub fn builtin_taxonomy(kind: TaxonomyKind) -> Taxonomy {
    match kind {
        TaxonomyKind::Consonant21 => consonant21(),
        TaxonomyKind::VowelMouth4 { per_group } => vowel_mouth4(per_group),
    }
}

pub fn builtin_taxonomy_named(name: &str) -> Result<Taxonomy, DataError> {
    Ok(builtin_taxonomy(name.parse()?))
}

fn consonant21() -> Taxonomy {
    // movement group -> manner subgroup -> phonemes
    let layout: [(&str, &[(&str, &[&str])]); 7] = [
        ("LL", &[("PL", &["b", "p"]), ("NA", &["m"])]),
        ("LT", &[("FR", &["f"])]),
        ("TTT", &[("AFF", &["z", "c"]), ("FR", &["s"])]),
        ("TTG", &[("PL", &["d", "t"]), ("NA", &["n"]), ("LA", &["l"])]),
        ("TTH", &[("AFF", &["zh", "ch"]), ("FR", &["sh", "r"])]),
        ("TBH", &[("AFF", &["j", "q"]), ("FR", &["x"])]),
        ("TDS", &[("PL", &["g", "k"]), ("FR", &["h"])]),
    ];
    let mut classes = Vec::new();
    let mut movement = Vec::new();
    let mut manner = Vec::new();
    let mut groups = Vec::new();
    for (mv, subs) in layout {
        let mut sub_nodes = Vec::new();
        for (mn, phonemes) in subs {
            let leaves = phonemes
                .iter()
                .map(|p| {
                    classes.push(p.to_string());
                    movement.push(mv.to_string());
                    manner.push(Some(mn.to_string()));
                    TaxNode::leaf(p, classes.len() - 1)
                })
                .collect();
            sub_nodes.push(TaxNode::group(&format!("{mv}.{mn}"), leaves));
        }
        groups.push(TaxNode::group(mv, sub_nodes));
    }
    Taxonomy { name: "consonant21".into(), classes, movement, manner, root: TaxNode::group("root", groups) }
}

fn vowel_mouth4(per_group: usize) -> Taxonomy {
    let mut classes = Vec::new();
    let mut movement = Vec::new();
    let mut groups = Vec::new();
    for g in MOUTH_GROUPS {
        let leaves = (1..=per_group)
            .map(|i| {
                classes.push(format!("{g}{i}"));
                movement.push(g.to_string());
                TaxNode::leaf(&format!("{g}{i}"), classes.len() - 1)
            })
            .collect();
        groups.push(TaxNode::group(g, leaves));
    }
    let manner = vec![None; classes.len()];
    Taxonomy { name: "vowel_mouth4".into(), classes, movement, manner, root: TaxNode::group("root", groups) }
}

/// Parameters of the planted-hierarchy generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub taxonomy: Taxonomy,
    pub trials_per_class: usize,
    pub feature_dim: usize,
    /// Gaussian step size per tree level, root children first.
    pub level_scales: Vec<f64>,
    pub noise_sigma: f64,
    /// Seeds the class means.
    pub seed: u64,
    /// Seeds the trial noise; defaults to `seed`. Different values give
    /// independent recordings of the same planted hierarchy.
    pub noise_seed: Option<u64>,
}

impl SyntheticSpec {
    /// Defaults used throughout: 20 trials per class in 50 dimensions.
    pub fn new(taxonomy: Taxonomy, seed: u64) -> Self {
        Self {
            taxonomy,
            trials_per_class: 20,
            feature_dim: 50,
            level_scales: vec![1.0, 0.6, 0.35],
            noise_sigma: 1.0,
            seed,
            noise_seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.trials_per_class == 0 || self.feature_dim == 0 {
            return bad("trials_per_class and feature_dim must be at least 1");
        }
        if self.level_scales.is_empty() || self.level_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("level_scales must be positive");
        }
        if self.level_scales.windows(2).any(|w| w[1] > w[0]) {
            return bad("level_scales must be non-increasing with depth");
        }
        if self.level_scales.len() + 1 < self.taxonomy.root.depth() {
            return bad("need one level scale per taxonomy level");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Class means for `spec`, diffused from a zero root mean down the taxonomy.
pub fn class_means(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut means = vec![Vec::new(); spec.taxonomy.num_classes()];
    fn walk(
        n: &TaxNode,
        mean: &[f64],
        level: usize,
        spec: &SyntheticSpec,
        rng: &mut ChaCha8Rng,
        out: &mut [Vec<f64>],
    ) {
        if let Some(c) = n.class {
            out[c] = mean.to_vec();
        }
        for ch in &n.children {
            let scale = spec.level_scales[level.min(spec.level_scales.len() - 1)];
            let step = Normal::new(0.0, scale).expect("positive scale");
            let child: Vec<f64> = mean.iter().map(|m| m + step.sample(rng)).collect();
            walk(ch, &child, level + 1, spec, rng, out);
        }
    }
    walk(&spec.taxonomy.root, &vec![0.0; spec.feature_dim], 0, spec, &mut rng, &mut means);
    means
}

/// Trials of each class are the class mean plus isotropic Gaussian noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let means = class_means(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed.unwrap_or(spec.seed) ^ 0x5eed_0f_7a1a15);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let mut trials = Vec::with_capacity(means.len() * spec.trials_per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..spec.trials_per_class {
            let features = mean
                .iter()
                .map(|m| if spec.noise_sigma > 0.0 { m + noise.sample(&mut rng) } else { *m })
                .collect();
            trials.push(Trial { label, values: TrialValues::Features(features) });
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            n_units: spec.feature_dim,
            n_bins: 1,
            classes: spec.taxonomy.classes.clone(),
            taxonomy: Some(spec.taxonomy.name.clone()),
        },
        trials,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialValues {
    /// Row-major `n_units × n_bins` spike counts.
    Counts(Vec<u32>),
    Features(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub label: usize,
    pub values: TrialValues,
}

impl Trial {
    /// The flattened feature vector `x^E`.
    pub fn flattened(&self) -> Vec<f64> {
        match &self.values {
            TrialValues::Counts(c) => c.iter().map(|&v| f64::from(v)).collect(),
            TrialValues::Features(f) => f.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub n_units: usize,
    pub n_bins: usize,
    pub classes: Vec<String>,
    /// Name of the built-in taxonomy the classes come from, if any.
    pub taxonomy: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trials: Vec<Trial>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.meta.n_units * self.meta.n_bins
    }

    pub fn num_classes(&self) -> usize {
        self.meta.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    /// Row-major `len × dim` feature matrix.
    pub fn features(&self) -> Vec<f64> {
        self.trials.iter().flat_map(Trial::flattened).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { meta: self.meta.clone(), trials: indices.iter().map(|&i| self.trials[i].clone()).collect() }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct MetaOut<'a> {
            n_units: usize,
            n_bins: usize,
            classes: &'a [String],
            #[serde(skip_serializing_if = "Option::is_none")]
            taxonomy: &'a Option<String>,
        }
        #[derive(Serialize)]
        struct TrialOut<'a> {
            label: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            counts: Option<&'a [u32]>,
            #[serde(skip_serializing_if = "Option::is_none")]
            features: Option<&'a [f64]>,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            meta: MetaOut<'a>,
            trials: Vec<TrialOut<'a>>,
        }
        let out = Out {
            meta: MetaOut {
                n_units: self.meta.n_units,
                n_bins: self.meta.n_bins,
                classes: &self.meta.classes,
                taxonomy: &self.meta.taxonomy,
            },
            trials: self
                .trials
                .iter()
                .map(|t| match &t.values {
                    TrialValues::Counts(c) => TrialOut { label: t.label, counts: Some(c), features: None },
                    TrialValues::Features(f) => TrialOut { label: t.label, counts: None, features: Some(f) },
                })
                .collect(),
        };
        serde_json::to_string(&out).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Dataset, DataError> {
        let root: Value = serde_json::from_str(text)
            .map_err(|e| parse_err(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        let meta = root.get("meta").ok_or_else(|| parse_err("meta", "missing"))?;
        let uint = |v: Option<&Value>, loc: &str| -> Result<usize, DataError> {
            v.ok_or_else(|| parse_err(loc, "missing"))?
                .as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| parse_err(loc, "expected a non-negative integer"))
        };
        let n_units = uint(meta.get("n_units"), "meta.n_units")?;
        let n_bins = uint(meta.get("n_bins"), "meta.n_bins")?;
        let classes = meta
            .get("classes")
            .and_then(Value::as_array)
            .ok_or_else(|| parse_err("meta.classes", "expected an array of class names"))?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str().map(str::to_string).ok_or_else(|| parse_err(format!("meta.classes[{i}]"), "expected a string"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let taxonomy = match meta.get("taxonomy") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_str().ok_or_else(|| parse_err("meta.taxonomy", "expected a string"))?.to_string()),
        };
        let dim = n_units * n_bins;
        let raw_trials =
            root.get("trials").and_then(Value::as_array).ok_or_else(|| parse_err("trials", "expected an array"))?;
        let mut trials = Vec::with_capacity(raw_trials.len());
        for (i, t) in raw_trials.iter().enumerate() {
            let loc = format!("trials[{i}]");
            let label = uint(t.get("label"), &format!("{loc}.label"))?;
            if label >= classes.len() {
                return Err(parse_err(format!("{loc}.label"), format!("label {label} out of range")));
            }
            let values = match (t.get("counts"), t.get("features")) {
                (Some(c), None) => {
                    let arr = c.as_array().ok_or_else(|| parse_err(format!("{loc}.counts"), "expected an array"))?;
                    let mut counts = Vec::with_capacity(arr.len());
                    for (j, v) in arr.iter().enumerate() {
                        let n = v
                            .as_u64()
                            .filter(|n| *n <= u64::from(u32::MAX))
                            .ok_or_else(|| parse_err(format!("{loc}.counts[{j}]"), "expected a non-negative integer"))?;
                        counts.push(n as u32);
                    }
                    TrialValues::Counts(counts)
                }
                (None, Some(f)) => {
                    let arr = f.as_array().ok_or_else(|| parse_err(format!("{loc}.features"), "expected an array"))?;
                    let mut feats = Vec::with_capacity(arr.len());
                    for (j, v) in arr.iter().enumerate() {
                        feats.push(
                            v.as_f64()
                                .filter(|x| x.is_finite())
                                .ok_or_else(|| parse_err(format!("{loc}.features[{j}]"), "expected a finite number"))?,
                        );
                    }
                    TrialValues::Features(feats)
                }
                (Some(_), Some(_)) => return Err(parse_err(&loc, "both counts and features given")),
                (None, None) => return Err(parse_err(&loc, "missing counts")),
            };
            let len = match &values {
                TrialValues::Counts(c) => c.len(),
                TrialValues::Features(f) => f.len(),
            };
            if len != dim {
                return Err(parse_err(&loc, format!("expected {dim} values, found {len}")));
            }
            trials.push(Trial { label, values });
        }
        Ok(Dataset { meta: DatasetMeta { n_units, n_bins, classes, taxonomy }, trials })
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, ds.to_json()).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
    Dataset::from_json(&text)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: std::io::Error::other(e) })
}

fn check_header(rdr: &mut csv::Reader<std::fs::File>, path: &Path, expected: &[&str]) -> Result<Vec<String>, DataError> {
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(format!("{} line 1", path.display()), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < expected.len() || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(parse_err(
            format!("{} line 1", path.display()),
            format!("expected header `{}`", expected.join(",")),
        ));
    }
    Ok(header)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, loc: &str, name: &str) -> Result<T, DataError> {
    let s = rec.get(i).ok_or_else(|| parse_err(loc, format!("missing column `{name}`")))?;
    s.parse().map_err(|_| parse_err(loc, format!("bad value `{s}` in column `{name}`")))
}

/// Reads a session-wide spike CSV (`unit,timestamp`) and a marker CSV
/// (`trial,prompt,go,ao_start,ao_end,end`, optionally followed by `label`),
/// then segments and bins every trial. Without a label column every trial
/// gets class 0.
pub fn ingest_csv(spikes_path: &Path, markers_path: &Path) -> Result<Dataset, DataError> {
    let mut rdr = csv_reader(spikes_path)?;
    check_header(&mut rdr, spikes_path, &["unit", "timestamp"])?;
    let mut by_unit: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let loc = format!("{} line {}", spikes_path.display(), i + 2);
        let rec = rec.map_err(|e| parse_err(&loc, e.to_string()))?;
        let unit: i64 = field(&rec, 0, &loc, "unit")?;
        let t: f64 = field(&rec, 1, &loc, "timestamp")?;
        if !t.is_finite() {
            return Err(parse_err(&loc, "timestamp must be finite"));
        }
        by_unit.entry(unit).or_default().push(t);
    }
    let units: Vec<Vec<f64>> = by_unit
        .into_values()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();

    let mut rdr = csv_reader(markers_path)?;
    let header = check_header(&mut rdr, markers_path, &["trial", "prompt", "go", "ao_start", "ao_end", "end"])?;
    let label_col = header.iter().position(|h| h == "label");
    let mut classes: Vec<String> = Vec::new();
    let mut trials = Vec::new();
    let mut n_bins = bin_count(AO_PRE + AO_POST, BIN_WINDOW, BIN_STRIDE)?;
    for (i, rec) in rdr.records().enumerate() {
        let loc = format!("{} line {}", markers_path.display(), i + 2);
        let rec = rec.map_err(|e| parse_err(&loc, e.to_string()))?;
        let opt = |j: usize, name: &str| -> Result<Option<f64>, DataError> {
            match rec.get(j) {
                None | Some("") => Ok(None),
                Some(_) => field(&rec, j, &loc, name).map(Some),
            }
        };
        let markers = Markers {
            prompt: opt(1, "prompt")?,
            go: opt(2, "go")?,
            ao_start: opt(3, "ao_start")?,
            ao_end: opt(4, "ao_end")?,
            end: opt(5, "end")?,
        };
        let label = match label_col {
            Some(j) => {
                let name = rec.get(j).unwrap_or("").to_string();
                match classes.iter().position(|c| *c == name) {
                    Some(k) => k,
                    None => {
                        classes.push(name);
                        classes.len() - 1
                    }
                }
            }
            None => {
                if classes.is_empty() {
                    classes.push("unlabeled".into());
                }
                0
            }
        };
        let train = SpikeTrain { units: units.clone(), markers, length: markers.end.unwrap_or(f64::INFINITY) };
        let seg = segment_trial(&train).map_err(|e| parse_err(&loc, e.to_string()))?;
        let counts = bin_spikes(&seg, BIN_WINDOW, BIN_STRIDE)?;
        n_bins = counts.first().map_or(n_bins, Vec::len);
        trials.push(Trial { label, values: TrialValues::Counts(counts.concat()) });
    }
    if trials.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset { meta: DatasetMeta { n_units: units.len(), n_bins, classes, taxonomy: None }, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn train(units: Vec<Vec<f64>>, ao: f64) -> SpikeTrain {
        SpikeTrain {
            units,
            markers: Markers { prompt: Some(0.0), go: Some(1.0), ao_start: Some(ao), ao_end: Some(ao + 1.0), end: Some(10.0) },
            length: 10.0,
        }
    }

    #[test]
    fn segmentation_is_half_open() {
        let seg = segment_trial(&train(vec![vec![2.4, 2.5, 4.49, 4.5]], 3.0)).unwrap();
        assert_eq!(seg.units[0].len(), 2);
        assert_eq!(seg.units[0][0], 0.0);
        assert!((seg.length - 2.0).abs() < 1e-15);
        let mut t = train(vec![vec![]], 3.0);
        t.markers.ao_start = None;
        assert!(matches!(segment_trial(&t), Err(DataError::MissingMarker)));
    }

    #[test]
    fn binning_examples() {
        let s = SpikeTrain { units: vec![vec![0.01, 0.05, 0.12]], markers: Markers::default(), length: 0.2 };
        assert_eq!(bin_spikes(&s, 0.1, 0.025).unwrap(), vec![vec![2, 2, 2, 1, 1]]);
        assert_eq!(bin_count(2.0, 0.1, 0.025).unwrap(), 77);
        let empty = SpikeTrain { units: vec![vec![], vec![]], markers: Markers::default(), length: 2.0 };
        let c = bin_spikes(&empty, 0.1, 0.025).unwrap();
        assert_eq!((c.len(), c[0].len()), (2, 77));
        assert!(c.iter().flatten().all(|v| *v == 0));
        assert!(matches!(bin_count(0.05, 0.1, 0.025), Err(DataError::TooShort { .. })));
    }

    #[test]
    fn consonant_taxonomy_shape() {
        let t = builtin_taxonomy(TaxonomyKind::Consonant21);
        assert_eq!(t.num_classes(), 21);
        let g = t.class_index("g").unwrap();
        let k = t.class_index("k").unwrap();
        assert_eq!(t.movement[g], "TDS");
        assert_eq!(t.movement[g], t.movement[k]);
        assert_eq!(t.manner[g].as_deref(), Some("PL"));
        assert_eq!(t.manner[g], t.manner[k]);
        let groups = t.movement_groups();
        let ll = groups.iter().position(|x| x == "LL").unwrap();
        let lt = groups.iter().position(|x| x == "LT").unwrap();
        assert_eq!(ll.abs_diff(lt), 1);
    }

    #[test]
    fn vowel_taxonomy_and_unknown_kind() {
        let t = builtin_taxonomy_named("vowel_mouth4").unwrap();
        assert_eq!(t.num_classes(), 24);
        assert_eq!(t.movement_groups(), MOUTH_GROUPS.to_vec());
        assert!(matches!(builtin_taxonomy_named("words"), Err(DataError::UnknownTaxonomy(_))));
    }

    #[test]
    fn zero_noise_gives_identical_trials() {
        let mut spec = SyntheticSpec::new(builtin_taxonomy(TaxonomyKind::Consonant21), 3);
        spec.noise_sigma = 0.0;
        spec.trials_per_class = 3;
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.trials[0], ds.trials[2]);
        assert_ne!(ds.trials[0], ds.trials[3]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SyntheticSpec::new(builtin_taxonomy(TaxonomyKind::Consonant21), 3);
        spec.level_scales = vec![0.5, 1.0, 0.1];
        assert!(generate_synthetic(&spec).is_err());
        spec.level_scales = vec![1.0];
        assert!(generate_synthetic(&spec).is_err());
    }
}
