//! Paired IHC / mIF datasets on disk, case-level splits, and the procedural
//! tissue generator.
//!
//! On-disk layout (all paths relative to the dataset root):
//!
//! ```text
//! manifest.json
//! <case_id>/<patch_id>_ihc.png            8-bit RGB brightfield
//! <case_id>/<patch_id>_mif_<marker>.png   16-bit gray, one per marker
//! priors/<case_id>/<patch_id>.png         optional precomputed soft priors
//! ```

pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{read_png, IoError};
use crate::prior::{PatchKey, SoftPrior};
use crate::raster::{resize, ImagePatch, MifStack, Raster, RasterError, ValueRange};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const PRIORS_DIR: &str = "priors";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("dataset root {0} does not exist")]
    MissingRoot(String),
    #[error("no usable samples under {root} ({skipped} skipped)")]
    Empty { root: String, skipped: usize },
    #[error("need at least 3 distinct cases to split, found {0}")]
    TooFewCases(usize),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("case-level leakage: case `{0}` appears in more than one split")]
    Leakage(String),
    #[error("cannot place {requested} non-overlapping nuclei in a {size}x{size} patch (placed {placed}); lower n_nuclei or the radius range")]
    Overflow {
        requested: usize,
        placed: usize,
        size: usize,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {reason}")]
    Write { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Marker set of the dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// DAPI, Lap2, Ki67.
    DeepliifLike,
    /// DAPI only.
    HnsccLike,
}

impl Layout {
    pub fn channel_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Layout::DeepliifLike => &["DAPI", "Lap2", "Ki67"],
            Layout::HnsccLike => &["DAPI"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn nuclear_channel(self) -> usize {
        0
    }

    /// Index of the proliferation marker, if the layout has one.
    pub fn ki67_channel(self) -> Option<usize> {
        match self {
            Layout::DeepliifLike => Some(2),
            Layout::HnsccLike => None,
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::DeepliifLike => "deepliif_like",
            Layout::HnsccLike => "hnscc_like",
        })
    }
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deepliif_like" => Ok(Layout::DeepliifLike),
            "hnscc_like" => Ok(Layout::HnsccLike),
            other => Err(format!("unknown layout `{other}`")),
        }
    }
}

/// One co-registered brightfield / fluorescence pair, both in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub case_id: String,
    pub patch_id: String,
    pub ihc: ImagePatch,
    pub mif: MifStack,
    pub prior: Option<SoftPrior>,
}

impl PairedSample {
    pub fn new(case_id: String, patch_id: String, ihc: ImagePatch, mif: MifStack) -> Result<Self, RasterError> {
        if case_id.is_empty() {
            return Err(RasterError::Metadata("empty case_id".into()));
        }
        if ihc.channels() != 3 {
            return Err(RasterError::Shape(format!("IHC patch has {} channels", ihc.channels())));
        }
        if ihc.height() != mif.height() || ihc.width() != mif.width() {
            return Err(RasterError::Shape(format!(
                "IHC {}x{} vs mIF {}x{}",
                ihc.height(),
                ihc.width(),
                mif.height(),
                mif.width()
            )));
        }
        Ok(Self {
            case_id,
            patch_id,
            ihc,
            mif,
            prior: None,
        })
    }

    pub fn key(&self) -> PatchKey {
        PatchKey::new(&self.case_id, &self.patch_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub split: Option<Split>,
    pub patches: Vec<String>,
}

/// JSON sidecar at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub layout: Layout,
    pub channel_names: Vec<String>,
    pub nuclear_channel: usize,
    pub patch_size: usize,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Option<Self>, DataError> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("unsupported manifest version {}", m.version)));
        }
        Ok(Some(m))
    }

    pub fn write(&self, root: &Path) -> Result<(), DataError> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| DataError::Write {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Split assignment recorded in the manifest, if every case has one.
    pub fn splits(&self, seed: u64) -> Option<SplitManifest> {
        let assignment: Option<BTreeMap<String, Split>> =
            self.cases.iter().map(|c| c.split.map(|s| (c.case_id.clone(), s))).collect();
        assignment.map(|assignment| SplitManifest { assignment, seed })
    }
}

pub fn ihc_path(root: &Path, case_id: &str, patch_id: &str) -> PathBuf {
    root.join(case_id).join(format!("{patch_id}_ihc.png"))
}

pub fn mif_path(root: &Path, case_id: &str, patch_id: &str, marker: &str) -> PathBuf {
    root.join(case_id).join(format!("{patch_id}_mif_{marker}.png"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkipRecord {
    pub case_id: String,
    pub patch_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Square side every patch is resized to; `None` keeps native size.
    pub target_size: Option<usize>,
    /// Only these cases are opened.
    pub cases: Option<BTreeSet<String>>,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub samples: Vec<PairedSample>,
    pub skipped: Vec<SkipRecord>,
    /// Every file opened, relative to the root, in access order.
    pub files_read: Vec<String>,
    pub channel_names: Vec<String>,
    pub nuclear_channel: usize,
}

impl LoadedDataset {
    pub fn case_ids(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.case_id.clone()).collect()
    }
}

/// Case directories under `root` (every subdirectory except `priors`).
pub fn list_cases(root: &Path) -> Result<Vec<String>, DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.display().to_string()));
    }
    let mut cases = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| DataError::MissingRoot(format!("{}: {e}", root.display())))? {
        let entry = entry.map_err(|e| DataError::MissingRoot(e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && name != PRIORS_DIR && !name.starts_with('.') {
            cases.push(name);
        }
    }
    cases.sort();
    Ok(cases)
}

/// Patch ids with at least one recognisable file in a case directory.
fn list_patches(dir: &Path, markers: &[String]) -> Result<BTreeSet<String>, DataError> {
    let mut ids = BTreeSet::new();
    let entries = std::fs::read_dir(dir).map_err(|e| DataError::MissingRoot(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let name = entry.map_err(|e| DataError::MissingRoot(e.to_string()))?.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        if let Some(id) = stem.strip_suffix("_ihc") {
            ids.insert(id.to_string());
            continue;
        }
        for m in markers {
            if let Some(id) = stem.strip_suffix(&format!("_mif_{m}")) {
                ids.insert(id.to_string());
            }
        }
    }
    Ok(ids)
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

fn load_pair(
    root: &Path,
    case_id: &str,
    patch_id: &str,
    layout: Layout,
    opts: &LoadOptions,
    files_read: &mut Vec<String>,
) -> Result<PairedSample, String> {
    let ihc_file = ihc_path(root, case_id, patch_id);
    if !ihc_file.exists() {
        return Err(format!("missing {}", rel(root, &ihc_file)));
    }
    let names = layout.channel_names();
    let marker_files: Vec<PathBuf> = names.iter().map(|m| mif_path(root, case_id, patch_id, m)).collect();
    if let Some(missing) = marker_files.iter().find(|p| !p.exists()) {
        return Err(format!("missing {}", rel(root, missing)));
    }
    files_read.push(rel(root, &ihc_file));
    let ihc = read_png(&ihc_file).map_err(|e| e.to_string())?;
    if ihc.channels() != 3 {
        return Err(format!("{} is not RGB", rel(root, &ihc_file)));
    }
    let mut channels = Vec::with_capacity(names.len());
    for p in &marker_files {
        files_read.push(rel(root, p));
        let r = read_png(p).map_err(|e| e.to_string())?;
        if r.channels() != 1 {
            return Err(format!("{} is not grayscale", rel(root, p)));
        }
        channels.push(r);
    }
    if channels.iter().any(|c| !c.same_spatial(&channels[0])) {
        return Err("marker channels differ in size".into());
    }
    let refs: Vec<&Raster> = channels.iter().collect();
    let mut mif = MifStack::new(Raster::stack(&refs).map_err(|e| e.to_string())?, ValueRange::Unit, names, layout.nuclear_channel())
        .map_err(|e| e.to_string())?;
    let mut ihc = ImagePatch::new(ihc, ValueRange::Unit).map_err(|e| e.to_string())?;
    match opts.target_size {
        Some(s) => {
            if ihc.height() != s || ihc.width() != s {
                ihc = resize(&ihc, s).map_err(|e| e.to_string())?;
            }
            if mif.height() != s || mif.width() != s {
                mif = mif.resized(s, s).map_err(|e| e.to_string())?;
            }
        }
        None => {
            if ihc.height() != mif.height() || ihc.width() != mif.width() {
                return Err(format!(
                    "IHC {}x{} and mIF {}x{} are not aligned",
                    ihc.height(),
                    ihc.width(),
                    mif.height(),
                    mif.width()
                ));
            }
        }
    }
    PairedSample::new(case_id.to_string(), patch_id.to_string(), ihc, mif).map_err(|e| e.to_string())
}

/// Loads every complete pair under `root`. Incomplete or unreadable pairs
/// are skipped and reported; an empty result is an error.
pub fn load_dataset(root: &Path, layout: Layout, opts: &LoadOptions) -> Result<LoadedDataset, DataError> {
    let manifest = DatasetManifest::read(root)?;
    if let Some(m) = &manifest {
        if m.layout != layout {
            return Err(DataError::Manifest(format!(
                "dataset layout is {}, requested {layout}",
                m.layout
            )));
        }
    }
    let names = layout.channel_names();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut files_read = Vec::new();
    if manifest.is_some() {
        files_read.push(MANIFEST_FILE.to_string());
    }
    for case_id in list_cases(root)? {
        if opts.cases.as_ref().is_some_and(|keep| !keep.contains(&case_id)) {
            continue;
        }
        for patch_id in list_patches(&root.join(&case_id), &names)? {
            match load_pair(root, &case_id, &patch_id, layout, opts, &mut files_read) {
                Ok(s) => samples.push(s),
                Err(reason) => {
                    log::warn!("skipping {case_id}/{patch_id}: {reason}");
                    skipped.push(SkipRecord {
                        case_id: case_id.clone(),
                        patch_id,
                        reason,
                    });
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(DataError::Empty {
            root: root.display().to_string(),
            skipped: skipped.len(),
        });
    }
    Ok(LoadedDataset {
        samples,
        skipped,
        files_read,
        channel_names: names,
        nuclear_channel: layout.nuclear_channel(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    /// Fraction of cases held out for test.
    pub test: f64,
    /// Fraction of the remaining train pool held out for validation.
    pub val_of_pool: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            test: 0.2,
            val_of_pool: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignment: BTreeMap<String, Split>,
    pub seed: u64,
}

impl SplitManifest {
    pub fn split_of(&self, case_id: &str) -> Option<Split> {
        self.assignment.get(case_id).copied()
    }

    pub fn cases(&self, split: Split) -> BTreeSet<String> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(c, _)| c.clone())
            .collect()
    }

    /// Fails if any test case is also assigned to train or val.
    pub fn check_disjoint(&self, seen: &BTreeSet<String>) -> Result<(), DataError> {
        let test = self.cases(Split::Test);
        match seen.intersection(&test).next() {
            Some(c) => Err(DataError::Leakage(c.clone())),
            None => Ok(()),
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Case-level split: shuffle the sorted case ids with `seed`, take the test
/// share, then hold out `val_of_pool` of the rest (half-up, at least one).
pub fn make_splits<S: AsRef<str>>(case_ids: &[S], seed: u64, fractions: SplitFractions) -> Result<SplitManifest, DataError> {
    let mut cases: Vec<String> = case_ids
        .iter()
        .map(|c| c.as_ref().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = cases.len();
    if n < 3 {
        return Err(DataError::TooFewCases(n));
    }
    let ok = |f: f64| f > 0.0 && f < 1.0;
    if !ok(fractions.test) || !ok(fractions.val_of_pool) {
        return Err(DataError::Fractions(format!("{fractions:?}")));
    }
    cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = round_half_up(n as f64 * fractions.test).clamp(1, n - 2);
    let pool = n - n_test;
    let n_val = round_half_up(pool as f64 * fractions.val_of_pool).clamp(1, pool - 1);
    let assignment = cases
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let s = if i < n_test {
                Split::Test
            } else if i < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
            (c, s)
        })
        .collect();
    Ok(SplitManifest { assignment, seed })
}

#[cfg(test)]
mod tests {
    use super::synthetic::{write_synthetic_dataset, SynthDatasetSpec};
    use super::*;
    use proptest::prelude::*;

    fn fixture(cases: usize, patches: usize) -> (tempfile::TempDir, SynthDatasetSpec) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDatasetSpec {
            cases,
            patches_per_case: patches,
            size: 32,
            n_nuclei: 4,
            ..SynthDatasetSpec::default()
        };
        write_synthetic_dataset(dir.path(), &spec).unwrap();
        (dir, spec)
    }

    #[test]
    fn loads_complete_fixture() {
        let (dir, _) = fixture(4, 3);
        let d = load_dataset(dir.path(), Layout::DeepliifLike, &LoadOptions::default()).unwrap();
        assert_eq!(d.samples.len(), 12);
        assert_eq!(d.case_ids().len(), 4);
        assert!(d.skipped.is_empty());
        for s in &d.samples {
            assert_eq!(s.mif.channel_names(), &["DAPI", "Lap2", "Ki67"]);
            assert!(s.ihc.raster().same_spatial(s.mif.raster()));
        }
    }

    #[test]
    fn orphan_patch_is_skipped() {
        let (dir, _) = fixture(4, 3);
        let victim = mif_path(dir.path(), "case00", "p01", "Ki67");
        std::fs::remove_file(&victim).unwrap();
        let d = load_dataset(dir.path(), Layout::DeepliifLike, &LoadOptions::default()).unwrap();
        assert_eq!(d.samples.len(), 11);
        assert_eq!(d.skipped.len(), 1);
        assert_eq!((d.skipped[0].case_id.as_str(), d.skipped[0].patch_id.as_str()), ("case00", "p01"));
    }

    #[test]
    fn empty_or_missing_root_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), Layout::DeepliifLike, &LoadOptions::default()),
            Err(DataError::Empty { .. })
        ));
        assert!(matches!(
            load_dataset(&dir.path().join("nope"), Layout::DeepliifLike, &LoadOptions::default()),
            Err(DataError::MissingRoot(_))
        ));
    }

    #[test]
    fn case_filter_and_resize() {
        let (dir, _) = fixture(3, 2);
        let opts = LoadOptions {
            target_size: Some(16),
            cases: Some(["case01".to_string()].into()),
        };
        let d = load_dataset(dir.path(), Layout::DeepliifLike, &opts).unwrap();
        assert_eq!(d.samples.len(), 2);
        assert!(d.files_read.iter().all(|f| f == MANIFEST_FILE || f.starts_with("case01")));
        assert_eq!(d.samples[0].mif.raster().dims(), (16, 16, 3));
        assert_eq!(d.samples[0].ihc.raster().dims(), (16, 16, 3));
    }

    #[test]
    fn hnscc_layout_reads_dapi_only() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDatasetSpec {
            cases: 3,
            patches_per_case: 1,
            size: 32,
            n_nuclei: 5,
            layout: Layout::HnsccLike,
            ..SynthDatasetSpec::default()
        };
        write_synthetic_dataset(dir.path(), &spec).unwrap();
        let d = load_dataset(dir.path(), Layout::HnsccLike, &LoadOptions::default()).unwrap();
        assert_eq!(d.samples[0].mif.channels(), 1);
        assert!(load_dataset(dir.path(), Layout::DeepliifLike, &LoadOptions::default()).is_err());
    }

    #[test]
    fn ten_cases_split_eight_two() {
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let m = make_splits(&ids, 7, SplitFractions::default()).unwrap();
        assert_eq!(m.cases(Split::Test).len(), 2);
        assert_eq!(m.cases(Split::Train).len() + m.cases(Split::Val).len(), 8);
        assert_eq!(m.cases(Split::Val).len(), 2);
        assert_eq!(m, make_splits(&ids, 7, SplitFractions::default()).unwrap());
        assert!(matches!(make_splits(&ids[..2], 0, SplitFractions::default()), Err(DataError::TooFewCases(2))));
    }

    #[test]
    fn leakage_check() {
        let ids = ["a", "b", "c", "d", "e"];
        let m = make_splits(&ids, 1, SplitFractions::default()).unwrap();
        let train = m.cases(Split::Train);
        assert!(m.check_disjoint(&train).is_ok());
        let mut bad = train.clone();
        bad.extend(m.cases(Split::Test));
        assert!(matches!(m.check_disjoint(&bad), Err(DataError::Leakage(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn splits_are_deterministic_partitions(seed in any::<u64>(), n in 3usize..40) {
            let ids: Vec<String> = (0..n).map(|i| format!("case{i}")).collect();
            let m = make_splits(&ids, seed, SplitFractions::default()).unwrap();
            prop_assert_eq!(&m, &make_splits(&ids, seed, SplitFractions::default()).unwrap());
            prop_assert_eq!(m.assignment.len(), n);
            let (tr, va, te) = (m.cases(Split::Train), m.cases(Split::Val), m.cases(Split::Test));
            prop_assert!(!tr.is_empty() && !va.is_empty() && !te.is_empty());
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            let pool = tr.len() + va.len();
            prop_assert_eq!(va.len(), ((pool as f64 * 0.2 + 0.5).floor() as usize).clamp(1, pool - 1));
        }
    }
}
