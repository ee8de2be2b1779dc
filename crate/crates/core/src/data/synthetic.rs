//! Procedural paired tissue: non-overlapping nuclei rendered as a fluorescence
//! stack (DAPI disks, Lap2 rims, Ki67 on a positive subset) and as a
//! brightfield image via fixed linear stain mixing in optical density.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ihc_path, mif_path, CaseEntry, DataError, DatasetManifest, Layout, PairedSample, SplitFractions, MANIFEST_VERSION};
use crate::io::{write_label_png, write_png, Depth};
use crate::metrics::InstanceLabelMap;
use crate::prior::{prior_path, synthetic_blob_backend, Blob, PatchKey, SegmentationBackend};
use crate::raster::{ImagePatch, MifStack, Raster, ValueRange};

/// Hematoxylin optical density per unit concentration (R, G, B).
pub const HEMATOXYLIN_OD: [f64; 3] = [0.65, 0.70, 0.29];
/// DAB optical density per unit concentration (R, G, B).
pub const DAB_OD: [f64; 3] = [0.27, 0.57, 0.78];

const BACKGROUND_FLUOR: f64 = 0.03;
const BACKGROUND_HEMATOXYLIN: f64 = 0.1;
/// Minimum free pixels between neighbouring nucleus edges.
const MIN_GAP: f64 = 3.0;
/// DAB masks part of the hematoxylin counterstain in positive nuclei.
const POSITIVE_COUNTERSTAIN: f64 = 0.7;
const PLACEMENT_ATTEMPTS: usize = 20_000;

pub const KNOWN_MARKERS: [&str; 3] = ["DAPI", "Lap2", "Ki67"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTissueSpec {
    pub size: usize,
    pub n_nuclei: usize,
    pub nucleus_radius_range: (f64, f64),
    pub ki67_positive_fraction: f64,
    pub marker_channels: Vec<String>,
    pub noise_sigma: f64,
    /// Multiplies stain concentrations; models case-to-case staining drift.
    pub stain_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticTissueSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_nuclei: 12,
            nucleus_radius_range: (3.0, 5.0),
            ki67_positive_fraction: 0.3,
            marker_channels: Layout::DeepliifLike.channel_names(),
            noise_sigma: 0.02,
            stain_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticTissueSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        let (lo, hi) = self.nucleus_radius_range;
        if !(lo >= 2.0 && hi >= lo) {
            return bad(format!("radius range {lo}..{hi} (minimum radius is 2 px)"));
        }
        if !(0.0..=1.0).contains(&self.ki67_positive_fraction) {
            return bad(format!("ki67_positive_fraction {} outside [0, 1]", self.ki67_positive_fraction));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if !(self.stain_scale > 0.0) {
            return bad(format!("stain_scale {}", self.stain_scale));
        }
        if (self.size as f64) < 2.0 * hi + 4.0 {
            return bad(format!("patch size {} too small for radius {hi}", self.size));
        }
        if self.marker_channels.is_empty() {
            return bad("no marker channels".into());
        }
        for m in &self.marker_channels {
            if !KNOWN_MARKERS.iter().any(|k| k.eq_ignore_ascii_case(m)) {
                return bad(format!("unknown marker `{m}` (known: DAPI, Lap2, Ki67)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusRecord {
    pub label: u32,
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub ki67_positive: bool,
    pub dapi_intensity: f64,
    pub ki67_intensity: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub sample: PairedSample,
    pub labels: InstanceLabelMap,
    pub nuclei: Vec<NucleusRecord>,
}

fn place_nuclei(spec: &SyntheticTissueSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64, f64)>, DataError> {
    let (lo, hi) = spec.nucleus_radius_range;
    let size = spec.size as f64;
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(spec.n_nuclei);
    let mut attempts = 0;
    while placed.len() < spec.n_nuclei {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(DataError::Overflow {
                requested: spec.n_nuclei,
                placed: placed.len(),
                size: spec.size,
            });
        }
        let r = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let margin = r + 1.0;
        let row = rng.random_range(margin..size - margin);
        let col = rng.random_range(margin..size - margin);
        let clear = placed
            .iter()
            .all(|&(pr, pc, prad)| ((row - pr).powi(2) + (col - pc).powi(2)).sqrt() >= r + prad + MIN_GAP);
        if clear {
            placed.push((row, col, r));
        }
    }
    Ok(placed)
}

/// Fractional coverage of pixel `(r, c)` by a disk, linear over one pixel.
fn coverage(r: usize, c: usize, row: f64, col: f64, radius: f64) -> f64 {
    let d = ((r as f64 - row).powi(2) + (c as f64 - col).powi(2)).sqrt();
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

/// Renders one pair. Deterministic in `spec`.
pub fn generate_synthetic_pair(spec: &SyntheticTissueSpec, case_id: &str, patch_id: &str) -> Result<SyntheticPair, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = place_nuclei(spec, &mut rng)?;
    let n = centers.len();
    let n_pos = (n as f64 * spec.ki67_positive_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut positive = vec![false; n];
    for &i in &order[..n_pos] {
        positive[i] = true;
    }

    let nuclei: Vec<NucleusRecord> = centers
        .iter()
        .enumerate()
        .map(|(i, &(row, col, radius))| NucleusRecord {
            label: i as u32 + 1,
            row,
            col,
            radius,
            ki67_positive: positive[i],
            dapi_intensity: rng.random_range(0.65..1.0),
            ki67_intensity: if positive[i] { rng.random_range(0.6..1.0) } else { 0.0 },
        })
        .collect();
    let hema: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..1.4)).collect();
    let dab: Vec<f64> = (0..n).map(|_| rng.random_range(1.3..1.7)).collect();
    let lap2: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..0.9)).collect();

    let s = spec.size;
    let mut labels = vec![0u32; s * s];
    let mut dapi = Raster::filled(s, s, 1, BACKGROUND_FLUOR);
    let mut ki67 = Raster::filled(s, s, 1, BACKGROUND_FLUOR);
    let mut rim = Raster::filled(s, s, 1, BACKGROUND_FLUOR);
    let mut h_conc = Raster::filled(s, s, 1, BACKGROUND_HEMATOXYLIN);
    let mut d_conc = Raster::zeros(s, s, 1);
    for (i, nuc) in nuclei.iter().enumerate() {
        let r0 = (nuc.row - nuc.radius - 1.0).floor().max(0.0) as usize;
        let r1 = ((nuc.row + nuc.radius + 2.0).ceil() as usize).min(s);
        let c0 = (nuc.col - nuc.radius - 1.0).floor().max(0.0) as usize;
        let c1 = ((nuc.col + nuc.radius + 2.0).ceil() as usize).min(s);
        for r in r0..r1 {
            for c in c0..c1 {
                let cov = coverage(r, c, nuc.row, nuc.col, nuc.radius);
                if cov <= 0.0 {
                    continue;
                }
                let d2 = (r as f64 - nuc.row).powi(2) + (c as f64 - nuc.col).powi(2);
                if d2 <= nuc.radius * nuc.radius {
                    labels[r * s + c] = nuc.label;
                }
                let inner = coverage(r, c, nuc.row, nuc.col, nuc.radius - 2.0);
                dapi.set(r, c, 0, dapi.get(r, c, 0) + cov * nuc.dapi_intensity);
                ki67.set(r, c, 0, ki67.get(r, c, 0) + cov * nuc.ki67_intensity);
                rim.set(r, c, 0, rim.get(r, c, 0) + (cov - inner) * lap2[i]);
                h_conc.set(r, c, 0, h_conc.get(r, c, 0) + cov * hema[i] * if nuc.ki67_positive { POSITIVE_COUNTERSTAIN } else { 1.0 });
                if nuc.ki67_positive {
                    d_conc.set(r, c, 0, d_conc.get(r, c, 0) + cov * dab[i]);
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| DataError::Spec(e.to_string()))?;
    let jitter = |v: f64, rng: &mut ChaCha8Rng| (v + noise.sample(rng)).clamp(0.0, 1.0);

    let mut channels = Vec::with_capacity(spec.marker_channels.len());
    for m in &spec.marker_channels {
        let src = match m.to_ascii_lowercase().as_str() {
            "dapi" => &dapi,
            "lap2" => &rim,
            _ => &ki67,
        };
        let mut ch = src.clone();
        for v in ch.data_mut() {
            *v = jitter(*v, &mut rng);
        }
        channels.push(ch);
    }
    let mut ihc = Raster::zeros(s, s, 3);
    for r in 0..s {
        for c in 0..s {
            let h = h_conc.get(r, c, 0) * spec.stain_scale;
            let d = d_conc.get(r, c, 0) * spec.stain_scale;
            for ch in 0..3 {
                let od = h * HEMATOXYLIN_OD[ch] + d * DAB_OD[ch];
                ihc.set(r, c, ch, jitter((-od).exp(), &mut rng));
            }
        }
    }

    let nuclear = spec
        .marker_channels
        .iter()
        .position(|m| m.eq_ignore_ascii_case("dapi"))
        .unwrap_or(0);
    let refs: Vec<&Raster> = channels.iter().collect();
    let mif = MifStack::new(Raster::stack(&refs)?, ValueRange::Unit, spec.marker_channels.clone(), nuclear)?;
    let ihc = ImagePatch::new(ihc, ValueRange::Unit)?;
    let sample = PairedSample::new(case_id.to_string(), patch_id.to_string(), ihc, mif)?;
    let labels = InstanceLabelMap::new(s, s, labels).map_err(|e| DataError::Spec(e.to_string()))?;
    Ok(SyntheticPair { sample, labels, nuclei })
}

/// A whole synthetic dataset: cases of patches with per-case staining drift
/// and per-patch Ki67 positivity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub cases: usize,
    pub patches_per_case: usize,
    pub size: usize,
    pub n_nuclei: usize,
    pub nucleus_radius_range: (f64, f64),
    /// Per-patch positive fraction is drawn uniformly from this range.
    pub ki67_fraction_range: (f64, f64),
    pub noise_sigma: f64,
    pub layout: Layout,
    /// Also write blob-oracle priors under `priors/`.
    pub write_priors: bool,
    pub seed: u64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            cases: 16,
            patches_per_case: 4,
            size: 64,
            n_nuclei: 12,
            nucleus_radius_range: (3.0, 5.0),
            ki67_fraction_range: (0.1, 0.6),
            noise_sigma: 0.02,
            layout: Layout::DeepliifLike,
            write_priors: true,
            seed: 0,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn case_id(i: usize) -> String {
    format!("case{i:02}")
}

pub fn patch_id(j: usize) -> String {
    format!("p{j:02}")
}

impl SynthDatasetSpec {
    /// Checks everything that can be checked without generating: counts,
    /// ranges and the per-patch tissue parameters.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.cases == 0 || self.patches_per_case == 0 {
            return Err(DataError::Spec("dataset needs at least one case and one patch".into()));
        }
        let (flo, fhi) = self.ki67_fraction_range;
        if !(0.0 <= flo && flo <= fhi && fhi <= 1.0) {
            return Err(DataError::Spec(format!("ki67 fraction range {flo}..{fhi}")));
        }
        SyntheticTissueSpec {
            size: self.size,
            n_nuclei: self.n_nuclei,
            nucleus_radius_range: self.nucleus_radius_range,
            ki67_positive_fraction: flo,
            marker_channels: self.layout.channel_names(),
            noise_sigma: self.noise_sigma,
            stain_scale: 1.0,
            seed: self.seed,
        }
        .validate()
    }
}

/// Generates every pair of the dataset in memory, in case/patch order.
pub fn generate_dataset(spec: &SynthDatasetSpec) -> Result<Vec<SyntheticPair>, DataError> {
    spec.validate()?;
    let (flo, fhi) = spec.ki67_fraction_range;
    let mut out = Vec::with_capacity(spec.cases * spec.patches_per_case);
    for i in 0..spec.cases {
        let mut case_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, i as u64, u64::MAX));
        let stain_scale = case_rng.random_range(0.85..1.15);
        for j in 0..spec.patches_per_case {
            let mut patch_rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, i as u64, j as u64));
            let fraction = if fhi > flo { patch_rng.random_range(flo..=fhi) } else { flo };
            let tissue = SyntheticTissueSpec {
                size: spec.size,
                n_nuclei: spec.n_nuclei,
                nucleus_radius_range: spec.nucleus_radius_range,
                ki67_positive_fraction: fraction,
                marker_channels: spec.layout.channel_names(),
                noise_sigma: spec.noise_sigma,
                stain_scale,
                seed: patch_rng.random(),
            };
            out.push(generate_synthetic_pair(&tissue, &case_id(i), &patch_id(j))?);
        }
    }
    Ok(out)
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |e| DataError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Writes the dataset layout under `root` (which must exist) and returns the
/// manifest. Splits are assigned with `spec.seed` and recorded in it.
pub fn write_synthetic_dataset(root: &Path, spec: &SynthDatasetSpec) -> Result<DatasetManifest, DataError> {
    let pairs = generate_dataset(spec)?;
    let case_ids: Vec<String> = (0..spec.cases).map(case_id).collect();
    let splits = if spec.cases >= 3 {
        Some(super::make_splits(&case_ids, spec.seed, SplitFractions::default())?)
    } else {
        None
    };
    for pair in &pairs {
        let s = &pair.sample;
        let dir = root.join(&s.case_id);
        std::fs::create_dir_all(&dir).map_err(write_err(&dir))?;
        write_png(&ihc_path(root, &s.case_id, &s.patch_id), s.ihc.raster(), Depth::Eight)?;
        for (k, name) in s.mif.channel_names().iter().enumerate() {
            write_png(&mif_path(root, &s.case_id, &s.patch_id, name), &s.mif.raster().channel(k), Depth::Sixteen)?;
        }
        write_label_png(
            &dir.join(format!("{}_labels.png", s.patch_id)),
            pair.labels.height(),
            pair.labels.width(),
            pair.labels.labels(),
        )?;
        let nuclei_path = dir.join(format!("{}_nuclei.json", s.patch_id));
        let json = serde_json::to_string_pretty(&pair.nuclei).expect("records serialize");
        std::fs::write(&nuclei_path, json + "\n").map_err(write_err(&nuclei_path))?;
        if spec.write_priors {
            let blobs = pair
                .nuclei
                .iter()
                .map(|n| Blob {
                    row: n.row,
                    col: n.col,
                    radius: n.radius,
                })
                .collect();
            let oracle = synthetic_blob_backend(blobs, spec.seed).map_err(|e| DataError::Spec(e.to_string()))?;
            let key = PatchKey::new(&s.case_id, &s.patch_id);
            let map = oracle
                .probability_map(&key, s.ihc.raster())
                .map_err(DataError::Spec)?;
            let path = prior_path(root, &key);
            let parent = path.parent().expect("prior path has a parent");
            std::fs::create_dir_all(parent).map_err(write_err(parent))?;
            write_png(&path, &map, Depth::Sixteen)?;
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        layout: spec.layout,
        channel_names: spec.layout.channel_names(),
        nuclear_channel: spec.layout.nuclear_channel(),
        patch_size: spec.size,
        cases: case_ids
            .iter()
            .map(|c| CaseEntry {
                case_id: c.clone(),
                split: splits.as_ref().and_then(|m| m.split_of(c)),
                patches: (0..spec.patches_per_case).map(patch_id).collect(),
            })
            .collect(),
    };
    manifest.write(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, LoadOptions};

    /// 4-connected components above `thr`, by flood fill.
    fn count_components(r: &Raster, thr: f64) -> usize {
        let (h, w) = (r.height(), r.width());
        let mut seen = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if seen[start] || r.data()[start] <= thr {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = (p / w, p % w);
                let mut push = |q: usize| {
                    if !seen[q] && r.data()[q] > thr {
                        seen[q] = true;
                        stack.push(q);
                    }
                };
                if y > 0 {
                    push(p - w);
                }
                if y + 1 < h {
                    push(p + w);
                }
                if x > 0 {
                    push(p - 1);
                }
                if x + 1 < w {
                    push(p + 1);
                }
            }
        }
        count
    }

    fn spec(n: usize, f: f64, seed: u64) -> SyntheticTissueSpec {
        SyntheticTissueSpec {
            size: 96,
            n_nuclei: n,
            ki67_positive_fraction: f,
            seed,
            ..SyntheticTissueSpec::default()
        }
    }

    #[test]
    fn positive_count_is_exact() {
        let p = generate_synthetic_pair(&spec(50, 0.3, 4), "c", "p").unwrap();
        assert_eq!(p.nuclei.iter().filter(|n| n.ki67_positive).count(), 15);
        assert_eq!(p.labels.n(), 50);
    }

    #[test]
    fn zero_fraction_leaves_ki67_background() {
        let p = generate_synthetic_pair(&spec(20, 0.0, 1), "c", "p").unwrap();
        let ki = p.sample.mif.raster().channel(2);
        let mean = ki.data().iter().sum::<f64>() / ki.data().len() as f64;
        assert!((mean - BACKGROUND_FLUOR).abs() < 0.01, "{mean}");
        assert!(ki.min_max().1 < BACKGROUND_FLUOR + 6.0 * 0.02);
    }

    #[test]
    fn dapi_components_match_nucleus_count() {
        for seed in 0..5 {
            let p = generate_synthetic_pair(&spec(30, 0.4, seed), "c", "p").unwrap();
            let dapi = p.sample.mif.raster().channel(0);
            let half = dapi.min_max().1 / 2.0;
            assert_eq!(count_components(&dapi, half), 30, "seed {seed}");
        }
    }

    #[test]
    fn positive_nuclei_are_brighter_in_ki67() {
        let s = spec(40, 0.5, 9);
        let p = generate_synthetic_pair(&s, "c", "p").unwrap();
        let ki = p.sample.mif.raster().channel(2);
        let means = p.labels.instance_means(&ki).unwrap();
        let avg = |pos: bool| {
            let v: Vec<f64> = p
                .nuclei
                .iter()
                .filter(|n| n.ki67_positive == pos)
                .map(|n| means[n.label as usize - 1])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(avg(true) - avg(false) >= 5.0 * s.noise_sigma);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_pair(&spec(20, 0.3, 5), "c", "p").unwrap();
        let b = generate_synthetic_pair(&spec(20, 0.3, 5), "c", "p").unwrap();
        assert_eq!(a.sample, b.sample);
        assert_eq!(a.nuclei, b.nuclei);
        let c = generate_synthetic_pair(&spec(20, 0.3, 6), "c", "p").unwrap();
        assert_ne!(a.sample, c.sample);
    }

    #[test]
    fn overflow_and_bad_specs() {
        let crowded = SyntheticTissueSpec {
            size: 32,
            n_nuclei: 200,
            ..SyntheticTissueSpec::default()
        };
        let err = generate_synthetic_pair(&crowded, "c", "p").unwrap_err();
        assert!(matches!(err, DataError::Overflow { .. }));
        assert!(err.to_string().contains("lower n_nuclei"));
        for bad in [
            SyntheticTissueSpec {
                nucleus_radius_range: (1.5, 3.0),
                ..SyntheticTissueSpec::default()
            },
            SyntheticTissueSpec {
                ki67_positive_fraction: 1.5,
                ..SyntheticTissueSpec::default()
            },
            SyntheticTissueSpec {
                marker_channels: vec!["CD8".into()],
                ..SyntheticTissueSpec::default()
            },
        ] {
            assert!(matches!(generate_synthetic_pair(&bad, "c", "p"), Err(DataError::Spec(_))));
        }
    }

    #[test]
    fn brightfield_nuclei_are_dark_and_positives_brown() {
        let p = generate_synthetic_pair(&spec(20, 0.5, 2), "c", "p").unwrap();
        let ihc = p.sample.ihc.raster();
        let at = |n: &NucleusRecord| {
            let (r, c) = (n.row.round() as usize, n.col.round() as usize);
            [ihc.get(r, c, 0), ihc.get(r, c, 1), ihc.get(r, c, 2)]
        };
        let bg = [ihc.get(0, 0, 0), ihc.get(0, 0, 1), ihc.get(0, 0, 2)];
        assert!(bg.iter().all(|v| *v > 0.8));
        for n in &p.nuclei {
            let px = at(n);
            assert!(px[0] < 0.6);
            if n.ki67_positive {
                // DAB absorbs blue more than red: brown.
                assert!(px[2] < px[0]);
            } else {
                assert!(px[2] > px[0]);
            }
        }
    }

    #[test]
    fn written_dataset_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthDatasetSpec {
            cases: 3,
            patches_per_case: 2,
            size: 32,
            n_nuclei: 5,
            ..SynthDatasetSpec::default()
        };
        let manifest = write_synthetic_dataset(dir.path(), &spec).unwrap();
        assert_eq!(manifest.cases.len(), 3);
        assert!(manifest.splits(0).is_some());
        let generated = generate_dataset(&spec).unwrap();
        let loaded = load_dataset(dir.path(), Layout::DeepliifLike, &LoadOptions::default()).unwrap();
        assert_eq!(loaded.samples.len(), generated.len());
        for (g, l) in generated.iter().zip(&loaded.samples) {
            assert_eq!((&g.sample.case_id, &g.sample.patch_id), (&l.case_id, &l.patch_id));
            for (a, b) in g.sample.ihc.raster().data().iter().zip(l.ihc.raster().data()) {
                assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
            }
            for (a, b) in g.sample.mif.raster().data().iter().zip(l.mif.raster().data()) {
                assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
        let key = PatchKey::new("case00", "p00");
        assert!(prior_path(dir.path(), &key).exists());
    }
}
