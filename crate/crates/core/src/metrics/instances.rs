//! Nucleus instances from a nuclear channel: backend probability map,
//! threshold at 0.5, 8-connected components.

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::prior::{run_backend, PatchKey, SegmentationBackend};
use crate::raster::Raster;

/// Instance detection threshold on the backend probability map.
pub const DETECTION_THRESHOLD: f64 = 0.5;

/// Integer label raster: 0 is background, `1..=N` are instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    n: usize,
}

impl InstanceLabelMap {
    /// Validates that labels are contiguous `1..=N` with no empty instance.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, MetricError> {
        if labels.len() != height * width {
            return Err(MetricError::Shape(format!(
                "{} labels for {height}x{width}",
                labels.len()
            )));
        }
        let n = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut present = vec![false; n + 1];
        for &l in &labels {
            present[l as usize] = true;
        }
        if let Some(missing) = (1..=n).find(|&i| !present[i]) {
            return Err(MetricError::Labels(format!("label {missing} of 1..={n} has no pixels")));
        }
        Ok(Self {
            height,
            width,
            labels,
            n,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Instance count `N`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Mean of a single-channel raster over each instance; entry `i` belongs
    /// to label `i + 1`.
    pub fn instance_means(&self, marker: &Raster) -> Result<Vec<f64>, MetricError> {
        if marker.channels() != 1 || marker.height() != self.height || marker.width() != self.width {
            return Err(MetricError::Shape(format!(
                "marker {:?} vs labels {}x{}",
                marker.dims(),
                self.height,
                self.width
            )));
        }
        let mut sum = vec![0.0; self.n];
        let mut count = vec![0usize; self.n];
        for (&l, &v) in self.labels.iter().zip(marker.data()) {
            if l > 0 {
                sum[l as usize - 1] += v;
                count[l as usize - 1] += 1;
            }
        }
        Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
    }
}

/// Labels 8-connected foreground components in raster-scan order.
pub fn connected_components(height: usize, width: usize, foreground: &[bool]) -> InstanceLabelMap {
    let mut labels = vec![0u32; height * width];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..height * width {
        if !foreground[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / width) as isize, (p % width) as isize);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= height as isize || cc >= width as isize {
                        continue;
                    }
                    let q = rr as usize * width + cc as usize;
                    if foreground[q] && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    InstanceLabelMap {
        height,
        width,
        labels,
        n: next as usize,
    }
}

/// Instances of a single `[0,1]` nuclear channel.
pub fn detect_instances(
    nuclear: &Raster,
    key: &PatchKey,
    backend: &dyn SegmentationBackend,
) -> Result<InstanceLabelMap, MetricError> {
    if nuclear.channels() != 1 {
        return Err(MetricError::Shape(format!(
            "nuclear channel must be single-channel, got {}",
            nuclear.channels()
        )));
    }
    let prob = run_backend(backend, key, nuclear)?;
    let fg: Vec<bool> = prob.raster().data().iter().map(|&p| p > DETECTION_THRESHOLD).collect();
    Ok(connected_components(nuclear.height(), nuclear.width(), &fg))
}

/// `(|N_pred - N_gt|, |N_pred - N_gt| / max(N_gt, 1))`.
pub fn nuclei_count_delta(
    pred_nuclear: &Raster,
    gt_nuclear: &Raster,
    key: &PatchKey,
    backend: &dyn SegmentationBackend,
) -> Result<(usize, f64), MetricError> {
    let np = detect_instances(pred_nuclear, key, backend)?.n();
    let ng = detect_instances(gt_nuclear, key, backend)?.n();
    let d = np.abs_diff(ng);
    Ok((d, d as f64 / ng.max(1) as f64))
}
