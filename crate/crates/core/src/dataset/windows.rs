use serde::{Deserialize, Serialize};

use super::record::LongitudinalDataset;
use super::schema::N_TARGETS;

/// Number of input visits per window.
pub const WINDOW_LEN: usize = 3;

/// `w` consecutive input visits and the targets of the following visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    /// Index of the subject in its dataset.
    pub subject: usize,
    pub subject_id: String,
    /// Visit indices of the inputs followed by the target visit.
    pub visits: Vec<u32>,
    /// One feature row per input visit. NaN marks a missing cell.
    pub inputs: Vec<Vec<f64>>,
    pub target: [f64; N_TARGETS],
    pub diagnosis: Option<String>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn target_visit(&self) -> u32 {
        *self.visits.last().expect("window has visits")
    }

    pub fn target_complete(&self) -> bool {
        self.target.iter().all(|t| t.is_finite())
    }
}

/// Slide a window of `w` inputs over every run of consecutive visit indices.
/// A run of `v ≥ w + 1` visits yields `v − w` windows.
pub fn build_windows(ds: &LongitudinalDataset, w: usize) -> Vec<Window> {
    let w = w.max(1);
    let mut out = Vec::new();
    for (si, s) in ds.subjects.iter().enumerate() {
        let mut run_start = 0;
        for end in 1..=s.visits.len() {
            let breaks =
                end == s.visits.len() || s.visits[end].visit != s.visits[end - 1].visit + 1;
            if !breaks {
                continue;
            }
            let run = &s.visits[run_start..end];
            for start in 0..run.len().saturating_sub(w) {
                let inputs = &run[start..start + w];
                let target = &run[start + w];
                out.push(Window {
                    subject: si,
                    subject_id: s.id.clone(),
                    visits: run[start..=start + w].iter().map(|v| v.visit).collect(),
                    inputs: inputs.iter().map(|v| v.features.clone()).collect(),
                    target: target.targets,
                    diagnosis: s.diagnosis().map(str::to_string),
                });
            }
            run_start = end;
        }
    }
    out
}
