//! Fixed 44-feature column layout grouped by modality.

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const N_FEATURES: usize = 44;
pub const N_TARGETS: usize = 3;
pub const TARGET_NAMES: [&str; N_TARGETS] = ["MMSE", "CDRSB", "ADAS13"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Genetic,
    Csf,
    Pet,
    Mri,
    Demographics,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Genetic,
        Modality::Csf,
        Modality::Pet,
        Modality::Mri,
        Modality::Demographics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Genetic => "genetic",
            Modality::Csf => "csf",
            Modality::Pet => "pet",
            Modality::Mri => "mri",
            Modality::Demographics => "demographics",
        }
    }

    /// Column range inside the feature vector.
    pub fn range(self) -> Range<usize> {
        match self {
            Modality::Genetic => 0..1,
            Modality::Csf => 1..4,
            Modality::Pet => 4..7,
            Modality::Mri => 7..25,
            Modality::Demographics => 25..44,
        }
    }

    pub fn width(self) -> usize {
        self.range().len()
    }
}

const MRI_NETWORKS: [&str; 17] = [
    "VisCent",
    "VisPeri",
    "SomMotA",
    "SomMotB",
    "DorsAttnA",
    "DorsAttnB",
    "SalVentAttnA",
    "SalVentAttnB",
    "LimbicA",
    "LimbicB",
    "ContA",
    "ContB",
    "ContC",
    "DefaultA",
    "DefaultB",
    "DefaultC",
    "TempPar",
];

/// One-hot categorical groups inside the demographic block, after the two
/// numeric columns.
pub const DEMOGRAPHIC_GROUPS: [(&str, &[&str]); 4] = [
    ("PTGENDER", &["Male", "Female"]),
    ("PTETHCAT", &["Hisp", "NotHisp", "Unknown"]),
    (
        "PTRACCAT",
        &[
            "AmIndAk", "Asian", "Black", "HawPI", "White", "More", "Unknown",
        ],
    ),
    (
        "PTMARRY",
        &["Married", "Widowed", "Divorced", "Never", "Unknown"],
    ),
];

/// Index of the first one-hot column.
pub const ONE_HOT_START: usize = 27;

pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = vec![
        "APOE4".into(),
        "ABETA".into(),
        "TAU".into(),
        "PTAU".into(),
        "FDG".into(),
        "PIB".into(),
        "AV45".into(),
    ];
    names.extend(MRI_NETWORKS.iter().map(|n| format!("CT_{n}")));
    names.push("ICV".into());
    names.push("AGE".into());
    names.push("PTEDUCAT".into());
    for (group, levels) in DEMOGRAPHIC_GROUPS {
        names.extend(levels.iter().map(|l| format!("{group}_{l}")));
    }
    debug_assert_eq!(names.len(), N_FEATURES);
    names
}

/// Column ranges of each one-hot group.
pub fn one_hot_ranges() -> Vec<Range<usize>> {
    let mut start = ONE_HOT_START;
    DEMOGRAPHIC_GROUPS
        .iter()
        .map(|(_, levels)| {
            let r = start..start + levels.len();
            start = r.end;
            r
        })
        .collect()
}
