//! Report templates, version 1.
//!
//! Every positive sentence carries exactly one keyword from the bundled rule
//! table for its own condition and no negation cue ahead of it. Distractor
//! sentences either contain no keyword or negate the one they contain.

use super::labels::NUM_PATHOLOGIES;

pub const TEMPLATE_VERSION: u32 = 1;

/// Findings sentence variants for each pathology, in label order.
pub const FINDINGS: [&[&str]; NUM_PATHOLOGIES] = [
    &[
        "the cardiomediastinal silhouette is widened",
        "there is mediastinal widening",
        "the mediastinum appears widened",
    ],
    &[
        "the heart is enlarged",
        "moderate cardiomegaly is present",
        "the cardiac silhouette is enlarged",
    ],
    &[
        "there is a patchy opacity in the left lung",
        "bibasilar opacities are seen",
        "increased opacity at the right base",
    ],
    &[
        "a pulmonary nodule is noted",
        "there is a mass in the right upper lobe",
        "a spiculated lesion is present",
    ],
    &[
        "there is mild pulmonary edema",
        "interstitial edema is present",
        "vascular congestion with edema",
    ],
    &[
        "there is consolidation in the left lower lobe",
        "a dense consolidation is present",
        "focal consolidation at the right base",
    ],
    &[
        "findings are concerning for pneumonia",
        "airspace disease suggests infection",
        "there is a pneumonia in the right lung",
    ],
    &[
        "there is bibasilar atelectasis",
        "linear atelectasis at the left base",
        "subsegmental atelectasis is noted",
    ],
    &[
        "there is a small right pneumothorax",
        "a left apical pneumothorax is seen",
        "pneumothorax is present",
    ],
    &[
        "there is a small left pleural effusion",
        "bilateral pleural effusions are present",
        "blunting of the costophrenic angle",
    ],
    &[
        "there is pleural thickening",
        "pleural scarring is noted at the apex",
        "a calcified pleural plaque is seen",
    ],
    &[
        "there is a healed rib fracture",
        "an acute fracture of the clavicle",
        "old rib fractures are noted",
    ],
    &[
        "an endotracheal tube is in place",
        "a right picc line terminates in the svc",
        "a pacemaker is present",
    ],
];

/// Impression phrase for each pathology, in label order.
pub const IMPRESSIONS: [&str; NUM_PATHOLOGIES] = [
    "widened mediastinum",
    "cardiomegaly",
    "lung opacity",
    "lung nodule",
    "pulmonary edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural thickening",
    "rib fracture",
    "support devices in place",
];

/// Findings sentence used when no pathology is present.
pub const NORMAL_FINDINGS: [&str; 3] = [
    "no acute cardiopulmonary process",
    "no acute cardiopulmonary abnormality",
    "the chest is unremarkable",
];

pub const NORMAL_IMPRESSION: &str = "no finding";

/// A normal-appearing sentence and the pathologies that must all be absent
/// for it to be emitted.
pub struct Distractor {
    pub text: &'static str,
    pub requires_absent: &'static [usize],
}

pub const DISTRACTORS: [Distractor; 6] = [
    Distractor {
        text: "lungs are clear",
        requires_absent: &[2, 5, 6, 4],
    },
    Distractor {
        text: "there is no pneumothorax",
        requires_absent: &[8],
    },
    Distractor {
        text: "no pleural effusion is seen",
        requires_absent: &[9],
    },
    Distractor {
        text: "the osseous structures are intact",
        requires_absent: &[11],
    },
    Distractor {
        text: "heart size is normal",
        requires_absent: &[0, 1],
    },
    Distractor {
        text: "no focal consolidation",
        requires_absent: &[5],
    },
];

pub const MAX_DISTRACTORS: usize = 2;
