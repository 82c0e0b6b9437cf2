use std::fmt;

use crate::error::{Error, Result};

pub const NUM_CONDITIONS: usize = 14;
pub const NUM_PATHOLOGIES: usize = 13;
pub const NO_FINDING: usize = 13;

/// Condition names in the fixed label order used everywhere (vectors, CSVs, rule file).
pub const CONDITIONS: [&str; NUM_CONDITIONS] = [
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "No Finding",
];

pub fn condition_index(name: &str) -> Option<usize> {
    CONDITIONS.iter().position(|c| c.eq_ignore_ascii_case(name))
}

/// 14 binary condition indicators. "No Finding" is set iff no pathology is.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelVector([bool; NUM_CONDITIONS]);

impl LabelVector {
    /// Derives "No Finding" from the 13 pathology flags.
    pub fn from_pathologies(p: [bool; NUM_PATHOLOGIES]) -> Self {
        let mut v = [false; NUM_CONDITIONS];
        v[..NUM_PATHOLOGIES].copy_from_slice(&p);
        v[NO_FINDING] = !p.iter().any(|&b| b);
        Self(v)
    }

    /// Positive pathology indices; "No Finding" is derived.
    pub fn from_positives(idx: &[usize]) -> Self {
        let mut p = [false; NUM_PATHOLOGIES];
        for &i in idx {
            p[i] = true;
        }
        Self::from_pathologies(p)
    }

    /// Raw flags, no consistency enforced (for metric tests on arbitrary sets).
    pub fn from_raw(v: [bool; NUM_CONDITIONS]) -> Self {
        Self(v)
    }

    pub fn from_ints(v: &[u8]) -> Result<Self> {
        if v.len() != NUM_CONDITIONS || v.iter().any(|&x| x > 1) {
            return Err(Error::Data(format!(
                "label vector must be 14 values in {{0,1}}, got {v:?}"
            )));
        }
        let mut out = [false; NUM_CONDITIONS];
        for (o, &x) in out.iter_mut().zip(v) {
            *o = x == 1;
        }
        let lv = Self(out);
        if !lv.is_consistent() {
            return Err(Error::Data(
                "\"No Finding\" must be 1 iff every other label is 0".into(),
            ));
        }
        Ok(lv)
    }

    pub fn to_ints(self) -> [u8; NUM_CONDITIONS] {
        self.0.map(u8::from)
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn flags(&self) -> &[bool; NUM_CONDITIONS] {
        &self.0
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..NUM_CONDITIONS).filter(|&i| self.0[i]).collect()
    }

    pub fn pathology_positives(&self) -> Vec<usize> {
        (0..NUM_PATHOLOGIES).filter(|&i| self.0[i]).collect()
    }

    pub fn is_consistent(&self) -> bool {
        self.0[NO_FINDING] == !self.0[..NUM_PATHOLOGIES].iter().any(|&b| b)
    }
}

impl fmt::Debug for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .positives()
            .into_iter()
            .map(|i| CONDITIONS[i])
            .collect();
        write!(f, "LabelVector{names:?}")
    }
}
