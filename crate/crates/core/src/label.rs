use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of output classes.
pub const NUM_CLASSES: usize = 3;

/// Class label in `{1, 2, 3}`: 1 first-person transactional, 2 unrelated,
/// 3 indirect or narrative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct Label(u8);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("label {0} out of range 1..=3")]
pub struct LabelError(pub i64);

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [Label(1), Label(2), Label(3)];

    pub fn new(value: i64) -> Result<Self, LabelError> {
        match value {
            1..=3 => Ok(Label(value as u8)),
            _ => Err(LabelError(value)),
        }
    }

    /// Zero-based class index.
    pub fn from_index(index: usize) -> Result<Self, LabelError> {
        Self::new(index as i64 + 1)
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Label {
    type Error = LabelError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Label::new(value)
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
