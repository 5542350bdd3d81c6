use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub const NUM_CLASSES: usize = 2;

/// Cell class. Parasitized is the positive class and takes index 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Parasitized = 0,
    Uninfected = 1,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Parasitized, Class::Uninfected];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Parasitized => "parasitized",
            Class::Uninfected => "uninfected",
        }
    }

    /// Directory name in the dataset layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Class::Parasitized => "Parasitized",
            Class::Uninfected => "Uninfected",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "parasitized" => Ok(Class::Parasitized),
            "uninfected" => Ok(Class::Uninfected),
            other => Err(Error::Usage(format!("unknown class {other:?}"))),
        }
    }
}
