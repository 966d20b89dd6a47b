//! MRI sequence tags and the fixed channel orders used by the models.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T1ce,
    T2,
    Flair,
}

impl Modality {
    /// Every modality, in 4-channel order. Also the classifier's modality order.
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1ce, Modality::T2, Modality::Flair];
    pub const THREE_CHANNEL: [Modality; 3] = [Modality::T1ce, Modality::T2, Modality::Flair];

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1ce => "t1ce",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Channel order for a segmentation model with `channels` inputs.
    pub fn channel_order(channels: usize) -> Option<&'static [Modality]> {
        match channels {
            4 => Some(&Self::ALL),
            3 => Some(&Self::THREE_CHANNEL),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown modality {0:?}")]
pub struct UnknownModality(pub String);

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t1" | "t1w" => Ok(Modality::T1),
            "t1ce" | "t1gd" | "t1wce" => Ok(Modality::T1ce),
            "t2" | "t2w" => Ok(Modality::T2),
            "flair" => Ok(Modality::Flair),
            _ => Err(UnknownModality(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert_eq!("T1wCE".parse::<Modality>().unwrap(), Modality::T1ce);
        assert!("dwi".parse::<Modality>().is_err());
    }
}
