//! Brevity suffixes appended to the user instruction at inference time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BrevityPreset {
    #[default]
    OneSentence,
    ShorterBetter,
}

impl BrevityPreset {
    pub const ALL: [BrevityPreset; 2] = [BrevityPreset::OneSentence, BrevityPreset::ShorterBetter];

    pub fn name(self) -> &'static str {
        match self {
            BrevityPreset::OneSentence => "one-sentence",
            BrevityPreset::ShorterBetter => "shorter-better",
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            BrevityPreset::OneSentence => "one sentence",
            BrevityPreset::ShorterBetter => "the shorter the better",
        }
    }
}

impl fmt::Display for BrevityPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BrevityPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BrevityPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown brevity preset {s:?}"))
    }
}

/// A preset name resolves to its text; anything else is used verbatim.
pub fn resolve_brevity(text_or_preset: &str) -> String {
    match text_or_preset.parse::<BrevityPreset>() {
        Ok(p) => p.text().to_string(),
        Err(_) => text_or_preset.trim().to_string(),
    }
}

/// The instruction with the brevity suffix appended, separated by a space.
pub fn with_brevity(instruction: &str, suffix: Option<&str>) -> String {
    match suffix.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => format!("{} {}", instruction.trim_end(), s),
        None => instruction.to_string(),
    }
}
