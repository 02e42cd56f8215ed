//! Rule-based conversion of free-text pain descriptions into NRS scores per
//! 24/48/72 h window, and binarization at the clinical threshold.
//!
//! Windows are (0, 24], (24, 48], (48, 72] hours, except that the first
//! window also admits t = 0 (an observation taken at admission).
//!
//! Within one observation, the matching rule with the highest priority wins;
//! equal priorities are impossible within a validated rule set. Across
//! observations in a window the maximum score is kept.

use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{PainObservation, PainReading};

pub const DEFAULT_THRESHOLD: u8 = 4;

/// Upper window bounds in hours.
pub const WINDOWS_H: [f64; 3] = [24.0, 48.0, 72.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PainWindowScores {
    pub nrs_24: Option<u8>,
    pub nrs_48: Option<u8>,
    pub nrs_72: Option<u8>,
}

impl PainWindowScores {
    pub fn get(&self, horizon: Horizon) -> Option<u8> {
        match horizon {
            Horizon::H48 => self.nrs_48,
            Horizon::H72 => self.nrs_72,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Horizon {
    #[serde(rename = "48h")]
    H48,
    #[serde(rename = "72h")]
    H72,
}

impl Horizon {
    pub const ALL: [Horizon; 2] = [Horizon::H48, Horizon::H72];

    pub fn hours(self) -> f64 {
        match self {
            Horizon::H48 => 48.0,
            Horizon::H72 => 72.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Horizon::H48 => "48h",
            Horizon::H72 => "72h",
        }
    }
}

impl std::fmt::Display for Horizon {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "48h" | "h48" | "48" => Ok(Horizon::H48),
            "72h" | "h72" | "72" => Ok(Horizon::H72),
            other => Err(Error::Argument(format!("unknown horizon `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PainLabel {
    pub horizon: Horizon,
    pub positive: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleScore {
    Fixed(u8),
    /// Score read from the first capture group.
    Captured,
}

#[derive(Debug, Clone)]
pub struct ExtractionRule {
    pub pattern: Regex,
    pub score: RuleScore,
    pub priority: i32,
}

impl ExtractionRule {
    pub fn new(pattern: &str, score: RuleScore, priority: i32) -> Result<Self> {
        let pattern = Regex::new(pattern)
            .map_err(|e| Error::Parse(format!("bad rule pattern `{pattern}`: {e}")))?;
        if let RuleScore::Fixed(s) = score {
            if s > 10 {
                return Err(Error::Argument(format!("rule score {s} outside 0-10")));
            }
        }
        if score == RuleScore::Captured && pattern.captures_len() < 2 {
            return Err(Error::Argument(format!(
                "rule `{pattern}` reads a captured score but has no capture group"
            )));
        }
        Ok(Self {
            pattern,
            score,
            priority,
        })
    }

    fn score_in(&self, text: &str) -> Option<u8> {
        match self.score {
            RuleScore::Fixed(s) => self.pattern.is_match(text).then_some(s),
            RuleScore::Captured => self
                .pattern
                .captures_iter(text)
                .filter_map(|c| c.get(1)?.as_str().parse::<u8>().ok())
                .filter(|s| *s <= 10)
                .max(),
        }
    }
}

/// A validated rule set, sorted by descending priority.
#[derive(Debug, Clone)]
pub struct RuleSet {
    rules: Vec<ExtractionRule>,
}

impl RuleSet {
    pub fn new(mut rules: Vec<ExtractionRule>) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::Argument("rule set is empty".into()));
        }
        rules.sort_by_key(|r| std::cmp::Reverse(r.priority));
        if let Some(w) = rules.windows(2).find(|w| w[0].priority == w[1].priority) {
            return Err(Error::Argument(format!(
                "duplicate rule priority {}",
                w[0].priority
            )));
        }
        Ok(Self { rules })
    }

    /// Explicit numeric patterns first, then the qualitative lexicon
    /// mild=2, moderate=5, severe=7, excruciating=9.
    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULES).expect("embedded rule set is valid")
    }

    /// Parses `pattern, score, priority` lines. The pattern may itself contain
    /// commas; the last two fields are split off from the right. A score of
    /// `$1` reads the score from the first capture group. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.rsplitn(3, ',');
            let (Some(prio), Some(score), Some(pattern)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::Parse(format!("rule line {}: expected `pattern, score, priority`", i + 1)));
            };
            let priority: i32 = prio
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("rule line {}: bad priority `{prio}`", i + 1)))?;
            let score = match score.trim() {
                "$1" => RuleScore::Captured,
                s => RuleScore::Fixed(s.parse().map_err(|_| {
                    Error::Parse(format!("rule line {}: bad score `{s}`", i + 1))
                })?),
            };
            rules.push(ExtractionRule::new(pattern.trim(), score, priority)?);
        }
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn rules(&self) -> &[ExtractionRule] {
        &self.rules
    }

    /// Score for one text observation: the highest-priority matching rule,
    /// taking the higher score if that rule matches more than once.
    pub fn score_text(&self, text: &str) -> Option<u8> {
        self.rules.iter().find_map(|r| r.score_in(text))
    }
}

pub const DEFAULT_RULES: &str = r"# pattern, score, priority
(?i)\b(?:nrs|vas|pain\s+score)\s*(?:of|is|was|[:=])?\s*(10|[0-9])\b, $1, 100
(?i)\bpain\b\D{0,12}?\b(10|[0-9])\s*/\s*10\b, $1, 95
(?i)\b(10|[0-9])\s*/\s*10\b[^.]{0,20}\bpain\b, $1, 90
(?i)\bpain\b\s*(?:level|rating|intensity)?\s*[:=]?\s*(10|[0-9])\b, $1, 85
(?i)\bexcruciating\b, 9, 40
(?i)\bsevere\b, 7, 30
(?i)\bmoderate\b, 5, 20
(?i)\bmild\b, 2, 10
";

fn window_index(t: f64) -> Option<usize> {
    if !(t.is_finite() && t >= 0.0) {
        return None;
    }
    if t <= WINDOWS_H[0] {
        Some(0)
    } else if t <= WINDOWS_H[1] {
        Some(1)
    } else if t <= WINDOWS_H[2] {
        Some(2)
    } else {
        None
    }
}

/// Collects per-window maximum scores from timestamped observations.
pub fn extract_scores(observations: &[PainObservation], rules: &RuleSet) -> PainWindowScores {
    let mut best: [Option<u8>; 3] = [None; 3];
    for obs in observations {
        let Some(w) = window_index(obs.time_h) else {
            continue;
        };
        let score = match &obs.reading {
            PainReading::Nrs(s) => Some(*s).filter(|s| *s <= 10),
            PainReading::Text(t) => {
                let s = rules.score_text(t);
                if s.is_none() {
                    log::debug!("no extraction rule matched at t={}h: {t:?}", obs.time_h);
                }
                s
            }
        };
        if let Some(s) = score {
            best[w] = Some(best[w].map_or(s, |b| b.max(s)));
        }
    }
    PainWindowScores {
        nrs_24: best[0],
        nrs_48: best[1],
        nrs_72: best[2],
    }
}

/// One label per horizon whose score is present.
pub fn binarize(scores: &PainWindowScores, threshold: u8) -> Result<Vec<PainLabel>> {
    if threshold > 10 {
        return Err(Error::Argument(format!("threshold {threshold} outside 0-10")));
    }
    Ok(Horizon::ALL
        .iter()
        .filter_map(|&h| {
            scores.get(h).map(|s| PainLabel {
                horizon: h,
                positive: s >= threshold,
            })
        })
        .collect())
}
