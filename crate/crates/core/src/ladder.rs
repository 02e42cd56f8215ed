//! Analgesic-ladder classification of free-text drug mentions and the
//! per-window dosing profile built from a medication log.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::MedicationEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DrugTier {
    NonOpioid = 1,
    ModerateOpioid = 2,
    StrongOpioid = 3,
}

impl DrugTier {
    pub const ALL: [DrugTier; 3] = [
        DrugTier::NonOpioid,
        DrugTier::ModerateOpioid,
        DrugTier::StrongOpioid,
    ];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(DrugTier::NonOpioid),
            2 => Some(DrugTier::ModerateOpioid),
            3 => Some(DrugTier::StrongOpioid),
            _ => None,
        }
    }

    fn index(self) -> usize {
        self as usize - 1
    }
}

/// Generic drug names mapped to tiers, plus brand/alias -> generic synonyms.
/// Keys are normalized (lowercase words separated by single spaces).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrugLexicon {
    tiers: BTreeMap<String, DrugTier>,
    synonyms: BTreeMap<String, String>,
}

pub const DEFAULT_LEXICON: &str = "\
# name, tier, synonyms...
morphine, 3, ms contin, mst
fentanyl, 3, duragesic
oxycodone, 3, oxycontin, oxynorm
codeine, 2
tramadol, 2, ultram
ibuprofen, 1, advil, motrin
acetaminophen, 1, paracetamol, tylenol
";

impl DrugLexicon {
    pub fn new(
        tiers: BTreeMap<String, DrugTier>,
        synonyms: BTreeMap<String, String>,
    ) -> Result<Self> {
        if tiers.is_empty() {
            return Err(Error::Argument("drug lexicon is empty".into()));
        }
        let tiers: BTreeMap<_, _> = tiers.into_iter().map(|(k, v)| (normalize(&k), v)).collect();
        let mut syn = BTreeMap::new();
        for (k, v) in synonyms {
            let target = normalize(&v);
            if !tiers.contains_key(&target) {
                return Err(Error::Argument(format!(
                    "synonym `{k}` points at unknown drug `{v}`"
                )));
            }
            let key = normalize(&k);
            if tiers.contains_key(&key) {
                return Err(Error::Argument(format!(
                    "`{k}` is both a drug and a synonym"
                )));
            }
            syn.insert(key, target);
        }
        Ok(Self {
            tiers,
            synonyms: syn,
        })
    }

    /// Morphine, fentanyl, oxycodone (tier 3); codeine, tramadol (tier 2);
    /// ibuprofen, acetaminophen (tier 1), with common brand names.
    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("embedded lexicon is valid")
    }

    /// Parses `name, tier, synonyms...` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tiers = BTreeMap::new();
        let mut synonyms = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 2 || fields[0].is_empty() {
                return Err(Error::Parse(format!(
                    "lexicon line {}: expected `name, tier, synonyms...`",
                    i + 1
                )));
            }
            let tier = fields[1]
                .parse::<u8>()
                .ok()
                .and_then(DrugTier::from_number)
                .ok_or_else(|| {
                    Error::Parse(format!("lexicon line {}: bad tier `{}`", i + 1, fields[1]))
                })?;
            if tiers.insert(fields[0].to_string(), tier).is_some() {
                return Err(Error::Parse(format!(
                    "lexicon line {}: duplicate drug `{}`",
                    i + 1,
                    fields[0]
                )));
            }
            for s in fields[2..].iter().filter(|s| !s.is_empty()) {
                synonyms.insert((*s).to_string(), fields[0].to_string());
            }
        }
        Self::new(tiers, synonyms)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Generic name and tier of the first lexicon drug mentioned in `text`.
    pub fn identify(&self, text: &str) -> Option<(&str, DrugTier)> {
        let norm = format!(" {} ", normalize(text));
        let mut best: Option<(usize, &str)> = None;
        let candidates = self
            .tiers
            .keys()
            .map(|k| (k.as_str(), k.as_str()))
            .chain(self.synonyms.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        for (key, generic) in candidates {
            if let Some(pos) = norm.find(&format!(" {key} ")) {
                if best.is_none_or(|(p, _)| pos < p) {
                    best = Some((pos, generic));
                }
            }
        }
        best.map(|(_, g)| (g, self.tiers[g]))
    }

    pub fn len(&self) -> usize {
        self.tiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiers.is_empty()
    }
}

/// Lowercase alphabetic words joined by single spaces. Digits, units and
/// punctuation separate words and are otherwise dropped.
pub fn normalize(text: &str) -> String {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !matches!(w.as_str(), "mg" | "mcg" | "ug" | "g" | "ml"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Tier of the drug mentioned in `drug_text`, or `None` when unclassified.
pub fn classify_drug(drug_text: &str, lexicon: &DrugLexicon) -> Option<DrugTier> {
    lexicon.identify(drug_text).map(|(_, t)| t)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DoseCell {
    pub used: bool,
    /// ln(1 + total mg in the window).
    pub log_dose: f64,
}

impl DoseCell {
    pub fn total_mg(&self) -> f64 {
        self.log_dose.exp_m1()
    }
}

/// Cumulative exposure per tier for each window `[0, w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierDoseProfile {
    pub windows_h: Vec<f64>,
    /// Indexed `[tier - 1][window]`.
    cells: Vec<Vec<DoseCell>>,
}

impl TierDoseProfile {
    pub fn cell(&self, tier: DrugTier, window: usize) -> DoseCell {
        self.cells[tier.index()][window]
    }

    pub fn empty(windows_h: &[f64]) -> Self {
        Self {
            windows_h: windows_h.to_vec(),
            cells: vec![vec![DoseCell::default(); windows_h.len()]; 3],
        }
    }
}

pub const DEFAULT_WINDOWS_H: [f64; 2] = [24.0, 48.0];

pub fn build_profile(
    log: &[MedicationEntry],
    lexicon: &DrugLexicon,
    windows_h: &[f64],
) -> Result<TierDoseProfile> {
    if windows_h.is_empty()
        || windows_h.iter().any(|w| !(w.is_finite() && *w > 0.0))
        || windows_h.windows(2).any(|p| p[0] >= p[1])
    {
        return Err(Error::Argument(format!(
            "windows must be positive and strictly increasing, got {windows_h:?}"
        )));
    }
    let mut used = vec![vec![false; windows_h.len()]; 3];
    let mut mg = vec![vec![0.0f64; windows_h.len()]; 3];
    for entry in log {
        let Some(tier) = classify_drug(&entry.drug_text, lexicon) else {
            continue;
        };
        for (w, &limit) in windows_h.iter().enumerate() {
            if entry.time_h <= limit {
                used[tier.index()][w] = true;
                if let Some(d) = entry.dose_mg {
                    mg[tier.index()][w] += d;
                }
            }
        }
    }
    let cells = used
        .into_iter()
        .zip(mg)
        .map(|(u, m)| {
            u.into_iter()
                .zip(m)
                .map(|(used, total)| DoseCell {
                    used,
                    log_dose: total.ln_1p(),
                })
                .collect()
        })
        .collect();
    Ok(TierDoseProfile {
        windows_h: windows_h.to_vec(),
        cells,
    })
}

/// Per-drug backward fill: an entry without a dose takes the dose of the
/// next later entry of the same drug that has one.
pub fn backfill_doses(log: &[MedicationEntry]) -> Result<Vec<MedicationEntry>> {
    if log.windows(2).any(|p| p[0].time_h > p[1].time_h) {
        return Err(Error::Argument(
            "medication log must be sorted by time_h".into(),
        ));
    }
    let mut out = log.to_vec();
    let mut next_dose: BTreeMap<String, f64> = BTreeMap::new();
    for entry in out.iter_mut().rev() {
        let key = normalize(&entry.drug_text);
        match entry.dose_mg {
            Some(d) => {
                next_dose.insert(key, d);
            }
            None => entry.dose_mg = next_dose.get(&key).copied(),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> DrugLexicon {
        DrugLexicon::default_lexicon()
    }

    #[test]
    fn classify_examples() {
        let l = lex();
        assert_eq!(classify_drug("Morphine", &l), Some(DrugTier::StrongOpioid));
        assert_eq!(classify_drug("tramadol 50mg", &l), Some(DrugTier::ModerateOpioid));
        assert_eq!(classify_drug("vitamin C", &l), None);
        assert_eq!(classify_drug("Oxycodone ER 10mg", &l), Some(DrugTier::StrongOpioid));
        assert_eq!(classify_drug("OxyContin 20 mg bid", &l), Some(DrugTier::StrongOpioid));
        assert_eq!(classify_drug("Paracetamol 500mg", &l), Some(DrugTier::NonOpioid));
        assert_eq!(classify_drug("MS Contin", &l), Some(DrugTier::StrongOpioid));
        assert_eq!(classify_drug("morphinex", &l), None);
        assert_eq!(l.identify("PRN tylenol"), Some(("acetaminophen", DrugTier::NonOpioid)));
    }

    #[test]
    fn every_default_drug_maps_to_one_tier() {
        let l = lex();
        assert_eq!(l.len(), 7);
        for (d, t) in [
            ("morphine", 3),
            ("fentanyl", 3),
            ("oxycodone", 3),
            ("codeine", 2),
            ("tramadol", 2),
            ("ibuprofen", 1),
            ("acetaminophen", 1),
        ] {
            assert_eq!(classify_drug(d, &l).map(DrugTier::number), Some(t), "{d}");
        }
    }

    #[test]
    fn lexicon_errors() {
        assert!(DrugLexicon::parse("").is_err());
        assert!(DrugLexicon::parse("x, 4").is_err());
        assert!(DrugLexicon::parse("x, 1\nx, 2").is_err());
    }

    #[test]
    fn profile_examples() {
        let l = lex();
        let p = build_profile(&[], &l, &DEFAULT_WINDOWS_H).unwrap();
        for t in DrugTier::ALL {
            for w in 0..2 {
                assert_eq!(p.cell(t, w), DoseCell::default());
            }
        }

        let p = build_profile(&[MedicationEntry::new(5.0, "morphine", Some(10.0))], &l, &DEFAULT_WINDOWS_H)
            .unwrap();
        let c = p.cell(DrugTier::StrongOpioid, 0);
        assert!(c.used);
        assert!((c.log_dose - 11f64.ln()).abs() < 1e-12);
        assert!((c.log_dose - 2.3979).abs() < 1e-4);

        let p = build_profile(&[MedicationEntry::new(30.0, "oxycodone", Some(10.0))], &l, &DEFAULT_WINDOWS_H)
            .unwrap();
        assert!(!p.cell(DrugTier::StrongOpioid, 0).used);
        assert!(p.cell(DrugTier::StrongOpioid, 1).used);

        let p = build_profile(&[MedicationEntry::new(1.0, "codeine", None)], &l, &DEFAULT_WINDOWS_H).unwrap();
        let c = p.cell(DrugTier::ModerateOpioid, 0);
        assert!(c.used);
        assert_eq!(c.log_dose, 0.0);

        assert!(build_profile(&[], &l, &[48.0, 24.0]).is_err());
        assert!(build_profile(&[], &l, &[]).is_err());
    }

    #[test]
    fn backfill_examples() {
        let log = vec![
            MedicationEntry::new(2.0, "morphine", None),
            MedicationEntry::new(8.0, "morphine", Some(10.0)),
        ];
        let out = backfill_doses(&log).unwrap();
        assert_eq!(out[0].dose_mg, Some(10.0));

        let single = vec![MedicationEntry::new(2.0, "morphine", None)];
        assert_eq!(backfill_doses(&single).unwrap(), single);

        let mixed = vec![
            MedicationEntry::new(2.0, "morphine", None),
            MedicationEntry::new(8.0, "tramadol", Some(50.0)),
        ];
        assert_eq!(backfill_doses(&mixed).unwrap()[0].dose_mg, None);

        // fill comes from the nearest later dose
        let chain = vec![
            MedicationEntry::new(1.0, "Morphine 10mg", None),
            MedicationEntry::new(2.0, "morphine", Some(5.0)),
            MedicationEntry::new(3.0, "morphine", Some(20.0)),
        ];
        assert_eq!(backfill_doses(&chain).unwrap()[0].dose_mg, Some(5.0));

        let unsorted = vec![
            MedicationEntry::new(8.0, "morphine", None),
            MedicationEntry::new(2.0, "morphine", Some(1.0)),
        ];
        assert!(matches!(backfill_doses(&unsorted), Err(Error::Argument(_))));
    }

    fn entry_strategy() -> impl Strategy<Value = MedicationEntry> {
        (
            0.0f64..72.0,
            prop::sample::select(vec!["morphine", "tramadol", "ibuprofen", "saline", "fentanyl patch"]),
            prop::option::of(0.5f64..200.0),
        )
            .prop_map(|(t, d, dose)| MedicationEntry::new(t, d, dose))
    }

    proptest! {
        #[test]
        fn adding_an_entry_is_monotone(
            log in prop::collection::vec(entry_strategy(), 0..10),
            extra in entry_strategy(),
        ) {
            let l = lex();
            let before = build_profile(&log, &l, &DEFAULT_WINDOWS_H).unwrap();
            let mut bigger = log.clone();
            bigger.push(extra);
            let after = build_profile(&bigger, &l, &DEFAULT_WINDOWS_H).unwrap();
            for t in DrugTier::ALL {
                for w in 0..2 {
                    let (b, a) = (before.cell(t, w), after.cell(t, w));
                    prop_assert!(!(b.used && !a.used));
                    prop_assert!(a.log_dose >= b.log_dose);
                    prop_assert!(a.log_dose >= 0.0);
                    if !a.used { prop_assert_eq!(a.log_dose, 0.0); }
                }
            }
        }

        #[test]
        fn log_dose_inverts(log in prop::collection::vec(entry_strategy(), 0..10)) {
            let l = lex();
            let p = build_profile(&log, &l, &DEFAULT_WINDOWS_H).unwrap();
            for t in DrugTier::ALL {
                for (w, limit) in DEFAULT_WINDOWS_H.iter().enumerate() {
                    let sum: f64 = log.iter()
                        .filter(|e| e.time_h <= *limit && classify_drug(&e.drug_text, &l) == Some(t))
                        .filter_map(|e| e.dose_mg)
                        .sum();
                    let got = p.cell(t, w).total_mg();
                    prop_assert!((got - sum).abs() <= 1e-9 * sum.max(1.0));
                }
            }
        }

        #[test]
        fn backfill_preserves_identity(mut log in prop::collection::vec(entry_strategy(), 0..10)) {
            log.sort_by(|a, b| a.time_h.total_cmp(&b.time_h));
            let out = backfill_doses(&log).unwrap();
            prop_assert_eq!(out.len(), log.len());
            for (a, b) in log.iter().zip(&out) {
                prop_assert_eq!(&a.drug_text, &b.drug_text);
                prop_assert_eq!(a.time_h, b.time_h);
                if a.dose_mg.is_some() { prop_assert_eq!(a.dose_mg, b.dose_mg); }
            }
        }
    }
}
