//! Indicator-gated fusion of classifier and language-model probabilities.
//!
//! Inside the open band `alpha < p_ml < beta` the language model is asked
//! and its estimate is averaged with `p_ml`; outside it `p_ml` passes through
//! untouched and no request is made.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::{LlmProbability, Provenance, TierMapping};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    /// `(p_llm + p_ml) / 2`.
    Average,
    /// `p_llm` alone.
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta: f64,
    pub decision_threshold: f64,
    pub band_mode: BandMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.6,
            decision_threshold: 0.5,
            band_mode: BandMode::Average,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha && self.alpha < self.beta && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= alpha ({}) < beta ({}) <= 1",
                self.alpha, self.beta
            )));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(Error::Config(format!(
                "decision_threshold {} must lie in (0, 1)",
                self.decision_threshold
            )));
        }
        Ok(())
    }

    pub fn in_band(&self, p_ml: f64) -> bool {
        self.alpha < p_ml && p_ml < self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionDecision {
    pub p_ml: f64,
    pub p_llm: Option<f64>,
    pub indicator: bool,
    pub p_final: f64,
    pub predicted: bool,
    pub provenance: Option<Provenance>,
}

/// `source` is called only when `p_ml` is inside the band. A failing source
/// contributes the parse-failure default instead of aborting.
pub fn fuse<F>(p_ml: f64, source: F, cfg: &FusionConfig) -> Result<FusionDecision>
where
    F: FnOnce() -> Result<LlmProbability>,
{
    if !(0.0..=1.0).contains(&p_ml) {
        return Err(Error::Argument(format!("p_ml {p_ml} outside [0, 1]")));
    }
    if !cfg.in_band(p_ml) {
        return Ok(FusionDecision {
            p_ml,
            p_llm: None,
            indicator: false,
            p_final: p_ml,
            predicted: p_ml >= cfg.decision_threshold,
            provenance: None,
        });
    }
    let est = source().unwrap_or_else(|e| {
        log::warn!("language-model estimate unavailable ({e}); using the default");
        TierMapping::default().failure()
    });
    let p_llm = est.p_llm.clamp(0.0, 1.0);
    let p_final = match cfg.band_mode {
        BandMode::Average => (p_llm + p_ml) / 2.0,
        BandMode::Replace => p_llm,
    };
    Ok(FusionDecision {
        p_ml,
        p_llm: Some(p_llm),
        indicator: true,
        p_final,
        predicted: p_final >= cfg.decision_threshold,
        provenance: Some(est.provenance),
    })
}

/// Audit table: `id,p_ml,indicator,p_llm,provenance,p_final,predicted`.
pub fn write_audit_csv(path: &Path, ids: &[String], decisions: &[FusionDecision]) -> Result<()> {
    if ids.len() != decisions.len() {
        return Err(Error::Argument(format!("{} ids for {} decisions", ids.len(), decisions.len())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "p_ml", "indicator", "p_llm", "provenance", "p_final", "predicted"])?;
    for (id, d) in ids.iter().zip(decisions) {
        w.write_record([
            id.clone(),
            format!("{:.6}", d.p_ml),
            u8::from(d.indicator).to_string(),
            d.p_llm.map_or(String::new(), |p| format!("{p:.6}")),
            d.provenance.map_or(String::new(), |p| p.as_str().to_string()),
            format!("{:.6}", d.p_final),
            if d.predicted { "yes" } else { "no" }.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCalibration {
    pub alpha: f64,
    pub beta: f64,
    /// Precision/recall break-even threshold.
    pub break_even_threshold: Option<f64>,
    pub break_even_value: Option<f64>,
    pub fallback: bool,
    pub note: String,
}

const MIN_DEV_ROWS: usize = 20;

/// Picks `(alpha, beta)` from development scores.
///
/// The break-even threshold `t*` is where precision and recall (predicting
/// positive at `p >= t`) are closest; `e` is their mean there. Among bands
/// with `alpha <= t* <= beta` whose outside rows, classified at `t*`, reach
/// precision and recall of at least `(1 + e) / 2`, the narrowest is
/// returned (ties: lowest alpha). Without such a band, or with fewer than 20
/// rows, one class, or constant scores, the result is `(0.2, 0.6)`.
pub fn calibrate_band(dev: &[(bool, f64)]) -> BandCalibration {
    let fallback = |note: String| {
        log::warn!("band calibration fell back to (0.2, 0.6): {note}");
        BandCalibration {
            alpha: 0.2,
            beta: 0.6,
            break_even_threshold: None,
            break_even_value: None,
            fallback: true,
            note,
        }
    };
    let pos = dev.iter().filter(|d| d.0).count();
    if dev.len() < MIN_DEV_ROWS {
        return fallback(format!("{} rows, at least {MIN_DEV_ROWS} needed", dev.len()));
    }
    if pos == 0 || pos == dev.len() {
        return fallback("development set holds a single class".into());
    }
    let mut rows: Vec<(f64, bool)> = dev.iter().map(|&(y, p)| (p, y)).collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut distinct: Vec<f64> = rows.iter().map(|r| r.0).collect();
    distinct.dedup();
    if distinct.len() < 2 {
        return fallback("all scores are equal".into());
    }
    let mids: Vec<f64> = distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();

    // break-even over midpoint thresholds
    let pr = |t: f64, keep: &dyn Fn(f64) -> bool| -> Option<(f64, f64)> {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for &(p, y) in rows.iter().filter(|r| keep(r.0)) {
            match (p >= t, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp == 0 || tp + fn_ == 0 {
            return None;
        }
        Some((tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fn_) as f64))
    };
    let mut be: Option<(f64, f64, f64)> = None; // (gap, t, e)
    for &t in &mids {
        if let Some((p, r)) = pr(t, &|_| true) {
            let gap = (p - r).abs();
            if be.is_none_or(|b| gap < b.0) {
                be = Some((gap, t, (p + r) / 2.0));
            }
        }
    }
    let Some((_, t_star, e)) = be else {
        return fallback("no threshold gives defined precision and recall".into());
    };
    let target = (1.0 + e) / 2.0;

    let mut edges = vec![0.0];
    edges.extend(&mids);
    edges.push(1.0);
    let mut best: Option<(f64, f64)> = None;
    for (i, &a) in edges.iter().enumerate() {
        if a > t_star {
            break;
        }
        for &b in &edges[i + 1..] {
            if b < t_star {
                continue;
            }
            if best.is_some_and(|(ba, bb)| b - a >= bb - ba) {
                break;
            }
            let outside = |p: f64| !(a < p && p < b);
            if let Some((p, r)) = pr(t_star, &outside) {
                if p >= target && r >= target {
                    best = Some((a, b));
                    break;
                }
            }
        }
    }
    match best {
        Some((alpha, beta)) => BandCalibration {
            alpha,
            beta,
            break_even_threshold: Some(t_star),
            break_even_value: Some(e),
            fallback: false,
            note: format!("outside-band precision and recall >= {target:.4}"),
        },
        None => fallback(format!("no band reaches precision and recall {target:.4} outside it")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cell::Cell;

    fn fixed(p: f64) -> impl FnOnce() -> Result<LlmProbability> {
        move || {
            Ok(LlmProbability {
                p_llm: p,
                provenance: Provenance::ExplicitNumber,
            })
        }
    }

    #[test]
    fn examples() {
        let cfg = FusionConfig::default();
        let called = Cell::new(false);
        let d = fuse(0.9, || {
            called.set(true);
            fixed(0.1)()
        }, &cfg)
        .unwrap();
        assert!(!called.get());
        assert_eq!((d.p_final, d.indicator, d.p_llm), (0.9, false, None));

        let d = fuse(0.4, fixed(0.8), &cfg).unwrap();
        assert!((d.p_final - 0.6).abs() < 1e-12 && d.predicted);

        let d = fuse(0.2, fixed(1.0), &cfg).unwrap();
        assert_eq!((d.p_final, d.indicator), (0.2, false));

        let d = fuse(0.69, fixed(0.2), &cfg).unwrap();
        assert_eq!((d.p_final, d.predicted), (0.69, true));

        let d = fuse(0.37, || Err(Error::Transport { attempts: 4, message: "down".into() }), &cfg).unwrap();
        assert_eq!(d.p_llm, Some(0.5));
        assert_eq!(d.provenance, Some(Provenance::ParseFailureDefault));

        let replace = FusionConfig { band_mode: BandMode::Replace, ..cfg };
        assert_eq!(fuse(0.37, fixed(0.7), &replace).unwrap().p_final, 0.7);
        assert!(fuse(1.2, fixed(0.5), &cfg).is_err());
        assert!(FusionConfig { alpha: 0.6, beta: 0.2, ..cfg }.validate().is_err());
    }

    proptest! {
        #[test]
        fn band_properties(p_ml in 0.0f64..=1.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let cfg = FusionConfig::default();
            let d = fuse(p_ml, fixed(a), &cfg).unwrap();
            prop_assert_eq!(d.indicator, 0.2 < p_ml && p_ml < 0.6);
            if d.indicator {
                prop_assert!(a.min(p_ml) <= d.p_final && d.p_final <= a.max(p_ml));
                let d2 = fuse(p_ml, fixed(b), &cfg).unwrap();
                if b >= a { prop_assert!(d2.p_final >= d.p_final); }
            } else {
                prop_assert_eq!(d.p_final.to_bits(), p_ml.to_bits());
            }
        }
    }

    #[test]
    fn separable_band_collapses_to_the_gap() {
        let mut dev: Vec<(bool, f64)> = (0..15).map(|i| (false, 0.05 + i as f64 * 0.02)).collect();
        dev.extend((0..15).map(|i| (true, 0.6 + i as f64 * 0.02)));
        let c = calibrate_band(&dev);
        assert!(!c.fallback);
        assert!(c.alpha < c.beta);
        let t = c.break_even_threshold.unwrap();
        for (y, p) in &dev {
            if !(c.alpha < *p && *p < c.beta) {
                assert_eq!(*p >= t, *y);
            }
        }
        // the band is one gap wide around t*
        assert!(c.beta - c.alpha < 0.35);
    }

    #[test]
    fn degenerate_inputs_fall_back() {
        let flat: Vec<(bool, f64)> = (0..30).map(|i| (i % 2 == 0, 0.5)).collect();
        let c = calibrate_band(&flat);
        assert!(c.fallback && (c.alpha, c.beta) == (0.2, 0.6));
        assert!(calibrate_band(&flat[..10]).fallback);
    }

    #[test]
    fn noisy_band_stays_ordered() {
        let dev: Vec<(bool, f64)> = (0..200)
            .map(|i| {
                let p = (i as f64 * 0.618).fract();
                (p + 0.3 * ((i * 7919) % 13) as f64 / 13.0 > 0.65, p)
            })
            .collect();
        let c = calibrate_band(&dev);
        assert!(c.alpha < c.beta);
        if let Some(t) = c.break_even_threshold {
            assert!(c.alpha <= t && t <= c.beta);
        }
    }
}
