use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distort::DistortionType;
use crate::error::{Error, Result};
use crate::media::DatasetManifest;

/// Synthetic, severity-monotone quality labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoMosSpec {
    /// Score of each reference content before any decrement; contents not
    /// listed use `default_base`.
    pub base: BTreeMap<String, f64>,
    pub default_base: f64,
    /// Decrement per level, one row per distortion type in class order.
    pub decrements: [[f64; 4]; 5],
    pub jitter_std: f64,
    pub scale: (f64, f64),
}

impl Default for PseudoMosSpec {
    fn default() -> Self {
        PseudoMosSpec {
            base: BTreeMap::new(),
            default_base: 90.0,
            decrements: [[5.0, 15.0, 35.0, 55.0]; 5],
            jitter_std: 2.0,
            scale: (0.0, 100.0),
        }
    }
}

impl PseudoMosSpec {
    pub fn validate(&self) -> Result<()> {
        for (ty, row) in DistortionType::ALL.iter().zip(&self.decrements) {
            if row.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::precondition(format!(
                    "{ty} decrements must strictly increase with severity, got {row:?}"
                )));
            }
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::precondition("jitter std must be finite and nonnegative"));
        }
        if !(self.scale.0 < self.scale.1) {
            return Err(Error::precondition("score scale must be an increasing interval"));
        }
        Ok(())
    }

    fn base_for(&self, reference: &str) -> f64 {
        self.base.get(reference).copied().unwrap_or(self.default_base)
    }
}

/// Writes `base - decrement + jitter`, clamped to the scale, into every
/// entry's `mos`. Jitter is drawn in manifest order from `seed`.
pub fn assign_pseudo_mos(manifest: &DatasetManifest, spec: &PseudoMosSpec, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, spec.jitter_std).map_err(|e| Error::precondition(e.to_string()))?;
    let mut out = manifest.clone();
    for e in &mut out.entries {
        let dec = spec.decrements[e.distortion_type.index()][e.severity_level.index()];
        let jitter = if spec.jitter_std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        let mos = spec.base_for(&e.reference_id) - dec + jitter;
        e.mos = Some(mos.clamp(spec.scale.0, spec.scale.1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distort::SeverityLevel;
    use crate::media::{ManifestEntry, Split};

    fn manifest() -> DatasetManifest {
        let mut entries = Vec::new();
        for r in ["a", "b"] {
            for t in DistortionType::ALL {
                for l in SeverityLevel::ALL {
                    entries.push(ManifestEntry {
                        clip_path: format!("{r}_{t}_{l}"),
                        reference_id: r.into(),
                        distortion_type: t,
                        severity_level: l,
                        mos: None,
                        split: Split::Train,
                    });
                }
            }
        }
        DatasetManifest::new(entries, ".").unwrap()
    }

    #[test]
    fn monotone_without_jitter() {
        let spec = PseudoMosSpec {
            jitter_std: 0.0,
            ..Default::default()
        };
        let m = assign_pseudo_mos(&manifest(), &spec, 1).unwrap();
        for group in m.entries.chunks(4) {
            let mos: Vec<f64> = group.iter().map(|e| e.mos.unwrap()).collect();
            assert!(mos.windows(2).all(|w| w[1] < w[0]));
        }
        assert_eq!(m.entries[0].mos, Some(85.0));
    }

    #[test]
    fn defaults_in_range_and_seeded() {
        let a = assign_pseudo_mos(&manifest(), &PseudoMosSpec::default(), 7).unwrap();
        let b = assign_pseudo_mos(&manifest(), &PseudoMosSpec::default(), 7).unwrap();
        assert_eq!(a, b);
        assert!(a.entries.iter().all(|e| (0.0..=100.0).contains(&e.mos.unwrap())));
        let c = assign_pseudo_mos(&manifest(), &PseudoMosSpec::default(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn non_monotone_table_rejected() {
        let mut spec = PseudoMosSpec::default();
        spec.decrements[2] = [5.0, 15.0, 15.0, 55.0];
        assert_eq!(assign_pseudo_mos(&manifest(), &spec, 0).unwrap_err().code(), "E_PRECOND");
    }

    #[test]
    fn clamped_to_scale() {
        let spec = PseudoMosSpec {
            default_base: 50.0,
            jitter_std: 0.0,
            ..Default::default()
        };
        let m = assign_pseudo_mos(&manifest(), &spec, 0).unwrap();
        assert!(m.entries.iter().all(|e| e.mos.unwrap() >= 0.0));
        assert_eq!(m.entries[3].mos, Some(0.0));
    }
}
