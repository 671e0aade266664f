//! Physical and tire parameters of the single-track model.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ParamsError;
use crate::kv::KvDocument;

/// Vehicle and tire parameters, SI units throughout.
///
/// `steer_ratio` maps handwheel angle to roadwheel angle
/// (`roadwheel = steer_ratio * handwheel`), so the usual value is `1/15`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub m: f64,
    pub iz: f64,
    pub a: f64,
    pub b: f64,
    pub cc_front: f64,
    pub cc_rear: f64,
    pub mu: f64,
    pub rw: f64,
    pub g: f64,
    pub delta_max: f64,
    pub steer_ratio: f64,
    pub gamma: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1800.0,
            iz: 2800.0,
            a: 1.4,
            b: 1.4,
            cc_front: 60_000.0,
            cc_rear: 60_000.0,
            mu: 0.3,
            rw: 0.35,
            g: 9.81,
            delta_max: 0.71,
            steer_ratio: 1.0 / 15.0,
            gamma: 0.99,
        }
    }
}

const REQUIRED: [&str; 10] = [
    "m",
    "iz",
    "a",
    "b",
    "cc_front",
    "cc_rear",
    "mu",
    "rw",
    "delta_max",
    "steer_ratio",
];
const OPTIONAL: [&str; 2] = ["g", "gamma"];

impl VehicleParams {
    /// Parses a key/value document without validating ranges.
    pub fn from_kv(doc: &KvDocument) -> Result<Self, ParamsError> {
        let allowed: Vec<&str> = REQUIRED.iter().chain(OPTIONAL.iter()).copied().collect();
        doc.check_keys(&allowed)?;
        let defaults = Self::default();
        Ok(Self {
            m: doc.required_f64("m")?,
            iz: doc.required_f64("iz")?,
            a: doc.required_f64("a")?,
            b: doc.required_f64("b")?,
            cc_front: doc.required_f64("cc_front")?,
            cc_rear: doc.required_f64("cc_rear")?,
            mu: doc.required_f64("mu")?,
            rw: doc.required_f64("rw")?,
            delta_max: doc.required_f64("delta_max")?,
            steer_ratio: doc.required_f64("steer_ratio")?,
            g: doc.f64("g")?.unwrap_or(defaults.g),
            gamma: doc.f64("gamma")?.unwrap_or(defaults.gamma),
        })
    }

    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ParamsError> {
        let params = Self::from_kv(&KvDocument::parse(text)?)?;
        params.validate()?;
        Ok(params)
    }

    /// Loads without range validation; callers that need the checks run
    /// [`VehicleParams::validate`] themselves.
    pub fn load_unchecked(path: &Path) -> Result<Self, ParamsError> {
        Self::from_kv(&KvDocument::load(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let params = Self::load_unchecked(path)?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        let positive = [
            ("m", self.m),
            ("iz", self.iz),
            ("a", self.a),
            ("b", self.b),
            ("cc_front", self.cc_front),
            ("cc_rear", self.cc_rear),
            ("rw", self.rw),
            ("g", self.g),
            ("steer_ratio", self.steer_ratio),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(name, format!("{value} must be strictly positive")));
            }
        }
        if !(self.mu > 0.0 && self.mu <= 2.0) {
            return Err(invalid("mu", format!("{} not in (0, 2]", self.mu)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma", format!("{} not in (0, 1)", self.gamma)));
        }
        if !(self.delta_max > 0.0 && self.delta_max < FRAC_PI_2) {
            return Err(invalid(
                "delta_max",
                format!("{} not in (0, pi/2)", self.delta_max),
            ));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.a + self.b
    }

    pub fn handwheel_to_roadwheel(&self, handwheel: f64) -> f64 {
        handwheel * self.steer_ratio
    }

    pub fn roadwheel_to_handwheel(&self, roadwheel: f64) -> f64 {
        roadwheel / self.steer_ratio
    }

    /// Largest handwheel angle that maps inside the roadwheel limit.
    pub fn handwheel_limit(&self) -> f64 {
        self.delta_max / self.steer_ratio
    }

    /// Canonical key/value rendering; parsing it yields bitwise identical values.
    pub fn to_kv_string(&self) -> String {
        format!(
            "m = {:?}\niz = {:?}\na = {:?}\nb = {:?}\ncc_front = {:?}\ncc_rear = {:?}\nmu = {:?}\n\
             rw = {:?}\ng = {:?}\ndelta_max = {:?}\nsteer_ratio = {:?}\ngamma = {:?}\n",
            self.m,
            self.iz,
            self.a,
            self.b,
            self.cc_front,
            self.cc_rear,
            self.mu,
            self.rw,
            self.g,
            self.delta_max,
            self.steer_ratio,
            self.gamma
        )
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv_string().as_bytes()))
    }
}

fn invalid(name: &'static str, reason: String) -> ParamsError {
    ParamsError::Invalid { name, reason }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let p = VehicleParams::default();
        p.validate().unwrap();
        assert_eq!(VehicleParams::parse(&p.to_kv_string()).unwrap(), p);
    }

    #[test]
    fn loader_rejects_unknown_and_missing_keys() {
        let text = VehicleParams::default().to_kv_string();
        let extra = format!("{text}drag = 0.3\n");
        assert_eq!(
            VehicleParams::parse(&extra).unwrap_err(),
            ParamsError::UnknownKey("drag".into())
        );
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("rw"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert_eq!(
            VehicleParams::parse(&missing).unwrap_err(),
            ParamsError::MissingKey("rw".into())
        );
    }

    #[test]
    fn optional_keys_fall_back_to_defaults() {
        let text = "m = 1000\niz = 1500\na = 1.2\nb = 1.5\ncc_front = 50000\ncc_rear = 70000\n\
                    mu = 0.8\nrw = 0.3\ndelta_max = 0.6\nsteer_ratio = 1/16\n";
        let p = VehicleParams::parse(text).unwrap();
        assert_eq!(p.g, 9.81);
        assert_eq!(p.gamma, 0.99);
        assert_eq!(p.steer_ratio, 1.0 / 16.0);
    }

    #[test]
    fn range_checks() {
        let bad = |f: fn(&mut VehicleParams)| {
            let mut p = VehicleParams::default();
            f(&mut p);
            p.validate().unwrap_err()
        };
        assert!(matches!(bad(|p| p.m = 0.0), ParamsError::Invalid { name: "m", .. }));
        assert!(matches!(bad(|p| p.mu = 0.0), ParamsError::Invalid { name: "mu", .. }));
        assert!(matches!(bad(|p| p.mu = 2.5), ParamsError::Invalid { name: "mu", .. }));
        assert!(matches!(bad(|p| p.gamma = 1.0), ParamsError::Invalid { name: "gamma", .. }));
        assert!(matches!(
            bad(|p| p.delta_max = 1.6),
            ParamsError::Invalid { name: "delta_max", .. }
        ));
    }

    #[test]
    fn handwheel_mapping() {
        let p = VehicleParams::default();
        assert!((p.handwheel_to_roadwheel(1.5) - 0.1).abs() < 1e-15);
        assert!((p.handwheel_limit() - 10.65).abs() < 1e-12);
    }
}
