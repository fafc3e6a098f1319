//! Initialization schemes for recurrent parameter bundles.
//!
//! The identity scheme is the point of the exercise: a ReLU network with
//! `W = I` and small input weights starts out integrating its inputs with no
//! forgetting. `Standard` is the conventional `N(0, 1/H)` draw used for the
//! tanh baseline; it is a documented choice rather than a published value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{gaussian_fill, gaussian_vector, scaled_identity, Matrix, Rng, Vector};

/// Small-noise std used for input weights, biases and readout.
pub const DEFAULT_INPUT_STD: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum InitScheme {
    Identity,
    ScaledIdentity(f64),
    Gaussian(f64),
    /// Recurrent `N(0, 1/H)`, input `N(0, 1/D)`, zero bias.
    Standard,
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitScheme::ScaledIdentity(s) if !(s > 0.0 && s.is_finite()) => Err(Error::invalid(
                format!("scaled identity needs a positive finite scale, got {s}"),
            )),
            InitScheme::Gaussian(std) if !(std >= 0.0 && std.is_finite()) => Err(Error::invalid(
                format!("gaussian init needs a non-negative std, got {std}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::Identity => write!(f, "identity"),
            InitScheme::ScaledIdentity(s) => write!(f, "iscale:{s}"),
            InitScheme::Gaussian(std) => write!(f, "gauss:{std}"),
            InitScheme::Standard => write!(f, "standard"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number in init scheme {s:?}")))
        };
        let scheme = match s.split_once(':') {
            None if s == "identity" => InitScheme::Identity,
            None if s == "standard" => InitScheme::Standard,
            Some(("iscale", v)) => InitScheme::ScaledIdentity(parse_num(v)?),
            Some(("gauss", v)) => InitScheme::Gaussian(parse_num(v)?),
            _ => {
                return Err(Error::invalid(format!(
                    "unknown init scheme {s:?}; expected identity | iscale:<s> | gauss:<std> | standard"
                )))
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl From<InitScheme> for String {
    fn from(s: InitScheme) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for InitScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

pub fn init_recurrent(scheme: InitScheme, h: usize, rng: &mut Rng) -> Result<Matrix> {
    scheme.validate()?;
    if h == 0 {
        return Err(Error::invalid("hidden size must be at least 1"));
    }
    match scheme {
        InitScheme::Identity => scaled_identity(h, 1.0),
        InitScheme::ScaledIdentity(s) => scaled_identity(h, s),
        InitScheme::Gaussian(std) => gaussian_fill(h, h, 0.0, std, rng),
        InitScheme::Standard => gaussian_fill(h, h, 0.0, 1.0 / (h as f64).sqrt(), rng),
    }
}

/// `V ~ N(0, std²)` of shape H×D and `b ~ N(0, std²)` of length H.
/// `std = 0` gives the zero-bias variant.
pub fn init_input_and_bias(std: f64, h: usize, d: usize, rng: &mut Rng) -> Result<(Matrix, Vector)> {
    let v = gaussian_fill(h, d, 0.0, std, rng)?;
    let b = gaussian_vector(h, 0.0, std, rng)?;
    Ok((v, b))
}

/// Conventional tanh-RNN start: `W ~ N(0, 1/H)`, `V ~ N(0, 1/D)`, `b = 0`.
pub fn init_tanh_baseline(h: usize, d: usize, rng: &mut Rng) -> Result<(Matrix, Matrix, Vector)> {
    if h == 0 || d == 0 {
        return Err(Error::invalid("hidden and input sizes must be at least 1"));
    }
    let w = gaussian_fill(h, h, 0.0, 1.0 / (h as f64).sqrt(), rng)?;
    let v = gaussian_fill(h, d, 0.0, 1.0 / (d as f64).sqrt(), rng)?;
    Ok((w, v, Vector::zeros(h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::identity;

    fn sample_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    }

    #[test]
    fn identity_scheme_is_exact_identity() {
        let w = init_recurrent(InitScheme::Identity, 100, &mut Rng::new(0)).unwrap();
        assert_eq!(w, identity(100).unwrap());
    }

    #[test]
    fn scaled_identity_scheme() {
        let w = init_recurrent(InitScheme::ScaledIdentity(0.01), 4, &mut Rng::new(0)).unwrap();
        assert_eq!(w, identity(4).unwrap().scale(0.01));
        assert!(init_recurrent(InitScheme::ScaledIdentity(0.0), 4, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn gaussian_scheme_draws_small_entries() {
        let w = init_recurrent(InitScheme::Gaussian(0.001), 8, &mut Rng::new(3)).unwrap();
        assert_eq!(w.shape(), (8, 8));
        assert!(w.as_slice().iter().all(|x| x.abs() < 0.006));
        assert!(w.as_slice().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn input_and_bias_zero_std() {
        let (v, b) = init_input_and_bias(0.0, 5, 2, &mut Rng::new(1)).unwrap();
        assert!(v.as_slice().iter().chain(b.as_slice()).all(|&x| x == 0.0));
        assert!(init_input_and_bias(-0.1, 5, 2, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn input_and_bias_within_six_sigma() {
        let (v, b) = init_input_and_bias(DEFAULT_INPUT_STD, 100, 2, &mut Rng::new(11)).unwrap();
        assert_eq!(v.shape(), (100, 2));
        assert_eq!(b.len(), 100);
        let max = v.as_slice().iter().chain(b.as_slice()).fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max < 0.006, "max {max}");
    }

    #[test]
    fn input_and_bias_deterministic() {
        let a = init_input_and_bias(0.001, 10, 3, &mut Rng::new(4)).unwrap();
        let b = init_input_and_bias(0.001, 10, 3, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tanh_baseline_shapes_and_scale() {
        let (w, v, b) = init_tanh_baseline(1, 1, &mut Rng::new(2)).unwrap();
        assert_eq!((w.shape(), v.shape(), b.as_slice()), ((1, 1), (1, 1), &[0.0][..]));

        let (w, _, b) = init_tanh_baseline(100, 2, &mut Rng::new(2)).unwrap();
        let s = sample_std(w.as_slice());
        assert!((0.08..=0.12).contains(&s), "std {s}");
        assert!(b.as_slice().iter().all(|&x| x == 0.0));

        let again = init_tanh_baseline(100, 2, &mut Rng::new(2)).unwrap();
        assert_eq!(again.0, w);
    }

    #[test]
    fn scheme_strings_round_trip() {
        for s in ["identity", "iscale:0.01", "gauss:0.001", "standard"] {
            let scheme: InitScheme = s.parse().unwrap();
            assert_eq!(scheme.to_string(), s);
        }
        assert!("gauss:-1".parse::<InitScheme>().is_err());
        assert!("orthogonal".parse::<InitScheme>().is_err());
        assert!("iscale:abc".parse::<InitScheme>().is_err());
    }
}
