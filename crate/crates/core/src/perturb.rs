//! Noise families applied to `[0, 1]`-normalized inputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::Model;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_PGD_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Fgsm,
    Pgd,
}

impl Family {
    /// The five magnitudes swept per family.
    pub fn sweep(self) -> [f64; 5] {
        match self {
            Family::Gaussian => [0.01, 0.02, 0.03, 0.04, 0.05],
            Family::Fgsm | Family::Pgd => [0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }

    /// Smallest and largest swept magnitude.
    pub fn sweep_range(self) -> (f64, f64) {
        let s = self.sweep();
        (s[0], s[4])
    }

    /// Range of magnitudes a spec may carry.
    pub fn allowed_range(self) -> (f64, f64) {
        (0.0, self.sweep_range().1)
    }

    pub fn needs_label(self) -> bool {
        !matches!(self, Family::Gaussian)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Fgsm => "fgsm",
            Family::Pgd => "pgd",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Family::Gaussian),
            "fgsm" => Ok(Family::Fgsm),
            "pgd" => Ok(Family::Pgd),
            other => Err(Error::UnsupportedFamily(other.to_string())),
        }
    }
}

/// `magnitude_sweep` as a fallible lookup by name; `cw` and anything else
/// is an explicit error.
pub fn magnitude_sweep(family: &str) -> Result<Vec<f64>> {
    Ok(family.parse::<Family>()?.sweep().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub family: Family,
    /// Sigma for gaussian, epsilon for fgsm/pgd.
    pub magnitude: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// PGD step size; `None` means `magnitude / 4`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
}

fn default_steps() -> usize {
    DEFAULT_PGD_STEPS
}

impl PerturbSpec {
    pub fn new(family: Family, magnitude: f64) -> Self {
        PerturbSpec {
            family,
            magnitude,
            steps: DEFAULT_PGD_STEPS,
            step_size: None,
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self::new(Family::Gaussian, sigma)
    }

    pub fn fgsm(eps: f64) -> Self {
        Self::new(Family::Fgsm, eps)
    }

    pub fn pgd(eps: f64) -> Self {
        Self::new(Family::Pgd, eps)
    }

    pub fn with_magnitude(self, magnitude: f64) -> Self {
        PerturbSpec { magnitude, ..self }
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(self.magnitude / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.family.allowed_range();
        if !(self.magnitude >= lo && self.magnitude <= hi) {
            return Err(Error::MagnitudeOutOfRange {
                family: self.family.to_string(),
                magnitude: self.magnitude,
                lo,
                hi,
            });
        }
        if self.family == Family::Pgd {
            if self.steps == 0 {
                return Err(Error::InvalidArgument("pgd steps must be positive".into()));
            }
            if let Some(a) = self.step_size {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::InvalidArgument(format!("pgd alpha must be positive, got {a}")));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Gaussian => write!(f, "gaussian:sigma={}", self.magnitude),
            Family::Fgsm => write!(f, "fgsm:eps={}", self.magnitude),
            Family::Pgd => write!(
                f,
                "pgd:eps={},steps={},alpha={}",
                self.magnitude,
                self.steps,
                self.alpha()
            ),
        }
    }
}

/// Parses `gaussian:sigma=0.03`, `fgsm:eps=0.2`, `pgd:eps=0.2,steps=10,alpha=0.05`.
impl FromStr for PerturbSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let family: Family = name.parse()?;
        let mut magnitude = None;
        let mut steps = DEFAULT_PGD_STEPS;
        let mut step_size = None;
        for kv in args.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{kv}`")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("`{v}` is not a number")))
            };
            match (family, k.trim()) {
                (Family::Gaussian, "sigma") | (Family::Fgsm | Family::Pgd, "eps") => magnitude = Some(num(v)?),
                (Family::Pgd, "steps") => {
                    steps = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("`{v}` is not a step count")))?
                }
                (Family::Pgd, "alpha") => step_size = Some(num(v)?),
                (_, other) => return Err(Error::InvalidArgument(format!("unknown {family} parameter `{other}`"))),
            }
        }
        let magnitude =
            magnitude.ok_or_else(|| Error::InvalidArgument(format!("{family} spec is missing its magnitude")))?;
        let spec = PerturbSpec {
            family,
            magnitude,
            steps,
            step_size,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn clamp01<T: Scalar>(v: T) -> T {
    v.max(T::zero()).min(T::one())
}

/// Projects `x` onto the L-inf ball of `radius` around `center`, then onto `[0, 1]`.
pub fn project<T: Scalar>(x: &mut [T], center: &[T], radius: T) {
    for (v, &c) in x.iter_mut().zip(center) {
        *v = clamp01((*v).max(c - radius).min(c + radius));
    }
}

/// Applies one perturbation. `rng` is only consumed by the gaussian family
/// (one standard normal per element, in order).
pub fn perturb<T: Scalar, R: Rng + ?Sized>(
    spec: &PerturbSpec,
    model: &Model<T>,
    input: &Tensor<T>,
    label: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if input.shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            actual: input.shape().to_vec(),
        });
    }
    if spec.family.needs_label() && label >= model.num_classes() {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: model.num_classes(),
        });
    }
    let eps = T::of(spec.magnitude);
    match spec.family {
        Family::Gaussian => {
            let mut out = input.clone();
            for v in out.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = clamp01(*v + eps * T::of(z));
            }
            Ok(out)
        }
        Family::Fgsm => {
            if spec.magnitude == 0.0 {
                return Ok(input.clone());
            }
            let (_, g) = model.loss_input_gradient(input, label)?;
            let mut out = input.clone();
            for (v, &gv) in out.data_mut().iter_mut().zip(g.data()) {
                *v = clamp01(*v + eps * gv.sign0());
            }
            Ok(out)
        }
        Family::Pgd => {
            if spec.magnitude == 0.0 {
                return Ok(input.clone());
            }
            let alpha = T::of(spec.alpha());
            let mut x = input.clone();
            for _ in 0..spec.steps {
                let (_, g) = model.loss_input_gradient(&x, label)?;
                for (v, &gv) in x.data_mut().iter_mut().zip(g.data()) {
                    *v = clamp01(*v + alpha * gv.sign0());
                }
                project(x.data_mut(), input.data(), eps);
            }
            Ok(x)
        }
    }
}
