//! Run configuration: a flat key-value text format with sections,
//! parsed into a validated [`RunConfig`] and from there into the
//! simulation [`Problem`].
//!
//! Format rules: `[section]` headers, `key = value` pairs, `#` starts
//! a comment, keys are `[A-Za-z0-9_]`.  Every key must be consumed by
//! the schema — unknown or misspelled keys are collected and reported,
//! never silently defaulted.  Parsing never panics and never allocates
//! proportionally to anything but the input length; dimension-sized
//! buffers are built later, in [`RunConfig::build_problem`].
//!
//! ```text
//! [spectral]
//! d = 8
//! spectrum = quadratic      # or: explicit  (+ values = ...)
//! c = 0.25
//!
//! [noise]
//! lambda = 1.0
//! marks = 1:0.5, -1:0.5     # or: marks_density_table = z:density, ...
//! d_w = 4
//! dt = 0.0078125
//! T = 0.25
//! seed = 42
//!
//! [coefficients]
//! n_max = 4
//! f = nemytskii             # zero | affine | nemytskii
//! f_l = random
//! f_l_seed = 7
//! f_l_norm = 0.5
//! b = constant              # zero | constant | nemytskii
//! b_matrix = random
//! b_matrix_seed = 8
//! b_matrix_norm = 0.25
//! g = mark_affine           # zero | mark_affine | mark_nemytskii
//! g_offset = zero
//! g_linear = random
//! g_linear_seed = 9
//! g_linear_norm = 0.1
//!
//! [solver]
//! u0 = decay                # or an explicit list
//! u0_scale = 0.5
//!
//! [norms]
//! p = 2
//! q = 11
//!
//! [verify]
//! epsilons = 0.1, 0.05, 0.025, 0.0125
//! paths = 10000
//! ...
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::coefficients::{
    CoefficientError, CoefficientSet, Diffusion, Drift, GammaFunction, Jump,
};
use crate::linalg::Matrix;
use crate::noise::{derived_rng, MarkSpace, NoiseError};
use crate::spectral::{SpectralError, SpectralOperator, StateVector};
use crate::verify::Problem;
use rand::RngExt;

/// Desk-scale guards; parsing rejects anything beyond these before any
/// dimension-sized allocation happens.
pub const MAX_DIM: usize = 512;
pub const MAX_NMAX: usize = 8;
pub const MAX_PATHS: u64 = 100_000_000;
pub const MAX_LIST: usize = 1 << 20;

const MATRIX_STREAM: u64 = 0x6d78; // "mx"

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value' or '[section]', got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key '{key}' appears twice in section [{section}]")]
    Duplicate {
        line: usize,
        section: String,
        key: String,
    },
    #[error("missing required key '{0}'")]
    MissingKey(String),
    #[error("unknown keys: {0}")]
    UnknownKeys(String),
    #[error("key '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error("configuration invalid: {0}")]
    Invalid(String),
    #[error("coefficient construction failed: {0}")]
    Coefficient(#[from] CoefficientError),
    #[error("spectrum construction failed: {0}")]
    Spectral(#[from] SpectralError),
    #[error("mark space construction failed: {0}")]
    Noise(#[from] NoiseError),
}

/// Spectrum of the linear operator.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumSpec {
    Quadratic { c: f64 },
    Explicit(Vec<f64>),
}

/// How a vector-valued parameter is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorSpec {
    Zero,
    /// `v_k = scale / (k+1)`
    Decay { scale: f64 },
    Explicit(Vec<f64>),
}

impl VectorSpec {
    pub fn build(&self, d: usize, key: &str) -> Result<StateVector, ConfigError> {
        match self {
            VectorSpec::Zero => Ok(StateVector::zeros(d)),
            VectorSpec::Decay { scale } => Ok(StateVector::new(
                (0..d).map(|k| scale / (k + 1) as f64).collect(),
            )),
            VectorSpec::Explicit(v) => {
                if v.len() != d {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("expected {d} entries, got {}", v.len()),
                    });
                }
                Ok(StateVector::new(v.clone()))
            }
        }
    }
}

/// How a matrix-valued parameter is produced.
#[derive(Debug, Clone, PartialEq)]
pub enum MatrixSpec {
    Zero,
    Identity { scale: f64 },
    /// seeded uniform entries rescaled to the target operator norm
    Random { seed: u64, norm: f64 },
    Explicit(Vec<f64>),
}

impl MatrixSpec {
    pub fn build(&self, rows: usize, cols: usize, key: &str) -> Result<Matrix, ConfigError> {
        match self {
            MatrixSpec::Zero => Ok(Matrix::zeros(rows, cols)),
            MatrixSpec::Identity { scale } => {
                if rows != cols {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("identity requested for a {rows}x{cols} matrix"),
                    });
                }
                Ok(Matrix::identity(rows).scale(*scale))
            }
            MatrixSpec::Random { seed, norm } => {
                let mut rng = derived_rng(*seed, 0, MATRIX_STREAM);
                let data: Vec<f64> = (0..rows * cols)
                    .map(|_| rng.random::<f64>() - 0.5)
                    .collect();
                let mut m = Matrix::from_rows(rows, cols, data);
                let current = m.operator_norm();
                if current > 0.0 {
                    m = m.scale(norm / current);
                }
                Ok(m)
            }
            MatrixSpec::Explicit(v) => {
                if v.len() != rows * cols {
                    return Err(ConfigError::BadValue {
                        key: key.into(),
                        reason: format!("expected {rows}x{cols} = {} entries, got {}", rows * cols, v.len()),
                    });
                }
                Ok(Matrix::from_rows(rows, cols, v.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftSpec {
    Zero,
    Affine { offset: VectorSpec, linear: MatrixSpec },
    Nemytskii { l: MatrixSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionSpec {
    Zero,
    Constant { matrix: MatrixSpec },
    Nemytskii { l: MatrixSpec, weight: MatrixSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub enum JumpSpec {
    Zero,
    MarkAffine { offset: VectorSpec, linear: MatrixSpec },
    MarkNemytskii { l: MatrixSpec },
}

#[derive(Debug, Clone, PartialEq)]
pub enum MarksSpec {
    Finite(Vec<(f64, f64)>),
    DensityTable(Vec<(f64, f64)>),
}

/// Chain-rule / quotient target selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSpec {
    Drift,
    Diffusion,
    Jump,
}

/// Exact-arithmetic plan inputs, kept as strings so the rational
/// parser sees the original decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanSpec {
    pub n: u32,
    pub m: u32,
    pub p: String,
    pub q: String,
    /// `None` means `p0 = inf`.
    pub p0: Option<String>,
    pub chain: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub spectrum: SpectrumSpec,
    pub lambda: f64,
    pub marks: MarksSpec,
    pub d_w: usize,
    pub dt: f64,
    pub t_final: f64,
    pub seed: Option<u64>,
    pub n_max: usize,
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
    pub jump: JumpSpec,
    /// `true` attaches the canonical half/half split `G = G/2 + G/2`
    /// as explicit metadata, making the split-dependent estimators
    /// available for `p` in `(1, 2)`.
    pub jump_split_half: bool,
    pub u0: VectorSpec,
    pub p: f64,
    pub q: f64,
    pub window: Option<(f64, f64)>,
    pub epsilons: Vec<f64>,
    pub order: usize,
    pub paths: u64,
    pub directions: usize,
    pub direction_seed: Option<u64>,
    pub magnitudes: Vec<f64>,
    pub t0_ladder: Vec<f64>,
    pub tol_abs: f64,
    pub target: TargetSpec,
    pub plan: Option<PlanSpec>,
    pub out: Option<String>,
}

/// Raw key-value store with consumption tracking: whatever is left
/// after schema extraction is reported as unknown.
struct KeyStore {
    entries: BTreeMap<String, String>,
}

impl KeyStore {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let without_comment = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let trimmed = without_comment.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(inner) = trimmed.strip_prefix('[') {
                match inner.strip_suffix(']') {
                    Some(name)
                        if !name.is_empty()
                            && name
                                .chars()
                                .all(|c| c.is_ascii_alphanumeric() || c == '_') =>
                    {
                        section = name.to_string();
                        continue;
                    }
                    _ => {
                        return Err(ConfigError::Syntax {
                            line,
                            text: trimmed.into(),
                        })
                    }
                }
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: trimmed.into(),
                });
            };
            let key = key.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
            {
                return Err(ConfigError::Syntax {
                    line,
                    text: trimmed.into(),
                });
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if entries.contains_key(&full) {
                return Err(ConfigError::Duplicate {
                    line,
                    section: section.clone(),
                    key: key.into(),
                });
            }
            entries.insert(full, value.trim().to_string());
        }
        Ok(KeyStore { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn finish(self) -> Result<(), ConfigError> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<String> = self.entries.into_keys().collect();
            Err(ConfigError::UnknownKeys(keys.join(", ")))
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        reason: format!("'{value}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(ConfigError::BadValue {
            key: key.into(),
            reason: "value must be finite".into(),
        });
    }
    Ok(v)
}

fn parse_u64(key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        reason: format!("'{value}' is not an unsigned integer"),
    })
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        reason: format!("'{value}' is not a nonnegative integer"),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.len() > MAX_LIST {
        return Err(ConfigError::BadValue {
            key: key.into(),
            reason: "list too long".into(),
        });
    }
    items.iter().map(|s| parse_f64(key, s)).collect()
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() || items.len() > MAX_LIST {
        return Err(ConfigError::BadValue {
            key: key.into(),
            reason: "expected a nonempty list of z:w pairs".into(),
        });
    }
    items
        .iter()
        .map(|item| {
            let Some((a, b)) = item.split_once(':') else {
                return Err(ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("'{item}' is not a z:w pair"),
                });
            };
            Ok((parse_f64(key, a.trim())?, parse_f64(key, b.trim())?))
        })
        .collect()
}

fn take_vector_spec(store: &mut KeyStore, key: &str) -> Result<Option<VectorSpec>, ConfigError> {
    let Some(value) = store.take(key) else {
        return Ok(None);
    };
    let spec = match value.as_str() {
        "zero" => VectorSpec::Zero,
        "decay" => {
            let scale = match store.take(&format!("{key}_scale")) {
                Some(s) => parse_f64(&format!("{key}_scale"), &s)?,
                None => 1.0,
            };
            VectorSpec::Decay { scale }
        }
        list => VectorSpec::Explicit(parse_list(key, list)?),
    };
    Ok(Some(spec))
}

fn take_matrix_spec(store: &mut KeyStore, key: &str) -> Result<Option<MatrixSpec>, ConfigError> {
    let Some(value) = store.take(key) else {
        return Ok(None);
    };
    let spec = match value.as_str() {
        "zero" => MatrixSpec::Zero,
        "identity" => {
            let scale = match store.take(&format!("{key}_scale")) {
                Some(s) => parse_f64(&format!("{key}_scale"), &s)?,
                None => 1.0,
            };
            MatrixSpec::Identity { scale }
        }
        "random" => {
            let seed_key = format!("{key}_seed");
            let norm_key = format!("{key}_norm");
            let seed = match store.take(&seed_key) {
                Some(s) => parse_u64(&seed_key, &s)?,
                None => return Err(ConfigError::MissingKey(seed_key)),
            };
            let norm = match store.take(&norm_key) {
                Some(s) => parse_f64(&norm_key, &s)?,
                None => return Err(ConfigError::MissingKey(norm_key)),
            };
            if !(norm >= 0.0) {
                return Err(ConfigError::BadValue {
                    key: norm_key,
                    reason: "norm must be nonnegative".into(),
                });
            }
            MatrixSpec::Random { seed, norm }
        }
        "explicit" => {
            let values_key = format!("{key}_values");
            let Some(list) = store.take(&values_key) else {
                return Err(ConfigError::MissingKey(values_key));
            };
            MatrixSpec::Explicit(parse_list(&values_key, &list)?)
        }
        other => {
            // bare numeric list shorthand
            MatrixSpec::Explicit(parse_list(key, other)?)
        }
    };
    Ok(Some(spec))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut store = KeyStore::parse(text)?;

        // [spectral]
        let d = match store.take("spectral.d") {
            Some(v) => parse_usize("spectral.d", &v)?,
            None => return Err(ConfigError::MissingKey("spectral.d".into())),
        };
        if d == 0 || d > MAX_DIM {
            return Err(ConfigError::BadValue {
                key: "spectral.d".into(),
                reason: format!("dimension must be in 1..={MAX_DIM}"),
            });
        }
        let spectrum = match store.take("spectral.spectrum").as_deref() {
            Some("quadratic") | None => {
                let c = match store.take("spectral.c") {
                    Some(v) => parse_f64("spectral.c", &v)?,
                    None => 1.0,
                };
                SpectrumSpec::Quadratic { c }
            }
            Some("explicit") => {
                let Some(list) = store.take("spectral.values") else {
                    return Err(ConfigError::MissingKey("spectral.values".into()));
                };
                SpectrumSpec::Explicit(parse_list("spectral.values", &list)?)
            }
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "spectral.spectrum".into(),
                    reason: format!("'{other}' is not 'quadratic' or 'explicit'"),
                })
            }
        };

        // [noise]
        let t_final = match store.take("noise.T") {
            Some(v) => parse_f64("noise.T", &v)?,
            None => return Err(ConfigError::MissingKey("noise.T".into())),
        };
        let dt = match store.take("noise.dt") {
            Some(v) => parse_f64("noise.dt", &v)?,
            None => return Err(ConfigError::MissingKey("noise.dt".into())),
        };
        if !(t_final > 0.0) {
            return Err(ConfigError::BadValue {
                key: "noise.T".into(),
                reason: "horizon must be positive".into(),
            });
        }
        if !(dt > 0.0) || dt > t_final {
            return Err(ConfigError::BadValue {
                key: "noise.dt".into(),
                reason: "need 0 < dt <= T".into(),
            });
        }
        if t_final / dt > 1e7 {
            return Err(ConfigError::BadValue {
                key: "noise.dt".into(),
                reason: "more than 1e7 grid cells".into(),
            });
        }
        let lambda = match store.take("noise.lambda") {
            Some(v) => parse_f64("noise.lambda", &v)?,
            None => 0.0,
        };
        if !(lambda >= 0.0) {
            return Err(ConfigError::BadValue {
                key: "noise.lambda".into(),
                reason: "intensity must be nonnegative".into(),
            });
        }
        let d_w = match store.take("noise.d_w") {
            Some(v) => parse_usize("noise.d_w", &v)?,
            None => 0,
        };
        if d_w > MAX_DIM {
            return Err(ConfigError::BadValue {
                key: "noise.d_w".into(),
                reason: format!("d_w must be at most {MAX_DIM}"),
            });
        }
        let seed = match store.take("noise.seed") {
            Some(v) => Some(parse_u64("noise.seed", &v)?),
            None => None,
        };
        let marks = match (
            store.take("noise.marks"),
            store.take("noise.marks_density_table"),
        ) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "give either noise.marks or noise.marks_density_table, not both".into(),
                ))
            }
            (Some(list), None) => MarksSpec::Finite(parse_pairs("noise.marks", &list)?),
            (None, Some(table)) => {
                MarksSpec::DensityTable(parse_pairs("noise.marks_density_table", &table)?)
            }
            (None, None) => MarksSpec::Finite(vec![(1.0, 1.0)]),
        };

        // [coefficients]
        let n_max = match store.take("coefficients.n_max") {
            Some(v) => parse_usize("coefficients.n_max", &v)?,
            None => 2,
        };
        if n_max == 0 || n_max > MAX_NMAX {
            return Err(ConfigError::BadValue {
                key: "coefficients.n_max".into(),
                reason: format!("n_max must be in 1..={MAX_NMAX}"),
            });
        }
        let drift = match store.take("coefficients.f").as_deref() {
            None | Some("zero") => DriftSpec::Zero,
            Some("affine") => {
                let offset = take_vector_spec(&mut store, "coefficients.f_offset")?
                    .unwrap_or(VectorSpec::Zero);
                let linear = take_matrix_spec(&mut store, "coefficients.f_linear")?
                    .ok_or(ConfigError::MissingKey("coefficients.f_linear".into()))?;
                DriftSpec::Affine { offset, linear }
            }
            Some("nemytskii") => {
                let l = take_matrix_spec(&mut store, "coefficients.f_l")?
                    .ok_or(ConfigError::MissingKey("coefficients.f_l".into()))?;
                DriftSpec::Nemytskii { l }
            }
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "coefficients.f".into(),
                    reason: format!("'{other}' is not zero|affine|nemytskii"),
                })
            }
        };
        let diffusion = match store.take("coefficients.b").as_deref() {
            None | Some("zero") => DiffusionSpec::Zero,
            Some("constant") => {
                let matrix = take_matrix_spec(&mut store, "coefficients.b_matrix")?
                    .ok_or(ConfigError::MissingKey("coefficients.b_matrix".into()))?;
                DiffusionSpec::Constant { matrix }
            }
            Some("nemytskii") => {
                let l = take_matrix_spec(&mut store, "coefficients.b_l")?
                    .ok_or(ConfigError::MissingKey("coefficients.b_l".into()))?;
                let weight = take_matrix_spec(&mut store, "coefficients.b_weight")?
                    .ok_or(ConfigError::MissingKey("coefficients.b_weight".into()))?;
                DiffusionSpec::Nemytskii { l, weight }
            }
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "coefficients.b".into(),
                    reason: format!("'{other}' is not zero|constant|nemytskii"),
                })
            }
        };
        let jump = match store.take("coefficients.g").as_deref() {
            None | Some("zero") => JumpSpec::Zero,
            Some("mark_affine") => {
                let offset = take_vector_spec(&mut store, "coefficients.g_offset")?
                    .unwrap_or(VectorSpec::Zero);
                let linear = take_matrix_spec(&mut store, "coefficients.g_linear")?
                    .unwrap_or(MatrixSpec::Zero);
                JumpSpec::MarkAffine { offset, linear }
            }
            Some("mark_nemytskii") => {
                let l = take_matrix_spec(&mut store, "coefficients.g_l")?
                    .ok_or(ConfigError::MissingKey("coefficients.g_l".into()))?;
                JumpSpec::MarkNemytskii { l }
            }
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "coefficients.g".into(),
                    reason: format!("'{other}' is not zero|mark_affine|mark_nemytskii"),
                })
            }
        };
        let jump_split_half = match store.take("coefficients.g_split").as_deref() {
            None => false,
            Some("half") => true,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "coefficients.g_split".into(),
                    reason: format!("'{other}' is not 'half'"),
                })
            }
        };

        // [solver]
        let u0 = take_vector_spec(&mut store, "solver.u0")?
            .ok_or(ConfigError::MissingKey("solver.u0".into()))?;

        // [norms]
        let p = match store.take("norms.p") {
            Some(v) => parse_f64("norms.p", &v)?,
            None => 2.0,
        };
        if !(p > 0.0) {
            return Err(ConfigError::BadValue {
                key: "norms.p".into(),
                reason: "p must be positive".into(),
            });
        }
        let q = match store.take("norms.q") {
            Some(v) => parse_f64("norms.q", &v)?,
            None => 2.0 * p.max(1.0) + 1.0,
        };
        if !(q > 0.0) {
            return Err(ConfigError::BadValue {
                key: "norms.q".into(),
                reason: "q must be positive".into(),
            });
        }
        let window = match store.take("norms.window") {
            Some(v) => {
                let list = parse_list("norms.window", &v)?;
                if list.len() != 2 || !(list[0] >= 0.0) || !(list[1] > list[0]) || list[1] > t_final
                {
                    return Err(ConfigError::BadValue {
                        key: "norms.window".into(),
                        reason: "expected t0, t1 with 0 <= t0 < t1 <= T".into(),
                    });
                }
                Some((list[0], list[1]))
            }
            None => None,
        };

        // [verify]
        let epsilons = match store.take("verify.epsilons") {
            Some(v) => parse_list("verify.epsilons", &v)?,
            None => vec![0.1, 0.05, 0.025, 0.0125],
        };
        let order = match store.take("verify.order") {
            Some(v) => parse_usize("verify.order", &v)?,
            None => 1,
        };
        let paths = match store.take("verify.paths") {
            Some(v) => parse_u64("verify.paths", &v)?,
            None => 1000,
        };
        if paths == 0 || paths > MAX_PATHS {
            return Err(ConfigError::BadValue {
                key: "verify.paths".into(),
                reason: format!("paths must be in 1..={MAX_PATHS}"),
            });
        }
        let directions = match store.take("verify.directions") {
            Some(v) => parse_usize("verify.directions", &v)?,
            None => 8,
        };
        if directions == 0 || directions > 4096 {
            return Err(ConfigError::BadValue {
                key: "verify.directions".into(),
                reason: "directions must be in 1..=4096".into(),
            });
        }
        let direction_seed = match store.take("verify.direction_seed") {
            Some(v) => Some(parse_u64("verify.direction_seed", &v)?),
            None => None,
        };
        let magnitudes = match store.take("verify.magnitudes") {
            Some(v) => parse_list("verify.magnitudes", &v)?,
            None => vec![1e-3, 1e-2, 1e-1, 1.0],
        };
        let t0_ladder = match store.take("verify.t0_ladder") {
            Some(v) => parse_list("verify.t0_ladder", &v)?,
            None => vec![t_final / 8.0, t_final / 4.0, t_final / 2.0],
        };
        let tol_abs = match store.take("verify.tol_abs") {
            Some(v) => parse_f64("verify.tol_abs", &v)?,
            None => 1e-12,
        };
        let target = match store.take("verify.target").as_deref() {
            None | Some("drift") => TargetSpec::Drift,
            Some("diffusion") => TargetSpec::Diffusion,
            Some("jump") => TargetSpec::Jump,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "verify.target".into(),
                    reason: format!("'{other}' is not drift|diffusion|jump"),
                })
            }
        };
        let plan = {
            let n = store.take("verify.plan_n");
            let m = store.take("verify.plan_m");
            let pq = store.take("verify.plan_p");
            let qq = store.take("verify.plan_q");
            let p0 = store.take("verify.plan_p0");
            let chain = store.take("verify.plan_chain");
            match (n, m, pq, qq) {
                (None, None, None, None) => {
                    if p0.is_some() || chain.is_some() {
                        return Err(ConfigError::Invalid(
                            "plan_p0/plan_chain given without plan_n/plan_m/plan_p/plan_q".into(),
                        ));
                    }
                    None
                }
                (Some(n), Some(m), Some(pq), Some(qq)) => {
                    let n = parse_usize("verify.plan_n", &n)? as u32;
                    let m = parse_usize("verify.plan_m", &m)? as u32;
                    let p0 = match p0.as_deref() {
                        None | Some("inf") => None,
                        Some(v) => Some(v.to_string()),
                    };
                    let chain = match chain {
                        None => None,
                        Some(v) => Some(
                            v.split(',')
                                .map(str::trim)
                                .filter(|s| !s.is_empty())
                                .map(str::to_string)
                                .collect(),
                        ),
                    };
                    Some(PlanSpec {
                        n,
                        m,
                        p: pq,
                        q: qq,
                        p0,
                        chain,
                    })
                }
                _ => {
                    return Err(ConfigError::Invalid(
                        "plan check needs all of plan_n, plan_m, plan_p, plan_q".into(),
                    ))
                }
            }
        };

        // [output]
        let out = store.take("output.out");

        store.finish()?;

        let config = RunConfig {
            d,
            spectrum,
            lambda,
            marks,
            d_w,
            dt,
            t_final,
            seed,
            n_max,
            drift,
            diffusion,
            jump,
            jump_split_half,
            u0,
            p,
            q,
            window,
            epsilons,
            order,
            paths,
            directions,
            direction_seed,
            magnitudes,
            t0_ladder,
            tol_abs,
            target,
            plan,
            out,
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if let SpectrumSpec::Explicit(values) = &self.spectrum {
            if values.len() != self.d {
                return Err(ConfigError::BadValue {
                    key: "spectral.values".into(),
                    reason: format!("expected {} eigenvalues, got {}", self.d, values.len()),
                });
            }
        }
        if let MarksSpec::Finite(pairs) = &self.marks {
            let total: f64 = pairs.iter().map(|(_, w)| w).sum();
            if self.lambda > 0.0 && (total - 1.0).abs() > 1e-12 {
                return Err(ConfigError::BadValue {
                    key: "noise.marks".into(),
                    reason: format!("weights sum to {total}, expected 1"),
                });
            }
        }
        if self.order == 0 || self.order > MAX_NMAX {
            return Err(ConfigError::BadValue {
                key: "verify.order".into(),
                reason: format!("order must be in 1..={MAX_NMAX}"),
            });
        }
        if self.lambda * self.t_final > 1e7 {
            return Err(ConfigError::BadValue {
                key: "noise.lambda".into(),
                reason: "intensity too large for desk scale (lambda * T > 1e7)".into(),
            });
        }
        Ok(())
    }

    pub fn mark_space(&self) -> Result<MarkSpace, ConfigError> {
        Ok(match &self.marks {
            MarksSpec::Finite(pairs) => MarkSpace::finite(pairs.clone(), self.lambda)?,
            MarksSpec::DensityTable(pairs) => {
                let (nodes, density): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
                MarkSpace::interval_table(nodes, density, self.lambda)?
            }
        })
    }

    /// Materialise the simulation problem: spectrum, coefficient set
    /// (with the shared γ table), mark space and initial datum.  The
    /// effective seed can be overridden by the caller (CLI flag / env).
    pub fn build_problem(&self, seed_override: Option<u64>) -> Result<Problem, ConfigError> {
        let d = self.d;
        let op = match &self.spectrum {
            SpectrumSpec::Quadratic { c } => SpectralOperator::quadratic(d, *c)?,
            SpectrumSpec::Explicit(values) => SpectralOperator::new(values.clone())?,
        };
        let gamma = std::sync::Arc::new(GammaFunction::new(self.n_max));
        let drift = match &self.drift {
            DriftSpec::Zero => Drift::Zero,
            DriftSpec::Affine { offset, linear } => Drift::affine(
                offset.build(d, "coefficients.f_offset")?,
                linear.build(d, d, "coefficients.f_linear")?,
            )?,
            DriftSpec::Nemytskii { l } => {
                Drift::nemytskii(l.build(d, d, "coefficients.f_l")?, gamma.clone())?
            }
        };
        let diffusion = match &self.diffusion {
            DiffusionSpec::Zero => Diffusion::Zero,
            DiffusionSpec::Constant { matrix } => {
                Diffusion::Constant(matrix.build(d, self.d_w, "coefficients.b_matrix")?)
            }
            DiffusionSpec::Nemytskii { l, weight } => Diffusion::nemytskii(
                l.build(d, d, "coefficients.b_l")?,
                weight.build(d, self.d_w, "coefficients.b_weight")?,
                gamma.clone(),
            )?,
        };
        let jump = match &self.jump {
            JumpSpec::Zero => Jump::Zero,
            JumpSpec::MarkAffine { offset, linear } => Jump::mark_affine(
                offset.build(d, "coefficients.g_offset")?,
                linear.build(d, d, "coefficients.g_linear")?,
            )?,
            JumpSpec::MarkNemytskii { l } => {
                Jump::mark_nemytskii(l.build(d, d, "coefficients.g_l")?, gamma)?
            }
        };
        let mut set = CoefficientSet::new(drift, diffusion, jump, self.n_max, d, self.d_w)?;
        if self.jump_split_half {
            let half1 = Jump::scaled(set.jump().clone(), 0.5);
            let half2 = Jump::scaled(set.jump().clone(), 0.5);
            set = set.with_jump_split(half1, half2);
        }
        let marks = self.mark_space()?;
        let u0 = self.u0.build(d, "solver.u0")?;
        let seed = seed_override.or(self.seed).unwrap_or(1);
        Ok(Problem {
            op,
            set,
            marks,
            t_final: self.t_final,
            base_dt: self.dt,
            u0,
            seed,
        })
    }

    pub fn effective_window(&self) -> (f64, f64) {
        self.window.unwrap_or((0.0, self.t_final))
    }
}
