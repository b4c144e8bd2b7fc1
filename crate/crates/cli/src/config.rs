//! Strict experiment-config parsing.
//!
//! The schema is validated key by key: unknown keys are rejected with their
//! full JSON path and, where possible, a suggestion. Defaults exist only for
//! artifact knobs (seeds, worker counts, replicate counts); the schedule
//! parameters have no defaults and must be given explicitly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lsa_core::bootstrap::WeightScheme;
use lsa_core::gaussapprox::CovarianceReference;
use lsa_core::model::{self, LsaInstance, MdpSpec};
use lsa_core::schedule::StepSchedule;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

type CResult<T> = Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> CResult<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone)]
pub enum InstanceSpec {
    RandomHurwitz {
        dim: usize,
        seed: u64,
        spectrum: (f64, f64),
        noise_scale: f64,
        atoms: Option<usize>,
    },
    LowerBound1d {
        seed: u64,
    },
    TdGenerative {
        seed: u64,
        mdp: MdpSpec,
        state_dist: Option<Vec<f64>>,
        enumeration_cap: usize,
    },
}

impl InstanceSpec {
    pub fn build(&self) -> Result<LsaInstance, lsa_core::LsaError> {
        match self {
            InstanceSpec::RandomHurwitz {
                dim,
                seed,
                spectrum,
                noise_scale,
                atoms,
            } => match atoms {
                Some(count) => model::make_random_hurwitz_with_atoms(
                    *dim,
                    *seed,
                    *spectrum,
                    *noise_scale,
                    *count,
                ),
                None => model::make_random_hurwitz(*dim, *seed, *spectrum, *noise_scale),
            },
            InstanceSpec::LowerBound1d { seed } => Ok(model::make_gaussian_identity_1d(*seed)),
            InstanceSpec::TdGenerative {
                seed,
                mdp,
                state_dist,
                enumeration_cap,
            } => model::make_td_generative_with(mdp, *seed, state_dist.as_deref(), *enumeration_cap),
        }
    }

    pub fn is_td(&self) -> bool {
        matches!(self, InstanceSpec::TdGenerative { .. })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AssertBands {
    pub slope_band: (f64, f64),
    pub slope_max: f64,
    pub coverage_band: (f64, f64),
    pub gap_tol: f64,
}

impl Default for AssertBands {
    fn default() -> Self {
        Self {
            slope_band: (-0.45, -0.21),
            slope_max: -0.25,
            coverage_band: (0.86, 0.94),
            gap_tol: 0.08,
        }
    }
}

/// Fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub instance_spec: InstanceSpec,
    pub schedule: StepSchedule,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub n: Option<u64>,
    pub n_grid: Option<Vec<u64>>,
    pub m_replicates: usize,
    pub replications: Option<usize>,
    pub r_real: usize,
    pub r_outer: usize,
    pub level: f64,
    pub k_directions: usize,
    pub weights: WeightScheme,
    pub reference: CovarianceReference,
    pub theta0: Option<Vec<f64>>,
    pub moment_order: f64,
    pub asserts: AssertBands,
}

const TOP_KEYS: &[&str] = &[
    "instance", "schedule", "seed", "out_dir", "workers", "n", "n_grid", "M", "R", "R_real",
    "R_outer", "level", "K", "weights", "reference", "theta0", "p", "assert",
];

/// Hand-curated aliases for common misnamings, mapping to the correct path.
fn alias_for(key: &str) -> Option<&'static str> {
    match key {
        "stepsize" | "step_size" | "alpha" | "alpha0" | "learning_rate" => Some("schedule.c0"),
        "gamma" => Some("schedule.gamma"),
        "k0" => Some("schedule.k0"),
        "replications" => Some("R"),
        "directions" => Some("K"),
        "weight" | "weight_scheme" => Some("weights"),
        _ => None,
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = if a[i - 1] == b[j - 1] { 0 } else { 1 };
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn unknown_key_error(path: &str, key: &str, expected: &[&str]) -> ConfigError {
    let full = if path.is_empty() {
        format!("$.{key}")
    } else {
        format!("$.{path}.{key}")
    };
    if let Some(target) = alias_for(key) {
        return ConfigError(format!("unknown key \"{full}\"; did you mean \"{target}\"?"));
    }
    let mut best: Option<(&str, usize)> = None;
    for cand in expected {
        let dist = edit_distance(key, cand);
        if best.map(|(_, d)| dist < d).unwrap_or(true) {
            best = Some((cand, dist));
        }
    }
    match best {
        Some((cand, dist)) if dist <= 3 => {
            ConfigError(format!("unknown key \"{full}\"; did you mean \"{cand}\"?"))
        }
        _ => ConfigError(format!("unknown key \"{full}\"")),
    }
}

fn as_object<'v>(
    value: &'v Value,
    path: &str,
    expected: &[&str],
) -> CResult<BTreeMap<&'v str, &'v Value>> {
    let map = value
        .as_object()
        .ok_or_else(|| ConfigError(format!("\"{path}\" must be an object")))?;
    let mut out = BTreeMap::new();
    for (k, v) in map {
        if !expected.contains(&k.as_str()) {
            return Err(unknown_key_error(path, k, expected));
        }
        out.insert(k.as_str(), v);
    }
    Ok(out)
}

fn need<'v>(map: &BTreeMap<&str, &'v Value>, path: &str, key: &str) -> CResult<&'v Value> {
    map.get(key)
        .copied()
        .ok_or_else(|| ConfigError(format!("missing required key \"{path}{key}\"")))
}

fn get_f64(v: &Value, path: &str) -> CResult<f64> {
    v.as_f64()
        .ok_or_else(|| ConfigError(format!("\"{path}\" must be a number")))
}

fn get_u64(v: &Value, path: &str) -> CResult<u64> {
    v.as_u64()
        .ok_or_else(|| ConfigError(format!("\"{path}\" must be a nonnegative integer")))
}

fn get_str<'v>(v: &'v Value, path: &str) -> CResult<&'v str> {
    v.as_str()
        .ok_or_else(|| ConfigError(format!("\"{path}\" must be a string")))
}

fn get_f64_array(v: &Value, path: &str) -> CResult<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| ConfigError(format!("\"{path}\" must be an array")))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| get_f64(x, &format!("{path}[{i}]")))
        .collect()
}

fn get_u64_array(v: &Value, path: &str) -> CResult<Vec<u64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| ConfigError(format!("\"{path}\" must be an array")))?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| get_u64(x, &format!("{path}[{i}]")))
        .collect()
}

fn parse_nested_f64(v: &Value, path: &str) -> CResult<Vec<Vec<f64>>> {
    let arr = v
        .as_array()
        .ok_or_else(|| ConfigError(format!("\"{path}\" must be an array")))?;
    arr.iter()
        .enumerate()
        .map(|(i, row)| get_f64_array(row, &format!("{path}[{i}]")))
        .collect()
}

fn parse_mdp(value: &Value, path: &str) -> CResult<MdpSpec> {
    const MDP_KEYS: &[&str] = &["transitions", "rewards", "policy", "features", "discount"];
    let map = as_object(value, path, MDP_KEYS)?;
    let transitions_v = need(&map, &format!("{path}."), "transitions")?;
    let transitions: Vec<Vec<Vec<f64>>> = transitions_v
        .as_array()
        .ok_or_else(|| ConfigError(format!("\"{path}.transitions\" must be an array")))?
        .iter()
        .enumerate()
        .map(|(i, per_state)| parse_nested_f64(per_state, &format!("{path}.transitions[{i}]")))
        .collect::<CResult<_>>()?;
    let rewards = parse_nested_f64(need(&map, &format!("{path}."), "rewards")?, &format!("{path}.rewards"))?;
    let policy = parse_nested_f64(need(&map, &format!("{path}."), "policy")?, &format!("{path}.policy"))?;
    let features = parse_nested_f64(need(&map, &format!("{path}."), "features")?, &format!("{path}.features"))?;
    let discount = get_f64(need(&map, &format!("{path}."), "discount")?, &format!("{path}.discount"))?;
    let n_states = transitions.len();
    let n_actions = transitions.first().map(|a| a.len()).unwrap_or(0);
    Ok(MdpSpec {
        n_states,
        n_actions,
        transition: transitions,
        reward: rewards,
        policy,
        discount,
        features,
    })
}

fn parse_instance(value: &Value, base_dir: &Path, default_seed: u64) -> CResult<InstanceSpec> {
    const INSTANCE_KEYS: &[&str] = &[
        "kind",
        "dim",
        "seed",
        "spectrum",
        "noise_scale",
        "atoms",
        "mdp",
        "mdp_path",
        "state_dist",
        "enumeration_cap",
    ];
    let map = as_object(value, "instance", INSTANCE_KEYS)?;
    let kind = get_str(need(&map, "instance.", "kind")?, "instance.kind")?;
    let seed = match map.get("seed") {
        Some(v) => get_u64(v, "instance.seed")?,
        None => default_seed,
    };
    let forbid = |keys: &[&str]| -> CResult<()> {
        for k in keys {
            if map.contains_key(k) {
                return err(format!(
                    "key \"instance.{k}\" is not valid for kind \"{kind}\""
                ));
            }
        }
        Ok(())
    };
    match kind {
        "random_hurwitz" => {
            forbid(&["mdp", "mdp_path", "state_dist", "enumeration_cap"])?;
            let dim = get_u64(need(&map, "instance.", "dim")?, "instance.dim")? as usize;
            let spectrum = match map.get("spectrum") {
                Some(v) => {
                    let arr = get_f64_array(v, "instance.spectrum")?;
                    if arr.len() != 2 {
                        return err("\"instance.spectrum\" must be [lo, hi]");
                    }
                    (arr[0], arr[1])
                }
                None => (0.5, 1.5),
            };
            let noise_scale = match map.get("noise_scale") {
                Some(v) => get_f64(v, "instance.noise_scale")?,
                None => 1.0,
            };
            let atoms = match map.get("atoms") {
                Some(v) => Some(get_u64(v, "instance.atoms")? as usize),
                None => None,
            };
            Ok(InstanceSpec::RandomHurwitz {
                dim,
                seed,
                spectrum,
                noise_scale,
                atoms,
            })
        }
        "lower_bound_1d" => {
            forbid(&[
                "dim",
                "spectrum",
                "noise_scale",
                "atoms",
                "mdp",
                "mdp_path",
                "state_dist",
                "enumeration_cap",
            ])?;
            Ok(InstanceSpec::LowerBound1d { seed })
        }
        "td_generative" => {
            forbid(&["dim", "spectrum", "noise_scale", "atoms"])?;
            let mdp = match (map.get("mdp"), map.get("mdp_path")) {
                (Some(inline), None) => parse_mdp(inline, "instance.mdp")?,
                (None, Some(path_v)) => {
                    let rel = get_str(path_v, "instance.mdp_path")?;
                    let full = base_dir.join(rel);
                    let text = std::fs::read_to_string(&full).map_err(|e| {
                        ConfigError(format!("cannot read mdp file {}: {e}", full.display()))
                    })?;
                    let value: Value = serde_json::from_str(&text).map_err(|e| {
                        ConfigError(format!(
                            "mdp file {} is not valid JSON: {e}",
                            full.display()
                        ))
                    })?;
                    parse_mdp(&value, "instance.mdp")?
                }
                (Some(_), Some(_)) => {
                    return err("give either \"instance.mdp\" or \"instance.mdp_path\", not both")
                }
                (None, None) => {
                    return err("kind \"td_generative\" requires \"instance.mdp\" or \"instance.mdp_path\"")
                }
            };
            let state_dist = match map.get("state_dist") {
                Some(v) => Some(get_f64_array(v, "instance.state_dist")?),
                None => None,
            };
            let enumeration_cap = match map.get("enumeration_cap") {
                Some(v) => get_u64(v, "instance.enumeration_cap")? as usize,
                None => model::DEFAULT_ENUMERATION_CAP,
            };
            Ok(InstanceSpec::TdGenerative {
                seed,
                mdp,
                state_dist,
                enumeration_cap,
            })
        }
        other => err(format!(
            "\"instance.kind\" must be one of random_hurwitz | lower_bound_1d | td_generative, got \"{other}\""
        )),
    }
}

fn parse_schedule(value: &Value) -> CResult<StepSchedule> {
    const SCHEDULE_KEYS: &[&str] = &["c0", "gamma", "k0"];
    let map = as_object(value, "schedule", SCHEDULE_KEYS)?;
    let c0 = get_f64(need(&map, "schedule.", "c0")?, "schedule.c0")?;
    let gamma = get_f64(need(&map, "schedule.", "gamma")?, "schedule.gamma")?;
    let k0 = get_u64(need(&map, "schedule.", "k0")?, "schedule.k0")?;
    StepSchedule::new(c0, gamma, k0).map_err(|e| ConfigError(format!("schedule: {e}")))
}

fn parse_weights(s: &str) -> CResult<WeightScheme> {
    match s {
        "two_point" => Ok(WeightScheme::TwoPoint),
        "exp" | "exponential" => Ok(WeightScheme::Exponential),
        "poisson" | "poisson_shifted" => Ok(WeightScheme::PoissonShifted),
        other => err(format!(
            "\"weights\" must be one of two_point | exp | poisson, got \"{other}\""
        )),
    }
}

fn parse_asserts(value: &Value) -> CResult<AssertBands> {
    const KEYS: &[&str] = &["slope_band", "slope_max", "coverage_band", "gap_tol"];
    let map = as_object(value, "assert", KEYS)?;
    let mut bands = AssertBands::default();
    if let Some(v) = map.get("slope_band") {
        let arr = get_f64_array(v, "assert.slope_band")?;
        if arr.len() != 2 || arr[0] > arr[1] {
            return err("\"assert.slope_band\" must be [lo, hi] with lo <= hi");
        }
        bands.slope_band = (arr[0], arr[1]);
    }
    if let Some(v) = map.get("slope_max") {
        bands.slope_max = get_f64(v, "assert.slope_max")?;
    }
    if let Some(v) = map.get("coverage_band") {
        let arr = get_f64_array(v, "assert.coverage_band")?;
        if arr.len() != 2 || arr[0] > arr[1] {
            return err("\"assert.coverage_band\" must be [lo, hi] with lo <= hi");
        }
        bands.coverage_band = (arr[0], arr[1]);
    }
    if let Some(v) = map.get("gap_tol") {
        bands.gap_tol = get_f64(v, "assert.gap_tol")?;
    }
    Ok(bands)
}

/// Parse and validate a config document. `base_dir` resolves relative
/// `mdp_path` references.
pub fn parse_config(text: &str, base_dir: &Path) -> CResult<ExperimentConfig> {
    let value: Value = serde_json::from_str(text).map_err(|e| {
        ConfigError(format!(
            "config is not valid JSON at line {}, column {}: {e}",
            e.line(),
            e.column()
        ))
    })?;
    let map = as_object(&value, "", TOP_KEYS)?;

    let seed = match map.get("seed") {
        Some(v) => get_u64(v, "seed")?,
        None => 1,
    };
    let instance_spec = parse_instance(need(&map, "", "instance")?, base_dir, seed)?;
    let schedule = parse_schedule(need(&map, "", "schedule")?)?;

    let out_dir = match map.get("out_dir") {
        Some(v) => PathBuf::from(get_str(v, "out_dir")?),
        None => PathBuf::from("out"),
    };
    let workers = match map.get("workers") {
        Some(v) => get_u64(v, "workers")? as usize,
        None => 0,
    };
    let n = match map.get("n") {
        Some(v) => Some(get_u64(v, "n")?),
        None => None,
    };
    let n_grid = match map.get("n_grid") {
        Some(v) => {
            let grid = get_u64_array(v, "n_grid")?;
            if grid.windows(2).any(|w| w[0] >= w[1]) || grid.is_empty() {
                return err("\"n_grid\" must be nonempty and strictly increasing");
            }
            Some(grid)
        }
        None => None,
    };
    let m_replicates = match map.get("M") {
        Some(v) => get_u64(v, "M")? as usize,
        None => 200,
    };
    let replications = match map.get("R") {
        Some(v) => Some(get_u64(v, "R")? as usize),
        None => None,
    };
    let r_real = match map.get("R_real") {
        Some(v) => get_u64(v, "R_real")? as usize,
        None => 5000,
    };
    let r_outer = match map.get("R_outer") {
        Some(v) => get_u64(v, "R_outer")? as usize,
        None => 50,
    };
    let level = match map.get("level") {
        Some(v) => {
            let l = get_f64(v, "level")?;
            if !(0.0 < l && l < 1.0) {
                return err(format!("\"level\" must lie in (0, 1), got {l}"));
            }
            l
        }
        None => 0.9,
    };
    let k_directions = match map.get("K") {
        Some(v) => get_u64(v, "K")? as usize,
        None => 32,
    };
    let weights = match map.get("weights") {
        Some(v) => parse_weights(get_str(v, "weights")?)?,
        None => WeightScheme::TwoPoint,
    };
    let reference = match map.get("reference") {
        Some(v) => match get_str(v, "reference")? {
            "sigma_n" => CovarianceReference::SigmaN,
            "sigma_inf" => CovarianceReference::SigmaInf,
            other => {
                return err(format!(
                    "\"reference\" must be sigma_n | sigma_inf, got \"{other}\""
                ))
            }
        },
        None => CovarianceReference::SigmaInf,
    };
    let theta0 = match map.get("theta0") {
        Some(v) => Some(get_f64_array(v, "theta0")?),
        None => None,
    };
    let moment_order = match map.get("p") {
        Some(v) => {
            let p = get_f64(v, "p")?;
            if p < 2.0 {
                return err(format!("\"p\" must be at least 2, got {p}"));
            }
            p
        }
        None => 2.0,
    };
    let asserts = match map.get("assert") {
        Some(v) => parse_asserts(v)?,
        None => AssertBands::default(),
    };

    Ok(ExperimentConfig {
        instance_spec,
        schedule,
        seed,
        out_dir,
        workers,
        n,
        n_grid,
        m_replicates,
        replications,
        r_real,
        r_outer,
        level,
        k_directions,
        weights,
        reference,
        theta0,
        moment_order,
        asserts,
    })
}
