use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use eqfree::coarse_map::CoarseSettings;
use eqfree::continuation::ContinuationSettings;
use eqfree::convergence_lab::{ToySettings, ToySystem};
use eqfree::micro_model::ModelParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Parameter envelope checked unless `--unsafe` is given.
pub const V0_ENVELOPE: (f64, f64) = (0.8, 1.0);
pub const H_ENVELOPE: (f64, f64) = (1.0, 1.7);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Branch,
    Fold2,
    Backward,
    Hopf,
    LiftingSweep,
    TskipScan,
    FberrorScan,
    ConvergeLab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub sim_time: f64,
    pub sample_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldConfig {
    pub step: f64,
    pub h_range: (f64, f64),
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardConfig {
    pub v0: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Start this far below the stable equilibrium.
    pub offset: f64,
    pub update_reference: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopfConfig {
    pub h_range: (f64, f64),
    pub points: usize,
    pub modes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftingConfig {
    pub p_list: Vec<f64>,
    pub direct_v0_start: f64,
    pub direct_v0_step: f64,
    pub direct_points: usize,
    pub direct_time: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TskipConfig {
    pub values: Vec<f64>,
    pub reference: f64,
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FberrorConfig {
    pub v0: f64,
    pub sigma: f64,
    pub delta_list: Vec<f64>,
    pub tskip_list: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub system: ToySystem,
    pub settings: ToySettings,
    pub x: f64,
    pub delta: f64,
    pub tskip_list: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelParams,
    pub coarse: CoarseSettings,
    pub continuation: ContinuationSettings,
    pub n_steps: usize,
    pub p: f64,
    /// Seed parameters for branch starts; derived from `h` when absent.
    pub seed_v0: Option<(f64, f64)>,
    pub seed_time: f64,
    pub simulate: SimulateConfig,
    pub fold: FoldConfig,
    pub backward: BackwardConfig,
    pub hopf: HopfConfig,
    pub lifting: LiftingConfig,
    pub tskip: TskipConfig,
    pub fberror: FberrorConfig,
    pub toy: ToyConfig,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub unsafe_ranges: bool,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        Self {
            command,
            model: ModelParams::default(),
            coarse: CoarseSettings::default(),
            continuation: ContinuationSettings::default(),
            n_steps: 800,
            p: 1.0,
            seed_v0: None,
            seed_time: 5e4,
            simulate: SimulateConfig {
                sim_time: 5e4,
                sample_dt: 100.0,
            },
            fold: FoldConfig {
                step: 0.005,
                h_range: (1.1, 1.25),
                n_steps: 60,
            },
            backward: BackwardConfig {
                v0: 0.884,
                dt: -5000.0,
                n_steps: 30,
                offset: 0.005,
                update_reference: true,
            },
            hopf: HopfConfig {
                h_range: H_ENVELOPE,
                points: 71,
                modes: vec![1, 2, 3, 4],
            },
            lifting: LiftingConfig {
                p_list: vec![0.95, 1.0, 1.05],
                direct_v0_start: 0.91,
                direct_v0_step: 0.0015,
                direct_points: 20,
                direct_time: 3e5,
                a: 0.125,
                b: 0.25,
            },
            tskip: TskipConfig {
                values: vec![300.0, 600.0, 1000.0, 1500.0, 2000.0],
                reference: 2000.0,
                a: 0.01,
                b: 0.28,
            },
            fberror: FberrorConfig {
                v0: 0.884,
                sigma: 0.1,
                delta_list: vec![300.0, 600.0, 1200.0, 2400.0, 4800.0],
                tskip_list: vec![300.0, 600.0, 1000.0, 1500.0, 2000.0],
            },
            toy: ToyConfig {
                system: ToySystem::default(),
                settings: ToySettings::default(),
                x: 0.5,
                delta: 10.0,
                tskip_list: vec![2.0, 4.0, 6.0, 8.0, 10.0],
            },
            threads: None,
            out: PathBuf::from("out"),
            unsafe_ranges: false,
        }
    }

    /// Checks every section; `key` in the error names the config key.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.coarse.validate()?;
        self.continuation.validate()?;
        self.toy.system.validate()?;
        positive("n_steps", self.n_steps as f64)?;
        positive("p", self.p)?;
        positive("seed_time", self.seed_time)?;
        positive("sim_time", self.simulate.sim_time)?;
        positive("sample_dt", self.simulate.sample_dt)?;
        positive("fold_step", self.fold.step)?;
        increasing("fold_h_min", self.fold.h_range)?;
        if self.backward.dt == 0.0 || !self.backward.dt.is_finite() {
            return Err(invalid("dt", "must be finite and non-zero"));
        }
        positive("hopf_points", self.hopf.points as f64)?;
        increasing("hopf_h_min", self.hopf.h_range)?;
        if self.hopf.modes.iter().any(|&j| j == 0 || j >= self.model.cars) {
            return Err(invalid("modes", "each mode must lie in 1..N-1"));
        }
        nonempty("p_list", &self.lifting.p_list)?;
        if self.lifting.p_list.iter().any(|&p| !(p > 0.0)) {
            return Err(invalid("p_list", "every bias must be positive"));
        }
        positive("direct_points", self.lifting.direct_points as f64)?;
        positive("direct_time", self.lifting.direct_time)?;
        increasing("distance_a", (self.lifting.a, self.lifting.b))?;
        nonempty("tskip_list", &self.tskip.values)?;
        if !self.tskip.values.contains(&self.tskip.reference) {
            return Err(invalid("tskip_ref", "must be one of tskip_list"));
        }
        increasing("tskip_a", (self.tskip.a, self.tskip.b))?;
        nonempty("fb_delta_list", &self.fberror.delta_list)?;
        nonempty("fb_tskip_list", &self.fberror.tskip_list)?;
        nonempty("toy_tskip_list", &self.toy.tskip_list)?;
        if let Some(n) = self.threads {
            positive("threads", n as f64)?;
        }
        if !self.unsafe_ranges {
            self.check_envelope()?;
        }
        Ok(())
    }

    fn check_envelope(&self) -> Result<()> {
        let mut v0s = vec![("v0", self.model.v0), ("backward_v0", self.backward.v0), ("fb_v0", self.fberror.v0)];
        if let Some((a, b)) = self.seed_v0 {
            v0s.push(("seed_v0", a));
            v0s.push(("seed_v0", b));
        }
        for (key, v) in v0s {
            inside(key, v, V0_ENVELOPE)?;
        }
        for (key, v) in [
            ("h", self.model.h),
            ("fold_h_min", self.fold.h_range.0),
            ("fold_h_max", self.fold.h_range.1),
            ("hopf_h_min", self.hopf.h_range.0),
            ("hopf_h_max", self.hopf.h_range.1),
        ] {
            inside(key, v, H_ENVELOPE)?;
        }
        Ok(())
    }
}

fn invalid(key: &str, reason: &str) -> CliError {
    CliError::Invalid {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, "must be positive"))
    }
}

fn increasing(key: &str, (a, b): (f64, f64)) -> Result<()> {
    if a < b {
        Ok(())
    } else {
        Err(invalid(key, "interval bounds must be increasing"))
    }
}

fn nonempty<T>(key: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        Err(invalid(key, "list must not be empty"))
    } else {
        Ok(())
    }
}

fn inside(key: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if (lo..=hi).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Invalid {
            key: key.to_string(),
            reason: format!("{v} is outside [{lo}, {hi}] (pass --unsafe to allow)"),
        })
    }
}

/// One `key = value` assignment and the line it came from.
#[derive(Debug, Clone, PartialEq)]
struct Entry {
    line: usize,
    value: String,
}

/// Splits the text into assignments. Several may share a line when
/// separated by commas (`v0 = 0.91, h = 1.2`); a comma-separated segment
/// without `=` continues the previous value as a list item.
fn entries(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut out: BTreeMap<String, Entry> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut current: Option<(String, Vec<String>)> = None;
        let mut finished = Vec::new();
        for seg in body.split(',') {
            if let Some((k, v)) = seg.split_once('=') {
                if let Some(done) = current.take() {
                    finished.push(done);
                }
                let key = k.trim();
                if key.is_empty() || key.contains(char::is_whitespace) {
                    return Err(CliError::Parse {
                        line,
                        message: format!("malformed key `{key}`"),
                    });
                }
                current = Some((key.to_string(), vec![v.trim().to_string()]));
            } else if let Some((_, items)) = current.as_mut() {
                items.push(seg.trim().to_string());
            } else {
                return Err(CliError::Parse {
                    line,
                    message: format!("expected `key = value`, found `{}`", seg.trim()),
                });
            }
        }
        finished.extend(current);
        for (key, items) in finished {
            if items.iter().all(|s| s.is_empty()) {
                return Err(CliError::Parse {
                    line,
                    message: format!("missing value for `{key}`"),
                });
            }
            if let Some(prev) = out.get(&key) {
                return Err(CliError::Parse {
                    line,
                    message: format!("duplicate key `{key}` (first set on line {})", prev.line),
                });
            }
            out.insert(
                key,
                Entry {
                    line,
                    value: items.join(","),
                },
            );
        }
    }
    Ok(out)
}

fn parse_err(e: &Entry, key: &str, what: &str) -> CliError {
    CliError::Parse {
        line: e.line,
        message: format!("`{key}` expects {what}, found `{}`", e.value),
    }
}

fn num(e: &Entry, key: &str) -> Result<f64> {
    e.value.trim().parse::<f64>().map_err(|_| parse_err(e, key, "a number"))
}

fn count(e: &Entry, key: &str) -> Result<usize> {
    e.value.trim().parse::<usize>().map_err(|_| parse_err(e, key, "a non-negative integer"))
}

fn flag(e: &Entry, key: &str) -> Result<bool> {
    match e.value.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(parse_err(e, key, "true or false")),
    }
}

fn items(e: &Entry) -> impl Iterator<Item = &str> {
    e.value.split([',', ' ', '\t']).map(str::trim).filter(|s| !s.is_empty())
}

fn nums(e: &Entry, key: &str) -> Result<Vec<f64>> {
    items(e)
        .map(|s| s.parse::<f64>().map_err(|_| parse_err(e, key, "a list of numbers")))
        .collect()
}

fn counts(e: &Entry, key: &str) -> Result<Vec<usize>> {
    items(e)
        .map(|s| s.parse::<usize>().map_err(|_| parse_err(e, key, "a list of integers")))
        .collect()
}

fn pair(e: &Entry, key: &str) -> Result<(f64, f64)> {
    match nums(e, key)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(parse_err(e, key, "two numbers")),
    }
}

/// Every accepted key, for error messages.
pub const KEYS: &[&str] = &[
    "tau", "inv_tau", "v0", "h", "L", "N", "mu",
    "t_skip", "delta", "d_sigma", "d_v0", "d_h", "newton_tol", "newton_max_iter", "nu",
    "abs_tol", "rel_tol", "initial_step", "max_step", "max_steps",
    "step", "max_halvings", "min_sigma", "v0_min", "v0_max", "h_min", "h_max", "stop_after_fold",
    "n_steps", "p", "seed_v0", "seed_time",
    "sim_time", "sample_dt",
    "fold_step", "fold_h_min", "fold_h_max", "fold_n_steps",
    "backward_v0", "dt", "backward_steps", "backward_offset", "update_reference",
    "hopf_h_min", "hopf_h_max", "hopf_points", "modes",
    "p_list", "direct_v0_start", "direct_v0_step", "direct_points", "direct_time", "distance_a", "distance_b",
    "tskip_list", "tskip_ref", "tskip_a", "tskip_b",
    "fb_v0", "fb_sigma", "fb_delta_list", "fb_tskip_list",
    "epsilon", "fast_rate", "c1", "c2", "restriction_mix", "toy_x", "toy_delta", "toy_tskip_list",
    "toy_abs_tol", "toy_rel_tol", "toy_newton_tol",
    "threads", "out",
];

fn apply(c: &mut RunConfig, key: &str, e: &Entry) -> Result<()> {
    match key {
        "tau" => c.model.tau = num(e, key)?,
        "inv_tau" => c.model.tau = 1.0 / num(e, key)?,
        "v0" => c.model.v0 = num(e, key)?,
        "h" => c.model.h = num(e, key)?,
        "L" => c.model.road_length = num(e, key)?,
        "N" => c.model.cars = count(e, key)?,
        "mu" => c.model.mu = num(e, key)?,
        "t_skip" => c.coarse.t_skip = num(e, key)?,
        "delta" => c.coarse.delta = num(e, key)?,
        "d_sigma" => c.coarse.d_sigma = num(e, key)?,
        "d_v0" => c.coarse.d_v0 = num(e, key)?,
        "d_h" => c.coarse.d_h = num(e, key)?,
        "newton_tol" => c.coarse.newton_tol = num(e, key)?,
        "newton_max_iter" => c.coarse.newton_max_iter = count(e, key)?,
        "nu" => c.coarse.nu = num(e, key)?,
        "abs_tol" => c.coarse.integrator.abs_tol = num(e, key)?,
        "rel_tol" => c.coarse.integrator.rel_tol = num(e, key)?,
        "initial_step" => c.coarse.integrator.initial_step = num(e, key)?,
        "max_step" => c.coarse.integrator.max_step = num(e, key)?,
        "max_steps" => c.coarse.integrator.max_steps = count(e, key)?,
        "step" => c.continuation.step = num(e, key)?,
        "max_halvings" => c.continuation.max_halvings = count(e, key)?,
        "min_sigma" => c.continuation.min_sigma = num(e, key)?,
        "v0_min" => c.continuation.v0_range.0 = num(e, key)?,
        "v0_max" => c.continuation.v0_range.1 = num(e, key)?,
        "h_min" => c.continuation.h_range.0 = num(e, key)?,
        "h_max" => c.continuation.h_range.1 = num(e, key)?,
        "stop_after_fold" => c.continuation.stop_after_fold = flag(e, key)?,
        "n_steps" => c.n_steps = count(e, key)?,
        "p" => c.p = num(e, key)?,
        "seed_v0" => c.seed_v0 = Some(pair(e, key)?),
        "seed_time" => c.seed_time = num(e, key)?,
        "sim_time" => c.simulate.sim_time = num(e, key)?,
        "sample_dt" => c.simulate.sample_dt = num(e, key)?,
        "fold_step" => c.fold.step = num(e, key)?,
        "fold_h_min" => c.fold.h_range.0 = num(e, key)?,
        "fold_h_max" => c.fold.h_range.1 = num(e, key)?,
        "fold_n_steps" => c.fold.n_steps = count(e, key)?,
        "backward_v0" => c.backward.v0 = num(e, key)?,
        "dt" => c.backward.dt = num(e, key)?,
        "backward_steps" => c.backward.n_steps = count(e, key)?,
        "backward_offset" => c.backward.offset = num(e, key)?,
        "update_reference" => c.backward.update_reference = flag(e, key)?,
        "hopf_h_min" => c.hopf.h_range.0 = num(e, key)?,
        "hopf_h_max" => c.hopf.h_range.1 = num(e, key)?,
        "hopf_points" => c.hopf.points = count(e, key)?,
        "modes" => c.hopf.modes = counts(e, key)?,
        "p_list" => c.lifting.p_list = nums(e, key)?,
        "direct_v0_start" => c.lifting.direct_v0_start = num(e, key)?,
        "direct_v0_step" => c.lifting.direct_v0_step = num(e, key)?,
        "direct_points" => c.lifting.direct_points = count(e, key)?,
        "direct_time" => c.lifting.direct_time = num(e, key)?,
        "distance_a" => c.lifting.a = num(e, key)?,
        "distance_b" => c.lifting.b = num(e, key)?,
        "tskip_list" => c.tskip.values = nums(e, key)?,
        "tskip_ref" => c.tskip.reference = num(e, key)?,
        "tskip_a" => c.tskip.a = num(e, key)?,
        "tskip_b" => c.tskip.b = num(e, key)?,
        "fb_v0" => c.fberror.v0 = num(e, key)?,
        "fb_sigma" => c.fberror.sigma = num(e, key)?,
        "fb_delta_list" => c.fberror.delta_list = nums(e, key)?,
        "fb_tskip_list" => c.fberror.tskip_list = nums(e, key)?,
        "epsilon" => c.toy.system.epsilon = num(e, key)?,
        "fast_rate" => c.toy.system.fast_rate = num(e, key)?,
        "c1" => c.toy.system.lift_offsets.0 = num(e, key)?,
        "c2" => c.toy.system.lift_offsets.1 = num(e, key)?,
        "restriction_mix" => c.toy.system.restriction_mix = num(e, key)?,
        "toy_x" => c.toy.x = num(e, key)?,
        "toy_delta" => c.toy.delta = num(e, key)?,
        "toy_tskip_list" => c.toy.tskip_list = nums(e, key)?,
        "toy_abs_tol" => c.toy.settings.integrator.abs_tol = num(e, key)?,
        "toy_rel_tol" => c.toy.settings.integrator.rel_tol = num(e, key)?,
        "toy_newton_tol" => c.toy.settings.newton_tol = num(e, key)?,
        "threads" => c.threads = Some(count(e, key)?),
        "out" => c.out = PathBuf::from(e.value.trim()),
        _ => {
            return Err(CliError::Parse {
                line: e.line,
                message: format!("unknown key `{key}`"),
            })
        }
    }
    Ok(())
}

/// Parses config text on top of the defaults. Validation is separate so
/// command-line overrides can be applied first.
pub fn parse_config(text: &str, command: Command) -> Result<RunConfig> {
    let mut c = RunConfig::defaults(command);
    let map = entries(text)?;
    if map.contains_key("tau") && map.contains_key("inv_tau") {
        let e = &map["inv_tau"];
        return Err(CliError::Parse {
            line: e.line,
            message: "`tau` and `inv_tau` are mutually exclusive".into(),
        });
    }
    // Apply in file order so errors point at the first offending line.
    let mut ordered: Vec<(&String, &Entry)> = map.iter().collect();
    ordered.sort_by_key(|(_, e)| e.line);
    for (key, e) in ordered {
        apply(&mut c, key, e)?;
    }
    Ok(c)
}

/// Reads, parses and validates a config file.
pub fn load_config(path: &Path, command: Command) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let c = parse_config(&text, command)?;
    c.validate()?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = parse_config("", Command::Branch).unwrap();
        assert_eq!(c, RunConfig::defaults(Command::Branch));
        assert!((1.0 / c.model.tau - 1.7).abs() < 1e-12);
        assert_eq!((c.model.road_length, c.model.cars, c.model.mu), (60.0, 60, 0.1));
        assert_eq!((c.coarse.t_skip, c.coarse.delta), (300.0, 2000.0));
        assert_eq!((c.continuation.step, c.backward.dt), (0.001, -5000.0));
        c.validate().unwrap();
    }

    #[test]
    fn comma_separated_assignments() {
        let c = parse_config("v0 = 0.91, h = 1.2\np_list = 0.9, 1.0, 1.1 # bias\n", Command::Branch).unwrap();
        assert_eq!(c.model.v0, 0.91);
        assert_eq!(c.model.h, 1.2);
        assert_eq!(c.lifting.p_list, vec![0.9, 1.0, 1.1]);
        assert_eq!(c.coarse.t_skip, 300.0);
    }

    #[test]
    fn single_car_is_rejected_by_key() {
        let c = parse_config("N = 1", Command::Simulate).unwrap();
        match c.validate() {
            Err(CliError::Invalid { key, .. }) => assert_eq!(key, "N"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        for (text, line) in [
            ("v0 = 0.9\n\nh = abc", 3),
            ("# c\nbogus = 1", 2),
            ("v0 = 0.9\nv0 = 0.91", 2),
            ("just words", 1),
            ("h =", 1),
        ] {
            match parse_config(text, Command::Branch) {
                Err(CliError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn envelope_unless_unsafe() {
        let mut c = parse_config("v0 = 1.3", Command::Simulate).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Invalid { ref key, .. }) if key == "v0"));
        c.unsafe_ranges = true;
        c.validate().unwrap();
        let c = parse_config("h = 0.5", Command::Simulate).unwrap();
        assert!(matches!(c.validate(), Err(CliError::Invalid { ref key, .. }) if key == "h"));
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for key in KEYS {
            let value = match *key {
                "seed_v0" => "0.91, 0.9",
                "stop_after_fold" | "update_reference" => "true",
                "out" => "dir",
                "modes" | "p_list" | "tskip_list" | "fb_delta_list" | "fb_tskip_list" | "toy_tskip_list" => "1, 2",
                _ => "2",
            };
            parse_config(&format!("{key} = {value}"), Command::Branch)
                .unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn inverse_tau() {
        let c = parse_config("inv_tau = 2", Command::Simulate).unwrap();
        assert_eq!(c.model.tau, 0.5);
        assert!(parse_config("inv_tau = 2\ntau = 1", Command::Simulate).is_err());
    }
}
