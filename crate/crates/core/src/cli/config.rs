//! Line-based run configuration: `section.key = value`, `#` comments.
//!
//! ```text
//! model.n = 2
//! model.delta = 1.0
//! model.a.1 = 2.0 1.0
//! model.a.2 = 1.0 2.0
//! mesh.cartesian = 8 8 1.0 1.0      # or: mesh.file = path/to/mesh.txt
//! time.t_final = 0.1
//! time.dt = 0.01
//! init.1 = gaussian 0.3 0.5 0.1 1.0
//! init.2 = constant 0.5
//! solver.eps_ladder = 1e-2 1e-4 1e-6 0
//! output.dir = out
//! output.every = 5
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::solver::SolverConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: {message}")]
    Key { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n: usize,
    pub delta: f64,
    pub a: Vec<Vec<f64>>,
    pub pi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshSpec {
    Cartesian { nx: usize, ny: usize, lx: f64, ly: f64 },
    File(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeConfig {
    pub t_final: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitProfile {
    Constant(f64),
    Gaussian { cx: f64, cy: f64, sigma: f64, amplitude: f64 },
    Checkerboard { hi: f64, lo: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Cell-field snapshot cadence in steps; 0 disables snapshots.
    pub every: usize,
    pub vtk: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("output"), every: 0, vtk: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mesh: MeshSpec,
    pub time: TimeConfig,
    pub init: Vec<InitProfile>,
    pub solver: SolverConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// `N_T = round(t_final / dt)`, and whether `t_final` is an exact multiple.
    pub fn num_steps(&self) -> (usize, bool) {
        let ratio = self.time.t_final / self.time.dt;
        let steps = ratio.round().max(1.0) as usize;
        let exact = (steps as f64 * self.time.dt - self.time.t_final).abs() <= 1e-9 * self.time.t_final;
        (steps, exact)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let m = &self.model;
        if m.n < 2 {
            return invalid(format!("model.n = {} must be at least 2", m.n));
        }
        if m.a.len() != m.n {
            return invalid(format!("model.a has {} rows, expected {}", m.a.len(), m.n));
        }
        if let Some(row) = m.a.iter().position(|r| r.len() != m.n) {
            return invalid(format!("model.a.{} has {} entries, expected {}", row + 1, m.a[row].len(), m.n));
        }
        if !(m.delta > 0.0) {
            return invalid(format!("model.delta = {} must be positive", m.delta));
        }
        if m.pi.as_ref().is_some_and(|p| p.len() != m.n) {
            return invalid(format!("model.pi must have {} entries", m.n));
        }
        if let MeshSpec::Cartesian { nx, ny, lx, ly } = self.mesh {
            if nx == 0 || ny == 0 || !(lx > 0.0) || !(ly > 0.0) {
                return invalid("mesh.cartesian needs nx, ny >= 1 and positive lengths".into());
            }
        }
        let t = self.time;
        if !(t.t_final > 0.0 && t.t_final.is_finite()) {
            return invalid(format!("time.t_final = {} must be positive", t.t_final));
        }
        if !(t.dt > 0.0) {
            return invalid(format!("time.dt = {} must be positive", t.dt));
        }
        if t.dt > t.t_final {
            return invalid(format!("time.dt = {} exceeds time.t_final = {}", t.dt, t.t_final));
        }
        if self.init.len() != m.n {
            return invalid(format!("{} init profiles for {} species", self.init.len(), m.n));
        }
        for (i, p) in self.init.iter().enumerate() {
            let ok = match *p {
                InitProfile::Constant(c) => c >= 0.0,
                InitProfile::Gaussian { sigma, amplitude, .. } => sigma > 0.0 && amplitude >= 0.0,
                InitProfile::Checkerboard { hi, lo } => hi >= 0.0 && lo >= 0.0,
            };
            if !ok {
                return invalid(format!("init.{}: values must be nonnegative (sigma positive)", i + 1));
            }
        }
        self.solver.validate().map_err(ConfigError::Invalid)
    }

    /// Serializes to the text format; `parse_config(&c.emit()) == Ok(c)`.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let m = &self.model;
        let _ = writeln!(s, "model.n = {}", m.n);
        let _ = writeln!(s, "model.delta = {:?}", m.delta);
        for (i, row) in m.a.iter().enumerate() {
            let _ = writeln!(s, "model.a.{} = {}", i + 1, list(row));
        }
        if let Some(pi) = &m.pi {
            let _ = writeln!(s, "model.pi = {}", list(pi));
        }
        match &self.mesh {
            MeshSpec::Cartesian { nx, ny, lx, ly } => {
                let _ = writeln!(s, "mesh.cartesian = {nx} {ny} {lx:?} {ly:?}");
            }
            MeshSpec::File(p) => {
                let _ = writeln!(s, "mesh.file = {}", p.display());
            }
        }
        let _ = writeln!(s, "time.t_final = {:?}", self.time.t_final);
        let _ = writeln!(s, "time.dt = {:?}", self.time.dt);
        for (i, p) in self.init.iter().enumerate() {
            let v = match *p {
                InitProfile::Constant(c) => format!("constant {c:?}"),
                InitProfile::Gaussian { cx, cy, sigma, amplitude } => {
                    format!("gaussian {cx:?} {cy:?} {sigma:?} {amplitude:?}")
                }
                InitProfile::Checkerboard { hi, lo } => format!("checkerboard {hi:?} {lo:?}"),
            };
            let _ = writeln!(s, "init.{} = {v}", i + 1);
        }
        let c = &self.solver;
        let _ = writeln!(s, "solver.newton_tol = {:?}", c.newton_tol);
        let _ = writeln!(s, "solver.max_newton_iters = {}", c.max_newton_iters);
        let _ = writeln!(s, "solver.line_search_shrink = {:?}", c.line_search_shrink);
        let _ = writeln!(s, "solver.max_line_search = {}", c.max_line_search);
        let _ = writeln!(s, "solver.eps_ladder = {}", list(&c.eps_ladder));
        let _ = writeln!(s, "solver.fixed_point_damping = {:?}", c.fixed_point_damping);
        let _ = writeln!(s, "solver.max_fp_iters = {}", c.max_fp_iters);
        let _ = writeln!(s, "solver.tol_neg = {:?}", c.tol_neg);
        let _ = writeln!(s, "solver.entropy_slack_factor = {:?}", c.entropy_slack_factor);
        let _ = writeln!(s, "output.dir = {}", self.output.dir.display());
        let _ = writeln!(s, "output.every = {}", self.output.every);
        let _ = writeln!(s, "output.vtk = {}", self.output.vtk);
        s
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_with_overrides(text, &[])
}

/// Parses `text`, then applies `overrides` (each `section.key=value`), which
/// replace keys from the file.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = split_entry(line).ok_or_else(|| ConfigError::Syntax {
            line: idx + 1,
            message: format!("expected `section.key = value`, got `{line}`"),
        })?;
        if entries.insert(key.clone(), value).is_some() {
            return Err(ConfigError::Syntax { line: idx + 1, message: format!("duplicate key `{key}`") });
        }
    }
    for o in overrides {
        let (key, value) = split_entry(o.trim()).ok_or_else(|| ConfigError::Key {
            key: o.clone(),
            message: "override must look like section.key=value".into(),
        })?;
        entries.insert(key, value);
    }
    let config = Entries(entries).into_config()?;
    config.validate()?;
    Ok(config)
}

fn split_entry(line: &str) -> Option<(String, String)> {
    let (k, v) = line.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || !k.contains('.') || v.is_empty() {
        return None;
    }
    Some((k.to_string(), v.to_string()))
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key).ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
        v.parse().map_err(|_| ConfigError::Key { key: key.into(), message: format!("cannot parse `{v}`") })
    }

    fn list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
        v.split_whitespace().map(|t| Self::num(key, t)).collect()
    }

    fn opt_num<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            Some(v) => Self::num(key, &v),
            None => Ok(default),
        }
    }

    fn into_config(mut self) -> Result<RunConfig, ConfigError> {
        let n: usize = Self::num("model.n", &self.required("model.n")?)?;
        let delta = Self::num("model.delta", &self.required("model.delta")?)?;
        let mut a = Vec::new();
        for i in 1..=n {
            let key = format!("model.a.{i}");
            let v = self.required(&key)?;
            a.push(Self::list(&key, &v)?);
        }
        let pi = match self.take("model.pi") {
            Some(v) => Some(Self::list("model.pi", &v)?),
            None => None,
        };

        let mesh = match (self.take("mesh.cartesian"), self.take("mesh.file")) {
            (Some(v), None) => {
                let t: Vec<&str> = v.split_whitespace().collect();
                if t.len() != 4 {
                    return Err(ConfigError::Key {
                        key: "mesh.cartesian".into(),
                        message: "expected `nx ny Lx Ly`".into(),
                    });
                }
                let k = "mesh.cartesian";
                MeshSpec::Cartesian {
                    nx: Self::num(k, t[0])?,
                    ny: Self::num(k, t[1])?,
                    lx: Self::num(k, t[2])?,
                    ly: Self::num(k, t[3])?,
                }
            }
            (None, Some(p)) => MeshSpec::File(PathBuf::from(p)),
            (None, None) => return Err(ConfigError::Missing("mesh.cartesian or mesh.file".into())),
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid("give only one of mesh.cartesian, mesh.file".into()))
            }
        };

        let time = TimeConfig {
            t_final: Self::num("time.t_final", &self.required("time.t_final")?)?,
            dt: Self::num("time.dt", &self.required("time.dt")?)?,
        };

        let mut init = Vec::with_capacity(n);
        for i in 1..=n {
            let key = format!("init.{i}");
            let v = self.required(&key)?;
            init.push(parse_profile(&key, &v)?);
        }

        let d = SolverConfig::default();
        let solver = SolverConfig {
            newton_tol: self.opt_num("solver.newton_tol", d.newton_tol)?,
            max_newton_iters: self.opt_num("solver.max_newton_iters", d.max_newton_iters)?,
            line_search_shrink: self.opt_num("solver.line_search_shrink", d.line_search_shrink)?,
            max_line_search: self.opt_num("solver.max_line_search", d.max_line_search)?,
            eps_ladder: match self.take("solver.eps_ladder") {
                Some(v) => Self::list("solver.eps_ladder", &v)?,
                None => d.eps_ladder,
            },
            fixed_point_damping: self.opt_num("solver.fixed_point_damping", d.fixed_point_damping)?,
            max_fp_iters: self.opt_num("solver.max_fp_iters", d.max_fp_iters)?,
            tol_neg: self.opt_num("solver.tol_neg", d.tol_neg)?,
            entropy_slack_factor: self.opt_num("solver.entropy_slack_factor", d.entropy_slack_factor)?,
        };

        let od = OutputConfig::default();
        let output = OutputConfig {
            dir: self.take("output.dir").map(PathBuf::from).unwrap_or(od.dir),
            every: self.opt_num("output.every", od.every)?,
            vtk: self.opt_num("output.vtk", od.vtk)?,
        };

        if let Some(key) = self.0.keys().next() {
            return Err(ConfigError::Key { key: key.clone(), message: "unknown key".into() });
        }
        Ok(RunConfig { model: ModelConfig { n, delta, a, pi }, mesh, time, init, solver, output })
    }
}

fn parse_profile(key: &str, v: &str) -> Result<InitProfile, ConfigError> {
    let t: Vec<&str> = v.split_whitespace().collect();
    let nums = |want: usize| -> Result<Vec<f64>, ConfigError> {
        if t.len() != want + 1 {
            return Err(ConfigError::Key {
                key: key.into(),
                message: format!("`{}` takes {want} values", t[0]),
            });
        }
        t[1..].iter().map(|x| Entries::num(key, x)).collect()
    };
    match t.first().copied() {
        Some("constant") => Ok(InitProfile::Constant(nums(1)?[0])),
        Some("gaussian") => {
            let v = nums(4)?;
            Ok(InitProfile::Gaussian { cx: v[0], cy: v[1], sigma: v[2], amplitude: v[3] })
        }
        Some("checkerboard") => {
            let v = nums(2)?;
            Ok(InitProfile::Checkerboard { hi: v[0], lo: v[1] })
        }
        _ => Err(ConfigError::Key {
            key: key.into(),
            message: "expected constant, gaussian or checkerboard".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
model.n = 2
model.delta = 1.0
model.a.1 = 2.0 1.0
model.a.2 = 1.0 2.0
mesh.cartesian = 8 8 1.0 1.0
time.t_final = 0.1
time.dt = 0.01
init.1 = constant 1.0
init.2 = constant 1.0
";

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.model.n, 2);
        assert_eq!(c.mesh, MeshSpec::Cartesian { nx: 8, ny: 8, lx: 1.0, ly: 1.0 });
        assert_eq!(c.solver, SolverConfig::default());
        assert_eq!(c.output, OutputConfig::default());
        assert_eq!(c.init, vec![InitProfile::Constant(1.0); 2]);
        assert_eq!(c.num_steps(), (10, true));
    }

    #[test]
    fn zero_dt_is_rejected() {
        let text = MINIMAL.replace("time.dt = 0.01", "time.dt = 0");
        assert!(matches!(parse_config(&text), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn matrix_row_count_must_match_n() {
        let text = MINIMAL.replace("model.n = 2", "model.n = 3").replace("init.2", "init.3 = constant 1\ninit.2");
        assert!(parse_config(&text).is_err());
        let text = MINIMAL.replace("model.a.2 = 1.0 2.0", "model.a.2 = 1.0 2.0\nmodel.a.3 = 1 1");
        assert!(matches!(parse_config(&text), Err(ConfigError::Key { key, .. }) if key == "model.a.3"));
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let text = format!("{MINIMAL}solver.bogus = 1\n");
        assert!(matches!(parse_config(&text), Err(ConfigError::Key { key, .. }) if key == "solver.bogus"));
        let text = format!("{MINIMAL}this is not a pair\n");
        assert!(matches!(parse_config(&text), Err(ConfigError::Syntax { line: 10, .. })));
        let text = MINIMAL.replace("constant 1.0\ninit.2", "gaussian 0.5 0.5 0.1 -1\ninit.2");
        assert!(matches!(parse_config(&text), Err(ConfigError::Invalid(_))));
        let text = format!("{MINIMAL}time.dt = 0.02\n");
        assert!(matches!(parse_config(&text), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn overrides_replace_values() {
        let c = parse_config_with_overrides(
            MINIMAL,
            &["time.dt=0.05".into(), "solver.eps_ladder = 1e-3 0".into(), "output.every=2".into()],
        )
        .unwrap();
        assert_eq!(c.time.dt, 0.05);
        assert_eq!(c.solver.eps_ladder, vec![1e-3, 0.0]);
        assert_eq!(c.output.every, 2);
    }

    #[test]
    fn emit_round_trips() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.model.pi = Some(vec![1.0, 1.0]);
        c.init[0] = InitProfile::Gaussian { cx: 0.3, cy: 0.1 + 0.2, sigma: 0.1, amplitude: 1.0 / 3.0 };
        c.init[1] = InitProfile::Checkerboard { hi: 2.0, lo: 0.0 };
        c.output.vtk = true;
        assert_eq!(parse_config(&c.emit()).unwrap(), c);
        c.mesh = MeshSpec::File(PathBuf::from("meshes/a.txt"));
        assert_eq!(parse_config(&c.emit()).unwrap(), c);
    }

    #[test]
    fn inexact_step_count_rounds() {
        let c = parse_config(&MINIMAL.replace("time.t_final = 0.1", "time.t_final = 0.104")).unwrap();
        assert_eq!(c.num_steps(), (10, false));
    }
}
