//! Pipeline configuration: a strict, line-oriented `key = value` format with
//! `[section]` headers and `#` comments.
//!
//! ```text
//! [scene]
//! preset = desk
//! seed = 7
//! ppp = 0.05
//!
//! [pipeline]
//! recon = ipr
//! output_dir = out
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{DataTerm, RegularizerSpec, SolverConfig, SparseModel};
use crate::geometry::{Domain, Vec3};
use crate::ipr::{linear_schedule, IprConfig};
use crate::mart::MartConfig;
use crate::subpixel::SubpixelFit;
use crate::synth::{self, AnalyticFlow, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowSpec {
    /// Wavelengths in voxels; amplitude is tuned to the requested maximum
    /// one-frame displacement.
    TaylorGreen {
        max_displacement: f64,
        wavelengths: [f64; 3],
    },
    Uniform([f64; 3]),
}

/// Declarative scene description; [`SceneSpec::build`] turns it into cameras
/// and an analytic flow.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub domain: [usize; 3],
    pub image: [usize; 2],
    pub yaw: f64,
    pub pitch: f64,
    pub ppp: f64,
    pub sigma: f64,
    pub intensity: [f64; 2],
    pub seed: u64,
    pub noise_sigma: f64,
    pub flow: FlowSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl SceneSpec {
    pub fn preset(preset: Preset, ppp: f64, seed: u64) -> Self {
        let (domain, image, wl) = match preset {
            Preset::Desk => (
                synth::DESK_DOMAIN,
                synth::DESK_IMAGE,
                synth::DESK_WAVELENGTHS,
            ),
            Preset::Full => {
                let w = synth::DESK_WAVELENGTHS;
                (
                    synth::FULL_DOMAIN,
                    synth::FULL_IMAGE,
                    [w[0] * 4.0, w[1] * 4.0, w[2] * 4.0],
                )
            }
        };
        SceneSpec {
            domain,
            image: [image.0, image.1],
            yaw: 35.0,
            pitch: 18.0,
            ppp,
            sigma: 1.0,
            intensity: [0.3, 1.0],
            seed,
            noise_sigma: 0.0,
            flow: FlowSpec::TaylorGreen {
                max_displacement: synth::MAX_DISPLACEMENT,
                wavelengths: wl,
            },
        }
    }

    pub fn build(&self) -> Result<SceneConfig> {
        let [n, m, l] = self.domain;
        let domain = Domain::new(n, m, l)?;
        let cameras =
            synth::camera_rig(&domain, self.yaw, self.pitch, self.image[0], self.image[1])?;
        let flow = match self.flow {
            FlowSpec::TaylorGreen {
                max_displacement,
                wavelengths: w,
            } => {
                if !(max_displacement > 0.0) || w.iter().any(|x| !(*x > 0.0)) {
                    return Err(Error::InvalidArgument(
                        "taylor_green needs positive displacement and wavelengths".into(),
                    ));
                }
                AnalyticFlow::taylor_green_for_max_displacement(
                    max_displacement,
                    Vec3::new(w[0], w[1], w[2]),
                    &domain,
                )
            }
            FlowSpec::Uniform(v) => AnalyticFlow::Uniform(Vec3::new(v[0], v[1], v[2])),
        };
        let config = SceneConfig {
            domain,
            cameras,
            ppp: self.ppp,
            sigma: self.sigma,
            intensity_range: (self.intensity[0], self.intensity[1]),
            rng_seed: self.seed,
            flow,
            noise_sigma: self.noise_sigma,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMethod {
    Mart,
    Ipr,
    /// Ground-truth particles go straight to the flow solver.
    Hacker,
}

impl ReconMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ReconMethod::Mart => "mart",
            ReconMethod::Ipr => "ipr",
            ReconMethod::Hacker => "hacker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mart" => Some(ReconMethod::Mart),
            "ipr" => Some(ReconMethod::Ipr),
            "hacker" => Some(ReconMethod::Hacker),
            _ => None,
        }
    }
}

/// Both reconstruction configurations are kept so a file round-trips
/// whichever method is selected.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scene: SceneSpec,
    pub recon: ReconMethod,
    pub mart: MartConfig,
    pub ipr: IprConfig,
    pub solver: SolverConfig,
    pub regularizer: RegularizerSpec,
    pub output_dir: PathBuf,
}

impl PipelineConfig {
    /// Desk-scale defaults: IPR, sparse SSD, divergence-free regularizer.
    pub fn desk(ppp: f64, seed: u64) -> Self {
        PipelineConfig {
            scene: SceneSpec::preset(Preset::Desk, ppp, seed),
            recon: ReconMethod::Ipr,
            mart: MartConfig::default(),
            ipr: IprConfig::default(),
            solver: SolverConfig::default(),
            regularizer: RegularizerSpec::QrdInf,
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.build()?;
        self.mart.validate()?;
        self.ipr.validate()?;
        self.solver.validate()?;
        if let RegularizerSpec::QrdAlpha(a) = self.regularizer {
            if !(a > 0.0) {
                return Err(Error::InvalidArgument(
                    "regularizer alpha must be > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

const KEYS: &[(&str, &[&str])] = &[
    (
        "scene",
        &[
            "preset",
            "seed",
            "ppp",
            "domain",
            "image",
            "yaw",
            "pitch",
            "sigma",
            "intensity",
            "noise_sigma",
            "flow",
            "max_displacement",
            "wavelengths",
            "velocity",
        ],
    ),
    (
        "mart",
        &[
            "iterations",
            "cone_radius",
            "smoothing",
            "gamma",
            "min_intensity",
            "fit",
        ],
    ),
    (
        "ipr",
        &[
            "eta",
            "sigma",
            "theta",
            "epsilon_schedule",
            "epsilon_first",
            "epsilon_last",
            "outer",
            "inner",
            "tau_inertia",
            "fit",
            "dedup_radius",
            "prune_fraction",
        ],
    ),
    (
        "solver",
        &[
            "data", "window", "lambda", "levels", "factor", "warps", "inner", "probe_h", "stride",
            "model",
        ],
    ),
    ("regularizer", &["kind", "alpha"]),
    ("pipeline", &["recon", "output_dir"]),
];

struct Entry {
    value: String,
    line: usize,
}

#[derive(Default)]
struct Sections(HashMap<&'static str, HashMap<&'static str, Entry>>);

impl Sections {
    fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.0.get_mut(section).and_then(|s| s.remove(key))
    }
}

fn bad(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn lex(text: &str) -> Result<Sections> {
    let mut out = Sections::default();
    let mut section: Option<&'static str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.split('#').next().unwrap_or("").trim();
        if s.is_empty() {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| bad(line, "unterminated section header"))?
                .trim();
            let known = KEYS
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::UnknownKey {
                    key: format!("[{name}]"),
                    line,
                })?;
            section = Some(known.0);
            continue;
        }
        let (key, value) = s
            .split_once('=')
            .ok_or_else(|| bad(line, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        let sec = section.ok_or_else(|| bad(line, "key outside of any section"))?;
        let allowed = KEYS
            .iter()
            .find(|(n, _)| *n == sec)
            .expect("known section")
            .1;
        let key = *allowed
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| Error::UnknownKey {
                key: format!("{sec}.{key}"),
                line,
            })?;
        if value.is_empty() {
            return Err(bad(line, format!("missing value for `{key}`")));
        }
        let map = out.0.entry(sec).or_default();
        if map.contains_key(key) {
            return Err(bad(line, format!("duplicate key `{sec}.{key}`")));
        }
        map.insert(
            key,
            Entry {
                value: value.to_string(),
                line,
            },
        );
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| bad(e.line, format!("cannot parse `{}` as a number", e.value)))
}

fn list<T: std::str::FromStr>(e: &Entry, len: Option<usize>) -> Result<Vec<T>> {
    let v: Vec<T> = e
        .value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| bad(e.line, format!("cannot parse `{t}` as a number")))
        })
        .collect::<Result<_>>()?;
    match len {
        Some(n) if v.len() != n => {
            Err(bad(e.line, format!("expected {n} values, got {}", v.len())))
        }
        _ if v.is_empty() => Err(bad(e.line, "empty list")),
        _ => Ok(v),
    }
}

fn boolean(e: &Entry) -> Result<bool> {
    match e.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(e.line, "expected true or false")),
    }
}

fn fit(e: &Entry) -> Result<SubpixelFit> {
    match e.value.as_str() {
        "gaussian" => Ok(SubpixelFit::Gaussian),
        "parabolic" => Ok(SubpixelFit::Parabolic),
        _ => Err(bad(e.line, "fit must be gaussian or parabolic")),
    }
}

fn fit_name(f: SubpixelFit) -> &'static str {
    match f {
        SubpixelFit::Gaussian => "gaussian",
        SubpixelFit::Parabolic => "parabolic",
    }
}

/// Assign `$target` from `[$sec] $key` with the given converter when present.
macro_rules! set {
    ($secs:expr, $sec:literal, $key:literal, $conv:expr, $target:expr) => {
        if let Some(e) = $secs.take($sec, $key) {
            $target = $conv(&e)?;
        }
    };
}

fn scene_from(secs: &mut Sections) -> Result<SceneSpec> {
    let seed = secs
        .take("scene", "seed")
        .ok_or_else(|| Error::InvalidArgument("missing required key scene.seed".into()))?;
    let seed: u64 = num(&seed)?;
    let preset = match secs.take("scene", "preset") {
        None => Preset::Desk,
        Some(e) => match e.value.as_str() {
            "desk" => Preset::Desk,
            "full" => Preset::Full,
            _ => return Err(bad(e.line, "preset must be desk or full")),
        },
    };
    let mut s = SceneSpec::preset(preset, 0.05, seed);
    set!(secs, "scene", "ppp", num, s.ppp);
    if let Some(e) = secs.take("scene", "domain") {
        let v = list::<usize>(&e, Some(3))?;
        s.domain = [v[0], v[1], v[2]];
    }
    if let Some(e) = secs.take("scene", "image") {
        let v = list::<usize>(&e, Some(2))?;
        s.image = [v[0], v[1]];
    }
    set!(secs, "scene", "yaw", num, s.yaw);
    set!(secs, "scene", "pitch", num, s.pitch);
    set!(secs, "scene", "sigma", num, s.sigma);
    set!(secs, "scene", "noise_sigma", num, s.noise_sigma);
    if let Some(e) = secs.take("scene", "intensity") {
        let v = list::<f64>(&e, Some(2))?;
        s.intensity = [v[0], v[1]];
    }
    let kind = secs.take("scene", "flow");
    let max_d = secs.take("scene", "max_displacement");
    let wl = secs.take("scene", "wavelengths");
    let vel = secs.take("scene", "velocity");
    let kind_name = kind.as_ref().map_or("taylor_green", |e| e.value.as_str());
    let line = kind.as_ref().map_or(0, |e| e.line);
    match kind_name {
        "taylor_green" => {
            if let Some(e) = &vel {
                return Err(bad(e.line, "velocity applies to uniform flow only"));
            }
            if let FlowSpec::TaylorGreen {
                max_displacement,
                wavelengths,
            } = &mut s.flow
            {
                if let Some(e) = &max_d {
                    *max_displacement = num(e)?;
                }
                if let Some(e) = &wl {
                    let v = list::<f64>(e, Some(3))?;
                    *wavelengths = [v[0], v[1], v[2]];
                }
            }
        }
        "uniform" | "zero" => {
            if let Some(e) = max_d.as_ref().or(wl.as_ref()) {
                return Err(bad(
                    e.line,
                    "max_displacement and wavelengths apply to taylor_green only",
                ));
            }
            let v = match (&vel, kind_name) {
                (Some(e), "zero") => return Err(bad(e.line, "zero flow takes no velocity")),
                (Some(e), _) => list::<f64>(e, Some(3))?,
                (None, _) => vec![0.0; 3],
            };
            s.flow = FlowSpec::Uniform([v[0], v[1], v[2]]);
        }
        _ => return Err(bad(line, "flow must be taylor_green, uniform or zero")),
    }
    Ok(s)
}

fn mart_from(secs: &mut Sections) -> Result<MartConfig> {
    let mut m = MartConfig::default();
    set!(secs, "mart", "iterations", num, m.n_iterations);
    set!(secs, "mart", "cone_radius", num, m.cone_radius);
    set!(secs, "mart", "smoothing", boolean, m.smoothing);
    set!(secs, "mart", "gamma", num, m.gamma);
    set!(secs, "mart", "min_intensity", num, m.min_intensity);
    set!(secs, "mart", "fit", fit, m.fit);
    Ok(m)
}

fn ipr_from(secs: &mut Sections) -> Result<IprConfig> {
    let mut c = IprConfig::default();
    set!(secs, "ipr", "eta", num, c.eta);
    set!(secs, "ipr", "sigma", num, c.sigma);
    set!(secs, "ipr", "theta", num, c.theta);
    set!(secs, "ipr", "inner", num, c.n_inner);
    set!(secs, "ipr", "tau_inertia", num, c.tau_inertia);
    set!(secs, "ipr", "fit", fit, c.fit);
    set!(secs, "ipr", "dedup_radius", num, c.dedup_radius);
    set!(secs, "ipr", "prune_fraction", num, c.prune_fraction);
    let first = secs.take("ipr", "epsilon_first");
    let last = secs.take("ipr", "epsilon_last");
    let outer = secs.take("ipr", "outer");
    if let Some(e) = secs.take("ipr", "epsilon_schedule") {
        if let Some(o) = first.iter().chain(&last).chain(&outer).next() {
            return Err(bad(
                o.line,
                "give either epsilon_schedule or epsilon_first/epsilon_last/outer",
            ));
        }
        c.epsilon_schedule = list(&e, None)?;
    } else if first.is_some() || last.is_some() || outer.is_some() {
        let d = &c.epsilon_schedule;
        let f = first.as_ref().map_or(Ok(d[0]), num)?;
        let l = last.as_ref().map_or(Ok(d[d.len() - 1]), num)?;
        let n = outer.as_ref().map_or(Ok(d.len()), num)?;
        c.epsilon_schedule = linear_schedule(f, l, n);
    }
    Ok(c)
}

fn solver_from(secs: &mut Sections) -> Result<SolverConfig> {
    let window = secs.take("solver", "window");
    let data = match secs.take("solver", "data") {
        None => DataTerm::SparseSsd,
        Some(e) => match e.value.as_str() {
            "sparse_ssd" => DataTerm::SparseSsd,
            "sparse_ncc" => DataTerm::SparseNcc,
            "dense_ssd" => DataTerm::DenseSsd {
                window: window.as_ref().map_or(Ok(13), num)?,
            },
            _ => {
                return Err(bad(
                    e.line,
                    "data must be sparse_ssd, sparse_ncc or dense_ssd",
                ))
            }
        },
    };
    if let (Some(e), false) = (&window, matches!(data, DataTerm::DenseSsd { .. })) {
        return Err(bad(e.line, "window applies to dense_ssd only"));
    }
    let mut s = SolverConfig::new(data);
    set!(secs, "solver", "lambda", num, s.lambda);
    set!(secs, "solver", "levels", num, s.pyramid_levels);
    set!(secs, "solver", "factor", num, s.pyramid_factor);
    set!(secs, "solver", "warps", num, s.warps_per_level);
    set!(secs, "solver", "inner", num, s.inner_iterations);
    set!(secs, "solver", "probe_h", num, s.fd_probe_h);
    set!(secs, "solver", "stride", num, s.stride);
    if let Some(e) = secs.take("solver", "model") {
        s.sparse_model = match e.value.as_str() {
            "quadratic" => SparseModel::Quadratic,
            "linear" => SparseModel::Linear,
            _ => return Err(bad(e.line, "model must be quadratic or linear")),
        };
    }
    Ok(s)
}

/// Parses a regularizer name as used on the command line and in configs.
pub fn parse_regularizer(kind: &str, alpha: Option<f64>) -> Result<RegularizerSpec> {
    match (kind, alpha) {
        ("qr", None) => Ok(RegularizerSpec::Qr),
        ("qrd_inf", None) => Ok(RegularizerSpec::QrdInf),
        ("qrd_alpha", Some(a)) if a > 0.0 => Ok(RegularizerSpec::QrdAlpha(a)),
        ("qrd_alpha", _) => Err(Error::InvalidArgument("qrd_alpha needs alpha > 0".into())),
        ("qr" | "qrd_inf", Some(_)) => Err(Error::InvalidArgument(
            "alpha applies to qrd_alpha only".into(),
        )),
        _ => Err(Error::InvalidArgument(format!(
            "unknown regularizer `{kind}`"
        ))),
    }
}

fn regularizer_from(secs: &mut Sections) -> Result<RegularizerSpec> {
    let alpha = secs.take("regularizer", "alpha");
    let a = alpha.as_ref().map(num).transpose()?;
    match secs.take("regularizer", "kind") {
        None if alpha.is_none() => Ok(RegularizerSpec::QrdInf),
        None => parse_regularizer("qrd_inf", a)
            .map_err(|e| bad(alpha.as_ref().map_or(0, |x| x.line), e.to_string())),
        Some(e) => parse_regularizer(&e.value, a).map_err(|err| bad(e.line, err.to_string())),
    }
}

pub fn parse_config_str(text: &str) -> Result<PipelineConfig> {
    let mut secs = lex(text)?;
    let scene = scene_from(&mut secs)?;
    let mart = mart_from(&mut secs)?;
    let ipr = ipr_from(&mut secs)?;
    let solver = solver_from(&mut secs)?;
    let regularizer = regularizer_from(&mut secs)?;
    let mut recon = ReconMethod::Ipr;
    if let Some(e) = secs.take("pipeline", "recon") {
        recon = ReconMethod::parse(&e.value)
            .ok_or_else(|| bad(e.line, "recon must be mart, ipr or hacker"))?;
    }
    let output_dir = secs
        .take("pipeline", "output_dir")
        .map_or_else(|| PathBuf::from("out"), |e| PathBuf::from(e.value));
    debug_assert!(
        secs.0.values().all(|m| m.is_empty()),
        "every known key is consumed"
    );
    let cfg = PipelineConfig {
        scene,
        recon,
        mart,
        ipr,
        solver,
        regularizer,
        output_dir,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Every setting written out explicitly; parsing the result gives back an
/// equal config.
pub fn serialize_config(c: &PipelineConfig) -> String {
    let mut o = String::new();
    let s = &c.scene;
    let _ = writeln!(o, "[scene]");
    let _ = writeln!(o, "seed = {}", s.seed);
    let _ = writeln!(o, "ppp = {}", s.ppp);
    let _ = writeln!(o, "domain = {}", join(&s.domain));
    let _ = writeln!(o, "image = {}", join(&s.image));
    let _ = writeln!(o, "yaw = {}\npitch = {}", s.yaw, s.pitch);
    let _ = writeln!(o, "sigma = {}", s.sigma);
    let _ = writeln!(o, "intensity = {}", join(&s.intensity));
    let _ = writeln!(o, "noise_sigma = {}", s.noise_sigma);
    match s.flow {
        FlowSpec::TaylorGreen {
            max_displacement,
            wavelengths,
        } => {
            let _ = writeln!(o, "flow = taylor_green");
            let _ = writeln!(o, "max_displacement = {max_displacement}");
            let _ = writeln!(o, "wavelengths = {}", join(&wavelengths));
        }
        FlowSpec::Uniform(v) => {
            let _ = writeln!(o, "flow = uniform\nvelocity = {}", join(&v));
        }
    }

    let m = &c.mart;
    let _ = writeln!(o, "\n[mart]");
    let _ = writeln!(
        o,
        "iterations = {}\ncone_radius = {}",
        m.n_iterations, m.cone_radius
    );
    let _ = writeln!(o, "smoothing = {}\ngamma = {}", m.smoothing, m.gamma);
    let _ = writeln!(
        o,
        "min_intensity = {}\nfit = {}",
        m.min_intensity,
        fit_name(m.fit)
    );

    let p = &c.ipr;
    let _ = writeln!(o, "\n[ipr]");
    let _ = writeln!(
        o,
        "eta = {}\nsigma = {}\ntheta = {}",
        p.eta, p.sigma, p.theta
    );
    let e = &p.epsilon_schedule;
    match (e.first(), e.last()) {
        (Some(&f), Some(&l)) if linear_schedule(f, l, e.len()) == *e => {
            let _ = writeln!(
                o,
                "epsilon_first = {f}\nepsilon_last = {l}\nouter = {}",
                e.len()
            );
        }
        _ => {
            let _ = writeln!(o, "epsilon_schedule = {}", join(e));
        }
    }
    let _ = writeln!(o, "inner = {}\ntau_inertia = {}", p.n_inner, p.tau_inertia);
    let _ = writeln!(
        o,
        "fit = {}\ndedup_radius = {}",
        fit_name(p.fit),
        p.dedup_radius
    );
    let _ = writeln!(o, "prune_fraction = {}", p.prune_fraction);

    let v = &c.solver;
    let _ = writeln!(o, "\n[solver]");
    let _ = writeln!(o, "data = {}", v.data_term.name());
    if let DataTerm::DenseSsd { window } = v.data_term {
        let _ = writeln!(o, "window = {window}");
    }
    let _ = writeln!(o, "lambda = {}\nlevels = {}", v.lambda, v.pyramid_levels);
    let _ = writeln!(
        o,
        "factor = {}\nwarps = {}",
        v.pyramid_factor, v.warps_per_level
    );
    let _ = writeln!(
        o,
        "inner = {}\nprobe_h = {}\nstride = {}",
        v.inner_iterations, v.fd_probe_h, v.stride
    );
    let model = match v.sparse_model {
        SparseModel::Quadratic => "quadratic",
        SparseModel::Linear => "linear",
    };
    let _ = writeln!(o, "model = {model}");

    let _ = writeln!(o, "\n[regularizer]");
    match c.regularizer {
        RegularizerSpec::Qr => o.push_str("kind = qr\n"),
        RegularizerSpec::QrdInf => o.push_str("kind = qrd_inf\n"),
        RegularizerSpec::QrdAlpha(a) => {
            let _ = writeln!(o, "kind = qrd_alpha\nalpha = {a}");
        }
    }

    let _ = writeln!(o, "\n[pipeline]");
    let _ = writeln!(o, "recon = {}", c.recon.name());
    let _ = writeln!(o, "output_dir = {}", c.output_dir.display());
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_fills_defaults() {
        let c = parse_config_str("[scene]\nseed = 3\n").unwrap();
        assert_eq!(c, PipelineConfig::desk(0.05, 3));
    }

    #[test]
    fn seed_is_mandatory() {
        let e = parse_config_str("[scene]\nppp = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("scene.seed"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn misspelled_key_names_key_and_line() {
        let text = "# desk run\n[scene]\nseed = 1\n\n[solver]\nlamda = 3\n";
        match parse_config_str(text) {
            Err(Error::UnknownKey { key, line }) => {
                assert_eq!(key, "solver.lamda");
                assert_eq!(line, 6);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_config_str("[scene]\nseed = 1\n[solvr]\n"),
            Err(Error::UnknownKey { line: 3, .. })
        ));
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let cases = [
            ("[scene]\nseed = 1\nppp 0.1\n", 3),
            ("seed = 1\n", 1),
            ("[scene]\nseed = 1\nseed = 2\n", 3),
            ("[scene]\nseed = x\n", 2),
            (
                "[scene]\nseed = 1\n[solver]\ndata = dense_ssd\nwindow = 1 3\n",
                5,
            ),
            (
                "[scene]\nseed = 1\n[ipr]\nepsilon_schedule = 1, 2\nouter = 5\n",
                5,
            ),
            ("[scene]\nseed = 1\nflow = swirl\n", 3),
        ];
        for (text, line) in cases {
            match parse_config_str(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trip() {
        let text = "[scene]\npreset = desk\nseed = 11\nppp = 0.1\nflow = uniform\nvelocity = 1.5, 0, 0\n\
                    [ipr]\nepsilon_schedule = 0.8 1.1 1.7\n[solver]\ndata = dense_ssd\nwindow = 9\n\
                    [regularizer]\nkind = qrd_alpha\nalpha = 2.5\n[pipeline]\nrecon = hacker\noutput_dir = runs/a\n";
        let c = parse_config_str(text).unwrap();
        assert_eq!(c.scene.flow, FlowSpec::Uniform([1.5, 0.0, 0.0]));
        assert_eq!(c.solver.data_term, DataTerm::DenseSsd { window: 9 });
        assert_eq!(c.regularizer, RegularizerSpec::QrdAlpha(2.5));
        let again = parse_config_str(&serialize_config(&c)).unwrap();
        assert_eq!(again, c);
        let d = PipelineConfig::desk(0.05, 1);
        assert_eq!(parse_config_str(&serialize_config(&d)).unwrap(), d);
    }

    #[test]
    fn full_preset_and_schedule_keys() {
        let c = parse_config_str(
            "[scene]\npreset = full\nseed = 2\n[ipr]\nouter = 5\nepsilon_last = 1.6\n",
        )
        .unwrap();
        assert_eq!(c.scene.domain, [1024, 512, 352]);
        assert_eq!(c.ipr.epsilon_schedule, linear_schedule(0.8, 1.6, 5));
        let z = parse_config_str("[scene]\nseed = 2\nflow = zero\n").unwrap();
        assert_eq!(z.scene.flow, FlowSpec::Uniform([0.0; 3]));
    }
}
