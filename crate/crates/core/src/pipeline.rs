//! End-to-end runs: synth, reconstruction of both frames, flow and
//! evaluation. Every stage reads its inputs from files written by the
//! previous one, so a run can resume from any stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{serialize_config, PipelineConfig, ReconMethod};
use crate::error::{Error, Result};
use crate::eval::{aee, match_particles, ReconStats};
use crate::flow::{divergence, render_volume, solve_flow_grid, DataTerm, FlowField, FlowInput};
use crate::geometry::{Domain, Image, ParticleSet, Vec3};
use crate::io;
use crate::ipr::ipr_reconstruct_logged;
use crate::mart::{build_ray_weights, mart_particles};
use crate::synth::{self, AnalyticFlow};

/// Match radius for ghost/undetected counting, in voxels.
pub const MATCH_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Recon,
    Flow,
    Eval,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Recon => "recon",
            Stage::Flow => "flow",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        [Stage::Synth, Stage::Recon, Stage::Flow, Stage::Eval]
            .into_iter()
            .find(|st| st.name() == s)
    }
}

/// Where a run keeps its files. The scene directory may be shared between
/// runs that differ only after synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub scene: PathBuf,
    pub run: PathBuf,
}

impl Layout {
    pub fn new(output_dir: &Path) -> Self {
        Layout {
            scene: output_dir.join("scene"),
            run: output_dir.to_path_buf(),
        }
    }

    pub fn recon(&self, frame: usize) -> PathBuf {
        self.run.join(format!("recon_t{frame}.csv"))
    }

    pub fn recon_log(&self, frame: usize) -> PathBuf {
        self.run.join(format!("recon_log_t{frame}.json"))
    }

    pub fn truth(&self, frame: usize) -> PathBuf {
        self.scene.join(format!("particles_t{frame}.csv"))
    }

    pub fn flow(&self) -> PathBuf {
        self.run.join("flow.fld")
    }

    pub fn summary(&self) -> PathBuf {
        self.run.join("summary.json")
    }

    fn timings(&self) -> PathBuf {
        self.run.join("timings.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub domain: [usize; 3],
    pub ppp: f64,
    pub seed: u64,
    pub particles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconSummary {
    pub t0: ReconStats,
    pub t1: ReconStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub data: String,
    pub regularizer: String,
    pub lambda: f64,
    pub stride: usize,
    pub grid: [usize; 3],
    /// Grid flow upsampled to every voxel, against the analytic field.
    pub aee: f64,
    /// At the grid points only.
    pub aee_grid: f64,
    pub rms_divergence: f64,
}

/// Seconds per stage; `None` for stages not run in this invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub synth: Option<f64>,
    pub recon_t0: Option<f64>,
    pub recon_t1: Option<f64>,
    pub flow: Option<f64>,
    pub eval: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub method: String,
    pub scene: SceneSummary,
    pub recon: ReconSummary,
    pub flow: FlowSummary,
    pub timings_s: Timings,
}

pub const SUMMARY_SCHEMA_ID: &str = "pivflow-summary/1";

/// `(path, type)` for every field of `summary.json`. Types: `string`,
/// `number`, `count` (nonnegative integer), `fraction` (number >= 0),
/// `dims` (three positive integers), `seconds` (number >= 0 or null).
pub const SUMMARY_SCHEMA: &[(&str, &str)] = &[
    ("schema", "string"),
    ("method", "string"),
    ("scene.domain", "dims"),
    ("scene.ppp", "fraction"),
    ("scene.seed", "count"),
    ("scene.particles", "count"),
    ("recon.t0.truth_count", "count"),
    ("recon.t0.reconstructed_count", "count"),
    ("recon.t0.undetected", "count"),
    ("recon.t0.undetected_fraction", "fraction"),
    ("recon.t0.ghosts", "count"),
    ("recon.t0.ghost_fraction", "fraction"),
    ("recon.t0.avg_position_error", "fraction"),
    ("recon.t1.truth_count", "count"),
    ("recon.t1.reconstructed_count", "count"),
    ("recon.t1.undetected", "count"),
    ("recon.t1.undetected_fraction", "fraction"),
    ("recon.t1.ghosts", "count"),
    ("recon.t1.ghost_fraction", "fraction"),
    ("recon.t1.avg_position_error", "fraction"),
    ("flow.data", "string"),
    ("flow.regularizer", "string"),
    ("flow.lambda", "fraction"),
    ("flow.stride", "count"),
    ("flow.grid", "dims"),
    ("flow.aee", "fraction"),
    ("flow.aee_grid", "fraction"),
    ("flow.rms_divergence", "fraction"),
    ("timings_s.synth", "seconds"),
    ("timings_s.recon_t0", "seconds"),
    ("timings_s.recon_t1", "seconds"),
    ("timings_s.flow", "seconds"),
    ("timings_s.eval", "seconds"),
];

fn schema_error(msg: String) -> Error {
    Error::Format {
        path: PathBuf::from("summary.json"),
        msg,
    }
}

/// Checks a parsed summary against [`SUMMARY_SCHEMA`], including that no
/// undocumented fields are present.
pub fn validate_summary(v: &Value) -> Result<()> {
    for (path, ty) in SUMMARY_SCHEMA {
        let mut node = v;
        for part in path.split('.') {
            node = node
                .get(part)
                .ok_or_else(|| schema_error(format!("missing field `{path}`")))?;
        }
        let ok = match *ty {
            "string" => node.is_string(),
            "number" => node.is_number(),
            "count" => node.is_u64(),
            "fraction" => node.as_f64().is_some_and(|x| x >= 0.0),
            "seconds" => node.is_null() || node.as_f64().is_some_and(|x| x >= 0.0),
            "dims" => node.as_array().is_some_and(|a| {
                a.len() == 3 && a.iter().all(|x| x.as_u64().is_some_and(|n| n > 0))
            }),
            other => unreachable!("schema type {other}"),
        };
        if !ok {
            return Err(schema_error(format!("field `{path}` is not a valid {ty}")));
        }
    }
    if v.get("schema").and_then(Value::as_str) != Some(SUMMARY_SCHEMA_ID) {
        return Err(schema_error(format!(
            "schema must be `{SUMMARY_SCHEMA_ID}`"
        )));
    }
    fn leaves(v: &Value, prefix: String, out: &mut Vec<String>) {
        match v.as_object() {
            Some(map) => {
                for (k, x) in map {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    leaves(x, p, out);
                }
            }
            None => out.push(prefix),
        }
    }
    let mut found = Vec::new();
    leaves(v, String::new(), &mut found);
    if let Some(extra) = found
        .iter()
        .find(|p| !SUMMARY_SCHEMA.iter().any(|(s, _)| s == p))
    {
        return Err(schema_error(format!("undocumented field `{extra}`")));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn record_time(layout: &Layout, key: &str, seconds: f64) -> Result<()> {
    let path = layout.timings();
    let mut map: BTreeMap<String, f64> = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?,
        Err(_) => BTreeMap::new(),
    };
    map.insert(key.to_string(), seconds);
    write_json(&path, &map)
}

fn read_images(layout: &Layout, frame: usize, cameras: usize) -> Result<Vec<Image>> {
    (0..cameras)
        .map(|k| io::read_pfm(&synth::image_path(&layout.scene, frame, k)))
        .collect()
}

fn stage_synth(config: &PipelineConfig, layout: &Layout) -> Result<()> {
    let t = Instant::now();
    let scene_cfg = config.scene.build()?;
    let scene = synth::generate_scene(&scene_cfg)?;
    synth::write_scene(&scene, &layout.scene, config.solver.stride)?;
    log::info!(
        "synth: {} particles written to {}",
        scene.particles_t0.len(),
        layout.scene.display()
    );
    record_time(layout, "synth", t.elapsed().as_secs_f64())
}

fn stage_recon(config: &PipelineConfig, layout: &Layout) -> Result<()> {
    let cameras = io::read_cameras(&layout.scene.join("cameras.txt"))?;
    let domain = synth::read_domain(&layout.scene.join("domain.txt"))?;
    let weights = match config.recon {
        ReconMethod::Mart => Some(build_ray_weights(
            &cameras,
            &domain,
            config.mart.cone_radius,
        )?),
        _ => None,
    };
    for frame in 0..2 {
        let t = Instant::now();
        let set = match config.recon {
            ReconMethod::Hacker => io::read_particles(&layout.truth(frame), frame as i64)?,
            ReconMethod::Mart => {
                let images = read_images(layout, frame, cameras.len())?;
                mart_particles(&images, weights.as_ref().expect("weights"), &config.mart)?.1
            }
            ReconMethod::Ipr => {
                let images = read_images(layout, frame, cameras.len())?;
                let (set, logs) = ipr_reconstruct_logged(
                    &images,
                    &cameras,
                    &domain,
                    &config.ipr,
                    &mut |_, _| {},
                )?;
                write_json(&layout.recon_log(frame), &logs)?;
                set
            }
        };
        io::write_particles(&layout.recon(frame), &set)?;
        log::info!(
            "recon t{frame}: {} particles ({})",
            set.len(),
            config.recon.name()
        );
        record_time(
            layout,
            &format!("recon_t{frame}"),
            t.elapsed().as_secs_f64(),
        )?;
    }
    Ok(())
}

/// Solve the flow between two particle sets as configured. The dense data
/// term works on volumes rendered from the particles.
pub fn flow_between(
    t0: &ParticleSet,
    t1: &ParticleSet,
    domain: &Domain,
    config: &PipelineConfig,
) -> Result<FlowField> {
    let field = if let DataTerm::DenseSsd { .. } = config.solver.data_term {
        let u0 = render_volume(t0, domain.extents, config.scene.sigma);
        let u1 = render_volume(t1, domain.extents, config.scene.sigma);
        solve_flow_grid(
            FlowInput::Volumes { u0: &u0, u1: &u1 },
            domain,
            &config.solver,
            &config.regularizer,
        )?
        .0
    } else {
        solve_flow_grid(
            FlowInput::Particles { t0, t1 },
            domain,
            &config.solver,
            &config.regularizer,
        )?
        .0
    };
    Ok(field)
}

fn stage_flow(config: &PipelineConfig, layout: &Layout) -> Result<()> {
    let t = Instant::now();
    let domain = synth::read_domain(&layout.scene.join("domain.txt"))?;
    let t0 = io::read_particles(&layout.recon(0), 0)?;
    let t1 = io::read_particles(&layout.recon(1), 1)?;
    let field = flow_between(&t0, &t1, &domain, config)?;
    io::write_flow(&layout.flow(), &field)?;
    log::info!("flow: {:?} grid, stride {}", field.dims, field.stride);
    record_time(layout, "flow", t.elapsed().as_secs_f64())
}

/// Mean endpoint error of the grid flow interpolated to every voxel center
/// of `extents`, against the one-frame displacement of `truth`. Streams
/// over voxels instead of materializing either full-resolution field.
pub fn aee_full_resolution(
    estimated: &FlowField,
    truth: &AnalyticFlow,
    extents: [usize; 3],
) -> f64 {
    let mut sum = 0.0;
    for k in 0..extents[2] {
        for j in 0..extents[1] {
            for i in 0..extents[0] {
                let p = Vec3::new(i as f64, j as f64, k as f64);
                let gt = synth::advect_point(&p, truth, 1) - p;
                sum += (estimated.sample(&p) - gt).norm();
            }
        }
    }
    sum / extents.iter().product::<usize>().max(1) as f64
}

pub fn rms_divergence(field: &FlowField) -> f64 {
    let d = divergence(field.dims, &field.vectors);
    if d.is_empty() {
        return 0.0;
    }
    (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt()
}

fn stage_eval(config: &PipelineConfig, layout: &Layout) -> Result<Summary> {
    let t = Instant::now();
    let scene_cfg = config.scene.build()?;
    let domain = synth::read_domain(&layout.scene.join("domain.txt"))?;
    let field = io::read_flow(&layout.flow())?;
    let gt_grid = io::read_flow(&layout.scene.join("gt_flow.fld"))?;
    if gt_grid.stride != field.stride {
        return Err(Error::DimensionMismatch(format!(
            "flow stride {} vs ground-truth stride {}",
            field.stride, gt_grid.stride
        )));
    }
    let mut stats = Vec::new();
    for frame in 0..2 {
        let truth = io::read_particles(&layout.truth(frame), frame as i64)?;
        let rec = io::read_particles(&layout.recon(frame), frame as i64)?;
        stats.push(match_particles(&rec, &truth, MATCH_RADIUS));
    }
    let flow = FlowSummary {
        data: config.solver.data_term.name().to_string(),
        regularizer: config.regularizer.name(),
        lambda: config.solver.lambda,
        stride: field.stride,
        grid: field.dims,
        aee: aee_full_resolution(&field, &scene_cfg.flow, domain.extents),
        aee_grid: aee(&field, &gt_grid)?,
        rms_divergence: rms_divergence(&field),
    };
    record_time(layout, "eval", t.elapsed().as_secs_f64())?;
    let times: BTreeMap<String, f64> = {
        let path = layout.timings();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?
    };
    let get = |k: &str| times.get(k).copied();
    let summary = Summary {
        schema: SUMMARY_SCHEMA_ID.to_string(),
        method: config.recon.name().to_string(),
        scene: SceneSummary {
            domain: domain.extents,
            ppp: config.scene.ppp,
            seed: config.scene.seed,
            particles: stats[0].truth_count,
        },
        recon: ReconSummary {
            t0: stats[0],
            t1: stats[1],
        },
        flow,
        timings_s: Timings {
            synth: get("synth"),
            recon_t0: get("recon_t0"),
            recon_t1: get("recon_t1"),
            flow: get("flow"),
            eval: get("eval"),
        },
    };
    write_json(&layout.summary(), &summary)?;
    log::info!("eval: AEE {:.4} vox", summary.flow.aee);
    Ok(summary)
}

/// Run the stages from `from` on, in order. Errors carry the stage name.
pub fn run_stages(config: &PipelineConfig, layout: &Layout, from: Stage) -> Result<Summary> {
    config.validate()?;
    for dir in [&layout.run, &layout.scene] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.as_path(), e))?;
    }
    let cfg_path = layout.run.join("config.txt");
    std::fs::write(&cfg_path, serialize_config(config)).map_err(|e| Error::io(&cfg_path, e))?;
    if from == Stage::Synth {
        // a fresh run must not report stale timings
        let _ = std::fs::remove_file(layout.timings());
    }
    let wrap = |st: Stage| move |e: Error| e.in_stage(st.name());
    if from <= Stage::Synth {
        stage_synth(config, layout).map_err(wrap(Stage::Synth))?;
    }
    if from <= Stage::Recon {
        stage_recon(config, layout).map_err(wrap(Stage::Recon))?;
    }
    if from <= Stage::Flow {
        stage_flow(config, layout).map_err(wrap(Stage::Flow))?;
    }
    stage_eval(config, layout).map_err(wrap(Stage::Eval))
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<Summary> {
    run_stages(config, &Layout::new(&config.output_dir), Stage::Synth)
}

pub const TABLE2_DENSITIES: [f64; 2] = [0.05, 0.10];
pub const TABLE2_METHODS: [ReconMethod; 3] =
    [ReconMethod::Mart, ReconMethod::Ipr, ReconMethod::Hacker];

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: ReconMethod,
    pub ppp: f64,
    pub summary: Summary,
}

/// Every method at both desk densities on shared scenes, under
/// `base.output_dir/ppp_<d>/<method>`.
pub fn run_table2_desk(base: &PipelineConfig) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for ppp in TABLE2_DENSITIES {
        let mut cfg = base.clone();
        cfg.scene.ppp = ppp;
        let dir = base.output_dir.join(format!("ppp_{ppp}"));
        let shared = Layout::new(&dir);
        std::fs::create_dir_all(&shared.scene).map_err(|e| Error::io(&shared.scene, e))?;
        stage_synth(&cfg, &shared).map_err(|e| e.in_stage("synth"))?;
        for method in TABLE2_METHODS {
            cfg.recon = method;
            let layout = Layout {
                scene: shared.scene.clone(),
                run: dir.join(method.name()),
            };
            log::info!("table run: {} at ppp {ppp}", method.name());
            let summary = run_stages(&cfg, &layout, Stage::Recon)?;
            rows.push(TableRow {
                method,
                ppp,
                summary,
            });
        }
    }
    Ok(rows)
}

/// Markdown table with the reconstruction columns of the first frame and
/// the flow error.
pub fn table2_markdown(rows: &[TableRow]) -> String {
    let mut s = String::from(
        "| Method | ppp | Undetected particles | Ghost particles | Avg. position error | AEE |\n",
    );
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let st = &r.summary.recon.t0;
        let _ = writeln!(
            s,
            "| {} | {} | {:.2}% | {:.2}% | {:.4} | {:.4} |",
            r.method.name().to_uppercase(),
            r.ppp,
            100.0 * st.undetected_fraction,
            100.0 * st.ghost_fraction,
            st.avg_position_error,
            r.summary.flow.aee
        );
    }
    s
}
