//! The `morphrec` command-line tool.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::error::{arg_err, Error, Result};
use crate::eval::{
    clustering_recall, crop_scan, emd_samples, fit_pose_expression, icp_similarity, symmetric_point_to_plane,
    FitOptions, IcpOptions, KeyedEmbedding, LANDMARK_COUNT,
};
use crate::gradcheck::run_gradcheck;
use crate::io::{self, RunManifest};
use crate::model::{load_basis, make_basis, save_basis, BasisSpec, FaceParameters, ModelBasis};
use crate::network::load_embeddings;
use crate::real::Vec3;
use crate::render::{render_mesh, RenderOptions};
use crate::shading::{LightingRig, LightingSampler, PointLight};
use crate::trainer::{
    load_checkpoint, save_checkpoint, train_stage1, train_stage2, ImagePoolSource, LogRow, Pipeline, PoseSampler,
    RealSource, RenderedRealSource, TrainConfig, TrainState,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "morphrec", version, about = "Face model regression, rendering and evaluation")]
pub struct Cli {
    /// Print reports as JSON instead of CSV.
    #[arg(long, global = true)]
    pub json: bool,
    /// Also write the report to this file.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// Write a run manifest (command, seed, input and output hashes).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic morphable model basis.
    MakeBasis(MakeBasisArgs),
    /// Decode coefficients to a mesh.
    Decode(DecodeArgs),
    /// Render a mesh (or decoded coefficients) to PNG.
    Render(RenderArgs),
    /// Train the decoder (stage 1, stage 2 or both).
    Train(TrainArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Finite-difference check of every adjoint; exits 3 on failure.
    Gradcheck(GradcheckArgs),
    /// Re-run the command recorded in a manifest and compare output hashes.
    Replay { manifest: PathBuf },
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let v = parse_list(s)?;
    match v.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
    }
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let v = parse_list(s)?;
    match v.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(format!("expected three comma-separated numbers, got {s:?}")),
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p:?}")))
        .collect()
}

#[derive(Debug, Args)]
pub struct MakeBasisArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub vertices: usize,
    #[arg(long)]
    pub shape_dim: Option<usize>,
    #[arg(long)]
    pub texture_dim: Option<usize>,
    #[arg(long)]
    pub expr_dim: Option<usize>,
    /// Log-uniform range of shape deviations, `lo,hi`.
    #[arg(long, value_parser = parse_pair)]
    pub shape_w: Option<(f64, f64)>,
    #[arg(long, value_parser = parse_pair)]
    pub texture_w: Option<(f64, f64)>,
    #[arg(long, value_parser = parse_pair)]
    pub expr_w: Option<(f64, f64)>,
    /// Mode field frequencies, `first,last`.
    #[arg(long, value_parser = parse_pair)]
    pub frequency: Option<(f64, f64)>,
    #[arg(long)]
    pub radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub basis: PathBuf,
    /// Coefficient CSV; omitted blocks are zero.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// `.obj` or `.ply`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long, conflicts_with_all = ["basis", "params"])]
    pub mesh: Option<PathBuf>,
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[arg(long, requires = "basis")]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 30.0)]
    pub fov: f64,
    /// Draw a random lighting rig from this seed instead of the fixed rig.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write linear values instead of sRGB.
    #[arg(long)]
    pub linear: bool,
    /// Also dump the raw G-buffer (triangle ids, barycentrics, depth).
    #[arg(long)]
    pub gbuffer: Option<PathBuf>,
    /// Also write a PNG view of the G-buffer: id mod 256, bary.x, bary.y.
    #[arg(long)]
    pub dump_gbuffer: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    pub stage: Stage,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory of PNG photos for stage 2; renders of a held-out identity
    /// pool are used when absent.
    #[arg(long)]
    pub photos: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Align a predicted mesh to a scan and report point-to-plane error.
    Geo {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scan: PathBuf,
        #[arg(long, default_value_t = 95.0)]
        radius: f64,
        /// Scan crop centre `x,y,z`; defaults to the scan vertex with largest z.
        #[arg(long, value_parser = parse_vec3)]
        center: Option<[f64; 3]>,
        /// Prediction crop centre; defaults to its vertex with largest z.
        #[arg(long, value_parser = parse_vec3)]
        pred_center: Option<[f64; 3]>,
        /// Also write the aligned prediction.
        #[arg(long)]
        aligned: Option<PathBuf>,
    },
    /// Earth mover's distance between two score columns.
    Emd {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Recall@k of photos retrieved by render identity embeddings.
    Recall {
        #[arg(long)]
        renders: PathBuf,
        #[arg(long)]
        photos: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
    },
    /// Fit pose and expression to 68 image landmarks.
    Fit {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        landmarks: PathBuf,
        /// Model vertex per landmark, one index per line; defaults to an
        /// even spread of front-facing vertices.
        #[arg(long)]
        indices: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        width: usize,
        #[arg(long, default_value_t = 256)]
        height: usize,
        #[arg(long, default_value_t = 30.0)]
        fov: f64,
        /// Coefficients with the fitted expression.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Tabular command output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Report {
    fn new(columns: &[&str]) -> Self {
        Report {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn metrics(pairs: Vec<(&str, Value)>) -> Self {
        let mut r = Report::new(&["metric", "value"]);
        for (k, v) in pairs {
            r.rows.push(vec![json!(k), v]);
        }
        r
    }

    pub fn csv(&self) -> String {
        let cell = |v: &Value| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let mut s = self.columns.join(",") + "\n";
        for r in &self.rows {
            s += &r.iter().map(cell).collect::<Vec<_>>().join(",");
            s.push('\n');
        }
        s
    }

    pub fn json(&self) -> String {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                Value::Object(self.columns.iter().cloned().zip(r.iter().cloned()).collect())
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("report serialises") + "\n"
    }
}

/// What a command read, wrote and printed.
#[derive(Debug, Default)]
pub struct Outcome {
    pub report: Report,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub config: Option<String>,
    pub warnings: Vec<String>,
    /// Exit code for a completed run that nonetheless failed its check.
    pub failure: Option<i32>,
}

pub struct Finished {
    pub stdout: String,
    pub stderr: String,
    pub code: i32,
}

/// Parses `argv` (without the program name), runs it and formats output.
pub fn run(argv: &[String]) -> Finished {
    let full: Vec<String> = std::iter::once("morphrec".to_string()).chain(argv.iter().cloned()).collect();
    let cli = match Cli::try_parse_from(&full) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            return if code == 0 {
                Finished {
                    stdout: text,
                    stderr: String::new(),
                    code,
                }
            } else {
                Finished {
                    stdout: String::new(),
                    stderr: text,
                    code,
                }
            };
        }
    };
    match execute(&cli, argv) {
        Ok(out) => {
            let stdout = if cli.json { out.report.json() } else { out.report.csv() };
            let stderr = out.warnings.iter().map(|w| format!("warning: {w}\n")).collect();
            Finished {
                stdout,
                stderr,
                code: out.failure.unwrap_or(0),
            }
        }
        Err(e) => Finished {
            stdout: String::new(),
            stderr: format!("error: {e}\n"),
            code: e.exit_code(),
        },
    }
}

fn execute(cli: &Cli, argv: &[String]) -> Result<Outcome> {
    let mut out = match &cli.command {
        Command::MakeBasis(a) => make_basis_cmd(a)?,
        Command::Decode(a) => decode_cmd(a)?,
        Command::Render(a) => render_cmd(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(e) => eval_cmd(e)?,
        Command::Gradcheck(a) => gradcheck_cmd(a)?,
        Command::Replay { manifest } => return replay_cmd(manifest),
    };
    if let Some(path) = &cli.report {
        let text = if cli.json { out.report.json() } else { out.report.csv() };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        out.outputs.push(path.clone());
    }
    if let Some(path) = &cli.manifest {
        let mut m = RunManifest::new(argv.to_vec(), out.seed);
        m.config = out.config.clone();
        for p in &out.inputs {
            m.add_input(p)?;
        }
        for p in &out.outputs {
            m.add_output(p)?;
        }
        m.save(path)?;
    }
    Ok(out)
}

fn make_basis_cmd(a: &MakeBasisArgs) -> Result<Outcome> {
    let mut spec = BasisSpec::standard(a.vertices);
    if let Some(d) = a.shape_dim {
        spec.dims.shape = d;
    }
    if let Some(d) = a.texture_dim {
        spec.dims.texture = d;
    }
    if let Some(d) = a.expr_dim {
        spec.dims.expression = d;
    }
    if let Some(r) = a.shape_w {
        spec.shape_w_range = r;
    }
    if let Some(r) = a.texture_w {
        spec.texture_w_range = r;
    }
    if let Some(r) = a.expr_w {
        spec.expr_w_range = r;
    }
    if let Some(f) = a.frequency {
        spec.mode_frequency = f;
    }
    if let Some(r) = a.radius {
        spec.radius_mm = r;
    }
    let basis = make_basis::<f64>(a.seed, &spec)?;
    save_basis(&a.out, &basis)?;
    let d = basis.dims();
    Ok(Outcome {
        report: Report::metrics(vec![
            ("vertices", json!(basis.num_vertices)),
            ("triangles", json!(basis.triangles.len())),
            ("shape_dim", json!(d.shape)),
            ("texture_dim", json!(d.texture)),
            ("expression_dim", json!(d.expression)),
        ]),
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        ..Default::default()
    })
}

fn load_params_or_zero(basis: &ModelBasis<f64>, path: Option<&Path>) -> Result<FaceParameters<f64>> {
    match path {
        Some(p) => io::load_params(p, basis.dims()),
        None => Ok(FaceParameters::zeros(basis.dims())),
    }
}

fn decode_cmd(a: &DecodeArgs) -> Result<Outcome> {
    let basis = load_basis::<f64>(&a.basis)?;
    let p = load_params_or_zero(&basis, a.params.as_deref())?;
    let mesh = basis.decode_mesh(&p)?;
    io::save_mesh(&a.out, &mesh)?;
    let mut inputs = vec![a.basis.clone()];
    inputs.extend(a.params.clone());
    Ok(Outcome {
        report: Report::metrics(vec![
            ("vertices", json!(mesh.positions.len())),
            ("triangles", json!(mesh.triangles.len())),
        ]),
        inputs,
        outputs: vec![a.out.clone()],
        ..Default::default()
    })
}

/// Fixed two-light rig used when no lighting seed is given.
fn studio_rig() -> LightingRig<f64> {
    let mut rig = LightingRig::headlight([0.0, 0.0, 3000.0]);
    rig.lights = [
        PointLight {
            position: [1500.0, 1000.0, 2500.0],
            rgb_intensity: [0.7; 3],
        },
        PointLight {
            position: [-2000.0, 500.0, 2500.0],
            rgb_intensity: [0.35; 3],
        },
    ];
    rig.ambient = [0.05; 3];
    rig
}

fn render_cmd(a: &RenderArgs) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let mut warnings = Vec::new();
    let mesh = match (&a.mesh, &a.basis) {
        (Some(m), _) => {
            inputs.push(m.clone());
            let r = io::load_mesh::<f64>(m)?;
            warnings = r.warnings;
            r.mesh
        }
        (None, Some(b)) => {
            inputs.push(b.clone());
            inputs.extend(a.params.clone());
            let basis = load_basis::<f64>(b)?;
            basis.decode_mesh(&load_params_or_zero(&basis, a.params.as_deref())?)?
        }
        (None, None) => return Err(arg_err!("render needs --mesh or --basis")),
    };
    let pose = PoseSampler {
        fov_deg: a.fov,
        ..Default::default()
    };
    let camera = pose.camera::<f64>(a.yaw, a.pitch, a.width, a.height);
    camera.validate()?;
    let rig = match a.seed {
        Some(s) => LightingSampler::default().sample(&mut ChaCha8Rng::seed_from_u64(s)).rig,
        None => studio_rig(),
    };
    let r = render_mesh(&mesh, &camera, &rig, &RenderOptions::default())?;
    io::save_png(&a.out, &r.image(), a.linear)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(g) = &a.gbuffer {
        io::save_gbuffer(g, &r.gbuffer)?;
        outputs.push(g.clone());
    }
    if let Some(g) = &a.dump_gbuffer {
        io::save_png(g, &io::gbuffer_preview(&r.gbuffer), true)?;
        outputs.push(g.clone());
    }
    Ok(Outcome {
        report: Report::metrics(vec![
            ("covered_pixels", json!(r.gbuffer.covered_pixels())),
            ("coverage", json!(r.gbuffer.coverage_fraction())),
            ("skipped_triangles", json!(r.gbuffer.skipped_triangles)),
            ("normal_fallbacks", json!(r.normal_fallbacks)),
        ]),
        inputs,
        outputs,
        seed: a.seed,
        warnings,
        ..Default::default()
    })
}

fn load_photo_dir(dir: &Path) -> Result<(Vec<PathBuf>, ImagePoolSource<f32>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(arg_err!("no PNG photos in {}", dir.display()));
    }
    let images = paths.iter().map(|p| io::load_png::<f32>(p, false)).collect::<Result<Vec<_>>>()?;
    Ok((paths, ImagePoolSource { images }))
}

fn train_cmd(a: &TrainArgs) -> Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => io::load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let basis = load_basis::<f32>(&a.basis)?;
    let dims = basis.dims();
    let pipeline = Pipeline::new(basis, &cfg)?;
    let mut inputs = vec![a.basis.clone()];
    inputs.extend(a.config.clone());
    let mut state = match &a.resume {
        Some(p) => {
            inputs.push(p.clone());
            let s = load_checkpoint::<f32>(p)?;
            if s.weights.shape() != cfg.decoder_shape(dims) {
                return Err(arg_err!(
                    "checkpoint decoder {:?} does not match configuration {:?}",
                    s.weights.shape(),
                    cfg.decoder_shape(dims)
                ));
            }
            s
        }
        None => TrainState::<f32>::new(&cfg, dims),
    };
    let mut log: Vec<LogRow> = Vec::new();
    if a.stage != Stage::Two {
        log.extend(train_stage1(&mut state, &cfg, &pipeline, cfg.steps_stage1)?);
    }
    if a.stage != Stage::One {
        let source: Box<dyn RealSource<f32>> = match &a.photos {
            Some(dir) => {
                let (paths, pool) = load_photo_dir(dir)?;
                inputs.extend(paths);
                Box::new(pool)
            }
            None => Box::new(RenderedRealSource::new(cfg.real_pool_seed, cfg.real_pool_size, dims)),
        };
        log.extend(train_stage2(&mut state, &cfg, &pipeline, source.as_ref(), cfg.steps_stage2)?);
    }
    save_checkpoint(&a.out, &state)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(p) = &a.log {
        let mut text = LogRow::csv_header().to_string() + "\n";
        for r in &log {
            text += &r.csv_row();
            text.push('\n');
        }
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
        outputs.push(p.clone());
    }
    let mut report = Report::new(&["step", "l_param", "l_id", "l_batch", "l_loop", "total"]);
    if let Some(r) = log.last() {
        report.rows.push(vec![
            json!(r.step),
            json!(r.l_param),
            json!(r.l_id),
            json!(r.l_batch),
            json!(r.l_loop),
            json!(r.total),
        ]);
    }
    Ok(Outcome {
        report,
        inputs,
        outputs,
        seed: Some(cfg.seed),
        config: Some(io::config_to_text(&cfg)),
        ..Default::default()
    })
}

fn eval_cmd(e: &EvalCommand) -> Result<Outcome> {
    match e {
        EvalCommand::Geo {
            pred,
            scan,
            radius,
            center,
            pred_center,
            aligned,
        } => {
            let p = io::load_mesh::<f64>(pred)?;
            let s = io::load_mesh::<f64>(scan)?;
            let mut warnings = p.warnings;
            warnings.extend(s.warnings);
            let tip = |m: &crate::model::Mesh<f64>, given: &Option<[f64; 3]>| -> Result<Vec3<f64>> {
                match given {
                    Some(c) => Ok(*c),
                    None => m
                        .positions
                        .iter()
                        .max_by(|a, b| a[2].total_cmp(&b[2]))
                        .copied()
                        .ok_or_else(|| arg_err!("mesh has no vertices")),
                }
            };
            let cropped = crop_scan(&s.mesh, tip(&s.mesh, center)?, *radius)?;
            let pred_crop = crop_scan(&p.mesh, tip(&p.mesh, pred_center)?, *radius)?;
            let icp = icp_similarity(&pred_crop.positions, &cropped.positions, &IcpOptions::default())?;
            let moved = icp.transform.apply_mesh(&pred_crop);
            let dist = symmetric_point_to_plane(&moved, &cropped)?;
            let mut outputs = Vec::new();
            if let Some(path) = aligned {
                io::save_mesh(path, &moved)?;
                outputs.push(path.clone());
            }
            Ok(Outcome {
                report: Report::metrics(vec![
                    ("point_to_plane_mm", json!(dist)),
                    ("icp_rms_mm", json!(icp.residual)),
                    ("icp_iterations", json!(icp.history.len() - 1)),
                    ("scale", json!(icp.transform.scale)),
                    ("scan_vertices_kept", json!(cropped.positions.len())),
                    ("pred_vertices_kept", json!(pred_crop.positions.len())),
                ]),
                inputs: vec![pred.clone(), scan.clone()],
                outputs,
                warnings,
                ..Default::default()
            })
        }
        EvalCommand::Emd { a, b } => {
            let (sa, sb) = (io::load_scores(a)?, io::load_scores(b)?);
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            Ok(Outcome {
                report: Report::metrics(vec![
                    ("emd", json!(emd_samples(&sa, &sb)?)),
                    ("mean_a", json!(mean(&sa))),
                    ("mean_b", json!(mean(&sb))),
                    ("n_a", json!(sa.len())),
                    ("n_b", json!(sb.len())),
                ]),
                inputs: vec![a.clone(), b.clone()],
                ..Default::default()
            })
        }
        EvalCommand::Recall { renders, photos, k } => {
            let keyed = |p: &Path| -> Result<Vec<KeyedEmbedding<f64>>> {
                Ok(load_embeddings::<f64>(p)?
                    .into_iter()
                    .map(|(key, e)| KeyedEmbedding::from_key(key, e.identity))
                    .collect())
            };
            let recall = clustering_recall(&keyed(renders)?, &keyed(photos)?, k)?;
            let mut report = Report::new(&["k", "recall"]);
            for (kk, r) in k.iter().zip(recall) {
                report.rows.push(vec![json!(kk), json!(r)]);
            }
            Ok(Outcome {
                report,
                inputs: vec![renders.clone(), photos.clone()],
                ..Default::default()
            })
        }
        EvalCommand::Fit {
            basis,
            params,
            landmarks,
            indices,
            width,
            height,
            fov,
            out,
        } => {
            let b = load_basis::<f64>(basis)?;
            let p = load_params_or_zero(&b, params.as_deref())?;
            let targets = io::load_landmarks(landmarks, LANDMARK_COUNT)?;
            let mut inputs = vec![basis.clone(), landmarks.clone()];
            inputs.extend(params.clone());
            let idx = match indices {
                Some(path) => {
                    inputs.push(path.clone());
                    load_indices(path)?
                }
                None => crate::eval::landmarks::default_landmark_indices(&b, LANDMARK_COUNT),
            };
            let camera = PoseSampler {
                fov_deg: *fov,
                ..Default::default()
            }
            .camera::<f64>(0.0, 0.0, *width, *height);
            let fit = fit_pose_expression(&b, &p, &idx, &targets, &camera, &FitOptions::default())?;
            let mut outputs = Vec::new();
            if let Some(path) = out {
                let fitted = FaceParameters {
                    expression: fit.expression.clone(),
                    ..p.clone()
                };
                std::fs::write(path, io::write_params(&fitted)).map_err(|e| Error::io(path, e))?;
                outputs.push(path.clone());
            }
            let v = |a: [f64; 3]| json!(format!("{} {} {}", a[0], a[1], a[2]));
            Ok(Outcome {
                report: Report::metrics(vec![
                    ("residual_px", json!(fit.residual_px)),
                    ("iterations", json!(fit.iterations)),
                    ("axis_angle", v(fit.axis_angle)),
                    ("translation", v(fit.translation)),
                    ("expression_norm", json!(fit.expression.dot(&fit.expression).sqrt())),
                ]),
                inputs,
                outputs,
                ..Default::default()
            })
        }
    }
}

fn load_indices(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(k, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: k + 1,
                message: format!("bad vertex index {:?}", l.trim()),
            })
        })
        .collect()
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<Outcome> {
    let r = run_gradcheck(a.cases, a.seed)?;
    let mut report = Report::new(&["component", "cases", "redraws", "max_rel_error", "tolerance", "passed"]);
    for c in &r.components {
        report.rows.push(vec![
            json!(c.name),
            json!(c.cases),
            json!(c.redraws),
            json!(c.max_rel_error),
            json!(c.tolerance),
            json!(c.passed),
        ]);
    }
    Ok(Outcome {
        report,
        seed: Some(a.seed),
        failure: (!r.passed()).then_some(3),
        ..Default::default()
    })
}

fn replay_cmd(path: &Path) -> Result<Outcome> {
    let m = RunManifest::load(path)?;
    if m.command.first().map(String::as_str) == Some("replay") {
        return Err(Error::Validation("a replay manifest cannot be replayed".into()));
    }
    for (p, h) in &m.inputs {
        let now = io::hash_file(p)?;
        if &now != h {
            return Err(Error::Validation(format!("input {p} changed since the manifest was written")));
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("morphrec".to_string()).chain(m.command.iter().cloned()))
        .map_err(|e| Error::Validation(format!("manifest command does not parse: {e}")))?;
    execute(&cli, &m.command)?;
    let mut report = Report::new(&["output", "identical"]);
    let mut all = true;
    let mut mismatched = BTreeMap::new();
    for (p, h) in &m.outputs {
        let same = &io::hash_file(p)? == h;
        all &= same;
        if !same {
            mismatched.insert(p.clone(), h.clone());
        }
        report.rows.push(vec![json!(p), json!(same)]);
    }
    Ok(Outcome {
        report,
        inputs: vec![path.to_path_buf()],
        seed: m.seed,
        failure: (!all).then_some(2),
        warnings: mismatched.keys().map(|p| format!("{p} differs from the manifest")).collect(),
        ..Default::default()
    })
}
