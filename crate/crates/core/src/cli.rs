//! Command-line front end: `gen`, `train`, `eval`, `gradcheck`, `heatmap`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::render_table;
use crate::network::Model;
use crate::pipeline::{
    evaluate_samples, generate_scene_files, gradcheck_setup, load_model, load_samples, module_of, relevance_csv,
    relevance_heatmap, relevance_scores, run_gradcheck, save_model, train,
};
use crate::scene::save_scene_file;

#[derive(Debug, Parser)]
#[command(name = "egoground", version, about = "Ego-centric 3D detection and grounding on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Settings that override the config file. They apply to `gen`, `train` and
/// `gradcheck`; `eval` and `heatmap` use the configuration stored in the checkpoint.
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    pub steps: Option<usize>,
    #[arg(long, global = true, value_name = "F", allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub disable_rag: bool,
    #[arg(long, global = true)]
    pub disable_qim: bool,
    #[arg(long, global = true, value_name = "N")]
    pub k_det: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    pub k_grd: Option<usize>,
    #[arg(long, global = true, value_name = "F", allow_negative_numbers = true)]
    pub lambda_spatial: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes with referring instructions.
    Gen {
        /// Output directory; created if its parent exists.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Number of scenes (overrides `num_scenes`).
        #[arg(long, value_name = "N")]
        count: Option<usize>,
    },
    /// Train on scene files (or directories of them) and write a checkpoint.
    Train {
        #[arg(required = true, value_name = "SCENES")]
        scenes: Vec<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; AP@25 and AP@50 are always reported.
    Eval {
        #[arg(required = true, value_name = "SCENES")]
        scenes: Vec<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Extra IoU threshold(s).
        #[arg(long, value_name = "F")]
        iou: Vec<f64>,
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every learnable module on a tiny scene.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Project per-voxel relevance onto a view: PPM image plus CSV.
    Heatmap {
        #[arg(value_name = "SCENE")]
        scene: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value_t = 0)]
        instruction: usize,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
}

impl Overrides {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.train.steps = n;
        }
        if let Some(lr) = self.lr {
            cfg.optimizer.lr = lr;
        }
        if self.disable_rag {
            cfg.model.use_rag = false;
        }
        if self.disable_qim {
            cfg.model.use_qim = false;
        }
        if let Some(k) = self.k_det {
            cfg.model.k_det = k;
        }
        if let Some(k) = self.k_grd {
            cfg.model.k_grd = k;
        }
        if let Some(l) = self.lambda_spatial {
            cfg.weights.spatial = l;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Uses `dir` if it is a directory, creates it if only its parent exists.
fn output_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        return Ok(());
    }
    fs::create_dir(dir).map_err(|e| Error::io(dir, e))
}

/// Scene files named on the command line; directories contribute their
/// `*.json` entries in name order.
pub fn scene_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Empty("no scene files given".into()));
    }
    Ok(out)
}

pub fn run(cli: Cli, stdout: &mut impl Write) -> Result<()> {
    let mut say = |s: String| -> Result<()> { writeln!(stdout, "{s}").map_err(|e| Error::io("<stdout>", e)) };
    match cli.command {
        Command::Gen { out, count } => {
            let mut cfg = cli.overrides.resolve()?;
            if let Some(n) = count {
                cfg.num_scenes = n;
            }
            output_dir(&out)?;
            let files = generate_scene_files(&cfg)?;
            for (name, f) in &files {
                save_scene_file(&out.join(format!("{name}.json")), f)?;
            }
            write(&out.join("config.toml"), cfg.to_toml()?)?;
            say(format!("wrote {} scenes to {}", files.len(), out.display()))
        }
        Command::Train { scenes, out } => {
            let cfg = cli.overrides.resolve()?;
            let samples = load_samples(&scene_paths(&scenes)?, &cfg)?;
            output_dir(&out)?;
            let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
            let mut lines = String::new();
            let every = cfg.train.log_every;
            let log = train(&mut model, &samples, &cfg, |r| {
                if let Ok(line) = serde_json::to_string(r) {
                    lines.push_str(&line);
                    lines.push('\n');
                }
                if every > 0 && r.step % every == 0 {
                    log::info!("step {} scene {} total {:.5}", r.step, r.scene, r.losses.total);
                }
            })?;
            write(&out.join("train_log.jsonl"), lines)?;
            write(&out.join("config.toml"), cfg.to_toml()?)?;
            save_model(&out.join("checkpoint.json"), &model, &cfg)?;
            let msg = match (log.first(), log.last()) {
                (Some(a), Some(b)) => format!(
                    "trained {} steps on {} scenes: loss {:.5} -> {:.5}",
                    log.len(),
                    samples.len(),
                    a.losses.total,
                    b.losses.total
                ),
                _ => "0 steps: checkpoint holds the initialization".to_string(),
            };
            say(msg)
        }
        Command::Eval {
            scenes,
            checkpoint,
            iou,
            out,
        } => {
            let (model, cfg) = load_model(&checkpoint)?;
            let samples = load_samples(&scene_paths(&scenes)?, &cfg)?;
            let mut thresholds = vec![0.25, 0.5];
            for t in iou {
                if !thresholds.contains(&t) {
                    thresholds.push(t);
                }
            }
            let report = evaluate_samples(&model, &samples, &thresholds)?;
            let table = render_table(&report);
            if let Some(dir) = out {
                output_dir(&dir)?;
                let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
                write(&dir.join("report.json"), json + "\n")?;
                write(&dir.join("report.txt"), &table)?;
            }
            say(table.trim_end().to_string())
        }
        Command::Gradcheck { tol, eps, inject_fault } => {
            let cfg = cli.overrides.resolve()?;
            let (model, sample, mut small) = gradcheck_setup(cfg.seed)?;
            small.model.use_qim = cfg.model.use_qim;
            small.model.use_rag = cfg.model.use_rag;
            let model = Model::from_params(small.model.clone(), model.params);
            let report = run_gradcheck(&model, &sample, &small, eps, tol, inject_fault)?;
            say(format!("{:<20}{:>14}{:>8}  status", "module", "max rel-err", "params"))?;
            for (group, err, n) in report.by_group(module_of) {
                let status = if err <= tol { "ok" } else { "FAIL" };
                say(format!("{group:<20}{err:>14.3e}{n:>8}  {status}"))?;
            }
            if report.passed() {
                say(format!("all modules pass (tol {tol:e}, eps {eps:e})"))
            } else {
                Err(Error::InvalidArgument(format!(
                    "gradient check failed: max rel-err {:.3e} exceeds {tol:e}",
                    report.max_rel_err()
                )))
            }
        }
        Command::Heatmap {
            scene,
            checkpoint,
            view,
            instruction,
            out,
        } => {
            let (model, cfg) = load_model(&checkpoint)?;
            let sample = load_samples(&[scene], &cfg)?.remove(0);
            let scores = relevance_scores(&model, &sample, instruction)?;
            let voxels = &sample.inputs.voxels;
            let map = relevance_heatmap(&sample.file.scene, voxels, &scores, view)?;
            output_dir(&out)?;
            write(&out.join(format!("heatmap_view{view}.ppm")), map.to_ppm())?;
            write(&out.join("relevance.csv"), relevance_csv(voxels, &scores))?;
            say(format!("wrote {}x{} heatmap and {} voxel scores to {}", map.width, map.height, scores.len(), out.display()))
        }
    }
}
