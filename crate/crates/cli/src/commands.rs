use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mvdistill_core::conditioning::HybridPrior;
use mvdistill_core::distillation::{
    image_loss, psnr, refine_with, restore_finetune, restore_loss, restore_pretrain, IterationMetrics,
    RefineTargets, RestorePair, PSNR_CAP,
};
use mvdistill_core::scene::{init_synthetic_with, render, SceneParams, TransformNet};
use mvdistill_core::views::camera_ring;
use mvdistill_core::{seed, Error, FieldStack};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::plot;

/// One refinement setting of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Resampling around chain-initialised anchors with retention.
    Full,
    /// Fresh independent noise every iteration (`sigma = 1`), no chain
    /// initialisation, no retention.
    Baseline,
    /// Chain-initialised anchors that are never replaced.
    NoRetention,
    /// One fixed independent noise field per view for the whole run.
    FrozenNoise,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Baseline, Variant::NoRetention, Variant::FrozenNoise];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Baseline => "baseline",
            Variant::NoRetention => "no-retention",
            Variant::FrozenNoise => "frozen-noise",
        }
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let a = &mut cfg.ablation;
        match self {
            Variant::Full => {}
            Variant::Baseline => {
                cfg.refine.sigma = 1.0;
                a.disable_anchor_init = true;
                a.disable_retention = true;
            }
            Variant::NoRetention => a.disable_retention = true,
            Variant::FrozenNoise => {
                cfg.refine.sigma = 0.0;
                a.freeze_noise = true;
                a.disable_retention = true;
                a.disable_anchor_init = true;
            }
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(CliError::io(path))
}

fn mean_path(dir: &Path, v: usize) -> PathBuf {
    dir.join("means").join(format!("mean_{v:03}.fstk"))
}

#[derive(Debug, Clone)]
pub struct SynthReport {
    pub dir: PathBuf,
    pub views: usize,
}

/// Writes the fixture: target scene, perturbed initial scene, per-view
/// oracle means (target renders, encoded), the reference image and a
/// camera manifest.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<SynthReport, CliError> {
    let dir = cfg.output.dir.clone();
    create_dir(&dir.join("means"))?;
    let opts = cfg.synth_options();
    let shape = cfg.shape()?;
    let master = cfg.seeds.master;
    let target = init_synthetic_with(shape, seed::derive(master, seed::SCENE, &[0]), &opts)?;
    let mut initial = init_synthetic_with(shape, seed::derive(master, seed::SCENE, &[1]), &opts)?;
    initial.smooth_colors(cfg.scene.init_smoothing);
    let (cams, chain) = camera_ring(&cfg.ring())?;
    let latent = cfg.latent()?;
    let ropts = cfg.render_options();
    let mut manifest = String::from("# view azimuth_deg pitch_deg driver\n");
    for (v, cam) in cams.iter().enumerate() {
        let image = render(&target, cam, &ropts)?.image;
        latent.encode(&image)?.save(mean_path(&dir, v))?;
        if v == chain.root() {
            image.save(dir.join("reference.fstk"))?;
            image.save_png(dir.join("reference.png"))?;
        }
        let (az, pitch) = cfg.ring().angles(v);
        let driver = chain.driver(v).map_or("-".to_string(), |d| d.to_string());
        writeln!(manifest, "{v} {az} {pitch} {driver}").unwrap();
    }
    target.save(dir.join("target.scne"))?;
    initial.save(dir.join("initial.scne"))?;
    write_text(&dir.join("cameras.txt"), &manifest)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    Ok(SynthReport { dir, views: cams.len() })
}

struct Fixture {
    target: SceneParams,
    initial: SceneParams,
    reference: FieldStack,
    means: Vec<FieldStack>,
}

fn load_fixture(cfg: &ExperimentConfig) -> Result<Fixture, CliError> {
    let dir = cfg.fixture_dir();
    let views = cfg.camera.views;
    let mut needed = vec![PathBuf::from("target.scne"), "initial.scne".into(), "reference.fstk".into()];
    needed.extend((0..views).map(|v| mean_path(Path::new(""), v)));
    let missing: Vec<String> = needed
        .iter()
        .filter(|p| !dir.join(p).exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Missing { dir, missing });
    }
    Ok(Fixture {
        target: SceneParams::load(dir.join("target.scne"))?,
        initial: SceneParams::load(dir.join("initial.scne"))?,
        reference: FieldStack::load(dir.join("reference.fstk"))?,
        means: (0..views)
            .map(|v| FieldStack::load(mean_path(&dir, v)))
            .collect::<mvdistill_core::Result<_>>()?,
    })
}

#[derive(Debug, Clone)]
pub struct RestoreReport {
    pub pretrain_loss_before: f64,
    pub pretrain_loss_after: f64,
    pub finetune_loss_before: f64,
    pub finetune_loss_after: f64,
}

/// Pretrains the grid transform on generated coarse/target pairs, fine-tunes
/// it with the decoder on the fixture and writes `restored.scne`.
pub fn cmd_restore(cfg: &ExperimentConfig) -> Result<RestoreReport, CliError> {
    let fixture = load_fixture(cfg)?;
    let rcfg = cfg.restore_config();
    let opts = cfg.synth_options();
    let master = cfg.seeds.master;
    let pairs = cfg
        .restore
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let target = init_synthetic_with(s.parse()?, seed::derive(master, seed::SCENE, &[100 + i as u64]), &opts)?;
            let mut base = target.clone();
            base.smooth_density(cfg.restore.density_smoothing);
            Ok(RestorePair { base, target })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let net = TransformNet::new(fixture.initial.features(), cfg.restore.hidden, seed::derive(master, "restore", &[0]));
    let pretrain_loss_before = restore_loss(&pairs, &net, &rcfg)?;
    let pretrained = restore_pretrain(&pairs, &net, &rcfg)?;
    let pretrain_loss_after = restore_loss(&pairs, &pretrained, &rcfg)?;

    let pair = RestorePair {
        base: fixture.initial.clone(),
        target: fixture.target.clone(),
    };
    let finetune_loss_before = restore_loss(std::slice::from_ref(&pair), &pretrained, &rcfg)?;
    let (restored, tuned) = restore_finetune(&pair, &pretrained, &rcfg)?;
    let tuned_pair = RestorePair {
        base: restored.clone(),
        target: pair.target.clone(),
    };
    // The restored scene already carries the transform: score it through an
    // identity network.
    let finetune_loss_after = restore_loss(
        std::slice::from_ref(&tuned_pair),
        &TransformNet::new(tuned.features(), tuned.hidden(), 0),
        &rcfg,
    )?;
    let dir = &cfg.output.dir;
    create_dir(dir)?;
    restored.save(dir.join("restored.scne"))?;
    let report = RestoreReport {
        pretrain_loss_before,
        pretrain_loss_after,
        finetune_loss_before,
        finetune_loss_after,
    };
    write_text(
        &dir.join("restore.txt"),
        &format!(
            "pretrain_loss_before {}\npretrain_loss_after {}\nfinetune_loss_before {}\nfinetune_loss_after {}\n",
            report.pretrain_loss_before,
            report.pretrain_loss_after,
            report.finetune_loss_before,
            report.finetune_loss_after
        ),
    )?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    pub run_dir: PathBuf,
    pub mean_score: f64,
    pub anchor_updates: usize,
}

/// Directory a refinement with this configuration writes to.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.join("refine")
}

/// Runs refinement (and, with `ablation.compare`, the other variants under
/// `refine/ablation/<name>`).
pub fn cmd_refine(cfg: &ExperimentConfig) -> Result<Vec<RefineReport>, CliError> {
    let mut reports = vec![refine_into(cfg, &run_dir(cfg))?];
    if cfg.ablation.compare {
        for variant in &Variant::ALL[1..] {
            let mut vcfg = cfg.clone();
            vcfg.ablation.compare = false;
            variant.apply(&mut vcfg);
            reports.push(refine_into(&vcfg, &run_dir(cfg).join("ablation").join(variant.name()))?);
        }
    }
    Ok(reports)
}

fn refine_into(cfg: &ExperimentConfig, dir: &Path) -> Result<RefineReport, CliError> {
    let fixture = load_fixture(cfg)?;
    let rcfg = cfg.refine_config()?;
    let start = match cfg.refine.start.as_str() {
        "restored" => {
            let p = cfg.fixture_dir().join("restored.scne");
            if !p.exists() {
                return Err(CliError::Missing {
                    dir: cfg.fixture_dir(),
                    missing: vec!["restored.scne (run restore first)".into()],
                });
            }
            SceneParams::load(p)?
        }
        _ => fixture.initial.clone(),
    };
    let prior = cfg.refine.prior.as_ref().map(HybridPrior::load).transpose()?;
    let targets = RefineTargets {
        reference: fixture.reference,
        means: fixture.means,
        tau: cfg.oracle.tau,
    };
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path).map_err(CliError::io(&metrics_path))?);
    let ckpt_dir = dir.join("checkpoints");
    let mut last_good = start.clone();
    let mut io_failure: Option<CliError> = None;
    let result = refine_with(&start, &targets, &rcfg, prior.as_ref(), |m: &IterationMetrics, scene| {
        let line = serde_json::to_string(m).expect("metrics serialise");
        if let Err(e) = writeln!(metrics, "{line}") {
            io_failure = Some(CliError::Io {
                path: metrics_path.clone(),
                source: e,
            });
            return Err(Error::Io(std::io::Error::other("metrics write failed")));
        }
        if cfg.refine.checkpoint_every > 0 && m.iteration.is_multiple_of(cfg.refine.checkpoint_every) {
            fs::create_dir_all(&ckpt_dir)?;
            scene.save(ckpt_dir.join(format!("iter_{:06}.scne", m.iteration)))?;
        }
        last_good.clone_from(scene);
        Ok(())
    });
    metrics.flush().map_err(CliError::io(&metrics_path))?;
    if let Some(e) = io_failure {
        return Err(e);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let abort = dir.join("abort");
            create_dir(&abort)?;
            last_good.save(abort.join("last_good.scne"))?;
            write_text(&abort.join("diagnostic.txt"), &format!("{e}\n"))?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    };
    outcome.scene.save(dir.join("final.scne"))?;
    outcome.anchors.save_dir(dir.join("anchors"))?;
    for (v, cam) in outcome.cameras.iter().enumerate() {
        let image = render(&outcome.scene, cam, &rcfg.render)?.image;
        image.save_png(dir.join(format!("render_{v:03}.png")))?;
        image.save(dir.join(format!("final_{v:03}.fstk")))?;
        rcfg.latent
            .decode(&targets.means[v])
            .save(dir.join(format!("target_{v:03}.fstk")))?;
    }
    Ok(RefineReport {
        run_dir: dir.to_path_buf(),
        mean_score: outcome.mean_score,
        anchor_updates: outcome.anchor_updates,
    })
}

/// Aggregates of one refinement run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub iterations: usize,
    pub views: usize,
    /// PSNR of the final renders against the target renders, pooled over views.
    pub final_psnr: f64,
    /// Mean over iterations of the per-iteration mean applied score.
    pub mean_score: f64,
    /// Accepted resamples per view and iteration.
    pub anchor_update_rate: f64,
    /// Last iteration's per-view loss against the oracle mean.
    pub view_losses: Vec<f64>,
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        writeln!(s, "iterations,{}", self.iterations).unwrap();
        writeln!(s, "views,{}", self.views).unwrap();
        writeln!(s, "final_psnr,{}", self.final_psnr).unwrap();
        writeln!(s, "mean_score,{}", self.mean_score).unwrap();
        writeln!(s, "anchor_update_rate,{}", self.anchor_update_rate).unwrap();
        for (v, l) in self.view_losses.iter().enumerate() {
            writeln!(s, "view_{v:03}_loss,{l}").unwrap();
        }
        s
    }
}

/// Parses a metrics stream, one JSON object per line.
pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Metrics {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Summarises a run directory into `summary.csv` (and `scores.png` when
/// `plot` is set). Depends on nothing outside `run_dir`.
pub fn cmd_eval(run_dir: &Path, plot: bool) -> Result<Summary, CliError> {
    let metrics_path = run_dir.join("metrics.jsonl");
    if !metrics_path.exists() {
        return Err(CliError::Missing {
            dir: run_dir.to_path_buf(),
            missing: vec!["metrics.jsonl".into()],
        });
    }
    let metrics = read_metrics(&metrics_path)?;
    let Some(last) = metrics.last() else {
        return Err(CliError::Metrics {
            line: 0,
            detail: "empty metrics stream".into(),
        });
    };
    let views = last.views.len();
    let missing: Vec<String> = (0..views)
        .flat_map(|v| [format!("final_{v:03}.fstk"), format!("target_{v:03}.fstk")])
        .filter(|f| !run_dir.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Missing {
            dir: run_dir.to_path_buf(),
            missing,
        });
    }
    let mut mse = 0.0;
    for v in 0..views {
        let a = FieldStack::load(run_dir.join(format!("final_{v:03}.fstk")))?;
        let b = FieldStack::load(run_dir.join(format!("target_{v:03}.fstk")))?;
        mse += image_loss(&a, &b)? / views as f64;
    }
    let updates: usize = metrics.iter().map(|m| m.anchor_updates).sum();
    let summary = Summary {
        iterations: metrics.len(),
        views,
        final_psnr: psnr(mse, PSNR_CAP),
        mean_score: metrics.iter().map(|m| m.mean_score).sum::<f64>() / metrics.len() as f64,
        anchor_update_rate: updates as f64 / (metrics.len() * views) as f64,
        view_losses: {
            let mut v: Vec<_> = last.views.iter().map(|m| (m.view, m.target_loss)).collect();
            v.sort_by_key(|p| p.0);
            v.into_iter().map(|p| p.1).collect()
        },
    };
    write_text(&run_dir.join("summary.csv"), &summary.to_csv())?;
    if plot {
        plot::score_plot(&metrics).save(run_dir.join("scores.png")).map_err(Error::from)?;
    }
    Ok(summary)
}
