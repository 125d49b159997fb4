use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;

use nanoinv::diffusion::BlendSource;
use nanoinv::formats::{parse_curve, parse_matrix, read_text, write_curve, write_text, write_xyz};
use nanoinv::geomrecover::RefineOptions;
use nanoinv::nn::RngStream;
use nanoinv::pipeline::data::{self, curve_file, dataset_spec, load_samples, read_pdf, stem};
use nanoinv::pipeline::plan::{parse_grid, read_plan, write_plan};
use nanoinv::pipeline::predict::{predict_structures, recover_structure, tune_plan};
use nanoinv::pipeline::train::{self, Models};
use nanoinv::pipeline::{rwp, Checkpoint, ConfigFile, EvalReport, EvalRow, Profile};
use nanoinv::structgen::{generate_dataset, Split};

use crate::{Cli, Command, EvalArgs, GenCommand, PredictArgs, RecoverArgs, SplitArg, StageArg, TrainArgs, TuneArgs};

pub const CVAE_FILE: &str = "cvae.ckpt";
pub const XVAE_FILE: &str = "xvae.ckpt";
pub const DDM_FILE: &str = "ddm.ckpt";

struct Ctx {
    profile: Profile,
    seed: Option<u64>,
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Some(ConfigFile::parse(&read_text(p)?)?),
        None => None,
    };
    let mut profile = Profile::resolve(&cli.profile, config.as_ref())?;
    if let Some(s) = cli.seed {
        profile.seed = s;
    }
    let ctx = Ctx { profile, seed: cli.seed };
    match cli.command {
        Command::Gen(GenCommand::Structures { spec, out }) => gen_structures(&ctx, &spec, &out),
        Command::Gen(GenCommand::Pdf { input }) => gen_pdf(&ctx, &input),
        Command::Train(a) => train_stage(&ctx, &a),
        Command::TuneSkip(a) => tune(&ctx, &a),
        Command::Predict(a) => predict(&ctx, &a),
        Command::Recover(a) => recover(&ctx, &a),
        Command::Eval(a) => eval(&a),
    }
}

fn gen_structures(ctx: &Ctx, spec_path: &Path, out: &Path) -> Result<()> {
    let cfg = ConfigFile::parse(&read_text(spec_path)?)?;
    let mut spec = dataset_spec(&cfg)?;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    let dataset = generate_dataset(&spec)?;
    let records = data::write_dataset(out, &dataset)?;
    println!("wrote {} structures to {}", records.len(), out.display());
    Ok(())
}

fn gen_pdf(ctx: &Ctx, dir: &Path) -> Result<()> {
    let n = data::generate_pdfs(dir, &ctx.profile, ctx.profile.seed)?;
    println!("wrote {n} PDFs to {}", dir.join(data::PDF_DIR).display());
    Ok(())
}

fn load_ckpt(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        bail!("stage order violated: {what} checkpoint {} not found", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str, stage: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| anyhow::anyhow!("stage order violated: training {stage} needs a trained --{flag} checkpoint"))
}

fn train_stage(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let p = &ctx.profile;
    let (ckpt, report) = match a.stage {
        StageArg::Cvae => {
            let samples = load_samples(&a.data, p, Some(Split::Train))?;
            let (_, c, r) = train::train_cvae(p, &samples)?;
            (c, r)
        }
        StageArg::Xvae => {
            let cvae = load_ckpt(required(&a.cvae, "cvae", "xvae")?, "cvae")?;
            train::require_stage(&cvae, p, train::Stage::Cvae)?;
            let samples = load_samples(&a.data, p, Some(Split::Train))?;
            let (_, c, r) = train::train_xvae(p, &samples, &cvae)?;
            (c, r)
        }
        StageArg::Ddm => {
            let cvae = load_ckpt(required(&a.cvae, "cvae", "ddm")?, "cvae")?;
            train::require_stage(&cvae, p, train::Stage::Cvae)?;
            let xvae = load_ckpt(required(&a.xvae, "xvae", "ddm")?, "xvae")?;
            train::require_stage(&xvae, p, train::Stage::Xvae)?;
            let samples = load_samples(&a.data, p, Some(Split::Train))?;
            let (_, c, r) = train::train_ddm(p, &samples, &cvae, &xvae)?;
            (c, r)
        }
    };
    ckpt.save(&a.out)?;
    println!(
        "{}: {} epochs, final loss {:.6}, {:.1}s -> {}",
        report.stage.label(),
        report.losses.len(),
        report.final_loss(),
        report.seconds,
        a.out.display()
    );
    Ok(())
}

fn load_models(profile: &Profile, dir: &Path) -> Result<Models> {
    let c = load_ckpt(&dir.join(CVAE_FILE), "cvae")?;
    let x = load_ckpt(&dir.join(XVAE_FILE), "xvae")?;
    let d = load_ckpt(&dir.join(DDM_FILE), "ddm")?;
    Ok(Models::load(profile, &c, &x, &d)?)
}

fn tune(ctx: &Ctx, a: &TuneArgs) -> Result<()> {
    let p = &ctx.profile;
    let models = load_models(p, &a.ckpt_dir)?;
    let grid = parse_grid(&read_text(&a.grid)?, p.steps)?;
    let split = match a.split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Validation),
        SplitArg::All => None,
    };
    let samples = load_samples(&a.data, p, split)?;
    let blend = BlendSource::parse(&a.blend)?;
    let rng = RngStream::new(p.seed).fork(200);
    let report = tune_plan(&models, p, &samples, &grid, a.k, a.slack, blend, &rng)?;
    write_text(&a.out, &write_plan(&report.chosen, a.slack))?;
    let table = a.out.with_extension("tsv");
    write_text(&table, &report.to_tsv())?;
    println!(
        "chose t1={} t2={} (baseline median R_wp {:.4}) -> {}",
        report.chosen.t1,
        report.chosen.t2,
        report.baseline_median,
        a.out.display()
    );
    Ok(())
}

fn pdf_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gr"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .gr files in {}", path.display());
    }
    Ok(files)
}

fn predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let p = &ctx.profile;
    let models = load_models(p, &a.ckpt_dir)?;
    let plan = match &a.plan {
        Some(path) => read_plan(&ConfigFile::parse(&read_text(path)?)?, &models.schedule)?,
        None => nanoinv::diffusion::SkipPlan::full_chain(&models.schedule),
    };
    let root = RngStream::new(p.seed).fork(300);
    for (i, file) in pdf_inputs(&a.pdf)?.iter().enumerate() {
        let name = stem(file);
        let start = Instant::now();
        let (pdf, _) = read_pdf(file, p)?;
        let pred = predict_structures(&models, p, &pdf, a.k, &plan, &root.fork(i as u64))
            .with_context(|| format!("predicting {}", file.display()))?;
        let seconds = start.elapsed().as_secs_f64();
        for (j, c) in pred.candidates.iter().enumerate() {
            write_text(&a.out.join(format!("{name}_cand{j}.xyz")), &write_xyz(&c.cloud))?;
        }
        write_text(&a.out.join(format!("{name}_report.tsv")), &pred.to_tsv())?;
        if let Some(best) = pred.best() {
            let header = vec![
                ("natoms".to_string(), best.cloud.len().to_string()),
                ("rwp".to_string(), format!("{:.6}", best.rwp)),
                ("qdamp".to_string(), format!("{:.6}", best.qdamp)),
                ("seconds".to_string(), format!("{seconds:.3}")),
            ];
            write_text(&a.out.join(format!("{name}.gr")), &write_curve(&curve_file(&best.pdf, header)))?;
            info!("{name}: best R_wp {:.4} with {} atoms", best.rwp, best.cloud.len());
        }
        println!("{name}: {} candidates, {} dropped", pred.candidates.len(), pred.dropped.len());
    }
    Ok(())
}

fn recover(ctx: &Ctx, a: &RecoverArgs) -> Result<()> {
    let m = parse_matrix(&read_text(&a.laplacian)?)?;
    let mut p = ctx.profile.clone();
    p.n_max = m.size;
    if let Some(s) = m.header_value("sigma") {
        p.sigma = s.parse().context("sigma header")?;
    }
    if let Some(v) = m.header_value("norm_constant") {
        p.norm_constant = v.parse().context("norm_constant header")?;
    }
    let (cloud, mse) = recover_structure(&m.data, &p, &RefineOptions::default())?;
    write_text(&a.out, &write_xyz(&cloud))?;
    println!("recovered {} atoms, Laplacian MSE {mse:.3e} -> {}", cloud.len(), a.out.display());
    Ok(())
}

fn truth_dir(path: &Path) -> PathBuf {
    if path.join(data::MANIFEST).exists() {
        path.join(data::PDF_DIR)
    } else {
        path.to_path_buf()
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let truth = truth_dir(&a.truth);
    let mut report = EvalReport::default();
    for file in pdf_inputs(&truth)? {
        let name = stem(&file);
        let pred_path = a.pred.join(format!("{name}.gr"));
        if !pred_path.exists() {
            bail!("no prediction {} for reference {}", pred_path.display(), file.display());
        }
        let obs = parse_curve(&read_text(&file)?)?;
        let calc = parse_curve(&read_text(&pred_path)?)?;
        if obs.r.len() != calc.r.len() || obs.r.iter().zip(&calc.r).any(|(x, y)| (x - y).abs() > 1e-6) {
            bail!("r grids of {} and {} differ", file.display(), pred_path.display());
        }
        let value = rwp(&obs.g, &calc.g, None).with_context(|| format!("scoring {name}"))?;
        let natoms = calc.header_value("natoms").or(obs.header_value("natoms")).and_then(|v| v.parse().ok()).unwrap_or(0);
        let seconds = calc.header_value("seconds").and_then(|v| v.parse().ok()).unwrap_or(0.0);
        let kind = obs.header_value("kind").unwrap_or("UNK").to_string();
        report.rows.push(EvalRow { name, kind, natoms, rwp: value, seconds });
    }
    write_text(&a.report, &report.to_tsv())?;
    println!("{} samples, median R_wp {:.4} -> {}", report.rows.len(), report.total_median(), a.report.display());
    Ok(())
}
