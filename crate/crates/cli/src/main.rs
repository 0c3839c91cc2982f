use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use reid_core::eval::{evaluate, ranked_list_csv, EmbeddingSet, RankingResult};
use reid_core::gradcheck::primitive_suite;
use reid_core::io::checkpoint::{self, Checkpoint};
use reid_core::io::config::RunConfig;
use reid_core::io::embeddings::{read_embeddings, write_embeddings};
use reid_core::io::image::load_image;
use reid_core::io::manifest::{load_manifest, Split};
use reid_core::io::pgm::write_pgm;
use reid_core::io::synth::{synth_generate, SynthConfig};
use reid_core::model::ReidModel;
use reid_core::pipeline::{embed_split, evaluate_manifest};
use reid_core::training::{mini_loss_grad_check, train_loop, warmup_lr};

const PRIMITIVE_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "reid",
    version,
    about = "Hybrid-attention multi-granularity person re-identification"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Write descriptors for one split of a manifest.
    Embed(EmbedArgs),
    /// CMC/mAP from two embedding dumps, or end to end from a checkpoint.
    Eval(EvalArgs),
    /// Write attention maps of a trained model as PGM images.
    Inspect(InspectArgs),
    /// Finite-difference checks of every primitive and the full loss.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, default_value = "mini")]
    preset: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; defaults to the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Validate the configuration and print it with the learning-rate table.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration whose architecture the checkpoint must match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Load a checkpoint whose config hash differs from --config.
    #[arg(long)]
    allow_config_mismatch: bool,
}

impl CheckpointArgs {
    /// The model plus the run config (the given one, or the mini preset
    /// for normalization and eval settings).
    fn load(&self) -> Result<(ReidModel, RunConfig)> {
        let ck: Checkpoint = checkpoint::load(&self.checkpoint)?;
        let run = match &self.config {
            Some(p) => {
                let run = RunConfig::load(p)?;
                let expected = run.model_config(ck.config.num_ids);
                if let Some(w) = ck.check_hash(&expected, self.allow_config_mismatch)? {
                    eprintln!("warning: {w}");
                }
                run
            }
            None => RunConfig::mini(),
        };
        Ok((ck.into_model()?, run))
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "query")]
    split: String,
    /// Descriptor file; a `.csv` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Query embedding dump.
    #[arg(long, requires = "gallery")]
    query: Option<PathBuf>,
    /// Gallery embedding dump.
    #[arg(long, requires = "query")]
    gallery: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["query", "gallery"], requires = "manifest")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    allow_config_mismatch: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    max_rank: Option<usize>,
    /// Directory for cmc.csv, ranked_list.csv and summary.txt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Images to inspect.
    #[arg(required_unless_present = "manifest")]
    images: Vec<PathBuf>,
    /// Inspect the first --limit images of --split instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "query")]
    split: String,
    #[arg(long, default_value_t = 4)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    ids: usize,
    #[arg(long, default_value_t = 4)]
    imgs: usize,
    #[arg(long, default_value_t = 2)]
    cams: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Identities in the train split; the rest become query/gallery.
    /// Defaults to half.
    #[arg(long)]
    train_ids: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse::<Split>().map_err(|m| anyhow!(reid_core::Error::Config(m)))
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.cfg.load()?;
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
        cfg.validate()?;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if a.dry_run {
        print!("{}", cfg.to_toml());
        println!("\n# epoch,lr");
        for e in 1..=cfg.training.epochs {
            println!("# {e},{}", warmup_lr(e)?);
        }
        return Ok(());
    }
    let manifest_path = a.manifest.as_ref().context("--manifest is required unless --dry-run")?;
    let manifest = load_manifest(manifest_path)?;
    let data = manifest.load_images(Split::Train, cfg.backbone.input_hw)?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let (_, report) = train_loop(
        &cfg.model_config(1),
        &cfg.training,
        &cfg.normalization,
        &data,
        cfg.seed,
        Some(&out),
    )?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} images / {} ids: id_loss={:.4} tp_loss={:.4} -> {}",
        last.epoch,
        data.len(),
        report.classes.len(),
        last.id_loss,
        last.tp_loss,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<()> {
    let (model, run) = a.ck.load()?;
    let manifest = load_manifest(&a.manifest)?;
    let split = parse_split(&a.split)?;
    let set = embed_split(&model, &manifest, split, &run.normalization, run.eval.batch)?;
    write_embeddings(&a.out, &set)?;
    println!(
        "wrote {} descriptors of width {} to {}",
        set.len(),
        set.dim(),
        a.out.display()
    );
    Ok(())
}

fn write_report(dir: &Path, q: &EmbeddingSet, g: &EmbeddingSet, r: &RankingResult, max_rank: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("cmc.csv"), r.cmc_csv())?;
    std::fs::write(dir.join("ranked_list.csv"), ranked_list_csv(q, g, r, max_rank)?)?;
    std::fs::write(dir.join("summary.txt"), r.summary() + "\n")?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (q, g, r, max_rank) = match (&a.query, &a.gallery, &a.checkpoint) {
        (Some(qp), Some(gp), None) => {
            let max_rank = a.max_rank.unwrap_or(10);
            let q = read_embeddings(qp)?;
            let g = read_embeddings(gp)?;
            let r = evaluate(&q, &g, max_rank)?;
            (q, g, r, max_rank)
        }
        (None, None, Some(ck)) => {
            let ck = CheckpointArgs {
                checkpoint: ck.clone(),
                config: a.config.clone(),
                allow_config_mismatch: a.allow_config_mismatch,
            };
            let (model, run) = ck.load()?;
            let manifest = load_manifest(a.manifest.as_ref().expect("clap enforces --manifest"))?;
            let max_rank = a.max_rank.unwrap_or(run.eval.max_rank);
            let (q, g, r) = evaluate_manifest(&model, &manifest, &run.normalization, run.eval.batch, max_rank)?;
            (q, g, r, max_rank)
        }
        _ => bail!(reid_core::Error::Config(
            "eval needs --query and --gallery, or --checkpoint and --manifest".into()
        )),
    };
    if let Some(dir) = &a.out {
        write_report(dir, &q, &g, &r, max_rank)?;
    }
    print!("{}", r.cmc_csv());
    println!("{}", r.summary());
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let (model, run) = a.ck.load()?;
    let hw = model.config().backbone.input_hw;
    let (names, raw): (Vec<String>, Vec<_>) = match &a.manifest {
        Some(m) => {
            let manifest = load_manifest(m)?;
            let rows = manifest.split(parse_split(&a.split)?);
            rows.iter()
                .take(a.limit)
                .map(|r| Ok((r.path.clone(), load_image(&r.resolved, hw)?)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip()
        }
        None => a
            .images
            .iter()
            .map(|p| Ok((p.display().to_string(), load_image(p, hw)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };
    if raw.is_empty() {
        bail!(reid_core::Error::Config("no images to inspect".into()));
    }
    let normed = raw
        .iter()
        .map(|t| run.normalization.apply(t))
        .collect::<reid_core::Result<Vec<_>>>()?;
    let batch = reid_core::Tensor::stack(&normed.iter().collect::<Vec<_>>())?;
    let maps = model.attention_maps(&batch)?;
    let mut written = 0;
    for (i, name) in names.iter().enumerate() {
        let stem = Path::new(name)
            .file_stem()
            .map_or_else(|| format!("img{i}"), |s| s.to_string_lossy().into_owned());
        for (label, t) in &maps {
            let m = t.select(i)?;
            let (h, w) = match m.shape() {
                [1, h, w] => (*h, *w),
                [c] => (1, *c),
                other => bail!("unexpected attention map shape {other:?}"),
            };
            write_pgm(&a.out.join(format!("{i:03}_{stem}_{label}.pgm")), h, w, m.data())?;
            written += 1;
        }
    }
    println!("wrote {written} attention maps to {}", a.out.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut failed = false;
    for c in primitive_suite(a.seed, 1e-6)? {
        let ok = c.max_rel_error < PRIMITIVE_TOL;
        failed |= !ok;
        println!(
            "{:<6} {:<40} {:.3e}",
            if ok { "ok" } else { "FAIL" },
            c.name,
            c.max_rel_error
        );
    }
    let e = mini_loss_grad_check(a.seed)?;
    let ok = e < MODEL_TOL;
    failed |= !ok;
    println!(
        "{:<6} {:<40} {e:.3e}",
        if ok { "ok" } else { "FAIL" },
        "mini model total loss"
    );
    if failed {
        bail!(reid_core::Error::InvalidArgument {
            op: "gradcheck",
            msg: "some gradients exceed tolerance".into()
        });
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        train_ids: a.train_ids,
        ..SynthConfig::new(a.ids, a.imgs, a.cams, [a.height, a.width], a.seed)
    };
    let m = synth_generate(&cfg, &a.out)?;
    println!(
        "wrote {} images and {}",
        m.rows.len(),
        a.out.join("manifest.csv").display()
    );
    Ok(())
}

fn error_line(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<reid_core::Error>())
        .map_or("cli", |c| c.kind());
    let mut msg: Vec<String> = Vec::new();
    for c in e.chain() {
        let s = c.to_string();
        if !msg.last().is_some_and(|prev| prev.ends_with(&s)) {
            msg.push(s);
        }
    }
    format!("error[{kind}]: {}", msg.join(": ").replace('\n', " "))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Embed(a) => embed(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Inspect(a) => inspect(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Synth(a) => synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
