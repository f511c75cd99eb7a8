use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use swin_mae::ablate::{ablation_csv, curves_csv, run_ablation, AblateConfig, AblateData, Suite};
use swin_mae::config::{PhaseConfig, RunConfig};
use swin_mae::data::triptych::{emit_triptych, masked_view, render_plan};
use swin_mae::data::{generate_synthetic_dataset, load_image, save_image, DatasetManifest, Split};
use swin_mae::masking::{build_mask_plan, MaskMode, RngState};
use swin_mae::model::vit_mae::VitMaeSpec;
use swin_mae::model::{ModelSpec, SwinMae};
use swin_mae::seg::finetune::{load_unet, FinetuneConfig};
use swin_mae::seg::{build_swin_unet_from_checkpoint, evaluate_segmentation, render_table, run_finetune, SwinUnetSpec};
use swin_mae::train::pretrain::{as_batch, load_mae};
use swin_mae::train::{run_pretraining, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "swin-mae", version, about = "Window-masked Swin autoencoder pretraining and segmentation transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        unlabeled: usize,
        #[arg(long, default_value_t = 100)]
        labeled: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Masked-reconstruction pretraining on the unlabeled images of `data_dir`.
    Pretrain(ConfigArgs),
    /// Fine-tune a Swin-Unet, optionally from a pretrained `checkpoint`.
    Finetune(ConfigArgs),
    /// Evaluate a fine-tuned `checkpoint` on the test split.
    Eval(ConfigArgs),
    /// Masked input, reconstruction and original side by side.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a mask plan and report its visible windows.
    MaskDemo {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "window")]
        mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pixels per token in the picture.
        #[arg(long, default_value_t = 8)]
        cell: usize,
    },
    /// Finite-difference check of the full model's gradients.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 4)]
        per_param: usize,
    },
    /// Run ablation suites and write a combined CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subset of encoder,decoder,masking,ratio,loss.
        #[arg(long)]
        suites: Option<String>,
    },
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!(swin_mae::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))))?;
        c.set(k.trim(), v.trim())?;
    }
    for (k, v) in c.resolved() {
        info!("config {k} = {v}");
    }
    Ok(c)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!(swin_mae::Error::Config(format!("{key} is not set"))))
}

fn train_config(p: &PhaseConfig, c: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        lr_max: p.lr,
        weight_decay: p.weight_decay,
        seed: c.seed,
        parallelism: c.parallelism(),
    }
}

fn finetune_config(c: &RunConfig) -> FinetuneConfig {
    FinetuneConfig {
        train: train_config(&c.finetune, c),
        augment: c.seg.augment,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| anyhow!(swin_mae::Error::Io { path: path.into(), source: e }))
}

fn pretrain_cmd(a: &ConfigArgs) -> Result<()> {
    let c = load_config(a)?;
    let manifest = DatasetManifest::scan(required(&c.data_dir, "data_dir")?, c.seed)?;
    let images = manifest.load_unlabeled()?;
    let model = SwinMae::new(c.model.clone(), c.seed)?;
    info!("{} parameters, {} images", model.params.num_scalars(), images.len());
    let out = run_pretraining(
        model,
        &images,
        &train_config(&c.pretrain, &c),
        c.checkpoint_every,
        required(&c.out_dir, "out_dir")?,
    )?;
    println!("final loss {}", out.losses.last().copied().unwrap_or(f64::NAN));
    println!("checkpoint {}", out.checkpoint.display());
    Ok(())
}

fn finetune_cmd(a: &ConfigArgs) -> Result<()> {
    let c = load_config(a)?;
    let manifest = DatasetManifest::scan(required(&c.data_dir, "data_dir")?, c.seed)?;
    let train = manifest.load_labeled(Split::Train)?;
    let test = manifest.load_labeled(Split::Test)?;
    let ckpt = c.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let spec = SwinUnetSpec::new(&c.model, &c.seg);
    let (net, report) = build_swin_unet_from_checkpoint(ckpt.as_ref(), spec, c.seed)?;
    print!("{}", report.render());
    let out = run_finetune(net, &train, &test, &finetune_config(&c), required(&c.out_dir, "out_dir")?)?;
    let o = &out.outcome;
    let rows = vec![
        ("last".to_string(), o.history.last().expect("epochs > 0")),
        (format!("best (epoch {})", o.best_epoch + 1), &o.history[o.best_epoch]),
    ];
    print!("{}", render_table(&rows));
    println!("metrics {}", out.metrics_csv.display());
    println!("checkpoint {}", out.best_checkpoint.display());
    Ok(())
}

fn eval_cmd(a: &ConfigArgs) -> Result<()> {
    let c = load_config(a)?;
    let manifest = DatasetManifest::scan(required(&c.data_dir, "data_dir")?, c.seed)?;
    let test = manifest.load_labeled(Split::Test)?;
    let net = load_unet(&Checkpoint::load(required(&c.checkpoint, "checkpoint")?)?)?;
    let report = evaluate_segmentation(&net, &test, c.parallelism())?;
    print!("{}", render_table(&[("model".to_string(), &report)]));
    if let Some(dir) = &c.out_dir {
        write(
            &dir.join("eval.csv"),
            &format!("dsc_pct,mpa_pct,miou_pct,hd\n{}\n", report.csv_fields()),
        )?;
        write(&dir.join("counts.csv"), &report.counts_csv())?;
        write(&dir.join("hd.csv"), &report.hd_csv())?;
    }
    Ok(())
}

fn reconstruct_cmd(a: &ConfigArgs, image: &Path, out: &Path) -> Result<()> {
    let c = load_config(a)?;
    let model = load_mae(&Checkpoint::load(required(&c.checkpoint, "checkpoint")?)?)?;
    let img = load_image(image)?;
    let batch = as_batch(&img)?;
    let plan = model.plan(&mut RngState::new(c.seed))?;
    let input = model.prepare_input(&batch)?;
    let recon = model.reconstruct_value(&batch, &plan)?;
    let shape = input.shape()[1..].to_vec();
    let gt = input.reshape(&shape)?;
    let recon = recon.reshape(&shape)?;
    let pm = plan.pixel_mask(model.geometry.input.patch_side, model.geometry.input.channels);
    let masked = masked_view(&gt, &pm)?;
    // visible pixels come from the input, as in the usual presentation
    let pasted = swin_mae::tensor::Tensor::new(
        shape.clone(),
        gt.data()
            .iter()
            .zip(recon.data())
            .zip(&pm)
            .map(|((&g, &r), &m)| if m { r } else { g })
            .collect(),
    )?;
    emit_triptych(&masked, &pasted, &gt, out)?;
    println!("masked {} of {} tokens", plan.num_masked(), plan.num_tokens());
    println!("wrote {}", out.display());
    Ok(())
}

fn mask_demo(d: usize, r: usize, ratio: f64, seed: u64, mode: &str, out: Option<&Path>, cell: usize) -> Result<()> {
    let mode = match mode {
        "window" => MaskMode::Window,
        "random" => MaskMode::Random,
        m => bail!(swin_mae::Error::Config(format!("unknown mask mode {m:?}"))),
    };
    let plan = build_mask_plan(d, r, ratio, &mut RngState::new(seed), mode)?;
    let units = match mode {
        MaskMode::Window => d * d,
        MaskMode::Random => d * d * r * r,
    };
    let visible = plan.sparse_keep.len();
    println!("visible windows: {visible} of {units}");
    println!("masked tokens: {} of {}", plan.num_masked(), plan.num_tokens());
    let side = plan.side();
    for row in 0..side {
        let line: String = (0..side)
            .map(|col| if plan.mask_flags[row * side + col] { '#' } else { '.' })
            .collect();
        println!("{line}");
    }
    if let Some(path) = out {
        save_image(path, &render_plan(&plan, cell)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn grad_check_cmd(seed: u64, per_param: usize) -> Result<bool> {
    let model = SwinMae::new(ModelSpec::tiny(), seed)?;
    let mut rng = RngState::new(seed);
    let image = swin_mae::data::synth::generate_sample(16, true, &mut rng.split(1)).0;
    let plan = model.plan(&mut rng)?;
    let err = model.grad_check(&as_batch(&image)?, &plan, per_param)?;
    println!("max relative error {err:e}");
    Ok(err < 1e-4)
}

fn ablate_cmd(a: &ConfigArgs, suites: Option<&str>) -> Result<()> {
    let c = load_config(a)?;
    let suites = match suites {
        Some(s) => s.split(',').map(|x| x.trim().parse()).collect::<swin_mae::Result<Vec<Suite>>>()?,
        None => Suite::ALL.to_vec(),
    };
    let manifest = DatasetManifest::scan(required(&c.data_dir, "data_dir")?, c.seed)?;
    let data = AblateData {
        unlabeled: manifest.load_unlabeled()?,
        train: manifest.load_labeled(Split::Train)?,
        test: manifest.load_labeled(Split::Test)?,
    };
    let vit = VitMaeSpec {
        image: swin_mae::geometry::PatchSpec {
            patch_side: c.model.image.patch_side * c.model.mask_window_r,
            ..c.model.image
        },
        mask_ratio: c.model.mask_ratio,
        ..VitMaeSpec::default()
    };
    let cfg = AblateConfig {
        base: c.model.clone(),
        pretrain: train_config(&c.pretrain, &c),
        finetune: finetune_config(&c),
        seg: c.seg.clone(),
        vit,
        suites,
    };
    let rows = run_ablation(&cfg, &data)?;
    let out = required(&c.out_dir, "out_dir")?;
    write(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    write(&out.join("curves.csv"), &curves_csv(&rows))?;
    let table: Vec<(String, &swin_mae::seg::SegReport)> = rows
        .iter()
        .filter_map(|r| r.report.as_ref().map(|rep| (format!("{} {}", r.suite.name(), r.setting), rep)))
        .collect();
    print!("{}", render_table(&table));
    for r in rows.iter().filter(|r| r.report.is_none()) {
        let l = r.upstream_losses.as_ref().and_then(|l| l.last()).copied().unwrap_or(f64::NAN);
        println!("{} {} final upstream loss {l:.6}", r.suite.name(), r.setting);
    }
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            unlabeled,
            labeled,
            size,
            seed,
        } => {
            let m = generate_synthetic_dataset(unlabeled, labeled, size, seed, &out)?;
            let count = |s| m.of_split(s).count();
            println!(
                "unlabeled {} train {} test {} in {}",
                count(Split::Unlabeled),
                count(Split::Train),
                count(Split::Test),
                out.display()
            );
        }
        Command::Pretrain(a) => pretrain_cmd(&a)?,
        Command::Finetune(a) => finetune_cmd(&a)?,
        Command::Eval(a) => eval_cmd(&a)?,
        Command::Reconstruct { cfg, image, out } => reconstruct_cmd(&cfg, &image, &out)?,
        Command::MaskDemo {
            d,
            r,
            ratio,
            seed,
            mode,
            out,
            cell,
        } => mask_demo(d, r, ratio, seed, &mode, out.as_deref(), cell)?,
        Command::GradCheck { seed, per_param } => return grad_check_cmd(seed, per_param),
        Command::Ablate { cfg, suites } => ablate_cmd(&cfg, suites.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let kind = e.downcast_ref::<swin_mae::Error>().map_or("runtime", |e| e.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error kind={kind} msg={msg:?}");
            ExitCode::from(1)
        }
    }
}
