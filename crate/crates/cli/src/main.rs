use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;
use splatseg::association::{associate, AssociationConfig};
use splatseg::io::{
    export_feature_pca, export_image, load_bundle, load_embeddings, load_masks, save_bundle,
    save_embeddings, save_masks, Bundle,
};
use splatseg::query::{classify_points, click_select, eval_3d, text_select, SelectMode};
use splatseg::render::{render_color, render_feature_map};
use splatseg::scene::{InstanceId, View};
use splatseg::synth::{generate_synthetic, SyntheticSceneSpec};
use splatseg::train::{train_stage1, train_stage2, TrainConfig};
use splatseg_service::{render_view, AppState, Snapshot, BACKGROUND};

#[derive(Parser)]
#[command(name = "splatseg", version, about = "Mask-supervised instance features for Gaussian splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with masks, class embeddings and labels.
    Synth {
        /// TOML scene spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn instance features and the codebook.
    Train {
        #[arg(long)]
        scene: PathBuf,
        /// TOML file with an optional `masks` path and a `[train]` table.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mask directory; overrides the config, defaults to `masks/` next to the scene.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach mask embeddings to the trained instances.
    Associate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        assoc: AssocArgs,
    },
    /// Select instances by a precomputed text embedding.
    Query {
        #[arg(long)]
        scene: PathBuf,
        /// Embedding file; the first entry (or the one named by --label) is the query.
        #[arg(long = "text-emb")]
        text_emb: PathBuf,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, conflicts_with = "top1")]
        threshold: Option<f64>,
        /// Most similar instance only (the default).
        #[arg(long)]
        top1: bool,
    },
    /// Point-level mIoU/mAcc against ground-truth class labels.
    Eval3d {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        classes: PathBuf,
        /// One class index per line, one line per point.
        #[arg(long)]
        gt: PathBuf,
    },
    /// Instance under a pixel.
    Click {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        view: usize,
        /// `u,v`
        #[arg(long, value_parser = parse_pixel)]
        pixel: (u32, u32),
    },
    /// Render a bundle view to PNG.
    Export {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
        /// Tint this instance (`coarse:fine`).
        #[arg(long, conflicts_with = "pca")]
        overlay: Option<String>,
        /// Render the instance features as a PCA false-color image.
        #[arg(long)]
        pca: bool,
    },
    /// Serve the HTTP API over one bundle.
    Serve {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Embedding file for resolving class names in /query.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Where POST /save writes; defaults to the scene path.
        #[arg(long)]
        save: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AssocArgs {
    #[arg(long, default_value_t = AssociationConfig::default().tau)]
    tau: f64,
    #[arg(long, default_value_t = AssociationConfig::default().min_score)]
    min_score: f64,
    /// combined, iou_only or feature_only
    #[arg(long, default_value = "combined")]
    mode: String,
}

fn parse_pixel(s: &str) -> std::result::Result<(u32, u32), String> {
    let (u, v) = s.split_once(',').ok_or("expected u,v")?;
    let p = |x: &str| x.trim().parse::<u32>().map_err(|e| e.to_string());
    Ok((p(u)?, p(v)?))
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    masks: Option<PathBuf>,
    train: TrainConfig,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn views(bundle: &Bundle, masks: &Path) -> Result<Vec<View>> {
    let mut by_view = load_masks(masks, Some(&bundle.cameras))?;
    if let Some(v) = by_view.keys().find(|v| **v >= bundle.cameras.len()) {
        bail!("masks reference view {v}, bundle has {} cameras", bundle.cameras.len());
    }
    Ok(bundle
        .cameras
        .iter()
        .enumerate()
        .map(|(v, cam)| View {
            camera: cam.clone(),
            masks: by_view.remove(&v).unwrap_or_default(),
        })
        .collect())
}

fn synth(spec: Option<PathBuf>, out: &Path) -> Result<()> {
    let spec: SyntheticSceneSpec = match spec {
        Some(p) => read_toml(&p)?,
        None => SyntheticSceneSpec::default(),
    };
    let syn = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_bundle(out.join("scene.bundle"), &Bundle::new(syn.scene.clone(), syn.cameras.clone()))?;
    let masks: Vec<_> = syn.views.iter().flat_map(|v| v.masks.clone()).collect();
    save_masks(out.join("masks"), &masks)?;
    save_embeddings(out.join("classes.emb"), &syn.class_embeddings)?;
    let labels: String = syn.class_labels().iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(out.join("labels.txt"), labels)?;
    println!(
        "{} points, {} cameras, {} masks, {} classes -> {}",
        syn.scene.len(),
        syn.cameras.len(),
        masks.len(),
        syn.class_embeddings.len(),
        out.display()
    );
    Ok(())
}

fn train(scene: &Path, config: Option<PathBuf>, masks: Option<PathBuf>, out: &Path) -> Result<()> {
    let file: TrainFile = match config {
        Some(p) => read_toml(&p)?,
        None => TrainFile::default(),
    };
    let masks = masks
        .or(file.masks)
        .unwrap_or_else(|| scene.parent().unwrap_or(Path::new(".")).join("masks"));
    let bundle = load_bundle(scene)?;
    let views = views(&bundle, &masks)?;
    let cfg = file.train;
    info!("stage 1: {} iterations over {} views", cfg.stage1_iters, views.len());
    let s1 = train_stage1(&bundle.scene, &views, &cfg)?;
    info!("stage 2: {} iterations", cfg.stage2_iters);
    let s2 = train_stage2(&bundle.scene, &s1.features, &views, &cfg)?;
    let instances = s2.codebook.instances().len();
    let trained = Bundle {
        scene: bundle.scene.with_features(&s2.quantized)?,
        features: Some(s1.features),
        codebook: Some(s2.codebook),
        table: None,
        ..bundle
    };
    save_bundle(out, &trained)?;
    println!("{instances} instances -> {}", out.display());
    Ok(())
}

fn run_associate(scene: &Path, masks: &Path, out: &Path, args: &AssocArgs) -> Result<()> {
    let bundle = load_bundle(scene)?;
    let (Some(codebook), Some(features)) = (&bundle.codebook, &bundle.features) else {
        bail!("{} is not trained; run `train` first", scene.display());
    };
    let mode = match args.mode.as_str() {
        "combined" => splatseg::association::ScoreMode::Combined,
        "iou_only" => splatseg::association::ScoreMode::IouOnly,
        "feature_only" => splatseg::association::ScoreMode::FeatureOnly,
        other => bail!("unknown mode {other:?}"),
    };
    let cfg = AssociationConfig {
        tau: args.tau,
        min_score: args.min_score,
        mode,
    };
    let views = views(&bundle, masks)?;
    let table = associate(&bundle.scene, codebook, &views, features, &cfg)?;
    let embedded = table.iter().filter(|(_, r)| r.embedding.is_some()).count();
    println!("{embedded}/{} instances received an embedding -> {}", table.len(), out.display());
    save_bundle(out, &Bundle { table: Some(table), ..bundle })?;
    Ok(())
}

fn table_of(bundle: &Bundle, path: &Path) -> Result<splatseg::association::InstanceTable> {
    bundle
        .table
        .clone()
        .with_context(|| format!("{} has no instance table; run `associate` first", path.display()))
}

fn query(scene: &Path, text_emb: &Path, label: Option<String>, threshold: Option<f64>) -> Result<()> {
    let bundle = load_bundle(scene)?;
    let table = table_of(&bundle, scene)?;
    let embeddings = load_embeddings(text_emb)?;
    let query = match &label {
        Some(l) => embeddings.iter().find(|e| &e.label == l).with_context(|| format!("no embedding labeled {l:?}"))?,
        None => embeddings.first().context("embedding file is empty")?,
    };
    let mode = threshold.map_or(SelectMode::Top1, SelectMode::Threshold);
    let sel = text_select(&table, &query.vector, mode)?;
    println!("query {:?}: {} points", query.label, sel.points.len());
    for (id, cos) in &sel.instances {
        println!("{id}\t{cos:.6}\t{}", table.get(*id).map_or(0, |r| r.members.len()));
    }
    Ok(())
}

fn eval3d(scene: &Path, classes: &Path, gt: &Path) -> Result<()> {
    let bundle = load_bundle(scene)?;
    let table = table_of(&bundle, scene)?;
    let classes = load_embeddings(classes)?;
    let text = std::fs::read_to_string(gt).with_context(|| format!("reading {}", gt.display()))?;
    let labels = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<usize>().with_context(|| format!("bad label {l:?}")))
        .collect::<Result<Vec<_>>>()?;
    let pred = classify_points(&table, bundle.scene.len(), &classes)?;
    let report = eval_3d(&pred, &labels)?;
    for c in &report.per_class {
        let name = classes.get(c.class).map_or("?", |e| e.label.as_str());
        println!("{}\t{name}\tIoU {:.4}\tacc {:.4}", c.class, c.iou, c.accuracy);
    }
    println!("mIoU {:.4}\tmAcc {:.4}", report.miou, report.macc);
    Ok(())
}

fn click(scene: &Path, view: usize, pixel: (u32, u32)) -> Result<()> {
    let bundle = load_bundle(scene)?;
    let table = table_of(&bundle, scene)?;
    let cam = bundle.cameras.get(view).with_context(|| format!("no view {view}"))?;
    match click_select(&bundle.scene, &table, cam, pixel)? {
        Some(id) => println!("{id}\t{}", table.get(id).map_or(0, |r| r.members.len())),
        None => println!("none"),
    }
    Ok(())
}

fn export(scene: &Path, view: usize, out: &Path, overlay: Option<String>, pca: bool) -> Result<()> {
    let bundle = load_bundle(scene)?;
    let cam = bundle.cameras.get(view).with_context(|| format!("no view {view}"))?;
    if pca {
        let map = render_feature_map(&bundle.scene, cam, &bundle.scene.features())?;
        export_feature_pca(&map, out)?;
    } else if let Some(id) = overlay {
        let id: InstanceId = id.parse()?;
        let snap = Snapshot {
            scene: Arc::new(bundle.scene.clone()),
            table: Arc::new(table_of(&bundle, scene)?),
            trained: None,
        };
        let img = render_view(&snap, cam, Some(id)).map_err(|e| anyhow::anyhow!(e.message))?;
        export_image(&img, out)?;
    } else {
        export_image(&render_color(&bundle.scene, cam, BACKGROUND), out)?;
    }
    println!("{}", out.display());
    Ok(())
}

async fn serve(scene: PathBuf, addr: SocketAddr, embeddings: Option<PathBuf>, save: Option<PathBuf>) -> Result<()> {
    let bundle = load_bundle(&scene)?;
    let embeddings = embeddings.map(load_embeddings).transpose()?.unwrap_or_default();
    let state = Arc::new(AppState::new(bundle, embeddings, Some(save.unwrap_or(scene))));
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    info!("listening on {}", listener.local_addr()?);
    splatseg_service::serve(state, listener).await?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth { spec, out } => synth(spec, &out),
        Command::Train { scene, config, masks, out } => train(&scene, config, masks, &out),
        Command::Associate { scene, masks, out, assoc } => run_associate(&scene, &masks, &out, &assoc),
        Command::Query { scene, text_emb, label, threshold, top1: _ } => query(&scene, &text_emb, label, threshold),
        Command::Eval3d { scene, classes, gt } => eval3d(&scene, &classes, &gt),
        Command::Click { scene, view, pixel } => click(&scene, view, pixel),
        Command::Export { scene, view, out, overlay, pca } => export(&scene, view, &out, overlay, pca),
        Command::Serve { scene, port, host, embeddings, save } => tokio::runtime::Runtime::new()?
            .block_on(serve(scene, SocketAddr::new(host, port), embeddings, save)),
    }
}
