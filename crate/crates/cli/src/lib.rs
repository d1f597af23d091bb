//! Implementation of the `plvm` subcommands, kept in a library so the
//! integration tests can drive them without spawning processes.

pub mod config;
pub mod http;

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use log::info;
use serde_json::json;

use plvm::archive::{load_backbone, save_backbone, save_checkpoint, Checkpoint};
use plvm::backbone::TinyBackbone;
use plvm::datagen::{
    run_pipeline, ColorClipScorer, DatasetManifest, GroundTruthAnswerer, IdentityAttributes, PipelineConfig,
    PixelFaceScorer, Plugins, ProceduralGenerator, PromptGrammar, Reference, Thresholds,
};
use plvm::encoders::{EncoderRegistry, FeatureExtractor, WEIGHTS_DIR_ENV};
use plvm::evalsuite::{
    emit_report, load_eval_set, run_multiple_choice, run_recognition, EvalReport, ModelEndpoint, RecognitionMetrics, Track,
};
use plvm::image::Image;
use plvm::recipe::{
    evaluate_recognition, pretrain_toy_backbone, toy_aligner, toy_eval_set, write_references, PretrainConfig, ToyWorld,
    ToyWorldConfig, ATTRIBUTES_FILE,
};
use plvm::runtime::Engine;
use plvm::training::sweep::{ablation_sweep, write_csv, SweepGrid, SweepPoint, SweepRow};
use plvm::training::{train, FeatureCache, JsonlMetrics, StepMetrics, TrainObserver, TrainSummary};

use config::{DataSource, RunConfig};

pub type Scalar = f32;

/// The named encoder: a built-in toy encoder or a pretrained preset.
pub fn encoder(name: &str) -> anyhow::Result<Arc<dyn FeatureExtractor<Scalar>>> {
    let mut reg = EncoderRegistry::<Scalar>::new();
    if reg.get(name).is_err() {
        reg.register_pretrained(name)?;
    }
    Ok(reg.get(name)?)
}

/// Where the backbone weights for `cfg` live, if anywhere.
fn backbone_weights(cfg: &RunConfig) -> Option<PathBuf> {
    if let Some(p) = &cfg.backbone.weights {
        return Some(p.clone());
    }
    let dir = std::env::var_os(WEIGHTS_DIR_ENV)?;
    let p = Path::new(&dir).join(format!("{}.plvm", cfg.backbone.name));
    p.exists().then_some(p)
}

/// Loads the configured backbone, or pretrains the tiny one on the toy
/// identities (saved as `<out>/backbone.plvm` for reuse).
pub fn resolve_backbone(
    cfg: &RunConfig,
    encoder: &dyn FeatureExtractor<Scalar>,
    world: Option<&ToyWorld>,
) -> anyhow::Result<TinyBackbone<Scalar>> {
    let d_enc = encoder.spec().feature_dim;
    if let Some(path) = backbone_weights(cfg) {
        info!("loading backbone from {}", path.display());
        let b = load_backbone::<Scalar>(&path).with_context(|| format!("loading {}", path.display()))?;
        if b.config.d_vision != d_enc {
            bail!(
                "backbone {} expects {}-wide vision features but encoder `{}` gives {d_enc}",
                path.display(),
                b.config.d_vision,
                encoder.spec().name
            );
        }
        return Ok(b);
    }
    if cfg.backbone.name != "tiny" {
        bail!(
            "no weights for backbone `{}`: set backbone.weights or put {}.plvm in ${WEIGHTS_DIR_ENV}",
            cfg.backbone.name,
            cfg.backbone.name
        );
    }
    let Some(world) = world else {
        bail!("the tiny backbone is pretrained on the toy identities; set backbone.weights to train on a manifest");
    };
    let pcfg = cfg.pretrain.config();
    let backbone = pretrain(encoder, &world.attributes, &pcfg)?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join("backbone.plvm");
    save_backbone(&path, &backbone, serde_json::to_value(&pcfg)?)?;
    info!("saved pretrained backbone to {} (point backbone.weights at it to reuse)", path.display());
    Ok(backbone)
}

struct RunObserver {
    metrics: JsonlMetrics<BufWriter<File>>,
    checkpoints: PathBuf,
    encoder_id: String,
    creation: serde_json::Value,
    window: f64,
}

impl TrainObserver<Scalar> for RunObserver {
    fn on_step(&mut self, m: &StepMetrics) -> plvm::Result<()> {
        self.window += m.loss;
        if m.step % 50 == 0 {
            info!("step {}: mean loss {:.4} (lr {:.2e})", m.step, self.window / 50.0, m.lr);
            self.window = 0.0;
        }
        TrainObserver::<Scalar>::on_step(&mut self.metrics, m)
    }

    fn on_checkpoint(&mut self, step: usize, aligner: &plvm::aligner::AlignerParams<Scalar>) -> plvm::Result<()> {
        let path = self.checkpoints.join(format!("step_{step:06}.plvm"));
        save_checkpoint(&path, aligner, None, &self.encoder_id, self.creation.clone())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub summary: TrainSummary,
    /// Held-out recognition, toy data only.
    pub heldout: Option<RecognitionMetrics>,
}

/// Features and the training set for `cfg.data`.
fn load_data(
    cfg: &RunConfig,
    world: Option<&ToyWorld>,
    encoder: &dyn FeatureExtractor<Scalar>,
    backbone: &TinyBackbone<Scalar>,
) -> anyhow::Result<(plvm::training::Dataset, FeatureCache<Scalar>)> {
    if let Some(world) = world {
        let cache = FeatureCache::build(&world.dataset(), |id| world.image(id), encoder, backbone)?;
        return Ok((world.dataset(), cache));
    }
    let path = cfg.data.manifest.as_ref().expect("validated");
    let manifest = DatasetManifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let dataset = manifest.to_dataset();
    let cache = FeatureCache::build(
        &dataset,
        |id| {
            let img = manifest
                .image(id)
                .ok_or_else(|| plvm::PlvmError::Manifest(format!("no image `{id}`")))?;
            Image::load(&root.join(&img.path))
        },
        encoder,
        backbone,
    )?;
    Ok((dataset, cache))
}

fn build_world(cfg: &RunConfig) -> anyhow::Result<Option<ToyWorld>> {
    Ok(match cfg.data.source {
        DataSource::Toy => Some(ToyWorld::build(&cfg.data.world())?),
        DataSource::Manifest => None,
    })
}

fn pretrain(
    encoder: &dyn FeatureExtractor<Scalar>,
    identities: &[IdentityAttributes],
    pcfg: &PretrainConfig,
) -> anyhow::Result<TinyBackbone<Scalar>> {
    info!("pretraining the tiny backbone for {} steps", pcfg.steps);
    let mut window = 0.0;
    Ok(pretrain_toy_backbone(encoder, identities, pcfg, |step, loss| {
        window += loss;
        if step % 500 == 0 {
            info!("pretrain step {step}: mean loss {:.4}", window / 500.0);
            window = 0.0;
        }
    })?)
}

/// `plvm pretrain`: the tiny backbone on the toy identities, written as a
/// backbone archive (what `weights/tiny.plvm` ships).
pub fn run_pretrain(world_cfg: &ToyWorldConfig, pcfg: &PretrainConfig, encoder_name: &str, out: &Path) -> anyhow::Result<String> {
    let world = ToyWorld::build(world_cfg)?;
    let enc = encoder(encoder_name)?;
    let backbone = pretrain(enc.as_ref(), &world.attributes, pcfg)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_backbone(out, &backbone, json!({"pretrain": pcfg, "world": world_cfg}))?;
    Ok(plvm::backbone::LanguageBackbone::weight_hash(&backbone))
}

/// `plvm train`.
pub fn run_train(cfg: &RunConfig) -> anyhow::Result<TrainOutcome> {
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let world = build_world(cfg)?;
    let enc = encoder(&cfg.train.encoder)?;
    let backbone = resolve_backbone(cfg, enc.as_ref(), world.as_ref())?;
    let (dataset, cache) = load_data(cfg, world.as_ref(), enc.as_ref(), &backbone)?;
    run_train_with(cfg, world.as_ref(), enc.as_ref(), &backbone, &dataset, &cache)
}

fn run_train_with(
    cfg: &RunConfig,
    world: Option<&ToyWorld>,
    enc: &dyn FeatureExtractor<Scalar>,
    backbone: &TinyBackbone<Scalar>,
    dataset: &plvm::training::Dataset,
    cache: &FeatureCache<Scalar>,
) -> anyhow::Result<TrainOutcome> {
    let out = &cfg.output.dir;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let t = &cfg.train;
    let tc = t.train_config(Some(out.join("dumps")));
    let creation = serde_json::to_value(cfg)?;
    let metrics_path = out.join("metrics.jsonl");
    let mut obs = RunObserver {
        metrics: JsonlMetrics::new(BufWriter::new(File::create(&metrics_path)?)),
        checkpoints: out.join("checkpoints"),
        encoder_id: enc.spec().name.clone(),
        creation: creation.clone(),
        window: 0.0,
    };
    let mut aligner = toy_aligner::<Scalar>(enc.spec().feature_dim, backbone.d_lm(), t.k, t.seed)?;
    let summary = train(&mut aligner, backbone, dataset, cache, &tc, &mut obs)?;
    drop(obs);
    let checkpoint = out.join("checkpoint.plvm");
    save_checkpoint(&checkpoint, &aligner, Some(backbone), &enc.spec().name, creation)?;
    info!("saved {}", checkpoint.display());
    let heldout = match world {
        Some(w) => {
            let m = evaluate_recognition(w, enc, backbone, &aligner)?;
            info!("held-out recognition: pos {:.1} neg {:.1} mean {:.1}", m.pos, m.neg, m.mean);
            std::fs::write(out.join("heldout.json"), serde_json::to_vec_pretty(&m)?)?;
            Some(m)
        }
        None => None,
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics: metrics_path,
        summary,
        heldout,
    })
}

/// `plvm sweep`: one-at-a-time grid on the toy data, one CSV row per point.
pub fn run_sweep(cfg: &RunConfig, csv: &Path) -> anyhow::Result<Vec<SweepRow>> {
    if cfg.data.source != DataSource::Toy {
        bail!("sweeps score held-out toy renderings; set data.source = \"toy\"");
    }
    let world = ToyWorld::build(&cfg.data.world())?;
    let grid = SweepGrid {
        base: SweepPoint {
            w: cfg.train.w,
            k: cfg.train.k,
            p: cfg.train.p,
            encoder: cfg.train.encoder.clone(),
        },
        w: cfg.sweep.w.clone(),
        k: cfg.sweep.k.clone(),
        p: cfg.sweep.p.clone(),
        encoders: cfg.sweep.encoders.clone(),
    };
    // one backbone (and feature cache) per encoder
    let mut stacks: HashMap<String, (Arc<dyn FeatureExtractor<Scalar>>, TinyBackbone<Scalar>, FeatureCache<Scalar>)> =
        HashMap::new();
    let rows = ablation_sweep(&grid.points(), |pt| {
        let run = |pt: &SweepPoint, stacks: &mut HashMap<_, _>| -> anyhow::Result<RecognitionMetrics> {
            let mut c = cfg.clone();
            c.train.w = pt.w;
            c.train.k = pt.k;
            c.train.p = pt.p;
            c.train.encoder = pt.encoder.clone();
            c.output.dir = cfg.output.dir.join(pt.label());
            if !stacks.contains_key(&pt.encoder) {
                let enc = encoder(&pt.encoder)?;
                let mut bc = cfg.clone();
                if pt.encoder != cfg.train.encoder {
                    bc.backbone.weights = None;
                }
                bc.output.dir = cfg.output.dir.join(format!("backbone-{}", pt.encoder));
                let bb = resolve_backbone(&bc, enc.as_ref(), Some(&world))?;
                let cache = FeatureCache::build(&world.dataset(), |id| world.image(id), enc.as_ref(), &bb)?;
                stacks.insert(pt.encoder.clone(), (enc, bb, cache));
            }
            let (enc, bb, cache) = &stacks[&pt.encoder];
            let o = run_train_with(&c, Some(&world), enc.as_ref(), bb, &world.dataset(), cache)?;
            Ok(o.heldout.expect("toy data"))
        };
        run(pt, &mut stacks).map_err(|e| plvm::PlvmError::InvalidConfig(format!("{}: {e:#}", pt.label())))
    })?;
    if let Some(dir) = csv.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(&rows, csv)?;
    Ok(rows)
}

pub struct SynthArgs {
    pub refs: PathBuf,
    pub out: PathBuf,
    pub per_ref: usize,
    pub clip_min: f64,
    pub face_min: f64,
    pub seed: u64,
}

/// `plvm synth`: every PNG/JPEG in `refs` is one identity named by its file
/// stem. An optional `attributes.json` there supplies attribute answers.
pub fn run_synth(a: &SynthArgs) -> anyhow::Result<DatasetManifest> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&a.refs)
        .with_context(|| format!("reading {}", a.refs.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no reference images in {}", a.refs.display());
    }
    let mut references = Vec::new();
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 file name")?;
        references.push(Reference {
            identity_id: stem.to_string(),
            image: Image::load(f)?,
        });
    }
    let mut answerer = GroundTruthAnswerer::default();
    let attrs = a.refs.join(ATTRIBUTES_FILE);
    if attrs.exists() {
        let known: BTreeMap<String, IdentityAttributes> = serde_json::from_slice(&std::fs::read(&attrs)?)?;
        answerer.identities.extend(known);
    } else {
        info!("no {ATTRIBUTES_FILE} in {}; attribute questions are skipped", a.refs.display());
    }
    let grammar = PromptGrammar::default();
    let generator = ProceduralGenerator::default();
    let clip = ColorClipScorer::default();
    let plugins = Plugins {
        grammar: &grammar,
        generator: &generator,
        clip: &clip,
        face: &PixelFaceScorer,
        answerer: &answerer,
    };
    let pipeline = PipelineConfig {
        per_ref: a.per_ref,
        thresholds: Thresholds {
            clip_min: a.clip_min,
            face_min: a.face_min,
        },
        seed: a.seed,
        ..Default::default()
    };
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let (manifest, _) = run_pipeline(&references, &pipeline, &plugins, Some(dir))?;
    manifest.save(&a.out)?;
    let s = &manifest.stats;
    info!("wrote {} ({s:?})", a.out.display());
    Ok(manifest)
}

/// Engine for a checkpoint that bundles its backbone.
pub fn load_engine(checkpoint: &Path) -> anyhow::Result<Engine<Scalar>> {
    let ck = Checkpoint::<Scalar>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut reg = EncoderRegistry::<Scalar>::new();
    if reg.get(&ck.encoder_id).is_err() {
        reg.register_pretrained(&ck.encoder_id)?;
    }
    Ok(Engine::from_checkpoint(ck, &reg)?)
}

/// `plvm eval`. `endpoint` is `local` (needs `checkpoint`) or a base URL.
pub fn run_eval(set: &Path, endpoint: &str, checkpoint: Option<&Path>, report: &Path) -> anyhow::Result<EvalReport> {
    let eval_set = load_eval_set(set)?;
    let mut ep: Box<dyn ModelEndpoint> = if endpoint == "local" {
        let ck = checkpoint.context("--endpoint local needs --checkpoint")?;
        Box::new(load_engine(ck)?)
    } else if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Box::new(http::HttpEndpoint::new(endpoint)?)
    } else {
        bail!("--endpoint must be `local` or an http(s) URL, got {endpoint:?}");
    };
    let rec = run_recognition(ep.as_mut(), &eval_set)?;
    let track = |t: Track| eval_set.questions.iter().filter(|q| q.track == t).cloned().collect::<Vec<_>>();
    let (text, visual) = (track(Track::Text), track(Track::Visual));
    let text_acc = match text.is_empty() {
        true => None,
        false => Some(run_multiple_choice(ep.as_mut(), &eval_set, &text, false)?.accuracy),
    };
    let visual_acc = match visual.is_empty() {
        true => None,
        false => Some(run_multiple_choice(ep.as_mut(), &eval_set, &visual, true)?.accuracy),
    };
    let r = EvalReport {
        recognition: rec.overall,
        text_only_accuracy: text_acc,
        visual_accuracy: visual_acc,
        per_identity: rec.per_identity,
        config: json!({
            "set": set,
            "endpoint": endpoint,
            "checkpoint": checkpoint,
            "failures": rec.failures,
        }),
    };
    if let Some(dir) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    emit_report(&r, report)?;
    Ok(r)
}

/// `plvm serve`; blocks until ctrl-c, then writes the session snapshot.
pub fn run_serve(checkpoint: &Path, addr: SocketAddr, sessions: Option<&Path>) -> anyhow::Result<()> {
    let engine = load_engine(checkpoint)?;
    let store = match sessions {
        Some(p) if p.exists() => plvm_service::SessionStore::load(p)?,
        _ => plvm_service::SessionStore::default(),
    };
    let state = plvm_service::AppState::with_sessions(engine, store);
    info!("weights hash {}", state.weights_hash());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(plvm_service::serve(state.clone(), addr))?;
    if let Some(p) = sessions {
        state.sessions().save(p)?;
        info!("saved sessions to {}", p.display());
    }
    Ok(())
}

/// `plvm toy`: references (with attributes) for `plvm synth` and an eval
/// set of held-out renderings for `plvm eval`.
pub fn run_toy(world_cfg: &ToyWorldConfig, out: &Path) -> anyhow::Result<()> {
    let world = ToyWorld::build(world_cfg)?;
    write_references(&world, &out.join("refs"))?;
    let set = toy_eval_set(&world, &out.join("eval"), world_cfg.seed)?;
    info!(
        "wrote {} references and an eval set of {} pairs / {} questions under {}",
        world.references.len(),
        set.pairs.len(),
        set.questions.len(),
        out.display()
    );
    Ok(())
}
