//! Commands behind the `contourlm` binary.
//!
//! Every command takes a config file and an output root, writes its
//! artifacts plus a `*.manifest.json` there, and holds a lock file for the
//! duration so two commands cannot write the same root at once.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use contourlm::codec;
use contourlm::config::{file_sha256, LineageEntry, PipelineConfig, RunManifest};
use contourlm::evaluation::{evaluate_model, read_dump, write_dump, EvalMode, EvalResult, GreedyPredictor, SampleDump};
use contourlm::geometry::{BBox, Polygon};
use contourlm::model::checkpoint;
use contourlm::model::Model;
use contourlm::synthdata::{self, build_dataset, load_split, CropSample, GrayImage, Split, TEST_CROP_SCALE};
use contourlm::training::{self, MinedPair, Stage, TrainLog};

pub mod render;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] contourlm::Error),
    #[error("output directory {0} is locked by another command (remove the .lock file if stale)")]
    Locked(PathBuf),
    #[error("could not decode model output ({reason}); raw tokens: {tokens}")]
    Decode { reason: String, tokens: String },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 config, 3 lineage or stage order, 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use contourlm::Error as E;
        match self {
            CliError::Core(E::Config(_)) => 2,
            CliError::Core(E::StageOrder(_)) => 3,
            CliError::Core(E::NonFinite(_)) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Exclusive marker on an output root, removed on drop.
pub struct OutLock {
    path: PathBuf,
}

impl OutLock {
    pub fn acquire(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)?;
        let path = root.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(root.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Config file (or defaults) with an optional seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

/// Full source scene of a test sample, written by `gen-data`.
pub fn source_image_path(data: &Path, source_id: &str) -> PathBuf {
    data.join("sources").join(format!("{source_id}.pgm"))
}

pub fn stage_dir(out: &Path, stage: Stage) -> PathBuf {
    out.join(stage.name())
}

pub fn checkpoint_path(out: &Path, stage: Stage) -> PathBuf {
    stage_dir(out, stage).join("model.safetensors")
}

pub fn pairs_path(out: &Path) -> PathBuf {
    out.join("pairs").join("pairs.jsonl")
}

fn write_manifest(out: &Path, name: &str, m: &RunManifest) -> CliResult<PathBuf> {
    let p = out.join(format!("{name}.manifest.json"));
    m.write(&p)?;
    Ok(p)
}

fn entry(kind: &str, path: &Path) -> CliResult<LineageEntry> {
    Ok(LineageEntry { kind: kind.into(), path: path.display().to_string(), sha256: file_sha256(path)? })
}

fn lineage_of(meta: &std::collections::HashMap<String, String>) -> CliResult<Vec<LineageEntry>> {
    match meta.get("lineage") {
        Some(s) => Ok(serde_json::from_str(s).map_err(contourlm::Error::from)?),
        None => Ok(Vec::new()),
    }
}

/// Generates the dataset under `<out>/data`.
pub fn cmd_gen_data(cfg: &PipelineConfig, out: &Path) -> CliResult<RunManifest> {
    let _lock = OutLock::acquire(out)?;
    let dir = data_dir(out);
    let d = &cfg.data;
    let manifest = build_dataset([d.n_train, d.n_val, d.n_test], &d.gen, cfg.seed, &dir)?;
    // Full test scenes, so `infer` has realistic inputs.
    let sources = dir.join("sources");
    fs::create_dir_all(&sources)?;
    for i in 0..d.n_test {
        let (scene, rec) = synthdata::generate_scene(&d.gen, cfg.seed, Split::Test, i)?;
        scene.save_pgm(&source_image_path(&dir, &rec.sample.source_id))?;
    }
    let mut run = RunManifest::new("gen-data", cfg);
    let mpath = dir.join("manifest.json");
    run.outputs.push(mpath.display().to_string());
    run.lineage.push(entry("data", &mpath)?);
    write_manifest(out, "gen-data", &run)?;
    println!(
        "generated {} train / {} val / {} test samples in {}",
        manifest.counts[0],
        manifest.counts[1],
        manifest.counts[2],
        dir.display()
    );
    Ok(run)
}

fn load_samples(data: &Path, split: Split) -> CliResult<Vec<CropSample>> {
    Ok(load_split(data, split)?.into_iter().map(|r| r.sample).collect())
}

/// Options of the `train` command beyond the config.
#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub mine_pairs: bool,
}

fn require_stage(meta: &std::collections::HashMap<String, String>, want: Stage, path: &Path) -> CliResult<()> {
    match meta.get("stage").map(String::as_str) {
        Some(s) if s == want.name() => Ok(()),
        other => Err(contourlm::Error::StageOrder(format!(
            "{} holds a {} checkpoint but a {} checkpoint is required",
            path.display(),
            other.unwrap_or("unlabelled"),
            want.name()
        ))
        .into()),
    }
}

/// Runs one training stage and writes `<out>/<stage>/{model.safetensors,train_log.jsonl}`.
pub fn cmd_train(cfg: &PipelineConfig, stage: Stage, out: &Path, args: &TrainArgs) -> CliResult<RunManifest> {
    let data = args.data.clone().unwrap_or_else(|| data_dir(out));
    let data_manifest = data.join("manifest.json");
    let mut run = RunManifest::new(&format!("train --stage {}", stage.name()), cfg);

    // Lineage checks happen before the lock so they fail fast.
    let prev = match stage {
        Stage::Pretrain => None,
        Stage::Sft => Some(Stage::Pretrain),
        Stage::Dpo => Some(Stage::Sft),
    };
    let init = args.init.clone().or_else(|| prev.map(|p| checkpoint_path(out, p)));
    let mut model: Model<f32>;
    let mut lineage;
    match (&init, prev) {
        (Some(p), Some(need)) => {
            if !p.exists() {
                return Err(contourlm::Error::StageOrder(format!(
                    "{} requires a {} checkpoint; {} does not exist",
                    stage.name(),
                    need.name(),
                    p.display()
                ))
                .into());
            }
            let (m, meta) = checkpoint::load::<f32>(p)?;
            require_stage(&meta, need, p)?;
            lineage = lineage_of(&meta)?;
            lineage.push(entry(need.name(), p)?);
            run.inputs.push(p.display().to_string());
            model = m;
        }
        (Some(p), None) => {
            let (m, meta) = checkpoint::load::<f32>(p)?;
            lineage = lineage_of(&meta)?;
            lineage.push(entry("init", p)?);
            run.inputs.push(p.display().to_string());
            model = m;
        }
        (None, _) => {
            model = Model::new(cfg.model_config())?;
            lineage = vec![entry("data", &data_manifest)?];
        }
    }
    if stage == Stage::Dpo {
        let pp = args.pairs.clone().unwrap_or_else(|| pairs_path(out));
        if !pp.exists() && !args.mine_pairs {
            return Err(contourlm::Error::StageOrder(format!(
                "dpo requires preference pairs at {} (run mine-pairs or pass --mine-pairs)",
                pp.display()
            ))
            .into());
        }
    }

    let _lock = OutLock::acquire(out)?;
    run.inputs.push(data_manifest.display().to_string());
    let scfg = cfg.stage(stage);
    let log: TrainLog = match stage {
        Stage::Pretrain | Stage::Sft => {
            let train = load_samples(&data, Split::Train)?;
            let val = load_samples(&data, Split::Val)?;
            if stage == Stage::Pretrain {
                training::run_pretrain(&scfg, &mut model, &train, &val)?
            } else {
                training::run_sft(&scfg, &mut model, &train, &val)?
            }
        }
        Stage::Dpo => {
            let train = load_samples(&data, Split::Train)?;
            let pp = args.pairs.clone().unwrap_or_else(|| pairs_path(out));
            let mined = if args.mine_pairs {
                let (pairs, stats) = training::mine_preferences(&model, &train, &cfg.mining_config())?;
                write_pairs(&pp, &pairs)?;
                println!("mined {} pairs: {stats:?}", pairs.len());
                pairs
            } else {
                read_pairs(&pp)?
            };
            run.inputs.push(pp.display().to_string());
            let reference = model.clone();
            let items: Vec<(&CropSample, &codec::PreferencePair)> = mined
                .iter()
                .map(|p| {
                    train.get(p.sample_index).map(|s| (s, &p.pair)).ok_or_else(|| {
                        contourlm::Error::Config(format!("pair refers to missing sample {}", p.sample_index))
                    })
                })
                .collect::<Result<_, _>>()?;
            training::run_dpo(&scfg, &mut model, &reference, &items)?
        }
    };
    let dir = stage_dir(out, stage);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("train_log.jsonl"), log.to_jsonl()?)?;
    let ck = checkpoint_path(out, stage);
    checkpoint::save(
        &model,
        &ck,
        &[
            ("stage", stage.name().to_string()),
            ("lineage", serde_json::to_string(&lineage).map_err(contourlm::Error::from)?),
            ("config_hash", cfg.hash()),
        ],
    )?;
    lineage.push(entry(stage.name(), &ck)?);
    run.lineage = lineage;
    run.outputs.push(ck.display().to_string());
    run.outputs.push(dir.join("train_log.jsonl").display().to_string());
    write_manifest(out, &format!("train-{}", stage.name()), &run)?;
    if let Some(last) = log.steps().last() {
        println!("{}: {} steps, final loss {:.4}, checkpoint {}", stage.name(), last.step + 1, last.loss, ck.display());
    }
    Ok(run)
}

pub fn write_pairs(path: &Path, pairs: &[MinedPair]) -> CliResult<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(p).map_err(contourlm::Error::from)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_pairs(path: &Path) -> CliResult<Vec<MinedPair>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(contourlm::Error::from)?)
}

/// Mines preference pairs on the training split with a fine-tuned checkpoint.
pub fn cmd_mine_pairs(cfg: &PipelineConfig, out: &Path, ckpt: Option<&Path>, data: Option<&Path>) -> CliResult<RunManifest> {
    let ck = ckpt.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(out, Stage::Sft));
    if !ck.exists() {
        return Err(contourlm::Error::StageOrder(format!("mining needs an sft checkpoint; {} does not exist", ck.display())).into());
    }
    let (model, meta) = checkpoint::load::<f32>(&ck)?;
    require_stage(&meta, Stage::Sft, &ck)?;
    let _lock = OutLock::acquire(out)?;
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| data_dir(out));
    let train = load_samples(&data, Split::Train)?;
    let (pairs, stats) = training::mine_preferences(&model, &train, &cfg.mining_config())?;
    let pp = pairs_path(out);
    write_pairs(&pp, &pairs)?;
    fs::write(pp.with_file_name("stats.json"), serde_json::to_string_pretty(&stats).map_err(contourlm::Error::from)?)?;
    let mut run = RunManifest::new("mine-pairs", cfg);
    run.inputs.push(ck.display().to_string());
    run.lineage = lineage_of(&meta)?;
    run.lineage.push(entry("sft", &ck)?);
    run.outputs.push(pp.display().to_string());
    write_manifest(out, "mine-pairs", &run)?;
    println!(
        "mined {} pairs ({} from predictions, {} from corruptions, {} decode failures)",
        pairs.len(),
        stats.prediction_pairs,
        stats.corruption_pairs,
        stats.decode_failures
    );
    Ok(run)
}

/// Prediction for one source image and box.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InferOutput {
    pub polygon: Polygon,
    pub crop_polygon: Polygon,
    pub window: BBox,
    pub tokens: String,
}

pub fn infer(model: &Model<f32>, image: &GrayImage, bbox: &BBox) -> CliResult<InferOutput> {
    let (crop, window) = synthdata::crop_image(image, bbox, TEST_CROP_SCALE)?;
    let ids = GreedyPredictor::new(model).predict_images(&[&crop])?.remove(0);
    let vocab = model.config.vocab();
    let tokens = vocab.render(&ids);
    let crop_polygon = codec::decode_tokens(&vocab, &ids)
        .map_err(|e| CliError::Decode { reason: e.to_string(), tokens: tokens.clone() })?;
    let polygon = synthdata::crop_to_source(&crop_polygon, &window)?;
    Ok(InferOutput { polygon, crop_polygon, window, tokens })
}

pub fn cmd_infer(ckpt: &Path, image: &Path, bbox: &BBox, out: Option<&Path>) -> CliResult<InferOutput> {
    let (model, _) = checkpoint::load::<f32>(ckpt)?;
    let img = GrayImage::load(image)?;
    let res = infer(&model, &img, bbox)?;
    if let Some(o) = out {
        fs::write(o, serde_json::to_string_pretty(&res).map_err(contourlm::Error::from)?)?;
    }
    Ok(res)
}

/// Oracle-box evaluation on one split; writes `result.json` and `dump.jsonl`.
pub fn cmd_eval(cfg: &PipelineConfig, ckpt: &Path, data: &Path, split: Split, out: &Path) -> CliResult<EvalResult> {
    let (model, meta) = checkpoint::load::<f32>(ckpt)?;
    let _lock = OutLock::acquire(out)?;
    let records = load_split(data, split)?;
    let (result, dumps) = evaluate_model(&GreedyPredictor::new(&model), &records, EvalMode::OracleBox)?;
    let dir = out.join("eval");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("result.json"), serde_json::to_string_pretty(&result).map_err(contourlm::Error::from)?)?;
    write_dump(&dir.join("dump.jsonl"), &dumps)?;
    let mut run = RunManifest::new("eval", cfg);
    run.inputs.push(ckpt.display().to_string());
    run.inputs.push(data.join("manifest.json").display().to_string());
    run.lineage = lineage_of(&meta)?;
    run.lineage.push(entry(meta.get("stage").map(String::as_str).unwrap_or("checkpoint"), ckpt)?);
    run.outputs.push(dir.join("result.json").display().to_string());
    run.outputs.push(dir.join("dump.jsonl").display().to_string());
    write_manifest(out, "eval", &run)?;
    Ok(result)
}

/// Writes one SVG and one PNG overlay per dump line.
pub fn cmd_render(dump: &Path, out: &Path, limit: Option<usize>, data: Option<&Path>) -> CliResult<usize> {
    let dumps: Vec<SampleDump> = read_dump(dump)?;
    let dir = out.join("render");
    fs::create_dir_all(&dir)?;
    let mut n = 0;
    for d in dumps.iter().take(limit.unwrap_or(usize::MAX)) {
        let crop = data.and_then(|root| find_crop(root, &d.source_id));
        render::write_overlay(&dir, d, crop.as_ref())?;
        n += 1;
    }
    Ok(n)
}

fn find_crop(root: &Path, id: &str) -> Option<GrayImage> {
    Split::ALL.iter().find_map(|s| GrayImage::load(&root.join(s.name()).join(format!("{id}.pgm"))).ok())
}

/// Parses `x0,y0,x1,y1`.
pub fn parse_bbox(s: &str) -> CliResult<BBox> {
    let v: Vec<i32> = s
        .split(',')
        .map(|t| t.trim().parse::<i32>())
        .collect::<Result<_, _>>()
        .map_err(|e| contourlm::Error::Config(format!("bbox {s:?}: {e}")))?;
    if v.len() != 4 {
        return Err(contourlm::Error::Config(format!("bbox {s:?} needs four integers")).into());
    }
    Ok(BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| contourlm::Error::Config(e.to_string()))?)
}

/// Creates a file, making parent directories as needed.
pub fn create_file(path: &Path) -> CliResult<File> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    Ok(File::create(path)?)
}
