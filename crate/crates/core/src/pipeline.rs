//! File-based stages: data generation, supervised corpus, training,
//! evaluation, probes, reports and provenance verification.
//!
//! Every artifact records the config hash and seed: CSV files in a leading
//! `# config_hash=... seed=...` line, SVG files in an XML comment, JSON and
//! JSONL files in a header object, checkpoints in their binary header.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, history_shuffle_raw_csv, history_shuffle_summary_csv, history_shuffle_svg, position_csv,
    position_svg, probe_history_shuffle, probe_position, report_csv, report_svg, write_artifact, ArtifactMeta,
    EvalReport, PolicyScorer, ReportMeta,
};
use crate::policy::{self, CheckpointHeader, PolicyParams, Vocab};
use crate::synth::{
    build_dataset, build_sft_corpus, load_jsonl, load_sft_jsonl, save_jsonl, save_sft_jsonl, JsonlHeader,
    RankingInstance, SftStats, Split, World,
};
use crate::training::{rl_train, sft_train, Stage, RL_METRICS_HEADER, SFT_METRICS_HEADER};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const SFT_CORPUS: &str = "sft.jsonl";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";

fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

pub fn final_checkpoint(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("{}-final.ckpt", stage_name(stage)))
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Sft => "sft",
        Stage::Rl => "rl",
    }
}

fn meta(cfg: &RunConfig) -> ArtifactMeta {
    ArtifactMeta {
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
    }
}

fn header(cfg: &RunConfig) -> JsonlHeader {
    JsonlHeader::new(Some(cfg.hash_hex()), Some(cfg.seed))
}

fn ckpt_header(cfg: &RunConfig) -> CheckpointHeader {
    CheckpointHeader {
        config_hash: cfg.hash_bytes(),
        seed: cfg.seed,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Dumps the effective configuration next to a stage's outputs.
fn dump_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_artifact(&dir.join(EFFECTIVE_CONFIG), &cfg.to_json_pretty())
}

fn vocab(cfg: &RunConfig) -> Result<Vocab> {
    Vocab::new(cfg.world.dims, cfg.world.buckets)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub skipped: usize,
}

/// Generates the world and writes one instance file per split.
pub fn gen_data(cfg: &RunConfig) -> Result<DataSummary> {
    cfg.validate()?;
    let world = World::generate(&cfg.world, cfg.seed)?;
    let ds = build_dataset(&world)?;
    let dir = &cfg.paths.data_dir;
    ensure_dir(dir)?;
    for split in [Split::Train, Split::Valid, Split::Test] {
        save_jsonl(ds.split(split), &header(cfg), &dir.join(split_file(split)))?;
    }
    dump_config(cfg, dir)?;
    log::info!(
        "wrote {} train / {} valid / {} test instances ({} users skipped)",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len(),
        ds.skipped
    );
    Ok(DataSummary {
        train: ds.train.len(),
        valid: ds.valid.len(),
        test: ds.test.len(),
        skipped: ds.skipped,
    })
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<RankingInstance>> {
    let path = cfg.paths.data_dir.join(split_file(split));
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing instance file {} (run gen-data first)",
            path.display()
        )));
    }
    let (_, instances) = load_jsonl(&path)?;
    for inst in &instances {
        inst.validate(cfg.world.dims)?;
    }
    Ok(instances)
}

/// Builds the filtered supervised corpus from the train split.
pub fn build_sft(cfg: &RunConfig) -> Result<SftStats> {
    cfg.validate()?;
    let train = load_split(cfg, Split::Train)?;
    let (corpus, stats) = build_sft_corpus(&train, &vocab(cfg)?, cfg.train.teacher_noise, cfg.max_history(), cfg.seed)?;
    save_sft_jsonl(&corpus, &header(cfg), &cfg.paths.data_dir.join(SFT_CORPUS))?;
    dump_config(cfg, &cfg.paths.data_dir)?;
    log::info!("kept {} supervised examples, rejected {}", stats.kept, stats.rejected);
    Ok(stats)
}

pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<PolicyParams> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    let (params, _) = policy::load(path)?;
    if params.config != cfg.model || params.vocab != vocab(cfg)? {
        return Err(Error::Config(format!(
            "checkpoint {} was built for a different model or vocabulary",
            path.display()
        )));
    }
    Ok(params)
}

fn metrics_csv(cfg: &RunConfig, header: &str, rows: impl Iterator<Item = String>) -> String {
    let m = meta(cfg);
    let mut out = format!("# config_hash={} seed={}\n{header}\n", m.config_hash, m.seed);
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Runs one training stage. RL starts from `init` when given, otherwise from
/// a fresh initialization; SFT always starts fresh unless `init` is given.
pub fn train(cfg: &RunConfig, stage: Stage, init: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let mut params = match init {
        Some(p) => load_checkpoint(cfg, p)?,
        None => PolicyParams::init(cfg.model, vocab(cfg)?, cfg.seed)?,
    };
    let ckpt_dir = cfg.paths.checkpoint_dir.clone();
    ensure_dir(&ckpt_dir)?;
    let name = stage_name(stage);
    let hdr = ckpt_header(cfg);
    let mut hook = |step: usize, p: &PolicyParams| policy::save(p, &hdr, &ckpt_dir.join(format!("{name}-step{step}.ckpt")));
    let csv = match stage {
        Stage::Sft => {
            let path = cfg.paths.data_dir.join(SFT_CORPUS);
            if !path.exists() {
                return Err(Error::Config(format!("missing corpus {} (run build-sft first)", path.display())));
            }
            let (_, corpus) = load_sft_jsonl(&path)?;
            let log = sft_train(&mut params, &corpus, &cfg.train, cfg.seed, &mut hook)?;
            metrics_csv(cfg, SFT_METRICS_HEADER, log.iter().map(|m| m.csv_row()))
        }
        Stage::Rl => {
            let train = load_split(cfg, Split::Train)?;
            let log = rl_train(&mut params, &train, &cfg.train, cfg.max_history(), cfg.seed, cfg.workers, &mut hook)?;
            metrics_csv(cfg, RL_METRICS_HEADER, log.iter().map(|m| m.csv_row()))
        }
    };
    let out = final_checkpoint(cfg, stage);
    policy::save(&params, &hdr, &out)?;
    write_artifact(&cfg.paths.report_dir.join(format!("{name}_metrics.csv")), &csv)?;
    dump_config(cfg, &ckpt_dir)?;
    dump_config(cfg, &cfg.paths.report_dir)?;
    Ok(out)
}

/// Checkpoint file name plus the first 16 hex digits of its SHA-256.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(format!("{name}@{}", &digest[..16]))
}

/// The checkpoint used by eval and probes when none is named: the RL result
/// if present, else the SFT result.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    let rl = final_checkpoint(cfg, Stage::Rl);
    if rl.exists() {
        rl
    } else {
        let sft = final_checkpoint(cfg, Stage::Sft);
        if sft.exists() {
            sft
        } else {
            rl
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StampedReport {
    config_hash: String,
    seed: u64,
    report: EvalReport,
}

/// Evaluates a checkpoint on the configured split and writes the report.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg));
    let params = load_checkpoint(cfg, &path)?;
    let instances = load_split(cfg, cfg.eval.split)?;
    let scorer = PolicyScorer {
        params: &params,
        max_history: cfg.max_history(),
        mode: cfg.train.gen_mode(),
    };
    let evaluation = evaluate(&scorer, &instances, &cfg.eval.cutoffs, cfg.workers)?;
    let mut report = EvalReport::new(&evaluation, ReportMeta::new(cfg.hash_hex(), checkpoint_id(&path)?, cfg.seed));
    for spec in &cfg.eval.strata {
        report = report.with_strata(&evaluation, spec)?;
    }
    let stamped = StampedReport {
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        report,
    };
    let dir = &cfg.paths.report_dir;
    let mut json = serde_json::to_string_pretty(&stamped).expect("report serializes");
    json.push('\n');
    write_artifact(&dir.join(EVAL_REPORT_JSON), &json)?;
    render_report(cfg, &stamped.report)?;
    dump_config(cfg, dir)?;
    Ok(stamped.report)
}

fn render_report(cfg: &RunConfig, report: &EvalReport) -> Result<()> {
    let dir = &cfg.paths.report_dir;
    let m = meta(cfg);
    write_artifact(&dir.join("eval_report.csv"), &report_csv(report, &m))?;
    write_artifact(&dir.join("eval_report.svg"), &report_svg(report, &m))
}

/// Re-renders CSV and SVG views of the stored evaluation report.
pub fn report(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let path = cfg.paths.report_dir.join(EVAL_REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stamped: StampedReport =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if stamped.config_hash != cfg.hash_hex() {
        return Err(Error::Config(format!(
            "{} was produced under config hash {}, current is {}",
            path.display(),
            stamped.config_hash,
            cfg.hash_hex()
        )));
    }
    render_report(cfg, &stamped.report)?;
    Ok(stamped.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Position,
    HistoryShuffle,
}

impl std::str::FromStr for ProbeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(ProbeKind::Position),
            "history-shuffle" => Ok(ProbeKind::HistoryShuffle),
            _ => Err(Error::Config(format!("unknown probe {s:?}"))),
        }
    }
}

/// Runs a probe on the configured split and writes its CSV and SVG files.
pub fn probe(cfg: &RunConfig, kind: ProbeKind, checkpoint: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| default_checkpoint(cfg));
    let params = load_checkpoint(cfg, &path)?;
    let instances: Vec<RankingInstance> = load_split(cfg, cfg.eval.split)?
        .into_iter()
        .filter(|i| i.positive().is_some())
        .collect();
    let scorer = PolicyScorer {
        params: &params,
        max_history: cfg.max_history(),
        mode: cfg.train.gen_mode(),
    };
    let dir = &cfg.paths.report_dir;
    let m = meta(cfg);
    let files: Vec<(PathBuf, String)> = match kind {
        ProbeKind::Position => {
            let p = probe_position(&scorer, &instances, &cfg.eval.probe_positions, cfg.workers)?;
            vec![
                (dir.join("probe_position.csv"), position_csv(&p, &m)),
                (dir.join("probe_position.svg"), position_svg(&p, &m)),
            ]
        }
        ProbeKind::HistoryShuffle => {
            let p = probe_history_shuffle(&scorer, &instances, cfg.eval.n_shuffles, cfg.seed, cfg.workers)?;
            vec![
                (dir.join("probe_history_shuffle_raw.csv"), history_shuffle_raw_csv(&p, &m)),
                (dir.join("probe_history_shuffle.csv"), history_shuffle_summary_csv(&p, &m)),
                (dir.join("probe_history_shuffle.svg"), history_shuffle_svg(&p, &m)),
            ]
        }
    };
    for (p, contents) in &files {
        write_artifact(p, contents)?;
    }
    dump_config(cfg, dir)?;
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

/// Outcome of checking one artifact's recorded provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Verified {
    pub path: PathBuf,
    pub ok: bool,
    pub detail: String,
}

fn stamp_of(path: &Path) -> Result<Option<(String, u64)>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let read = || std::fs::read_to_string(path).map_err(|e| Error::io(path, e));
    let parse_stamp = |s: &str| -> Option<(String, u64)> {
        let hash = s.split("config_hash=").nth(1)?.split_whitespace().next()?.to_string();
        let seed = s.split("seed=").nth(1)?.split_whitespace().next()?.parse().ok()?;
        Some((hash, seed))
    };
    Ok(match ext {
        "csv" => read()?.lines().next().and_then(parse_stamp),
        "svg" => read()?.lines().find(|l| l.starts_with("<!--")).and_then(parse_stamp),
        "jsonl" => {
            let text = read()?;
            let first = text.lines().next().unwrap_or("");
            serde_json::from_str::<JsonlHeader>(first)
                .ok()
                .and_then(|h| Some((h.config_hash?, h.seed?)))
        }
        "json" => {
            let v: serde_json::Value = serde_json::from_str(&read()?).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            if path.file_name().is_some_and(|n| n == EFFECTIVE_CONFIG) {
                let c: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
                Some((c.hash_hex(), c.seed))
            } else {
                let hash = v.get("config_hash").and_then(|h| h.as_str());
                let seed = v.get("seed").and_then(|s| s.as_u64());
                hash.zip(seed).map(|(h, s)| (h.to_string(), s))
            }
        }
        "ckpt" => {
            let (_, h) = policy::load(path)?;
            Some((hex::encode(h.config_hash), h.seed))
        }
        _ => return Ok(None),
    })
}

/// Re-hashes the configuration and checks the stamp of every artifact in
/// the configured output directories.
pub fn verify(cfg: &RunConfig) -> Result<Vec<Verified>> {
    cfg.validate()?;
    let want = (cfg.hash_hex(), cfg.seed);
    let mut out = Vec::new();
    for dir in [&cfg.paths.data_dir, &cfg.paths.checkpoint_dir, &cfg.paths.report_dir] {
        let Ok(entries) = std::fs::read_dir(dir) else { continue };
        let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        paths.sort();
        for path in paths {
            let v = match stamp_of(&path) {
                Ok(None) => continue,
                Ok(Some(got)) if got == want => Verified {
                    path,
                    ok: true,
                    detail: "ok".into(),
                },
                Ok(Some((h, s))) => Verified {
                    path,
                    ok: false,
                    detail: format!("stamped config_hash={h} seed={s}"),
                },
                Err(e) => Verified {
                    path,
                    ok: false,
                    detail: e.to_string(),
                },
            };
            out.push(v);
        }
    }
    Ok(out)
}
