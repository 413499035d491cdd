//! Subcommand implementations, kept free of argument parsing so tests can
//! call them directly.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use artigen_core::corpus::{load_corpus, load_object, save_object, write_atomic, Split, MANIFEST_FILE};
use artigen_core::diffusion::{NoiseSchedule, SamplerConfig};
use artigen_core::exec::Execution;
use artigen_core::generate::{generate, GenerateRequest, Generated};
use artigen_core::kinematics::{instantiate, posed_mesh};
use artigen_core::metrics::{evaluate_selected, Distance, MetricConfig};
use artigen_core::nn::{load_checkpoint, Denoiser};
use artigen_core::retrieval::{retrieve_and_assemble, AssembledObject, BaseSelection, Library};
use artigen_core::schema::{ArticulatedObject, Category};
use artigen_core::synth::{generate_synthetic_corpus, write_synthetic_corpus};
use artigen_core::train::{TrainOutput, Trainer, FINAL_CHECKPOINT};
use serde::Serialize;

use crate::config::Config;

/// Parses `Storage=2,Table=1`; an empty string means every category equally.
pub fn parse_mix(text: &str) -> Result<Vec<(Category, f64)>> {
    if text.trim().is_empty() {
        return Ok(Category::ALL.iter().map(|&c| (c, 1.0)).collect());
    }
    text.split(',')
        .map(|item| {
            let (name, weight) = item.split_once('=').unwrap_or((item, "1"));
            let cat: Category = name.trim().parse().map_err(anyhow::Error::msg)?;
            let w: f64 = weight.trim().parse().with_context(|| format!("weight for {cat}"))?;
            if !(w > 0.0) {
                bail!("weight for {cat} must be positive");
            }
            Ok((cat, w))
        })
        .collect()
}

pub fn synth_corpus(out: &Path, count: usize, mix: &str, seed: u64, train_fraction: f64) -> Result<()> {
    let mix = parse_mix(mix)?;
    let objects = generate_synthetic_corpus(count, &mix, seed)?;
    write_synthetic_corpus(out, &objects, train_fraction)?;
    log::info!("wrote {} objects to {}", objects.len(), out.display());
    Ok(())
}

/// Trains on the corpus' training split (all objects if it has none).
pub fn train(cfg: &Config, resume: Option<&Path>, exec: Execution) -> Result<PathBuf> {
    let corpus = load_corpus(&cfg.corpus.dir)?;
    let mut data = corpus.split(Split::Train);
    if data.is_empty() {
        data = corpus.objects().cloned().collect();
    }
    let mut trainer: Trainer<f32> = match resume {
        Some(path) => {
            let mut t = Trainer::resume(path)?;
            t.config = cfg.train.clone();
            t
        }
        None => Trainer::new(cfg.model.build()?, cfg.train.clone(), NoiseSchedule::default())?,
    };
    log::info!(
        "training {} parameters on {} objects from epoch {}",
        trainer.model.num_params(),
        data.len(),
        trainer.next_epoch
    );
    let out = TrainOutput {
        dir: Some(cfg.output.dir.clone()),
        execution: exec,
    };
    trainer.fit(&data, &out)?;
    Ok(cfg.output.dir.join(FINAL_CHECKPOINT))
}

pub struct LoadedModel {
    pub model: Denoiser<f32>,
    pub schedule: NoiseSchedule,
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ck = load_checkpoint::<f32>(path)?;
    Ok(LoadedModel {
        schedule: NoiseSchedule::from_spec(ck.schedule)?,
        model: ck.model,
    })
}

#[derive(Serialize)]
struct GenerationSummary<'a> {
    request: &'a GenerateRequest,
    samples: Vec<SampleSummary>,
}

#[derive(Serialize)]
struct SampleSummary {
    id: String,
    seed: u64,
    file: String,
    assembled: Option<String>,
}

pub const GENERATION_SUMMARY: &str = "generation.json";
pub const OBJECTS_DIR: &str = "objects";

pub fn read_request(path: &Path) -> Result<GenerateRequest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing request {}", path.display()))
}

/// Samples the request, writes `objects/<id>.json` plus a summary, and
/// assembles meshes under `assembled/<id>/` when a corpus is given.
pub fn generate_cmd(
    checkpoint: &Path,
    request: &GenerateRequest,
    out: &Path,
    corpus: Option<&Path>,
    steps: usize,
) -> Result<Vec<Generated>> {
    let loaded = load_model(checkpoint)?;
    let generated = generate(&loaded.model, &loaded.schedule, SamplerConfig { steps }, request, "gen")?;
    let library = corpus
        .map(|dir| load_corpus(dir).map(|c| Library::from_corpus(&c)))
        .transpose()?;
    let mut samples = Vec::new();
    for g in &generated {
        let file = format!("{OBJECTS_DIR}/{}.json", g.object.id);
        save_object(&g.object, &out.join(&file))?;
        // a sample the library cannot furnish keeps its abstraction only
        let assembled = match &library {
            Some(lib) => {
                match retrieve_and_assemble(&g.object, lib, Some(request.category), &MetricConfig::default()) {
                    Ok((a, _)) => {
                        let dir = format!("assembled/{}", g.object.id);
                        a.write(&out.join(&dir))?;
                        Some(dir)
                    }
                    Err(e) => {
                        log::warn!("assembling {}: {e}", g.object.id);
                        None
                    }
                }
            }
            None => None,
        };
        samples.push(SampleSummary {
            id: g.object.id.clone(),
            seed: g.seed,
            file,
            assembled,
        });
    }
    let summary = GenerationSummary { request, samples };
    write_atomic(
        &out.join(GENERATION_SUMMARY),
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;
    Ok(generated)
}

/// Objects of a corpus directory, a generation output, or a flat
/// directory of object documents.
pub fn load_objects(dir: &Path) -> Result<Vec<ArticulatedObject>> {
    if dir.join(MANIFEST_FILE).exists() {
        return Ok(load_corpus(dir)?.objects().cloned().collect());
    }
    let flat = if dir.join(OBJECTS_DIR).is_dir() {
        dir.join(OBJECTS_DIR)
    } else {
        dir.to_path_buf()
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(&flat)
        .with_context(|| format!("listing {}", flat.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != GENERATION_SUMMARY)
        })
        .collect();
    paths.sort();
    let objects = paths.iter().map(|p| load_object(p)).collect::<Result<Vec<_>, _>>()?;
    if objects.is_empty() {
        bail!("no object documents in {}", dir.display());
    }
    Ok(objects)
}

/// Named report columns in CSV order.
pub type Report = Vec<(&'static str, f64)>;

pub fn evaluate_cmd(
    generated: &Path,
    ground_truth: &Path,
    out: &Path,
    distances: &[Distance],
    cfg: &MetricConfig,
    exec: Execution,
) -> Result<Report> {
    let gen = load_objects(generated)?;
    let gt = load_objects(ground_truth)?;
    let report = evaluate_selected(&gen, &gt, distances, cfg, exec)?;
    let header: Vec<&str> = report.iter().map(|(n, _)| *n).collect();
    let row: Vec<String> = report.iter().map(|(_, v)| v.to_string()).collect();
    let text = format!("{}\n{}\n", header.join(","), row.join(","));
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_atomic(out, text.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    let summary = out.with_extension("txt");
    write_atomic(&summary, summary_text(&report, gen.len(), gt.len()).as_bytes())
        .with_context(|| format!("writing {}", summary.display()))?;
    Ok(report)
}

/// Human-readable companion to the CSV report.
pub fn summary_text(report: &Report, generated: usize, reference: usize) -> String {
    let mut text = format!("generated objects: {generated}\nreference objects: {reference}\n");
    for (name, v) in report {
        text.push_str(&format!("{name:<12} {v:.4}\n"));
    }
    text
}

/// Value of a named column.
pub fn column(report: &Report, name: &str) -> Option<f64> {
    report.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
}

pub fn assemble_cmd(abstraction: &Path, corpus: &Path, out: &Path) -> Result<(AssembledObject, BaseSelection)> {
    let obj = load_object(abstraction)?;
    let lib = Library::from_corpus(&load_corpus(corpus)?);
    let (assembled, selection) = retrieve_and_assemble(&obj, &lib, Some(obj.category()), &MetricConfig::default())?;
    assembled.write(out)?;
    let ranking = serde_json::json!({
        "fallback": selection.fallback,
        "base": {"source_id": selection.base.source_id, "source_node": selection.base.source_node},
        "top": selection.top,
    });
    write_atomic(
        &out.join("retrieval.json"),
        serde_json::to_string_pretty(&ranking)?.as_bytes(),
    )?;
    Ok((assembled, selection))
}

/// Write the posed boxes of an abstraction as one OBJ per articulation state.
pub fn pose_cmd(abstraction: &Path, out: &Path, states: &[f64]) -> Result<Vec<PathBuf>> {
    let obj = load_object(abstraction)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (i, &tau) in states.iter().enumerate() {
        if !(0.0..=1.0).contains(&tau) {
            bail!("articulation state {tau} is outside [0, 1]");
        }
        let mesh = posed_mesh(&instantiate(&obj, tau)?);
        let file = out.join(format!("state_{i:02}.obj"));
        write_atomic(&file, format!("# tau {tau}\n{}", mesh.to_obj()).as_bytes())?;
        files.push(file);
    }
    Ok(files)
}
