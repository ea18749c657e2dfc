//! The `cirlab` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use cirlab_core::attention::attention_map;
use cirlab_core::dataset::{make_cirr_like, make_circo_like, make_dataset, Benchmark, PairRecord, TripletRecord};
use cirlab_core::model::Model;
use cirlab_core::retrieval::evaluate;
use cirlab_core::templates::{BenchmarkKind, TemplateBook, INFERENCE_MODIFICATION};
use cirlab_core::train::{ablation_matrix, init_model, run_stage1, run_stage2, StageOutcome};
use cirlab_core::world::{render_image, scene_for_id};

use crate::checkpoint::{self, RunMeta};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::exec::Rayon;
use crate::files::{benchmark_to_jsonl, parse_jsonl, read_benchmark, read_bytes, read_json, to_json_pretty, to_jsonl, write_bytes};
use crate::manifest::ManifestBuilder;
use crate::ppm::encode_p6;
use crate::report::{ablation_table, eval_table};

#[derive(Debug, Parser)]
#[command(name = "cirlab", version, about = "Synthetic composed-image-retrieval lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write training pairs, triplets and both benchmark files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
        #[arg(long, default_value_t = 2000)]
        triplets: usize,
        #[arg(long, default_value_t = 500)]
        eval_queries: usize,
        #[arg(long, default_value_t = 300)]
        index_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        /// pairs.jsonl for stage 1, triplets.jsonl for stage 2.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Start stage 2 from freshly initialized weights.
        #[arg(long)]
        from_scratch: bool,
        /// JSON file with `image_modification` and `caption_summary` sets.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a checkpoint on a benchmark file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        k: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the patch-similarity heat map of one composed query.
    Attnmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene_id: u64,
        #[arg(long)]
        instruction: String,
        /// Output prefix; PREFIX.ppm and PREFIX.json are written.
        #[arg(long)]
        out: PathBuf,
        /// Restrict scene ids to those named in this JSONL file.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Train and evaluate every arm of the ablation matrix.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by gen-data; generated from the config otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn config_value<T: Serialize>(c: &T) -> serde_json::Value {
    serde_json::to_value(c).expect("config serializes")
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            pairs,
            triplets,
            eval_queries,
            index_size,
            out,
        } => gen_data(seed, pairs, triplets, eval_queries, index_size, &out),
        Command::Train {
            stage,
            config,
            data,
            ckpt_in,
            ckpt_out,
            from_scratch,
            templates,
            set,
        } => train(stage, config.as_deref(), &set, &data, ckpt_in.as_deref(), &ckpt_out, from_scratch, templates.as_deref()),
        Command::Eval { ckpt, bench, k, out } => eval(&ckpt, &bench, &k, &out),
        Command::Attnmap {
            ckpt,
            scene_id,
            instruction,
            out,
            scenes,
        } => attnmap(&ckpt, scene_id, &instruction, &out, scenes.as_deref()),
        Command::Ablate { config, out, data, set } => ablate(config.as_deref(), &set, &out, data.as_deref()),
    }
}

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";

pub fn bench_file(kind: BenchmarkKind) -> &'static str {
    match kind {
        BenchmarkKind::SyntheticCirrLike => "bench_cirr_like.jsonl",
        BenchmarkKind::SyntheticCircoLike => "bench_circo_like.jsonl",
    }
}

fn gen_data(seed: u64, n_pairs: usize, n_triplets: usize, n_queries: usize, index_size: usize, out: &Path) -> Result<()> {
    let config = json!({
        "seed": seed,
        "pairs": n_pairs,
        "triplets": n_triplets,
        "eval_queries": n_queries,
        "index_size": index_size,
    });
    let mut m = ManifestBuilder::start("gen-data", config, seed);
    let (pairs, triplets) = make_dataset(n_pairs, n_triplets, seed)?;
    let cirr = make_cirr_like(n_queries, index_size, seed)?;
    let circo = make_circo_like(n_queries, index_size, seed)?;
    let files = [
        (PAIRS_FILE, to_jsonl(&pairs)),
        (TRIPLETS_FILE, to_jsonl(&triplets)),
        (bench_file(cirr.kind()), benchmark_to_jsonl(&cirr)),
        (bench_file(circo.kind()), benchmark_to_jsonl(&circo)),
    ];
    for (name, bytes) in &files {
        let p = out.join(name);
        write_bytes(&p, bytes)?;
        m.output(&p, bytes);
    }
    m.finish(&out.join("manifest.json"))?;
    Ok(())
}

fn load_checkpoint(path: &Path, m: &mut ManifestBuilder) -> Result<(Model, RunMeta, String)> {
    let bytes = read_bytes(path)?;
    m.input(path, &bytes);
    let (model, meta) = checkpoint::decode(path, &bytes)?;
    Ok((model, meta, crate::files::sha256_hex(&bytes)))
}

#[allow(clippy::too_many_arguments)]
fn train(
    stage: u8,
    config: Option<&Path>,
    set: &[String],
    data: &Path,
    ckpt_in: Option<&Path>,
    ckpt_out: &Path,
    from_scratch: bool,
    templates: Option<&Path>,
) -> Result<()> {
    match (stage, ckpt_in.is_some(), from_scratch) {
        (_, true, true) => return Err(CliError::Usage("--ckpt-in and --from-scratch are exclusive".into())),
        (2, false, false) => {
            return Err(CliError::Usage(
                "stage 2 needs --ckpt-in from stage 1, or --from-scratch for a stage-2-only run".into(),
            ))
        }
        _ => {}
    }
    let cfg = RunConfig::resolve(config, set)?;
    let mut m = ManifestBuilder::start(&format!("train --stage {stage}"), config_value(&cfg), cfg.train.seed);
    let (model, mut meta) = match ckpt_in {
        Some(p) => {
            let (model, meta, _) = load_checkpoint(p, &mut m)?;
            (model, meta)
        }
        None => (init_model(cfg.model.clone(), cfg.train.seed)?, RunMeta::default()),
    };
    let bytes = read_bytes(data)?;
    m.input(data, &bytes);
    let outcome: StageOutcome = if stage == 1 {
        let pairs: Vec<PairRecord> = parse_jsonl(data, &bytes)?;
        run_stage1(model, &pairs, &cfg.train, &Rayon)?
    } else {
        let triplets: Vec<TripletRecord> = parse_jsonl(data, &bytes)?;
        for t in &triplets {
            t.validate().map_err(|e| CliError::format(data, e))?;
        }
        let custom: Option<TemplateBook> = match templates {
            Some(p) => {
                let book: TemplateBook = read_json(p)?;
                book.validate().map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                m.input(p, &read_bytes(p)?);
                Some(book)
            }
            None => None,
        };
        let book = cfg.train.template_book(custom.as_ref());
        run_stage2(model, &triplets, &cfg.train, &book, &Rayon)?
    };
    meta.stages.push(stage);
    meta.seed = cfg.train.seed;
    meta.train = Some(cfg.train.clone());
    meta.loss_curve = outcome.curve.clone();
    let ckpt = checkpoint::save(ckpt_out, &outcome.model, &meta)?;
    m.output(ckpt_out, &ckpt);
    let mut csv = String::from("step,lr,loss\n");
    for r in &outcome.curve {
        csv.push_str(&format!("{},{:e},{:.8}\n", r.step, r.lr, r.loss));
    }
    let csv_path = sibling(ckpt_out, ".loss.csv");
    write_bytes(&csv_path, csv.as_bytes())?;
    m.output(&csv_path, csv.as_bytes());
    if let (Some(first), Some(mean)) = (outcome.initial_loss(), outcome.mean_loss()) {
        eprintln!("stage {stage}: {} steps, first loss {first:.4}, mean loss {mean:.4}", outcome.curve.len());
    }
    m.finish(&sibling(ckpt_out, ".manifest.json"))?;
    Ok(())
}

fn eval(ckpt: &Path, bench_path: &Path, ks: &[usize], out: &Path) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Usage("--k needs positive integers".into()));
    }
    let mut m = ManifestBuilder::start("eval", json!({ "k": ks }), 0);
    let (model, meta, digest) = load_checkpoint(ckpt, &mut m)?;
    let bench = read_benchmark(bench_path)?;
    m.input(bench_path, &read_bytes(bench_path)?);
    let model = if model.low_rank().is_some() { model.merge_low_rank() } else { model };
    let mut report = evaluate(&model, &bench, ks, &Rayon)?;
    report.config_digest = digest;
    let json_bytes = to_json_pretty(&report);
    write_bytes(out, &json_bytes)?;
    m.output(out, &json_bytes);
    let table = eval_table(&report);
    let txt = out.with_extension("txt");
    write_bytes(&txt, table.as_bytes())?;
    m.output(&txt, table.as_bytes());
    print!("{table}");
    m.set_seed(meta.seed);
    m.finish(&sibling(out, ".manifest.json"))?;
    Ok(())
}

/// Scene ids listed in a pairs, triplets or benchmark file.
fn known_scene_ids(path: &Path) -> Result<std::collections::BTreeSet<u64>> {
    if let Ok(b) = read_benchmark(path) {
        let mut ids = b.scene_ids();
        ids.extend(b.index_ids().iter().copied());
        return Ok(ids);
    }
    let rows: Vec<serde_json::Value> = parse_jsonl(path, &read_bytes(path)?)?;
    Ok(rows.iter().filter_map(|r| r.get("scene_id").and_then(|v| v.as_u64())).collect())
}

fn attnmap(ckpt: &Path, scene_id: u64, instruction: &str, prefix: &Path, scenes: Option<&Path>) -> Result<()> {
    let mut m = ManifestBuilder::start(
        "attnmap",
        json!({ "scene_id": scene_id, "instruction": instruction, "template": INFERENCE_MODIFICATION }),
        0,
    );
    if let Some(p) = scenes {
        if !known_scene_ids(p)?.contains(&scene_id) {
            return Err(CliError::Usage(format!("unknown scene id {scene_id} (not in {})", p.display())));
        }
        m.input(p, &read_bytes(p)?);
    }
    let (model, meta, digest) = load_checkpoint(ckpt, &mut m)?;
    m.set_seed(meta.seed);
    let model = if model.low_rank().is_some() { model.merge_low_rank() } else { model };
    let img = render_image(&scene_for_id(scene_id), model.config.image_size, model.config.patch_size)?;
    let a = attention_map(&model, &img, instruction, INFERENCE_MODIFICATION)?;
    let ppm = encode_p6(a.size, a.size, &a.overlay);
    let ppm_path = with_suffix(prefix, ".ppm");
    write_bytes(&ppm_path, &ppm)?;
    m.output(&ppm_path, &ppm);
    let grid: Vec<&[f64]> = a.grid.values.chunks(a.grid.side).collect();
    let sidecar = to_json_pretty(&json!({
        "scene_id": scene_id,
        "instruction": instruction,
        "checkpoint": digest,
        "grid": grid,
    }));
    let json_path = with_suffix(prefix, ".json");
    write_bytes(&json_path, &sidecar)?;
    m.output(&json_path, &sidecar);
    m.finish(&with_suffix(prefix, ".manifest.json"))?;
    Ok(())
}

fn ablate(config: Option<&Path>, set: &[String], out: &Path, data: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::resolve(config, set)?;
    let mut m = ManifestBuilder::start("ablate", config_value(&cfg), cfg.data.seed);
    let kind = cfg.ablation.benchmark;
    let (pairs, triplets, bench): (Vec<PairRecord>, Vec<TripletRecord>, Benchmark) = match data {
        Some(dir) => {
            let mut load = |name: &str| -> Result<(PathBuf, Vec<u8>)> {
                let p = dir.join(name);
                let b = read_bytes(&p)?;
                m.input(&p, &b);
                Ok((p, b))
            };
            let (pp, pb) = load(PAIRS_FILE)?;
            let (tp, tb) = load(TRIPLETS_FILE)?;
            let (bp, _) = load(bench_file(kind))?;
            (parse_jsonl(&pp, &pb)?, parse_jsonl(&tp, &tb)?, read_benchmark(&bp)?)
        }
        None => {
            let d = &cfg.data;
            let (p, t) = make_dataset(d.pairs, d.triplets, d.seed)?;
            let b = match kind {
                BenchmarkKind::SyntheticCirrLike => make_cirr_like(d.eval_queries, d.index_size, d.seed)?,
                BenchmarkKind::SyntheticCircoLike => make_circo_like(d.eval_queries, d.index_size, d.seed)?,
            };
            (p, t, b)
        }
    };
    let report = ablation_matrix(
        &cfg.ablation.arms,
        &cfg.ablation.seeds,
        &cfg.model,
        &cfg.train,
        &pairs,
        &triplets,
        &bench,
        &cfg.eval.ks,
        &Rayon,
    )?;
    let json_bytes = to_json_pretty(&report);
    let json_path = out.join("ablation.json");
    write_bytes(&json_path, &json_bytes)?;
    m.output(&json_path, &json_bytes);
    let table = ablation_table(&report);
    let txt = out.join("ablation.txt");
    write_bytes(&txt, table.as_bytes())?;
    m.output(&txt, table.as_bytes());
    print!("{table}");
    m.finish(&out.join("manifest.json"))?;
    Ok(())
}
