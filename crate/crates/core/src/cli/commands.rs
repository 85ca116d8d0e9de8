use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cf::{CfConfig, CfEmbeddings, CfEmbeddingsMeta, CfKind, CfModel, EMB_SIDECAR};
use crate::cli::config::{RunConfig, INTERACTIONS_FILE, TITLES_FILE};
use crate::cli::pipeline::{build_vocab, fit_cf, fit_lm, Prepared};
use crate::cli::{pipeline_gradcheck, Cli, Command, Common, GRADCHECK_TOLERANCE};
use crate::data::{gen_synthetic, write_interactions, write_titles, Partition, SplitsManifest, TitleMode, Vocabulary};
use crate::error::{CoraError, Result};
use crate::generator::Generator;
use crate::lm::LanguageModel;
use crate::numerics::checkpoint::sha256_hex;
use crate::numerics::Rng;
use crate::train_eval::{
    ablate, evaluate, score_samples, train_cora, write_curve_csv, Backbone, Variant,
};

const CF_MODEL_FILE: &str = "cf_model.ckpt";
const CF_CONFIG_FILE: &str = "cf_config.json";
const VOCAB_FILE: &str = "vocab.json";
const LM_META_FILE: &str = "lm_meta.json";
const RUN_FILE: &str = "cora_run.json";

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    args: Vec<String>,
    config: &'a RunConfig,
    seed: u64,
    /// SHA-256 of every input file.
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

/// Checksum and prompting settings stored beside a frozen language model.
#[derive(Debug, Serialize, Deserialize)]
struct LmMeta {
    checksum: String,
    history_len: usize,
    vocab_size: usize,
}

/// Where a trained generator's frozen inputs live.
#[derive(Debug, Serialize, Deserialize)]
struct CoraRun {
    cf_emb: PathBuf,
    lm: PathBuf,
    data: PathBuf,
    id_only: bool,
    config: RunConfig,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if common.desk => RunConfig::desk(),
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for &p in paths {
        let files: Vec<PathBuf> = if p.is_dir() {
            let mut v: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && !f.to_string_lossy().ends_with("manifest.json"))
                .collect();
            v.sort();
            v
        } else {
            vec![p.to_path_buf()]
        };
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| CoraError::MissingArtifact {
                path: f.clone(),
                msg: e.to_string(),
            })?;
            out.insert(f.display().to_string(), sha256_hex(&bytes));
        }
    }
    Ok(out)
}

fn write_manifest(argv: &[String], out: &Path, command: &str, cfg: &RunConfig, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        args: argv.to_vec(),
        config: cfg,
        seed: cfg.seed,
        inputs: hash_inputs(inputs)?,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out.join(format!("{command}.manifest.json")), &m)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CoraError::MissingArtifact {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Embeddings whose contents still match the checksum recorded at export.
fn load_frozen_cf(dir: &Path) -> Result<CfEmbeddings> {
    let emb = CfEmbeddings::load(dir)?;
    let meta: CfEmbeddingsMeta = read_json(&dir.join(EMB_SIDECAR))?;
    if emb.checksum() != meta.checksum {
        return Err(CoraError::Contamination(format!(
            "embeddings in {} no longer match their recorded checksum",
            dir.display()
        )));
    }
    Ok(emb)
}

fn load_frozen_lm(dir: &Path) -> Result<(LanguageModel, Vocabulary, LmMeta)> {
    let lm = LanguageModel::load(dir)?;
    let meta: LmMeta = read_json(&dir.join(LM_META_FILE))?;
    if lm.params.checksum() != meta.checksum {
        return Err(CoraError::Contamination(format!(
            "language model in {} no longer matches its recorded checksum",
            dir.display()
        )));
    }
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != lm.config().vocab_size {
        return Err(CoraError::Checkpoint("vocabulary size differs from the language model".into()));
    }
    Ok((lm, vocab, meta))
}

fn check_dataset(cf: &CfEmbeddings, prep: &Prepared) -> Result<()> {
    if cf.dataset_hash != prep.dataset_hash {
        return Err(CoraError::Validation("embeddings were trained on a different dataset".into()));
    }
    Ok(())
}

/// Fits the frozen-artifact widths into the configuration before resolving.
fn attach(mut cfg: RunConfig, cf: &CfEmbeddings, meta: &LmMeta) -> Result<RunConfig> {
    cfg.cf.dim = cf.d_c();
    cfg.generator.d_c = cf.d_c();
    cfg.data.history_len = meta.history_len;
    cfg.resolved()
}

pub fn run_command(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut cfg = base_config(&cli.common)?;
    match &cli.command {
        Command::GenData {
            users,
            items,
            latent_dim,
            density,
            noise,
            out,
        } => {
            let s = &mut cfg.synthetic;
            s.n_users = users.unwrap_or(s.n_users);
            s.n_items = items.unwrap_or(s.n_items);
            s.latent_dim = latent_dim.unwrap_or(s.latent_dim);
            s.density = density.unwrap_or(s.density);
            s.noise = noise.unwrap_or(s.noise);
            if let Some(seed) = cli.common.seed {
                s.seed = seed;
            }
            if !(0.0..=1.0).contains(&s.density) || s.latent_dim == 0 {
                return Err(CoraError::config("density must lie in [0, 1] and latent_dim be positive"));
            }
            std::fs::create_dir_all(out)?;
            let data = gen_synthetic(s);
            write_interactions(&out.join(INTERACTIONS_FILE), &data.interactions)?;
            write_titles(&out.join(TITLES_FILE), &data.catalog)?;
            write_manifest(&cli.argv, out, "gen-data", &cfg, &[], &[INTERACTIONS_FILE, TITLES_FILE])?;
            println!("wrote {} interactions to {}", data.interactions.len(), out.display());
        }
        Command::TrainCf { model, data, dim, out } => {
            if let Some(m) = model {
                cfg.cf.kind = m.parse::<CfKind>()?;
            }
            if let Some(d) = dim {
                cfg.cf.dim = *d;
                cfg.generator.d_c = *d;
            }
            let cfg = cfg.resolved()?;
            let prep = Prepared::load(data, &cfg.data)?;
            let (model, emb, report) = fit_cf(&prep, &cfg.cf)?;
            std::fs::create_dir_all(out)?;
            model.params().save(&out.join(CF_MODEL_FILE))?;
            write_json(&out.join(CF_CONFIG_FILE), &cfg.cf)?;
            emb.save(out)?;
            write_json(&out.join("cf_report.json"), &report)?;
            SplitsManifest::from_splits(&prep.splits, cfg.data.valid_frac, cfg.data.test_frac)?
                .save(&out.join("splits.json"))?;
            write_manifest(&cli.argv, out, "train-cf", &cfg, &[data], &[CF_MODEL_FILE, "cf_emb.ckpt", EMB_SIDECAR])?;
            println!("{} embeddings: chosen lr {}, valid auc {:.4}", cfg.cf.kind, report.chosen_lr, best_trial(&report));
        }
        Command::ExportEmb { checkpoint, data, out } => {
            let cf_cfg: CfConfig = read_json(&checkpoint.join(CF_CONFIG_FILE))?;
            cfg.cf = cf_cfg.clone();
            cfg.generator.d_c = cf_cfg.dim;
            let cfg = cfg.resolved()?;
            let prep = Prepared::load(data, &cfg.data)?;
            let mut rng = Rng::derive(cf_cfg.seed, 0xCF);
            let mut model = CfModel::new(&cf_cfg, prep.n_users, prep.n_items, &prep.splits.train, &mut rng)?;
            model.params_mut().load_into(&checkpoint.join(CF_MODEL_FILE))?;
            let mut emb = model.export()?;
            emb.dataset_hash = prep.dataset_hash.clone();
            emb.save(out)?;
            write_manifest(&cli.argv, out, "export-emb", &cfg, &[checkpoint, data], &["cf_emb.ckpt", EMB_SIDECAR])?;
            println!("exported {} x {} embeddings", emb.n_users() + emb.n_items(), emb.d_c());
        }
        Command::PretrainLm { data, out } => {
            let cfg = cfg.resolved()?;
            let prep = Prepared::load(data, &cfg.data)?;
            let vocab = build_vocab(&prep, cfg.data.history_len)?;
            let (lm, report) = fit_lm(&prep, &vocab, &cfg.lm, &cfg.lm_train, cfg.data.history_len, cfg.seed)?;
            lm.save(out)?;
            vocab.save(&out.join(VOCAB_FILE))?;
            let meta = LmMeta {
                checksum: lm.params.checksum(),
                history_len: cfg.data.history_len,
                vocab_size: vocab.len(),
            };
            write_json(&out.join(LM_META_FILE), &meta)?;
            write_json(&out.join("lm_report.json"), &report)?;
            write_manifest(&cli.argv, out, "pretrain-lm", &cfg, &[data], &["lm.ckpt", "lm_config.json", VOCAB_FILE, LM_META_FILE])?;
            println!(
                "language model: {} tokens, final loss {:.4}",
                vocab.len(),
                report.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainCora {
            cf_emb,
            lm,
            data,
            targets,
            sharing,
            id_only,
            lr,
            epochs,
            out,
        } => {
            if let Some(t) = targets {
                cfg.generator.targets = t.parse()?;
            }
            if let Some(s) = sharing {
                cfg.generator.sharing = s.parse()?;
            }
            if let Some(lr) = lr {
                cfg.train.lr = *lr;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = *e;
            }
            cfg.generator.validate()?;
            cfg.train.validate()?;
            let cf = load_frozen_cf(cf_emb)?;
            let (model, vocab, meta) = load_frozen_lm(lm)?;
            let cfg = attach(cfg, &cf, &meta)?;
            let prep = Prepared::load(data, &cfg.data)?;
            check_dataset(&cf, &prep)?;
            let backbone = Backbone {
                splits: &prep.splits,
                catalog: &prep.catalog,
                vocab: &vocab,
                cf: &cf,
                lm: &model,
                history_len: cfg.data.history_len,
            };
            let mode = if *id_only { TitleMode::Placeholder } else { TitleMode::Titles };
            let samples = backbone.samples(mode)?;
            let mut gen = Generator::new(cfg.generator.clone(), model.config())?;
            let report = train_cora(&samples.train, &samples.valid, &cf, &mut gen, &model, &cfg.train)?;
            // the artifacts on disk must be untouched as well
            load_frozen_cf(cf_emb)?;
            load_frozen_lm(lm)?;
            if cf.checksum() != report.cf_checksum || model.params.checksum() != report.lm_checksum {
                return Err(CoraError::Contamination("frozen weights changed during training".into()));
            }
            let scores = score_samples(&samples.test, &cf, Some(&gen), &model)?;
            let mut metrics = evaluate(&prep.splits, &scores)?;
            metrics.curve = report.curve.clone();
            std::fs::create_dir_all(out)?;
            gen.save(out)?;
            metrics.save(&out.join("metrics.json"))?;
            write_curve_csv(&out.join("curves.csv"), &report.curve)?;
            write_json(&out.join("train_report.json"), &report)?;
            let run = CoraRun {
                cf_emb: cf_emb.clone(),
                lm: lm.clone(),
                data: data.clone(),
                id_only: *id_only,
                config: cfg.clone(),
            };
            write_json(&out.join(RUN_FILE), &run)?;
            write_manifest(
                &cli.argv,
                out,
                "train-cora",
                &cfg,
                &[cf_emb, lm, data],
                &["generator.ckpt", "generator.json", "metrics.json", "curves.csv"],
            )?;
            println!(
                "{}: best valid auc {:.4} at epoch {}, test auc {}",
                cfg.generator.targets,
                report.best_valid_auc,
                report.best_epoch,
                show(metrics.all.auc)
            );
        }
        Command::Eval {
            checkpoint,
            split,
            dump_logits,
            out,
        } => {
            let part: Partition = split.parse()?;
            let run: CoraRun = read_json(&checkpoint.join(RUN_FILE))?;
            let cf = load_frozen_cf(&run.cf_emb)?;
            let (model, vocab, _) = load_frozen_lm(&run.lm)?;
            let prep = Prepared::load(&run.data, &run.config.data)?;
            check_dataset(&cf, &prep)?;
            let gen = Generator::load(checkpoint, model.config())?;
            let mode = if run.id_only { TitleMode::Placeholder } else { TitleMode::Titles };
            let test = prep.prompts(run.config.data.history_len, mode).samples(&prep.splits.test, &vocab)?;
            let scores = score_samples(&test, &cf, Some(&gen), &model)?;
            let report = evaluate(&prep.splits, &scores)?;
            let m = report.split(part);
            if m.records == 0 {
                eprintln!("warning: the {split} partition is empty; metrics are absent");
            }
            let out = out.as_deref().unwrap_or(checkpoint);
            std::fs::create_dir_all(out)?;
            let name = format!("eval_{split}.json");
            write_json(&out.join(&name), m)?;
            if let (Some(path), Some(first)) = (dump_logits, test.first()) {
                dump_position_logits(path, first, &cf, &gen, &model, &vocab)?;
            }
            write_manifest(&cli.argv, out, "eval", &run.config, &[checkpoint], &[&name])?;
            println!("{}", serde_json::to_string_pretty(m)?);
        }
        Command::Ablate {
            variants,
            seeds,
            cf_emb,
            lm,
            data,
            out,
        } => {
            let variants = variants
                .split(',')
                .map(|s| s.trim().parse::<Variant>())
                .collect::<Result<Vec<_>>>()?;
            let seeds = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|e| CoraError::config(format!("seed {s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let cf = load_frozen_cf(cf_emb)?;
            let (model, vocab, meta) = load_frozen_lm(lm)?;
            let cfg = attach(cfg, &cf, &meta)?;
            let prep = Prepared::load(data, &cfg.data)?;
            check_dataset(&cf, &prep)?;
            let backbone = Backbone {
                splits: &prep.splits,
                catalog: &prep.catalog,
                vocab: &vocab,
                cf: &cf,
                lm: &model,
                history_len: cfg.data.history_len,
            };
            let (table, runs) = ablate(&backbone, &variants, &cfg.generator, &cfg.train, &seeds)?;
            load_frozen_cf(cf_emb)?;
            load_frozen_lm(lm)?;
            std::fs::create_dir_all(out)?;
            table.write_csv(&out.join("ablation.csv"))?;
            let summary: BTreeMap<&str, _> =
                ["valid", "all", "warm", "cold"].iter().map(|&s| (s, table.summary(s))).collect();
            write_json(&out.join("ablation_summary.json"), &summary)?;
            write_json(&out.join("ablation_runs.json"), &runs)?;
            let text = format!(
                "test split\n{}\nvalidation split\n{}",
                table.render("all"),
                table.render("valid")
            );
            std::fs::write(out.join("ablation.txt"), &text)?;
            write_manifest(
                &cli.argv,
                out,
                "ablate",
                &cfg,
                &[cf_emb, lm, data],
                &["ablation.csv", "ablation_summary.json", "ablation.txt"],
            )?;
            print!("{text}");
        }
        Command::Gradcheck => {
            let r = pipeline_gradcheck(cfg.seed)?;
            let pass = r.max_rel_err < GRADCHECK_TOLERANCE;
            println!(
                "max relative error {:.3e} over {} entries: {}",
                r.max_rel_err,
                r.checked,
                if pass { "PASS" } else { "FAIL" }
            );
            if !pass {
                return Err(CoraError::Training {
                    step: 0,
                    msg: format!("gradient check error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}", r.max_rel_err),
                });
            }
        }
    }
    Ok(())
}

fn best_trial(report: &crate::cf::CfTrainReport) -> f64 {
    report
        .trials
        .iter()
        .map(|t| t.best_valid_auc)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn show(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |v| format!("{v:.4}"))
}

fn dump_position_logits(
    path: &Path,
    sample: &crate::data::PromptSample,
    cf: &CfEmbeddings,
    gen: &Generator,
    lm: &LanguageModel,
    vocab: &Vocabulary,
) -> Result<()> {
    let mut g = crate::numerics::Graph::new();
    let lb = lm.params.bind(&mut g);
    let gb = gen.params.bind(&mut g);
    let (e_u, e_i) = cf.pair(sample.user, sample.item)?;
    let deltas = gen.generate_for(&mut g, &gb, e_u, e_i)?;
    let logits = lm.logits(&mut g, &lb, &sample.tokens, &deltas)?;
    let t = g.tensor(logits);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = std::iter::once("position".to_string())
        .chain(std::iter::once("token".to_string()))
        .chain((0..vocab.len()).map(|i| format!("logit_{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (pos, &id) in sample.tokens.iter().enumerate() {
        let token = vocab.tokens()[id].replace('"', "\"\"");
        let row: Vec<String> = t.row(pos).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{pos},\"{token}\",{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
