use std::path::{Path, PathBuf};

use serde_json::json;
use toml::Value;
use tov_core::augment::sample_rng;
use tov_core::data::{gen_synthetic, ObservationStore};
use tov_core::diffcore::ParamStore;
use tov_core::export::{create_dir, write_json};
use tov_core::metrics::diagnose;
use tov_core::probe::{
    evaluate_f1, probe_pearson, probe_sets, read_external_scores, train_probe, write_probe_results, ProbeRow,
    PROBE_RESULTS_FILE,
};
use tov_core::ssl::{encode_images, pretrain, ObjectiveCheck, Sidecar, ENCODER, SIDECAR_FILE};
use tov_core::vit::{param_count, ViTConfig};

use crate::config::{read_file, resolve, RunConfig};
use crate::error::CliError;
use crate::{Cli, Command, F1Flag, KindFlag, PosTable};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn overrides(cli: &Cli) -> Vec<(String, Value)> {
    let f = &cli.flags;
    let cmd = cli.command;
    let mut o: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Option<Value>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    put("seed", f.seed.map(|s| Value::Integer(s as i64)));
    put("threads", f.threads.map(int));
    let (epochs_key, batch_key) = match cmd {
        Command::Probe => ("probe.epochs", "probe.batch_size"),
        _ => ("ssl.epochs", "ssl.batch_size"),
    };
    put(epochs_key, f.epochs.map(int));
    if cmd != Command::Gradcheck {
        put(batch_key, f.batch.map(int));
        put("model.depth", f.depth.map(int));
        put("model.embed_dim", f.dim.map(int));
        put("model.heads", f.heads.map(int));
    }
    put("model.patch_size", f.patch.map(int));
    if f.pos_table == Some(PosTable::Wide) {
        put("model.pos_table_tokens", Some(int(ViTConfig::WIDE_POS_TABLE)));
    }
    put("ssl.cov_coef", f.cov_coef.map(Value::Float));
    put("ssl.temp_coef", f.temp_coef.map(Value::Float));
    put("diagnose.sparsity_tol", f.sparsity_tol.map(Value::Float));
    put("diagnose.sample_n", f.sample_n.map(int));
    put(
        "probe.f1_average",
        f.f1.map(|a| {
            Value::String(match a {
                F1Flag::Macro => "macro".into(),
                F1Flag::Weighted => "weighted".into(),
            })
        }),
    );
    let size_key = if cmd == Command::GenSynthetic { "synthetic.size" } else { "model.image_size" };
    put(size_key, f.image_size.map(int));
    put(
        "synthetic.kind",
        f.kind.map(|k| {
            Value::String(match k {
                KindFlag::Dots => "dots".into(),
                KindFlag::Noise => "noise".into(),
            })
        }),
    );
    put("synthetic.episodes", f.episodes.map(int));
    o
}

fn resolve_cli(cli: &Cli) -> Result<RunConfig, CliError> {
    let file = match &cli.flags.config {
        Some(p) => read_file(p)?,
        None => Default::default(),
    };
    let mut cfg = resolve(file, overrides(cli))?;
    if cli.flags.pos_table == Some(PosTable::Grid) {
        cfg.model.pos_table_tokens = None;
        cfg.model.validate()?;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, CliError> {
    cli.flags
        .out
        .clone()
        .ok_or_else(|| CliError::config("out", "pass --out or set TOV_OUT"))
}

fn one<'a>(paths: &'a [PathBuf], flag: &str) -> Result<&'a Path, CliError> {
    match paths {
        [p] => Ok(p),
        [] => Err(CliError::config(flag, format!("--{flag} is required"))),
        _ => Err(CliError::config(flag, format!("this command takes one --{flag}"))),
    }
}

fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, Sidecar), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let sidecar = Sidecar::read(&dir.join(SIDECAR_FILE))?;
    Ok((ParamStore::load(path)?, sidecar))
}

/// Pretraining epoch encoded in a `checkpoint_epoch{e}.tovp` name, else 0.
fn checkpoint_epoch(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("checkpoint_epoch"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Runs the command and returns the one-line summary for standard output.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve_cli(cli)?;
    // Fails only when a pool already exists, which keeps its own size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    let out = match cli.command {
        Command::ParamCount | Command::Gradcheck => cli.flags.out.clone(),
        _ => Some(out_dir(cli)?),
    };
    if let Some(dir) = &out {
        create_dir(dir)?;
        write_json(&dir.join(RESOLVED_CONFIG_FILE), &cfg)?;
    }
    let summary = match cli.command {
        Command::ParamCount => return Ok(param_count(&cfg.model).to_string()),
        Command::GenSynthetic => gen_synthetic_cmd(&cfg, out.as_deref().expect("out resolved"))?,
        Command::Pretrain => pretrain_cmd(cli, &cfg, out.as_deref().expect("out resolved"))?,
        Command::Probe => probe_cmd(cli, &cfg, out.as_deref().expect("out resolved"))?,
        Command::Diagnose => diagnose_cmd(cli, &cfg, out.as_deref().expect("out resolved"))?,
        Command::Gradcheck => gradcheck_cmd(cli, &cfg, out.as_deref())?,
    };
    Ok(summary.to_string())
}

fn gen_synthetic_cmd(cfg: &RunConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let store = gen_synthetic(&cfg.synthetic, &mut sample_rng(cfg.seed, 0))?;
    let kind = serde_json::to_value(cfg.synthetic.kind).expect("kind serializes");
    let path = out.join(format!("{}.obsv", kind.as_str().expect("kind is a string")));
    store.write(&path)?;
    Ok(json!({
        "command": "gen-synthetic",
        "path": path.display().to_string(),
        "episodes": store.episode_lengths().len(),
        "frames": store.total_frames(),
    }))
}

fn pretrain_cmd(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let store = ObservationStore::read(one(&cli.flags.data, "data")?)?;
    let run = pretrain(&store, &cfg.model, &cfg.ssl, Some(out))?;
    let last = run.log.last().expect("at least one step");
    Ok(json!({
        "command": "pretrain",
        "epochs": cfg.ssl.epochs,
        "steps": run.log.len(),
        "final": last.report,
        "checkpoint": out.join(tov_core::ssl::checkpoint_name(cfg.ssl.epochs)).display().to_string(),
    }))
}

fn probe_cmd(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    if cli.flags.data.is_empty() {
        return Err(CliError::config("data", "--data is required"));
    }
    if cli.flags.checkpoint.is_empty() {
        return Err(CliError::config("checkpoint", "--checkpoint is required"));
    }
    let pc = &cfg.probe;
    let mut rows = Vec::new();
    for data in &cli.flags.data {
        let store = ObservationStore::read(data)?;
        let (train, test) = probe_sets(&store, pc)?;
        for ckpt in &cli.flags.checkpoint {
            let (params, sidecar) = load_checkpoint(ckpt)?;
            let vit = &sidecar.model;
            let run = train_probe(&params, vit, &store, &train, pc)?;
            let encoder = if pc.freeze_encoder { &params } else { &run.params };
            let epoch = checkpoint_epoch(ckpt);
            for (split, set) in [("train", &train), ("test", &test)] {
                let features = encode_images(&encoder.subset(ENCODER), vit, &set.images(&store), 64)?;
                let report = evaluate_f1(&run.params, &features, &set.labels, pc.n_actions)?;
                rows.push(ProbeRow::new(&label(data), &label(ckpt), epoch, split, &report));
            }
        }
    }
    write_probe_results(&out.join(PROBE_RESULTS_FILE), &rows)?;
    let test: Vec<&ProbeRow> = rows.iter().filter(|r| r.split == "test").collect();
    let mean = |f: fn(&ProbeRow) -> f64| test.iter().map(|r| f(r)).sum::<f64>() / test.len() as f64;
    let mut summary = json!({
        "command": "probe",
        "rows": rows.len(),
        "mean_test_f1_macro": mean(|r| r.f1_macro),
        "mean_test_f1_weighted": mean(|r| r.f1_weighted),
    });
    if let Some(scores) = &cli.flags.scores {
        let r = probe_pearson(&rows, &read_external_scores(scores)?, pc.f1_average)?;
        write_json(&out.join("probe_pearson.json"), &json!({ "pearson": r }))?;
        summary["pearson"] = json!(r);
    }
    Ok(summary)
}

fn diagnose_cmd(cli: &Cli, cfg: &RunConfig, out: &Path) -> Result<serde_json::Value, CliError> {
    let store = ObservationStore::read(one(&cli.flags.data, "data")?)?;
    let ckpt = one(&cli.flags.checkpoint, "checkpoint")?;
    let d = &cfg.diagnose;
    let bundle = diagnose(ckpt, &store, d.sample_n, cfg.seed, d.sparsity_tol, Some(out))?;
    let mut summary = json!({ "command": "diagnose" });
    if let (Some(s), serde_json::Value::Object(m)) = (summary.as_object_mut(), bundle.summary_json()) {
        s.extend(m);
    }
    Ok(summary)
}

fn gradcheck_cmd(cli: &Cli, cfg: &RunConfig, out: Option<&Path>) -> Result<serde_json::Value, CliError> {
    let f = &cli.flags;
    let base = ObjectiveCheck::default();
    let check = ObjectiveCheck {
        depth: f.depth.unwrap_or(base.depth),
        embed_dim: f.dim.unwrap_or(base.embed_dim),
        heads: f.heads.unwrap_or(base.heads),
        batch: f.batch.unwrap_or(base.batch),
        max_coords: f.max_coords,
        seed: cfg.seed,
        ..base
    };
    let report = check.run()?;
    if let Some(dir) = out {
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    let coords: usize = report.params.iter().map(|p| p.coords_checked).sum();
    if !report.passed() {
        let worst: Vec<&str> = report.failing().map(|p| p.name.as_str()).collect();
        return Err(tov_core::Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} (tolerance {:.0e}) in {}",
            report.max_rel_err(),
            report.tol,
            worst.join(", ")
        ))
        .into());
    }
    Ok(json!({
        "command": "gradcheck",
        "passed": true,
        "max_rel_err": report.max_rel_err(),
        "tol": report.tol,
        "params": report.params.len(),
        "coords": coords,
    }))
}
