use std::fs;
use std::path::{Path, PathBuf};

use mpo_core::lm::{load_checkpoint, save_checkpoint, PolicyCheckpoint};
use mpo_core::prefset::{build_dataset, from_jsonl, generate_candidates, to_jsonl, ItemCandidates, PrefMethod, PrefRecord};
use mpo_core::synth::{
    corpus_from_jsonl, corpus_to_jsonl, make_corpus_with, make_world, prompt_keys, CorpusItem, CorpusSpec,
    CorpusStyle, SynthWorld,
};
use mpo_core::trainer::{
    compare_experiments, evaluate, run_preference_stage, run_sft, training_examples, EvalReport, PairSource,
    Stage, StageOutcome, TrainingConfig,
};
use mpo_core::{Error, Result};
use serde::Serialize;

use crate::manifest::Recorder;
use crate::{Cli, Command, Mode, Overrides, Style};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeWorld { out } => make_world_cmd(cli, out),
        Command::MakeCorpus {
            world,
            n,
            style,
            exclude,
            out,
        } => make_corpus_cmd(cli, world, *n, *style, exclude, out),
        Command::Sft {
            world,
            train,
            heldout,
            init,
            out,
            overrides,
        } => sft_cmd(cli, world, train, heldout, init.as_deref(), out, overrides),
        Command::GenCandidates {
            world,
            model,
            corpus,
            n,
            out,
            overrides,
        } => gen_candidates_cmd(cli, world, model, corpus, *n, out, overrides),
        Command::BuildPrefset {
            candidates,
            out,
            overrides,
        } => build_prefset_cmd(cli, candidates, out, overrides),
        Command::Train {
            mode,
            world,
            sft,
            prefset,
            heldout,
            ce_data,
            out,
            overrides,
        } => train_cmd(cli, *mode, world, sft, prefset, heldout, ce_data.as_deref(), out, overrides),
        Command::Eval {
            world,
            model,
            heldout,
            name,
            max_len,
            out,
        } => eval_cmd(cli, world, model, heldout, name.as_deref(), *max_len, out),
        Command::Compare { reports, out } => compare_cmd(cli, reports, out),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v).expect("serializable") + "\n"))
}

/// Parse failures are reported against the file they came from.
fn in_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io { .. } | Error::Format { .. } => e,
        other => Error::format(path, other.to_string()),
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_world(rec: &mut Recorder, path: &Path) -> Result<SynthWorld> {
    rec.input(path)?;
    let w: SynthWorld = serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    in_file(path, w.vocab.validate())?;
    Ok(w)
}

fn load_corpus(rec: &mut Recorder, world: &SynthWorld, path: &Path) -> Result<Vec<CorpusItem>> {
    rec.input(path)?;
    let items = in_file(path, corpus_from_jsonl(world, &read_text(path)?))?;
    if items.is_empty() {
        return Err(Error::format(path, "empty corpus"));
    }
    Ok(items)
}

fn load_model(rec: &mut Recorder, path: &Path) -> Result<PolicyCheckpoint> {
    rec.input(path)?;
    load_checkpoint(path)
}

fn load_jsonl<T: for<'de> serde::Deserialize<'de>>(rec: &mut Recorder, path: &Path) -> Result<Vec<T>> {
    rec.input(path)?;
    in_file(path, from_jsonl(&read_text(path)?))
}

/// Stage defaults, then `--config`, then `--seed` and the override flags.
fn config(cli: &Cli, stage: Stage, ov: &Overrides, rec: &mut Recorder) -> Result<TrainingConfig> {
    let mut c = match &cli.config {
        Some(p) => {
            rec.input(p)?;
            let mut text = read_text(p)?;
            let has_stage = text.lines().any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("stage"));
            if !has_stage {
                text = format!("stage = {}\n{text}", stage.name());
            }
            let mut c = TrainingConfig::from_text(&text)?;
            c.stage = stage;
            c
        }
        None => TrainingConfig::for_stage(stage),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    for kv in &ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(kv.as_str(), "expected KEY=VALUE"))?;
        c.set(k.trim(), v.trim())?;
    }
    if let Some(v) = ov.steps {
        c.steps = v;
    }
    if let Some(v) = ov.lr {
        c.lr = v;
    }
    if let Some(v) = ov.beta {
        c.beta = v;
    }
    if let Some(v) = ov.lambda {
        c.lambda = v;
    }
    c.validate()?;
    rec.config_hash(c.hash());
    Ok(c)
}

fn check_vocab(cfg_arch: &mpo_core::lm::Vocabulary, world: &SynthWorld) -> Result<()> {
    if *cfg_arch != world.vocab {
        return Err(Error::config("arch.vocab", "does not match the world's vocabulary"));
    }
    Ok(())
}

fn make_world_cmd(cli: &Cli, out: &Path) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut rec = Recorder::start("make-world", Some(seed));
    let w = make_world(seed);
    write_json(out, &w)?;
    rec.output(out)?;
    rec.finish()?;
    println!(
        "world seed {seed}: {} text symbols, {} speakers, {} speech tokens -> {}",
        w.vocab.text_tokens,
        w.vocab.speakers,
        w.vocab.speech_tokens,
        out.display()
    );
    Ok(())
}

fn make_corpus_cmd(cli: &Cli, world: &Path, n: usize, style: Style, exclude: &[PathBuf], out: &Path) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut rec = Recorder::start("make-corpus", Some(seed));
    let w = load_world(&mut rec, world)?;
    let mut spec = CorpusSpec::new(n, seed);
    spec.style = match style {
        Style::Studio => CorpusStyle::Studio,
        Style::Found => CorpusStyle::Found,
    };
    for p in exclude {
        spec.exclude.extend(prompt_keys(&load_corpus(&mut rec, &w, p)?));
    }
    let items = make_corpus_with(&w, &spec)?;
    write_text(out, &corpus_to_jsonl(&items))?;
    rec.note("style", spec.style.name());
    rec.output(out)?;
    rec.finish()?;
    println!("{} {} items -> {}", items.len(), spec.style.name(), out.display());
    Ok(())
}

/// Saves the model and logs; on divergence also keeps the last good
/// parameters and fails with the divergence error.
fn finish_training(rec: &mut Recorder, outcome: StageOutcome, out: &Path) -> Result<()> {
    let steps_csv = sibling(out, ".steps.csv");
    let evals_csv = sibling(out, ".evals.csv");
    if let Some(reason) = &outcome.failure {
        let good = sibling(out, ".last-good");
        save_checkpoint(&outcome.model, &good)?;
        write_text(&steps_csv, &outcome.log.steps_csv())?;
        write_text(&evals_csv, &outcome.log.evals_csv())?;
        eprintln!("training diverged ({reason}); last good checkpoint: {}", good.display());
        return Err(Error::Divergence {
            step: outcome.log.steps.len(),
            reason: format!("{reason}; last good checkpoint at {}", good.display()),
        });
    }
    save_checkpoint(&outcome.model, out)?;
    write_text(&steps_csv, &outcome.log.steps_csv())?;
    write_text(&evals_csv, &outcome.log.evals_csv())?;
    rec.output(out)?;
    rec.output(&steps_csv)?;
    rec.output(&evals_csv)?;
    if let Some(e) = outcome.log.evals.last() {
        println!(
            "step {}: cer {:.4}  spk_sim {:.4}  prosody {:.4}  heldout_ce {:.4}{}",
            e.step,
            e.cer,
            e.spk_sim,
            e.prosody,
            e.heldout_ce,
            e.kl.map_or(String::new(), |k| format!("  kl {k:.3}"))
        );
    }
    println!("checkpoint -> {}", out.display());
    Ok(())
}

fn sft_cmd(
    cli: &Cli,
    world: &Path,
    train: &Path,
    heldout: &Path,
    init: Option<&Path>,
    out: &Path,
    ov: &Overrides,
) -> Result<()> {
    let mut rec = Recorder::start("sft", cli.seed);
    let cfg = config(cli, Stage::Sft, ov, &mut rec)?;
    let w = load_world(&mut rec, world)?;
    check_vocab(&cfg.arch.vocab, &w)?;
    let train = load_corpus(&mut rec, &w, train)?;
    let held = load_corpus(&mut rec, &w, heldout)?;
    let init = init.map(|p| load_model(&mut rec, p)).transpose()?;
    let outcome = run_sft(&cfg, &w, &train, &held, init)?;
    finish_training(&mut rec, outcome, out)?;
    rec.finish()?;
    Ok(())
}

fn gen_candidates_cmd(
    cli: &Cli,
    world: &Path,
    model: &Path,
    corpus: &Path,
    n: Option<usize>,
    out: &Path,
    ov: &Overrides,
) -> Result<()> {
    let mut rec = Recorder::start("gen-candidates", cli.seed);
    let mut cfg = config(cli, Stage::Mpo, ov, &mut rec)?;
    if let Some(n) = n {
        cfg.n_candidates = n;
        cfg.validate()?;
    }
    let w = load_world(&mut rec, world)?;
    let m = load_model(&mut rec, model)?;
    let items = load_corpus(&mut rec, &w, corpus)?;
    let cands = generate_candidates(&m, &w, &items, cfg.n_candidates, &cfg.sampling, cfg.seed)?;
    write_text(out, &to_jsonl(&cands))?;
    rec.output(out)?;
    rec.finish()?;
    println!("{} prompts x {} candidates -> {}", cands.len(), cfg.n_candidates, out.display());
    Ok(())
}

fn build_prefset_cmd(cli: &Cli, candidates: &Path, out: &Path, ov: &Overrides) -> Result<()> {
    let mut rec = Recorder::start("build-prefset", cli.seed);
    let cfg = config(cli, Stage::Mpo, ov, &mut rec)?;
    let cands: Vec<ItemCandidates> = load_jsonl(&mut rec, candidates)?;
    let (records, report) = build_dataset(&cands, &cfg.pref_method());
    write_text(out, &to_jsonl(&records))?;
    rec.note("accepted", report.accepted);
    rec.note("rejected", report.rejected);
    rec.output(out)?;
    rec.finish()?;
    println!("{} items: {} accepted, {} rejected", report.items, report.accepted, report.rejected);
    for (reason, count) in &report.reasons {
        println!("  {reason}: {count}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    cli: &Cli,
    mode: Mode,
    world: &Path,
    sft: &Path,
    prefset: &Path,
    heldout: &Path,
    ce_data: Option<&Path>,
    out: &Path,
    ov: &Overrides,
) -> Result<()> {
    let mut rec = Recorder::start("train", cli.seed);
    let stage = if mode == Mode::DpoOnly { Stage::DpoOnly } else { Stage::Mpo };
    let mut cfg = config(cli, stage, ov, &mut rec)?;
    if mode == Mode::CombinedRankings {
        cfg.pair_source = PairSource::CombinedRankings;
        rec.config_hash(cfg.hash());
    }
    let w = load_world(&mut rec, world)?;
    let model = load_model(&mut rec, sft)?;
    let records: Vec<PrefRecord> = load_jsonl(&mut rec, prefset)?;
    // Combined rankings re-pair the scored candidates; the other modes use
    // the sets stored in the file.
    let records = if cfg.pair_source == PairSource::CombinedRankings {
        let cands: Vec<ItemCandidates> = records
            .into_iter()
            .map(|r| ItemCandidates {
                item_id: r.item_id,
                prompt: r.prompt,
                candidates: r.candidates,
            })
            .collect();
        let method = PrefMethod::CombinedRankings {
            metrics: cfg.metrics.clone(),
        };
        build_dataset(&cands, &method).0
    } else {
        records
    };
    let examples = training_examples(&records);
    let held = load_corpus(&mut rec, &w, heldout)?;
    let ce = match ce_data {
        Some(p) => load_corpus(&mut rec, &w, p)?,
        None => Vec::new(),
    };
    println!("{} preference examples, mode {:?}", examples.len(), mode);
    let outcome = run_preference_stage(&cfg, &w, &model, &examples, &held, &ce)?;
    finish_training(&mut rec, outcome, out)?;
    rec.finish()?;
    Ok(())
}

fn eval_cmd(
    cli: &Cli,
    world: &Path,
    model: &Path,
    heldout: &Path,
    name: Option<&str>,
    max_len: usize,
    out: &Path,
) -> Result<()> {
    let mut rec = Recorder::start("eval", cli.seed);
    let w = load_world(&mut rec, world)?;
    let m = load_model(&mut rec, model)?;
    let held = load_corpus(&mut rec, &w, heldout)?;
    if max_len == 0 || max_len > m.arch.max_response_len {
        return Err(Error::config("max_len", "must be in 1..=arch.max_response_len"));
    }
    let mut report = evaluate(&m, &w, &held, max_len)?;
    report.name = match name {
        Some(n) => n.to_string(),
        None => model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
    };
    write_json(out, &report)?;
    rec.note("heldout_digest", &report.heldout_digest);
    rec.output(out)?;
    rec.finish()?;
    println!(
        "{}: cer {:.4}  spk_sim {:.4}  prosody {:.4}  heldout_ce {:.4}",
        report.name, report.mean.cer, report.mean.spk_sim, report.mean.prosody_rmse, report.heldout_ce
    );
    Ok(())
}

fn compare_cmd(cli: &Cli, reports: &[PathBuf], out: &Path) -> Result<()> {
    let mut rec = Recorder::start("compare", cli.seed);
    let mut loaded = Vec::with_capacity(reports.len());
    for p in reports {
        rec.input(p)?;
        let r: EvalReport = serde_json::from_str(&read_text(p)?).map_err(|e| Error::format(p, e.to_string()))?;
        loaded.push(r);
    }
    let table = compare_experiments(&loaded)?;
    write_text(out, &table.to_csv())?;
    rec.output(out)?;
    rec.finish()?;
    print!("{}", table.to_text());
    Ok(())
}
