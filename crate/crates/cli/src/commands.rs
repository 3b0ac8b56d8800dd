use std::fs;
use std::path::Path;

use acsa_core::data::{
    encode_all, load_embeddings, load_reviews, split_train_val, synth, tokenize, vocab_from_reviews, write_jsonl,
    CorpusFormat, LabelSpace,
};
use acsa_core::eval::{decode, evaluate as score, EvalReport};
use acsa_core::model::{Checkpoint, CheckpointMeta, JointModel};
use acsa_core::train::run_repeated;
use acsa_core::Error;
use serde_json::{json, Map, Value};

use crate::config::{infer_format, load_config, RunConfig};
use crate::{CensusArgs, CliError, ConfigArgs, EvaluateArgs, GenSynthArgs, PredictArgs, TrainArgs};

type CmdResult = Result<u8, CliError>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes") + "\n"
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(p) = &args.labels {
        cfg.data.labels = Some(p.clone());
    }
    Ok(cfg)
}

fn check_tau(tau: f64) -> Result<f64, CliError> {
    if (0.0..=1.0).contains(&tau) {
        Ok(tau)
    } else {
        Err(CliError::usage(format!("tau must lie in [0, 1], got {tau}")))
    }
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<(), CliError> {
    write(&dir.join("report.json"), to_json(report))?;
    write(&dir.join("report.txt"), report.to_text())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = resolve(&a.common)?;
    if let Some(p) = a.data {
        cfg.data.train = Some(p);
    }
    if let Some(p) = a.val {
        cfg.data.val = Some(p);
    }
    if let Some(p) = a.test {
        cfg.data.test = Some(p);
    }
    if let Some(p) = a.embeddings {
        cfg.data.embeddings = Some(p);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(r) = a.runs {
        cfg.train.runs = r;
    }
    if let Some(t) = a.tau {
        cfg.train.tau = t;
    }
    if let Some(o) = a.out {
        cfg.output.dir = o;
    }
    cfg.train.validate()?;

    let train_path = cfg
        .data
        .train
        .clone()
        .ok_or_else(|| CliError::usage("no training corpus: pass --data or set data.train"))?;
    let labels_path = cfg
        .data
        .labels
        .clone()
        .ok_or_else(|| CliError::usage("no label space: pass --labels or set data.labels"))?;
    let labels = LabelSpace::load(&labels_path)?;
    let mode = cfg.data.tokenizer;

    let raw = load_reviews(&train_path, cfg.data.format_for(&train_path))?;
    let (train_raw, val_raw) = match &cfg.data.val {
        Some(p) => (raw, load_reviews(p, cfg.data.format_for(p))?),
        None => split_train_val(raw, cfg.data.val_ratio, cfg.train.seed)?,
    };
    let vocab = vocab_from_reviews(&train_raw, mode, cfg.data.min_count)?;
    let train_set = encode_all(&train_raw, &vocab, &labels, mode)?;
    let val_set = encode_all(&val_raw, &vocab, &labels, mode)?;
    let test_set = match &cfg.data.test {
        Some(p) => Some(encode_all(&load_reviews(p, cfg.data.format_for(p))?, &vocab, &labels, mode)?),
        None => None,
    };
    eprintln!(
        "{} train / {} validation texts{}, vocabulary {}, {labels}",
        train_set.len(),
        val_set.len(),
        test_set.as_ref().map(|t| format!(", {} test", t.len())).unwrap_or_default(),
        vocab.len()
    );

    let model_cfg = cfg.model.model_config(vocab.len(), labels.n_aspects(), labels.n_polarities());
    let embeddings = match &cfg.data.embeddings {
        Some(p) => {
            let e = load_embeddings(p, &vocab, model_cfg.embed_dim, cfg.train.seed)?;
            eprintln!("embeddings: {} of {} tokens found ({:.1}%)", e.found, vocab.len() - 2, 100.0 * e.coverage);
            Some(e.matrix)
        }
        None => None,
    };

    let out = cfg.output.dir.clone();
    create_dir(&out.join("split"))?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    write(&out.join("labels.txt"), labels.to_file_string())?;
    write_jsonl(out.join("split/train.jsonl"), &train_raw)?;
    write_jsonl(out.join("split/val.jsonl"), &val_raw)?;

    let census = JointModel::new(model_cfg.clone(), cfg.train.seed)?.parameter_census();
    write(&out.join("census.txt"), format!("{census}\n"))?;
    write(&out.join("census.json"), to_json(&census))?;

    let build = |seed: u64| {
        let mut m = JointModel::new(model_cfg.clone(), seed)?;
        if let Some(e) = &embeddings {
            m.set_embeddings(e)?;
        }
        Ok(m)
    };
    let outcome = run_repeated(build, &train_set, &val_set, test_set.as_deref(), &cfg.train, |r, rec| {
        eprintln!(
            "run {} epoch {:>3}  loss {:.4}  val acsa f1 {:.4}  acd f1 {:.4}",
            r + 1,
            rec.epoch,
            rec.loss,
            rec.val_acsa_f1,
            rec.val_acd_f1
        );
    })?;

    for (r, run) in outcome.runs.iter().enumerate() {
        let dir = out.join(format!("run{}", r + 1));
        create_dir(&dir)?;
        let meta = CheckpointMeta {
            epoch: run.outcome.best_epoch,
            val_f1: run.outcome.best_val_f1,
            config_hash: cfg.train.hash(),
            tau: cfg.train.tau,
            tokenizer: mode,
        };
        Checkpoint::capture(&run.model, &labels, &vocab, meta)?.save(dir.join("checkpoint.acsa"))?;
        let log: String = run
            .outcome
            .history
            .iter()
            .map(|rec| serde_json::to_string(rec).expect("epoch record serializes") + "\n")
            .collect();
        write(&dir.join("epochs.jsonl"), log)?;
        write_report(&dir, &run.report)?;
        eprintln!(
            "run {} (seed {}): best epoch {}, val acsa f1 {:.4}",
            r + 1,
            run.seed,
            run.outcome.best_epoch,
            run.outcome.best_val_f1
        );
    }
    write_report(&out, &outcome.averaged)?;

    let on = if test_set.is_some() { "test set" } else { "validation split" };
    println!("# averaged over {} run(s), {on}", outcome.runs.len());
    print!("{}", outcome.averaged.to_text());
    Ok(0)
}

fn parse_format(flag: Option<&str>, path: &Path) -> Result<CorpusFormat, CliError> {
    match flag {
        Some(f) => Ok(f.parse()?),
        None => Ok(infer_format(path)),
    }
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if let Some(p) = &a.labels {
        let given = LabelSpace::load(p)?;
        if given != ckpt.labels {
            return Err(Error::LabelMismatch(format!("checkpoint has {}, {} has {given}", ckpt.labels, p.display())).into());
        }
    }
    let model = ckpt.to_model()?;
    let tau = check_tau(a.tau.unwrap_or(ckpt.meta.tau))?;
    let raw = load_reviews(&a.data, parse_format(a.format.as_deref(), &a.data)?)?;
    let examples = encode_all(&raw, &ckpt.vocab, &ckpt.labels, ckpt.meta.tokenizer)?;
    let report = score(&model, &examples, tau)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        let json = out.extension().is_some_and(|e| e == "json");
        write(out, if json { to_json(&report) } else { text })?;
    }
    Ok(0)
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.to_model()?;
    let tau = check_tau(a.tau.unwrap_or(ckpt.meta.tau))?;
    let mut texts = a.text.clone();
    if let Some(p) = &a.data {
        let body = fs::read_to_string(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        texts.extend(body.lines().map(str::to_string));
    }
    if texts.is_empty() {
        return Err(CliError::usage("nothing to predict: pass --text or --data"));
    }

    let aspects = ckpt.labels.aspects();
    let polarities = ckpt.labels.polarities();
    let mut failures = 0;
    for (index, text) in texts.iter().enumerate() {
        let tokens = match tokenize(text, ckpt.meta.tokenizer) {
            Ok(t) => t,
            Err(e) => {
                failures += 1;
                println!("{}", json!({ "index": index, "text": text, "error": e.to_string() }));
                continue;
            }
        };
        let ids: Vec<usize> = tokens.iter().map(|t| ckpt.vocab.id(t)).collect();
        let out = model.forward(&ids)?;
        let decoded = decode(&out, tau);
        let predicted: Vec<Value> = decoded
            .pairs
            .iter()
            .map(|&(j, k)| {
                let dist: Map<String, Value> =
                    polarities.iter().zip(&out.y_hat_s[j]).map(|(p, &v)| (p.clone(), json!(v))).collect();
                let mut item = json!({
                    "aspect": aspects[j],
                    "polarity": polarities[k],
                    "probability": out.y_hat_a[j],
                    "distribution": dist,
                });
                if a.attention {
                    item["attention"] = serde_json::to_value(&out.attention[j]).expect("attention serializes");
                }
                item
            })
            .collect();
        let scores: Map<String, Value> = aspects.iter().zip(&out.y_hat_a).map(|(n, &p)| (n.clone(), json!(p))).collect();
        let mut line = json!({ "index": index, "text": text, "predictions": predicted, "aspect_scores": scores });
        if a.attention {
            line["tokens"] = json!(tokens);
        }
        println!("{line}");
    }
    if failures > 0 {
        eprintln!("{failures} of {} texts could not be processed", texts.len());
        return Ok(CliError::DATA);
    }
    Ok(0)
}

pub fn gen_synth(a: GenSynthArgs) -> CmdResult {
    create_dir(&a.out)?;
    let reviews = synth::generate(a.size, a.seed);
    let data = a.out.join("synth.jsonl");
    let labels = a.out.join("labels.txt");
    write_jsonl(&data, &reviews)?;
    write(&labels, synth::label_space().to_file_string())?;
    println!("{}", data.display());
    println!("{}", labels.display());
    Ok(0)
}

pub fn census(a: CensusArgs) -> CmdResult {
    let census = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.to_model()?.parameter_census(),
        None => {
            let cfg = resolve(&a.common)?;
            let (n, m) = match &cfg.data.labels {
                Some(p) => {
                    let l = LabelSpace::load(p)?;
                    (l.n_aspects(), l.n_polarities())
                }
                None => (a.aspects, a.polarities),
            };
            let model_cfg = cfg.model.model_config(a.vocab_size, n, m);
            JointModel::new(model_cfg, cfg.train.seed)?.parameter_census()
        }
    };
    if a.json {
        print!("{}", to_json(&census));
    } else {
        println!("{census}");
    }
    Ok(0)
}
