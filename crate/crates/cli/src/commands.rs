use std::io::Write;
use std::path::{Path, PathBuf};

use urie_core::classifier::{pretrain_classifier, TinyClassifier};
use urie_core::corrupt::{corrupt, CorruptionKind, CorruptionSpec};
use urie_core::eval::{build_eval_splits, evaluate, Enhancer, EvalSplits};
use urie_core::image_io::{enhance_any_size, read_png, write_png};
use urie_core::net::{mac_count, mac_table, Urie, UrieConfig};
use urie_core::sem::NormMode;
use urie_core::train::{train_urie, write_log, EpochRecord, TrainOptions};
use urie_core::Rng;

use crate::config::CliConfig;
use crate::error::{CliError, CliResult};
use crate::{Command, ConfigArgs, CorruptArgs, EnhanceArgs, EvalArgs, MacsArgs, NormArg, PretrainArgs, TrainArgs};

/// Enhancer weights are drawn from `train.seed` XOR this, so they do not
/// share a stream with the data sampling.
pub const INIT_SALT: u64 = 0x1e1e_5eed_0000_0001;

pub fn dispatch(cmd: &Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Pretrain(a) => cmd_pretrain(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Macs(a) => cmd_macs(a, out),
        Command::Config(a) => cmd_config(a, out),
    }
}

/// `<out>.log.jsonl` next to a checkpoint.
pub fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io("<stdout>", e))
}

fn resolve(a: &ConfigArgs) -> CliResult<CliConfig> {
    CliConfig::resolve(a.config.as_deref(), &a.overrides)
}

pub fn cmd_config(a: &ConfigArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve(a)?;
    cfg.validate()?;
    say(out, format_args!("{}", cfg.to_json()))
}

pub fn cmd_pretrain(a: &PretrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = resolve(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.pretrain.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.validate()?;
    let ds = cfg.dataset.train_set()?;
    let (clf, log) = pretrain_classifier(&ds, &cfg.pretrain)?;
    clf.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let mut text = String::new();
    for r in &log {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(&log_path, text).map_err(|e| CliError::io(&log_path, e))?;
    if let Some(last) = log.last() {
        say(
            out,
            format_args!(
                "pretrained on {} images: loss {:.4}, train accuracy {:.3}",
                ds.len(),
                last.mean_loss,
                last.train_accuracy
            ),
        )?;
    }
    Ok(())
}

fn load_classifier(path: &Path, classes: usize) -> CliResult<TinyClassifier> {
    let clf = TinyClassifier::load(path)?;
    if clf.classes() != classes {
        return Err(CliError::Config(format!(
            "classifier has {} classes, dataset.classes is {classes}",
            clf.classes()
        )));
    }
    Ok(clf)
}

/// Resolves the config for `train` with the dedicated flags applied last.
pub fn train_config(a: &TrainArgs) -> CliResult<CliConfig> {
    let mut cfg = resolve(&a.cfg)?;
    if let Some(l) = a.loss {
        cfg.train.loss_kind = l.into();
    }
    if let Some(n) = a.norm {
        cfg.model.norm_mode = n.into();
    }
    if let Some(f) = a.fraction {
        cfg.train.data_fraction = f;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn init_enhancer(cfg: &CliConfig) -> CliResult<Urie> {
    let mut urie = Urie::new(cfg.model, &mut Rng::new(cfg.train.seed ^ INIT_SALT))?;
    if cfg.identity_init {
        urie.zero_head();
    }
    Ok(urie)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = train_config(a)?;
    let clf = load_classifier(&a.clf, cfg.dataset.classes)?;
    let ds = cfg.dataset.train_set()?;
    let mut urie = init_enhancer(&cfg)?;
    let opts = TrainOptions {
        wall_time: cfg.log_wall_time,
    };
    let mut lines = Vec::new();
    let records = train_urie(&mut urie, &clf, &ds, &cfg.train, opts, |r: &EpochRecord| {
        lines.push(format!(
            "epoch {:>3}  lr {:.2e}  loss {:.5}  steps {}  images {}",
            r.epoch, r.lr, r.mean_loss, r.steps, r.images
        ));
    })?;
    for l in &lines {
        say(out, format_args!("{l}"))?;
    }
    urie.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    write_log(&records, &log_path)?;
    say(
        out,
        format_args!("wrote {} ({})", a.out.display(), cfg.model.fingerprint()),
    )
}

/// Loads an enhancer, and with `norm` set refuses checkpoints written under
/// another normalization mode.
pub fn load_enhancer(path: &Path, norm: Option<NormArg>) -> CliResult<Urie> {
    let ck = urie_core::checkpoint::Checkpoint::load(path)?;
    Ok(match norm {
        None => Urie::from_checkpoint(&ck)?,
        Some(n) => {
            let mut expected = UrieConfig::from_fingerprint(&ck.fingerprint)?;
            expected.norm_mode = NormMode::from(n);
            Urie::from_checkpoint_with(&ck, &expected)?
        }
    })
}

pub fn cmd_enhance(a: &EnhanceArgs) -> CliResult<()> {
    let urie = load_enhancer(&a.model, a.norm)?;
    let img = read_png(&a.input)?;
    write_png(&a.out, &enhance_any_size(&urie, &img)?)?;
    Ok(())
}

pub fn cmd_corrupt(a: &CorruptArgs) -> CliResult<()> {
    let kind: CorruptionKind = a.kind.parse()?;
    let spec = CorruptionSpec::new(kind, a.severity, a.seed);
    spec.validate()?;
    let img = read_png(&a.input)?;
    write_png(&a.out, &corrupt(&img, &spec)?)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve(&a.cfg)?;
    cfg.validate()?;
    let clf = load_classifier(&a.clf, cfg.dataset.classes)?;
    let splits = match &a.splits {
        Some(p) => EvalSplits::load(p)?,
        None => build_eval_splits(&cfg.dataset.test_set()?, &cfg.eval)?,
    };
    if let Some(p) = &a.save_splits {
        splits.save(p)?;
    }
    let urie = a.model.as_deref().map(|p| load_enhancer(p, a.norm)).transpose()?;
    let enhancer = urie.as_ref().map_or(Enhancer::Identity, Enhancer::Urie);
    let report = evaluate(enhancer, &clf, &splits)?;
    let json = report.to_json()?;
    match &a.report {
        Some(p) => std::fs::write(p, format!("{json}\n")).map_err(|e| CliError::io(p, e))?,
        None => say(out, format_args!("{json}"))?,
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report.per_kind_csv()).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

pub fn cmd_macs(a: &MacsArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = UrieConfig {
        norm_mode: a.norm.into(),
        reduction_ratio: a.reduction,
        ..UrieConfig::default()
    };
    if a.table {
        for l in mac_table(&cfg, a.h, a.w)? {
            say(out, format_args!("{:<12} {}", l.name, l.macs))?;
        }
    }
    say(out, format_args!("{}", mac_count(&cfg, a.h, a.w)?))
}
