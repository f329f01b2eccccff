//! Training run configuration: a flat `key=value` file overlaid by flags.

use std::fs;
use std::path::{Path, PathBuf};

use getnet_core::data::{parse_key_values, PAIRS_FILE};
use getnet_core::{Precision, TrainConfig};

use crate::{Failure, TrainArgs};

/// Keys a config file may hold besides the training ones.
const RUN_KEYS: [&str; 4] = ["pairs", "out", "precision", "resume"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub pairs: PathBuf,
    pub out: PathBuf,
    pub precision: Precision,
    pub resume: Option<PathBuf>,
}

fn parse_precision(v: &str) -> Result<Precision, Failure> {
    v.trim()
        .parse()
        .ok()
        .and_then(Precision::from_bits)
        .ok_or_else(|| Failure::invalid(format!("precision must be 32 or 64, got {v:?}")))
}

/// A dataset directory stands for its pair file.
pub fn pair_file(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join(PAIRS_FILE)
    } else {
        p
    }
}

impl RunConfig {
    pub fn from_args(args: &TrainArgs) -> Result<Self, Failure> {
        let mut train = TrainConfig::default();
        let mut pairs = None;
        let mut out = None;
        let mut precision = Precision::F32;
        let mut resume = None;

        if let Some(path) = &args.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure { code: 3, message: format!("{}: {e}", path.display()) })?;
            // relative paths in the file are relative to the file
            let base = path.parent().unwrap_or(Path::new("."));
            for (k, v) in parse_key_values(&text)? {
                match k.as_str() {
                    "pairs" => pairs = Some(base.join(v)),
                    "out" => out = Some(base.join(v)),
                    "resume" => resume = Some(base.join(v)),
                    "precision" => precision = parse_precision(&v)?,
                    _ if TrainConfig::KEYS.contains(&k.as_str()) => train.set(&k, &v)?,
                    _ => {
                        return Err(Failure::invalid(format!(
                            "{}: unknown key {k:?}; expected one of {:?} or {RUN_KEYS:?}",
                            path.display(),
                            TrainConfig::KEYS
                        )))
                    }
                }
            }
        }

        let flags = [
            ("mode", args.mode.clone()),
            ("learning_rate", args.learning_rate.map(|v| v.to_string())),
            ("locnet_lr_scale", args.locnet_lr_scale.map(|v| v.to_string())),
            ("max_grad_norm", args.max_grad_norm.map(|v| v.to_string())),
            ("batch_size", args.batch_size.map(|v| v.to_string())),
            ("epochs", args.epochs.map(|v| v.to_string())),
            ("stn_only_epochs", args.stn_only_epochs.map(|v| v.to_string())),
            ("joint_epochs", args.joint_epochs.map(|v| v.to_string())),
            ("margin", args.margin.map(|v| v.to_string())),
            ("seed", args.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                train.set(k, &v)?;
            }
        }
        if let Some(bits) = args.precision {
            precision = parse_precision(&bits.to_string())?;
        }
        pairs = args.pairs.clone().or(pairs);
        out = args.out.clone().or(out);
        resume = args.resume.clone().or(resume);

        train.validate()?;
        let pairs = pair_file(pairs.ok_or_else(|| Failure::invalid("no pair file given (--pairs)"))?);
        if !pairs.is_file() {
            return Err(Failure::invalid(format!("pair file {} does not exist", pairs.display())));
        }
        if let Some(r) = &resume {
            if !r.is_file() {
                return Err(Failure::invalid(format!("checkpoint {} does not exist", r.display())));
            }
        }
        Ok(RunConfig {
            train,
            pairs,
            out: out.ok_or_else(|| Failure::invalid("no output directory given (--out)"))?,
            precision,
            resume,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use getnet_core::Mode;

    fn dataset() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(PAIRS_FILE), "0,1,1\n").unwrap();
        dir
    }

    #[test]
    fn flags_override_file() {
        let dir = dataset();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# desk run\nepochs=7\nlearning_rate=0.5\nmode=baseline_siamese\npairs=.\nout=out\nprecision=64\n").unwrap();
        let args = TrainArgs {
            config: Some(cfg),
            epochs: Some(3),
            ..TrainArgs::default()
        };
        let run = RunConfig::from_args(&args).unwrap();
        assert_eq!(run.train.epochs, 3);
        assert_eq!(run.train.learning_rate, 0.5);
        assert_eq!(run.train.mode, Mode::BaselineSiamese);
        assert_eq!(run.precision, Precision::F64);
        assert_eq!(run.pairs, dir.path().join(".").join(PAIRS_FILE));
        assert_eq!(run.out, dir.path().join("out"));
    }

    #[test]
    fn bad_values_are_validation_errors() {
        let dir = dataset();
        let base = TrainArgs {
            pairs: Some(dir.path().to_path_buf()),
            out: Some(dir.path().join("o")),
            ..TrainArgs::default()
        };
        let zero = TrainArgs { epochs: Some(0), ..base };
        assert_eq!(RunConfig::from_args(&zero).unwrap_err().code, 2);
        let prec = TrainArgs {
            precision: Some(16),
            pairs: Some(dir.path().to_path_buf()),
            out: Some(dir.path().join("o")),
            ..TrainArgs::default()
        };
        assert_eq!(RunConfig::from_args(&prec).unwrap_err().code, 2);
        let cfg = dir.path().join("bad.cfg");
        fs::write(&cfg, "wings=2\n").unwrap();
        let unknown = TrainArgs { config: Some(cfg), ..TrainArgs::default() };
        assert_eq!(RunConfig::from_args(&unknown).unwrap_err().code, 2);
    }
}
