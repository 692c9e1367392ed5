//! Where each artifact lives under the output root, and the provenance
//! stamp every report carries.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use piaug_core::config::{RunConfig, TOOL_VERSION};

use crate::{CliResult, Common, Failure};

pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub root: PathBuf,
    pub force: bool,
}

impl Run {
    pub fn open(c: &Common) -> CliResult<Self> {
        let cfg = match &c.config {
            Some(p) if !p.exists() => {
                return Err(Failure::Usage(format!("config file {} does not exist", p.display())));
            }
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let root = c.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs"));
        let hash = cfg.hash()?;
        Ok(Self { cfg, hash, root, force: c.force })
    }

    pub fn dir(&self, sub: &str) -> CliResult<PathBuf> {
        let d = self.root.join(sub);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    pub fn train_set(&self) -> PathBuf {
        self.root.join("data").join("train.ds")
    }

    pub fn eval_set(&self) -> PathBuf {
        self.root.join("data").join("eval.ds")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    /// A model argument is a variant name when a checkpoint of that name
    /// exists under the root, otherwise a path.
    pub fn resolve_model(&self, arg: &str) -> PathBuf {
        let named = self.checkpoint(arg);
        if named.exists() {
            named
        } else {
            PathBuf::from(arg)
        }
    }

    /// Refuses to overwrite `path` unless `--force` was given.
    pub fn guard(&self, path: &Path) -> CliResult<()> {
        if path.exists() && !self.force {
            return Err(Failure::Usage(format!("{} exists; pass --force to overwrite", path.display())));
        }
        Ok(())
    }

    pub fn stamp(&self) -> String {
        format!("# piaug {TOOL_VERSION} config {}\n", self.hash)
    }

    /// Creates a report file that starts with the provenance stamp.
    pub fn report(&self, path: &Path) -> CliResult<BufWriter<File>> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.stamp().as_bytes())?;
        Ok(w)
    }

    pub fn write_json<T: serde::Serialize>(&self, path: &Path, body: &T) -> CliResult<()> {
        #[derive(serde::Serialize)]
        struct Stamped<'a, T> {
            config_hash: &'a str,
            tool_version: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let text = serde_json::to_string_pretty(&Stamped { config_hash: &self.hash, tool_version: TOOL_VERSION, body })
            .map_err(piaug_core::Error::from)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Flushes a report writer, surfacing I/O errors.
pub fn finish(mut w: BufWriter<File>) -> CliResult<()> {
    w.flush()?;
    Ok(())
}
