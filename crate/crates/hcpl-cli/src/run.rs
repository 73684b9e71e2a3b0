//! Shared command context: config, seed, output directory and the run
//! manifest every command leaves behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hcpl_core::io::Config;
use hcpl_core::{HcplError, Result};

/// Everything a command needs besides its positional inputs. Dropping the
/// context without calling [`Ctx::finish`] writes no manifest.
pub struct Ctx {
    pub config: Config,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    command: &'static str,
    config_given: bool,
    inputs: Vec<String>,
    started: Instant,
}

impl Ctx {
    pub fn new(
        command: &'static str,
        config_path: Option<&Path>,
        seed: u64,
        threads: usize,
        out: Option<&Path>,
    ) -> Result<Self> {
        let out = out
            .ok_or_else(|| HcplError::Config(format!("{command} needs --out")))?
            .to_path_buf();
        let config = match config_path {
            Some(p) => Config::load(p)?,
            None => Config::parse("", "<default>")?,
        };
        std::fs::create_dir_all(&out).map_err(|e| HcplError::io(out.display().to_string(), e))?;
        Ok(Ctx {
            config,
            seed,
            threads,
            out,
            command,
            config_given: config_path.is_some(),
            inputs: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Record a positional input path for the manifest.
    pub fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.display().to_string());
        p.to_path_buf()
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Write the run manifest. Reruns reproduce it byte for byte except the
    /// wall_ms line.
    pub fn finish(self) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "command {}", self.command);
        let hash = if self.config_given { self.config.source_hash } else { 0 };
        let _ = writeln!(text, "config_hash {hash:016x}");
        let _ = writeln!(text, "seed {}", self.seed);
        let _ = writeln!(text, "threads {}", self.threads);
        for input in &self.inputs {
            let _ = writeln!(text, "input {input}");
        }
        let _ = writeln!(text, "output {}", self.out.display());
        let _ = writeln!(text, "wall_ms {}", self.started.elapsed().as_millis());
        let _ = writeln!(text, "version hcpl-core {}", hcpl_core::VERSION);
        let _ = writeln!(text, "version hcpl-cli {}", env!("CARGO_PKG_VERSION"));
        let path = self.out.join("manifest.txt");
        std::fs::write(&path, text).map_err(|e| HcplError::io(path.display().to_string(), e))
    }
}

/// Write a text artifact under the run's output directory.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HcplError::io(path.display().to_string(), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| HcplError::io(path.display().to_string(), e))
}
