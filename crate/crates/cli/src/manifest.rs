//! Run manifests: enough to replay a command, plus hashes of what it wrote.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.txt";

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config: String,
    pub seed: u64,
    pub out: PathBuf,
    pub status: String,
    pub inputs: Vec<(String, String)>,
    pub artifacts: Vec<(String, String)>,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: String, seed: u64, out: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed,
            out: out.to_path_buf(),
            status: "running".into(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Records the hash of an input file under `label`.
    pub fn input(&mut self, label: &str, path: &Path) -> io::Result<()> {
        self.inputs.push((label.to_string(), sha256_file(path)?));
        Ok(())
    }

    /// Records the hash of `rel`, a path relative to the output directory.
    pub fn artifact(&mut self, rel: &Path) -> io::Result<()> {
        let hash = sha256_file(&self.out.join(rel))?;
        self.artifacts.push((rel.display().to_string(), hash));
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "args = {}", self.args.join(" "));
        let cfg = self.config_path.as_ref().map_or("(built-in)".to_string(), |p| p.display().to_string());
        let _ = writeln!(s, "config_path = {cfg}");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "status = {}", self.status);
        for (label, hash) in &self.inputs {
            let _ = writeln!(s, "input {label} = sha256:{hash}");
        }
        for (name, hash) in &self.artifacts {
            let _ = writeln!(s, "artifact {name} = sha256:{hash}");
        }
        let _ = writeln!(s, "\n# resolved configuration");
        s.push_str(&self.config);
        s
    }

    pub fn write(&self) -> io::Result<()> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join(FILE), self.render())
    }
}
