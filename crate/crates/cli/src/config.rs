//! Flat `key = value` configuration, run directories and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::CliError;

const DIGEST_PREFIX: &str = "digest.";
const OUTPUT_PREFIX: &str = "output.";

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key `{k}`", i + 1));
        }
    }
    Ok(out)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Value type accepted in a config file.
pub trait Setting: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! setting_via_fromstr {
    ($($t:ty),*) => {$(
        impl Setting for $t {
            fn parse(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

setting_via_fromstr!(usize, u64, f64, bool, String);

impl Setting for PathBuf {
    fn parse(s: &str) -> Option<Self> {
        Some(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// Resolved settings: command-line flags override the config file, which
/// overrides defaults. Every resolved value is echoed into the manifest.
pub struct Settings {
    command: &'static str,
    file: BTreeMap<String, String>,
    digests: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(command: &'static str, path: Option<&Path>) -> Result<Self, CliError> {
        let mut file = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                parse_kv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
            None => BTreeMap::new(),
        };
        if let Some(c) = file.remove("command") {
            if c != command {
                return Err(CliError::Usage(format!("config is for `{c}`, not `{command}`")));
            }
        }
        file.retain(|k, _| !k.starts_with(OUTPUT_PREFIX));
        let digests = file
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(DIGEST_PREFIX).map(|n| (n.to_string(), v.clone())))
            .collect();
        file.retain(|k, _| !k.starts_with(DIGEST_PREFIX));
        Ok(Self { command, file, digests, resolved: BTreeMap::new() })
    }

    /// Flag value, else config value, else `default`.
    pub fn get<T: Setting>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let v = self.pick(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.render());
        Ok(v)
    }

    /// Like [`Settings::get`] but without a default.
    pub fn require<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        let v = self
            .pick(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required setting `{key}`")))?;
        self.resolved.insert(key.to_string(), v.render());
        Ok(v)
    }

    /// Optional setting; recorded only when present.
    pub fn optional<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let v = self.pick(key, flag)?;
        if let Some(v) = &v {
            self.resolved.insert(key.to_string(), v.render());
        }
        Ok(v)
    }

    fn pick<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let from_file = self.file.remove(key);
        if flag.is_some() {
            return Ok(flag);
        }
        match from_file {
            Some(s) => T::parse(&s)
                .map(Some)
                .ok_or_else(|| CliError::Usage(format!("invalid value `{s}` for `{key}`"))),
            None => Ok(None),
        }
    }

    /// Rejects config keys that no setting consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        if let Some(k) = self.file.keys().next() {
            return Err(CliError::Usage(format!("unknown setting `{k}` for `{}`", self.command)));
        }
        Ok(())
    }

    /// Digest of an input file, checked against any digest recorded in the
    /// loaded config.
    pub fn input_digest(&mut self, key: &str, path: &Path) -> Result<String, CliError> {
        let d = sha256_file(path)?;
        if let Some(want) = self.digests.get(key) {
            if *want != d {
                return Err(CliError::Runtime(format!(
                    "input `{key}` ({}) does not match the recorded digest",
                    path.display()
                )));
            }
        }
        self.resolved.insert(format!("{DIGEST_PREFIX}{key}"), d.clone());
        Ok(d)
    }

    pub fn command(&self) -> &'static str {
        self.command
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

/// Timestamped output directory under a runs root.
pub struct RunDir {
    pub path: PathBuf,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        for i in 0.. {
            let name = if i == 0 { stamp.clone() } else { format!("{stamp}-{i}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path, outputs: Vec::new() }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        unreachable!()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let p = self.file(name);
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        self.record(name);
        Ok(p)
    }

    /// Marks a file written by other means as a run output.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    /// Writes `manifest.txt`: command, resolved settings, input and output digests.
    pub fn finish(mut self, settings: &Settings) -> Result<PathBuf, CliError> {
        let mut text = format!("command = {}\n", settings.command());
        for (k, v) in settings.resolved() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        self.outputs.sort();
        for o in &self.outputs {
            let d = sha256_file(&self.file(o))?;
            text.push_str(&format!("{OUTPUT_PREFIX}{o} = {d}\n"));
        }
        let p = self.file("manifest.txt");
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
        Ok(self.path)
    }
}
