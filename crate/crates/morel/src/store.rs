//! On-disk bundle registry with load/unload accounting.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use morel_core::model::Bundle;

use crate::codec::{bundle_to_record, record_to_bundle};
use crate::error::{io_err, Error, Result};
use crate::format::{decode, encode};

pub const GLOBAL_FILE: &str = "gca.morl";
pub const RESIDENCY_LOG: &str = "residency.log";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BundleKey {
    Global,
    Key(usize),
}

impl BundleKey {
    pub fn file_name(self) -> String {
        match self {
            BundleKey::Global => GLOBAL_FILE.to_string(),
            BundleKey::Key(n) => format!("kfa_{n:04}.morl"),
        }
    }

    pub fn is_key(self) -> bool {
        matches!(self, BundleKey::Key(_))
    }
}

impl fmt::Display for BundleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BundleKey::Global => write!(f, "gca"),
            BundleKey::Key(n) => write!(f, "kfa{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Load,
    Unload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEvent {
    pub seq: u64,
    pub phase: String,
    pub key: BundleKey,
    pub action: Action,
    /// Key spaces resident right after the event.
    pub key_residency: usize,
}

impl fmt::Display for LedgerEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.action {
            Action::Load => "load",
            Action::Unload => "unload",
        };
        write!(f, "{} {} {} {} keys={}", self.seq, self.phase, a, self.key, self.key_residency)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResidencyLedger {
    resident: BTreeSet<BundleKey>,
    peak_keys: usize,
    peak_total: usize,
    events: Vec<LedgerEvent>,
    phase: String,
}

impl ResidencyLedger {
    pub fn resident(&self) -> &BTreeSet<BundleKey> {
        &self.resident
    }

    pub fn is_resident(&self, key: BundleKey) -> bool {
        self.resident.contains(&key)
    }

    pub fn key_count(&self) -> usize {
        self.resident.iter().filter(|k| k.is_key()).count()
    }

    pub fn peak_keys(&self) -> usize {
        self.peak_keys
    }

    pub fn peak_total(&self) -> usize {
        self.peak_total
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    pub fn set_phase(&mut self, phase: impl Into<String>) {
        self.phase = phase.into();
    }

    pub fn loads(&self) -> usize {
        self.events.iter().filter(|e| e.action == Action::Load).count()
    }

    fn record(&mut self, key: BundleKey, action: Action) -> Result<&LedgerEvent> {
        match action {
            Action::Load => {
                if !self.resident.insert(key) {
                    return Err(Error::LedgerViolation(format!("{key} is already resident")));
                }
            }
            Action::Unload => {
                if !self.resident.remove(&key) {
                    return Err(Error::LedgerViolation(format!("{key} is not resident")));
                }
            }
        }
        let key_residency = self.key_count();
        self.peak_keys = self.peak_keys.max(key_residency);
        self.peak_total = self.peak_total.max(self.resident.len());
        let seq = self.events.len() as u64;
        self.events.push(LedgerEvent { seq, phase: self.phase.clone(), key, action, key_residency });
        Ok(self.events.last().unwrap())
    }
}

/// A directory of bundle records. Loads and unloads go through the ledger;
/// `peek` reads without accounting, for inspection only.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    ledger: ResidencyLedger,
    log_events: bool,
}

impl Store {
    /// Opens (creating if needed) a store directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Store { dir, ledger: ResidencyLedger::default(), log_events: false })
    }

    /// Opens an existing store without creating anything.
    pub fn open_existing(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("store {}", dir.display())));
        }
        Ok(Store { dir, ledger: ResidencyLedger::default(), log_events: false })
    }

    /// Appends every ledger event to `residency.log` in the store.
    pub fn with_event_log(mut self) -> Self {
        self.log_events = true;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_of(&self, key: BundleKey) -> PathBuf {
        self.dir.join(key.file_name())
    }

    pub fn exists(&self, key: BundleKey) -> bool {
        self.path_of(key).is_file()
    }

    pub fn ledger(&self) -> &ResidencyLedger {
        &self.ledger
    }

    pub fn set_phase(&mut self, phase: impl Into<String>) {
        self.ledger.set_phase(phase);
    }

    /// Writes the record atomically (temp file + rename) and returns its path.
    pub fn save(&mut self, key: BundleKey, bundle: &Bundle) -> Result<PathBuf> {
        let bytes = encode(&bundle_to_record(bundle));
        let path = self.path_of(key);
        let tmp = self.dir.join(format!(".{}.tmp", key.file_name()));
        fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Reads and verifies a record without touching the ledger.
    pub fn peek(&self, key: BundleKey) -> Result<Bundle> {
        let path = self.path_of(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(path.display().to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let name = key.file_name();
        let rec = decode(&bytes).map_err(|e| Error::CorruptRecord { name: name.clone(), reason: e.to_string() })?;
        record_to_bundle(&rec).map_err(|reason| Error::CorruptRecord { name, reason })
    }

    pub fn load(&mut self, key: BundleKey) -> Result<Bundle> {
        if self.ledger.is_resident(key) {
            return Err(Error::LedgerViolation(format!("{key} is already resident")));
        }
        let b = self.peek(key)?;
        self.note(key, Action::Load)?;
        Ok(b)
    }

    /// Accounts for a bundle created in memory rather than read from disk.
    pub fn adopt(&mut self, key: BundleKey) -> Result<()> {
        self.note(key, Action::Load)
    }

    pub fn unload(&mut self, key: BundleKey) -> Result<()> {
        self.note(key, Action::Unload)
    }

    fn note(&mut self, key: BundleKey, action: Action) -> Result<()> {
        let line = self.ledger.record(key, action)?.to_string();
        if self.log_events {
            let path = self.dir.join(RESIDENCY_LOG);
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
            writeln!(f, "{line}").map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Key bundle indices present on disk, ascending.
    pub fn key_bundles(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for e in fs::read_dir(&self.dir).map_err(io_err(&self.dir))? {
            let e = e.map_err(io_err(&self.dir))?;
            let name = e.file_name();
            let name = name.to_string_lossy();
            if let Some(n) = name.strip_prefix("kfa_").and_then(|s| s.strip_suffix(".morl")) {
                if let Ok(n) = n.parse() {
                    out.push(n);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}
