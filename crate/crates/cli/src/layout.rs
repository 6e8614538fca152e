//! File names inside one experiment directory.

use std::path::{Path, PathBuf};

use mosdistill::config::PruneMethod;
use mosdistill::corpus::{manifest_path, Split};

pub const RESOLVED: &str = "config.resolved.toml";
pub const LOCK: &str = ".mosdistill.lock";

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn manifests(&self) -> Vec<PathBuf> {
        Split::ALL.iter().map(|s| manifest_path(&self.corpus(), *s)).collect()
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}.sqac"))
    }

    pub fn history(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}_history.csv"))
    }

    pub fn pruned_dir(&self) -> PathBuf {
        self.root.join("pruned")
    }

    pub fn trajectory(&self, method: PruneMethod) -> PathBuf {
        self.pruned_dir().join(format!("{}_trajectory.csv", method.as_str()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report(&self, model_id: &str) -> PathBuf {
        self.reports().join(format!("{model_id}.csv"))
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    pub fn sweep_dat(&self) -> PathBuf {
        self.root.join("sweep.dat")
    }
}
