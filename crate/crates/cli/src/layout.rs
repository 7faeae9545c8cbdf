//! File locations under the work directory.

use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    work: PathBuf,
}

impl Layout {
    pub fn new(work: PathBuf) -> Self {
        Self { work }
    }

    pub fn work(&self) -> &Path {
        &self.work
    }

    pub fn gt_root(&self) -> PathBuf {
        self.work.join("gt")
    }

    pub fn gt_dir(&self, scene: &str) -> PathBuf {
        self.gt_root().join(scene)
    }

    pub fn gt_report(&self) -> PathBuf {
        self.gt_root().join("report.csv")
    }

    pub fn patches(&self) -> PathBuf {
        self.work.join("patches")
    }

    pub fn patch_dir(&self, patch: &str) -> PathBuf {
        self.patches().join(patch)
    }

    pub fn manifest(&self) -> PathBuf {
        self.patches().join("manifest.csv")
    }

    pub fn model(&self) -> PathBuf {
        self.work.join("model")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model().join("checkpoint.csck")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.model().join("loss.csv")
    }

    pub fn pred(&self) -> PathBuf {
        self.work.join("pred")
    }

    pub fn pred_prob(&self, scene: &str) -> PathBuf {
        self.pred().join(format!("{scene}.prob.csr"))
    }

    pub fn pred_mask(&self, scene: &str) -> PathBuf {
        self.pred().join(format!("{scene}.mask.pgm"))
    }

    pub fn eval(&self) -> PathBuf {
        self.work.join("eval")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.eval().join("report.csv")
    }
}
