//! Where each artifact lives under the output directory.

use std::path::PathBuf;

use tidn_core::experiment::Cell;

#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

/// File-name form of a cell key.
pub fn cell_slug(cell: &Cell) -> String {
    cell.key().trim_start_matches("cell/").replace('/', "_").replace('=', "")
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn dataset(&self, task: &str, split: &str) -> PathBuf {
        self.root.join("data").join(format!("{task}-{split}.tidn"))
    }

    pub fn pretrained(&self, depth: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("pretrained-d{depth}.ckpt"))
    }

    pub fn pretrain_log(&self, depth: usize) -> PathBuf {
        self.root.join("logs").join(format!("pretrain-d{depth}.csv"))
    }

    pub fn finetuned(&self, cell: &Cell) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", cell_slug(cell)))
    }

    pub fn finetune_log(&self, cell: &Cell) -> PathBuf {
        self.root.join("logs").join(format!("finetune-{}.csv", cell_slug(cell)))
    }

    pub fn record(&self, cell: &Cell) -> PathBuf {
        self.root.join("records").join("cells").join(format!("{}.csv", cell_slug(cell)))
    }

    pub fn sweep(&self, depth: usize) -> PathBuf {
        self.root.join("records").join(format!("sweep-d{depth}.csv"))
    }

    pub fn task_shift(&self, source: &str, target: &str) -> PathBuf {
        self.root.join("records").join(format!("task-shift-{source}-{target}.csv"))
    }

    pub fn spectra_csv(&self) -> PathBuf {
        self.root.join("spectra").join("spectra.csv")
    }

    pub fn spectra_svg(&self) -> PathBuf {
        self.root.join("spectra").join("spectra.svg")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn verdict(&self) -> PathBuf {
        self.root.join("acceptance").join("verdict.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tidn_core::training::ObserverKind;

    #[test]
    fn slugs_are_flat_and_distinct() {
        let a = Cell::new(0.01, 3, 9, ObserverKind::SlnnNo, "random", "random");
        let b = Cell::new(0.1, 3, 9, ObserverKind::SlnnNo, "random", "random");
        let s = cell_slug(&a);
        assert!(!s.contains('/') && !s.contains('='));
        assert_ne!(s, cell_slug(&b));
        assert_ne!(cell_slug(&Cell::baseline(9, "random")), s);
    }
}
