//! Correspondences supplied by an external process through the text
//! exchange format — the plug-in boundary for learned estimators.

use crate::formats::read_correspondences;
use ppc_core::{
    CameraModel, ContourSet, CorrespondenceEstimator, CorrespondenceSet, Error, Image2D,
    RigidTransform,
};
use std::path::{Path, PathBuf};

/// Reads one correspondence file per loop iteration from a directory.
///
/// Iteration `i` loads `corr_iter_000.csv`-style names; the row count must
/// match the contour set selected at that iteration, so files are typically
/// produced by replaying a previous run (see `ppcreg register
/// --dump-correspondences`) or by an estimator embedded in the same loop.
#[derive(Debug, Clone)]
pub struct FileCorrespondenceEstimator {
    dir: PathBuf,
}

impl FileCorrespondenceEstimator {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn iteration_file(dir: &Path, iteration: usize) -> PathBuf {
        dir.join(format!("corr_iter_{iteration:03}.csv"))
    }
}

impl CorrespondenceEstimator for FileCorrespondenceEstimator {
    fn needs_images(&self) -> bool {
        false
    }

    fn estimate(
        &self,
        contours: &ContourSet,
        _cam: &CameraModel,
        _t_i: &RigidTransform,
        _i_drr: Option<&Image2D>,
        _i_flr: Option<&Image2D>,
        iteration: usize,
    ) -> Result<CorrespondenceSet, Error> {
        let path = Self::iteration_file(&self.dir, iteration);
        read_correspondences(&path, contours)
            .map_err(|e| Error::InvalidArgument(format!("{e:#}")))
    }
}
