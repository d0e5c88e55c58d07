//! Spatial pyramid pooling networks.
//!
//! A pyramid pooling layer turns a feature map of any size into a vector of
//! fixed length, so one set of convolutional weights serves images of every
//! size and aspect ratio. Around it this crate provides a small CPU network
//! runtime, multi-size training, multi-view testing on feature maps and a
//! detection pipeline that computes convolutional features once per image and
//! pools every candidate window from them.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod netgraph;
pub mod ops;
pub mod spp;
pub mod tensor;
pub mod training;

use std::fs;
use std::io::Write;
use std::path::Path;

pub use error::{Error, Result};
pub use geometry::WindowRect;
pub use netgraph::{Mode, NetworkInstance, NetworkSpec, ParameterStore, SharedParams};
pub use spp::PyramidSpec;
pub use tensor::{Real, Shape, Tensor};

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}
