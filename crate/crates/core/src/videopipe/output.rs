//! Writing annotated streams to disk.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::panel::write_pmap;
use super::stream::{AnnotatedFrame, MaskSource};
use super::VideoError;
use crate::imaging::io;

pub fn panel_file_name(i: usize) -> String {
    format!("panel_{i:06}.png")
}

pub fn pmap_file_name(i: usize) -> String {
    format!("prob_{i:06}.pmap")
}

/// Sink writing `panel_%06d.png` (and optionally `prob_%06d.pmap`) per frame.
pub struct PanelWriter {
    dir: PathBuf,
    pmap: bool,
}

impl PanelWriter {
    pub fn new(dir: &Path, pmap: bool) -> Result<Self, VideoError> {
        std::fs::create_dir_all(dir)?;
        Ok(PanelWriter {
            dir: dir.to_path_buf(),
            pmap,
        })
    }

    pub fn write(&mut self, f: &AnnotatedFrame) -> Result<(), VideoError> {
        io::write_png_fast(&self.dir.join(panel_file_name(f.index)), &f.panel.image)?;
        if self.pmap {
            let mut out = BufWriter::new(std::fs::File::create(self.dir.join(pmap_file_name(f.index)))?);
            write_pmap(&mut out, &f.prob)?;
        }
        Ok(())
    }
}

/// Lazily reads `mask_%06d.png` files from `dir`, starting at index 0.
pub fn mask_dir_source(dir: &Path) -> MaskSource {
    let dir = dir.to_path_buf();
    Box::new((0..).map(move |i| Ok(io::read_mask(&dir.join(format!("mask_{i:06}.png")))?)))
}
