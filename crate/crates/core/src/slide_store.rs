//! Pre-tiled slide bundles.
//!
//! A bundle is a directory holding `manifest.json` and one tile grid per
//! magnification level. Tiles are addressed by `(magnification, col, row)`;
//! the row-major `patch_index` within a level is the key used by the
//! embedding index and the exclusion bookkeeping.
//!
//! ```text
//! bundle/
//!   manifest.json
//!   tiles/5/0_0.png
//!   tiles/5/1_0.png
//!   ...
//!   embeddings/5.bin      (written by the navigator)
//!   embeddings/5.json
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Objective powers a bundle level may use.
pub const SUPPORTED_MAGNIFICATIONS: [u32; 4] = [5, 10, 20, 40];

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TILE_SIZE_PX: u32 = 256;

#[derive(Debug, Error)]
pub enum SlideError {
    #[error("bundle format error: {0}")]
    Format(String),
    #[error("bundle integrity error: {missing_count} tile(s) missing, first: {}", first_missing.join(", "))]
    Integrity {
        missing_count: usize,
        first_missing: Vec<String>,
    },
    #[error("magnification {0}x not present in bundle")]
    LevelNotFound(u32),
    #[error("invalid zoom from {from}x to {to}x: target must be higher")]
    InvalidZoom { from: u32, to: u32 },
    #[error("unsupported zoom ratio {to}x/{from}x: must be an integer power of two")]
    UnsupportedRatio { from: u32, to: u32 },
    #[error("patch {0} does not belong to this bundle")]
    ForeignPatch(PatchId),
    #[error("reading tile {patch}: {source}")]
    TileIo {
        patch: PatchId,
        #[source]
        source: std::io::Error,
    },
}

/// Grid coordinates of a tile (upper-left anchored, in tiles).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridLoc {
    pub col: u32,
    pub row: u32,
}

impl GridLoc {
    pub fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }
}

impl fmt::Display for GridLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.col, self.row)
    }
}

/// Compact identity used in error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchId {
    pub slide_id: String,
    pub magnification: u32,
    pub loc: GridLoc,
}

impl fmt::Display for PatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{}x({},{})",
            self.slide_id, self.magnification, self.loc.col, self.loc.row
        )
    }
}

/// One tile of one level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Patch {
    pub slide_id: String,
    pub magnification: u32,
    pub loc: GridLoc,
    pub patch_index: u32,
}

impl Patch {
    pub fn id(&self) -> PatchId {
        PatchId {
            slide_id: self.slide_id.clone(),
            magnification: self.magnification,
            loc: self.loc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MagLevel {
    pub magnification: u32,
    pub grid_w: u32,
    pub grid_h: u32,
    /// Relative path with `{mag}`, `{col}` and `{row}` placeholders.
    pub tile_path_pattern: String,
}

impl MagLevel {
    pub fn patch_count(&self) -> usize {
        self.grid_w as usize * self.grid_h as usize
    }

    pub fn contains(&self, loc: GridLoc) -> bool {
        loc.col < self.grid_w && loc.row < self.grid_h
    }

    pub fn tile_path(&self, loc: GridLoc) -> String {
        self.tile_path_pattern
            .replace("{mag}", &self.magnification.to_string())
            .replace("{col}", &loc.col.to_string())
            .replace("{row}", &loc.row.to_string())
    }
}

/// `manifest.json` contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub slide_id: String,
    #[serde(default = "default_tile_size")]
    pub tile_size_px: u32,
    pub levels: Vec<MagLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_note: Option<String>,
}

fn default_tile_size() -> u32 {
    DEFAULT_TILE_SIZE_PX
}

impl Manifest {
    /// Checks the structural invariants that do not need the filesystem.
    pub fn validate(&self) -> Result<(), SlideError> {
        if self.slide_id.trim().is_empty() {
            return Err(SlideError::Format("slide_id is empty".into()));
        }
        if self.tile_size_px == 0 {
            return Err(SlideError::Format("tile_size_px must be positive".into()));
        }
        if self.levels.is_empty() {
            return Err(SlideError::Format("levels list is empty".into()));
        }
        for level in &self.levels {
            if !SUPPORTED_MAGNIFICATIONS.contains(&level.magnification) {
                return Err(SlideError::Format(format!(
                    "magnification {} not in {:?}",
                    level.magnification, SUPPORTED_MAGNIFICATIONS
                )));
            }
            if level.grid_w == 0 || level.grid_h == 0 {
                return Err(SlideError::Format(format!(
                    "level {}x has an empty grid",
                    level.magnification
                )));
            }
            if level.tile_path_pattern.trim().is_empty() {
                return Err(SlideError::Format(format!(
                    "level {}x has no tile_path_pattern",
                    level.magnification
                )));
            }
        }
        for pair in self.levels.windows(2) {
            let (low, high) = (&pair[0], &pair[1]);
            if high.magnification <= low.magnification {
                return Err(SlideError::Format(
                    "levels must be strictly increasing in magnification".into(),
                ));
            }
            // Supported magnifications make every ratio an integer power of two.
            let ratio = high.magnification / low.magnification;
            if high.grid_w != low.grid_w * ratio || high.grid_h != low.grid_h * ratio {
                return Err(SlideError::Format(format!(
                    "level {}x grid {}x{} does not equal level {}x grid {}x{} scaled by {}",
                    high.magnification,
                    high.grid_w,
                    high.grid_h,
                    low.magnification,
                    low.grid_w,
                    low.grid_h,
                    ratio
                )));
            }
        }
        Ok(())
    }
}

/// A loaded, validated bundle. Immutable after load.
#[derive(Debug, Clone)]
pub struct SlideBundle {
    root: PathBuf,
    manifest: Manifest,
}

/// Raw tile image as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileImage {
    pub bytes: Vec<u8>,
    pub media_type: &'static str,
}

pub fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("tif") | Some("tiff") => "image/tiff",
        _ => "application/octet-stream",
    }
}

const MAX_REPORTED_MISSING: usize = 10;

impl SlideBundle {
    /// Loads `manifest.json` from `path` and checks every tile file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SlideError> {
        let root = path.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&manifest_path).map_err(|e| {
            SlideError::Format(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&raw)
            .map_err(|e| SlideError::Format(format!("{}: {e}", manifest_path.display())))?;
        manifest.validate()?;

        let mut missing = Vec::new();
        let mut missing_count = 0;
        for level in &manifest.levels {
            for row in 0..level.grid_h {
                for col in 0..level.grid_w {
                    let loc = GridLoc::new(col, row);
                    if !root.join(level.tile_path(loc)).is_file() {
                        missing_count += 1;
                        if missing.len() < MAX_REPORTED_MISSING {
                            missing.push(format!("{}x({col},{row})", level.magnification));
                        }
                    }
                }
            }
        }
        if missing_count > 0 {
            return Err(SlideError::Integrity {
                missing_count,
                first_missing: missing,
            });
        }
        Ok(Self { root, manifest })
    }

    /// Builds a bundle from a validated manifest without scanning for tile
    /// files; a missing tile surfaces later as [`SlideError::TileIo`].
    pub fn from_manifest(root: impl Into<PathBuf>, manifest: Manifest) -> Result<Self, SlideError> {
        manifest.validate()?;
        Ok(Self {
            root: root.into(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn slide_id(&self) -> &str {
        &self.manifest.slide_id
    }

    pub fn tile_size_px(&self) -> u32 {
        self.manifest.tile_size_px
    }

    pub fn levels(&self) -> &[MagLevel] {
        &self.manifest.levels
    }

    pub fn magnifications(&self) -> Vec<u32> {
        self.manifest.levels.iter().map(|l| l.magnification).collect()
    }

    pub fn level(&self, magnification: u32) -> Result<&MagLevel, SlideError> {
        self.manifest
            .levels
            .iter()
            .find(|l| l.magnification == magnification)
            .ok_or(SlideError::LevelNotFound(magnification))
    }

    pub fn has_level(&self, magnification: u32) -> bool {
        self.level(magnification).is_ok()
    }

    /// Builds the patch at `loc`, or `None` when outside the level grid.
    pub fn patch(&self, magnification: u32, loc: GridLoc) -> Result<Option<Patch>, SlideError> {
        let level = self.level(magnification)?;
        Ok(level.contains(loc).then(|| Patch {
            slide_id: self.manifest.slide_id.clone(),
            magnification,
            loc,
            patch_index: loc.row * level.grid_w + loc.col,
        }))
    }

    pub fn patch_by_index(&self, magnification: u32, patch_index: u32) -> Result<Option<Patch>, SlideError> {
        let level = self.level(magnification)?;
        if patch_index as usize >= level.patch_count() {
            return Ok(None);
        }
        let loc = GridLoc::new(patch_index % level.grid_w, patch_index / level.grid_w);
        self.patch(magnification, loc)
    }

    /// All patches of a level in row-major order.
    pub fn patches_at(&self, magnification: u32) -> Result<Vec<Patch>, SlideError> {
        let level = self.level(magnification)?;
        let slide_id = &self.manifest.slide_id;
        let mut out = Vec::with_capacity(level.patch_count());
        for row in 0..level.grid_h {
            for col in 0..level.grid_w {
                out.push(Patch {
                    slide_id: slide_id.clone(),
                    magnification,
                    loc: GridLoc::new(col, row),
                    patch_index: row * level.grid_w + col,
                });
            }
        }
        Ok(out)
    }

    /// Checks that `patch` was produced for this bundle and lies in its grid.
    pub fn check_patch(&self, patch: &Patch) -> Result<(), SlideError> {
        if patch.slide_id != self.manifest.slide_id {
            return Err(SlideError::ForeignPatch(patch.id()));
        }
        let level = self.level(patch.magnification)?;
        if !level.contains(patch.loc) || patch.patch_index != patch.loc.row * level.grid_w + patch.loc.col {
            return Err(SlideError::ForeignPatch(patch.id()));
        }
        Ok(())
    }

    /// Splits `patch` into the `r × r` tiles covering the same region at
    /// `target_mag`, where `r = target_mag / patch.magnification`.
    pub fn magnify_patch(&self, patch: &Patch, target_mag: u32) -> Result<Vec<Patch>, SlideError> {
        self.check_patch(patch)?;
        let from = patch.magnification;
        if target_mag <= from {
            return Err(SlideError::InvalidZoom { from, to: target_mag });
        }
        if !target_mag.is_multiple_of(from) || !(target_mag / from).is_power_of_two() {
            return Err(SlideError::UnsupportedRatio { from, to: target_mag });
        }
        let target = self.level(target_mag)?;
        let ratio = target_mag / from;
        let mut children = Vec::with_capacity((ratio * ratio) as usize);
        for row in patch.loc.row * ratio..(patch.loc.row + 1) * ratio {
            for col in patch.loc.col * ratio..(patch.loc.col + 1) * ratio {
                children.push(Patch {
                    slide_id: patch.slide_id.clone(),
                    magnification: target_mag,
                    loc: GridLoc::new(col, row),
                    patch_index: row * target.grid_w + col,
                });
            }
        }
        Ok(children)
    }

    pub fn tile_path(&self, patch: &Patch) -> Result<PathBuf, SlideError> {
        self.check_patch(patch)?;
        let level = self.level(patch.magnification)?;
        Ok(self.root.join(level.tile_path(patch.loc)))
    }

    /// Returns the stored tile bytes verbatim.
    pub fn tile_bytes(&self, patch: &Patch) -> Result<TileImage, SlideError> {
        let path = self.tile_path(patch)?;
        let bytes = fs::read(&path).map_err(|source| SlideError::TileIo {
            patch: patch.id(),
            source,
        })?;
        Ok(TileImage {
            bytes,
            media_type: media_type_for(&path),
        })
    }
}

/// Bundles found under one directory, keyed by slide id.
#[derive(Debug, Clone, Default)]
pub struct SlideLibrary {
    slides: BTreeMap<String, Arc<SlideBundle>>,
    /// Directories that held a manifest but failed to load.
    pub skipped: Vec<(PathBuf, String)>,
}

impl SlideLibrary {
    /// Loads `dir` itself when it is a bundle, otherwise every immediate
    /// subdirectory holding a manifest. Broken bundles are skipped with a
    /// warning; two bundles with the same slide id are an error.
    pub fn scan(dir: impl AsRef<Path>) -> Result<Self, SlideError> {
        let dir = dir.as_ref();
        let mut candidates = Vec::new();
        if dir.join(MANIFEST_FILE).is_file() {
            candidates.push(dir.to_path_buf());
        } else {
            let entries = fs::read_dir(dir)
                .map_err(|e| SlideError::Format(format!("cannot list {}: {e}", dir.display())))?;
            for entry in entries.flatten() {
                let path = entry.path();
                if path.join(MANIFEST_FILE).is_file() {
                    candidates.push(path);
                }
            }
            candidates.sort();
        }
        let mut lib = Self::default();
        for path in candidates {
            match SlideBundle::load(&path) {
                Ok(b) => lib.insert(b)?,
                Err(e) => {
                    tracing::warn!(path = %path.display(), error = %e, "skipping bundle");
                    lib.skipped.push((path, e.to_string()));
                }
            }
        }
        Ok(lib)
    }

    pub fn insert(&mut self, bundle: SlideBundle) -> Result<(), SlideError> {
        let id = bundle.slide_id().to_string();
        if let Some(prev) = self.slides.get(&id) {
            return Err(SlideError::Format(format!(
                "slide id {id:?} appears in both {} and {}",
                prev.root().display(),
                bundle.root().display()
            )));
        }
        self.slides.insert(id, Arc::new(bundle));
        Ok(())
    }

    pub fn get(&self, slide_id: &str) -> Option<Arc<SlideBundle>> {
        self.slides.get(slide_id).cloned()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.slides.keys().map(String::as_str)
    }

    pub fn bundles(&self) -> impl Iterator<Item = &Arc<SlideBundle>> {
        self.slides.values()
    }

    pub fn len(&self) -> usize {
        self.slides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slides.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::SyntheticBundle;

    fn two_level() -> (tempfile::TempDir, SlideBundle) {
        let dir = tempfile::tempdir().unwrap();
        SyntheticBundle::new("s1", 4, 3)
            .with_levels(&[5, 20])
            .tile_px(8)
            .write(dir.path())
            .unwrap();
        let bundle = SlideBundle::load(dir.path()).unwrap();
        (dir, bundle)
    }

    #[test]
    fn loads_counts_from_manifest() {
        let (_d, bundle) = two_level();
        assert_eq!(bundle.tile_size_px(), 8);
        assert_eq!(bundle.patches_at(5).unwrap().len(), 12);
        assert_eq!(bundle.level(20).unwrap().grid_w, 16);
        assert_eq!(bundle.level(20).unwrap().grid_h, 12);
    }

    #[test]
    fn missing_tile_is_integrity_error() {
        let (dir, _) = two_level();
        fs::remove_file(dir.path().join("tiles/5/2_1.png")).unwrap();
        match SlideBundle::load(dir.path()) {
            Err(SlideError::Integrity { missing_count, first_missing }) => {
                assert_eq!(missing_count, 1);
                assert_eq!(first_missing, vec!["5x(2,1)".to_string()]);
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn integrity_error_lists_at_most_ten() {
        let (dir, _) = two_level();
        fs::remove_dir_all(dir.path().join("tiles/20")).unwrap();
        match SlideBundle::load(dir.path()) {
            Err(SlideError::Integrity { missing_count, first_missing }) => {
                assert_eq!(missing_count, 192);
                assert_eq!(first_missing.len(), 10);
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn format_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(SlideBundle::load(dir.path()), Err(SlideError::Format(_))));

        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"slide_id":"x","tile_size_px":256,"levels":[]}"#,
        )
        .unwrap();
        assert!(matches!(SlideBundle::load(dir.path()), Err(SlideError::Format(_))));

        // 10x grid is not 2x the 5x grid
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"slide_id":"x","levels":[
                {"magnification":5,"grid_w":2,"grid_h":2,"tile_path_pattern":"tiles/{mag}/{col}_{row}.png"},
                {"magnification":10,"grid_w":3,"grid_h":4,"tile_path_pattern":"tiles/{mag}/{col}_{row}.png"}]}"#,
        )
        .unwrap();
        assert!(matches!(SlideBundle::load(dir.path()), Err(SlideError::Format(_))));

        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"slide_id":"x","levels":[
                {"magnification":7,"grid_w":2,"grid_h":2,"tile_path_pattern":"tiles/{mag}/{col}_{row}.png"}]}"#,
        )
        .unwrap();
        assert!(matches!(SlideBundle::load(dir.path()), Err(SlideError::Format(_))));
    }

    #[test]
    fn patches_at_row_major() {
        let (_d, bundle) = two_level();
        let patches = bundle.patches_at(5).unwrap();
        assert_eq!(patches.first().unwrap().loc, GridLoc::new(0, 0));
        assert_eq!(patches.last().unwrap().loc, GridLoc::new(3, 2));
        for (i, p) in patches.iter().enumerate() {
            assert_eq!(p.patch_index as usize, i);
            assert_eq!(p.patch_index, p.loc.row * 4 + p.loc.col);
        }
        assert_eq!(patches, bundle.patches_at(5).unwrap());
        assert!(matches!(bundle.patches_at(40), Err(SlideError::LevelNotFound(40))));
    }

    #[test]
    fn single_tile_level() {
        let dir = tempfile::tempdir().unwrap();
        SyntheticBundle::new("one", 1, 1).write(dir.path()).unwrap();
        let bundle = SlideBundle::load(dir.path()).unwrap();
        let patches = bundle.patches_at(5).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].loc, GridLoc::new(0, 0));
    }

    #[test]
    fn magnify_children() {
        let dir = tempfile::tempdir().unwrap();
        SyntheticBundle::new("s", 4, 3)
            .with_levels(&[5, 10, 20])
            .write(dir.path())
            .unwrap();
        let bundle = SlideBundle::load(dir.path()).unwrap();
        let parent = bundle.patch(5, GridLoc::new(1, 0)).unwrap().unwrap();
        let children = bundle.magnify_patch(&parent, 20).unwrap();
        assert_eq!(children.len(), 16);
        for c in &children {
            assert!((4..8).contains(&c.loc.col));
            assert!((0..4).contains(&c.loc.row));
            assert_eq!(c.magnification, 20);
        }

        let origin = bundle.patch(5, GridLoc::new(0, 0)).unwrap().unwrap();
        assert_eq!(bundle.magnify_patch(&origin, 10).unwrap().len(), 4);

        let fine = bundle.patch(20, GridLoc::new(3, 3)).unwrap().unwrap();
        assert!(matches!(
            bundle.magnify_patch(&fine, 10),
            Err(SlideError::InvalidZoom { from: 20, to: 10 })
        ));
        assert!(matches!(
            bundle.magnify_patch(&origin, 40),
            Err(SlideError::LevelNotFound(40))
        ));
        assert!(matches!(
            bundle.magnify_patch(&origin, 15),
            Err(SlideError::UnsupportedRatio { .. })
        ));
    }

    #[test]
    fn tile_bytes_verbatim_and_errors() {
        let (dir, bundle) = two_level();
        let patch = bundle.patch(5, GridLoc::new(1, 2)).unwrap().unwrap();
        let tile = bundle.tile_bytes(&patch).unwrap();
        assert!(!tile.bytes.is_empty());
        assert_eq!(tile.media_type, "image/png");
        assert_eq!(tile.bytes, fs::read(dir.path().join("tiles/5/1_2.png")).unwrap());

        let mut foreign = patch.clone();
        foreign.slide_id = "other".into();
        assert!(matches!(bundle.tile_bytes(&foreign), Err(SlideError::ForeignPatch(_))));

        fs::remove_file(dir.path().join("tiles/5/1_2.png")).unwrap();
        let err = bundle.tile_bytes(&patch).unwrap_err();
        assert!(matches!(err, SlideError::TileIo { .. }));
        assert!(err.to_string().contains("5x(1,2)"), "{err}");
    }
}
