//! Synthetic bundles for tests, demos and the acceptance suite.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use image::{ImageFormat, Rgb, RgbImage};

use crate::backends::{ScriptRule, ScriptedChat, ScriptedEmbedder};
use crate::navigator::{build_index, PatchEmbeddingIndex};
use crate::orchestrator::{fixed_clock, Backends, SessionOptions};
use crate::slide_store::{MagLevel, Manifest, SlideBundle, MANIFEST_FILE};

pub const TILE_PATTERN: &str = "tiles/{mag}/{col}_{row}.png";

/// Writes a bundle whose every tile is a distinct PNG.
///
/// `base_w × base_h` is the grid at the lowest level; higher levels scale by
/// the magnification ratio.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    slide_id: String,
    base_w: u32,
    base_h: u32,
    levels: Vec<u32>,
    tile_px: u32,
}

impl SyntheticBundle {
    pub fn new(slide_id: &str, base_w: u32, base_h: u32) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            base_w,
            base_h,
            levels: vec![5],
            tile_px: 256,
        }
    }

    pub fn with_levels(mut self, levels: &[u32]) -> Self {
        self.levels = levels.to_vec();
        self
    }

    pub fn tile_px(mut self, px: u32) -> Self {
        assert!(px >= 2, "tiles need at least 2 px to stay distinct");
        self.tile_px = px;
        self
    }

    pub fn manifest(&self) -> Manifest {
        let base = self.levels[0];
        Manifest {
            slide_id: self.slide_id.clone(),
            tile_size_px: self.tile_px,
            levels: self
                .levels
                .iter()
                .map(|&mag| MagLevel {
                    magnification: mag,
                    grid_w: self.base_w * mag / base,
                    grid_h: self.base_h * mag / base,
                    tile_path_pattern: TILE_PATTERN.to_string(),
                })
                .collect(),
            created_at: None,
            source_note: Some("synthetic".into()),
        }
    }

    pub fn write(&self, dir: &Path) -> io::Result<Manifest> {
        let manifest = self.manifest();
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?,
        )?;
        for level in &manifest.levels {
            fs::create_dir_all(dir.join(format!("tiles/{}", level.magnification)))?;
            for row in 0..level.grid_h {
                for col in 0..level.grid_w {
                    let img = tile_image(self.tile_px, level.magnification, col, row);
                    let path = dir.join(format!("tiles/{}/{col}_{row}.png", level.magnification));
                    img.save_with_format(&path, ImageFormat::Png)
                        .map_err(io::Error::other)?;
                }
            }
        }
        Ok(manifest)
    }
}

fn tile_image(px: u32, mag: u32, col: u32, row: u32) -> RgbImage {
    let [c0, c1, ..] = col.to_le_bytes();
    let [r0, r1, ..] = row.to_le_bytes();
    RgbImage::from_fn(px, px, |x, y| {
        if x == 0 && y == 0 {
            Rgb([mag as u8, c0, c1])
        } else if x == 1 && y == 0 {
            Rgb([r0, r1, 0])
        } else {
            Rgb([200u8.wrapping_add((x ^ y) as u8 & 0x1f), 120, 190])
        }
    })
}

/// Substrings that identify each reasoning step by its system prompt, for
/// routing [`ScriptRule`]s.
pub mod step_keys {
    pub const PREDICT: &str = "answer the question step-by-step";
    pub const REFLECT: &str = "sufficient to confidently support";
    pub const EXPLORE: &str = "what visual evidence is missing";
    pub const FINAL: &str = "slide-level pathology assistant";
}

pub fn predict_reply(answer: &str, thinking: &str) -> String {
    serde_json::json!({ "answer": answer, "thinking_steps": thinking }).to_string()
}

pub fn reflect_reply(sufficient: bool) -> String {
    serde_json::json!({ "sufficient": if sufficient { "Yes" } else { "No" } }).to_string()
}

/// `zoom = None` asks for more sampling; `Some(level)` asks for a zoom.
pub fn explore_reply(missing_info: &str, zoom: Option<u32>) -> String {
    serde_json::json!({
        "missing_info": missing_info,
        "zoom_recommendation": if zoom.is_some() { "Yes" } else { "No" },
        "recommended_zoom_level": zoom.map_or(serde_json::json!("None"), |l| serde_json::json!(l)),
        "zoom_reason": if zoom.is_some() { "finer nuclear detail" } else { "" },
    })
    .to_string()
}

/// Executor rules for a session whose reflection says "No" on the first
/// `insufficient` iterations and "Yes" afterwards, exploring without zoom.
pub fn executor_rules(answer: &str, insufficient: usize, zoom: Option<u32>) -> Vec<ScriptRule> {
    let mut rules = Vec::new();
    for _ in 0..insufficient {
        rules.push(ScriptRule::once(step_keys::REFLECT, reflect_reply(false)));
    }
    rules.extend([
        ScriptRule::always(step_keys::REFLECT, reflect_reply(true)),
        ScriptRule::always(step_keys::PREDICT, predict_reply(answer, "evidence reviewed")),
        ScriptRule::always(step_keys::EXPLORE, explore_reply("mitotic figures", zoom)),
        ScriptRule::always(step_keys::FINAL, predict_reply(answer, "final synthesis")),
    ]);
    rules
}

/// Bundle, base index and scripted backends wired together.
pub struct ScriptedWorld {
    pub bundle: Arc<SlideBundle>,
    pub index: Arc<PatchEmbeddingIndex>,
    pub embedder: Arc<ScriptedEmbedder>,
    pub perceptor: Arc<ScriptedChat>,
    pub executor: Arc<ScriptedChat>,
}

impl ScriptedWorld {
    /// Writes `spec` under `dir`, builds the base index with a hashed
    /// embedder and describes every tile as `"tile {image}"`.
    pub fn new(dir: &Path, spec: &SyntheticBundle, executor: Vec<ScriptRule>) -> Self {
        spec.write(dir).expect("write synthetic bundle");
        let bundle = Arc::new(SlideBundle::load(dir).expect("load synthetic bundle"));
        let embedder = Arc::new(ScriptedEmbedder::hashed(16));
        let base = bundle.levels()[0].magnification;
        let index = Arc::new(build_index(&bundle, base, &*embedder, 4).expect("build index"));
        Self {
            bundle,
            index,
            embedder,
            perceptor: Arc::new(ScriptedChat::new(vec![ScriptRule::fallback("tile {image} shows glands")])),
            executor: Arc::new(ScriptedChat::new(executor)),
        }
    }

    pub fn backends(&self) -> Backends {
        Backends {
            embedder: self.embedder.clone(),
            perceptor: self.perceptor.clone(),
            executor: self.executor.clone(),
        }
    }

    /// Options with a fixed id and frozen clock, so event logs are
    /// reproducible.
    pub fn replay_options(&self, session_id: &str) -> SessionOptions {
        SessionOptions {
            session_id: Some(session_id.to_string()),
            clock: fixed_clock(DateTime::<Utc>::from_timestamp(1_700_000_000, 0).expect("valid timestamp")),
            ..SessionOptions::default()
        }
    }
}
