//! Desk-scale urban scene synthesis: rectangular buildings on a flat
//! terrain, a base station above the tallest rooftop, a log-distance
//! path loss model with per-crossing attenuation and correlated
//! shadowing, plus dataset generation with a JSON manifest.

mod dataset;
mod raster;
mod raycast;
mod scene;
mod synth;

pub use dataset::{load_manifest, make_dataset, Manifest, SceneEntry};
pub use raster::env_raster;
pub use raycast::count_crossings;
pub use scene::{generate_scene, BaseStation, Scene, MAX_BUILDING_M, MIN_BUILDING_M};
pub use synth::{synthesize_cgm, synthesize_cgm_with, SynthParams};
