//! File formats read and written by the library and the command-line tool.

pub mod config;
pub mod image;
pub mod manifest;
pub mod mesh;
pub mod text;

pub use config::{config_to_text, load_config, parse_config};
pub use image::{gbuffer_preview, load_png, save_gbuffer, save_png};
pub use manifest::{hash_file, sha256_hex, RunManifest};
pub use mesh::{load_mesh, read_obj, read_ply, save_mesh, write_obj, write_ply, MeshRead};
pub use text::{load_landmarks, load_params, load_scores, parse_landmarks, parse_params, parse_scores, write_landmarks, write_params};
