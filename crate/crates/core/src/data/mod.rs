//! Synthetic multi-view scenes, weather corruptions, synchronized
//! augmentation and dataset ingestion.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod render;
pub mod scene;
pub mod weather;

pub use augment::{synchronized_augment, AugTransform};
pub use dataset::{load_dataset, DatasetIndex, LoadedSplit, Split, SynthConfig, View};
pub use image::Image;
pub use render::{render_views, RenderOptions, RenderedViews};
pub use scene::{generate_scene, SceneSpec};
pub use weather::{apply_weather, WeatherCondition};
