//! Synthetic paired datasets: rendered ground-truth video, derived events,
//! and skip-sampled keyframes.

mod dataset;
mod esim;
mod scene;

pub use dataset::{
    make_clip, read_dataset, span_frame_indices, write_dataset, DatasetClip,
};
pub use esim::{simulate_events, EsimConfig};
pub use scene::{render_scene, ObjectSpec, SceneSpec, Shape, Trajectory};
