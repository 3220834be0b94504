//! Ground-truth generation: shapes, casting oracles, views and datasets.

pub mod dataset;
pub mod kdtree;
pub mod mesh;
pub mod shapes;
pub mod views;

pub use dataset::{make_batches, stride_split, Dataset, SubImage, SupervisionSample};
pub use kdtree::KdTree;
pub use mesh::TriangleMesh;
pub use shapes::{CastHit, ShapeSource};
pub use views::{approximate_silhouettes, render_view, sample_views, OrthoCamera, Pixel, PixelStatus, ViewMap};
