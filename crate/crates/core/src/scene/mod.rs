//! Synthetic scenes and their conversion into connected subgraph samples.

mod dataset;
mod descriptor;
mod edges;
mod geometry;
mod partition;
mod sample;
mod synth;

pub use dataset::{build_dataset, samples_from_scene, DataConfig};
pub use descriptor::{compute_descriptor, Point, SpatialDescriptor, DESCRIPTOR_DIM};
pub use edges::{expected_edge_count, generate_edges, undirected_reach};
pub use geometry::{apply, relative_geometry, EdgeGeometry, SCALE_FLOOR};
pub use partition::{partition_subgraphs, ward_until};
pub use sample::{select_anchor, SampleEdge, SubgraphSample, SAMPLE_VERSION};
pub use synth::{
    abstract_nodes, generate_scene, Category, LabeledPointCloud, SceneNode, SceneSpec, NOISE_CATEGORY,
};
