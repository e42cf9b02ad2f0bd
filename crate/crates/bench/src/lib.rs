//! Fixtures shared by the criterion benches.

use toll_core::actgr::{ActgrNet, GraphInput, PropagationConfig};
use toll_core::params::ParamStore;
use toll_core::rng::SeededRng;
use toll_core::scene::{build_dataset, DataConfig, Point, SpatialDescriptor, SubgraphSample};
use toll_core::tensor::Tensor;

/// The smallest desk-preset sample with at least `min_nodes` nodes.
pub fn desk_sample(min_nodes: usize) -> SubgraphSample {
    let cfg = DataConfig {
        samples: 40,
        ..DataConfig::default()
    };
    build_dataset(&cfg, 0)
        .expect("desk dataset")
        .into_iter()
        .max_by_key(|s| (s.nodes.len() >= min_nodes, std::cmp::Reverse(s.nodes.len())))
        .expect("non-empty dataset")
}

/// Initialized propagation network, its graph input and a single anchor.
pub fn propagation_fixture(steps: usize, l_base: usize, dim: usize) -> (ActgrNet, ParamStore, GraphInput, Vec<(usize, SpatialDescriptor)>) {
    let net = ActgrNet::new(PropagationConfig { steps, l_base, dim });
    let mut store = ParamStore::new();
    net.init(&mut store, &mut SeededRng::new(1)).expect("init");
    let sample = desk_sample(4);
    let input = GraphInput::from_sample(&sample).expect("graph input");
    let anchors = vec![(0, sample.nodes[0].descriptor)];
    (net, store, input, anchors)
}

/// `rows × cols` cosine-range scores.
pub fn score_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let data = (0..rows * cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    Tensor::matrix(rows, cols, data).expect("scores")
}

/// Points on a 1 m × 1 m plane with slight thickness noise.
pub fn plane_cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|_| [rng.uniform(), rng.uniform(), 0.001 * rng.normal()])
        .collect()
}
