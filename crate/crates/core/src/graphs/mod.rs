//! Hierarchical tumour graph construction.

pub mod components;
pub mod edges;
pub mod hierarchy;
pub mod label_map;
pub mod slic;

pub use components::{connected_components, Component};
pub use edges::knn_edges;
pub use hierarchy::{
    build_hierarchical_graph, build_label_map, integrity_report, Assignment, CoarseNode, FineNode, GraphConfig,
    GraphLevel, HierarchicalGraph,
};
pub use label_map::{adjusted_rand_index, composite_code, LabelMap};
