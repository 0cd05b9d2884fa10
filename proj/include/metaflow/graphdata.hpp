#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "metaflow/airfoil.hpp"
#include "metaflow/panelflow.hpp"
#include "metaflow/tensor.hpp"

namespace metaflow {

/// Inverse-distance interpolation map from a source point set onto a
/// destination point set: k parallel (index, weight) columns per
/// destination node, weights normalized. An exact coordinate match
/// collapses the row onto that single source.
struct KnnMap {
  std::size_t k = 0;
  std::vector<IndexArray> idx;  // k arrays, each length n_dst
  std::vector<std::shared_ptr<const std::vector<double>>> w;
};

struct GraphLevel {
  std::vector<Vec2> coords;  // one node per cell centroid
  IndexArray edge_src;       // sender
  IndexArray edge_dst;       // receiver
  /// Edge attribute of a directed edge: coords[src] - coords[dst]
  /// (the offset of the sending neighbor relative to the receiver).
  std::vector<double> edge_attr;  // E x 2

  std::size_t n_nodes() const { return coords.size(); }
  std::size_t n_edges() const { return edge_src ? edge_src->size() : 0; }
};

struct MeshGraph {
  std::vector<GraphLevel> levels;
  std::vector<KnnMap> pool_down;  // fine level l -> coarse level l+1
  std::vector<KnnMap> pool_up;    // coarse level l+1 -> fine level l
};

struct CaseEntry {
  FlowConditions cond;
  std::vector<double> input;   // n0 x 2, freestream broadcast to every node
  std::vector<double> target;  // n0 x 3, normalized (u_x, u_y, p)
};

/// One airfoil = one task: a fixed graph plus flow cases split into the
/// adaptation set and the held-out set. Cases beyond both splits are
/// extra evaluation examples (flow-interpolation protocol).
struct Task {
  std::uint32_t id = 0;
  std::string set_name;  // "train", "shape_interp", "ood"
  NacaParams shape;
  MeshGraph graph;
  std::vector<CaseEntry> cases;
  std::vector<std::uint32_t> train_idx;
  std::vector<std::uint32_t> test_idx;
};

struct MetaDataset {
  std::vector<Task> tasks;
  std::vector<std::uint32_t> meta_train;  // task indices, "train" set only
  std::vector<std::uint32_t> meta_test;
  std::uint32_t fold_id = 0;
  std::uint32_t n_folds = 10;
  std::uint64_t seed = 0;
  std::string config_echo;
};

struct GeomConfig {
  std::size_t n_per_side = 16;
  std::size_t radial_layers = 16;
  double outer_radius = 10.0;
  double growth = 1.2;
  double crop_radius = 2.0;
  std::size_t coarsen_levels = 3;
  std::size_t knn_k = 6;
};

KnnMap build_knn_map(const std::vector<Vec2>& src, const std::vector<Vec2>& dst,
                     std::size_t k);

/// Converts the mesh hierarchy to the graph representation: cell centroids
/// become nodes, shared-edge adjacency becomes directed edge pairs.
MeshGraph mesh_to_graph(const MeshHierarchy& h, std::size_t knn_k = 6);

struct CropResult {
  MeshGraph graph;
  std::vector<std::vector<std::uint32_t>> kept;  // per level, original indices
};

/// Keeps nodes within `radius` of the mid-chord point at every level and
/// induces the subgraph on them.
CropResult crop_domain(const MeshGraph& g, double radius, std::size_t knn_k = 6);
/// Same, also restricting a level-0 field to the kept nodes.
std::pair<CropResult, FlowField> crop_domain(const MeshGraph& g, const FlowField& f,
                                             double radius, std::size_t knn_k = 6);

CaseEntry build_case(const MeshGraph& g, const FlowConditions& cond,
                     const PanelSolution& sol);

/// Full per-shape pipeline: contour, mesh, graph, crop, one case per
/// condition. extra_eval conditions are appended outside both splits.
Task build_task(const NacaParams& shape, const std::vector<FlowConditions>& conds,
                std::size_t n_train, const GeomConfig& geom,
                const std::vector<FlowConditions>& extra_eval = {});

MetaDataset assemble_meta_dataset(const std::vector<NacaParams>& shapes,
                                  std::size_t conditions_per_shape,
                                  std::size_t n_train_per_task, std::uint32_t fold,
                                  std::uint32_t n_folds, const GeomConfig& geom,
                                  std::uint64_t seed);

/// Directory layout: manifest.json plus one checksummed binary payload per
/// task (magic MFG1, little-endian, u64 counts then f64/u32 arrays).
void save_dataset(const MetaDataset& d, const std::string& dir);
MetaDataset load_dataset(const std::string& dir);

/// Inspection export: one row per level-0 node per case.
void export_csv(const MetaDataset& d, const std::string& path);

std::string manifest_json(const MetaDataset& d);

}  // namespace metaflow
