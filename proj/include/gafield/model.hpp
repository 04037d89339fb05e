#pragma once

// The full GA-Field network: U-Net style encoder/decoder over grid-pooled
// levels, a geometry embedding injected into every attention block through
// FiLM, a coarse prediction head at level 1 and a residual refinement head
// at level 0.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gafield/blocks.hpp"
#include "gafield/pointcloud.hpp"
#include "gafield/serialize.hpp"

namespace gafield {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::size_t input_width = 7;
  std::vector<double> grid_sizes = {0.06, 0.12, 0.24, 0.48, 0.96};
  std::vector<std::size_t> channels = {16, 32, 64, 128, 256};
  std::size_t blocks_per_stage = 2;
  std::size_t group_channels = 8;    // channels per attention group
  double geometry_grid = 0.3;        // token grid size s_g
  std::size_t geometry_width = 64;   // global embedding width
  std::size_t condition_width = 1;   // |c|
  std::size_t output_width = 1;      // pressure 1, WSS 3, velocity 3
  std::string activation = "gelu";
  bool positional_attention = true;  // positional MLP inside backbone blocks
  bool film_enabled = true;
  bool film_decoder = true;          // modulate decoder blocks as well
  bool center_coords = true;         // center coordinate feature channels
  std::string pool_reduce = "max";   // encoder feature reduction

  std::size_t stages() const { return grid_sizes.size(); }
  // Feature width at level 0..S.
  std::size_t level_width(std::size_t level) const {
    return level == 0 ? channels.at(0) : channels.at(level - 1);
  }
  void validate() const;
};

std::string model_config_to_text(const ModelConfig& cfg);
ModelConfig model_config_from_text(const std::string& text);

struct FieldPrediction {
  Tensor coarse;     // y^1, per level-1 point
  Tensor upsampled;  // y^{0,up}[i] = y^1[pi0(i)]
  Tensor residual;   // dy^0
  Tensor final;      // y^0 = y^{0,up} + dy^0
};

struct ForwardOptions {
  bool ablate_geometry = false;  // replace g with zeros at evaluation
  bool ablate_film = false;      // skip FiLM modulation entirely
};

// Everything derivable from positions alone; reusable across forward passes
// on the same cloud.
struct LevelStructure {
  std::vector<Tensor> level_positions;   // levels 0..S
  std::vector<GridClusters> clusters;    // clusters[k] pools level k -> k+1
  std::vector<EdgeSet> edges;            // attention edges at levels 0..S
};

class GaFieldModel {
 public:
  GaFieldModel() = default;
  GaFieldModel(ModelConfig cfg, std::uint64_t init_seed);
  GaFieldModel(const GaFieldModel&) = delete;
  GaFieldModel& operator=(const GaFieldModel&) = delete;
  GaFieldModel(GaFieldModel&&) = default;
  GaFieldModel& operator=(GaFieldModel&&) = default;

  const ModelConfig& config() const { return cfg_; }

  LevelStructure preprocess(const PointCloud& pc) const;
  FieldPrediction forward(const PointCloud& pc, const Tensor& condition, Tape* tape = nullptr,
                          const LevelStructure* pre = nullptr, ForwardOptions opts = {}) const;

  // Fresh name->tensor registry in deterministic traversal order.
  ParamRegistry parameters();
  std::size_t parameter_count() const;

  Tensor head_coarse_apply(Tape* tape, const Tensor& level1_features) const;
  Tensor head_refine_apply(Tape* tape, const Tensor& level0_features) const;

 private:
  struct EncoderStage {
    Linear pool_proj;
    std::vector<GroupedAttentionBlock> blocks;
    std::vector<FilmAdapter> films;
  };
  struct DecoderStage {
    Linear fuse;
    std::vector<GroupedAttentionBlock> blocks;
    std::vector<FilmAdapter> films;
  };

  ModelConfig cfg_;
  bool built_ = false;
  Linear embed_;
  GeometryEncoder geom_;
  std::vector<EncoderStage> enc_;
  std::vector<DecoderStage> dec_;  // indexed by level, dec_[l] runs at level l
  Linear head_coarse_;
  Linear head_refine_;
};

// Checkpoint plumbing: "config" text entry plus one f64 "param/<name>" entry
// per parameter. Callers may add further entries before writing.
void save_model_archive(Archive& archive, GaFieldModel& model);
GaFieldModel load_model_archive(const Archive& archive);

}  // namespace gafield
