#include "gafield/model.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>
#include <cmath>
#include <sstream>

namespace gafield {

void ModelConfig::validate() const {
  if (input_width == 0) throw ConfigError("model: input_width must be positive");
  if (grid_sizes.empty()) throw ConfigError("model: at least one stage required");
  for (std::size_t i = 0; i < grid_sizes.size(); ++i) {
    if (!(grid_sizes[i] > 0)) throw ConfigError("model: grid sizes must be positive");
    if (i > 0 && !(grid_sizes[i] > grid_sizes[i - 1]))
      throw ConfigError("model: grid sizes must be strictly increasing");
  }
  if (channels.size() != grid_sizes.size())
    throw ConfigError("model: channels length must equal stage count");
  if (group_channels == 0) throw ConfigError("model: group_channels must be positive");
  for (std::size_t c : channels) {
    if (c == 0) throw ConfigError("model: channel widths must be positive");
    if (c % group_channels != 0)
      throw ConfigError("model: every stage width must be divisible by group_channels");
  }
  if (blocks_per_stage == 0) throw ConfigError("model: blocks_per_stage must be positive");
  if (!(geometry_grid > 0)) throw ConfigError("model: geometry_grid must be positive");
  if (geometry_width == 0) throw ConfigError("model: geometry_width must be positive");
  if (output_width == 0) throw ConfigError("model: output_width must be positive");
  if (pool_reduce != "max" && pool_reduce != "mean")
    throw ConfigError("model: pool_reduce must be 'max' or 'mean'");
  activation_from_string(activation);  // throws on unknown names
}

namespace {

std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ",";
    os << v[i];
  }
  return os.str();
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: boolean expected for " + key + ", got '" + v + "'");
}

}  // namespace

std::string model_config_to_text(const ModelConfig& cfg) {
  std::ostringstream os;
  os.precision(17);
  os << "input_width = " << cfg.input_width << "\n";
  os << "grid_sizes = " << join_doubles(cfg.grid_sizes) << "\n";
  os << "channels = " << join_sizes(cfg.channels) << "\n";
  os << "blocks_per_stage = " << cfg.blocks_per_stage << "\n";
  os << "group_channels = " << cfg.group_channels << "\n";
  os << "geometry_grid = " << cfg.geometry_grid << "\n";
  os << "geometry_width = " << cfg.geometry_width << "\n";
  os << "condition_width = " << cfg.condition_width << "\n";
  os << "output_width = " << cfg.output_width << "\n";
  os << "activation = " << cfg.activation << "\n";
  os << "positional_attention = " << (cfg.positional_attention ? "true" : "false") << "\n";
  os << "film_enabled = " << (cfg.film_enabled ? "true" : "false") << "\n";
  os << "film_decoder = " << (cfg.film_decoder ? "true" : "false") << "\n";
  os << "center_coords = " << (cfg.center_coords ? "true" : "false") << "\n";
  os << "pool_reduce = " << cfg.pool_reduce << "\n";
  return os.str();
}

ModelConfig model_config_from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key == "input_width") cfg.input_width = std::stoul(val);
    else if (key == "grid_sizes") {
      cfg.grid_sizes.clear();
      for (const auto& tok : split_list(val)) cfg.grid_sizes.push_back(std::stod(tok));
    } else if (key == "channels") {
      cfg.channels.clear();
      for (const auto& tok : split_list(val)) cfg.channels.push_back(std::stoul(tok));
    } else if (key == "blocks_per_stage") cfg.blocks_per_stage = std::stoul(val);
    else if (key == "group_channels") cfg.group_channels = std::stoul(val);
    else if (key == "geometry_grid") cfg.geometry_grid = std::stod(val);
    else if (key == "geometry_width") cfg.geometry_width = std::stoul(val);
    else if (key == "condition_width") cfg.condition_width = std::stoul(val);
    else if (key == "output_width") cfg.output_width = std::stoul(val);
    else if (key == "activation") cfg.activation = val;
    else if (key == "positional_attention") cfg.positional_attention = parse_bool(val, key);
    else if (key == "film_enabled") cfg.film_enabled = parse_bool(val, key);
    else if (key == "film_decoder") cfg.film_decoder = parse_bool(val, key);
    else if (key == "center_coords") cfg.center_coords = parse_bool(val, key);
    else if (key == "pool_reduce") cfg.pool_reduce = val;
    else throw ConfigError("model config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

GaFieldModel::GaFieldModel(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const Activation act = activation_from_string(cfg_.activation);
  Rng rng = Rng(init_seed).fork(7);
  const std::size_t S = cfg_.stages();
  const std::size_t cond_width = cfg_.geometry_width + cfg_.condition_width;

  embed_ = Linear::create(cfg_.input_width, cfg_.level_width(0), rng);
  geom_ = GeometryEncoder::create(cfg_.input_width, cfg_.geometry_width, cfg_.geometry_grid, act,
                                  rng);

  enc_.reserve(S);
  for (std::size_t k = 0; k < S; ++k) {
    EncoderStage st;
    st.pool_proj = Linear::create(cfg_.level_width(k), cfg_.level_width(k + 1), rng);
    for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
      const std::size_t w = cfg_.level_width(k + 1);
      st.blocks.push_back(GroupedAttentionBlock::create(w, w / cfg_.group_channels, act,
                                                        cfg_.positional_attention, rng));
      if (cfg_.film_enabled) st.films.push_back(FilmAdapter::create(cond_width, w, act, rng));
    }
    enc_.push_back(std::move(st));
  }

  dec_.resize(S);  // dec_[l] runs at level l, built top-down like the forward pass
  for (std::size_t l = S; l-- > 0;) {
    DecoderStage st;
    st.fuse = Linear::create(cfg_.level_width(l + 1) + cfg_.level_width(l), cfg_.level_width(l),
                             rng);
    for (std::size_t b = 0; b < cfg_.blocks_per_stage; ++b) {
      const std::size_t w = cfg_.level_width(l);
      st.blocks.push_back(GroupedAttentionBlock::create(w, w / cfg_.group_channels, act,
                                                        cfg_.positional_attention, rng));
      if (cfg_.film_enabled && cfg_.film_decoder)
        st.films.push_back(FilmAdapter::create(cond_width, w, act, rng));
    }
    dec_[l] = std::move(st);
  }

  head_coarse_ = Linear::create(cfg_.level_width(1), cfg_.output_width, rng);
  head_refine_ = Linear::create(cfg_.level_width(0), cfg_.output_width, rng);
  built_ = true;
}

LevelStructure GaFieldModel::preprocess(const PointCloud& pc) const {
  if (pc.count() == 0) throw DataError("forward: empty cloud");
  const std::size_t S = cfg_.stages();
  LevelStructure ls;
  ls.level_positions.push_back(pc.positions);
  for (std::size_t k = 0; k < S; ++k) {
    ls.clusters.push_back(cluster_points(ls.level_positions[k], cfg_.grid_sizes[k]));
    ls.level_positions.push_back(ls.clusters[k].centroids);
  }
  // Attention neighborhoods: level l < S uses the clusters that pool it;
  // the deepest level groups at twice the last grid size.
  for (std::size_t l = 0; l < S; ++l) ls.edges.push_back(cluster_edges(ls.clusters[l]));
  GridClusters deep = cluster_points(ls.level_positions[S], 2.0 * cfg_.grid_sizes[S - 1]);
  ls.edges.push_back(cluster_edges(deep));
  return ls;
}

FieldPrediction GaFieldModel::forward(const PointCloud& pc, const Tensor& condition, Tape* tape,
                                      const LevelStructure* pre, ForwardOptions opts) const {
  if (!built_) throw ConfigError("forward: model not initialized");
  if (!pc.features.defined() || pc.features.cols() != cfg_.input_width)
    throw ShapeError("forward: feature width " +
                     std::to_string(pc.features.defined() ? pc.features.cols() : 0) +
                     " != configured input width " + std::to_string(cfg_.input_width));
  if (condition.numel() != cfg_.condition_width)
    throw ShapeError("forward: condition width mismatch");
  if (pc.count() == 0) throw DataError("forward: empty cloud");

  LevelStructure local;
  if (!pre) {
    local = preprocess(pc);
    pre = &local;
  }
  const std::size_t S = cfg_.stages();
  const Reduce reduce = cfg_.pool_reduce == "max" ? Reduce::max : Reduce::mean;

  // Coordinate channels may be centered so the learned map is translation
  // consistent; pooling grids are input-anchored either way.
  Tensor feats0 = pc.features;
  if (cfg_.center_coords) {
    const std::size_t n = pc.count();
    // Accumulate the centroid in position-sorted order so the result does
    // not depend on input point order.
    std::vector<int> by_pos(n);
    std::iota(by_pos.begin(), by_pos.end(), 0);
    const auto& pv = pc.positions.vec();
    std::sort(by_pos.begin(), by_pos.end(), [&](int a, int b) {
      const auto pa = std::make_tuple(pv[3 * static_cast<std::size_t>(a)],
                                      pv[3 * static_cast<std::size_t>(a) + 1],
                                      pv[3 * static_cast<std::size_t>(a) + 2]);
      const auto pb = std::make_tuple(pv[3 * static_cast<std::size_t>(b)],
                                      pv[3 * static_cast<std::size_t>(b) + 1],
                                      pv[3 * static_cast<std::size_t>(b) + 2]);
      return pa < pb;
    });
    double cx = 0, cy = 0, cz = 0, k = 0;
    for (int idx : by_pos) {
      const std::size_t i = static_cast<std::size_t>(idx);
      k += 1.0;
      cx += (pc.positions.vec()[3 * i] - cx) / k;
      cy += (pc.positions.vec()[3 * i + 1] - cy) / k;
      cz += (pc.positions.vec()[3 * i + 2] - cz) / k;
    }
    feats0 = Tensor::from(pc.features.shape(), std::vector<double>(pc.features.vec()));
    for (std::size_t i = 0; i < n; ++i) {
      feats0.storage()[i * cfg_.input_width + 0] -= cx;
      feats0.storage()[i * cfg_.input_width + 1] -= cy;
      feats0.storage()[i * cfg_.input_width + 2] -= cz;
    }
  }

  Tensor g;
  if (opts.ablate_geometry) {
    g = Tensor::zeros({cfg_.geometry_width});
  } else {
    g = geom_.encode(tape, pc.positions, feats0);
  }
  Tensor cplus = build_condition(g, condition);
  const bool film_on = cfg_.film_enabled && !opts.ablate_film;

  std::vector<Tensor> skip(S + 1);
  Tensor h = embed_.apply(tape, feats0);
  skip[0] = h;
  for (std::size_t k = 0; k < S; ++k) {
    const EncoderStage& st = enc_[k];
    h = pool_features(st.pool_proj.apply(tape, h), pre->clusters[k], reduce);
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      h = st.blocks[b].forward(tape, h, pre->level_positions[k + 1], pre->edges[k + 1]);
      if (film_on && b < st.films.size()) h = st.films[b].apply(tape, h, cplus);
    }
    skip[k + 1] = h;
  }

  Tensor d = h;  // deepest level features
  Tensor y_coarse;
  for (std::size_t l = S; l-- > 0;) {
    const DecoderStage& st = dec_[l];
    Tensor up = gather_rows(d, pre->clusters[l].map);
    d = st.fuse.apply(tape, concat_cols(up, skip[l]));
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      d = st.blocks[b].forward(tape, d, pre->level_positions[l], pre->edges[l]);
      if (film_on && b < st.films.size()) d = st.films[b].apply(tape, d, cplus);
    }
    if (l == 1) y_coarse = head_coarse_.apply(tape, d);
  }
  // Single-stage models have no decoded level 1; the coarse head then reads
  // the encoder's level-1 features.
  if (S == 1) y_coarse = head_coarse_.apply(tape, skip[1]);

  FieldPrediction out;
  out.coarse = y_coarse;
  out.upsampled = gather_rows(y_coarse, pre->clusters[0].map);
  out.residual = head_refine_.apply(tape, d);
  out.final = add(out.upsampled, out.residual);
  return out;
}

Tensor GaFieldModel::head_coarse_apply(Tape* tape, const Tensor& level1_features) const {
  return head_coarse_.apply(tape, level1_features);
}

Tensor GaFieldModel::head_refine_apply(Tape* tape, const Tensor& level0_features) const {
  return head_refine_.apply(tape, level0_features);
}

ParamRegistry GaFieldModel::parameters() {
  ParamRegistry reg;
  if (!built_) return reg;
  embed_.collect("embed", reg);
  geom_.collect("geom", reg);
  for (std::size_t k = 0; k < enc_.size(); ++k) {
    const std::string p = "enc" + std::to_string(k);
    enc_[k].pool_proj.collect(p + ".proj", reg);
    for (std::size_t b = 0; b < enc_[k].blocks.size(); ++b) {
      enc_[k].blocks[b].collect(p + ".b" + std::to_string(b), reg);
      if (b < enc_[k].films.size()) enc_[k].films[b].collect(p + ".film" + std::to_string(b), reg);
    }
  }
  for (std::size_t l = dec_.size(); l-- > 0;) {
    const std::string p = "dec" + std::to_string(l);
    dec_[l].fuse.collect(p + ".fuse", reg);
    for (std::size_t b = 0; b < dec_[l].blocks.size(); ++b) {
      dec_[l].blocks[b].collect(p + ".b" + std::to_string(b), reg);
      if (b < dec_[l].films.size()) dec_[l].films[b].collect(p + ".film" + std::to_string(b), reg);
    }
  }
  head_coarse_.collect("head_coarse", reg);
  head_refine_.collect("head_refine", reg);
  return reg;
}

std::size_t GaFieldModel::parameter_count() const {
  // Registry construction does not mutate parameter values.
  auto reg = const_cast<GaFieldModel*>(this)->parameters();
  std::size_t total = 0;
  for (auto& [name, p] : reg) total += p->numel();
  return total;
}

void save_model_archive(Archive& archive, GaFieldModel& model) {
  archive["config"] = ArchiveEntry::make_text(model_config_to_text(model.config()));
  for (auto& [name, p] : model.parameters())
    archive["param/" + name] = ArchiveEntry::make_f64(*p);
}

GaFieldModel load_model_archive(const Archive& archive) {
  auto it = archive.find("config");
  if (it == archive.end()) throw DataError("checkpoint: missing config entry");
  ModelConfig cfg = model_config_from_text(it->second.text);
  GaFieldModel model(cfg, /*init_seed=*/0);
  for (auto& [name, p] : model.parameters()) {
    auto pe = archive.find("param/" + name);
    if (pe == archive.end()) throw DataError("checkpoint: missing parameter '" + name + "'");
    Tensor stored = pe->second.as_tensor();
    if (stored.shape() != p->shape())
      throw DataError("checkpoint: parameter '" + name + "' has shape " +
                      shape_str(stored.shape()) + ", expected " + shape_str(p->shape()));
    *p = stored.detached();
  }
  return model;
}

}  // namespace gafield
