#pragma once

// Learned building blocks: grouped vector attention over grid-cluster
// neighborhoods, the geometry encoder (token self-attention with positional
// encoding, mean-pooled to a global embedding), and FiLM conditioning.

#include <optional>
#include <string>
#include <vector>

#include "gafield/pointcloud.hpp"
#include "gafield/rng.hpp"
#include "gafield/tensor.hpp"

namespace gafield {

enum class Activation { gelu, relu, silu, tanh_act };

Activation activation_from_string(const std::string& name);
std::string activation_to_string(Activation a);
Tensor activate(Activation a, const Tensor& x);

// Named mutable views of every trainable tensor, in registration order.
using ParamRegistry = std::vector<std::pair<std::string, Tensor*>>;

struct Linear {
  Tensor w;  // in x out
  Tensor b;  // out; undefined when bias-free
  std::size_t in = 0, out = 0;

  static Linear create(std::size_t in, std::size_t out, Rng& rng, bool bias = true,
                       bool zero_init = false);
  // x may be [N x in] or a 1-D [in] vector (treated as one row).
  Tensor apply(Tape* tape, const Tensor& x) const;
  void collect(const std::string& prefix, ParamRegistry& reg);
  std::size_t parameter_count() const;
};

// Two-layer perceptron with one hidden layer and a nonlinearity between.
struct Mlp2 {
  Linear l1, l2;
  Activation act = Activation::gelu;

  static Mlp2 create(std::size_t in, std::size_t hidden, std::size_t out, Activation act,
                     Rng& rng, bool zero_last = false);
  Tensor apply(Tape* tape, const Tensor& x) const;
  void collect(const std::string& prefix, ParamRegistry& reg);
};

// Grouped vector attention over cluster neighborhoods. The C-wide value
// vector splits into `groups` contiguous blocks; one learned scalar weight
// per (neighbor, group) is softmax-normalized over the neighborhood.
struct GroupedAttentionBlock {
  std::size_t channels = 0;
  std::size_t groups = 0;
  Linear q, k, v, proj;
  Mlp2 weight_encoder;           // C -> C -> g
  std::optional<Mlp2> pos_mlp;   // 3 -> C -> C when positional encoding is on

  static GroupedAttentionBlock create(std::size_t channels, std::size_t groups, Activation act,
                                      bool positional, Rng& rng);
  // features [N x C], positions [N x 3]; returns [N x C] with residual added.
  // When weights_out is given, the softmaxed [E x g] attention weights are
  // copied there (detached).
  Tensor forward(Tape* tape, const Tensor& features, const Tensor& positions, const EdgeSet& edges,
                 Tensor* weights_out = nullptr) const;
  void collect(const std::string& prefix, ParamRegistry& reg);
};

// Feature-wise conditioning: (s, r) = MLP(c+), then
// f + W_out((1 + r) * W_in(f) + s). The MLP output layer and W_out start at
// zero so an untrained adapter is an exact identity.
struct FilmAdapter {
  std::size_t channels = 0;
  Mlp2 cond_mlp;   // |c+| -> C -> 2C, zero-initialized last layer
  Linear w_in;     // C -> C, no bias
  Linear w_out;    // C -> C, no bias, zero-initialized

  static FilmAdapter create(std::size_t cond_width, std::size_t channels, Activation act,
                            Rng& rng);
  Tensor apply(Tape* tape, const Tensor& features, const Tensor& condition) const;
  void collect(const std::string& prefix, ParamRegistry& reg);
};

// Global geometry embedding: grid-pool the cloud into tokens at token_grid,
// run one full vector-attention layer with positional encoding over the
// tokens, mean-pool to a single vector.
struct GeometryEncoder {
  double token_grid = 0.3;
  std::size_t width = 64;
  Linear embed;   // input feature width -> width
  Linear q, k, v;
  Mlp2 gamma_w;   // width -> width -> width
  Mlp2 gamma_p;   // 3 -> width -> width

  static GeometryEncoder create(std::size_t feature_width, std::size_t width, double token_grid,
                                Activation act, Rng& rng);
  // positions [N x 3], features [N x F]; returns the 1-D embedding [width].
  Tensor encode(Tape* tape, const Tensor& positions, const Tensor& features) const;
  void collect(const std::string& prefix, ParamRegistry& reg);
};

// c+ = [g ; c]. Either side may be empty.
Tensor build_condition(const Tensor& geometry_embedding, const Tensor& flow_condition);

}  // namespace gafield
