#include "gafield/blocks.hpp"

#include <cmath>
#include <numeric>

namespace gafield {

Activation activation_from_string(const std::string& name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  if (name == "silu") return Activation::silu;
  if (name == "tanh") return Activation::tanh_act;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

std::string activation_to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::silu: return "silu";
    case Activation::tanh_act: return "tanh";
  }
  throw std::logic_error("unreachable");
}

Tensor activate(Activation a, const Tensor& x) {
  switch (a) {
    case Activation::gelu: return gelu(x);
    case Activation::relu: return relu(x);
    case Activation::silu: return silu(x);
    case Activation::tanh_act: return tanh(x);
  }
  throw std::logic_error("unreachable");
}

namespace {

Tensor track(Tape* tape, const Tensor& t) { return tape ? tape->watch(t) : t; }

Tensor as_row(const Tensor& x) {
  if (x.rank() == 1) return reshape(x, {1, x.numel()});
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng, bool bias, bool zero_init) {
  Linear l;
  l.in = in;
  l.out = out;
  if (zero_init) {
    l.w = Tensor::zeros({in, out});
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    l.w = Tensor::uniform({in, out}, rng, -bound, bound);
  }
  if (bias) l.b = Tensor::zeros({out});
  return l;
}

Tensor Linear::apply(Tape* tape, const Tensor& x) const {
  const bool was_vec = x.rank() == 1;
  Tensor y = matmul(as_row(x), track(tape, w));
  if (b.defined()) y = add_rowvec(y, track(tape, b));
  if (was_vec) y = reshape(y, {out});
  return y;
}

void Linear::collect(const std::string& prefix, ParamRegistry& reg) {
  reg.emplace_back(prefix + ".w", &w);
  if (b.defined()) reg.emplace_back(prefix + ".b", &b);
}

std::size_t Linear::parameter_count() const {
  return w.numel() + (b.defined() ? b.numel() : 0);
}

// ---------------------------------------------------------------------------
// Mlp2

Mlp2 Mlp2::create(std::size_t in, std::size_t hidden, std::size_t out, Activation act, Rng& rng,
                  bool zero_last) {
  Mlp2 m;
  m.l1 = Linear::create(in, hidden, rng);
  m.l2 = Linear::create(hidden, out, rng, true, zero_last);
  m.act = act;
  return m;
}

Tensor Mlp2::apply(Tape* tape, const Tensor& x) const {
  return l2.apply(tape, activate(act, l1.apply(tape, x)));
}

void Mlp2::collect(const std::string& prefix, ParamRegistry& reg) {
  l1.collect(prefix + ".l1", reg);
  l2.collect(prefix + ".l2", reg);
}

// ---------------------------------------------------------------------------
// GroupedAttentionBlock

GroupedAttentionBlock GroupedAttentionBlock::create(std::size_t channels, std::size_t groups,
                                                    Activation act, bool positional, Rng& rng) {
  if (groups == 0 || groups > channels || channels % groups != 0)
    throw std::invalid_argument("GroupedAttentionBlock: need 1 <= g <= C with g | C, got g=" +
                                std::to_string(groups) + " C=" + std::to_string(channels));
  GroupedAttentionBlock blk;
  blk.channels = channels;
  blk.groups = groups;
  blk.q = Linear::create(channels, channels, rng);
  blk.k = Linear::create(channels, channels, rng);
  blk.v = Linear::create(channels, channels, rng);
  blk.proj = Linear::create(channels, channels, rng);
  blk.weight_encoder = Mlp2::create(channels, channels, groups, act, rng);
  if (positional) blk.pos_mlp = Mlp2::create(3, channels, channels, act, rng);
  return blk;
}

Tensor GroupedAttentionBlock::forward(Tape* tape, const Tensor& features, const Tensor& positions,
                                      const EdgeSet& edges, Tensor* weights_out) const {
  if (features.cols() != channels)
    throw ShapeError("GroupedAttentionBlock: feature width " + std::to_string(features.cols()) +
                     " != block width " + std::to_string(channels));
  const std::size_t n = features.rows();

  Tensor qs = q.apply(tape, features);
  Tensor ks = k.apply(tape, features);
  Tensor vs = v.apply(tape, features);

  Tensor qe = gather_rows(qs, edges.target);
  Tensor ke = gather_rows(ks, edges.source);
  Tensor ve = gather_rows(vs, edges.source);

  Tensor rel = sub(qe, ke);
  if (pos_mlp) {
    Tensor dpos = sub(gather_rows(positions, edges.target), gather_rows(positions, edges.source));
    Tensor pe = pos_mlp->apply(tape, dpos);
    rel = add(rel, pe);
    ve = add(ve, pe);
  }

  Tensor alpha = weight_encoder.apply(tape, rel);            // E x g
  Tensor weights = segment_softmax_runs(alpha, edges.run_offsets);
  if (weights_out) *weights_out = weights.detached();

  Tensor mixed = mul(ve, repeat_cols(weights, channels / groups));
  Tensor attn = scatter_add_rows(mixed, edges.target, n);
  return add(features, proj.apply(tape, attn));
}

void GroupedAttentionBlock::collect(const std::string& prefix, ParamRegistry& reg) {
  q.collect(prefix + ".q", reg);
  k.collect(prefix + ".k", reg);
  v.collect(prefix + ".v", reg);
  proj.collect(prefix + ".proj", reg);
  weight_encoder.collect(prefix + ".omega", reg);
  if (pos_mlp) pos_mlp->collect(prefix + ".pos", reg);
}

// ---------------------------------------------------------------------------
// FilmAdapter

FilmAdapter FilmAdapter::create(std::size_t cond_width, std::size_t channels, Activation act,
                                Rng& rng) {
  FilmAdapter f;
  f.channels = channels;
  f.cond_mlp = Mlp2::create(cond_width, channels, 2 * channels, act, rng, /*zero_last=*/true);
  f.w_in = Linear::create(channels, channels, rng, /*bias=*/false);
  f.w_out = Linear::create(channels, channels, rng, /*bias=*/false, /*zero_init=*/true);
  return f;
}

Tensor FilmAdapter::apply(Tape* tape, const Tensor& features, const Tensor& condition) const {
  if (condition.rank() != 1 || condition.numel() != cond_mlp.l1.in)
    throw ShapeError("FilmAdapter: condition width " + std::to_string(condition.numel()) +
                     " != adapter width " + std::to_string(cond_mlp.l1.in));
  Tensor sr = cond_mlp.apply(tape, condition);               // [2C]
  Tensor s = subvector(sr, 0, channels);
  Tensor r = subvector(sr, channels, channels);
  Tensor h = w_in.apply(tape, features);
  h = mul_rowvec(h, add_scalar(r, 1.0));
  h = add_rowvec(h, s);
  Tensor delta = w_out.apply(tape, h);
  return add(features, delta);
}

void FilmAdapter::collect(const std::string& prefix, ParamRegistry& reg) {
  cond_mlp.collect(prefix + ".mlp", reg);
  w_in.collect(prefix + ".w_in", reg);
  w_out.collect(prefix + ".w_out", reg);
}

// ---------------------------------------------------------------------------
// GeometryEncoder

GeometryEncoder GeometryEncoder::create(std::size_t feature_width, std::size_t width,
                                        double token_grid, Activation act, Rng& rng) {
  if (width == 0) throw std::invalid_argument("GeometryEncoder: width must be positive");
  if (!(token_grid > 0)) throw std::invalid_argument("GeometryEncoder: token grid must be positive");
  GeometryEncoder g;
  g.token_grid = token_grid;
  g.width = width;
  g.embed = Linear::create(feature_width, width, rng);
  g.q = Linear::create(width, width, rng);
  g.k = Linear::create(width, width, rng);
  g.v = Linear::create(width, width, rng);
  g.gamma_w = Mlp2::create(width, width, width, act, rng);
  g.gamma_p = Mlp2::create(3, width, width, act, rng);
  return g;
}

Tensor GeometryEncoder::encode(Tape* tape, const Tensor& positions, const Tensor& features) const {
  if (positions.rows() == 0) throw DataError("GeometryEncoder: empty cloud");
  GridClusters clusters = cluster_points(positions, token_grid);
  const std::size_t n_tok = static_cast<std::size_t>(clusters.n_clusters);

  // Token features: member mean of the input features, then embedded.
  Tensor tok_feat = pool_features(features, clusters, Reduce::mean);
  Tensor z = embed.apply(tape, tok_feat);                    // K x d
  const Tensor& tok_pos = clusters.centroids;

  EdgeSet edges = full_edges(static_cast<int>(n_tok));
  Tensor qs = q.apply(tape, z);
  Tensor ks = k.apply(tape, z);
  Tensor vs = v.apply(tape, z);

  Tensor qe = gather_rows(qs, edges.target);
  Tensor ke = gather_rows(ks, edges.source);
  Tensor ve = gather_rows(vs, edges.source);
  Tensor dpos = sub(gather_rows(tok_pos, edges.target), gather_rows(tok_pos, edges.source));
  Tensor pe = gamma_p.apply(tape, dpos);

  Tensor alpha = gamma_w.apply(tape, add(sub(qe, ke), pe));  // E x d, per-channel weights
  Tensor weights = segment_softmax_runs(alpha, edges.run_offsets);
  Tensor mixed = mul(weights, add(ve, pe));
  Tensor pooled_tokens = scatter_add_rows(mixed, edges.target, n_tok);
  return mean_axis(pooled_tokens, 0);                        // [d]
}

void GeometryEncoder::collect(const std::string& prefix, ParamRegistry& reg) {
  embed.collect(prefix + ".embed", reg);
  q.collect(prefix + ".q", reg);
  k.collect(prefix + ".k", reg);
  v.collect(prefix + ".v", reg);
  gamma_w.collect(prefix + ".gamma_w", reg);
  gamma_p.collect(prefix + ".gamma_p", reg);
}

Tensor build_condition(const Tensor& geometry_embedding, const Tensor& flow_condition) {
  if (!geometry_embedding.defined() || geometry_embedding.numel() == 0) return flow_condition;
  if (!flow_condition.defined() || flow_condition.numel() == 0) return geometry_embedding;
  return concat_vec(geometry_embedding, flow_condition);
}

}  // namespace gafield
