#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceg/core_math.hpp"
#include "ceg/error.hpp"
#include "ceg/sample.hpp"

namespace ceg {

struct MlpDims {
  std::size_t input = 0;
  std::size_t hidden = 0;
  std::size_t output = 0;

  bool operator==(const MlpDims&) const = default;
};

/// One-hidden-layer ReLU network: logits = W2 relu(W1 x + b1) + b2.
/// The hidden activation is the feature map F; (W2, b2) is the head C.
struct MlpParams {
  MlpDims dims;
  std::uint64_t seed = 0;
  Matrix w1;  // hidden x input
  Vec b1;     // hidden
  Matrix w2;  // output x hidden
  Vec b2;     // output

  bool operator==(const MlpParams&) const = default;
};

/// Glorot-uniform weights, zero biases.
inline MlpParams init_mlp(MlpDims dims, std::uint64_t seed) {
  if (dims.input == 0 || dims.hidden == 0 || dims.output == 0) {
    throw Error(ErrorKind::Configuration, "network dimensions must be positive");
  }
  RngStream rng(seed, "mlp-init");
  MlpParams p;
  p.dims = dims;
  p.seed = seed;
  p.w1 = Matrix(dims.hidden, dims.input);
  p.w2 = Matrix(dims.output, dims.hidden);
  p.b1.assign(dims.hidden, 0.0);
  p.b2.assign(dims.output, 0.0);
  const double a1 = std::sqrt(6.0 / static_cast<double>(dims.input + dims.hidden));
  for (double& w : p.w1.data) w = rng.uniform(-a1, a1);
  const double a2 = std::sqrt(6.0 / static_cast<double>(dims.hidden + dims.output));
  for (double& w : p.w2.data) w = rng.uniform(-a2, a2);
  return p;
}

struct ForwardPass {
  Vec pre_activation;
  Vec features;
  Vec logits;
  Vec probs;
};

inline ForwardPass forward(const MlpParams& m, std::span<const double> x) {
  if (x.size() != m.dims.input) {
    throw Error(ErrorKind::Shape, "input of length " + std::to_string(x.size()) + ", network expects " +
                                      std::to_string(m.dims.input));
  }
  ForwardPass f;
  f.pre_activation = affine(m.w1, x, m.b1);
  f.features.resize(f.pre_activation.size());
  for (std::size_t i = 0; i < f.features.size(); ++i) f.features[i] = std::max(0.0, f.pre_activation[i]);
  f.logits = affine(m.w2, f.features, m.b2);
  f.probs = softmax(f.logits);
  return f;
}

inline Vec forward_features(const MlpParams& m, std::span<const double> x) { return forward(m, x).features; }

/// The class model G = C o F.
struct Classifier {
  MlpParams net;
};

/// The domain discriminator H; output size equals the number of source domains.
struct DomainDiscriminator {
  MlpParams net;
};

inline Vec predict_class(const Classifier& g, std::span<const double> x) { return forward(g.net, x).probs; }
inline Vec predict_domain(const DomainDiscriminator& h, std::span<const double> x) { return forward(h.net, x).probs; }
inline Vec features(const Classifier& g, std::span<const double> x) { return forward_features(g.net, x); }

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

struct Gradients {
  Matrix w1;
  Vec b1;
  Matrix w2;
  Vec b2;

  static Gradients zeros(const MlpDims& d) {
    return {Matrix(d.hidden, d.input), Vec(d.hidden, 0.0), Matrix(d.output, d.hidden), Vec(d.output, 0.0)};
  }

  /// this += scale * other
  void add_scaled(const Gradients& other, double scale) {
    auto axpy = [scale](std::vector<double>& dst, const std::vector<double>& src) {
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
    };
    axpy(w1.data, other.w1.data);
    axpy(b1, other.b1);
    axpy(w2.data, other.w2.data);
    axpy(b2, other.b2);
  }

  /// Flattened view in the order W1, b1, W2, b2.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(w1.data.size() + b1.size() + w2.data.size() + b2.size());
    out.insert(out.end(), w1.data.begin(), w1.data.end());
    out.insert(out.end(), b1.begin(), b1.end());
    out.insert(out.end(), w2.data.begin(), w2.data.end());
    out.insert(out.end(), b2.begin(), b2.end());
    return out;
  }

  double l2_norm() const { return norm(flatten()); }
};

/// Flattened parameter access in the same order as Gradients::flatten.
inline std::vector<double*> parameter_refs(MlpParams& m) {
  std::vector<double*> refs;
  for (double& v : m.w1.data) refs.push_back(&v);
  for (double& v : m.b1) refs.push_back(&v);
  for (double& v : m.w2.data) refs.push_back(&v);
  for (double& v : m.b2) refs.push_back(&v);
  return refs;
}

/// Input with a (possibly soft) target and a weight in the summed loss.
struct WeightedExample {
  Vec x;
  Vec target;
  double weight = 1.0;
};

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
};

/// Loss sum_i w_i * CE(softmax(G(x_i)), t_i) and its exact gradient.
inline LossAndGradients weighted_loss_gradients(const MlpParams& m, std::span<const WeightedExample> batch) {
  LossAndGradients out{0.0, Gradients::zeros(m.dims)};
  Vec d_hidden(m.dims.hidden);
  for (const auto& ex : batch) {
    if (ex.target.size() != m.dims.output) {
      throw Error(ErrorKind::Shape, "target of length " + std::to_string(ex.target.size()) +
                                        ", network has " + std::to_string(m.dims.output) + " outputs");
    }
    if (ex.weight == 0.0) continue;
    const ForwardPass f = forward(m, ex.x);
    out.loss += ex.weight * cross_entropy(f.probs, ex.target);

    const double target_mass = std::accumulate(ex.target.begin(), ex.target.end(), 0.0);
    Vec d_logits(m.dims.output);
    for (std::size_t o = 0; o < m.dims.output; ++o) {
      d_logits[o] = ex.weight * (f.probs[o] * target_mass - ex.target[o]);
    }
    std::fill(d_hidden.begin(), d_hidden.end(), 0.0);
    for (std::size_t o = 0; o < m.dims.output; ++o) {
      out.grads.b2[o] += d_logits[o];
      auto g_row = out.grads.w2.row(o);
      auto w_row = m.w2.row(o);
      for (std::size_t j = 0; j < m.dims.hidden; ++j) {
        g_row[j] += d_logits[o] * f.features[j];
        d_hidden[j] += d_logits[o] * w_row[j];
      }
    }
    for (std::size_t j = 0; j < m.dims.hidden; ++j) {
      if (f.pre_activation[j] <= 0.0) continue;
      out.grads.b1[j] += d_hidden[j];
      auto g_row = out.grads.w1.row(j);
      for (std::size_t i = 0; i < m.dims.input; ++i) g_row[i] += d_hidden[j] * ex.x[i];
    }
  }
  return out;
}

struct LabeledExample {
  Vec x;
  Vec target;
};

/// Mean soft-target cross-entropy over the batch and its gradient.
inline LossAndGradients loss_gradients(const MlpParams& m, std::span<const LabeledExample> batch) {
  if (batch.empty()) throw Error(ErrorKind::EmptyBatch, "loss over an empty batch");
  std::vector<WeightedExample> weighted;
  weighted.reserve(batch.size());
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) weighted.push_back({ex.x, ex.target, w});
  return weighted_loss_gradients(m, weighted);
}

/// theta <- theta - lr * g; the feature layer (W1, b1) and head (W2, b2) have
/// separate rates.
inline void sgd_step(MlpParams& m, const Gradients& g, double lr_feature, double lr_head) {
  if (!(lr_feature > 0.0) || !(lr_head > 0.0)) throw Error(ErrorKind::Parameter, "learning rates must be positive");
  if (g.w1.data.size() != m.w1.data.size() || g.b1.size() != m.b1.size() ||
      g.w2.data.size() != m.w2.data.size() || g.b2.size() != m.b2.size()) {
    throw Error(ErrorKind::Shape, "gradient shapes do not match the network");
  }
  if (!all_finite(g.w1.data) || !all_finite(g.b1) || !all_finite(g.w2.data) || !all_finite(g.b2)) {
    throw Error(ErrorKind::NumericInput, "non-finite gradient");
  }
  for (std::size_t i = 0; i < m.w1.data.size(); ++i) m.w1.data[i] -= lr_feature * g.w1.data[i];
  for (std::size_t i = 0; i < m.b1.size(); ++i) m.b1[i] -= lr_feature * g.b1[i];
  for (std::size_t i = 0; i < m.w2.data.size(); ++i) m.w2.data[i] -= lr_head * g.w2.data[i];
  for (std::size_t i = 0; i < m.b2.size(); ++i) m.b2[i] -= lr_head * g.b2[i];
}

// ---------------------------------------------------------------------------
// Domain discriminator training
// ---------------------------------------------------------------------------

struct DiscriminatorTraining {
  std::size_t epochs = 1;
  std::size_t batch_size = 16;
  double lr_feature = 0.003;
  double lr_head = 0.01;
};

struct DiscriminatorTrace {
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::size_t steps = 0;
};

inline double domain_loss(const DomainDiscriminator& h, std::span<const Sample* const> pool) {
  double total = 0.0;
  for (const Sample* s : pool) {
    total += cross_entropy(predict_domain(h, s->features), one_hot(s->domain, h.net.dims.output));
  }
  return total / static_cast<double>(pool.size());
}

/// Minibatch SGD on the mean domain cross-entropy over the given (unlabeled)
/// samples, using their domain indices as targets.
inline DiscriminatorTrace train_domain_discriminator(DomainDiscriminator& h, std::span<const Sample* const> pool,
                                                     const DiscriminatorTraining& cfg, RngStream& rng) {
  if (pool.empty()) throw Error(ErrorKind::EmptyPool, "discriminator training on an empty pool");
  if (cfg.batch_size == 0) throw Error(ErrorKind::Configuration, "batch size must be positive");
  const std::size_t k = h.net.dims.output;
  for (const Sample* s : pool) {
    if (s->domain >= k) {
      throw Error(ErrorKind::Configuration, "sample domain " + std::to_string(s->domain) +
                                                " outside discriminator range " + std::to_string(k));
    }
  }
  DiscriminatorTrace trace;
  trace.loss_before = domain_loss(h, pool);
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<LabeledExample> batch;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) {
        const Sample* s = pool[order[i]];
        batch.push_back({s->features, one_hot(s->domain, k)});
      }
      // A single domain has constant zero loss; skip the no-op update.
      if (k > 1) {
        const auto lg = loss_gradients(h.net, batch);
        sgd_step(h.net, lg.grads, cfg.lr_feature, cfg.lr_head);
      }
      ++trace.steps;
    }
  }
  trace.loss_after = domain_loss(h, pool);
  return trace;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {
inline void append_array(std::string& out, std::span<const double> values) {
  out += '[';
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_double17(values[i]);
  }
  out += ']';
}

inline Vec read_array(const nlohmann::json& j, const char* key, std::size_t expected) {
  if (!j.contains(key) || !j.at(key).is_array()) throw Error(ErrorKind::Parse, std::string("checkpoint missing ") + key);
  Vec v = j.at(key).get<Vec>();
  if (v.size() != expected) {
    throw Error(ErrorKind::Parse, std::string("checkpoint field ") + key + " has " + std::to_string(v.size()) +
                                      " entries, expected " + std::to_string(expected));
  }
  return v;
}
}  // namespace detail

inline constexpr int kCheckpointVersion = 1;

/// {"version","dims":{input,hidden,output},"seed","W1","b1","W2","b2"}; every
/// double written with 17 significant digits.
inline std::string checkpoint_json(const MlpParams& m) {
  std::string out = "{\"version\":" + std::to_string(kCheckpointVersion) + ",\"dims\":{\"input\":" +
                    std::to_string(m.dims.input) + ",\"hidden\":" + std::to_string(m.dims.hidden) +
                    ",\"output\":" + std::to_string(m.dims.output) + "},\"seed\":" + std::to_string(m.seed) +
                    ",\"W1\":";
  detail::append_array(out, m.w1.data);
  out += ",\"b1\":";
  detail::append_array(out, m.b1);
  out += ",\"W2\":";
  detail::append_array(out, m.w2.data);
  out += ",\"b2\":";
  detail::append_array(out, m.b2);
  out += "}\n";
  return out;
}

inline MlpParams parse_checkpoint(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("checkpoint: ") + e.what());
  }
  try {
    if (j.value("version", 0) != kCheckpointVersion) throw Error(ErrorKind::Parse, "unsupported checkpoint version");
    MlpParams m;
    const auto& d = j.at("dims");
    m.dims = {d.at("input").get<std::size_t>(), d.at("hidden").get<std::size_t>(), d.at("output").get<std::size_t>()};
    m.seed = j.at("seed").get<std::uint64_t>();
    m.w1 = Matrix(m.dims.hidden, m.dims.input);
    m.w1.data = detail::read_array(j, "W1", m.dims.hidden * m.dims.input);
    m.b1 = detail::read_array(j, "b1", m.dims.hidden);
    m.w2 = Matrix(m.dims.output, m.dims.hidden);
    m.w2.data = detail::read_array(j, "W2", m.dims.output * m.dims.hidden);
    m.b2 = detail::read_array(j, "b2", m.dims.output);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const MlpParams& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path);
  out << checkpoint_json(m);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path);
}

inline MlpParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace ceg
