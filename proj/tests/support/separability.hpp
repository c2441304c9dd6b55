#pragma once

#include <vector>

#include "ceg/datagen.hpp"
#include "ceg/model.hpp"

namespace ceg::fixture {

/// Trains a fresh classifier on one domain's revealed labels and returns its
/// accuracy on that same domain.
inline double in_domain_accuracy(const GeneratedDataset& ds, std::size_t domain, std::uint64_t seed,
                                 std::size_t epochs = 60) {
  std::vector<LabeledExample> data;
  for (const auto& s : ds.samples) {
    if (s.domain == domain) data.push_back({s.features, one_hot(s.hidden_class, ds.spec.num_classes)});
  }
  MlpParams m = init_mlp({ds.spec.ambient_dim, 32, ds.spec.num_classes}, seed);
  RngStream rng(seed, "separability");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<LabeledExample> batch;
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += 16) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + 16); ++i) batch.push_back(data[order[i]]);
      sgd_step(m, loss_gradients(m, batch).grads, 0.05, 0.05);
    }
  }
  std::size_t correct = 0;
  for (const auto& ex : data) correct += argmax(forward(m, ex.x).probs) == argmax(ex.target) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace ceg::fixture
