#pragma once

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ceg/core_math.hpp"
#include "ceg/error.hpp"
#include "ceg/sample.hpp"

namespace ceg {

/// Rotated Gaussian-mixture domains. Class means sit on a circle of radius
/// `class_separation` in the first two latent dimensions; domain k rotates
/// them by `rotation_deg[k]`. Latent points are embedded into `ambient_dim`
/// through a fixed random orthonormal map.
struct DomainSpec {
  std::size_t num_domains = 4;
  std::size_t num_classes = 3;
  std::size_t samples_per_domain = 300;
  std::size_t latent_dim = 2;
  std::size_t ambient_dim = 16;
  std::vector<double> rotation_deg{0.0, 15.0, 30.0, 45.0};
  double class_separation = 3.0;
  double noise_sigma = 0.4;
  double ambient_noise_sigma = 0.1;
  std::uint64_t seed = 0;

  bool operator==(const DomainSpec&) const = default;

  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorKind::Configuration, "invalid domain spec: " + what); };
    if (num_domains < 2) fail("num_domains >= 2 required (got " + std::to_string(num_domains) + ")");
    if (num_classes < 2) fail("num_classes >= 2 required (got " + std::to_string(num_classes) + ")");
    if (samples_per_domain < num_classes) fail("samples_per_domain >= num_classes required");
    if (latent_dim < 2) fail("latent_dim >= 2 required");
    if (ambient_dim < latent_dim) fail("ambient_dim >= latent_dim required");
    if (rotation_deg.size() != num_domains) fail("one rotation angle per domain required");
    if (std::set<double>(rotation_deg.begin(), rotation_deg.end()).size() != rotation_deg.size()) {
      fail("rotation angles must be distinct");
    }
    if (!(class_separation >= 0.0) || !(noise_sigma >= 0.0) || !(ambient_noise_sigma >= 0.0)) {
      fail("separation and noise levels must be non-negative");
    }
  }
};

inline nlohmann::json to_json(const DomainSpec& s) {
  return {{"num_domains", s.num_domains},
          {"num_classes", s.num_classes},
          {"samples_per_domain", s.samples_per_domain},
          {"latent_dim", s.latent_dim},
          {"ambient_dim", s.ambient_dim},
          {"rotation_deg", s.rotation_deg},
          {"class_separation", s.class_separation},
          {"noise_sigma", s.noise_sigma},
          {"ambient_noise_sigma", s.ambient_noise_sigma},
          {"seed", s.seed}};
}

/// Missing keys keep their defaults.
inline DomainSpec domain_spec_from_json(const nlohmann::json& j) {
  DomainSpec s;
  try {
    s.num_domains = j.value("num_domains", s.num_domains);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.samples_per_domain = j.value("samples_per_domain", s.samples_per_domain);
    s.latent_dim = j.value("latent_dim", s.latent_dim);
    s.ambient_dim = j.value("ambient_dim", s.ambient_dim);
    s.rotation_deg = j.value("rotation_deg", s.rotation_deg);
    s.class_separation = j.value("class_separation", s.class_separation);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.ambient_noise_sigma = j.value("ambient_noise_sigma", s.ambient_noise_sigma);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("domain spec: ") + e.what());
  }
  return s;
}

struct GeneratedDataset {
  DomainSpec spec;
  std::vector<Sample> samples;

  bool operator==(const GeneratedDataset&) const = default;
};

/// Class-conditional mean of (domain, class) in latent space.
inline Vec latent_class_mean(const DomainSpec& spec, std::size_t domain, std::size_t cls) {
  const double base = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(spec.num_classes);
  const double angle = base + spec.rotation_deg.at(domain) * std::numbers::pi / 180.0;
  Vec mean(spec.latent_dim, 0.0);
  mean[0] = spec.class_separation * std::cos(angle);
  mean[1] = spec.class_separation * std::sin(angle);
  return mean;
}

/// ambient_dim x latent_dim matrix with orthonormal columns (Gram-Schmidt on
/// Gaussian draws).
inline Matrix random_orthonormal_embedding(std::size_t ambient, std::size_t latent, RngStream& rng) {
  Matrix q(ambient, latent);
  for (std::size_t c = 0; c < latent; ++c) {
    for (;;) {
      Vec col(ambient);
      for (double& v : col) v = rng.normal();
      for (std::size_t p = 0; p < c; ++p) {
        double proj = 0.0;
        for (std::size_t r = 0; r < ambient; ++r) proj += col[r] * q(r, p);
        for (std::size_t r = 0; r < ambient; ++r) col[r] -= proj * q(r, p);
      }
      const double n = norm(col);
      if (n < 1e-8) continue;
      for (std::size_t r = 0; r < ambient; ++r) q(r, c) = col[r] / n;
      break;
    }
  }
  return q;
}

/// Balanced classes per domain (class = index mod H); ids are
/// domain * samples_per_domain + index.
inline GeneratedDataset generate(const DomainSpec& spec) {
  spec.validate();
  GeneratedDataset ds;
  ds.spec = spec;
  RngStream embed_rng(spec.seed, "datagen/embedding");
  const Matrix q = random_orthonormal_embedding(spec.ambient_dim, spec.latent_dim, embed_rng);
  ds.samples.reserve(spec.num_domains * spec.samples_per_domain);
  for (std::size_t k = 0; k < spec.num_domains; ++k) {
    RngStream rng(spec.seed, "datagen/domain/" + std::to_string(k));
    for (std::size_t i = 0; i < spec.samples_per_domain; ++i) {
      const std::size_t cls = i % spec.num_classes;
      Vec z = latent_class_mean(spec, k, cls);
      if (spec.noise_sigma > 0.0) {
        for (double& v : z) v += rng.normal(0.0, spec.noise_sigma);
      }
      Vec x(spec.ambient_dim, 0.0);
      for (std::size_t r = 0; r < spec.ambient_dim; ++r) {
        for (std::size_t c = 0; c < spec.latent_dim; ++c) x[r] += q(r, c) * z[c];
        if (spec.ambient_noise_sigma > 0.0) x[r] += rng.normal(0.0, spec.ambient_noise_sigma);
      }
      ds.samples.push_back({static_cast<SampleId>(k * spec.samples_per_domain + i), std::move(x), k, cls});
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Leave-one-domain-out
// ---------------------------------------------------------------------------

struct DomainSplit {
  std::vector<Sample> sources;  // domains renumbered 0..K-2
  std::vector<Sample> target;   // original domain index kept
  std::vector<std::size_t> source_original_domain;  // new index -> original
  std::size_t target_domain = 0;
};

inline DomainSplit leave_one_domain_out(const GeneratedDataset& ds, std::size_t target) {
  if (target >= ds.spec.num_domains) {
    throw Error(ErrorKind::Configuration, "target domain " + std::to_string(target) + " out of range " +
                                              std::to_string(ds.spec.num_domains));
  }
  DomainSplit split;
  split.target_domain = target;
  for (std::size_t k = 0; k < ds.spec.num_domains; ++k) {
    if (k != target) split.source_original_domain.push_back(k);
  }
  for (const auto& s : ds.samples) {
    if (s.domain == target) {
      split.target.push_back(s);
    } else {
      Sample copy = s;
      copy.domain = s.domain < target ? s.domain : s.domain - 1;
      split.sources.push_back(std::move(copy));
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// JSON-lines file format
//   line 1: {"spec":{...}}
//   then one {"id":..,"domain":..,"class":..,"x":[..]} per sample
// ---------------------------------------------------------------------------

inline std::string sample_json_line(const Sample& s) {
  std::string out = "{\"id\":" + std::to_string(s.id) + ",\"domain\":" + std::to_string(s.domain) +
                    ",\"class\":" + std::to_string(s.hidden_class) + ",\"x\":[";
  for (std::size_t i = 0; i < s.features.size(); ++i) {
    if (i) out += ',';
    out += format_double17(s.features[i]);
  }
  out += "]}";
  return out;
}

inline std::string spec_json_line(const DomainSpec& s) {
  std::string angles = "[";
  for (std::size_t i = 0; i < s.rotation_deg.size(); ++i) {
    if (i) angles += ',';
    angles += format_double17(s.rotation_deg[i]);
  }
  angles += ']';
  return "{\"spec\":{\"num_domains\":" + std::to_string(s.num_domains) +
         ",\"num_classes\":" + std::to_string(s.num_classes) +
         ",\"samples_per_domain\":" + std::to_string(s.samples_per_domain) +
         ",\"latent_dim\":" + std::to_string(s.latent_dim) + ",\"ambient_dim\":" + std::to_string(s.ambient_dim) +
         ",\"rotation_deg\":" + angles + ",\"class_separation\":" + format_double17(s.class_separation) +
         ",\"noise_sigma\":" + format_double17(s.noise_sigma) +
         ",\"ambient_noise_sigma\":" + format_double17(s.ambient_noise_sigma) + ",\"seed\":" + std::to_string(s.seed) +
         "}}";
}

inline std::string serialize_dataset(const GeneratedDataset& ds) {
  std::string out = spec_json_line(ds.spec) + '\n';
  for (const auto& s : ds.samples) out += sample_json_line(s) + '\n';
  return out;
}

inline void save_dataset(const GeneratedDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path + " for writing");
  out << serialize_dataset(ds);
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path);
}

/// Parses the whole stream or throws; never returns a partial dataset.
inline GeneratedDataset parse_dataset(std::istream& in) {
  GeneratedDataset ds;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& what) {
    throw Error(ErrorKind::Parse, "line " + std::to_string(line_no) + ": " + what);
  };
  if (!std::getline(in, line)) {
    line_no = 1;
    fail("missing header");
  }
  line_no = 1;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(e.what());
  }
  if (!header.is_object() || !header.contains("spec")) fail("header has no \"spec\"");
  try {
    ds.spec = domain_spec_from_json(header.at("spec"));
    ds.spec.validate();
  } catch (const Error& e) {
    fail(e.what());
  }
  std::set<SampleId> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Sample s;
    try {
      const auto j = nlohmann::json::parse(line);
      s.id = j.at("id").get<SampleId>();
      s.domain = j.at("domain").get<std::size_t>();
      s.hidden_class = j.at("class").get<std::size_t>();
      s.features = j.at("x").get<Vec>();
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    }
    if (s.domain >= ds.spec.num_domains) fail("domain " + std::to_string(s.domain) + " out of range");
    if (s.hidden_class >= ds.spec.num_classes) fail("class " + std::to_string(s.hidden_class) + " out of range");
    if (s.features.size() != ds.spec.ambient_dim) fail("feature vector has wrong length");
    if (!all_finite(s.features)) fail("non-finite feature value");
    if (!ids.insert(s.id).second) fail("duplicate id " + std::to_string(s.id));
    ds.samples.push_back(std::move(s));
  }
  const std::size_t expected = ds.spec.num_domains * ds.spec.samples_per_domain;
  if (ds.samples.size() != expected) {
    ++line_no;
    fail("expected " + std::to_string(expected) + " samples, found " + std::to_string(ds.samples.size()) +
         " (truncated file?)");
  }
  return ds;
}

inline GeneratedDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  return parse_dataset(in);
}

}  // namespace ceg
