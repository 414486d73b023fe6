#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "corefed/bnn.hpp"
#include "corefed/errors.hpp"
#include "corefed/rng.hpp"

namespace corefed {

// ---------------------------------------------------------------------------
// Synthetic regression
// ---------------------------------------------------------------------------

enum class FunctionKind { sin, poly, planted_mlp };

inline FunctionKind parse_function_kind(const std::string &s) {
  if (s == "sin") return FunctionKind::sin;
  if (s == "poly") return FunctionKind::poly;
  if (s == "planted_mlp") return FunctionKind::planted_mlp;
  throw ConfigError("unknown regression function '" + s + "'");
}

/// Ground-truth regression function f: [-1,1]^{s0} -> R.
///
///   sin:         sin(2 pi x_0) * x_1   (sin(2 pi x_0) when s0 == 1)
///   poly:        0.5 + sum_d x_d - x_0^2
///   planted_mlp: tanh teacher network [s0, hidden, 1] with N(0, 1/fan_in) weights
class RegressionFunction {
public:
  RegressionFunction(FunctionKind kind, int s0, std::uint64_t seed, int hidden = 8)
      : kind_(kind), s0_(s0) {
    if (s0 < 1) throw DomainError("regression function: s0 must be >= 1");
    if (kind == FunctionKind::planted_mlp) {
      teacher_.layer_sizes = {s0, hidden, 1};
      teacher_.activation = Activation::tanh;
      Rng rng(derive_seed(seed, {tag(Stream::init), 0xFEEDULL}));
      std::normal_distribution<double> nd(0.0, 1.0);
      theta_.resize(teacher_.parameter_count());
      Eigen::Index off = 0;
      for (int l = 0; l < teacher_.num_layers(); ++l) {
        const int in = teacher_.layer_sizes[l];
        const int out = teacher_.layer_sizes[l + 1];
        const double scale = 1.0 / std::sqrt(static_cast<double>(in));
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(in + 1) * out; ++i) {
          theta_[off + i] = scale * nd(rng);
        }
        off += static_cast<Eigen::Index>(in + 1) * out;
      }
    }
  }

  double operator()(const Eigen::Ref<const Vector> &x) const {
    switch (kind_) {
    case FunctionKind::sin:
      return s0_ >= 2 ? std::sin(2.0 * std::numbers::pi * x[0]) * x[1]
                      : std::sin(2.0 * std::numbers::pi * x[0]);
    case FunctionKind::poly:
      return 0.5 + x.sum() - x[0] * x[0];
    case FunctionKind::planted_mlp:
      return forward(teacher_, theta_, x)[0];
    }
    return 0.0;
  }

  int input_dim() const { return s0_; }

private:
  FunctionKind kind_;
  int s0_;
  NetworkSpec teacher_;
  Vector theta_;
};

/// x ~ U[-1,1]^{s0}, y = f(x) + N(0, sigma_eps^2).
inline LabeledDataset synth_regression(const RegressionFunction &f, Eigen::Index n, double sigma_eps,
                                       std::uint64_t seed) {
  if (n < 1) throw DomainError("synth_regression: n must be >= 1");
  if (!(sigma_eps >= 0.0)) throw DomainError("synth_regression: sigma_eps must be >= 0");
  Rng rng(derive_seed(seed, {tag(Stream::data)}));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  LabeledDataset d;
  d.x.resize(n, f.input_dim());
  d.y.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int c = 0; c < f.input_dim(); ++c) d.x(i, c) = u(rng);
    d.y(i, 0) = f(d.x.row(i).transpose());
  }
  // Noise drawn after the covariates so sigma_eps = 0 reproduces the same x.
  for (Eigen::Index i = 0; i < n; ++i) d.y(i, 0) += sigma_eps * nd(rng);
  return d;
}

/// Bins x_0 in [-1, 1] into `bins` equal-width regions, giving regression data
/// a label structure that the shard partitioner can split non-iid.
inline std::vector<int> region_labels(const Matrix &x, int bins) {
  if (bins < 1) throw DomainError("region_labels: bins must be >= 1");
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int b = static_cast<int>(std::floor((x(i, 0) + 1.0) * 0.5 * bins));
    out[static_cast<std::size_t>(i)] = std::clamp(b, 0, bins - 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Non-iid partition
// ---------------------------------------------------------------------------

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> assignments;
  int classes_per_client = 0;
  std::uint64_t seed = 0;
};

/// Label shards: client i holds labels {(i*c + j) mod L : j < c}; the points
/// of each label are shuffled and split evenly among the clients holding it.
inline PartitionPlan partition_noniid(const std::vector<int> &labels, int num_clients, int classes_per_client,
                                      std::uint64_t seed) {
  if (num_clients < 1 || classes_per_client < 1) {
    throw DomainError("partition_noniid: client and class counts must be >= 1");
  }
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
  const int distinct = static_cast<int>(by_label.size());
  if (distinct == 0) throw DomainError("partition_noniid: no data");
  if (classes_per_client > distinct) {
    throw DomainError("partition_noniid: classes_per_client exceeds distinct label count");
  }
  if (num_clients * classes_per_client < distinct) {
    throw DomainError("partition_noniid: " + std::to_string(num_clients) + " clients x " +
                      std::to_string(classes_per_client) + " classes cannot cover " +
                      std::to_string(distinct) + " labels");
  }
  std::vector<int> label_values;
  for (const auto &kv : by_label) label_values.push_back(kv.first);

  std::vector<std::vector<int>> holders(static_cast<std::size_t>(distinct));
  for (int c = 0; c < num_clients; ++c) {
    for (int j = 0; j < classes_per_client; ++j) {
      holders[static_cast<std::size_t>((c * classes_per_client + j) % distinct)].push_back(c);
    }
  }

  PartitionPlan plan;
  plan.assignments.resize(static_cast<std::size_t>(num_clients));
  plan.classes_per_client = classes_per_client;
  plan.seed = seed;
  Rng rng(derive_seed(seed, {tag(Stream::partition)}));
  for (int li = 0; li < distinct; ++li) {
    auto pts = by_label[label_values[static_cast<std::size_t>(li)]];
    std::shuffle(pts.begin(), pts.end(), rng);
    const auto &h = holders[static_cast<std::size_t>(li)];
    if (pts.size() < h.size()) {
      throw DomainError("partition_noniid: label " + std::to_string(label_values[static_cast<std::size_t>(li)]) +
                        " has fewer points than clients holding it");
    }
    const std::size_t shards = h.size();
    for (std::size_t s = 0; s < shards; ++s) {
      const std::size_t lo = s * pts.size() / shards;
      const std::size_t hi = (s + 1) * pts.size() / shards;
      auto &dst = plan.assignments[static_cast<std::size_t>(h[s])];
      dst.insert(dst.end(), pts.begin() + static_cast<std::ptrdiff_t>(lo),
                 pts.begin() + static_cast<std::ptrdiff_t>(hi));
    }
  }
  for (auto &a : plan.assignments) std::sort(a.begin(), a.end());
  return plan;
}

// ---------------------------------------------------------------------------
// IDX (MNIST) binary format
// ---------------------------------------------------------------------------

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Raw unsigned-byte IDX tensor.
struct IdxTensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  std::uint32_t magic() const { return 0x0800u | static_cast<std::uint32_t>(dims.size()); }
  bool operator==(const IdxTensor &) const = default;
};

namespace detail {

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
         (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

} // namespace detail

/// Parses an IDX byte stream. Only the unsigned-byte element type (0x08) is
/// supported; payload length must match the header exactly.
inline IdxTensor parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw ParseError("idx: truncated magic number", bytes.size());
  if (bytes[0] != 0 || bytes[1] != 0) throw ParseError("idx: bad magic (leading bytes must be zero)", 0);
  if (bytes[2] != 0x08) {
    throw ParseError("idx: unsupported type code " + std::to_string(bytes[2]), 2);
  }
  const std::size_t ndims = bytes[3];
  if (ndims == 0) throw ParseError("idx: zero dimensions", 3);
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) {
    throw ParseError("idx: truncated header, expected " + std::to_string(header) + " bytes, got " +
                         std::to_string(bytes.size()),
                     bytes.size());
  }
  IdxTensor t;
  std::size_t expected = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    t.dims.push_back(detail::read_be32(bytes, 4 + 4 * d));
    expected *= t.dims.back();
  }
  const std::size_t actual = bytes.size() - header;
  if (actual < expected) {
    throw ParseError("idx: truncated payload, expected " + std::to_string(expected) + " bytes, got " +
                         std::to_string(actual),
                     bytes.size());
  }
  if (actual > expected) {
    throw ParseError("idx: " + std::to_string(actual - expected) + " trailing bytes after payload",
                     header + expected);
  }
  t.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return t;
}

inline std::vector<std::uint8_t> serialize_idx(const IdxTensor &t) {
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(t.dims.size())};
  for (auto d : t.dims) {
    out.push_back(static_cast<std::uint8_t>(d >> 24));
    out.push_back(static_cast<std::uint8_t>(d >> 16));
    out.push_back(static_cast<std::uint8_t>(d >> 8));
    out.push_back(static_cast<std::uint8_t>(d));
  }
  out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

/// n images flattened to n x (rows*cols), scaled to [0, 1].
inline Matrix idx_images(const IdxTensor &t) {
  if (t.magic() != kIdxImagesMagic) throw ParseError("idx: not an image file (magic 0x803 expected)", 3);
  const Eigen::Index n = t.dims[0];
  const Eigen::Index width = static_cast<Eigen::Index>(t.dims[1]) * t.dims[2];
  Matrix x(n, width);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < width; ++c) {
      x(i, c) = static_cast<double>(t.data[static_cast<std::size_t>(i * width + c)]) / 255.0;
    }
  }
  return x;
}

inline std::vector<int> idx_labels(const IdxTensor &t) {
  if (t.magic() != kIdxLabelsMagic) throw ParseError("idx: not a label file (magic 0x801 expected)", 3);
  return {t.data.begin(), t.data.end()};
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Loads an images/labels IDX pair as a classification dataset, optionally
/// keeping only the first `limit` rows.
inline LabeledDataset load_idx_dataset(const std::string &images_path, const std::string &labels_path,
                                       Eigen::Index limit = -1) {
  const auto img = read_file_bytes(images_path);
  const auto lab = read_file_bytes(labels_path);
  LabeledDataset d;
  d.x = idx_images(parse_idx(img));
  d.labels = idx_labels(parse_idx(lab));
  if (static_cast<Eigen::Index>(d.labels.size()) != d.x.rows()) {
    throw DimensionError("idx: image and label counts differ");
  }
  if (limit > 0 && limit < d.x.rows()) {
    d.x.conservativeResize(limit, Eigen::NoChange);
    d.labels.resize(static_cast<std::size_t>(limit));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Random projection
// ---------------------------------------------------------------------------

/// x * R / sqrt(out_dim) with R_ij ~ N(0,1) fixed by the seed.
inline Matrix embed_vectors(const Matrix &x, Eigen::Index out_dim, std::uint64_t seed, bool identity = false) {
  if (out_dim < 1 || out_dim > x.cols()) throw DomainError("embed_vectors: out_dim must be in [1, D]");
  if (identity) {
    if (out_dim != x.cols()) throw DomainError("embed_vectors: identity requires out_dim == D");
    return x;
  }
  Rng rng(derive_seed(seed, {tag(Stream::embedding)}));
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix r(x.cols(), out_dim);
  for (Eigen::Index j = 0; j < out_dim; ++j) {
    for (Eigen::Index i = 0; i < x.cols(); ++i) r(i, j) = nd(rng);
  }
  return x * r / std::sqrt(static_cast<double>(out_dim));
}

/// CSV with header x_0..x_{s0-1},y_0.. (regression) or x_..,label.
inline void write_dataset_csv(std::ostream &os, const LabeledDataset &d) {
  for (Eigen::Index c = 0; c < d.x.cols(); ++c) os << (c ? "," : "") << "x_" << c;
  if (d.is_classification()) {
    os << ",label";
  } else {
    for (Eigen::Index c = 0; c < d.y.cols(); ++c) os << ",y_" << c;
  }
  os << "\n";
  char buf[64];
  for (Eigen::Index i = 0; i < d.x.rows(); ++i) {
    for (Eigen::Index c = 0; c < d.x.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", d.x(i, c));
      os << (c ? "," : "") << buf;
    }
    if (d.is_classification()) {
      os << "," << d.labels[static_cast<std::size_t>(i)];
    } else {
      for (Eigen::Index c = 0; c < d.y.cols(); ++c) {
        std::snprintf(buf, sizeof buf, "%.17g", d.y(i, c));
        os << "," << buf;
      }
    }
    os << "\n";
  }
}

/// Numeric CSV (no header) into a dense matrix; blank lines are skipped and
/// every row must have the same number of fields. Errors carry the line number.
inline Matrix parse_csv_matrix(const std::string &text) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(field, &used));
        if (field.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(field);
      } catch (const std::exception &) {
        throw ParseError("csv: bad number '" + field + "'", lineno);
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) throw ParseError("csv: ragged row", lineno);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("csv: no data", lineno);
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

} // namespace corefed
