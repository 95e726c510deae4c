#pragma once

// Synthetic dataset generation, stratified splitting, and the ATF binary
// tensor format used for every on-disk array.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "poisonlab/numerics.hpp"

namespace poisonlab {

enum class Split : std::uint8_t { train, test1, test2, aux };

const char* split_name(Split s);
Split split_from_name(const std::string& name);

struct Instance {
  Vec x;               // raw input vector
  double scale = 0.0;  // declared input half-range; clean values lie in [-scale, scale]
  int label = 0;       // class index
  std::int64_t id = 0;
  bool is_poison = false;
  std::optional<std::int64_t> base_id;  // set iff is_poison
};

struct Dataset {
  std::vector<Instance> instances;
  int num_classes = 0;  // transfer classes; aux sets use labels outside [0, num_classes)
  std::size_t input_dim = 0;
  double scale = 0.0;
  std::vector<Split> split_tags;  // parallel to instances; empty until assigned

  bool has_split_tags() const { return !split_tags.empty(); }
  void append(Instance inst, Split tag);
  const Instance* find(std::int64_t id) const;  // nullptr if absent

  // Instances carrying the given tag, in dataset order.
  std::vector<const Instance*> with_tag(Split tag) const;
};

// Each class is a smoothed random template plus element-wise Gaussian noise
// (stddev noise_level * scale), clipped to [-scale, scale]. label_offset
// shifts the label range so auxiliary sets use a disjoint label set.
Dataset generate_synthetic(std::size_t n_per_class, int num_classes, std::size_t input_dim,
                           double scale, std::uint64_t class_geometry_seed, double noise_level,
                           int label_offset = 0);

// Stratified 80/10/10 train/test1/test2 split, deterministic given seed.
void split_dataset(Dataset& ds, std::uint64_t seed);

// ---------------------------------------------------------------------------
// ATF tensor format: magic "ATF1", then little-endian u32 fields
// [elem_type, ndim, dim_0..dim_{ndim-1}], then the payload little-endian
// row-major. elem_type: 0 = f32, 1 = f64, 2 = u32. ndim <= 4.

enum class AtfType : std::uint32_t { f32 = 0, f64 = 1, u32 = 2 };

struct AtfTensor {
  std::vector<std::uint32_t> dims;
  std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint32_t>> data;

  AtfType type() const { return static_cast<AtfType>(data.index()); }
  std::size_t element_count() const;

  static AtfTensor from_matrix(const Matrix& m);
  Matrix to_matrix() const;  // requires f64, ndim == 2
};

void save_tensor(const std::filesystem::path& path, const AtfTensor& payload);
AtfTensor load_tensor(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset persistence: ATF tensors plus a JSON manifest.

void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Feature import/export: precomputed feature vectors keyed by instance id,
// so externally computed extractor outputs can replace the built-in one.

struct FeatureStore {
  std::vector<std::int64_t> ids;
  Matrix features;  // row i holds features for ids[i]

  std::unordered_map<std::int64_t, std::size_t> index() const;
};

void save_features(const std::filesystem::path& dir, const FeatureStore& fs);
FeatureStore load_features(const std::filesystem::path& dir);

}  // namespace poisonlab
