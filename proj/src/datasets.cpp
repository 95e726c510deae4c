#include "poisonlab/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace poisonlab {

using nlohmann::json;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test1: return "test1";
    case Split::test2: return "test2";
    case Split::aux: return "aux";
  }
  throw Error("split_name: bad tag");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "test1") return Split::test1;
  if (name == "test2") return Split::test2;
  if (name == "aux") return Split::aux;
  throw IoError("unknown split tag '" + name + "'");
}

void Dataset::append(Instance inst, Split tag) {
  if (!instances.empty() && split_tags.size() != instances.size()) {
    throw DataError("append: dataset has unassigned split tags");
  }
  instances.push_back(std::move(inst));
  split_tags.push_back(tag);
}

const Instance* Dataset::find(std::int64_t id) const {
  for (const auto& inst : instances) {
    if (inst.id == id) return &inst;
  }
  return nullptr;
}

std::vector<const Instance*> Dataset::with_tag(Split tag) const {
  if (split_tags.size() != instances.size()) {
    throw DataError("with_tag: split tags not assigned");
  }
  std::vector<const Instance*> out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (split_tags[i] == tag) out.push_back(&instances[i]);
  }
  return out;
}

Dataset generate_synthetic(std::size_t n_per_class, int num_classes, std::size_t input_dim,
                           double scale, std::uint64_t class_geometry_seed, double noise_level,
                           int label_offset) {
  if (num_classes < 2) {
    throw DataError("generate_synthetic: need at least 2 classes");
  }
  if (input_dim < 8) {
    throw DataError("generate_synthetic: input_dim must be >= 8");
  }
  if (noise_level < 0.0) {
    throw DataError("generate_synthetic: negative noise_level");
  }
  if (!(scale > 0.0)) {
    throw DataError("generate_synthetic: scale must be positive");
  }
  if (n_per_class * static_cast<std::size_t>(num_classes) < 50) {
    throw DataError("generate_synthetic: dataset too small (need >= 50 instances)");
  }

  Rng geometry(class_geometry_seed);
  Rng template_rng = geometry.derive("templates");
  Rng noise_rng = geometry.derive("noise");

  // Smoothed random template per class, rescaled to RMS 0.5 * scale.
  const std::size_t window = std::max<std::size_t>(3, input_dim / 16);
  std::vector<Vec> templates;
  templates.reserve(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    Vec raw(input_dim);
    for (double& v : raw) v = template_rng.normal();
    Vec smooth(input_dim, 0.0);
    for (std::size_t j = 0; j < input_dim; ++j) {
      double s = 0.0;
      for (std::size_t w = 0; w < window; ++w) {
        s += raw[(j + w) % input_dim];  // circular moving average
      }
      smooth[j] = s / static_cast<double>(window);
    }
    double rms = std::sqrt(dot(smooth, smooth) / static_cast<double>(input_dim));
    if (rms < 1e-12) rms = 1e-12;
    const double gain = 0.5 * scale / rms;
    for (double& v : smooth) v *= gain;
    templates.push_back(std::move(smooth));
  }

  Dataset ds;
  ds.num_classes = num_classes;
  ds.input_dim = input_dim;
  ds.scale = scale;
  ds.instances.reserve(n_per_class * num_classes);
  std::int64_t next_id = 0;
  const double sigma = noise_level * scale;
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      Instance inst;
      inst.x.resize(input_dim);
      for (std::size_t j = 0; j < input_dim; ++j) {
        const double v = templates[c][j] + (sigma > 0.0 ? sigma * noise_rng.normal() : 0.0);
        inst.x[j] = std::clamp(v, -scale, scale);
      }
      inst.scale = scale;
      inst.label = label_offset + c;
      inst.id = next_id++;
      ds.instances.push_back(std::move(inst));
    }
  }
  return ds;
}

void split_dataset(Dataset& ds, std::uint64_t seed) {
  if (ds.has_split_tags()) {
    throw DataError("split_dataset: tags already assigned");
  }
  std::unordered_map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    by_class[ds.instances[i].label].push_back(i);
  }
  ds.split_tags.assign(ds.instances.size(), Split::train);
  std::vector<int> labels;
  for (const auto& [label, idxs] : by_class) labels.push_back(label);
  std::sort(labels.begin(), labels.end());
  for (int label : labels) {
    auto& idxs = by_class[label];
    if (idxs.size() < 10) {
      throw DataError("split_dataset: class " + std::to_string(label) +
                      " has fewer than 10 instances");
    }
    Rng rng(derive_seed(seed, "split/" + std::to_string(label)));
    rng.shuffle(idxs);
    const std::size_t n = idxs.size();
    const auto n_train = static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(n)));
    const auto n_test1 = static_cast<std::size_t>(std::lround(0.1 * static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
      Split tag = Split::test2;
      if (i < n_train) {
        tag = Split::train;
      } else if (i < n_train + n_test1) {
        tag = Split::test1;
      }
      ds.split_tags[idxs[i]] = tag;
    }
  }
}

// ---------------------------------------------------------------------------
// ATF i/o

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) {
    throw AtfTruncatedError("atf: truncated header");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
  put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint64_t get_u64(std::istream& is) {
  const std::uint64_t lo = get_u32(is);
  const std::uint64_t hi = get_u32(is);
  return lo | (hi << 32);
}

}  // namespace

std::size_t AtfTensor::element_count() const {
  std::size_t n = 1;
  for (std::uint32_t d : dims) n *= d;
  return dims.empty() ? 0 : n;
}

AtfTensor AtfTensor::from_matrix(const Matrix& m) {
  AtfTensor t;
  t.dims = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
  t.data = m.data;
  return t;
}

Matrix AtfTensor::to_matrix() const {
  if (type() != AtfType::f64 || dims.size() != 2) {
    throw IoError("atf: expected 2-d f64 tensor");
  }
  Matrix m(dims[0], dims[1]);
  m.data = std::get<std::vector<double>>(data);
  return m;
}

void save_tensor(const std::filesystem::path& path, const AtfTensor& payload) {
  if (payload.dims.empty() || payload.dims.size() > 4) {
    throw AtfDimError("atf: ndim must be in [1, 4]");
  }
  std::size_t expect = payload.element_count();
  const std::size_t have = std::visit([](const auto& v) { return v.size(); }, payload.data);
  if (expect != have) {
    throw IoError("atf: dims mismatch payload size");
  }
  if (payload.type() == AtfType::f32) {
    for (float v : std::get<std::vector<float>>(payload.data)) {
      if (!std::isfinite(v)) throw NumericError("atf: non-finite value in payload");
    }
  } else if (payload.type() == AtfType::f64) {
    for (double v : std::get<std::vector<double>>(payload.data)) {
      if (!std::isfinite(v)) throw NumericError("atf: non-finite value in payload");
    }
  }

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("atf: cannot open " + path.string() + " for writing");
  }
  os.write("ATF1", 4);
  put_u32(os, static_cast<std::uint32_t>(payload.type()));
  put_u32(os, static_cast<std::uint32_t>(payload.dims.size()));
  for (std::uint32_t d : payload.dims) put_u32(os, d);
  switch (payload.type()) {
    case AtfType::f32:
      for (float v : std::get<std::vector<float>>(payload.data)) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(os, bits);
      }
      break;
    case AtfType::f64:
      for (double v : std::get<std::vector<double>>(payload.data)) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(os, bits);
      }
      break;
    case AtfType::u32:
      for (std::uint32_t v : std::get<std::vector<std::uint32_t>>(payload.data)) {
        put_u32(os, v);
      }
      break;
  }
  if (!os) {
    throw IoError("atf: write failure on " + path.string());
  }
}

AtfTensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("atf: cannot open " + path.string());
  }
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::memcmp(magic, "ATF1", 4) != 0) {
    throw AtfMagicError("atf: bad magic in " + path.string());
  }
  const std::uint32_t type_code = get_u32(is);
  if (type_code > 2) {
    throw AtfMagicError("atf: unknown element type " + std::to_string(type_code));
  }
  const std::uint32_t ndim = get_u32(is);
  if (ndim == 0 || ndim > 4) {
    throw AtfDimError("atf: ndim " + std::to_string(ndim) + " out of range");
  }
  AtfTensor t;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const std::uint32_t d = get_u32(is);
    t.dims.push_back(d);
    count *= d;
    if (count > (1ULL << 31)) {
      throw AtfDimError("atf: tensor too large");
    }
  }
  const auto n = static_cast<std::size_t>(count);
  switch (static_cast<AtfType>(type_code)) {
    case AtfType::f32: {
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = get_u32(is);
        std::memcpy(&v[i], &bits, 4);
      }
      t.data = std::move(v);
      break;
    }
    case AtfType::f64: {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t bits = get_u64(is);
        std::memcpy(&v[i], &bits, 8);
      }
      t.data = std::move(v);
      break;
    }
    case AtfType::u32: {
      std::vector<std::uint32_t> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = get_u32(is);
      t.data = std::move(v);
      break;
    }
  }
  is.peek();
  if (!is.eof()) {
    throw IoError("atf: trailing bytes in " + path.string());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Dataset persistence

namespace {
constexpr std::uint32_t kNoBase = 0xffffffffU;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  const std::size_t n = ds.instances.size();

  Matrix x(n, ds.input_dim);
  std::vector<std::uint32_t> labels(n), ids(n), flags(n), base_ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Instance& inst = ds.instances[i];
    if (inst.x.size() != ds.input_dim) {
      throw IoError("save_dataset: instance " + std::to_string(inst.id) + " has wrong dim");
    }
    if (inst.scale != ds.scale) {
      throw IoError("save_dataset: heterogeneous scales unsupported");
    }
    if (inst.id < 0 || inst.id >= static_cast<std::int64_t>(kNoBase)) {
      throw IoError("save_dataset: id out of u32 range");
    }
    std::copy(inst.x.begin(), inst.x.end(), x.row(i));
    labels[i] = static_cast<std::uint32_t>(inst.label);
    ids[i] = static_cast<std::uint32_t>(inst.id);
    flags[i] = inst.is_poison ? 1 : 0;
    base_ids[i] = inst.base_id ? static_cast<std::uint32_t>(*inst.base_id) : kNoBase;
  }

  save_tensor(dir / "x.atf", AtfTensor::from_matrix(x));
  const auto dim1 = std::vector<std::uint32_t>{static_cast<std::uint32_t>(n)};
  save_tensor(dir / "labels.atf", AtfTensor{dim1, labels});
  save_tensor(dir / "ids.atf", AtfTensor{dim1, ids});
  save_tensor(dir / "flags.atf", AtfTensor{dim1, flags});
  save_tensor(dir / "base_ids.atf", AtfTensor{dim1, base_ids});

  json manifest;
  manifest["schema"] = "poisonlab-dataset-1";
  manifest["num_classes"] = ds.num_classes;
  manifest["input_dim"] = ds.input_dim;
  manifest["scale"] = ds.scale;
  manifest["files"] = {{"x", "x.atf"},       {"labels", "labels.atf"},
                       {"ids", "ids.atf"},   {"flags", "flags.atf"},
                       {"base_ids", "base_ids.atf"}};
  json tags = json::array();
  for (Split s : ds.split_tags) tags.push_back(split_name(s));
  manifest["split_tags"] = tags;

  std::ofstream os(dir / "dataset.json");
  if (!os) {
    throw IoError("save_dataset: cannot write manifest");
  }
  os << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "dataset.json");
  if (!is) {
    throw IoError("load_dataset: missing manifest in " + dir.string());
  }
  json manifest = json::parse(is);
  if (manifest.value("schema", "") != "poisonlab-dataset-1") {
    throw IoError("load_dataset: unknown manifest schema");
  }

  Dataset ds;
  ds.num_classes = manifest.at("num_classes").get<int>();
  ds.input_dim = manifest.at("input_dim").get<std::size_t>();
  ds.scale = manifest.at("scale").get<double>();

  const auto& files = manifest.at("files");
  Matrix x = load_tensor(dir / files.at("x").get<std::string>()).to_matrix();
  auto labels = std::get<std::vector<std::uint32_t>>(
      load_tensor(dir / files.at("labels").get<std::string>()).data);
  auto ids = std::get<std::vector<std::uint32_t>>(
      load_tensor(dir / files.at("ids").get<std::string>()).data);
  auto flags = std::get<std::vector<std::uint32_t>>(
      load_tensor(dir / files.at("flags").get<std::string>()).data);
  auto base_ids = std::get<std::vector<std::uint32_t>>(
      load_tensor(dir / files.at("base_ids").get<std::string>()).data);

  const std::size_t n = x.rows;
  if (labels.size() != n || ids.size() != n || flags.size() != n || base_ids.size() != n ||
      x.cols != ds.input_dim) {
    throw IoError("load_dataset: inconsistent tensor shapes");
  }
  ds.instances.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Instance& inst = ds.instances[i];
    inst.x.assign(x.row(i), x.row(i) + x.cols);
    inst.scale = ds.scale;
    inst.label = static_cast<int>(labels[i]);
    inst.id = ids[i];
    inst.is_poison = flags[i] != 0;
    if (base_ids[i] != kNoBase) inst.base_id = base_ids[i];
    if (inst.is_poison != inst.base_id.has_value()) {
      throw IoError("load_dataset: base_id set iff is_poison violated");
    }
  }
  for (const auto& tag : manifest.at("split_tags")) {
    ds.split_tags.push_back(split_from_name(tag.get<std::string>()));
  }
  if (!ds.split_tags.empty() && ds.split_tags.size() != n) {
    throw IoError("load_dataset: split tag count mismatch");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Feature store

std::unordered_map<std::int64_t, std::size_t> FeatureStore::index() const {
  std::unordered_map<std::int64_t, std::size_t> m;
  m.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) m[ids[i]] = i;
  return m;
}

void save_features(const std::filesystem::path& dir, const FeatureStore& fs) {
  if (fs.ids.size() != fs.features.rows) {
    throw IoError("save_features: id/feature count mismatch");
  }
  std::filesystem::create_directories(dir);
  std::vector<std::uint32_t> ids(fs.ids.size());
  for (std::size_t i = 0; i < fs.ids.size(); ++i) {
    if (fs.ids[i] < 0 || fs.ids[i] >= static_cast<std::int64_t>(kNoBase)) {
      throw IoError("save_features: id out of u32 range");
    }
    ids[i] = static_cast<std::uint32_t>(fs.ids[i]);
  }
  save_tensor(dir / "features.atf", AtfTensor::from_matrix(fs.features));
  save_tensor(dir / "feature_ids.atf",
              AtfTensor{{static_cast<std::uint32_t>(ids.size())}, ids});
  json manifest;
  manifest["schema"] = "poisonlab-features-1";
  manifest["files"] = {{"features", "features.atf"}, {"ids", "feature_ids.atf"}};
  std::ofstream os(dir / "features.json");
  if (!os) {
    throw IoError("save_features: cannot write manifest");
  }
  os << manifest.dump(2) << "\n";
}

FeatureStore load_features(const std::filesystem::path& dir) {
  std::ifstream is(dir / "features.json");
  if (!is) {
    throw IoError("load_features: missing manifest in " + dir.string());
  }
  json manifest = json::parse(is);
  if (manifest.value("schema", "") != "poisonlab-features-1") {
    throw IoError("load_features: unknown manifest schema");
  }
  const auto& files = manifest.at("files");
  FeatureStore fs;
  fs.features = load_tensor(dir / files.at("features").get<std::string>()).to_matrix();
  auto ids = std::get<std::vector<std::uint32_t>>(
      load_tensor(dir / files.at("ids").get<std::string>()).data);
  fs.ids.assign(ids.begin(), ids.end());
  if (fs.ids.size() != fs.features.rows) {
    throw IoError("load_features: id/feature count mismatch");
  }
  return fs;
}

}  // namespace poisonlab
