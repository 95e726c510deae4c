#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "poisonlab/datasets.hpp"
#include "poisonlab/errors.hpp"
#include "test_support.hpp"

using namespace poisonlab;
using testsupport::TempDir;

namespace {

Matrix instances_to_matrix(const Dataset& ds) {
  Matrix x(ds.instances.size(), ds.input_dim);
  for (std::size_t i = 0; i < ds.instances.size(); ++i)
    for (std::size_t j = 0; j < ds.input_dim; ++j) x(i, j) = ds.instances[i].x[j] / ds.scale;
  return x;
}

}  // namespace

TEST_CASE("generate_synthetic shape, labels, ids, clamping") {
  Dataset ds = generate_synthetic(20, 4, 32, 10.0, 123, 0.8);
  CHECK(ds.instances.size() == 80);
  CHECK(ds.num_classes == 4);
  CHECK(ds.input_dim == 32);
  CHECK(ds.scale == 10.0);

  std::map<int, int> per_class;
  std::set<std::int64_t> ids;
  for (const auto& inst : ds.instances) {
    REQUIRE(inst.x.size() == 32);
    REQUIRE(inst.label >= 0);
    REQUIRE(inst.label < 4);
    REQUIRE(!inst.is_poison);
    REQUIRE(!inst.base_id.has_value());
    for (double v : inst.x) {
      REQUIRE(v <= 10.0);
      REQUIRE(v >= -10.0);
    }
    ++per_class[inst.label];
    ids.insert(inst.id);
  }
  for (auto& [label, count] : per_class) CHECK(count == 20);
  CHECK(ids.size() == 80);  // unique ids

  CHECK_THROWS_AS(generate_synthetic(2, 4, 32, 10.0, 1, 0.5), DataError);  // < 50 instances
  CHECK_THROWS_AS(generate_synthetic(20, 4, 32, -1.0, 1, 0.5), DataError);
  CHECK_THROWS_AS(generate_synthetic(20, 4, 32, 10.0, 1, -0.5), DataError);
}

TEST_CASE("zero noise collapses each class onto its template") {
  Dataset ds = generate_synthetic(15, 4, 16, 5.0, 9, 0.0);
  std::map<int, Vec> tmpl;
  for (const auto& inst : ds.instances) {
    auto it = tmpl.find(inst.label);
    if (it == tmpl.end()) {
      tmpl[inst.label] = inst.x;
    } else {
      REQUIRE(inst.x == it->second);  // bitwise equal, no noise added
    }
  }
  // Different classes still differ.
  CHECK(tmpl[0] != tmpl[1]);
}

TEST_CASE("generation is deterministic in the geometry seed") {
  Dataset a = generate_synthetic(15, 4, 16, 5.0, 77, 0.6);
  Dataset b = generate_synthetic(15, 4, 16, 5.0, 77, 0.6);
  Dataset c = generate_synthetic(15, 4, 16, 5.0, 78, 0.6);
  REQUIRE(a.instances.size() == b.instances.size());
  bool all_equal = true;
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    if (a.instances[i].x != b.instances[i].x) all_equal = false;
    CHECK(a.instances[i].label == b.instances[i].label);
    CHECK(a.instances[i].id == b.instances[i].id);
  }
  CHECK(all_equal);

  bool differs = false;
  for (std::size_t i = 0; i < a.instances.size(); ++i)
    if (a.instances[i].x != c.instances[i].x) differs = true;
  CHECK(differs);
}

TEST_CASE("label_offset moves the label range for auxiliary sets") {
  Dataset aux = generate_synthetic(15, 4, 16, 5.0, 3, 0.5, 10);
  for (const auto& inst : aux.instances) {
    CHECK(inst.label >= 10);
    CHECK(inst.label < 14);
  }
}

TEST_CASE("classes are separable by a softmax probe at the default config") {
  // Oracle check on the data itself, independent of any network: a plain
  // linear probe must fit the training inputs nearly perfectly.
  Dataset ds = generate_synthetic(400, 10, 256, 127.0, 42, 1.0);
  Matrix x = instances_to_matrix(ds);
  std::vector<int> labels;
  labels.reserve(ds.instances.size());
  for (const auto& inst : ds.instances) labels.push_back(inst.label);
  const double acc = testsupport::softmax_probe_train_accuracy(x, labels, 10, 120, 2.0);
  CHECK(acc > 0.9);
}

TEST_CASE("split_dataset is stratified 80/10/10 with rounding") {
  Dataset ds = generate_synthetic(400, 10, 8, 127.0, 5, 0.5);
  split_dataset(ds, 99);
  REQUIRE(ds.has_split_tags());
  REQUIRE(ds.split_tags.size() == ds.instances.size());

  std::map<int, std::map<Split, int>> counts;
  for (std::size_t i = 0; i < ds.instances.size(); ++i)
    ++counts[ds.instances[i].label][ds.split_tags[i]];
  for (auto& [label, c] : counts) {
    CHECK(c[Split::train] == 320);
    CHECK(c[Split::test1] == 40);
    CHECK(c[Split::test2] == 40);
  }

  // Odd per-class count: fractions still within one instance of 80/10/10.
  Dataset odd = generate_synthetic(17, 4, 8, 127.0, 5, 0.5);
  split_dataset(odd, 99);
  std::map<int, std::map<Split, int>> oc;
  for (std::size_t i = 0; i < odd.instances.size(); ++i)
    ++oc[odd.instances[i].label][odd.split_tags[i]];
  for (auto& [label, c] : oc) {
    CHECK(std::abs(c[Split::train] - 14) <= 1);  // 0.8 * 17 = 13.6
    CHECK(std::abs(c[Split::test1] - 2) <= 1);
    CHECK(c[Split::train] + c[Split::test1] + c[Split::test2] == 17);
  }
}

TEST_CASE("split_dataset deterministic per seed, different across seeds") {
  Dataset a = generate_synthetic(30, 4, 8, 64.0, 5, 0.5);
  Dataset b = generate_synthetic(30, 4, 8, 64.0, 5, 0.5);
  split_dataset(a, 7);
  split_dataset(b, 7);
  CHECK(a.split_tags == b.split_tags);
  Dataset c = generate_synthetic(30, 4, 8, 64.0, 5, 0.5);
  split_dataset(c, 8);
  CHECK(a.split_tags != c.split_tags);
}

TEST_CASE("with_tag and find") {
  Dataset ds = generate_synthetic(15, 4, 8, 64.0, 5, 0.5);
  split_dataset(ds, 7);
  auto train = ds.with_tag(Split::train);
  auto t1 = ds.with_tag(Split::test1);
  auto t2 = ds.with_tag(Split::test2);
  CHECK(train.size() + t1.size() + t2.size() == ds.instances.size());
  const Instance* inst = ds.find(train[0]->id);
  REQUIRE(inst != nullptr);
  CHECK(inst->id == train[0]->id);
  CHECK(ds.find(999999) == nullptr);
}

TEST_CASE("split name round trip") {
  for (Split s : {Split::train, Split::test1, Split::test2, Split::aux}) {
    CHECK(split_from_name(split_name(s)) == s);
  }
  CHECK_THROWS_AS(split_from_name("bogus"), IoError);
}

TEST_CASE("atf round trips for all element types") {
  TempDir tmp;
  const auto p = tmp.path() / "t.atf";

  SUBCASE("f64 matrix") {
    Matrix m(3, 2);
    Rng rng(1);
    for (auto& v : m.data) v = rng.normal();
    save_tensor(p, AtfTensor::from_matrix(m));
    AtfTensor t = load_tensor(p);
    CHECK(t.type() == AtfType::f64);
    Matrix back = t.to_matrix();
    REQUIRE(back.rows == 3);
    REQUIRE(back.cols == 2);
    CHECK(back.data == m.data);  // bit-exact
  }

  SUBCASE("f32 vector") {
    AtfTensor t;
    t.dims = {4};
    t.data = std::vector<float>{1.5f, -2.25f, 0.0f, 100.0f};
    save_tensor(p, t);
    AtfTensor back = load_tensor(p);
    CHECK(back.type() == AtfType::f32);
    CHECK(std::get<std::vector<float>>(back.data) == std::get<std::vector<float>>(t.data));
  }

  SUBCASE("u32 3-d tensor") {
    AtfTensor t;
    t.dims = {2, 3, 2};
    std::vector<std::uint32_t> v(12);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::uint32_t>(i * 7 + 1);
    t.data = v;
    save_tensor(p, t);
    AtfTensor back = load_tensor(p);
    CHECK(back.dims == t.dims);
    CHECK(std::get<std::vector<std::uint32_t>>(back.data) == v);
  }
}

TEST_CASE("atf rejects malformed files with distinct error types") {
  TempDir tmp;
  const auto good = tmp.path() / "good.atf";
  Matrix m(2, 2, 1.0);
  save_tensor(good, AtfTensor::from_matrix(m));

  SUBCASE("bad magic") {
    const auto p = tmp.path() / "magic.atf";
    std::ofstream os(p, std::ios::binary);
    os << "NOPE" << std::string(32, '\0');
    os.close();
    CHECK_THROWS_AS(load_tensor(p), AtfMagicError);
  }

  SUBCASE("truncated header") {
    const auto p = tmp.path() / "trunc1.atf";
    std::ofstream os(p, std::ios::binary);
    os << "ATF1";
    os.close();
    CHECK_THROWS_AS(load_tensor(p), AtfTruncatedError);
  }

  SUBCASE("truncated payload") {
    std::ifstream is(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();
    const auto p = tmp.path() / "trunc2.atf";
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
    os.close();
    CHECK_THROWS_AS(load_tensor(p), AtfTruncatedError);
  }

  SUBCASE("trailing bytes") {
    std::ifstream is(good, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    is.close();
    const auto p = tmp.path() / "trail.atf";
    std::ofstream os(p, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os << "xx";
    os.close();
    CHECK_THROWS_AS(load_tensor(p), IoError);
  }

  SUBCASE("bad ndim") {
    const auto p = tmp.path() / "ndim.atf";
    std::ofstream os(p, std::ios::binary);
    os << "ATF1";
    const std::uint32_t words[2] = {1u, 9u};  // f64, ndim 9
    os.write(reinterpret_cast<const char*>(words), 8);
    for (int i = 0; i < 9; ++i) os.write(reinterpret_cast<const char*>(&words[0]), 4);
    os.close();
    CHECK_THROWS_AS(load_tensor(p), AtfDimError);
  }

  SUBCASE("missing file") { CHECK_THROWS_AS(load_tensor(tmp.path() / "nope.atf"), IoError); }
}

TEST_CASE("atf save rejects dim mismatch and non-finite floats") {
  TempDir tmp;
  AtfTensor t;
  t.dims = {3};
  t.data = std::vector<double>{1.0, 2.0};  // only 2 values
  CHECK_THROWS_AS(save_tensor(tmp.path() / "x.atf", t), IoError);

  t.data = std::vector<double>{1.0, 2.0, std::nan("")};
  CHECK_THROWS_AS(save_tensor(tmp.path() / "x.atf", t), NumericError);

  AtfTensor nd;
  nd.dims = {};
  nd.data = std::vector<double>{};
  CHECK_THROWS_AS(save_tensor(tmp.path() / "x.atf", nd), AtfDimError);
}

TEST_CASE("dataset persistence round trip preserves everything") {
  TempDir tmp;
  Dataset ds = generate_synthetic(15, 4, 8, 64.0, 21, 0.7);
  split_dataset(ds, 3);

  // Add one poison instance to exercise flags and base ids.
  Instance p;
  p.x = ds.instances[0].x;
  p.x[0] += 1.0;
  p.scale = ds.scale;
  p.label = ds.instances[0].label;
  p.id = 100000;
  p.is_poison = true;
  p.base_id = ds.instances[0].id;
  ds.append(p, Split::train);

  save_dataset(tmp.path() / "ds", ds);
  Dataset back = load_dataset(tmp.path() / "ds");

  REQUIRE(back.instances.size() == ds.instances.size());
  CHECK(back.num_classes == ds.num_classes);
  CHECK(back.input_dim == ds.input_dim);
  CHECK(back.scale == ds.scale);
  CHECK(back.split_tags == ds.split_tags);
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    CHECK(back.instances[i].x == ds.instances[i].x);  // f64 payload is bit-exact
    CHECK(back.instances[i].label == ds.instances[i].label);
    CHECK(back.instances[i].id == ds.instances[i].id);
    CHECK(back.instances[i].is_poison == ds.instances[i].is_poison);
    CHECK(back.instances[i].base_id == ds.instances[i].base_id);
  }
}

TEST_CASE("feature store round trip") {
  TempDir tmp;
  FeatureStore fs;
  fs.ids = {5, 9, 2};
  fs.features = Matrix(3, 4);
  Rng rng(8);
  for (auto& v : fs.features.data) v = rng.normal();

  save_features(tmp.path() / "feat", fs);
  FeatureStore back = load_features(tmp.path() / "feat");
  CHECK(back.ids == fs.ids);
  CHECK(back.features.data == fs.features.data);

  auto idx = back.index();
  CHECK(idx.at(5) == 0);
  CHECK(idx.at(9) == 1);
  CHECK(idx.at(2) == 2);
}
