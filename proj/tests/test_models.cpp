#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "poisonlab/datasets.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/models.hpp"
#include "test_support.hpp"

using namespace poisonlab;
using testsupport::TempDir;

namespace {

// Flatten all stack parameters into one vector (W row-major then b, layer by
// layer) so grad_check can wiggle them.
Vec flatten_params(const std::vector<DenseLayer>& layers) {
  Vec out;
  for (const auto& l : layers) {
    out.insert(out.end(), l.W.data.begin(), l.W.data.end());
    out.insert(out.end(), l.b.begin(), l.b.end());
  }
  return out;
}

std::vector<DenseLayer> unflatten_params(const std::vector<DenseLayer>& shape, const Vec& flat) {
  std::vector<DenseLayer> layers = shape;
  std::size_t k = 0;
  for (auto& l : layers) {
    for (auto& v : l.W.data) v = flat[k++];
    for (auto& v : l.b) v = flat[k++];
  }
  return layers;
}

std::vector<DenseLayer> small_stack(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<DenseLayer> layers;
  layers.push_back(testsupport::random_layer(6, 5, rng));
  layers.push_back(testsupport::random_layer(5, 4, rng));
  layers.push_back(testsupport::random_layer(4, 3, rng));
  return layers;
}

Matrix random_batch(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(n, d);
  for (auto& v : x.data) v = rng.normal();
  return x;
}

Vec row_vec(const Matrix& m, std::size_t r) {
  return Vec(m.row(r), m.row(r) + m.cols);
}

// Features in four well-separated clusters, one per class.
std::pair<Matrix, std::vector<int>> cluster_features(std::size_t per_class, int m,
                                                     std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Matrix x(per_class * static_cast<std::size_t>(m), dim);
  std::vector<int> labels(x.rows);
  std::size_t row = 0;
  for (int c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < per_class; ++i, ++row) {
      labels[row] = c;
      for (std::size_t j = 0; j < dim; ++j)
        x(row, j) = (j % static_cast<std::size_t>(m) == static_cast<std::size_t>(c) ? 3.0 : 0.0) +
                    0.3 * rng.normal();
    }
  }
  return {x, labels};
}

}  // namespace

TEST_CASE("stack parameter gradients pass grad_check") {
  auto layers = small_stack(101);
  Matrix x = random_batch(4, 6, 102);
  std::vector<int> labels = {0, 2, 1, 1};

  std::vector<DenseLayer> grads;
  stack_loss_and_grads(layers, x, labels, &grads);

  auto loss_fn = [&](const Vec& flat) {
    auto l2 = unflatten_params(layers, flat);
    return stack_loss_and_grads(l2, x, labels, nullptr);
  };
  const double err = grad_check(loss_fn, flatten_params(layers), flatten_params(grads), 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("stack input gradients pass grad_check") {
  auto layers = small_stack(103);
  Matrix x = random_batch(3, 6, 104);
  std::vector<int> labels = {2, 0, 1};

  std::vector<DenseLayer> grads;
  Matrix input_grad(3, 6);
  stack_loss_and_grads(layers, x, labels, &grads, &input_grad);

  auto loss_fn = [&](const Vec& flat) {
    Matrix x2 = x;
    x2.data = flat;
    return stack_loss_and_grads(layers, x2, labels, nullptr);
  };
  const double err = grad_check(loss_fn, x.data, input_grad.data, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("stack gradients with fixed dropout masks pass grad_check") {
  auto layers = small_stack(105);
  Matrix x = random_batch(3, 6, 106);
  std::vector<int> labels = {1, 1, 0};

  // Fixed inverted-dropout masks: one per hidden activation (two here), with
  // keep probability 0.5 -> surviving units scaled by 2.
  Rng rng(107);
  std::vector<Matrix> masks(2);
  masks[0] = Matrix(3, 5);
  masks[1] = Matrix(3, 4);
  for (auto& m : masks)
    for (auto& v : m.data) v = rng.uniform() < 0.5 ? 0.0 : 2.0;

  std::vector<DenseLayer> grads;
  Matrix input_grad(3, 6);
  const double base = stack_loss_and_grads(layers, x, labels, &grads, &input_grad, &masks);
  CHECK(std::isfinite(base));

  auto loss_fn = [&](const Vec& flat) {
    auto l2 = unflatten_params(layers, flat);
    return stack_loss_and_grads(l2, x, labels, nullptr, nullptr, &masks);
  };
  CHECK(grad_check(loss_fn, flatten_params(layers), flatten_params(grads), 1e-5) < 1e-6);

  auto loss_fn_x = [&](const Vec& flat) {
    Matrix x2 = x;
    x2.data = flat;
    return stack_loss_and_grads(layers, x2, labels, nullptr, nullptr, &masks);
  };
  CHECK(grad_check(loss_fn_x, x.data, input_grad.data, 1e-5) < 1e-6);
}

TEST_CASE("stack rejects inconsistent shapes and labels") {
  auto layers = small_stack(108);
  Matrix x = random_batch(3, 6, 109);
  std::vector<int> short_labels = {0, 1};
  CHECK_THROWS_AS(stack_loss_and_grads(layers, x, short_labels, nullptr), ShapeError);
  std::vector<int> bad_labels = {0, 1, 7};  // out of range for 3 logits
  CHECK_THROWS_AS(stack_loss_and_grads(layers, x, bad_labels, nullptr), DataError);
  Matrix wrong_width = random_batch(3, 5, 110);
  std::vector<int> labels = {0, 1, 2};
  CHECK_THROWS_AS(stack_loss_and_grads(layers, wrong_width, labels, nullptr), ShapeError);
}

TEST_CASE("extractor forward matches a hand-computed example") {
  // One layer, input_scale 2: f(x) = relu(W^T (x/2) + b).
  FeatureExtractor f;
  f.input_scale = 2.0;
  DenseLayer l;
  l.W = Matrix(2, 2);
  l.W(0, 0) = 1.0;  // feature 0 <- x0
  l.W(1, 0) = 1.0;  // feature 0 <- x1
  l.W(0, 1) = -1.0;
  l.W(1, 1) = 0.0;
  l.b = {0.5, -0.25};
  f.layers.push_back(l);

  Vec out = extractor_forward(f, {2.0, 4.0});
  // scaled input = {1, 2}; pre = {1 + 2 + 0.5, -1 - 0.25} = {3.5, -1.25}
  REQUIRE(out.size() == 2);
  CHECK(out[0] == doctest::Approx(3.5));
  CHECK(out[1] == 0.0);  // clamped by relu

  ExtractorTrace trace;
  extractor_forward(f, {2.0, 4.0}, &trace);
  REQUIRE(trace.pre.size() == 1);
  CHECK(trace.pre[0][0] == doctest::Approx(3.5));
  CHECK(trace.pre[0][1] == doctest::Approx(-1.25));
  CHECK(trace.scaled_input[0] == doctest::Approx(1.0));
  CHECK(trace.scaled_input[1] == doctest::Approx(2.0));
}

TEST_CASE("extractor input gradient passes grad_check away from kinks") {
  FeatureExtractor f = testsupport::random_extractor(6, {5, 4}, 1.5, 200);
  Rng rng(201);
  int checked = 0;
  while (checked < 20) {
    Vec x(6);
    for (auto& v : x) v = rng.normal();
    if (testsupport::min_preactivation_margin(f, x) < 1e-3) continue;  // too close to a kink
    Vec cot(4);
    for (auto& v : cot) v = rng.normal();

    ExtractorTrace trace;
    Vec feat = extractor_forward(f, x, &trace);
    REQUIRE(feat.size() == 4);
    Vec g = extractor_input_grad(f, trace, cot);

    auto loss_fn = [&](const Vec& xx) {
      Vec ff = extractor_forward(f, xx);
      return dot(ff, cot);
    };
    CHECK(grad_check(loss_fn, x, g, 1e-6) < 1e-6);
    ++checked;
  }
}

TEST_CASE("batch feature extraction equals per-instance extraction bitwise") {
  FeatureExtractor f = testsupport::random_extractor(8, {6, 5}, 2.0, 300);
  Matrix x = random_batch(7, 8, 301);
  Matrix batch = extract_features_batch(f, x);
  REQUIRE(batch.rows == 7);
  REQUIRE(batch.cols == 5);
  for (std::size_t i = 0; i < 7; ++i) {
    Vec single = extract_features(f, row_vec(x, i));
    for (std::size_t j = 0; j < 5; ++j) CHECK(batch(i, j) == single[j]);
  }
}

TEST_CASE("pretrain_extractor learns the auxiliary task deterministically") {
  Dataset aux = generate_synthetic(30, 4, 16, 10.0, 500, 0.4, 4);
  ExtractorConfig cfg;
  cfg.hidden = {24};
  cfg.feature_dim = 8;
  cfg.max_epochs = 40;

  FeatureExtractor f1 = pretrain_extractor(aux, cfg, 42);
  CHECK(f1.frozen);
  CHECK(f1.input_dim() == 16);
  CHECK(f1.feature_dim() == 8);
  CHECK(f1.input_scale == 10.0);
  CHECK(f1.aux_val_accuracy > 0.8);
  CHECK(f1.aux_val_accuracy <= 1.0);

  FeatureExtractor f2 = pretrain_extractor(aux, cfg, 42);
  CHECK(f1.weights_hash() == f2.weights_hash());
  FeatureExtractor f3 = pretrain_extractor(aux, cfg, 43);
  CHECK(f1.weights_hash() != f3.weights_hash());
}

TEST_CASE("pretrain_extractor rejects single-class data") {
  Dataset aux = generate_synthetic(30, 4, 16, 10.0, 500, 0.4, 4);
  for (auto& inst : aux.instances) inst.label = 4;  // collapse to one class
  ExtractorConfig cfg;
  cfg.hidden = {24};
  cfg.feature_dim = 8;
  CHECK_THROWS_AS(pretrain_extractor(aux, cfg, 1), DataError);
}

TEST_CASE("train_head_on_features fits separable clusters and is deterministic") {
  auto [x, labels] = cluster_features(20, 4, 8, 600);
  HeadConfig cfg;
  cfg.layers = 1;
  cfg.max_epochs = 150;

  TrainLog log;
  DenseHead g1 = train_head_on_features(x, labels, 4, cfg, 11, &log);
  CHECK(g1.num_classes() == 4);
  CHECK(g1.layers.size() == 1);
  CHECK(!log.epochs.empty());

  // Training accuracy via predict_features.
  std::size_t hits = 0;
  for (std::size_t i = 0; i < x.rows; ++i) {
    if (predict_features(g1, row_vec(x, i)).cls == labels[i]) ++hits;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(x.rows) > 0.9);

  DenseHead g2 = train_head_on_features(x, labels, 4, cfg, 11);
  CHECK(g1.weights_hash() == g2.weights_hash());
  DenseHead g3 = train_head_on_features(x, labels, 4, cfg, 12);
  CHECK(g1.weights_hash() != g3.weights_hash());
}

TEST_CASE("NN2 head trains with dropout and respects the parameter cap") {
  auto [x, labels] = cluster_features(20, 4, 8, 601);
  HeadConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.dropout = 0.5;
  cfg.max_epochs = 60;

  DenseHead g = train_head_on_features(x, labels, 4, cfg, 21);
  CHECK(g.layers.size() == 2);
  CHECK(g.dropout_rate == 0.5);
  CHECK(g.param_count() <= cfg.param_cap);
  CHECK(g.param_count() == 8 * 16 + 16 + 16 * 4 + 4);

  // Inference must be deterministic (dropout is a training-only device).
  Prediction p1 = predict_features(g, row_vec(x, 0));
  Prediction p2 = predict_features(g, row_vec(x, 0));
  CHECK(p1.y_pred == p2.y_pred);
  double sum = std::accumulate(p1.y_pred.begin(), p1.y_pred.end(), 0.0);
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("head config validation errors") {
  auto [x, labels] = cluster_features(10, 4, 8, 602);
  HeadConfig cfg;

  cfg.layers = 3;
  CHECK_THROWS_AS(train_head_on_features(x, labels, 4, cfg, 1), ConfigError);
  cfg.layers = 1;

  cfg.dropout = 0.6;
  CHECK_THROWS_AS(train_head_on_features(x, labels, 4, cfg, 1), ConfigError);
  cfg.dropout = 0.0;

  HeadConfig capped;
  capped.layers = 2;
  capped.hidden = 4096;  // blows the parameter budget
  CHECK_THROWS_AS(train_head_on_features(x, labels, 4, capped, 1), ConfigError);

  CHECK_THROWS_AS(train_head_on_features(x, labels, 1, cfg, 1), ConfigError);

  std::vector<int> short_labels(labels.begin(), labels.end() - 1);
  CHECK_THROWS_AS(train_head_on_features(x, short_labels, 4, cfg, 1), ShapeError);

  Matrix tiny(2, 8, 0.1);
  std::vector<int> tiny_labels = {0, 1};
  CHECK_THROWS_AS(train_head_on_features(tiny, tiny_labels, 4, cfg, 1), DataError);
}

TEST_CASE("early stopping halts before max_epochs once validation stalls") {
  // Random labels: the validation loss bottoms out quickly and the patience
  // counter must end training long before the epoch cap.
  auto [x, labels] = cluster_features(15, 4, 8, 603);
  Rng rng(604);
  for (auto& l : labels) l = static_cast<int>(rng.uniform_index(4));
  HeadConfig cfg;
  cfg.max_epochs = 4000;
  cfg.patience = 5;

  TrainLog log;
  train_head_on_features(x, labels, 4, cfg, 31, &log);
  CHECK(log.epochs.size() < cfg.max_epochs);
  CHECK(log.best_epoch < log.epochs.size());
}

TEST_CASE("train_head leaves the frozen extractor untouched") {
  Dataset ds = generate_synthetic(20, 4, 16, 10.0, 700, 0.4);
  split_dataset(ds, 1);
  FeatureExtractor f = testsupport::random_extractor(16, {12, 8}, 10.0, 701);
  const std::uint64_t before = f.weights_hash();

  auto train = ds.with_tag(Split::train);
  std::vector<const Instance*> labeled(train.begin(), train.begin() + 24);
  std::vector<int> labels;
  for (auto* inst : labeled) labels.push_back(inst->label);

  HeadConfig cfg;
  cfg.max_epochs = 30;
  DenseHead g = train_head(f, labeled, labels, 4, cfg, 41);
  CHECK(f.weights_hash() == before);
  CHECK(g.input_dim() == 8);
}

TEST_CASE("prediction breaks probability ties at the lowest class index") {
  DenseHead g;
  DenseLayer l;
  l.W = Matrix(3, 4);  // all-zero weights -> identical logits
  l.b = Vec(4, 0.0);
  g.layers.push_back(l);
  Prediction p = predict_features(g, {1.0, -2.0, 0.5});
  CHECK(p.cls == 0);
  for (double v : p.y_pred) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("continue_training_head warm-starts from the given weights") {
  auto [x, labels] = cluster_features(20, 4, 8, 604);
  HeadConfig cfg;
  cfg.max_epochs = 10;

  DenseHead fresh = train_head_on_features(x, labels, 4, cfg, 51);
  DenseHead warm = fresh;
  continue_training_head(warm, x, labels, cfg, 52);
  // Same update rule applied twice with different data order: weights moved.
  CHECK(warm.weights_hash() != fresh.weights_hash());
  CHECK(warm.num_classes() == 4);

  DenseHead warm2 = fresh;
  continue_training_head(warm2, x, labels, cfg, 52);
  CHECK(warm.weights_hash() == warm2.weights_hash());  // deterministic
}

TEST_CASE("joint_finetune unfreezes a copy and leaves the originals alone") {
  Dataset ds = generate_synthetic(25, 4, 16, 10.0, 800, 0.5);
  split_dataset(ds, 2);
  Dataset aux = generate_synthetic(25, 4, 16, 10.0, 801, 0.5, 4);

  ExtractorConfig ecfg;
  ecfg.hidden = {20};
  ecfg.feature_dim = 8;
  ecfg.max_epochs = 30;
  FeatureExtractor f = pretrain_extractor(aux, ecfg, 60);

  auto train = ds.with_tag(Split::train);
  std::vector<const Instance*> labeled(train.begin(), train.begin() + 40);
  std::vector<int> labels;
  for (auto* inst : labeled) labels.push_back(inst->label);

  HeadConfig hcfg;
  hcfg.max_epochs = 40;
  DenseHead g = train_head(f, labeled, labels, 4, hcfg, 61);

  const std::uint64_t f_hash = f.weights_hash();
  const std::uint64_t g_hash = g.weights_hash();

  FinetuneConfig fcfg;
  fcfg.max_epochs = 25;
  auto [f2, g2] = joint_finetune(f, g, labeled, labels, fcfg, 62);

  CHECK(f.weights_hash() == f_hash);  // originals untouched
  CHECK(g.weights_hash() == g_hash);
  CHECK(!f2.frozen);
  CHECK(f2.input_dim() == f.input_dim());
  CHECK(f2.weights_hash() != f_hash);  // training moved the weights

  auto [f3, g3] = joint_finetune(f, g, labeled, labels, fcfg, 62);
  CHECK(f3.weights_hash() == f2.weights_hash());  // deterministic
  CHECK(g3.weights_hash() == g2.weights_hash());
}

TEST_CASE("extractor and head checkpoints round trip bit-exactly") {
  TempDir tmp;
  FeatureExtractor f = testsupport::random_extractor(10, {8, 6}, 3.0, 900);
  f.aux_val_accuracy = 0.93;
  f.provenance_seed = 900;
  save_extractor(tmp.path() / "ext", f);
  FeatureExtractor back = load_extractor(tmp.path() / "ext");
  CHECK(back.weights_hash() == f.weights_hash());
  CHECK(back.input_scale == f.input_scale);
  CHECK(back.frozen == f.frozen);
  CHECK(back.aux_val_accuracy == f.aux_val_accuracy);
  CHECK(back.provenance_seed == f.provenance_seed);
  CHECK(back.input_dim() == 10);
  CHECK(back.feature_dim() == 6);

  DenseHead g = testsupport::random_head(6, 4, 901);
  g.dropout_rate = 0.25;
  save_head(tmp.path() / "head", g);
  DenseHead gback = load_head(tmp.path() / "head");
  CHECK(gback.weights_hash() == g.weights_hash());
  CHECK(gback.dropout_rate == 0.25);
  CHECK(gback.num_classes() == 4);

  CHECK_THROWS_AS(load_extractor(tmp.path() / "missing"), IoError);
  CHECK_THROWS_AS(load_head(tmp.path() / "missing"), IoError);
}

TEST_CASE("a 20-instance seed set beats chance on held-out data") {
  // Transfer-learning sanity at reduced scale: pretrain on the auxiliary
  // task, fit the head on 2 labels per class, measure on test1.
  Dataset ds = generate_synthetic(60, 10, 64, 127.0, 1000, 1.0);
  split_dataset(ds, 10);
  Dataset aux = generate_synthetic(30, 10, 64, 127.0, 1001, 1.0, 10);

  ExtractorConfig ecfg;
  ecfg.hidden = {48};
  ecfg.feature_dim = 24;
  ecfg.max_epochs = 40;
  FeatureExtractor f = pretrain_extractor(aux, ecfg, 70);

  std::vector<const Instance*> labeled;
  std::vector<int> labels;
  std::map<int, int> taken;
  for (const Instance* inst : ds.with_tag(Split::train)) {
    if (taken[inst->label] < 2) {
      labeled.push_back(inst);
      labels.push_back(inst->label);
      ++taken[inst->label];
    }
  }
  REQUIRE(labeled.size() == 20);

  HeadConfig hcfg;
  DenseHead g = train_head(f, labeled, labels, 10, hcfg, 71);

  std::size_t hits = 0;
  auto t1 = ds.with_tag(Split::test1);
  for (const Instance* inst : t1) {
    if (predict(f, g, inst->x).cls == inst->label) ++hits;
  }
  CHECK(static_cast<double>(hits) / static_cast<double>(t1.size()) > 0.1);
}
