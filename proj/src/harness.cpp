#include "poisonlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

namespace poisonlab {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config plumbing

namespace {

// Wrapper that consumes known keys and rejects whatever is left, so typos in
// config files fail loudly with their full path.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : rest_(j), path_(std::move(path)) {
    if (!rest_.is_object()) {
      throw ConfigError(path_.empty() ? "config must be a JSON object"
                                      : path_ + " must be a JSON object");
    }
  }

  template <class T>
  void take(const char* key, T& out) {
    auto it = rest_.find(key);
    if (it == rest_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key " + join(key) + " has the wrong type");
    }
    rest_.erase(it);
  }

  json take_section(const char* key) {
    auto it = rest_.find(key);
    if (it == rest_.end()) return json::object();
    json out = *it;
    rest_.erase(it);
    return out;
  }

  void finish() const {
    if (!rest_.empty()) {
      throw ConfigError("unknown config key: " + join(rest_.begin().key()));
    }
  }

  std::string join(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  json rest_;
  std::string path_;
};

}  // namespace

HeadConfig ExperimentConfig::head_config() const {
  HeadConfig cfg = head;
  if (head_variant == "NN1") {
    cfg.layers = 1;
    cfg.dropout = 0.0;
  } else if (head_variant == "NN2") {
    cfg.layers = 2;
  } else {
    throw ConfigError("head.variant must be NN1 or NN2, got '" + head_variant + "'");
  }
  return cfg;
}

void ExperimentConfig::validate() const {
  if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes must be >= 2");
  if (dataset.per_class < 10) throw ConfigError("dataset.per_class must be >= 10");
  if (dataset.input_dim < 8) throw ConfigError("dataset.input_dim must be >= 8");
  if (!(dataset.scale > 0.0)) throw ConfigError("dataset.scale must be positive");
  if (dataset.noise_level < 0.0) throw ConfigError("dataset.noise_level must be >= 0");
  if (dataset.aux_num_classes < 2) throw ConfigError("dataset.aux_num_classes must be >= 2");
  if (dataset.aux_per_class < 10) throw ConfigError("dataset.aux_per_class must be >= 10");
  (void)head_config();  // validates the variant
  mu_kind_from_name(attack.mu);
  collision_mode_from_name(attack.mode);
  if (attack.beta < 0.0) throw ConfigError("attack.beta must be >= 0");
  if (attack.max_iters < 1) throw ConfigError("attack.max_iters must be >= 1");
  if (!(attack.lr > 0.0)) throw ConfigError("attack.lr must be positive");
  if (al.budget < 1) throw ConfigError("al.budget must be >= 1");
  if (al.retrain_every < 1) throw ConfigError("al.retrain_every must be >= 1");
  if (al.seed_set_size < static_cast<std::size_t>(dataset.num_classes)) {
    throw ConfigError("al.seed_set_size must be >= dataset.num_classes");
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (baseline_trials < 1) throw ConfigError("baseline_trials must be >= 1");
}

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["dataset"] = {{"name", cfg.dataset.name},
                  {"num_classes", cfg.dataset.num_classes},
                  {"per_class", cfg.dataset.per_class},
                  {"input_dim", cfg.dataset.input_dim},
                  {"scale", cfg.dataset.scale},
                  {"noise_level", cfg.dataset.noise_level},
                  {"aux_per_class", cfg.dataset.aux_per_class},
                  {"aux_num_classes", cfg.dataset.aux_num_classes}};
  j["extractor"] = {{"hidden", cfg.extractor.hidden},
                    {"feature_dim", cfg.extractor.feature_dim},
                    {"lr", cfg.extractor.lr},
                    {"max_epochs", cfg.extractor.max_epochs},
                    {"patience", cfg.extractor.patience},
                    {"batch_size", cfg.extractor.batch_size},
                    {"val_fraction", cfg.extractor.val_fraction},
                    {"plateau_halving", cfg.extractor.plateau_halving}};
  j["head"] = {{"variant", cfg.head_variant},
               {"hidden", cfg.head.hidden},
               {"dropout", cfg.head.dropout},
               {"lr", cfg.head.lr},
               {"max_epochs", cfg.head.max_epochs},
               {"patience", cfg.head.patience},
               {"batch_size", cfg.head.batch_size},
               {"val_fraction", cfg.head.val_fraction},
               {"plateau_halving", cfg.head.plateau_halving},
               {"param_cap", cfg.head.param_cap}};
  j["attack"] = {{"mu", cfg.attack.mu},
                 {"mode", cfg.attack.mode},
                 {"beta", cfg.attack.beta},
                 {"max_iters", cfg.attack.max_iters},
                 {"lr", cfg.attack.lr},
                 {"lr_adapt", cfg.attack.lr_adapt},
                 {"early_stop_tol", cfg.attack.early_stop_tol},
                 {"clip_to_scale", cfg.attack.clip_to_scale},
                 {"balance", cfg.attack.balance},
                 {"k", cfg.attack.k}};
  j["al"] = {{"budget", cfg.al.budget},
             {"seed_set_size", cfg.al.seed_set_size},
             {"retrain_every", cfg.al.retrain_every},
             {"warm_start", cfg.al.warm_start}};
  j["finetune"] = {{"lr", cfg.finetune.lr},
                   {"max_epochs", cfg.finetune.max_epochs},
                   {"patience", cfg.finetune.patience},
                   {"batch_size", cfg.finetune.batch_size},
                   {"val_fraction", cfg.finetune.val_fraction},
                   {"plateau_halving", cfg.finetune.plateau_halving}};
  j["defense"] = cfg.defense;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  j["baseline_trials"] = cfg.baseline_trials;
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  StrictObject top(j, "");

  {
    StrictObject s(top.take_section("dataset"), "dataset");
    s.take("name", cfg.dataset.name);
    s.take("num_classes", cfg.dataset.num_classes);
    s.take("per_class", cfg.dataset.per_class);
    s.take("input_dim", cfg.dataset.input_dim);
    s.take("scale", cfg.dataset.scale);
    s.take("noise_level", cfg.dataset.noise_level);
    s.take("aux_per_class", cfg.dataset.aux_per_class);
    s.take("aux_num_classes", cfg.dataset.aux_num_classes);
    s.finish();
  }
  {
    StrictObject s(top.take_section("extractor"), "extractor");
    s.take("hidden", cfg.extractor.hidden);
    s.take("feature_dim", cfg.extractor.feature_dim);
    s.take("lr", cfg.extractor.lr);
    s.take("max_epochs", cfg.extractor.max_epochs);
    s.take("patience", cfg.extractor.patience);
    s.take("batch_size", cfg.extractor.batch_size);
    s.take("val_fraction", cfg.extractor.val_fraction);
    s.take("plateau_halving", cfg.extractor.plateau_halving);
    s.finish();
  }
  {
    StrictObject s(top.take_section("head"), "head");
    s.take("variant", cfg.head_variant);
    s.take("hidden", cfg.head.hidden);
    s.take("dropout", cfg.head.dropout);
    s.take("lr", cfg.head.lr);
    s.take("max_epochs", cfg.head.max_epochs);
    s.take("patience", cfg.head.patience);
    s.take("batch_size", cfg.head.batch_size);
    s.take("val_fraction", cfg.head.val_fraction);
    s.take("plateau_halving", cfg.head.plateau_halving);
    s.take("param_cap", cfg.head.param_cap);
    s.finish();
  }
  {
    StrictObject s(top.take_section("attack"), "attack");
    s.take("mu", cfg.attack.mu);
    s.take("mode", cfg.attack.mode);
    s.take("beta", cfg.attack.beta);
    s.take("max_iters", cfg.attack.max_iters);
    s.take("lr", cfg.attack.lr);
    s.take("lr_adapt", cfg.attack.lr_adapt);
    s.take("early_stop_tol", cfg.attack.early_stop_tol);
    s.take("clip_to_scale", cfg.attack.clip_to_scale);
    s.take("balance", cfg.attack.balance);
    s.take("k", cfg.attack.k);
    s.finish();
  }
  {
    StrictObject s(top.take_section("al"), "al");
    s.take("budget", cfg.al.budget);
    s.take("seed_set_size", cfg.al.seed_set_size);
    s.take("retrain_every", cfg.al.retrain_every);
    s.take("warm_start", cfg.al.warm_start);
    s.finish();
  }
  {
    StrictObject s(top.take_section("finetune"), "finetune");
    s.take("lr", cfg.finetune.lr);
    s.take("max_epochs", cfg.finetune.max_epochs);
    s.take("patience", cfg.finetune.patience);
    s.take("batch_size", cfg.finetune.batch_size);
    s.take("val_fraction", cfg.finetune.val_fraction);
    s.take("plateau_halving", cfg.finetune.plateau_halving);
    s.finish();
  }
  top.take("defense", cfg.defense);
  top.take("seed", cfg.seed);
  top.take("workers", cfg.workers);
  top.take("baseline_trials", cfg.baseline_trials);
  top.finish();

  cfg.validate();
  return cfg;
}

void apply_override(json& j, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like section.key=value, got '" + kv + "'");
  }
  std::string path = kv.substr(0, eq);
  const std::string value = kv.substr(eq + 1);
  std::replace(path.begin(), path.end(), '.', '/');
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;  // bare strings like NN2
  j[json::json_pointer("/" + path)] = parsed;
}

// ---------------------------------------------------------------------------
// Report serialization

json report_to_json(const ExperimentReport& r) {
  json j;
  j["schema"] = "poisonlab-report-1";
  j["dataset"] = r.dataset;
  j["model"] = r.model;
  j["accuracy_clean"] = r.accuracy_clean;
  j["accuracy_poisoned"] = r.accuracy_poisoned;
  j["loss_adv"] = r.loss_adv;
  j["loss_initial"] = r.loss_initial;
  j["n_poison"] = r.n_poison;
  j["success_rate_poison"] = r.success_rate_poison;
  j["success_rate_random"] = r.success_rate_random;
  j["craft_time_seconds"] = r.craft_time_seconds;
  j["perturbation"] = {{"max_linf_over_scale", r.perturbation.max_linf_over_scale},
                       {"mean_linf_over_scale", r.perturbation.mean_linf_over_scale},
                       {"max_rel_l2", r.perturbation.max_rel_l2},
                       {"mean_rel_l2", r.perturbation.mean_rel_l2},
                       {"max_collision_distance", r.perturbation.max_collision_distance},
                       {"median_clean_distance", r.perturbation.median_clean_distance}};
  j["pool_size"] = r.pool_size;
  j["budget"] = r.budget;
  j["pca"] = {{"poison_bbox_area", r.poison_bbox_area}, {"clean_bbox_area", r.clean_bbox_area}};
  j["defense"] = {{"ran", r.defense_ran}, {"accuracy_defended", r.accuracy_defended}};
  j["config"] = r.config_echo;
  json seeds;
  seeds["master"] = r.master_seed;
  for (const auto& [name, value] : r.seeds) seeds[name] = value;
  j["seeds"] = seeds;
  return j;
}

ExperimentReport report_from_json(const json& j) {
  if (j.value("schema", "") != "poisonlab-report-1") {
    throw IoError("report: unknown or missing schema");
  }
  ExperimentReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.model = j.at("model").get<std::string>();
  r.accuracy_clean = j.at("accuracy_clean").get<double>();
  r.accuracy_poisoned = j.at("accuracy_poisoned").get<double>();
  r.loss_adv = j.at("loss_adv").get<double>();
  r.loss_initial = j.at("loss_initial").get<double>();
  r.n_poison = j.at("n_poison").get<std::size_t>();
  r.success_rate_poison = j.at("success_rate_poison").get<double>();
  r.success_rate_random = j.at("success_rate_random").get<double>();
  r.craft_time_seconds = j.at("craft_time_seconds").get<double>();
  const auto& p = j.at("perturbation");
  r.perturbation.max_linf_over_scale = p.at("max_linf_over_scale").get<double>();
  r.perturbation.mean_linf_over_scale = p.at("mean_linf_over_scale").get<double>();
  r.perturbation.max_rel_l2 = p.at("max_rel_l2").get<double>();
  r.perturbation.mean_rel_l2 = p.at("mean_rel_l2").get<double>();
  r.perturbation.max_collision_distance = p.at("max_collision_distance").get<double>();
  r.perturbation.median_clean_distance = p.at("median_clean_distance").get<double>();
  r.pool_size = j.at("pool_size").get<std::size_t>();
  r.budget = j.at("budget").get<std::size_t>();
  r.poison_bbox_area = j.at("pca").at("poison_bbox_area").get<double>();
  r.clean_bbox_area = j.at("pca").at("clean_bbox_area").get<double>();
  r.defense_ran = j.at("defense").at("ran").get<bool>();
  r.accuracy_defended = j.at("defense").at("accuracy_defended").get<double>();
  r.config_echo = j.at("config");
  const auto& seeds = j.at("seeds");
  r.master_seed = seeds.at("master").get<std::uint64_t>();
  for (const auto& [name, value] : seeds.items()) {
    if (name != "master") r.seeds[name] = value.get<std::uint64_t>();
  }
  return r;
}

json strip_timing(const json& j) {
  if (j.is_object()) {
    json out = json::object();
    for (const auto& [key, value] : j.items()) {
      if (key.find("seconds") != std::string::npos) continue;
      out[key] = strip_timing(value);
    }
    return out;
  }
  if (j.is_array()) {
    json out = json::array();
    for (const auto& value : j) out.push_back(strip_timing(value));
    return out;
  }
  return j;
}

std::string report_csv_header() {
  return "dataset,model,accuracy_clean,accuracy_poisoned,loss_adv,loss_initial,n_poison,"
         "success_rate_poison,success_rate_random,craft_time_seconds";
}

std::string report_csv_row(const ExperimentReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), "%s,%s,%.6g,%.6g,%.6g,%.6g,%zu,%.6g,%.6g,%.6g",
                r.dataset.c_str(), r.model.c_str(), r.accuracy_clean, r.accuracy_poisoned,
                r.loss_adv, r.loss_initial, r.n_poison, r.success_rate_poison,
                r.success_rate_random, r.craft_time_seconds);
  return buf;
}

// ---------------------------------------------------------------------------
// Metrics

double poison_success_rate(const std::vector<QueryRecord>& trace, std::size_t k) {
  if (k == 0) {
    throw ConfigError("poison_success_rate: undefined for k = 0");
  }
  if (trace.empty()) {
    throw DataError("poison_success_rate: empty trace");
  }
  std::size_t hits = 0;
  for (const auto& r : trace) {
    if (r.was_poison) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(std::min(k, trace.size()));
}

BaselineEstimate random_baseline_detailed(std::size_t pool_size, std::size_t k,
                                          std::size_t budget, std::size_t trials,
                                          std::uint64_t seed) {
  if (k == 0 || k > pool_size) {
    throw ConfigError("random_baseline: need 0 < k <= pool_size");
  }
  if (budget > pool_size) {
    throw ConfigError("random_baseline: budget exceeds pool_size");
  }
  if (trials == 0) {
    throw ConfigError("random_baseline: trials must be >= 1");
  }
  Rng rng(seed);
  std::vector<std::size_t> idx(pool_size);
  std::vector<double> fractions(trials);
  for (std::size_t t = 0; t < trials; ++t) {
    std::iota(idx.begin(), idx.end(), 0);
    std::size_t hits = 0;
    // Partial Fisher-Yates: the first `budget` slots are a uniform draw
    // without replacement; indices below k stand for the poisons.
    for (std::size_t i = 0; i < budget; ++i) {
      const std::size_t j = i + rng.uniform_index(pool_size - i);
      std::swap(idx[i], idx[j]);
      if (idx[i] < k) ++hits;
    }
    fractions[t] = static_cast<double>(hits) / static_cast<double>(k);
  }
  BaselineEstimate est;
  est.trials = trials;
  est.mean = std::accumulate(fractions.begin(), fractions.end(), 0.0) /
             static_cast<double>(trials);
  double ss = 0.0;
  for (double fr : fractions) ss += (fr - est.mean) * (fr - est.mean);
  est.std_error =
      trials > 1 ? std::sqrt(ss / static_cast<double>(trials - 1)) /
                       std::sqrt(static_cast<double>(trials))
                 : 0.0;
  return est;
}

double random_baseline(std::size_t pool_size, std::size_t k, std::size_t budget,
                       std::size_t trials, std::uint64_t seed) {
  return random_baseline_detailed(pool_size, k, budget, trials, seed).mean;
}

// ---------------------------------------------------------------------------
// PCA

namespace {

Vec mat_vec(const Matrix& A, const Vec& v) {
  Vec out(A.rows, 0.0);
  for (std::size_t i = 0; i < A.rows; ++i) {
    const double* row = A.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < A.cols; ++j) s += row[j] * v[j];
    out[i] = s;
  }
  return out;
}

void fix_sign(Vec& v) {
  std::size_t arg = 0;
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
  }
  if (v[arg] < 0.0) {
    for (double& x : v) x = -x;
  }
}

// Dominant eigenvector of the symmetric matrix C by power iteration, started
// from the coordinate axis with the largest diagonal entry.
Vec power_iterate(const Matrix& C) {
  std::size_t start = 0;
  for (std::size_t j = 1; j < C.cols; ++j) {
    if (C(j, j) > C(start, start)) start = j;
  }
  Vec v(C.cols, 0.0);
  v[start] = 1.0;
  for (int it = 0; it < 20000; ++it) {
    Vec w = mat_vec(C, v);
    const double n = l2_norm(w);
    if (n < 1e-300) break;  // operator annihilated the iterate; keep v
    for (double& x : w) x /= n;
    double diff_p = 0.0, diff_m = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      diff_p += (w[j] - v[j]) * (w[j] - v[j]);
      diff_m += (w[j] + v[j]) * (w[j] + v[j]);
    }
    v = std::move(w);
    if (std::min(diff_p, diff_m) < 1e-26) break;
  }
  return v;
}

}  // namespace

PcaProjection pca_project(const Matrix& features, const std::vector<std::uint8_t>& flags) {
  const std::size_t n = features.rows;
  const std::size_t d = features.cols;
  if (n < 3) {
    throw DataError("pca_project: need at least 3 rows");
  }
  if (flags.size() != n) {
    throw ShapeError("pca_project: flag count does not match rows");
  }

  Matrix Xc = features;
  Vec mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = features.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double* row = Xc.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] -= mean[j];
  }

  Matrix C = matmul_at_b(Xc, Xc);
  for (double& v : C.data) v /= static_cast<double>(n - 1);
  double total_var = 0.0;
  for (std::size_t j = 0; j < d; ++j) total_var += C(j, j);
  if (!(total_var > 1e-18)) {
    throw NumericError("pca_project: degenerate (zero-variance) features");
  }

  Vec v1 = power_iterate(C);
  double lambda1 = dot(v1, mat_vec(C, v1));

  // Deflate and repeat for the second axis.
  Matrix C2 = C;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) C2(i, j) -= lambda1 * v1[i] * v1[j];
  }
  double resid = 0.0;
  for (std::size_t j = 0; j < d; ++j) resid = std::max(resid, std::abs(C2(j, j)));

  Vec v2;
  if (resid <= 1e-12 * total_var) {
    // All remaining variance is numerically zero: pick a deterministic unit
    // vector orthogonal to v1.
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j) {
      if (std::abs(v1[j]) < std::abs(v1[arg])) arg = j;
    }
    v2.assign(d, 0.0);
    v2[arg] = 1.0;
  } else {
    v2 = power_iterate(C2);
  }
  // Gram-Schmidt against v1 for strict orthonormality.
  const double proj = dot(v2, v1);
  for (std::size_t j = 0; j < d; ++j) v2[j] -= proj * v1[j];
  const double n2 = l2_norm(v2);
  if (n2 < 1e-12) {
    throw NumericError("pca_project: failed to produce a second orthogonal axis");
  }
  for (double& x : v2) x /= n2;
  double lambda2 = dot(v2, mat_vec(C, v2));
  lambda2 = std::clamp(lambda2, 0.0, lambda1);

  fix_sign(v1);
  fix_sign(v2);

  PcaProjection proj_out;
  proj_out.axes = Matrix(2, d);
  std::copy(v1.begin(), v1.end(), proj_out.axes.row(0));
  std::copy(v2.begin(), v2.end(), proj_out.axes.row(1));
  proj_out.coords = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = Xc.row(i);
    double c1 = 0.0, c2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      c1 += row[j] * v1[j];
      c2 += row[j] * v2[j];
    }
    proj_out.coords(i, 0) = c1;
    proj_out.coords(i, 1) = c2;
  }
  proj_out.is_poison = flags;
  proj_out.explained = {std::clamp(lambda1 / total_var, 0.0, 1.0),
                        std::clamp(lambda2 / total_var, 0.0, 1.0)};
  return proj_out;
}

std::string pca_to_csv(const PcaProjection& proj, const std::vector<int>& labels) {
  if (labels.size() != proj.coords.rows) {
    throw ShapeError("pca_to_csv: label count mismatch");
  }
  std::string out = "pc1,pc2,is_poison,label\n";
  char buf[128];
  for (std::size_t i = 0; i < proj.coords.rows; ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%d,%d\n", proj.coords(i, 0), proj.coords(i, 1),
                  proj.is_poison[i] ? 1 : 0, labels[i]);
    out += buf;
  }
  return out;
}

double evaluate_accuracy(const FeatureExtractor& f, const DenseHead& g,
                         const std::vector<const Instance*>& instances) {
  if (instances.empty()) {
    throw DataError("evaluate_accuracy: empty instance set");
  }
  Matrix X(instances.size(), f.input_dim());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    std::copy(instances[i]->x.begin(), instances[i]->x.end(), X.row(i));
  }
  Matrix Z = extract_features_batch(f, X);
  std::size_t correct = 0;
  Vec feat(Z.cols);
  for (std::size_t i = 0; i < Z.rows; ++i) {
    std::copy(Z.row(i), Z.row(i) + Z.cols, feat.begin());
    if (predict_features(g, feat).cls == instances[i]->label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(instances.size());
}

// ---------------------------------------------------------------------------
// Experiment orchestration

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  if (v.size() % 2 == 1) return v[mid];
  return 0.5 * (v[mid - 1] + v[mid]);
}

struct Bbox {
  double area = 0.0;
  bool any = false;
};

Bbox bbox_area(const Matrix& coords, const std::vector<std::uint8_t>& flags, bool poison) {
  Bbox b;
  double min1 = 0, max1 = 0, min2 = 0, max2 = 0;
  for (std::size_t i = 0; i < coords.rows; ++i) {
    if ((flags[i] != 0) != poison) continue;
    const double c1 = coords(i, 0);
    const double c2 = coords(i, 1);
    if (!b.any) {
      min1 = max1 = c1;
      min2 = max2 = c2;
      b.any = true;
    } else {
      min1 = std::min(min1, c1);
      max1 = std::max(max1, c1);
      min2 = std::min(min2, c2);
      max2 = std::max(max2, c2);
    }
  }
  if (b.any) b.area = (max1 - min1) * (max2 - min2);
  return b;
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const std::uint64_t seed_data = derive_seed(cfg.seed, "data");
  const std::uint64_t seed_aux = derive_seed(cfg.seed, "aux-data");
  const std::uint64_t seed_split = derive_seed(cfg.seed, "split");
  const std::uint64_t seed_pretrain = derive_seed(cfg.seed, "pretrain");
  const std::uint64_t seed_craft = derive_seed(cfg.seed, "craft");
  const std::uint64_t seed_al = derive_seed(cfg.seed, "al");
  const std::uint64_t seed_baseline = derive_seed(cfg.seed, "baseline");
  const std::uint64_t seed_defense = derive_seed(cfg.seed, "defense");

  Dataset main_ds = generate_synthetic(cfg.dataset.per_class, cfg.dataset.num_classes,
                                    cfg.dataset.input_dim, cfg.dataset.scale, seed_data,
                                    cfg.dataset.noise_level);
  split_dataset(main_ds, seed_split);
  // Auxiliary pretraining task: fresh geometry, labels offset past the main
  // task's so the two label spaces cannot be confused.
  Dataset aux = generate_synthetic(cfg.dataset.aux_per_class, cfg.dataset.aux_num_classes,
                                   cfg.dataset.input_dim, cfg.dataset.scale, seed_aux,
                                   cfg.dataset.noise_level, cfg.dataset.num_classes);

  ExperimentOutcome out;
  out.extractor = pretrain_extractor(aux, cfg.extractor, seed_pretrain);

  // Clean-feature geometry, used for mu = clean_mean and for the collision
  // tightness scale.
  const std::vector<const Instance*> clean_train = main_ds.with_tag(Split::train);
  Matrix clean_X(clean_train.size(), main_ds.input_dim);
  for (std::size_t i = 0; i < clean_train.size(); ++i) {
    std::copy(clean_train[i]->x.begin(), clean_train[i]->x.end(), clean_X.row(i));
  }
  Matrix clean_features = extract_features_batch(out.extractor, clean_X);

  PoisonConfig pcfg;
  pcfg.mu = make_mu(mu_kind_from_name(cfg.attack.mu), out.extractor.feature_dim(),
                    &clean_features);
  pcfg.beta = cfg.attack.beta;
  pcfg.max_iters = cfg.attack.max_iters;
  pcfg.lr = cfg.attack.lr;
  pcfg.lr_adapt = cfg.attack.lr_adapt;
  pcfg.early_stop_tol = cfg.attack.early_stop_tol;
  pcfg.clip_to_scale = cfg.attack.clip_to_scale;
  pcfg.mode = collision_mode_from_name(cfg.attack.mode);

  Dataset poisoned = main_ds;
  out.batch = craft_poison_set(out.extractor, poisoned, pcfg, cfg.attack.k, seed_craft,
                               cfg.attack.balance, cfg.workers);

  const HeadConfig head_cfg = cfg.head_config();
  const Oracle oracle_clean(main_ds);
  const Oracle oracle_poisoned(poisoned);

  // Clean and poisoned campaigns share every seed; only the pool differs.
  ALState clean_state = al_loop(out.extractor, main_ds, oracle_clean, cfg.al.budget,
                                cfg.al.seed_set_size, cfg.al.retrain_every, head_cfg, seed_al,
                                cfg.al.warm_start);
  ALState pois_state = al_loop(out.extractor, poisoned, oracle_poisoned, cfg.al.budget,
                               cfg.al.seed_set_size, cfg.al.retrain_every, head_cfg, seed_al,
                               cfg.al.warm_start);

  const std::vector<const Instance*> test2 = main_ds.with_tag(Split::test2);

  ExperimentReport& rep = out.report;
  rep.dataset = cfg.dataset.name;
  rep.model = cfg.head_variant;
  rep.accuracy_clean = evaluate_accuracy(out.extractor, clean_state.head, test2);
  rep.accuracy_poisoned = evaluate_accuracy(out.extractor, pois_state.head, test2);
  rep.loss_adv = out.batch.summed_final_objective();
  rep.loss_initial = out.batch.summed_initial_objective();
  rep.n_poison = out.batch.records.size();
  rep.budget = cfg.al.budget;
  rep.pool_size = poisoned.with_tag(Split::train).size() - cfg.al.seed_set_size;
  rep.craft_time_seconds = out.batch.mean_wall_time_seconds();
  rep.master_seed = cfg.seed;
  rep.config_echo = config_to_json(cfg);
  rep.seeds = {{"data", seed_data},     {"aux-data", seed_aux},   {"split", seed_split},
               {"pretrain", seed_pretrain}, {"craft", seed_craft}, {"al", seed_al},
               {"baseline", seed_baseline}, {"defense", seed_defense}};

  if (rep.n_poison > 0) {
    rep.success_rate_poison = poison_success_rate(pois_state.query_trace, rep.n_poison);
    rep.success_rate_random = random_baseline(rep.pool_size, rep.n_poison, cfg.al.budget,
                                              cfg.baseline_trials, seed_baseline);
    double sum_linf = 0.0, sum_rel = 0.0;
    for (const auto& r : out.batch.records) {
      rep.perturbation.max_linf_over_scale =
          std::max(rep.perturbation.max_linf_over_scale, r.delta_linf_over_scale);
      rep.perturbation.max_rel_l2 = std::max(rep.perturbation.max_rel_l2, r.delta_l2_over_base_l2);
      rep.perturbation.max_collision_distance =
          std::max(rep.perturbation.max_collision_distance, r.final_collision_distance);
      sum_linf += r.delta_linf_over_scale;
      sum_rel += r.delta_l2_over_base_l2;
    }
    rep.perturbation.mean_linf_over_scale = sum_linf / static_cast<double>(rep.n_poison);
    rep.perturbation.mean_rel_l2 = sum_rel / static_cast<double>(rep.n_poison);
  }
  {
    std::vector<double> dists(clean_features.rows);
    Vec u(clean_features.cols);
    for (std::size_t i = 0; i < clean_features.rows; ++i) {
      const double* row = clean_features.row(i);
      for (std::size_t j = 0; j < clean_features.cols; ++j) u[j] = row[j] - pcfg.mu[j];
      dists[i] = l2_norm(u);
    }
    rep.perturbation.median_clean_distance = median(std::move(dists));
  }

  // PCA of the poisoned pool's features (Figure-2 analog).
  {
    const std::vector<const Instance*> pool = poisoned.with_tag(Split::train);
    Matrix X(pool.size(), poisoned.input_dim);
    std::vector<std::uint8_t> flags(pool.size());
    out.pca_labels.resize(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
      std::copy(pool[i]->x.begin(), pool[i]->x.end(), X.row(i));
      flags[i] = pool[i]->is_poison ? 1 : 0;
      out.pca_labels[i] = pool[i]->label;
    }
    Matrix feats = extract_features_batch(out.extractor, X);
    out.pca = pca_project(feats, flags);
    rep.clean_bbox_area = bbox_area(out.pca.coords, flags, false).area;
    rep.poison_bbox_area = bbox_area(out.pca.coords, flags, true).area;
  }

  if (cfg.defense) {
    std::vector<const Instance*> labeled;
    std::vector<int> labels;
    labeled.reserve(pois_state.labeled_ids.size());
    for (std::int64_t id : pois_state.labeled_ids) {
      const Instance* inst = poisoned.find(id);
      if (!inst) throw DataError("run_experiment: labeled id missing from dataset");
      labeled.push_back(inst);
      labels.push_back(oracle_poisoned.label_of(id));
    }
    auto [f2, g2] = joint_finetune(out.extractor, pois_state.head, labeled, labels, cfg.finetune,
                                   seed_defense);
    rep.defense_ran = true;
    rep.accuracy_defended = evaluate_accuracy(f2, g2, test2);
  }

  out.clean_trace = std::move(clean_state.query_trace);
  out.poisoned_trace = std::move(pois_state.query_trace);
  out.head_clean = std::move(clean_state.head);
  out.head_poisoned = std::move(pois_state.head);
  return out;
}

std::pair<ExperimentReport, ExperimentReport> run_defense(const ExperimentConfig& cfg) {
  ExperimentConfig with_defense = cfg;
  with_defense.defense = true;
  ExperimentOutcome outcome = run_experiment(with_defense);
  ExperimentReport frozen = outcome.report;
  ExperimentReport unfrozen = outcome.report;
  unfrozen.model += "-unfrozen";
  unfrozen.accuracy_poisoned = outcome.report.accuracy_defended;
  return {std::move(frozen), std::move(unfrozen)};
}

}  // namespace poisonlab
