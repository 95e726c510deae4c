#include "poisonlab/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <thread>

#include "json.hpp"

namespace poisonlab {

using nlohmann::json;

std::string collision_mode_name(CollisionMode m) {
  return m == CollisionMode::squared ? "squared" : "exact";
}

CollisionMode collision_mode_from_name(const std::string& name) {
  if (name == "squared") return CollisionMode::squared;
  if (name == "exact") return CollisionMode::exact;
  throw ConfigError("unknown collision mode '" + name + "' (expected squared|exact)");
}

std::string mu_kind_name(MuKind k) {
  switch (k) {
    case MuKind::zero: return "zero";
    case MuKind::one: return "one";
    case MuKind::clean_mean: return "clean_mean";
  }
  throw ConfigError("unknown mu kind");
}

MuKind mu_kind_from_name(const std::string& name) {
  if (name == "zero") return MuKind::zero;
  if (name == "one") return MuKind::one;
  if (name == "clean_mean") return MuKind::clean_mean;
  throw ConfigError("unknown mu kind '" + name + "' (expected zero|one|clean_mean)");
}

Vec make_mu(MuKind kind, std::size_t feature_dim, const Matrix* clean_features) {
  switch (kind) {
    case MuKind::zero:
      return Vec(feature_dim, 0.0);
    case MuKind::one:
      return Vec(feature_dim, 1.0);
    case MuKind::clean_mean: {
      if (!clean_features || clean_features->rows == 0 || clean_features->cols != feature_dim) {
        throw ConfigError("mu=clean_mean requires clean feature rows of the right width");
      }
      Vec mu(feature_dim, 0.0);
      for (std::size_t i = 0; i < clean_features->rows; ++i) {
        const double* row = clean_features->row(i);
        for (std::size_t j = 0; j < feature_dim; ++j) mu[j] += row[j];
      }
      for (double& v : mu) v /= static_cast<double>(clean_features->rows);
      return mu;
    }
  }
  throw ConfigError("unknown mu kind");
}

void PoisonConfig::validate(std::size_t feature_dim) const {
  if (beta < 0.0) throw ConfigError("attack.beta must be >= 0");
  if (max_iters < 1) throw ConfigError("attack.max_iters must be >= 1");
  if (mu.size() != feature_dim) {
    throw ConfigError("attack.mu length " + std::to_string(mu.size()) +
                      " does not match feature dim " + std::to_string(feature_dim));
  }
  if (!(lr > 0.0)) throw ConfigError("attack.lr must be positive");
  if (early_stop_tol < 0.0) throw ConfigError("attack.early_stop_tol must be >= 0");
  if (!(lr_floor > 0.0)) throw ConfigError("attack.lr_floor must be positive");
}

std::pair<double, Vec> collision_objective(const FeatureExtractor& f, const Vec& x,
                                           const Vec& delta, const Vec& mu, double beta,
                                           CollisionMode mode) {
  if (delta.size() != x.size()) {
    throw ShapeError("collision_objective: delta/x size mismatch");
  }
  if (mu.size() != f.feature_dim()) {
    throw ShapeError("collision_objective: mu does not match feature dim");
  }
  Vec xp(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] + delta[i];

  ExtractorTrace trace;
  Vec feat = extractor_forward(f, xp, &trace);
  Vec u(feat.size());
  for (std::size_t j = 0; j < feat.size(); ++j) u[j] = feat[j] - mu[j];

  double objective = 0.0;
  Vec grad(x.size(), 0.0);
  constexpr double kTiny = 1e-12;

  if (mode == CollisionMode::squared) {
    objective = dot(u, u) + beta * dot(delta, delta);
    Vec cot(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) cot[j] = 2.0 * u[j];
    grad = extractor_input_grad(f, trace, cot);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += 2.0 * beta * delta[i];
  } else {
    const double cn = l2_norm(u);
    const double dn = l2_norm(delta);
    objective = cn + beta * dn;
    if (cn > kTiny) {
      Vec cot(u.size());
      for (std::size_t j = 0; j < u.size(); ++j) cot[j] = u[j] / cn;
      grad = extractor_input_grad(f, trace, cot);
    }
    if (beta > 0.0 && dn > kTiny) {
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += beta * delta[i] / dn;
    }
  }
  if (!std::isfinite(objective)) {
    throw NumericError("collision_objective: non-finite objective");
  }
  check_finite(grad, "collision_objective gradient");
  return {objective, std::move(grad)};
}

PoisonResult craft_poison(const FeatureExtractor& f, const Vec& x, double scale,
                          const PoisonConfig& cfg, std::uint64_t seed) {
  (void)seed;  // descent from delta=0 is deterministic; seed reserved for randomized variants
  cfg.validate(f.feature_dim());
  if (x.size() != f.input_dim()) {
    throw ShapeError("craft_poison: base instance has wrong dimension");
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw DataError("craft_poison: non-finite base instance");
  }
  if (!(scale > 0.0)) throw DataError("craft_poison: scale must be positive");

  auto project = [&](Vec& delta) {
    if (!cfg.clip_to_scale) return;
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double clipped = std::clamp(x[i] + delta[i], -scale, scale);
      delta[i] = clipped - x[i];
    }
  };

  PoisonResult res;
  res.delta.assign(x.size(), 0.0);
  project(res.delta);

  auto [obj, grad] = collision_objective(f, x, res.delta, cfg.mu, cfg.beta, cfg.mode);
  res.initial_objective = obj;
  res.trace.push_back(obj);

  double lr = cfg.lr;
  for (std::size_t it = 1; it <= cfg.max_iters; ++it) {
    res.iterations_used = it;
    Vec cand(res.delta.size());
    for (std::size_t i = 0; i < cand.size(); ++i) cand[i] = res.delta[i] - lr * grad[i];
    project(cand);
    auto [cand_obj, cand_grad] = collision_objective(f, x, cand, cfg.mu, cfg.beta, cfg.mode);

    if (!cfg.lr_adapt) {
      const double change = std::abs(obj - cand_obj);
      res.delta = std::move(cand);
      obj = cand_obj;
      grad = std::move(cand_grad);
      res.trace.push_back(obj);
      if (change <= cfg.early_stop_tol * std::max(1.0, std::abs(obj))) break;
      continue;
    }

    if (cand_obj < obj) {
      const double improvement = obj - cand_obj;
      res.delta = std::move(cand);
      obj = cand_obj;
      grad = std::move(cand_grad);
      res.trace.push_back(obj);
      if (improvement <= cfg.early_stop_tol * std::max(1.0, std::abs(obj))) break;
      // Grow the step back after a success so a conservative initial lr does
      // not condemn the whole descent to a crawl; failures halve it again.
      lr *= 2.0;
    } else {
      lr *= 0.5;
      if (lr < cfg.lr_floor) {
        res.hit_lr_floor = true;
        break;
      }
    }
  }

  res.final_objective = obj;
  Vec xp(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] + res.delta[i];
  Vec feat = extractor_forward(f, xp);
  Vec u(feat.size());
  for (std::size_t j = 0; j < feat.size(); ++j) u[j] = feat[j] - cfg.mu[j];
  res.final_collision_distance = l2_norm(u);
  return res;
}

BaseSelection select_base_instances(const FeatureExtractor& f,
                                    const std::vector<const Instance*>& candidates, const Vec& mu,
                                    std::size_t k, bool balance, int num_classes) {
  BaseSelection sel;
  if (k == 0) return sel;
  if (candidates.empty()) {
    throw DataError("select_base_instances: no candidates");
  }
  if (k > candidates.size()) {
    // More poisons requested than distinct bases exist: cycle through the
    // ranked candidates so the best bases seed several poisons each.  The
    // descent is deterministic, so repeats collide at the same feature point.
    sel.warnings.push_back("k=" + std::to_string(k) + " exceeds " +
                           std::to_string(candidates.size()) +
                           " candidates; base instances repeat");
  }

  struct Entry {
    double dist;
    std::int64_t id;
    int label;
  };
  std::vector<Entry> entries;
  entries.reserve(candidates.size());
  for (const Instance* inst : candidates) {
    Vec feat = extract_features(f, inst->x);
    Vec u(feat.size());
    for (std::size_t j = 0; j < feat.size(); ++j) u[j] = feat[j] - mu[j];
    entries.push_back({l2_norm(u), inst->id, inst->label});
  }
  auto by_dist_then_id = [](const Entry& a, const Entry& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.id < b.id;
  };

  if (!balance) {
    std::sort(entries.begin(), entries.end(), by_dist_then_id);
    for (std::size_t i = 0; i < k; ++i) sel.ids.push_back(entries[i % entries.size()].id);
    return sel;
  }

  std::map<int, std::vector<Entry>> by_class;
  for (const auto& e : entries) by_class[e.label].push_back(e);
  for (auto& [label, group] : by_class) {
    std::sort(group.begin(), group.end(), by_dist_then_id);
  }
  for (int c = 0; c < num_classes; ++c) {
    if (by_class.find(c) == by_class.end()) {
      sel.warnings.push_back("class " + std::to_string(c) +
                             " has no candidates; balancing skips it");
    }
  }

  std::map<int, std::size_t> cursor;
  while (sel.ids.size() < k) {
    for (auto& [label, group] : by_class) {
      if (sel.ids.size() >= k) break;
      std::size_t& pos = cursor[label];
      sel.ids.push_back(group[pos % group.size()].id);
      ++pos;
    }
  }
  return sel;
}

double PoisonBatch::summed_initial_objective() const {
  double s = 0.0;
  for (const auto& r : records) s += r.initial_objective;
  return s;
}

double PoisonBatch::summed_final_objective() const {
  double s = 0.0;
  for (const auto& r : records) s += r.final_objective;
  return s;
}

double PoisonBatch::mean_wall_time_seconds() const {
  if (records.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : records) s += r.wall_time_seconds;
  return s / static_cast<double>(records.size());
}

PoisonBatch craft_poison_set(const FeatureExtractor& f, Dataset& ds, const PoisonConfig& cfg,
                             std::size_t k, std::uint64_t seed, bool balance,
                             std::size_t workers) {
  cfg.validate(f.feature_dim());
  if (!ds.has_split_tags()) {
    throw DataError("craft_poison_set: dataset has no split tags");
  }

  std::vector<const Instance*> candidates;
  for (const Instance* inst : ds.with_tag(Split::test1)) {
    if (!inst->is_poison) candidates.push_back(inst);
  }

  BaseSelection sel = select_base_instances(f, candidates, cfg.mu, k, balance, ds.num_classes);

  PoisonBatch batch;
  batch.mu = cfg.mu;
  batch.cfg = cfg;
  batch.seed = seed;
  batch.balance = balance;
  batch.warnings = sel.warnings;
  batch.records.resize(sel.ids.size());

  std::vector<const Instance*> bases;
  bases.reserve(sel.ids.size());
  for (std::int64_t id : sel.ids) {
    const Instance* base = ds.find(id);
    if (!base) throw DataError("craft_poison_set: selected base id not found");
    bases.push_back(base);
  }

  auto craft_range = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < bases.size(); i += stride) {
      const Instance* base = bases[i];
      const std::uint64_t inst_seed = derive_seed(seed, "craft/" + std::to_string(base->id));
      const auto t0 = std::chrono::steady_clock::now();
      PoisonResult r = craft_poison(f, base->x, ds.scale, cfg, inst_seed);
      const auto t1 = std::chrono::steady_clock::now();

      PoisonCraftRecord& rec = batch.records[i];
      rec.base_id = base->id;
      rec.delta = std::move(r.delta);
      rec.initial_objective = r.initial_objective;
      rec.final_objective = r.final_objective;
      rec.final_collision_distance = r.final_collision_distance;
      rec.iterations_used = r.iterations_used;
      rec.wall_time_seconds = std::chrono::duration<double>(t1 - t0).count();
      rec.delta_linf_over_scale = linf_norm(rec.delta) / ds.scale;
      const double base_l2 = l2_norm(base->x);
      rec.delta_l2_over_base_l2 = base_l2 > 0.0 ? l2_norm(rec.delta) / base_l2 : 0.0;
    }
  };

  const std::size_t n_workers = std::max<std::size_t>(1, std::min(workers, bases.size()));
  if (n_workers <= 1) {
    craft_range(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) {
      pool.emplace_back(craft_range, w, n_workers);
    }
    for (auto& t : pool) t.join();
  }

  // Register the poisons as pool instances carrying their base's label.
  std::int64_t next_id = 0;
  for (const auto& inst : ds.instances) next_id = std::max(next_id, inst.id + 1);
  for (std::size_t i = 0; i < batch.records.size(); ++i) {
    PoisonCraftRecord& rec = batch.records[i];
    const Instance* base = ds.find(rec.base_id);
    Instance p;
    p.x.resize(base->x.size());
    for (std::size_t j = 0; j < base->x.size(); ++j) p.x[j] = base->x[j] + rec.delta[j];
    p.scale = ds.scale;
    p.label = base->label;
    p.id = next_id + static_cast<std::int64_t>(i);
    p.is_poison = true;
    p.base_id = rec.base_id;
    rec.poison_id = p.id;
    ds.append(std::move(p), Split::train);
  }
  return batch;
}

void save_poison_batch(const std::filesystem::path& dir, const PoisonBatch& batch) {
  std::filesystem::create_directories(dir);
  const std::size_t n = batch.records.size();

  json manifest;
  manifest["schema"] = "poisonlab-poisons-1";
  manifest["n"] = n;
  manifest["seed"] = batch.seed;
  manifest["balance"] = batch.balance;
  manifest["mu"] = batch.mu;
  manifest["warnings"] = batch.warnings;
  manifest["cfg"] = {{"beta", batch.cfg.beta},
                     {"max_iters", batch.cfg.max_iters},
                     {"lr", batch.cfg.lr},
                     {"lr_adapt", batch.cfg.lr_adapt},
                     {"early_stop_tol", batch.cfg.early_stop_tol},
                     {"clip_to_scale", batch.cfg.clip_to_scale},
                     {"mode", collision_mode_name(batch.cfg.mode)},
                     {"lr_floor", batch.cfg.lr_floor}};

  if (n > 0) {
    const std::size_t d = batch.records.front().delta.size();
    Matrix deltas(n, d);
    std::vector<std::uint32_t> base_ids(n), poison_ids(n), iters(n);
    std::vector<double> dists(n), obj_flat(2 * n), linf(n), rel(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = batch.records[i];
      if (r.delta.size() != d) throw ShapeError("save_poison_batch: ragged delta rows");
      std::copy(r.delta.begin(), r.delta.end(), deltas.row(i));
      if (r.base_id < 0 || r.poison_id < 0) throw IoError("save_poison_batch: negative id");
      base_ids[i] = static_cast<std::uint32_t>(r.base_id);
      poison_ids[i] = static_cast<std::uint32_t>(r.poison_id);
      iters[i] = static_cast<std::uint32_t>(r.iterations_used);
      dists[i] = r.final_collision_distance;
      obj_flat[2 * i] = r.initial_objective;
      obj_flat[2 * i + 1] = r.final_objective;
      linf[i] = r.delta_linf_over_scale;
      rel[i] = r.delta_l2_over_base_l2;
    }
    const auto un = static_cast<std::uint32_t>(n);
    save_tensor(dir / "deltas.atf", AtfTensor::from_matrix(deltas));
    save_tensor(dir / "base_ids.atf", AtfTensor{{un}, base_ids});
    save_tensor(dir / "poison_ids.atf", AtfTensor{{un}, poison_ids});
    save_tensor(dir / "iterations.atf", AtfTensor{{un}, iters});
    save_tensor(dir / "collision_distances.atf", AtfTensor{{un}, dists});
    save_tensor(dir / "objectives.atf", AtfTensor{{un, 2u}, obj_flat});
    manifest["delta_linf_over_scale"] = linf;
    manifest["delta_l2_over_base_l2"] = rel;
    manifest["files"] = {"deltas.atf",     "base_ids.atf",           "poison_ids.atf",
                         "iterations.atf", "collision_distances.atf", "objectives.atf"};
  }

  std::ofstream os(dir / "poisons.json");
  if (!os) throw IoError("save_poison_batch: cannot write manifest");
  os << manifest.dump(2) << "\n";

  json timing;
  timing["schema"] = "poisonlab-poison-timing-1";
  json per = json::array();
  for (const auto& r : batch.records) per.push_back(r.wall_time_seconds);
  timing["per_poison_seconds"] = per;
  timing["mean_seconds"] = batch.mean_wall_time_seconds();
  std::ofstream ts(dir / "timing.json");
  if (!ts) throw IoError("save_poison_batch: cannot write timing file");
  ts << timing.dump(2) << "\n";
}

PoisonBatch load_poison_batch(const std::filesystem::path& dir) {
  std::ifstream is(dir / "poisons.json");
  if (!is) throw IoError("load_poison_batch: missing manifest in " + dir.string());
  json manifest = json::parse(is);
  if (manifest.value("schema", "") != "poisonlab-poisons-1") {
    throw IoError("load_poison_batch: unknown manifest schema");
  }

  PoisonBatch batch;
  batch.seed = manifest.at("seed").get<std::uint64_t>();
  batch.balance = manifest.at("balance").get<bool>();
  batch.mu = manifest.at("mu").get<Vec>();
  batch.warnings = manifest.at("warnings").get<std::vector<std::string>>();
  const auto& cj = manifest.at("cfg");
  batch.cfg.mu = batch.mu;
  batch.cfg.beta = cj.at("beta").get<double>();
  batch.cfg.max_iters = cj.at("max_iters").get<std::size_t>();
  batch.cfg.lr = cj.at("lr").get<double>();
  batch.cfg.lr_adapt = cj.at("lr_adapt").get<bool>();
  batch.cfg.early_stop_tol = cj.at("early_stop_tol").get<double>();
  batch.cfg.clip_to_scale = cj.at("clip_to_scale").get<bool>();
  batch.cfg.mode = collision_mode_from_name(cj.at("mode").get<std::string>());
  batch.cfg.lr_floor = cj.at("lr_floor").get<double>();

  const auto n = manifest.at("n").get<std::size_t>();
  if (n == 0) return batch;

  Matrix deltas = load_tensor(dir / "deltas.atf").to_matrix();
  auto base_ids = std::get<std::vector<std::uint32_t>>(load_tensor(dir / "base_ids.atf").data);
  auto poison_ids = std::get<std::vector<std::uint32_t>>(load_tensor(dir / "poison_ids.atf").data);
  auto iters = std::get<std::vector<std::uint32_t>>(load_tensor(dir / "iterations.atf").data);
  auto dists = std::get<std::vector<double>>(load_tensor(dir / "collision_distances.atf").data);
  auto objs = std::get<std::vector<double>>(load_tensor(dir / "objectives.atf").data);
  auto linf = manifest.at("delta_linf_over_scale").get<std::vector<double>>();
  auto rel = manifest.at("delta_l2_over_base_l2").get<std::vector<double>>();
  if (deltas.rows != n || base_ids.size() != n || poison_ids.size() != n || iters.size() != n ||
      dists.size() != n || objs.size() != 2 * n || linf.size() != n || rel.size() != n) {
    throw IoError("load_poison_batch: tensor sizes disagree with manifest");
  }

  std::vector<double> per_seconds(n, 0.0);
  std::ifstream ts(dir / "timing.json");
  if (ts) {
    json timing = json::parse(ts);
    auto v = timing.value("per_poison_seconds", std::vector<double>{});
    if (v.size() == n) per_seconds = std::move(v);
  }

  batch.records.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = batch.records[i];
    r.base_id = base_ids[i];
    r.poison_id = poison_ids[i];
    r.delta.assign(deltas.row(i), deltas.row(i) + deltas.cols);
    r.initial_objective = objs[2 * i];
    r.final_objective = objs[2 * i + 1];
    r.final_collision_distance = dists[i];
    r.iterations_used = iters[i];
    r.wall_time_seconds = per_seconds[i];
    r.delta_linf_over_scale = linf[i];
    r.delta_l2_over_base_l2 = rel[i];
  }
  return batch;
}

}  // namespace poisonlab
