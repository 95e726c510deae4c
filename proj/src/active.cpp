#include "poisonlab/active.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

namespace poisonlab {

Oracle::Oracle(const Dataset& ds) {
  for (const auto& inst : ds.instances) {
    labels_[inst.id] = inst.label;
  }
  // Clean-label contract: a poison must carry its base instance's label.
  for (const auto& inst : ds.instances) {
    if (inst.is_poison) {
      if (!inst.base_id) {
        throw DataError("oracle: poison " + std::to_string(inst.id) + " has no base id");
      }
      const Instance* base = ds.find(*inst.base_id);
      if (base && base->label != inst.label) {
        throw DataError("oracle: poison " + std::to_string(inst.id) +
                        " does not carry its base label");
      }
    }
  }
}

int Oracle::label_of(std::int64_t id) const {
  auto it = labels_.find(id);
  if (it == labels_.end()) {
    throw DataError("oracle: unknown instance id " + std::to_string(id));
  }
  return it->second;
}

double uncertainty_features(const DenseHead& g, const Vec& features) {
  return entropy(predict_features(g, features).y_pred);
}

double uncertainty(const FeatureExtractor& f, const DenseHead& g, const Vec& x) {
  return entropy(predict(f, g, x).y_pred);
}

std::int64_t select_query(const FeatureExtractor& f, const DenseHead& g,
                          const std::vector<const Instance*>& pool) {
  if (pool.empty()) {
    throw DataError("select_query: empty pool");
  }
  std::int64_t best_id = pool.front()->id;
  double best_u = uncertainty(f, g, pool.front()->x);
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const double u = uncertainty(f, g, pool[i]->x);
    if (u > best_u || (u == best_u && pool[i]->id < best_id)) {
      best_u = u;
      best_id = pool[i]->id;
    }
  }
  return best_id;
}

std::size_t select_query_index(const DenseHead& g, const Matrix& pool_features,
                               const std::vector<std::int64_t>& ids) {
  if (pool_features.rows == 0) {
    throw DataError("select_query_index: empty pool");
  }
  if (ids.size() != pool_features.rows) {
    throw ShapeError("select_query_index: id/feature row mismatch");
  }
  std::size_t best = 0;
  Vec feat(pool_features.cols);
  std::copy(pool_features.row(0), pool_features.row(0) + pool_features.cols, feat.begin());
  double best_u = uncertainty_features(g, feat);
  for (std::size_t i = 1; i < pool_features.rows; ++i) {
    std::copy(pool_features.row(i), pool_features.row(i) + pool_features.cols, feat.begin());
    const double u = uncertainty_features(g, feat);
    if (u > best_u || (u == best_u && ids[i] < ids[best])) {
      best_u = u;
      best = i;
    }
  }
  return best;
}

ALState al_loop(const FeatureExtractor& f, const Dataset& ds, const Oracle& oracle,
                std::size_t budget, std::size_t seed_set_size, std::size_t retrain_every,
                const HeadConfig& head_cfg, std::uint64_t seed, bool warm_start) {
  if (retrain_every < 1) {
    throw ConfigError("al.retrain_every must be >= 1");
  }
  if (seed_set_size < 1) {
    throw ConfigError("al.seed_set_size must be >= 1");
  }
  const std::vector<const Instance*> train_insts = ds.with_tag(Split::train);

  // Stratified seed labeled set over the clean train instances.
  std::map<int, std::vector<const Instance*>> by_class;
  std::size_t n_clean = 0;
  for (const Instance* inst : train_insts) {
    if (!inst->is_poison) {
      by_class[inst->label].push_back(inst);
      ++n_clean;
    }
  }
  if (n_clean < seed_set_size) {
    throw DataError("al_loop: not enough clean train instances for the seed set");
  }
  Rng seed_rng = Rng(derive_seed(seed, "seed-set"));
  for (auto& [label, group] : by_class) {
    std::sort(group.begin(), group.end(),
              [](const Instance* a, const Instance* b) { return a->id < b->id; });
    seed_rng.shuffle(group);
  }

  std::set<std::int64_t> labeled;
  std::vector<const Instance*> seed_set;
  std::size_t round = 0;
  while (seed_set.size() < seed_set_size) {
    bool advanced = false;
    for (auto& [label, group] : by_class) {
      if (seed_set.size() >= seed_set_size) break;
      if (round < group.size()) {
        seed_set.push_back(group[round]);
        labeled.insert(group[round]->id);
        advanced = true;
      }
    }
    if (!advanced) break;
    ++round;
  }

  // Cache extractor features for every train instance once; the extractor is
  // frozen, so each query step only needs head forwards.
  Matrix raw(train_insts.size(), ds.input_dim);
  for (std::size_t i = 0; i < train_insts.size(); ++i) {
    std::copy(train_insts[i]->x.begin(), train_insts[i]->x.end(), raw.row(i));
  }
  Matrix features = extract_features_batch(f, raw);

  std::vector<std::size_t> labeled_rows;
  std::vector<int> labels;
  std::vector<std::size_t> pool_rows;
  ALState state;
  for (std::size_t i = 0; i < train_insts.size(); ++i) {
    if (labeled.count(train_insts[i]->id)) {
      labeled_rows.push_back(i);
      labels.push_back(oracle.label_of(train_insts[i]->id));
      state.labeled_ids.push_back(train_insts[i]->id);
    } else {
      pool_rows.push_back(i);
    }
  }
  if (budget > pool_rows.size()) {
    throw DataError("al_loop: budget exceeds pool size");
  }

  auto gather_labeled = [&]() {
    Matrix out(labeled_rows.size(), features.cols);
    for (std::size_t i = 0; i < labeled_rows.size(); ++i) {
      std::copy(features.row(labeled_rows[i]), features.row(labeled_rows[i]) + features.cols,
                out.row(i));
    }
    return out;
  };

  std::size_t retrain_count = 0;
  auto retrain = [&]() {
    const std::uint64_t head_seed = derive_seed(seed, "head/" + std::to_string(retrain_count));
    Matrix lf = gather_labeled();
    if (warm_start && retrain_count > 0) {
      continue_training_head(state.head, lf, labels, head_cfg, head_seed);
    } else {
      state.head = train_head_on_features(lf, labels, ds.num_classes, head_cfg, head_seed);
    }
    ++retrain_count;
  };
  retrain();  // initial head on the seed set
  std::size_t trained_at = labeled_rows.size();

  std::vector<std::int64_t> pool_ids_vec;
  pool_ids_vec.reserve(pool_rows.size());
  Vec feat(features.cols);
  for (std::size_t t = 1; t <= budget; ++t) {
    // argmax uncertainty over the remaining pool, ties to the lowest id
    std::size_t best = 0;
    double best_u = -1.0;
    std::int64_t best_id = 0;
    for (std::size_t i = 0; i < pool_rows.size(); ++i) {
      std::copy(features.row(pool_rows[i]), features.row(pool_rows[i]) + features.cols,
                feat.begin());
      const double u = uncertainty_features(state.head, feat);
      const std::int64_t id = train_insts[pool_rows[i]]->id;
      if (u > best_u || (u == best_u && id < best_id)) {
        best_u = u;
        best = i;
        best_id = id;
      }
    }
    const std::size_t row = pool_rows[best];
    const Instance* chosen = train_insts[row];
    const int lab = oracle.label_of(chosen->id);

    state.query_trace.push_back({t, chosen->id, best_u, chosen->is_poison, lab});
    state.labeled_ids.push_back(chosen->id);
    labeled_rows.push_back(row);
    labels.push_back(lab);
    pool_rows.erase(pool_rows.begin() + static_cast<std::ptrdiff_t>(best));

    if (t % retrain_every == 0) {
      retrain();
      trained_at = labeled_rows.size();
    }
  }
  if (trained_at != labeled_rows.size()) {
    retrain();  // final head always reflects the full labeled set
  }

  state.budget_used = budget;
  for (std::size_t i : pool_rows) state.pool_ids.insert(train_insts[i]->id);
  return state;
}

std::string trace_to_csv(const std::vector<QueryRecord>& trace) {
  std::string out = "step,chosen_id,uncertainty,was_poison,label\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf), "%zu,%lld,%.17g,%d,%d\n", r.step,
                  static_cast<long long>(r.chosen_id), r.uncertainty, r.was_poison ? 1 : 0,
                  r.label);
    out += buf;
  }
  return out;
}

void save_trace_csv(const std::filesystem::path& path, const std::vector<QueryRecord>& trace) {
  std::ofstream os(path);
  if (!os) throw IoError("save_trace_csv: cannot write " + path.string());
  os << trace_to_csv(trace);
}

}  // namespace poisonlab
