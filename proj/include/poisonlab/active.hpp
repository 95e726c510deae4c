#pragma once

// Pool-based active learning with entropy sampling: the learner repeatedly
// queries the pool instance whose predicted class distribution has maximal
// Shannon entropy, asks the oracle for its label, and retrains the head on
// a fixed schedule.

#include <cstdint>
#include <filesystem>
#include <set>
#include <unordered_map>
#include <vector>

#include "poisonlab/datasets.hpp"
#include "poisonlab/models.hpp"

namespace poisonlab {

// Ground-truth label source. Poisons are clean-label: the oracle returns the
// base instance's (correct) label, never a falsified one.
class Oracle {
 public:
  explicit Oracle(const Dataset& ds);
  int label_of(std::int64_t id) const;
  std::size_t size() const { return labels_.size(); }

 private:
  std::unordered_map<std::int64_t, int> labels_;
};

struct QueryRecord {
  std::size_t step = 0;  // 1-based query index
  std::int64_t chosen_id = 0;
  double uncertainty = 0.0;
  bool was_poison = false;
  int label = 0;  // oracle label for the chosen instance
};

struct ALState {
  std::vector<std::int64_t> labeled_ids;  // in acquisition order (seed set first)
  std::set<std::int64_t> pool_ids;
  std::vector<QueryRecord> query_trace;
  DenseHead head;
  std::size_t budget_used = 0;
};

// Shannon entropy of the head's predicted distribution; in [0, ln M].
double uncertainty(const FeatureExtractor& f, const DenseHead& g, const Vec& x);
double uncertainty_features(const DenseHead& g, const Vec& features);

// Argmax of uncertainty over the pool; ties broken by lowest id.
std::int64_t select_query(const FeatureExtractor& f, const DenseHead& g,
                          const std::vector<const Instance*>& pool);

// Cached-feature variant used inside the loop: returns the row index of the
// winner among (pool_features, ids).
std::size_t select_query_index(const DenseHead& g, const Matrix& pool_features,
                               const std::vector<std::int64_t>& ids);

// Run the loop over the dataset's train-tagged instances. The seed labeled
// set is drawn stratified from the clean train instances; everything else
// (poisons included) forms the query pool. The head is retrained from fresh
// initialization every retrain_every queries and always ends trained on the
// full labeled set; warm_start reuses the previous weights instead.
ALState al_loop(const FeatureExtractor& f, const Dataset& ds, const Oracle& oracle,
                std::size_t budget, std::size_t seed_set_size, std::size_t retrain_every,
                const HeadConfig& head_cfg, std::uint64_t seed, bool warm_start = false);

// CSV export: step,chosen_id,uncertainty,was_poison,label.
void save_trace_csv(const std::filesystem::path& path, const std::vector<QueryRecord>& trace);
std::string trace_to_csv(const std::vector<QueryRecord>& trace);

}  // namespace poisonlab
