#pragma once

// Experiment orchestration: builds the synthetic task, pretrains the frozen
// extractor, runs the clean and poisoned active-learning campaigns under
// shared seeds, and reduces everything to a comparable report plus PCA
// projections of the pool features.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "poisonlab/active.hpp"
#include "poisonlab/attack.hpp"
#include "poisonlab/datasets.hpp"
#include "poisonlab/models.hpp"

namespace poisonlab {

struct DatasetConfig {
  std::string name = "synthetic";
  int num_classes = 10;
  std::size_t per_class = 400;
  std::size_t input_dim = 256;
  double scale = 127.0;
  double noise_level = 1.0;
  // Auxiliary pretraining task: same geometry family, disjoint labels.
  std::size_t aux_per_class = 120;
  int aux_num_classes = 10;
};

struct AttackSection {
  std::string mu = "zero";  // zero | one | clean_mean
  std::string mode = "squared";
  double beta = 1e-7;
  std::size_t max_iters = 3000;
  double lr = 1.0;
  bool lr_adapt = true;
  double early_stop_tol = 1e-10;
  bool clip_to_scale = true;
  bool balance = true;
  std::size_t k = 500;
};

struct ALSection {
  std::size_t budget = 500;
  std::size_t seed_set_size = 20;
  std::size_t retrain_every = 25;
  bool warm_start = false;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ExtractorConfig extractor;
  std::string head_variant = "NN1";  // NN1 (linear) | NN2 (one hidden layer)
  HeadConfig head;
  AttackSection attack;
  ALSection al;
  FinetuneConfig finetune;
  bool defense = false;
  std::uint64_t seed = 7;
  std::size_t workers = 1;
  std::size_t baseline_trials = 200;

  HeadConfig head_config() const;  // head with layers/dropout fixed by variant
  void validate() const;
};

nlohmann::json config_to_json(const ExperimentConfig& cfg);
// Strict parse: starts from defaults, rejects unknown keys with their path.
ExperimentConfig config_from_json(const nlohmann::json& j);
// Apply one dotted-path override (e.g. "attack.k=64") onto a config JSON.
void apply_override(nlohmann::json& j, const std::string& dotted_key_equals_value);

struct PerturbationStats {
  double max_linf_over_scale = 0.0;
  double mean_linf_over_scale = 0.0;
  double max_rel_l2 = 0.0;
  double mean_rel_l2 = 0.0;
  double max_collision_distance = 0.0;
  double median_clean_distance = 0.0;
};

struct ExperimentReport {
  std::string dataset;
  std::string model;
  double accuracy_clean = 0.0;
  double accuracy_poisoned = 0.0;
  double loss_adv = 0.0;      // summed crafting objective after optimization
  double loss_initial = 0.0;  // summed crafting objective at delta = 0
  std::size_t n_poison = 0;
  double success_rate_poison = 0.0;
  double success_rate_random = 0.0;
  double craft_time_seconds = 0.0;  // per-poison mean; excluded from determinism checks
  PerturbationStats perturbation;
  std::size_t pool_size = 0;  // poisoned-run pool at the first query
  std::size_t budget = 0;
  double poison_bbox_area = 0.0;
  double clean_bbox_area = 0.0;
  bool defense_ran = false;
  double accuracy_defended = 0.0;
  nlohmann::json config_echo;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::uint64_t> seeds;
};

nlohmann::json report_to_json(const ExperimentReport& r);
ExperimentReport report_from_json(const nlohmann::json& j);
// Deep-copies the report JSON with every timing field (keys containing
// "seconds") removed; equal-seed runs must agree bit-for-bit on this view.
nlohmann::json strip_timing(const nlohmann::json& j);
std::string report_csv_header();
std::string report_csv_row(const ExperimentReport& r);

// success = (# poison queries in trace) / min(k, budget)
double poison_success_rate(const std::vector<QueryRecord>& trace, std::size_t k);

struct BaselineEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t trials = 0;
};

// Monte-Carlo estimate of the poison fraction a uniform-random sampler would
// select: `trials` draws of `budget` pool members without replacement.
BaselineEstimate random_baseline_detailed(std::size_t pool_size, std::size_t k,
                                          std::size_t budget, std::size_t trials,
                                          std::uint64_t seed);
double random_baseline(std::size_t pool_size, std::size_t k, std::size_t budget,
                       std::size_t trials, std::uint64_t seed);

struct PcaProjection {
  Matrix axes;    // 2 x d, orthonormal rows
  Matrix coords;  // n x 2
  std::vector<std::uint8_t> is_poison;
  Vec explained;  // variance fractions, non-increasing
};

// Top-2 principal axes of the mean-centered features via deterministic power
// iteration with deflation; each axis's largest-magnitude component is made
// positive.
PcaProjection pca_project(const Matrix& features, const std::vector<std::uint8_t>& flags);
std::string pca_to_csv(const PcaProjection& proj, const std::vector<int>& labels);

double evaluate_accuracy(const FeatureExtractor& f, const DenseHead& g,
                         const std::vector<const Instance*>& instances);

struct ExperimentOutcome {
  ExperimentReport report;
  std::vector<QueryRecord> clean_trace;
  std::vector<QueryRecord> poisoned_trace;
  PoisonBatch batch;
  PcaProjection pca;
  std::vector<int> pca_labels;
  FeatureExtractor extractor;
  DenseHead head_clean;
  DenseHead head_poisoned;
};

// Full pipeline: pretrain -> craft -> clean AL run -> poisoned AL run ->
// metrics. The clean and poisoned runs share every derived seed; only the
// pool contents differ. Identical master seeds reproduce the outcome
// bit-for-bit apart from wall-time fields.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg);

// Adversarial-retraining defense on top of a full run: returns the frozen
// report and a copy whose poisoned accuracy is the jointly finetuned model's.
std::pair<ExperimentReport, ExperimentReport> run_defense(const ExperimentConfig& cfg);

}  // namespace poisonlab
