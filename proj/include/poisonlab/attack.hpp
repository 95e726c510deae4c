#pragma once

// Feature-collision poison crafting: drive f(x+delta) toward a fixed
// collision vector mu while keeping delta small, so that many differently
// labeled instances become indistinguishable to any head stacked on the
// frozen extractor.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "poisonlab/datasets.hpp"
#include "poisonlab/models.hpp"
#include "poisonlab/numerics.hpp"

namespace poisonlab {

// The collision term can be optimized as a plain L2 norm or as its square.
// The squared form is the default: its gradient stays defined at the
// collision point the optimizer is driving toward. The exact form is kept
// for fidelity experiments; beta defaults differ per mode.
enum class CollisionMode : uint8_t { squared, exact };

std::string collision_mode_name(CollisionMode m);
CollisionMode collision_mode_from_name(const std::string& name);

// Named choices for the collision vector.
enum class MuKind : uint8_t { zero, one, clean_mean };

std::string mu_kind_name(MuKind k);
MuKind mu_kind_from_name(const std::string& name);

// Materialize a collision vector. clean_mean averages the given clean
// feature rows and requires a non-empty matrix.
Vec make_mu(MuKind kind, std::size_t feature_dim, const Matrix* clean_features = nullptr);

struct PoisonConfig {
  Vec mu;                          // collision vector, length d_zeta (empty = set by caller)
  double beta = 1e-7;              // perturbation penalty weight (squared-mode default)
  std::size_t max_iters = 3000;
  double lr = 1.0;                 // initial step size
  bool lr_adapt = true;            // accept-on-decrease, halve-on-increase
  double early_stop_tol = 1e-10;   // relative objective improvement threshold
  bool clip_to_scale = true;       // project x+delta into [-scale, scale]
  CollisionMode mode = CollisionMode::squared;
  double lr_floor = 1e-12;         // halving below this stops the descent

  void validate(std::size_t feature_dim) const;
};

// Objective value and its gradient with respect to delta.
// squared mode:  ||f(x+delta) - mu||^2 + beta * ||delta||^2
// exact mode:    ||f(x+delta) - mu||   + beta * ||delta||
std::pair<double, Vec> collision_objective(const FeatureExtractor& f, const Vec& x,
                                           const Vec& delta, const Vec& mu, double beta,
                                           CollisionMode mode = CollisionMode::squared);

struct PoisonResult {
  Vec delta;
  std::vector<double> trace;  // objective value at delta=0 and after every accepted step
  double initial_objective = 0.0;
  double final_objective = 0.0;
  double final_collision_distance = 0.0;  // ||f(x+delta) - mu||_2, unsquared in both modes
  std::size_t iterations_used = 0;
  bool hit_lr_floor = false;
};

// Gradient descent from delta = 0. The descent itself is deterministic; the
// seed is recorded alongside the batch and reserved for randomized variants,
// so a crafted poison is a pure function of (f, x, cfg, seed).
PoisonResult craft_poison(const FeatureExtractor& f, const Vec& x, double scale,
                          const PoisonConfig& cfg, std::uint64_t seed);

struct BaseSelection {
  std::vector<std::int64_t> ids;
  std::vector<std::string> warnings;  // e.g. a class with no candidates under balancing
};

// Pick the k candidates whose features sit closest to mu. With balance on,
// candidates are drawn round-robin per class (each class sorted by the same
// distance), so per-class counts differ by at most one.
BaseSelection select_base_instances(const FeatureExtractor& f,
                                    const std::vector<const Instance*>& candidates, const Vec& mu,
                                    std::size_t k, bool balance, int num_classes);

struct PoisonCraftRecord {
  std::int64_t base_id = 0;
  std::int64_t poison_id = 0;
  Vec delta;
  double initial_objective = 0.0;
  double final_objective = 0.0;
  double final_collision_distance = 0.0;
  std::size_t iterations_used = 0;
  double wall_time_seconds = 0.0;  // timing only; excluded from determinism checks
  double delta_linf_over_scale = 0.0;
  double delta_l2_over_base_l2 = 0.0;
};

struct PoisonBatch {
  std::vector<PoisonCraftRecord> records;
  Vec mu;
  PoisonConfig cfg;
  std::uint64_t seed = 0;
  bool balance = true;
  std::vector<std::string> warnings;

  double summed_initial_objective() const;
  double summed_final_objective() const;
  double mean_wall_time_seconds() const;
};

// Select bases from the test1 split, craft one poison per base (fanning out
// over `workers` threads with per-instance derived seeds), and register the
// poisons in `ds` tagged as pool (train) instances: is_poison set, base_id
// recorded, label copied from the base.
PoisonBatch craft_poison_set(const FeatureExtractor& f, Dataset& ds, const PoisonConfig& cfg,
                             std::size_t k, std::uint64_t seed, bool balance = true,
                             std::size_t workers = 1);

// Persistence: deterministic tensors + manifest in `dir`; per-poison wall
// times go to a separate timing.json so everything else is byte-comparable
// across runs.
void save_poison_batch(const std::filesystem::path& dir, const PoisonBatch& batch);
PoisonBatch load_poison_batch(const std::filesystem::path& dir);

}  // namespace poisonlab
