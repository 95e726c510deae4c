#pragma once

// The frozen feature extractor, the trainable dense head, and their
// training procedures (mini-batch gradient descent, early stopping,
// dropout, optional joint fine-tuning of the extractor).

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "poisonlab/datasets.hpp"
#include "poisonlab/numerics.hpp"

namespace poisonlab {

struct DenseLayer {
  Matrix W;  // in x out
  Vec b;     // out
};

// All layer stacks here follow one rule: ReLU after every layer except the
// last, whose output is the logits (or, for the extractor, the features --
// the extractor's last layer is ReLU too, it just has no logits layer).

struct FeatureExtractor {
  std::vector<DenseLayer> layers;  // ReLU after every layer
  double input_scale = 1.0;        // inputs are divided by this first
  bool frozen = true;
  double aux_val_accuracy = 0.0;  // provenance from pretraining
  std::uint64_t provenance_seed = 0;

  std::size_t input_dim() const;
  std::size_t feature_dim() const;
  std::uint64_t weights_hash() const;
  void validate() const;  // layer shapes must chain
};

struct DenseHead {
  std::vector<DenseLayer> layers;  // 1 (NN1) or 2 (NN2); last layer emits logits
  double dropout_rate = 0.0;       // applied to the hidden activation while training

  int num_classes() const;
  std::size_t input_dim() const;
  std::size_t param_count() const;
  std::uint64_t weights_hash() const;
};

struct Prediction {
  Vec y_pred;  // softmax probabilities, length M
  int cls;     // argmax, ties broken by lowest index
};

struct EpochStats {
  double train_loss;
  double val_loss;
  double lr;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::size_t best_epoch = 0;  // epoch whose weights were returned
};

struct ExtractorConfig {
  std::vector<std::size_t> hidden = {128};
  std::size_t feature_dim = 64;
  double lr = 0.05;
  std::size_t max_epochs = 60;
  std::size_t patience = 8;
  std::size_t batch_size = 32;
  double val_fraction = 0.2;
  bool plateau_halving = true;
};

struct HeadConfig {
  int layers = 1;           // 1 = NN1, 2 = NN2
  std::size_t hidden = 32;  // NN2 hidden width
  double dropout = 0.0;     // NN2 default is 0.5; must be <= 0.5
  double lr = 0.2;
  std::size_t max_epochs = 300;
  std::size_t patience = 10;
  std::size_t batch_size = 32;
  double val_fraction = 0.2;
  bool plateau_halving = true;
  std::size_t param_cap = 4096;
};

struct FinetuneConfig {
  double lr = 0.02;
  std::size_t max_epochs = 200;
  std::size_t patience = 10;
  std::size_t batch_size = 32;
  double val_fraction = 0.2;
  bool plateau_halving = true;
};

// ---------------------------------------------------------------------------
// Forward / backward primitives (shared by training, crafting and the
// gradient-check tests).

// Extractor forward pass. When trace is non-null the scaled input and
// pre-activations are recorded for extractor_input_grad.
struct ExtractorTrace {
  Vec scaled_input;
  std::vector<Vec> pre;  // pre-activation per layer
};
Vec extractor_forward(const FeatureExtractor& f, const Vec& x, ExtractorTrace* trace = nullptr);

// J_f(x)^T * cotangent for the forward pass recorded in trace.
Vec extractor_input_grad(const FeatureExtractor& f, const ExtractorTrace& trace,
                         const Vec& cotangent);

// Mean softmax cross-entropy of an MLP stack over a batch. Fills parameter
// gradients (same shapes as layers) and optionally the gradient w.r.t. X.
// dropout_masks, when non-null, holds one inverted-dropout mask per hidden
// activation (empty Matrix = no dropout on that activation); masks are
// applied in forward and backward, which keeps the loss a fixed
// differentiable function for gradient checking.
double stack_loss_and_grads(const std::vector<DenseLayer>& layers, const Matrix& X,
                            const std::vector<int>& labels, std::vector<DenseLayer>* grads,
                            Matrix* input_grad = nullptr,
                            const std::vector<Matrix>* dropout_masks = nullptr);

// ---------------------------------------------------------------------------
// Operations

// Train extractor + throwaway softmax head on the auxiliary task, early
// stopping on a held-out fraction; the head is discarded and the result
// frozen. Fails if final validation accuracy is below twice chance.
FeatureExtractor pretrain_extractor(const Dataset& aux, const ExtractorConfig& cfg,
                                    std::uint64_t seed, TrainLog* log = nullptr);

Vec extract_features(const FeatureExtractor& f, const Vec& x);
Matrix extract_features_batch(const FeatureExtractor& f, const Matrix& X);

// Head training on extracted features; f stays untouched (it is const and
// the frozen-weights test hashes it around calls).
DenseHead train_head(const FeatureExtractor& f, const std::vector<const Instance*>& labeled,
                     const std::vector<int>& labels, int num_classes, const HeadConfig& cfg,
                     std::uint64_t seed, TrainLog* log = nullptr);

// Core trainer on a precomputed feature matrix (also the imported-features
// path).
DenseHead train_head_on_features(const Matrix& features, const std::vector<int>& labels,
                                 int num_classes, const HeadConfig& cfg, std::uint64_t seed,
                                 TrainLog* log = nullptr);

// Continue training an existing head in place (warm start) instead of
// reinitializing; same early-stopping rules as train_head_on_features.
void continue_training_head(DenseHead& head, const Matrix& features,
                            const std::vector<int>& labels, const HeadConfig& cfg,
                            std::uint64_t seed, TrainLog* log = nullptr);

Prediction predict(const FeatureExtractor& f, const DenseHead& g, const Vec& x);
Prediction predict_features(const DenseHead& g, const Vec& features);

// Unfreeze f and train it jointly with g; returns trained copies, the
// originals are untouched.
std::pair<FeatureExtractor, DenseHead> joint_finetune(const FeatureExtractor& f,
                                                      const DenseHead& g,
                                                      const std::vector<const Instance*>& labeled,
                                                      const std::vector<int>& labels,
                                                      const FinetuneConfig& cfg,
                                                      std::uint64_t seed, TrainLog* log = nullptr);

// ---------------------------------------------------------------------------
/// Checkpoints: ATF tensors plus a JSON manifest.

void save_extractor(const std::filesystem::path& dir, const FeatureExtractor& f);
FeatureExtractor load_extractor(const std::filesystem::path& dir);
void save_head(const std::filesystem::path& dir, const DenseHead& g);
DenseHead load_head(const std::filesystem::path& dir);

}  // namespace poisonlab
