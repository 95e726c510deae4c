#include "poisonlab/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>

#include "json.hpp"

namespace poisonlab {

using nlohmann::json;

namespace {

DenseLayer init_layer(std::size_t in, std::size_t out, Rng& rng) {
  DenseLayer l;
  l.W = Matrix(in, out);
  const double sd = std::sqrt(2.0 / static_cast<double>(in));
  for (auto& w : l.W.data) w = sd * rng.normal();
  l.b.assign(out, 0.0);
  return l;
}

std::uint64_t hash_layers(const std::vector<DenseLayer>& layers) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& l : layers) {
    h = h * 0x100000001b3ULL + bit_hash(l.W);
    h = h * 0x100000001b3ULL + bit_hash(l.b);
  }
  return h;
}

void validate_chain(const std::vector<DenseLayer>& layers, const char* what) {
  if (layers.empty()) {
    throw ShapeError(std::string(what) + ": no layers");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].b.size() != layers[i].W.cols) {
      throw ShapeError(std::string(what) + ": bias size mismatch at layer " + std::to_string(i));
    }
    if (i > 0 && layers[i].W.rows != layers[i - 1].W.cols) {
      throw ShapeError(std::string(what) + ": layer shapes do not chain at layer " +
                       std::to_string(i));
    }
  }
}

Matrix gather_rows(const Matrix& X, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), X.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(X.row(idx[i]), X.row(idx[i]) + X.cols, out.row(i));
  }
  return out;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

// Shuffled train/validation index split; the validation part is clamped to
// [1, n-1] so both sides are non-empty.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_train_val(std::size_t n,
                                                                              double val_fraction,
                                                                              Rng& rng) {
  if (n < 2) {
    throw DataError("training needs at least 2 instances for a train/validation split");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  auto val_n = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n)));
  val_n = std::clamp<std::size_t>(val_n, 1, n - 1);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + val_n);
  std::vector<std::size_t> train(idx.begin() + val_n, idx.end());
  return {train, val};
}

struct SgdOptions {
  double lr = 0.1;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::size_t batch_size = 32;
  bool plateau_halving = true;
  double dropout = 0.0;
  std::size_t dropout_activation = 0;  // hidden activation index the mask applies to
};

double eval_loss(const std::vector<DenseLayer>& layers, const Matrix& X,
                 const std::vector<int>& labels) {
  return stack_loss_and_grads(layers, X, labels, nullptr);
}

// Mini-batch SGD with early stopping on the validation loss. Returns the
// per-epoch log; `layers` is left at the best-validation-loss snapshot.
TrainLog sgd_train(std::vector<DenseLayer>& layers, const Matrix& Xtr,
                   const std::vector<int>& ytr, const Matrix& Xval,
                   const std::vector<int>& yval, const SgdOptions& opt, Rng& rng) {
  TrainLog log;
  const std::size_t n = Xtr.rows;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::vector<DenseLayer> best = layers;
  double best_val = eval_loss(layers, Xval, yval);
  std::size_t best_epoch = 0;
  double lr = opt.lr;
  std::size_t stall = 0;
  const std::size_t halve_after = std::max<std::size_t>(1, opt.patience / 2);

  std::vector<DenseLayer> grads;
  std::vector<Matrix> masks(layers.size() > 1 ? layers.size() - 1 : 0);

  for (std::size_t epoch = 1; epoch <= opt.max_epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
      const std::size_t stop = std::min(n, start + opt.batch_size);
      std::vector<std::size_t> batch_idx(order.begin() + start, order.begin() + stop);
      Matrix Xb = gather_rows(Xtr, batch_idx);
      std::vector<int> yb = gather(ytr, batch_idx);

      const std::vector<Matrix>* mask_ptr = nullptr;
      if (opt.dropout > 0.0 && !masks.empty()) {
        for (auto& m : masks) m = Matrix();
        Matrix m(Xb.rows, layers[opt.dropout_activation].W.cols);
        const double keep_scale = 1.0 / (1.0 - opt.dropout);
        for (auto& v : m.data) v = rng.uniform() < opt.dropout ? 0.0 : keep_scale;
        masks[opt.dropout_activation] = std::move(m);
        mask_ptr = &masks;
      }

      const double loss = stack_loss_and_grads(layers, Xb, yb, &grads, nullptr, mask_ptr);
      if (!std::isfinite(loss)) {
        throw NumericError("sgd_train: non-finite training loss");
      }
      loss_sum += loss * static_cast<double>(yb.size());

      for (std::size_t l = 0; l < layers.size(); ++l) {
        for (std::size_t i = 0; i < layers[l].W.size(); ++i) {
          layers[l].W.data[i] -= lr * grads[l].W.data[i];
        }
        for (std::size_t i = 0; i < layers[l].b.size(); ++i) {
          layers[l].b[i] -= lr * grads[l].b[i];
        }
      }
    }
    const double train_loss = loss_sum / static_cast<double>(n);
    const double val_loss = eval_loss(layers, Xval, yval);
    if (!std::isfinite(val_loss)) {
      throw NumericError("sgd_train: non-finite validation loss");
    }
    log.epochs.push_back({train_loss, val_loss, lr});

    if (val_loss < best_val) {
      best_val = val_loss;
      best = layers;
      best_epoch = epoch;
      stall = 0;
    } else {
      ++stall;
      if (opt.plateau_halving && stall % halve_after == 0) {
        lr *= 0.5;
      }
      if (stall >= opt.patience) {
        break;
      }
    }
  }
  layers = std::move(best);
  log.best_epoch = best_epoch;
  return log;
}

Matrix scaled_inputs(const std::vector<const Instance*>& labeled, std::size_t input_dim,
                     double scale) {
  Matrix X(labeled.size(), input_dim);
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (labeled[i]->x.size() != input_dim) {
      throw ShapeError("instance " + std::to_string(labeled[i]->id) + ": wrong input dim");
    }
    for (std::size_t j = 0; j < input_dim; ++j) {
      X(i, j) = labeled[i]->x[j] / scale;
    }
  }
  return X;
}

int accuracy_count(const std::vector<DenseLayer>& layers, const Matrix& X,
                   const std::vector<int>& labels) {
  int correct = 0;
  Matrix A = X;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix Z = matmul(A, layers[l].W);
    for (std::size_t i = 0; i < Z.rows; ++i) {
      for (std::size_t j = 0; j < Z.cols; ++j) {
        Z(i, j) += layers[l].b[j];
        if (l + 1 < layers.size() && Z(i, j) < 0.0) Z(i, j) = 0.0;
      }
    }
    A = std::move(Z);
  }
  for (std::size_t i = 0; i < A.rows; ++i) {
    const double* row = A.row(i);
    int arg = 0;
    for (std::size_t j = 1; j < A.cols; ++j) {
      if (row[j] > row[arg]) arg = static_cast<int>(j);
    }
    if (arg == labels[i]) ++correct;
  }
  return correct;
}

}  // namespace

// ---------------------------------------------------------------------------
// FeatureExtractor / DenseHead basics

std::size_t FeatureExtractor::input_dim() const {
  return layers.empty() ? 0 : layers.front().W.rows;
}

std::size_t FeatureExtractor::feature_dim() const {
  return layers.empty() ? 0 : layers.back().W.cols;
}

std::uint64_t FeatureExtractor::weights_hash() const { return hash_layers(layers); }

void FeatureExtractor::validate() const {
  validate_chain(layers, "extractor");
  if (!(input_scale > 0.0)) {
    throw NumericError("extractor: input_scale must be positive");
  }
}

int DenseHead::num_classes() const {
  return layers.empty() ? 0 : static_cast<int>(layers.back().W.cols);
}

std::size_t DenseHead::input_dim() const {
  return layers.empty() ? 0 : layers.front().W.rows;
}

std::size_t DenseHead::param_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.W.size() + l.b.size();
  return n;
}

std::uint64_t DenseHead::weights_hash() const { return hash_layers(layers); }

// ---------------------------------------------------------------------------
// Forward / backward primitives

Vec extractor_forward(const FeatureExtractor& f, const Vec& x, ExtractorTrace* trace) {
  if (x.size() != f.input_dim()) {
    throw ShapeError("extractor_forward: expected input of length " +
                     std::to_string(f.input_dim()));
  }
  Vec a(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) a[j] = x[j] / f.input_scale;
  if (trace) {
    trace->scaled_input = a;
    trace->pre.clear();
  }
  for (const auto& layer : f.layers) {
    Vec z(layer.W.cols, 0.0);
    for (std::size_t k = 0; k < layer.W.rows; ++k) {
      const double ak = a[k];
      if (ak == 0.0) continue;
      const double* wrow = layer.W.row(k);
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += ak * wrow[j];
    }
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += layer.b[j];
    if (trace) trace->pre.push_back(z);
    for (double& v : z) v = v > 0.0 ? v : 0.0;
    a = std::move(z);
  }
  check_finite(a, "extractor_forward");
  return a;
}

Vec extractor_input_grad(const FeatureExtractor& f, const ExtractorTrace& trace,
                         const Vec& cotangent) {
  if (trace.pre.size() != f.layers.size()) {
    throw ShapeError("extractor_input_grad: trace does not match extractor");
  }
  Vec d = cotangent;
  for (std::size_t l = f.layers.size(); l-- > 0;) {
    const auto& layer = f.layers[l];
    if (d.size() != layer.W.cols) {
      throw ShapeError("extractor_input_grad: cotangent size mismatch");
    }
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (trace.pre[l][j] <= 0.0) d[j] = 0.0;
    }
    Vec prev(layer.W.rows, 0.0);
    for (std::size_t k = 0; k < layer.W.rows; ++k) {
      const double* wrow = layer.W.row(k);
      double s = 0.0;
      for (std::size_t j = 0; j < d.size(); ++j) s += wrow[j] * d[j];
      prev[k] = s;
    }
    d = std::move(prev);
  }
  for (double& v : d) v /= f.input_scale;
  check_finite(d, "extractor_input_grad");
  return d;
}

double stack_loss_and_grads(const std::vector<DenseLayer>& layers, const Matrix& X,
                            const std::vector<int>& labels, std::vector<DenseLayer>* grads,
                            Matrix* input_grad, const std::vector<Matrix>* dropout_masks) {
  validate_chain(layers, "stack");
  if (labels.size() != X.rows) {
    throw ShapeError("stack_loss_and_grads: label count mismatch");
  }
  const std::size_t L = layers.size();
  const std::size_t B = X.rows;
  const auto M = static_cast<int>(layers.back().W.cols);
  if (dropout_masks && dropout_masks->size() != L - 1) {
    throw ShapeError("stack_loss_and_grads: need one mask slot per hidden activation");
  }

  // Forward, keeping activations for the backward pass.
  std::vector<Matrix> acts;   // acts[l] = input to layer l
  std::vector<Matrix> pre;    // pre-activation output of layer l
  acts.reserve(L);
  pre.reserve(L);
  acts.push_back(X);
  for (std::size_t l = 0; l < L; ++l) {
    Matrix Z = matmul(acts[l], layers[l].W);
    for (std::size_t i = 0; i < Z.rows; ++i) {
      double* zrow = Z.row(i);
      for (std::size_t j = 0; j < Z.cols; ++j) zrow[j] += layers[l].b[j];
    }
    pre.push_back(Z);
    if (l + 1 < L) {
      Matrix A = pre[l];
      for (auto& v : A.data) v = v > 0.0 ? v : 0.0;
      if (dropout_masks && !(*dropout_masks)[l].empty()) {
        const Matrix& m = (*dropout_masks)[l];
        if (m.rows != A.rows || m.cols != A.cols) {
          throw ShapeError("stack_loss_and_grads: dropout mask shape mismatch");
        }
        for (std::size_t i = 0; i < A.size(); ++i) A.data[i] *= m.data[i];
      }
      acts.push_back(std::move(A));
    }
  }
  const Matrix& logits = pre.back();

  // Mean cross-entropy via log-sum-exp; always finite.
  double loss = 0.0;
  Matrix dZ(B, static_cast<std::size_t>(M));
  for (std::size_t i = 0; i < B; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= M) {
      throw DataError("stack_loss_and_grads: label " + std::to_string(y) + " out of range");
    }
    const double* zrow = logits.row(i);
    double mx = zrow[0];
    for (int j = 1; j < M; ++j) mx = std::max(mx, zrow[j]);
    double sum = 0.0;
    for (int j = 0; j < M; ++j) sum += std::exp(zrow[j] - mx);
    const double lse = mx + std::log(sum);
    loss += lse - zrow[y];
    if (grads || input_grad) {
      double* drow = dZ.row(i);
      for (int j = 0; j < M; ++j) {
        drow[j] = std::exp(zrow[j] - mx) / sum / static_cast<double>(B);
      }
      drow[y] -= 1.0 / static_cast<double>(B);
    }
  }
  loss /= static_cast<double>(B);
  if (!std::isfinite(loss)) {
    throw NumericError("stack_loss_and_grads: non-finite loss");
  }
  if (!grads && !input_grad) {
    return loss;
  }

  if (grads) {
    grads->resize(L);
  }
  Matrix d = std::move(dZ);
  for (std::size_t l = L; l-- > 0;) {
    if (grads) {
      (*grads)[l].W = matmul_at_b(acts[l], d);
      (*grads)[l].b.assign(layers[l].W.cols, 0.0);
      for (std::size_t i = 0; i < d.rows; ++i) {
        const double* drow = d.row(i);
        for (std::size_t j = 0; j < d.cols; ++j) (*grads)[l].b[j] += drow[j];
      }
    }
    if (l == 0 && !input_grad) break;
    Matrix dprev = matmul_a_bt(d, layers[l].W);
    if (l > 0) {
      if (dropout_masks && !(*dropout_masks)[l - 1].empty()) {
        const Matrix& m = (*dropout_masks)[l - 1];
        for (std::size_t i = 0; i < dprev.size(); ++i) dprev.data[i] *= m.data[i];
      }
      for (std::size_t i = 0; i < dprev.size(); ++i) {
        if (pre[l - 1].data[i] <= 0.0) dprev.data[i] = 0.0;
      }
    }
    d = std::move(dprev);
  }
  if (input_grad) {
    *input_grad = std::move(d);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Pretraining

FeatureExtractor pretrain_extractor(const Dataset& aux, const ExtractorConfig& cfg,
                                    std::uint64_t seed, TrainLog* log) {
  std::set<int> label_set;
  for (const auto& inst : aux.instances) label_set.insert(inst.label);
  if (label_set.size() < 2) {
    throw DataError("pretrain_extractor: auxiliary task needs at least 2 classes");
  }
  std::map<int, int> remap;
  int next = 0;
  for (int l : label_set) remap[l] = next++;
  const auto n_aux_classes = static_cast<int>(label_set.size());

  const std::size_t n = aux.instances.size();
  Matrix X(n, aux.input_dim);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& inst = aux.instances[i];
    if (inst.x.size() != aux.input_dim) {
      throw ShapeError("pretrain_extractor: instance dim mismatch");
    }
    for (std::size_t j = 0; j < aux.input_dim; ++j) X(i, j) = inst.x[j] / aux.scale;
    y[i] = remap.at(inst.label);
  }

  Rng rng(seed);
  Rng init_rng = rng.derive("init");
  std::vector<DenseLayer> stack;
  std::size_t prev = aux.input_dim;
  for (std::size_t h : cfg.hidden) {
    stack.push_back(init_layer(prev, h, init_rng));
    prev = h;
  }
  stack.push_back(init_layer(prev, cfg.feature_dim, init_rng));
  stack.push_back(init_layer(cfg.feature_dim, n_aux_classes, init_rng));  // throwaway head

  Rng split_rng = rng.derive("val-split");
  auto [train_idx, val_idx] = split_train_val(n, cfg.val_fraction, split_rng);
  Matrix Xtr = gather_rows(X, train_idx);
  Matrix Xval = gather_rows(X, val_idx);
  std::vector<int> ytr = gather(y, train_idx);
  std::vector<int> yval = gather(y, val_idx);

  SgdOptions opt;
  opt.lr = cfg.lr;
  opt.max_epochs = cfg.max_epochs;
  opt.patience = cfg.patience;
  opt.batch_size = cfg.batch_size;
  opt.plateau_halving = cfg.plateau_halving;
  Rng sgd_rng = rng.derive("sgd");
  TrainLog tl = sgd_train(stack, Xtr, ytr, Xval, yval, opt, sgd_rng);
  if (log) *log = tl;

  const double val_acc =
      static_cast<double>(accuracy_count(stack, Xval, yval)) / static_cast<double>(yval.size());
  if (val_acc < 2.0 / static_cast<double>(n_aux_classes)) {
    throw DataError("pretrain_extractor: auxiliary validation accuracy " +
                    std::to_string(val_acc) + " is below twice chance");
  }

  FeatureExtractor f;
  stack.pop_back();  // drop the auxiliary head
  f.layers = std::move(stack);
  f.input_scale = aux.scale;
  f.frozen = true;
  f.aux_val_accuracy = val_acc;
  f.provenance_seed = seed;
  f.validate();
  return f;
}

Vec extract_features(const FeatureExtractor& f, const Vec& x) {
  return extractor_forward(f, x);
}

Matrix extract_features_batch(const FeatureExtractor& f, const Matrix& X) {
  if (X.cols != f.input_dim()) {
    throw ShapeError("extract_features_batch: input dim mismatch");
  }
  Matrix A(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) A.data[i] = X.data[i] / f.input_scale;
  for (const auto& layer : f.layers) {
    Matrix Z = matmul(A, layer.W);
    for (std::size_t i = 0; i < Z.rows; ++i) {
      double* zrow = Z.row(i);
      for (std::size_t j = 0; j < Z.cols; ++j) {
        zrow[j] += layer.b[j];
        if (zrow[j] < 0.0) zrow[j] = 0.0;
      }
    }
    A = std::move(Z);
  }
  return A;
}

// ---------------------------------------------------------------------------
// Head training / prediction

DenseHead train_head_on_features(const Matrix& features, const std::vector<int>& labels,
                                 int num_classes, const HeadConfig& cfg, std::uint64_t seed,
                                 TrainLog* log) {
  if (cfg.layers != 1 && cfg.layers != 2) {
    throw ConfigError("head: layer count must be 1 or 2");
  }
  if (cfg.dropout < 0.0 || cfg.dropout > 0.5) {
    throw ConfigError("head: dropout must be in [0, 0.5]");
  }
  if (num_classes < 2) {
    throw ConfigError("head: need at least 2 classes");
  }
  if (labels.size() != features.rows) {
    throw ShapeError("train_head_on_features: label count mismatch");
  }
  if (features.rows < static_cast<std::size_t>(num_classes)) {
    throw DataError("train_head_on_features: fewer labeled instances than classes");
  }

  Rng rng(seed);
  Rng init_rng = rng.derive("init");
  DenseHead head;
  if (cfg.layers == 1) {
    head.layers.push_back(init_layer(features.cols, num_classes, init_rng));
    head.dropout_rate = 0.0;
  } else {
    head.layers.push_back(init_layer(features.cols, cfg.hidden, init_rng));
    head.layers.push_back(init_layer(cfg.hidden, num_classes, init_rng));
    head.dropout_rate = cfg.dropout;
  }
  if (head.param_count() > cfg.param_cap) {
    throw ConfigError("head: parameter count " + std::to_string(head.param_count()) +
                      " exceeds cap " + std::to_string(cfg.param_cap));
  }

  Rng split_rng = rng.derive("val-split");
  auto [train_idx, val_idx] = split_train_val(features.rows, cfg.val_fraction, split_rng);
  Matrix Xtr = gather_rows(features, train_idx);
  Matrix Xval = gather_rows(features, val_idx);
  std::vector<int> ytr = gather(labels, train_idx);
  std::vector<int> yval = gather(labels, val_idx);

  SgdOptions opt;
  opt.lr = cfg.lr;
  opt.max_epochs = cfg.max_epochs;
  opt.patience = cfg.patience;
  opt.batch_size = cfg.batch_size;
  opt.plateau_halving = cfg.plateau_halving;
  opt.dropout = head.dropout_rate;
  opt.dropout_activation = 0;
  Rng sgd_rng = rng.derive("sgd");
  TrainLog tl = sgd_train(head.layers, Xtr, ytr, Xval, yval, opt, sgd_rng);
  if (log) *log = tl;
  return head;
}

DenseHead train_head(const FeatureExtractor& f, const std::vector<const Instance*>& labeled,
                     const std::vector<int>& labels, int num_classes, const HeadConfig& cfg,
                     std::uint64_t seed, TrainLog* log) {
  if (labeled.size() != labels.size()) {
    throw ShapeError("train_head: instance/label count mismatch");
  }
  Matrix X = scaled_inputs(labeled, f.input_dim(), 1.0);  // raw; extractor rescales
  Matrix Z = extract_features_batch(f, X);
  return train_head_on_features(Z, labels, num_classes, cfg, seed, log);
}

void continue_training_head(DenseHead& head, const Matrix& features,
                            const std::vector<int>& labels, const HeadConfig& cfg,
                            std::uint64_t seed, TrainLog* log) {
  if (labels.size() != features.rows) {
    throw ShapeError("continue_training_head: label count mismatch");
  }
  if (features.cols != head.input_dim()) {
    throw ShapeError("continue_training_head: feature dim mismatch");
  }
  Rng rng(seed);
  Rng split_rng = rng.derive("val-split");
  auto [train_idx, val_idx] = split_train_val(features.rows, cfg.val_fraction, split_rng);
  Matrix Xtr = gather_rows(features, train_idx);
  Matrix Xval = gather_rows(features, val_idx);
  std::vector<int> ytr = gather(labels, train_idx);
  std::vector<int> yval = gather(labels, val_idx);

  SgdOptions opt;
  opt.lr = cfg.lr;
  opt.max_epochs = cfg.max_epochs;
  opt.patience = cfg.patience;
  opt.batch_size = cfg.batch_size;
  opt.plateau_halving = cfg.plateau_halving;
  opt.dropout = head.dropout_rate;
  opt.dropout_activation = 0;
  Rng sgd_rng = rng.derive("sgd");
  TrainLog tl = sgd_train(head.layers, Xtr, ytr, Xval, yval, opt, sgd_rng);
  if (log) *log = tl;
}

Prediction predict_features(const DenseHead& g, const Vec& features) {
  if (features.size() != g.input_dim()) {
    throw ShapeError("predict_features: feature dim mismatch");
  }
  Vec a = features;
  for (std::size_t l = 0; l < g.layers.size(); ++l) {
    const auto& layer = g.layers[l];
    Vec z(layer.W.cols, 0.0);
    for (std::size_t k = 0; k < layer.W.rows; ++k) {
      const double ak = a[k];
      if (ak == 0.0) continue;
      const double* wrow = layer.W.row(k);
      for (std::size_t j = 0; j < z.size(); ++j) z[j] += ak * wrow[j];
    }
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += layer.b[j];
    if (l + 1 < g.layers.size()) {
      for (double& v : z) v = v > 0.0 ? v : 0.0;
    }
    a = std::move(z);
  }
  Prediction p;
  p.y_pred = softmax(a);
  p.cls = 0;
  for (std::size_t j = 1; j < p.y_pred.size(); ++j) {
    if (p.y_pred[j] > p.y_pred[p.cls]) p.cls = static_cast<int>(j);
  }
  return p;
}

Prediction predict(const FeatureExtractor& f, const DenseHead& g, const Vec& x) {
  return predict_features(g, extract_features(f, x));
}

// ---------------------------------------------------------------------------
// Joint fine-tuning (the adversarial-retraining defense)

std::pair<FeatureExtractor, DenseHead> joint_finetune(const FeatureExtractor& f,
                                                      const DenseHead& g,
                                                      const std::vector<const Instance*>& labeled,
                                                      const std::vector<int>& labels,
                                                      const FinetuneConfig& cfg,
                                                      std::uint64_t seed, TrainLog* log) {
  if (labeled.empty()) {
    throw DataError("joint_finetune: empty labeled set");
  }
  if (labeled.size() != labels.size()) {
    throw ShapeError("joint_finetune: instance/label count mismatch");
  }
  f.validate();
  if (g.input_dim() != f.feature_dim()) {
    throw ShapeError("joint_finetune: head does not fit extractor output");
  }

  std::vector<DenseLayer> stack = f.layers;
  stack.insert(stack.end(), g.layers.begin(), g.layers.end());

  Matrix X = scaled_inputs(labeled, f.input_dim(), f.input_scale);

  Rng rng(seed);
  Rng split_rng = rng.derive("val-split");
  auto [train_idx, val_idx] = split_train_val(X.rows, cfg.val_fraction, split_rng);
  Matrix Xtr = gather_rows(X, train_idx);
  Matrix Xval = gather_rows(X, val_idx);
  std::vector<int> ytr = gather(labels, train_idx);
  std::vector<int> yval = gather(labels, val_idx);

  SgdOptions opt;
  opt.lr = cfg.lr;
  opt.max_epochs = cfg.max_epochs;
  opt.patience = cfg.patience;
  opt.batch_size = cfg.batch_size;
  opt.plateau_halving = cfg.plateau_halving;
  if (g.layers.size() == 2 && g.dropout_rate > 0.0) {
    opt.dropout = g.dropout_rate;
    opt.dropout_activation = f.layers.size();  // the head's hidden activation
  }
  Rng sgd_rng = rng.derive("sgd");
  TrainLog tl = sgd_train(stack, Xtr, ytr, Xval, yval, opt, sgd_rng);
  if (log) *log = tl;

  FeatureExtractor f2 = f;
  DenseHead g2 = g;
  for (std::size_t l = 0; l < f.layers.size(); ++l) f2.layers[l] = stack[l];
  for (std::size_t l = 0; l < g.layers.size(); ++l) g2.layers[l] = stack[f.layers.size() + l];
  f2.frozen = false;
  return {std::move(f2), std::move(g2)};
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void save_layers(const std::filesystem::path& dir, const std::vector<DenseLayer>& layers,
                 json& manifest_layers) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string wfile = "w" + std::to_string(l) + ".atf";
    const std::string bfile = "b" + std::to_string(l) + ".atf";
    save_tensor(dir / wfile, AtfTensor::from_matrix(layers[l].W));
    save_tensor(dir / bfile,
                AtfTensor{{static_cast<std::uint32_t>(layers[l].b.size())}, layers[l].b});
    manifest_layers.push_back({{"in", layers[l].W.rows},
                               {"out", layers[l].W.cols},
                               {"w", wfile},
                               {"b", bfile}});
  }
}

std::vector<DenseLayer> load_layers(const std::filesystem::path& dir, const json& manifest_layers) {
  std::vector<DenseLayer> layers;
  for (const auto& lj : manifest_layers) {
    DenseLayer l;
    l.W = load_tensor(dir / lj.at("w").get<std::string>()).to_matrix();
    l.b = std::get<std::vector<double>>(load_tensor(dir / lj.at("b").get<std::string>()).data);
    if (l.W.rows != lj.at("in").get<std::size_t>() || l.W.cols != lj.at("out").get<std::size_t>()) {
      throw IoError("checkpoint: layer shape mismatch with manifest");
    }
    layers.push_back(std::move(l));
  }
  return layers;
}

}  // namespace

void save_extractor(const std::filesystem::path& dir, const FeatureExtractor& f) {
  f.validate();
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["schema"] = "poisonlab-extractor-1";
  manifest["activation"] = "relu";
  manifest["input_scale"] = f.input_scale;
  manifest["frozen"] = f.frozen;
  manifest["aux_val_accuracy"] = f.aux_val_accuracy;
  manifest["provenance_seed"] = f.provenance_seed;
  manifest["layers"] = json::array();
  save_layers(dir, f.layers, manifest["layers"]);
  std::ofstream os(dir / "extractor.json");
  if (!os) throw IoError("save_extractor: cannot write manifest");
  os << manifest.dump(2) << "\n";
}

FeatureExtractor load_extractor(const std::filesystem::path& dir) {
  std::ifstream is(dir / "extractor.json");
  if (!is) throw IoError("load_extractor: missing manifest in " + dir.string());
  json manifest = json::parse(is);
  if (manifest.value("schema", "") != "poisonlab-extractor-1") {
    throw IoError("load_extractor: unknown manifest schema");
  }
  FeatureExtractor f;
  f.input_scale = manifest.at("input_scale").get<double>();
  f.frozen = manifest.at("frozen").get<bool>();
  f.aux_val_accuracy = manifest.at("aux_val_accuracy").get<double>();
  f.provenance_seed = manifest.at("provenance_seed").get<std::uint64_t>();
  f.layers = load_layers(dir, manifest.at("layers"));
  f.validate();
  return f;
}

void save_head(const std::filesystem::path& dir, const DenseHead& g) {
  validate_chain(g.layers, "head");
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["schema"] = "poisonlab-head-1";
  manifest["activation"] = "relu";
  manifest["dropout_rate"] = g.dropout_rate;
  manifest["layers"] = json::array();
  save_layers(dir, g.layers, manifest["layers"]);
  std::ofstream os(dir / "head.json");
  if (!os) throw IoError("save_head: cannot write manifest");
  os << manifest.dump(2) << "\n";
}

DenseHead load_head(const std::filesystem::path& dir) {
  std::ifstream is(dir / "head.json");
  if (!is) throw IoError("load_head: missing manifest in " + dir.string());
  json manifest = json::parse(is);
  if (manifest.value("schema", "") != "poisonlab-head-1") {
    throw IoError("load_head: unknown manifest schema");
  }
  DenseHead g;
  g.dropout_rate = manifest.at("dropout_rate").get<double>();
  g.layers = load_layers(dir, manifest.at("layers"));
  validate_chain(g.layers, "head");
  return g;
}

}  // namespace poisonlab
