#pragma once

#include "knotcast/data.hpp"

#include <memory>

namespace knotcast {

enum class RunMode {
  kTrain,      // batch statistics, dropout active
  kEval,       // running statistics, dropout off
  kMcDropout,  // running statistics, dropout active
};

enum class HeadType {
  kIntervals,  // exponential head: positive knot intervals
  kKneeClass,  // 3-way softmax head
};

/// Named tensor with its gradient accumulator.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
};

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 0.001;
  int epochs = 200;
  int patience = 20;        // early-stopping patience on the validation split
  double val_fraction = 0.1;
  int mc_samples = 100;
  std::string optimizer = "adam";
  std::string lr_schedule = "cosine";  // cosine | constant
  std::uint64_t seed = 0;
};

/// Per-batch intermediate state kept for backpropagation.
struct ForwardCache {
  int batch = 0;
  std::vector<Mat> im2col;        // per block
  std::vector<Mat> bn_norm;       // normalized pre-affine activations
  std::vector<Vec> bn_inv_sd;     // per-channel 1/sqrt(var + eps)
  std::vector<Mat> pre_relu;
  std::vector<Mat> dropout_mask;  // empty when dropout is off
  Mat flat;                       // flattened conv output, one column per sample
  Mat logits;
  Mat output;
};

/// 1-D convolutional regressor/classifier: four conv blocks (kernel 4,
/// stride 2, padding 1; batch norm; ReLU; dropout) with channels
/// 3 -> 4 -> 8 -> 16 -> 32, flattened into one linear layer. The interval
/// head exponentiates, so predicted knot intervals are always positive.
class ConvNet {
 public:
  ConvNet() = default;
  ConvNet(int input_columns, int outputs, HeadType head, double dropout, std::uint64_t seed);

  /// x holds `batch` samples side by side: (3, batch * input_columns).
  /// rng is required whenever dropout fires (train and mc modes).
  Mat forward(const Mat& x, int batch, RunMode mode, Rng* rng = nullptr,
              ForwardCache* cache = nullptr);
  Mat forward(const Mat& x, int batch, RunMode mode, Rng* rng = nullptr) const;

  /// Accumulates parameter gradients from d(loss)/d(logits).
  void backward(const ForwardCache& cache, const Mat& dlogits);

  void zero_grads();
  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  Param& param(const std::string& name);

  /// (channels, length) after each conv block, then the flatten width.
  std::vector<std::pair<int, int>> block_shapes() const;
  int flatten_size() const;

  int input_columns() const { return input_columns_; }
  int outputs() const { return outputs_; }
  HeadType head() const { return head_; }
  double dropout_rate() const { return dropout_; }
  void set_dropout_rate(double rate) { dropout_ = rate; }

  /// Per-variable input standardization, stored with the model.
  void set_normalization(const Vec& mean, const Vec& sd);
  const Vec& norm_mean() const { return norm_mean_; }
  const Vec& norm_sd() const { return norm_sd_; }

  // pipeline metadata carried in the model file
  int n_points = 128;
  int input_cycles = 1;

  static constexpr int kKernel = 4;
  static constexpr int kStride = 2;
  static constexpr int kPad = 1;
  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

  friend void save_model(const ConvNet& net, const std::string& path);
  friend ConvNet load_model(const std::string& path);

 private:
  int input_columns_ = 0;
  int outputs_ = 0;
  HeadType head_ = HeadType::kIntervals;
  double dropout_ = 0.2;
  std::vector<int> channels_ = {3, 4, 8, 16, 32};
  std::vector<Param> params_;   // conv W/b, bn gamma/beta, fc W/b
  std::vector<Param> buffers_;  // bn running mean/var
  Vec norm_mean_, norm_sd_;

  void init_params(std::uint64_t seed);
  Mat run(const Mat& x, int batch, RunMode mode, Rng* rng, ForwardCache* cache);
};

/// Mean absolute error between cumulative sums of the predicted intervals and
/// the true knot cycle numbers (single sample).
double loss_regression(const Vec& pred_intervals, const Vec& true_cycles);

/// Batch interval-MAE loss; fills d(loss)/d(logits) for the exponential head.
double interval_mae_loss(const Mat& intervals, const Mat& true_cycles, Mat* dlogits);

/// Batch cross-entropy on softmax probabilities; labels are class indices.
double cross_entropy_loss(const Mat& probs, const std::vector<int>& labels, Mat* dlogits);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<Param>& params) = 0;
  virtual void set_learning_rate(double lr) = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double learning_rate);

struct TrainLogEntry {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN when no validation split exists
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

/// Mini-batch training of the interval head. label_cycles is (K, N): true
/// knot cycle numbers per sample. Computes and stores input normalization,
/// seeds the output bias at the log of the mean label intervals, and early
/// stops on a held-out validation split.
TrainResult train_intervals(ConvNet& net, const std::vector<InputMatrix>& inputs,
                            const Mat& label_cycles, const TrainConfig& cfg);

/// Same machinery for the 3-way knee-class head with cross-entropy loss.
TrainResult train_classifier(ConvNet& net, const std::vector<InputMatrix>& inputs,
                             const std::vector<int>& labels, const TrainConfig& cfg);

/// Deterministic single-input prediction (eval mode): cumulative knot cycles.
Vec predict_cycles(const ConvNet& net, const InputMatrix& x);

struct McPrediction {
  Vec mean_cycles;  // per knot
  Vec sd_cycles;
  Vec lo95, hi95;   // empirical 2.5 / 97.5 percentiles, widened to hold the mean
  Mat samples;      // t_samples x K cumulative cycles
};

/// Stochastic forward passes with dropout active and frozen batch-norm
/// statistics; summarizes the per-knot predictive distribution.
McPrediction predict_mc(const ConvNet& net, const InputMatrix& x, int t_samples,
                        std::uint64_t seed);

struct KneeClassification {
  int klass = 0;  // 0-based: 0 -> C1, 1 -> C2, 2 -> C3
  Vec probabilities;
};

KneeClassification classify_knee(const ConvNet& net, const InputMatrix& x);

/// Versioned model file: JSON header plus a little-endian float32 blob.
void save_model(const ConvNet& net, const std::string& path);
ConvNet load_model(const std::string& path);

}  // namespace knotcast
