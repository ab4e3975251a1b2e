#include "knotcast/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace knotcast {

namespace {

int conv_output_length(int length) {
  return (length + 2 * ConvNet::kPad - ConvNet::kKernel) / ConvNet::kStride + 1;
}

// (C_in, B*L_in) -> (C_in*kernel, B*L_out) with zero padding at block edges.
Mat im2col(const Mat& a, int batch, int c_in, int l_in, int l_out) {
  Mat m = Mat::Zero(static_cast<Eigen::Index>(c_in) * ConvNet::kKernel,
                    static_cast<Eigen::Index>(batch) * l_out);
  for (int b = 0; b < batch; ++b) {
    for (int o = 0; o < l_out; ++o) {
      const Eigen::Index col = static_cast<Eigen::Index>(b) * l_out + o;
      for (int t = 0; t < ConvNet::kKernel; ++t) {
        const int s = o * ConvNet::kStride - ConvNet::kPad + t;
        if (s < 0 || s >= l_in) continue;
        const Eigen::Index src = static_cast<Eigen::Index>(b) * l_in + s;
        for (int ci = 0; ci < c_in; ++ci) {
          m(static_cast<Eigen::Index>(ci) * ConvNet::kKernel + t, col) = a(ci, src);
        }
      }
    }
  }
  return m;
}

// scatter-add transpose of im2col
Mat col2im(const Mat& dm, int batch, int c_in, int l_in, int l_out) {
  Mat da = Mat::Zero(c_in, static_cast<Eigen::Index>(batch) * l_in);
  for (int b = 0; b < batch; ++b) {
    for (int o = 0; o < l_out; ++o) {
      const Eigen::Index col = static_cast<Eigen::Index>(b) * l_out + o;
      for (int t = 0; t < ConvNet::kKernel; ++t) {
        const int s = o * ConvNet::kStride - ConvNet::kPad + t;
        if (s < 0 || s >= l_in) continue;
        const Eigen::Index dst = static_cast<Eigen::Index>(b) * l_in + s;
        for (int ci = 0; ci < c_in; ++ci) {
          da(ci, dst) += dm(static_cast<Eigen::Index>(ci) * ConvNet::kKernel + t, col);
        }
      }
    }
  }
  return da;
}

Mat softmax_columns(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const Vec shifted = logits.col(c).array() - logits.col(c).maxCoeff();
    const Vec e = shifted.array().exp();
    out.col(c) = e / e.sum();
  }
  return out;
}

Mat column_cumsum(const Mat& m) {
  Mat out = m;
  for (Eigen::Index r = 1; r < out.rows(); ++r) out.row(r) += out.row(r - 1);
  return out;
}

double percentile(std::vector<double> sorted, double q) {
  const std::size_t n = sorted.size();
  if (n == 1) return sorted[0];
  const double h = q * static_cast<double>(n - 1);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= n) return sorted[n - 1];
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

ConvNet::ConvNet(int input_columns, int outputs, HeadType head, double dropout,
                 std::uint64_t seed)
    : input_columns_(input_columns), outputs_(outputs), head_(head), dropout_(dropout) {
  if (input_columns < 16) {
    throw Error("ConvNet: input length must be at least 16, got " +
                std::to_string(input_columns));
  }
  if (head == HeadType::kKneeClass && outputs != 3) {
    throw Error("ConvNet: the knee-class head has exactly 3 outputs");
  }
  if (outputs < 1) throw Error("ConvNet: need at least one output");
  norm_mean_ = Vec::Zero(3);
  norm_sd_ = Vec::Ones(3);
  init_params(seed);
}

void ConvNet::init_params(std::uint64_t seed) {
  Rng rng(seed ^ 0xc0ffee);
  auto kaiming = [&](Eigen::Index rows, Eigen::Index cols, int fan_in) {
    const double bound = std::sqrt(6.0 / fan_in);
    Mat w(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) w(r, c) = rng.uniform(-bound, bound);
    }
    return w;
  };
  auto add_param = [&](const std::string& name, Mat value) {
    params_.push_back({name, std::move(value), {}});
    params_.back().grad = Mat::Zero(params_.back().value.rows(), params_.back().value.cols());
  };
  auto add_buffer = [&](const std::string& name, Mat value) {
    buffers_.push_back({name, std::move(value), {}});
  };

  for (std::size_t i = 0; i + 1 < channels_.size(); ++i) {
    const int c_in = channels_[i];
    const int c_out = channels_[i + 1];
    const std::string tag = std::to_string(i + 1);
    add_param("conv" + tag + ".w", kaiming(c_out, c_in * kKernel, c_in * kKernel));
    add_param("conv" + tag + ".b", Mat::Zero(c_out, 1));
    add_param("bn" + tag + ".gamma", Mat::Ones(c_out, 1));
    add_param("bn" + tag + ".beta", Mat::Zero(c_out, 1));
    add_buffer("bn" + tag + ".run_mean", Mat::Zero(c_out, 1));
    add_buffer("bn" + tag + ".run_var", Mat::Ones(c_out, 1));
  }
  add_param("fc.w", kaiming(outputs_, flatten_size(), flatten_size()));
  add_param("fc.b", Mat::Zero(outputs_, 1));
}

std::vector<std::pair<int, int>> ConvNet::block_shapes() const {
  std::vector<std::pair<int, int>> shapes;
  int length = input_columns_;
  for (std::size_t i = 1; i < channels_.size(); ++i) {
    length = conv_output_length(length);
    shapes.emplace_back(channels_[i], length);
  }
  return shapes;
}

int ConvNet::flatten_size() const {
  const auto shapes = block_shapes();
  return shapes.back().first * shapes.back().second;
}

Param& ConvNet::param(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  for (auto& p : buffers_) {
    if (p.name == name) return p;
  }
  throw Error("ConvNet: no parameter named '" + name + "'");
}

void ConvNet::zero_grads() {
  for (auto& p : params_) p.grad.setZero();
}

void ConvNet::set_normalization(const Vec& mean, const Vec& sd) {
  if (mean.size() != 3 || sd.size() != 3) {
    throw Error("ConvNet: normalization stats must have one entry per input variable");
  }
  norm_mean_ = mean;
  norm_sd_ = sd;
  for (Eigen::Index k = 0; k < 3; ++k) {
    if (!(norm_sd_(k) > 0.0)) norm_sd_(k) = 1.0;
  }
}

Mat ConvNet::forward(const Mat& x, int batch, RunMode mode, Rng* rng, ForwardCache* cache) {
  return run(x, batch, mode, rng, cache);
}

Mat ConvNet::forward(const Mat& x, int batch, RunMode mode, Rng* rng) const {
  if (mode == RunMode::kTrain) {
    throw Error("ConvNet: train-mode forward needs a mutable network");
  }
  // eval and mc modes leave the network untouched
  return const_cast<ConvNet*>(this)->run(x, batch, mode, rng, nullptr);
}

Mat ConvNet::run(const Mat& x, int batch, RunMode mode, Rng* rng, ForwardCache* cache) {
  if (input_columns_ == 0) throw Error("ConvNet: forward on a default-constructed network");
  if (batch < 1 || x.rows() != 3 ||
      x.cols() != static_cast<Eigen::Index>(batch) * input_columns_) {
    std::ostringstream msg;
    msg << "ConvNet: expected input 3x" << static_cast<Eigen::Index>(batch) * input_columns_
        << " (batch " << batch << " of 3x" << input_columns_ << "), got " << x.rows() << "x"
        << x.cols();
    throw Error(msg.str());
  }
  const bool dropout_active = mode != RunMode::kEval && dropout_ > 0.0;
  if (dropout_active && rng == nullptr) {
    throw Error("ConvNet: dropout is active but no random stream was provided");
  }

  const int blocks = static_cast<int>(channels_.size()) - 1;
  if (cache) {
    cache->batch = batch;
    cache->im2col.assign(blocks, {});
    cache->bn_norm.assign(blocks, {});
    cache->bn_inv_sd.assign(blocks, {});
    cache->pre_relu.assign(blocks, {});
    cache->dropout_mask.assign(blocks, {});
  }

  Mat a = x;
  for (Eigen::Index r = 0; r < 3; ++r) {
    a.row(r) = (x.row(r).array() - norm_mean_(r)) / norm_sd_(r);
  }

  int length = input_columns_;
  for (int i = 0; i < blocks; ++i) {
    const int c_in = channels_[static_cast<std::size_t>(i)];
    const int c_out = channels_[static_cast<std::size_t>(i) + 1];
    const int l_out = conv_output_length(length);
    const std::string tag = std::to_string(i + 1);

    Mat m = im2col(a, batch, c_in, length, l_out);
    Mat y = param("conv" + tag + ".w").value * m;
    y.colwise() += param("conv" + tag + ".b").value.col(0);

    // batch normalization
    Mat& run_mean = param("bn" + tag + ".run_mean").value;
    Mat& run_var = param("bn" + tag + ".run_var").value;
    const auto n = static_cast<double>(y.cols());
    Vec mean(c_out), var(c_out);
    if (mode == RunMode::kTrain) {
      mean = y.rowwise().mean();
      var = (y.colwise() - mean).array().square().rowwise().mean();
      run_mean.col(0) = (1.0 - kBnMomentum) * run_mean.col(0) + kBnMomentum * mean;
      run_var.col(0) = (1.0 - kBnMomentum) * run_var.col(0) +
                       kBnMomentum * var * (n / std::max(n - 1.0, 1.0));
    } else {
      mean = run_mean.col(0);
      var = run_var.col(0);
    }
    const Vec inv_sd = (var.array() + kBnEps).rsqrt().matrix();
    Mat norm = ((y.colwise() - mean).array().colwise() * inv_sd.array()).matrix();
    Mat z = (norm.array().colwise() *
             param("bn" + tag + ".gamma").value.col(0).array())
                .matrix();
    z.colwise() += param("bn" + tag + ".beta").value.col(0);

    Mat activated = z.cwiseMax(0.0);

    if (cache) {
      cache->im2col[static_cast<std::size_t>(i)] = std::move(m);
      cache->bn_norm[static_cast<std::size_t>(i)] = std::move(norm);
      cache->bn_inv_sd[static_cast<std::size_t>(i)] = inv_sd;
      cache->pre_relu[static_cast<std::size_t>(i)] = z;
    }

    if (dropout_active) {
      const double keep = 1.0 - dropout_;
      Mat mask(activated.rows(), activated.cols());
      for (Eigen::Index r = 0; r < mask.rows(); ++r) {
        for (Eigen::Index c = 0; c < mask.cols(); ++c) {
          mask(r, c) = rng->uniform() < keep ? 1.0 / keep : 0.0;
        }
      }
      activated = activated.cwiseProduct(mask);
      if (cache) cache->dropout_mask[static_cast<std::size_t>(i)] = std::move(mask);
    }

    a = std::move(activated);
    length = l_out;
  }

  // flatten: each sample's (C, L) block becomes one column, channel-major
  const int c_last = channels_.back();
  Mat flat(static_cast<Eigen::Index>(c_last) * length, batch);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < c_last; ++c) {
      flat.col(b).segment(static_cast<Eigen::Index>(c) * length, length) =
          a.row(c).segment(static_cast<Eigen::Index>(b) * length, length).transpose();
    }
  }

  Mat logits = param("fc.w").value * flat;
  logits.colwise() += param("fc.b").value.col(0);

  Mat output;
  if (head_ == HeadType::kIntervals) {
    output = logits.array().exp().matrix();
  } else {
    output = softmax_columns(logits);
  }
  if (cache) {
    cache->flat = std::move(flat);
    cache->logits = logits;
    cache->output = output;
  }
  return output;
}

void ConvNet::backward(const ForwardCache& cache, const Mat& dlogits) {
  const int batch = cache.batch;
  const int blocks = static_cast<int>(channels_.size()) - 1;

  param("fc.w").grad += dlogits * cache.flat.transpose();
  param("fc.b").grad.col(0) += dlogits.rowwise().sum();
  Mat dflat = param("fc.w").value.transpose() * dlogits;

  // unflatten
  const auto shapes = block_shapes();
  const int c_last = shapes.back().first;
  const int l_last = shapes.back().second;
  Mat da(c_last, static_cast<Eigen::Index>(batch) * l_last);
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < c_last; ++c) {
      da.row(c).segment(static_cast<Eigen::Index>(b) * l_last, l_last) =
          dflat.col(b).segment(static_cast<Eigen::Index>(c) * l_last, l_last).transpose();
    }
  }

  for (int i = blocks - 1; i >= 0; --i) {
    const std::string tag = std::to_string(i + 1);
    const auto idx = static_cast<std::size_t>(i);
    const int c_in = channels_[idx];
    const int l_out = i + 1 < blocks ? shapes[idx].second : l_last;
    const int l_in = i > 0 ? shapes[idx - 1].second : input_columns_;

    if (cache.dropout_mask[idx].size() > 0) {
      da = da.cwiseProduct(cache.dropout_mask[idx]);
    }
    da = da.cwiseProduct((cache.pre_relu[idx].array() > 0.0).cast<double>().matrix());

    // batch-norm backward through the batch statistics
    const Mat& norm = cache.bn_norm[idx];
    const Vec& inv_sd = cache.bn_inv_sd[idx];
    param("bn" + tag + ".gamma").grad.col(0) += da.cwiseProduct(norm).rowwise().sum();
    param("bn" + tag + ".beta").grad.col(0) += da.rowwise().sum();

    const Mat dnorm = (da.array().colwise() *
                       param("bn" + tag + ".gamma").value.col(0).array())
                          .matrix();
    const auto n = static_cast<double>(dnorm.cols());
    const Vec sum_dnorm = dnorm.rowwise().sum();
    const Vec sum_dnorm_norm = dnorm.cwiseProduct(norm).rowwise().sum();
    Mat dy = (dnorm * n).colwise() - sum_dnorm;
    dy -= (norm.array().colwise() * sum_dnorm_norm.array()).matrix();
    dy = (dy.array().colwise() * (inv_sd.array() / n)).matrix();

    param("conv" + tag + ".w").grad += dy * cache.im2col[idx].transpose();
    param("conv" + tag + ".b").grad.col(0) += dy.rowwise().sum();
    const Mat dm = param("conv" + tag + ".w").value.transpose() * dy;
    da = col2im(dm, batch, c_in, l_in, l_out);
  }
}

double loss_regression(const Vec& pred_intervals, const Vec& true_cycles) {
  if (pred_intervals.size() != true_cycles.size()) {
    throw Error("loss_regression: prediction and label lengths differ");
  }
  double acc = 0.0, cum = 0.0;
  for (Eigen::Index k = 0; k < pred_intervals.size(); ++k) {
    cum += pred_intervals(k);
    acc += std::abs(cum - true_cycles(k));
  }
  return acc / static_cast<double>(pred_intervals.size());
}

double interval_mae_loss(const Mat& intervals, const Mat& true_cycles, Mat* dlogits) {
  if (intervals.rows() != true_cycles.rows() || intervals.cols() != true_cycles.cols()) {
    throw Error("interval_mae_loss: shape mismatch between predictions and labels");
  }
  const Mat cycles = column_cumsum(intervals);
  const auto count = static_cast<double>(cycles.size());
  const double loss = (cycles - true_cycles).cwiseAbs().sum() / count;
  if (dlogits) {
    Mat dcycles = ((cycles - true_cycles).array().sign() / count).matrix();
    // h_k feeds every later cumulative sum: reverse cumulative gradient
    Mat dintervals = dcycles;
    for (Eigen::Index r = dintervals.rows() - 2; r >= 0; --r) {
      dintervals.row(r) += dintervals.row(r + 1);
    }
    *dlogits = dintervals.cwiseProduct(intervals);  // d exp(z)/dz = exp(z)
  }
  return loss;
}

double cross_entropy_loss(const Mat& probs, const std::vector<int>& labels, Mat* dlogits) {
  if (static_cast<Eigen::Index>(labels.size()) != probs.cols()) {
    throw Error("cross_entropy_loss: one label per column required");
  }
  const auto batch = static_cast<double>(probs.cols());
  double loss = 0.0;
  for (Eigen::Index c = 0; c < probs.cols(); ++c) {
    const int y = labels[static_cast<std::size_t>(c)];
    if (y < 0 || y >= probs.rows()) throw Error("cross_entropy_loss: label out of range");
    loss -= std::log(std::max(probs(y, c), 1e-300));
  }
  if (dlogits) {
    *dlogits = probs / batch;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      (*dlogits)(labels[static_cast<std::size_t>(c)], c) -= 1.0 / batch;
    }
  }
  return loss / batch;
}

namespace {

class Sgd final : public Optimizer {
 public:
  explicit Sgd(double lr) : lr_(lr) {}
  void step(std::vector<Param>& params) override {
    for (auto& p : params) p.value -= lr_ * p.grad;
  }
  void set_learning_rate(double lr) override { lr_ = lr; }

 private:
  double lr_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double lr) : lr_(lr) {}
  void step(std::vector<Param>& params) override {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      m_[k] = kBeta1 * m_[k] + (1.0 - kBeta1) * params[k].grad;
      v_[k] = kBeta2 * v_[k] + (1.0 - kBeta2) * params[k].grad.cwiseProduct(params[k].grad);
      const Mat mhat = m_[k] / bc1;
      const Mat vhat = v_[k] / bc2;
      params[k].value -=
          lr_ * mhat.cwiseQuotient((vhat.array().sqrt() + kEps).matrix());
    }
  }
  void set_learning_rate(double lr) override { lr_ = lr; }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace

std::unique_ptr<Optimizer> make_optimizer(const std::string& name, double learning_rate) {
  if (name == "adam") return std::make_unique<Adam>(learning_rate);
  if (name == "sgd") return std::make_unique<Sgd>(learning_rate);
  throw Error("unknown optimizer '" + name + "'");
}

namespace {

Mat assemble_batch(const std::vector<InputMatrix>& inputs, const std::vector<int>& order,
                   std::size_t first, std::size_t count) {
  const Eigen::Index cols = inputs[0].x.cols();
  Mat x(3, static_cast<Eigen::Index>(count) * cols);
  for (std::size_t k = 0; k < count; ++k) {
    x.middleCols(static_cast<Eigen::Index>(k) * cols, cols) =
        inputs[static_cast<std::size_t>(order[first + k])].x;
  }
  return x;
}

struct Snapshot {
  std::vector<Mat> values;
};

Snapshot take_snapshot(ConvNet& net) {
  Snapshot s;
  for (const auto& p : net.params()) s.values.push_back(p.value);
  for (const char* tag : {"1", "2", "3", "4"}) {
    s.values.push_back(net.param(std::string("bn") + tag + ".run_mean").value);
    s.values.push_back(net.param(std::string("bn") + tag + ".run_var").value);
  }
  return s;
}

void restore_snapshot(ConvNet& net, const Snapshot& s) {
  std::size_t k = 0;
  for (auto& p : net.params()) p.value = s.values[k++];
  for (const char* tag : {"1", "2", "3", "4"}) {
    net.param(std::string("bn") + tag + ".run_mean").value = s.values[k++];
    net.param(std::string("bn") + tag + ".run_var").value = s.values[k++];
  }
}

// Shared mini-batch loop; `batch_loss` runs the head-specific loss given the
// forward output and the batch sample indices, filling dlogits when training.
TrainResult train_loop(ConvNet& net, const std::vector<InputMatrix>& inputs,
                       const TrainConfig& cfg,
                       const std::function<double(const Mat&, const std::vector<int>&,
                                                  std::size_t, std::size_t, Mat*)>& batch_loss) {
  const int n = static_cast<int>(inputs.size());
  if (n == 0) throw Error("train: empty input set");
  for (const auto& in : inputs) {
    if (in.x.cols() != net.input_columns()) {
      throw Error("train: input width " + std::to_string(in.x.cols()) +
                  " does not match the network's " + std::to_string(net.input_columns()));
    }
  }
  if (cfg.batch_size < 1 || cfg.learning_rate < 0.0 || cfg.epochs < 1) {
    throw Error("train: bad batch size, learning rate, or epoch count");
  }

  Rng rng(cfg.seed ^ 0x7261696e);
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) order[static_cast<std::size_t>(k)] = k;
  rng.shuffle(order);

  const int val_count = cfg.val_fraction > 0.0 && n >= 10
                            ? std::max(1, static_cast<int>(std::lround(cfg.val_fraction * n)))
                            : 0;
  std::vector<int> val_set(order.end() - val_count, order.end());
  std::vector<int> train_set(order.begin(), order.end() - val_count);

  // per-variable standardization from the training split
  Vec mean = Vec::Zero(3), acc_sq = Vec::Zero(3);
  double count = 0.0;
  for (const int idx : train_set) {
    const Mat& x = inputs[static_cast<std::size_t>(idx)].x;
    mean += x.rowwise().sum();
    count += static_cast<double>(x.cols());
  }
  mean /= count;
  for (const int idx : train_set) {
    const Mat& x = inputs[static_cast<std::size_t>(idx)].x;
    acc_sq += (x.colwise() - mean).array().square().rowwise().sum().matrix();
  }
  net.set_normalization(mean, (acc_sq / count).array().sqrt());

  auto optimizer = make_optimizer(cfg.optimizer, cfg.learning_rate);

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  Snapshot best = take_snapshot(net);
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.lr_schedule == "cosine") {
      const double progress =
          cfg.epochs > 1 ? static_cast<double>(epoch - 1) / (cfg.epochs - 1) : 0.0;
      optimizer->set_learning_rate(cfg.learning_rate *
                                   (0.05 + 0.95 * 0.5 * (1.0 + std::cos(M_PI * progress))));
    } else if (cfg.lr_schedule != "constant") {
      throw Error("train: unknown lr schedule '" + cfg.lr_schedule + "'");
    }
    Rng epoch_rng = rng.fork(static_cast<std::uint64_t>(epoch));
    epoch_rng.shuffle(train_set);

    double train_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < train_set.size(); start += cfg.batch_size) {
      const std::size_t b = std::min<std::size_t>(cfg.batch_size, train_set.size() - start);
      const Mat x = assemble_batch(inputs, train_set, start, b);
      Rng drop_rng = epoch_rng.fork(start);
      ForwardCache cache;
      const Mat out = net.forward(x, static_cast<int>(b), RunMode::kTrain, &drop_rng, &cache);
      Mat dlogits;
      const double loss = batch_loss(out, train_set, start, b, &dlogits);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "train: non-finite loss " << loss << " at epoch " << epoch << ", batch offset "
            << start;
        throw Error(msg.str());
      }
      net.zero_grads();
      net.backward(cache, dlogits);
      optimizer->step(net.params());
      train_loss += loss * static_cast<double>(b);
      seen += b;
    }
    train_loss /= static_cast<double>(seen);

    double val_loss = std::numeric_limits<double>::quiet_NaN();
    if (val_count > 0) {
      const Mat x = assemble_batch(inputs, val_set, 0, val_set.size());
      const Mat out = net.forward(x, static_cast<int>(val_set.size()), RunMode::kEval);
      val_loss = batch_loss(out, val_set, 0, val_set.size(), nullptr);
      if (val_loss < result.best_val_loss) {
        result.best_val_loss = val_loss;
        result.best_epoch = epoch;
        best = take_snapshot(net);
        since_best = 0;
      } else {
        ++since_best;
      }
    }
    result.log.push_back({epoch, train_loss, val_loss});
    if (val_count > 0 && since_best >= cfg.patience) break;
  }

  if (val_count > 0) {
    restore_snapshot(net, best);
  } else {
    result.best_epoch = static_cast<int>(result.log.size());
  }
  return result;
}

}  // namespace

TrainResult train_intervals(ConvNet& net, const std::vector<InputMatrix>& inputs,
                            const Mat& label_cycles, const TrainConfig& cfg) {
  if (net.head() != HeadType::kIntervals) {
    throw Error("train_intervals: network does not have the interval head");
  }
  if (label_cycles.cols() != static_cast<Eigen::Index>(inputs.size()) ||
      label_cycles.rows() != net.outputs()) {
    throw Error("train_intervals: labels must be (outputs x inputs)");
  }

  // seed the output bias at the log of the mean label intervals so the first
  // predictions start at the fleet-scale cycle counts
  Vec mean_intervals = Vec::Zero(net.outputs());
  for (Eigen::Index c = 0; c < label_cycles.cols(); ++c) {
    double prev = 0.0;
    for (Eigen::Index r = 0; r < label_cycles.rows(); ++r) {
      mean_intervals(r) += label_cycles(r, c) - prev;
      prev = label_cycles(r, c);
    }
  }
  mean_intervals /= static_cast<double>(label_cycles.cols());
  for (Eigen::Index r = 0; r < net.outputs(); ++r) {
    net.param("fc.b").value(r, 0) = std::log(std::max(mean_intervals(r), 1e-3));
  }

  return train_loop(net, inputs, cfg,
                    [&](const Mat& out, const std::vector<int>& order, std::size_t first,
                        std::size_t count, Mat* dlogits) {
                      Mat labels(net.outputs(), static_cast<Eigen::Index>(count));
                      for (std::size_t k = 0; k < count; ++k) {
                        labels.col(static_cast<Eigen::Index>(k)) =
                            label_cycles.col(order[first + k]);
                      }
                      return interval_mae_loss(out, labels, dlogits);
                    });
}

TrainResult train_classifier(ConvNet& net, const std::vector<InputMatrix>& inputs,
                             const std::vector<int>& labels, const TrainConfig& cfg) {
  if (net.head() != HeadType::kKneeClass) {
    throw Error("train_classifier: network does not have the knee-class head");
  }
  if (labels.size() != inputs.size()) {
    throw Error("train_classifier: one label per input required");
  }
  return train_loop(net, inputs, cfg,
                    [&](const Mat& out, const std::vector<int>& order, std::size_t first,
                        std::size_t count, Mat* dlogits) {
                      std::vector<int> batch_labels(count);
                      for (std::size_t k = 0; k < count; ++k) {
                        batch_labels[k] = labels[static_cast<std::size_t>(order[first + k])];
                      }
                      return cross_entropy_loss(out, batch_labels, dlogits);
                    });
}

Vec predict_cycles(const ConvNet& net, const InputMatrix& x) {
  if (net.head() != HeadType::kIntervals) {
    throw Error("predict_cycles: network does not have the interval head");
  }
  const Mat h = net.forward(x.x, 1, RunMode::kEval);
  return column_cumsum(h).col(0);
}

McPrediction predict_mc(const ConvNet& net, const InputMatrix& x, int t_samples,
                        std::uint64_t seed) {
  if (t_samples < 2) throw Error("predict_mc: need at least 2 stochastic passes");
  const Eigen::Index k = net.outputs();
  McPrediction out;
  out.samples.resize(t_samples, k);
  Rng root(seed ^ 0x6d63);
  for (int pass = 0; pass < t_samples; ++pass) {
    Rng pass_rng = root.fork(static_cast<std::uint64_t>(pass));
    const Mat h = net.forward(x.x, 1, RunMode::kMcDropout, &pass_rng);
    out.samples.row(pass) = column_cumsum(h).col(0).transpose();
  }
  out.mean_cycles = out.samples.colwise().mean().transpose();
  out.sd_cycles.resize(k);
  out.lo95.resize(k);
  out.hi95.resize(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    out.sd_cycles(j) = std::sqrt(variance_of(out.samples.col(j)));
    std::vector<double> sorted(out.samples.col(j).data(),
                               out.samples.col(j).data() + t_samples);
    std::sort(sorted.begin(), sorted.end());
    if (sorted.front() == sorted.back()) {  // degenerate: every pass agreed
      out.mean_cycles(j) = sorted.front();
      out.lo95(j) = sorted.front();
      out.hi95(j) = sorted.front();
      out.sd_cycles(j) = 0.0;
      continue;
    }
    out.lo95(j) = std::min(percentile(sorted, 0.025), out.mean_cycles(j));
    out.hi95(j) = std::max(percentile(sorted, 0.975), out.mean_cycles(j));
  }
  return out;
}

KneeClassification classify_knee(const ConvNet& net, const InputMatrix& x) {
  if (net.head() != HeadType::kKneeClass) {
    throw Error("classify_knee: network does not have the knee-class head");
  }
  KneeClassification result;
  result.probabilities = net.forward(x.x, 1, RunMode::kEval).col(0);
  result.probabilities.maxCoeff(&result.klass);
  return result;
}

void save_model(const ConvNet& net, const std::string& path) {
  nlohmann::json header;
  header["schema_version"] = 1;
  header["head"] = net.head_ == HeadType::kIntervals ? "intervals" : "knee_class";
  header["outputs"] = net.outputs_;
  header["input_columns"] = net.input_columns_;
  header["n_points"] = net.n_points;
  header["input_cycles"] = net.input_cycles;
  header["dropout"] = net.dropout_;
  header["channels"] = net.channels_;
  header["norm_mean"] = std::vector<double>(net.norm_mean_.data(), net.norm_mean_.data() + 3);
  header["norm_sd"] = std::vector<double>(net.norm_sd_.data(), net.norm_sd_.data() + 3);
  nlohmann::json tensors = nlohmann::json::array();
  auto describe = [&](const Param& p) {
    tensors.push_back({{"name", p.name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  };
  for (const auto& p : net.params_) describe(p);
  for (const auto& p : net.buffers_) describe(p);
  header["tensors"] = tensors;

  const std::string head_bytes = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("save_model: cannot write " + path);
  out.write("KCM1", 4);
  const auto len = static_cast<std::uint32_t>(head_bytes.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(head_bytes.data(), static_cast<std::streamsize>(head_bytes.size()));
  auto dump = [&](const Param& p) {
    for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
      for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
        const auto v = static_cast<float>(p.value(r, c));
        out.write(reinterpret_cast<const char*>(&v), 4);
      }
    }
  };
  for (const auto& p : net.params_) dump(p);
  for (const auto& p : net.buffers_) dump(p);
}

ConvNet load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_model: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "KCM1", 4) != 0) {
    throw Error("load_model: " + path + " is not a model file");
  }
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  std::string head_bytes(len, '\0');
  in.read(head_bytes.data(), len);
  if (!in) throw Error("load_model: truncated header in " + path);
  const nlohmann::json header = nlohmann::json::parse(head_bytes);
  if (header.at("schema_version").get<int>() != 1) {
    throw Error("load_model: unsupported schema version in " + path);
  }

  const std::string head_name = header.at("head").get<std::string>();
  ConvNet net(header.at("input_columns").get<int>(), header.at("outputs").get<int>(),
              head_name == "intervals" ? HeadType::kIntervals : HeadType::kKneeClass,
              header.at("dropout").get<double>(), /*seed=*/0);
  net.n_points = header.at("n_points").get<int>();
  net.input_cycles = header.at("input_cycles").get<int>();
  const auto mean = header.at("norm_mean").get<std::vector<double>>();
  const auto sd = header.at("norm_sd").get<std::vector<double>>();
  net.set_normalization(Eigen::Map<const Vec>(mean.data(), 3),
                        Eigen::Map<const Vec>(sd.data(), 3));

  for (const auto& t : header.at("tensors")) {
    Param& p = net.param(t.at("name").get<std::string>());
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    if (p.value.rows() != rows || p.value.cols() != cols) {
      throw Error("load_model: tensor shape mismatch for " + p.name + " in " + path);
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      for (Eigen::Index r = 0; r < rows; ++r) {
        float v = 0.0f;
        in.read(reinterpret_cast<char*>(&v), 4);
        p.value(r, c) = static_cast<double>(v);
      }
    }
  }
  if (!in) throw Error("load_model: truncated tensor data in " + path);
  return net;
}

}  // namespace knotcast
