#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/loss.hpp"
#include "voxseg/model.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg::training {

// One training example: multi-channel input patch and one-hot class target.
template <typename T>
struct Sample {
  Tensor4<T> input;
  Tensor4<T> target;
};

// Adadelta keeps running averages of squared gradients and squared updates;
// no learning rate is involved.
template <typename T>
class Adadelta {
 public:
  Adadelta(std::size_t n, T rho, T epsilon) : rho_(rho), eps_(epsilon), eg2_(n, T(0)), edx2_(n, T(0)) {
    if (!(rho > T(0) && rho < T(1))) throw ValidationError("adadelta rho must be in (0, 1)");
    if (!(epsilon > T(0))) throw ValidationError("adadelta epsilon must be > 0");
  }

  void step(std::vector<T>& theta, const std::vector<T>& grad) {
    if (theta.size() != eg2_.size() || grad.size() != eg2_.size())
      throw ValidationError("adadelta state size does not match parameter count");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T g = grad[i];
      eg2_[i] = rho_ * eg2_[i] + (T(1) - rho_) * g * g;
      const T dx = -std::sqrt(edx2_[i] + eps_) / std::sqrt(eg2_[i] + eps_) * g;
      edx2_[i] = rho_ * edx2_[i] + (T(1) - rho_) * dx * dx;
      theta[i] += dx;
    }
  }

  const std::vector<T>& grad_average() const { return eg2_; }
  const std::vector<T>& update_average() const { return edx2_; }

 private:
  T rho_, eps_;
  std::vector<T> eg2_, edx2_;
};

struct ValidationMetrics {
  double l1 = 0.0;
  double error_rate = 0.0;
  double monitored() const { return l1 + error_rate; }
};

// Accumulates the early-stopping quantities over probability/target pairs:
// mean absolute probability error and voxelwise argmax error rate.
// Argmax ties resolve to the lower class index.
struct MetricAccumulator {
  double abs_sum = 0.0;
  std::size_t elements = 0;
  std::size_t mislabeled = 0;
  std::size_t voxels = 0;

  template <typename T>
  void add(const Tensor4<T>& prob, const Tensor4<T>& target) {
    if (prob.shape() != target.shape())
      throw ValidationError("probability and target shapes differ in metric accumulation");
    const int C = prob.channels();
    const std::size_t V = prob.voxels();
    for (int c = 0; c < C; ++c) {
      const T* pc = prob.channel(c);
      const T* tc = target.channel(c);
      for (std::size_t v = 0; v < V; ++v)
        abs_sum += std::abs(static_cast<double>(pc[v]) - static_cast<double>(tc[v]));
    }
    elements += static_cast<std::size_t>(C) * V;
    for (std::size_t v = 0; v < V; ++v) {
      int pred = 0, truth = 0;
      for (int c = 1; c < C; ++c) {
        if (static_cast<double>(prob.channel(c)[v]) > static_cast<double>(prob.channel(pred)[v])) pred = c;
        if (static_cast<double>(target.channel(c)[v]) > static_cast<double>(target.channel(truth)[v])) truth = c;
      }
      if (pred != truth) ++mislabeled;
    }
    voxels += V;
  }

  ValidationMetrics finalize() const {
    if (elements == 0) throw ValidationError("no samples accumulated for validation metrics");
    ValidationMetrics m;
    m.l1 = abs_sum / static_cast<double>(elements);
    m.error_rate = static_cast<double>(mislabeled) / static_cast<double>(voxels);
    return m;
  }
};

template <typename T>
ValidationMetrics validation_metrics(const model::Network<T>& net, const std::vector<Sample<T>>& samples) {
  MetricAccumulator acc;
  typename model::Network<T>::Workspace ws;
  for (const Sample<T>& s : samples) acc.add(net.forward(s.input, ws), s.target);
  return acc.finalize();
}

struct TrainConfig {
  int batch_size = 16;
  int patience = 8;
  int max_epochs = 200;
  double rho = 0.95;
  double epsilon = 1e-6;
  std::string checkpoint_path;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (patience < 1) throw ValidationError("patience must be >= 1");
    if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
    if (!(rho > 0.0 && rho < 1.0)) throw ValidationError("rho must be in (0, 1)");
    if (!(epsilon > 0.0)) throw ValidationError("epsilon must be > 0");
  }
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_l1 = 0.0;
  double val_error_rate = 0.0;
  double monitored = 0.0;
};

struct TrainHistory {
  std::vector<EpochRow> rows;
  int best_epoch = 0;
  double best_monitored = std::numeric_limits<double>::infinity();
  bool early_stopped = false;

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << "epoch,train_loss,val_l1,val_error_rate,monitored\n";
    f.precision(12);
    for (const EpochRow& r : rows)
      f << r.epoch << ',' << r.train_loss << ',' << r.val_l1 << ',' << r.val_error_rate << ','
        << r.monitored << '\n';
    if (!f.good()) throw IoError("failed while writing '" + path + "'");
  }

  nlohmann::json to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const EpochRow& r : rows)
      rows_j.push_back({{"epoch", r.epoch},
                        {"train_loss", r.train_loss},
                        {"val_l1", r.val_l1},
                        {"val_error_rate", r.val_error_rate},
                        {"monitored", r.monitored}});
    return {{"best_epoch", best_epoch},
            {"best_monitored", best_monitored},
            {"early_stopped", early_stopped},
            {"epochs", std::move(rows_j)}};
  }
};

// Minibatch training with Adadelta and early stopping on the validation
// monitored quantity (L1 + error rate; improvement = strict decrease).
// The network is left holding the best-epoch weights.
template <typename T>
TrainHistory train(model::Network<T>& net, const std::vector<Sample<T>>& train_set,
                   const std::vector<Sample<T>>& val_set, const TrainConfig& cfg,
                   const loss::FocalConfig<T>& focal) {
  cfg.validate();
  focal.validate(net.config().num_classes);
  if (train_set.empty()) throw ValidationError("training set is empty");
  if (val_set.empty()) throw ValidationError("validation set is empty");

  const std::size_t n = train_set.size();
  Rng shuffle_rng(Rng::mix(cfg.seed, "train/shuffle"));
  Rng dropout_rng(Rng::mix(cfg.seed, "train/dropout"));
  Adadelta<T> opt(net.parameter_count(), static_cast<T>(cfg.rho), static_cast<T>(cfg.epsilon));

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  TrainHistory hist;
  std::vector<T> best_theta = net.parameters();
  int since_best = 0;

  typename model::Network<T>::Workspace ws;
  std::vector<T> grad(net.parameter_count(), T(0));
  Tensor4<T> dprob;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      std::fill(grad.begin(), grad.end(), T(0));
      for (std::size_t j = start; j < stop; ++j) {
        const Sample<T>& s = train_set[order[j]];
        const Tensor4<T>& prob = net.forward_train(s.input, ws, &dropout_rng);
        const double l = static_cast<double>(loss::focal_loss(prob, s.target, focal));
        if (!std::isfinite(l))
          throw Error("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                      std::to_string(start / static_cast<std::size_t>(cfg.batch_size)));
        loss_sum += l;
        loss::focal_loss_grad(prob, s.target, focal, dprob);
        net.backward(dprob, ws, grad);
      }
      const T scale = T(1) / static_cast<T>(stop - start);
      for (T& g : grad) g *= scale;
      opt.step(net.parameters(), grad);
    }

    const ValidationMetrics vm = validation_metrics(net, val_set);
    EpochRow row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(n);
    row.val_l1 = vm.l1;
    row.val_error_rate = vm.error_rate;
    row.monitored = vm.monitored();
    hist.rows.push_back(row);

    if (row.monitored < hist.best_monitored) {
      hist.best_monitored = row.monitored;
      hist.best_epoch = epoch;
      best_theta = net.parameters();
      since_best = 0;
      if (!cfg.checkpoint_path.empty()) net.save_weights(cfg.checkpoint_path);
    } else {
      ++since_best;
      if (since_best >= cfg.patience) {
        hist.early_stopped = true;
        break;
      }
    }
  }

  net.parameters() = best_theta;
  return hist;
}

}  // namespace voxseg::training
