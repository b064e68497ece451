// BCE training loop with step-decay schedule, Adam or plain SGD, and
// resumable checkpoints.
#pragma once

#include "bcosvit/checkpoint.hpp"
#include "bcosvit/dataset.hpp"

#include <iomanip>
#include <iostream>
#include <numeric>

namespace bcosvit {

/// Mean over classes of the clamped binary cross-entropy against a one-hot target.
inline double bce_loss(const Tensor<double>& logits, std::size_t label) {
  if (label >= logits.numel()) throw Error("bce_loss: label out of range");
  Graph<double> g;
  Tensor<double> t(logits.dims());
  t[label] = 1;
  return g.value(ag::bce_with_logits(g, g.constant(logits), t))[0];
}

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 1e-3;  // the full-scale schedule uses 2.5e-4
  std::size_t decay_epoch = 18;
  double decay_factor = 0.1;
  std::size_t batch_size = 64;
  std::string optimiser = "adam";  // adam | sgd
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch size must be positive");
    if (decay_epoch >= epochs) throw ConfigError("decay epoch must be before the last epoch");
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (optimiser != "adam" && optimiser != "sgd") throw ConfigError("optimiser must be adam or sgd");
  }

  double lr_at(std::size_t epoch) const { return epoch >= decay_epoch ? lr * decay_factor : lr; }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("train.epochs", std::to_string(epochs));
    kv.set("train.lr", fmt_num(lr));
    kv.set("train.decay_epoch", std::to_string(decay_epoch));
    kv.set("train.decay_factor", fmt_num(decay_factor));
    kv.set("train.batch_size", std::to_string(batch_size));
    kv.set("train.optimiser", optimiser);
    kv.set("train.seed", std::to_string(seed));
    return kv;
  }
  static TrainConfig from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.epochs = kv.count("train.epochs", c.epochs);
    c.lr = kv.num("train.lr", c.lr);
    c.decay_epoch = kv.count("train.decay_epoch", c.decay_epoch);
    c.decay_factor = kv.num("train.decay_factor", c.decay_factor);
    c.batch_size = kv.count("train.batch_size", c.batch_size);
    c.optimiser = kv.str("train.optimiser", c.optimiser);
    c.seed = kv.count("train.seed", c.seed);
    c.validate();
    return c;
  }
};

/// Adam (or SGD when `sgd`) over a ParameterSet, state keyed by parameter name.
class Optimiser {
 public:
  explicit Optimiser(const TrainConfig& c) : cfg_(c) {}

  void step(ParameterSet<float>& params, const std::map<std::string, Tensor<float>>& grads, double lr) {
    ++steps_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1 - std::pow(b1, double(steps_)), c2 = 1 - std::pow(b2, double(steps_));
    for (auto& [name, p] : params) {
      const Tensor<float>& g = grads.at(name);
      if (cfg_.optimiser == "sgd") {
        for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= float(lr * g[i]);
        continue;
      }
      auto& m = state(m_, name, p.dims());
      auto& v = state(v_, name, p.dims());
      for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = float(b1 * m[i] + (1 - b1) * g[i]);
        v[i] = float(b2 * v[i] + (1 - b2) * double(g[i]) * g[i]);
        p[i] -= float(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps));
      }
    }
  }

  std::uint64_t steps() const { return steps_; }

  void save(Checkpoint& ck) const {
    for (auto& [k, t] : m_) ck.entries.emplace_back("optim.m." + k, t);
    for (auto& [k, t] : v_) ck.entries.emplace_back("optim.v." + k, t);
    ck.config.set("state.steps", std::to_string(steps_));
  }
  void load(const Checkpoint& ck) {
    m_.clear();
    v_.clear();
    for (auto& [k, t] : ck.entries) {
      if (k.rfind("optim.m.", 0) == 0) m_[k.substr(8)] = t;
      if (k.rfind("optim.v.", 0) == 0) v_[k.substr(8)] = t;
    }
    steps_ = ck.config.count("state.steps", 0);
  }

 private:
  static Tensor<float>& state(std::map<std::string, Tensor<float>>& s, const std::string& name, const Dims& d) {
    auto it = s.find(name);
    if (it == s.end()) it = s.emplace(name, Tensor<float>(d)).first;
    return it->second;
  }

  TrainConfig cfg_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Tensor<float>> m_, v_;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0, train_loss = 0, val_acc = 0;
};

inline std::string format_epoch(const EpochLog& e) {
  std::ostringstream os;
  os << "epoch=" << e.epoch << " lr=" << fmt_num(e.lr) << " train_loss=" << std::setprecision(6) << e.train_loss
     << " val_acc=" << std::setprecision(4) << e.val_acc;
  return os.str();
}

/// Order in which training samples are visited in a given epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(ShapesDataset::splitmix(seed * 1000003u + epoch));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

inline Tensor<float> one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
  Tensor<float> t(Dims{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t(i, labels[i]) = 1;
  return t;
}

/// Logits [count x M] for a split, evaluated in batches.
inline Tensor<float> predict(const BcosViT<float>& m, const ShapesDataset& data, Split split,
                             std::vector<std::size_t>* labels = nullptr, std::size_t batch = 128) {
  const std::size_t n = data.size(split);
  Tensor<float> out(Dims{n, m.config().classes});
  for (std::size_t s = 0; s < n; s += batch) {
    std::vector<std::size_t> idx(std::min(batch, n - s));
    std::iota(idx.begin(), idx.end(), s);
    auto [x, y] = data.batch(split, idx);
    Tensor<float> logits = forward(m, x);
    std::copy(logits.values().begin(), logits.values().end(), out.data() + s * m.config().classes);
    if (labels) labels->insert(labels->end(), y.begin(), y.end());
  }
  return out;
}

inline std::size_t argmax_row(const Tensor<float>& t, std::size_t row) {
  const std::size_t c = t.cols();
  const float* r = t.data() + row * c;
  return std::size_t(std::max_element(r, r + c) - r);
}

inline double accuracy(const BcosViT<float>& m, const ShapesDataset& data, Split split) {
  std::vector<std::size_t> labels;
  Tensor<float> logits = predict(m, data, split, &labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += argmax_row(logits, i) == labels[i];
  return double(correct) / double(labels.size());
}

/// One optimisation step on one batch; returns the batch loss.
inline double train_step(BcosViT<float>& m, Optimiser& opt, const Tensor<float>& x,
                         const std::vector<std::size_t>& labels, double lr,
                         std::map<std::string, Tensor<float>>* grads_out = nullptr) {
  Graph<float> g;
  ForwardOptions fo;
  fo.trainable = true;
  auto fg = build_forward(g, m, x, fo);
  Var loss = ag::bce_with_logits(g, fg.logits, one_hot(labels, m.config().classes));
  auto grads = g.backward(loss);
  for (auto& [k, t] : grads) t.require_finite(k.c_str());
  opt.step(m.params(), grads, lr);
  if (grads_out) *grads_out = std::move(grads);
  return g.value(loss)[0];
}

struct TrainOptions {
  /// Directory receiving best.bckp and last.bckp; empty disables checkpoints.
  std::filesystem::path checkpoint_dir;
  /// Continue from checkpoint_dir/last.bckp when present.
  bool resume = false;
  /// Extra keys stored in every checkpoint's config block.
  KeyValues extra_config;
  std::ostream* log = nullptr;
};

struct TrainResult {
  std::vector<EpochLog> history;
  double best_val_acc = 0;
  std::size_t best_epoch = 0;
};

inline TrainResult train(BcosViT<float>& m, const ShapesDataset& data, const TrainConfig& cfg,
                         const TrainOptions& topt = {}) {
  cfg.validate();
  Optimiser opt(cfg);
  TrainResult result;
  std::size_t start = 0;
  const auto last_path = topt.checkpoint_dir / "last.bckp";
  const auto best_path = topt.checkpoint_dir / "best.bckp";

  if (topt.resume && !topt.checkpoint_dir.empty() && std::filesystem::exists(last_path)) {
    Checkpoint ck = load_checkpoint(last_path);
    m = model_from_checkpoint(ck);
    opt.load(ck);
    start = ck.config.count("state.epoch", 0);
    result.best_val_acc = ck.config.num("state.best_val_acc", 0);
    result.best_epoch = ck.config.count("state.best_epoch", 0);
  }

  auto snapshot = [&](std::size_t epoch, bool with_optimiser) {
    Checkpoint ck = model_checkpoint(m);
    ck.config.merge(cfg.to_kv());
    ck.config.merge(data.to_kv());
    ck.config.merge(topt.extra_config);
    ck.config.set("state.epoch", std::to_string(epoch));
    ck.config.set("state.best_val_acc", fmt_num(result.best_val_acc));
    ck.config.set("state.best_epoch", std::to_string(result.best_epoch));
    if (with_optimiser) opt.save(ck);
    return ck;
  };

  for (std::size_t epoch = start; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    const auto order = epoch_order(data.train_size, cfg.seed, epoch);
    double loss_sum = 0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, order.size() - s));
      auto [x, labels] = data.batch(Split::train, idx);
      try {
        loss_sum += train_step(m, opt, x, labels, lr);
      } catch (const NonFiniteError& e) {
        std::string where;
        if (!topt.checkpoint_dir.empty()) {
          const auto dump = topt.checkpoint_dir / "nonfinite_batch.bct";
          std::ofstream os(dump, std::ios::binary);
          write_bct1(os, x);
          where = "; offending batch written to " + dump.string();
        }
        throw NonFiniteError("epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(batches) + ": " +
                             e.what() + where);
      }
      ++batches;
    }
    EpochLog e{epoch + 1, lr, loss_sum / double(batches), accuracy(m, data, Split::val)};
    result.history.push_back(e);
    if (topt.log) *topt.log << format_epoch(e) << std::endl;
    const bool best = e.val_acc > result.best_val_acc || result.best_epoch == 0;
    if (best) {
      result.best_val_acc = e.val_acc;
      result.best_epoch = e.epoch;
    }
    if (!topt.checkpoint_dir.empty()) {
      if (best) save_checkpoint(best_path, snapshot(epoch + 1, false));
      save_checkpoint(last_path, snapshot(epoch + 1, true));
    }
  }
  return result;
}

}  // namespace bcosvit
