#pragma once

// Recovery training for a surgically reduced student:
//   stage one  - every student block reproduces the teacher block's output
//                from the teacher's input (mean squared error per element),
//   stage two  - end-to-end next-token cross-entropy, or KL distillation
//                against the teacher's output distribution.
// AdamW with decoupled weight decay, cosine-annealed learning rate.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "kvlatent/corpus.hpp"
#include "kvlatent/error.hpp"
#include "kvlatent/model.hpp"
#include "kvlatent/rope.hpp"
#include "kvlatent/tape.hpp"

namespace kvlatent {

enum class Stage { pretrain, one, two_ntp, two_kl };

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 2e-4;
  double weight_decay = 0.01;
};

struct TrainConfig {
  Stage stage = Stage::two_ntp;
  double lr = 2e-5;
  std::size_t batch = 8;
  std::size_t steps = 1;
  AdamWConfig adamw{};
  std::uint64_t seed = 0;
  // KL(teacher || student) when true; KL(student || teacher) otherwise.
  bool kl_teacher_first = true;

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("train: learning rate must be non-negative");
    if (batch == 0) throw ConfigError("train: batch must be positive");
  }
};

// Table presets for desk runs.
inline constexpr double kLrTraining = 2e-5;
inline constexpr double kLrDistillation = 2e-7;

inline double cosine_lr(std::size_t step, std::size_t total, double lr_max) {
  if (total == 0) return lr_max;
  const double t = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return 0.5 * lr_max * (1.0 + std::cos(std::numbers::pi * t));
}

// Per-parameter AdamW state; parameters are identified by position in the
// list passed to step(), which must be stable across calls.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<std::pair<Tensor<T>*, const Tensor<T>*>>& params, double lr) {
    if (m_.empty()) {
      for (const auto& [p, g] : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    if (m_.size() != params.size()) throw Error("adamw: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i].first;
      const Tensor<T>& g = *params[i].second;
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        const double mk = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        const double vk = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        double pk = p[k];
        pk *= 1.0 - lr * cfg_.weight_decay;
        pk -= lr * (mk / bc1) / (std::sqrt(vk / bc2) + cfg_.eps);
        p[k] = static_cast<T>(pk);
      }
    }
  }

  std::size_t steps_taken() const noexcept { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::size_t t_ = 0;
};

// Hidden states of one teacher pass: states[0] is the embedding output and
// states[l] the output of block l. Student block l reads states[l-1] and is
// scored against states[l].
template <class T>
struct DistillTrace {
  std::vector<std::vector<Tensor<T>>> states;  // [sequence][layer 0..L]
  std::vector<Sequence> batch;
};

template <class T>
DistillTrace<T> teacher_trace(const Model<T>& teacher, const std::vector<Sequence>& batch) {
  DistillTrace<T> tr;
  tr.batch = batch;
  for (const auto& seq : batch) {
    std::vector<Tensor<T>> hidden;
    forward(teacher, std::span<const int>(seq), &hidden);
    tr.states.push_back(std::move(hidden));
  }
  return tr;
}

// Trainable set for recovery: attention matrices and adapter factors.
inline bool recovery_trainable(const std::string&, ParamKind k) {
  return k == ParamKind::attention || k == ParamKind::lora;
}

inline bool everything_trainable(const std::string&, ParamKind) { return true; }

namespace detail {

template <class T>
void check_student_teacher(const Model<T>& student, const Model<T>& teacher) {
  if (student.config().n_layers != teacher.config().n_layers ||
      student.config().d_model != teacher.config().d_model ||
      student.config().vocab != teacher.config().vocab)
    throw ShapeError("distillation: student and teacher differ in depth, width or vocab");
}

template <class T>
Var<T> stage1_loss_on_tape(const DistillTrace<T>& trace, const Model<T>& student,
                           const ModelWeightsT<Var<T>>& w, Tape<T>& tape) {
  const std::size_t L = student.config().n_layers;
  const T ls = lora_scale_of(student);
  std::vector<Var<T>> per_seq;
  for (const auto& states : trace.states) {
    if (states.size() != L + 1)
      throw ShapeError("stage1_loss: trace has " + std::to_string(states.size()) +
                       " states for " + std::to_string(L) + " layers");
    std::vector<Var<T>> per_layer;
    for (std::size_t l = 0; l < L; ++l) {
      Var<T> in = tape.leaf(states[l]);
      Var<T> pred = ops::decoder_block(in, w.blocks[l], student.config().geom, student.rotary(), ls);
      per_layer.push_back(ops::mse(pred, tape.leaf(states[l + 1])));
    }
    per_seq.push_back(ops::mean(per_layer));
  }
  return ops::mean(per_seq);
}

template <class T>
Var<T> ntp_loss_on_tape(const Model<T>& student, const ModelWeightsT<Var<T>>& w,
                        const std::vector<Sequence>& batch) {
  std::vector<Var<T>> per_seq;
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw ConfigError("ntp_loss: sequences need at least 2 tokens");
    Var<T> logits = forward_on_tape(student, w, std::span<const int>(seq));
    std::vector<int> targets(seq.begin() + 1, seq.end());
    targets.push_back(-1);  // last position has no successor
    per_seq.push_back(ops::cross_entropy(logits, std::span<const int>(targets)));
  }
  return ops::mean(per_seq);
}

template <class T>
Var<T> kl_loss_on_tape(const Model<T>& student, const ModelWeightsT<Var<T>>& w,
                       const std::vector<Tensor<T>>& teacher_logits,
                       const std::vector<Sequence>& batch, bool teacher_first) {
  std::vector<Var<T>> per_seq;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Var<T> logits = forward_on_tape(student, w, std::span<const int>(batch[i]));
    per_seq.push_back(ops::kl_divergence(logits, teacher_logits[i], teacher_first));
  }
  return ops::mean(per_seq);
}

}  // namespace detail

template <class T>
double stage1_loss(const DistillTrace<T>& trace, const Model<T>& student) {
  Tape<T> tape;
  auto bound = bind(tape, const_cast<Model<T>&>(student));
  return detail::stage1_loss_on_tape(trace, student, bound.vars, tape).value()[0];
}

template <class T>
double ntp_loss(const Model<T>& student, const std::vector<Sequence>& batch) {
  Tape<T> tape;
  auto bound = bind(tape, const_cast<Model<T>&>(student));
  return detail::ntp_loss_on_tape(student, bound.vars, batch).value()[0];
}

template <class T>
double kl_loss(const Model<T>& student, const Model<T>& teacher, const std::vector<Sequence>& batch,
               bool teacher_first = true) {
  detail::check_student_teacher(student, teacher);
  std::vector<Tensor<T>> ref;
  for (const auto& s : batch) ref.push_back(forward(teacher, std::span<const int>(s)));
  Tape<T> tape;
  auto bound = bind(tape, const_cast<Model<T>&>(student));
  return detail::kl_loss_on_tape(student, bound.vars, ref, batch, teacher_first).value()[0];
}

struct LogEntry {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

using TrainLog = std::vector<LogEntry>;

inline void write_log_csv(std::ostream& os, const TrainLog& log) {
  os << "step,loss,lr\n";
  for (const auto& e : log) os << e.step << ',' << format_sig9(e.loss) << ',' << format_sig9(e.lr) << '\n';
}

// Raised when a step produces NaN/Inf; names the step.
class DivergenceError : public NumericError {
 public:
  DivergenceError(std::size_t step, const std::string& what)
      : NumericError("train", "diverged at step " + std::to_string(step) + ": " + what),
        step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

using StepCallback = std::function<void(const LogEntry&)>;

// Shared loop for every stage. `teacher` may be null for pretrain / two_ntp.
template <class T>
TrainLog train(Model<T>& student, const Model<T>* teacher, const std::vector<Sequence>& data,
               const TrainConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  const bool needs_teacher = cfg.stage == Stage::one || cfg.stage == Stage::two_kl;
  if (needs_teacher && !teacher) throw ConfigError("train: this stage needs a teacher");
  if (teacher) detail::check_student_teacher(student, *teacher);
  TrainLog log;
  if (cfg.steps == 0) return log;
  const TrainablePredicate pred =
      cfg.stage == Stage::pretrain ? TrainablePredicate(everything_trainable)
                                   : TrainablePredicate(recovery_trainable);
  BatchSampler sampler(data, cfg.batch, cfg.seed);
  AdamW<T> opt(cfg.adamw);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = cosine_lr(step, cfg.steps, cfg.lr);
    const auto batch = sampler.next();
    try {
      Tape<T> tape;
      std::optional<DistillTrace<T>> trace;
      std::vector<Tensor<T>> ref;
      if (cfg.stage == Stage::one) trace = teacher_trace(*teacher, batch);
      if (cfg.stage == Stage::two_kl)
        for (const auto& s : batch) ref.push_back(forward(*teacher, std::span<const int>(s)));
      auto bound = bind(tape, student, pred);
      Var<T> loss;
      switch (cfg.stage) {
        case Stage::one: loss = detail::stage1_loss_on_tape(*trace, student, bound.vars, tape); break;
        case Stage::pretrain:
        case Stage::two_ntp: loss = detail::ntp_loss_on_tape(student, bound.vars, batch); break;
        case Stage::two_kl:
          loss = detail::kl_loss_on_tape(student, bound.vars, ref, batch, cfg.kl_teacher_first);
          break;
      }
      const LogEntry entry{step, static_cast<double>(loss.value()[0]), lr};
      log.push_back(entry);
      if (on_step) on_step(entry);
      if (bound.trainable.empty()) continue;
      tape.backward(loss);
      std::vector<std::pair<Tensor<T>*, const Tensor<T>*>> params;
      for (auto& [t, v] : bound.trainable) params.emplace_back(t, &v.grad());
      opt.step(params, lr);
      for (auto& [t, v] : bound.trainable) require_finite(*t, "adamw");
    } catch (const DivergenceError&) {
      throw;
    } catch (const NumericError& e) {
      throw DivergenceError(step, e.what());
    }
  }
  return log;
}

template <class T>
TrainLog run_stage1(const Model<T>& teacher, Model<T>& student, const std::vector<Sequence>& data,
                    TrainConfig cfg, const StepCallback& on_step = {}) {
  cfg.stage = Stage::one;
  return train(student, &teacher, data, cfg, on_step);
}

template <class T>
TrainLog run_stage2(const Model<T>* teacher, Model<T>& student, const std::vector<Sequence>& data,
                    TrainConfig cfg, const StepCallback& on_step = {}) {
  if (cfg.stage != Stage::two_kl) cfg.stage = Stage::two_ntp;
  return train(student, teacher, data, cfg, on_step);
}

template <class T>
TrainLog pretrain(Model<T>& model, const std::vector<Sequence>& data, TrainConfig cfg,
                  const StepCallback& on_step = {}) {
  cfg.stage = Stage::pretrain;
  return train(model, static_cast<const Model<T>*>(nullptr), data, cfg, on_step);
}

}  // namespace kvlatent
