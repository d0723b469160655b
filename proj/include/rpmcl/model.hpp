#pragma once

// Rel-Base-style scorer over symbolic panels.
//
//   panel  --encoder(196 -> 64 -> 64, ReLU)-->  embedding
//   [8 context embeddings, candidate embedding]  (576)
//          --relation(576 -> 128 ReLU -> 1)-->  score
//
// The encoder is shared by all 16 panels of a problem; one score is
// produced per candidate, giving an 8-vector of logits. Everything is
// templated on the scalar type: training runs in float, gradient checks
// in double.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rpmcl/random.hpp"
#include "rpmcl/taskgen.hpp"

namespace rpmcl {

inline constexpr int kEncoderHidden = 64;
inline constexpr int kEmbedding = 64;
inline constexpr int kSequence = kContextPanels + 1;
inline constexpr int kRelationInput = kSequence * kEmbedding;  // 576
inline constexpr int kRelationHidden = 128;
inline constexpr int kMaxActiveFeatures = kMaxSlots * kAttributeCount + 1;

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using Scores = Eigen::Matrix<Scalar, kChoicePanels, 1>;

/// Non-zero features of one encoded panel (all of them equal 1).
struct PanelFeatures {
  std::array<std::int16_t, kMaxActiveFeatures> index{};
  int count = 0;
};

/// A problem in model-input form: context panels 0..7, then choices 0..7.
struct EncodedProblem {
  std::array<PanelFeatures, kContextPanels + kChoicePanels> panels;
  int answer = 0;
};

EncodedProblem encode_problem(const RpmProblem& problem);
std::vector<EncodedProblem> encode_problems(std::span<const RpmProblem> problems);

template <class Scalar>
struct ModelParams {
  using Tensor = Matrix<Scalar>;

  Tensor enc_w1, enc_b1;
  Tensor enc_w2, enc_b2;
  Tensor rel_w1, rel_b1;
  Tensor rel_w2, rel_b2;

  static constexpr std::array<std::pair<const char*, Tensor ModelParams::*>, 8> kTensors = {{
      {"enc_w1", &ModelParams::enc_w1},
      {"enc_b1", &ModelParams::enc_b1},
      {"enc_w2", &ModelParams::enc_w2},
      {"enc_b2", &ModelParams::enc_b2},
      {"rel_w1", &ModelParams::rel_w1},
      {"rel_b1", &ModelParams::rel_b1},
      {"rel_w2", &ModelParams::rel_w2},
      {"rel_b2", &ModelParams::rel_b2},
  }};

  static ModelParams zeros();

  /// Glorot-uniform weights, zero biases.
  static ModelParams initialize(Rng& rng);

  template <class F>
  void for_each(F&& f) {
    for (auto [name, member] : kTensors) f(name, this->*member);
  }
  template <class F>
  void for_each(F&& f) const {
    for (auto [name, member] : kTensors) f(name, this->*member);
  }

  Eigen::Index size() const;
  bool all_finite() const;
  void set_zero();

  template <class Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> out;
    for (std::size_t i = 0; i < kTensors.size(); ++i)
      out.*(ModelParams<Other>::kTensors[i].second) = (this->*(kTensors[i].second)).template cast<Other>();
    return out;
  }

  ModelParams& operator+=(const ModelParams& other);
  ModelParams& operator*=(Scalar factor);

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    for (auto [name, member] : kTensors) {
      const auto& x = a.*member;
      const auto& y = b.*member;
      if (x.rows() != y.rows() || x.cols() != y.cols() || !(x.array() == y.array()).all()) return false;
    }
    return true;
  }
};

/// Intermediate activations of a batched forward pass, kept for backward.
template <class Scalar>
struct ForwardCache {
  std::vector<const EncodedProblem*> batch;
  Matrix<Scalar> enc_hidden;   // 64 x 16B, post-ReLU; columns: all contexts then all choices
  Matrix<Scalar> embeddings;   // 64 x 16B, post-ReLU
  Matrix<Scalar> rel_pre;      // 128 x 8B
  Matrix<Scalar> rel_hidden;   // 128 x 8B, post-ReLU
  Matrix<Scalar> scores;       // 8 x B
};

template <class Scalar>
ForwardCache<Scalar> forward(const ModelParams<Scalar>& params, std::span<const EncodedProblem* const> batch);

/// Gradients of sum_b <score_grads(:, b), scores(:, b)>.
template <class Scalar>
ModelParams<Scalar> backward(const ModelParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                             const Matrix<Scalar>& score_grads);

template <class Scalar>
Scores<Scalar> score_problem(const ModelParams<Scalar>& params, const EncodedProblem& problem);
template <class Scalar>
Scores<Scalar> score_problem(const ModelParams<Scalar>& params, const RpmProblem& problem);

template <class Scalar>
struct LossAndGrads {
  Scalar loss{};
  ModelParams<Scalar> grads;
};

/// Cross-entropy of one problem against `label`.
template <class Scalar>
LossAndGrads<Scalar> loss_and_grads(const ModelParams<Scalar>& params, const EncodedProblem& problem, int label);

/// Mean cross-entropy over columns of `scores`; returns the loss and its
/// gradient with respect to the scores.
template <class Scalar>
std::pair<Scalar, Matrix<Scalar>> cross_entropy(const Matrix<Scalar>& scores, std::span<const int> labels);

/// Log-softmax of a score vector via log-sum-exp.
template <class Derived>
auto log_softmax(const Eigen::MatrixBase<Derived>& scores) {
  using Scalar = typename Derived::Scalar;
  const Scalar max = scores.maxCoeff();
  const Scalar lse = max + std::log((scores.array() - max).exp().sum());
  return (scores.array() - lse).matrix().eval();
}

template <class Derived>
auto softmax(const Eigen::MatrixBase<Derived>& scores) {
  const auto shifted = (scores.array() - scores.maxCoeff()).exp().eval();
  return (shifted / shifted.sum()).matrix().eval();
}

/// Argmax with ties going to the lowest index.
template <class Derived>
int predict(const Eigen::MatrixBase<Derived>& scores) {
  int best = 0;
  for (int k = 1; k < scores.size(); ++k)
    if (scores[k] > scores[best]) best = k;
  return best;
}

template <class Scalar>
int predict(const ModelParams<Scalar>& params, const EncodedProblem& problem) {
  return predict(score_problem(params, problem));
}

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

template <class Scalar>
struct AdamState {
  ModelParams<Scalar> m;
  ModelParams<Scalar> v;
  std::int64_t step = 0;

  static AdamState zeros() { return {ModelParams<Scalar>::zeros(), ModelParams<Scalar>::zeros(), 0}; }
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

template <class Scalar>
void adam_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, AdamState<Scalar>& state,
               const AdamConfig& config = {});

struct EmptyDatasetError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Evaluation {
  double accuracy = 0.0;
  std::vector<std::uint8_t> correct;
};

template <class Scalar>
Evaluation evaluate(const ModelParams<Scalar>& params, std::span<const EncodedProblem> problems);

/// Empirical diagonal Fisher: mean squared per-sample gradient of the
/// cross-entropy at the true label.
template <class Scalar>
ModelParams<Scalar> fisher_diagonal(const ModelParams<Scalar>& params, std::span<const EncodedProblem> problems);

template <class Scalar>
struct EwcState {
  ModelParams<Scalar> anchor;
  ModelParams<Scalar> fisher;
  Scalar lambda = Scalar(10);
};

/// (lambda/2) * sum F (theta - anchor)^2 and its gradient.
template <class Scalar>
LossAndGrads<Scalar> ewc_penalty(const ModelParams<Scalar>& params, const EwcState<Scalar>& ewc);

/// lambda * H(softmax(teacher), softmax(student)) at temperature 1, and its
/// gradient with respect to the student scores.
template <class Scalar>
std::pair<Scalar, Scores<Scalar>> distill_loss(const Scores<Scalar>& student, const Scores<Scalar>& teacher,
                                               Scalar lambda);

// Checkpoints: text records of named tensors in hexadecimal floating point,
// so values survive a round trip bit for bit.
inline constexpr int kCheckpointVersion = 1;

template <class Scalar>
void write_checkpoint(std::ostream& out, const ModelParams<Scalar>& params, const AdamState<Scalar>& adam);
template <class Scalar>
std::pair<ModelParams<Scalar>, AdamState<Scalar>> read_checkpoint(std::istream& in);

}  // namespace rpmcl
