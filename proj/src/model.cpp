#include "rpmcl/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>

namespace rpmcl {

EncodedProblem encode_problem(const RpmProblem& problem) {
  EncodedProblem out;
  out.answer = problem.answer;
  auto fill = [&](PanelFeatures& dst, const Panel& panel) {
    const auto idx = panel_feature_indices(panel, problem.config);
    dst.count = static_cast<int>(idx.size());
    for (int i = 0; i < dst.count; ++i) dst.index[i] = static_cast<std::int16_t>(idx[i]);
  };
  for (int i = 0; i < kContextPanels; ++i) fill(out.panels[i], problem.context[i]);
  for (int k = 0; k < kChoicePanels; ++k) fill(out.panels[kContextPanels + k], problem.choices[k]);
  return out;
}

std::vector<EncodedProblem> encode_problems(std::span<const RpmProblem> problems) {
  std::vector<EncodedProblem> out;
  out.reserve(problems.size());
  for (const auto& p : problems) out.push_back(encode_problem(p));
  return out;
}

template <class Scalar>
ModelParams<Scalar> ModelParams<Scalar>::zeros() {
  ModelParams p;
  p.enc_w1 = Tensor::Zero(kEncoderHidden, kPanelFeatures);
  p.enc_b1 = Tensor::Zero(kEncoderHidden, 1);
  p.enc_w2 = Tensor::Zero(kEmbedding, kEncoderHidden);
  p.enc_b2 = Tensor::Zero(kEmbedding, 1);
  p.rel_w1 = Tensor::Zero(kRelationHidden, kRelationInput);
  p.rel_b1 = Tensor::Zero(kRelationHidden, 1);
  p.rel_w2 = Tensor::Zero(1, kRelationHidden);
  p.rel_b2 = Tensor::Zero(1, 1);
  return p;
}

template <class Scalar>
ModelParams<Scalar> ModelParams<Scalar>::initialize(Rng& rng) {
  ModelParams p = zeros();
  auto glorot = [&](Tensor& w) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<Scalar>((2.0 * uniform_unit(rng) - 1.0) * bound);
  };
  glorot(p.enc_w1);
  glorot(p.enc_w2);
  glorot(p.rel_w1);
  glorot(p.rel_w2);
  return p;
}

template <class Scalar>
Eigen::Index ModelParams<Scalar>::size() const {
  Eigen::Index n = 0;
  for_each([&](const char*, const Tensor& t) { n += t.size(); });
  return n;
}

template <class Scalar>
bool ModelParams<Scalar>::all_finite() const {
  bool ok = true;
  for_each([&](const char*, const Tensor& t) { ok = ok && t.allFinite(); });
  return ok;
}

template <class Scalar>
void ModelParams<Scalar>::set_zero() {
  for_each([](const char*, Tensor& t) { t.setZero(); });
}

template <class Scalar>
ModelParams<Scalar>& ModelParams<Scalar>::operator+=(const ModelParams& other) {
  for (auto [name, member] : kTensors) this->*member += other.*member;
  return *this;
}

template <class Scalar>
ModelParams<Scalar>& ModelParams<Scalar>::operator*=(Scalar factor) {
  for_each([&](const char*, Tensor& t) { t *= factor; });
  return *this;
}

template <class Scalar>
ForwardCache<Scalar> forward(const ModelParams<Scalar>& params, std::span<const EncodedProblem* const> batch) {
  using Mat = Matrix<Scalar>;
  const Eigen::Index b = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index panels = 16 * b;

  ForwardCache<Scalar> cache;
  cache.batch.assign(batch.begin(), batch.end());

  // First layer: the input is one-hot, so W x is a sum of columns.
  cache.enc_hidden.resize(kEncoderHidden, panels);
  for (Eigen::Index p = 0; p < b; ++p) {
    for (int i = 0; i < 16; ++i) {
      const Eigen::Index col = i < kContextPanels ? p * kContextPanels + i : 8 * b + p * kChoicePanels + (i - 8);
      const PanelFeatures& f = batch[p]->panels[i];
      auto h = cache.enc_hidden.col(col);
      h = params.enc_b1;
      for (int a = 0; a < f.count; ++a) h += params.enc_w1.col(f.index[a]);
    }
  }
  cache.enc_hidden = cache.enc_hidden.cwiseMax(Scalar(0));

  cache.embeddings.noalias() = params.enc_w2 * cache.enc_hidden;
  cache.embeddings.colwise() += params.enc_b2.col(0);
  cache.embeddings = cache.embeddings.cwiseMax(Scalar(0));

  // Column-major layout makes each problem's 8 context embeddings one
  // contiguous 512-vector, already in grid order.
  Eigen::Map<const Mat> context(cache.embeddings.data(), kContextPanels * kEmbedding, b);
  const auto candidates = cache.embeddings.rightCols(8 * b);
  const auto w_context = params.rel_w1.leftCols(kContextPanels * kEmbedding);
  const auto w_candidate = params.rel_w1.rightCols(kEmbedding);

  Mat z_context = w_context * context;
  z_context.colwise() += params.rel_b1.col(0);
  cache.rel_pre.noalias() = w_candidate * candidates;
  for (Eigen::Index p = 0; p < b; ++p) cache.rel_pre.middleCols(p * kChoicePanels, kChoicePanels).colwise() += z_context.col(p);
  cache.rel_hidden = cache.rel_pre.cwiseMax(Scalar(0));

  Mat flat = params.rel_w2 * cache.rel_hidden;
  flat.array() += params.rel_b2(0, 0);
  cache.scores = Eigen::Map<Mat>(flat.data(), kChoicePanels, b);
  return cache;
}

template <class Scalar>
ModelParams<Scalar> backward(const ModelParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                             const Matrix<Scalar>& score_grads) {
  using Mat = Matrix<Scalar>;
  const Eigen::Index b = static_cast<Eigen::Index>(cache.batch.size());
  ModelParams<Scalar> g = ModelParams<Scalar>::zeros();

  Eigen::Map<const Mat> d_flat(score_grads.data(), 1, kChoicePanels * b);
  g.rel_w2.noalias() = d_flat * cache.rel_hidden.transpose();
  g.rel_b2(0, 0) = d_flat.sum();

  Mat d_pre = params.rel_w2.transpose() * d_flat;
  d_pre.array() *= (cache.rel_pre.array() > Scalar(0)).template cast<Scalar>();
  g.rel_b1 = d_pre.rowwise().sum();

  Mat d_context_z(kRelationHidden, b);
  for (Eigen::Index p = 0; p < b; ++p) d_context_z.col(p) = d_pre.middleCols(p * kChoicePanels, kChoicePanels).rowwise().sum();

  Eigen::Map<const Mat> context(cache.embeddings.data(), kContextPanels * kEmbedding, b);
  const auto candidates = cache.embeddings.rightCols(8 * b);
  const auto w_context = params.rel_w1.leftCols(kContextPanels * kEmbedding);
  const auto w_candidate = params.rel_w1.rightCols(kEmbedding);
  g.rel_w1.leftCols(kContextPanels * kEmbedding).noalias() = d_context_z * context.transpose();
  g.rel_w1.rightCols(kEmbedding).noalias() = d_pre * candidates.transpose();

  Mat d_emb(kEmbedding, 16 * b);
  Eigen::Map<Mat>(d_emb.data(), kContextPanels * kEmbedding, b).noalias() = w_context.transpose() * d_context_z;
  d_emb.rightCols(8 * b).noalias() = w_candidate.transpose() * d_pre;
  d_emb.array() *= (cache.embeddings.array() > Scalar(0)).template cast<Scalar>();

  g.enc_w2.noalias() = d_emb * cache.enc_hidden.transpose();
  g.enc_b2 = d_emb.rowwise().sum();

  Mat d_hidden = params.enc_w2.transpose() * d_emb;
  d_hidden.array() *= (cache.enc_hidden.array() > Scalar(0)).template cast<Scalar>();
  g.enc_b1 = d_hidden.rowwise().sum();
  for (Eigen::Index p = 0; p < b; ++p) {
    for (int i = 0; i < 16; ++i) {
      const Eigen::Index col = i < kContextPanels ? p * kContextPanels + i : 8 * b + p * kChoicePanels + (i - 8);
      const PanelFeatures& f = cache.batch[p]->panels[i];
      for (int a = 0; a < f.count; ++a) g.enc_w1.col(f.index[a]) += d_hidden.col(col);
    }
  }
  return g;
}

template <class Scalar>
Scores<Scalar> score_problem(const ModelParams<Scalar>& params, const EncodedProblem& problem) {
  const EncodedProblem* one[] = {&problem};
  return forward(params, std::span<const EncodedProblem* const>(one)).scores.col(0);
}

template <class Scalar>
Scores<Scalar> score_problem(const ModelParams<Scalar>& params, const RpmProblem& problem) {
  return score_problem(params, encode_problem(problem));
}

template <class Scalar>
std::pair<Scalar, Matrix<Scalar>> cross_entropy(const Matrix<Scalar>& scores, std::span<const int> labels) {
  const Eigen::Index b = scores.cols();
  Matrix<Scalar> grad(scores.rows(), b);
  Scalar loss = 0;
  for (Eigen::Index p = 0; p < b; ++p) {
    const auto logp = log_softmax(scores.col(p));
    loss -= logp[labels[p]];
    grad.col(p) = logp.array().exp().matrix();
    // p_y - 1 as minus the other probabilities: p_y rounds to 1 long before
    // they vanish, and the column must keep summing to zero.
    grad(labels[p], p) = Scalar(0);
    grad(labels[p], p) = -grad.col(p).sum();
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(b);
  return {loss * inv, grad * inv};
}

template <class Scalar>
LossAndGrads<Scalar> loss_and_grads(const ModelParams<Scalar>& params, const EncodedProblem& problem, int label) {
  const EncodedProblem* one[] = {&problem};
  const auto cache = forward(params, std::span<const EncodedProblem* const>(one));
  const int labels[] = {label};
  auto [loss, d_scores] = cross_entropy<Scalar>(cache.scores, labels);
  return {loss, backward(params, cache, d_scores)};
}

template <class Scalar>
void adam_step(ModelParams<Scalar>& params, const ModelParams<Scalar>& grads, AdamState<Scalar>& state,
               const AdamConfig& config) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Scalar b1 = static_cast<Scalar>(config.beta1);
  const Scalar b2 = static_cast<Scalar>(config.beta2);
  const Scalar c1 = static_cast<Scalar>(1.0 - std::pow(config.beta1, t));
  const Scalar c2 = static_cast<Scalar>(1.0 - std::pow(config.beta2, t));
  const Scalar lr = static_cast<Scalar>(config.lr);
  const Scalar eps = static_cast<Scalar>(config.epsilon);
  for (auto [name, member] : ModelParams<Scalar>::kTensors) {
    auto m = (state.m.*member).array();
    auto v = (state.v.*member).array();
    const auto& g = (grads.*member).array();
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.square();
    (params.*member).array() -= lr * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

template <class Scalar>
Evaluation evaluate(const ModelParams<Scalar>& params, std::span<const EncodedProblem> problems) {
  if (problems.empty()) throw EmptyDatasetError("evaluate: empty dataset");
  constexpr std::size_t kChunk = 64;
  Evaluation out;
  out.correct.resize(problems.size());
  std::size_t hits = 0;
  std::vector<const EncodedProblem*> ptrs;
  for (std::size_t start = 0; start < problems.size(); start += kChunk) {
    const std::size_t end = std::min(problems.size(), start + kChunk);
    ptrs.clear();
    for (std::size_t i = start; i < end; ++i) ptrs.push_back(&problems[i]);
    const auto cache = forward(params, std::span<const EncodedProblem* const>(ptrs));
    for (std::size_t i = start; i < end; ++i) {
      const bool ok = predict(cache.scores.col(static_cast<Eigen::Index>(i - start))) == problems[i].answer;
      out.correct[i] = ok ? 1 : 0;
      hits += ok;
    }
  }
  out.accuracy = static_cast<double>(hits) / static_cast<double>(problems.size());
  return out;
}

template <class Scalar>
ModelParams<Scalar> fisher_diagonal(const ModelParams<Scalar>& params, std::span<const EncodedProblem> problems) {
  if (problems.empty()) throw EmptyDatasetError("fisher_diagonal: empty dataset");
  ModelParams<Scalar> fisher = ModelParams<Scalar>::zeros();
  for (const auto& p : problems) {
    const auto lg = loss_and_grads(params, p, p.answer);
    for (auto [name, member] : ModelParams<Scalar>::kTensors) (fisher.*member).array() += (lg.grads.*member).array().square();
  }
  fisher *= Scalar(1) / static_cast<Scalar>(problems.size());
  return fisher;
}

template <class Scalar>
LossAndGrads<Scalar> ewc_penalty(const ModelParams<Scalar>& params, const EwcState<Scalar>& ewc) {
  LossAndGrads<Scalar> out{Scalar(0), ModelParams<Scalar>::zeros()};
  for (auto [name, member] : ModelParams<Scalar>::kTensors) {
    const auto diff = ((params.*member).array() - (ewc.anchor.*member).array()).eval();
    const auto& f = (ewc.fisher.*member).array();
    out.loss += (f * diff.square()).sum();
    (out.grads.*member).array() = ewc.lambda * f * diff;
  }
  out.loss *= ewc.lambda / Scalar(2);
  return out;
}

template <class Scalar>
std::pair<Scalar, Scores<Scalar>> distill_loss(const Scores<Scalar>& student, const Scores<Scalar>& teacher,
                                               Scalar lambda) {
  if (lambda == Scalar(0)) return {Scalar(0), Scores<Scalar>::Zero()};
  const Scores<Scalar> q = softmax(teacher);
  const Scores<Scalar> logp = log_softmax(student);
  const Scalar loss = -lambda * q.dot(logp);
  return {loss, lambda * (logp.array().exp().matrix() - q)};
}

namespace {

template <class Scalar>
constexpr const char* scalar_name() {
  return sizeof(Scalar) == sizeof(float) ? "float" : "double";
}

template <class Scalar>
void write_tensor(std::ostream& out, const std::string& name, const Matrix<Scalar>& t) {
  out << "tensor " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
  char buf[64];
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%a", static_cast<double>(t(i, j)));
      out << (j ? " " : "") << buf;
    }
    out << '\n';
  }
}

template <class Scalar>
void read_tensor(std::istream& in, const std::string& expected_name, Matrix<Scalar>& t) {
  std::string word, name;
  Eigen::Index rows = 0, cols = 0;
  if (!(in >> word >> name >> rows >> cols) || word != "tensor" || name != expected_name)
    throw FormatError("checkpoint: expected tensor " + expected_name);
  if (rows != t.rows() || cols != t.cols()) throw FormatError("checkpoint: shape mismatch for " + name);
  std::string token;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      if (!(in >> token)) throw FormatError("checkpoint: truncated tensor " + name);
      char* end = nullptr;
      const double v = std::strtod(token.c_str(), &end);
      if (end == token.c_str() || *end != '\0') throw FormatError("checkpoint: bad number in " + name);
      t(i, j) = static_cast<Scalar>(v);
    }
  }
}

}  // namespace

template <class Scalar>
void write_checkpoint(std::ostream& out, const ModelParams<Scalar>& params, const AdamState<Scalar>& adam) {
  out << "rpmcl-checkpoint " << kCheckpointVersion << ' ' << scalar_name<Scalar>() << '\n';
  out << "adam_step " << adam.step << '\n';
  for (auto [name, member] : ModelParams<Scalar>::kTensors) write_tensor<Scalar>(out, std::string("params.") + name, params.*member);
  for (auto [name, member] : ModelParams<Scalar>::kTensors) write_tensor<Scalar>(out, std::string("adam_m.") + name, adam.m.*member);
  for (auto [name, member] : ModelParams<Scalar>::kTensors) write_tensor<Scalar>(out, std::string("adam_v.") + name, adam.v.*member);
}

template <class Scalar>
std::pair<ModelParams<Scalar>, AdamState<Scalar>> read_checkpoint(std::istream& in) {
  std::string magic, scalar, key;
  int version = 0;
  if (!(in >> magic >> version >> scalar) || magic != "rpmcl-checkpoint") throw FormatError("not a checkpoint");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version");
  if (scalar != scalar_name<Scalar>()) throw FormatError("checkpoint scalar type is " + scalar);
  auto params = ModelParams<Scalar>::zeros();
  auto adam = AdamState<Scalar>::zeros();
  if (!(in >> key >> adam.step) || key != "adam_step") throw FormatError("checkpoint: missing adam_step");
  for (auto [name, member] : ModelParams<Scalar>::kTensors) read_tensor<Scalar>(in, std::string("params.") + name, params.*member);
  for (auto [name, member] : ModelParams<Scalar>::kTensors) read_tensor<Scalar>(in, std::string("adam_m.") + name, adam.m.*member);
  for (auto [name, member] : ModelParams<Scalar>::kTensors) read_tensor<Scalar>(in, std::string("adam_v.") + name, adam.v.*member);
  return {std::move(params), std::move(adam)};
}

#define RPMCL_INSTANTIATE(S)                                                                                   \
  template struct ModelParams<S>;                                                                              \
  template ForwardCache<S> forward(const ModelParams<S>&, std::span<const EncodedProblem* const>);            \
  template ModelParams<S> backward(const ModelParams<S>&, const ForwardCache<S>&, const Matrix<S>&);          \
  template Scores<S> score_problem(const ModelParams<S>&, const EncodedProblem&);                              \
  template Scores<S> score_problem(const ModelParams<S>&, const RpmProblem&);                                  \
  template std::pair<S, Matrix<S>> cross_entropy(const Matrix<S>&, std::span<const int>);                     \
  template LossAndGrads<S> loss_and_grads(const ModelParams<S>&, const EncodedProblem&, int);                  \
  template void adam_step(ModelParams<S>&, const ModelParams<S>&, AdamState<S>&, const AdamConfig&);           \
  template Evaluation evaluate(const ModelParams<S>&, std::span<const EncodedProblem>);                        \
  template ModelParams<S> fisher_diagonal(const ModelParams<S>&, std::span<const EncodedProblem>);             \
  template LossAndGrads<S> ewc_penalty(const ModelParams<S>&, const EwcState<S>&);                             \
  template std::pair<S, Scores<S>> distill_loss(const Scores<S>&, const Scores<S>&, S);                        \
  template void write_checkpoint(std::ostream&, const ModelParams<S>&, const AdamState<S>&);                   \
  template std::pair<ModelParams<S>, AdamState<S>> read_checkpoint(std::istream&);

RPMCL_INSTANTIATE(float)
RPMCL_INSTANTIATE(double)

#undef RPMCL_INSTANTIATE

}  // namespace rpmcl
