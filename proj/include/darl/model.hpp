#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "darl/common.hpp"
#include "darl/dataset.hpp"

namespace darl {

enum class Activation : std::uint32_t { tanh = 0 };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  throw UsageError("unsupported activation '" + std::string(s) + "'");
}

// Feedforward scorer: input -> hidden layers (the backbone) -> one logit (the head).
// The last hidden layer's output is the representation g(x).
struct ModelArch {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden = {64, 32};
  Activation activation = Activation::tanh;

  struct Layer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weight_offset = 0;  // in x out, column-major
    std::size_t bias_offset = 0;
  };

  void validate() const {
    if (input_dim == 0) throw ConfigError("arch.input_dim", "must be > 0");
    if (hidden.empty()) throw ConfigError("arch.hidden", "needs at least one hidden layer");
    for (auto w : hidden)
      if (w == 0) throw ConfigError("arch.hidden", "widths must be > 0");
  }

  // Hidden layers followed by the head layer.
  std::vector<Layer> layers() const {
    std::vector<Layer> out;
    std::size_t offset = 0;
    std::size_t in = input_dim;
    auto add = [&](std::size_t width) {
      Layer l{in, width, offset, offset + in * width};
      offset = l.bias_offset + width;
      out.push_back(l);
      in = width;
    };
    for (auto w : hidden) add(w);
    add(1);
    return out;
  }

  std::size_t rep_dim() const { return hidden.back(); }
  std::size_t param_count() const { return layers().back().bias_offset + 1; }
  std::size_t backbone_size() const { return layers().back().weight_offset; }
  std::size_t head_size() const { return rep_dim() + 1; }

  std::string fingerprint() const {
    std::string s = "mlp-" + std::string(to_string(activation)) + "-" + std::to_string(input_dim);
    for (auto w : hidden) s += "-" + std::to_string(w);
    return s + "-1";
  }

  bool operator==(const ModelArch&) const = default;
};

struct ModelParams {
  ModelArch arch;
  std::vector<double> values;

  ModelParams() = default;
  ModelParams(ModelArch a, std::vector<double> v) : arch(std::move(a)), values(std::move(v)) {
    arch.validate();
    if (values.size() != arch.param_count())
      throw DataError("parameter vector has " + std::to_string(values.size()) + " values, arch " +
                      arch.fingerprint() + " needs " + std::to_string(arch.param_count()));
    for (double x : values)
      if (!std::isfinite(x)) throw NumericalError("non-finite model parameter");
  }

  std::span<const double> backbone() const { return {values.data(), arch.backbone_size()}; }
  std::span<const double> head() const { return {values.data() + arch.backbone_size(), arch.head_size()}; }
  std::span<double> head_mut() { return {values.data() + arch.backbone_size(), arch.head_size()}; }

  bool operator==(const ModelParams&) const = default;
};

enum class Trainable { backbone, head, all };

struct Slice {
  std::size_t offset = 0;
  std::size_t length = 0;
};

inline Slice trainable_slice(const ModelArch& arch, Trainable t) {
  switch (t) {
    case Trainable::backbone: return {0, arch.backbone_size()};
    case Trainable::head: return {arch.backbone_size(), arch.head_size()};
    case Trainable::all: return {0, arch.param_count()};
  }
  return {};
}

// Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)) (unit-variance preactivations), biases zero.
inline ModelParams init_model(const ModelArch& arch, std::uint64_t seed) {
  arch.validate();
  std::vector<double> v(arch.param_count(), 0.0);
  Rng rng(derive_seed(seed, "init_model"));
  for (const auto& l : arch.layers()) {
    const double bound = std::sqrt(3.0 / static_cast<double>(l.in));
    for (std::size_t i = 0; i < l.in * l.out; ++i) v[l.weight_offset + i] = rng.uniform(-bound, bound);
  }
  return {arch, std::move(v)};
}

// ---------------------------------------------------------------------------
// Over-confidence calibration prior

// q(grade) over labels (0, 1): IR -> [1-rho, rho], WR -> [2rho, 1-2rho], SR -> [rho, 1-rho].
class CalibrationPrior {
 public:
  explicit CalibrationPrior(double rho = 0.1) : rho_(rho) {
    if (!(rho > 0.0 && rho < 1.0 / 3.0)) throw ConfigError("rho", "must be in (0, 1/3)");
  }

  double rho() const noexcept { return rho_; }

  std::array<double, 2> row(RelevanceGrade g) const {
    switch (g) {
      case RelevanceGrade::IR: return {1.0 - rho_, rho_};
      case RelevanceGrade::WR: return {2.0 * rho_, 1.0 - 2.0 * rho_};
      case RelevanceGrade::SR: return {rho_, 1.0 - rho_};
    }
    throw DataError("grade missing from prior table");
  }

  // log(q1 / q0): the logit at which KL(p || q) vanishes.
  double target_logit(RelevanceGrade g) const {
    const auto q = row(g);
    return std::log(q[1]) - std::log(q[0]);
  }

 private:
  double rho_;
};

struct Objective {
  CalibrationPrior prior{0.1};
  bool kl_enabled = true;
};

// Hard cross-entropy target: IR -> 0, WR and SR -> 1.
inline double binary_target(RelevanceGrade g) { return g == RelevanceGrade::IR ? 0.0 : 1.0; }

struct LossParts {
  double total = 0.0;
  double ce = 0.0;
  double kl = 0.0;
};

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Per-sample loss terms and d(total)/dz for logit z.
struct SampleLoss {
  double ce = 0.0;
  double kl = 0.0;
  double dz = 0.0;
};

inline SampleLoss sample_loss(double z, RelevanceGrade g, const Objective& obj) {
  const double p = sigmoid(z);
  const double log_p = -softplus(-z);
  const double log_1mp = -softplus(z);
  const double y = binary_target(g);
  const auto q = obj.prior.row(g);
  SampleLoss s;
  s.ce = -(y * log_p + (1.0 - y) * log_1mp);
  // KL([1-p, p] || [q0, q1]), model distribution first, natural log.
  s.kl = (1.0 - p) * (log_1mp - std::log(q[0])) + p * (log_p - std::log(q[1]));
  s.kl = std::max(s.kl, 0.0);
  s.dz = p - y;
  if (obj.kl_enabled) s.dz += p * (1.0 - p) * (z - obj.prior.target_logit(g));
  return s;
}

// ---------------------------------------------------------------------------
// Forward / backward

struct Batch {
  Eigen::MatrixXd x;  // rows = samples
  std::vector<RelevanceGrade> grades;

  std::size_t size() const noexcept { return grades.size(); }
};

inline Batch make_batch(const LabeledDataset& d, std::span<const std::size_t> rows) {
  Batch b;
  b.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d.dims()));
  b.grades.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = d.embeddings.row(rows[i]);
    for (std::size_t c = 0; c < d.dims(); ++c)
      b.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<double>(r[c]);
    b.grades.push_back(d.grades[rows[i]]);
  }
  return b;
}

inline Batch make_batch(const LabeledDataset& d) {
  std::vector<std::size_t> rows(d.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return make_batch(d, rows);
}

namespace detail {

using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline ConstMatMap weights(const ModelParams& p, const ModelArch::Layer& l) {
  return {p.values.data() + l.weight_offset, static_cast<Eigen::Index>(l.in), static_cast<Eigen::Index>(l.out)};
}

inline ConstVecMap bias(const ModelParams& p, const ModelArch::Layer& l) {
  return {p.values.data() + l.bias_offset, static_cast<Eigen::Index>(l.out)};
}

// Activations of every hidden layer; acts[0] is the input.
inline std::vector<Eigen::MatrixXd> backbone_forward(const ModelParams& p, const Eigen::MatrixXd& x) {
  const auto layers = p.arch.layers();
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(layers.size());
  acts.push_back(x);
  for (std::size_t l = 0; l + 1 < layers.size(); ++l) {
    Eigen::MatrixXd z = acts.back() * weights(p, layers[l]);
    z.rowwise() += bias(p, layers[l]).transpose();
    acts.push_back(z.array().tanh().matrix());
  }
  return acts;
}

inline Eigen::VectorXd head_logits(const ModelParams& p, const Eigen::MatrixXd& reps) {
  const auto head = p.arch.layers().back();
  Eigen::VectorXd z = reps * weights(p, head);
  z.array() += p.values[head.bias_offset];
  return z;
}

struct LossSums {
  double ce = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

inline LossSums loss_sums(const Eigen::VectorXd& logits, std::span<const RelevanceGrade> grades,
                          const Objective& obj, Eigen::VectorXd* dz) {
  LossSums s;
  if (dz) dz->resize(logits.size());
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const auto sl = sample_loss(logits(i), grades[static_cast<std::size_t>(i)], obj);
    s.ce += sl.ce;
    s.kl += sl.kl;
    s.total += sl.ce + (obj.kl_enabled ? sl.kl : 0.0);
    if (dz) (*dz)(i) = sl.dz;
  }
  return s;
}

inline LossParts mean_parts(const LossSums& s, std::size_t n) {
  const double inv = 1.0 / static_cast<double>(n);
  return {s.total * inv, s.ce * inv, s.kl * inv};
}

// Writes the gradient of the mean loss into `out` (full length), touching only `slice`.
inline void head_gradient(const ModelParams& p, const Eigen::MatrixXd& reps, const Eigen::VectorXd& dz_mean,
                          std::span<double> out) {
  const auto head = p.arch.layers().back();
  Eigen::Map<Eigen::VectorXd> gw(out.data() + head.weight_offset, static_cast<Eigen::Index>(head.in));
  gw.noalias() = reps.transpose() * dz_mean;
  out[head.bias_offset] = dz_mean.sum();
}

inline void backbone_gradient(const ModelParams& p, const std::vector<Eigen::MatrixXd>& acts,
                              const Eigen::VectorXd& dz_mean, std::span<double> out) {
  const auto layers = p.arch.layers();
  const auto& head = layers.back();
  // d loss / d rep
  Eigen::MatrixXd da = dz_mean * weights(p, head).transpose();
  for (std::size_t l = layers.size() - 1; l-- > 0;) {
    const auto& layer = layers[l];
    const Eigen::MatrixXd& a = acts[l + 1];
    const Eigen::MatrixXd dpre = (da.array() * (1.0 - a.array().square())).matrix();
    Eigen::Map<Eigen::MatrixXd> gw(out.data() + layer.weight_offset, static_cast<Eigen::Index>(layer.in),
                                   static_cast<Eigen::Index>(layer.out));
    gw.noalias() = acts[l].transpose() * dpre;
    Eigen::Map<Eigen::VectorXd> gb(out.data() + layer.bias_offset, static_cast<Eigen::Index>(layer.out));
    gb = dpre.colwise().sum().transpose();
    if (l > 0) da = dpre * weights(p, layer).transpose();
  }
}

}  // namespace detail

struct Prediction {
  double p = 0.5;
  std::vector<double> rep;
};

inline Prediction forward(const ModelParams& params, std::span<const double> x) {
  if (x.size() != params.arch.input_dim)
    throw DataError("forward: input has " + std::to_string(x.size()) + " dims, model expects " +
                    std::to_string(params.arch.input_dim));
  Eigen::MatrixXd in(1, static_cast<Eigen::Index>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw DataError("forward: non-finite input");
    in(0, static_cast<Eigen::Index>(i)) = x[i];
  }
  const auto acts = detail::backbone_forward(params, in);
  const auto z = detail::head_logits(params, acts.back());
  Prediction out;
  out.p = sigmoid(z(0));
  out.rep.assign(acts.back().data(), acts.back().data() + acts.back().size());
  return out;
}

inline LossParts loss(const ModelParams& params, const Batch& batch, const Objective& obj) {
  if (batch.size() == 0) throw DataError("loss: empty batch");
  const auto acts = detail::backbone_forward(params, batch.x);
  const auto z = detail::head_logits(params, acts.back());
  return detail::mean_parts(detail::loss_sums(z, batch.grades, obj, nullptr), batch.size());
}

struct LossAndGrad {
  LossParts loss;
  std::vector<double> grad;
};

inline LossAndGrad loss_and_grad(const ModelParams& params, const Batch& batch, const Objective& obj,
                                 Trainable mask) {
  if (batch.size() == 0) throw DataError("loss: empty batch");
  const auto acts = detail::backbone_forward(params, batch.x);
  const auto z = detail::head_logits(params, acts.back());
  Eigen::VectorXd dz;
  const auto sums = detail::loss_sums(z, batch.grades, obj, &dz);
  dz /= static_cast<double>(batch.size());
  LossAndGrad out{detail::mean_parts(sums, batch.size()), std::vector<double>(params.values.size(), 0.0)};
  if (mask != Trainable::backbone) detail::head_gradient(params, acts.back(), dz, out.grad);
  if (mask != Trainable::head) detail::backbone_gradient(params, acts, dz, out.grad);
  return out;
}

// Exact gradient of the mean loss; entries outside the masked slice are zero.
inline std::vector<double> grad(const ModelParams& params, const Batch& batch, const Objective& obj, Trainable mask) {
  return loss_and_grad(params, batch, obj, mask).grad;
}

// Scores and representations, computed in fixed row blocks so every caller
// sees bit-identical values for the same rows.
inline constexpr std::size_t kEvalBlock = 512;

template <typename T>
Eigen::MatrixXd rows_to_eigen(const DenseRows<T>& m, std::size_t start, std::size_t n) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m.dims()));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = m.row(start + i);
    for (std::size_t c = 0; c < m.dims(); ++c)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = static_cast<double>(r[c]);
  }
  return x;
}

// g(x) for every row, ids preserved.
inline RepMatrix representations(const ModelParams& params, const EmbeddingMatrix& x) {
  if (x.dims() != params.arch.input_dim) throw DataError("representations: input dims mismatch");
  const std::size_t rd = params.arch.rep_dim();
  std::vector<double> data(x.rows() * rd);
  for (std::size_t start = 0; start < x.rows(); start += kEvalBlock) {
    const std::size_t n = std::min(kEvalBlock, x.rows() - start);
    const auto acts = detail::backbone_forward(params, rows_to_eigen(x, start, n));
    const auto& rep = acts.back();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < rd; ++c)
        data[(start + i) * rd + c] = rep(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
  }
  return RepMatrix(x.rows(), rd, std::move(data), x.ids());
}

inline std::vector<double> predict(const ModelParams& params, const EmbeddingMatrix& x) {
  if (x.dims() != params.arch.input_dim) throw DataError("predict: input dims mismatch");
  std::vector<double> out(x.rows());
  for (std::size_t start = 0; start < x.rows(); start += kEvalBlock) {
    const std::size_t n = std::min(kEvalBlock, x.rows() - start);
    const auto acts = detail::backbone_forward(params, rows_to_eigen(x, start, n));
    const auto z = detail::head_logits(params, acts.back());
    for (std::size_t i = 0; i < n; ++i) out[start + i] = sigmoid(z(static_cast<Eigen::Index>(i)));
  }
  return out;
}

// Mean loss over a whole dataset.
inline LossParts dataset_loss(const ModelParams& params, const LabeledDataset& d, const Objective& obj) {
  if (d.empty()) throw DataError("loss: empty dataset");
  detail::LossSums total;
  for (std::size_t start = 0; start < d.size(); start += kEvalBlock) {
    const std::size_t n = std::min(kEvalBlock, d.size() - start);
    const auto acts = detail::backbone_forward(params, rows_to_eigen(d.embeddings, start, n));
    const auto z = detail::head_logits(params, acts.back());
    const auto s = detail::loss_sums(z, std::span(d.grades).subspan(start, n), obj, nullptr);
    total.ce += s.ce;
    total.kl += s.kl;
    total.total += s.total;
  }
  return detail::mean_parts(total, d.size());
}

// ---------------------------------------------------------------------------
// Adam

struct OptState {
  Slice slice;
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline OptState make_adam(const ModelArch& arch, Trainable t, double lr) {
  OptState s;
  s.slice = trainable_slice(arch, t);
  s.m.assign(s.slice.length, 0.0);
  s.v.assign(s.slice.length, 0.0);
  s.lr = lr;
  return s;
}

// Bias-corrected Adam on the trainable slice only; `grads` is full length.
inline void adam_step(OptState& opt, ModelParams& params, std::span<const double> grads) {
  if (grads.size() != params.values.size()) throw DataError("adam_step: gradient length mismatch");
  if (opt.m.size() != opt.slice.length || opt.slice.offset + opt.slice.length > params.values.size())
    throw DataError("adam_step: optimizer state does not match parameters");
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  for (std::size_t i = 0; i < opt.slice.length; ++i) {
    const double g = grads[opt.slice.offset + i];
    opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
    opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
    const double mhat = opt.m[i] / c1;
    const double vhat = opt.v[i] / c2;
    params.values[opt.slice.offset + i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
  }
}

// phi = alpha * phi_ft + (1 - alpha) * phi_lp
inline ModelParams interpolate(const ModelParams& phi_lp, const ModelParams& phi_ft, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("interpolate: alpha must be in [0, 1]");
  if (!(phi_lp.arch == phi_ft.arch) || phi_lp.values.size() != phi_ft.values.size())
    throw DataError("interpolate: checkpoints have different architectures");
  std::vector<double> v(phi_lp.values.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = alpha * phi_ft.values[i] + (1.0 - alpha) * phi_lp.values[i];
  return {phi_lp.arch, std::move(v)};
}

// ---------------------------------------------------------------------------
// Checkpoints
//   "DARL" | u32 version | u32 input_dim | u32 n_hidden | u32 width* | u32 activation
//   | u64 count | f64 payload | u32 crc32 of everything before it

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const ModelParams& p) {
  std::vector<std::uint8_t> out;
  out.reserve(32 + p.values.size() * 8);
  out.insert(out.end(), {'D', 'A', 'R', 'L'});
  bytes::put_le<std::uint32_t>(out, kCheckpointVersion);
  bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.arch.input_dim));
  bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.arch.hidden.size()));
  for (auto w : p.arch.hidden) bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.arch.activation));
  bytes::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(p.values.size()));
  for (double v : p.values) bytes::put_le<double>(out, v);
  bytes::put_le<std::uint32_t>(out, crc32_of(out));
  return out;
}

inline ModelParams decode_checkpoint(std::span<const std::uint8_t> buf) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (buf.size() < pos + n) throw DataError("corrupt checkpoint: truncated at byte " + std::to_string(pos));
  };
  need(4);
  if (std::memcmp(buf.data(), "DARL", 4) != 0) throw DataError("corrupt checkpoint: bad magic");
  pos = 4;
  if (buf.size() < 8) throw DataError("corrupt checkpoint: truncated header");
  const auto stored_crc = bytes::get_le<std::uint32_t>(buf.data() + buf.size() - 4);
  if (crc32_of(buf.first(buf.size() - 4)) != stored_crc) throw DataError("corrupt checkpoint: CRC mismatch");
  auto u32 = [&] {
    need(4);
    const auto v = bytes::get_le<std::uint32_t>(buf.data() + pos);
    pos += 4;
    return v;
  };
  const auto version = u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  ModelArch arch;
  arch.input_dim = u32();
  const auto n_hidden = u32();
  if (n_hidden == 0 || n_hidden > 64) throw DataError("corrupt checkpoint: bad layer count");
  arch.hidden.clear();
  for (std::uint32_t i = 0; i < n_hidden; ++i) arch.hidden.push_back(u32());
  const auto act = u32();
  if (act != static_cast<std::uint32_t>(Activation::tanh)) throw DataError("corrupt checkpoint: unknown activation");
  arch.activation = static_cast<Activation>(act);
  need(8);
  const auto count = bytes::get_le<std::uint64_t>(buf.data() + pos);
  pos += 8;
  try {
    arch.validate();
  } catch (const Error& e) {
    throw DataError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (count != arch.param_count()) throw DataError("corrupt checkpoint: parameter count does not match arch");
  if (buf.size() - 4 - pos != count * 8) throw DataError("corrupt checkpoint: payload size mismatch");
  std::vector<double> v(count);
  for (std::size_t i = 0; i < count; ++i, pos += 8) v[i] = bytes::get_le<double>(buf.data() + pos);
  return {std::move(arch), std::move(v)};
}

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(p));
}

inline ModelParams load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

// Rejects checkpoints whose architecture fingerprint differs from `expected`.
inline ModelParams load_checkpoint(const std::string& path, const ModelArch& expected) {
  auto p = load_checkpoint(path);
  if (!(p.arch == expected))
    throw DataError("checkpoint '" + path + "' has arch " + p.arch.fingerprint() + ", expected " +
                    expected.fingerprint());
  return p;
}

}  // namespace darl
