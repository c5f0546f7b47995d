#pragma once

// Windowed autoregressive token model: shared embedding, learned positional
// mixing heads over the last k tokens, one tanh layer and a softmax output.
// Every position is scored independently, so gradients are exact and cheap.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "polint/common.hpp"
#include "polint/vocab.hpp"

namespace polint {

struct ModelDims {
  int k = 8;   // context window
  int d = 32;  // embedding width
  int h = 64;  // hidden width

  int heads() const { return std::min(k, 8); }
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline constexpr int kCheckpointFormat = 1;

class ToyModel {
 public:
  ToyModel(Vocab vocab, ModelDims dims, std::uint64_t init_seed) : vocab_(std::move(vocab)), dims_(dims) {
    if (dims_.k < 1 || dims_.d < 1 || dims_.h < 1) throw ConfigError("model dims must be positive");
    layout();
    params_.assign(total_, 0.0);
    Rng rng(derive_seed(init_seed, "toy_model"));
    const int m = dims_.heads();
    for (std::size_t i = 0; i < V_ * dsz(); ++i) params_[off_E_ + i] = 0.3 * rng.normal();
    for (int a = 0; a < m; ++a) {
      for (int j = 0; j < dims_.k; ++j) {
        double v;
        if (a < 6) v = (j == a) ? 1.0 : 0.0;
        else v = 4.0 / dims_.k;
        params_[off_A_ + static_cast<std::size_t>(a * dims_.k + j)] = v;
      }
    }
    const double ws = 1.0 / std::sqrt(static_cast<double>(m * dims_.d));
    for (std::size_t i = 0; i < hsz() * static_cast<std::size_t>(m) * dsz(); ++i) params_[off_W_ + i] = ws * rng.normal();
    const double us = 0.1 / std::sqrt(static_cast<double>(dims_.h));
    for (std::size_t i = 0; i < V_ * hsz(); ++i) params_[off_U_ + i] = us * rng.normal();
  }

  static std::size_t param_count(std::size_t V, const ModelDims& dims) {
    const auto m = static_cast<std::size_t>(dims.heads()), k = static_cast<std::size_t>(dims.k),
               d = static_cast<std::size_t>(dims.d), h = static_cast<std::size_t>(dims.h);
    return V * d + m * k + h * m * d + h + V * h + V;
  }

  const Vocab& vocab() const { return vocab_; }
  const ModelDims& dims() const { return dims_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::size_t size() const { return total_; }

  /// Next-token log-probabilities given the full history (only the last k
  /// tokens are visible; missing slots read as <pad>).
  std::vector<double> next_logprobs(std::span<const int> history) const {
    Work w(*this);
    std::vector<int> ctx = context(history, history.size());
    forward(ctx.data(), w);
    return w.logp;
  }

  /// Teacher-forced log p(output_t | <bos>, prompt, output_<t).
  std::vector<double> seq_logprob(std::span<const int> prompt, std::span<const int> output) const {
    const auto hist = history_of(prompt, output);
    std::vector<double> out(output.size());
    Work w(*this);
    const std::size_t base = hist.size() - output.size();
    for (std::size_t t = 0; t < output.size(); ++t) {
      const auto ctx = context(hist, base + t);
      forward(ctx.data(), w);
      out[t] = w.logp[static_cast<std::size_t>(output[t])];
    }
    return out;
  }

  std::vector<double> seq_logprob(const Tokens& prompt, const Tokens& output) const {
    return seq_logprob(vocab_.encode(prompt), vocab_.encode(output));
  }

  /// Ancestral sampling; temperature 0 is greedy with lowest-id tie-break.
  /// Stops after the token that closes the boxed answer, or at max_len.
  std::vector<int> sample(std::span<const int> prompt, int max_len, double temperature, std::uint64_t seed) const {
    if (temperature < 0) throw ConfigError("temperature must be >= 0");
    Rng rng(seed);
    std::vector<int> hist;
    hist.reserve(prompt.size() + static_cast<std::size_t>(max_len) + 1);
    hist.push_back(vocab_.bos());
    hist.insert(hist.end(), prompt.begin(), prompt.end());
    const std::size_t base = hist.size();
    const int box_open = vocab_.box_open(), box_close = vocab_.box_close();
    const auto brace = vocab_.find("{");
    int depth = 0;
    Work w(*this);
    std::vector<double> p(V_);
    for (int step = 0; step < max_len; ++step) {
      const auto ctx = context(hist, hist.size());
      forward(ctx.data(), w);
      int tok = 0;
      if (temperature == 0.0) {
        for (std::size_t v = 1; v < V_; ++v) {
          if (w.logits[v] > w.logits[static_cast<std::size_t>(tok)]) tok = static_cast<int>(v);
        }
      } else {
        double mx = -INFINITY;
        for (std::size_t v = 0; v < V_; ++v) mx = std::max(mx, w.logits[v] / temperature);
        double z = 0.0;
        for (std::size_t v = 0; v < V_; ++v) z += (p[v] = std::exp(w.logits[v] / temperature - mx));
        double u = rng.uniform() * z;
        tok = static_cast<int>(V_ - 1);
        for (std::size_t v = 0; v < V_; ++v) {
          if (u < p[v]) {
            tok = static_cast<int>(v);
            break;
          }
          u -= p[v];
        }
      }
      hist.push_back(tok);
      if (tok == box_open) {
        ++depth;
      } else if (depth > 0 && brace && tok == *brace) {
        ++depth;
      } else if (depth > 0 && tok == box_close && --depth == 0) {
        break;
      }
    }
    return {hist.begin() + static_cast<long>(base), hist.end()};
  }

  /// Adds d/dtheta of sum_t weights[t] * log p(output_t | ...) into grad and
  /// returns that weighted sum. Positions with zero weight are skipped.
  double accumulate_gradient(std::span<const int> prompt, std::span<const int> output, std::span<const double> weights,
                             std::vector<double>& grad, long batch_id = -1) const {
    if (weights.size() != output.size()) throw ValidationError("accumulate_gradient: weight/output length mismatch");
    if (grad.size() != total_) grad.assign(total_, 0.0);
    const auto hist = history_of(prompt, output);
    const std::size_t base = hist.size() - output.size();
    Work w(*this);
    double value = 0.0;
    for (std::size_t t = 0; t < output.size(); ++t) {
      if (weights[t] == 0.0) continue;
      const auto ctx = context(hist, base + t);
      forward(ctx.data(), w);
      const auto y = static_cast<std::size_t>(output[t]);
      if (!std::isfinite(w.logp[y])) {
        throw NumericError("non-finite log-probability in batch " + std::to_string(batch_id));
      }
      value += weights[t] * w.logp[y];
      backward(ctx.data(), y, weights[t], w, grad);
    }
    return value;
  }

  std::uint64_t vocab_hash() const { return vocab_.hash(); }

 private:
  struct Work {
    explicit Work(const ToyModel& m)
        : mixed(static_cast<std::size_t>(m.dims_.heads()) * m.dsz()),
          z(m.hsz()),
          logits(m.V_),
          logp(m.V_),
          dz(m.hsz()),
          dmixed(mixed.size()) {}
    std::vector<double> mixed, z, logits, logp, dz, dmixed;
  };

  std::size_t dsz() const { return static_cast<std::size_t>(dims_.d); }
  std::size_t hsz() const { return static_cast<std::size_t>(dims_.h); }

  void layout() {
    V_ = vocab_.size();
    const auto m = static_cast<std::size_t>(dims_.heads());
    off_E_ = 0;
    off_A_ = off_E_ + V_ * dsz();
    off_W_ = off_A_ + m * static_cast<std::size_t>(dims_.k);
    off_b1_ = off_W_ + hsz() * m * dsz();
    off_U_ = off_b1_ + hsz();
    off_b2_ = off_U_ + V_ * hsz();
    total_ = off_b2_ + V_;
    if (total_ != param_count(V_, dims_)) throw ValidationError("parameter layout mismatch");
  }

  std::vector<int> history_of(std::span<const int> prompt, std::span<const int> output) const {
    std::vector<int> hist;
    hist.reserve(prompt.size() + output.size() + 1);
    hist.push_back(vocab_.bos());
    hist.insert(hist.end(), prompt.begin(), prompt.end());
    hist.insert(hist.end(), output.begin(), output.end());
    for (int id : hist) {
      if (id < 0 || static_cast<std::size_t>(id) >= V_) throw ValidationError("token id out of range");
    }
    return hist;
  }

  /// Slot j holds the token j+1 places before position `pos`.
  std::vector<int> context(std::span<const int> hist, std::size_t pos) const {
    std::vector<int> ctx(static_cast<std::size_t>(dims_.k), pad_id());
    for (std::size_t j = 0; j < ctx.size() && j < pos; ++j) ctx[j] = hist[pos - 1 - j];
    return ctx;
  }

  int pad_id() const { return 0; }

  void forward(const int* ctx, Work& w) const {
    const int m = dims_.heads(), k = dims_.k;
    const std::size_t d = dsz(), h = hsz();
    const double* E = params_.data() + off_E_;
    const double* A = params_.data() + off_A_;
    std::fill(w.mixed.begin(), w.mixed.end(), 0.0);
    for (int a = 0; a < m; ++a) {
      double* out = w.mixed.data() + static_cast<std::size_t>(a) * d;
      for (int j = 0; j < k; ++j) {
        const double coef = A[a * k + j];
        if (coef == 0.0) continue;
        const double* e = E + static_cast<std::size_t>(ctx[j]) * d;
        for (std::size_t x = 0; x < d; ++x) out[x] += coef * e[x];
      }
    }
    const std::size_t in = static_cast<std::size_t>(m) * d;
    const double* W = params_.data() + off_W_;
    const double* b1 = params_.data() + off_b1_;
    for (std::size_t u = 0; u < h; ++u) {
      const double* row = W + u * in;
      double s = b1[u];
      for (std::size_t x = 0; x < in; ++x) s += row[x] * w.mixed[x];
      w.z[u] = std::tanh(s);
    }
    const double* U = params_.data() + off_U_;
    const double* b2 = params_.data() + off_b2_;
    double mx = -INFINITY;
    for (std::size_t v = 0; v < V_; ++v) {
      const double* row = U + v * h;
      double s = b2[v];
      for (std::size_t u = 0; u < h; ++u) s += row[u] * w.z[u];
      w.logits[v] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (std::size_t v = 0; v < V_; ++v) z += std::exp(w.logits[v] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t v = 0; v < V_; ++v) w.logp[v] = w.logits[v] - lse;
  }

  void backward(const int* ctx, std::size_t y, double g, Work& w, std::vector<double>& grad) const {
    const int m = dims_.heads(), k = dims_.k;
    const std::size_t d = dsz(), h = hsz(), in = static_cast<std::size_t>(m) * d;
    const double* U = params_.data() + off_U_;
    double* gU = grad.data() + off_U_;
    double* gb2 = grad.data() + off_b2_;
    std::fill(w.dz.begin(), w.dz.end(), 0.0);
    for (std::size_t v = 0; v < V_; ++v) {
      const double dl = g * ((v == y ? 1.0 : 0.0) - std::exp(w.logp[v]));
      gb2[v] += dl;
      const double* row = U + v * h;
      double* grow = gU + v * h;
      for (std::size_t u = 0; u < h; ++u) {
        grow[u] += dl * w.z[u];
        w.dz[u] += dl * row[u];
      }
    }
    const double* W = params_.data() + off_W_;
    double* gW = grad.data() + off_W_;
    double* gb1 = grad.data() + off_b1_;
    std::fill(w.dmixed.begin(), w.dmixed.end(), 0.0);
    for (std::size_t u = 0; u < h; ++u) {
      const double dp = w.dz[u] * (1.0 - w.z[u] * w.z[u]);
      if (dp == 0.0) continue;
      gb1[u] += dp;
      const double* row = W + u * in;
      double* grow = gW + u * in;
      for (std::size_t x = 0; x < in; ++x) {
        grow[x] += dp * w.mixed[x];
        w.dmixed[x] += dp * row[x];
      }
    }
    const double* E = params_.data() + off_E_;
    const double* A = params_.data() + off_A_;
    double* gE = grad.data() + off_E_;
    double* gA = grad.data() + off_A_;
    for (int a = 0; a < m; ++a) {
      const double* dm = w.dmixed.data() + static_cast<std::size_t>(a) * d;
      for (int j = 0; j < k; ++j) {
        const auto row = static_cast<std::size_t>(ctx[j]) * d;
        const double* e = E + row;
        double* ge = gE + row;
        const double coef = A[a * k + j];
        double s = 0.0;
        for (std::size_t x = 0; x < d; ++x) {
          s += dm[x] * e[x];
          ge[x] += coef * dm[x];
        }
        gA[a * k + j] += s;
      }
    }
  }

  Vocab vocab_;
  ModelDims dims_;
  std::size_t V_ = 0;
  std::size_t off_E_ = 0, off_A_ = 0, off_W_ = 0, off_b1_ = 0, off_U_ = 0, off_b2_ = 0, total_ = 0;
  std::vector<double> params_;
};

// ------------------------------------------------------------- optimizers

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::vector<double>& params, const std::vector<double>& grad, double lr) = 0;
};

class Sgd final : public Optimizer {
 public:
  void step(std::vector<double>& params, const std::vector<double>& grad, double lr) override {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
  }
};

class Adam final : public Optimizer {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::vector<double>& params, const std::vector<double>& grad, double lr) override {
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  double b1_, b2_, eps_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

/// Rescales grad in place so its L2 norm is at most max_norm; returns the
/// norm before scaling.
inline double clip_grad_norm(std::vector<double>& grad, double max_norm) {
  double s = 0.0;
  for (double g : grad) s += g * g;
  const double norm = std::sqrt(s);
  if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm");
  if (max_norm > 0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (double& g : grad) g *= f;
  }
  return norm;
}

// ---------------------------------------------------------- gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Central differences on the given coordinates. Relative error is
/// |a - n| / max(|a|, |n|, floor) so near-zero components are compared
/// absolutely at the floor scale.
inline GradCheckResult finite_difference_check(std::vector<double>& params,
                                               const std::function<double()>& loss,
                                               const std::vector<double>& analytic,
                                               const std::vector<std::size_t>& coords, double step = 1e-5,
                                               double floor = 1e-6) {
  GradCheckResult r;
  for (std::size_t c : coords) {
    const double orig = params[c];
    params[c] = orig + step;
    const double up = loss();
    params[c] = orig - step;
    const double down = loss();
    params[c] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), floor});
    const double rel = std::abs(analytic[c] - numeric) / denom;
    if (r.checked == 0 || rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = c;
    }
    ++r.checked;
  }
  return r;
}

// ------------------------------------------------------------- checkpoint

inline void save_checkpoint(const ToyModel& model, const std::filesystem::path& path) {
  nlohmann::ordered_json header{{"format_version", kCheckpointFormat},
                                {"vocab_hash", hex64(model.vocab_hash())},
                                {"k", model.dims().k},
                                {"d", model.dims().d},
                                {"h", model.dims().h},
                                {"param_count", model.size()}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  std::vector<unsigned char> buf(model.size() * 8);
  for (std::size_t i = 0; i < model.size(); ++i) {
    auto bits = std::bit_cast<std::uint64_t>(model.params()[i]);
    for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw ValidationError("short write on checkpoint " + path.string());
}

inline nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("checkpoint has no header");
  auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded()) throw ValidationError("checkpoint header is not JSON");
  return j;
}

inline ToyModel load_checkpoint(const std::filesystem::path& path, const Vocab& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("checkpoint has no header");
  const auto h = nlohmann::json::parse(line, nullptr, false);
  if (h.is_discarded() || !h.is_object()) throw ValidationError("checkpoint header is not JSON");
  if (h.value("format_version", 0) != kCheckpointFormat) throw ValidationError("unsupported checkpoint format");
  if (h.at("vocab_hash").get<std::string>() != hex64(vocab.hash())) {
    throw ValidationError("checkpoint vocab hash " + h.at("vocab_hash").get<std::string>() + " does not match vocab " +
                          hex64(vocab.hash()));
  }
  ModelDims dims{h.at("k").get<int>(), h.at("d").get<int>(), h.at("h").get<int>()};
  ToyModel model(vocab, dims, 0);
  const auto count = h.at("param_count").get<std::size_t>();
  if (count != model.size()) throw ValidationError("checkpoint parameter count does not match its dims");
  std::vector<unsigned char> buf(count * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw ValidationError("checkpoint is truncated");
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError("checkpoint has trailing bytes");
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
    model.params()[i] = std::bit_cast<double>(bits);
  }
  return model;
}

}  // namespace polint
