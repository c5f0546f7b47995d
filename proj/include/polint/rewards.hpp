#pragma once

// Response-format parsing, accuracy/format rewards and the two supervised
// losses, all over plain log-probability vectors.

#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "polint/common.hpp"
#include "polint/tool_eval.hpp"
#include "polint/vocab.hpp"

namespace polint {

struct ParsedResponse {
  std::string think;
  std::string answer;
  bool format_ok = false;
};

namespace detail {

inline std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t p = text.find(needle); p != std::string_view::npos; p = text.find(needle, p + needle.size())) ++n;
  return n;
}

}  // namespace detail

/// format_ok iff exactly one <think>...</think> block precedes exactly one
/// \boxed{...}. The answer comes from the first box regardless.
inline ParsedResponse parse_response(std::string_view text) {
  ParsedResponse r;
  constexpr std::string_view open = special::kThinkOpen, close = special::kThinkClose, box = special::kBoxOpen;
  const std::size_t b = text.find(box);
  std::size_t box_end = std::string_view::npos;
  if (b != std::string_view::npos) {
    int depth = 1;
    for (std::size_t i = b + box.size(); i < text.size(); ++i) {
      if (text[i] == '{') ++depth;
      if (text[i] == '}' && --depth == 0) {
        box_end = i;
        break;
      }
    }
    if (box_end != std::string_view::npos) {
      r.answer = trim(text.substr(b + box.size(), box_end - b - box.size()));
    }
  }
  const std::size_t t0 = text.find(open), t1 = text.find(close);
  const bool one_think = detail::count_occurrences(text, open) == 1 && detail::count_occurrences(text, close) == 1 &&
                         t0 != std::string_view::npos && t1 != std::string_view::npos && t0 < t1;
  if (one_think) r.think = trim(text.substr(t0 + open.size(), t1 - t0 - open.size()));
  r.format_ok = one_think && box_end != std::string_view::npos && detail::count_occurrences(text, box) == 1 &&
                t1 + close.size() <= b;
  return r;
}

inline ParsedResponse parse_response(const Tokens& toks) { return parse_response(join(toks)); }

inline constexpr double kDefaultFormatWeight = 0.1;

struct ClevrReward {
  double acc = 0.0;
  double format = 0.0;
  double total = 0.0;
};

inline ClevrReward reward_clevr(const ParsedResponse& p, const std::string& gold,
                                double format_weight = kDefaultFormatWeight) {
  ClevrReward r;
  r.acc = !p.answer.empty() && p.answer == gold ? 1.0 : 0.0;
  r.format = p.format_ok ? 1.0 : 0.0;
  r.total = r.acc + format_weight * r.format;
  return r;
}

struct GtaReward {
  CallScore score;
  bool parsed = false;
  double format = 0.0;
  double total = 0.0;
};

inline GtaReward reward_gta(const ParsedResponse& p, const ToolCall& gold, const ToolRuleSet& rs,
                            double format_weight = kDefaultFormatWeight) {
  GtaReward r;
  r.format = p.format_ok ? 1.0 : 0.0;
  try {
    r.score = score_call(parse_tool_call(p.answer), gold, rs);
    r.parsed = true;
  } catch (const ParseError&) {
  } catch (const SchemaError&) {
  }
  r.total = (r.parsed ? r.score.overall : 0.0) + format_weight * r.format;
  return r;
}

// ------------------------------------------------------------------ losses

/// A loss value with its derivative w.r.t. each input log-probability.
struct LossGrad {
  double value = 0.0;
  std::vector<double> dlogp;
};

/// dL/dlogp_t of the masked mean: -m_t / sum m. Linear in logp, so the
/// weights can drive a gradient pass without a prior forward pass.
inline std::vector<double> vm_cpt_weights(const std::vector<bool>& mask) {
  const auto kept = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (kept == 0) throw ValidationError("vm_cpt_loss: every token is masked");
  std::vector<double> w(mask.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(kept);
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) w[t] = -inv;
  }
  return w;
}

/// -(1/sum m) sum m_t log p_t.
inline LossGrad vm_cpt_loss(std::span<const double> logp, const std::vector<bool>& mask) {
  if (logp.size() != mask.size()) throw ValidationError("vm_cpt_loss: logprob/mask length mismatch");
  LossGrad g;
  g.dlogp = vm_cpt_weights(mask);
  double sum = 0.0;
  for (std::size_t t = 0; t < logp.size(); ++t) {
    if (mask[t]) sum += logp[t];
  }
  g.value = -sum / static_cast<double>(std::count(mask.begin(), mask.end(), true));
  return g;
}

struct SftLoss {
  LossGrad sum;
  double mean = 0.0;
};

/// -sum log p over the output O = [C; A]; prompt tokens are not passed in.
inline SftLoss cot_sft_loss(std::span<const double> output_logp) {
  if (output_logp.empty()) throw ValidationError("cot_sft_loss: empty output sequence");
  SftLoss l;
  double s = 0.0;
  for (double v : output_logp) s += v;
  l.sum.value = -s;
  l.sum.dlogp.assign(output_logp.size(), -1.0);
  l.mean = -s / static_cast<double>(output_logp.size());
  return l;
}

}  // namespace polint
