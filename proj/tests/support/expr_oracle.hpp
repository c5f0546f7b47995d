#pragma once

#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "polint/common.hpp"

namespace polint::oracle {

// Shunting-yard evaluator over the same grammar: + - (1, left), * / (2,
// left), prefix minus/plus (3), ** (4, right).
struct YardError {};

inline double yard_eval(const std::string& s) {
  std::vector<std::string> out_q;
  std::vector<std::string> ops;
  auto prec = [](const std::string& o) {
    if (o == "+" || o == "-") return 1;
    if (o == "*" || o == "/") return 2;
    if (o == "neg" || o == "pos") return 3;
    return 4;
  };
  bool expect_operand = true;
  for (std::size_t i = 0; i < s.size();) {
    const char c = s[i];
    if (c == ' ') {
      ++i;
    } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      std::size_t j = i;
      while (j < s.size() && (std::isdigit(static_cast<unsigned char>(s[j])) || s[j] == '.')) ++j;
      out_q.push_back(s.substr(i, j - i));
      i = j;
      expect_operand = false;
    } else if (c == '(') {
      ops.push_back("(");
      ++i;
      expect_operand = true;
    } else if (c == ')') {
      while (!ops.empty() && ops.back() != "(") {
        out_q.push_back(ops.back());
        ops.pop_back();
      }
      ops.pop_back();
      ++i;
      expect_operand = false;
    } else {
      std::string op = (c == '*' && i + 1 < s.size() && s[i + 1] == '*') ? "**" : std::string(1, c);
      i += op.size();
      if (expect_operand) {
        ops.push_back(op == "-" ? "neg" : "pos");
        continue;
      }
      while (!ops.empty() && ops.back() != "(") {
        const int p2 = prec(ops.back()), p1 = prec(op);
        if (p2 > p1 || (p2 == p1 && op != "**")) {
          out_q.push_back(ops.back());
          ops.pop_back();
        } else {
          break;
        }
      }
      ops.push_back(op);
      expect_operand = true;
    }
  }
  while (!ops.empty()) {
    out_q.push_back(ops.back());
    ops.pop_back();
  }
  std::vector<double> st;
  for (const auto& t : out_q) {
    if (t == "neg" || t == "pos") {
      if (t == "neg") st.back() = -st.back();
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(t[0])) || t[0] == '.') {
      st.push_back(std::stod(t));
      continue;
    }
    const double b = st.back();
    st.pop_back();
    const double a = st.back();
    double r = 0;
    if (t == "+") r = a + b;
    else if (t == "-") r = a - b;
    else if (t == "*") r = a * b;
    else if (t == "/") {
      if (b == 0.0) throw YardError{};
      r = a / b;
    } else {
      if (a == 0.0 && b < 0.0) throw YardError{};
      r = std::pow(a, b);
    }
    if (!std::isfinite(r)) throw YardError{};
    st.back() = r;
  }
  return st.back();
}

inline std::string random_expr(Rng& rng, int depth) {
  if (depth == 0 || rng.uniform() < 0.25) {
    std::string num = std::to_string(rng.between(0, 9));
    if (rng.uniform() < 0.2) num += "." + std::to_string(rng.between(0, 9));
    return num;
  }
  const double u = rng.uniform();
  if (u < 0.1) return "-" + random_expr(rng, depth - 1);
  if (u < 0.2) return "(" + random_expr(rng, depth - 1) + ")";
  if (u < 0.3) {
    // keep powers small: parenthesized base, small integer exponent
    return "(" + random_expr(rng, depth - 1) + ")**" + (rng.bernoulli(0.3) ? "-" : "") +
           std::to_string(rng.between(0, 3));
  }
  static const char* ops[] = {" + ", " - ", " * ", " / "};
  return random_expr(rng, depth - 1) + ops[rng.below(4)] + random_expr(rng, depth - 1);
}

}  // namespace polint::oracle
