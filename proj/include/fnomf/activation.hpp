#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fnomf {

enum class Activation { tanh, relu };

inline double activate(Activation act, double x) {
  return act == Activation::tanh ? std::tanh(x) : (x > 0.0 ? x : 0.0);
}

// ReLU'(0) = 0.
inline double activate_d1(Activation act, double x) {
  if (act == Activation::relu) return x > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

// Pointwise second derivative; zero for ReLU (its delta mass at 0 never contributes
// to the expectations used here since ReLU(0) = 0).
inline double activate_d2(Activation act, double x) {
  if (act == Activation::relu) return 0.0;
  const double t = std::tanh(x);
  return -2.0 * t * (1.0 - t * t);
}

inline std::string_view to_string(Activation act) {
  return act == Activation::tanh ? "tanh" : "relu";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + std::string(name) + "'");
}

}  // namespace fnomf
