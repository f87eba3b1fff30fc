#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "tilessl/error.hpp"

namespace tilessl {

// A named view onto one trainable tensor. Optimizers operate on lists of these;
// the gradient list for a model is collected in the same order as its params.
struct ParamView {
  std::string name;
  std::span<double> values;
  bool bias_like = false;  // excluded from LARS adaptation and weight decay
};

struct GradView {
  std::string name;
  std::span<const double> values;
};

using ParamList = std::vector<ParamView>;
using GradList = std::vector<GradView>;

inline void require_congruent(const ParamList& params, const GradList& grads) {
  require_shape(params.size() == grads.size(), "parameter/gradient list length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    require_shape(params[i].values.size() == grads[i].values.size(),
                  "parameter/gradient tensor size mismatch");
}

inline void append(ParamList& dst, ParamList src) {
  for (auto& p : src) dst.push_back(std::move(p));
}
inline void append(GradList& dst, GradList src) {
  for (auto& g : src) dst.push_back(std::move(g));
}

inline std::vector<double> flatten(const ParamList& params) {
  std::vector<double> out;
  for (const auto& p : params) out.insert(out.end(), p.values.begin(), p.values.end());
  return out;
}

// Owned gradient storage shaped like a ParamList, used to sum per-sample gradients.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(const ParamList& params) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      tensors_.emplace_back(p.values.size(), 0.0);
    }
  }

  void zero() {
    for (auto& t : tensors_) std::fill(t.begin(), t.end(), 0.0);
  }

  void add(const GradList& grads, double scale = 1.0) {
    require_shape(grads.size() == tensors_.size(), "GradBuffer: gradient list length mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
      require_shape(grads[i].values.size() == tensors_[i].size(), "GradBuffer: tensor size mismatch");
      for (std::size_t j = 0; j < tensors_[i].size(); ++j) tensors_[i][j] += scale * grads[i].values[j];
    }
  }

  void scale(double s) {
    for (auto& t : tensors_)
      for (auto& v : t) v *= s;
  }

  GradList view() const {
    GradList out;
    for (std::size_t i = 0; i < tensors_.size(); ++i) out.push_back({names_[i], tensors_[i]});
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<double>> tensors_;
};

}  // namespace tilessl
