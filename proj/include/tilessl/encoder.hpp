#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "tilessl/augment.hpp"
#include "tilessl/error.hpp"
#include "tilessl/imaging.hpp"
#include "tilessl/matrix.hpp"
#include "tilessl/params.hpp"
#include "tilessl/rng.hpp"

namespace tilessl {

struct DenseLayer {
  Matrix weight;  // out x in
  std::vector<double> bias;

  std::size_t in() const { return weight.cols(); }
  std::size_t out() const { return weight.rows(); }
  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

// Fully connected network; rectifier on every layer except the last.
// Used for the patch encoder and for the projection / prediction heads.
struct Mlp {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out(); }

  void validate() const {
    require_shape(!layers.empty(), "Mlp: no layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      require_shape(layers[l].bias.size() == layers[l].out(), "Mlp: bias length differs from layer output");
      if (l + 1 < layers.size()) require_shape(layers[l].out() == layers[l + 1].in(), "Mlp: layer shapes do not compose");
    }
  }

  ParamList params() {
    ParamList out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      out.push_back({"layer" + std::to_string(l) + ".weight", layers[l].weight.values(), false});
      out.push_back({"layer" + std::to_string(l) + ".bias", layers[l].bias, true});
    }
    return out;
  }

  friend bool operator==(const Mlp&, const Mlp&) = default;
};

using EncoderParams = Mlp;

// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
inline Mlp make_mlp(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  if (dims.size() < 2) throw ConfigError("make_mlp: need at least input and output dimensions");
  Rng rng(seed);
  Mlp net;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer{Matrix(dims[l + 1], dims[l]), std::vector<double>(dims[l + 1], 0.0)};
    const double bound = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    for (auto& w : layer.weight.values()) w = rng.uniform(-bound, bound);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

// Activations kept for the backward pass. inputs[l] feeds layer l, pre[l] is its affine output.
struct MlpTape {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  Matrix output;
};

inline MlpTape forward_tape(const Mlp& net, const Matrix& batch) {
  net.validate();
  require_shape(batch.cols() == net.input_dim(), "encode: input dimension does not match first layer");
  MlpTape tape;
  Matrix x = batch;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const auto& layer = net.layers[l];
    Matrix z = matmul_nt(x, layer.weight);
    for (std::size_t i = 0; i < z.rows(); ++i) axpy(1.0, layer.bias, z.row(i));
    tape.inputs.push_back(std::move(x));
    x = z;
    if (l + 1 < net.layers.size())
      for (auto& v : x.values()) v = v > 0.0 ? v : 0.0;
    tape.pre.push_back(std::move(z));
  }
  tape.output = std::move(x);
  return tape;
}

inline Matrix encode(const Mlp& net, const Matrix& batch) { return forward_tape(net, batch).output; }

// Per-tensor gradients, shape-congruent with the Mlp, plus the gradient wrt the input batch.
struct GradBundle {
  std::vector<DenseLayer> layers;
  Matrix input;

  GradList grads() const {
    GradList out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      out.push_back({"layer" + std::to_string(l) + ".weight", layers[l].weight.values()});
      out.push_back({"layer" + std::to_string(l) + ".bias", layers[l].bias});
    }
    return out;
  }
};

inline GradBundle zero_grads(const Mlp& net) {
  GradBundle g;
  for (const auto& l : net.layers) g.layers.push_back({Matrix(l.out(), l.in()), std::vector<double>(l.out(), 0.0)});
  return g;
}

inline GradBundle backward_tape(const Mlp& net, const MlpTape& tape, const Matrix& upstream) {
  require_shape(upstream.rows() == tape.output.rows() && upstream.cols() == net.output_dim(),
                "encode_backward: upstream gradient shape must be batch x m");
  GradBundle grads = zero_grads(net);
  Matrix g = upstream;
  for (std::size_t li = net.layers.size(); li-- > 0;) {
    const auto& layer = net.layers[li];
    if (li + 1 < net.layers.size()) {
      auto gv = g.values();
      auto zv = tape.pre[li].values();
      for (std::size_t i = 0; i < gv.size(); ++i)
        if (!(zv[i] > 0.0)) gv[i] = 0.0;
    }
    const Matrix& x = tape.inputs[li];
    auto& dw = grads.layers[li].weight;
    auto& db = grads.layers[li].bias;
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto gi = g.row(i);
      auto xi = x.row(i);
      for (std::size_t o = 0; o < layer.out(); ++o) {
        if (gi[o] == 0.0) continue;
        axpy(gi[o], xi, dw.row(o));
        db[o] += gi[o];
      }
    }
    Matrix prev(g.rows(), layer.in());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      auto gi = g.row(i);
      for (std::size_t o = 0; o < layer.out(); ++o)
        if (gi[o] != 0.0) axpy(gi[o], layer.weight.row(o), prev.row(i));
    }
    g = std::move(prev);
  }
  grads.input = std::move(g);
  return grads;
}

inline GradBundle encode_backward(const Mlp& net, const Matrix& batch, const Matrix& upstream) {
  return backward_tape(net, forward_tape(net, batch), upstream);
}

inline void accumulate(GradBundle& into, const GradBundle& g) {
  require_shape(into.layers.size() == g.layers.size(), "accumulate: layer count mismatch");
  for (std::size_t l = 0; l < g.layers.size(); ++l) {
    add_inplace(into.layers[l].weight, g.layers[l].weight);
    axpy(1.0, g.layers[l].bias, into.layers[l].bias);
  }
}

// Data-parallel backward: rows are split into contiguous shards, each shard runs on its
// own thread, and shard gradients are summed in shard order so results depend only on
// the worker count.
inline GradBundle encode_backward_sharded(const Mlp& net, const Matrix& batch, const Matrix& upstream,
                                          std::size_t workers) {
  if (workers <= 1 || batch.rows() < 2) return encode_backward(net, batch, upstream);
  workers = std::min(workers, batch.rows());
  const std::size_t per = (batch.rows() + workers - 1) / workers;
  std::vector<GradBundle> shard_grads(workers);
  std::vector<std::thread> threads;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t s = 0; s < workers; ++s) {
    const std::size_t lo = s * per, hi = std::min(batch.rows(), lo + per);
    ranges.emplace_back(lo, hi);
  }
  for (std::size_t s = 0; s < workers; ++s) {
    threads.emplace_back([&, s] {
      const auto [lo, hi] = ranges[s];
      if (lo >= hi) {
        shard_grads[s] = zero_grads(net);
        shard_grads[s].input = Matrix(0, net.input_dim());
        return;
      }
      Matrix xb(hi - lo, batch.cols()), ub(hi - lo, upstream.cols());
      for (std::size_t i = lo; i < hi; ++i) {
        std::copy(batch.row(i).begin(), batch.row(i).end(), xb.row(i - lo).begin());
        std::copy(upstream.row(i).begin(), upstream.row(i).end(), ub.row(i - lo).begin());
      }
      shard_grads[s] = encode_backward(net, xb, ub);
    });
  }
  for (auto& t : threads) t.join();
  GradBundle total = zero_grads(net);
  total.input = Matrix(batch.rows(), batch.cols());
  for (std::size_t s = 0; s < workers; ++s) {
    accumulate(total, shard_grads[s]);
    const auto [lo, hi] = ranges[s];
    for (std::size_t i = lo; i < hi; ++i)
      std::copy(shard_grads[s].input.row(i - lo).begin(), shard_grads[s].input.row(i - lo).end(), total.input.row(i).begin());
  }
  return total;
}

// How raw patches are presented to the encoder: bilinear downsample, unit scaling,
// and optional replication onto three channels (after all augmentation).
struct InputSpec {
  std::size_t side = 24;
  std::size_t channels = 1;

  std::size_t dim() const { return side * side * channels; }
};

inline std::vector<double> encoder_input(const Image16& patch, const InputSpec& spec) {
  const Image16 small = resize(patch, spec.side, spec.side);
  std::vector<double> out;
  out.reserve(spec.dim());
  if (spec.channels == 3) {
    const Raster3 rgb = to_three_channel(small);
    for (auto p : rgb.planes) out.push_back(p / 65535.0);
  } else {
    for (auto p : small.pixels) out.push_back(p / 65535.0);
  }
  return out;
}

inline Matrix encoder_batch(std::span<const Image16> patches, const InputSpec& spec) {
  Matrix batch(patches.size(), spec.dim());
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto row = encoder_input(patches[i], spec);
    std::copy(row.begin(), row.end(), batch.row(i).begin());
  }
  return batch;
}

}  // namespace tilessl
