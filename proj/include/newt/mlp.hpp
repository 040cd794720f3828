#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "newt/nn.hpp"
#include "newt/param_store.hpp"

namespace newt {

// How the last layer of an MLP is finished. `gaussian_head` is a plain linear
// output that the caller splits into mean and log-std halves.
enum class FinalActivation { simplicial, linear, gaussian_head };

struct MlpSpec {
  // Input width followed by the output width of every layer.
  std::vector<Index> layer_widths;
  FinalActivation final_activation = FinalActivation::linear;
  Index simplicial_v = 8;
  double simplicial_tau = 1.0;
  double ln_eps = kLayerNormEps;

  Index input_dim() const { return layer_widths.front(); }
  Index output_dim() const { return layer_widths.back(); }
  Index num_layers() const { return static_cast<Index>(layer_widths.size()) - 1; }
};

// Activations recorded by one forward call, replayed by Mlp::backward.
template <typename S>
struct MlpTape {
  struct Layer {
    Matrix<S> input;
    Matrix<S> normed;  // LayerNorm output, input of the activation
    LayerNormCache<S> ln;
    Matrix<S> output;
  };
  std::vector<Layer> layers;
  bool recorded() const { return !layers.empty(); }
};

// Stack of NormedLinear blocks (linear -> LayerNorm -> Mish). The last block
// is either NormedLinear with a simplicial activation or a plain linear layer.
template <typename S>
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, MlpSpec spec) : prefix_(std::move(prefix)), spec_(std::move(spec)) {
    if (spec_.num_layers() < 1) throw std::invalid_argument("mlp needs at least one layer");
    for (Index w : spec_.layer_widths)
      if (w < 1) throw std::invalid_argument("mlp widths must be positive");
    if (spec_.final_activation == FinalActivation::simplicial &&
        spec_.output_dim() % spec_.simplicial_v != 0)
      throw DimensionError("mlp: simplicial output width not divisible by group size");
  }

  const std::string& prefix() const { return prefix_; }
  const MlpSpec& spec() const { return spec_; }

  void init(ParamStore<S>& store, Rng& rng, LrGroup group = LrGroup::base) const {
    for (Index l = 0; l < spec_.num_layers(); ++l) {
      const Index in = spec_.layer_widths[l], out = spec_.layer_widths[l + 1];
      const double bound = std::sqrt(1.0 / static_cast<double>(in));
      Matrix<S> w(in, out);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
      Matrix<S> b(1, out);
      for (Index i = 0; i < b.size(); ++i) b.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
      store.add(name(l, "w"), std::move(w), group);
      store.add(name(l, "b"), std::move(b), group);
      if (normed(l)) {
        store.add(name(l, "ln_g"), Matrix<S>::Ones(1, out), group);
        store.add(name(l, "ln_b"), Matrix<S>::Zero(1, out), group);
      }
    }
  }

  Matrix<S> forward(const ParamStore<S>& store, const Matrix<S>& x,
                    MlpTape<S>* tape = nullptr) const {
    if (x.cols() != spec_.input_dim())
      throw DimensionError(prefix_ + ": input width " + std::to_string(x.cols()) +
                           ", expected " + std::to_string(spec_.input_dim()));
    if (tape) tape->layers.assign(spec_.num_layers(), {});
    Matrix<S> h = x;
    for (Index l = 0; l < spec_.num_layers(); ++l) {
      Matrix<S> y = dense_forward(h, store.values(name(l, "w")), store.values(name(l, "b")));
      typename MlpTape<S>::Layer* rec = tape ? &tape->layers[l] : nullptr;
      if (rec) rec->input = std::move(h);
      if (normed(l)) {
        Matrix<S> n = layernorm_forward(y, store.values(name(l, "ln_g")),
                                        store.values(name(l, "ln_b")),
                                        static_cast<S>(spec_.ln_eps), rec ? &rec->ln : nullptr);
        if (is_last(l))
          y = simplicial(n, spec_.simplicial_v, static_cast<S>(spec_.simplicial_tau));
        else
          y = mish(n);
        if (rec) rec->normed = std::move(n);
      }
      if (rec) rec->output = y;
      h = std::move(y);
    }
    return h;
  }

  // Backpropagates `dy` through the recorded call and returns the gradient
  // with respect to the input. Parameter gradients are accumulated into
  // `store` only when `accumulate` is set.
  Matrix<S> backward(ParamStore<S>& store, const MlpTape<S>& tape, const Matrix<S>& dy,
                     bool accumulate = true) const {
    if (!tape.recorded() || static_cast<Index>(tape.layers.size()) != spec_.num_layers())
      throw StateError(prefix_ + ": backward before forward");
    Matrix<S> g = dy;
    for (Index l = spec_.num_layers() - 1; l >= 0; --l) {
      const auto& rec = tape.layers[l];
      if (g.rows() != rec.output.rows() || g.cols() != rec.output.cols())
        throw DimensionError(prefix_ + ": upstream gradient " + shape_str(g));
      if (normed(l)) {
        if (is_last(l))
          g = simplicial_backward(rec.output, g, spec_.simplicial_v,
                                  static_cast<S>(spec_.simplicial_tau));
        else
          g = mish_backward(rec.normed, g);
        auto& gain = store.at(name(l, "ln_g"));
        auto ln = layernorm_backward(rec.ln, gain.values, g);
        if (accumulate) {
          gain.grad += ln.dgain;
          store.at(name(l, "ln_b")).grad += ln.dbias;
        }
        g = std::move(ln.dx);
      }
      auto& w = store.at(name(l, "w"));
      if (accumulate) {
        w.grad.noalias() += rec.input.transpose() * g;
        store.at(name(l, "b")).grad += g.colwise().sum();
      }
      g = g * w.values.transpose();
    }
    return g;
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> out;
    for (Index l = 0; l < spec_.num_layers(); ++l) {
      out.push_back(name(l, "w"));
      out.push_back(name(l, "b"));
      if (normed(l)) {
        out.push_back(name(l, "ln_g"));
        out.push_back(name(l, "ln_b"));
      }
    }
    return out;
  }

 private:
  std::string name(Index layer, const char* what) const {
    return prefix_ + "." + std::to_string(layer) + "." + what;
  }
  bool is_last(Index l) const { return l == spec_.num_layers() - 1; }
  bool normed(Index l) const {
    return !is_last(l) || spec_.final_activation == FinalActivation::simplicial;
  }

  std::string prefix_;
  MlpSpec spec_;
};

}  // namespace newt
