#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gaitplan/types.hpp"

namespace gaitplan::nn {

// Fully-connected network, tanh on hidden layers, identity output.
// The last context_dim entries of the input are a conditioning block that is
// re-appended to every hidden layer's input, so conditioning information does
// not have to survive the full depth on its own.
struct Mlp {
  std::vector<int> layer_sizes;  // >= 2 entries; layer_sizes[0] is the full input size
  std::vector<MatX> weights;     // weights[l]: layer_sizes[l+1] x (layer in + context)
  std::vector<VecX> biases;      // biases[l]: layer_sizes[l+1]
  int context_dim = 0;

  int input_dim() const { return layer_sizes.front(); }
  int output_dim() const { return layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(weights.size()); }
  std::size_t parameter_count() const;
  bool all_finite() const;
};

struct Gradients {
  std::vector<MatX> weights;
  std::vector<VecX> biases;

  static Gradients zeros_like(const Mlp& net);
  void add_scaled(const Gradients& other, double scale);
  void scale(double s);
  double max_abs() const;
};

// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
Mlp make_mlp(const std::vector<int>& layer_sizes, Rng& rng, int context_dim = 0);

VecX forward(const Mlp& net, const Eigen::Ref<const VecX>& input);

// Batched forward; rows are samples.
MatX forward_batch(const Mlp& net, const Eigen::Ref<const MatX>& inputs);

// Parameter gradients of a scalar loss whose gradient w.r.t. the network
// output is output_grad.
Gradients backward(const Mlp& net, const Eigen::Ref<const VecX>& input,
                   const Eigen::Ref<const VecX>& output_grad);

// Batched backward; returns gradients summed over rows.
Gradients backward_batch(const Mlp& net, const Eigen::Ref<const MatX>& inputs,
                         const Eigen::Ref<const MatX>& output_grads);

// Sinusoidal embedding of a diffusion step index; dim must be even.
// Layout: [sin(k f_0 .. k f_{dim/2-1}), cos(k f_0 .. k f_{dim/2-1})].
VecX timestep_embedding(int k, int dim);

struct AdamState {
  std::vector<MatX> m_w, v_w;
  std::vector<VecX> m_b, v_b;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState zeros_like(const Mlp& net);
};

// One Adam update; throws DivergenceError if parameters go non-finite.
void adam_step(Mlp& net, const Gradients& grads, AdamState& state, double lr);

// Versioned JSON checkpoint; doubles round-trip losslessly.
void save_checkpoint(const Mlp& net, const std::filesystem::path& path,
                     const std::string& fingerprint, const std::string& meta_json = "{}");
Mlp load_checkpoint(const std::filesystem::path& path, std::string* fingerprint = nullptr,
                    std::string* meta_json = nullptr);

}  // namespace gaitplan::nn
