#include "gaitplan/nn.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

namespace gaitplan::nn {

namespace {

void check_topology(const std::vector<int>& layer_sizes) {
  GP_REQUIRE(layer_sizes.size() >= 2, "Mlp needs at least input and output layer sizes");
  for (int s : layer_sizes) GP_REQUIRE(s > 0, "Mlp layer sizes must be positive");
}

}  // namespace

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (int l = 0; l < num_layers(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

bool Mlp::all_finite() const {
  for (int l = 0; l < num_layers(); ++l) {
    if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
  }
  return true;
}

Gradients Gradients::zeros_like(const Mlp& net) {
  Gradients g;
  for (int l = 0; l < net.num_layers(); ++l) {
    g.weights.push_back(MatX::Zero(net.weights[l].rows(), net.weights[l].cols()));
    g.biases.push_back(VecX::Zero(net.biases[l].size()));
  }
  return g;
}

void Gradients::add_scaled(const Gradients& other, double scale) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] += scale * other.weights[l];
    biases[l] += scale * other.biases[l];
  }
}

void Gradients::scale(double s) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] *= s;
    biases[l] *= s;
  }
}

double Gradients::max_abs() const {
  double m = 0.0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    m = std::max(m, weights[l].cwiseAbs().maxCoeff());
    if (biases[l].size() > 0) m = std::max(m, biases[l].cwiseAbs().maxCoeff());
  }
  return m;
}

Mlp make_mlp(const std::vector<int>& layer_sizes, Rng& rng, int context_dim) {
  check_topology(layer_sizes);
  GP_REQUIRE(context_dim >= 0 && context_dim < layer_sizes.front(),
             "make_mlp: context_dim must fit inside the input");
  Mlp net;
  net.layer_sizes = layer_sizes;
  net.context_dim = context_dim;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    int in = layer_sizes[l] + (l > 0 ? context_dim : 0);
    int out = layer_sizes[l + 1];
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    MatX w(out, in);
    for (int i = 0; i < out; ++i)
      for (int j = 0; j < in; ++j) w(i, j) = rng.uniform(-bound, bound);
    VecX b(out);
    for (int i = 0; i < out; ++i) b[i] = rng.uniform(-bound, bound);
    net.weights.push_back(std::move(w));
    net.biases.push_back(std::move(b));
  }
  return net;
}

VecX forward(const Mlp& net, const Eigen::Ref<const VecX>& input) {
  GP_REQUIRE(input.size() == net.input_dim(),
             "forward: input length " + std::to_string(input.size()) + " != layer_sizes[0] " +
                 std::to_string(net.input_dim()));
  VecX ctx = input.tail(net.context_dim);
  VecX a = input;
  for (int l = 0; l < net.num_layers(); ++l) {
    VecX in(a.size() + (l > 0 ? net.context_dim : 0));
    if (l > 0 && net.context_dim > 0)
      in << a, ctx;
    else
      in = a;
    VecX z = net.weights[l] * in + net.biases[l];
    a = (l + 1 < net.num_layers()) ? z.array().tanh().matrix() : z;
  }
  return a;
}

MatX forward_batch(const Mlp& net, const Eigen::Ref<const MatX>& inputs) {
  GP_REQUIRE(inputs.cols() == net.input_dim(), "forward_batch: input width mismatch");
  MatX ctx = inputs.rightCols(net.context_dim);
  MatX a = inputs;
  for (int l = 0; l < net.num_layers(); ++l) {
    MatX in;
    if (l > 0 && net.context_dim > 0) {
      in.resize(a.rows(), a.cols() + net.context_dim);
      in << a, ctx;
    } else {
      in = a;
    }
    MatX z = (in * net.weights[l].transpose()).rowwise() + net.biases[l].transpose();
    a = (l + 1 < net.num_layers()) ? z.array().tanh().matrix() : z;
  }
  return a;
}

Gradients backward(const Mlp& net, const Eigen::Ref<const VecX>& input,
                   const Eigen::Ref<const VecX>& output_grad) {
  GP_REQUIRE(input.size() == net.input_dim(), "backward: input length mismatch");
  GP_REQUIRE(output_grad.size() == net.output_dim(), "backward: output_grad length mismatch");

  int L = net.num_layers();
  VecX ctx = input.tail(net.context_dim);
  std::vector<VecX> acts(L + 1);  // acts[l] is the layer-l input, context excluded for l > 0
  acts[0] = input;
  for (int l = 0; l < L; ++l) {
    VecX in(acts[l].size() + (l > 0 ? net.context_dim : 0));
    if (l > 0 && net.context_dim > 0)
      in << acts[l], ctx;
    else
      in = acts[l];
    VecX z = net.weights[l] * in + net.biases[l];
    acts[l + 1] = (l + 1 < L) ? z.array().tanh().matrix() : z;
  }

  Gradients g = Gradients::zeros_like(net);
  VecX delta = output_grad;
  for (int l = L - 1; l >= 0; --l) {
    if (l > 0 && net.context_dim > 0) {
      VecX in(acts[l].size() + net.context_dim);
      in << acts[l], ctx;
      g.weights[l] = delta * in.transpose();
    } else {
      g.weights[l] = delta * acts[l].transpose();
    }
    g.biases[l] = delta;
    if (l > 0) {
      VecX back = net.weights[l].leftCols(acts[l].size()).transpose() * delta;
      delta = (back.array() * (1.0 - acts[l].array().square())).matrix();
    }
  }
  return g;
}

Gradients backward_batch(const Mlp& net, const Eigen::Ref<const MatX>& inputs,
                         const Eigen::Ref<const MatX>& output_grads) {
  GP_REQUIRE(inputs.cols() == net.input_dim(), "backward_batch: input width mismatch");
  GP_REQUIRE(output_grads.cols() == net.output_dim() && output_grads.rows() == inputs.rows(),
             "backward_batch: output_grads shape mismatch");

  int L = net.num_layers();
  MatX ctx = inputs.rightCols(net.context_dim);
  std::vector<MatX> acts(L + 1);
  acts[0] = inputs;
  for (int l = 0; l < L; ++l) {
    MatX in;
    if (l > 0 && net.context_dim > 0) {
      in.resize(acts[l].rows(), acts[l].cols() + net.context_dim);
      in << acts[l], ctx;
    } else {
      in = acts[l];
    }
    MatX z = (in * net.weights[l].transpose()).rowwise() + net.biases[l].transpose();
    acts[l + 1] = (l + 1 < L) ? z.array().tanh().matrix() : z;
  }

  Gradients g = Gradients::zeros_like(net);
  MatX delta = output_grads;
  for (int l = L - 1; l >= 0; --l) {
    if (l > 0 && net.context_dim > 0) {
      MatX in(acts[l].rows(), acts[l].cols() + net.context_dim);
      in << acts[l], ctx;
      g.weights[l] = delta.transpose() * in;
    } else {
      g.weights[l] = delta.transpose() * acts[l];
    }
    g.biases[l] = delta.colwise().sum().transpose();
    if (l > 0) {
      MatX back = delta * net.weights[l].leftCols(acts[l].cols());
      delta = (back.array() * (1.0 - acts[l].array().square())).matrix();
    }
  }
  return g;
}

VecX timestep_embedding(int k, int dim) {
  GP_REQUIRE(dim > 0 && dim % 2 == 0, "timestep_embedding: dim must be even and positive");
  GP_REQUIRE(k >= 0, "timestep_embedding: k must be non-negative");
  int half = dim / 2;
  VecX emb(dim);
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    emb[i] = std::sin(k * freq);
    emb[half + i] = std::cos(k * freq);
  }
  return emb;
}

AdamState AdamState::zeros_like(const Mlp& net) {
  AdamState s;
  for (int l = 0; l < net.num_layers(); ++l) {
    s.m_w.push_back(MatX::Zero(net.weights[l].rows(), net.weights[l].cols()));
    s.v_w.push_back(MatX::Zero(net.weights[l].rows(), net.weights[l].cols()));
    s.m_b.push_back(VecX::Zero(net.biases[l].size()));
    s.v_b.push_back(VecX::Zero(net.biases[l].size()));
  }
  return s;
}

void adam_step(Mlp& net, const Gradients& grads, AdamState& state, double lr) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (int l = 0; l < net.num_layers(); ++l) {
    state.m_w[l] = state.beta1 * state.m_w[l] + (1.0 - state.beta1) * grads.weights[l];
    state.v_w[l] = state.beta2 * state.v_w[l] +
                   (1.0 - state.beta2) * grads.weights[l].array().square().matrix();
    net.weights[l].array() -=
        lr * (state.m_w[l].array() / bc1) / ((state.v_w[l].array() / bc2).sqrt() + state.eps);

    state.m_b[l] = state.beta1 * state.m_b[l] + (1.0 - state.beta1) * grads.biases[l];
    state.v_b[l] = state.beta2 * state.v_b[l] +
                   (1.0 - state.beta2) * grads.biases[l].array().square().matrix();
    net.biases[l].array() -=
        lr * (state.m_b[l].array() / bc1) / ((state.v_b[l].array() / bc2).sqrt() + state.eps);
  }
  if (!net.all_finite()) throw DivergenceError("adam_step: non-finite parameter after update");
}

void save_checkpoint(const Mlp& net, const std::filesystem::path& path,
                     const std::string& fingerprint, const std::string& meta_json) {
  nlohmann::json j;
  j["format"] = "gaitplan-checkpoint";
  j["version"] = 1;
  j["fingerprint"] = fingerprint;
  j["meta"] = nlohmann::json::parse(meta_json);
  j["layer_sizes"] = net.layer_sizes;
  j["context_dim"] = net.context_dim;
  nlohmann::json weights = nlohmann::json::array();
  nlohmann::json biases = nlohmann::json::array();
  for (int l = 0; l < net.num_layers(); ++l) {
    std::vector<double> w(net.weights[l].size());
    // row-major flattening
    for (int i = 0; i < net.weights[l].rows(); ++i)
      for (int jx = 0; jx < net.weights[l].cols(); ++jx)
        w[static_cast<std::size_t>(i) * net.weights[l].cols() + jx] = net.weights[l](i, jx);
    weights.push_back(w);
    biases.push_back(std::vector<double>(net.biases[l].data(),
                                         net.biases[l].data() + net.biases[l].size()));
  }
  j["weights"] = std::move(weights);
  j["biases"] = std::move(biases);

  std::ofstream out(path, std::ios::binary);
  GP_REQUIRE(out.good(), "save_checkpoint: cannot open " + path.string());
  out << j.dump() << "\n";
}

Mlp load_checkpoint(const std::filesystem::path& path, std::string* fingerprint,
                    std::string* meta_json) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw PrereqError("load_checkpoint: missing file " + path.string());
  nlohmann::json j;
  in >> j;
  GP_REQUIRE(j.value("format", "") == "gaitplan-checkpoint",
             "load_checkpoint: not a checkpoint file: " + path.string());
  GP_REQUIRE(j.value("version", -1) == 1, "load_checkpoint: unsupported version");
  if (fingerprint) *fingerprint = j.value("fingerprint", "");
  if (meta_json) *meta_json = j["meta"].dump();

  Mlp net;
  net.layer_sizes = j["layer_sizes"].get<std::vector<int>>();
  net.context_dim = j.value("context_dim", 0);
  check_topology(net.layer_sizes);
  for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
    int in_dim = net.layer_sizes[l] + (l > 0 ? net.context_dim : 0);
    int out_dim = net.layer_sizes[l + 1];
    auto w = j["weights"][l].get<std::vector<double>>();
    auto b = j["biases"][l].get<std::vector<double>>();
    GP_REQUIRE(static_cast<int>(w.size()) == in_dim * out_dim &&
                   static_cast<int>(b.size()) == out_dim,
               "load_checkpoint: parameter shape mismatch");
    MatX wm(out_dim, in_dim);
    for (int i = 0; i < out_dim; ++i)
      for (int jx = 0; jx < in_dim; ++jx) wm(i, jx) = w[static_cast<std::size_t>(i) * in_dim + jx];
    net.weights.push_back(std::move(wm));
    net.biases.push_back(Eigen::Map<const VecX>(b.data(), out_dim));
  }
  return net;
}

}  // namespace gaitplan::nn
