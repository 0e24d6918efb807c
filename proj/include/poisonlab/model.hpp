#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "poisonlab/autodiff.hpp"
#include "poisonlab/errors.hpp"
#include "poisonlab/rng.hpp"
#include "poisonlab/tensor.hpp"

namespace poisonlab {

// ---- architecture descriptor ------------------------------------------------
//
// Tiny text grammar, e.g. "input:1x8x8;conv:4x3p1;relu;flatten;dense:16;relu;dense:4".
// conv:<out_channels>x<kernel>[p<pad>]; dense:<units>; relu/tanh/flatten bare.
// The last layer must be dense; its width is the class count.

enum class LayerKind { dense, conv, relu, tanh_act, flatten };

struct LayerSpec {
  LayerKind kind;
  int units = 0;         // dense
  int out_channels = 0;  // conv
  int kernel = 0;        // conv
  int pad = 0;           // conv
};

inline const char* layer_name(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::tanh_act: return "tanh";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

struct ArchDescriptor {
  std::array<int, 3> input{};  // channels, height, width
  std::vector<LayerSpec> layers;

  static ArchDescriptor parse(const std::string& text);
  std::string str() const;

  int class_count() const {
    check_internal(!layers.empty() && layers.back().kind == LayerKind::dense,
                   "arch missing final dense layer");
    return layers.back().units;
  }
};

namespace detail {

inline int parse_pos_int(const std::string& s, const std::string& ctx) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
    fail(ErrorKind::config, "bad integer '" + s + "' in " + ctx);
  long v = std::stol(s);
  if (v <= 0 || v > 1'000'000) fail(ErrorKind::config, "out-of-range integer in " + ctx);
  return static_cast<int>(v);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline ArchDescriptor ArchDescriptor::parse(const std::string& text) {
  ArchDescriptor arch;
  auto tokens = detail::split(text, ';');
  if (tokens.empty() || tokens[0].rfind("input:", 0) != 0)
    fail(ErrorKind::config, "architecture must start with input:CxHxW");
  auto dims = detail::split(tokens[0].substr(6), 'x');
  if (dims.size() != 3) fail(ErrorKind::config, "input wants three dims CxHxW");
  for (int i = 0; i < 3; ++i)
    arch.input[i] = detail::parse_pos_int(dims[i], "input shape");

  // Track the running activation shape to validate layer compatibility.
  bool flat = false;
  std::array<int, 3> spatial = arch.input;
  int width = 0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const std::string& tok = tokens[t];
    if (tok.empty()) fail(ErrorKind::config, "empty layer token");
    LayerSpec layer{};
    if (tok == "relu") {
      layer.kind = LayerKind::relu;
    } else if (tok == "tanh") {
      layer.kind = LayerKind::tanh_act;
    } else if (tok == "flatten") {
      if (flat) fail(ErrorKind::config, "flatten applied to already-flat activations");
      layer.kind = LayerKind::flatten;
      width = spatial[0] * spatial[1] * spatial[2];
      flat = true;
    } else if (tok.rfind("dense:", 0) == 0) {
      if (!flat)
        fail(ErrorKind::config, "dense layer needs flat input; add flatten first");
      layer.kind = LayerKind::dense;
      layer.units = detail::parse_pos_int(tok.substr(6), "dense");
      width = layer.units;
    } else if (tok.rfind("conv:", 0) == 0) {
      if (flat) fail(ErrorKind::config, "conv layer after flatten");
      layer.kind = LayerKind::conv;
      std::string body = tok.substr(5);
      auto ppos = body.find('p');
      if (ppos != std::string::npos) {
        layer.pad = detail::parse_pos_int(body.substr(ppos + 1), "conv pad");
        body = body.substr(0, ppos);
      }
      auto parts = detail::split(body, 'x');
      if (parts.size() != 2) fail(ErrorKind::config, "conv wants conv:OCxK[pP]");
      layer.out_channels = detail::parse_pos_int(parts[0], "conv channels");
      layer.kernel = detail::parse_pos_int(parts[1], "conv kernel");
      int oh = spatial[1] + 2 * layer.pad - layer.kernel + 1;
      int ow = spatial[2] + 2 * layer.pad - layer.kernel + 1;
      if (oh <= 0 || ow <= 0)
        fail(ErrorKind::config, "conv kernel larger than its padded input");
      spatial = {layer.out_channels, oh, ow};
    } else {
      fail(ErrorKind::config, "unknown layer '" + tok + "'");
    }
    arch.layers.push_back(layer);
  }
  if (arch.layers.empty() || arch.layers.back().kind != LayerKind::dense)
    fail(ErrorKind::config, "architecture must end in a dense layer");
  if (width < 2) fail(ErrorKind::config, "final dense layer needs >= 2 classes");
  return arch;
}

inline std::string ArchDescriptor::str() const {
  std::ostringstream out;
  out << "input:" << input[0] << "x" << input[1] << "x" << input[2];
  for (const auto& l : layers) {
    out << ";";
    switch (l.kind) {
      case LayerKind::dense: out << "dense:" << l.units; break;
      case LayerKind::conv:
        out << "conv:" << l.out_channels << "x" << l.kernel;
        if (l.pad) out << "p" << l.pad;
        break;
      case LayerKind::relu: out << "relu"; break;
      case LayerKind::tanh_act: out << "tanh"; break;
      case LayerKind::flatten: out << "flatten"; break;
    }
  }
  return out.str();
}

// ---- gradient container -----------------------------------------------------

// Parameter-space gradient, one tensor per parameter tensor in layer order.
template <class T>
struct GradVector {
  std::vector<Tensor<T>> parts;

  double sq_norm() const {
    double s = 0;
    for (const auto& p : parts)
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        double v = static_cast<double>(p[i]);
        s += v * v;
      }
    return s;
  }

  std::int64_t numel() const {
    std::int64_t n = 0;
    for (const auto& p : parts) n += p.numel();
    return n;
  }
};

template <class T>
double grad_dot(const GradVector<T>& a, const GradVector<T>& b) {
  check_internal(a.parts.size() == b.parts.size(), "grad_dot part count");
  double s = 0;
  for (std::size_t k = 0; k < a.parts.size(); ++k) {
    require_same_shape(a.parts[k], b.parts[k], "grad_dot");
    for (std::int64_t i = 0; i < a.parts[k].numel(); ++i)
      s += static_cast<double>(a.parts[k][i]) * static_cast<double>(b.parts[k][i]);
  }
  return s;
}

// ---- classifier -------------------------------------------------------------

template <class T>
class Classifier {
 public:
  Classifier() = default;

  // Fresh model with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, fully
  // determined by (arch, seed).
  Classifier(ArchDescriptor arch, std::uint64_t seed) : arch_(std::move(arch)) {
    int in_ch = arch_.input[0];
    int flat_width = 0;
    std::array<int, 3> spatial = arch_.input;
    bool flat = false;
    std::uint64_t pidx = 0;
    for (const auto& l : arch_.layers) {
      switch (l.kind) {
        case LayerKind::conv: {
          double bound = 1.0 / std::sqrt(double(in_ch) * l.kernel * l.kernel);
          params_.push_back(init_tensor({l.out_channels, in_ch, l.kernel, l.kernel},
                                        bound, seed, pidx++));
          params_.push_back(init_tensor({l.out_channels}, bound, seed, pidx++));
          in_ch = l.out_channels;
          spatial = {l.out_channels, spatial[1] + 2 * l.pad - l.kernel + 1,
                     spatial[2] + 2 * l.pad - l.kernel + 1};
          break;
        }
        case LayerKind::flatten:
          flat_width = spatial[0] * spatial[1] * spatial[2];
          flat = true;
          break;
        case LayerKind::dense: {
          check_internal(flat, "dense before flatten slipped past parsing");
          double bound = 1.0 / std::sqrt(double(flat_width));
          params_.push_back(init_tensor({flat_width, l.units}, bound, seed, pidx++));
          params_.push_back(init_tensor({l.units}, bound, seed, pidx++));
          flat_width = l.units;
          break;
        }
        default:
          break;
      }
    }
  }

  const ArchDescriptor& arch() const { return arch_; }
  int class_count() const { return arch_.class_count(); }
  std::vector<Tensor<T>>& params() { return params_; }
  const std::vector<Tensor<T>>& params() const { return params_; }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  // Everything interesting about one forward pass, as graph nodes.
  struct LossGraph {
    ad::Var<T> input;
    std::vector<ad::Var<T>> param_leaves;
    ad::Var<T> logits;
    ad::Var<T> loss;
  };

  LossGraph build_loss_graph(const Tensor<T>& x, const std::vector<int>& labels,
                             bool input_grad, bool param_grad) const {
    LossGraph g;
    g.input = ad::leaf(Tensor<T>(x), input_grad);
    g.param_leaves.reserve(params_.size());
    for (const auto& p : params_)
      g.param_leaves.push_back(ad::leaf(Tensor<T>(p), param_grad));
    g.logits = forward_nodes(g.input, g.param_leaves);
    g.loss = ad::softmax_cross_entropy(g.logits, labels);
    if (!g.loss->value.all_finite())
      fail(ErrorKind::numeric, "loss is non-finite");
    return g;
  }

  Tensor<T> logits_value(const Tensor<T>& x) const {
    auto input = ad::leaf(Tensor<T>(x), false);
    std::vector<ad::Var<T>> leaves;
    leaves.reserve(params_.size());
    for (const auto& p : params_) leaves.push_back(ad::leaf(Tensor<T>(p), false));
    return forward_nodes(input, leaves)->value;
  }

  // Mean cross-entropy and logits in one pass.
  std::pair<Tensor<T>, T> forward_loss(const Tensor<T>& x,
                                       const std::vector<int>& labels) const {
    auto g = build_loss_graph(x, labels, false, false);
    return {g.logits->value, g.loss->value[0]};
  }

  std::vector<T> per_example_losses(const Tensor<T>& x,
                                    const std::vector<int>& labels) const {
    return ad::cross_entropy_rows(logits_value(x), labels);
  }

  GradVector<T> grad_params(const Tensor<T>& x, const std::vector<int>& labels) const {
    auto g = build_loss_graph(x, labels, false, true);
    auto grads = ad::backward(g.loss);
    GradVector<T> out;
    out.parts.reserve(params_.size());
    for (const auto& leaf : g.param_leaves)
      out.parts.push_back(grads.get_or_zero(leaf)->value);
    return out;
  }

  Tensor<T> grad_input(const Tensor<T>& x, const std::vector<int>& labels) const {
    auto g = build_loss_graph(x, labels, true, false);
    auto grads = ad::backward(g.loss);
    return grads.get_or_zero(g.input)->value;
  }

  // Predicted class per row; argmax with ties resolved to the smallest index.
  std::vector<int> predict(const Tensor<T>& x) const {
    Tensor<T> logits = logits_value(x);
    int n = logits.dim(0), c = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      int best = 0;
      for (int j = 1; j < c; ++j)
        if (logits.at2(i, j) > logits.at2(i, best)) best = j;
      out[static_cast<std::size_t>(i)] = best;
    }
    return out;
  }

  // ---- flat parameter access (optimizers, checkpoints) ----

  std::vector<double> params_flat() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(param_count()));
    for (const auto& p : params_)
      for (std::int64_t i = 0; i < p.numel(); ++i)
        out.push_back(static_cast<double>(p[i]));
    return out;
  }

  void set_params_flat(const std::vector<double>& flat) {
    if (static_cast<std::int64_t>(flat.size()) != param_count())
      fail(ErrorKind::usage, "parameter vector length mismatch");
    std::size_t k = 0;
    for (auto& p : params_)
      for (std::int64_t i = 0; i < p.numel(); ++i) p[i] = static_cast<T>(flat[k++]);
  }

  // ---- checkpoints ----
  //
  // Text header then raw little-endian float64 parameters:
  //   poisonlab-checkpoint v1
  //   arch <descriptor>
  //   params <count>

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    out << "poisonlab-checkpoint v1\n";
    out << "arch " << arch_.str() << "\n";
    out << "params " << param_count() << "\n";
    for (double v : params_flat()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      char b[8];
      for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(bits >> (8 * i));
      out.write(b, 8);
    }
    if (!out) fail(ErrorKind::io, "short write to " + path.string());
  }

  static Classifier load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "poisonlab-checkpoint v1")
      fail(ErrorKind::format, "not a checkpoint: " + path.string());
    if (!std::getline(in, line) || line.rfind("arch ", 0) != 0)
      fail(ErrorKind::format, "checkpoint missing arch line");
    ArchDescriptor arch = ArchDescriptor::parse(line.substr(5));
    if (!std::getline(in, line) || line.rfind("params ", 0) != 0)
      fail(ErrorKind::format, "checkpoint missing params line");
    std::int64_t count = 0;
    try {
      count = std::stoll(line.substr(7));
    } catch (const std::exception&) {
      fail(ErrorKind::format, "bad params count");
    }
    Classifier model(arch, 0);
    if (count != model.param_count())
      fail(ErrorKind::format, "checkpoint parameter count does not match arch");
    std::vector<double> flat(static_cast<std::size_t>(count));
    for (auto& v : flat) {
      char b[8];
      in.read(b, 8);
      if (!in) fail(ErrorKind::format, "checkpoint truncated");
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i)
        bits |= std::uint64_t(static_cast<unsigned char>(b[i])) << (8 * i);
      v = std::bit_cast<double>(bits);
    }
    model.set_params_flat(flat);
    return model;
  }

 private:
  static Tensor<T> init_tensor(Shape shape, double bound, std::uint64_t seed,
                               std::uint64_t pidx) {
    Rng rng(seed, 0x696e6974 /* "init" */, pidx);
    Tensor<T> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  // Runs the layer stack, checking each activation for NaN/Inf so numeric
  // blowups name the layer that produced them.
  ad::Var<T> forward_nodes(const ad::Var<T>& input,
                           const std::vector<ad::Var<T>>& leaves) const {
    const auto& xval = input->value;
    if (xval.rank() != 4 || xval.dim(1) != arch_.input[0] ||
        xval.dim(2) != arch_.input[1] || xval.dim(3) != arch_.input[2])
      fail(ErrorKind::usage, "input shape " + shape_str(xval.shape) +
                                 " does not match arch input");
    ad::Var<T> h = input;
    std::size_t pi = 0;
    for (std::size_t li = 0; li < arch_.layers.size(); ++li) {
      const auto& l = arch_.layers[li];
      switch (l.kind) {
        case LayerKind::conv: {
          auto kern = leaves[pi++];
          auto bias = leaves[pi++];
          h = ad::add_chan_bias(ad::conv2d(h, kern, l.pad), bias);
          break;
        }
        case LayerKind::relu:
          h = ad::relu(h);
          break;
        case LayerKind::tanh_act:
          h = ad::tanh(h);
          break;
        case LayerKind::flatten: {
          const auto& s = h->value.shape;
          h = ad::reshape(h, {s[0], s[1] * s[2] * s[3]});
          break;
        }
        case LayerKind::dense: {
          auto w = leaves[pi++];
          auto b = leaves[pi++];
          h = ad::add_rowvec(ad::matmul(h, w), b);
          break;
        }
      }
      if (!h->value.all_finite())
        fail(ErrorKind::numeric, "non-finite values after layer " +
                                     std::to_string(li) + " (" +
                                     layer_name(l.kind) + ")");
    }
    check_internal(pi == leaves.size(), "parameter leaves out of step with arch");
    return h;
  }

  ArchDescriptor arch_;
  std::vector<Tensor<T>> params_;
};

// Gradient of a scalar functional of the parameter gradient with respect to
// the input pixels. `builder` receives the per-tensor parameter-gradient
// nodes and the loss node and must return a scalar node; the sweep below
// differentiates that scalar back to the input. This is the second-order
// path poison crafting runs on.
template <class T, class F>
Tensor<T> grad_input_of_scalar(const Classifier<T>& model, const Tensor<T>& x,
                               const std::vector<int>& labels, F&& builder) {
  auto g = model.build_loss_graph(x, labels, true, true);
  auto first = ad::backward(g.loss);
  std::vector<ad::Var<T>> param_grads;
  param_grads.reserve(g.param_leaves.size());
  for (const auto& leaf : g.param_leaves)
    param_grads.push_back(first.get_or_zero(leaf));
  ad::Var<T> scalar = builder(param_grads, g.loss);
  if (!scalar || scalar->value.numel() != 1)
    fail(ErrorKind::usage, "objective builder must return a scalar node");
  auto second = ad::backward(scalar);
  return second.get_or_zero(g.input)->value;
}

}  // namespace poisonlab
