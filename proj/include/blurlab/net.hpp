#pragma once

// A small sequential CNN with explicit forward and backward passes.
//
// Layers: conv3x3 (stride 1, zero pad 1), relu, maxpool2 (2x2, stride 2),
// flatten, fc, softmax. The outputs of the maxpool layers are the named taps
// P1..Pn used by the invariance probe and the hypercolumn features.
//
// The scalar type is a template parameter: training runs in float, the
// finite-difference gradient check runs in double.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "blurlab/distribution.hpp"
#include "blurlab/error.hpp"
#include "blurlab/image.hpp"
#include "blurlab/rng.hpp"

namespace blurlab {

enum class LayerKind { conv3x3, relu, maxpool2, flatten, fc, softmax };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int out = 0;  // output channels (conv3x3) or units (fc)

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct TensorShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const { return static_cast<std::size_t>(channels) * height * width; }
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

inline std::string layer_name(const LayerSpec& l) {
  switch (l.kind) {
    case LayerKind::conv3x3: return "conv3x3 " + std::to_string(l.out);
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::flatten: return "flatten";
    case LayerKind::fc: return "fc " + std::to_string(l.out);
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

struct Architecture {
  TensorShape input{1, 56, 56};
  std::vector<LayerSpec> layers;

  friend bool operator==(const Architecture&, const Architecture&) = default;

  /// Canonical text form, e.g.
  /// "input 1x56x56 | conv3x3 16 | relu | maxpool2 | ... | fc 10 | softmax".
  std::string descriptor() const {
    std::ostringstream os;
    os << "input " << input.channels << 'x' << input.height << 'x' << input.width;
    for (const auto& l : layers) os << " | " << layer_name(l);
    return os.str();
  }

  static Architecture parse(const std::string& text) {
    Architecture a;
    a.layers.clear();
    std::vector<std::string> parts;
    std::string part;
    std::istringstream is(text);
    while (std::getline(is, part, '|')) parts.push_back(part);
    if (parts.empty()) throw ParseError("empty architecture descriptor");
    {
      std::istringstream ps(parts[0]);
      std::string word, dims;
      char x1 = 0, x2 = 0;
      if (!(ps >> word >> dims) || word != "input") throw ParseError("architecture must start with 'input CxHxW'");
      std::istringstream ds(dims);
      if (!(ds >> a.input.channels >> x1 >> a.input.height >> x2 >> a.input.width) || x1 != 'x' || x2 != 'x')
        throw ParseError("bad input extents '" + dims + "'");
    }
    for (std::size_t i = 1; i < parts.size(); ++i) {
      std::istringstream ps(parts[i]);
      std::string name;
      if (!(ps >> name)) throw ParseError("empty layer in architecture descriptor");
      LayerSpec l;
      if (name == "conv3x3" || name == "fc") {
        l.kind = name == "fc" ? LayerKind::fc : LayerKind::conv3x3;
        if (!(ps >> l.out) || l.out < 1) throw ParseError("layer '" + name + "' needs a positive width");
      } else if (name == "relu") {
        l.kind = LayerKind::relu;
      } else if (name == "maxpool2") {
        l.kind = LayerKind::maxpool2;
      } else if (name == "flatten") {
        l.kind = LayerKind::flatten;
      } else if (name == "softmax") {
        l.kind = LayerKind::softmax;
      } else {
        throw ParseError("unknown layer '" + name + "'");
      }
      a.layers.push_back(l);
    }
    a.validate();
    return a;
  }

  /// Output shape of every layer for a given input; shapes[0] is the input.
  /// Throws ShapeError naming the first layer that cannot accept its input.
  std::vector<TensorShape> shapes_for(TensorShape in, bool trunk_only = false) const {
    std::vector<TensorShape> s{in};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (trunk_only && (l.kind == LayerKind::flatten || l.kind == LayerKind::fc)) break;
      TensorShape cur = s.back();
      auto fail = [&](const std::string& what) {
        return ShapeError("layer " + std::to_string(i) + " (" + layer_name(l) + "): " + what);
      };
      switch (l.kind) {
        case LayerKind::conv3x3:
          if (cur.height < 1 || cur.width < 1) throw fail("needs a spatial input");
          cur.channels = l.out;
          break;
        case LayerKind::maxpool2:
          if (cur.height < 2 || cur.width < 2) throw fail("input smaller than 2x2");
          cur.height /= 2;
          cur.width /= 2;
          break;
        case LayerKind::flatten:
          cur = {static_cast<int>(cur.size()), 1, 1};
          break;
        case LayerKind::fc: {
          const std::size_t expected = fc_inputs(i);
          if (cur.height != 1 || cur.width != 1) throw fail("input is not flattened");
          if (static_cast<std::size_t>(cur.channels) != expected)
            throw fail("expected " + std::to_string(expected) + " inputs, got " + std::to_string(cur.channels));
          cur = {l.out, 1, 1};
          break;
        }
        case LayerKind::relu:
        case LayerKind::softmax:
          break;
      }
      s.push_back(cur);
    }
    return s;
  }

  /// Input width of fc layer i under the declared input extents.
  std::size_t fc_inputs(std::size_t index) const {
    TensorShape cur = input;
    for (std::size_t i = 0; i < index; ++i) {
      const auto& l = layers[i];
      if (l.kind == LayerKind::conv3x3) cur.channels = l.out;
      if (l.kind == LayerKind::maxpool2) cur = {cur.channels, cur.height / 2, cur.width / 2};
      if (l.kind == LayerKind::flatten || l.kind == LayerKind::fc)
        cur = {l.kind == LayerKind::fc ? l.out : static_cast<int>(cur.size()), 1, 1};
    }
    return cur.size();
  }

  /// Input channels of conv layer i.
  int conv_inputs(std::size_t index) const {
    int c = input.channels;
    for (std::size_t i = 0; i < index; ++i)
      if (layers[i].kind == LayerKind::conv3x3) c = layers[i].out;
    return c;
  }

  std::vector<std::size_t> tap_layers() const {
    std::vector<std::size_t> taps;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].kind == LayerKind::maxpool2) taps.push_back(i);
    return taps;
  }

  int num_classes() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it)
      if (it->kind == LayerKind::fc) return it->out;
    return 0;
  }

  void validate() const {
    if (input.channels < 1 || input.height < 1 || input.width < 1) throw ShapeError("input extents must be positive");
    if (layers.size() < 2 || layers.back().kind != LayerKind::softmax || layers[layers.size() - 2].kind != LayerKind::fc)
      throw ShapeError("architecture must end in 'fc K | softmax'");
    if (tap_layers().size() < 3) throw ShapeError("architecture needs at least 3 maxpool layers");
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
      if (layers[i].kind == LayerKind::softmax) throw ShapeError("softmax may only be the last layer");
    bool flat = false;
    for (const auto& l : layers) {
      if (l.kind == LayerKind::flatten) flat = true;
      if (flat && (l.kind == LayerKind::conv3x3 || l.kind == LayerKind::maxpool2))
        throw ShapeError("spatial layer after flatten");
      if (!flat && l.kind == LayerKind::fc) throw ShapeError("fc layer before flatten");
    }
    shapes_for(input);
  }
};

/// The default desk model: three conv/relu/pool stages (taps P1..P3), a
/// 128-unit hidden layer and a K-way softmax.
inline Architecture blurnet_s(int num_classes = 10, int input_size = 56, int channels = 1) {
  Architecture a;
  a.input = {channels, input_size, input_size};
  using K = LayerKind;
  a.layers = {{K::conv3x3, 16}, {K::relu, 0}, {K::maxpool2, 0}, {K::conv3x3, 32}, {K::relu, 0},
              {K::maxpool2, 0}, {K::conv3x3, 64}, {K::relu, 0}, {K::maxpool2, 0}, {K::flatten, 0},
              {K::fc, 128},     {K::relu, 0},     {K::fc, num_classes},         {K::softmax, 0}};
  a.validate();
  return a;
}

/// Location of one layer's weights and biases inside the flat parameter vector.
struct ParamBlock {
  std::size_t layer = 0;
  std::size_t weight_offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_offset = 0;
  std::size_t bias_count = 0;
  int rows = 0;  // output units
  int cols = 0;  // inputs per unit (in_channels*9 for conv)
};

template <typename T>
class Network {
 public:
  using Scalar = T;

  Network() = default;

  /// All-zero parameters and momentum buffers.
  explicit Network(Architecture arch) : arch_(std::move(arch)) {
    arch_.validate();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
      const auto& l = arch_.layers[i];
      if (l.kind != LayerKind::conv3x3 && l.kind != LayerKind::fc) continue;
      ParamBlock b;
      b.layer = i;
      b.rows = l.out;
      b.cols = l.kind == LayerKind::conv3x3 ? arch_.conv_inputs(i) * 9 : static_cast<int>(arch_.fc_inputs(i));
      b.weight_offset = offset;
      b.weight_count = static_cast<std::size_t>(b.rows) * b.cols;
      b.bias_offset = offset + b.weight_count;
      b.bias_count = static_cast<std::size_t>(b.rows);
      offset = b.bias_offset + b.bias_count;
      blocks_.push_back(b);
    }
    params_.assign(offset, T(0));
    velocity_.assign(offset, T(0));
  }

  /// He-uniform weights (+-sqrt(6/fan_in)), zero biases. The output layer
  /// uses the Glorot bound so initial logits stay small.
  static Network initialized(Architecture arch, std::uint64_t seed) {
    Network n(std::move(arch));
    Rng rng(derive_seed(seed, {hash_label("init")}));
    for (const auto& b : n.blocks_) {
      const double fan_in = b.cols;
      const bool last = &b == &n.blocks_.back();
      const double limit = last ? std::sqrt(6.0 / (fan_in + b.rows)) : std::sqrt(6.0 / fan_in);
      for (std::size_t i = 0; i < b.weight_count; ++i)
        n.params_[b.weight_offset + i] = static_cast<T>(rng.uniform(-limit, limit));
    }
    return n;
  }

  template <typename U>
  Network<U> cast() const {
    Network<U> out(arch_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.params()[i] = static_cast<U>(params_[i]);
      out.velocity()[i] = static_cast<U>(velocity_[i]);
    }
    return out;
  }

  const Architecture& architecture() const { return arch_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::vector<T>& params() { return params_; }
  const std::vector<T>& params() const { return params_; }
  std::vector<T>& velocity() { return velocity_; }
  const std::vector<T>& velocity() const { return velocity_; }
  std::size_t param_count() const { return params_.size(); }
  int num_classes() const { return arch_.num_classes(); }

  const ParamBlock& block_for_layer(std::size_t layer) const {
    for (const auto& b : blocks_)
      if (b.layer == layer) return b;
    throw ShapeError("layer " + std::to_string(layer) + " has no parameters");
  }

  void reset_velocity() { std::fill(velocity_.begin(), velocity_.end(), T(0)); }

 private:
  Architecture arch_;
  std::vector<ParamBlock> blocks_;
  std::vector<T> params_;
  std::vector<T> velocity_;
};

/// Intermediate state of one forward pass over a batch, kept for backward.
/// values[i] is the input of layer i; values.back() the final output.
template <typename T>
struct ForwardState {
  int batch = 0;
  std::vector<TensorShape> shapes;
  std::vector<std::vector<T>> values;
  std::vector<std::vector<std::uint32_t>> argmax;  // per maxpool layer
  std::vector<std::vector<T>> cols;               // im2col buffers per conv layer

  std::span<const T> output() const { return values.back(); }
  TensorShape output_shape() const { return shapes.back(); }
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMat<T>>;

template <typename T>
void im2col3x3(const T* x, int channels, int h, int w, T* col) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const T* plane = x + static_cast<std::size_t>(c) * hw;
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - 1;
          T* out = row + static_cast<std::size_t>(y) * w;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + w, T(0));
            continue;
          }
          const T* in = plane + static_cast<std::size_t>(iy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int ix = xx + kx - 1;
            out[xx] = (ix < 0 || ix >= w) ? T(0) : in[ix];
          }
        }
      }
}

template <typename T>
void col2im3x3(const T* col, int channels, int h, int w, T* dx) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::fill(dx, dx + static_cast<std::size_t>(channels) * hw, T(0));
  for (int c = 0; c < channels; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        T* plane = dx + static_cast<std::size_t>(c) * hw;
        for (int y = 0; y < h; ++y) {
          const int iy = y + ky - 1;
          if (iy < 0 || iy >= h) continue;
          const T* in = row + static_cast<std::size_t>(y) * w;
          T* out = plane + static_cast<std::size_t>(iy) * w;
          for (int xx = 0; xx < w; ++xx) {
            const int ix = xx + kx - 1;
            if (ix >= 0 && ix < w) out[ix] += in[xx];
          }
        }
      }
}

}  // namespace detail

/// Runs the network on `batch` examples laid out [N][C][H][W]. With
/// trunk_only the pass stops before the first flatten/fc layer, which allows
/// inputs of any extent (taps, hypercolumns).
template <typename T>
void forward(const Network<T>& net, std::span<const T> input, int batch, TensorShape in_shape, ForwardState<T>& st,
             bool keep_for_backward = true, bool trunk_only = false) {
  const auto& arch = net.architecture();
  if (in_shape.channels != arch.input.channels)
    throw ShapeError("input has " + std::to_string(in_shape.channels) + " channels, network expects " +
                     std::to_string(arch.input.channels));
  if (input.size() != in_shape.size() * static_cast<std::size_t>(batch)) throw ShapeError("input buffer size mismatch");
  st.batch = batch;
  st.shapes = arch.shapes_for(in_shape, trunk_only);
  const std::size_t depth = st.shapes.size() - 1;
  st.values.resize(depth + 1);
  st.argmax.resize(depth);
  st.cols.resize(depth);
  st.values[0].assign(input.begin(), input.end());

  for (std::size_t li = 0; li < depth; ++li) {
    const auto& layer = arch.layers[li];
    const TensorShape is = st.shapes[li];
    const TensorShape os = st.shapes[li + 1];
    const std::vector<T>& x = st.values[li];
    std::vector<T>& y = st.values[li + 1];
    y.resize(os.size() * batch);
    switch (layer.kind) {
      case LayerKind::conv3x3: {
        const auto& b = net.block_for_layer(li);
        const int hw = is.height * is.width;
        detail::ConstRowMap<T> W(net.params().data() + b.weight_offset, b.rows, b.cols);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(net.params().data() + b.bias_offset, b.rows);
        auto& col = st.cols[li];
        const std::size_t col_size = static_cast<std::size_t>(b.cols) * hw;
        col.resize(col_size * (keep_for_backward ? batch : 1));
        for (int n = 0; n < batch; ++n) {
          T* c = col.data() + (keep_for_backward ? col_size * n : 0);
          detail::im2col3x3(x.data() + is.size() * n, is.channels, is.height, is.width, c);
          detail::RowMap<T> out(y.data() + os.size() * n, b.rows, hw);
          out.noalias() = W * detail::ConstRowMap<T>(c, b.cols, hw);
          out.colwise() += bias;
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
        break;
      case LayerKind::maxpool2: {
        auto& idx = st.argmax[li];
        idx.resize(y.size());
        std::size_t o = 0;
        for (int n = 0; n < batch; ++n)
          for (int c = 0; c < is.channels; ++c) {
            const std::size_t plane = (static_cast<std::size_t>(n) * is.channels + c) * is.height * is.width;
            for (int oy = 0; oy < os.height; ++oy)
              for (int ox = 0; ox < os.width; ++ox, ++o) {
                std::size_t best = plane + static_cast<std::size_t>(2 * oy) * is.width + 2 * ox;
                for (int dy = 0; dy < 2; ++dy)
                  for (int dx = 0; dx < 2; ++dx) {
                    const std::size_t at = plane + static_cast<std::size_t>(2 * oy + dy) * is.width + 2 * ox + dx;
                    if (x[at] > x[best]) best = at;
                  }
                y[o] = x[best];
                idx[o] = static_cast<std::uint32_t>(best);
              }
          }
        break;
      }
      case LayerKind::flatten:
      case LayerKind::softmax:
        // softmax is folded into the loss; the network output is the logits.
        y = x;
        break;
      case LayerKind::fc: {
        const auto& b = net.block_for_layer(li);
        detail::ConstRowMap<T> W(net.params().data() + b.weight_offset, b.rows, b.cols);
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(net.params().data() + b.bias_offset, b.rows);
        detail::ConstRowMap<T> X(x.data(), batch, b.cols);
        detail::RowMap<T> Y(y.data(), batch, b.rows);
        Y.noalias() = X * W.transpose();
        Y.rowwise() += bias;
        break;
      }
    }
  }
  if (!keep_for_backward) {
    for (auto& c : st.cols) std::vector<T>().swap(c);
  }
}

/// Backpropagates mean-style cross-entropy: each example's loss gradient is
/// multiplied by `scale` (1/batch for a mean) and accumulated into `grad`.
/// Returns the unscaled sum of per-example losses (natural log).
template <typename T>
double backward(const Network<T>& net, const ForwardState<T>& st, std::span<const int> labels, double scale,
                std::span<T> grad) {
  const auto& arch = net.architecture();
  const int batch = st.batch;
  const std::size_t depth = arch.layers.size();
  if (st.shapes.size() != depth + 1) throw ShapeError("backward needs a full forward pass");
  if (labels.size() != static_cast<std::size_t>(batch)) throw ShapeError("label count mismatch");
  if (grad.size() != net.param_count()) throw ShapeError("gradient buffer size mismatch");
  const int classes = st.shapes.back().channels;

  double loss = 0.0;
  std::vector<T> dy(st.values.back().size());
  for (int n = 0; n < batch; ++n) {
    if (labels[n] < 0 || labels[n] >= classes) throw InvalidParameter("label out of range");
    std::vector<double> logits(classes);
    for (int k = 0; k < classes; ++k) logits[k] = static_cast<double>(st.values.back()[static_cast<std::size_t>(n) * classes + k]);
    const auto sm = softmax_logprobs(logits);
    loss -= sm.logprobs[labels[n]];
    for (int k = 0; k < classes; ++k)
      dy[static_cast<std::size_t>(n) * classes + k] =
          static_cast<T>((sm.dist.probs[k] - (k == labels[n] ? 1.0 : 0.0)) * scale);
  }

  std::vector<T> dx;
  for (std::size_t li = depth; li-- > 0;) {
    const auto& layer = arch.layers[li];
    const TensorShape is = st.shapes[li];
    const TensorShape os = st.shapes[li + 1];
    const std::vector<T>& x = st.values[li];
    const bool need_dx = li > 0;
    switch (layer.kind) {
      case LayerKind::softmax:
      case LayerKind::flatten:
        continue;  // dy passes through unchanged
      case LayerKind::relu:
        for (std::size_t i = 0; i < dy.size(); ++i)
          if (!(x[i] > T(0))) dy[i] = T(0);
        continue;
      case LayerKind::maxpool2: {
        dx.assign(x.size(), T(0));
        const auto& idx = st.argmax[li];
        for (std::size_t i = 0; i < dy.size(); ++i) dx[idx[i]] += dy[i];
        break;
      }
      case LayerKind::fc: {
        const auto& b = net.block_for_layer(li);
        detail::ConstRowMap<T> W(net.params().data() + b.weight_offset, b.rows, b.cols);
        detail::ConstRowMap<T> X(x.data(), batch, b.cols);
        detail::ConstRowMap<T> DY(dy.data(), batch, b.rows);
        detail::RowMap<T> dW(grad.data() + b.weight_offset, b.rows, b.cols);
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grad.data() + b.bias_offset, b.rows);
        dW.noalias() += DY.transpose() * X;
        // Plain loops: Eigen's vectorized reductions peel by pointer
        // alignment, which would make sums depend on where buffers live.
        for (int n = 0; n < batch; ++n)
          for (int r = 0; r < b.rows; ++r) db[r] += DY(n, r);
        if (need_dx) {
          dx.resize(x.size());
          detail::RowMap<T> DX(dx.data(), batch, b.cols);
          DX.noalias() = DY * W;
        }
        break;
      }
      case LayerKind::conv3x3: {
        const auto& b = net.block_for_layer(li);
        const int hw = is.height * is.width;
        const std::size_t col_size = static_cast<std::size_t>(b.cols) * hw;
        if (st.cols[li].size() < col_size * batch) throw ShapeError("forward pass did not keep im2col buffers");
        detail::ConstRowMap<T> W(net.params().data() + b.weight_offset, b.rows, b.cols);
        detail::RowMap<T> dW(grad.data() + b.weight_offset, b.rows, b.cols);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(grad.data() + b.bias_offset, b.rows);
        if (need_dx) dx.resize(x.size());
        std::vector<T> dcol(need_dx ? col_size : 0);
        for (int n = 0; n < batch; ++n) {
          detail::ConstRowMap<T> DY(dy.data() + os.size() * n, b.rows, hw);
          detail::ConstRowMap<T> col(st.cols[li].data() + col_size * n, b.cols, hw);
          dW.noalias() += DY * col.transpose();
          for (int r = 0; r < b.rows; ++r) {
            T acc = 0;
            for (int i = 0; i < hw; ++i) acc += DY(r, i);
            db[r] += acc;
          }
          if (need_dx) {
            detail::RowMap<T> DC(dcol.data(), b.cols, hw);
            DC.noalias() = W.transpose() * DY;
            detail::col2im3x3(dcol.data(), is.channels, is.height, is.width, dx.data() + is.size() * n);
          }
        }
        break;
      }
    }
    if (!need_dx) break;
    dy.swap(dx);
  }
  return loss;
}

/// Classical momentum: v <- momentum*v + g; p <- p - lr*v.
template <typename T>
void sgd_step(std::span<T> params, std::span<T> velocity, std::span<const T> grad, double lr, double momentum) {
  if (params.size() != velocity.size() || params.size() != grad.size())
    throw ShapeError("parameter, velocity and gradient sizes differ");
  for (T g : grad)
    if (!std::isfinite(static_cast<double>(g))) throw TrainingDivergence("non-finite gradient");
  const T m = static_cast<T>(momentum);
  const T r = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] + grad[i];
    params[i] -= r * velocity[i];
  }
}

template <typename T>
void sgd_step(Network<T>& net, std::span<const T> grad, double lr, double momentum) {
  sgd_step<T>(net.params(), net.velocity(), grad, lr, momentum);
}

/// Network inputs are pixel values shifted by this constant so they are
/// roughly zero-centred.
inline constexpr double kInputOffset = 0.5;

/// Copies an image into a CHW tensor slot, subtracting kInputOffset.
template <typename T>
void image_to_tensor(const Image& img, T* out) {
  const std::size_t hw = img.pixel_count();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        out[static_cast<std::size_t>(c) * hw + static_cast<std::size_t>(y) * img.width + x] =
            static_cast<T>(img.at(y, x, c) - kInputOffset);
}

template <typename T>
std::vector<T> images_to_batch(std::span<const Image> images, TensorShape& shape) {
  if (images.empty()) throw ShapeError("empty batch");
  shape = {images[0].channels, images[0].height, images[0].width};
  std::vector<T> buf(shape.size() * images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != shape.height || images[i].width != shape.width || images[i].channels != shape.channels)
      throw ShapeError("batch images must share extents");
    image_to_tensor(images[i], buf.data() + shape.size() * i);
  }
  return buf;
}

/// Per-example logits (as doubles), plus the tap activations when requested.
struct ForwardOutput {
  std::vector<std::vector<double>> logits;
  // taps[t][n] = activation of tap t for example n, CHW.
  std::vector<std::vector<std::vector<float>>> taps;
  std::vector<TensorShape> tap_shapes;
};

template <typename T>
ForwardOutput forward_images(const Network<T>& net, std::span<const Image> images, bool want_taps = false) {
  TensorShape shape;
  const auto buf = images_to_batch<T>(images, shape);
  ForwardState<T> st;
  forward(net, std::span<const T>(buf), static_cast<int>(images.size()), shape, st, false);
  ForwardOutput out;
  const int k = st.output_shape().channels;
  out.logits.resize(images.size());
  for (std::size_t n = 0; n < images.size(); ++n)
    out.logits[n].assign(st.values.back().begin() + static_cast<std::ptrdiff_t>(n * k),
                         st.values.back().begin() + static_cast<std::ptrdiff_t>((n + 1) * k));
  if (want_taps) {
    for (std::size_t li : net.architecture().tap_layers()) {
      const TensorShape ts = st.shapes[li + 1];
      out.tap_shapes.push_back(ts);
      std::vector<std::vector<float>> per(images.size());
      for (std::size_t n = 0; n < images.size(); ++n)
        per[n].assign(st.values[li + 1].begin() + static_cast<std::ptrdiff_t>(ts.size() * n),
                      st.values[li + 1].begin() + static_cast<std::ptrdiff_t>(ts.size() * (n + 1)));
      out.taps.push_back(std::move(per));
    }
  }
  return out;
}

/// Tap activations P1..Pn for one image of any extent (convolutional trunk only).
template <typename T>
ForwardOutput forward_taps(const Network<T>& net, const Image& img) {
  TensorShape shape;
  const auto buf = images_to_batch<T>(std::span<const Image>(&img, 1), shape);
  ForwardState<T> st;
  forward(net, std::span<const T>(buf), 1, shape, st, false, true);
  ForwardOutput out;
  for (std::size_t li : net.architecture().tap_layers()) {
    if (li + 1 >= st.values.size()) break;
    out.tap_shapes.push_back(st.shapes[li + 1]);
    out.taps.push_back({std::vector<float>(st.values[li + 1].begin(), st.values[li + 1].end())});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints:
//   BNCKPT1\n
//   version 1\n
//   architecture <descriptor>\n
//   params <count>\n
//   <count little-endian IEEE-754 binary64 values, declaration order>

inline constexpr const char* kCheckpointMagic = "BNCKPT1";
inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const Network<T>& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  os << kCheckpointMagic << '\n'
     << "version " << kCheckpointVersion << '\n'
     << "architecture " << net.architecture().descriptor() << '\n'
     << "params " << net.param_count() << '\n';
  for (T p : net.params()) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(static_cast<double>(p));
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(bytes), 8);
  }
  if (!os) throw CheckpointError("failed writing '" + path + "'");
}

template <typename T = float>
Network<T> load_checkpoint(const std::string& path, const Architecture* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != kCheckpointMagic) throw CheckpointError(path + ": bad magic");
  if (!std::getline(is, line) || line.rfind("version ", 0) != 0) throw CheckpointError(path + ": missing version");
  if (line != "version " + std::to_string(kCheckpointVersion))
    throw CheckpointError(path + ": unsupported " + line);
  if (!std::getline(is, line) || line.rfind("architecture ", 0) != 0)
    throw CheckpointError(path + ": missing architecture");
  Architecture arch;
  try {
    arch = Architecture::parse(line.substr(13));
  } catch (const Error& e) {
    throw CheckpointError(path + ": " + e.what());
  }
  if (expected && !(arch == *expected))
    throw CheckpointError(path + ": architecture mismatch: file has '" + arch.descriptor() + "', expected '" +
                          expected->descriptor() + "'");
  Network<T> net(arch);
  if (!std::getline(is, line) || line != "params " + std::to_string(net.param_count()))
    throw CheckpointError(path + ": parameter count does not match architecture");
  for (auto& p : net.params()) {
    unsigned char bytes[8];
    is.read(reinterpret_cast<char*>(bytes), 8);
    if (is.gcount() != 8) throw CheckpointError(path + ": truncated parameter data");
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    const double v = std::bit_cast<double>(bits);
    if (!std::isfinite(v)) throw CheckpointError(path + ": non-finite parameter");
    p = static_cast<T>(v);
  }
  return net;
}

}  // namespace blurlab
