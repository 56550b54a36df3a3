#include "flplas/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "flplas/random.hpp"

namespace flplas {

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("learning_rate must be > 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("momentum must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) {
    throw std::invalid_argument("weight_decay must be >= 0");
  }
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (local_iterations == 0) {
    throw std::invalid_argument("local_iterations must be positive");
  }
  if (!(lr_decay_base > 0.0 && lr_decay_base <= 1.0)) {
    throw std::invalid_argument("lr_decay_base must be in (0, 1]");
  }
}

double TrainingConfig::effective_learning_rate(int round_t) const {
  return learning_rate * std::pow(lr_decay_base, round_t);
}

namespace {

constexpr std::size_t kMlpHidden = 32;
constexpr std::size_t kConv1Kernel = 5;
constexpr std::size_t kConv2Kernel = 3;
constexpr std::size_t kConv1Channels = 6;
constexpr std::size_t kConv2Channels = 16;
constexpr std::size_t kLenetHidden = 64;

void init_weights(Layer& layer, std::size_t fan_in, std::size_t fan_out,
                  std::uint64_t seed, std::string_view arch_id,
                  std::size_t index) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  auto rng = make_stream({seed, stream::kInit, hash_name(arch_id), index});
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(layer.shape);
  for (auto& v : t.values()) v = dist(rng);
  layer.param = std::move(t);
}

void add_dense(LayeredModel& m, std::size_t in, std::size_t out,
               std::uint64_t seed) {
  Layer w{LayerKind::kDense, {out, in}, std::nullopt};
  init_weights(w, in, out, seed, m.arch_id, m.layers.size());
  m.layers.push_back(std::move(w));
  m.layers.push_back(Layer{LayerKind::kBias, {out}, Tensor(Shape{out})});
}

void add_conv(LayeredModel& m, std::size_t in_ch, std::size_t out_ch,
              std::size_t k, std::uint64_t seed) {
  Layer w{LayerKind::kConv2d, {out_ch, in_ch, k, k}, std::nullopt};
  init_weights(w, in_ch * k * k, out_ch * k * k, seed, m.arch_id,
               m.layers.size());
  m.layers.push_back(std::move(w));
  m.layers.push_back(Layer{LayerKind::kBias, {out_ch}, Tensor(Shape{out_ch})});
}

}  // namespace

LayeredModel build_arch(std::string_view arch_id, std::size_t num_classes,
                        const Shape& input_shape, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (input_shape.empty() || shape_size(input_shape) == 0) {
    throw std::invalid_argument("input shape must be non-empty");
  }
  LayeredModel m;
  m.arch_id = std::string(arch_id);
  m.input_shape = input_shape;
  m.num_classes = num_classes;
  if (arch_id == "mlp-2") {
    add_dense(m, shape_size(input_shape), kMlpHidden, seed);
    add_dense(m, kMlpHidden, num_classes, seed);
  } else if (arch_id == "lenet-s") {
    if (input_shape.size() != 3) {
      throw std::invalid_argument("lenet-s expects a CxHxW input shape, got " +
                                  shape_to_string(input_shape));
    }
    const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
    if (h < 12 || w < 12) {
      throw std::invalid_argument("lenet-s needs images of at least 12x12");
    }
    const std::size_t h2 = ((h - kConv1Kernel + 1) / 2 - kConv2Kernel + 1) / 2;
    const std::size_t w2 = ((w - kConv1Kernel + 1) / 2 - kConv2Kernel + 1) / 2;
    add_conv(m, c, kConv1Channels, kConv1Kernel, seed);
    add_conv(m, kConv1Channels, kConv2Channels, kConv2Kernel, seed);
    add_dense(m, kConv2Channels * h2 * w2, kLenetHidden, seed);
    add_dense(m, kLenetHidden, num_classes, seed);
  } else {
    throw std::invalid_argument("unknown architecture '" + std::string(arch_id) +
                                "'");
  }
  return m;
}

std::vector<Block> plan_blocks(const LayeredModel& model) {
  const auto& layers = model.layers;
  if (layers.empty() || layers.size() % 2 != 0) {
    throw std::invalid_argument("model '" + model.arch_id +
                                "' must consist of weight/bias layer pairs");
  }
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < layers.size(); i += 2) {
    const auto& w = layers[i];
    const auto& b = layers[i + 1];
    if (w.kind == LayerKind::kBias || b.kind != LayerKind::kBias) {
      throw std::invalid_argument("layer " + std::to_string(i) +
                                  ": expected weight layer followed by bias");
    }
    if (b.shape.size() != 1 || b.shape[0] != w.shape[0]) {
      throw std::invalid_argument("layer " + std::to_string(i + 1) +
                                  ": bias shape " + shape_to_string(b.shape) +
                                  " does not match weight " +
                                  shape_to_string(w.shape));
    }
    Block blk;
    blk.kind = w.kind;
    blk.weight = i;
    blk.bias = i + 1;
    if (w.kind == LayerKind::kConv2d) {
      if (w.shape.size() != 4 || w.shape[2] != w.shape[3]) {
        throw std::invalid_argument("layer " + std::to_string(i) +
                                    ": conv weight must be OxIxKxK");
      }
      blk.relu = true;
      blk.pool = true;
    } else {
      if (w.shape.size() != 2) {
        throw std::invalid_argument("layer " + std::to_string(i) +
                                    ": dense weight must be OxI");
      }
      blk.relu = i + 2 < layers.size();
    }
    blocks.push_back(blk);
  }
  if (layers[layers.size() - 2].kind != LayerKind::kDense ||
      layers[layers.size() - 2].shape[0] != model.num_classes) {
    throw std::invalid_argument("final layer of '" + model.arch_id +
                                "' must be dense with num_classes outputs");
  }
  return blocks;
}

std::size_t block_of_layer(const LayeredModel& model, std::size_t layer_index) {
  if (layer_index >= model.num_layers()) {
    throw std::out_of_range("layer index " + std::to_string(layer_index) +
                            " out of range");
  }
  return layer_index / 2;
}

namespace {

// Intermediate values kept for the backward pass of one block.
struct BlockTrace {
  Tensor input;
  std::vector<double> cols;  // conv: per-sample im2col matrices
  Tensor pre;                // weight * input + bias
  std::vector<std::uint32_t> pool_argmax;
};

struct ConvGeom {
  std::size_t n, c, h, w, out_c, k, oh, ow;
  std::size_t patch() const { return c * k * k; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeom conv_geometry(const Tensor& x, const Shape& ws, std::size_t weight_index) {
  if (x.rank() != 4 || x.dim(1) != ws[1]) {
    throw std::invalid_argument(
        "layer " + std::to_string(weight_index) + ": conv2d input " +
        shape_to_string(x.shape()) + " incompatible with weight " +
        shape_to_string(ws));
  }
  const std::size_t k = ws[2];
  if (x.dim(2) < k || x.dim(3) < k) {
    throw std::invalid_argument("layer " + std::to_string(weight_index) +
                                ": input smaller than kernel");
  }
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), ws[0], k,
          x.dim(2) - k + 1, x.dim(3) - k + 1};
}

void im2col(const double* x, const ConvGeom& g, double* cols) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = cols + ((c * g.k + ki) * g.k + kj) * p;
        for (std::size_t oh = 0; oh < g.oh; ++oh) {
          const double* src = x + (c * g.h + oh + ki) * g.w + kj;
          std::copy(src, src + g.ow, row + oh * g.ow);
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeom& g, double* dx) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = cols + ((c * g.k + ki) * g.k + kj) * p;
        for (std::size_t oh = 0; oh < g.oh; ++oh) {
          double* dst = dx + (c * g.h + oh + ki) * g.w + kj;
          const double* src = row + oh * g.ow;
          for (std::size_t ow = 0; ow < g.ow; ++ow) dst[ow] += src[ow];
        }
      }
    }
  }
}

Tensor conv_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                    std::size_t weight_index, std::vector<double>* keep_cols) {
  const ConvGeom g = conv_geometry(x, weight.shape(), weight_index);
  const std::size_t kk = g.patch(), p = g.positions();
  Tensor out(Shape{g.n, g.out_c, g.oh, g.ow});
  std::vector<double> local;
  std::vector<double>& cols = keep_cols ? *keep_cols : local;
  cols.assign(keep_cols ? g.n * kk * p : kk * p, 0.0);
  const double* w = weight.data();
  for (std::size_t n = 0; n < g.n; ++n) {
    double* col = cols.data() + (keep_cols ? n * kk * p : 0);
    im2col(x.data() + n * g.c * g.h * g.w, g, col);
    double* z = out.data() + n * g.out_c * p;
    for (std::size_t o = 0; o < g.out_c; ++o) {
      double* zrow = z + o * p;
      std::fill(zrow, zrow + p, bias[o]);
      for (std::size_t q = 0; q < kk; ++q) {
        const double wv = w[o * kk + q];
        const double* crow = col + q * p;
        for (std::size_t j = 0; j < p; ++j) zrow[j] += wv * crow[j];
      }
    }
  }
  return out;
}

Tensor flatten_batch(const Tensor& x) {
  Tensor flat = x;
  flat.reshape(Shape{x.dim(0), x.size() / x.dim(0)});
  return flat;
}

Tensor dense_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     std::size_t weight_index) {
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw std::invalid_argument(
        "layer " + std::to_string(weight_index) + ": dense input width " +
        std::to_string(in) + " does not match weight " +
        shape_to_string(weight.shape()));
  }
  Tensor out(Shape{n, out_dim});
  for (std::size_t s = 0; s < n; ++s) {
    const double* xr = x.data() + s * in;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wr = weight.data() + o * in;
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
      out[s * out_dim + o] = acc + bias[o];
    }
  }
  return out;
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.values()) v = v > 0.0 ? v : 0.0;
}

Tensor maxpool2(const Tensor& x, std::vector<std::uint32_t>* argmax) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ph = h / 2, pw = w / 2;
  if (ph == 0 || pw == 0) throw std::invalid_argument("pooling input too small");
  Tensor out(Shape{n, c, ph, pw});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t idx = 0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (s * c + ch) * h * w;
      for (std::size_t i = 0; i < ph; ++i) {
        for (std::size_t j = 0; j < pw; ++j, ++idx) {
          std::size_t best = base + 2 * i * w + 2 * j;
          for (std::size_t di = 0; di < 2; ++di) {
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const std::size_t at = base + (2 * i + di) * w + 2 * j + dj;
              if (x[at] > x[best]) best = at;
            }
          }
          out[idx] = x[best];
          if (argmax) (*argmax)[idx] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return out;
}

Tensor run_block(const LayeredModel& model, const Block& blk, const Tensor& in,
                 BlockTrace* trace) {
  const Tensor& weight = model.layers[blk.weight].values();
  const Tensor& bias = model.layers[blk.bias].values();
  Tensor z;
  if (blk.kind == LayerKind::kConv2d) {
    z = conv_forward(in, weight, bias, blk.weight, trace ? &trace->cols : nullptr);
    if (trace) trace->input = in;
  } else {
    Tensor flat = in.rank() == 2 ? in : flatten_batch(in);
    z = dense_forward(flat, weight, bias, blk.weight);
    if (trace) trace->input = std::move(flat);
  }
  if (trace) trace->pre = z;
  if (blk.relu) relu_inplace(z);
  if (blk.pool) z = maxpool2(z, trace ? &trace->pool_argmax : nullptr);
  return z;
}

void check_input(const LayeredModel& model, const Tensor& batch) {
  if (batch.rank() < 2) {
    throw std::invalid_argument("batch must have a leading sample dimension");
  }
  const std::size_t per_sample = batch.size() / batch.dim(0);
  if (per_sample != shape_size(model.input_shape)) {
    throw std::invalid_argument(
        "layer 0: batch sample shape " + shape_to_string(batch.shape()) +
        " does not match '" + model.arch_id + "' input " +
        shape_to_string(model.input_shape));
  }
}

Tensor shape_input(const LayeredModel& model, const Tensor& batch,
                   const Block& first) {
  check_input(model, batch);
  Tensor x = batch;
  if (first.kind == LayerKind::kConv2d) {
    if (model.input_shape.size() != 3) {
      throw std::invalid_argument("layer 0: conv2d needs a CxHxW input shape");
    }
    Shape s{batch.dim(0)};
    s.insert(s.end(), model.input_shape.begin(), model.input_shape.end());
    x.reshape(std::move(s));
  } else {
    x.reshape(Shape{batch.dim(0), shape_size(model.input_shape)});
  }
  return x;
}

}  // namespace

Tensor forward_blocks(const LayeredModel& model, const Tensor& activations,
                      std::size_t first_block, std::size_t last_block) {
  const auto blocks = plan_blocks(model);
  if (first_block > last_block || last_block > blocks.size()) {
    throw std::out_of_range("block range out of bounds");
  }
  Tensor x = first_block == 0 && last_block > 0
                 ? shape_input(model, activations, blocks[0])
                 : activations;
  for (std::size_t b = first_block; b < last_block; ++b) {
    x = run_block(model, blocks[b], x, nullptr);
  }
  return x;
}

Tensor forward(const LayeredModel& model, const Tensor& batch) {
  const auto blocks = plan_blocks(model);
  Tensor x = shape_input(model, batch, blocks[0]);
  for (const auto& blk : blocks) x = run_block(model, blk, x, nullptr);
  return x;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad_logits) {
  if (logits.rank() != 2 || logits.dim(0) == 0) {
    throw std::invalid_argument("logits must be a non-empty N x C matrix");
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw std::invalid_argument("label count does not match batch size");
  }
  if (grad_logits) *grad_logits = Tensor(logits.shape());
  double total = 0.0;
  std::vector<double> prob(c);
  for (std::size_t s = 0; s < n; ++s) {
    const int y = labels[s];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw std::invalid_argument("label " + std::to_string(y) +
                                  " outside [0, " + std::to_string(c) + ")");
    }
    const double* row = logits.data() + s * c;
    const double mx = *std::max_element(row, row + c);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      prob[k] = std::exp(row[k] - mx);
      sum += prob[k];
    }
    const double log_sum = std::log(sum);
    total += log_sum - (row[y] - mx);
    if (grad_logits) {
      double* g = grad_logits->data() + s * c;
      for (std::size_t k = 0; k < c; ++k) {
        g[k] = (prob[k] / sum - (static_cast<int>(k) == y ? 1.0 : 0.0)) /
               static_cast<double>(n);
      }
    }
  }
  return total / static_cast<double>(n);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double* row = logits.data() + s * c;
    out[s] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

LossAndGradients loss_and_gradients(const LayeredModel& model,
                                    const Tensor& batch,
                                    std::span<const int> labels) {
  if (batch.empty() || batch.dim(0) == 0) {
    throw std::invalid_argument("loss_and_gradients: empty batch");
  }
  const auto blocks = plan_blocks(model);
  std::vector<BlockTrace> traces(blocks.size());
  Tensor x = shape_input(model, batch, blocks[0]);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    x = run_block(model, blocks[b], x, &traces[b]);
  }
  Tensor grad;
  LossAndGradients result;
  result.loss = softmax_cross_entropy(x, labels, &grad);
  result.grads = model.filled_like(0.0);

  for (std::size_t bi = blocks.size(); bi-- > 0;) {
    const Block& blk = blocks[bi];
    BlockTrace& tr = traces[bi];
    // Undo pooling and activation to get dLoss/dPre.
    Tensor dz(tr.pre.shape());
    if (blk.pool) {
      for (std::size_t i = 0; i < tr.pool_argmax.size(); ++i) {
        dz[tr.pool_argmax[i]] += grad[i];
      }
    } else {
      dz = std::move(grad);
      dz.reshape(tr.pre.shape());
    }
    if (blk.relu) {
      for (std::size_t i = 0; i < dz.size(); ++i) {
        if (!(tr.pre[i] > 0.0)) dz[i] = 0.0;
      }
    }
    const Tensor& weight = model.layers[blk.weight].values();
    Tensor& dw = result.grads.layers[blk.weight].values();
    Tensor& db = result.grads.layers[blk.bias].values();
    const bool need_dx = bi > 0;
    Tensor dx;
    if (blk.kind == LayerKind::kDense) {
      const std::size_t n = tr.input.dim(0), in = tr.input.dim(1),
                        out_dim = weight.dim(0);
      if (need_dx) dx = Tensor(tr.input.shape());
      for (std::size_t s = 0; s < n; ++s) {
        const double* xr = tr.input.data() + s * in;
        const double* gr = dz.data() + s * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double g = gr[o];
          if (g == 0.0) continue;
          db[o] += g;
          double* dwr = dw.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) dwr[i] += g * xr[i];
          if (need_dx) {
            const double* wr = weight.data() + o * in;
            double* dxr = dx.data() + s * in;
            for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wr[i];
          }
        }
      }
    } else {
      const ConvGeom g = conv_geometry(tr.input, weight.shape(), blk.weight);
      const std::size_t kk = g.patch(), p = g.positions();
      if (need_dx) dx = Tensor(tr.input.shape());
      std::vector<double> dcols(need_dx ? kk * p : 0);
      for (std::size_t s = 0; s < g.n; ++s) {
        const double* col = tr.cols.data() + s * kk * p;
        const double* dzs = dz.data() + s * g.out_c * p;
        if (need_dx) std::fill(dcols.begin(), dcols.end(), 0.0);
        for (std::size_t o = 0; o < g.out_c; ++o) {
          const double* dzr = dzs + o * p;
          double bsum = 0.0;
          for (std::size_t j = 0; j < p; ++j) bsum += dzr[j];
          db[o] += bsum;
          for (std::size_t q = 0; q < kk; ++q) {
            const double* crow = col + q * p;
            double acc = 0.0;
            for (std::size_t j = 0; j < p; ++j) acc += dzr[j] * crow[j];
            dw[o * kk + q] += acc;
            if (need_dx) {
              const double wv = weight[o * kk + q];
              double* drow = dcols.data() + q * p;
              for (std::size_t j = 0; j < p; ++j) drow[j] += wv * dzr[j];
            }
          }
        }
        if (need_dx) col2im_add(dcols.data(), g, dx.data() + s * g.c * g.h * g.w);
      }
    }
    if (need_dx) {
      // The previous block produced this input, possibly in unflattened form.
      const BlockTrace& prev = traces[bi - 1];
      const std::size_t produced = blocks[bi - 1].pool ? prev.pool_argmax.size()
                                                       : prev.pre.size();
      if (produced != dx.size()) {
        throw std::logic_error("backward: activation size mismatch");
      }
      grad = std::move(dx);
    }
  }
  return result;
}

void sgd_step(LayeredModel& model, const LayeredModel& grads,
              LayeredModel& velocity, const TrainingConfig& cfg, int round_t) {
  require_congruent(model, grads, "sgd_step gradients");
  require_congruent(model, velocity, "sgd_step velocity");
  const double lr = cfg.effective_learning_rate(round_t);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    auto p = model.layers[l].values().values();
    const auto g = grads.layers[l].values().values();
    auto v = velocity.layers[l].values().values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = cfg.momentum * v[i] + (g[i] + cfg.weight_decay * p[i]);
      p[i] -= lr * v[i];
    }
  }
}

double train_epoch(LayeredModel& model, LayeredModel& velocity,
                   const Tensor& images, std::span<const int> labels,
                   std::span<const std::size_t> order,
                   const TrainingConfig& cfg, int round_t) {
  double loss_sum = 0.0;
  std::size_t seen = 0;
  std::vector<int> batch_labels;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    const auto idx = order.subspan(start, end - start);
    const Tensor batch = gather_rows(images, idx);
    batch_labels.clear();
    for (auto i : idx) batch_labels.push_back(labels[i]);
    auto lg = loss_and_gradients(model, batch, batch_labels);
    if (!std::isfinite(lg.loss)) {
      throw std::runtime_error("training diverged: loss is not finite");
    }
    sgd_step(model, lg.grads, velocity, cfg, round_t);
    loss_sum += lg.loss * static_cast<double>(idx.size());
    seen += idx.size();
  }
  return seen ? loss_sum / static_cast<double>(seen) : 0.0;
}

}  // namespace flplas
