#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "flplas/model.hpp"
#include "flplas/tensor.hpp"

namespace flplas {

// Local optimizer settings. Defaults follow the MNIST column of the usual
// FL-PLAS setup: SGD, momentum 0.9, weight decay 1e-4, batch 32, one local
// epoch, learning rate decayed by 0.998 per round.
struct TrainingConfig {
  double learning_rate = 6.7e-3;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 32;
  std::size_t local_iterations = 1;
  double lr_decay_base = 0.998;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument naming the offending field.
  void validate() const;
  double effective_learning_rate(int round_t) const;
};

// Known architectures:
//   "mlp-2"   dense(hidden 32) -> ReLU -> dense(num_classes)
//             layers: 0 W, 1 b, 2 W, 3 b
//   "lenet-s" conv5x5(6) -> ReLU -> maxpool2 -> conv3x3(16) -> ReLU ->
//             maxpool2 -> dense(64) -> ReLU -> dense(num_classes)
//             layers: 0 conv W, 1 b, 2 conv W, 3 b, 4 dense W, 5 b, 6 W, 7 b
// Weights are uniform in +-sqrt(6 / (fan_in + fan_out)) drawn from a stream
// keyed by (seed, arch_id, layer index); biases start at zero.
LayeredModel build_arch(std::string_view arch_id, std::size_t num_classes,
                        const Shape& input_shape, std::uint64_t seed = 0);

// A weight layer followed by its bias layer. Convolutions are valid-padded,
// stride 1, and followed by ReLU and 2x2 max pooling; dense blocks apply ReLU
// except the last, which emits raw logits.
struct Block {
  LayerKind kind = LayerKind::kDense;
  std::size_t weight = 0;
  std::size_t bias = 0;
  bool relu = false;
  bool pool = false;
};

// Validates the layer sequence and returns its blocks.
std::vector<Block> plan_blocks(const LayeredModel& model);
// Index of the block that owns `layer_index`.
std::size_t block_of_layer(const LayeredModel& model, std::size_t layer_index);

// Logits (N x num_classes) for a batch shaped N x input_shape.
Tensor forward(const LayeredModel& model, const Tensor& batch);
// Runs blocks [first_block, last_block) on `activations`. Used to share a
// common prefix of the network across several models.
Tensor forward_blocks(const LayeredModel& model, const Tensor& activations,
                      std::size_t first_block, std::size_t last_block);

struct LossAndGradients {
  double loss = 0.0;
  LayeredModel grads;
};

// Mean softmax cross-entropy over the batch and its gradient with respect to
// every parameter layer.
LossAndGradients loss_and_gradients(const LayeredModel& model,
                                    const Tensor& batch,
                                    std::span<const int> labels);

// Mean softmax cross-entropy of `logits`; optionally writes dLoss/dLogits.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels,
                             Tensor* grad_logits = nullptr);

// Argmax per row, ties to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);

// v <- momentum * v + (g + weight_decay * p);  p <- p - lr * decay^t * v
void sgd_step(LayeredModel& model, const LayeredModel& grads,
              LayeredModel& velocity, const TrainingConfig& cfg, int round_t);

// One pass over `order` in batches of cfg.batch_size, one sgd_step per batch.
// Returns the sample-weighted mean loss.
double train_epoch(LayeredModel& model, LayeredModel& velocity,
                   const Tensor& images, std::span<const int> labels,
                   std::span<const std::size_t> order,
                   const TrainingConfig& cfg, int round_t);

}  // namespace flplas
