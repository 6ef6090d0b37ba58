#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "actnet/tensor.hpp"

namespace actnet {

// U-Net family member U-Net[L, N1]. Stage i (1-based) has N1 * 2^(i-1)
// channels; the deepest stage is the bottleneck and counts as stage L.
struct ModelSpec {
  int num_encoder_layers = 4;
  int initial_channels = 16;
  int in_channels = 1;
  int num_classes = 4;
  int input_side = 256;

  bool operator==(const ModelSpec&) const = default;
};

void validate(const ModelSpec& spec);
std::vector<std::int64_t> channel_schedule(const ModelSpec& spec);
std::string to_string(const ModelSpec& spec);
// Parses "L,N1" into a spec with default in_channels/classes/side.
ModelSpec parse_spec(const std::string& text);

struct ComplexityReport {
  std::int64_t param_count = 0;
  std::int64_t model_size_bytes = 0;  // 4 bytes per parameter
  std::int64_t flops = 0;             // conv + norm + activation
  std::int64_t conv_flops = 0;        // 2 per multiply-accumulate, bias adds excluded
  std::int64_t norm_flops = 0;        // 2 per element (folded scale and shift)
  std::int64_t activation_flops = 0;  // 1 per ReLU element
};

// Closed-form trainable parameter count for the reference architecture.
std::int64_t analytic_parameter_count(const ModelSpec& spec);

// FLOPs of one stride-1 "same" convolution at h x w, bias excluded.
std::int64_t conv2d_flops(std::int64_t in_channels, std::int64_t out_channels, std::int64_t kernel,
                          std::int64_t height, std::int64_t width);

// Per-layer analytic FLOP count at spec.input_side for a single image.
// Max-pooling and concatenation are treated as data movement (0 FLOPs).
ComplexityReport complexity(const ModelSpec& spec);
std::int64_t estimate_flops(const ModelSpec& spec);

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
};

// Non-trainable state (normalization running statistics).
template <typename T>
struct Buffer {
  std::string name;
  BasicTensor<T> value;
};

enum class Phase { Train, Eval };

// Encoder-decoder segmentation network: L double-conv stages (3x3 conv, BN,
// ReLU, twice) joined by 2x2 max-pooling, L-1 decoder stages of 2x2
// transposed-conv upsampling + skip concatenation + double-conv, and a final
// 1x1 conv to num_classes logits.
//
// forward(Phase::Train) uses batch statistics, updates running statistics and
// keeps the activations needed by backward(). forward(Phase::Eval) uses the
// running statistics and keeps nothing.
template <typename T>
class BasicUNet {
 public:
  BasicUNet(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const noexcept { return spec_; }

  BasicTensor<T> forward(const BasicTensor<T>& images, Phase phase);
  // Accumulates parameter gradients for the last training forward pass.
  void backward(const BasicTensor<T>& grad_logits);
  void zero_grad();

  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
  std::vector<Buffer<T>>& buffers() noexcept { return buffers_; }
  const std::vector<Buffer<T>>& buffers() const noexcept { return buffers_; }

  std::int64_t parameter_count() const;
  // Throws ShapeError unless images is [B, in_channels, H, W] with H and W
  // divisible by 2^(L-1).
  void check_input(const Shape& shape) const;

  static constexpr T kNormEps = T(1e-5);
  static constexpr T kNormMomentum = T(0.1);

 private:
  struct Conv {
    std::size_t weight, bias;
    int in, out, kernel;
  };
  struct Norm {
    std::size_t gamma, beta, mean, var;
    int channels;
  };
  struct DoubleConv {
    Conv conv1;
    Norm norm1;
    Conv conv2;
    Norm norm2;
  };
  struct Up {
    std::size_t weight, bias;
    int in, out;
  };
  // Activations of one double-conv stage kept for backward.
  struct StageCache {
    BasicTensor<T> input, mid, output, xhat1, xhat2, inv_std1, inv_std2;
    int height = 0, width = 0;
  };

  Conv add_conv(const std::string& name, int in, int out, int kernel);
  Norm add_norm(const std::string& name, int channels);
  DoubleConv add_stage(const std::string& name, int in, int out);

  BasicTensor<T> run_stage(const DoubleConv& s, const BasicTensor<T>& x, Phase phase, StageCache* cache);
  BasicTensor<T> conv_forward(const Conv& c, const BasicTensor<T>& x);
  BasicTensor<T> norm_relu_forward(const Norm& n, const BasicTensor<T>& x, Phase phase, BasicTensor<T>* xhat,
                                   BasicTensor<T>* inv_std);
  // Returns the gradient w.r.t. the stage input unless skip_input_grad.
  BasicTensor<T> stage_backward(const DoubleConv& s, StageCache& cache, BasicTensor<T> grad, bool skip_input_grad);

  ModelSpec spec_;
  std::vector<std::int64_t> channels_;
  std::vector<Parameter<T>> params_;
  std::vector<Buffer<T>> buffers_;
  std::vector<DoubleConv> encoder_;
  std::vector<Up> up_;               // up_[i]: level i+1 -> level i
  std::vector<DoubleConv> decoder_;  // decoder_[i]: output at level i
  Conv head_{};

  bool has_cache_ = false;
  int batch_ = 0;
  std::vector<StageCache> enc_cache_, dec_cache_;
  std::vector<BasicTensor<T>> up_input_;
  std::vector<std::vector<std::uint8_t>> pool_argmax_;
  BasicTensor<T> head_input_;
};

using UNet = BasicUNet<float>;
using UNetD = BasicUNet<double>;

// Element-wise checksum of all parameters and buffers (FNV-1a over bytes).
template <typename T>
std::uint64_t parameter_checksum(const BasicUNet<T>& model);

}  // namespace actnet
