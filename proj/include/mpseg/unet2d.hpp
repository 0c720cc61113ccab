#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mpseg/error.hpp"

namespace mpseg::nn {

struct UNetConfig {
    int in_channels = 3;
    int num_classes = 4;
    int depth = 2;        ///< number of pooling levels
    int base_filters = 8; ///< filters at level 0; doubled per level
    int kernel_size = 3;
    std::uint64_t seed = 0;

    void validate() const;
    int filters(int level) const { return base_filters << level; }
    int divisor() const { return 1 << depth; }
};

/// Dense (batch, channel, row, col) tensor, col fastest.
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<double> data;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0)
        : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t plane() const { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
    std::size_t image_size() const { return static_cast<std::size_t>(c) * plane(); }
    std::size_t offset(int b, int ch, int r, int col) const {
        return ((static_cast<std::size_t>(b) * c + ch) * h + r) * w + col;
    }
    double& at(int b, int ch, int r, int col) { return data[offset(b, ch, r, col)]; }
    double at(int b, int ch, int r, int col) const { return data[offset(b, ch, r, col)]; }
    double* image(int b) { return data.data() + static_cast<std::size_t>(b) * image_size(); }
    const double* image(int b) const { return data.data() + static_cast<std::size_t>(b) * image_size(); }
};

/// Square convolution with "same" zero padding. Weights are stored
/// (out, in, ky, kx) row-major, i.e. as an (out) x (in*k*k) matrix.
struct ConvLayer {
    std::string name;
    int in = 0;
    int out = 0;
    int kernel = 3;
    std::vector<double> weight;
    std::vector<double> bias;
    std::vector<double> grad_weight;
    std::vector<double> grad_bias;

    std::size_t parameter_count() const { return weight.size() + bias.size(); }
};

/// A named parameter array with its gradient accumulator.
struct ParamBlock {
    std::string name;
    std::vector<int> shape;
    std::span<double> value;
    std::span<double> grad;
};

/// U-Net: per level two 3x3 conv+ReLU then 2x2 max-pool; bottleneck of two
/// conv+ReLU; decoder of nearest-neighbour 2x upsample, 3x3 conv+ReLU, skip
/// concatenation and two conv+ReLU; final 1x1 conv to class logits.
class UNet {
public:
    explicit UNet(const UNetConfig& config);
    UNet(const UNet&);
    UNet(UNet&&) noexcept;
    UNet& operator=(const UNet&);
    UNet& operator=(UNet&&) noexcept;
    ~UNet();

    const UNetConfig& config() const { return config_; }

    /// Input spatial dims must be multiples of 2^depth. In train mode the
    /// activations are kept for backward().
    Tensor4 forward(const Tensor4& batch, bool train_mode);

    /// Inference-only forward; touches no cached state, so concurrent calls
    /// on one network are safe.
    Tensor4 predict(const Tensor4& batch) const;

    /// Adds d(loss)/d(params) into the gradient buffers for the batch seen by
    /// the last train-mode forward().
    void backward(const Tensor4& grad_logits);

    void zero_grad();
    void clear_cache();

    /// Conv outputs before the activation, per layer in forward order, for
    /// image `index` of the batch. Used to inspect where ReLU kinks sit.
    std::vector<std::vector<double>> pre_activations(const Tensor4& batch, int index = 0) const;

    std::size_t parameter_count() const;
    std::vector<ParamBlock> parameters();
    std::vector<ConvLayer>& layers() { return layers_; }
    const std::vector<ConvLayer>& layers() const { return layers_; }

    /// Flat copies, layer order, weights before bias per layer.
    std::vector<double> flat_parameters() const;
    void set_flat_parameters(const std::vector<double>& values);
    std::vector<double> flat_gradients() const;

private:
    struct Tape;

    void forward_image(const double* input, int rows, int cols, Tape* tape, double* logits) const;
    void backward_image(Tape& tape, const double* grad_logits, int rows, int cols);

    // Layer indices into layers_.
    struct Level {
        int conv_a = -1;
        int conv_b = -1;
    };
    struct DecoderLevel {
        int up_conv = -1;
        int conv_a = -1;
        int conv_b = -1;
    };

    UNetConfig config_;
    std::vector<ConvLayer> layers_;
    std::vector<Level> encoder_;
    Level bottleneck_;
    std::vector<DecoderLevel> decoder_;
    int final_ = -1;

    std::vector<Tape> tapes_;
    int cached_rows_ = 0;
    int cached_cols_ = 0;
};

UNet build_unet(const UNetConfig& config);

/// Per-pixel softmax over the class dimension, max-subtracted.
Tensor4 softmax(const Tensor4& logits);

struct GradientCheckOptions {
    double epsilon = 1e-3;
    int n_samples = 200;
    std::uint64_t seed = 0;
    /// Explicit flat parameter indices; when non-empty, n_samples is ignored.
    std::vector<std::size_t> indices;
    /// Called after the analytic backward pass (mutation testing hook).
    std::function<void(UNet&)> after_backward;
};

/// Max relative error |a-n| / max(|a|, |n|, 1e-8) between the analytic
/// cross-entropy gradient and central differences over sampled parameters.
/// `labels` holds one class index per pixel, (batch, row, col).
double gradient_check(UNet& net, const Tensor4& batch, const std::vector<int>& labels,
                      const GradientCheckOptions& options);

/// Checkpoint layout: "MPSEG1", u32 little-endian JSON length, JSON
/// {config, tensors:[{name, shape, offset}]}, then float32 little-endian
/// arrays at the listed byte offsets from the start of the data section.
void save_checkpoint(const UNet& net, const std::filesystem::path& path);
UNet load_checkpoint(const std::filesystem::path& path);

std::string config_to_json(const UNetConfig& config);
UNetConfig config_from_json(const std::string& text);

} // namespace mpseg::nn
