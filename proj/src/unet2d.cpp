#include "mpseg/unet2d.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "mpseg/rng.hpp"
#include "mpseg/training.hpp"

namespace mpseg::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void im2col(const double* in, int channels, int rows, int cols, int k, double* col) {
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(rows) * cols;
    for (int c = 0; c < channels; ++c) {
        const double* src = in + static_cast<std::size_t>(c) * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                double* dst = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * plane;
                const int dy = ky - pad;
                const int dx = kx - pad;
                for (int y = 0; y < rows; ++y) {
                    const int sy = y + dy;
                    double* row = dst + static_cast<std::size_t>(y) * cols;
                    if (sy < 0 || sy >= rows) {
                        std::fill(row, row + cols, 0.0);
                        continue;
                    }
                    const double* srow = src + static_cast<std::size_t>(sy) * cols;
                    const int x_begin = std::max(0, -dx);
                    const int x_end = std::min(cols, cols - dx);
                    std::fill(row, row + x_begin, 0.0);
                    std::copy(srow + x_begin + dx, srow + x_end + dx, row + x_begin);
                    std::fill(row + x_end, row + cols, 0.0);
                }
            }
        }
    }
}

void col2im_add(const double* col, int channels, int rows, int cols, int k, double* out) {
    const int pad = k / 2;
    const std::size_t plane = static_cast<std::size_t>(rows) * cols;
    for (int c = 0; c < channels; ++c) {
        double* dst = out + static_cast<std::size_t>(c) * plane;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const double* src = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * plane;
                const int dy = ky - pad;
                const int dx = kx - pad;
                for (int y = 0; y < rows; ++y) {
                    const int sy = y + dy;
                    if (sy < 0 || sy >= rows) {
                        continue;
                    }
                    const double* row = src + static_cast<std::size_t>(y) * cols;
                    double* drow = dst + static_cast<std::size_t>(sy) * cols;
                    const int x_begin = std::max(0, -dx);
                    const int x_end = std::min(cols, cols - dx);
                    for (int x = x_begin; x < x_end; ++x) {
                        drow[x + dx] += row[x];
                    }
                }
            }
        }
    }
}

std::vector<double>& scratch() {
    thread_local std::vector<double> buffer;
    return buffer;
}

void conv_forward(const ConvLayer& layer, const double* in, int rows, int cols, double* out) {
    const int hw = rows * cols;
    const int patch = layer.in * layer.kernel * layer.kernel;
    ConstMap weights(layer.weight.data(), layer.out, patch);
    MutMap result(out, layer.out, hw);
    if (layer.kernel == 1) {
        result.noalias() = weights * ConstMap(in, layer.in, hw);
    } else {
        auto& col = scratch();
        col.resize(static_cast<std::size_t>(patch) * hw);
        im2col(in, layer.in, rows, cols, layer.kernel, col.data());
        result.noalias() = weights * ConstMap(col.data(), patch, hw);
    }
    for (int o = 0; o < layer.out; ++o) {
        result.row(o).array() += layer.bias[static_cast<std::size_t>(o)];
    }
}

/// Accumulates parameter gradients and writes (not adds) d(input) into grad_in.
void conv_backward(ConvLayer& layer, const double* in, int rows, int cols, const double* grad_out, double* grad_in) {
    const int hw = rows * cols;
    const int patch = layer.in * layer.kernel * layer.kernel;
    ConstMap weights(layer.weight.data(), layer.out, patch);
    ConstMap dout(grad_out, layer.out, hw);
    MutMap gw(layer.grad_weight.data(), layer.out, patch);
    // Plain loop: Eigen's vectorised row sum peels by pointer alignment, so
    // the rounding would depend on where the buffer happened to land.
    for (int o = 0; o < layer.out; ++o) {
        const double* row = grad_out + static_cast<std::size_t>(o) * hw;
        double s = 0.0;
        for (int p = 0; p < hw; ++p) {
            s += row[p];
        }
        layer.grad_bias[static_cast<std::size_t>(o)] += s;
    }

    if (layer.kernel == 1) {
        gw.noalias() += dout * ConstMap(in, layer.in, hw).transpose();
        if (grad_in != nullptr) {
            MutMap(grad_in, layer.in, hw).noalias() = weights.transpose() * dout;
        }
        return;
    }
    auto& col = scratch();
    col.resize(static_cast<std::size_t>(patch) * hw);
    im2col(in, layer.in, rows, cols, layer.kernel, col.data());
    gw.noalias() += dout * ConstMap(col.data(), patch, hw).transpose();
    if (grad_in != nullptr) {
        MutMap dcol(col.data(), patch, hw);
        dcol.noalias() = weights.transpose() * dout;
        std::fill(grad_in, grad_in + static_cast<std::size_t>(layer.in) * hw, 0.0);
        col2im_add(col.data(), layer.in, rows, cols, layer.kernel, grad_in);
    }
}

void relu_inplace(std::vector<double>& v) {
    for (double& x : v) {
        x = x > 0.0 ? x : 0.0;
    }
}

void relu_backward(const std::vector<double>& activated, std::vector<double>& grad) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(activated[i] > 0.0)) {
            grad[i] = 0.0;
        }
    }
}

void maxpool(const std::vector<double>& in, int channels, int rows, int cols, std::vector<double>& out,
             std::vector<int>* argmax) {
    const int orows = rows / 2;
    const int ocols = cols / 2;
    out.assign(static_cast<std::size_t>(channels) * orows * ocols, 0.0);
    if (argmax != nullptr) {
        argmax->assign(out.size(), 0);
    }
    for (int c = 0; c < channels; ++c) {
        const double* src = in.data() + static_cast<std::size_t>(c) * rows * cols;
        for (int y = 0; y < orows; ++y) {
            for (int x = 0; x < ocols; ++x) {
                int best = (2 * y) * cols + 2 * x;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const int idx = (2 * y + dy) * cols + 2 * x + dx;
                        if (src[idx] > src[best]) {
                            best = idx;
                        }
                    }
                }
                const std::size_t o = (static_cast<std::size_t>(c) * orows + y) * ocols + x;
                out[o] = src[best];
                if (argmax != nullptr) {
                    (*argmax)[o] = best;
                }
            }
        }
    }
}

void upsample2x(const std::vector<double>& in, int channels, int rows, int cols, std::vector<double>& out) {
    const int orows = rows * 2;
    const int ocols = cols * 2;
    out.resize(static_cast<std::size_t>(channels) * orows * ocols);
    for (int c = 0; c < channels; ++c) {
        const double* src = in.data() + static_cast<std::size_t>(c) * rows * cols;
        double* dst = out.data() + static_cast<std::size_t>(c) * orows * ocols;
        for (int y = 0; y < orows; ++y) {
            for (int x = 0; x < ocols; ++x) {
                dst[y * ocols + x] = src[(y / 2) * cols + x / 2];
            }
        }
    }
}

void upsample2x_backward(const std::vector<double>& grad_up, int channels, int rows, int cols,
                         std::vector<double>& grad_in) {
    const int urows = rows * 2;
    const int ucols = cols * 2;
    grad_in.assign(static_cast<std::size_t>(channels) * rows * cols, 0.0);
    for (int c = 0; c < channels; ++c) {
        const double* src = grad_up.data() + static_cast<std::size_t>(c) * urows * ucols;
        double* dst = grad_in.data() + static_cast<std::size_t>(c) * rows * cols;
        for (int y = 0; y < urows; ++y) {
            for (int x = 0; x < ucols; ++x) {
                dst[(y / 2) * cols + x / 2] += src[y * ucols + x];
            }
        }
    }
}

ConvLayer make_conv(const std::string& name, int in, int out, int kernel, Rng& rng) {
    ConvLayer layer;
    layer.name = name;
    layer.in = in;
    layer.out = out;
    layer.kernel = kernel;
    const std::size_t n = static_cast<std::size_t>(out) * in * kernel * kernel;
    layer.weight.resize(n);
    const double stddev = std::sqrt(2.0 / static_cast<double>(in * kernel * kernel));
    for (double& w : layer.weight) {
        w = rng.normal() * stddev;
    }
    layer.bias.assign(static_cast<std::size_t>(out), 0.0);
    layer.grad_weight.assign(n, 0.0);
    layer.grad_bias.assign(static_cast<std::size_t>(out), 0.0);
    return layer;
}

} // namespace

struct UNet::Tape {
    // Indexed by layer: the conv input and (for ReLU layers) the activated output.
    std::vector<std::vector<double>> inputs;
    std::vector<std::vector<double>> outputs;
    std::vector<std::vector<int>> pool_argmax;
};

void UNetConfig::validate() const {
    if (in_channels < 1 || num_classes < 2 || depth < 1 || base_filters < 1) {
        throw Error(ErrorKind::InvalidConfig, "UNet needs in_channels>=1, num_classes>=2, depth>=1, base_filters>=1");
    }
    if (kernel_size != 3) {
        throw Error(ErrorKind::InvalidConfig, "kernel_size is fixed at 3");
    }
    if (depth > 8) {
        throw Error(ErrorKind::InvalidConfig, "depth above 8 is not supported");
    }
}

UNet::UNet(const UNetConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const int k = config_.kernel_size;
    auto add = [&](const std::string& name, int in, int out, int kernel) {
        layers_.push_back(make_conv(name, in, out, kernel, rng));
        return static_cast<int>(layers_.size()) - 1;
    };

    int channels = config_.in_channels;
    for (int l = 0; l < config_.depth; ++l) {
        const int f = config_.filters(l);
        Level level;
        level.conv_a = add("enc" + std::to_string(l) + ".conv_a", channels, f, k);
        level.conv_b = add("enc" + std::to_string(l) + ".conv_b", f, f, k);
        encoder_.push_back(level);
        channels = f;
    }
    const int fb = config_.filters(config_.depth);
    bottleneck_.conv_a = add("bottleneck.conv_a", channels, fb, k);
    bottleneck_.conv_b = add("bottleneck.conv_b", fb, fb, k);
    channels = fb;

    decoder_.resize(static_cast<std::size_t>(config_.depth));
    for (int l = config_.depth - 1; l >= 0; --l) {
        const int f = config_.filters(l);
        DecoderLevel& level = decoder_[static_cast<std::size_t>(l)];
        level.up_conv = add("dec" + std::to_string(l) + ".up_conv", channels, f, k);
        level.conv_a = add("dec" + std::to_string(l) + ".conv_a", 2 * f, f, k);
        level.conv_b = add("dec" + std::to_string(l) + ".conv_b", f, f, k);
        channels = f;
    }
    final_ = add("final", channels, config_.num_classes, 1);
}

UNet::UNet(const UNet&) = default;
UNet::UNet(UNet&&) noexcept = default;
UNet& UNet::operator=(const UNet&) = default;
UNet& UNet::operator=(UNet&&) noexcept = default;
UNet::~UNet() = default;

UNet build_unet(const UNetConfig& config) {
    return UNet(config);
}

void UNet::forward_image(const double* input, int rows, int cols, Tape* tape, double* logits) const {
    const std::size_t nlayers = layers_.size();
    if (tape != nullptr) {
        tape->inputs.assign(nlayers, {});
        tape->outputs.assign(nlayers, {});
        tape->pool_argmax.assign(static_cast<std::size_t>(config_.depth), {});
    }

    auto run = [&](int idx, const std::vector<double>& in, int r, int c, bool relu) {
        const ConvLayer& layer = layers_[static_cast<std::size_t>(idx)];
        std::vector<double> out(static_cast<std::size_t>(layer.out) * r * c);
        conv_forward(layer, in.data(), r, c, out.data());
        if (relu) {
            relu_inplace(out);
        }
        if (tape != nullptr) {
            tape->inputs[static_cast<std::size_t>(idx)] = in;
            if (relu) {
                tape->outputs[static_cast<std::size_t>(idx)] = out;
            }
        }
        return out;
    };

    std::vector<double> x(input, input + static_cast<std::size_t>(config_.in_channels) * rows * cols);
    std::vector<std::vector<double>> skips(static_cast<std::size_t>(config_.depth));
    int r = rows;
    int c = cols;
    for (int l = 0; l < config_.depth; ++l) {
        const Level& level = encoder_[static_cast<std::size_t>(l)];
        auto a = run(level.conv_a, x, r, c, true);
        auto b = run(level.conv_b, a, r, c, true);
        maxpool(b, config_.filters(l), r, c, x,
                tape != nullptr ? &tape->pool_argmax[static_cast<std::size_t>(l)] : nullptr);
        skips[static_cast<std::size_t>(l)] = std::move(b);
        r /= 2;
        c /= 2;
    }
    x = run(bottleneck_.conv_a, x, r, c, true);
    x = run(bottleneck_.conv_b, x, r, c, true);
    int channels = config_.filters(config_.depth);

    for (int l = config_.depth - 1; l >= 0; --l) {
        const DecoderLevel& level = decoder_[static_cast<std::size_t>(l)];
        std::vector<double> up;
        upsample2x(x, channels, r, c, up);
        r *= 2;
        c *= 2;
        auto u = run(level.up_conv, up, r, c, true);
        // Skip channels first, then the upsampled path.
        std::vector<double> cat = std::move(skips[static_cast<std::size_t>(l)]);
        cat.insert(cat.end(), u.begin(), u.end());
        auto a = run(level.conv_a, cat, r, c, true);
        x = run(level.conv_b, a, r, c, true);
        channels = config_.filters(l);
    }

    const ConvLayer& fin = layers_[static_cast<std::size_t>(final_)];
    conv_forward(fin, x.data(), rows, cols, logits);
    if (tape != nullptr) {
        tape->inputs[static_cast<std::size_t>(final_)] = std::move(x);
    }
}

namespace {

void check_input(const Tensor4& batch, const UNetConfig& config) {
    if (batch.c != config.in_channels) {
        throw Error(ErrorKind::ShapeError, "expected " + std::to_string(config.in_channels) + " input channels, got " +
                                               std::to_string(batch.c));
    }
    if (batch.n < 1 || batch.h < 1 || batch.w < 1 || batch.h % config.divisor() != 0 ||
        batch.w % config.divisor() != 0) {
        throw Error(ErrorKind::ShapeError, "spatial dims must be positive multiples of " +
                                               std::to_string(config.divisor()));
    }
}

} // namespace

Tensor4 UNet::predict(const Tensor4& batch) const {
    check_input(batch, config_);
    Tensor4 logits(batch.n, config_.num_classes, batch.h, batch.w);
    for (int b = 0; b < batch.n; ++b) {
        forward_image(batch.image(b), batch.h, batch.w, nullptr, logits.image(b));
    }
    return logits;
}

Tensor4 UNet::forward(const Tensor4& batch, bool train_mode) {
    if (!train_mode) {
        return predict(batch);
    }
    check_input(batch, config_);
    Tensor4 logits(batch.n, config_.num_classes, batch.h, batch.w);
    tapes_.assign(static_cast<std::size_t>(batch.n), Tape{});
    cached_rows_ = batch.h;
    cached_cols_ = batch.w;
    for (int b = 0; b < batch.n; ++b) {
        forward_image(batch.image(b), batch.h, batch.w, &tapes_[static_cast<std::size_t>(b)], logits.image(b));
    }
    return logits;
}

std::vector<std::vector<double>> UNet::pre_activations(const Tensor4& batch, int index) const {
    check_input(batch, config_);
    if (index < 0 || index >= batch.n) {
        throw Error(ErrorKind::ShapeError, "batch index out of range");
    }
    Tape tape;
    std::vector<double> logits(static_cast<std::size_t>(config_.num_classes) * batch.h * batch.w);
    forward_image(batch.image(index), batch.h, batch.w, &tape, logits.data());
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const ConvLayer& layer = layers_[i];
        const auto& in = tape.inputs[i];
        const int pixels = static_cast<int>(in.size() / static_cast<std::size_t>(layer.in));
        // Every map is the input downscaled by a power of two.
        const int scale = static_cast<int>(std::lround(std::sqrt(double(batch.h) * batch.w / pixels)));
        const int rows = batch.h / scale;
        const int cols = pixels / rows;
        std::vector<double> z(static_cast<std::size_t>(layer.out) * pixels);
        conv_forward(layer, in.data(), rows, cols, z.data());
        out.push_back(std::move(z));
    }
    return out;
}

void UNet::backward_image(Tape& tape, const double* grad_logits, int rows, int cols) {
    auto back = [&](int idx, std::vector<double>& grad_out, int r, int c, bool relu, bool need_input_grad) {
        ConvLayer& layer = layers_[static_cast<std::size_t>(idx)];
        if (relu) {
            relu_backward(tape.outputs[static_cast<std::size_t>(idx)], grad_out);
        }
        std::vector<double> grad_in;
        if (need_input_grad) {
            grad_in.resize(static_cast<std::size_t>(layer.in) * r * c);
        }
        conv_backward(layer, tape.inputs[static_cast<std::size_t>(idx)].data(), r, c, grad_out.data(),
                      need_input_grad ? grad_in.data() : nullptr);
        return grad_in;
    };

    std::vector<double> g(grad_logits, grad_logits + static_cast<std::size_t>(config_.num_classes) * rows * cols);
    g = back(final_, g, rows, cols, false, true);

    int r = rows;
    int c = cols;
    std::vector<std::vector<double>> skip_grads(static_cast<std::size_t>(config_.depth));
    for (int l = 0; l < config_.depth; ++l) {
        const DecoderLevel& level = decoder_[static_cast<std::size_t>(l)];
        const int f = config_.filters(l);
        g = back(level.conv_b, g, r, c, true, true);
        g = back(level.conv_a, g, r, c, true, true);
        const std::size_t split = static_cast<std::size_t>(f) * r * c;
        skip_grads[static_cast<std::size_t>(l)].assign(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(split));
        std::vector<double> gu(g.begin() + static_cast<std::ptrdiff_t>(split), g.end());
        gu = back(level.up_conv, gu, r, c, true, true);
        r /= 2;
        c /= 2;
        upsample2x_backward(gu, config_.filters(l + 1), r, c, g);
    }

    g = back(bottleneck_.conv_b, g, r, c, true, true);
    g = back(bottleneck_.conv_a, g, r, c, true, true);

    for (int l = config_.depth - 1; l >= 0; --l) {
        const Level& level = encoder_[static_cast<std::size_t>(l)];
        const int f = config_.filters(l);
        const int pr = r;
        const int pc = c;
        r *= 2;
        c *= 2;
        std::vector<double> gb = std::move(skip_grads[static_cast<std::size_t>(l)]);
        const auto& argmax = tape.pool_argmax[static_cast<std::size_t>(l)];
        for (int ch = 0; ch < f; ++ch) {
            for (int i = 0; i < pr * pc; ++i) {
                const std::size_t o = static_cast<std::size_t>(ch) * pr * pc + static_cast<std::size_t>(i);
                gb[static_cast<std::size_t>(ch) * r * c + static_cast<std::size_t>(argmax[o])] += g[o];
            }
        }
        g = back(level.conv_b, gb, r, c, true, true);
        g = back(level.conv_a, g, r, c, true, l > 0);
    }
}

void UNet::backward(const Tensor4& grad_logits) {
    if (tapes_.empty() || static_cast<int>(tapes_.size()) != grad_logits.n) {
        throw Error(ErrorKind::MissingActivations, "backward requires a train-mode forward on the same batch");
    }
    if (grad_logits.c != config_.num_classes || grad_logits.h != cached_rows_ || grad_logits.w != cached_cols_) {
        throw Error(ErrorKind::ShapeError, "gradient shape does not match cached forward pass");
    }
    for (int b = 0; b < grad_logits.n; ++b) {
        backward_image(tapes_[static_cast<std::size_t>(b)], grad_logits.image(b), grad_logits.h, grad_logits.w);
    }
}

void UNet::zero_grad() {
    for (auto& layer : layers_) {
        std::fill(layer.grad_weight.begin(), layer.grad_weight.end(), 0.0);
        std::fill(layer.grad_bias.begin(), layer.grad_bias.end(), 0.0);
    }
}

void UNet::clear_cache() {
    tapes_.clear();
}

std::size_t UNet::parameter_count() const {
    std::size_t total = 0;
    for (const auto& layer : layers_) {
        total += layer.parameter_count();
    }
    return total;
}

std::vector<ParamBlock> UNet::parameters() {
    std::vector<ParamBlock> blocks;
    for (auto& layer : layers_) {
        blocks.push_back({layer.name + ".weight", {layer.out, layer.in, layer.kernel, layer.kernel},
                          std::span<double>(layer.weight), std::span<double>(layer.grad_weight)});
        blocks.push_back({layer.name + ".bias", {layer.out}, std::span<double>(layer.bias),
                          std::span<double>(layer.grad_bias)});
    }
    return blocks;
}

std::vector<double> UNet::flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& layer : layers_) {
        out.insert(out.end(), layer.weight.begin(), layer.weight.end());
        out.insert(out.end(), layer.bias.begin(), layer.bias.end());
    }
    return out;
}

void UNet::set_flat_parameters(const std::vector<double>& values) {
    if (values.size() != parameter_count()) {
        throw Error(ErrorKind::ShapeError, "parameter vector length mismatch");
    }
    auto it = values.begin();
    for (auto& layer : layers_) {
        std::copy_n(it, layer.weight.size(), layer.weight.begin());
        it += static_cast<std::ptrdiff_t>(layer.weight.size());
        std::copy_n(it, layer.bias.size(), layer.bias.begin());
        it += static_cast<std::ptrdiff_t>(layer.bias.size());
    }
}

std::vector<double> UNet::flat_gradients() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& layer : layers_) {
        out.insert(out.end(), layer.grad_weight.begin(), layer.grad_weight.end());
        out.insert(out.end(), layer.grad_bias.begin(), layer.grad_bias.end());
    }
    return out;
}

Tensor4 softmax(const Tensor4& logits) {
    Tensor4 probs(logits.n, logits.c, logits.h, logits.w);
    const std::size_t plane = logits.plane();
    for (int b = 0; b < logits.n; ++b) {
        const double* in = logits.image(b);
        double* out = probs.image(b);
        for (std::size_t p = 0; p < plane; ++p) {
            double peak = in[p];
            for (int c = 1; c < logits.c; ++c) {
                peak = std::max(peak, in[static_cast<std::size_t>(c) * plane + p]);
            }
            double sum = 0.0;
            for (int c = 0; c < logits.c; ++c) {
                const double e = std::exp(in[static_cast<std::size_t>(c) * plane + p] - peak);
                out[static_cast<std::size_t>(c) * plane + p] = e;
                sum += e;
            }
            for (int c = 0; c < logits.c; ++c) {
                out[static_cast<std::size_t>(c) * plane + p] /= sum;
            }
        }
    }
    return probs;
}

double gradient_check(UNet& net, const Tensor4& batch, const std::vector<int>& labels,
                      const GradientCheckOptions& options) {
    net.zero_grad();
    Tensor4 logits = net.forward(batch, true);
    const auto loss = train::cross_entropy_loss(softmax(logits), labels);
    net.backward(loss.grad_logits);
    if (options.after_backward) {
        options.after_backward(net);
    }
    const std::vector<double> analytic = net.flat_gradients();
    net.clear_cache();

    std::vector<std::size_t> indices = options.indices;
    if (indices.empty()) {
        Rng rng(options.seed);
        for (int s = 0; s < options.n_samples; ++s) {
            indices.push_back(static_cast<std::size_t>(rng.below(analytic.size())));
        }
    }
    if (indices.empty()) {
        return 0.0;
    }

    // Map flat index -> (layer, weight/bias, offset).
    auto locate = [&](std::size_t flat) -> double& {
        for (auto& layer : net.layers()) {
            if (flat < layer.weight.size()) {
                return layer.weight[flat];
            }
            flat -= layer.weight.size();
            if (flat < layer.bias.size()) {
                return layer.bias[flat];
            }
            flat -= layer.bias.size();
        }
        throw Error(ErrorKind::ShapeError, "parameter index out of range");
    };
    auto eval_loss = [&] { return train::cross_entropy_loss(softmax(net.forward(batch, false)), labels).loss; };

    double worst = 0.0;
    for (std::size_t idx : indices) {
        double& param = locate(idx);
        const double saved = param;
        param = saved + options.epsilon;
        const double plus = eval_loss();
        param = saved - options.epsilon;
        const double minus = eval_loss();
        param = saved;
        const double numeric = (plus - minus) / (2.0 * options.epsilon);
        const double a = analytic[idx];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        worst = std::max(worst, rel);
    }
    return worst;
}

std::string config_to_json(const UNetConfig& config) {
    nlohmann::json j{{"in_channels", config.in_channels}, {"num_classes", config.num_classes},
                     {"depth", config.depth},             {"base_filters", config.base_filters},
                     {"kernel_size", config.kernel_size}, {"seed", config.seed}};
    return j.dump();
}

UNetConfig config_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        UNetConfig c;
        c.in_channels = j.value("in_channels", c.in_channels);
        c.num_classes = j.value("num_classes", c.num_classes);
        c.depth = j.value("depth", c.depth);
        c.base_filters = j.value("base_filters", c.base_filters);
        c.kernel_size = j.value("kernel_size", c.kernel_size);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidConfig, std::string("bad UNet config: ") + ex.what());
    }
}

namespace {
constexpr char kMagic[6] = {'M', 'P', 'S', 'E', 'G', '1'};
}

void save_checkpoint(const UNet& net, const std::filesystem::path& path) {
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<float> payload;
    for (const auto& layer : net.layers()) {
        tensors.push_back({{"name", layer.name + ".weight"},
                           {"shape", {layer.out, layer.in, layer.kernel, layer.kernel}},
                           {"offset", payload.size() * sizeof(float)}});
        payload.insert(payload.end(), layer.weight.begin(), layer.weight.end());
        tensors.push_back({{"name", layer.name + ".bias"},
                           {"shape", {layer.out}},
                           {"offset", payload.size() * sizeof(float)}});
        payload.insert(payload.end(), layer.bias.begin(), layer.bias.end());
    }
    nlohmann::json header{{"config", nlohmann::json::parse(config_to_json(net.config()))}, {"tensors", tensors}};
    const std::string text = header.dump();
    const auto length = static_cast<std::uint32_t>(text.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::IoFailure, "cannot write checkpoint " + path.string());
    }
    out.write(kMagic, sizeof(kMagic));
    unsigned char len_bytes[4] = {static_cast<unsigned char>(length & 0xff), static_cast<unsigned char>(length >> 8),
                                  static_cast<unsigned char>(length >> 16), static_cast<unsigned char>(length >> 24)};
    out.write(reinterpret_cast<const char*>(len_bytes), 4);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
    if (!out) {
        throw Error(ErrorKind::IoFailure, "failed writing checkpoint " + path.string());
    }
}

UNet load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::IoFailure, "cannot open checkpoint " + path.string());
    }
    char magic[6] = {};
    in.read(magic, 6);
    if (!in || std::memcmp(magic, kMagic, 6) != 0) {
        throw Error(ErrorKind::BadCheckpoint, "bad checkpoint magic in " + path.string());
    }
    unsigned char len_bytes[4] = {};
    in.read(reinterpret_cast<char*>(len_bytes), 4);
    const std::uint32_t length = static_cast<std::uint32_t>(len_bytes[0]) | (static_cast<std::uint32_t>(len_bytes[1]) << 8) |
                                 (static_cast<std::uint32_t>(len_bytes[2]) << 16) |
                                 (static_cast<std::uint32_t>(len_bytes[3]) << 24);
    std::string text(length, '\0');
    in.read(text.data(), length);
    if (!in) {
        throw Error(ErrorKind::BadCheckpoint, "truncated checkpoint header in " + path.string());
    }
    std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::BadCheckpoint, std::string("bad checkpoint header: ") + ex.what());
    }
    UNet net(config_from_json(header.at("config").dump()));
    std::size_t matched = 0;
    for (const auto& block : net.parameters()) {
        const auto it = std::find_if(header.at("tensors").begin(), header.at("tensors").end(),
                                     [&](const nlohmann::json& t) { return t.at("name") == block.name; });
        if (it == header.at("tensors").end() || it->at("shape").get<std::vector<int>>() != block.shape) {
            throw Error(ErrorKind::BadCheckpoint, "checkpoint lacks tensor " + block.name);
        }
        const std::size_t offset = it->at("offset").get<std::size_t>();
        if (offset + block.value.size() * 4 > payload.size()) {
            throw Error(ErrorKind::BadCheckpoint, "checkpoint data truncated at " + block.name);
        }
        for (std::size_t i = 0; i < block.value.size(); ++i) {
            float v;
            std::memcpy(&v, payload.data() + offset + i * 4, 4);
            block.value[i] = v;
        }
        ++matched;
    }
    if (matched != header.at("tensors").size()) {
        throw Error(ErrorKind::BadCheckpoint, "checkpoint has unexpected tensors");
    }
    return net;
}

} // namespace mpseg::nn
