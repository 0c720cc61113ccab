#include "mpseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "mpseg/parallel.hpp"
#include "mpseg/rng.hpp"

namespace mpseg::train {

int round_up(int value, int multiple) {
    return (value + multiple - 1) / multiple * multiple;
}

LossResult cross_entropy_loss(const nn::Tensor4& probs, const std::vector<int>& labels,
                              const std::vector<double>& class_weights) {
    constexpr double kStabilizer = 1e-12;
    const std::size_t plane = probs.plane();
    const std::size_t pixels = static_cast<std::size_t>(probs.n) * plane;
    if (labels.size() != pixels) {
        throw Error(ErrorKind::ShapeError, "label map size does not match probabilities");
    }
    if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(probs.c)) {
        throw Error(ErrorKind::InvalidConfig, "class_weights length must equal class count");
    }
    LossResult result;
    result.grad_logits = nn::Tensor4(probs.n, probs.c, probs.h, probs.w);
    const double inv = 1.0 / static_cast<double>(pixels);
    double total = 0.0;
    for (int b = 0; b < probs.n; ++b) {
        const double* p = probs.image(b);
        double* g = result.grad_logits.image(b);
        for (std::size_t px = 0; px < plane; ++px) {
            const int y = labels[static_cast<std::size_t>(b) * plane + px];
            if (y < 0 || y >= probs.c) {
                throw Error(ErrorKind::LabelOutOfRange, "label " + std::to_string(y) + " outside [0, " +
                                                            std::to_string(probs.c) + ")");
            }
            const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(y)];
            const double py = p[static_cast<std::size_t>(y) * plane + px];
            total -= w * std::log(py + kStabilizer);
            // Plain p - onehot. Folding in the stabilizer's p/(p+s) factor
            // zeroes the gradient on confidently wrong pixels and training stalls.
            const double scale = w * inv;
            for (int c = 0; c < probs.c; ++c) {
                const double pc = p[static_cast<std::size_t>(c) * plane + px];
                g[static_cast<std::size_t>(c) * plane + px] = scale * (pc - (c == y ? 1.0 : 0.0));
            }
        }
    }
    result.loss = total * inv;
    return result;
}

std::vector<FoldSplit> make_folds(const std::vector<std::string>& subject_ids, std::uint64_t seed) {
    if (subject_ids.size() < 3) {
        throw Error(ErrorKind::TooFewSubjects, "3-fold cross-validation needs at least 3 subjects, got " +
                                                   std::to_string(subject_ids.size()));
    }
    std::vector<std::string> ids = subject_ids;
    Rng rng(seed);
    rng.shuffle(ids);

    std::vector<std::vector<std::string>> groups(3);
    const std::size_t base = ids.size() / 3;
    const std::size_t extra = ids.size() % 3;
    std::size_t cursor = 0;
    for (std::size_t g = 0; g < 3; ++g) {
        const std::size_t n = base + (g < extra ? 1 : 0);
        groups[g].assign(ids.begin() + static_cast<std::ptrdiff_t>(cursor),
                         ids.begin() + static_cast<std::ptrdiff_t>(cursor + n));
        cursor += n;
    }

    std::vector<FoldSplit> folds;
    for (int f = 0; f < 3; ++f) {
        FoldSplit split;
        split.fold_index = f;
        split.test_ids = groups[static_cast<std::size_t>(f)];
        split.val_ids = groups[static_cast<std::size_t>((f + 1) % 3)];
        split.train_ids = groups[static_cast<std::size_t>((f + 2) % 3)];
        folds.push_back(std::move(split));
    }
    return folds;
}

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1) {
        throw Error(ErrorKind::InvalidConfig, "epochs and batch_size must be at least 1");
    }
    // A zero rate is allowed: it is the null-update configuration.
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw Error(ErrorKind::InvalidConfig, "learning_rate must be finite and nonnegative");
    }
    if (!(bg_retention >= 0.0 && bg_retention <= 1.0)) {
        throw Error(ErrorKind::InvalidConfig, "bg_retention must lie in [0, 1]");
    }
    for (double w : class_weights) {
        if (!(w > 0.0)) {
            throw Error(ErrorKind::InvalidConfig, "class weights must be positive");
        }
    }
}

Optimizer::Optimizer(const TrainConfig& config, std::size_t parameter_count)
    : config_(config), first_(parameter_count, 0.0), second_(parameter_count, 0.0) {}

void Optimizer::step(nn::UNet& net) {
    ++step_count_;
    const double lr = config_.learning_rate;
    std::size_t offset = 0;
    if (config_.optimizer == OptimizerKind::Adam) {
        const double b1 = config_.beta1;
        const double b2 = config_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
        for (auto& block : net.parameters()) {
            for (std::size_t i = 0; i < block.value.size(); ++i, ++offset) {
                const double g = block.grad[i];
                first_[offset] = b1 * first_[offset] + (1.0 - b1) * g;
                second_[offset] = b2 * second_[offset] + (1.0 - b2) * g * g;
                const double mhat = first_[offset] / c1;
                const double vhat = second_[offset] / c2;
                block.value[i] -= lr * mhat / (std::sqrt(vhat) + config_.adam_epsilon);
            }
        }
        return;
    }
    for (auto& block : net.parameters()) {
        for (std::size_t i = 0; i < block.value.size(); ++i, ++offset) {
            first_[offset] = config_.momentum * first_[offset] + block.grad[i];
            block.value[i] -= lr * first_[offset];
        }
    }
}

SliceDataset::SliceDataset(const std::vector<LabeledSubject>& subjects, const std::vector<Vec3>& axes,
                           const planar::ResampleOptions& options) {
    for (const auto& subject : subjects) {
        if (subject.image == nullptr || subject.mask == nullptr) {
            throw Error(ErrorKind::InvalidConfig, "subject " + subject.id + " lacks an image or a mask");
        }
        if (subject.mask->grid.dims != subject.image->dims()) {
            throw Error(ErrorKind::ShapeMismatch, "subject " + subject.id + ": mask grid differs from image");
        }
        if (channels_ == 0) {
            channels_ = subject.image->channels();
        } else if (channels_ != subject.image->channels()) {
            throw Error(ErrorKind::ShapeMismatch, "subjects disagree on channel count");
        }
    }

    const std::size_t n_stacks = subjects.size() * axes.size();
    images_.resize(n_stacks);
    labels_.resize(n_stacks);
    parallel_for(n_stacks, [&](std::size_t idx) {
        const auto& subject = subjects[idx / axes.size()];
        const Vec3& axis = axes[idx % axes.size()];
        const planar::ViewGeometry geometry = planar::make_view_geometry(subject.image->grid(), axis, options);
        images_[idx] = planar::resample_to_view(*subject.image, geometry);
        labels_[idx] = planar::resample_labels(*subject.mask, geometry);
    });

    for (std::size_t idx = 0; idx < n_stacks; ++idx) {
        const auto& e = images_[idx].geometry.extent;
        if (rows_ == 0) {
            rows_ = e[1];
            cols_ = e[2];
        } else if (rows_ != e[1] || cols_ != e[2]) {
            throw Error(ErrorKind::ShapeMismatch, "view grids of different subjects disagree; use a common grid");
        }
        const std::size_t plane = images_[idx].geometry.plane_size();
        for (int s = 0; s < e[0]; ++s) {
            const auto begin = labels_[idx].labels.begin() + static_cast<std::ptrdiff_t>(s * plane);
            const bool fg = std::any_of(begin, begin + static_cast<std::ptrdiff_t>(plane),
                                        [](std::int16_t l) { return l != 0; });
            entries_.push_back({static_cast<int>(idx), s, fg});
        }
    }
}

std::vector<std::size_t> SliceDataset::epoch_order(std::uint64_t seed, int epoch, double retention) const {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(epoch), 0x51ce);
    std::vector<std::size_t> fg;
    std::vector<std::size_t> bg;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        (entries_[i].foreground ? fg : bg).push_back(i);
    }
    rng.shuffle(bg);
    const auto keep = static_cast<std::size_t>(std::llround(retention * static_cast<double>(bg.size())));
    fg.insert(fg.end(), bg.begin(), bg.begin() + static_cast<std::ptrdiff_t>(std::min(keep, bg.size())));
    rng.shuffle(fg);
    return fg;
}

void SliceDataset::fill(const Entry& e, double* image, int pad_rows, int pad_cols, int* labels) const {
    const auto& stack = images_[static_cast<std::size_t>(e.stack)];
    const auto& lab = labels_[static_cast<std::size_t>(e.stack)];
    const std::size_t padded_plane = static_cast<std::size_t>(pad_rows) * pad_cols;
    std::fill(image, image + static_cast<std::size_t>(channels_) * padded_plane, 0.0);
    for (int ch = 0; ch < channels_; ++ch) {
        for (int r = 0; r < rows_; ++r) {
            const double* src = &stack.slices[stack.offset(ch, e.slice, r, 0)];
            std::copy(src, src + cols_, image + static_cast<std::size_t>(ch) * padded_plane +
                                            static_cast<std::size_t>(r) * pad_cols);
        }
    }
    if (labels != nullptr) {
        for (int r = 0; r < rows_; ++r) {
            for (int c = 0; c < cols_; ++c) {
                labels[r * cols_ + c] = lab.at(e.slice, r, c);
            }
        }
    }
}

namespace {

/// Copies the top-left rows x cols of a padded tensor.
nn::Tensor4 crop(const nn::Tensor4& t, int rows, int cols) {
    if (t.h == rows && t.w == cols) {
        return t;
    }
    nn::Tensor4 out(t.n, t.c, rows, cols);
    for (int b = 0; b < t.n; ++b) {
        for (int c = 0; c < t.c; ++c) {
            for (int r = 0; r < rows; ++r) {
                const double* src = &t.data[t.offset(b, c, r, 0)];
                std::copy(src, src + cols, &out.data[out.offset(b, c, r, 0)]);
            }
        }
    }
    return out;
}

nn::Tensor4 pad(const nn::Tensor4& t, int rows, int cols) {
    if (t.h == rows && t.w == cols) {
        return t;
    }
    nn::Tensor4 out(t.n, t.c, rows, cols);
    for (int b = 0; b < t.n; ++b) {
        for (int c = 0; c < t.c; ++c) {
            for (int r = 0; r < t.h; ++r) {
                const double* src = &t.data[t.offset(b, c, r, 0)];
                std::copy(src, src + t.w, &out.data[out.offset(b, c, r, 0)]);
            }
        }
    }
    return out;
}

struct Batch {
    nn::Tensor4 input;
    std::vector<int> labels;
};

Batch make_batch(const SliceDataset& set, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
                 int divisor) {
    const int pr = round_up(set.rows(), divisor);
    const int pc = round_up(set.cols(), divisor);
    const int n = static_cast<int>(end - begin);
    Batch batch{nn::Tensor4(n, set.channels(), pr, pc),
                std::vector<int>(static_cast<std::size_t>(n) * set.rows() * set.cols())};
    for (int b = 0; b < n; ++b) {
        set.fill(set.entries()[order[begin + static_cast<std::size_t>(b)]], batch.input.image(b), pr, pc,
                 batch.labels.data() + static_cast<std::size_t>(b) * set.rows() * set.cols());
    }
    return batch;
}

} // namespace

EvalResult evaluate_slices(const nn::UNet& net, const SliceDataset& set, const std::vector<std::size_t>& order,
                           const TrainConfig& config) {
    const int classes = net.config().num_classes;
    EvalResult result;
    result.soft_dice.assign(static_cast<std::size_t>(classes), 0.0);
    if (order.empty()) {
        return result;
    }
    std::vector<double> inter(static_cast<std::size_t>(classes), 0.0);
    std::vector<double> psum(static_cast<std::size_t>(classes), 0.0);
    std::vector<double> ysum(static_cast<std::size_t>(classes), 0.0);
    double loss_total = 0.0;
    std::size_t pixels = 0;
    const auto bs = static_cast<std::size_t>(config.batch_size);
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
        const std::size_t end = std::min(order.size(), begin + bs);
        Batch batch = make_batch(set, order, begin, end, net.config().divisor());
        const nn::Tensor4 probs = nn::softmax(crop(net.predict(batch.input), set.rows(), set.cols()));
        const auto loss = cross_entropy_loss(probs, batch.labels, config.class_weights);
        const std::size_t batch_pixels = batch.labels.size();
        loss_total += loss.loss * static_cast<double>(batch_pixels);
        pixels += batch_pixels;
        const std::size_t plane = probs.plane();
        for (int b = 0; b < probs.n; ++b) {
            for (std::size_t px = 0; px < plane; ++px) {
                const int y = batch.labels[static_cast<std::size_t>(b) * plane + px];
                ysum[static_cast<std::size_t>(y)] += 1.0;
                for (int c = 0; c < classes; ++c) {
                    const double p = probs.image(b)[static_cast<std::size_t>(c) * plane + px];
                    psum[static_cast<std::size_t>(c)] += p;
                    if (c == y) {
                        inter[static_cast<std::size_t>(c)] += p;
                    }
                }
            }
        }
    }
    constexpr double kEps = 1e-6;
    result.loss = loss_total / static_cast<double>(pixels);
    for (int c = 0; c < classes; ++c) {
        const auto i = static_cast<std::size_t>(c);
        result.soft_dice[i] = (2.0 * inter[i] + kEps) / (psum[i] + ysum[i] + kEps);
    }
    return result;
}

TrainHistory train(nn::UNet& net, const SliceDataset& train_set, const SliceDataset& val_set,
                   const TrainConfig& config) {
    config.validate();
    if (train_set.size() == 0) {
        throw Error(ErrorKind::InvalidConfig, "training set is empty");
    }
    if (train_set.channels() != net.config().in_channels) {
        throw Error(ErrorKind::ShapeError, "dataset channels do not match network input channels");
    }
    Optimizer optimizer(config, net.parameter_count());
    TrainHistory history;
    std::vector<double> best_params = net.flat_parameters();
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;

    // The validation subset is fixed across epochs so losses are comparable.
    const std::vector<std::size_t> val_order =
        val_set.size() > 0 ? val_set.epoch_order(config.seed, -1, config.bg_retention) : std::vector<std::size_t>{};

    const int divisor = net.config().divisor();
    const auto bs = static_cast<std::size_t>(config.batch_size);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = train_set.epoch_order(config.seed, epoch, config.bg_retention);
        double epoch_loss = 0.0;
        std::size_t seen = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += bs) {
            const std::size_t end = std::min(order.size(), begin + bs);
            Batch batch = make_batch(train_set, order, begin, end, divisor);
            net.zero_grad();
            const nn::Tensor4 logits = net.forward(batch.input, true);
            const auto loss = cross_entropy_loss(nn::softmax(crop(logits, train_set.rows(), train_set.cols())),
                                                 batch.labels, config.class_weights);
            net.backward(pad(loss.grad_logits, logits.h, logits.w));
            optimizer.step(net);
            epoch_loss += loss.loss * static_cast<double>(end - begin);
            seen += end - begin;
        }
        net.clear_cache();
        history.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(seen, 1)));

        if (val_order.empty()) {
            history.val_loss.push_back(history.train_loss.back());
            history.val_soft_dice.emplace_back(static_cast<std::size_t>(net.config().num_classes), 0.0);
        } else {
            const EvalResult eval = evaluate_slices(net, val_set, val_order, config);
            history.val_loss.push_back(eval.loss);
            history.val_soft_dice.push_back(eval.soft_dice);
        }

        if (history.val_loss.back() < best_val) {
            best_val = history.val_loss.back();
            best_params = net.flat_parameters();
            history.best_epoch = epoch;
            since_best = 0;
        } else if (config.early_stop_patience > 0 && ++since_best >= config.early_stop_patience) {
            break;
        }
    }
    net.set_flat_parameters(best_params);
    return history;
}

std::string TrainHistory::to_csv() const {
    std::ostringstream out;
    out << "epoch,train_loss,val_loss";
    const std::size_t classes = val_soft_dice.empty() ? 0 : val_soft_dice.front().size();
    for (std::size_t c = 0; c < classes; ++c) {
        out << ",val_softdice_c" << c;
    }
    out << '\n' << std::setprecision(17);
    for (std::size_t e = 0; e < train_loss.size(); ++e) {
        out << e << ',' << train_loss[e] << ',' << val_loss[e];
        for (double d : val_soft_dice[e]) {
            out << ',' << d;
        }
        out << '\n';
    }
    return out.str();
}

planar::PlaneStack predict_stack(const nn::UNet& net, const planar::PlaneStack& image, int batch_size) {
    if (image.channels != net.config().in_channels) {
        throw Error(ErrorKind::ShapeError, "stack channels do not match network input channels");
    }
    const auto& e = image.geometry.extent;
    const int classes = net.config().num_classes;
    const int pr = round_up(e[1], net.config().divisor());
    const int pc = round_up(e[2], net.config().divisor());
    planar::PlaneStack out(classes, image.geometry, image.source_shape);
    for (int begin = 0; begin < e[0]; begin += batch_size) {
        const int n = std::min(batch_size, e[0] - begin);
        nn::Tensor4 input(n, image.channels, pr, pc);
        for (int b = 0; b < n; ++b) {
            for (int ch = 0; ch < image.channels; ++ch) {
                for (int r = 0; r < e[1]; ++r) {
                    const double* src = &image.slices[image.offset(ch, begin + b, r, 0)];
                    std::copy(src, src + e[2], &input.data[input.offset(b, ch, r, 0)]);
                }
            }
        }
        const nn::Tensor4 probs = nn::softmax(crop(net.predict(input), e[1], e[2]));
        for (int b = 0; b < n; ++b) {
            for (int c = 0; c < classes; ++c) {
                for (int r = 0; r < e[1]; ++r) {
                    const double* src = &probs.data[probs.offset(b, c, r, 0)];
                    std::copy(src, src + e[2], &out.slices[out.offset(c, begin + b, r, 0)]);
                }
            }
        }
    }
    return out;
}

} // namespace mpseg::train
