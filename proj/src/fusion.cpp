#include "mpseg/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace mpseg::fusion {

namespace {

void check_aligned(const std::vector<ProbabilityVolume>& vols) {
    if (vols.empty()) {
        throw Error(ErrorKind::EmptyList, "fusion needs at least one volume");
    }
    for (const auto& v : vols) {
        if (!v.same_shape(vols.front())) {
            throw Error(ErrorKind::ShapeMismatch, "fusion inputs differ in shape");
        }
    }
}

struct OverlapSums {
    // Indexed [view * classes + class].
    std::vector<double> inter;
    std::vector<double> mass;
    std::vector<double> truth; // per class
};

OverlapSums overlap_sums(const std::vector<ProbabilityVolume>& vols, const SegmentationMask& labels) {
    const int views = static_cast<int>(vols.size());
    const int classes = vols.front().classes;
    OverlapSums s;
    s.inter.assign(static_cast<std::size_t>(views * classes), 0.0);
    s.mass.assign(static_cast<std::size_t>(views * classes), 0.0);
    s.truth.assign(static_cast<std::size_t>(classes), 0.0);
    const std::size_t n = vols.front().voxels();
    for (std::size_t x = 0; x < n; ++x) {
        const int y = labels.labels[x];
        if (y >= 0 && y < classes) {
            s.truth[static_cast<std::size_t>(y)] += 1.0;
        }
    }
    for (int v = 0; v < views; ++v) {
        for (int c = 0; c < classes; ++c) {
            double inter = 0.0;
            double mass = 0.0;
            for (std::size_t x = 0; x < n; ++x) {
                const double p = vols[static_cast<std::size_t>(v)].at(c, x);
                mass += p;
                if (labels.labels[x] == c) {
                    inter += p;
                }
            }
            s.inter[static_cast<std::size_t>(v * classes + c)] = inter;
            s.mass[static_cast<std::size_t>(v * classes + c)] = mass;
        }
    }
    return s;
}

void project(FusionWeights& weights) {
    for (int c = 0; c < weights.classes; ++c) {
        double sum = 0.0;
        for (int v = 0; v < weights.views; ++v) {
            weights.at(v, c) = std::max(0.0, weights.at(v, c));
            sum += weights.at(v, c);
        }
        for (int v = 0; v < weights.views; ++v) {
            weights.at(v, c) = sum > 0.0 ? weights.at(v, c) / sum : 1.0 / weights.views;
        }
    }
}

} // namespace

bool FusionWeights::is_convex(double tol) const {
    if (views < 1 || classes < 1 || w.size() != static_cast<std::size_t>(views) * classes) {
        return false;
    }
    for (int c = 0; c < classes; ++c) {
        double sum = 0.0;
        for (int v = 0; v < views; ++v) {
            if (at(v, c) < 0.0) {
                return false;
            }
            sum += at(v, c);
        }
        if (std::abs(sum - 1.0) > tol) {
            return false;
        }
    }
    return true;
}

std::string FusionWeights::to_json() const {
    std::ostringstream out;
    out << "{\"views\": " << views << ", \"classes\": " << classes << ", \"weights\": [";
    char buf[40];
    for (std::size_t i = 0; i < w.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", w[i]);
        out << (i ? ", " : "") << buf;
    }
    out << "]}\n";
    return out.str();
}

FusionWeights FusionWeights::from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        FusionWeights f;
        f.views = j.at("views").get<int>();
        f.classes = j.at("classes").get<int>();
        f.w = j.at("weights").get<std::vector<double>>();
        if (f.views < 1 || f.classes < 1 || f.w.size() != static_cast<std::size_t>(f.views) * f.classes) {
            throw Error(ErrorKind::ShapeMismatch, "fusion weight array does not match views x classes");
        }
        if (!f.is_convex()) {
            throw Error(ErrorKind::InvalidConfig, "fusion weights are not a per-class convex combination");
        }
        return f;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::InvalidConfig, std::string("bad fusion weights: ") + ex.what());
    }
}

ProbabilityVolume mean_fusion(const std::vector<ProbabilityVolume>& vols) {
    check_aligned(vols);
    ProbabilityVolume out(vols.front().classes, vols.front().grid);
    for (const auto& v : vols) {
        for (std::size_t i = 0; i < out.probs.size(); ++i) {
            out.probs[i] += v.probs[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(vols.size());
    for (double& p : out.probs) {
        p *= inv;
    }
    return out;
}

ProbabilityVolume apply_fusion(const std::vector<ProbabilityVolume>& vols, const FusionWeights& weights) {
    check_aligned(vols);
    if (weights.views != static_cast<int>(vols.size()) || weights.classes != vols.front().classes) {
        throw Error(ErrorKind::ShapeMismatch, "fusion weights do not match the view/class counts");
    }
    ProbabilityVolume out(vols.front().classes, vols.front().grid);
    const std::size_t n = out.voxels();
    for (int v = 0; v < weights.views; ++v) {
        for (int c = 0; c < weights.classes; ++c) {
            const double w = weights.at(v, c);
            const double* src = &vols[static_cast<std::size_t>(v)].probs[static_cast<std::size_t>(c) * n];
            double* dst = &out.probs[static_cast<std::size_t>(c) * n];
            for (std::size_t x = 0; x < n; ++x) {
                dst[x] += w * src[x];
            }
        }
    }
    return out;
}

std::vector<double> soft_dice(const ProbabilityVolume& probs, const SegmentationMask& labels) {
    if (labels.size() != probs.voxels()) {
        throw Error(ErrorKind::ShapeMismatch, "labels and probabilities differ in voxel count");
    }
    std::vector<double> onehot(probs.probs.size(), 0.0);
    for (std::size_t x = 0; x < labels.size(); ++x) {
        const int y = labels.labels[x];
        if (y >= 0 && y < probs.classes) {
            onehot[static_cast<std::size_t>(y) * probs.voxels() + x] = 1.0;
        }
    }
    return soft_dice(probs, onehot);
}

std::vector<double> soft_dice(const ProbabilityVolume& probs, const std::vector<double>& onehot) {
    if (onehot.size() != probs.probs.size()) {
        throw Error(ErrorKind::ShapeMismatch, "one-hot labels and probabilities differ in size");
    }
    const std::size_t n = probs.voxels();
    std::vector<double> dice(static_cast<std::size_t>(probs.classes));
    for (int c = 0; c < probs.classes; ++c) {
        double inter = 0.0;
        double psum = 0.0;
        double ysum = 0.0;
        for (std::size_t x = 0; x < n; ++x) {
            const std::size_t i = static_cast<std::size_t>(c) * n + x;
            inter += probs.probs[i] * onehot[i];
            psum += probs.probs[i];
            ysum += onehot[i];
        }
        dice[static_cast<std::size_t>(c)] = (2.0 * inter + kSoftDiceEpsilon) / (psum + ysum + kSoftDiceEpsilon);
    }
    return dice;
}

double fusion_objective(const std::vector<std::vector<ProbabilityVolume>>& val_vols,
                        const std::vector<SegmentationMask>& val_labels, const FusionWeights& weights) {
    if (val_vols.empty() || val_vols.size() != val_labels.size()) {
        throw Error(ErrorKind::ShapeMismatch, "need one label mask per validation subject");
    }
    double total = 0.0;
    std::size_t terms = 0;
    for (std::size_t s = 0; s < val_vols.size(); ++s) {
        const auto dice = soft_dice(apply_fusion(val_vols[s], weights), val_labels[s]);
        for (double d : dice) {
            total += d;
            ++terms;
        }
    }
    return total / static_cast<double>(terms);
}

FitResult fit_fusion_weights(const std::vector<std::vector<ProbabilityVolume>>& val_vols,
                             const std::vector<SegmentationMask>& val_labels, const FitOptions& options) {
    if (val_vols.empty() || val_vols.size() != val_labels.size()) {
        throw Error(ErrorKind::ShapeMismatch, "need one label mask per validation subject");
    }
    const int views = static_cast<int>(val_vols.front().size());
    for (const auto& subject : val_vols) {
        check_aligned(subject);
        if (static_cast<int>(subject.size()) != views) {
            throw Error(ErrorKind::ShapeMismatch, "validation subjects differ in view count");
        }
    }
    const int classes = val_vols.front().front().classes;

    std::vector<OverlapSums> sums;
    for (std::size_t s = 0; s < val_vols.size(); ++s) {
        if (val_labels[s].size() != val_vols[s].front().voxels()) {
            throw Error(ErrorKind::ShapeMismatch, "validation labels do not match the probability grid");
        }
        sums.push_back(overlap_sums(val_vols[s], val_labels[s]));
    }

    FitResult result;
    FusionWeights current = FusionWeights::uniform(views, classes);
    result.weights = current;
    result.uniform_objective = fusion_objective(val_vols, val_labels, current);
    result.objective = result.uniform_objective;
    if (views == 1) {
        return result;
    }

    const double scale = 1.0 / static_cast<double>(val_vols.size() * static_cast<std::size_t>(classes));
    FusionWeights grad(views, classes, 0.0);
    for (int iter = 0; iter < options.iterations; ++iter) {
        std::fill(grad.w.begin(), grad.w.end(), 0.0);
        for (const auto& s : sums) {
            for (int c = 0; c < classes; ++c) {
                double num = kSoftDiceEpsilon;
                double den = s.truth[static_cast<std::size_t>(c)] + kSoftDiceEpsilon;
                for (int v = 0; v < views; ++v) {
                    num += 2.0 * current.at(v, c) * s.inter[static_cast<std::size_t>(v * classes + c)];
                    den += current.at(v, c) * s.mass[static_cast<std::size_t>(v * classes + c)];
                }
                for (int v = 0; v < views; ++v) {
                    const double a = s.inter[static_cast<std::size_t>(v * classes + c)];
                    const double b = s.mass[static_cast<std::size_t>(v * classes + c)];
                    grad.at(v, c) += scale * (2.0 * a * den - num * b) / (den * den);
                }
            }
        }
        double peak = 0.0;
        for (double g : grad.w) {
            peak = std::max(peak, std::abs(g));
        }
        if (!(peak > 0.0)) {
            break;
        }
        // Normalised, decaying step keeps the update scale independent of
        // how many voxels the validation volumes have.
        const double eta = options.step / (1.0 + 0.1 * iter);
        for (std::size_t i = 0; i < current.w.size(); ++i) {
            current.w[i] += eta * grad.w[i] / peak;
        }
        project(current);
        const double objective = fusion_objective(val_vols, val_labels, current);
        if (objective > result.objective) {
            result.objective = objective;
            result.weights = current;
        }
    }
    return result;
}

SegmentationMask argmax_labels(const ProbabilityVolume& vol) {
    SegmentationMask mask(vol.grid);
    const std::size_t n = vol.voxels();
    for (std::size_t x = 0; x < n; ++x) {
        int best = 0;
        double best_value = vol.at(0, x);
        for (int c = 1; c < vol.classes; ++c) {
            if (vol.at(c, x) > best_value) {
                best_value = vol.at(c, x);
                best = c;
            }
        }
        mask.labels[x] = static_cast<std::int16_t>(best);
    }
    return mask;
}

} // namespace mpseg::fusion
