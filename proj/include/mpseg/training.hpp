#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mpseg/multiplanar.hpp"
#include "mpseg/unet2d.hpp"
#include "mpseg/volume.hpp"

namespace mpseg::train {

struct LossResult {
    double loss = 0.0;
    nn::Tensor4 grad_logits;
};

/// Mean over pixels of -w[y] * log(p[y] + 1e-12), with the exact gradient
/// with respect to the pre-softmax logits. `labels` is (batch, row, col);
/// empty `class_weights` means unit weights.
LossResult cross_entropy_loss(const nn::Tensor4& probs, const std::vector<int>& labels,
                              const std::vector<double>& class_weights = {});

struct FoldSplit {
    int fold_index = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
};

/// Shuffles ids with `seed` into three near-equal groups G0..G2; fold f tests
/// on Gf, validates on G(f+1) and trains on G(f+2).
std::vector<FoldSplit> make_folds(const std::vector<std::string>& subject_ids, std::uint64_t seed);

enum class OptimizerKind { Adam, SgdMomentum };

struct TrainConfig {
    int epochs = 20;
    int batch_size = 8;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double momentum = 0.9;
    double adam_epsilon = 1e-8;
    int early_stop_patience = 5; ///< <= 0 disables early stopping
    std::vector<double> class_weights;
    double bg_retention = 0.25; ///< fraction of background-only slices kept per epoch
    std::uint64_t seed = 0;

    void validate() const;
};

/// Adam or SGD with momentum over every ParamBlock of a network.
class Optimizer {
public:
    Optimizer(const TrainConfig& config, std::size_t parameter_count);
    void step(nn::UNet& net);

private:
    TrainConfig config_;
    std::vector<double> first_;
    std::vector<double> second_;
    long step_count_ = 0;
};

/// Labelled image subject fed to the slicer.
struct LabeledSubject {
    std::string id;
    const Volume* image = nullptr;
    const SegmentationMask* mask = nullptr;
};

/// Every (image slice, label slice) pair of a set of subjects across views.
class SliceDataset {
public:
    struct Entry {
        int stack = 0;
        int slice = 0;
        bool foreground = false;
    };

    SliceDataset() = default;
    SliceDataset(const std::vector<LabeledSubject>& subjects, const std::vector<Vec3>& axes,
                 const planar::ResampleOptions& options);

    int channels() const { return channels_; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    const planar::PlaneStack& image_stack(int stack) const { return images_[static_cast<std::size_t>(stack)]; }
    const planar::LabelStack& label_stack(int stack) const { return labels_[static_cast<std::size_t>(stack)]; }
    std::size_t stack_count() const { return images_.size(); }

    /// Entry indices for one epoch: all foreground slices plus
    /// round(retention * background) background slices, in seeded order.
    std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, double retention) const;

    /// Copies slice `e` into `image` (channels x rows x cols, zero-padded to
    /// pad_rows x pad_cols) and `labels` (rows x cols, unpadded).
    void fill(const Entry& e, double* image, int pad_rows, int pad_cols, int* labels) const;

    int rows() const { return rows_; }
    int cols() const { return cols_; }

private:
    int channels_ = 0;
    int rows_ = 0;
    int cols_ = 0;
    std::vector<planar::PlaneStack> images_;
    std::vector<planar::LabelStack> labels_;
    std::vector<Entry> entries_;
};

struct TrainHistory {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    std::vector<std::vector<double>> val_soft_dice; ///< per epoch, per class
    int best_epoch = -1;

    std::size_t epochs() const { return train_loss.size(); }
    std::string to_csv() const;
};

/// Mini-batch optimisation with per-epoch validation; restores the
/// parameters of the epoch with the lowest validation loss.
TrainHistory train(nn::UNet& net, const SliceDataset& train_set, const SliceDataset& val_set,
                   const TrainConfig& config);

struct EvalResult {
    double loss = 0.0;
    std::vector<double> soft_dice;
};

EvalResult evaluate_slices(const nn::UNet& net, const SliceDataset& set, const std::vector<std::size_t>& order,
                           const TrainConfig& config);

/// Per-slice softmax probabilities for a whole stack; output channels are classes.
planar::PlaneStack predict_stack(const nn::UNet& net, const planar::PlaneStack& image, int batch_size = 8);

int round_up(int value, int multiple);

} // namespace mpseg::train
