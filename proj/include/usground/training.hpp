#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "usground/dataset.hpp"
#include "usground/detector.hpp"
#include "usground/losses.hpp"
#include "usground/nn/autograd.hpp"

namespace usground {

struct TrainConfig {
    int batch_size = 4;
    double learning_rate = 5e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int patience = 20;
    int max_epochs = 100;
    std::uint64_t seed = 0;
    // Global gradient-norm clip; <= 0 disables.
    double clip_norm = 0.0;
    // Wall-clock cap in seconds; <= 0 disables.
    double time_budget_s = 0.0;

    void validate() const;
};

// Decoupled weight decay Adam over parameters that require gradients.
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(nn::ParameterStore &params);
    double learning_rate() const { return lr_; }
    int steps() const { return t_; }

private:
    struct Moments {
        nn::Matrix m, v;
    };
    double lr_, wd_, b1_, b2_, eps_;
    int t_ = 0;
    std::map<std::string, Moments> state_;
};

// What the loop needs from a model + data pairing.
class TrainingTask {
public:
    virtual ~TrainingTask() = default;
    virtual nn::ParameterStore &parameters() = 0;
    virtual std::size_t train_size() const = 0;
    // Adds d(mean batch loss)/d(param) into Parameter::grad; returns the mean loss.
    virtual double accumulate_gradients(std::span<const std::size_t> batch, std::uint64_t seed) = 0;
    virtual double validation_loss() = 0;
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val_loss = 0.0;
    bool early_stopped = false;
    std::string stop_reason;  // "patience", "max_epochs" or "time_budget"
    double seconds = 0.0;
};

// Minibatch AdamW with early stopping on validation loss. On return the
// task's parameters hold the best-validation snapshot.
TrainResult train(TrainingTask &task, const TrainConfig &config,
                  const std::function<void(const EpochRecord &)> &on_epoch = {});

std::string history_jsonl(const std::vector<EpochRecord> &history);

struct DetectorTaskOptions {
    LossWeights weights;
    FocalParams focal;
    bool augment = true;
    AugmentConfig augment_config;
    // Also supervise the encoder proposals and intermediate decoder layers.
    bool aux_losses = true;
    // Focal loss of every image token against the prompt, positive where
    // the token center falls inside the box; summed and divided by the
    // positive count.
    double token_weight = 1.0;
};

// grid^2 x T targets for the dense token loss.
nn::Matrix token_targets(int grid, const GroundTruth &gt);

// Ground truth for one sample at the detector canvas.
GroundTruth ground_truth(const Detector &detector, const Vocabulary &vocab, const Sample &sample);

class DetectorTask final : public TrainingTask {
public:
    DetectorTask(ToyDetector &detector, std::vector<Sample> train, std::vector<Sample> val,
                 DetectorTaskOptions options = {});

    nn::ParameterStore &parameters() override { return detector_.module().params(); }
    std::size_t train_size() const override { return train_.size(); }
    double accumulate_gradients(std::span<const std::size_t> batch, std::uint64_t seed) override;
    double validation_loss() override;
    // Mean loss over the un-augmented training samples.
    double clean_train_loss() const;

private:
    ToyDetector &detector_;
    std::vector<Sample> train_;
    std::vector<Sample> val_;
    DetectorTaskOptions options_;
};

// Mean total_loss of a detector over samples already at its canvas size.
double mean_detection_loss(const ToyDetector &detector, const std::vector<Sample> &samples,
                           const LossWeights &weights = {}, FocalParams focal = {});

}  // namespace usground
