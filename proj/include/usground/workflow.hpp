#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "usground/dataset.hpp"
#include "usground/detector.hpp"
#include "usground/nn/lora.hpp"
#include "usground/training.hpp"

namespace usground {

enum class TrainMode { lora, full };
TrainMode parse_train_mode(const std::string &text);

struct TrainJob {
    std::vector<DatasetManifest> manifests;
    TrainMode mode = TrainMode::lora;
    nn::LoraConfig lora;
    // Starting weights; a fresh detector from `detector` + `seed` otherwise.
    std::optional<std::filesystem::path> init;
    ToyDetectorConfig detector;
    TrainConfig train;
    DetectorTaskOptions task;
    SplitFractions fractions;
    std::uint64_t seed = 0;
};

struct TrainOutcome {
    ToyDetector detector;
    TrainResult result;
    std::vector<nn::AuditEntry> audit;
    double initial_train_loss = 0.0;  // clean loss over the train split
    double final_train_loss = 0.0;
    std::size_t train_samples = 0;
    std::size_t val_samples = 0;
};

// Pools the train and val splits of every manifest (unsplit manifests are
// split with the job seed), prepares the detector for the mode and trains.
TrainOutcome run_training(const TrainJob &job, const std::function<void(const EpochRecord &)> &on_epoch = {});

// Train or val samples of one manifest at `target`, splitting first when needed.
std::vector<Sample> load_split(const DatasetManifest &manifest, Split which, ImageSize target,
                               const SplitFractions &fractions, std::uint64_t seed);

}  // namespace usground
