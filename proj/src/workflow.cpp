#include "usground/workflow.hpp"

#include <fmt/format.h>

#include "usground/errors.hpp"

namespace usground {

TrainMode parse_train_mode(const std::string &text) {
    if (text == "lora") return TrainMode::lora;
    if (text == "full") return TrainMode::full;
    throw ConfigError(fmt::format("unknown training mode '{}' (expected lora or full)", text));
}

std::vector<Sample> load_split(const DatasetManifest &manifest, Split which, ImageSize target,
                               const SplitFractions &fractions, std::uint64_t seed) {
    const DatasetManifest m = manifest.is_split() ? manifest : split(manifest, fractions, seed);
    split_indices(m, which);  // rejects train/val access to unseen data
    return ingest_all(m, target, which);
}

TrainOutcome run_training(const TrainJob &job, const std::function<void(const EpochRecord &)> &on_epoch) {
    if (job.manifests.empty()) {
        throw ConfigError("training needs at least one manifest");
    }
    ToyDetector det = job.init ? ToyDetector::load(*job.init) : ToyDetector(job.detector, job.seed);
    if (!det.module().adapters().empty()) {
        nn::merge(det.module());
        det.module().set_merged(false);
    }
    std::vector<nn::AuditEntry> audit;
    if (job.mode == TrainMode::lora) {
        audit = nn::apply_plan(det.module(), det.default_plan(), job.lora);
    } else {
        det.module().set_all_roles(nn::ParamRole::trainable);
        audit = nn::audit(det.module());
    }

    const ImageSize canvas = det.canvas();
    std::vector<Sample> train_set, val_set;
    for (const auto &m : job.manifests) {
        for (auto &s : load_split(m, Split::train, canvas, job.fractions, job.seed)) train_set.push_back(std::move(s));
        for (auto &s : load_split(m, Split::val, canvas, job.fractions, job.seed)) val_set.push_back(std::move(s));
    }
    if (train_set.empty() || val_set.empty()) {
        throw ConfigError("train and val splits must both be nonempty");
    }
    TrainOutcome out{std::move(det), {}, std::move(audit), 0.0, 0.0, train_set.size(), val_set.size()};
    DetectorTask task(out.detector, std::move(train_set), std::move(val_set), job.task);
    out.initial_train_loss = task.clean_train_loss();
    TrainConfig tc = job.train;
    tc.seed = job.seed;
    out.result = train(task, tc, on_epoch);
    out.final_train_loss = task.clean_train_loss();
    return out;
}

}  // namespace usground
