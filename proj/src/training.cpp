#include "usground/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "usground/errors.hpp"
#include "usground/nn/module.hpp"

namespace usground {

void TrainConfig::validate() const {
    if (batch_size < 1 || !(learning_rate > 0) || weight_decay < 0 || patience < 1 || max_epochs < 1 ||
        !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0)) {
        throw ConfigError("invalid training configuration");
    }
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(nn::ParameterStore &params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    for (auto *p : params.trainable()) {
        if (p->grad.size() != p->value.size()) continue;
        auto &s = state_[p->name];
        if (s.m.size() == 0) {
            s.m = nn::Matrix::Zero(p->value.rows(), p->value.cols());
            s.v = nn::Matrix::Zero(p->value.rows(), p->value.cols());
        }
        s.m = b1_ * s.m + (1.0 - b1_) * p->grad;
        s.v = b2_ * s.v + (1.0 - b2_) * p->grad.cwiseAbs2();
        p->value *= 1.0 - lr_ * wd_;
        p->value.array() -= lr_ * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps_);
    }
}

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::map<std::string, nn::Matrix> snapshot(nn::ParameterStore &params) {
    std::map<std::string, nn::Matrix> s;
    for (auto *p : params.trainable()) s[p->name] = p->value;
    return s;
}

void clip_gradients(nn::ParameterStore &params, double max_norm) {
    double sq = 0.0;
    for (auto *p : params.trainable()) {
        if (p->grad.size()) sq += p->grad.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        for (auto *p : params.trainable()) {
            if (p->grad.size()) p->grad *= max_norm / norm;
        }
    }
}

}  // namespace

TrainResult train(TrainingTask &task, const TrainConfig &cfg,
                  const std::function<void(const EpochRecord &)> &on_epoch) {
    cfg.validate();
    if (task.train_size() == 0) {
        throw ConfigError("training set is empty");
    }
    const auto start = std::chrono::steady_clock::now();
    auto &params = task.parameters();
    AdamW opt(cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
    TrainResult r;
    r.best_val_loss = std::numeric_limits<double>::infinity();
    auto best = snapshot(params);
    std::vector<std::size_t> order(task.train_size());
    r.stop_reason = "max_epochs";

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(mix(cfg.seed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
            std::span<const std::size_t> batch(order.data() + b, e - b);
            params.zero_grad();
            const double loss = task.accumulate_gradients(batch, mix(mix(cfg.seed, epoch), b));
            if (!std::isfinite(loss)) {
                throw DivergenceError(fmt::format("non-finite training loss at epoch {}, batch {}", epoch,
                                                  b / static_cast<std::size_t>(cfg.batch_size)));
            }
            if (cfg.clip_norm > 0) clip_gradients(params, cfg.clip_norm);
            opt.step(params);
            loss_sum += loss;
            ++batches;
        }
        const double val = task.validation_loss();
        if (!std::isfinite(val)) {
            throw DivergenceError(fmt::format("non-finite validation loss at epoch {}", epoch));
        }
        EpochRecord rec{epoch, loss_sum / batches, val, opt.learning_rate()};
        r.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (val < r.best_val_loss) {
            r.best_val_loss = val;
            r.best_epoch = epoch;
            best = snapshot(params);
        } else if (epoch - r.best_epoch >= cfg.patience) {
            r.early_stopped = true;
            r.stop_reason = "patience";
            break;
        }
        const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (cfg.time_budget_s > 0 && elapsed >= cfg.time_budget_s && epoch < cfg.max_epochs) {
            r.stop_reason = "time_budget";
            break;
        }
    }
    for (auto &[name, value] : best) params.at(name).value = value;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

std::string history_jsonl(const std::vector<EpochRecord> &history) {
    std::string out;
    for (const auto &h : history) {
        out += nlohmann::json{{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"val_loss", h.val_loss}, {"lr", h.lr}}
                   .dump();
        out += '\n';
    }
    return out;
}

GroundTruth ground_truth(const Detector &detector, const Vocabulary &vocab, const Sample &sample) {
    const ImageSize c = detector.canvas();
    if (sample.mask.height() != c.height || sample.mask.width() != c.width) {
        throw DimensionError("sample is not at the detector canvas size");
    }
    GroundTruth gt;
    gt.box = to_cxcywh(sample.box, c.width, c.height);
    gt.tokens = vocab.positive_tokens(vocab.tokenize(sample.prompt));
    return gt;
}

nn::Matrix token_targets(int grid, const GroundTruth &gt) {
    nn::Matrix out = nn::Matrix::Zero(grid * grid, gt.tokens.size());
    const double x0 = gt.box[0] - gt.box[2] / 2, x1 = gt.box[0] + gt.box[2] / 2;
    const double y0 = gt.box[1] - gt.box[3] / 2, y1 = gt.box[1] + gt.box[3] / 2;
    for (int r = 0; r < grid; ++r) {
        for (int c = 0; c < grid; ++c) {
            const double cx = (c + 0.5) / grid, cy = (r + 0.5) / grid;
            if (cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1) out.row(r * grid + c) = gt.tokens;
        }
    }
    const int cr = std::clamp(static_cast<int>(gt.box[1] * grid), 0, grid - 1);
    const int cc = std::clamp(static_cast<int>(gt.box[0] * grid), 0, grid - 1);
    out.row(cr * grid + cc) = gt.tokens;
    return out;
}

DetectorTask::DetectorTask(ToyDetector &detector, std::vector<Sample> train, std::vector<Sample> val,
                           DetectorTaskOptions options)
    : detector_(detector), train_(std::move(train)), val_(std::move(val)), options_(std::move(options)) {
    if (val_.empty()) {
        throw ConfigError("validation set is empty");
    }
}

double DetectorTask::accumulate_gradients(std::span<const std::size_t> batch, std::uint64_t seed) {
    double total = 0.0;
    const double w = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Sample &raw = train_.at(batch[i]);
        const Sample s = options_.augment ? augment(raw, mix(seed, batch[i]), options_.augment_config) : raw;
        const PromptTokens tok = detector_.tokenize(s.prompt);
        nn::Tape tape;
        const auto g = detector_.forward(tape, s.image, tok);
        const auto gt = ground_truth(detector_, detector_.vocabulary(), s);
        const LossResult l = total_loss({g.boxes.value(), g.logits.value()}, {gt}, options_.weights, options_.focal);
        std::vector<std::pair<nn::Var, nn::Matrix>> seeds{{g.boxes, w * l.grad_boxes}, {g.logits, w * l.grad_logits}};
        if (options_.aux_losses) {
            // Each auxiliary output gets its own matching; only the final
            // output's loss is reported.
            for (const auto &a : g.aux) {
                const LossResult la =
                    total_loss({a.boxes.value(), a.logits.value()}, {gt}, options_.weights, options_.focal);
                seeds.emplace_back(a.boxes, w * la.grad_boxes);
                seeds.emplace_back(a.logits, w * la.grad_logits);
            }
        }
        if (options_.token_weight > 0) {
            const nn::Matrix &tl = g.token_logits.value();
            const nn::Matrix targets = token_targets(detector_.config().grid(), gt);
            const double npos = std::max(1.0, targets.rowwise().maxCoeff().sum());
            seeds.emplace_back(g.token_logits, (w * options_.token_weight / npos) * focal_grad(tl, targets, options_.focal));
        }
        tape.backward(seeds);
        total += l.total;
    }
    return total * w;
}

double mean_detection_loss(const ToyDetector &detector, const std::vector<Sample> &samples,
                           const LossWeights &weights, FocalParams focal) {
    if (samples.empty()) return 0.0;
    double total = 0.0;
    for (const auto &s : samples) {
        const auto out = detector.detect(s.image, detector.tokenize(s.prompt));
        total += total_loss(out, {ground_truth(detector, detector.vocabulary(), s)}, weights, focal).total;
    }
    return total / static_cast<double>(samples.size());
}

double DetectorTask::validation_loss() {
    return mean_detection_loss(detector_, val_, options_.weights, options_.focal);
}

double DetectorTask::clean_train_loss() const {
    return mean_detection_loss(detector_, train_, options_.weights, options_.focal);
}

}  // namespace usground
