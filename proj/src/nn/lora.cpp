#include "usground/nn/lora.hpp"

#include <algorithm>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "usground/errors.hpp"

namespace usground::nn {

namespace {

void check_rank(int rank, double alpha, Eigen::Index d_in, Eigen::Index d_out) {
    if (rank < 1 || rank > std::min(d_in, d_out)) {
        throw ConfigError(fmt::format("rank {} outside [1, {}]", rank, std::min(d_in, d_out)));
    }
    if (!(alpha > 0.0)) {
        throw ConfigError(fmt::format("alpha must be positive, got {}", alpha));
    }
}

bool matches(const std::string &param, const std::string &entry) {
    return param == entry || param.rfind(entry + ".", 0) == 0;
}

}  // namespace

LoraAdapter make_adapter(const std::string &target, int d_in, int d_out, int rank, double alpha,
                         std::uint64_t seed) {
    check_rank(rank, alpha, d_in, d_out);
    std::mt19937_64 rng(seed ^ name_hash(target));
    std::normal_distribution<double> n(0.0, 0.02);
    LoraAdapter a;
    a.target = target;
    a.rank = rank;
    a.alpha = alpha;
    a.A.resize(rank, d_in);
    for (Eigen::Index i = 0; i < a.A.size(); ++i) a.A.data()[i] = n(rng);
    a.B = Matrix::Zero(d_out, rank);
    return a;
}

AdaptedLinear::AdaptedLinear(Matrix weight, Matrix bias, LoraAdapter adapter)
    : weight_(std::move(weight)), bias_(std::move(bias)), adapter_(std::move(adapter)) {
    if (adapter_.A.cols() != weight_.cols() || adapter_.B.rows() != weight_.rows() ||
        adapter_.A.rows() != adapter_.B.cols()) {
        throw DimensionError("adapter shape does not match the base weight");
    }
    if (bias_.size() != 0 && (bias_.rows() != 1 || bias_.cols() != weight_.rows())) {
        throw DimensionError("bias must be 1 x d_out");
    }
}

Matrix AdaptedLinear::base_forward(const Matrix &x) const {
    Matrix y = x * weight_.transpose();
    if (bias_.size() != 0) y.rowwise() += bias_.row(0);
    return y;
}

Matrix AdaptedLinear::forward(const Matrix &x) const {
    return base_forward(x) + adapter_.scale() * (x * adapter_.A.transpose()) * adapter_.B.transpose();
}

AdaptedLinear wrap(const Matrix &base_weight, int rank, double alpha, std::uint64_t seed, Matrix bias) {
    check_rank(rank, alpha, base_weight.cols(), base_weight.rows());
    auto adapter = make_adapter("linear", static_cast<int>(base_weight.cols()),
                                static_cast<int>(base_weight.rows()), rank, alpha, seed);
    return AdaptedLinear(base_weight, std::move(bias), std::move(adapter));
}

std::vector<AuditEntry> apply_plan(Module &model, const InjectionPlan &plan, const LoraConfig &cfg) {
    if (!model.adapters().empty()) {
        throw StateError("model already carries adapters");
    }
    std::vector<std::string> missing;
    for (const auto &t : plan.adapter_targets) {
        if (!model.is_linear(t)) missing.push_back(t);
    }
    for (const auto &t : plan.fully_trainable) {
        const auto all = model.params().all();
        if (std::none_of(all.begin(), all.end(), [&](const Parameter *p) { return matches(p->name, t); })) {
            missing.push_back(t);
        }
    }
    if (!missing.empty()) {
        throw PlanError(fmt::format("unresolved plan targets: {}", fmt::join(missing, ", ")));
    }
    for (const auto &t : plan.adapter_targets) {
        for (const auto &f : plan.fully_trainable) {
            if (matches(t + ".weight", f)) {
                throw PlanError(fmt::format("'{}' is both adapted and fully trainable", t));
            }
        }
    }

    model.set_all_roles(ParamRole::frozen);
    for (auto *p : model.params().all()) {
        for (const auto &f : plan.fully_trainable) {
            if (matches(p->name, f)) p->role = ParamRole::trainable;
        }
    }
    for (const auto &t : plan.adapter_targets) {
        const Matrix &w = model.params().at(t + ".weight").value;
        auto a = make_adapter(t, static_cast<int>(w.cols()), static_cast<int>(w.rows()), cfg.rank,
                              cfg.alpha, cfg.seed);
        model.attach_adapter(t, {cfg.rank, cfg.alpha}, std::move(a.A), std::move(a.B));
    }
    return audit(model);
}

std::vector<AuditEntry> audit(const Module &model) {
    std::vector<AuditEntry> out;
    for (const auto *p : model.params().all()) {
        out.push_back({p->name, p->role, p->numel()});
    }
    return out;
}

std::string audit_jsonl(const std::vector<AuditEntry> &entries) {
    std::string out;
    for (const auto &e : entries) {
        nlohmann::json j{{"name", e.name}, {"category", to_string(e.category)}, {"params", e.params}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

double trainable_fraction(const Module &model) {
    std::size_t total = 0;
    std::size_t train = 0;
    for (const auto *p : model.params().all()) {
        total += p->numel();
        if (p->role != ParamRole::frozen) train += p->numel();
    }
    return total == 0 ? 0.0 : static_cast<double>(train) / static_cast<double>(total);
}

void merge(Module &model) {
    if (model.merged()) {
        throw StateError("adapters were already merged");
    }
    if (model.adapters().empty()) {
        throw StateError("no adapters installed");
    }
    for (const auto &[target, info] : model.adapters()) {
        const Matrix &a = model.params().at(target + ".lora_A").value;
        const Matrix &b = model.params().at(target + ".lora_B").value;
        model.params().at(target + ".weight").value += info.scale() * b * a;
    }
    model.detach_adapters(true);
}

}  // namespace usground::nn
