#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "usground/nn/module.hpp"

namespace usground::nn {

struct LoraAdapter {
    std::string target;
    int rank = 4;
    double alpha = 8.0;
    Matrix A;  // rank x d_in
    Matrix B;  // d_out x rank

    double scale() const { return alpha / rank; }
    Matrix delta() const { return scale() * B * A; }
};

// A = N(0, 0.02^2) drawn from (seed, target), B = 0.
LoraAdapter make_adapter(const std::string &target, int d_in, int d_out, int rank, double alpha,
                         std::uint64_t seed);

// Standalone adapted linear map over plain matrices (rows are inputs).
class AdaptedLinear {
public:
    AdaptedLinear(Matrix weight, Matrix bias, LoraAdapter adapter);

    Matrix forward(const Matrix &x) const;
    Matrix base_forward(const Matrix &x) const;
    Matrix merged_weight() const { return weight_ + adapter_.delta(); }

    const Matrix &weight() const { return weight_; }
    LoraAdapter &adapter() { return adapter_; }
    const LoraAdapter &adapter() const { return adapter_; }

private:
    Matrix weight_;
    Matrix bias_;  // 1 x d_out or empty
    LoraAdapter adapter_;
};

// Throws ConfigError unless 1 <= rank <= min(d_in, d_out) and alpha > 0.
AdaptedLinear wrap(const Matrix &base_weight, int rank, double alpha, std::uint64_t seed,
                   Matrix bias = {});

struct InjectionPlan {
    std::set<std::string> adapter_targets;  // linear names
    // Parameter names, or module prefixes matching "<prefix>.*".
    std::set<std::string> fully_trainable;
};

struct LoraConfig {
    int rank = 4;
    double alpha = 8.0;
    std::uint64_t seed = 0;
};

struct AuditEntry {
    std::string name;
    ParamRole category = ParamRole::frozen;
    std::size_t params = 0;
};

// Freezes everything, marks fully-trainable names, and installs adapters.
// Unresolved names raise PlanError listing every missing name.
std::vector<AuditEntry> apply_plan(Module &model, const InjectionPlan &plan, const LoraConfig &cfg);

std::vector<AuditEntry> audit(const Module &model);
// One {"name","category","params"} object per line.
std::string audit_jsonl(const std::vector<AuditEntry> &entries);

double trainable_fraction(const Module &model);

// Folds every adapter into its base weight and removes it. A second merge,
// or a merge with no adapters installed, raises StateError.
void merge(Module &model);

}  // namespace usground::nn
