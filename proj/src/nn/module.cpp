#include "usground/nn/module.hpp"

#include <cmath>

#include <fmt/format.h>

#include "usground/errors.hpp"

namespace usground::nn {

Matrix xavier_uniform(int rows, int cols, std::mt19937_64 &rng) {
    const double limit = std::sqrt(6.0 / (rows + cols));
    std::uniform_real_distribution<double> u(-limit, limit);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

std::uint64_t name_hash(const std::string &text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Parameter &Module::add_param(const std::string &name, Matrix value, ParamRole role) {
    return params_.add(name, std::move(value), role);
}

void Module::add_linear(const std::string &name, int d_in, int d_out, std::mt19937_64 &rng,
                        bool bias) {
    if (d_in <= 0 || d_out <= 0) {
        throw ConfigError(fmt::format("linear '{}' needs positive dims", name));
    }
    add_param(name + ".weight", xavier_uniform(d_out, d_in, rng));
    if (bias) add_param(name + ".bias", Matrix::Zero(1, d_out));
    linears_.insert(name);
}

template <typename Self>
Var Module::linear_impl(Self &self, Tape &tape, const std::string &name, Var x) {
    auto &store = self.params_;
    Var w = tape.param(store.at(name + ".weight"));
    Var y = matmul_nt(x, w);
    if (auto *b = store.find(name + ".bias")) {
        y = add_row(y, tape.param(*b));
    }
    if (auto it = self.adapters_.find(name); it != self.adapters_.end()) {
        Var a = tape.param(store.at(name + ".lora_A"));
        Var bm = tape.param(store.at(name + ".lora_B"));
        y = add(y, scale(matmul_nt(matmul_nt(x, a), bm), it->second.scale()));
    }
    return y;
}

Var Module::linear(Tape &tape, const std::string &name, Var x) {
    return linear_impl(*this, tape, name, x);
}

Var Module::linear(Tape &tape, const std::string &name, Var x) const {
    return linear_impl(*this, tape, name, x);
}

Var Module::param(Tape &tape, const std::string &name) { return tape.param(params_.at(name)); }

Var Module::param(Tape &tape, const std::string &name) const {
    return tape.constant(params_.at(name).value);
}

void Module::attach_adapter(const std::string &target, AdapterInfo info, Matrix a, Matrix b) {
    if (!is_linear(target)) {
        throw PlanError(fmt::format("'{}' is not a linear transform", target));
    }
    if (adapters_.count(target)) {
        throw StateError(fmt::format("'{}' already carries an adapter", target));
    }
    add_param(target + ".lora_A", std::move(a), ParamRole::adapter);
    add_param(target + ".lora_B", std::move(b), ParamRole::adapter);
    adapters_[target] = info;
}

void Module::detach_adapters(bool mark_merged) {
    for (const auto &[target, info] : adapters_) {
        params_.remove(target + ".lora_A");
        params_.remove(target + ".lora_B");
    }
    adapters_.clear();
    if (mark_merged) merged_ = true;
}

void Module::set_all_roles(ParamRole role) {
    for (auto *p : params_.all()) p->role = role;
}

}  // namespace usground::nn
