#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "usground/nn/autograd.hpp"

namespace usground::nn {

struct AdapterInfo {
    int rank = 4;
    double alpha = 8.0;
    double scale() const { return alpha / rank; }
};

// A flat bag of named parameters plus the set of names that are linear
// transforms ("<name>.weight" d_out x d_in, optional "<name>.bias" 1 x d_out).
// Linears may carry a low-rank adapter "<name>.lora_A" / "<name>.lora_B".
class Module {
public:
    Parameter &add_param(const std::string &name, Matrix value, ParamRole role = ParamRole::frozen);
    void add_linear(const std::string &name, int d_in, int d_out, std::mt19937_64 &rng,
                    bool bias = true);

    bool is_linear(const std::string &name) const { return linears_.count(name) != 0; }
    const std::set<std::string> &linears() const { return linears_; }

    // y = x W^T + b (+ (alpha/r) (x A^T) B^T when adapted). Uses tape
    // constants for a const module, so inference never touches gradients.
    Var linear(Tape &tape, const std::string &name, Var x);
    Var linear(Tape &tape, const std::string &name, Var x) const;
    Var param(Tape &tape, const std::string &name);
    Var param(Tape &tape, const std::string &name) const;

    ParameterStore &params() { return params_; }
    const ParameterStore &params() const { return params_; }

    const std::map<std::string, AdapterInfo> &adapters() const { return adapters_; }
    bool merged() const { return merged_; }

    // Used by the LoRA engine and checkpoint loader.
    void attach_adapter(const std::string &target, AdapterInfo info, Matrix a, Matrix b);
    void detach_adapters(bool mark_merged);
    void set_merged(bool merged) { merged_ = merged; }

    void set_all_roles(ParamRole role);

private:
    template <typename Self>
    static Var linear_impl(Self &self, Tape &tape, const std::string &name, Var x);

    ParameterStore params_;
    std::set<std::string> linears_;
    std::map<std::string, AdapterInfo> adapters_;
    bool merged_ = false;
};

Matrix xavier_uniform(int rows, int cols, std::mt19937_64 &rng);

// Stable 64-bit FNV-1a; used to derive per-name seeds.
std::uint64_t name_hash(const std::string &text);

}  // namespace usground::nn
