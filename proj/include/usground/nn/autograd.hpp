#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace usground::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class ParamRole { frozen, adapter, trainable };

std::string to_string(ParamRole role);

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;  // same shape as value once touched by backward
    ParamRole role = ParamRole::trainable;

    bool requires_grad() const { return role != ParamRole::frozen; }
    std::size_t numel() const { return static_cast<std::size_t>(value.size()); }
    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// Named parameters in insertion order. Pointers stay valid until the
// parameter is removed.
class ParameterStore {
public:
    Parameter &add(std::string name, Matrix value, ParamRole role = ParamRole::trainable);
    void remove(const std::string &name);

    Parameter *find(const std::string &name);
    const Parameter *find(const std::string &name) const;
    Parameter &at(const std::string &name);
    const Parameter &at(const std::string &name) const;
    bool contains(const std::string &name) const { return find(name) != nullptr; }

    std::vector<Parameter *> all();
    std::vector<const Parameter *> all() const;
    std::vector<Parameter *> trainable();

    std::size_t total_params() const;
    void zero_grad();
    std::size_t size() const { return params_.size(); }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
};

class Tape;

// Handle to a node on a tape.
struct Var {
    Tape *tape = nullptr;
    int id = -1;

    const Matrix &value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool requires_grad() const;
};

// Records a forward computation and replays it backwards. One tape per
// forward pass; not thread-safe.
class Tape {
public:
    using BackwardFn = std::function<void(Tape &, int self)>;

    Var constant(Matrix value);
    Var param(Parameter &p);
    // Read-only parameters enter the tape as constants.
    Var param(const Parameter &p) { return constant(p.value); }
    Var record(Matrix value, std::span<const Var> parents, BackwardFn backward);
    Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn backward) {
        return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                      std::move(backward));
    }

    const Matrix &value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    const Matrix &grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    // Adds `g` into the gradient slot of `id` when that node needs one.
    void accumulate(int id, const Matrix &g);
    template <typename Expr>
    void accumulate_expr(int id, const Expr &g) {
        auto &n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    // Seeds d(objective)/d(var) for each pair and propagates to parameters,
    // adding into Parameter::grad.
    void backward(std::span<const std::pair<Var, Matrix>> seeds);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Parameter *param = nullptr;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

// ---- differentiable operations -------------------------------------------

Var matmul(Var a, Var b);     // a * b
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_row(Var a, Var row);  // broadcast a 1 x n row over every row of a
Var relu(Var a);
Var sigmoid(Var a);
Var inverse_sigmoid(Var a, double eps = 1e-5);
Var softmax_rows(Var a);
// Softmax over consecutive groups of `group` columns within each row.
Var softmax_groups(Var a, int group);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, int start, int count);
Var gather_rows(Var table, std::span<const int> rows);
Var detach(Var a);

// Scaled dot-product attention with `heads` equal column groups.
Var multi_head_attention(Var q, Var k, Var v, int heads);

// Bilinear sampling of a (map_h*map_w) x D value map at per-query locations.
// locations: Nq x (heads*points*2), normalized (x, y) in [0,1];
// weights: Nq x (heads*points). Zero padding outside the map.
Var deformable_sample(Var values, Var locations, Var weights, int map_h, int map_w, int heads,
                      int points);

// Sampling locations around 4-d reference boxes (cx, cy, w, h):
// loc = ref_xy + offset / points * ref_wh * 0.5.
Var reference_locations(Var refs, Var offsets, int heads, int points);

// Sinusoidal embedding of each column of `x` (values in [0,1]); `dims`
// features per column, interleaved sin/cos.
Var sine_embed(Var x, int dims, double temperature = 10000.0);

}  // namespace usground::nn
