#include "usground/nn/autograd.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "usground/errors.hpp"

namespace usground::nn {

std::string to_string(ParamRole role) {
    switch (role) {
    case ParamRole::frozen:
        return "frozen";
    case ParamRole::adapter:
        return "adapter";
    case ParamRole::trainable:
        return "trainable";
    }
    return "frozen";
}

// ---- ParameterStore --------------------------------------------------------

Parameter &ParameterStore::add(std::string name, Matrix value, ParamRole role) {
    if (contains(name)) {
        throw ConfigError(fmt::format("duplicate parameter '{}'", name));
    }
    auto p = std::make_unique<Parameter>();
    p->name = std::move(name);
    p->value = std::move(value);
    p->role = role;
    params_.push_back(std::move(p));
    return *params_.back();
}

void ParameterStore::remove(const std::string &name) {
    std::erase_if(params_, [&](const auto &p) { return p->name == name; });
}

Parameter *ParameterStore::find(const std::string &name) {
    for (auto &p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

const Parameter *ParameterStore::find(const std::string &name) const {
    for (const auto &p : params_) {
        if (p->name == name) return p.get();
    }
    return nullptr;
}

Parameter &ParameterStore::at(const std::string &name) {
    if (auto *p = find(name)) return *p;
    throw ConfigError(fmt::format("no parameter named '{}'", name));
}

const Parameter &ParameterStore::at(const std::string &name) const {
    if (const auto *p = find(name)) return *p;
    throw ConfigError(fmt::format("no parameter named '{}'", name));
}

std::vector<Parameter *> ParameterStore::all() {
    std::vector<Parameter *> out;
    out.reserve(params_.size());
    for (auto &p : params_) out.push_back(p.get());
    return out;
}

std::vector<const Parameter *> ParameterStore::all() const {
    std::vector<const Parameter *> out;
    out.reserve(params_.size());
    for (const auto &p : params_) out.push_back(p.get());
    return out;
}

std::vector<Parameter *> ParameterStore::trainable() {
    std::vector<Parameter *> out;
    for (auto &p : params_) {
        if (p->requires_grad()) out.push_back(p.get());
    }
    return out;
}

std::size_t ParameterStore::total_params() const {
    std::size_t n = 0;
    for (const auto &p : params_) n += p->numel();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto &p : params_) p->zero_grad();
}

// ---- Tape ------------------------------------------------------------------

const Matrix &Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Parameter &p) {
    Node n;
    n.value = p.value;
    n.requires_grad = p.requires_grad();
    n.param = &p;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::span<const Var> parents, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [this](const Var &v) { return requires_grad(v.id); });
    if (n.requires_grad) {
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Matrix &g) { accumulate_expr(id, g); }

void Tape::backward(std::span<const std::pair<Var, Matrix>> seeds) {
    for (const auto &[v, g] : seeds) {
        if (v.value().rows() != g.rows() || v.value().cols() != g.cols()) {
            throw DimensionError("backward seed shape mismatch");
        }
        accumulate(v.id, g);
    }
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node &n = nodes_[static_cast<std::size_t>(i)];
        if (!n.requires_grad || n.grad.size() == 0) {
            continue;
        }
        if (n.param != nullptr) {
            if (n.param->grad.size() == 0) {
                n.param->grad = n.grad;
            } else {
                n.param->grad += n.grad;
            }
        } else if (n.backward) {
            n.backward(*this, i);
        }
    }
}

// ---- operations -----------------------------------------------------------

namespace {

void check_same(const Var &a, const Var &b, const char *op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(fmt::format("{}: shapes {}x{} and {}x{} differ", op, a.rows(),
                                         a.cols(), b.rows(), b.cols()));
    }
}

}  // namespace

Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) {
        throw DimensionError(fmt::format("matmul: {}x{} * {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Tape &t = *a.tape;
    return t.record(a.value() * b.value(), {a, b}, [a, b](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        if (t.requires_grad(a.id)) t.accumulate_expr(a.id, g * t.value(b.id).transpose());
        if (t.requires_grad(b.id)) t.accumulate_expr(b.id, t.value(a.id).transpose() * g);
    });
}

Var matmul_nt(Var a, Var b) {
    if (a.cols() != b.cols()) {
        throw DimensionError(fmt::format("matmul_nt: {}x{} * ({}x{})^T", a.rows(), a.cols(), b.rows(), b.cols()));
    }
    Tape &t = *a.tape;
    return t.record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        if (t.requires_grad(a.id)) t.accumulate_expr(a.id, g * t.value(b.id));
        if (t.requires_grad(b.id)) t.accumulate_expr(b.id, g.transpose() * t.value(a.id));
    });
}

Var add(Var a, Var b) {
    check_same(a, b, "add");
    Tape &t = *a.tape;
    return t.record(a.value() + b.value(), {a, b}, [a, b](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        t.accumulate(a.id, g);
        t.accumulate(b.id, g);
    });
}

Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Tape &t = *a.tape;
    return t.record(a.value() - b.value(), {a, b}, [a, b](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        t.accumulate(a.id, g);
        if (t.requires_grad(b.id)) t.accumulate_expr(b.id, -g);
    });
}

Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Tape &t = *a.tape;
    return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        if (t.requires_grad(a.id)) t.accumulate_expr(a.id, g.cwiseProduct(t.value(b.id)));
        if (t.requires_grad(b.id)) t.accumulate_expr(b.id, g.cwiseProduct(t.value(a.id)));
    });
}

Var scale(Var a, double s) {
    Tape &t = *a.tape;
    return t.record(a.value() * s, {a},
                    [a, s](Tape &t, int self) { t.accumulate_expr(a.id, t.grad(self) * s); });
}

Var add_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw DimensionError(fmt::format("add_row: row {}x{} vs matrix {}x{}", row.rows(), row.cols(), a.rows(), a.cols()));
    }
    Tape &t = *a.tape;
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return t.record(std::move(out), {a, row}, [a, row](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        t.accumulate(a.id, g);
        if (t.requires_grad(row.id)) t.accumulate_expr(row.id, g.colwise().sum());
    });
}

Var relu(Var a) {
    Tape &t = *a.tape;
    return t.record(a.value().cwiseMax(0.0), {a}, [a](Tape &t, int self) {
        const Matrix &x = t.value(a.id);
        t.accumulate_expr(a.id, t.grad(self).cwiseProduct(
                                    (x.array() > 0.0).cast<double>().matrix()));
    });
}

Var sigmoid(Var a) {
    Tape &t = *a.tape;
    Matrix y = a.value().unaryExpr([](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    return t.record(std::move(y), {a}, [a](Tape &t, int self) {
        const Matrix &y = t.value(self);
        t.accumulate_expr(a.id, t.grad(self).cwiseProduct(
                                    (y.array() * (1.0 - y.array())).matrix()));
    });
}

Var inverse_sigmoid(Var a, double eps) {
    Tape &t = *a.tape;
    const Matrix x = a.value().cwiseMax(0.0).cwiseMin(1.0);
    Matrix y(x.rows(), x.cols());
    Matrix dy(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double x1 = std::max(x(i), eps);
        const double x2 = std::max(1.0 - x(i), eps);
        y(i) = std::log(x1 / x2);
        const double d1 = x(i) > eps ? 1.0 / x1 : 0.0;
        const double d2 = 1.0 - x(i) > eps ? 1.0 / x2 : 0.0;
        dy(i) = d1 + d2;
    }
    return t.record(std::move(y), {a}, [a, dy = std::move(dy)](Tape &t, int self) {
        t.accumulate_expr(a.id, t.grad(self).cwiseProduct(dy));
    });
}

namespace {

Matrix softmax_groups_value(const Matrix &x, int group) {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        for (Eigen::Index g0 = 0; g0 < x.cols(); g0 += group) {
            const auto seg = x.row(r).segment(g0, group);
            const double m = seg.maxCoeff();
            auto out = y.row(r).segment(g0, group);
            out = (seg.array() - m).exp().matrix();
            out /= out.sum();
        }
    }
    return y;
}

}  // namespace

Var softmax_groups(Var a, int group) {
    if (group <= 0 || a.cols() % group != 0) {
        throw DimensionError("softmax_groups: columns not divisible by group");
    }
    Tape &t = *a.tape;
    return t.record(softmax_groups_value(a.value(), group), {a}, [a, group](Tape &t, int self) {
        const Matrix &y = t.value(self);
        const Matrix &g = t.grad(self);
        Matrix dx(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            for (Eigen::Index g0 = 0; g0 < y.cols(); g0 += group) {
                const auto ys = y.row(r).segment(g0, group);
                const auto gs = g.row(r).segment(g0, group);
                const double dot = ys.dot(gs);
                dx.row(r).segment(g0, group) = (ys.array() * (gs.array() - dot)).matrix();
            }
        }
        t.accumulate(a.id, dx);
    });
}

Var softmax_rows(Var a) { return softmax_groups(a, static_cast<int>(a.cols())); }

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Eigen::Index n = x.cols();
    if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
        throw DimensionError("layer_norm: affine parameters must be 1 x features");
    }
    Tape &t = *x.tape;
    const Matrix &xv = x.value();
    Matrix xhat(xv.rows(), n);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        const double mean = xv.row(r).mean();
        const double var = (xv.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
    }
    Matrix y = xhat;
    y.array().rowwise() *= gamma.value().row(0).array();
    y.rowwise() += beta.value().row(0);
    return t.record(std::move(y), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape &t, int self) {
                        const Matrix &g = t.grad(self);
                        if (t.requires_grad(gamma.id)) {
                            t.accumulate_expr(gamma.id, g.cwiseProduct(xhat).colwise().sum());
                        }
                        if (t.requires_grad(beta.id)) {
                            t.accumulate_expr(beta.id, g.colwise().sum());
                        }
                        if (t.requires_grad(x.id)) {
                            const double n = static_cast<double>(xhat.cols());
                            Matrix gh = g;
                            gh.array().rowwise() *= t.value(gamma.id).row(0).array();
                            Matrix dx(gh.rows(), gh.cols());
                            for (Eigen::Index r = 0; r < gh.rows(); ++r) {
                                const double s1 = gh.row(r).sum();
                                const double s2 = gh.row(r).dot(xhat.row(r));
                                dx.row(r) = (inv_std(r) / n) *
                                            (n * gh.row(r).array() - s1 - xhat.row(r).array() * s2).matrix();
                            }
                            t.accumulate(x.id, dx);
                        }
                    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) {
        throw DimensionError("concat_cols: no inputs");
    }
    Tape &t = *parts.front().tape;
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (const auto &p : parts) {
        if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Eigen::Index c = 0;
    for (const auto &p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return t.record(std::move(out), ps, [ps](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        Eigen::Index c = 0;
        for (const auto &p : ps) {
            if (t.requires_grad(p.id)) t.accumulate_expr(p.id, g.middleCols(c, p.cols()));
            c += p.cols();
        }
    });
}

Var slice_cols(Var a, int start, int count) {
    if (start < 0 || count < 0 || start + count > a.cols()) {
        throw DimensionError("slice_cols: range outside matrix");
    }
    Tape &t = *a.tape;
    return t.record(a.value().middleCols(start, count), {a}, [a, start, count](Tape &t, int self) {
        Matrix g = Matrix::Zero(t.value(a.id).rows(), t.value(a.id).cols());
        g.middleCols(start, count) = t.grad(self);
        t.accumulate(a.id, g);
    });
}

Var gather_rows(Var table, std::span<const int> rows) {
    Tape &t = *table.tape;
    const Matrix &tv = table.value();
    Matrix out(static_cast<Eigen::Index>(rows.size()), tv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= tv.rows()) {
            throw DimensionError(fmt::format("gather_rows: index {} outside {} rows", rows[i], tv.rows()));
        }
        out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
    }
    std::vector<int> idx(rows.begin(), rows.end());
    return t.record(std::move(out), {table}, [table, idx = std::move(idx)](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        Matrix d = Matrix::Zero(t.value(table.id).rows(), t.value(table.id).cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            d.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
        }
        t.accumulate(table.id, d);
    });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var multi_head_attention(Var q, Var k, Var v, int heads) {
    const Eigen::Index d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows() || heads <= 0 || d % heads != 0) {
        throw DimensionError("multi_head_attention: incompatible shapes or head count");
    }
    Tape &t = *q.tape;
    const Eigen::Index dh = d / heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Matrix> probs(static_cast<std::size_t>(heads));
    Matrix out(q.rows(), d);
    for (int h = 0; h < heads; ++h) {
        Matrix scores = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * s;
        for (Eigen::Index r = 0; r < scores.rows(); ++r) {
            const double m = scores.row(r).maxCoeff();
            scores.row(r) = (scores.row(r).array() - m).exp().matrix();
            scores.row(r) /= scores.row(r).sum();
        }
        out.middleCols(h * dh, dh) = scores * v.value().middleCols(h * dh, dh);
        probs[static_cast<std::size_t>(h)] = std::move(scores);
    }
    return t.record(std::move(out), {q, k, v},
                    [q, k, v, heads, dh, s, probs = std::move(probs)](Tape &t, int self) {
                        const Matrix &g = t.grad(self);
                        const Matrix &qv = t.value(q.id);
                        const Matrix &kv = t.value(k.id);
                        const Matrix &vv = t.value(v.id);
                        Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
                        Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
                        Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
                        for (int h = 0; h < heads; ++h) {
                            const Matrix &a = probs[static_cast<std::size_t>(h)];
                            const auto go = g.middleCols(h * dh, dh);
                            dv.middleCols(h * dh, dh) = a.transpose() * go;
                            const Matrix da = go * vv.middleCols(h * dh, dh).transpose();
                            Matrix ds = a.cwiseProduct(da);
                            const Eigen::VectorXd rs = ds.rowwise().sum();
                            ds -= a.cwiseProduct(rs.replicate(1, a.cols()));
                            ds *= s;
                            dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
                            dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
                        }
                        t.accumulate(q.id, dq);
                        t.accumulate(k.id, dk);
                        t.accumulate(v.id, dv);
                    });
}

namespace {

struct Corner {
    Eigen::Index index = -1;  // row in the value map, -1 when outside
    double weight = 0.0;
    double dfx = 0.0;  // d weight / d fx
    double dfy = 0.0;
};

std::array<Corner, 4> bilinear_corners(double x, double y, int map_h, int map_w) {
    const double px = x * map_w - 0.5;
    const double py = y * map_h - 0.5;
    const double x0 = std::floor(px);
    const double y0 = std::floor(py);
    const double fx = px - x0;
    const double fy = py - y0;
    std::array<Corner, 4> c;
    const int ix[4] = {0, 1, 0, 1};
    const int iy[4] = {0, 0, 1, 1};
    for (int i = 0; i < 4; ++i) {
        const double wx = ix[i] ? fx : 1.0 - fx;
        const double wy = iy[i] ? fy : 1.0 - fy;
        c[static_cast<std::size_t>(i)].weight = wx * wy;
        c[static_cast<std::size_t>(i)].dfx = (ix[i] ? 1.0 : -1.0) * wy;
        c[static_cast<std::size_t>(i)].dfy = (iy[i] ? 1.0 : -1.0) * wx;
        const double cx = x0 + ix[i];
        const double cy = y0 + iy[i];
        if (cx >= 0 && cx < map_w && cy >= 0 && cy < map_h) {
            c[static_cast<std::size_t>(i)].index =
                static_cast<Eigen::Index>(cy) * map_w + static_cast<Eigen::Index>(cx);
        }
    }
    return c;
}

}  // namespace

Var deformable_sample(Var values, Var locations, Var weights, int map_h, int map_w, int heads,
                      int points) {
    const Eigen::Index nq = locations.rows();
    const Eigen::Index d = values.cols();
    if (values.rows() != static_cast<Eigen::Index>(map_h) * map_w || d % heads != 0 ||
        locations.cols() != heads * points * 2 || weights.cols() != heads * points ||
        weights.rows() != nq) {
        throw DimensionError("deformable_sample: incompatible shapes");
    }
    Tape &t = *values.tape;
    const Eigen::Index dh = d / heads;
    const Matrix &vv = values.value();
    const Matrix &lv = locations.value();
    const Matrix &wv = weights.value();
    Matrix out = Matrix::Zero(nq, d);
    for (Eigen::Index q = 0; q < nq; ++q) {
        for (int h = 0; h < heads; ++h) {
            for (int p = 0; p < points; ++p) {
                const int j = h * points + p;
                const auto corners = bilinear_corners(lv(q, 2 * j), lv(q, 2 * j + 1), map_h, map_w);
                const double a = wv(q, j);
                for (const auto &c : corners) {
                    if (c.index < 0) continue;
                    out.row(q).segment(h * dh, dh) += (a * c.weight) * vv.row(c.index).segment(h * dh, dh);
                }
            }
        }
    }
    return t.record(std::move(out), {values, locations, weights},
                    [values, locations, weights, map_h, map_w, heads, points, dh](Tape &t, int self) {
                        const Matrix &g = t.grad(self);
                        const Matrix &vv = t.value(values.id);
                        const Matrix &lv = t.value(locations.id);
                        const Matrix &wv = t.value(weights.id);
                        const bool need_v = t.requires_grad(values.id);
                        const bool need_l = t.requires_grad(locations.id);
                        const bool need_w = t.requires_grad(weights.id);
                        Matrix dvals = need_v ? Matrix::Zero(vv.rows(), vv.cols()) : Matrix();
                        Matrix dloc = need_l ? Matrix::Zero(lv.rows(), lv.cols()) : Matrix();
                        Matrix dw = need_w ? Matrix::Zero(wv.rows(), wv.cols()) : Matrix();
                        for (Eigen::Index q = 0; q < lv.rows(); ++q) {
                            for (int h = 0; h < heads; ++h) {
                                const auto go = g.row(q).segment(h * dh, dh);
                                for (int p = 0; p < points; ++p) {
                                    const int j = h * points + p;
                                    const auto corners = bilinear_corners(lv(q, 2 * j), lv(q, 2 * j + 1), map_h, map_w);
                                    const double a = wv(q, j);
                                    double dot_w = 0.0;
                                    double dfx = 0.0;
                                    double dfy = 0.0;
                                    for (const auto &c : corners) {
                                        if (c.index < 0) continue;
                                        const double vg = vv.row(c.index).segment(h * dh, dh).dot(go);
                                        dot_w += c.weight * vg;
                                        dfx += c.dfx * vg;
                                        dfy += c.dfy * vg;
                                        if (need_v) {
                                            dvals.row(c.index).segment(h * dh, dh) += (a * c.weight) * go;
                                        }
                                    }
                                    if (need_w) dw(q, j) += dot_w;
                                    if (need_l) {
                                        dloc(q, 2 * j) += a * dfx * map_w;
                                        dloc(q, 2 * j + 1) += a * dfy * map_h;
                                    }
                                }
                            }
                        }
                        if (need_v) t.accumulate(values.id, dvals);
                        if (need_l) t.accumulate(locations.id, dloc);
                        if (need_w) t.accumulate(weights.id, dw);
                    });
}

Var reference_locations(Var refs, Var offsets, int heads, int points) {
    if (refs.cols() != 4 || offsets.rows() != refs.rows() || offsets.cols() != heads * points * 2) {
        throw DimensionError("reference_locations: incompatible shapes");
    }
    Tape &t = *refs.tape;
    const Matrix &rv = refs.value();
    const Matrix &ov = offsets.value();
    const double k = 0.5 / points;
    Matrix out(ov.rows(), ov.cols());
    for (Eigen::Index q = 0; q < ov.rows(); ++q) {
        for (Eigen::Index j = 0; j < ov.cols() / 2; ++j) {
            out(q, 2 * j) = rv(q, 0) + ov(q, 2 * j) * k * rv(q, 2);
            out(q, 2 * j + 1) = rv(q, 1) + ov(q, 2 * j + 1) * k * rv(q, 3);
        }
    }
    return t.record(std::move(out), {refs, offsets}, [refs, offsets, k](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        const Matrix &rv = t.value(refs.id);
        const Matrix &ov = t.value(offsets.id);
        Matrix dr = Matrix::Zero(rv.rows(), 4);
        Matrix dof(ov.rows(), ov.cols());
        for (Eigen::Index q = 0; q < ov.rows(); ++q) {
            for (Eigen::Index j = 0; j < ov.cols() / 2; ++j) {
                const double gx = g(q, 2 * j);
                const double gy = g(q, 2 * j + 1);
                dr(q, 0) += gx;
                dr(q, 1) += gy;
                dr(q, 2) += gx * ov(q, 2 * j) * k;
                dr(q, 3) += gy * ov(q, 2 * j + 1) * k;
                dof(q, 2 * j) = gx * k * rv(q, 2);
                dof(q, 2 * j + 1) = gy * k * rv(q, 3);
            }
        }
        t.accumulate(refs.id, dr);
        t.accumulate(offsets.id, dof);
    });
}

Var sine_embed(Var x, int dims, double temperature) {
    if (dims <= 0 || dims % 2 != 0) {
        throw DimensionError("sine_embed: dims must be positive and even");
    }
    Tape &t = *x.tape;
    const Matrix &xv = x.value();
    const int half = dims / 2;
    Eigen::VectorXd freq(half);
    for (int i = 0; i < half; ++i) {
        freq(i) = 2.0 * std::numbers::pi / std::pow(temperature, 2.0 * i / dims);
    }
    Matrix out(xv.rows(), xv.cols() * dims);
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
        for (Eigen::Index c = 0; c < xv.cols(); ++c) {
            for (int i = 0; i < half; ++i) {
                const double a = xv(r, c) * freq(i);
                out(r, c * dims + 2 * i) = std::sin(a);
                out(r, c * dims + 2 * i + 1) = std::cos(a);
            }
        }
    }
    return t.record(std::move(out), {x}, [x, dims, half, freq](Tape &t, int self) {
        const Matrix &g = t.grad(self);
        const Matrix &xv = t.value(x.id);
        Matrix dx = Matrix::Zero(xv.rows(), xv.cols());
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
            for (Eigen::Index c = 0; c < xv.cols(); ++c) {
                double acc = 0.0;
                for (int i = 0; i < half; ++i) {
                    const double a = xv(r, c) * freq(i);
                    acc += freq(i) * (g(r, c * dims + 2 * i) * std::cos(a) -
                                      g(r, c * dims + 2 * i + 1) * std::sin(a));
                }
                dx(r, c) = acc;
            }
        }
        t.accumulate(x.id, dx);
    });
}

}  // namespace usground::nn
