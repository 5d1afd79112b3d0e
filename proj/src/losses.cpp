#include "usground/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "usground/errors.hpp"

namespace usground {

namespace {

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// -log p and -log(1-p) for p = sigmoid(x), computed without cancellation.
double neg_log_p(double x) { return softplus(-x); }
double neg_log_1mp(double x) { return softplus(x); }

double focal_pos(double x, const FocalParams &f) {
    const double p = sigmoid(x);
    return f.alpha * std::pow(1.0 - p, f.gamma) * neg_log_p(x);
}

double focal_neg(double x, const FocalParams &f) {
    const double p = sigmoid(x);
    return (1.0 - f.alpha) * std::pow(p, f.gamma) * neg_log_1mp(x);
}

double focal_pos_grad(double x, const FocalParams &f) {
    const double p = sigmoid(x);
    return f.alpha * std::pow(1.0 - p, f.gamma) * (-f.gamma * p * neg_log_p(x) - (1.0 - p));
}

double focal_neg_grad(double x, const FocalParams &f) {
    const double p = sigmoid(x);
    return (1.0 - f.alpha) * std::pow(p, f.gamma) * (p + f.gamma * (1.0 - p) * neg_log_1mp(x));
}

struct Xyxy {
    double x1, y1, x2, y2;
};

Xyxy to_xyxy(const BoxCxcywh &b, double w, double h) {
    return {b[0] - w / 2, b[1] - h / 2, b[0] + w / 2, b[1] + h / 2};
}

// 1 - GIoU and its gradient w.r.t. the first box's xyxy corners.
double giou_loss_xyxy(const Xyxy &p, const Xyxy &g, std::array<double, 4> *grad) {
    const double ap = (p.x2 - p.x1) * (p.y2 - p.y1);
    const double ag = (g.x2 - g.x1) * (g.y2 - g.y1);
    const double iw = std::min(p.x2, g.x2) - std::max(p.x1, g.x1);
    const double ih = std::min(p.y2, g.y2) - std::max(p.y1, g.y1);
    const bool overlap = iw > 0 && ih > 0;
    const double inter = overlap ? iw * ih : 0.0;
    const double uni = ap + ag - inter;
    const double cw = std::max(p.x2, g.x2) - std::min(p.x1, g.x1);
    const double ch = std::max(p.y2, g.y2) - std::min(p.y1, g.y1);
    const double c = cw * ch;
    const double loss = 2.0 - inter / uni - uni / c;
    if (grad) {
        const double dl_di = -(1.0 / uni + inter / (uni * uni)) + 1.0 / c;
        const double dl_da = inter / (uni * uni) - 1.0 / c;
        const double dl_dc = uni / (c * c);
        const double pw = p.x2 - p.x1;
        const double ph = p.y2 - p.y1;
        // d/dx1, d/dy1, d/dx2, d/dy2
        std::array<double, 4> da{-ph, -pw, ph, pw};
        std::array<double, 4> di{0, 0, 0, 0};
        if (overlap) {
            di[0] = p.x1 > g.x1 ? -ih : 0.0;
            di[2] = p.x2 < g.x2 ? ih : 0.0;
            di[1] = p.y1 > g.y1 ? -iw : 0.0;
            di[3] = p.y2 < g.y2 ? iw : 0.0;
        }
        std::array<double, 4> dc{p.x1 < g.x1 ? -ch : 0.0, p.y1 < g.y1 ? -cw : 0.0,
                                 p.x2 > g.x2 ? ch : 0.0, p.y2 > g.y2 ? cw : 0.0};
        for (int k = 0; k < 4; ++k) {
            (*grad)[k] = dl_di * di[k] + dl_da * da[k] + dl_dc * dc[k];
        }
    }
    return loss;
}

double class_cost(const Eigen::MatrixXd &logits, int q, const Eigen::RowVectorXd &tokens,
                  const FocalParams &f) {
    double acc = 0.0;
    int n = 0;
    for (Eigen::Index t = 0; t < tokens.size(); ++t) {
        if (tokens(t) > 0.5) {
            acc += focal_pos(logits(q, t), f) - focal_neg(logits(q, t), f);
            ++n;
        }
    }
    return n == 0 ? 0.0 : acc / n;
}

}  // namespace

double l1_loss(const BoxCxcywh &pred, const BoxCxcywh &gt) {
    double s = 0.0;
    for (int k = 0; k < 4; ++k) s += std::abs(pred[k] - gt[k]);
    return s;
}

double giou(const BoundingBox &a, const BoundingBox &b) {
    validate_box(a);
    validate_box(b);
    return 1.0 - giou_loss_xyxy({a.x_min, a.y_min, a.x_max, a.y_max},
                                {b.x_min, b.y_min, b.x_max, b.y_max}, nullptr);
}

double giou_loss(const BoundingBox &a, const BoundingBox &b) { return 1.0 - giou(a, b); }

double giou_loss(const BoxCxcywh &pred, const BoxCxcywh &gt) {
    const Xyxy p = to_xyxy(pred, std::max(pred[2], kMinBoxSide), std::max(pred[3], kMinBoxSide));
    const Xyxy g = to_xyxy(gt, gt[2], gt[3]);
    if (!(gt[2] > 0 && gt[3] > 0)) {
        throw DomainError("ground-truth box has no area");
    }
    return giou_loss_xyxy(p, g, nullptr);
}

double focal_loss(const Eigen::MatrixXd &logits, const Eigen::MatrixXd &targets, FocalParams params) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
        throw DimensionError("focal_loss: logits and targets differ in shape");
    }
    if (!logits.allFinite()) {
        throw NumericError("focal_loss: non-finite logits");
    }
    if (logits.size() == 0) return 0.0;
    double s = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double x = logits.data()[i];
        s += targets.data()[i] > 0.5 ? focal_pos(x, params) : focal_neg(x, params);
    }
    return s / static_cast<double>(logits.size());
}

Eigen::MatrixXd focal_grad(const Eigen::MatrixXd &logits, const Eigen::MatrixXd &targets, FocalParams params) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
        throw DimensionError("focal_grad: logits and targets differ in shape");
    }
    Eigen::MatrixXd g(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        const double x = logits.data()[i];
        g.data()[i] = targets.data()[i] > 0.5 ? focal_pos_grad(x, params) : focal_neg_grad(x, params);
    }
    return g;
}

Eigen::MatrixXd matching_cost(const DetectionOutput &out, const std::vector<GroundTruth> &gts,
                              const LossWeights &w, FocalParams focal) {
    const int n = out.num_queries();
    Eigen::MatrixXd cost(n, static_cast<Eigen::Index>(gts.size()));
    for (int q = 0; q < n; ++q) {
        const BoxCxcywh pb{out.boxes(q, 0), out.boxes(q, 1), out.boxes(q, 2), out.boxes(q, 3)};
        for (std::size_t g = 0; g < gts.size(); ++g) {
            double c = w.l1 * l1_loss(pb, gts[g].box) + w.giou * giou_loss(pb, gts[g].box);
            if (w.focal != 0.0) c += w.focal * class_cost(out.logits, q, gts[g].tokens, focal);
            cost(q, static_cast<Eigen::Index>(g)) = c;
        }
    }
    return cost;
}

MatchResult assign(const Eigen::MatrixXd &cost) {
    const int m = static_cast<int>(cost.rows());  // queries
    const int n = static_cast<int>(cost.cols());  // ground truths
    if (n > m) {
        throw CapacityError(fmt::format("{} ground truths exceed {} queries", n, m));
    }
    MatchResult r;
    if (n == 0) return r;
    // Potentials-based Hungarian algorithm, rows = ground truths (1-based).
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0), minv(m + 1);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    std::vector<char> used(m + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    for (int j = 1; j <= m; ++j) {
        if (p[j] != 0) {
            r.pairs.emplace_back(j - 1, p[j] - 1);
            r.cost += cost(j - 1, p[j] - 1);
        }
    }
    std::sort(r.pairs.begin(), r.pairs.end(),
              [](const auto &a, const auto &b) { return a.second < b.second; });
    return r;
}

MatchResult match(const DetectionOutput &out, const std::vector<GroundTruth> &gts,
                  const LossWeights &w, FocalParams focal) {
    if (gts.size() > static_cast<std::size_t>(out.num_queries())) {
        throw CapacityError(fmt::format("{} ground truths exceed {} queries", gts.size(), out.num_queries()));
    }
    return assign(matching_cost(out, gts, w, focal));
}

LossResult total_loss(const DetectionOutput &out, const std::vector<GroundTruth> &gts,
                      const LossWeights &w, FocalParams focal) {
    if (w.l1 < 0 || w.giou < 0 || w.focal < 0 || (w.l1 == 0 && w.giou == 0 && w.focal == 0)) {
        throw ConfigError("loss weights must be non-negative with at least one positive");
    }
    if (!out.boxes.allFinite() || !out.logits.allFinite()) {
        throw NumericError("detector output contains non-finite values");
    }
    const int n = out.num_queries();
    const int t = out.num_tokens();
    for (const auto &g : gts) {
        if (g.tokens.size() != t) {
            throw DimensionError("ground-truth token targets do not match the logit width");
        }
    }
    LossResult r;
    r.match = match(out, gts, w, focal);
    r.grad_boxes = Eigen::MatrixXd::Zero(n, 4);
    r.grad_logits = Eigen::MatrixXd::Zero(n, t);

    const double norm = static_cast<double>(std::max<std::size_t>(1, gts.size()));
    Eigen::MatrixXd targets = Eigen::MatrixXd::Zero(n, t);
    for (const auto &[q, g] : r.match.pairs) {
        const GroundTruth &gt = gts[static_cast<std::size_t>(g)];
        targets.row(q) = gt.tokens;
        const BoxCxcywh pb{out.boxes(q, 0), out.boxes(q, 1), out.boxes(q, 2), out.boxes(q, 3)};
        r.l1 += l1_loss(pb, gt.box) / norm;
        for (int k = 0; k < 4; ++k) {
            const double d = pb[k] - gt.box[k];
            r.grad_boxes(q, k) += w.l1 * ((d > 0) - (d < 0)) / norm;
        }
        const bool clamp_w = pb[2] < kMinBoxSide;
        const bool clamp_h = pb[3] < kMinBoxSide;
        r.clamped_boxes += clamp_w || clamp_h;
        const double bw = clamp_w ? kMinBoxSide : pb[2];
        const double bh = clamp_h ? kMinBoxSide : pb[3];
        std::array<double, 4> gx{};
        r.giou += giou_loss_xyxy(to_xyxy(pb, bw, bh), to_xyxy(gt.box, gt.box[2], gt.box[3]), &gx) / norm;
        const double s = w.giou / norm;
        r.grad_boxes(q, 0) += s * (gx[0] + gx[2]);
        r.grad_boxes(q, 1) += s * (gx[1] + gx[3]);
        if (!clamp_w) r.grad_boxes(q, 2) += s * 0.5 * (gx[2] - gx[0]);
        if (!clamp_h) r.grad_boxes(q, 3) += s * 0.5 * (gx[3] - gx[1]);
    }
    r.focal = focal_loss(out.logits, targets, focal);
    if (out.logits.size() > 0) {
        const double s = w.focal / static_cast<double>(out.logits.size());
        for (int q = 0; q < n; ++q) {
            for (int k = 0; k < t; ++k) {
                const double x = out.logits(q, k);
                r.grad_logits(q, k) = s * (targets(q, k) > 0.5 ? focal_pos_grad(x, focal) : focal_neg_grad(x, focal));
            }
        }
    }
    r.total = w.l1 * r.l1 + w.giou * r.giou + w.focal * r.focal;
    return r;
}

}  // namespace usground
