#pragma once

#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "usground/detection.hpp"
#include "usground/geometry.hpp"

namespace usground {

struct LossWeights {
    double l1 = 5.0;
    double giou = 2.0;
    double focal = 1.0;
};

struct FocalParams {
    double alpha = 0.25;
    double gamma = 2.0;
};

// Predicted widths and heights below this are clamped before GIoU.
inline constexpr double kMinBoxSide = 1e-4;

double l1_loss(const BoxCxcywh &pred, const BoxCxcywh &gt);

// GIoU of two xyxy boxes (any consistent unit).
double giou(const BoundingBox &a, const BoundingBox &b);
double giou_loss(const BoundingBox &a, const BoundingBox &b);
// Normalized cxcywh inputs; the prediction's sides are clamped to kMinBoxSide.
double giou_loss(const BoxCxcywh &pred, const BoxCxcywh &gt);

// Mean of the elementwise focal loss over all N x T entries.
double focal_loss(const Eigen::MatrixXd &logits, const Eigen::MatrixXd &targets,
                  FocalParams params = {});
// Elementwise derivative of the unreduced focal loss.
Eigen::MatrixXd focal_grad(const Eigen::MatrixXd &logits, const Eigen::MatrixXd &targets,
                           FocalParams params = {});

struct GroundTruth {
    BoxCxcywh box{};
    Eigen::RowVectorXd tokens;  // 1 x T, 1 on the object's prompt tokens
};

struct MatchResult {
    std::vector<std::pair<int, int>> pairs;  // (query, ground truth)
    double cost = 0.0;
};

// N x G matching cost (lambda-weighted focal class cost + L1 + GIoU).
Eigen::MatrixXd matching_cost(const DetectionOutput &out, const std::vector<GroundTruth> &gts,
                              const LossWeights &w, FocalParams focal = {});

// Minimum-cost injective assignment of the G columns to N rows of `cost`.
// Throws CapacityError when G > N.
MatchResult assign(const Eigen::MatrixXd &cost);

MatchResult match(const DetectionOutput &out, const std::vector<GroundTruth> &gts,
                  const LossWeights &w, FocalParams focal = {});

struct LossResult {
    double total = 0.0;
    double l1 = 0.0;     // unweighted, normalized by gt count
    double giou = 0.0;   // unweighted, normalized by gt count
    double focal = 0.0;  // unweighted mean over N x T
    int clamped_boxes = 0;
    MatchResult match;
    Eigen::MatrixXd grad_boxes;   // d total / d boxes, N x 4
    Eigen::MatrixXd grad_logits;  // d total / d logits, N x T
};

LossResult total_loss(const DetectionOutput &out, const std::vector<GroundTruth> &gts,
                      const LossWeights &w = {}, FocalParams focal = {});

}  // namespace usground
