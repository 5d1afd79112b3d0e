#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace usground {

// Raw detector output for one image and one prompt.
struct DetectionOutput {
    Eigen::MatrixXd boxes;   // N x 4, normalized (cx, cy, w, h)
    Eigen::MatrixXd logits;  // N x T, query-token dot products

    int num_queries() const { return static_cast<int>(boxes.rows()); }
    int num_tokens() const { return static_cast<int>(logits.cols()); }
};

struct PromptTokens {
    std::string text;
    std::vector<int> ids;
    std::vector<std::string> words;  // canonical word per id (for phrase tags)
};

}  // namespace usground
