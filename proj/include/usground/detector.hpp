#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usground/dataset.hpp"
#include "usground/detection.hpp"
#include "usground/geometry.hpp"
#include "usground/image.hpp"
#include "usground/nn/lora.hpp"
#include "usground/nn/module.hpp"

namespace usground {

// Word-level vocabulary. Id 0 is <unk>. Synonyms resolve to a canonical word
// before lookup, so paraphrases that differ only by synonyms tokenize
// identically.
class Vocabulary {
public:
    Vocabulary(std::vector<std::string> words, std::map<std::string, std::string> synonyms,
               std::vector<std::string> function_words = {});

    static Vocabulary standard();

    static constexpr int unk_id = 0;
    int size() const { return static_cast<int>(words_.size()); }
    int id(const std::string &word) const;
    const std::string &word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

    // Lowercase, split on whitespace and punctuation, map synonyms, look up.
    // Blank text raises PromptError.
    PromptTokens tokenize(const std::string &text) const;

    // 1 on tokens that name the object (known, non-function words); falls
    // back to every known token when no content word is present.
    Eigen::RowVectorXd positive_tokens(const PromptTokens &tokens) const;

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json &j);

    const std::vector<std::string> &words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
    std::map<std::string, std::string> synonyms_;
    std::vector<std::string> function_words_;
};

// Splits into lowercase alphanumeric runs.
std::vector<std::string> split_words(const std::string &text);

class Detector {
public:
    virtual ~Detector() = default;
    virtual std::string name() const = 0;
    // Input images must be exactly this size.
    virtual ImageSize canvas() const = 0;
    virtual PromptTokens tokenize(const std::string &text) const = 0;
    virtual DetectionOutput detect(const GrayImage &image, const PromptTokens &prompt) const = 0;
    // Identifier of the loaded weights, reported by the service.
    virtual std::string checkpoint_id() const { return {}; }
};

struct ToyDetectorConfig {
    int canvas = 128;
    int patch = 16;
    int d_model = 64;
    int heads = 4;
    int points = 4;  // deformable sampling points per head
    int encoder_layers = 2;
    int decoder_layers = 2;
    int queries = 10;
    int ffn = 256;
    int backbone_width = 256;
    int text_width = 256;
    int text_ffn = 1024;
    int max_tokens = 16;
    double logit_bias = -4.6;
    // Gaussian sigma (pixels) of a smoothed copy of the input that the patch
    // embedding sees next to the raw pixels; 0 drops the copy.
    double input_blur = 2.0;

    // Tiny configuration for finite-difference checks.
    static ToyDetectorConfig micro();

    int grid() const { return canvas / patch; }
    int patch_features() const { return (input_blur > 0.0 ? 2 : 1) * patch * patch; }
    void validate() const;
    nlohmann::json to_json() const;
    static ToyDetectorConfig from_json(const nlohmann::json &j);
};

class ToyDetector final : public Detector {
public:
    explicit ToyDetector(ToyDetectorConfig config = {}, std::uint64_t seed = 0,
                         Vocabulary vocab = Vocabulary::standard());

    struct Output {
        nn::Var boxes;   // N x 4
        nn::Var logits;  // N x T
    };
    struct Graph {
        nn::Var boxes;   // N x 4
        nn::Var logits;  // N x T
        // Encoder proposals, then every decoder layer but the last.
        std::vector<Output> aux;
        nn::Var token_logits;  // grid^2 x T, every image token against the prompt
    };

    // Builds the forward graph on `tape`; gradients reach the parameters
    // through Tape::backward.
    Graph forward(nn::Tape &tape, const GrayImage &image, const PromptTokens &prompt);

    std::string name() const override { return "toy"; }
    ImageSize canvas() const override { return {config_.canvas, config_.canvas}; }
    PromptTokens tokenize(const std::string &text) const override { return vocab_.tokenize(text); }
    DetectionOutput detect(const GrayImage &image, const PromptTokens &prompt) const override;
    std::string checkpoint_id() const override { return checkpoint_id_; }
    void set_checkpoint_id(std::string id) { checkpoint_id_ = std::move(id); }

    const ToyDetectorConfig &config() const { return config_; }
    const Vocabulary &vocabulary() const { return vocab_; }
    nn::Module &module() { return module_; }
    const nn::Module &module() const { return module_; }

    // The standard adapter placement for this architecture.
    nn::InjectionPlan default_plan() const;

    void save(const std::filesystem::path &path, const nlohmann::json &extra = {}) const;
    static ToyDetector load(const std::filesystem::path &path);

private:
    template <typename Self>
    static Graph forward_impl(Self &self, nn::Tape &tape, const GrayImage &image,
                              const PromptTokens &prompt);
    void build(std::uint64_t seed);

    ToyDetectorConfig config_;
    Vocabulary vocab_;
    nn::Module module_;
    nn::Matrix image_pos_;  // fixed 2-D sine encoding, grid^2 x d_model
    std::string checkpoint_id_;
};

// Per-query score = sigmoid(max logit over tokens); keeps scores >=
// threshold, highest first, at most top_k, converted to pixel xyxy on an
// image of `size`.
std::vector<BoundingBox> select_boxes(const DetectionOutput &out, const PromptTokens &prompt,
                                      ImageSize size, double threshold = 0.30, int top_k = 3);

// Highest per-query score, or 0 with no queries.
double best_score(const DetectionOutput &out);

// Detector backends by name. Descriptors are "name" or "name:argument"
// (for "toy" the argument is a checkpoint path).
using DetectorFactory = std::function<std::unique_ptr<Detector>(const std::string &argument)>;
void register_detector_backend(const std::string &name, DetectorFactory factory);
std::vector<std::string> detector_backends();
std::unique_ptr<Detector> make_detector(const std::string &descriptor);

// Safetensors-layout archive of named float64 tensors plus JSON metadata.
void write_tensor_archive(const std::filesystem::path &path, const nn::ParameterStore &params,
                          const nlohmann::json &metadata);
nlohmann::json read_tensor_archive(const std::filesystem::path &path,
                                   std::map<std::string, nn::Matrix> &tensors);

}  // namespace usground
