#include "usground/detector.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <limits>
#include <fstream>
#include <mutex>
#include <numbers>
#include <random>

#include <fmt/format.h>
#include <opencv2/imgproc.hpp>

#include "usground/errors.hpp"

namespace usground {

using nn::Matrix;
using nn::Tape;
using nn::Var;

// ---- vocabulary ------------------------------------------------------------

std::vector<std::string> split_words(const std::string &text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Vocabulary::Vocabulary(std::vector<std::string> words, std::map<std::string, std::string> synonyms,
                       std::vector<std::string> function_words)
    : words_(std::move(words)), synonyms_(std::move(synonyms)), function_words_(std::move(function_words)) {
    if (words_.empty() || words_[0] != "<unk>") {
        throw ConfigError("vocabulary must start with <unk>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<int>(i)).second) {
            throw ConfigError(fmt::format("duplicate vocabulary word '{}'", words_[i]));
        }
    }
}

Vocabulary Vocabulary::standard() {
    std::vector<std::string> words{
        "<unk>",  "bright", "dark",   "lesion",  "segment", "the",      "a",      "of",
        "in",     "region", "kidney", "cortex",  "capsule", "medulla",  "breast", "thyroid",
        "liver",  "benign", "malignant", "cyst", "organ",   "tissue",   "left",   "right",
        "upper",  "lower",  "round",  "small",   "large",   "shadow",   "band",   "boundary"};
    std::map<std::string, std::string> synonyms{
        {"hyperechoic", "bright"}, {"echogenic", "bright"}, {"white", "bright"},
        {"hypoechoic", "dark"},    {"anechoic", "dark"},    {"black", "dark"},
        {"mass", "lesion"},        {"tumor", "lesion"},     {"tumour", "lesion"},
        {"nodule", "lesion"},      {"spot", "lesion"},      {"renal", "kidney"},
        {"hepatic", "liver"},      {"show", "segment"},     {"find", "segment"},
        {"detect", "segment"},     {"locate", "segment"},   {"an", "a"},
        {"area", "region"}};
    std::vector<std::string> function_words{"segment", "the", "a", "of", "in"};
    return Vocabulary(std::move(words), std::move(synonyms), std::move(function_words));
}

int Vocabulary::id(const std::string &word) const {
    auto it = index_.find(word);
    return it == index_.end() ? unk_id : it->second;
}

PromptTokens Vocabulary::tokenize(const std::string &text) const {
    PromptTokens t;
    t.text = text;
    for (auto &w : split_words(text)) {
        if (auto s = synonyms_.find(w); s != synonyms_.end()) w = s->second;
        const int i = id(w);
        t.ids.push_back(i);
        t.words.push_back(i == unk_id ? std::string("<unk>") : w);
    }
    if (t.ids.empty()) {
        throw PromptError("prompt is empty");
    }
    return t;
}

Eigen::RowVectorXd Vocabulary::positive_tokens(const PromptTokens &tokens) const {
    const auto n = static_cast<Eigen::Index>(tokens.ids.size());
    Eigen::RowVectorXd known = Eigen::RowVectorXd::Zero(n);
    Eigen::RowVectorXd content = Eigen::RowVectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int id = tokens.ids[static_cast<std::size_t>(i)];
        if (id == unk_id) continue;
        known(i) = 1.0;
        const auto &w = word(id);
        if (std::find(function_words_.begin(), function_words_.end(), w) == function_words_.end()) {
            content(i) = 1.0;
        }
    }
    return content.sum() > 0 ? content : known;
}

nlohmann::json Vocabulary::to_json() const {
    return {{"words", words_}, {"synonyms", synonyms_}, {"function_words", function_words_}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json &j) {
    return Vocabulary(j.at("words").get<std::vector<std::string>>(),
                      j.at("synonyms").get<std::map<std::string, std::string>>(),
                      j.value("function_words", std::vector<std::string>{}));
}

// ---- config ----------------------------------------------------------------

ToyDetectorConfig ToyDetectorConfig::micro() {
    ToyDetectorConfig c;
    c.canvas = 32;
    c.patch = 8;
    c.d_model = 8;
    c.heads = 2;
    c.points = 2;
    c.encoder_layers = 1;
    c.decoder_layers = 2;
    c.queries = 3;
    c.ffn = 16;
    c.backbone_width = 16;
    c.text_width = 8;
    c.text_ffn = 16;
    c.max_tokens = 8;
    c.logit_bias = -1.0;
    c.input_blur = 0.0;
    return c;
}

void ToyDetectorConfig::validate() const {
    const bool ok = canvas > 0 && patch > 0 && canvas % patch == 0 && d_model > 0 && heads > 0 &&
                    d_model % heads == 0 && text_width % heads == 0 && points > 0 &&
                    encoder_layers >= 0 && decoder_layers >= 1 && queries >= 1 && ffn > 0 &&
                    backbone_width > 0 && text_width > 0 && text_ffn > 0 && max_tokens > 0 && input_blur >= 0.0 &&
                    d_model % 2 == 0 && (d_model / 2) % 2 == 0 &&
                    queries <= (canvas / patch) * (canvas / patch);
    if (!ok) {
        throw ConfigError("invalid toy detector config: " + to_json().dump());
    }
}

nlohmann::json ToyDetectorConfig::to_json() const {
    return {{"canvas", canvas},
            {"patch", patch},
            {"d_model", d_model},
            {"heads", heads},
            {"points", points},
            {"encoder_layers", encoder_layers},
            {"decoder_layers", decoder_layers},
            {"queries", queries},
            {"ffn", ffn},
            {"backbone_width", backbone_width},
            {"text_width", text_width},
            {"text_ffn", text_ffn},
            {"max_tokens", max_tokens},
            {"logit_bias", logit_bias},
            {"input_blur", input_blur}};
}

ToyDetectorConfig ToyDetectorConfig::from_json(const nlohmann::json &j) {
    ToyDetectorConfig c;
    c.canvas = j.at("canvas");
    c.patch = j.at("patch");
    c.d_model = j.at("d_model");
    c.heads = j.at("heads");
    c.points = j.at("points");
    c.encoder_layers = j.at("encoder_layers");
    c.decoder_layers = j.at("decoder_layers");
    c.queries = j.at("queries");
    c.ffn = j.at("ffn");
    c.backbone_width = j.at("backbone_width");
    c.text_width = j.at("text_width");
    c.text_ffn = j.at("text_ffn");
    c.max_tokens = j.at("max_tokens");
    c.logit_bias = j.at("logit_bias");
    c.input_blur = j.value("input_blur", 0.0);
    c.validate();
    return c;
}

// ---- toy detector ----------------------------------------------------------

namespace {

constexpr double kImageMean = 0.4;
constexpr double kImageStd = 0.25;
constexpr double kMaskedLogit = -20.0;

Matrix normal_matrix(int rows, int cols, double stddev, std::mt19937_64 &rng) {
    std::normal_distribution<double> n(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

void add_norm(nn::Module &m, const std::string &name, int d) {
    m.add_param(name + ".gamma", Matrix::Ones(1, d));
    m.add_param(name + ".beta", Matrix::Zero(1, d));
}

void add_attention(nn::Module &m, const std::string &prefix, int d, std::mt19937_64 &rng) {
    for (const char *p : {"q_proj", "k_proj", "v_proj", "out_proj"}) {
        m.add_linear(prefix + "." + p, d, d, rng);
    }
}

void add_ffn(nn::Module &m, const std::string &prefix, int d, int hidden, std::mt19937_64 &rng) {
    m.add_linear(prefix + ".fc1", d, hidden, rng);
    m.add_linear(prefix + ".fc2", hidden, d, rng);
}

template <typename M>
Var norm(M &m, Tape &t, const std::string &name, Var x) {
    return nn::layer_norm(x, m.param(t, name + ".gamma"), m.param(t, name + ".beta"));
}

template <typename M>
Var attention(M &m, Tape &t, const std::string &prefix, Var q, Var k, Var v, int heads) {
    Var qp = m.linear(t, prefix + ".q_proj", q);
    Var kp = m.linear(t, prefix + ".k_proj", k);
    Var vp = m.linear(t, prefix + ".v_proj", v);
    return m.linear(t, prefix + ".out_proj", nn::multi_head_attention(qp, kp, vp, heads));
}

template <typename M>
Var ffn(M &m, Tape &t, const std::string &prefix, Var x) {
    return m.linear(t, prefix + ".fc2", nn::relu(m.linear(t, prefix + ".fc1", x)));
}

// Indices of `n` rows of `sim` (one row per grid token), greedily by their
// maximum over known-token columns; a pick suppresses its 4-neighbours
// until no unsuppressed row is left. Ties go to the lower index.
std::vector<int> select_tokens(const Matrix &sim, const std::vector<int> &ids, int n, int grid) {
    std::vector<std::pair<double, int>> best;
    for (Eigen::Index r = 0; r < sim.rows(); ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (Eigen::Index col = 0; col < sim.cols(); ++col) {
            if (ids[static_cast<std::size_t>(col)] != Vocabulary::unk_id) m = std::max(m, sim(r, col));
        }
        best.emplace_back(m, static_cast<int>(r));
    }
    std::stable_sort(best.begin(), best.end(), [](const auto &a, const auto &b) { return a.first > b.first; });
    std::vector<char> taken(best.size(), 0), blocked(best.size(), 0);
    std::vector<int> out;
    for (int pass = 0; pass < 2 && static_cast<int>(out.size()) < n; ++pass) {
        for (const auto &[score, i] : best) {
            if (static_cast<int>(out.size()) == n) break;
            if (taken[i] || (pass == 0 && blocked[i])) continue;
            taken[i] = 1;
            out.push_back(i);
            const int r = i / grid, c = i % grid;
            if (r > 0) blocked[i - grid] = 1;
            if (r + 1 < grid) blocked[i + grid] = 1;
            if (c > 0) blocked[i - 1] = 1;
            if (c + 1 < grid) blocked[i + 1] = 1;
        }
    }
    return out;
}

// Sine features of fixed positions; same layout as nn::sine_embed.
Matrix sine_table(const Matrix &pos, int dims) {
    Tape t;
    return nn::sine_embed(t.constant(pos), dims).value();
}

}  // namespace

ToyDetector::ToyDetector(ToyDetectorConfig config, std::uint64_t seed, Vocabulary vocab)
    : config_(config), vocab_(std::move(vocab)) {
    config_.validate();
    build(seed);
}

void ToyDetector::build(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto &c = config_;
    const int d = c.d_model;
    auto &m = module_;

    m.add_linear("backbone.patch_embed", c.patch_features(), c.backbone_width, rng);
    m.add_linear("input_proj", c.backbone_width, d, rng);
    add_norm(m, "input_norm", d);

    m.add_param("text.embed", normal_matrix(vocab_.size(), c.text_width, 1.0, rng));
    m.add_param("text.pos_embed", normal_matrix(c.max_tokens, c.text_width, 0.02, rng));
    add_norm(m, "text.embed_norm", c.text_width);
    add_attention(m, "text.attn", c.text_width, rng);
    add_norm(m, "text.norm1", c.text_width);
    add_ffn(m, "text.ffn", c.text_width, c.text_ffn, rng);
    add_norm(m, "text.norm2", c.text_width);
    m.add_linear("feat_map", c.text_width, d, rng);

    for (int l = 0; l < c.encoder_layers; ++l) {
        const std::string p = fmt::format("enc.{}", l);
        for (const char *name : {"v_proj", "l_proj", "values_v_proj", "values_l_proj", "out_v_proj", "out_l_proj"}) {
            m.add_linear(p + ".fusion." + name, d, d, rng);
        }
        add_norm(m, p + ".fusion.norm_v", d);
        add_norm(m, p + ".fusion.norm_l", d);
        add_attention(m, p + ".text_attn", d, rng);
        add_norm(m, p + ".text_norm1", d);
        add_ffn(m, p + ".text_ffn", d, c.ffn, rng);
        add_norm(m, p + ".text_norm2", d);
        add_attention(m, p + ".img_attn", d, rng);
        add_norm(m, p + ".img_norm1", d);
        add_ffn(m, p + ".ffn", d, c.ffn, rng);
        add_norm(m, p + ".img_norm2", d);
    }

    m.add_param("query_content", normal_matrix(c.queries, d, 1.0, rng));
    // Reference width/height (pre-sigmoid), shared by all queries; centers
    // come from the selected image tokens.
    m.add_param("ref_size", Matrix::Constant(1, 2, std::log(0.2 / 0.8)));
    m.add_linear("dec.ref_point_head.0", 2 * d, d, rng);
    m.add_linear("dec.ref_point_head.1", d, d, rng);

    const int hp = c.heads * c.points;
    for (int l = 0; l < c.decoder_layers; ++l) {
        const std::string p = fmt::format("dec.{}", l);
        add_attention(m, p + ".self_attn", d, rng);
        add_norm(m, p + ".norm1", d);
        add_attention(m, p + ".text_attn", d, rng);
        add_norm(m, p + ".norm2", d);
        m.add_linear(p + ".value_proj", d, d, rng);
        m.add_linear(p + ".sampling_offsets", d, hp * 2, rng);
        m.params().at(p + ".sampling_offsets.weight").value.setZero();
        Matrix &ob = m.params().at(p + ".sampling_offsets.bias").value;
        for (int h = 0; h < c.heads; ++h) {
            const double th = 2.0 * std::numbers::pi * h / c.heads;
            const double cx = std::cos(th);
            const double cy = std::sin(th);
            const double s = std::max(std::abs(cx), std::abs(cy));
            for (int k = 0; k < c.points; ++k) {
                ob(0, 2 * (h * c.points + k)) = (k + 1) * cx / s;
                ob(0, 2 * (h * c.points + k) + 1) = (k + 1) * cy / s;
            }
        }
        m.add_linear(p + ".attention_weights", d, hp, rng);
        m.params().at(p + ".attention_weights.weight").value.setZero();
        m.add_linear(p + ".output_proj", d, d, rng);
        add_norm(m, p + ".norm3", d);
        add_ffn(m, p + ".ffn", d, c.ffn, rng);
        add_norm(m, p + ".norm4", d);
    }
    m.add_linear("enc_bbox_head.0", d, d, rng);
    m.add_linear("enc_bbox_head.1", d, d, rng);
    m.add_linear("enc_bbox_head.2", d, 4, rng);
    m.params().at("enc_bbox_head.2.weight").value.setZero();
    m.add_linear("bbox_head.0", d, d, rng);
    m.add_linear("bbox_head.1", d, d, rng);
    m.add_linear("bbox_head.2", d, 4, rng);
    m.params().at("bbox_head.2.weight").value.setZero();
    m.add_param("logit_bias", Matrix::Constant(1, 1, c.logit_bias));

    const int g = c.grid();
    Matrix centers(g * g, 2);
    for (int r = 0; r < g; ++r) {
        for (int col = 0; col < g; ++col) {
            centers(r * g + col, 0) = (col + 0.5) / g;
            centers(r * g + col, 1) = (r + 0.5) / g;
        }
    }
    image_pos_ = sine_table(centers, d / 2);
}

template <typename Self>
ToyDetector::Graph ToyDetector::forward_impl(Self &self, Tape &t, const GrayImage &image,
                                             const PromptTokens &prompt) {
    const auto &c = self.config_;
    auto &m = self.module_;
    if (image.height() != c.canvas || image.width() != c.canvas) {
        throw DimensionError(fmt::format("detector expects {}x{} input, got {}x{}", c.canvas, c.canvas,
                                         image.height(), image.width()));
    }
    if (prompt.ids.empty()) {
        throw PromptError("prompt has no tokens");
    }
    if (static_cast<int>(prompt.ids.size()) > c.max_tokens) {
        throw PromptError(fmt::format("prompt has {} tokens, limit is {}", prompt.ids.size(), c.max_tokens));
    }
    for (int id : prompt.ids) {
        if (id < 0 || id >= self.vocab_.size()) {
            throw PromptError(fmt::format("token id {} outside the vocabulary", id));
        }
    }
    const int g = c.grid();
    const int pd = c.patch * c.patch;
    const int tokens = static_cast<int>(prompt.ids.size());

    // Image tokens.
    cv::Mat smooth;
    if (c.input_blur > 0.0) {
        const cv::Mat raw(c.canvas, c.canvas, CV_32F, const_cast<float *>(image.pixels().data()));
        cv::GaussianBlur(raw, smooth, cv::Size(0, 0), c.input_blur, c.input_blur, cv::BORDER_REFLECT);
    }
    Matrix patches(g * g, c.patch_features());
    for (int pr = 0; pr < g; ++pr) {
        for (int pc = 0; pc < g; ++pc) {
            for (int r = 0; r < c.patch; ++r) {
                for (int col = 0; col < c.patch; ++col) {
                    const int y = pr * c.patch + r;
                    const int x0 = pc * c.patch + col;
                    patches(pr * g + pc, r * c.patch + col) = (image.at(y, x0) - kImageMean) / kImageStd;
                    if (!smooth.empty()) {
                        patches(pr * g + pc, pd + r * c.patch + col) = (smooth.at<float>(y, x0) - kImageMean) / kImageStd;
                    }
                }
            }
        }
    }
    Var x = nn::relu(m.linear(t, "backbone.patch_embed", t.constant(std::move(patches))));
    x = norm(m, t, "input_norm", m.linear(t, "input_proj", x));
    const Var pos = t.constant(self.image_pos_);

    // Text tokens.
    std::vector<int> positions(static_cast<std::size_t>(tokens));
    for (int i = 0; i < tokens; ++i) positions[static_cast<std::size_t>(i)] = i;
    Var e = nn::add(nn::gather_rows(m.param(t, "text.embed"), prompt.ids),
                    nn::gather_rows(m.param(t, "text.pos_embed"), positions));
    e = norm(m, t, "text.embed_norm", e);
    e = norm(m, t, "text.norm1", nn::add(e, attention(m, t, "text.attn", e, e, e, c.heads)));
    e = norm(m, t, "text.norm2", nn::add(e, ffn(m, t, "text.ffn", e)));
    Var txt = m.linear(t, "feat_map", e);

    // Feature enhancer.
    for (int l = 0; l < c.encoder_layers; ++l) {
        const std::string p = fmt::format("enc.{}", l);
        Var vq = m.linear(t, p + ".fusion.v_proj", x);
        Var lk = m.linear(t, p + ".fusion.l_proj", txt);
        Var vv = m.linear(t, p + ".fusion.values_v_proj", x);
        Var lv = m.linear(t, p + ".fusion.values_l_proj", txt);
        Var dx = m.linear(t, p + ".fusion.out_v_proj", nn::multi_head_attention(vq, lk, lv, c.heads));
        Var dt = m.linear(t, p + ".fusion.out_l_proj", nn::multi_head_attention(lk, vq, vv, c.heads));
        x = norm(m, t, p + ".fusion.norm_v", nn::add(x, dx));
        txt = norm(m, t, p + ".fusion.norm_l", nn::add(txt, dt));

        txt = norm(m, t, p + ".text_norm1", nn::add(txt, attention(m, t, p + ".text_attn", txt, txt, txt, c.heads)));
        txt = norm(m, t, p + ".text_norm2", nn::add(txt, ffn(m, t, p + ".text_ffn", txt)));

        Var xq = nn::add(x, pos);
        x = norm(m, t, p + ".img_norm1", nn::add(x, attention(m, t, p + ".img_attn", xq, xq, x, c.heads)));
        x = norm(m, t, p + ".img_norm2", nn::add(x, ffn(m, t, p + ".ffn", x)));
    }

    // Language-guided query selection: image tokens most similar to any
    // known prompt token become proposals, whose boxes seed the decoder and
    // whose similarity rows join the final logits.
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(c.d_model));
    Var sim = nn::scale(nn::matmul_nt(x, txt), inv_sqrt_d);
    std::vector<int> chosen = select_tokens(sim.value(), prompt.ids, c.queries, g);
    Var chosen_sim = nn::gather_rows(sim, chosen);
    Matrix centers(c.queries, 2);
    for (int k = 0; k < c.queries; ++k) {
        const int i = chosen[static_cast<std::size_t>(k)];
        centers(k, 0) = std::log(((i % g) + 0.5) / (g - (i % g) - 0.5));
        centers(k, 1) = std::log(((i / g) + 0.5) / (g - (i / g) - 0.5));
    }
    Var size = nn::matmul(t.constant(Matrix::Ones(c.queries, 1)), m.param(t, "ref_size"));
    const Var ref_parts[] = {t.constant(std::move(centers)), size};
    Var picked = nn::gather_rows(x, chosen);
    Var enc_delta = m.linear(
        t, "enc_bbox_head.2",
        nn::relu(m.linear(t, "enc_bbox_head.1", nn::relu(m.linear(t, "enc_bbox_head.0", picked)))));
    Var proposals = nn::sigmoid(nn::add(nn::concat_cols(ref_parts), enc_delta));

    Var bias = nn::matmul(nn::matmul(t.constant(Matrix::Ones(c.queries, 1)), m.param(t, "logit_bias")),
                          t.constant(Matrix::Ones(1, tokens)));
    Matrix keep = Matrix::Ones(c.queries, tokens);
    Matrix fill = Matrix::Zero(c.queries, tokens);
    bool any_unk = false;
    for (int i = 0; i < tokens; ++i) {
        if (prompt.ids[static_cast<std::size_t>(i)] == Vocabulary::unk_id) {
            keep.col(i).setZero();
            fill.col(i).setConstant(kMaskedLogit);
            any_unk = true;
        }
    }
    const Var keep_v = t.constant(std::move(keep));
    const Var fill_v = t.constant(std::move(fill));
    auto finish = [&](Var raw) {
        Var l = nn::add(raw, bias);
        return any_unk ? nn::add(nn::mul(l, keep_v), fill_v) : l;
    };

    Graph out;
    out.aux.push_back({proposals, finish(chosen_sim)});
    {
        Var tb = nn::matmul(nn::matmul(t.constant(Matrix::Ones(g * g, 1)), m.param(t, "logit_bias")),
                            t.constant(Matrix::Ones(1, tokens)));
        out.token_logits = nn::add(sim, tb);
    }
    Var ref = proposals;
    Var q = m.param(t, "query_content");
    for (int l = 0; l < c.decoder_layers; ++l) {
        const std::string p = fmt::format("dec.{}", l);
        Var qpos = m.linear(t, "dec.ref_point_head.1",
                            nn::relu(m.linear(t, "dec.ref_point_head.0", nn::sine_embed(ref, c.d_model / 2))));
        Var qq = nn::add(q, qpos);
        q = norm(m, t, p + ".norm1", nn::add(q, attention(m, t, p + ".self_attn", qq, qq, q, c.heads)));
        qq = nn::add(q, qpos);
        q = norm(m, t, p + ".norm2", nn::add(q, attention(m, t, p + ".text_attn", qq, txt, txt, c.heads)));
        qq = nn::add(q, qpos);
        Var value = m.linear(t, p + ".value_proj", x);
        Var offsets = m.linear(t, p + ".sampling_offsets", qq);
        Var weights = nn::softmax_groups(m.linear(t, p + ".attention_weights", qq), c.points);
        Var loc = nn::reference_locations(ref, offsets, c.heads, c.points);
        Var sampled = nn::deformable_sample(value, loc, weights, g, g, c.heads, c.points);
        q = norm(m, t, p + ".norm3", nn::add(q, m.linear(t, p + ".output_proj", sampled)));
        q = norm(m, t, p + ".norm4", nn::add(q, ffn(m, t, p + ".ffn", q)));

        Var delta = m.linear(t, "bbox_head.2",
                             nn::relu(m.linear(t, "bbox_head.1", nn::relu(m.linear(t, "bbox_head.0", q)))));
        ref = nn::sigmoid(nn::add(nn::inverse_sigmoid(ref), delta));
        Var logits = finish(nn::add(nn::scale(nn::matmul_nt(q, txt), inv_sqrt_d), chosen_sim));
        if (l + 1 < c.decoder_layers) {
            out.aux.push_back({ref, logits});
        } else {
            out.boxes = ref;
            out.logits = logits;
        }
    }
    return out;
}

ToyDetector::Graph ToyDetector::forward(Tape &tape, const GrayImage &image, const PromptTokens &prompt) {
    return forward_impl(*this, tape, image, prompt);
}

DetectionOutput ToyDetector::detect(const GrayImage &image, const PromptTokens &prompt) const {
    Tape tape;
    const Graph g = forward_impl(*this, tape, image, prompt);
    return {g.boxes.value(), g.logits.value()};
}

nn::InjectionPlan ToyDetector::default_plan() const {
    nn::InjectionPlan plan;
    auto &a = plan.adapter_targets;
    for (int l = 0; l < config_.encoder_layers; ++l) {
        const std::string p = fmt::format("enc.{}", l);
        for (const char *name : {"v_proj", "l_proj", "values_v_proj", "values_l_proj", "out_v_proj", "out_l_proj"}) {
            a.insert(p + ".fusion." + name);
        }
        a.insert(p + ".ffn.fc1");
        a.insert(p + ".ffn.fc2");
        a.insert(p + ".text_ffn.fc1");
        a.insert(p + ".text_ffn.fc2");
    }
    for (int l = 0; l < config_.decoder_layers; ++l) {
        const std::string p = fmt::format("dec.{}", l);
        for (const char *name : {"sampling_offsets", "attention_weights", "value_proj", "output_proj",
                                 "text_attn.q_proj", "text_attn.k_proj", "text_attn.v_proj", "text_attn.out_proj"}) {
            a.insert(p + "." + name);
        }
    }
    a.insert("text.attn.out_proj");
    a.insert("text.ffn.fc1");
    a.insert("text.ffn.fc2");
    a.insert("feat_map");
    plan.fully_trainable.insert("bbox_head");
    plan.fully_trainable.insert("enc_bbox_head");
    return plan;
}

// ---- selection -------------------------------------------------------------

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double best_score(const DetectionOutput &out) {
    if (out.logits.rows() == 0 || out.logits.cols() == 0) return 0.0;
    return sigmoid(out.logits.maxCoeff());
}

std::vector<BoundingBox> select_boxes(const DetectionOutput &out, const PromptTokens &prompt,
                                      ImageSize size, double threshold, int top_k) {
    if (!(threshold > 0.0 && threshold <= 1.0)) {
        throw DomainError(fmt::format("selection threshold {} outside (0, 1]", threshold));
    }
    std::vector<std::pair<double, int>> scored;
    for (int q = 0; q < out.num_queries(); ++q) {
        if (out.num_tokens() == 0) break;
        const double s = sigmoid(out.logits.row(q).maxCoeff());
        if (s >= threshold) scored.emplace_back(s, q);
    }
    std::stable_sort(scored.begin(), scored.end(), [](const auto &a, const auto &b) { return a.first > b.first; });
    if (top_k >= 0 && static_cast<int>(scored.size()) > top_k) scored.resize(static_cast<std::size_t>(top_k));
    std::vector<BoundingBox> boxes;
    for (const auto &[s, q] : scored) {
        BoundingBox b = from_cxcywh({out.boxes(q, 0), out.boxes(q, 1), out.boxes(q, 2), out.boxes(q, 3)},
                                    size.width, size.height);
        b.x_min = std::clamp(b.x_min, 0.0, static_cast<double>(size.width));
        b.x_max = std::clamp(b.x_max, 0.0, static_cast<double>(size.width));
        b.y_min = std::clamp(b.y_min, 0.0, static_cast<double>(size.height));
        b.y_max = std::clamp(b.y_max, 0.0, static_cast<double>(size.height));
        if (b.is_degenerate()) continue;
        b.score = s;
        b.phrase = prompt.text;
        boxes.push_back(std::move(b));
    }
    return boxes;
}

// ---- backend registry ------------------------------------------------------

namespace {

struct Registry {
    std::mutex mu;
    std::map<std::string, DetectorFactory> factories;
};

Registry &registry() {
    static Registry r;
    static std::once_flag once;
    std::call_once(once, [] {
        r.factories["toy"] = [](const std::string &arg) -> std::unique_ptr<Detector> {
            if (arg.empty()) return std::make_unique<ToyDetector>();
            return std::make_unique<ToyDetector>(ToyDetector::load(arg));
        };
    });
    return r;
}

}  // namespace

void register_detector_backend(const std::string &name, DetectorFactory factory) {
    auto &r = registry();
    std::lock_guard lock(r.mu);
    r.factories[name] = std::move(factory);
}

std::vector<std::string> detector_backends() {
    auto &r = registry();
    std::lock_guard lock(r.mu);
    std::vector<std::string> out;
    for (const auto &[k, v] : r.factories) out.push_back(k);
    return out;
}

std::unique_ptr<Detector> make_detector(const std::string &descriptor) {
    const auto colon = descriptor.find(':');
    const std::string name = descriptor.substr(0, colon);
    const std::string arg = colon == std::string::npos ? std::string() : descriptor.substr(colon + 1);
    DetectorFactory f;
    {
        auto &r = registry();
        std::lock_guard lock(r.mu);
        auto it = r.factories.find(name);
        if (it == r.factories.end()) {
            std::vector<std::string> names;
            for (const auto &[k, v] : r.factories) names.push_back(k);
            throw BackendError(fmt::format("unknown detector backend '{}'; available: {}", name,
                                           fmt::join(names, ", ")));
        }
        f = it->second;
    }
    try {
        return f(arg);
    } catch (const BackendError &) {
        throw;
    } catch (const std::exception &e) {
        throw BackendError(fmt::format("cannot load backend '{}': {}", descriptor, e.what()));
    }
}

// ---- checkpoints -----------------------------------------------------------

void write_tensor_archive(const std::filesystem::path &path, const nn::ParameterStore &params,
                          const nlohmann::json &metadata) {
    nlohmann::json header = nlohmann::json::object();
    header["__metadata__"] = {{"usground", metadata.dump()}};
    std::size_t offset = 0;
    for (const auto *p : params.all()) {
        const std::size_t bytes = p->numel() * sizeof(double);
        header[p->name] = {{"dtype", "F64"},
                           {"shape", {p->value.rows(), p->value.cols()}},
                           {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    std::string text = header.dump();
    while (text.size() % 8 != 0) text.push_back(' ');
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    const std::uint64_t n = text.size();
    unsigned char len[8];
    for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>((n >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char *>(len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto *p : params.all()) {
        const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = p->value;
        out.write(reinterpret_cast<const char *>(rm.data()),
                  static_cast<std::streamsize>(rm.size() * sizeof(double)));
    }
    if (!out) throw IoError(fmt::format("short write to {}", path.string()));
}

nlohmann::json read_tensor_archive(const std::filesystem::path &path, std::map<std::string, Matrix> &tensors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(fmt::format("cannot open checkpoint {}", path.string()));
    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() < 8) throw CheckpointError("checkpoint truncated");
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[i])) << (8 * i);
    if (8 + n > blob.size()) throw CheckpointError("checkpoint header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(8, n));
    } catch (const nlohmann::json::exception &e) {
        throw CheckpointError(fmt::format("bad checkpoint header: {}", e.what()));
    }
    const std::size_t base = 8 + n;
    nlohmann::json meta;
    for (const auto &[name, info] : header.items()) {
        if (name == "__metadata__") {
            meta = nlohmann::json::parse(info.at("usground").get<std::string>());
            continue;
        }
        if (info.at("dtype") != "F64") throw CheckpointError(fmt::format("tensor '{}' is not F64", name));
        const auto rows = info.at("shape")[0].get<Eigen::Index>();
        const auto cols = info.at("shape")[1].get<Eigen::Index>();
        const auto b = info.at("data_offsets")[0].get<std::size_t>();
        const auto e = info.at("data_offsets")[1].get<std::size_t>();
        if (e - b != static_cast<std::size_t>(rows * cols) * sizeof(double) || base + e > blob.size()) {
            throw CheckpointError(fmt::format("tensor '{}' has inconsistent extents", name));
        }
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
        std::memcpy(rm.data(), blob.data() + base + b, e - b);
        tensors[name] = rm;
    }
    return meta;
}

void ToyDetector::save(const std::filesystem::path &path, const nlohmann::json &extra) const {
    nlohmann::json meta;
    meta["format"] = "usground-toy-detector/1";
    meta["config"] = config_.to_json();
    meta["vocabulary"] = vocab_.to_json();
    meta["merged"] = module_.merged();
    nlohmann::json adapters = nlohmann::json::object();
    for (const auto &[target, info] : module_.adapters()) {
        adapters[target] = {{"rank", info.rank}, {"alpha", info.alpha}};
    }
    meta["adapters"] = adapters;
    nlohmann::json roles = nlohmann::json::object();
    for (const auto *p : module_.params().all()) roles[p->name] = nn::to_string(p->role);
    meta["roles"] = roles;
    if (!extra.is_null()) meta["extra"] = extra;
    write_tensor_archive(path, module_.params(), meta);
}

ToyDetector ToyDetector::load(const std::filesystem::path &path) {
    std::map<std::string, Matrix> tensors;
    const nlohmann::json meta = read_tensor_archive(path, tensors);
    if (meta.value("format", "") != "usground-toy-detector/1") {
        throw CheckpointError(fmt::format("{} is not a toy detector checkpoint", path.string()));
    }
    ToyDetector det(ToyDetectorConfig::from_json(meta.at("config")), 0,
                    Vocabulary::from_json(meta.at("vocabulary")));
    auto &m = det.module_;
    for (const auto &[target, info] : meta.at("adapters").items()) {
        auto a = tensors.find(target + ".lora_A");
        auto b = tensors.find(target + ".lora_B");
        if (a == tensors.end() || b == tensors.end()) {
            throw CheckpointError(fmt::format("adapter tensors for '{}' missing", target));
        }
        m.attach_adapter(target, {info.at("rank").get<int>(), info.at("alpha").get<double>()}, a->second, b->second);
    }
    for (auto *p : m.params().all()) {
        auto it = tensors.find(p->name);
        if (it == tensors.end()) {
            throw CheckpointError(fmt::format("tensor '{}' missing from checkpoint", p->name));
        }
        if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
            throw CheckpointError(fmt::format("tensor '{}' has the wrong shape", p->name));
        }
        p->value = it->second;
        const std::string role = meta.at("roles").value(p->name, "frozen");
        p->role = role == "adapter" ? nn::ParamRole::adapter
                  : role == "trainable" ? nn::ParamRole::trainable
                                        : nn::ParamRole::frozen;
    }
    if (tensors.size() != m.params().size()) {
        throw CheckpointError("checkpoint holds tensors this architecture does not define");
    }
    m.set_merged(meta.value("merged", false));
    det.checkpoint_id_ = path.filename().string();
    return det;
}

}  // namespace usground
