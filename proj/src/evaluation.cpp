#include "usground/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "usground/errors.hpp"

namespace usground {

MeanStd mean_std(const std::vector<double> &values) {
    MeanStd r;
    if (values.empty()) return r;
    double s = 0.0;
    for (double v : values) s += v;
    r.mean = s / static_cast<double>(values.size());
    double q = 0.0;
    for (double v : values) q += (v - r.mean) * (v - r.mean);
    r.std = std::sqrt(q / static_cast<double>(values.size()));
    return r;
}

std::string format_compact(double mean_percent, double std_percent) {
    return fmt::format("{:.2f}±{:.0f}", mean_percent, std_percent);
}

std::string format_full(double mean_percent, double std_percent) {
    return fmt::format("{:.2f}±{:.2f}", mean_percent, std_percent);
}

std::vector<ReportRow> aggregate(const std::vector<SampleScore> &scores,
                                 const std::function<std::string(const SampleScore &)> &key) {
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (const auto &s : scores) {
        const std::string k = key(s);
        if (!groups.count(k)) order.push_back(k);
        groups[k].first.push_back(s.dsc);
        groups[k].second.push_back(s.iou);
    }
    std::vector<ReportRow> rows;
    for (const auto &k : order) {
        const auto &[d, i] = groups[k];
        rows.push_back({k, d.size(), mean_std(d), mean_std(i)});
    }
    if (order.size() > 1) {
        std::vector<double> d, i;
        for (const auto &s : scores) {
            d.push_back(s.dsc);
            i.push_back(s.iou);
        }
        rows.push_back({"all", d.size(), mean_std(d), mean_std(i)});
    }
    return rows;
}

namespace {

nlohmann::json row_json(const ReportRow &r) {
    return {{"key", r.key},
            {"count", r.count},
            {"dsc", {{"mean", 100.0 * r.dsc.mean}, {"std", 100.0 * r.dsc.std}, {"text", format_compact(100.0 * r.dsc.mean, 100.0 * r.dsc.std)}}},
            {"iou", {{"mean", 100.0 * r.iou.mean}, {"std", 100.0 * r.iou.std}, {"text", format_compact(100.0 * r.iou.mean, 100.0 * r.iou.std)}}}};
}

nlohmann::json score_json(const SampleScore &s) {
    return {{"dataset", s.dataset},  {"prompt", s.prompt},         {"record", s.record_index}, {"dsc", s.dsc},
            {"iou", s.iou},          {"detected", s.detected},     {"best_score", s.best_score}};
}

std::string render_rows(const std::string &title, const std::vector<ReportRow> &rows) {
    std::size_t w = title.size();
    for (const auto &r : rows) w = std::max(w, r.key.size());
    std::string out = fmt::format("{:<{}}  {:>6}  {:>10}  {:>10}\n", title, w, "n", "DSC (%)", "IoU (%)");
    for (const auto &r : rows) {
        out += fmt::format("{:<{}}  {:>6}  {:>10}  {:>10}\n", r.key, w, r.count,
                           format_compact(100.0 * r.dsc.mean, 100.0 * r.dsc.std),
                           format_compact(100.0 * r.iou.mean, 100.0 * r.iou.std));
    }
    return out;
}

SampleScore score_sample(const Pipeline &pipeline, const Sample &s, const std::string &prompt,
                         const PipelineOptions &options) {
    SampleScore sc;
    sc.dataset = s.dataset;
    sc.prompt = prompt;
    sc.record_index = s.record_index;
    const PipelineResult r = pipeline.run(s.image, prompt, options);
    sc.detected = r.detected;
    sc.best_score = r.best_score;
    sc.dsc = dsc(r.mask, s.mask);
    sc.iou = iou(r.mask, s.mask);
    return sc;
}

std::vector<Sample> collect(const std::vector<DatasetManifest> &manifests, const EvalOptions &o) {
    std::vector<Sample> samples;
    for (const auto &m : manifests) {
        std::optional<Split> which = o.split;
        if (!which && m.is_split()) which = Split::test;
        auto part = ingest_all(m, o.target, which);
        for (auto &s : part) samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto &r : rows) j["rows"].push_back(row_json(r));
    j["samples"] = nlohmann::json::array();
    for (const auto &s : samples) j["samples"].push_back(score_json(s));
    if (runtime) {
        j["runtime"] = {{"runs", runtime->runs},
                        {"invocations", runtime->invocations},
                        {"mean_s", runtime->mean_s},
                        {"std_s", runtime->std_s},
                        {"per_run_s", runtime->per_run_s},
                        {"reference_s", runtime->reference_s}};
    }
    j["table"] = table();
    return j;
}

std::string EvalReport::table() const {
    std::string out = render_rows("dataset", rows);
    if (runtime) {
        out += fmt::format("runtime: {:.4f} s/image over {} runs (reference {:.2f} s)\n", runtime->mean_s,
                           runtime->runs, runtime->reference_s);
    }
    return out;
}

std::string EvalReport::samples_jsonl() const {
    std::string out;
    for (const auto &s : samples) {
        out += score_json(s).dump();
        out += '\n';
    }
    return out;
}

EvalReport evaluate_samples(const Pipeline &pipeline, const std::vector<Sample> &samples, const EvalOptions &options) {
    if (samples.empty()) {
        throw EvaluationError("no samples to evaluate");
    }
    EvalReport rep;
    for (const auto &s : samples) {
        rep.samples.push_back(score_sample(pipeline, s, options.prompt.value_or(s.prompt), options.pipeline));
    }
    rep.rows = aggregate(rep.samples, [](const SampleScore &s) { return s.dataset; });
    return rep;
}

EvalReport evaluate(const Pipeline &pipeline, const std::vector<DatasetManifest> &manifests,
                    const EvalOptions &options) {
    return evaluate_samples(pipeline, collect(manifests, options), options);
}

EvalReport evaluate(const Pipeline &pipeline, const DatasetManifest &manifest, const EvalOptions &options) {
    return evaluate(pipeline, std::vector<DatasetManifest>{manifest}, options);
}

double spread_percent(const std::vector<double> &means) {
    if (means.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(means.begin(), means.end());
    return 100.0 * (*hi - *lo);
}

nlohmann::json SweepReport::to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto &r : rows) j["rows"].push_back(row_json(r));
    j["samples"] = nlohmann::json::array();
    for (const auto &s : samples) j["samples"].push_back(score_json(s));
    j["spread"] = {{"dsc", dsc_spread}, {"iou", iou_spread}};
    j["table"] = table();
    return j;
}

std::string SweepReport::table() const {
    return render_rows("prompt", rows) +
           fmt::format("spread (max - min): DSC {:.2f}, IoU {:.2f}\n", dsc_spread, iou_spread);
}

SweepReport prompt_sweep(const Pipeline &pipeline, const std::vector<std::string> &prompts,
                         const std::vector<Sample> &samples, const EvalOptions &options) {
    if (prompts.size() < 2) {
        throw ConfigError("a prompt sweep needs at least two prompts");
    }
    SweepReport rep;
    std::vector<double> dm, im;
    for (const auto &p : prompts) {
        EvalOptions o = options;
        o.prompt = p;
        EvalReport r = evaluate_samples(pipeline, samples, o);
        std::vector<double> d, i;
        for (auto &s : r.samples) {
            d.push_back(s.dsc);
            i.push_back(s.iou);
            rep.samples.push_back(std::move(s));
        }
        ReportRow row{p, d.size(), mean_std(d), mean_std(i)};
        dm.push_back(row.dsc.mean);
        im.push_back(row.iou.mean);
        rep.rows.push_back(std::move(row));
    }
    rep.dsc_spread = spread_percent(dm);
    rep.iou_spread = spread_percent(im);
    return rep;
}

SweepReport prompt_sweep(const Pipeline &pipeline, const std::vector<std::string> &prompts,
                         const DatasetManifest &manifest, const EvalOptions &options) {
    return prompt_sweep(pipeline, prompts, collect({manifest}, options), options);
}

RuntimeStats benchmark_runtime(const Pipeline &pipeline, const GrayImage &image, const std::string &prompt,
                               int runs, const PipelineOptions &options) {
    if (runs < 1) {
        throw ConfigError("benchmark needs at least one run");
    }
    RuntimeStats st;
    st.runs = runs;
    pipeline.run(image, prompt, options);
    st.invocations = 1;
    for (int i = 0; i < runs; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        pipeline.run(image, prompt, options);
        const auto t1 = std::chrono::steady_clock::now();
        st.per_run_s.push_back(std::chrono::duration<double>(t1 - t0).count());
        ++st.invocations;
    }
    const MeanStd ms = mean_std(st.per_run_s);
    st.mean_s = ms.mean;
    st.std_s = ms.std;
    return st;
}

}  // namespace usground
