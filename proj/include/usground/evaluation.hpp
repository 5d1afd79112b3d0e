#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usground/dataset.hpp"
#include "usground/pipeline.hpp"

namespace usground {

struct SampleScore {
    std::string dataset;
    std::string prompt;
    std::size_t record_index = 0;
    double dsc = 0.0;
    double iou = 0.0;
    bool detected = false;
    double best_score = 0.0;
};

// Mean and population standard deviation of fractions in [0,1].
struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};
MeanStd mean_std(const std::vector<double> &values);

// Percent rendering. Compact style rounds the spread to an integer
// ("91.74±5"); full style keeps two decimals ("75.00±25.00").
std::string format_compact(double mean_percent, double std_percent);
std::string format_full(double mean_percent, double std_percent);

struct ReportRow {
    std::string key;  // dataset name, prompt, or "all"
    std::size_t count = 0;
    MeanStd dsc;  // fractions
    MeanStd iou;
};

struct RuntimeStats {
    int runs = 0;
    int invocations = 0;  // runs plus warm-up
    double mean_s = 0.0;
    double std_s = 0.0;
    std::vector<double> per_run_s;
    double reference_s = 0.33;  // published figure, context only
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::vector<SampleScore> samples;
    std::optional<RuntimeStats> runtime;

    nlohmann::json to_json() const;
    std::string table() const;
    // Per-sample dump, one JSON object per line.
    std::string samples_jsonl() const;
};

// Rows computed from a per-sample dump, grouped by `key(score)`, plus an
// "all" row when more than one group exists.
std::vector<ReportRow> aggregate(const std::vector<SampleScore> &scores,
                                 const std::function<std::string(const SampleScore &)> &key);

struct EvalOptions {
    PipelineOptions pipeline;
    // Canvas the samples are resampled to before running the pipeline.
    ImageSize target{128, 128};
    // Replaces every record prompt when set (prompt sweeps).
    std::optional<std::string> prompt;
    // Defaults to the test split of split manifests and every record otherwise.
    std::optional<Split> split;
};

// Runs prompt -> box -> mask on every selected sample. Missed detections
// score the empty mask. Throws EvaluationError when nothing is selected.
EvalReport evaluate(const Pipeline &pipeline, const std::vector<DatasetManifest> &manifests,
                    const EvalOptions &options = {});
EvalReport evaluate(const Pipeline &pipeline, const DatasetManifest &manifest,
                    const EvalOptions &options = {});
EvalReport evaluate_samples(const Pipeline &pipeline, const std::vector<Sample> &samples,
                            const EvalOptions &options = {});

struct SweepReport {
    std::vector<ReportRow> rows;  // one per prompt, in input order
    std::vector<SampleScore> samples;
    double dsc_spread = 0.0;  // max - min of mean DSC, percent
    double iou_spread = 0.0;

    nlohmann::json to_json() const;
    std::string table() const;
};

// Spread of row means in percent points.
double spread_percent(const std::vector<double> &means_fraction);

SweepReport prompt_sweep(const Pipeline &pipeline, const std::vector<std::string> &prompts,
                         const std::vector<Sample> &samples, const EvalOptions &options = {});
SweepReport prompt_sweep(const Pipeline &pipeline, const std::vector<std::string> &prompts,
                         const DatasetManifest &manifest, const EvalOptions &options = {});

// One warm-up call then `runs` timed single-image inferences.
RuntimeStats benchmark_runtime(const Pipeline &pipeline, const GrayImage &image, const std::string &prompt,
                               int runs = 10, const PipelineOptions &options = {});

}  // namespace usground
