// Command-line front end: data generation, training, evaluation, serving.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "usground/dataset.hpp"
#include "usground/detector.hpp"
#include "usground/errors.hpp"
#include "usground/evaluation.hpp"
#include "usground/mask_backend.hpp"
#include "usground/pipeline.hpp"
#include "usground/service.hpp"
#include "usground/synthetic.hpp"
#include "usground/workflow.hpp"

namespace fs = std::filesystem;
using namespace usground;

namespace {

void write_text(const fs::path &path, const std::string &text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    out << text;
}

std::string checkpoint_or_env(const std::string &flag) {
    if (!flag.empty()) return flag;
    if (const char *env = std::getenv("USGROUND_CHECKPOINT")) return env;
    throw ConfigError("no checkpoint given (use --checkpoint or USGROUND_CHECKPOINT)");
}

std::shared_ptr<const Pipeline> make_pipeline(const std::string &detector, const std::string &checkpoint,
                                              const std::string &masker) {
    std::shared_ptr<const Detector> det;
    if (detector == "toy") {
        det = make_detector("toy:" + checkpoint_or_env(checkpoint));
    } else {
        det = make_detector(detector);
    }
    return std::make_shared<Pipeline>(det, std::shared_ptr<const MaskBackend>(make_mask_backend(masker)));
}

std::vector<DatasetManifest> load_manifests(const std::vector<std::string> &paths) {
    std::vector<DatasetManifest> out;
    for (const auto &p : paths) out.push_back(load_manifest(p));
    return out;
}

SegmentService *g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"Text-prompted segmentation toolkit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every verb");

    register_detector_backend("null", [](const std::string &) { return std::make_unique<NullDetector>(); });
    register_mask_backend("null", [](const std::string &) { return std::make_unique<NullMaskBackend>(); });

    // gen-synth
    auto *gen = app.add_subcommand("gen-synth", "Generate a synthetic ultrasound-like dataset");
    std::string gen_out;
    std::size_t gen_count = 100;
    int gen_canvas = 128;
    std::string gen_variant = "A";
    std::vector<std::string> gen_families{"bright"};
    std::string gen_name = "synthetic", gen_organ = "phantom", gen_role = "seen";
    std::uint64_t gen_seed = 0;
    double gen_min_area = 80.0;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--count", gen_count, "Number of images");
    gen->add_option("--canvas", gen_canvas, "Square canvas side in pixels");
    gen->add_option("--variant", gen_variant, "Domain variant A or B");
    gen->add_option("--family", gen_families, "Lesion families (bright, dark)");
    gen->add_option("--name", gen_name);
    gen->add_option("--organ", gen_organ);
    gen->add_option("--role", gen_role, "seen or unseen");
    gen->add_option("--min-area", gen_min_area, "Minimum tight-box area in pixels");
    gen->add_option("--seed", gen_seed);

    // ingest
    auto *ing = app.add_subcommand("ingest", "Validate a manifest, optionally assign splits");
    std::string ing_manifest, ing_out;
    bool ing_split = false, ing_override = false;
    std::uint64_t ing_seed = 0;
    int ing_size = 128;
    ing->add_option("--manifest", ing_manifest)->required();
    ing->add_flag("--split", ing_split, "Assign 70/20/10 splits");
    ing->add_flag("--override", ing_override, "Re-split an already split manifest");
    ing->add_option("--out", ing_out, "Where to write the (split) manifest");
    ing->add_option("--size", ing_size, "Target square size for the ingestion pass");
    ing->add_option("--seed", ing_seed);

    // train
    auto *trn = app.add_subcommand("train", "Train the toy detector");
    std::vector<std::string> trn_manifests;
    std::string trn_out, trn_history, trn_audit, trn_init, trn_mode = "lora";
    TrainJob job;
    bool trn_no_augment = false;
    trn->add_option("--manifest", trn_manifests, "Training manifests (pooled)")->required();
    trn->add_option("--out", trn_out, "Checkpoint path")->required();
    trn->add_option("--history", trn_history, "History JSON lines path");
    trn->add_option("--audit", trn_audit, "Parameter audit JSON lines path");
    trn->add_option("--init", trn_init, "Starting checkpoint");
    trn->add_option("--mode", trn_mode, "lora or full");
    trn->add_option("--rank", job.lora.rank);
    trn->add_option("--alpha", job.lora.alpha);
    trn->add_option("--epochs", job.train.max_epochs);
    trn->add_option("--patience", job.train.patience);
    trn->add_option("--batch", job.train.batch_size);
    trn->add_option("--lr", job.train.learning_rate);
    trn->add_option("--weight-decay", job.train.weight_decay);
    trn->add_option("--clip", job.train.clip_norm, "Gradient norm clip (0 = off)");
    trn->add_option("--time-budget", job.train.time_budget_s, "Seconds (0 = unlimited)");
    trn->add_flag("--no-augment", trn_no_augment);
    trn->add_option("--seed", job.seed);

    // eval
    auto *evl = app.add_subcommand("eval", "Evaluate prompt -> box -> mask on a manifest");
    std::vector<std::string> evl_manifests;
    std::string evl_ckpt, evl_out, evl_scores, evl_split, evl_detector = "toy", evl_masker = "toy";
    std::string evl_mode = "best";
    double evl_threshold = 0.30;
    int evl_size = 128;
    evl->add_option("--manifest", evl_manifests)->required();
    evl->add_option("--checkpoint", evl_ckpt);
    evl->add_option("--detector", evl_detector, "Detector backend");
    evl->add_option("--mask-backend", evl_masker);
    evl->add_option("--out", evl_out, "Report JSON path");
    evl->add_option("--scores", evl_scores, "Per-sample JSON lines path");
    evl->add_option("--split", evl_split, "train, val, test (default: test when split)");
    evl->add_option("--threshold", evl_threshold);
    evl->add_option("--mode", evl_mode, "best or all");
    evl->add_option("--size", evl_size, "Evaluation canvas side");

    // sweep-prompts
    auto *swp = app.add_subcommand("sweep-prompts", "Compare prompt wordings on the same samples");
    std::string swp_manifest, swp_ckpt, swp_out;
    std::vector<std::string> swp_prompts;
    double swp_threshold = 0.30;
    swp->add_option("--manifest", swp_manifest)->required();
    swp->add_option("--checkpoint", swp_ckpt);
    swp->add_option("--prompt", swp_prompts, "Prompt (repeat)")->required();
    swp->add_option("--out", swp_out);
    swp->add_option("--threshold", swp_threshold);

    // segment
    auto *seg = app.add_subcommand("segment", "Segment one image");
    std::string seg_image, seg_prompt, seg_out, seg_ckpt, seg_mode = "best", seg_boxes;
    double seg_threshold = 0.30;
    seg->add_option("--image", seg_image)->required();
    seg->add_option("--prompt", seg_prompt)->required();
    seg->add_option("--out", seg_out, "Mask image path")->required();
    seg->add_option("--checkpoint", seg_ckpt);
    seg->add_option("--threshold", seg_threshold);
    seg->add_option("--mode", seg_mode);
    seg->add_option("--boxes", seg_boxes, "Write kept boxes as JSON here");

    // bench
    auto *bch = app.add_subcommand("bench", "Mean single-image latency");
    std::string bch_ckpt, bch_detector = "toy", bch_masker = "toy", bch_prompt = "bright lesion";
    int bch_runs = 10, bch_size = 800;
    std::uint64_t bch_seed = 0;
    bch->add_option("--checkpoint", bch_ckpt);
    bch->add_option("--detector", bch_detector);
    bch->add_option("--mask-backend", bch_masker);
    bch->add_option("--runs", bch_runs);
    bch->add_option("--size", bch_size, "Square input side");
    bch->add_option("--prompt", bch_prompt);
    bch->add_option("--seed", bch_seed, "Seed of the synthetic benchmark image");

    // serve
    auto *srv = app.add_subcommand("serve", "HTTP service");
    std::string srv_ckpt, srv_host = "0.0.0.0";
    int srv_port = 0;
    srv->add_option("--checkpoint", srv_ckpt);
    srv->add_option("--host", srv_host);
    srv->add_option("--port", srv_port, "Default 8750 or USGROUND_PORT");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*gen) {
            SynthConfig cfg;
            cfg.count = gen_count;
            cfg.canvas = {gen_canvas, gen_canvas};
            cfg.variant = parse_variant(gen_variant);
            cfg.families.clear();
            for (const auto &f : gen_families) cfg.families.push_back(parse_family(f));
            cfg.name = gen_name;
            cfg.organ = gen_organ;
            cfg.role = parse_role(gen_role);
            cfg.min_lesion_area = gen_min_area;
            const auto m = generate_synthetic(cfg, gen_seed, gen_out);
            std::cout << nlohmann::json{{"manifest", (fs::path(gen_out) / "manifest.json").string()},
                                        {"records", m.samples.size()}}.dump()
                      << "\n";
        } else if (*ing) {
            DatasetManifest m = load_manifest(ing_manifest);
            if (ing_split) m = split(m, {}, ing_seed, ing_override);
            IngestStats st = ingest(m, {ing_size, ing_size}, [](Sample &&) {});
            if (!ing_out.empty()) save_manifest(ing_out, m);
            std::cout << nlohmann::json{{"name", m.name},
                                        {"emitted", st.emitted},
                                        {"skipped_empty", st.skipped_empty},
                                        {"train", m.count(Split::train)},
                                        {"val", m.count(Split::val)},
                                        {"test", m.count(Split::test)}}.dump()
                      << "\n";
        } else if (*trn) {
            job.manifests = load_manifests(trn_manifests);
            job.mode = parse_train_mode(trn_mode);
            job.lora.seed = job.seed;
            job.task.augment = !trn_no_augment;
            if (!trn_init.empty()) job.init = trn_init;
            auto outcome = run_training(job, [](const EpochRecord &e) {
                spdlog::info("epoch {} train {:.4f} val {:.4f}", e.epoch, e.train_loss, e.val_loss);
            });
            nlohmann::json extra{{"best_epoch", outcome.result.best_epoch},
                                 {"best_val_loss", outcome.result.best_val_loss},
                                 {"seed", job.seed}};
            outcome.detector.save(trn_out, extra);
            if (!trn_history.empty()) write_text(trn_history, history_jsonl(outcome.result.history));
            if (!trn_audit.empty()) write_text(trn_audit, nn::audit_jsonl(outcome.audit));
            std::cout << nlohmann::json{{"checkpoint", trn_out},
                                        {"epochs", outcome.result.history.size()},
                                        {"best_epoch", outcome.result.best_epoch},
                                        {"stop_reason", outcome.result.stop_reason},
                                        {"initial_train_loss", outcome.initial_train_loss},
                                        {"final_train_loss", outcome.final_train_loss},
                                        {"trainable_fraction", nn::trainable_fraction(outcome.detector.module())}}.dump()
                      << "\n";
        } else if (*evl) {
            auto pipe = make_pipeline(evl_detector, evl_ckpt, evl_masker);
            EvalOptions opts;
            opts.pipeline.threshold = evl_threshold;
            opts.pipeline.mode = parse_mode(evl_mode);
            opts.target = {evl_size, evl_size};
            if (!evl_split.empty()) opts.split = parse_split(evl_split);
            const EvalReport rep = evaluate(*pipe, load_manifests(evl_manifests), opts);
            if (!evl_out.empty()) write_text(evl_out, rep.to_json().dump(2));
            if (!evl_scores.empty()) write_text(evl_scores, rep.samples_jsonl());
            std::cout << rep.table();
        } else if (*swp) {
            auto pipe = make_pipeline("toy", swp_ckpt, "toy");
            EvalOptions opts;
            opts.pipeline.threshold = swp_threshold;
            const SweepReport rep = prompt_sweep(*pipe, swp_prompts, load_manifest(swp_manifest), opts);
            if (!swp_out.empty()) write_text(swp_out, rep.to_json().dump(2));
            std::cout << rep.table();
        } else if (*seg) {
            auto pipe = make_pipeline("toy", seg_ckpt, "toy");
            PipelineOptions opts;
            opts.threshold = seg_threshold;
            opts.mode = parse_mode(seg_mode);
            const PipelineResult r = pipe->run(load_image(seg_image), seg_prompt, opts);
            save_mask(seg_out, r.mask);
            nlohmann::json boxes = nlohmann::json::array();
            for (const auto &b : r.boxes) {
                boxes.push_back({{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max},
                                 {"score", b.score.value_or(0.0)}});
            }
            if (!seg_boxes.empty()) write_text(seg_boxes, boxes.dump(2));
            std::cout << nlohmann::json{{"mask", seg_out}, {"detected", r.detected}, {"best_score", r.best_score},
                                        {"boxes", boxes}}.dump()
                      << "\n";
        } else if (*bch) {
            auto pipe = make_pipeline(bch_detector, bch_ckpt, bch_masker);
            SynthConfig cfg;
            cfg.canvas = {bch_size, bch_size};
            const SyntheticItem item = generate_item(cfg, bch_seed, 0);
            const RuntimeStats st = benchmark_runtime(*pipe, item.image, bch_prompt, bch_runs);
            std::cout << nlohmann::json{{"runs", st.runs},
                                        {"invocations", st.invocations},
                                        {"mean_s", st.mean_s},
                                        {"std_s", st.std_s},
                                        {"reference_s", st.reference_s}}.dump()
                      << "\n";
        } else if (*srv) {
            ServiceConfig cfg;
            cfg.host = srv_host;
            cfg.port = srv_port > 0 ? srv_port : port_from_env();
            SegmentService service(cfg);
            std::string ckpt = srv_ckpt;
            if (ckpt.empty()) {
                if (const char *env = std::getenv("USGROUND_CHECKPOINT")) ckpt = env;
            }
            if (!ckpt.empty()) {
                auto det = std::make_shared<ToyDetector>(ToyDetector::load(ckpt));
                service.load(std::make_shared<Pipeline>(det, std::make_shared<ToyMaskBackend>()),
                             det->checkpoint_id());
            } else {
                spdlog::warn("no checkpoint loaded; /api/segment answers 503");
            }
            g_service = &service;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            service.serve();
            g_service = nullptr;
        }
    } catch (const Error &e) {
        std::cerr << nlohmann::json{{"error", e.kind()}, {"detail", e.what()}}.dump() << "\n";
        return 1;
    } catch (const std::exception &e) {
        std::cerr << nlohmann::json{{"error", "internal"}, {"detail", e.what()}}.dump() << "\n";
        return 1;
    }
    return 0;
}
