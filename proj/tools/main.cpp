// widecorrect command-line entry point.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>

#include "widecorrect/checkpoint.hpp"
#include "widecorrect/errors.hpp"
#include "widecorrect/gradcheck.hpp"
#include "widecorrect/io.hpp"
#include "widecorrect/metrics.hpp"
#include "widecorrect/parallel.hpp"
#include "widecorrect/synthdata.hpp"
#include "widecorrect/trainer.hpp"

namespace fs = std::filesystem;
using namespace widecorrect;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kCheckFailed = 3 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    int verbosity = 0;

    // gen-data
    std::string gen_out;
    int gen_count = 0;
    double gen_labeled_frac = 1.0;
    std::uint64_t gen_seed = 0;
    std::string gen_size = "64x48";

    // train
    std::string train_data, train_unlabeled, train_config, train_out;
    std::optional<std::uint64_t> train_seed;
    bool supervised_only = false, no_drc = false, no_rc = false;

    // correct
    std::string correct_ckpt, correct_in, correct_out, dump_flow, dump_mask;

    // eval
    std::string eval_ckpt, eval_data, eval_report;

    // gradcheck
    std::string gc_module;
    std::uint64_t gc_seed = 0;
};

std::pair<int, int> parse_size(const std::string& s) {
    static const std::regex re(R"((\d+)x(\d+))");
    std::smatch m;
    if (!std::regex_match(s, m, re)) throw UsageError("--size: expected HxW, got '" + s + "'");
    const int h = std::stoi(m[1]), w = std::stoi(m[2]);
    if (h < 8 || w < 8) throw UsageError("--size: both sides must be at least 8");
    return {h, w};
}

SegMask argmax_seg(const SegLogits& logits) {
    SegMask out(logits.height, logits.width);
    for (int g = 0; g < 2; ++g) {
        for (int y = 0; y < logits.height; ++y) {
            for (int x = 0; x < logits.width; ++x) {
                int best = 0;
                for (int k = 1; k < 3; ++k) {
                    if (logits.logit(g, k, y, x) > logits.logit(g, best, y, x)) best = k;
                }
                out.at(g, y, x) = static_cast<std::uint8_t>(best);
            }
        }
    }
    return out;
}

fs::path preview_path(const fs::path& p) {
    fs::path out = p;
    out.replace_extension(".preview.png");
    return out;
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path.string(), "cannot open");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string(), std::string("malformed JSON: ") + e.what());
    }
}

int cmd_gen_data(const Options& o) {
    const auto [h, w] = parse_size(o.gen_size);
    GenConfig g;
    g.count = o.gen_count;
    g.labeled_frac = o.gen_labeled_frac;
    g.seed = o.gen_seed;
    g.height = h;
    g.width = w;
    if (g.count < 1) throw UsageError("--count must be at least 1");
    if (!(g.labeled_frac >= 0.0 && g.labeled_frac <= 1.0)) throw UsageError("--labeled-frac must be in [0, 1]");
    const auto samples = generate_dataset(g);
    write_dataset(samples, o.gen_out);
    int labeled = 0;
    for (const auto& s : samples) labeled += s.labeled();
    std::printf("wrote %zu samples (%d labeled) to %s\n", samples.size(), labeled, o.gen_out.c_str());
    return kOk;
}

int cmd_train(const Options& o) {
    TrainConfig cfg;
    {
        json j = read_json_file(o.train_config);
        // Periodic checkpoints default to <out>.epochN.ckpt.
        if (j.is_object() && !j.contains("checkpoint_prefix")) j["checkpoint_prefix"] = o.train_out;
        try {
            cfg = train_config_from_json(j);
        } catch (const InvalidArgument& e) {
            throw DataError(o.train_config, e.what());
        }
    }
    if (o.train_seed) cfg.seed = *o.train_seed;
    if (o.supervised_only) cfg.supervised_only = true;
    if (o.no_drc) cfg.use_drc = false;
    if (o.no_rc) cfg.use_rc = false;
    cfg.workers = workers_from_env();

    std::vector<Sample> labeled, unlabeled;
    for (Sample& s : read_dataset(o.train_data)) (s.labeled() ? labeled : unlabeled).push_back(std::move(s));
    if (!o.train_unlabeled.empty()) {
        for (Sample& s : read_dataset(o.train_unlabeled)) unlabeled.push_back(std::move(s));
    }
    if (labeled.empty()) throw DataError(o.train_data, "no labeled samples");
    for (const auto* set : {&labeled, &unlabeled}) {
        for (const Sample& s : *set) {
            if (s.distorted.height != cfg.model.input_h || s.distorted.width != cfg.model.input_w) {
                throw DataError(s.id, "image size " + std::to_string(s.distorted.height) + "x" +
                                          std::to_string(s.distorted.width) + " does not match the model input " +
                                          std::to_string(cfg.model.input_h) + "x" +
                                          std::to_string(cfg.model.input_w));
            }
        }
    }

    const fs::path out = o.train_out;
    const fs::path log_path = out.string() + ".log.jsonl";
    std::ofstream log(log_path);
    if (!log) throw DataError(log_path.string(), "cannot open for writing");
    json header = {{"event", "config"}, {"config", train_config_to_json(cfg)},
                   {"labeled", labeled.size()}, {"unlabeled", unlabeled.size()}};
    log << header.dump() << "\n" << std::flush;

    const TrainResult res = run_training(labeled, unlabeled, cfg, [&](const EpochRecord& r) {
        json j = r.to_json();
        j["event"] = "epoch";
        log << j.dump() << "\n" << std::flush;
        if (o.verbosity > 0) std::fprintf(stderr, "%s\n", j.dump().c_str());
    });
    save_checkpoint(out, cfg.model, res.state.weights);

    char checksum[17];
    std::snprintf(checksum, sizeof checksum, "%016llx", static_cast<unsigned long long>(res.state.weights.checksum()));
    json summary = {{"event", "done"}, {"checksum", checksum}};
    if (res.initial_validation) summary["initial_validation"] = res.initial_validation->to_json();
    if (res.final_validation) summary["final_validation"] = res.final_validation->to_json();
    log << summary.dump() << "\n";
    std::printf("checkpoint %s (checksum %s)\n", out.c_str(), checksum);
    if (res.final_validation) {
        std::printf("validation EPE %.4f -> %.4f\n", res.initial_validation->epe, res.final_validation->epe);
    }
    return kOk;
}

int cmd_correct(const Options& o) {
    const Checkpoint ck = load_checkpoint(o.correct_ckpt);
    const Image img = io::read_png(o.correct_in);
    if (img.height != ck.config.input_h || img.width != ck.config.input_w ||
        img.channels != ck.config.input_channels) {
        throw DataError(o.correct_in, "image " + std::to_string(img.channels) + "x" + std::to_string(img.height) +
                                          "x" + std::to_string(img.width) + " does not match the checkpoint input " +
                                          std::to_string(ck.config.input_channels) + "x" +
                                          std::to_string(ck.config.input_h) + "x" +
                                          std::to_string(ck.config.input_w));
    }
    const Prediction pred = forward(img, ck.weights, ck.config);
    io::write_png(o.correct_out, warp_image(img, pred.flow));
    if (!o.dump_flow.empty()) io::write_flo(o.dump_flow, pred.flow);
    if (!o.dump_mask.empty()) {
        const SegMask mask = argmax_seg(pred.seg);
        io::write_seg_mask(o.dump_mask, mask);
        Planes<std::uint8_t> stacked(1, 2 * mask.height, mask.width);
        stacked.data = mask.data;
        io::write_label_png(preview_path(o.dump_mask), stacked, 100);
    }
    return kOk;
}

int cmd_eval(const Options& o) {
    const Checkpoint ck = load_checkpoint(o.eval_ckpt);
    const auto samples = read_dataset(o.eval_data);
    const MetricReport rep = evaluate_dataset<float>(samples, ck.weights, ck.config, workers_from_env());
    std::ofstream out(o.eval_report);
    if (!out) throw DataError(o.eval_report, "cannot open for writing");
    out << rep.to_json().dump(2) << "\n";
    if (!out) throw DataError(o.eval_report, "write failed");
    for (const auto& w : rep.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    std::printf("LineAcc %.4f (%d lines)  ShapeAcc %.4f (%d faces)  EPE %.4f (%d samples)\n", rep.lineacc,
                rep.line_count, rep.shapeacc, rep.face_count, rep.epe, rep.epe_count);
    return kOk;
}

int cmd_gradcheck(const Options& o) {
    std::vector<GradcheckResult> results;
    if (o.gc_module.empty()) {
        results = run_gradcheck_suite(o.gc_seed);
    } else {
        try {
            results.push_back(run_gradcheck(o.gc_module, o.gc_seed));
        } catch (const InvalidArgument& e) {
            throw UsageError(std::string("--module: ") + e.what());
        }
    }
    bool ok = true;
    std::printf("%-18s %8s %12s %10s  %s\n", "module", "checked", "max_rel_err", "tolerance", "result");
    for (const auto& r : results) {
        std::printf("%-18s %8d %12.3e %10.0e  %s\n", r.module.c_str(), r.checked, r.max_rel_error, r.tolerance,
                    r.passed() ? "ok" : ("FAIL at " + r.worst).c_str());
        ok = ok && r.passed();
    }
    return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Wide-angle portrait correction: data generation, training, correction and evaluation"};
    app.require_subcommand(1);
    app.footer("Environment: WIDECORRECT_NUM_WORKERS sets the number of per-sample worker threads (default 1).\n"
               "Exit codes: 0 ok, 1 usage error, 2 data or checkpoint error, 3 gradient check failed.");
    Options o;
    app.add_flag("-v,--verbose", o.verbosity, "Print per-epoch progress to stderr");

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic distorted dataset");
    gen->add_option("--out", o.gen_out, "Output directory")->required();
    gen->add_option("--count", o.gen_count, "Number of samples")->required();
    gen->add_option("--labeled-frac", o.gen_labeled_frac, "Fraction of samples that keep ground truth");
    gen->add_option("--seed", o.gen_seed, "Generator seed");
    gen->add_option("--size", o.gen_size, "Image size as HxW")->capture_default_str();

    auto* train = app.add_subcommand("train", "Two-step training; writes CKPT and CKPT.log.jsonl");
    train->add_option("--data", o.train_data, "Dataset directory (labeled samples; unlabeled ones join the unlabeled pool)")
        ->required();
    train->add_option("--unlabeled", o.train_unlabeled, "Extra dataset directory used without labels");
    train->add_option("--config", o.train_config, "Training config JSON")->required();
    train->add_option("--out", o.train_out, "Output checkpoint")->required();
    train->add_option("--seed", o.train_seed, "Override the config seed");
    train->add_flag("--supervised-only", o.supervised_only, "Skip the unlabeled batches");
    train->add_flag("--no-drc", o.no_drc, "Drop the segmentation consistency term");
    train->add_flag("--no-rc", o.no_rc, "Drop the flow consistency term");

    auto* correct = app.add_subcommand("correct", "Correct one image with a checkpoint");
    correct->add_option("--ckpt", o.correct_ckpt, "Checkpoint")->required();
    correct->add_option("--in", o.correct_in, "Input PNG")->required();
    correct->add_option("--out", o.correct_out, "Corrected PNG")->required();
    correct->add_option("--dump-flow", o.dump_flow, "Write the predicted flow (.flo)");
    correct->add_option("--dump-mask", o.dump_mask,
                        "Write the predicted segmentation (2H label PNG, plus a x100 .preview.png)");

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
    eval->add_option("--ckpt", o.eval_ckpt, "Checkpoint")->required();
    eval->add_option("--data", o.eval_data, "Dataset directory")->required();
    eval->add_option("--report", o.eval_report, "Output report JSON")->required();

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gc->add_option("--module", o.gc_module, "Run one module only");
    gc->add_option("--seed", o.gc_seed, "Seed for the random inputs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(o);
        if (*train) return cmd_train(o);
        if (*correct) return cmd_correct(o);
        if (*eval) return cmd_eval(o);
        if (*gc) return cmd_gradcheck(o);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const InvalidArgument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kData;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kData;
    }
    return kUsage;
}
