#include "widecorrect/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>

#include "widecorrect/errors.hpp"
#include "widecorrect/losses.hpp"
#include "widecorrect/msunet.hpp"

namespace widecorrect {

namespace {

using M = Mat<double>;
using Rng = std::mt19937_64;

struct Probe {
    std::string label;
    double* value;
    double analytic;
};

double normal(Rng& rng, double sd = 1.0) { return std::normal_distribution<double>(0.0, sd)(rng); }

M random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double sd = 1.0) {
    M m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng, sd);
    return m;
}

double dot(const M& a, const M& b) { return (a.array() * b.array()).sum(); }

// Picks up to `count` coordinates of one tensor.
void add_probes(std::vector<Probe>& probes, const std::string& label, double* values, const double* grads,
                std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (count < n) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(count);
        std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) probes.push_back({label + "[" + std::to_string(i) + "]", values + i, grads[i]});
}

void add_weight_probes(std::vector<Probe>& probes, ModelWeights<double>& w, const ModelWeights<double>& g,
                       std::size_t per_tensor, Rng& rng, const std::string& only_prefix = "") {
    for (std::size_t t = 0; t < w.tensor_count(); ++t) {
        const std::string& name = w.schema()[t].name;
        if (name.find(only_prefix) == std::string::npos) continue;
        add_probes(probes, name, w.tensor(t).data(), g.tensor(t).data(), w.tensor(t).size(), per_tensor, rng);
    }
}

void randomize(ModelWeights<double>& w, Rng& rng) {
    for (std::size_t t = 0; t < w.tensor_count(); ++t) {
        const std::string& name = w.schema()[t].name;
        const bool norm_scale = (name.find("ln") != std::string::npos || name.find("norm") != std::string::npos) &&
                                name.ends_with(".weight");
        for (double& v : w.tensor(t)) v = norm_scale ? 1.0 + normal(rng, 0.2) : normal(rng, 0.2);
    }
}

GradcheckResult compare(const std::string& module, double tolerance, std::vector<Probe>& probes,
                        const std::function<double()>& f) {
    GradcheckResult r{module, static_cast<int>(probes.size()), 0.0, tolerance, {}};
    std::vector<double> numeric(probes.size());
    double scale = 0.0;
    for (std::size_t i = 0; i < probes.size(); ++i) {
        double& v = *probes[i].value;
        const double orig = v;
        v = orig + kGradcheckStep;
        const double fp = f();
        v = orig - kGradcheckStep;
        const double fm = f();
        v = orig;
        numeric[i] = (fp - fm) / (2.0 * kGradcheckStep);
        scale = std::max({scale, std::abs(numeric[i]), std::abs(probes[i].analytic)});
    }
    const double floor = std::max(1e-3 * scale, 1e-12);
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const double a = probes[i].analytic, n = numeric[i];
        const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
        if (i == 0 || err > r.max_rel_error) {
            r.max_rel_error = err;
            r.worst = probes[i].label;
        }
    }
    return r;
}

// Small stage: 8 x 8 grid, 8 channels, 2 heads, 4 x 4 windows shifted by 2.
StageGeometry small_stage() {
    StageGeometry g;
    g.grid_h = 8;
    g.grid_w = 8;
    g.channels = 8;
    g.heads = 2;
    g.window_h = 4;
    g.window_w = 4;
    g.shift_h = 2;
    g.shift_w = 2;
    g.mlp_hidden = 16;
    g.growth = 2;
    return g;
}

ModelWeights<double> block_weights(const StageGeometry& g, const std::vector<std::string>& prefixes, Rng& rng) {
    std::vector<ParamSpec> schema;
    for (const auto& p : prefixes) append_block_schema(schema, p, g);
    ModelWeights<double> w(schema);
    randomize(w, rng);
    return w;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.input_h = 16;
    c.input_w = 16;
    c.patch_size = 2;
    c.base_channels = 8;
    c.stage_depths = {2};
    c.bottleneck_depth = 2;
    c.head_count = 2;
    c.window_h = 4;
    c.window_w = 4;
    c.mlp_ratio = 2.0;
    c.dcm_growth = 2;
    return c;
}

Image random_image(int c, int h, int w, Rng& rng) {
    Image img(c, h, w);
    for (double& v : img.data) v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    return img;
}

GradcheckResult check_dcm(Rng& rng) {
    const StageGeometry g = small_stage();
    ModelWeights<double> w = block_weights(g, {""}, rng);
    ModelWeights<double> grad(w.schema());
    M x = random_mat(g.tokens(), g.channels, rng);
    const M r = random_mat(g.tokens(), g.channels, rng);
    const msunet::ParamScope<double> p{&w, ""};
    msunet::DcmCache<double> cache;
    msunet::dcm_forward(x, g, p, cache);
    const M dx = msunet::dcm_backward(r, g, p, msunet::GradScope<double>{&grad, ""}, cache);
    std::vector<Probe> probes;
    add_probes(probes, "x", x.data(), dx.data(), x.size(), 32, rng);
    add_weight_probes(probes, w, grad, 6, rng, "dcm.");
    return compare("dcm", kGradcheckTolerance, probes, [&] {
        msunet::DcmCache<double> c;
        return dot(msunet::dcm_forward(x, g, p, c), r);
    });
}

GradcheckResult check_msa(Rng& rng) {
    const StageGeometry g = small_stage();
    M q = random_mat(g.tokens(), g.channels, rng), k = random_mat(g.tokens(), g.channels, rng),
      v = random_mat(g.tokens(), g.channels, rng);
    std::vector<double> table(static_cast<std::size_t>(g.bias_table_rows() * g.heads));
    for (double& t : table) t = normal(rng, 0.5);
    std::vector<double> dtable(table.size(), 0.0);
    const M r = random_mat(g.tokens(), g.channels, rng);
    msunet::AttentionCache<double> cache;
    msunet::attention_forward(q, k, v, g, true, table.data(), cache);
    M dq, dk, dv;
    msunet::attention_backward(r, g, table.data(), dtable.data(), cache, dq, dk, dv);
    std::vector<Probe> probes;
    add_probes(probes, "q", q.data(), dq.data(), q.size(), 24, rng);
    add_probes(probes, "k", k.data(), dk.data(), k.size(), 24, rng);
    add_probes(probes, "v", v.data(), dv.data(), v.size(), 24, rng);
    add_probes(probes, "rel_bias", table.data(), dtable.data(), table.size(), 24, rng);
    return compare("msa", kGradcheckTolerance, probes, [&] {
        msunet::AttentionCache<double> c;
        return dot(msunet::attention_forward(q, k, v, g, true, table.data(), c), r);
    });
}

GradcheckResult check_mstb_pair(Rng& rng) {
    const StageGeometry g = small_stage();
    ModelWeights<double> w = block_weights(g, {"blk0.", "blk1."}, rng);
    ModelWeights<double> grad(w.schema());
    M x = random_mat(g.tokens(), g.channels, rng);
    const M r = random_mat(g.tokens(), g.channels, rng);
    const msunet::ParamScope<double> p0{&w, "blk0."}, p1{&w, "blk1."};
    auto run = [&](msunet::BlockCache<double>& c0, msunet::BlockCache<double>& c1) {
        return msunet::block_forward(msunet::block_forward(x, g, false, p0, c0), g, true, p1, c1);
    };
    msunet::BlockCache<double> c0, c1;
    run(c0, c1);
    M dx = msunet::block_backward(r, g, p1, msunet::GradScope<double>{&grad, "blk1."}, c1);
    dx = msunet::block_backward(dx, g, p0, msunet::GradScope<double>{&grad, "blk0."}, c0);
    std::vector<Probe> probes;
    add_probes(probes, "x", x.data(), dx.data(), x.size(), 32, rng);
    add_weight_probes(probes, w, grad, 2, rng);
    return compare("mstb_pair", kGradcheckTolerance, probes, [&] {
        msunet::BlockCache<double> a, b;
        return dot(run(a, b), r);
    });
}

GradcheckResult check_sfb(Rng& rng) {
    const StageGeometry g = small_stage();
    const int c = g.channels;
    M enc = random_mat(g.tokens(), c, rng), dec = random_mat(g.tokens(), c, rng);
    M w = random_mat(c, 2 * c, rng, 0.3), b = random_mat(1, c, rng, 0.3);
    M dw = M::Zero(c, 2 * c), db = M::Zero(1, c);
    const M r = random_mat(g.tokens(), c, rng);
    M concat, denc, ddec;
    msunet::sfb_forward(enc, dec, w.data(), b.data(), concat);
    msunet::sfb_backward(r, concat, w.data(), dw.data(), db.data(), denc, ddec);
    std::vector<Probe> probes;
    add_probes(probes, "enc", enc.data(), denc.data(), enc.size(), 24, rng);
    add_probes(probes, "dec", dec.data(), ddec.data(), dec.size(), 24, rng);
    add_probes(probes, "weight", w.data(), dw.data(), w.size(), 24, rng);
    add_probes(probes, "bias", b.data(), db.data(), b.size(), 8, rng);
    return compare("sfb", kGradcheckTolerance, probes, [&] {
        M cc;
        return dot(msunet::sfb_forward(enc, dec, w.data(), b.data(), cc), r);
    });
}

GradcheckResult check_patch_embed(Rng& rng) {
    const ModelConfig cfg = tiny_config();
    ModelWeights<double> w(parameter_schema(cfg));
    randomize(w, rng);
    ModelWeights<double> grad(w.schema());
    const Image img = random_image(cfg.input_channels, cfg.input_h, cfg.input_w, rng);
    const int p = cfg.patch_size, c = cfg.base_channels;
    const M r = random_mat((cfg.input_h / p) * (cfg.input_w / p), c, rng);
    const M patches = msunet::extract_patches<double>(img, p);
    nn::linear_backward(r, patches, w["embed.proj.weight"].data(), grad["embed.proj.weight"].data(),
                        grad["embed.proj.bias"].data(), c, p * p * cfg.input_channels);
    std::vector<Probe> probes;
    add_weight_probes(probes, w, grad, 48, rng, "embed.");
    return compare("patch_embed", kGradcheckTolerance, probes,
                   [&] { return dot(msunet::patch_embed(img, w, cfg).data, r); });
}

GradcheckResult check_patch_merge(Rng& rng) {
    const StageGeometry g = small_stage();
    const int c = g.channels;
    M x = random_mat(g.tokens(), c, rng), w = random_mat(2 * c, 4 * c, rng, 0.3);
    M dw = M::Zero(2 * c, 4 * c);
    const M r = random_mat(g.tokens() / 4, 2 * c, rng);
    M gathered;
    msunet::patch_merge_forward(x, g.grid_h, g.grid_w, w.data(), gathered);
    const M dx = msunet::patch_merge_backward(r, g.grid_h, g.grid_w, w.data(), dw.data(), gathered);
    std::vector<Probe> probes;
    add_probes(probes, "x", x.data(), dx.data(), x.size(), 32, rng);
    add_probes(probes, "weight", w.data(), dw.data(), w.size(), 32, rng);
    return compare("patch_merge", kGradcheckTolerance, probes, [&] {
        M gg;
        return dot(msunet::patch_merge_forward(x, g.grid_h, g.grid_w, w.data(), gg), r);
    });
}

GradcheckResult check_patch_expand(Rng& rng) {
    const int gh = 2, gw = 3, cin = 8, out = 4, f = 2;
    M x = random_mat(gh * gw, cin, rng), w = random_mat(f * f * out, cin, rng, 0.3);
    M dw = M::Zero(f * f * out, cin);
    const M r = random_mat(gh * gw * f * f, out, rng);
    msunet::patch_expand_forward(x, gh, gw, f, out, w.data());
    const M dx = msunet::patch_expand_backward(r, x, gh, gw, f, out, w.data(), dw.data());
    std::vector<Probe> probes;
    add_probes(probes, "x", x.data(), dx.data(), x.size(), 32, rng);
    add_probes(probes, "weight", w.data(), dw.data(), w.size(), 32, rng);
    return compare("patch_expand", kGradcheckTolerance, probes,
                   [&] { return dot(msunet::patch_expand_forward(x, gh, gw, f, out, w.data()), r); });
}

// End to end through the supervised loss. The ground truth sits at a ramp
// offset from the initial prediction so no |.| kink lies within a step.
GradcheckResult check_forward(Rng& rng) {
    const ModelConfig cfg = tiny_config();
    ModelWeights<double> w(parameter_schema(cfg));
    randomize(w, rng);
    ModelWeights<double> grad(w.schema());
    const Image img = random_image(cfg.input_channels, cfg.input_h, cfg.input_w, rng);
    const Prediction p0 = forward(img, w, cfg);
    FlowMap gt = p0.flow;
    const double ax = 0.15 + 0.1 * std::uniform_real_distribution<double>()(rng);
    const double ay = 0.15 + 0.1 * std::uniform_real_distribution<double>()(rng);
    for (int c = 0; c < 2; ++c) {
        for (int y = 0; y < cfg.input_h; ++y) {
            for (int x = 0; x < cfg.input_w; ++x) gt.at(c, y, x) -= 2.0 + ax * x + ay * y + normal(rng, 0.01);
        }
    }
    BinaryMask face(cfg.input_h, cfg.input_w);
    for (int y = 4; y < 11; ++y) {
        for (int x = 3; x < 9; ++x) face.at(0, y, x) = 1;
    }
    const LossWeights lw;
    FlowMap df(cfg.input_h, cfg.input_w);
    SegLogits ds(cfg.input_h, cfg.input_w);
    ForwardPass<double> pass(cfg, w);
    const Prediction pr = pass.run(img);
    loss_supervised(pr.flow, pr.seg, gt, face, lw, &df, &ds);
    pass.backward(df, ds, grad);
    std::vector<Probe> probes;
    add_weight_probes(probes, w, grad, 2, rng);
    return compare("forward", kGradcheckToleranceEndToEnd, probes, [&] {
        const Prediction q = forward(img, w, cfg);
        return loss_supervised(q.flow, q.seg, gt, face, lw).total;
    });
}

// ---- losses -----------------------------------------------------------------

constexpr int kLossH = 5, kLossW = 4;
constexpr double kKinkMargin = 0.05;

FlowMap random_flow(Rng& rng, double sd) {
    FlowMap f(kLossH, kLossW);
    for (double& v : f.data) v = normal(rng, sd);
    return f;
}

// Differences whose entries and Sobel responses stay away from the |.| kinks.
FlowMap kink_free_difference(Rng& rng) {
    for (;;) {
        FlowMap d = random_flow(rng, 1.5);
        bool ok = std::all_of(d.data.begin(), d.data.end(), [](double v) { return std::abs(v) > kKinkMargin; });
        const SobelResponse s = sobel(d);
        for (const auto* plane : {&s.gx, &s.gy}) {
            ok = ok && std::all_of(plane->data.begin(), plane->data.end(),
                                   [](double v) { return std::abs(v) > kKinkMargin; });
        }
        if (ok) return d;
    }
}

// Flow with entries away from the segmentation thresholds at +-delta.
FlowMap threshold_free_flow(Rng& rng, double delta) {
    FlowMap f(kLossH, kLossW);
    for (double& v : f.data) {
        do {
            v = std::uniform_real_distribution<double>(-2.0 * delta, 2.0 * delta)(rng);
        } while (std::abs(std::abs(v) - delta) < kKinkMargin);
    }
    return f;
}

BinaryMask random_face_mask(Rng& rng) {
    BinaryMask m(kLossH, kLossW);
    for (auto& v : m.data) v = std::bernoulli_distribution(0.4)(rng) ? 1 : 0;
    return m;
}

SegLogits random_logits(Rng& rng) {
    SegLogits s(kLossH, kLossW);
    for (double& v : s.data) v = normal(rng, 2.0);
    return s;
}

FlowMap add(const FlowMap& a, const FlowMap& b) {
    FlowMap out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += b.data[i];
    return out;
}

GradcheckResult check_loss_m1(Rng& rng) {
    FlowMap ref = random_flow(rng, 3.0);
    FlowMap pred = add(ref, kink_free_difference(rng));
    const WeightMask m = make_weight_mask(random_face_mask(rng));
    FlowMap d(kLossH, kLossW);
    loss_m1(pred, ref, m, &d);
    std::vector<Probe> probes;
    add_probes(probes, "pred", pred.data.data(), d.data.data(), pred.data.size(), pred.data.size(), rng);
    return compare("loss_m1", kGradcheckTolerance, probes, [&] { return loss_m1(pred, ref, m); });
}

GradcheckResult check_loss_ms(Rng& rng) {
    FlowMap ref = random_flow(rng, 3.0);
    FlowMap pred = add(ref, kink_free_difference(rng));
    const WeightMask m = make_weight_mask(random_face_mask(rng));
    FlowMap d(kLossH, kLossW);
    loss_ms(pred, ref, m, &d);
    std::vector<Probe> probes;
    add_probes(probes, "pred", pred.data.data(), d.data.data(), pred.data.size(), pred.data.size(), rng);
    return compare("loss_ms", kGradcheckTolerance, probes, [&] { return loss_ms(pred, ref, m); });
}

GradcheckResult check_loss_ce(Rng& rng) {
    SegLogits logits = random_logits(rng);
    SegMask target(kLossH, kLossW);
    for (auto& v : target.data) v = static_cast<std::uint8_t>(std::uniform_int_distribution<int>(0, 2)(rng));
    SegLogits d(kLossH, kLossW);
    loss_ce(logits, target, &d);
    std::vector<Probe> probes;
    add_probes(probes, "logits", logits.data.data(), d.data.data(), logits.data.size(), logits.data.size(), rng);
    return compare("loss_ce", kGradcheckTolerance, probes, [&] { return loss_ce(logits, target); });
}

GradcheckResult check_loss_supervised(Rng& rng) {
    const LossWeights lw;
    const FlowMap gt = threshold_free_flow(rng, lw.delta);
    FlowMap pred = add(gt, kink_free_difference(rng));
    SegLogits logits = random_logits(rng);
    const BinaryMask face = random_face_mask(rng);
    FlowMap df(kLossH, kLossW);
    SegLogits ds(kLossH, kLossW);
    loss_supervised(pred, logits, gt, face, lw, &df, &ds);
    std::vector<Probe> probes;
    add_probes(probes, "flow", pred.data.data(), df.data.data(), pred.data.size(), pred.data.size(), rng);
    add_probes(probes, "logits", logits.data.data(), ds.data.data(), logits.data.size(), logits.data.size(), rng);
    return compare("loss_supervised", kGradcheckTolerance, probes,
                   [&] { return loss_supervised(pred, logits, gt, face, lw).total; });
}

GradcheckResult check_loss_unsupervised(Rng& rng) {
    const LossWeights lw;
    FlowMap f1, f2;
    // Both branches must also stay clear of the pseudo-label thresholds.
    for (;;) {
        f1 = threshold_free_flow(rng, lw.delta);
        f2 = add(f1, kink_free_difference(rng));
        if (std::all_of(f2.data.begin(), f2.data.end(),
                        [&](double v) { return std::abs(std::abs(v) - lw.delta) > kKinkMargin; })) {
            break;
        }
    }
    SegLogits l1 = random_logits(rng), l2 = random_logits(rng);
    FlowMap d1(kLossH, kLossW), d2(kLossH, kLossW);
    SegLogits s1(kLossH, kLossW), s2(kLossH, kLossW);
    loss_unsupervised(f1, f2, l1, l2, lw, {&d1, &d2, &s1, &s2});
    std::vector<Probe> probes;
    add_probes(probes, "flow1", f1.data.data(), d1.data.data(), f1.data.size(), f1.data.size(), rng);
    add_probes(probes, "flow2", f2.data.data(), d2.data.data(), f2.data.size(), f2.data.size(), rng);
    add_probes(probes, "logits1", l1.data.data(), s1.data.data(), l1.data.size(), l1.data.size(), rng);
    add_probes(probes, "logits2", l2.data.data(), s2.data.data(), l2.data.size(), l2.data.size(), rng);
    return compare("loss_unsupervised", kGradcheckTolerance, probes,
                   [&] { return loss_unsupervised(f1, f2, l1, l2, lw).total; });
}

using CheckFn = GradcheckResult (*)(Rng&);

const std::vector<std::pair<std::string, CheckFn>>& registry() {
    static const std::vector<std::pair<std::string, CheckFn>> r = {
        {"dcm", check_dcm},
        {"msa", check_msa},
        {"mstb_pair", check_mstb_pair},
        {"sfb", check_sfb},
        {"patch_embed", check_patch_embed},
        {"patch_merge", check_patch_merge},
        {"patch_expand", check_patch_expand},
        {"forward", check_forward},
        {"loss_m1", check_loss_m1},
        {"loss_ms", check_loss_ms},
        {"loss_ce", check_loss_ce},
        {"loss_supervised", check_loss_supervised},
        {"loss_unsupervised", check_loss_unsupervised},
    };
    return r;
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> n;
        for (const auto& [name, _] : registry()) n.push_back(name);
        return n;
    }();
    return names;
}

GradcheckResult run_gradcheck(const std::string& module, std::uint64_t seed) {
    for (std::size_t i = 0; i < registry().size(); ++i) {
        if (registry()[i].first == module) {
            Rng rng(seed * 0x9E3779B97F4A7C15ull + i + 1);
            return registry()[i].second(rng);
        }
    }
    throw InvalidArgument("gradcheck: unknown module '" + module + "'");
}

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed) {
    std::vector<GradcheckResult> out;
    for (const auto& name : gradcheck_modules()) out.push_back(run_gradcheck(name, seed));
    return out;
}

}  // namespace widecorrect
