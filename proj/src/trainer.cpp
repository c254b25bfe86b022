#include "widecorrect/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "widecorrect/checkpoint.hpp"
#include "widecorrect/errors.hpp"
#include "widecorrect/parallel.hpp"

namespace widecorrect {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    auto fail = [](const std::string& why) { throw InvalidArgument("TrainConfig: " + why); };
    if (!(lr > 0.0)) fail("lr must be positive");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
    if (!(eps > 0.0)) fail("eps must be positive");
    if (pretrain_epochs < 0 || main_epochs < 0) fail("epochs must be non-negative");
    if (batch_size < 1) fail("batch_size must be at least 1");
    if (!(unsup_weight >= 0.0)) fail("unsup_weight must be non-negative");
    if (!(augment.noise_max >= 0.0) || !(augment.blur_max >= 0.0) || !(augment.sharpen_max >= 0.0)) {
        fail("augmentation bounds must be non-negative");
    }
    if (!(val_frac >= 0.0 && val_frac < 1.0)) fail("val_frac must be in [0, 1)");
    if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
    if (checkpoint_every > 0 && checkpoint_prefix.empty()) fail("checkpoint_every needs checkpoint_prefix");
    if (workers < 1) fail("workers must be at least 1");
}

json train_config_to_json(const TrainConfig& c) {
    return {{"model", config_to_json(c.model)},
            {"lr", c.lr},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"pretrain_epochs", c.pretrain_epochs},
            {"main_epochs", c.main_epochs},
            {"batch_size", c.batch_size},
            {"lambda1", c.loss.lambda1},
            {"lambda2", c.loss.lambda2},
            {"lambda_rc", c.loss.lambda_rc},
            {"delta", c.loss.delta},
            {"w_face", c.loss.w_face},
            {"w_bg", c.loss.w_bg},
            {"unsup_weight", c.unsup_weight},
            {"augment",
             {{"noise_max", c.augment.noise_max},
              {"blur_max", c.augment.blur_max},
              {"sharpen_max", c.augment.sharpen_max}}},
            {"seed", c.seed},
            {"val_frac", c.val_frac},
            {"checkpoint_every", c.checkpoint_every},
            {"checkpoint_prefix", c.checkpoint_prefix},
            {"supervised_only", c.supervised_only},
            {"use_drc", c.use_drc},
            {"use_rc", c.use_rc}};
}

TrainConfig train_config_from_json(const json& j) {
    if (!j.is_object()) throw InvalidArgument("train config must be a JSON object");
    static const std::set<std::string> known = {
        "model",        "lr",        "weight_decay",    "beta1",          "beta2",        "eps",
        "pretrain_epochs", "main_epochs", "batch_size",  "lambda1",        "lambda2",      "lambda_rc",
        "delta",        "w_face",    "w_bg",            "unsup_weight",   "augment",      "seed",
        "val_frac",     "checkpoint_every", "checkpoint_prefix", "supervised_only", "use_drc", "use_rc"};
    for (const auto& [key, _] : j.items()) {
        if (!known.contains(key)) throw InvalidArgument("train config: unknown key '" + key + "'");
    }
    TrainConfig c;
    try {
        auto get = [](const json& obj, const char* key, auto& field) {
            if (obj.contains(key)) field = obj.at(key).get<std::remove_reference_t<decltype(field)>>();
        };
        if (j.contains("model")) c.model = config_from_json(j.at("model"));
        get(j, "lr", c.lr);
        get(j, "weight_decay", c.weight_decay);
        get(j, "beta1", c.beta1);
        get(j, "beta2", c.beta2);
        get(j, "eps", c.eps);
        get(j, "pretrain_epochs", c.pretrain_epochs);
        get(j, "main_epochs", c.main_epochs);
        get(j, "batch_size", c.batch_size);
        get(j, "lambda1", c.loss.lambda1);
        get(j, "lambda2", c.loss.lambda2);
        get(j, "lambda_rc", c.loss.lambda_rc);
        get(j, "delta", c.loss.delta);
        get(j, "w_face", c.loss.w_face);
        get(j, "w_bg", c.loss.w_bg);
        get(j, "unsup_weight", c.unsup_weight);
        if (j.contains("augment")) {
            const json& a = j.at("augment");
            for (const auto& [key, _] : a.items()) {
                if (key != "noise_max" && key != "blur_max" && key != "sharpen_max") {
                    throw InvalidArgument("train config: unknown augment key '" + key + "'");
                }
            }
            get(a, "noise_max", c.augment.noise_max);
            get(a, "blur_max", c.augment.blur_max);
            get(a, "sharpen_max", c.augment.sharpen_max);
        }
        get(j, "seed", c.seed);
        get(j, "val_frac", c.val_frac);
        get(j, "checkpoint_every", c.checkpoint_every);
        get(j, "checkpoint_prefix", c.checkpoint_prefix);
        get(j, "supervised_only", c.supervised_only);
        get(j, "use_drc", c.use_drc);
        get(j, "use_rc", c.use_rc);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// State

TrainState TrainState::fresh(const ModelConfig& config, std::uint64_t seed) {
    TrainState s;
    s.weights = init_weights<float>(config, seed);
    s.rng.seed(seed ^ 0xA0761D6478BD642Full);
    s.reset_moments();
    return s;
}

void TrainState::reset_moments() {
    m = ModelWeights<float>(weights.schema());
    v = ModelWeights<float>(weights.schema());
    step = 0;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

Image gaussian_blur(const Image& img, double sigma) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= sum;
    Image tmp(img.channels, img.height, img.width), out(img.channels, img.height, img.width);
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) acc += k[i + r] * img.at(c, y, std::clamp(x + i, 0, img.width - 1));
                tmp.at(c, y, x) = acc;
            }
        }
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(c, std::clamp(y + i, 0, img.height - 1), x);
                out.at(c, y, x) = acc;
            }
        }
    }
    return out;
}

constexpr double kUnsharpSigma = 1.0;

}  // namespace

Image augment_view(const Image& image, const AugmentConfig& config, std::mt19937_64& rng) {
    const double blur = std::uniform_real_distribution<double>(0.0, config.blur_max)(rng);
    const double amount = std::uniform_real_distribution<double>(0.0, config.sharpen_max)(rng);
    const double noise = std::uniform_real_distribution<double>(0.0, config.noise_max)(rng);
    Image out = blur > 0.0 ? gaussian_blur(image, blur) : image;
    if (amount > 0.0) {
        const Image soft = gaussian_blur(out, kUnsharpSigma);
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += amount * (out.data[i] - soft.data[i]);
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : out.data) v = std::clamp(v + noise * normal(rng), 0.0, 1.0);
    return out;
}

std::pair<Image, Image> augment_pair(const Image& image, const AugmentConfig& config, std::mt19937_64& rng) {
    Image a = augment_view(image, config, rng);
    Image b = augment_view(image, config, rng);
    return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Gradients and updates

namespace {

void check_image(const Sample& s, const ModelConfig& m) {
    if (s.distorted.height != m.input_h || s.distorted.width != m.input_w ||
        s.distorted.channels != m.input_channels) {
        throw InvalidArgument("sample " + s.id + " does not match the model input size");
    }
}

void scale_planes(Planes<double>& p, double s) {
    for (double& v : p.data) v *= s;
}

BatchGradient reduce(std::vector<ModelWeights<float>>& grads, const std::vector<StepResult>& results) {
    BatchGradient out{std::move(grads.front()), {}};
    auto dst = out.grad.flat();
    for (std::size_t i = 1; i < grads.size(); ++i) {
        const auto src = grads[i].flat();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    const double n = static_cast<double>(results.size());
    for (const StepResult& r : results) {
        out.result.loss += r.loss / n;
        for (int k = 0; k < 3; ++k) out.result.terms[k] += r.terms[k] / n;
    }
    return out;
}

}  // namespace

BatchGradient supervised_gradient(std::span<const Sample* const> batch, const ModelWeights<float>& weights,
                                  const TrainConfig& config, SupervisedMode mode) {
    if (batch.empty()) throw InvalidArgument("supervised_gradient: empty batch");
    for (const Sample* s : batch) {
        if (!s->labeled()) throw InvalidArgument("supervised batch contains unlabeled sample " + s->id);
        check_image(*s, config.model);
    }
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    std::vector<ModelWeights<float>> grads(batch.size());
    std::vector<StepResult> results(batch.size());
    parallel_for(batch.size(), config.workers, [&](std::size_t i) {
        const Sample& s = *batch[i];
        grads[i] = ModelWeights<float>(weights.schema());
        ForwardPass<float> pass(config.model, weights);
        const Prediction p = pass.run(s.distorted);
        FlowMap dflow(p.flow.height, p.flow.width);
        SegLogits dseg(p.seg.height, p.seg.width);
        SupervisedLoss l;
        if (mode == SupervisedMode::Full) {
            l = loss_supervised(p.flow, p.seg, *s.flow_gt, *s.face_mask, config.loss, &dflow, &dseg);
        } else {
            l = loss_flow_only(p.flow, *s.flow_gt, *s.face_mask, config.loss, &dflow);
        }
        scale_planes(dflow, inv_n);
        scale_planes(dseg, inv_n);
        pass.backward(dflow, dseg, grads[i]);
        results[i] = {l.total, {l.m1, l.ms, l.ce}};
    });
    return reduce(grads, results);
}

BatchGradient unsupervised_gradient(std::span<const Sample* const> batch, std::span<const std::uint64_t> aug_seeds,
                                    const ModelWeights<float>& weights, const TrainConfig& config) {
    if (batch.empty()) throw InvalidArgument("unsupervised_gradient: empty batch");
    if (aug_seeds.size() != batch.size()) throw InvalidArgument("unsupervised_gradient: one seed per sample");
    for (const Sample* s : batch) check_image(*s, config.model);
    const double scale = config.unsup_weight / static_cast<double>(batch.size());
    const UnsupervisedTerms terms{config.use_rc, config.use_drc};
    const std::uint64_t snapshot = weights.checksum();
    std::vector<ModelWeights<float>> grads(batch.size());
    std::vector<StepResult> results(batch.size());
    parallel_for(batch.size(), config.workers, [&](std::size_t i) {
        std::mt19937_64 rng(aug_seeds[i]);
        const auto [u1, u2] = augment_pair(batch[i]->distorted, config.augment, rng);
        grads[i] = ModelWeights<float>(weights.schema());
        // Both branches run on the one shared weight set.
        ForwardPass<float> branch1(config.model, weights), branch2(config.model, weights);
        const Prediction p1 = branch1.run(u1);
        const Prediction p2 = branch2.run(u2);
        FlowMap df1(p1.flow.height, p1.flow.width), df2(p1.flow.height, p1.flow.width);
        SegLogits ds1(p1.seg.height, p1.seg.width), ds2(p1.seg.height, p1.seg.width);
        const UnsupervisedLoss l =
            loss_unsupervised(p1.flow, p2.flow, p1.seg, p2.seg, config.loss, {&df1, &df2, &ds1, &ds2}, terms);
        for (Planes<double>* g : std::initializer_list<Planes<double>*>{&df1, &df2, &ds1, &ds2}) scale_planes(*g, scale);
        branch1.backward(df1, ds1, grads[i]);
        branch2.backward(df2, ds2, grads[i]);
        results[i] = {config.unsup_weight * l.total, {l.rc, l.drc1, l.drc2}};
    });
    if (weights.checksum() != snapshot) throw std::logic_error("siamese branches saw different weight snapshots");
    return reduce(grads, results);
}

void adam_update(TrainState& state, const ModelWeights<float>& grad, const TrainConfig& config,
                 const std::vector<bool>& trainable) {
    if (grad.schema() != state.weights.schema()) throw InvalidArgument("adam_update: gradient schema mismatch");
    if (!trainable.empty() && trainable.size() != grad.tensor_count()) {
        throw InvalidArgument("adam_update: trainable mask size mismatch");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(config.beta1, t), bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t k = 0; k < grad.tensor_count(); ++k) {
        if (!trainable.empty() && !trainable[k]) continue;
        auto w = state.weights.tensor(k), m = state.m.tensor(k), v = state.v.tensor(k);
        const auto g = grad.tensor(k);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            const double mi = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
            const double vi = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double update = (mi / bc1) / (std::sqrt(vi / bc2) + config.eps) + config.weight_decay * w[i];
            w[i] = static_cast<float>(w[i] - config.lr * update);
        }
    }
}

namespace {

std::vector<bool> flow_only_mask(const ModelWeights<float>& w) {
    std::vector<bool> mask(w.tensor_count());
    for (std::size_t k = 0; k < mask.size(); ++k) mask[k] = !w.schema()[k].name.starts_with("head.seg.");
    return mask;
}

}  // namespace

StepResult train_step_supervised(std::span<const Sample* const> batch, TrainState& state, const TrainConfig& config,
                                 SupervisedMode mode) {
    BatchGradient g = supervised_gradient(batch, state.weights, config, mode);
    adam_update(state, g.grad, config, mode == SupervisedMode::FlowOnly ? flow_only_mask(state.weights)
                                                                        : std::vector<bool>{});
    return g.result;
}

StepResult train_step_unsupervised(std::span<const Sample* const> batch, TrainState& state,
                                   const TrainConfig& config) {
    std::vector<std::uint64_t> seeds(batch.size());
    for (auto& s : seeds) s = state.rng();
    BatchGradient g = unsupervised_gradient(batch, seeds, state.weights, config);
    adam_update(state, g.grad, config);
    return g.result;
}

// ---------------------------------------------------------------------------
// Schedule

json EpochRecord::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return {{"epoch", epoch},   {"phase", phase},         {"loss_s", opt(loss_s)},    {"loss_u", opt(loss_u)},
            {"epe", opt(epe)}, {"lineacc", opt(lineacc)}, {"shapeacc", opt(shapeacc)}};
}

std::vector<bool> interleave_batches(std::size_t labeled_batches, std::size_t unlabeled_batches) {
    const std::size_t total = labeled_batches + unlabeled_batches;
    std::vector<bool> order(total);
    for (std::size_t k = 0; k < total; ++k) {
        order[k] = (k + 1) * labeled_batches / total > k * labeled_batches / total;
    }
    return order;
}

namespace {

std::vector<std::vector<const Sample*>> make_batches(std::span<const Sample> set, std::vector<std::size_t> idx,
                                                     std::mt19937_64& rng, int batch_size, bool labeled) {
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<const Sample*>> batches;
    for (std::size_t i = 0; i < idx.size(); i += static_cast<std::size_t>(batch_size)) {
        std::vector<const Sample*> b;
        for (std::size_t j = i; j < std::min(idx.size(), i + static_cast<std::size_t>(batch_size)); ++j) {
            const Sample* s = &set[idx[j]];
            // Unlabeled batches ignore any labels; labeled batches must be fully labeled.
            if (labeled && !s->labeled()) throw std::logic_error("batch would mix labeled and unlabeled samples");
            b.push_back(s);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace

TrainResult run_training(std::span<const Sample> labeled, std::span<const Sample> unlabeled,
                         const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch) {
    config.validate();
    if (labeled.empty()) throw InvalidArgument("run_training: the labeled set is empty");
    for (const Sample& s : labeled) {
        if (!s.labeled()) throw InvalidArgument("run_training: labeled set contains unlabeled sample " + s.id);
        check_image(s, config.model);
    }
    for (const Sample& s : unlabeled) check_image(s, config.model);

    TrainResult res;
    res.state = TrainState::fresh(config.model, config.seed);
    TrainState& st = res.state;

    std::vector<std::size_t> order(labeled.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 split_rng(config.seed ^ 0x5851F42D4C957F2Dull);
    std::shuffle(order.begin(), order.end(), split_rng);
    const std::size_t n_val =
        std::min(labeled.size() - 1, static_cast<std::size_t>(std::lround(config.val_frac * labeled.size())));
    res.validation_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::sort(res.validation_indices.begin(), res.validation_indices.end());
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(train_idx.begin(), train_idx.end());
    std::vector<Sample> val_set;
    for (std::size_t i : res.validation_indices) val_set.push_back(labeled[i]);
    std::vector<std::size_t> unl_idx(unlabeled.size());
    std::iota(unl_idx.begin(), unl_idx.end(), 0);
    const bool use_unlabeled =
        !config.supervised_only && (config.use_rc || config.use_drc) && !unlabeled.empty();

    auto validate = [&]() -> std::optional<MetricReport> {
        if (val_set.empty()) return std::nullopt;
        return evaluate_dataset<float>(val_set, st.weights, config.model, config.workers);
    };
    res.initial_validation = validate();
    res.final_validation = res.initial_validation;

    auto finish_epoch = [&](const char* phase, double ls, int nls, double lu, int nlu) {
        ++st.epoch;
        EpochRecord rec;
        rec.epoch = st.epoch;
        rec.phase = phase;
        if (nls) rec.loss_s = ls / nls;
        if (nlu) rec.loss_u = lu / nlu;
        res.final_validation = validate();
        if (res.final_validation) {
            rec.epe = res.final_validation->epe;
            if (res.final_validation->line_count) rec.lineacc = res.final_validation->lineacc;
            if (res.final_validation->face_count) rec.shapeacc = res.final_validation->shapeacc;
        }
        res.log.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (config.checkpoint_every > 0 && st.epoch % config.checkpoint_every == 0) {
            save_checkpoint(config.checkpoint_prefix + ".epoch" + std::to_string(st.epoch) + ".ckpt", config.model,
                            st.weights);
        }
    };

    const std::vector<bool> flow_mask = flow_only_mask(st.weights);
    for (int e = 0; e < config.pretrain_epochs; ++e) {
        double ls = 0.0;
        int nls = 0;
        for (const auto& b : make_batches(labeled, train_idx, st.rng, config.batch_size, true)) {
            BatchGradient g = supervised_gradient(b, st.weights, config, SupervisedMode::FlowOnly);
            adam_update(st, g.grad, config, flow_mask);
            ls += g.result.loss;
            ++nls;
        }
        finish_epoch("pretrain", ls, nls, 0.0, 0);
    }

    st.reset_moments();
    for (int e = 0; e < config.main_epochs; ++e) {
        const auto lb = make_batches(labeled, train_idx, st.rng, config.batch_size, true);
        const auto ub = use_unlabeled ? make_batches(unlabeled, unl_idx, st.rng, config.batch_size, false)
                                      : std::vector<std::vector<const Sample*>>{};
        double ls = 0.0, lu = 0.0;
        int nls = 0, nlu = 0;
        std::size_t li = 0, ui = 0;
        for (bool is_labeled : interleave_batches(lb.size(), ub.size())) {
            if (is_labeled) {
                ls += train_step_supervised(lb[li++], st, config).loss;
                ++nls;
            } else {
                lu += train_step_unsupervised(ub[ui++], st, config).loss;
                ++nlu;
            }
        }
        finish_epoch("main", ls, nls, lu, nlu);
    }
    return res;
}

}  // namespace widecorrect
