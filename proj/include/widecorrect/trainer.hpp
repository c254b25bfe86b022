#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "widecorrect/losses.hpp"
#include "widecorrect/metrics.hpp"
#include "widecorrect/msunet.hpp"
#include "widecorrect/synthdata.hpp"

namespace widecorrect {

struct AugmentConfig {
    double noise_max = 0.03;   // upper bound of the Gaussian noise sigma
    double blur_max = 1.2;     // upper bound of the Gaussian blur sigma
    double sharpen_max = 0.5;  // upper bound of the unsharp-mask amount
};

struct TrainConfig {
    ModelConfig model;
    double lr = 1e-4;
    double weight_decay = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int pretrain_epochs = 20;
    int main_epochs = 100;
    int batch_size = 4;
    LossWeights loss;
    double unsup_weight = 1.0;
    AugmentConfig augment;
    std::uint64_t seed = 0;
    double val_frac = 0.1;
    int checkpoint_every = 0;  // epochs; 0 disables periodic checkpoints
    std::string checkpoint_prefix;
    bool supervised_only = false;
    bool use_drc = true;
    bool use_rc = true;
    int workers = 1;

    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
/// Keys mirror the TrainConfig fields; missing keys keep defaults, unknown keys are rejected.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainState {
    ModelWeights<float> weights;
    ModelWeights<float> m;
    ModelWeights<float> v;
    std::int64_t step = 0;  // optimizer steps since the moments were last reset
    int epoch = 0;
    std::mt19937_64 rng;

    static TrainState fresh(const ModelConfig& config, std::uint64_t seed);
    void reset_moments();
};

/// Two photometric views (blur, unsharp mask, additive noise, clip to [0, 1]).
std::pair<Image, Image> augment_pair(const Image& image, const AugmentConfig& config, std::mt19937_64& rng);
Image augment_view(const Image& image, const AugmentConfig& config, std::mt19937_64& rng);

struct StepResult {
    double loss = 0.0;                // mean over the batch
    std::array<double, 3> terms{};    // supervised: m1, ms, ce; unsupervised: rc, drc1, drc2
};

/// Gradient of the mean batch loss, without an optimizer update.
struct BatchGradient {
    ModelWeights<float> grad;
    StepResult result;
};

enum class SupervisedMode { Full, FlowOnly };

BatchGradient supervised_gradient(std::span<const Sample* const> batch, const ModelWeights<float>& weights,
                                  const TrainConfig& config, SupervisedMode mode = SupervisedMode::Full);
/// Each sample contributes two augmented branches evaluated on the same weights;
/// `aug_seeds[i]` drives the augmentation of sample i.
BatchGradient unsupervised_gradient(std::span<const Sample* const> batch, std::span<const std::uint64_t> aug_seeds,
                                    const ModelWeights<float>& weights, const TrainConfig& config);

/// AdamW with decoupled weight decay; tensors whose trainable flag is false stay untouched.
void adam_update(TrainState& state, const ModelWeights<float>& grad, const TrainConfig& config,
                 const std::vector<bool>& trainable = {});

StepResult train_step_supervised(std::span<const Sample* const> batch, TrainState& state, const TrainConfig& config,
                                 SupervisedMode mode = SupervisedMode::Full);
StepResult train_step_unsupervised(std::span<const Sample* const> batch, TrainState& state,
                                   const TrainConfig& config);

struct EpochRecord {
    int epoch = 0;
    std::string phase;  // "pretrain" or "main"
    std::optional<double> loss_s;
    std::optional<double> loss_u;
    std::optional<double> epe;
    std::optional<double> lineacc;
    std::optional<double> shapeacc;

    nlohmann::json to_json() const;
};

struct TrainResult {
    TrainState state;
    std::vector<EpochRecord> log;
    std::vector<std::size_t> validation_indices;  // into the labeled set
    std::optional<MetricReport> initial_validation;
    std::optional<MetricReport> final_validation;
};

/// Order of labeled (true) and unlabeled (false) batches within one epoch:
/// the labeled ones are spread evenly among the unlabeled ones.
std::vector<bool> interleave_batches(std::size_t labeled_batches, std::size_t unlabeled_batches);

/// Step 1 pretrains the flow branch on labeled data (segmentation head frozen);
/// step 2 restarts the optimizer moments and alternates homogeneous labeled and
/// unlabeled batches. `on_epoch` receives every log record as it is produced.
TrainResult run_training(std::span<const Sample> labeled, std::span<const Sample> unlabeled,
                         const TrainConfig& config,
                         const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace widecorrect
