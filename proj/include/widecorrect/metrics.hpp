#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "widecorrect/geometry.hpp"
#include "widecorrect/msunet.hpp"
#include "widecorrect/synthdata.hpp"

namespace widecorrect {

/// 100 * (1 - mean_i |slope(d_{i-1}, d_i) - slope(g_0, g_1)|). Point sets whose
/// reference line is steeper than 45 degrees are rotated by 90 degrees first.
double line_acc(std::span<const Point> corrected, const std::array<Point, 2>& reference);

/// Both sets are centered on their centroids and scaled to unit mean squared
/// norm; the score is 100 * mean of the dot products of corresponding vectors.
double shape_acc(std::span<const Point> corrected, std::span<const Point> reference);

/// Mean per-pixel Euclidean end-point error.
double end_point_error(const FlowMap& pred, const FlowMap& gt);

struct SampleMetrics {
    std::string id;
    std::optional<double> lineacc;
    std::optional<double> shapeacc;
    std::optional<double> epe;
    int lines = 0;
    int faces = 0;
    int unconverged_points = 0;
    friend bool operator==(const SampleMetrics&, const SampleMetrics&) = default;
};

struct MetricReport {
    double lineacc = 0.0;   // mean over all scored lines
    double shapeacc = 0.0;  // mean over all scored faces
    double epe = 0.0;       // mean over samples with ground truth
    int line_count = 0;
    int face_count = 0;
    int epe_count = 0;
    std::vector<SampleMetrics> samples;  // sorted by id
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
    std::string to_csv() const;
    friend bool operator==(const MetricReport&, const MetricReport&) = default;
};

/// Scores predicted flows (flows[i] belongs to samples[i]). Annotated points
/// are mapped into the corrected frame with invert_flow_at_points.
MetricReport evaluate_flows(std::span<const Sample> samples, std::span<const FlowMap> flows);

template <typename T>
MetricReport evaluate_dataset(std::span<const Sample> samples, const ModelWeights<T>& weights,
                              const ModelConfig& config, int workers = 1);

}  // namespace widecorrect
