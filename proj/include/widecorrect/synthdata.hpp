#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "widecorrect/geometry.hpp"

namespace widecorrect {

/// A straight stroke through the whole frame: points x with n.x = offset.
struct Stroke {
    double angle = 0.0;  // direction of the line
    double offset = 0.0; // signed distance of the line from the image center
    double half_width = 0.8;
    std::array<double, 3> color{};
    bool annotated = false;
};

struct FaceDisk {
    Point center;
    double radius = 0.0;
    std::array<double, 3> color{};
};

/// Analytic ideal scene; color_at() evaluates it at any continuous position.
struct Scene {
    int height = 0;
    int width = 0;
    std::array<double, 3> background{};
    std::array<double, 3> gradient{};  // color change across the frame along gradient_angle
    double gradient_angle = 0.0;
    std::vector<Stroke> strokes;
    std::vector<FaceDisk> faces;
    std::vector<std::vector<Point>> lines;      // ideal points of annotated strokes
    std::vector<std::vector<Point>> landmarks;  // ideal landmarks per face

    std::array<double, 3> color_at(double x, double y) const;
    Point image_center() const { return {(width - 1) / 2.0, (height - 1) / 2.0}; }
    double half_diagonal() const;
};

inline constexpr int kLinePoints = 32;
inline constexpr int kFaceLandmarks = 16;

/// Fraction of the half-diagonal inside which annotations are placed.
inline constexpr double kLineRadius = 0.6;
inline constexpr double kFaceRadius = 0.5;

Scene gen_scene(std::uint64_t seed, int height, int width);

/// Image of the scene at its pixel centers, quantized to 8 bits.
Image render_scene(const Scene& scene);

struct FaceBulge {
    Point center;
    double sigma = 1.0;
    double strength = 0.0;
    friend bool operator==(const FaceBulge&, const FaceBulge&) = default;
};

/// Ideal-to-distorted map
///   D(p) = c + (p - c)(1 - k1 rho^2 + k2 rho^4) + sum_f b_f (p - c_f) exp(-|p - c_f|^2 / (2 s_f^2)),
/// rho = |p - c| / R with R the half-diagonal of the frame.
struct DistortionParams {
    double k1 = 0.0;
    double k2 = 0.0;
    Point center;
    double norm_radius = 1.0;
    std::vector<FaceBulge> bulges;

    Point apply(Point p) const;
    /// Row-major 2x2 Jacobian of apply at p.
    std::array<double, 4> jacobian(Point p) const;
    /// Newton solve of apply(p) = q.
    Point invert(Point q) const;
    friend bool operator==(const DistortionParams&, const DistortionParams&) = default;
};

DistortionParams identity_distortion(const Scene& scene);
/// Default-strength random distortion for a scene.
DistortionParams sample_distortion(const Scene& scene, std::uint64_t seed);
/// Throws InvalidArgument unless det J > 0 on a grid covering the frame and the
/// preimage of the frame.
void check_invertible(const DistortionParams& params, int height, int width);

struct LineAnnotation {
    std::vector<Point> points;       // distorted image coordinates
    std::array<Point, 2> reference;  // ideal end points
};

struct FaceAnnotation {
    std::vector<Point> points;     // distorted image coordinates
    std::vector<Point> reference;  // ideal landmark positions
};

struct Sample {
    std::string id;
    Image distorted;
    std::optional<FlowMap> flow_gt;
    std::optional<BinaryMask> face_mask;
    std::vector<LineAnnotation> lines;
    std::vector<FaceAnnotation> faces;
    std::optional<DistortionParams> params;

    bool labeled() const { return flow_gt.has_value() && face_mask.has_value(); }
};

/// Distorted image, ground-truth correction flow (float32-representable) and
/// annotations. Annotation points are mapped through the stored flow, q = p + F(p),
/// so that correcting them with the ground truth reproduces the ideal points.
Sample gen_distortion(const Scene& scene, const DistortionParams& params, std::string id);

struct GenConfig {
    int count = 0;
    double labeled_frac = 1.0;
    std::uint64_t seed = 0;
    int height = 64;
    int width = 48;
};

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index);
/// Sample i is labeled iff i < round(labeled_frac * count); unlabeled samples drop
/// flow and face mask but keep annotations.
std::vector<Sample> generate_dataset(const GenConfig& config);

inline constexpr int kDatasetVersion = 1;

void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

}  // namespace widecorrect
