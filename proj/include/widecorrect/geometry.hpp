#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace widecorrect {

// Channel-major C x H x W storage shared by the planar domain types.
template <typename T>
struct Planes {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Planes() = default;
    Planes(int c, int h, int w, T fill = T{})
        : channels(c), height(h), width(w),
          data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * height + y) * width + x;
    }
    T& at(int c, int y, int x) { return data[index(c, y, x)]; }
    const T& at(int c, int y, int x) const { return data[index(c, y, x)]; }
    std::span<T> plane(int c) { return {data.data() + c * plane_size(), plane_size()}; }
    std::span<const T> plane(int c) const { return {data.data() + c * plane_size(), plane_size()}; }

    bool same_shape(const Planes& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
    friend bool operator==(const Planes&, const Planes&) = default;
};

/// Backward correction flow: the corrected pixel p samples the distorted
/// image at p + (dx(p), dy(p)). Channel 0 is horizontal, channel 1 vertical.
struct FlowMap : Planes<double> {
    FlowMap() = default;
    FlowMap(int h, int w, double fill = 0.0) : Planes(2, h, w, fill) {}

    double& dx(int y, int x) { return at(0, y, x); }
    double dx(int y, int x) const { return at(0, y, x); }
    double& dy(int y, int x) { return at(1, y, x); }
    double dy(int y, int x) const { return at(1, y, x); }

    /// Bilinear sample at a continuous position (clamped to the frame).
    std::array<double, 2> sample(double x, double y) const;
    bool all_finite() const;
};

/// Per-component three-way class map: 0 = strong negative, 1 = slight, 2 = strong positive.
struct SegMask : Planes<std::uint8_t> {
    SegMask() = default;
    SegMask(int h, int w, std::uint8_t fill = 1) : Planes(2, h, w, fill) {}
};

struct BinaryMask : Planes<std::uint8_t> {
    BinaryMask() = default;
    BinaryMask(int h, int w, std::uint8_t fill = 0) : Planes(1, h, w, fill) {}
};

struct WeightMask : Planes<double> {
    WeightMask() = default;
    WeightMask(int h, int w, double fill = 1.0) : Planes(1, h, w, fill) {}
};

/// Values nominally in [0,1]; C is 1 or 3.
struct Image : Planes<double> {
    Image() = default;
    Image(int c, int h, int w, double fill = 0.0) : Planes(c, h, w, fill) {}
};

struct Point {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point&, const Point&) = default;
};

inline constexpr double kDefaultDelta = 5.0;
inline constexpr double kDefaultFaceWeight = 3.0;
inline constexpr double kDefaultBackgroundWeight = 1.0;

SegMask flow_to_seg(const FlowMap& flow, double delta = kDefaultDelta);

/// Backward bilinear warp with edge-clamped source coordinates.
Image warp_image(const Image& image, const FlowMap& flow);

struct InversionOptions {
    int max_iterations = 25;
    double tolerance = 0.01;  // residual (px) below which a point counts as converged
};

struct InvertedPoint {
    Point point;
    bool converged = false;
    int iterations = 0;
};

/// Solves p + F(p) = q for each q by fixed-point iteration p <- q - F(p).
std::vector<InvertedPoint> invert_flow_at_points(const FlowMap& flow,
                                                 std::span<const Point> points,
                                                 const InversionOptions& options = {});

/// Forward map of points through the backward flow: q = p + F(p).
std::vector<Point> apply_flow_to_points(const FlowMap& flow, std::span<const Point> points);

struct SobelResponse {
    Planes<double> gx;
    Planes<double> gy;
};

/// 3x3 Sobel per channel with replicate padding.
SobelResponse sobel(const Planes<double>& field);

/// Adjoint of sobel: returns Gx^T(gx) + Gy^T(gy).
Planes<double> sobel_adjoint(const Planes<double>& gx, const Planes<double>& gy);

WeightMask make_weight_mask(const BinaryMask& face_mask,
                            double w_face = kDefaultFaceWeight,
                            double w_bg = kDefaultBackgroundWeight);

}  // namespace widecorrect
