#include "widecorrect/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "widecorrect/errors.hpp"

namespace widecorrect {

namespace {

// Below this update size the fixed-point iteration has reached float64 noise.
constexpr double kStallUpdate = 1e-11;

struct BilinearTap {
    int x0, x1, y0, y1;
    double wx, wy;
};

BilinearTap bilinear_tap(double x, double y, int width, int height) {
    x = std::clamp(x, 0.0, static_cast<double>(width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(height - 1));
    BilinearTap t{};
    t.x0 = static_cast<int>(std::floor(x));
    t.y0 = static_cast<int>(std::floor(y));
    t.x1 = std::min(t.x0 + 1, width - 1);
    t.y1 = std::min(t.y0 + 1, height - 1);
    t.wx = x - t.x0;
    t.wy = y - t.y0;
    return t;
}

double interpolate(std::span<const double> plane, int width, const BilinearTap& t) {
    const double v00 = plane[static_cast<std::size_t>(t.y0) * width + t.x0];
    const double v01 = plane[static_cast<std::size_t>(t.y0) * width + t.x1];
    const double v10 = plane[static_cast<std::size_t>(t.y1) * width + t.x0];
    const double v11 = plane[static_cast<std::size_t>(t.y1) * width + t.x1];
    const double top = v00 + t.wx * (v01 - v00);
    const double bottom = v10 + t.wx * (v11 - v10);
    return top + t.wy * (bottom - top);
}

constexpr int kSobelX[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
constexpr int kSobelY[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};

}  // namespace

std::array<double, 2> FlowMap::sample(double x, double y) const {
    const BilinearTap t = bilinear_tap(x, y, width, height);
    return {interpolate(plane(0), width, t), interpolate(plane(1), width, t)};
}

bool FlowMap::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

SegMask flow_to_seg(const FlowMap& flow, double delta) {
    if (!(delta > 0.0)) throw InvalidArgument("flow_to_seg: delta must be positive");
    if (!flow.all_finite()) throw InvalidArgument("flow_to_seg: flow contains non-finite entries");
    SegMask mask(flow.height, flow.width);
    for (std::size_t i = 0; i < flow.data.size(); ++i) {
        const double f = flow.data[i];
        mask.data[i] = f <= -delta ? 0 : (f >= delta ? 2 : 1);
    }
    return mask;
}

Image warp_image(const Image& image, const FlowMap& flow) {
    if (image.height != flow.height || image.width != flow.width) {
        throw InvalidArgument("warp_image: image is " + std::to_string(image.height) + "x" +
                              std::to_string(image.width) + " but flow is " +
                              std::to_string(flow.height) + "x" + std::to_string(flow.width));
    }
    Image out(image.channels, image.height, image.width);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const BilinearTap t = bilinear_tap(x + flow.dx(y, x), y + flow.dy(y, x),
                                               image.width, image.height);
            for (int c = 0; c < image.channels; ++c) {
                out.at(c, y, x) = interpolate(image.plane(c), image.width, t);
            }
        }
    }
    return out;
}

std::vector<InvertedPoint> invert_flow_at_points(const FlowMap& flow,
                                                 std::span<const Point> points,
                                                 const InversionOptions& options) {
    std::vector<InvertedPoint> result;
    result.reserve(points.size());
    for (const Point& q : points) {
        InvertedPoint r{q, false, 0};
        Point p = q;
        for (int it = 0; it < options.max_iterations; ++it) {
            const auto f = flow.sample(p.x, p.y);
            const Point next{q.x - f[0], q.y - f[1]};
            const double update = std::hypot(next.x - p.x, next.y - p.y);
            p = next;
            r.iterations = it + 1;
            if (update < kStallUpdate) break;
        }
        const auto f = flow.sample(p.x, p.y);
        const double residual = std::hypot(p.x + f[0] - q.x, p.y + f[1] - q.y);
        r.point = p;
        r.converged = residual <= options.tolerance;
        result.push_back(r);
    }
    return result;
}

std::vector<Point> apply_flow_to_points(const FlowMap& flow, std::span<const Point> points) {
    std::vector<Point> out;
    out.reserve(points.size());
    for (const Point& p : points) {
        const auto f = flow.sample(p.x, p.y);
        out.push_back({p.x + f[0], p.y + f[1]});
    }
    return out;
}

SobelResponse sobel(const Planes<double>& field) {
    if (field.height < 3 || field.width < 3) {
        throw InvalidArgument("sobel: field must be at least 3x3");
    }
    const int h = field.height, w = field.width;
    SobelResponse r{Planes<double>(field.channels, h, w), Planes<double>(field.channels, h, w)};
    for (int c = 0; c < field.channels; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double sx = 0.0, sy = 0.0;
                for (int a = 0; a < 3; ++a) {
                    const int yy = std::clamp(y + a - 1, 0, h - 1);
                    for (int b = 0; b < 3; ++b) {
                        const int xx = std::clamp(x + b - 1, 0, w - 1);
                        const double v = field.at(c, yy, xx);
                        sx += kSobelX[a][b] * v;
                        sy += kSobelY[a][b] * v;
                    }
                }
                r.gx.at(c, y, x) = sx;
                r.gy.at(c, y, x) = sy;
            }
        }
    }
    return r;
}

Planes<double> sobel_adjoint(const Planes<double>& gx, const Planes<double>& gy) {
    if (!gx.same_shape(gy)) throw InvalidArgument("sobel_adjoint: shape mismatch");
    const int h = gx.height, w = gx.width;
    Planes<double> out(gx.channels, h, w);
    for (int c = 0; c < gx.channels; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double ux = gx.at(c, y, x), uy = gy.at(c, y, x);
                for (int a = 0; a < 3; ++a) {
                    const int yy = std::clamp(y + a - 1, 0, h - 1);
                    for (int b = 0; b < 3; ++b) {
                        const int xx = std::clamp(x + b - 1, 0, w - 1);
                        out.at(c, yy, xx) += kSobelX[a][b] * ux + kSobelY[a][b] * uy;
                    }
                }
            }
        }
    }
    return out;
}

WeightMask make_weight_mask(const BinaryMask& face_mask, double w_face, double w_bg) {
    if (!(w_bg > 0.0) || w_face < w_bg) {
        throw InvalidArgument("make_weight_mask: need w_face >= w_bg > 0");
    }
    WeightMask m(face_mask.height, face_mask.width, w_bg);
    for (std::size_t i = 0; i < face_mask.data.size(); ++i) {
        const auto v = face_mask.data[i];
        if (v > 1) throw InvalidArgument("make_weight_mask: face mask is not binary");
        if (v == 1) m.data[i] = w_face;
    }
    return m;
}

}  // namespace widecorrect
