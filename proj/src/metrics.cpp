#include "widecorrect/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include "widecorrect/errors.hpp"
#include "widecorrect/parallel.hpp"

namespace widecorrect {

using nlohmann::json;

int workers_from_env() {
    const char* v = std::getenv("WIDECORRECT_NUM_WORKERS");
    if (!v) return 1;
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) return 1;
    return static_cast<int>(std::min(n, 256L));
}

double line_acc(std::span<const Point> corrected, const std::array<Point, 2>& reference) {
    if (corrected.size() < 3) throw InvalidArgument("line_acc: need at least 3 points");
    double gx = reference[1].x - reference[0].x, gy = reference[1].y - reference[0].y;
    const bool rotate = std::abs(gy) > std::abs(gx);
    // Rotation by 90 degrees: (x, y) -> (y, -x).
    auto frame = [rotate](Point p) { return rotate ? Point{p.y, -p.x} : p; };
    if (rotate) {
        const double t = gx;
        gx = gy;
        gy = -t;
    }
    if (std::abs(gx) < 1e-6) throw InvalidArgument("line_acc: degenerate reference end points");
    const double ref_slope = gy / gx;
    double sum = 0.0;
    for (std::size_t i = 1; i < corrected.size(); ++i) {
        const Point a = frame(corrected[i - 1]), b = frame(corrected[i]);
        const double dx = b.x - a.x;
        if (std::abs(dx) < 1e-6) {
            throw InvalidArgument("line_acc: consecutive points " + std::to_string(i - 1) + " and " +
                                  std::to_string(i) + " have no horizontal separation");
        }
        sum += std::abs((b.y - a.y) / dx - ref_slope);
    }
    return 100.0 * (1.0 - sum / static_cast<double>(corrected.size() - 1));
}

namespace {

std::vector<Point> normalized_shape(std::span<const Point> pts) {
    Point c{0, 0};
    for (const Point& p : pts) {
        c.x += p.x;
        c.y += p.y;
    }
    c.x /= static_cast<double>(pts.size());
    c.y /= static_cast<double>(pts.size());
    double ms = 0.0;
    for (const Point& p : pts) ms += (p.x - c.x) * (p.x - c.x) + (p.y - c.y) * (p.y - c.y);
    ms /= static_cast<double>(pts.size());
    if (!(ms > 1e-18)) throw InvalidArgument("shape_acc: all points coincide");
    const double inv = 1.0 / std::sqrt(ms);
    std::vector<Point> out;
    out.reserve(pts.size());
    for (const Point& p : pts) out.push_back({(p.x - c.x) * inv, (p.y - c.y) * inv});
    return out;
}

}  // namespace

double shape_acc(std::span<const Point> corrected, std::span<const Point> reference) {
    if (corrected.size() != reference.size()) throw InvalidArgument("shape_acc: point counts differ");
    if (corrected.size() < 3) throw InvalidArgument("shape_acc: need at least 3 points");
    const auto d = normalized_shape(corrected), g = normalized_shape(reference);
    double sum = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) sum += d[i].x * g[i].x + d[i].y * g[i].y;
    return 100.0 * sum / static_cast<double>(d.size());
}

double end_point_error(const FlowMap& pred, const FlowMap& gt) {
    if (!pred.same_shape(gt)) throw InvalidArgument("end_point_error: shape mismatch");
    const std::size_t hw = pred.plane_size();
    double sum = 0.0;
    for (std::size_t i = 0; i < hw; ++i) {
        sum += std::hypot(pred.data[i] - gt.data[i], pred.data[hw + i] - gt.data[hw + i]);
    }
    return sum / static_cast<double>(hw);
}

namespace {

struct SampleScore {
    SampleMetrics metrics;
    std::vector<double> lines;
    std::vector<double> faces;
    std::vector<std::string> warnings;
};

SampleScore score_sample(const Sample& s, const FlowMap& flow) {
    SampleScore out;
    out.metrics.id = s.id;
    if (s.distorted.height != flow.height || s.distorted.width != flow.width) {
        throw InvalidArgument("evaluate: flow for sample " + s.id + " has the wrong size");
    }
    if (s.flow_gt) out.metrics.epe = end_point_error(flow, *s.flow_gt);
    if (s.lines.empty() && s.faces.empty()) {
        out.warnings.push_back("sample " + s.id + " has no annotations; skipped for LineAcc/ShapeAcc");
        return out;
    }
    auto correct = [&](const std::vector<Point>& pts) {
        const auto inv = invert_flow_at_points(flow, pts);
        std::vector<Point> r;
        r.reserve(inv.size());
        for (const auto& p : inv) {
            r.push_back(p.point);
            if (!p.converged) ++out.metrics.unconverged_points;
        }
        return r;
    };
    for (std::size_t i = 0; i < s.lines.size(); ++i) {
        try {
            out.lines.push_back(line_acc(correct(s.lines[i].points), s.lines[i].reference));
        } catch (const InvalidArgument& e) {
            out.warnings.push_back("sample " + s.id + " line " + std::to_string(i) + " skipped: " + e.what());
        }
    }
    for (std::size_t i = 0; i < s.faces.size(); ++i) {
        try {
            out.faces.push_back(shape_acc(correct(s.faces[i].points), s.faces[i].reference));
        } catch (const InvalidArgument& e) {
            out.warnings.push_back("sample " + s.id + " face " + std::to_string(i) + " skipped: " + e.what());
        }
    }
    out.metrics.lines = static_cast<int>(out.lines.size());
    out.metrics.faces = static_cast<int>(out.faces.size());
    auto mean = [](const std::vector<double>& v) -> std::optional<double> {
        if (v.empty()) return std::nullopt;
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    out.metrics.lineacc = mean(out.lines);
    out.metrics.shapeacc = mean(out.faces);
    return out;
}

MetricReport reduce(std::vector<SampleScore> scores) {
    std::sort(scores.begin(), scores.end(),
              [](const SampleScore& a, const SampleScore& b) { return a.metrics.id < b.metrics.id; });
    MetricReport r;
    double line_sum = 0.0, face_sum = 0.0, epe_sum = 0.0;
    for (auto& s : scores) {
        for (double v : s.lines) line_sum += v;
        for (double v : s.faces) face_sum += v;
        r.line_count += static_cast<int>(s.lines.size());
        r.face_count += static_cast<int>(s.faces.size());
        if (s.metrics.epe) {
            epe_sum += *s.metrics.epe;
            ++r.epe_count;
        }
        for (auto& w : s.warnings) r.warnings.push_back(std::move(w));
        r.samples.push_back(std::move(s.metrics));
    }
    if (r.line_count) r.lineacc = line_sum / r.line_count;
    if (r.face_count) r.shapeacc = face_sum / r.face_count;
    if (r.epe_count) r.epe = epe_sum / r.epe_count;
    return r;
}

}  // namespace

MetricReport evaluate_flows(std::span<const Sample> samples, std::span<const FlowMap> flows) {
    if (samples.size() != flows.size()) throw InvalidArgument("evaluate_flows: one flow per sample required");
    std::vector<SampleScore> scores;
    scores.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) scores.push_back(score_sample(samples[i], flows[i]));
    return reduce(std::move(scores));
}

template <typename T>
MetricReport evaluate_dataset(std::span<const Sample> samples, const ModelWeights<T>& weights,
                              const ModelConfig& config, int workers) {
    std::vector<SampleScore> scores(samples.size());
    parallel_for(samples.size(), workers, [&](std::size_t i) {
        const Prediction p = forward<T>(samples[i].distorted, weights, config);
        scores[i] = score_sample(samples[i], p.flow);
    });
    return reduce(std::move(scores));
}

template MetricReport evaluate_dataset<float>(std::span<const Sample>, const ModelWeights<float>&,
                                              const ModelConfig&, int);
template MetricReport evaluate_dataset<double>(std::span<const Sample>, const ModelWeights<double>&,
                                               const ModelConfig&, int);

json MetricReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json per = json::array();
    for (const auto& s : samples) {
        per.push_back({{"id", s.id},
                       {"lineacc", opt(s.lineacc)},
                       {"shapeacc", opt(s.shapeacc)},
                       {"epe", opt(s.epe)},
                       {"lines", s.lines},
                       {"faces", s.faces},
                       {"unconverged_points", s.unconverged_points}});
    }
    return {{"lineacc", lineacc},       {"shapeacc", shapeacc},     {"epe", epe},
            {"line_count", line_count}, {"face_count", face_count}, {"epe_count", epe_count},
            {"samples", per},           {"warnings", warnings}};
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "id,lineacc,shapeacc,epe,lines,faces,unconverged_points\n";
    auto opt = [&os](const std::optional<double>& v) {
        if (v) os << *v;
    };
    for (const auto& s : samples) {
        os << s.id << ',';
        opt(s.lineacc);
        os << ',';
        opt(s.shapeacc);
        os << ',';
        opt(s.epe);
        os << ',' << s.lines << ',' << s.faces << ',' << s.unconverged_points << '\n';
    }
    return os.str();
}

}  // namespace widecorrect
