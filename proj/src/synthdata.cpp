#include "widecorrect/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "widecorrect/errors.hpp"
#include "widecorrect/io.hpp"

namespace widecorrect {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double smoothstep(double e0, double e1, double x) {
    const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

double quantize(double v) { return std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::array<double, 3> random_color(std::mt19937_64& rng) {
    return {uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9)};
}

double scene_scale(int height, int width) { return std::min(height, width) / 48.0; }

// Parameter range [t0, t1] of center + n*offset + u*t inside the circle of
// radius `radius` and the frame shrunk by `margin`.
bool chord_range(Point foot, Point u, double radius_sq_left, int height, int width, double margin, double& t0,
                 double& t1) {
    if (radius_sq_left <= 0.0) return false;
    t0 = -std::sqrt(radius_sq_left);
    t1 = -t0;
    const double lo[2] = {margin, margin};
    const double hi[2] = {width - 1 - margin, height - 1 - margin};
    const double f[2] = {foot.x, foot.y};
    const double d[2] = {u.x, u.y};
    for (int k = 0; k < 2; ++k) {
        if (std::abs(d[k]) < 1e-12) {
            if (f[k] < lo[k] || f[k] > hi[k]) return false;
            continue;
        }
        double a = (lo[k] - f[k]) / d[k], b = (hi[k] - f[k]) / d[k];
        if (a > b) std::swap(a, b);
        t0 = std::max(t0, a);
        t1 = std::min(t1, b);
    }
    return t1 > t0;
}

std::vector<Point> face_landmarks(const FaceDisk& f) {
    std::vector<Point> pts;
    pts.reserve(kFaceLandmarks);
    for (int k = 0; k < 12; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 12.0;
        pts.push_back({f.center.x + f.radius * std::cos(a), f.center.y + f.radius * std::sin(a)});
    }
    const double r = f.radius;
    pts.push_back({f.center.x - 0.35 * r, f.center.y - 0.25 * r});  // eyes
    pts.push_back({f.center.x + 0.35 * r, f.center.y - 0.25 * r});
    pts.push_back({f.center.x, f.center.y + 0.1 * r});  // nose
    pts.push_back({f.center.x, f.center.y + 0.5 * r});  // mouth
    return pts;
}

}  // namespace

// ---------------------------------------------------------------------------
// Scene

double Scene::half_diagonal() const { return 0.5 * std::hypot(width - 1.0, height - 1.0); }

std::array<double, 3> Scene::color_at(double x, double y) const {
    const Point c = image_center();
    const double s = scene_scale(height, width);
    const double t = ((x - c.x) * std::cos(gradient_angle) + (y - c.y) * std::sin(gradient_angle)) / half_diagonal();
    std::array<double, 3> col;
    for (int k = 0; k < 3; ++k) col[k] = background[k] + gradient[k] * t;
    for (const Stroke& st : strokes) {
        const double nx = -std::sin(st.angle), ny = std::cos(st.angle);
        const double dist = std::abs(nx * (x - c.x) + ny * (y - c.y) - st.offset);
        const double cov = 1.0 - smoothstep(st.half_width * s - 2.4 * s, st.half_width * s + 2.4 * s, dist);
        for (int k = 0; k < 3; ++k) col[k] += 0.9 * cov * (st.color[k] - col[k]);
    }
    for (const FaceDisk& f : faces) {
        const double d = std::hypot(x - f.center.x, y - f.center.y);
        const double cov = 1.0 - smoothstep(f.radius - 2.4 * s, f.radius + 2.4 * s, d);
        if (cov <= 0.0) continue;
        for (int k = 0; k < 3; ++k) col[k] += cov * (f.color[k] - col[k]);
        const double r = f.radius, sig2 = 2.0 * std::pow(0.22 * r, 2);
        const Point features[3] = {{f.center.x - 0.35 * r, f.center.y - 0.25 * r},
                                   {f.center.x + 0.35 * r, f.center.y - 0.25 * r},
                                   {f.center.x, f.center.y + 0.5 * r}};
        double shade = 1.0;
        for (const Point& p : features) {
            shade *= 1.0 - 0.6 * std::exp(-(std::pow(x - p.x, 2) + std::pow(y - p.y, 2)) / sig2);
        }
        for (int k = 0; k < 3; ++k) col[k] *= 1.0 - cov * (1.0 - shade);
    }
    for (double& v : col) v = std::clamp(v, 0.0, 1.0);
    return col;
}

Scene gen_scene(std::uint64_t seed, int height, int width) {
    if (height < 16 || width < 16) throw InvalidArgument("gen_scene: frame must be at least 16x16");
    std::mt19937_64 rng(seed);
    Scene sc;
    sc.height = height;
    sc.width = width;
    const double s = scene_scale(height, width);
    const double big_r = sc.half_diagonal();
    const Point c = sc.image_center();
    sc.background = random_color(rng);
    for (auto& g : sc.gradient) g = uniform(rng, -0.15, 0.15);
    sc.gradient_angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);

    const int annotated = uniform_int(rng, 3, 5);
    while (static_cast<int>(sc.lines.size()) < annotated) {
        Stroke st;
        st.angle = uniform(rng, 0.0, std::numbers::pi);
        st.offset = uniform(rng, 0.15, 0.45) * big_r * (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
        st.half_width = uniform(rng, 0.6, 1.0);
        st.color = random_color(rng);
        st.annotated = true;
        const Point u{std::cos(st.angle), std::sin(st.angle)};
        const Point foot{c.x - std::sin(st.angle) * st.offset, c.y + std::cos(st.angle) * st.offset};
        const double rad = kLineRadius * big_r;
        double t0, t1;
        if (!chord_range(foot, u, rad * rad - st.offset * st.offset, height, width, 1.0, t0, t1)) continue;
        if (t1 - t0 < 0.5 * big_r) continue;
        std::vector<Point> pts(kLinePoints);
        for (int i = 0; i < kLinePoints; ++i) {
            const double t = t0 + (t1 - t0) * i / (kLinePoints - 1);
            pts[i] = {foot.x + u.x * t, foot.y + u.y * t};
        }
        sc.strokes.push_back(st);
        sc.lines.push_back(std::move(pts));
    }
    const int extra = uniform_int(rng, 1, 3);
    for (int i = 0; i < extra; ++i) {
        Stroke st;
        st.angle = uniform(rng, 0.0, std::numbers::pi);
        st.offset = uniform(rng, -0.9, 0.9) * big_r;
        st.half_width = uniform(rng, 0.6, 1.0);
        st.color = random_color(rng);
        sc.strokes.push_back(st);
    }

    const int wanted = uniform_int(rng, 1, 3);
    for (int attempt = 0; attempt < 400 && static_cast<int>(sc.faces.size()) < wanted; ++attempt) {
        FaceDisk f;
        f.radius = uniform(rng, 4.0, 6.5) * s;
        const double reach = kFaceRadius * big_r - f.radius;
        if (reach <= 0.0) break;
        const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        const double d = reach * std::sqrt(uniform(rng, 0.0, 1.0));
        f.center = {c.x + d * std::cos(a), c.y + d * std::sin(a)};
        if (f.center.x - f.radius < 4.0 || f.center.y - f.radius < 4.0 || f.center.x + f.radius > width - 5.0 ||
            f.center.y + f.radius > height - 5.0) {
            continue;
        }
        const bool overlaps = std::any_of(sc.faces.begin(), sc.faces.end(), [&](const FaceDisk& o) {
            return std::hypot(o.center.x - f.center.x, o.center.y - f.center.y) < o.radius + f.radius + 2.0 * s;
        });
        if (overlaps) continue;
        f.color = {uniform(rng, 0.6, 0.95), uniform(rng, 0.4, 0.75), uniform(rng, 0.3, 0.6)};
        sc.faces.push_back(f);
        sc.landmarks.push_back(face_landmarks(f));
    }
    return sc;
}

Image render_scene(const Scene& scene) {
    Image img(3, scene.height, scene.width);
    for (int y = 0; y < scene.height; ++y) {
        for (int x = 0; x < scene.width; ++x) {
            const auto col = scene.color_at(x, y);
            for (int k = 0; k < 3; ++k) img.at(k, y, x) = quantize(col[k]);
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Distortion

Point DistortionParams::apply(Point p) const {
    const double ux = p.x - center.x, uy = p.y - center.y;
    const double rho2 = (ux * ux + uy * uy) / (norm_radius * norm_radius);
    const double s = 1.0 - k1 * rho2 + k2 * rho2 * rho2;
    Point q{center.x + ux * s, center.y + uy * s};
    for (const FaceBulge& b : bulges) {
        const double vx = p.x - b.center.x, vy = p.y - b.center.y;
        const double e = std::exp(-(vx * vx + vy * vy) / (2.0 * b.sigma * b.sigma));
        q.x += b.strength * vx * e;
        q.y += b.strength * vy * e;
    }
    return q;
}

std::array<double, 4> DistortionParams::jacobian(Point p) const {
    const double ux = p.x - center.x, uy = p.y - center.y;
    const double r2 = norm_radius * norm_radius;
    const double rho2 = (ux * ux + uy * uy) / r2;
    const double s = 1.0 - k1 * rho2 + k2 * rho2 * rho2;
    const double ds = (-2.0 * k1 + 4.0 * k2 * rho2) / r2;  // ds/du = ds * u
    std::array<double, 4> j{s + ux * ds * ux, ux * ds * uy, uy * ds * ux, s + uy * ds * uy};
    for (const FaceBulge& b : bulges) {
        const double vx = p.x - b.center.x, vy = p.y - b.center.y;
        const double sig2 = b.sigma * b.sigma;
        const double e = b.strength * std::exp(-(vx * vx + vy * vy) / (2.0 * sig2));
        j[0] += e * (1.0 - vx * vx / sig2);
        j[1] += e * (-vx * vy / sig2);
        j[2] += e * (-vy * vx / sig2);
        j[3] += e * (1.0 - vy * vy / sig2);
    }
    return j;
}

Point DistortionParams::invert(Point q) const {
    Point p = q;
    auto residual = [&](Point x) {
        const Point d = apply(x);
        return Point{d.x - q.x, d.y - q.y};
    };
    Point r = residual(p);
    double rn = std::hypot(r.x, r.y);
    for (int it = 0; it < 100 && rn > 1e-12; ++it) {
        const auto j = jacobian(p);
        const double det = j[0] * j[3] - j[1] * j[2];
        const Point step{(j[3] * r.x - j[1] * r.y) / det, (-j[2] * r.x + j[0] * r.y) / det};
        double t = 1.0;
        Point next{p.x - step.x, p.y - step.y};
        Point rnext = residual(next);
        while (std::hypot(rnext.x, rnext.y) >= rn && t > 1e-6) {
            t *= 0.5;
            next = {p.x - t * step.x, p.y - t * step.y};
            rnext = residual(next);
        }
        if (std::hypot(rnext.x, rnext.y) >= rn) break;
        p = next;
        r = rnext;
        rn = std::hypot(r.x, r.y);
    }
    return p;
}

DistortionParams identity_distortion(const Scene& scene) {
    DistortionParams d;
    d.center = scene.image_center();
    d.norm_radius = scene.half_diagonal();
    return d;
}

DistortionParams sample_distortion(const Scene& scene, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    DistortionParams d = identity_distortion(scene);
    d.k1 = uniform(rng, 0.35, 0.45);
    d.k2 = uniform(rng, 0.10, 0.14);
    for (const FaceDisk& f : scene.faces) {
        d.bulges.push_back({f.center, 1.5 * f.radius, uniform(rng, 0.06, 0.12)});
    }
    return d;
}

void check_invertible(const DistortionParams& params, int height, int width) {
    if (!(params.norm_radius > 0.0)) throw InvalidArgument("distortion: norm_radius must be positive");
    for (const FaceBulge& b : params.bulges) {
        if (!(b.sigma > 0.0)) throw InvalidArgument("distortion: bulge sigma must be positive");
    }
    const double reach = 2.0 * params.norm_radius;
    const double x0 = params.center.x - reach, x1 = params.center.x + reach;
    const double y0 = params.center.y - reach, y1 = params.center.y + reach;
    for (double y = y0; y <= y1; y += 0.5) {
        for (double x = x0; x <= x1; x += 0.5) {
            const auto j = params.jacobian({x, y});
            const double det = j[0] * j[3] - j[1] * j[2];
            if (!(det > 0.0)) {
                char buf[160];
                std::snprintf(buf, sizeof buf, "distortion is not invertible: det J = %.4g at (%.1f, %.1f)", det, x,
                              y);
                throw InvalidArgument(buf);
            }
        }
    }
    // The frame must lie inside the image of the checked region.
    for (const Point q : {Point{0, 0}, Point{width - 1.0, 0}, Point{0, height - 1.0}, Point{width - 1.0, height - 1.0}}) {
        const Point p = params.invert(q);
        const Point back = params.apply(p);
        if (std::hypot(back.x - q.x, back.y - q.y) > 1e-6 || std::hypot(p.x - params.center.x, p.y - params.center.y) > reach) {
            throw InvalidArgument("distortion: frame corner has no preimage in the checked region");
        }
    }
}

Sample gen_distortion(const Scene& scene, const DistortionParams& params, std::string id) {
    check_invertible(params, scene.height, scene.width);
    const int h = scene.height, w = scene.width;
    Sample s;
    s.id = std::move(id);
    s.params = params;
    s.distorted = Image(3, h, w);
    BinaryMask mask(h, w);
    FlowMap flow(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const Point src = params.invert({static_cast<double>(x), static_cast<double>(y)});
            const auto col = scene.color_at(src.x, src.y);
            for (int k = 0; k < 3; ++k) s.distorted.at(k, y, x) = quantize(col[k]);
            for (const FaceDisk& f : scene.faces) {
                if (std::hypot(src.x - f.center.x, src.y - f.center.y) <= f.radius) mask.at(0, y, x) = 1;
            }
            const Point d = params.apply({static_cast<double>(x), static_cast<double>(y)});
            flow.dx(y, x) = static_cast<float>(d.x - x);
            flow.dy(y, x) = static_cast<float>(d.y - y);
        }
    }
    auto map_points = [&](const std::vector<Point>& ideal) {
        std::vector<Point> out = apply_flow_to_points(flow, ideal);
        for (const Point& q : out) {
            if (!(q.x >= 0.0 && q.y >= 0.0 && q.x <= w - 1.0 && q.y <= h - 1.0)) {
                throw InvalidArgument("gen_distortion: annotation point leaves the frame");
            }
        }
        return out;
    };
    for (const auto& line : scene.lines) {
        s.lines.push_back({map_points(line), {line.front(), line.back()}});
    }
    for (const auto& lm : scene.landmarks) s.faces.push_back({map_points(lm), lm});
    s.flow_gt = std::move(flow);
    s.face_mask = std::move(mask);
    return s;
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 of the combined key
    std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + index + 0x632BE59BD9B4E019ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::vector<Sample> generate_dataset(const GenConfig& config) {
    if (config.count < 0) throw InvalidArgument("generate_dataset: count must be non-negative");
    if (!(config.labeled_frac >= 0.0 && config.labeled_frac <= 1.0)) {
        throw InvalidArgument("generate_dataset: labeled fraction must be in [0, 1]");
    }
    const long labeled = std::lround(config.labeled_frac * config.count);
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(config.count));
    for (int i = 0; i < config.count; ++i) {
        const std::uint64_t ss = sample_seed(config.seed, static_cast<std::uint64_t>(i));
        const Scene scene = gen_scene(ss, config.height, config.width);
        char id[32];
        std::snprintf(id, sizeof id, "s%05d", i);
        Sample s = gen_distortion(scene, sample_distortion(scene, ss ^ 0xD1B54A32D192ED03ull), id);
        if (i >= labeled) {
            s.flow_gt.reset();
            s.face_mask.reset();
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset I/O

namespace {

json points_json(const std::vector<Point>& pts) {
    json a = json::array();
    for (const Point& p : pts) a.push_back({p.x, p.y});
    return a;
}

std::vector<Point> points_from(const json& a, const fs::path& path) {
    if (!a.is_array()) throw DataError(path.string(), "expected a point array");
    std::vector<Point> pts;
    for (const json& p : a) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
            throw DataError(path.string(), "malformed point");
        }
        pts.push_back({p[0].get<double>(), p[1].get<double>()});
        if (!std::isfinite(pts.back().x) || !std::isfinite(pts.back().y)) {
            throw DataError(path.string(), "non-finite point");
        }
    }
    return pts;
}

json params_json(const DistortionParams& d) {
    json bulges = json::array();
    for (const FaceBulge& b : d.bulges) {
        bulges.push_back({{"center", {b.center.x, b.center.y}}, {"sigma", b.sigma}, {"strength", b.strength}});
    }
    return {{"k1", d.k1},
            {"k2", d.k2},
            {"center", {d.center.x, d.center.y}},
            {"norm_radius", d.norm_radius},
            {"bulges", bulges}};
}

DistortionParams params_from(const json& j) {
    DistortionParams d;
    d.k1 = j.at("k1").get<double>();
    d.k2 = j.at("k2").get<double>();
    d.center = {j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>()};
    d.norm_radius = j.at("norm_radius").get<double>();
    for (const json& b : j.at("bulges")) {
        d.bulges.push_back({{b.at("center").at(0).get<double>(), b.at("center").at(1).get<double>()},
                            b.at("sigma").get<double>(),
                            b.at("strength").get<double>()});
    }
    return d;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw DataError(path.string(), "cannot open for writing");
    out << j.dump(1) << '\n';
    if (!out) throw DataError(path.string(), "write failed");
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(path.string(), "missing or unreadable file");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string(), std::string("malformed JSON: ") + e.what());
    }
}

void require_file(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw DataError(path.string(), "missing file");
}

}  // namespace

void write_dataset(const std::vector<Sample>& samples, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError(dir.string(), "cannot create directory: " + ec.message());
    json ids = json::array(), labeled = json::array();
    for (const Sample& s : samples) {
        if (s.id.empty() || s.id.find_first_of("/\\") != std::string::npos) {
            throw InvalidArgument("write_dataset: invalid sample id '" + s.id + "'");
        }
        io::write_png(dir / (s.id + ".png"), s.distorted);
        if (s.flow_gt) io::write_flo(dir / (s.id + ".flo"), *s.flow_gt);
        if (s.face_mask) {
            io::write_label_png(dir / (s.id + ".mask.png"), *s.face_mask);
            io::write_label_png(dir / (s.id + ".mask.preview.png"), *s.face_mask, 100);
        }
        json lines = json::array(), faces = json::array();
        for (const auto& l : s.lines) {
            lines.push_back({{"points", points_json(l.points)},
                             {"reference", points_json({l.reference[0], l.reference[1]})}});
        }
        for (const auto& f : s.faces) {
            faces.push_back({{"points", points_json(f.points)}, {"reference", points_json(f.reference)}});
        }
        json anno = {{"id", s.id}, {"lines", lines}, {"faces", faces}};
        if (s.params) anno["params"] = params_json(*s.params);
        write_json(dir / (s.id + ".anno.json"), anno);
        ids.push_back(s.id);
        labeled.push_back(s.labeled());
    }
    write_json(dir / "manifest.json", {{"version", kDatasetVersion}, {"ids", ids}, {"labeled", labeled}});
}

std::vector<Sample> read_dataset(const fs::path& dir) {
    const fs::path manifest_path = dir / "manifest.json";
    const json manifest = read_json(manifest_path);
    std::vector<Sample> out;
    try {
        const int version = manifest.at("version").get<int>();
        if (version != kDatasetVersion) {
            throw DataError(manifest_path.string(), "unsupported dataset version " + std::to_string(version));
        }
        const json& ids = manifest.at("ids");
        const json& labeled = manifest.at("labeled");
        if (!ids.is_array() || !labeled.is_array() || ids.size() != labeled.size()) {
            throw DataError(manifest_path.string(), "ids and labeled flags differ in length");
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            Sample s;
            s.id = ids[i].get<std::string>();
            if (s.id.empty() || s.id.find_first_of("/\\") != std::string::npos) {
                throw DataError(manifest_path.string(), "invalid sample id");
            }
            const fs::path png = dir / (s.id + ".png");
            require_file(png);
            s.distorted = io::read_png(png);
            if (labeled[i].get<bool>()) {
                const fs::path flo = dir / (s.id + ".flo"), mask = dir / (s.id + ".mask.png");
                require_file(flo);
                require_file(mask);
                FlowMap flow = io::read_flo(flo);
                if (flow.height != s.distorted.height || flow.width != s.distorted.width) {
                    throw DataError(flo.string(), "flow size differs from image size");
                }
                const auto labels = io::read_label_png(mask);
                if (labels.height != s.distorted.height || labels.width != s.distorted.width) {
                    throw DataError(mask.string(), "mask size differs from image size");
                }
                BinaryMask m(labels.height, labels.width);
                m.data = labels.data;
                if (std::any_of(m.data.begin(), m.data.end(), [](std::uint8_t v) { return v > 1; })) {
                    throw DataError(mask.string(), "face mask is not binary");
                }
                s.flow_gt = std::move(flow);
                s.face_mask = std::move(m);
            }
            const fs::path anno_path = dir / (s.id + ".anno.json");
            const json anno = read_json(anno_path);
            try {
                for (const json& l : anno.at("lines")) {
                    const auto ref = points_from(l.at("reference"), anno_path);
                    if (ref.size() != 2) throw DataError(anno_path.string(), "line reference needs two points");
                    s.lines.push_back({points_from(l.at("points"), anno_path), {ref[0], ref[1]}});
                }
                for (const json& f : anno.at("faces")) {
                    s.faces.push_back({points_from(f.at("points"), anno_path), points_from(f.at("reference"), anno_path)});
                }
                if (anno.contains("params")) s.params = params_from(anno.at("params"));
            } catch (const json::exception& e) {
                throw DataError(anno_path.string(), std::string("malformed annotation: ") + e.what());
            }
            out.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw DataError(manifest_path.string(), std::string("malformed manifest: ") + e.what());
    }
    return out;
}

}  // namespace widecorrect
