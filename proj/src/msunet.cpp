#include "widecorrect/msunet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "widecorrect/errors.hpp"

namespace widecorrect {

using nn::ConstMatMap;
using nn::MatMap;

namespace {

int largest_divisor_at_most(int n, int cap) {
    for (int d = std::min(n, cap); d > 1; --d) {
        if (n % d == 0) return d;
    }
    return 1;
}

bool is_norm_scale(const std::string& name) {
    const bool norm = name.find(".ln1.") != std::string::npos || name.find(".ln2.") != std::string::npos ||
                      name.find("norm.") != std::string::npos;
    return norm && name.ends_with(".weight");
}

std::string stage_prefix(const char* kind, int s) { return std::string(kind) + std::to_string(s) + "."; }
std::string block_prefix(const std::string& stage, int b) { return stage + "blk" + std::to_string(b) + "."; }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_scale() {
    ModelConfig c;
    c.input_h = 512;
    c.input_w = 384;
    c.base_channels = 96;
    c.stage_depths = {2, 2, 2};
    c.bottleneck_depth = 2;
    c.head_dim = 32;
    c.window_h = 8;
    c.window_w = 8;
    c.dcm_growth = 24;
    return c;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& why) { throw InvalidArgument("ModelConfig: " + why); };
    if (input_channels != 1 && input_channels != 3) fail("input_channels must be 1 or 3");
    if (patch_size < 1) fail("patch_size must be positive");
    if (input_h <= 0 || input_w <= 0) fail("input size must be positive");
    if (input_h % patch_size != 0 || input_w % patch_size != 0) fail("input size not divisible by patch_size");
    if (base_channels < 1) fail("base_channels must be positive");
    if (window_h < 1 || window_w < 1) fail("window must be positive");
    if (!(mlp_ratio > 0.0)) fail("mlp_ratio must be positive");
    if (dcm_growth < 1) fail("dcm_growth must be positive");
    if (head_dim < 0) fail("head_dim must be non-negative");
    if (head_dim == 0 && head_count < 1) fail("head_count must be positive");
    for (int d : stage_depths) {
        if (d < 0 || d % 2 != 0) fail("stage depths must be even and non-negative");
    }
    if (bottleneck_depth < 0 || bottleneck_depth % 2 != 0) fail("bottleneck depth must be even");
    const int scale = 1 << stage_count();
    const int gh = input_h / patch_size, gw = input_w / patch_size;
    if (gh % scale != 0 || gw % scale != 0) {
        fail("token grid " + std::to_string(gh) + "x" + std::to_string(gw) + " is not divisible by 2^" +
             std::to_string(stage_count()));
    }
    for (int s = 0; s <= stage_count(); ++s) {
        const int ch = base_channels << s;
        const int heads = head_dim > 0 ? ch / head_dim : head_count;
        if (heads < 1 || ch % heads != 0) {
            fail("stage " + std::to_string(s) + " channels " + std::to_string(ch) + " not divisible by heads");
        }
        if (std::lround(mlp_ratio * ch) < 1) fail("mlp hidden width rounds to zero");
    }
}

StageGeometry stage_geometry(const ModelConfig& config, int stage) {
    StageGeometry g;
    g.grid_h = (config.input_h / config.patch_size) >> stage;
    g.grid_w = (config.input_w / config.patch_size) >> stage;
    g.channels = config.base_channels << stage;
    g.heads = config.head_dim > 0 ? g.channels / config.head_dim : config.head_count;
    g.window_h = largest_divisor_at_most(g.grid_h, config.window_h);
    g.window_w = largest_divisor_at_most(g.grid_w, config.window_w);
    g.shift_h = g.window_h < g.grid_h ? g.window_h / 2 : 0;
    g.shift_w = g.window_w < g.grid_w ? g.window_w / 2 : 0;
    g.mlp_hidden = static_cast<int>(std::lround(config.mlp_ratio * g.channels));
    g.growth = config.dcm_growth << stage;
    return g;
}

// ---------------------------------------------------------------------------
// Schema and weights

std::size_t ParamSpec::numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

void append_block_schema(std::vector<ParamSpec>& schema, const std::string& prefix, const StageGeometry& g) {
    const int c = g.channels, gr = g.growth;
    auto add = [&](const std::string& name, std::vector<int> shape) {
        schema.push_back({prefix + name, std::move(shape)});
    };
    add("ln1.weight", {c});
    add("ln1.bias", {c});
    add("attn.q.weight", {c, c});
    add("attn.q.bias", {c});
    add("dcm.in.weight", {gr, c});
    add("dcm.in.bias", {gr});
    for (int r = 1; r <= 3; ++r) {
        const std::string n = std::to_string(r);
        add("dcm.dw" + n + ".weight", {gr * r, 3, 3});
        add("dcm.dw" + n + ".bias", {gr * r});
        add("dcm.pw" + n + ".weight", {gr, gr * r});
        add("dcm.pw" + n + ".bias", {gr});
    }
    add("dcm.out.weight", {c, 4 * gr});
    add("dcm.out.bias", {c});
    add("attn.k.weight", {c, c});
    add("attn.k.bias", {c});
    add("attn.v.weight", {c, c});
    add("attn.v.bias", {c});
    add("attn.rel_bias", {g.bias_table_rows(), g.heads});
    add("attn.proj.weight", {c, c});
    add("attn.proj.bias", {c});
    add("ln2.weight", {c});
    add("ln2.bias", {c});
    add("mlp.fc1.weight", {g.mlp_hidden, c});
    add("mlp.fc1.bias", {g.mlp_hidden});
    add("mlp.fc2.weight", {c, g.mlp_hidden});
    add("mlp.fc2.bias", {c});
}

std::vector<ParamSpec> parameter_schema(const ModelConfig& config) {
    config.validate();
    std::vector<ParamSpec> schema;
    const int c = config.base_channels, p = config.patch_size;
    schema.push_back({"embed.proj.weight", {c, p * p * config.input_channels}});
    schema.push_back({"embed.proj.bias", {c}});
    const int stages = config.stage_count();
    for (int s = 0; s < stages; ++s) {
        const StageGeometry g = stage_geometry(config, s);
        const std::string sp = stage_prefix("enc", s);
        for (int b = 0; b < config.stage_depths[s]; ++b) append_block_schema(schema, block_prefix(sp, b), g);
        schema.push_back({sp + "merge.weight", {2 * g.channels, 4 * g.channels}});
    }
    const StageGeometry gb = stage_geometry(config, stages);
    for (int b = 0; b < config.bottleneck_depth; ++b) append_block_schema(schema, block_prefix("bottleneck.", b), gb);
    for (int s = stages - 1; s >= 0; --s) {
        const StageGeometry g = stage_geometry(config, s);
        const int cin = g.channels * 2;
        const std::string sp = stage_prefix("dec", s);
        schema.push_back({sp + "expand.weight", {2 * cin, cin}});
        schema.push_back({sp + "sfb.weight", {g.channels, 2 * g.channels}});
        schema.push_back({sp + "sfb.bias", {g.channels}});
        for (int b = 0; b < config.stage_depths[s]; ++b) append_block_schema(schema, block_prefix(sp, b), g);
    }
    schema.push_back({"final.norm.weight", {c}});
    schema.push_back({"final.norm.bias", {c}});
    schema.push_back({"final.expand.weight", {p * p * c, c}});
    schema.push_back({"head.flow.weight", {ModelConfig::flow_channels, c}});
    schema.push_back({"head.flow.bias", {ModelConfig::flow_channels}});
    schema.push_back({"head.seg.weight", {ModelConfig::flow_channels * ModelConfig::seg_classes, c}});
    schema.push_back({"head.seg.bias", {ModelConfig::flow_channels * ModelConfig::seg_classes}});
    return schema;
}

template <typename T>
ModelWeights<T>::ModelWeights(std::vector<ParamSpec> schema) : schema_(std::move(schema)) {
    std::size_t total = 0;
    offsets_.reserve(schema_.size());
    for (std::size_t i = 0; i < schema_.size(); ++i) {
        if (!index_.emplace(schema_[i].name, i).second) {
            throw InvalidArgument("ModelWeights: duplicate parameter " + schema_[i].name);
        }
        offsets_.push_back(total);
        total += schema_[i].numel();
    }
    values_.assign(total, T(0));
}

template <typename T>
std::size_t ModelWeights<T>::index_of(std::string_view name) const {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("ModelWeights: no parameter named " + std::string(name));
    return it->second;
}

template <typename T>
bool ModelWeights<T>::contains(std::string_view name) const {
    return index_.contains(std::string(name));
}

template <typename T>
std::span<T> ModelWeights<T>::tensor(std::size_t i) {
    return {values_.data() + offsets_[i], schema_[i].numel()};
}

template <typename T>
std::span<const T> ModelWeights<T>::tensor(std::size_t i) const {
    return {values_.data() + offsets_[i], schema_[i].numel()};
}

template <typename T>
std::span<T> ModelWeights<T>::operator[](std::string_view name) {
    return tensor(index_of(name));
}

template <typename T>
std::span<const T> ModelWeights<T>::operator[](std::string_view name) const {
    return tensor(index_of(name));
}

template <typename T>
void ModelWeights<T>::set_zero() {
    std::fill(values_.begin(), values_.end(), T(0));
}

template <typename T>
bool ModelWeights<T>::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
std::uint64_t ModelWeights<T>::checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& spec : schema_) {
        mix(spec.name.data(), spec.name.size());
        for (int d : spec.shape) mix(&d, sizeof d);
    }
    for (T v : values_) {
        const float f = static_cast<float>(v);
        mix(&f, sizeof f);
    }
    return h;
}

template <typename T>
ModelWeights<T> init_weights(std::vector<ParamSpec> schema, std::uint64_t seed) {
    ModelWeights<T> w(std::move(schema));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    for (std::size_t i = 0; i < w.tensor_count(); ++i) {
        const std::string& name = w.schema()[i].name;
        auto values = w.tensor(i);
        if (name.ends_with(".bias") || name.ends_with(".rel_bias")) continue;
        if (is_norm_scale(name)) {
            std::fill(values.begin(), values.end(), T(1));
            continue;
        }
        for (T& v : values) {
            double x;
            do {
                x = normal(rng);
            } while (std::abs(x) > 0.04);
            v = static_cast<T>(x);
        }
    }
    return w;
}

template <typename T>
ModelWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed) {
    return init_weights<T>(parameter_schema(config), seed);
}

namespace msunet {

template <typename T>
const T* ParamScope<T>::operator()(std::string_view suffix) const {
    return (*weights)[prefix + std::string(suffix)].data();
}

template <typename T>
T* GradScope<T>::operator()(std::string_view suffix) const {
    if (!grads) return nullptr;
    return (*grads)[prefix + std::string(suffix)].data();
}

template <typename T>
bool FeatureMap<T>::consistent() const {
    if (data.rows() != static_cast<Eigen::Index>(grid_h) * grid_w) return false;
    if (layout == Layout::Windowed) {
        return window_h > 0 && window_w > 0 && grid_h % window_h == 0 && grid_w % window_w == 0;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Patch embedding

template <typename T>
Mat<T> extract_patches(const Image& image, int p) {
    const int gh = image.height / p, gw = image.width / p, c = image.channels;
    Mat<T> patches(gh * gw, p * p * c);
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            T* row = patches.data() + static_cast<std::ptrdiff_t>(gy * gw + gx) * p * p * c;
            for (int ch = 0; ch < c; ++ch) {
                for (int py = 0; py < p; ++py) {
                    for (int px = 0; px < p; ++px) {
                        row[ch * p * p + py * p + px] = static_cast<T>(image.at(ch, gy * p + py, gx * p + px));
                    }
                }
            }
        }
    }
    return patches;
}

template <typename T>
FeatureMap<T> patch_embed(const Image& image, const ModelWeights<T>& weights, const ModelConfig& config) {
    const int p = config.patch_size;
    if (image.height % p != 0 || image.width % p != 0) {
        throw InvalidArgument("patch_embed: image size not divisible by patch size");
    }
    if (image.channels != config.input_channels) throw InvalidArgument("patch_embed: channel mismatch");
    FeatureMap<T> out;
    out.grid_h = image.height / p;
    out.grid_w = image.width / p;
    out.data = nn::linear(extract_patches<T>(image, p), weights["embed.proj.weight"].data(),
                          weights["embed.proj.bias"].data(), config.base_channels, p * p * image.channels);
    return out;
}

// ---------------------------------------------------------------------------
// Windows

std::vector<int> window_permutation(int grid_h, int grid_w, int window_h, int window_w, int shift_h,
                                    int shift_w) {
    if (window_h < 1 || window_w < 1 || grid_h % window_h != 0 || grid_w % window_w != 0) {
        throw InvalidArgument("window_partition: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                              " not divisible by window " + std::to_string(window_h) + "x" +
                              std::to_string(window_w));
    }
    std::vector<int> perm(static_cast<std::size_t>(grid_h) * grid_w);
    const int wins_x = grid_w / window_w;
    std::size_t k = 0;
    for (int wy = 0; wy < grid_h / window_h; ++wy) {
        for (int wx = 0; wx < wins_x; ++wx) {
            for (int ty = 0; ty < window_h; ++ty) {
                for (int tx = 0; tx < window_w; ++tx) {
                    const int y = ((wy * window_h + ty + shift_h) % grid_h + grid_h) % grid_h;
                    const int x = ((wx * window_w + tx + shift_w) % grid_w + grid_w) % grid_w;
                    perm[k++] = y * grid_w + x;
                }
            }
        }
    }
    return perm;
}

template <typename T>
FeatureMap<T> window_partition(const FeatureMap<T>& x, int window_h, int window_w, int shift_h, int shift_w) {
    if (x.layout != Layout::Grid) throw InvalidArgument("window_partition: expected grid layout");
    const auto perm = window_permutation(x.grid_h, x.grid_w, window_h, window_w, shift_h, shift_w);
    FeatureMap<T> out{Layout::Windowed, x.grid_h, x.grid_w, window_h, window_w, shift_h, shift_w,
                      Mat<T>(x.data.rows(), x.data.cols())};
    for (std::size_t k = 0; k < perm.size(); ++k) out.data.row(static_cast<Eigen::Index>(k)) = x.data.row(perm[k]);
    return out;
}

template <typename T>
FeatureMap<T> window_reverse(const FeatureMap<T>& w) {
    if (w.layout != Layout::Windowed) throw InvalidArgument("window_reverse: expected windowed layout");
    const auto perm = window_permutation(w.grid_h, w.grid_w, w.window_h, w.window_w, w.shift_h, w.shift_w);
    FeatureMap<T> out{Layout::Grid, w.grid_h, w.grid_w, 0, 0, 0, 0, Mat<T>(w.data.rows(), w.data.cols())};
    for (std::size_t k = 0; k < perm.size(); ++k) out.data.row(perm[k]) = w.data.row(static_cast<Eigen::Index>(k));
    return out;
}

std::vector<int> relative_position_index(int window_h, int window_w) {
    const int n = window_h * window_w;
    std::vector<int> idx(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const int dy = i / window_w - j / window_w + window_h - 1;
            const int dx = i % window_w - j % window_w + window_w - 1;
            idx[static_cast<std::size_t>(i) * n + j] = dy * (2 * window_w - 1) + dx;
        }
    }
    return idx;
}

// ---------------------------------------------------------------------------
// Dense connection module

template <typename T>
Mat<T> dcm_forward(const Mat<T>& x, const StageGeometry& g, const ParamScope<T>& p, DcmCache<T>& cache) {
    const int c = g.channels, gr = g.growth;
    cache.x0 = x;
    cache.all.resize(x.rows(), 4 * gr);
    cache.all.leftCols(gr) = nn::linear(x, p("dcm.in.weight"), p("dcm.in.bias"), gr, c);
    for (int r = 1; r <= 3; ++r) {
        const std::string n = std::to_string(r);
        const auto i = static_cast<std::size_t>(r - 1);
        cache.concat[i] = cache.all.leftCols(gr * r);
        cache.depthwise[i] = nn::depthwise_conv3x3(cache.concat[i], g.grid_h, g.grid_w, p("dcm.dw" + n + ".weight"),
                                                   p("dcm.dw" + n + ".bias"), r);
        cache.pointwise[i] = nn::linear(cache.depthwise[i], p("dcm.pw" + n + ".weight"), p("dcm.pw" + n + ".bias"),
                                        gr, gr * r);
        cache.all.middleCols(gr * r, gr) = nn::gelu(cache.pointwise[i]);
    }
    return nn::linear(cache.all, p("dcm.out.weight"), p("dcm.out.bias"), c, 4 * gr);
}

template <typename T>
Mat<T> dcm_backward(const Mat<T>& dy, const StageGeometry& g, const ParamScope<T>& p, const GradScope<T>& dp,
                    const DcmCache<T>& cache) {
    const int c = g.channels, gr = g.growth;
    Mat<T> dall = nn::linear_backward(dy, cache.all, p("dcm.out.weight"), dp("dcm.out.weight"),
                                      dp("dcm.out.bias"), c, 4 * gr);
    for (int r = 3; r >= 1; --r) {
        const std::string n = std::to_string(r);
        const auto i = static_cast<std::size_t>(r - 1);
        const Mat<T> dact = dall.middleCols(gr * r, gr);
        const Mat<T> dpw = nn::gelu_backward(dact, cache.pointwise[i]);
        const Mat<T> ddw = nn::linear_backward(dpw, cache.depthwise[i], p("dcm.pw" + n + ".weight"),
                                               dp("dcm.pw" + n + ".weight"), dp("dcm.pw" + n + ".bias"), gr, gr * r);
        dall.leftCols(gr * r) += nn::depthwise_conv3x3_backward(ddw, cache.concat[i], g.grid_h, g.grid_w,
                                                                p("dcm.dw" + n + ".weight"),
                                                                dp("dcm.dw" + n + ".weight"),
                                                                dp("dcm.dw" + n + ".bias"), r);
    }
    const Mat<T> dx0 = dall.leftCols(gr);
    return nn::linear_backward(dx0, cache.x0, p("dcm.in.weight"), dp("dcm.in.weight"), dp("dcm.in.bias"), gr, c);
}

// ---------------------------------------------------------------------------
// Window attention

namespace {

// Attention over windows stored consecutively (N rows each).
template <typename T>
Mat<T> windowed_attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, int n, int heads, const T* table,
                          const std::vector<int>& rel, std::vector<Mat<T>>* probs) {
    const int c = static_cast<int>(q.cols());
    const int d = c / heads;
    const int windows = static_cast<int>(q.rows()) / n;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    Mat<T> out(q.rows(), c);
    if (probs) probs->assign(static_cast<std::size_t>(heads), Mat<T>(q.rows(), n));
    Mat<T> s(n, n);
    for (int w = 0; w < windows; ++w) {
        const int r0 = w * n;
        for (int h = 0; h < heads; ++h) {
            s.noalias() = q.block(r0, h * d, n, d) * k.block(r0, h * d, n, d).transpose();
            s *= scale;
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < n; ++j) s(i, j) += table[rel[static_cast<std::size_t>(i) * n + j] * heads + h];
            }
            nn::softmax_rows(s);
            out.block(r0, h * d, n, d).noalias() = s * v.block(r0, h * d, n, d);
            if (probs) (*probs)[static_cast<std::size_t>(h)].block(r0, 0, n, n) = s;
        }
    }
    return out;
}

template <typename T>
Mat<T> gather_rows(const Mat<T>& x, const std::vector<int>& perm) {
    Mat<T> out(x.rows(), x.cols());
    for (std::size_t k = 0; k < perm.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(perm[k]);
    return out;
}

template <typename T>
Mat<T> scatter_rows(const Mat<T>& x, const std::vector<int>& perm) {
    Mat<T> out(x.rows(), x.cols());
    for (std::size_t k = 0; k < perm.size(); ++k) out.row(perm[k]) = x.row(static_cast<Eigen::Index>(k));
    return out;
}

}  // namespace

template <typename T>
Mat<T> attention_forward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const StageGeometry& g, bool shifted,
                         const T* bias_table, AttentionCache<T>& cache) {
    cache.perm = window_permutation(g.grid_h, g.grid_w, g.window_h, g.window_w, shifted ? g.shift_h : 0,
                                    shifted ? g.shift_w : 0);
    cache.q = gather_rows(q, cache.perm);
    cache.k = gather_rows(k, cache.perm);
    cache.v = gather_rows(v, cache.perm);
    const std::vector<int> rel = relative_position_index(g.window_h, g.window_w);
    const Mat<T> out = windowed_attention(cache.q, cache.k, cache.v, g.window_tokens(), g.heads, bias_table, rel,
                                          &cache.probs);
    return scatter_rows(out, cache.perm);
}

template <typename T>
void attention_backward(const Mat<T>& dout, const StageGeometry& g, const T* bias_table, T* dbias_table,
                        const AttentionCache<T>& cache, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv) {
    (void)bias_table;
    const int n = g.window_tokens(), heads = g.heads, d = g.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    const std::vector<int> rel = relative_position_index(g.window_h, g.window_w);
    const Mat<T> dow = gather_rows(dout, cache.perm);
    Mat<T> dqw(dow.rows(), dow.cols()), dkw(dow.rows(), dow.cols()), dvw(dow.rows(), dow.cols());
    Mat<T> dp(n, n), ds(n, n);
    for (int w = 0; w < g.windows(); ++w) {
        const int r0 = w * n;
        for (int h = 0; h < heads; ++h) {
            const auto p = cache.probs[static_cast<std::size_t>(h)].block(r0, 0, n, n);
            const auto dO = dow.block(r0, h * d, n, d);
            dvw.block(r0, h * d, n, d).noalias() = p.transpose() * dO;
            dp.noalias() = dO * cache.v.block(r0, h * d, n, d).transpose();
            for (int i = 0; i < n; ++i) {
                T dot = 0;
                for (int j = 0; j < n; ++j) dot += dp(i, j) * p(i, j);
                for (int j = 0; j < n; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
            }
            if (dbias_table) {
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) dbias_table[rel[static_cast<std::size_t>(i) * n + j] * heads + h] += ds(i, j);
                }
            }
            dqw.block(r0, h * d, n, d).noalias() = scale * (ds * cache.k.block(r0, h * d, n, d));
            dkw.block(r0, h * d, n, d).noalias() = scale * (ds.transpose() * cache.q.block(r0, h * d, n, d));
        }
    }
    dq = scatter_rows(dqw, cache.perm);
    dk = scatter_rows(dkw, cache.perm);
    dv = scatter_rows(dvw, cache.perm);
}

template <typename T>
FeatureMap<T> msa(const FeatureMap<T>& q, const FeatureMap<T>& k, const FeatureMap<T>& v,
                  std::span<const T> bias_table, int heads) {
    for (const auto* f : {&q, &k, &v}) {
        if (f->layout != Layout::Windowed || !f->consistent()) throw InvalidArgument("msa: expected windowed inputs");
    }
    if (q.data.rows() != k.data.rows() || q.data.rows() != v.data.rows() || q.data.cols() != k.data.cols() ||
        q.data.cols() != v.data.cols() || q.window_h != k.window_h || q.window_w != k.window_w ||
        q.window_h != v.window_h || q.window_w != v.window_w) {
        throw InvalidArgument("msa: q, k, v shapes differ");
    }
    if (heads < 1 || q.channels() % heads != 0) throw InvalidArgument("msa: channels not divisible by heads");
    const std::size_t rows = static_cast<std::size_t>((2 * q.window_h - 1) * (2 * q.window_w - 1));
    if (bias_table.size() != rows * static_cast<std::size_t>(heads)) throw InvalidArgument("msa: bias table size");
    FeatureMap<T> out = q;
    out.data = windowed_attention(q.data, k.data, v.data, q.window_h * q.window_w, heads, bias_table.data(),
                                  relative_position_index(q.window_h, q.window_w), static_cast<std::vector<Mat<T>>*>(nullptr));
    return out;
}

// ---------------------------------------------------------------------------
// MSTB

template <typename T>
Mat<T> block_forward(const Mat<T>& x, const StageGeometry& g, bool shifted, const ParamScope<T>& p,
                     BlockCache<T>& c) {
    const int ch = g.channels;
    c.xn = nn::layer_norm(x, p("ln1.weight"), p("ln1.bias"), c.ln1);
    c.q = nn::linear(c.xn, p("attn.q.weight"), p("attn.q.bias"), ch, ch);
    c.m = dcm_forward(c.xn, g, p, c.dcm);
    c.k = nn::linear(c.m, p("attn.k.weight"), p("attn.k.bias"), ch, ch);
    c.v = nn::linear(c.m, p("attn.v.weight"), p("attn.v.bias"), ch, ch);
    c.attn = attention_forward(c.q, c.k, c.v, g, shifted, p("attn.rel_bias"), c.attention);
    c.y = x + nn::linear(c.attn, p("attn.proj.weight"), p("attn.proj.bias"), ch, ch);
    c.yn = nn::layer_norm(c.y, p("ln2.weight"), p("ln2.bias"), c.ln2);
    c.hidden = nn::linear(c.yn, p("mlp.fc1.weight"), p("mlp.fc1.bias"), g.mlp_hidden, ch);
    return c.y + nn::linear(nn::gelu(c.hidden), p("mlp.fc2.weight"), p("mlp.fc2.bias"), ch, g.mlp_hidden);
}

template <typename T>
Mat<T> block_backward(const Mat<T>& dout, const StageGeometry& g, const ParamScope<T>& p, const GradScope<T>& dp,
                      const BlockCache<T>& c) {
    const int ch = g.channels, hid = g.mlp_hidden;
    const Mat<T> act = nn::gelu(c.hidden);
    const Mat<T> dact = nn::linear_backward(dout, act, p("mlp.fc2.weight"), dp("mlp.fc2.weight"),
                                            dp("mlp.fc2.bias"), ch, hid);
    const Mat<T> dhidden = nn::gelu_backward(dact, c.hidden);
    const Mat<T> dyn = nn::linear_backward(dhidden, c.yn, p("mlp.fc1.weight"), dp("mlp.fc1.weight"),
                                           dp("mlp.fc1.bias"), hid, ch);
    const Mat<T> dy = dout + nn::layer_norm_backward(dyn, c.ln2, p("ln2.weight"), dp("ln2.weight"), dp("ln2.bias"));
    const Mat<T> dattn = nn::linear_backward(dy, c.attn, p("attn.proj.weight"), dp("attn.proj.weight"),
                                             dp("attn.proj.bias"), ch, ch);
    Mat<T> dq, dk, dv;
    attention_backward(dattn, g, p("attn.rel_bias"), dp("attn.rel_bias"), c.attention, dq, dk, dv);
    Mat<T> dm = nn::linear_backward(dk, c.m, p("attn.k.weight"), dp("attn.k.weight"), dp("attn.k.bias"), ch, ch);
    dm += nn::linear_backward(dv, c.m, p("attn.v.weight"), dp("attn.v.weight"), dp("attn.v.bias"), ch, ch);
    Mat<T> dxn = nn::linear_backward(dq, c.xn, p("attn.q.weight"), dp("attn.q.weight"), dp("attn.q.bias"), ch, ch);
    dxn += dcm_backward(dm, g, p, dp, c.dcm);
    return dy + nn::layer_norm_backward(dxn, c.ln1, p("ln1.weight"), dp("ln1.weight"), dp("ln1.bias"));
}

template <typename T>
FeatureMap<T> mstb_pair(const FeatureMap<T>& x, const ModelWeights<T>& weights, const StageGeometry& g,
                        const std::string& prefix, int first_block) {
    if (x.layout != Layout::Grid || x.grid_h != g.grid_h || x.grid_w != g.grid_w || x.channels() != g.channels) {
        throw InvalidArgument("mstb_pair: feature map does not match stage geometry");
    }
    BlockCache<T> cache;
    FeatureMap<T> out = x;
    out.data = block_forward(x.data, g, false, ParamScope<T>{&weights, block_prefix(prefix, first_block)}, cache);
    out.data = block_forward(out.data, g, true, ParamScope<T>{&weights, block_prefix(prefix, first_block + 1)}, cache);
    return out;
}

// ---------------------------------------------------------------------------
// Merge / expand / skip fusion

template <typename T>
Mat<T> patch_merge_forward(const Mat<T>& x, int grid_h, int grid_w, const T* w, Mat<T>& gathered) {
    if (grid_h % 2 != 0 || grid_w % 2 != 0) throw InvalidArgument("patch_merge: odd token grid");
    const int c = static_cast<int>(x.cols()), oh = grid_h / 2, ow = grid_w / 2;
    gathered.resize(oh * ow, 4 * c);
    static constexpr int kOffsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};  // (dy, dx)
    for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
            for (int q = 0; q < 4; ++q) {
                const int src = (2 * y + kOffsets[q][0]) * grid_w + 2 * xx + kOffsets[q][1];
                gathered.block(y * ow + xx, q * c, 1, c) = x.row(src);
            }
        }
    }
    return nn::linear<T>(gathered, w, nullptr, 2 * c, 4 * c);
}

template <typename T>
Mat<T> patch_merge_backward(const Mat<T>& dy, int grid_h, int grid_w, const T* w, T* dw, const Mat<T>& gathered) {
    const int c = static_cast<int>(gathered.cols()) / 4, oh = grid_h / 2, ow = grid_w / 2;
    const Mat<T> dg = nn::linear_backward<T>(dy, gathered, w, dw, nullptr, 2 * c, 4 * c);
    Mat<T> dx(grid_h * grid_w, c);
    static constexpr int kOffsets[4][2] = {{0, 0}, {1, 0}, {0, 1}, {1, 1}};
    for (int y = 0; y < oh; ++y) {
        for (int xx = 0; xx < ow; ++xx) {
            for (int q = 0; q < 4; ++q) {
                const int dst = (2 * y + kOffsets[q][0]) * grid_w + 2 * xx + kOffsets[q][1];
                dx.row(dst) = dg.block(y * ow + xx, q * c, 1, c);
            }
        }
    }
    return dx;
}

template <typename T>
Mat<T> patch_expand_forward(const Mat<T>& x, int grid_h, int grid_w, int f, int out_channels, const T* w) {
    const int cin = static_cast<int>(x.cols());
    const Mat<T> lin = nn::linear<T>(x, w, nullptr, f * f * out_channels, cin);
    Mat<T> out(grid_h * f * grid_w * f, out_channels);
    const int ow = grid_w * f;
    for (int y = 0; y < grid_h; ++y) {
        for (int xx = 0; xx < grid_w; ++xx) {
            for (int p1 = 0; p1 < f; ++p1) {
                for (int p2 = 0; p2 < f; ++p2) {
                    out.row((y * f + p1) * ow + xx * f + p2) =
                        lin.block(y * grid_w + xx, (p1 * f + p2) * out_channels, 1, out_channels);
                }
            }
        }
    }
    return out;
}

template <typename T>
Mat<T> patch_expand_backward(const Mat<T>& dy, const Mat<T>& x, int grid_h, int grid_w, int f, int out_channels,
                             const T* w, T* dw) {
    const int cin = static_cast<int>(x.cols());
    Mat<T> dlin(grid_h * grid_w, f * f * out_channels);
    const int ow = grid_w * f;
    for (int y = 0; y < grid_h; ++y) {
        for (int xx = 0; xx < grid_w; ++xx) {
            for (int p1 = 0; p1 < f; ++p1) {
                for (int p2 = 0; p2 < f; ++p2) {
                    dlin.block(y * grid_w + xx, (p1 * f + p2) * out_channels, 1, out_channels) =
                        dy.row((y * f + p1) * ow + xx * f + p2);
                }
            }
        }
    }
    return nn::linear_backward<T>(dlin, x, w, dw, nullptr, f * f * out_channels, cin);
}

template <typename T>
FeatureMap<T> patch_merge(const FeatureMap<T>& x, std::span<const T> weight) {
    const int c = x.channels();
    if (x.layout != Layout::Grid) throw InvalidArgument("patch_merge: expected grid layout");
    if (weight.size() != static_cast<std::size_t>(8 * c * c)) throw InvalidArgument("patch_merge: weight shape");
    Mat<T> gathered;
    FeatureMap<T> out;
    out.data = patch_merge_forward(x.data, x.grid_h, x.grid_w, weight.data(), gathered);
    out.grid_h = x.grid_h / 2;
    out.grid_w = x.grid_w / 2;
    return out;
}

template <typename T>
FeatureMap<T> patch_expand(const FeatureMap<T>& x, std::span<const T> weight, int factor) {
    const int cin = x.channels();
    if (x.layout != Layout::Grid) throw InvalidArgument("patch_expand: expected grid layout");
    const std::size_t per_out = static_cast<std::size_t>(cin) * factor * factor;
    if (weight.empty() || weight.size() % per_out != 0) throw InvalidArgument("patch_expand: weight shape");
    const int cout = static_cast<int>(weight.size() / per_out);
    FeatureMap<T> out;
    out.data = patch_expand_forward(x.data, x.grid_h, x.grid_w, factor, cout, weight.data());
    out.grid_h = x.grid_h * factor;
    out.grid_w = x.grid_w * factor;
    return out;
}

template <typename T>
Mat<T> sfb_forward(const Mat<T>& enc, const Mat<T>& dec, const T* w, const T* b, Mat<T>& concat) {
    if (enc.rows() != dec.rows() || enc.cols() != dec.cols()) throw InvalidArgument("sfb: shape mismatch");
    const int c = static_cast<int>(enc.cols());
    concat.resize(enc.rows(), 2 * c);
    concat.leftCols(c) = enc;
    concat.rightCols(c) = dec;
    return nn::linear(concat, w, b, c, 2 * c);
}

template <typename T>
void sfb_backward(const Mat<T>& dy, const Mat<T>& concat, const T* w, T* dw, T* db, Mat<T>& denc, Mat<T>& ddec) {
    const int c = static_cast<int>(dy.cols());
    const Mat<T> dcat = nn::linear_backward(dy, concat, w, dw, db, c, 2 * c);
    denc = dcat.leftCols(c);
    ddec = dcat.rightCols(c);
}

template <typename T>
FeatureMap<T> sfb(const FeatureMap<T>& enc, const FeatureMap<T>& dec, std::span<const T> weight,
                  std::span<const T> bias) {
    if (enc.grid_h != dec.grid_h || enc.grid_w != dec.grid_w || enc.layout != dec.layout) {
        throw InvalidArgument("sfb: shape mismatch");
    }
    const auto c = static_cast<std::size_t>(enc.channels());
    if (weight.size() != 2 * c * c || bias.size() != c) throw InvalidArgument("sfb: weight shape");
    Mat<T> concat;
    FeatureMap<T> out = dec;
    out.data = sfb_forward(enc.data, dec.data, weight.data(), bias.data(), concat);
    return out;
}

}  // namespace msunet

// ---------------------------------------------------------------------------
// Full network

template <typename T>
struct ForwardPass<T>::Tape {
    Mat<T> patches;
    std::vector<std::vector<msunet::BlockCache<T>>> enc_blocks, dec_blocks;
    std::vector<msunet::BlockCache<T>> bottleneck;
    std::vector<Mat<T>> merge_gathered, expand_input, sfb_concat;
    nn::LayerNormCache<T> final_ln;
    Mat<T> final_norm, tokens;
};

template <typename T>
ForwardPass<T>::ForwardPass(const ModelConfig& config, const ModelWeights<T>& weights)
    : config_(&config), weights_(&weights), tape_(std::make_unique<Tape>()) {
    config.validate();
}

template <typename T>
ForwardPass<T>::~ForwardPass() = default;
template <typename T>
ForwardPass<T>::ForwardPass(ForwardPass&&) noexcept = default;
template <typename T>
ForwardPass<T>& ForwardPass<T>::operator=(ForwardPass&&) noexcept = default;

template <typename T>
Prediction ForwardPass<T>::run(const Image& image) {
    using namespace msunet;
    const ModelConfig& cfg = *config_;
    const ModelWeights<T>& w = *weights_;
    if (image.height != cfg.input_h || image.width != cfg.input_w || image.channels != cfg.input_channels) {
        throw InvalidArgument("forward: image " + std::to_string(image.channels) + "x" + std::to_string(image.height) +
                              "x" + std::to_string(image.width) + " does not match model input " +
                              std::to_string(cfg.input_channels) + "x" + std::to_string(cfg.input_h) + "x" +
                              std::to_string(cfg.input_w));
    }
    Tape& t = *tape_;
    const int stages = cfg.stage_count(), c = cfg.base_channels, p = cfg.patch_size;
    t.enc_blocks.assign(static_cast<std::size_t>(stages), {});
    t.dec_blocks.assign(static_cast<std::size_t>(stages), {});
    t.merge_gathered.assign(static_cast<std::size_t>(stages), {});
    t.expand_input.assign(static_cast<std::size_t>(stages), {});
    t.sfb_concat.assign(static_cast<std::size_t>(stages), {});

    t.patches = extract_patches<T>(image, p);
    Mat<T> x = nn::linear(t.patches, w["embed.proj.weight"].data(), w["embed.proj.bias"].data(), c,
                          p * p * cfg.input_channels);

    std::vector<Mat<T>> skips(static_cast<std::size_t>(stages));
    for (int s = 0; s < stages; ++s) {
        const StageGeometry g = stage_geometry(cfg, s);
        const std::string sp = "enc" + std::to_string(s) + ".";
        auto& caches = t.enc_blocks[static_cast<std::size_t>(s)];
        caches.resize(static_cast<std::size_t>(cfg.stage_depths[s]));
        for (int b = 0; b < cfg.stage_depths[s]; ++b) {
            x = block_forward(x, g, b % 2 == 1, ParamScope<T>{&w, sp + "blk" + std::to_string(b) + "."},
                              caches[static_cast<std::size_t>(b)]);
        }
        skips[static_cast<std::size_t>(s)] = x;
        x = patch_merge_forward(x, g.grid_h, g.grid_w, w[sp + "merge.weight"].data(),
                                t.merge_gathered[static_cast<std::size_t>(s)]);
    }
    {
        const StageGeometry g = stage_geometry(cfg, stages);
        t.bottleneck.resize(static_cast<std::size_t>(cfg.bottleneck_depth));
        for (int b = 0; b < cfg.bottleneck_depth; ++b) {
            x = block_forward(x, g, b % 2 == 1, ParamScope<T>{&w, "bottleneck.blk" + std::to_string(b) + "."},
                              t.bottleneck[static_cast<std::size_t>(b)]);
        }
    }
    for (int s = stages - 1; s >= 0; --s) {
        const StageGeometry g = stage_geometry(cfg, s);
        const StageGeometry below = stage_geometry(cfg, s + 1);
        const std::string sp = "dec" + std::to_string(s) + ".";
        const auto si = static_cast<std::size_t>(s);
        t.expand_input[si] = x;
        x = patch_expand_forward(x, below.grid_h, below.grid_w, 2, g.channels, w[sp + "expand.weight"].data());
        x = sfb_forward(skips[si], x, w[sp + "sfb.weight"].data(), w[sp + "sfb.bias"].data(), t.sfb_concat[si]);
        auto& caches = t.dec_blocks[si];
        caches.resize(static_cast<std::size_t>(cfg.stage_depths[s]));
        for (int b = 0; b < cfg.stage_depths[s]; ++b) {
            x = block_forward(x, g, b % 2 == 1, ParamScope<T>{&w, sp + "blk" + std::to_string(b) + "."},
                              caches[static_cast<std::size_t>(b)]);
        }
    }
    const StageGeometry g0 = stage_geometry(cfg, 0);
    t.final_norm = nn::layer_norm(x, w["final.norm.weight"].data(), w["final.norm.bias"].data(), t.final_ln);
    t.tokens = patch_expand_forward(t.final_norm, g0.grid_h, g0.grid_w, p, c, w["final.expand.weight"].data());
    const Mat<T> flow = nn::linear(t.tokens, w["head.flow.weight"].data(), w["head.flow.bias"].data(), 2, c);
    const Mat<T> seg = nn::linear(t.tokens, w["head.seg.weight"].data(), w["head.seg.bias"].data(), 6, c);

    Prediction out{FlowMap(cfg.input_h, cfg.input_w), SegLogits(cfg.input_h, cfg.input_w)};
    const std::size_t hw = out.flow.plane_size();
    for (std::size_t i = 0; i < hw; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        out.flow.data[i] = static_cast<double>(flow(r, 0));
        out.flow.data[hw + i] = static_cast<double>(flow(r, 1));
        for (int k = 0; k < 6; ++k) out.seg.data[k * hw + i] = static_cast<double>(seg(r, k));
    }
    return out;
}

template <typename T>
void ForwardPass<T>::backward(const FlowMap& dflow, const SegLogits& dseg, ModelWeights<T>& grads) const {
    using namespace msunet;
    const ModelConfig& cfg = *config_;
    const ModelWeights<T>& w = *weights_;
    const Tape& t = *tape_;
    if (t.tokens.size() == 0) throw InvalidArgument("backward: run() has not been called");
    const int stages = cfg.stage_count(), c = cfg.base_channels, p = cfg.patch_size;
    const std::size_t hw = static_cast<std::size_t>(cfg.input_h) * cfg.input_w;
    if (dflow.plane_size() != hw || dseg.plane_size() != hw) throw InvalidArgument("backward: gradient shape");

    Mat<T> df(static_cast<Eigen::Index>(hw), 2), ds(static_cast<Eigen::Index>(hw), 6);
    for (std::size_t i = 0; i < hw; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        df(r, 0) = static_cast<T>(dflow.data[i]);
        df(r, 1) = static_cast<T>(dflow.data[hw + i]);
        for (int k = 0; k < 6; ++k) ds(r, k) = static_cast<T>(dseg.data[k * hw + i]);
    }
    GradScope<T> root{&grads, ""};
    Mat<T> dtok = nn::linear_backward(df, t.tokens, w["head.flow.weight"].data(), root("head.flow.weight"),
                                      root("head.flow.bias"), 2, c);
    dtok += nn::linear_backward(ds, t.tokens, w["head.seg.weight"].data(), root("head.seg.weight"),
                                root("head.seg.bias"), 6, c);
    const StageGeometry g0 = stage_geometry(cfg, 0);
    Mat<T> dx = patch_expand_backward(dtok, t.final_norm, g0.grid_h, g0.grid_w, p, c,
                                      w["final.expand.weight"].data(), root("final.expand.weight"));
    dx = nn::layer_norm_backward(dx, t.final_ln, w["final.norm.weight"].data(), root("final.norm.weight"),
                                 root("final.norm.bias"));

    std::vector<Mat<T>> dskips(static_cast<std::size_t>(stages));
    for (int s = 0; s < stages; ++s) {
        const StageGeometry g = stage_geometry(cfg, s);
        const StageGeometry below = stage_geometry(cfg, s + 1);
        const std::string sp = "dec" + std::to_string(s) + ".";
        const auto si = static_cast<std::size_t>(s);
        for (int b = cfg.stage_depths[s] - 1; b >= 0; --b) {
            const std::string bp = sp + "blk" + std::to_string(b) + ".";
            dx = block_backward(dx, g, ParamScope<T>{&w, bp}, GradScope<T>{&grads, bp},
                                t.dec_blocks[si][static_cast<std::size_t>(b)]);
        }
        Mat<T> ddec;
        sfb_backward(dx, t.sfb_concat[si], w[sp + "sfb.weight"].data(), root(sp + "sfb.weight"),
                     root(sp + "sfb.bias"), dskips[si], ddec);
        dx = patch_expand_backward(ddec, t.expand_input[si], below.grid_h, below.grid_w, 2, g.channels,
                                   w[sp + "expand.weight"].data(), root(sp + "expand.weight"));
    }
    {
        const StageGeometry g = stage_geometry(cfg, stages);
        for (int b = cfg.bottleneck_depth - 1; b >= 0; --b) {
            const std::string bp = "bottleneck.blk" + std::to_string(b) + ".";
            dx = block_backward(dx, g, ParamScope<T>{&w, bp}, GradScope<T>{&grads, bp},
                                t.bottleneck[static_cast<std::size_t>(b)]);
        }
    }
    for (int s = stages - 1; s >= 0; --s) {
        const StageGeometry g = stage_geometry(cfg, s);
        const std::string sp = "enc" + std::to_string(s) + ".";
        const auto si = static_cast<std::size_t>(s);
        dx = patch_merge_backward(dx, g.grid_h, g.grid_w, w[sp + "merge.weight"].data(), root(sp + "merge.weight"),
                                  t.merge_gathered[si]);
        dx += dskips[si];
        for (int b = cfg.stage_depths[s] - 1; b >= 0; --b) {
            const std::string bp = sp + "blk" + std::to_string(b) + ".";
            dx = block_backward(dx, g, ParamScope<T>{&w, bp}, GradScope<T>{&grads, bp},
                                t.enc_blocks[si][static_cast<std::size_t>(b)]);
        }
    }
    nn::linear_backward(dx, t.patches, w["embed.proj.weight"].data(), root("embed.proj.weight"),
                        root("embed.proj.bias"), c, p * p * cfg.input_channels);
}

template <typename T>
Prediction forward(const Image& image, const ModelWeights<T>& weights, const ModelConfig& config) {
    ForwardPass<T> pass(config, weights);
    return pass.run(image);
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define WIDECORRECT_INSTANTIATE(T)                                                                                  \
    template class ModelWeights<T>;                                                                                 \
    template ModelWeights<T> init_weights<T>(std::vector<ParamSpec>, std::uint64_t);                                \
    template ModelWeights<T> init_weights<T>(const ModelConfig&, std::uint64_t);                                    \
    template class ForwardPass<T>;                                                                                  \
    template Prediction forward<T>(const Image&, const ModelWeights<T>&, const ModelConfig&);                       \
    namespace msunet {                                                                                              \
    template struct ParamScope<T>;                                                                                  \
    template struct GradScope<T>;                                                                                   \
    template struct FeatureMap<T>;                                                                                  \
    template Mat<T> extract_patches<T>(const Image&, int);                                                          \
    template FeatureMap<T> patch_embed<T>(const Image&, const ModelWeights<T>&, const ModelConfig&);                \
    template FeatureMap<T> window_partition<T>(const FeatureMap<T>&, int, int, int, int);                           \
    template FeatureMap<T> window_reverse<T>(const FeatureMap<T>&);                                                 \
    template Mat<T> dcm_forward<T>(const Mat<T>&, const StageGeometry&, const ParamScope<T>&, DcmCache<T>&);        \
    template Mat<T> dcm_backward<T>(const Mat<T>&, const StageGeometry&, const ParamScope<T>&, const GradScope<T>&, \
                                    const DcmCache<T>&);                                                            \
    template Mat<T> attention_forward<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const StageGeometry&, bool,   \
                                         const T*, AttentionCache<T>&);                                             \
    template void attention_backward<T>(const Mat<T>&, const StageGeometry&, const T*, T*,                          \
                                        const AttentionCache<T>&, Mat<T>&, Mat<T>&, Mat<T>&);                       \
    template FeatureMap<T> msa<T>(const FeatureMap<T>&, const FeatureMap<T>&, const FeatureMap<T>&,                 \
                                  std::span<const T>, int);                                                         \
    template Mat<T> block_forward<T>(const Mat<T>&, const StageGeometry&, bool, const ParamScope<T>&,               \
                                     BlockCache<T>&);                                                               \
    template Mat<T> block_backward<T>(const Mat<T>&, const StageGeometry&, const ParamScope<T>&,                    \
                                      const GradScope<T>&, const BlockCache<T>&);                                   \
    template FeatureMap<T> mstb_pair<T>(const FeatureMap<T>&, const ModelWeights<T>&, const StageGeometry&,         \
                                        const std::string&, int);                                                   \
    template Mat<T> patch_merge_forward<T>(const Mat<T>&, int, int, const T*, Mat<T>&);                             \
    template Mat<T> patch_merge_backward<T>(const Mat<T>&, int, int, const T*, T*, const Mat<T>&);                  \
    template Mat<T> patch_expand_forward<T>(const Mat<T>&, int, int, int, int, const T*);                           \
    template Mat<T> patch_expand_backward<T>(const Mat<T>&, const Mat<T>&, int, int, int, int, const T*, T*);       \
    template FeatureMap<T> patch_merge<T>(const FeatureMap<T>&, std::span<const T>);                                \
    template FeatureMap<T> patch_expand<T>(const FeatureMap<T>&, std::span<const T>, int);                          \
    template Mat<T> sfb_forward<T>(const Mat<T>&, const Mat<T>&, const T*, const T*, Mat<T>&);                      \
    template void sfb_backward<T>(const Mat<T>&, const Mat<T>&, const T*, T*, T*, Mat<T>&, Mat<T>&);                \
    template FeatureMap<T> sfb<T>(const FeatureMap<T>&, const FeatureMap<T>&, std::span<const T>,                   \
                                  std::span<const T>);                                                              \
    }

WIDECORRECT_INSTANTIATE(float)
WIDECORRECT_INSTANTIATE(double)

#undef WIDECORRECT_INSTANTIATE

}  // namespace widecorrect
