#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "widecorrect/geometry.hpp"
#include "widecorrect/nn/layers.hpp"

namespace widecorrect {

using nn::Mat;

struct ModelConfig {
    int input_h = 64;
    int input_w = 48;
    int input_channels = 3;
    int patch_size = 4;
    int base_channels = 32;
    // MSTBs per encoder stage; each count is even because blocks alternate
    // plain and shifted windows. Decoder stages mirror these depths.
    std::vector<int> stage_depths{2, 2};
    int bottleneck_depth = 2;
    int head_count = 4;
    // When positive, a stage with C channels uses C / head_dim heads instead of head_count.
    int head_dim = 0;
    int window_h = 4;
    int window_w = 4;
    double mlp_ratio = 4.0;
    // Dense-connection growth at the first stage; doubles with the channels.
    int dcm_growth = 8;

    static constexpr int seg_classes = 3;
    static constexpr int flow_channels = 2;

    static ModelConfig desk();
    static ModelConfig paper_scale();

    int stage_count() const { return static_cast<int>(stage_depths.size()); }
    void validate() const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Resolved shape parameters of one resolution level (encoder stage s, or the
/// bottleneck at s == stage_count()).
struct StageGeometry {
    int grid_h = 0;
    int grid_w = 0;
    int channels = 0;
    int heads = 0;
    int window_h = 0;
    int window_w = 0;
    int shift_h = 0;
    int shift_w = 0;
    int mlp_hidden = 0;
    int growth = 0;

    int tokens() const { return grid_h * grid_w; }
    int window_tokens() const { return window_h * window_w; }
    int windows() const { return (grid_h / window_h) * (grid_w / window_w); }
    int head_dim() const { return channels / heads; }
    int bias_table_rows() const { return (2 * window_h - 1) * (2 * window_w - 1); }
};

StageGeometry stage_geometry(const ModelConfig& config, int stage);

struct ParamSpec {
    std::string name;
    std::vector<int> shape;

    std::size_t numel() const;
    friend bool operator==(const ParamSpec&, const ParamSpec&) = default;
};

std::vector<ParamSpec> parameter_schema(const ModelConfig& config);
/// Parameters of one MSTB under `prefix` (e.g. "enc0.blk1.").
void append_block_schema(std::vector<ParamSpec>& schema, const std::string& prefix,
                         const StageGeometry& g);

/// Named parameter tensors in one contiguous buffer, ordered by schema.
template <typename T>
class ModelWeights {
public:
    ModelWeights() = default;
    explicit ModelWeights(std::vector<ParamSpec> schema);

    const std::vector<ParamSpec>& schema() const { return schema_; }
    std::size_t tensor_count() const { return schema_.size(); }
    std::size_t numel() const { return values_.size(); }

    bool contains(std::string_view name) const;
    std::span<T> operator[](std::string_view name);
    std::span<const T> operator[](std::string_view name) const;
    std::span<T> tensor(std::size_t i);
    std::span<const T> tensor(std::size_t i) const;

    std::span<T> flat() { return values_; }
    std::span<const T> flat() const { return values_; }

    void set_zero();
    bool all_finite() const;
    /// FNV-1a over names, shapes and float32 payloads.
    std::uint64_t checksum() const;

    template <typename U>
    ModelWeights<U> cast() const {
        ModelWeights<U> out(schema_);
        auto dst = out.flat();
        for (std::size_t i = 0; i < values_.size(); ++i) dst[i] = static_cast<U>(values_[i]);
        return out;
    }

    friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
        return a.schema_ == b.schema_ && a.values_ == b.values_;
    }

private:
    std::size_t index_of(std::string_view name) const;

    std::vector<ParamSpec> schema_;
    std::vector<std::size_t> offsets_;
    std::vector<T> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Truncated normal (std 0.02, cut at 2 std) for projection and convolution
/// weights, zero biases and relative position tables, unit LayerNorm scales.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& config, std::uint64_t seed);
/// Same rule for an arbitrary schema.
template <typename T>
ModelWeights<T> init_weights(std::vector<ParamSpec> schema, std::uint64_t seed);

/// Segmentation logits, 2 x 3 x H x W: one 3-way classifier per flow component.
struct SegLogits : Planes<double> {
    SegLogits() = default;
    SegLogits(int h, int w, double fill = 0.0) : Planes(6, h, w, fill) {}
    double& logit(int group, int cls, int y, int x) { return at(group * 3 + cls, y, x); }
    double logit(int group, int cls, int y, int x) const { return at(group * 3 + cls, y, x); }
};

struct Prediction {
    FlowMap flow;
    SegLogits seg;
};

namespace msunet {

/// Read-only view of the parameters under a name prefix.
template <typename T>
struct ParamScope {
    const ModelWeights<T>* weights;
    std::string prefix;

    const T* operator()(std::string_view suffix) const;
    ParamScope child(std::string_view sub) const { return {weights, prefix + std::string(sub)}; }
};

/// Gradient accumulators under a name prefix; a null target discards gradients.
template <typename T>
struct GradScope {
    ModelWeights<T>* grads;
    std::string prefix;

    T* operator()(std::string_view suffix) const;
    GradScope child(std::string_view sub) const { return {grads, prefix + std::string(sub)}; }
};

enum class Layout { Grid, Windowed };

/// Tokens of one resolution level. Grid layout stores rows in row-major grid
/// order (equivalently C x H x W spatial data, channel-last); windowed layout
/// stores windows one after another, each window row-major.
template <typename T>
struct FeatureMap {
    Layout layout = Layout::Grid;
    int grid_h = 0;
    int grid_w = 0;
    int window_h = 0;
    int window_w = 0;
    int shift_h = 0;
    int shift_w = 0;
    Mat<T> data;

    int channels() const { return static_cast<int>(data.cols()); }
    bool consistent() const;
};

// ---- patch embedding -------------------------------------------------------

/// Patch features [N, p*p*C_in] ordered (channel, row, col) within a patch.
template <typename T>
Mat<T> extract_patches(const Image& image, int patch_size);

template <typename T>
FeatureMap<T> patch_embed(const Image& image, const ModelWeights<T>& weights, const ModelConfig& config);

// ---- windows ---------------------------------------------------------------

/// perm[k] = grid index of the k-th windowed token after a cyclic roll by
/// (-shift_h, -shift_w).
std::vector<int> window_permutation(int grid_h, int grid_w, int window_h, int window_w,
                                    int shift_h, int shift_w);

template <typename T>
FeatureMap<T> window_partition(const FeatureMap<T>& x, int window_h, int window_w, int shift_h,
                               int shift_w);
template <typename T>
FeatureMap<T> window_reverse(const FeatureMap<T>& windows);

/// Relative-position index (N x N, row-major) into a (2h-1)(2w-1) bias table.
std::vector<int> relative_position_index(int window_h, int window_w);

// ---- dense connection module ----------------------------------------------

template <typename T>
struct DcmCache {
    Mat<T> x0;
    std::array<Mat<T>, 3> concat;  // input of the r-th depthwise conv (g*r channels)
    std::array<Mat<T>, 3> depthwise;
    std::array<Mat<T>, 3> pointwise;
    Mat<T> all;  // [x0, x1, x2, x3]
};

template <typename T>
Mat<T> dcm_forward(const Mat<T>& x, const StageGeometry& g, const ParamScope<T>& p, DcmCache<T>& cache);
template <typename T>
Mat<T> dcm_backward(const Mat<T>& dy, const StageGeometry& g, const ParamScope<T>& p,
                    const GradScope<T>& dp, const DcmCache<T>& cache);

// ---- window attention -------------------------------------------------------

template <typename T>
struct AttentionCache {
    std::vector<int> perm;
    Mat<T> q, k, v;              // windowed order
    std::vector<Mat<T>> probs;   // one [N_total, N] matrix per head
};

/// Softmax(Q K^T / sqrt(d) + B) V per window and head; inputs and output in
/// grid order, heads concatenated along channels (no output projection).
template <typename T>
Mat<T> attention_forward(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v, const StageGeometry& g,
                         bool shifted, const T* bias_table, AttentionCache<T>& cache);
template <typename T>
void attention_backward(const Mat<T>& dout, const StageGeometry& g, const T* bias_table, T* dbias_table,
                        const AttentionCache<T>& cache, Mat<T>& dq, Mat<T>& dk, Mat<T>& dv);

/// Multi-head attention on windowed tensors with a bias table of
/// (2h-1)(2w-1) x heads entries.
template <typename T>
FeatureMap<T> msa(const FeatureMap<T>& q, const FeatureMap<T>& k, const FeatureMap<T>& v,
                  std::span<const T> bias_table, int heads);

// ---- MSTB -----------------------------------------------------------------

template <typename T>
struct BlockCache {
    nn::LayerNormCache<T> ln1, ln2;
    Mat<T> xn, q, m, k, v, attn, y, yn, hidden;
    DcmCache<T> dcm;
    AttentionCache<T> attention;
};

template <typename T>
Mat<T> block_forward(const Mat<T>& x, const StageGeometry& g, bool shifted, const ParamScope<T>& p,
                     BlockCache<T>& cache);
template <typename T>
Mat<T> block_backward(const Mat<T>& dy, const StageGeometry& g, const ParamScope<T>& p,
                      const GradScope<T>& dp, const BlockCache<T>& cache);

/// Two successive MSTBs (plain then shifted windows) under prefixes
/// `<prefix>blk<first>.` and `<prefix>blk<first+1>.`.
template <typename T>
FeatureMap<T> mstb_pair(const FeatureMap<T>& x, const ModelWeights<T>& weights, const StageGeometry& g,
                        const std::string& prefix, int first_block = 0);

// ---- resolution changes and skip fusion ------------------------------------

template <typename T>
Mat<T> patch_merge_forward(const Mat<T>& x, int grid_h, int grid_w, const T* w, Mat<T>& gathered);
template <typename T>
Mat<T> patch_merge_backward(const Mat<T>& dy, int grid_h, int grid_w, const T* w, T* dw,
                            const Mat<T>& gathered);

/// Linear C_in -> f*f*C_out then scatter each token to an f x f block.
template <typename T>
Mat<T> patch_expand_forward(const Mat<T>& x, int grid_h, int grid_w, int factor, int out_channels,
                            const T* w);
template <typename T>
Mat<T> patch_expand_backward(const Mat<T>& dy, const Mat<T>& x, int grid_h, int grid_w, int factor,
                             int out_channels, const T* w, T* dw);

template <typename T>
FeatureMap<T> patch_merge(const FeatureMap<T>& x, std::span<const T> weight);
template <typename T>
FeatureMap<T> patch_expand(const FeatureMap<T>& x, std::span<const T> weight, int factor = 2);

/// Skip fusion: token-axis 1-D convolution (kernel 1) over [enc | dec] channels.
template <typename T>
Mat<T> sfb_forward(const Mat<T>& enc, const Mat<T>& dec, const T* w, const T* b, Mat<T>& concat);
template <typename T>
void sfb_backward(const Mat<T>& dy, const Mat<T>& concat, const T* w, T* dw, T* db, Mat<T>& denc,
                  Mat<T>& ddec);

template <typename T>
FeatureMap<T> sfb(const FeatureMap<T>& enc, const FeatureMap<T>& dec, std::span<const T> weight,
                  std::span<const T> bias);

}  // namespace msunet

/// One forward evaluation of the full network that keeps what backward needs.
template <typename T>
class ForwardPass {
public:
    ForwardPass(const ModelConfig& config, const ModelWeights<T>& weights);
    ~ForwardPass();
    ForwardPass(ForwardPass&&) noexcept;
    ForwardPass& operator=(ForwardPass&&) noexcept;

    Prediction run(const Image& image);
    /// Accumulates parameter gradients of <dflow, F'> + <dseg, S''> into grads.
    void backward(const FlowMap& dflow, const SegLogits& dseg, ModelWeights<T>& grads) const;

private:
    struct Tape;
    const ModelConfig* config_;
    const ModelWeights<T>* weights_;
    std::unique_ptr<Tape> tape_;
};

template <typename T>
Prediction forward(const Image& image, const ModelWeights<T>& weights, const ModelConfig& config);

}  // namespace widecorrect
