#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "test_util.hpp"
#include "widecorrect/errors.hpp"
#include "widecorrect/msunet.hpp"

using namespace widecorrect;
using namespace widecorrect::msunet;
using M = Mat<double>;

namespace {

M random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double sd = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    M m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

void randomize(ModelWeights<double>& w, std::uint64_t seed, double sd) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    for (double& v : w.flat()) v = n(rng);
}

// Independent shape calculator for the parameter table.
std::vector<std::pair<std::string, std::vector<int>>> expected_schema(int h, int w, int p, int c, std::vector<int> depths,
                                                                      int bottleneck, int heads, int growth,
                                                                      int window, double mlp) {
    std::vector<std::pair<std::string, std::vector<int>>> out;
    auto block = [&](const std::string& pre, int ch, int gr, int gh, int gw) {
        auto wdiv = [](int n, int cap) {
            int d = std::min(n, cap);
            while (n % d) --d;
            return d;
        };
        const int wh = wdiv(gh, window), ww = wdiv(gw, window);
        const int hid = static_cast<int>(std::lround(mlp * ch));
        out.push_back({pre + "ln1.weight", {ch}});
        out.push_back({pre + "ln1.bias", {ch}});
        out.push_back({pre + "attn.q.weight", {ch, ch}});
        out.push_back({pre + "attn.q.bias", {ch}});
        out.push_back({pre + "dcm.in.weight", {gr, ch}});
        out.push_back({pre + "dcm.in.bias", {gr}});
        for (int r = 1; r <= 3; ++r) {
            out.push_back({pre + "dcm.dw" + std::to_string(r) + ".weight", {gr * r, 3, 3}});
            out.push_back({pre + "dcm.dw" + std::to_string(r) + ".bias", {gr * r}});
            out.push_back({pre + "dcm.pw" + std::to_string(r) + ".weight", {gr, gr * r}});
            out.push_back({pre + "dcm.pw" + std::to_string(r) + ".bias", {gr}});
        }
        out.push_back({pre + "dcm.out.weight", {ch, 4 * gr}});
        out.push_back({pre + "dcm.out.bias", {ch}});
        out.push_back({pre + "attn.k.weight", {ch, ch}});
        out.push_back({pre + "attn.k.bias", {ch}});
        out.push_back({pre + "attn.v.weight", {ch, ch}});
        out.push_back({pre + "attn.v.bias", {ch}});
        out.push_back({pre + "attn.rel_bias", {(2 * wh - 1) * (2 * ww - 1), heads}});
        out.push_back({pre + "attn.proj.weight", {ch, ch}});
        out.push_back({pre + "attn.proj.bias", {ch}});
        out.push_back({pre + "ln2.weight", {ch}});
        out.push_back({pre + "ln2.bias", {ch}});
        out.push_back({pre + "mlp.fc1.weight", {hid, ch}});
        out.push_back({pre + "mlp.fc1.bias", {hid}});
        out.push_back({pre + "mlp.fc2.weight", {ch, hid}});
        out.push_back({pre + "mlp.fc2.bias", {ch}});
    };
    out.push_back({"embed.proj.weight", {c, p * p * 3}});
    out.push_back({"embed.proj.bias", {c}});
    const int stages = static_cast<int>(depths.size());
    for (int s = 0; s < stages; ++s) {
        const int ch = c << s;
        for (int b = 0; b < depths[s]; ++b) {
            block("enc" + std::to_string(s) + ".blk" + std::to_string(b) + ".", ch, growth << s, (h / p) >> s,
                  (w / p) >> s);
        }
        out.push_back({"enc" + std::to_string(s) + ".merge.weight", {2 * ch, 4 * ch}});
    }
    for (int b = 0; b < bottleneck; ++b) {
        block("bottleneck.blk" + std::to_string(b) + ".", c << stages, growth << stages, (h / p) >> stages,
              (w / p) >> stages);
    }
    for (int s = stages - 1; s >= 0; --s) {
        const int ch = c << s;
        const std::string pre = "dec" + std::to_string(s) + ".";
        out.push_back({pre + "expand.weight", {4 * ch, 2 * ch}});
        out.push_back({pre + "sfb.weight", {ch, 2 * ch}});
        out.push_back({pre + "sfb.bias", {ch}});
        for (int b = 0; b < depths[s]; ++b) {
            block(pre + "blk" + std::to_string(b) + ".", ch, growth << s, (h / p) >> s, (w / p) >> s);
        }
    }
    out.push_back({"final.norm.weight", {c}});
    out.push_back({"final.norm.bias", {c}});
    out.push_back({"final.expand.weight", {p * p * c, c}});
    out.push_back({"head.flow.weight", {2, c}});
    out.push_back({"head.flow.bias", {2}});
    out.push_back({"head.seg.weight", {6, c}});
    out.push_back({"head.seg.bias", {6}});
    return out;
}

ModelConfig tiny() {
    ModelConfig c;
    c.input_h = 16;
    c.input_w = 16;
    c.patch_size = 2;
    c.base_channels = 8;
    c.stage_depths = {2};
    c.head_count = 2;
    c.mlp_ratio = 2.0;
    c.dcm_growth = 2;
    return c;
}

StageGeometry stage8() {
    StageGeometry g;
    g.grid_h = g.grid_w = 8;
    g.channels = 8;
    g.heads = 2;
    g.window_h = g.window_w = 4;
    g.shift_h = g.shift_w = 2;
    g.mlp_hidden = 16;
    g.growth = 2;
    return g;
}

}  // namespace

TEST(ModelConfig, DeskSchemaMatchesShapeCalculator) {
    const ModelConfig c = ModelConfig::desk();
    const auto schema = parameter_schema(c);
    const auto expected = expected_schema(64, 48, 4, 32, {2, 2}, 2, 4, 8, 4, 4.0);
    ASSERT_EQ(schema.size(), expected.size());
    std::size_t total = 0;
    for (std::size_t i = 0; i < schema.size(); ++i) {
        EXPECT_EQ(schema[i].name, expected[i].first);
        EXPECT_EQ(schema[i].shape, expected[i].second) << schema[i].name;
        total += schema[i].numel();
    }
    // Frozen from the calculator above.
    EXPECT_EQ(total, 856864u);
    std::map<std::string, int> seen;
    for (const auto& p : schema) EXPECT_EQ(++seen[p.name], 1) << p.name;
}

TEST(ModelConfig, StageShapeAlgebra) {
    const ModelConfig c = ModelConfig::desk();
    const int expect_grid[3][2] = {{16, 12}, {8, 6}, {4, 3}};
    for (int s = 0; s <= c.stage_count(); ++s) {
        const StageGeometry g = stage_geometry(c, s);
        EXPECT_EQ(g.grid_h, expect_grid[s][0]);
        EXPECT_EQ(g.grid_w, expect_grid[s][1]);
        EXPECT_EQ(g.channels, 32 << s);
        EXPECT_EQ(g.tokens() * g.channels, 16 * 12 * 32 / (1 << s));
        EXPECT_EQ(g.grid_h % g.window_h, 0);
        EXPECT_EQ(g.grid_w % g.window_w, 0);
        EXPECT_EQ(g.channels % g.heads, 0);
        EXPECT_EQ(g.growth, g.channels / 4);
    }
    const StageGeometry g0 = stage_geometry(c, 0), g1 = stage_geometry(c, 1), gb = stage_geometry(c, 2);
    EXPECT_EQ(g0.window_h, 4);
    EXPECT_EQ(g0.window_w, 4);
    EXPECT_EQ(g0.shift_h, 2);
    EXPECT_EQ(g1.window_w, 3);
    EXPECT_EQ(g1.shift_w, 1);
    EXPECT_EQ(gb.shift_h, 0);
    EXPECT_EQ(gb.shift_w, 0);
}

TEST(ModelConfig, PaperScaleHeadsFollowChannels) {
    const ModelConfig c = ModelConfig::paper_scale();
    EXPECT_NO_THROW(c.validate());
    for (int s = 0; s <= c.stage_count(); ++s) EXPECT_EQ(stage_geometry(c, s).heads, (96 << s) / 32);
}

TEST(ModelConfig, InvalidConfigsRejected) {
    ModelConfig c = ModelConfig::desk();
    c.stage_depths = {2, 3};
    EXPECT_THROW(c.validate(), InvalidArgument);
    c = ModelConfig::desk();
    c.head_count = 5;
    EXPECT_THROW(c.validate(), InvalidArgument);
    c = ModelConfig::desk();
    c.input_w = 50;
    EXPECT_THROW(c.validate(), InvalidArgument);
    c = ModelConfig::desk();
    c.stage_depths = {2, 2, 2, 2};
    EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(ModelWeights, InitDeterministicPerSeed) {
    const ModelConfig c = ModelConfig::desk();
    const auto a = init_weights<float>(c, 7), b = init_weights<float>(c, 7), d = init_weights<float>(c, 8);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.checksum(), b.checksum());
    EXPECT_FALSE(a == d);
    EXPECT_NE(a.checksum(), d.checksum());
    EXPECT_TRUE(a.all_finite());
}

TEST(ModelWeights, InitRule) {
    const auto w = init_weights<double>(ModelConfig::desk(), 1);
    for (double v : w["enc0.blk0.ln1.weight"]) EXPECT_EQ(v, 1.0);
    for (double v : w["final.norm.weight"]) EXPECT_EQ(v, 1.0);
    for (double v : w["enc0.blk0.attn.q.bias"]) EXPECT_EQ(v, 0.0);
    for (double v : w["enc0.blk0.attn.rel_bias"]) EXPECT_EQ(v, 0.0);
    for (double v : w["embed.proj.weight"]) EXPECT_LE(std::abs(v), 0.04 + 1e-12);
    EXPECT_THROW(w["no.such.tensor"], InvalidArgument);
}

TEST(PatchEmbed, DeskShapeAndZeroImage) {
    const ModelConfig c = ModelConfig::desk();
    auto w = init_weights<double>(c, 1);
    const auto f = patch_embed(wctest::random_image(3, 64, 48, 1), w, c);
    EXPECT_EQ(f.grid_h, 16);
    EXPECT_EQ(f.grid_w, 12);
    EXPECT_EQ(f.channels(), 32);
    const auto z = patch_embed(Image(3, 64, 48), w, c);
    EXPECT_EQ(z.data.cwiseAbs().maxCoeff(), 0.0);
}

TEST(PatchEmbed, OneHotPixelIsLocal) {
    const ModelConfig c = ModelConfig::desk();
    auto w = init_weights<double>(c, 2);
    Image img(3, 64, 48);
    img.at(1, 37, 22) = 1.0;
    const auto f = patch_embed(img, w, c);
    const int owner = (37 / 4) * 12 + 22 / 4;
    for (Eigen::Index r = 0; r < f.data.rows(); ++r) {
        const double mag = f.data.row(r).cwiseAbs().maxCoeff();
        if (r == owner) {
            EXPECT_GT(mag, 0.0);
        } else {
            EXPECT_EQ(mag, 0.0) << r;
        }
    }
}

TEST(Windows, UnshiftedPartitionOrder) {
    FeatureMap<double> x{Layout::Grid, 4, 4, 0, 0, 0, 0, M(16, 1)};
    for (int i = 0; i < 16; ++i) x.data(i, 0) = i;
    const auto w = window_partition(x, 2, 2, 0, 0);
    const int expect[16] = {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15};
    for (int k = 0; k < 16; ++k) EXPECT_EQ(w.data(k, 0), expect[k]);
    EXPECT_EQ(w.layout, Layout::Windowed);
}

TEST(Windows, ShiftedPartitionMatchesIndexOracle) {
    const int gh = 4, gw = 6, wh = 2, ww = 3, sh = 1, sw = 1;
    FeatureMap<double> x{Layout::Grid, gh, gw, 0, 0, 0, 0, M(gh * gw, 1)};
    for (int i = 0; i < gh * gw; ++i) x.data(i, 0) = i;
    const auto w = window_partition(x, wh, ww, sh, sw);
    int k = 0;
    for (int wy = 0; wy < gh / wh; ++wy) {
        for (int wx = 0; wx < gw / ww; ++wx) {
            for (int ty = 0; ty < wh; ++ty) {
                for (int tx = 0; tx < ww; ++tx, ++k) {
                    const int y = (wy * wh + ty + sh) % gh, xx = (wx * ww + tx + sw) % gw;
                    EXPECT_EQ(w.data(k, 0), y * gw + xx);
                }
            }
        }
    }
}

TEST(Windows, PartitionReverseRoundtripIsExact) {
    FeatureMap<double> x{Layout::Grid, 8, 6, 0, 0, 0, 0, random_mat(48, 5, 3)};
    for (auto [sh, sw] : {std::pair{0, 0}, {1, 1}, {2, 1}, {3, 2}}) {
        const auto back = window_reverse(window_partition(x, 4, 3, sh, sw));
        EXPECT_EQ(back.layout, Layout::Grid);
        EXPECT_TRUE(back.data == x.data);
    }
    EXPECT_THROW(window_partition(x, 3, 3, 0, 0), InvalidArgument);
}

TEST(Dcm, ShapesAndDenseChannelCounts) {
    const StageGeometry g = stage8();
    std::vector<ParamSpec> schema;
    append_block_schema(schema, "", g);
    ModelWeights<double> w(schema);
    randomize(w, 1, 0.3);
    DcmCache<double> cache;
    const M y = dcm_forward(random_mat(64, 8, 2), g, ParamScope<double>{&w, ""}, cache);
    EXPECT_EQ(y.rows(), 64);
    EXPECT_EQ(y.cols(), 8);
    for (int r = 1; r <= 3; ++r) EXPECT_EQ(cache.concat[r - 1].cols(), g.growth * r);
    EXPECT_EQ(cache.all.cols(), 4 * g.growth);
}

TEST(Dcm, ZeroWeightsGiveZeroOutput) {
    const StageGeometry g = stage8();
    std::vector<ParamSpec> schema;
    append_block_schema(schema, "", g);
    ModelWeights<double> w(schema);
    DcmCache<double> cache;
    const M y = dcm_forward(random_mat(64, 8, 2), g, ParamScope<double>{&w, ""}, cache);
    EXPECT_EQ(y.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Msa, SingleTokenWindowReturnsValues) {
    auto fm = [](const M& m) { return FeatureMap<double>{Layout::Windowed, 2, 3, 1, 1, 0, 0, m}; };
    const M q = random_mat(6, 4, 1), k = random_mat(6, 4, 2), v = random_mat(6, 4, 3);
    const std::vector<double> table(2, 0.0);
    const auto out = msa(fm(q), fm(k), fm(v), std::span<const double>(table), 2);
    EXPECT_TRUE(out.data == v);
}

TEST(Msa, IdenticalKeysAverageValues) {
    auto fm = [](const M& m) { return FeatureMap<double>{Layout::Windowed, 1, 2, 1, 2, 0, 0, m}; };
    const M q = random_mat(2, 3, 1), v = random_mat(2, 3, 3);
    M k(2, 3);
    k.row(0) = random_mat(1, 3, 2);
    k.row(1) = k.row(0);
    const std::vector<double> table(3, 0.0);
    const auto out = msa(fm(q), fm(k), fm(v), std::span<const double>(table), 1);
    for (int i = 0; i < 2; ++i) {
        for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.data(i, c), 0.5 * (v(0, c) + v(1, c)), 1e-15);
    }
}

TEST(Msa, SoftmaxRowsSumToOne) {
    const StageGeometry g = stage8();
    std::vector<double> table(static_cast<std::size_t>(g.bias_table_rows() * g.heads));
    std::mt19937_64 rng(4);
    for (double& t : table) t = std::normal_distribution<double>(0, 2)(rng);
    AttentionCache<double> cache;
    attention_forward(random_mat(64, 8, 1, 3), random_mat(64, 8, 2, 3), random_mat(64, 8, 3), g, true,
                      table.data(), cache);
    for (const auto& p : cache.probs) {
        for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
    }
}

TEST(Mstb, ShapeAndResidualIdentity) {
    const StageGeometry g = stage8();
    std::vector<ParamSpec> schema;
    append_block_schema(schema, "blk0.", g);
    append_block_schema(schema, "blk1.", g);
    ModelWeights<double> w(schema);
    randomize(w, 5, 0.3);
    FeatureMap<double> x{Layout::Grid, 8, 8, 0, 0, 0, 0, random_mat(64, 8, 6)};
    const auto y = mstb_pair(x, w, g, "");
    EXPECT_EQ(y.data.rows(), 64);
    EXPECT_EQ(y.data.cols(), 8);
    EXPECT_FALSE(y.data == x.data);
    for (const char* b : {"blk0.", "blk1."}) {
        for (const char* t : {"attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias"}) {
            for (double& v : w[std::string(b) + t]) v = 0.0;
        }
    }
    EXPECT_TRUE(mstb_pair(x, w, g, "").data == x.data);
}

TEST(MergeExpand, Shapes) {
    FeatureMap<double> x{Layout::Grid, 16, 12, 0, 0, 0, 0, random_mat(192, 8, 1)};
    const M wm = random_mat(16, 32, 2, 0.2), we = random_mat(32, 16, 3, 0.2);
    const auto m = patch_merge(x, std::span<const double>(wm.data(), wm.size()));
    EXPECT_EQ(m.grid_h, 8);
    EXPECT_EQ(m.grid_w, 6);
    EXPECT_EQ(m.channels(), 16);
    const auto e = patch_expand(m, std::span<const double>(we.data(), we.size()));
    EXPECT_EQ(e.grid_h, 16);
    EXPECT_EQ(e.grid_w, 12);
    EXPECT_EQ(e.channels(), 8);
}

TEST(Sfb, IdentityKernelPassesEncoder) {
    FeatureMap<double> enc{Layout::Grid, 4, 3, 0, 0, 0, 0, random_mat(12, 5, 1)};
    FeatureMap<double> dec{Layout::Grid, 4, 3, 0, 0, 0, 0, random_mat(12, 5, 2)};
    M w = M::Zero(5, 10);
    for (int i = 0; i < 5; ++i) w(i, i) = 1.0;
    const std::vector<double> b(5, 0.0);
    const auto out = sfb(enc, dec, std::span<const double>(w.data(), w.size()), std::span<const double>(b));
    EXPECT_TRUE(out.data == enc.data);
}

TEST(Forward, DeskShapesAndDeterminism) {
    const ModelConfig c = ModelConfig::desk();
    const auto w = init_weights<float>(c, 3);
    const Image img = wctest::random_image(3, 64, 48, 4);
    const Prediction a = forward(img, w, c), b = forward(img, w, c);
    EXPECT_EQ(a.flow.channels, 2);
    EXPECT_EQ(a.flow.height, 64);
    EXPECT_EQ(a.flow.width, 48);
    EXPECT_EQ(a.seg.channels, 6);
    EXPECT_EQ(a.seg.height, 64);
    EXPECT_EQ(a.flow, b.flow);
    EXPECT_EQ(a.seg, b.seg);
    EXPECT_THROW(forward(Image(3, 48, 64), w, c), InvalidArgument);
}

TEST(Forward, FiniteOnLargeInputs) {
    const ModelConfig c = tiny();
    ModelWeights<double> w(parameter_schema(c));
    for (int trial = 0; trial < 5; ++trial) {
        std::mt19937_64 rng(trial);
        std::uniform_real_distribution<double> u(-10.0, 10.0);
        for (double& v : w.flat()) v = u(rng) * 0.1;
        Image img(3, 16, 16);
        for (double& v : img.data) v = u(rng);
        const Prediction p = forward(img, w, c);
        EXPECT_TRUE(p.flow.all_finite());
        for (double v : p.seg.data) EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Forward, FloatAgreesWithDouble) {
    const ModelConfig c = ModelConfig::desk();
    const auto wf = init_weights<float>(c, 9);
    const auto wd = wf.cast<double>();
    const Image img = wctest::random_image(3, 64, 48, 10);
    const Prediction a = forward(img, wf, c), b = forward(img, wd, c);
    for (std::size_t i = 0; i < a.flow.data.size(); ++i) EXPECT_NEAR(a.flow.data[i], b.flow.data[i], 1e-4);
}

TEST(Forward, BackwardAccumulates) {
    const ModelConfig c = tiny();
    auto w = init_weights<double>(c, 1);
    ForwardPass<double> pass(c, w);
    pass.run(wctest::random_image(3, 16, 16, 2));
    FlowMap df(16, 16, 1.0);
    SegLogits ds(16, 16, 0.5);
    ModelWeights<double> g1(w.schema()), g2(w.schema());
    pass.backward(df, ds, g1);
    pass.backward(df, ds, g2);
    pass.backward(df, ds, g2);
    for (std::size_t i = 0; i < g1.numel(); ++i) EXPECT_NEAR(g2.flat()[i], 2.0 * g1.flat()[i], 1e-12);
}
