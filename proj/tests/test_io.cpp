#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"
#include "widecorrect/errors.hpp"
#include "widecorrect/io.hpp"

using namespace widecorrect;
namespace fs = std::filesystem;

namespace {

void truncate_file(const fs::path& p, std::uintmax_t keep) { fs::resize_file(p, keep); }

void append_bytes(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::app);
    out << bytes;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// Expects a DataError whose message names the file.
template <typename F>
void expect_data_error(const fs::path& p, F&& f) {
    try {
        f();
        ADD_FAILURE() << "no DataError for " << p;
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos) << e.what();
        EXPECT_EQ(e.path(), p.string());
    }
}

}  // namespace

TEST(Flo, RoundtripIsFloat32Exact) {
    wctest::TempDir dir;
    const FlowMap f = wctest::random_flow(7, 11, -30.0, 30.0, 4);
    io::write_flo(dir / "a.flo", f);
    const FlowMap g = io::read_flo(dir / "a.flo");
    ASSERT_TRUE(g.same_shape(f));
    for (std::size_t i = 0; i < f.data.size(); ++i) EXPECT_EQ(g.data[i], static_cast<double>(static_cast<float>(f.data[i])));
    EXPECT_EQ(fs::file_size(dir / "a.flo"), 12u + 7u * 11u * 8u);
}

TEST(Flo, CorruptionIsReported) {
    wctest::TempDir dir;
    const FlowMap f = wctest::random_flow(4, 5, -1.0, 1.0, 1);
    const fs::path p = dir / "c.flo";
    io::write_flo(p, f);
    truncate_file(p, 30);
    expect_data_error(p, [&] { io::read_flo(p); });
    truncate_file(p, 6);
    expect_data_error(p, [&] { io::read_flo(p); });
    io::write_flo(p, f);
    append_bytes(p, "x");
    expect_data_error(p, [&] { io::read_flo(p); });
    write_text(p, std::string(64, 'z'));
    expect_data_error(p, [&] { io::read_flo(p); });
    expect_data_error(dir / "missing.flo", [&] { io::read_flo(dir / "missing.flo"); });
}

TEST(Flo, NonFiniteValueRejected) {
    wctest::TempDir dir;
    FlowMap f(2, 2);
    const fs::path p = dir / "n.flo";
    io::write_flo(p, f);
    std::fstream io_(p, std::ios::binary | std::ios::in | std::ios::out);
    io_.seekp(12);
    const float nan = std::numeric_limits<float>::quiet_NaN();
    io_.write(reinterpret_cast<const char*>(&nan), sizeof nan);
    io_.close();
    expect_data_error(p, [&] { io::read_flo(p); });
}

TEST(Png, QuantizedImageRoundtripsExactly) {
    wctest::TempDir dir;
    Image img(3, 6, 5);
    for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>((i * 37) % 256) / 255.0;
    io::write_png(dir / "i.png", img);
    EXPECT_EQ(io::read_png(dir / "i.png"), img);
    Image gray(1, 3, 4, 0.5);
    io::write_png(dir / "g.png", gray);
    const Image g = io::read_png(dir / "g.png");
    EXPECT_EQ(g.channels, 1);
    EXPECT_NEAR(g.data[0], 0.5, 0.5 / 255.0 + 1e-12);
}

TEST(Png, CorruptionIsReported) {
    wctest::TempDir dir;
    const fs::path p = dir / "bad.png";
    write_text(p, "definitely not a png");
    expect_data_error(p, [&] { io::read_png(p); });
    io::write_png(p, wctest::random_image(3, 16, 16, 2));
    truncate_file(p, fs::file_size(p) / 2);
    expect_data_error(p, [&] { io::read_png(p); });
    expect_data_error(dir / "none.png", [&] { io::read_png(dir / "none.png"); });
}

TEST(SegMaskFile, StackedRoundtrip) {
    wctest::TempDir dir;
    SegMask m(5, 4);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<std::uint8_t>(i % 3);
    io::write_seg_mask(dir / "m.png", m);
    const auto stacked = io::read_label_png(dir / "m.png");
    EXPECT_EQ(stacked.height, 10);
    EXPECT_EQ(stacked.width, 4);
    EXPECT_EQ(io::read_seg_mask(dir / "m.png"), m);
}

TEST(SegMaskFile, OutOfRangeLabelRejected) {
    wctest::TempDir dir;
    Planes<std::uint8_t> bad(1, 4, 3, 7);
    io::write_label_png(dir / "b.png", bad);
    expect_data_error(dir / "b.png", [&] { io::read_seg_mask(dir / "b.png"); });
}
