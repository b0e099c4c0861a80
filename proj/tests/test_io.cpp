#include <doctest.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>

#include "ov3d/binary_io.hpp"
#include "ov3d/config.hpp"
#include "ov3d/error.hpp"

using namespace ov3d;

namespace {

// IEEE binary16 decoded from its fields.
double half_oracle(std::uint16_t h) {
  const int sign = h >> 15, exp = (h >> 10) & 0x1f, mant = h & 0x3ff;
  const double s = sign ? -1.0 : 1.0;
  if (exp == 31) return mant ? std::numeric_limits<double>::quiet_NaN() : s * INFINITY;
  if (exp == 0) return s * std::ldexp(mant, -24);
  return s * std::ldexp(1024 + mant, exp - 25);
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error raised");
  return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("half decoding matches the field formula for every bit pattern") {
  for (std::uint32_t h = 0; h < 65536; ++h) {
    const double want = half_oracle(static_cast<std::uint16_t>(h));
    const float got = half_to_float(static_cast<std::uint16_t>(h));
    if (std::isnan(want)) {
      CHECK(std::isnan(got));
    } else {
      CHECK(static_cast<double>(got) == want);
      CHECK(std::signbit(got) == static_cast<bool>(h >> 15));
    }
  }
}

TEST_CASE("half encoding rounds to nearest, ties to even") {
  // Every finite half survives the round trip.
  for (std::uint32_t h = 0; h < 65536; ++h) {
    if (((h >> 10) & 0x1f) == 31 && (h & 0x3ff)) continue;
    CHECK(float_to_half(half_to_float(static_cast<std::uint16_t>(h))) == h);
  }
  // Midpoints between neighbours go to the even one.
  for (std::uint16_t h : {std::uint16_t(0x0001), std::uint16_t(0x3c00), std::uint16_t(0x3c01), std::uint16_t(0x0400),
                          std::uint16_t(0x7000), std::uint16_t(0x83ff)}) {
    const double mid = 0.5 * (half_oracle(h) + half_oracle(static_cast<std::uint16_t>(h + 1)));
    const std::uint16_t even = (h & 1) ? static_cast<std::uint16_t>(h + 1) : h;
    CHECK(float_to_half(static_cast<float>(mid)) == even);
  }
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> e(-30, 16);
  for (int t = 0; t < 20000; ++t) {
    const float x = static_cast<float>((t % 2 ? -1 : 1) * std::exp2(e(rng)));
    const std::uint16_t h = float_to_half(x);
    const double err = std::abs(half_oracle(h) - x);
    if (std::isinf(half_oracle(h))) {
      CHECK(std::abs(x) >= 65520.0f);
      continue;
    }
    // No neighbouring half is closer.
    for (int d : {-1, 1}) {
      const auto n = static_cast<std::uint16_t>(h + d);
      if ((n & 0x7fff) >= 0x7c00 || ((n ^ h) & 0x8000)) continue;
      CHECK(err <= std::abs(half_oracle(n) - x));
    }
  }
  CHECK(std::isinf(half_to_float(float_to_half(1e6f))));
  CHECK(std::isnan(half_to_float(float_to_half(std::numeric_limits<float>::quiet_NaN()))));
  CHECK(float_to_half(1e-10f) == 0);
  CHECK(float_to_half(-0.0f) == 0x8000);
}

TEST_CASE("binary writer and reader are little-endian and bounds-checked") {
  BinaryWriter w;
  w.magic("ABCD");
  w.u8(7);
  w.u32(0x01020304u);
  w.f32(-1.5f);
  w.f16(0.5f);
  w.string("hi");
  const auto& b = w.buffer();
  REQUIRE(b.size() == 4 + 1 + 4 + 4 + 2 + 4 + 2);
  CHECK(b[5] == 0x04);
  CHECK(b[8] == 0x01);
  CHECK(std::bit_cast<std::uint32_t>(-1.5f) ==
        (std::uint32_t(b[9]) | std::uint32_t(b[10]) << 8 | std::uint32_t(b[11]) << 16 | std::uint32_t(b[12]) << 24));

  BinaryReader r(b, "test blob");
  r.expect_magic("ABCD");
  CHECK(r.u8() == 7);
  CHECK(r.u32() == 0x01020304u);
  CHECK(r.f32() == -1.5f);
  CHECK(r.f16() == 0.5f);
  CHECK(r.string() == "hi");
  CHECK(r.at_end());
  CHECK(code_of([&] { r.u8(); }) == ErrorCode::Truncated);

  BinaryReader m(b, "x");
  CHECK(code_of([&] { m.expect_magic("ABCE"); }) == ErrorCode::BadMagic);

  // A string length pointing past the end.
  BinaryWriter bad;
  bad.u32(100);
  BinaryReader s(bad.buffer(), "x");
  CHECK(code_of([&] { s.string(); }) == ErrorCode::Truncated);
  try {
    BinaryReader t({}, "named thing");
    t.u32();
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("named thing") != std::string::npos);
  }
}

TEST_CASE("files round trip and missing files are Io errors") {
  const auto dir = std::filesystem::temp_directory_path() / "ov3d_test_io";
  std::filesystem::create_directories(dir);
  const std::vector<std::uint8_t> data{0, 1, 255, 42};
  write_file_bytes(dir / "b.bin", data);
  CHECK(read_file_bytes(dir / "b.bin") == data);
  CHECK(code_of([&] { read_file_bytes(dir / "missing.bin"); }) == ErrorCode::Io);
  CHECK(code_of([&] { BinaryReader::from_file(dir / "missing.bin"); }) == ErrorCode::Io);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config text round trips through format and parse") {
  TrainConfig c;
  c.ray_batch = 123;
  c.lr_mlp = 3.14159e-5;
  c.betas = {0.8, 0.95};
  c.use_rda = false;
  c.grid = {16, 24, 32};
  c.seed = 987654321;
  c.tau = 1.0 / 3.0;
  const TrainConfig r = parse_config(format_config(c));
  CHECK(format_config(r) == format_config(c));
  CHECK(r.ray_batch == 123);
  CHECK(r.lr_mlp == c.lr_mlp);
  CHECK(r.tau == c.tau);
  CHECK(r.betas == c.betas);
  CHECK_FALSE(r.use_rda);
  CHECK((r.grid == c.grid).all());
  CHECK(r.seed == c.seed);
}

TEST_CASE("config parsing: comments, overrides and errors") {
  TrainConfig base;
  base.n_samples = 7;
  const TrainConfig c = parse_config("# comment\n\n  grid = 12  # cube\nuse_fda=off\n", base);
  CHECK((c.grid == 12).all());
  CHECK_FALSE(c.use_fda);
  CHECK(c.n_samples == 7);

  CHECK(code_of([] { parse_config("nonsense_key = 1"); }) == ErrorCode::Format);
  CHECK(code_of([] { parse_config("ray_batch = 12x"); }) == ErrorCode::Format);
  CHECK(code_of([] { parse_config("ray_batch 12"); }) == ErrorCode::Format);
  CHECK(code_of([] { parse_config("use_rda = maybe"); }) == ErrorCode::Format);
  CHECK(code_of([] { parse_config("grid = 1,2"); }) == ErrorCode::Format);
  CHECK(code_of([] { parse_config("betas = 0.9"); }) == ErrorCode::Format);
  // Well-formed but out of range.
  CHECK(code_of([] { parse_config("tau = 0"); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { parse_config("betas = 0.9, 1.0"); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { parse_config("grid = 1"); }) == ErrorCode::InvalidArgument);
  try {
    parse_config("tau = 0.2\n\nbogus = 3\n");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK(code_of([] { load_config("/nonexistent/ov3d.cfg"); }) == ErrorCode::Io);
}

TEST_CASE("field config follows the training config") {
  TrainConfig c;
  c.grid = {8, 9, 10};
  c.hidden_width = 16;
  Aabb box;
  box.lo = {-1, -1, -1};
  box.hi = {1, 1, 1};
  const FieldConfig f = field_config(c, box, 3, 12);
  CHECK((f.grid == c.grid).all());
  CHECK(f.n_scales == 3);
  CHECK(f.feature_dim == 12);
  CHECK(f.hidden_width == 16);
}
