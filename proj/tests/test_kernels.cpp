#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <vector>

#include <doctest.h>
#include <omp.h>

#include "aoe/error.hpp"
#include "aoe/kernels.hpp"

namespace k = aoe::kernels;
using aoe::DType;

namespace {

std::vector<double> gaussian(std::size_t n, std::uint64_t seed, double sigma = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, sigma);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::uint64_t bits(double x) { return std::bit_cast<std::uint64_t>(x); }

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (bits(a[i]) != bits(b[i])) return false;
  }
  return true;
}

// BF16 from a float by the classic bias-and-truncate bit trick. Exact RNE for
// values that are already floats, independent of the double code path.
std::uint16_t bf16_from_float(float f) {
  auto u = std::bit_cast<std::uint32_t>(f);
  u += 0x7FFF + ((u >> 16) & 1);
  return static_cast<std::uint16_t>(u >> 16);
}

// Nearest representable finite value by exhaustive search over a sorted
// table of every 16-bit pattern; ties go to the even encoding. Values beyond
// the largest finite one fall to infinity once they pass the rounding
// boundary, which the callers avoid.
struct NearestOracle {
  std::vector<std::pair<double, std::uint16_t>> table;

  explicit NearestOracle(double (*widen)(std::uint16_t)) {
    for (std::uint32_t b = 0; b < 0x8000; ++b) {
      const double v = widen(static_cast<std::uint16_t>(b));
      if (std::isfinite(v)) table.emplace_back(v, static_cast<std::uint16_t>(b));
    }
    std::sort(table.begin(), table.end());
  }

  std::uint16_t operator()(double x) const {
    const double a = std::fabs(x);
    auto hi = std::lower_bound(table.begin(), table.end(), std::make_pair(a, std::uint16_t{0}));
    std::uint16_t pick;
    if (hi == table.begin()) {
      pick = hi->second;
    } else {
      auto lo = std::prev(hi);
      const double dlo = a - lo->first;
      const double dhi = hi->first - a;
      if (dlo < dhi) pick = lo->second;
      else if (dhi < dlo) pick = hi->second;
      else pick = (lo->second & 1) == 0 ? lo->second : hi->second;
    }
    return static_cast<std::uint16_t>(pick | (std::signbit(x) ? 0x8000 : 0));
  }
};

}  // namespace

TEST_CASE("16-bit conversions match frozen reference encodings") {
  // Computed independently with exact rational arithmetic (bf16) and numpy
  // float16 (f16).
  struct Row {
    double v;
    std::uint16_t bf16, f16;
  };
  const Row rows[] = {
      {0.1, 0x3dcd, 0x2e66},
      {1.0 / 3.0, 0x3eab, 0x3555},
      {3.14159265358979, 0x4049, 0x4248},
      {1.00390625, 0x3f80, 0x3c04},
      {1.01171875, 0x3f82, 0x3c0c},
      {1.0039062500009095, 0x3f81, 0x3c04},
      {0.01, 0x3c24, 0x211f},
      {0.001, 0x3a83, 0x1419},
  };
  for (const auto& r : rows) {
    CAPTURE(r.v);
    CHECK(k::double_to_bf16(r.v) == r.bf16);
    CHECK(k::double_to_f16(r.v) == r.f16);
  }
}

TEST_CASE("decode of known patterns") {
  const std::byte bf16_one[] = {std::byte{0x80}, std::byte{0x3F}};
  CHECK(k::decode(bf16_one, DType::BF16) == std::vector<double>{1.0});
  const std::byte f16_half[] = {std::byte{0x00}, std::byte{0x38}};
  CHECK(k::decode(f16_half, DType::F16) == std::vector<double>{0.5});
  CHECK(k::double_to_bf16(1.0) == 0x3F80);
  CHECK(k::f16_to_double(0x0001) == std::ldexp(1.0, -24));
  CHECK(k::f16_to_double(0x7BFF) == 65504.0);
  CHECK(std::isinf(k::bf16_to_double(0x7F80)));
  CHECK(std::isnan(k::f16_to_double(0x7E00)));
}

TEST_CASE("halfway cases round to the even neighbour") {
  // Between 1 and the next value up.
  CHECK(k::double_to_bf16(1.0 + std::ldexp(1.0, -8)) == 0x3F80);
  CHECK(k::double_to_bf16(1.0 + 3 * std::ldexp(1.0, -8)) == 0x3F82);
  CHECK(k::double_to_f16(1.0 + std::ldexp(1.0, -11)) == 0x3C00);
  CHECK(k::double_to_f16(1.0 + 3 * std::ldexp(1.0, -11)) == 0x3C02);
  // A hair above the tie must round up: rounding through float first would
  // lose the hair and land on the even value instead.
  CHECK(k::double_to_bf16(1.0 + std::ldexp(1.0, -8) + std::ldexp(1.0, -40)) == 0x3F81);
  // Subnormal boundary and overflow.
  CHECK(k::double_to_f16(std::ldexp(1.0, -25)) == 0x0000);
  CHECK(k::double_to_f16(std::ldexp(1.0, -25) * (1 + 1e-9)) == 0x0001);
  CHECK(k::double_to_f16(3 * std::ldexp(1.0, -25)) == 0x0002);
  CHECK(k::double_to_f16(65519.99) == 0x7BFF);
  CHECK(k::double_to_f16(65520.0) == 0x7C00);
  CHECK(k::double_to_f16(-65520.0) == 0xFC00);
  CHECK(k::double_to_bf16(std::numeric_limits<double>::max()) == 0x7F80);
  CHECK(k::double_to_bf16(-0.0) == 0x8000);
  CHECK(k::double_to_f16(std::numeric_limits<double>::denorm_min()) == 0x0000);
}

TEST_CASE("BF16 encoding agrees with the float bit trick on random floats") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::uint32_t> u;
  int checked = 0;
  while (checked < 200000) {
    const float f = std::bit_cast<float>(u(rng));
    if (!std::isfinite(f)) continue;
    // The bit trick carries into the exponent and yields inf only for
    // values that round up past the largest finite bf16, as RNE does.
    REQUIRE(k::double_to_bf16(static_cast<double>(f)) == bf16_from_float(f));
    ++checked;
  }
}

TEST_CASE("16-bit encodings agree with a brute-force nearest-value oracle") {
  const NearestOracle bf16(&k::bf16_to_double);
  const NearestOracle f16(&k::f16_to_double);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> mant(1.0, 2.0);
  std::uniform_int_distribution<int> ex_bf16(-140, 126);
  std::uniform_int_distribution<int> ex_f16(-26, 14);
  std::bernoulli_distribution neg(0.5);
  for (int i = 0; i < 20000; ++i) {
    const double s = neg(rng) ? -1.0 : 1.0;
    const double xb = s * std::ldexp(mant(rng), ex_bf16(rng));
    const double xf = s * std::ldexp(mant(rng), ex_f16(rng));
    CAPTURE(xb);
    CAPTURE(xf);
    REQUIRE(k::double_to_bf16(xb) == bf16(xb));
    REQUIRE(k::double_to_f16(xf) == f16(xf));
  }
  // Exact midpoints between adjacent table entries exercise the tie rule.
  for (std::size_t i = 0; i + 1 < f16.table.size(); i += 7) {
    const double mid = 0.5 * (f16.table[i].first + f16.table[i + 1].first);
    REQUIRE(k::double_to_f16(mid) == f16(mid));
  }
  for (std::size_t i = 0; i + 1 < bf16.table.size(); i += 7) {
    const double mid = 0.5 * (bf16.table[i].first + bf16.table[i + 1].first);
    REQUIRE(k::double_to_bf16(mid) == bf16(mid));
  }
}

TEST_CASE("encode after decode is the byte identity for every 16-bit pattern") {
  for (DType t : {DType::F16, DType::BF16}) {
    CAPTURE(aoe::to_string(t));
    std::vector<std::byte> raw;
    for (std::uint32_t b = 0; b <= 0xFFFF; ++b) {
      const auto v = static_cast<std::uint16_t>(b);
      // Signalling NaNs come back quiet; every other pattern is preserved.
      const int man_bits = t == DType::F16 ? 10 : 7;
      const std::uint32_t exp_mask = t == DType::F16 ? 0x7C00 : 0x7F80;
      const bool nan = (v & exp_mask) == exp_mask && (v & ((1u << man_bits) - 1)) != 0;
      const bool quiet = (v >> (man_bits - 1)) & 1;
      if (nan && !quiet) continue;
      raw.push_back(static_cast<std::byte>(v & 0xFF));
      raw.push_back(static_cast<std::byte>(v >> 8));
    }
    CHECK(k::encode(k::decode(raw, t), t) == raw);
  }
}

TEST_CASE("encode after decode is the byte identity on random data for wide types") {
  std::mt19937_64 rng(3);
  for (DType t : {DType::F64, DType::F32, DType::I64, DType::I32, DType::I8, DType::U8}) {
    CAPTURE(aoe::to_string(t));
    std::vector<std::byte> raw(1000 * aoe::byte_width(t));
    for (auto& b : raw) b = static_cast<std::byte>(rng() & 0xFF);
    if (t == DType::I64) {
      // Only integers within +-2^53 survive the trip through double.
      for (std::size_t i = 7; i < raw.size(); i += 8) raw[i] = std::byte{0};
      for (std::size_t i = 6; i < raw.size(); i += 8) raw[i] &= std::byte{0x0F};
    }
    if (t == DType::F64 || t == DType::F32) {
      // Keep NaNs out; their payload handling is checked separately.
      const auto w = aoe::byte_width(t);
      for (std::size_t i = w - 1; i < raw.size(); i += w) raw[i] &= std::byte{0x3F};
    }
    CHECK(k::encode(k::decode(raw, t), t) == raw);
  }
  std::vector<std::byte> b{std::byte{0}, std::byte{1}, std::byte{0}};
  CHECK(k::encode(k::decode(b, DType::BOOL), DType::BOOL) == b);
}

TEST_CASE("random F32 values round-trip through decode and encode bit-exactly") {
  std::mt19937_64 rng(17);
  std::vector<float> v(1000);
  for (auto& x : v) x = static_cast<float>(std::normal_distribution<double>(0, 3)(rng));
  std::vector<std::byte> raw(v.size() * 4);
  std::memcpy(raw.data(), v.data(), raw.size());
  CHECK(k::encode(k::decode(raw, DType::F32), DType::F32) == raw);
}

TEST_CASE("integer encoding rounds half to even and saturates") {
  const std::vector<double> v{2.5, 3.5, -2.5, 1e10, -1e10, std::nan(""), 127.4};
  const auto raw = k::encode(v, DType::I8);
  std::vector<std::int8_t> got(raw.size());
  std::memcpy(got.data(), raw.data(), raw.size());
  CHECK(got == std::vector<std::int8_t>{2, 4, -2, 127, -128, 0, 127});
  const auto u = k::encode(std::vector<double>{-3.0, 300.0}, DType::U8);
  CHECK(u == std::vector<std::byte>{std::byte{0}, std::byte{255}});
  const auto b = k::encode(std::vector<double>{0.4, 0.6, -1.0, 0.0}, DType::BOOL);
  CHECK(b == std::vector<std::byte>{std::byte{0}, std::byte{1}, std::byte{1}, std::byte{0}});
}

TEST_CASE("normalized Frobenius difference: forced values") {
  const std::vector<double> zeros(4, 0.0), ones(4, 1.0);
  CHECK(k::normalized_frobenius_diff(zeros, ones) == 1.0);
  const auto r = gaussian(1000, 1);
  CHECK(k::normalized_frobenius_diff(r, r) == 0.0);
  // sqrt(1.25 / 4), from numpy.
  const std::vector<double> a{1, 2, 3, 4}, b{1.5, 2, 2, 4};
  CHECK(k::normalized_frobenius_diff(a, b) == 0.5590169943749475);
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(k::normalized_frobenius_diff(std::vector<double>{1, inf}, std::vector<double>{1, 2}) == inf);
  CHECK(std::isnan(k::normalized_frobenius_diff(std::vector<double>{1, inf}, std::vector<double>{1, inf})));
  CHECK(std::isnan(k::normalized_frobenius_diff(std::vector<double>{std::nan(""), 0}, std::vector<double>{1, 2})));
  CHECK_THROWS_AS(k::normalized_frobenius_diff(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}),
                  aoe::Error);
}

TEST_CASE("normalized Frobenius difference agrees with a two-pass compensated reference") {
  const auto a = gaussian(100000, 21);
  const auto b = gaussian(100000, 22);
  std::vector<double> sq(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) sq[i] = (a[i] - b[i]) * (a[i] - b[i]);
  // Kahan-Babuska in long double over the full list.
  long double s = 0, c = 0;
  for (double x : sq) {
    const long double t = s + x;
    c += std::fabs(s) >= std::fabs(static_cast<long double>(x)) ? (s - t) + x : (x - t) + s;
    s = t;
  }
  const double ref = std::sqrt(static_cast<double>((s + c) / sq.size()));
  CHECK(std::fabs(k::normalized_frobenius_diff(a, b) - ref) / ref <= 1e-12);
}

TEST_CASE("normalized Frobenius difference is symmetric and scales with |c|") {
  for (std::size_t n : {1u, 7u, 4096u, 4097u, 70000u}) {
    const auto a = gaussian(n, n);
    const auto b = gaussian(n, n + 1);
    const double d = k::normalized_frobenius_diff(a, b);
    CHECK(bits(d) == bits(k::normalized_frobenius_diff(b, a)));
    for (double c : {2.0, -0.5, 0.25, -8.0}) {
      std::vector<double> ca(n), cb(n);
      for (std::size_t i = 0; i < n; ++i) {
        ca[i] = c * a[i];
        cb[i] = c * b[i];
      }
      // Powers of two scale exactly.
      CHECK(k::normalized_frobenius_diff(ca, cb) == std::fabs(c) * d);
    }
    std::vector<double> ta(n), tb(n);
    for (std::size_t i = 0; i < n; ++i) {
      ta[i] = 3.0 * a[i];
      tb[i] = 3.0 * b[i];
    }
    const double scaled = k::normalized_frobenius_diff(ta, tb);
    CHECK(std::fabs(scaled - 3.0 * d) <= 4 * std::numeric_limits<double>::epsilon() * 3.0 * d);
  }
}

TEST_CASE("linear combination") {
  const auto a = gaussian(5000, 31);
  const auto b = gaussian(5000, 32);
  const std::vector<std::span<const double>> ins{a, b};

  SUBCASE("one-hot weights return the selected input bit-exactly") {
    auto withzero = a;
    withzero[3] = -0.0;
    withzero[4] = std::numeric_limits<double>::infinity();
    const std::vector<std::span<const double>> z{withzero, b};
    CHECK(same_bits(k::linear_combination(z, std::vector<double>{1.0, 0.0}), withzero));
    CHECK(same_bits(k::linear_combination(z, std::vector<double>{0.0, 1.0}), b));
  }
  SUBCASE("equal halves of the same tensor are exact") {
    const std::vector<std::span<const double>> same{a, a};
    CHECK(same_bits(k::linear_combination(same, std::vector<double>{0.5, 0.5}), a));
  }
  SUBCASE("matches an elementwise scalar reference") {
    const auto got = k::linear_combination(ins, std::vector<double>{0.25, 0.75});
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(bits(got[i]) == bits(0.25 * a[i] + 0.75 * b[i]));
    // numpy reference for two fixed pairs.
    const std::vector<double> x{0.1, 0.2}, y{0.3, -0.4};
    const std::vector<std::span<const double>> xy{x, y};
    CHECK(k::linear_combination(xy, std::vector<double>{0.25, 0.75}) ==
          std::vector<double>{0.24999999999999997, -0.25000000000000006});
  }
  SUBCASE("repeated calls are bit-identical") {
    const std::vector<double> w{0.3, 0.7};
    CHECK(same_bits(k::linear_combination(ins, w), k::linear_combination(ins, w)));
  }
  SUBCASE("NaN in a weighted input propagates; counted by count_non_finite") {
    auto bad = a;
    bad[10] = std::nan("");
    const std::vector<std::span<const double>> z{bad, b};
    const auto out = k::linear_combination(z, std::vector<double>{0.5, 0.5});
    CHECK(std::isnan(out[10]));
    CHECK(k::count_non_finite(out) == 1);
  }
  SUBCASE("argument errors") {
    CHECK_THROWS_AS(k::linear_combination(ins, std::vector<double>{1.0}), aoe::Error);
    const std::vector<double> shorter(10);
    const std::vector<std::span<const double>> bad{a, shorter};
    CHECK_THROWS_AS(k::linear_combination(bad, std::vector<double>{0.5, 0.5}), aoe::Error);
  }
}

TEST_CASE("OpenMP kernels are bit-identical to the serial reference for any thread count") {
  const std::size_t n = 3 * k::kParallelThreshold + 123;
  const auto a = gaussian(n, 41, 0.05);
  const auto b = gaussian(n, 42, 0.05);
  const auto c = gaussian(n, 43, 0.05);
  const std::vector<std::span<const double>> ins{a, b, c};
  const std::vector<double> w{0.2, 0.3, 0.5};

  std::vector<double> ref_comb(n);
  k::serial::linear_combination(ins, w, ref_comb);
  const double ref_diff = k::serial::normalized_frobenius_diff(a, b);
  std::vector<std::byte> ref_bf16(n * 2);
  k::serial::encode(a, DType::BF16, ref_bf16);
  std::vector<double> ref_dec(n);
  k::serial::decode(ref_bf16, DType::BF16, ref_dec);

  const int saved = omp_get_max_threads();
  for (int threads : {1, 2, 3, 8}) {
    CAPTURE(threads);
    omp_set_num_threads(threads);
    CHECK(bits(k::normalized_frobenius_diff(a, b)) == bits(ref_diff));
    CHECK(same_bits(k::linear_combination(ins, w), ref_comb));
    CHECK(k::encode(a, DType::BF16) == ref_bf16);
    CHECK(same_bits(k::decode(ref_bf16, DType::BF16), ref_dec));
  }
  omp_set_num_threads(saved);
}
