#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "emoprobe/trace.hpp"

using namespace emoprobe;

namespace {

std::string fixture(const std::string& name) { return std::string(EMOPROBE_FIXTURES) + "/" + name; }

// Same formula as make_golden_trace.py.
float golden_value(int s, int code, int l, int t, int i) {
  return static_cast<float>(s + code / 10.0 + l / 100.0 + t / 1000.0 + i / 10000.0);
}

Trace small_trace(std::uint32_t mask = kSiteMhsa | kSiteFfn | kSiteHidden | kSiteAttention) {
  Trace t;
  t.meta.model_name = "unit";
  t.meta.layers = 3;
  t.meta.hidden = 5;
  t.meta.tokens = 2;
  t.meta.heads = 2;
  t.meta.site_mask = mask;
  t.meta.labels = {"a", "b", "c"};
  t.meta.appraisal_names = {"x"};
  Rng rng(1);
  for (int s = 0; s < 4; ++s) {
    TraceSample ts;
    ts.label = static_cast<EmotionId>(s % 3);
    ts.appraisals = {static_cast<float>(s)};
    auto& r = ts.record;
    r.layers = 3;
    r.hidden_size = 5;
    r.heads = 2;
    r.seq_len = 4 + s;
    r.positions = {r.seq_len - 2, r.seq_len - 1};
    auto fill = [&](std::vector<float>& v, std::size_t n) {
      v.resize(n);
      for (auto& x : v) x = static_cast<float>(rng.normal());
    };
    if (mask & kSiteMhsa) fill(r.mhsa, 3 * 2 * 5);
    if (mask & kSiteFfn) fill(r.ffn, 3 * 2 * 5);
    if (mask & kSiteHidden) fill(r.hidden, 4 * 2 * 5);
    if (mask & kSiteAttention) {
      fill(r.attention, 3 * 2 * r.seq_len);
      r.has_attention = true;
    }
    t.samples.push_back(ts);
  }
  return t;
}

std::size_t header_length(const std::vector<unsigned char>& b) {
  // Walk the header fields; used to bound the byte fuzz.
  std::size_t p = 12;
  auto u32 = [&](std::size_t at) {
    return static_cast<std::uint32_t>(b[at] | (b[at + 1] << 8) | (b[at + 2] << 16) | (b[at + 3] << 24));
  };
  p += 4 + u32(p);
  p += 5 * 4 + 8;
  for (int table = 0; table < 2; ++table) {
    const auto n = u32(p);
    p += 4;
    for (std::uint32_t i = 0; i < n; ++i) p += 4 + u32(p);
  }
  return p;
}

// Recomputes header and file CRCs after a deliberate edit.
void refresh_crcs(std::vector<unsigned char>& bytes) {
  const std::uint32_t hcrc = crc32_of(bytes.data(), header_length(bytes));
  const std::size_t n = bytes.size();
  for (int i = 0; i < 4; ++i) bytes[n - 8 + i] = static_cast<unsigned char>(hcrc >> (8 * i));
  const std::uint32_t fcrc = crc32_of(bytes.data(), n - 4);
  for (int i = 0; i < 4; ++i) bytes[n - 4 + i] = static_cast<unsigned char>(fcrc >> (8 * i));
}

}  // namespace

TEST(Trace, RoundTripIsByteIdentical) {
  const auto t = small_trace();
  const auto bytes = encode_trace(t);
  const auto back = decode_trace(bytes);
  EXPECT_EQ(back.meta, t.meta);
  ASSERT_EQ(back.samples.size(), t.samples.size());
  for (std::size_t i = 0; i < t.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].label, t.samples[i].label);
    EXPECT_EQ(back.samples[i].record.hidden, t.samples[i].record.hidden);
    EXPECT_EQ(back.samples[i].record.attention, t.samples[i].record.attention);
    EXPECT_EQ(back.samples[i].record.positions, t.samples[i].record.positions);
  }
  EXPECT_EQ(encode_trace(back), bytes);
}

TEST(Trace, RewritingGivesSameFile) {
  const auto dir = std::filesystem::temp_directory_path();
  const auto a = (dir / "emoprobe_rt_a.emtr").string(), b = (dir / "emoprobe_rt_b.emtr").string();
  write_trace(small_trace(), a);
  write_trace(small_trace(), b);
  EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
  write_trace(read_trace(a), b);
  EXPECT_EQ(read_file_bytes(a), read_file_bytes(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST(Trace, GoldenFixtureExactValues) {
  const auto t = read_trace(fixture("golden.emtr"));
  EXPECT_EQ(t.meta.model_name, "golden-fixture");
  EXPECT_EQ(t.meta.layers, 2u);
  EXPECT_EQ(t.meta.hidden, 4u);
  EXPECT_EQ(t.meta.tokens, 2u);
  EXPECT_EQ(t.meta.heads, 2u);
  EXPECT_EQ(t.meta.labels, (std::vector<std::string>{"joy", "anger"}));
  EXPECT_EQ(t.meta.appraisal_names, (std::vector<std::string>{"pleasantness", "other_agency"}));
  ASSERT_EQ(t.samples.size(), 2u);
  EXPECT_EQ(t.samples[0].label, 0);
  EXPECT_EQ(t.samples[1].label, 1);
  EXPECT_EQ(t.samples[0].appraisals, (std::vector<float>{5.0f, 1.0f}));
  EXPECT_EQ(t.samples[1].appraisals, (std::vector<float>{1.0f, 5.0f}));
  for (int s = 0; s < 2; ++s) {
    const auto& r = t.samples[s].record;
    EXPECT_EQ(r.seq_len, 3u + s);
    for (int l = 0; l <= 2; ++l)
      for (int tok = 0; tok < 2; ++tok) {
        const std::int64_t pos = tok - 2;
        for (int i = 0; i < 4; ++i) {
          EXPECT_EQ(r.at(Site::kHidden, l, pos)[i], golden_value(s, 3, l, tok, i));
          if (l >= 1) {
            EXPECT_EQ(r.at(Site::kMhsa, l, pos)[i], golden_value(s, 1, l, tok, i));
            EXPECT_EQ(r.at(Site::kFfn, l, pos)[i], golden_value(s, 2, l, tok, i));
          }
        }
      }
    for (std::uint32_t l = 1; l <= 2; ++l)
      for (std::uint32_t h = 0; h < 2; ++h)
        for (float a : r.attention_row(l, h)) EXPECT_EQ(a, 1.0f / static_cast<float>(3 + s));
  }
}

TEST(Trace, GoldenFixtureReencodesIdentically) {
  const auto bytes = read_file_bytes(fixture("golden.emtr"));
  EXPECT_EQ(encode_trace(decode_trace(bytes)), bytes);
}

TEST(Trace, HeaderByteFuzzIsRejected) {
  const auto bytes = read_file_bytes(fixture("golden.emtr"));
  const std::size_t n = header_length(bytes);
  ASSERT_GT(n, 40u);
  for (std::size_t i = 0; i < n; ++i)
    for (unsigned char flip : {0x01, 0x80, 0xFF}) {
      auto m = bytes;
      m[i] ^= flip;
      EXPECT_THROW(decode_trace(m), FormatError) << "byte " << i << " flip " << int(flip);
    }
}

TEST(Trace, TruncatedBodyFailsCrc) {
  auto bytes = encode_trace(small_trace());
  bytes.erase(bytes.begin() + 200, bytes.begin() + 204);
  EXPECT_THROW(decode_trace(bytes), FormatError);
}

TEST(Trace, CorruptedRecordReportsOffset) {
  const auto t = small_trace();
  auto bytes = encode_trace(t);
  const std::size_t target = bytes.size() / 2;
  bytes[target] ^= 0x10;
  const auto rep = validate_trace_bytes(bytes);
  EXPECT_FALSE(rep.valid);
  ASSERT_TRUE(rep.error_offset.has_value());
  EXPECT_LE(*rep.error_offset, target);
  EXPECT_NE(rep.message.find("CRC"), std::string::npos);
}

TEST(Trace, NaNActivationIsRejectedOnWrite) {
  auto t = small_trace();
  t.samples[1].record.ffn[3] = NAN;
  EXPECT_THROW(encode_trace(t), FormatError);
}

TEST(Trace, UnknownSiteBitIsRejected) {
  auto t = small_trace();
  t.meta.site_mask |= 1u << 5;
  EXPECT_THROW(encode_trace(t), FormatError);
}

TEST(Trace, UnknownSiteBitInFileIsRejected) {
  // Re-assemble a file with an extra mask bit and consistent CRCs.
  auto t = small_trace(kSiteHidden);
  auto bytes = encode_trace(t);
  const std::size_t mask_at = 12 + 4 + t.meta.model_name.size() + 8;
  bytes[mask_at] |= 0x20;
  refresh_crcs(bytes);
  try {
    decode_trace(bytes);
    FAIL() << "accepted unknown site bit";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("site bit"), std::string::npos);
  }
}

TEST(Trace, ShapeInconsistencyIsRejected) {
  auto t = small_trace();
  t.samples[2].record.hidden.pop_back();
  EXPECT_THROW(encode_trace(t), FormatError);
  auto u = small_trace();
  u.samples[0].label = 7;
  EXPECT_THROW(encode_trace(u), FormatError);
}

TEST(Trace, MissingFfnIsReportedAbsentButValid) {
  const auto t = small_trace(kSiteMhsa | kSiteHidden);
  const auto rep = validate_trace_bytes(encode_trace(t));
  ASSERT_TRUE(rep.valid) << rep.message;
  const auto& ffn = rep.presence[static_cast<std::size_t>(Site::kFfn)];
  const auto& hidden = rep.presence[static_cast<std::size_t>(Site::kHidden)];
  for (std::uint32_t l = 1; l <= 3; ++l) EXPECT_FALSE(ffn[l]);
  for (std::uint32_t l = 0; l <= 3; ++l) EXPECT_TRUE(hidden[l]);
  EXPECT_NE(rep.to_string().find("ffn: . . . ."), std::string::npos);
}

TEST(Trace, ValidFixtureFullPresence) {
  const auto rep = validate_trace(fixture("golden.emtr"));
  ASSERT_TRUE(rep.valid) << rep.message;
  EXPECT_EQ(rep.samples, 2u);
  for (Site s : {Site::kMhsa, Site::kFfn, Site::kAttention})
    for (std::uint32_t l = 1; l <= 2; ++l) EXPECT_TRUE(rep.presence[static_cast<std::size_t>(s)][l]);
  EXPECT_EQ(rep.to_string().rfind("valid", 0), 0u);
}

TEST(Trace, MissingFileIsInvalidNotThrown) {
  const auto rep = validate_trace("/nonexistent/file.emtr");
  EXPECT_FALSE(rep.valid);
}

TEST(Trace, VersionGate) {
  auto bytes = encode_trace(small_trace());
  bytes[4] = 2;
  EXPECT_THROW(decode_trace(bytes), FormatError);
  refresh_crcs(bytes);
  try {
    decode_trace(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}
