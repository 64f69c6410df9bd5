#pragma once

// Binary activation traces (.emtr). All integers and floats little-endian.
//
//   header
//     "EMTR"                        4 bytes
//     version                       u32 (= 1)
//     endianness marker             u32 0x01020304
//     model name                    u32 byte length + UTF-8 bytes
//     layers L, hidden d            u32, u32
//     site mask                     u32 (bit0 mhsa, bit1 ffn, bit2 hidden, bit3 attention)
//     captured tokens k, heads      u32, u32
//     sample count N                u64
//     emotion labels                u32 count, then (u32 length + UTF-8) each
//     appraisal names               u32 count, then (u32 length + UTF-8) each
//   body, per sample
//     label id                      u16
//     sequence length               u32 (>= k)
//     appraisal scores              f32 x appraisal count
//     activations                   f32 [site][layer][token][d]; sites in bit order,
//                                   mhsa/ffn layers 1..L, hidden layers 0..L,
//                                   tokens oldest first (last k positions)
//     attention (if bit3)           f32 [layer 1..L][head][sequence length],
//                                   the last token's attention row
//   footer
//     offset index                  N x (u64 record offset, u32 record CRC32)
//     index offset                  u64
//     header CRC32                  u32 over the header bytes
//     file CRC32                    u32 over every preceding byte

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "emoprobe/errors.hpp"
#include "emoprobe/model.hpp"

namespace emoprobe {

inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::uint32_t kEndianMarker = 0x01020304u;

enum SiteBit : std::uint32_t {
  kSiteMhsa = 1u << 0,
  kSiteFfn = 1u << 1,
  kSiteHidden = 1u << 2,
  kSiteAttention = 1u << 3,
};
inline constexpr std::uint32_t kKnownSiteBits = 0xFu;

inline std::uint32_t site_bit(Site s) { return 1u << static_cast<std::uint32_t>(s); }

struct TraceMeta {
  std::string model_name;
  std::uint32_t layers = 0;
  std::uint32_t hidden = 0;
  std::uint32_t site_mask = kSiteMhsa | kSiteFfn | kSiteHidden;
  std::uint32_t tokens = 5;  // captured token count k
  std::uint32_t heads = 0;
  std::vector<std::string> labels;
  std::vector<std::string> appraisal_names;

  bool has(Site s) const { return (site_mask & site_bit(s)) != 0; }
  friend bool operator==(const TraceMeta&, const TraceMeta&) = default;
};

struct TraceSample {
  EmotionId label = 0;
  std::vector<float> appraisals;
  ActivationRecord record;  // positions = the last k tokens
};

struct Trace {
  TraceMeta meta;
  std::vector<TraceSample> samples;
};

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    buf_.insert(buf_.end(), b, b + sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  std::size_t size() const { return buf_.size(); }
  std::vector<unsigned char>& bytes() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& buf, std::size_t begin, std::size_t end)
      : buf_(buf), pos_(begin), end_(end) {}

  template <class T>
  T get(const char* field) {
    if (end_ - pos_ < sizeof(T)) throw FormatError(std::string("trace: truncated while reading ") + field);
    unsigned char b[sizeof(T)];
    std::memcpy(b, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  std::string get_string(const char* field) {
    const auto n = get<std::uint32_t>(field);
    if (end_ - pos_ < n) throw FormatError(std::string("trace: truncated string in ") + field);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& buf_;
  std::size_t pos_, end_;
};

inline std::size_t site_floats(const TraceMeta& m, Site s) {
  const std::size_t layers = s == Site::kHidden ? m.layers + 1 : m.layers;
  return layers * m.tokens * m.hidden;
}

inline void write_header(ByteWriter& w, const TraceMeta& m, std::uint64_t n) {
  w.put<char>('E');
  w.put<char>('M');
  w.put<char>('T');
  w.put<char>('R');
  w.put<std::uint32_t>(kTraceVersion);
  w.put<std::uint32_t>(kEndianMarker);
  w.put_string(m.model_name);
  w.put<std::uint32_t>(m.layers);
  w.put<std::uint32_t>(m.hidden);
  w.put<std::uint32_t>(m.site_mask);
  w.put<std::uint32_t>(m.tokens);
  w.put<std::uint32_t>(m.heads);
  w.put<std::uint64_t>(n);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.labels.size()));
  for (const auto& s : m.labels) w.put_string(s);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.appraisal_names.size()));
  for (const auto& s : m.appraisal_names) w.put_string(s);
}

inline void check_sample(const TraceMeta& m, const TraceSample& s, std::size_t i) {
  const std::string where = "trace sample " + std::to_string(i) + ": ";
  const auto& r = s.record;
  if (s.label >= m.labels.size()) throw FormatError(where + "label id out of range");
  if (s.appraisals.size() != m.appraisal_names.size()) throw FormatError(where + "appraisal count mismatch");
  if (r.layers != m.layers || r.hidden_size != m.hidden) throw FormatError(where + "shape mismatch");
  if (r.positions.size() != m.tokens || r.seq_len < m.tokens) throw FormatError(where + "captured token count mismatch");
  for (std::uint32_t j = 0; j < m.tokens; ++j)
    if (r.positions[j] != r.seq_len - m.tokens + j) throw FormatError(where + "captured tokens are not the last k");
  auto finite = [&](const std::vector<float>& v, const char* what) {
    for (float x : v)
      if (!std::isfinite(x)) throw FormatError(where + "non-finite value in " + what);
  };
  finite(s.appraisals, "appraisals");
  for (Site site : {Site::kMhsa, Site::kFfn, Site::kHidden}) {
    if (!m.has(site)) continue;
    const auto& buf = site == Site::kMhsa ? r.mhsa : site == Site::kFfn ? r.ffn : r.hidden;
    if (buf.size() != site_floats(m, site)) throw FormatError(where + std::string(site_name(site)) + " size mismatch");
    finite(buf, site_name(site));
  }
  if (m.has(Site::kAttention)) {
    if (!r.has_attention || r.heads != m.heads ||
        r.attention.size() != std::size_t{m.layers} * m.heads * r.seq_len)
      throw FormatError(where + "attention block missing or mis-sized");
    finite(r.attention, "attention");
  }
}

}  // namespace detail

inline std::vector<unsigned char> encode_trace(const Trace& t) {
  const auto& m = t.meta;
  if (m.site_mask & ~kKnownSiteBits) throw FormatError("trace: unknown site bits in mask");
  for (std::size_t i = 0; i < t.samples.size(); ++i) detail::check_sample(m, t.samples[i], i);

  detail::ByteWriter w;
  detail::write_header(w, m, t.samples.size());
  const std::size_t header_end = w.size();
  std::vector<std::pair<std::uint64_t, std::uint32_t>> index;
  for (const auto& s : t.samples) {
    const std::size_t start = w.size();
    w.put<std::uint16_t>(s.label);
    w.put<std::uint32_t>(s.record.seq_len);
    for (float x : s.appraisals) w.put<float>(x);
    for (Site site : {Site::kMhsa, Site::kFfn, Site::kHidden}) {
      if (!m.has(site)) continue;
      const auto& buf = site == Site::kMhsa ? s.record.mhsa : site == Site::kFfn ? s.record.ffn : s.record.hidden;
      for (float x : buf) w.put<float>(x);
    }
    if (m.has(Site::kAttention))
      for (float x : s.record.attention) w.put<float>(x);
    index.emplace_back(start, crc32_of(w.bytes().data() + start, w.size() - start));
  }
  const std::uint64_t index_offset = w.size();
  for (const auto& [off, crc] : index) {
    w.put<std::uint64_t>(off);
    w.put<std::uint32_t>(crc);
  }
  w.put<std::uint64_t>(index_offset);
  w.put<std::uint32_t>(crc32_of(w.bytes().data(), header_end));
  w.put<std::uint32_t>(crc32_of(w.bytes().data(), w.size()));
  return std::move(w.bytes());
}

inline void write_trace(const Trace& t, const std::string& path) {
  const auto bytes = encode_trace(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}

// Thrown by decode_trace; carries the byte offset the problem was found at.
struct TraceFormatError : FormatError {
  TraceFormatError(const std::string& msg, std::optional<std::uint64_t> off)
      : FormatError(off ? msg + " (offset " + std::to_string(*off) + ")" : msg), offset(off) {}
  std::optional<std::uint64_t> offset;
};

inline Trace decode_trace(const std::vector<unsigned char>& buf) {
  auto fail = [](const std::string& msg, std::optional<std::uint64_t> off = std::nullopt) {
    return TraceFormatError("trace: " + msg, off);
  };
  constexpr std::size_t kFooterTail = 8 + 4 + 4;
  if (buf.size() < 4 || std::memcmp(buf.data(), "EMTR", 4) != 0) throw fail("bad magic", 0);
  if (buf.size() < 4 + 4 + 4 + kFooterTail) throw fail("file too short", buf.size());
  const std::size_t n_bytes = buf.size();
  detail::ByteReader tail(buf, n_bytes - kFooterTail, n_bytes);
  const auto index_offset = tail.get<std::uint64_t>("index offset");
  const auto header_crc = tail.get<std::uint32_t>("header CRC");
  const auto file_crc = tail.get<std::uint32_t>("file CRC");

  detail::ByteReader r(buf, 4, n_bytes - kFooterTail);
  const auto version = r.get<std::uint32_t>("version");
  const auto marker = r.get<std::uint32_t>("endianness marker");
  TraceMeta m;
  std::uint64_t n = 0;
  std::size_t header_end = 0;
  std::optional<std::string> header_problem;
  try {
    m.model_name = r.get_string("model name");
    m.layers = r.get<std::uint32_t>("layers");
    m.hidden = r.get<std::uint32_t>("hidden");
    m.site_mask = r.get<std::uint32_t>("site mask");
    m.tokens = r.get<std::uint32_t>("tokens");
    m.heads = r.get<std::uint32_t>("heads");
    n = r.get<std::uint64_t>("sample count");
    const auto n_labels = r.get<std::uint32_t>("label count");
    if (n_labels > 65536) throw FormatError("implausible label count");
    for (std::uint32_t i = 0; i < n_labels; ++i) m.labels.push_back(r.get_string("label table"));
    const auto n_app = r.get<std::uint32_t>("appraisal count");
    if (n_app > 65536) throw FormatError("implausible appraisal count");
    for (std::uint32_t i = 0; i < n_app; ++i) m.appraisal_names.push_back(r.get_string("appraisal table"));
    header_end = r.pos();
  } catch (const FormatError& e) {
    header_problem = e.what();
  }

  if (!header_problem && crc32_of(buf.data(), header_end) != header_crc) throw fail("header CRC mismatch", 0);
  if (crc32_of(buf.data(), n_bytes - 4) != file_crc) {
    // Localize the damage through the per-record CRCs when the index is intact.
    if (!header_problem && index_offset >= header_end && index_offset + n * 12 + kFooterTail == n_bytes) {
      detail::ByteReader ix(buf, index_offset, n_bytes - kFooterTail);
      std::uint64_t prev_end = header_end;
      for (std::uint64_t i = 0; i < n; ++i) {
        const auto off = ix.get<std::uint64_t>("record offset");
        const auto crc = ix.get<std::uint32_t>("record CRC");
        if (off != prev_end || off > index_offset) break;
        std::uint64_t next = index_offset;
        if (i + 1 < n) {
          detail::ByteReader peek(buf, index_offset + (i + 1) * 12, n_bytes - kFooterTail);
          next = peek.get<std::uint64_t>("record offset");
        }
        if (next < off || next > index_offset) break;
        if (crc32_of(buf.data() + off, next - off) != crc)
          throw fail("CRC mismatch in sample " + std::to_string(i), off);
        prev_end = next;
      }
    }
    throw fail("file CRC mismatch", n_bytes - 4);
  }
  if (version != kTraceVersion) throw fail("unsupported version " + std::to_string(version), 4);
  if (marker != kEndianMarker) throw fail("bad endianness marker", 8);
  if (header_problem) throw fail(*header_problem);
  if (m.site_mask & ~kKnownSiteBits) throw fail("unknown site bit in mask", 12 + 4 + m.model_name.size() + 8);
  if (m.layers == 0 || m.hidden == 0 || m.tokens == 0) throw fail("zero-sized dimension in header");
  if (m.has(Site::kAttention) && m.heads == 0) throw fail("attention present with zero heads");
  if (m.labels.empty()) throw fail("empty label table");
  if (index_offset < header_end || index_offset > n_bytes - kFooterTail ||
      (n_bytes - kFooterTail - index_offset) != n * 12)
    throw fail("declared sample count does not match file size", index_offset);

  Trace t;
  t.meta = m;
  t.samples.reserve(n);
  detail::ByteReader ix(buf, index_offset, n_bytes - kFooterTail);
  std::uint64_t expected = header_end;
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto off = ix.get<std::uint64_t>("record offset");
    ix.get<std::uint32_t>("record CRC");
    if (off != expected) throw fail("record " + std::to_string(i) + " offset mismatch", off);
    detail::ByteReader rr(buf, off, index_offset);
    TraceSample s;
    s.label = rr.get<std::uint16_t>("label");
    if (s.label >= m.labels.size()) throw fail("label id out of range in sample " + std::to_string(i), off);
    auto& rec = s.record;
    rec.layers = m.layers;
    rec.hidden_size = m.hidden;
    rec.heads = m.heads;
    rec.seq_len = rr.get<std::uint32_t>("sequence length");
    if (rec.seq_len < m.tokens) throw fail("sequence shorter than captured window", off);
    for (std::uint32_t j = 0; j < m.tokens; ++j) rec.positions.push_back(rec.seq_len - m.tokens + j);
    auto read_floats = [&](std::vector<float>& dst, std::size_t count, const char* what) {
      dst.resize(count);
      for (auto& x : dst) {
        x = rr.get<float>(what);
        if (!std::isfinite(x)) throw fail(std::string("non-finite value in ") + what, rr.pos() - 4);
      }
    };
    read_floats(s.appraisals, m.appraisal_names.size(), "appraisals");
    if (m.has(Site::kMhsa)) read_floats(rec.mhsa, detail::site_floats(m, Site::kMhsa), "mhsa");
    if (m.has(Site::kFfn)) read_floats(rec.ffn, detail::site_floats(m, Site::kFfn), "ffn");
    if (m.has(Site::kHidden)) read_floats(rec.hidden, detail::site_floats(m, Site::kHidden), "hidden");
    if (m.has(Site::kAttention)) {
      read_floats(rec.attention, std::size_t{m.layers} * m.heads * rec.seq_len, "attention");
      rec.has_attention = true;
    }
    expected = rr.pos();
    t.samples.push_back(std::move(s));
  }
  if (expected != index_offset) throw fail("body size does not match index", expected);
  return t;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Trace read_trace(const std::string& path) { return decode_trace(read_file_bytes(path)); }

struct TraceReport {
  bool valid = false;
  std::string message;
  std::optional<std::uint64_t> error_offset;
  TraceMeta meta;
  std::uint64_t samples = 0;
  // presence[site][layer]; hidden includes layer 0, others start at 1.
  std::array<std::vector<bool>, 4> presence;

  std::string to_string() const {
    std::ostringstream os;
    if (!valid) {
      os << "invalid: " << message << '\n';
      return os.str();
    }
    os << "valid: model '" << meta.model_name << "', " << samples << " samples, L=" << meta.layers
       << ", d=" << meta.hidden << ", k=" << meta.tokens << '\n';
    for (Site s : {Site::kMhsa, Site::kFfn, Site::kHidden, Site::kAttention}) {
      os << site_name(s) << ":";
      const auto& row = presence[static_cast<std::size_t>(s)];
      for (std::size_t l = 0; l < row.size(); ++l) os << ' ' << (row[l] ? '1' : '.');
      os << '\n';
    }
    return os.str();
  }
};

inline TraceReport validate_trace_bytes(const std::vector<unsigned char>& buf) {
  TraceReport rep;
  try {
    const Trace t = decode_trace(buf);
    rep.valid = true;
    rep.message = "valid";
    rep.meta = t.meta;
    rep.samples = t.samples.size();
    for (Site s : {Site::kMhsa, Site::kFfn, Site::kHidden, Site::kAttention}) {
      auto& row = rep.presence[static_cast<std::size_t>(s)];
      row.assign(t.meta.layers + 1, false);
      for (std::uint32_t l = (s == Site::kHidden ? 0 : 1); l <= t.meta.layers; ++l) row[l] = t.meta.has(s);
    }
  } catch (const TraceFormatError& e) {
    rep.message = e.what();
    rep.error_offset = e.offset;
  } catch (const FormatError& e) {
    rep.message = e.what();
  }
  return rep;
}

inline TraceReport validate_trace(const std::string& path) {
  std::vector<unsigned char> buf;
  try {
    buf = read_file_bytes(path);
  } catch (const FormatError& e) {
    TraceReport rep;
    rep.message = e.what();
    return rep;
  }
  return validate_trace_bytes(buf);
}

}  // namespace emoprobe
