#pragma once

// Binary checkpoint layout (all integers and doubles little-endian):
//
//   "GPDCKPT\0"                      8-byte magic
//   u32 version                      currently 1
//   u32 n, n bytes                   metadata: UTF-8 "key=value\n" lines
//   u32 count                        tensor table
//     u32 len, len bytes             name
//     u32 ndim, ndim x u64           extents
//     numel x f64                    values
//   u32 crc32                        over every preceding byte

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "gpd/errors.hpp"
#include "gpd/model_graph.hpp"
#include "gpd/tensor.hpp"

namespace gpd {

inline constexpr char kCheckpointMagic[8] = {'G', 'P', 'D', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) throw FormatError(what + ": bad number '" + s + "'");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || s.empty()) {
    throw FormatError(what + ": bad integer '" + s + "'");
  }
  return v;
}

inline std::uint32_t crc32_of(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void put_bytes(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_ += s;
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  std::string& str() { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (end_ - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at offset " +
                        std::to_string(pos_));
    }
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::string layer_line(const LayerSpec& l, const LayerParams& p) {
  std::ostringstream s;
  s << to_string(l.kind) << " role=" << to_string(l.role) << " in=" << l.in_channels << " out=" << l.out_channels
    << " k=" << l.kernel << " stride=" << l.stride << " pad=" << l.padding << " bias=" << (l.bias ? 1 : 0);
  if (const auto* bn = std::get_if<DualBNState>(&p)) {
    s << " momentum=" << format_double(bn->momentum) << " eps=" << format_double(bn->eps);
  }
  return s.str();
}

}  // namespace detail

inline std::string metadata_text(const ModelGraph& m) {
  std::ostringstream s;
  const auto& mt = m.meta;
  s << "arch=" << mt.arch << "\n"
    << "ratio=" << mt.ratio << "\n"
    << "branches=" << mt.branches << "\n"
    << "ir_mode=" << to_string(mt.ir_mode) << "\n"
    << "epsilon=" << format_double(mt.epsilon) << "\n"
    << "seed=" << mt.seed << "\n"
    << "expand_seed=" << mt.expand_seed << "\n"
    << "input_shape=";
  for (std::size_t i = 0; i < mt.input_shape.size(); ++i) s << (i ? "," : "") << mt.input_shape[i];
  s << "\n"
    << "num_classes=" << mt.num_classes << "\n"
    << "layers=" << m.layers.size() << "\n";
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    s << "layer." << i << "=" << detail::layer_line(m.layers[i], m.params[i]) << "\n";
  }
  return s.str();
}

inline std::string serialize(const ModelGraph& m) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put_bytes(metadata_text(m));
  const auto tensors = m.state();
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.put_bytes(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    for (double v : t.values()) w.put(v);
  }
  w.put(crc32_of(w.str(), w.str().size()));
  return std::move(w.str());
}

namespace detail {

inline std::map<std::string, std::string> parse_kv_tokens(std::istringstream& in, const std::string& where) {
  std::map<std::string, std::string> kv;
  std::string tok;
  while (in >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError(where + ": expected key=value, got '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

inline const std::string& require_key(const std::map<std::string, std::string>& kv, const std::string& key,
                                      const std::string& where) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(where + ": missing '" + key + "'");
  return it->second;
}

}  // namespace detail

inline ModelGraph deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kCheckpointMagic + 4 + 4) {
    throw FormatError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, 4);
  const auto actual = crc32_of(bytes, body);
  if (stored != actual) {
    std::ostringstream s;
    s << "checkpoint checksum mismatch (stored " << std::hex << stored << ", computed " << actual
      << "); file is corrupt or truncated";
    throw FormatError(s.str());
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw FormatError("not a checkpoint: bad magic at offset 0");
  }
  detail::ByteReader r(bytes, body);
  r.get<std::array<char, 8>>("magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }

  std::map<std::string, std::string> meta;
  {
    std::istringstream lines(r.get_bytes("metadata"));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("checkpoint metadata line without '=': " + line);
      meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  const std::string mw = "checkpoint metadata";
  ModelGraph m;
  m.meta.arch = detail::require_key(meta, "arch", mw);
  m.meta.ratio = parse_uint(detail::require_key(meta, "ratio", mw), "ratio");
  m.meta.branches = parse_uint(detail::require_key(meta, "branches", mw), "branches");
  try {
    m.meta.ir_mode = parse_ir_mode(detail::require_key(meta, "ir_mode", mw));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  m.meta.epsilon = parse_double(detail::require_key(meta, "epsilon", mw), "epsilon");
  m.meta.seed = parse_uint(detail::require_key(meta, "seed", mw), "seed");
  m.meta.expand_seed = parse_uint(detail::require_key(meta, "expand_seed", mw), "expand_seed");
  m.meta.num_classes = parse_uint(detail::require_key(meta, "num_classes", mw), "num_classes");
  {
    std::istringstream s(detail::require_key(meta, "input_shape", mw));
    std::string part;
    while (std::getline(s, part, ',')) m.meta.input_shape.push_back(parse_uint(part, "input_shape"));
  }
  if (m.meta.ratio < 1 || m.meta.branches < 1) throw FormatError("checkpoint metadata: r and M must be >= 1");

  const auto n_layers = parse_uint(detail::require_key(meta, "layers", mw), "layers");
  std::vector<std::pair<double, double>> bn_consts(n_layers, {0.1, 1e-5});
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::string key = "layer." + std::to_string(i);
    std::istringstream s(detail::require_key(meta, key, mw));
    std::string kind;
    s >> kind;
    LayerSpec l;
    try {
      l.kind = parse_layer_kind(kind);
    } catch (const ConfigError& e) {
      throw FormatError(key + ": " + e.what());
    }
    const auto kv = detail::parse_kv_tokens(s, key);
    try {
      l.role = parse_role(detail::require_key(kv, "role", key));
    } catch (const ConfigError& e) {
      throw FormatError(key + ": " + e.what());
    }
    l.in_channels = parse_uint(detail::require_key(kv, "in", key), key);
    l.out_channels = parse_uint(detail::require_key(kv, "out", key), key);
    l.kernel = parse_uint(detail::require_key(kv, "k", key), key);
    l.stride = parse_uint(detail::require_key(kv, "stride", key), key);
    l.padding = parse_uint(detail::require_key(kv, "pad", key), key);
    l.bias = parse_uint(detail::require_key(kv, "bias", key), key) != 0;
    if (l.kind == LayerKind::bn) {
      bn_consts[i] = {parse_double(detail::require_key(kv, "momentum", key), key),
                      parse_double(detail::require_key(kv, "eps", key), key)};
    }
    m.layers.push_back(l);
  }
  try {
    infer_shapes(m.layers, m.meta.input_shape);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint describes an invalid model: ") + e.what());
  }

  std::map<std::string, Tensor> table;
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    auto name = r.get_bytes("tensor name");
    const auto ndim = r.get<std::uint32_t>("tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.get<std::uint64_t>("tensor extent"));
    const auto n = shape_numel(shape);
    if (r.remaining() / sizeof(double) < n) {
      throw FormatError("checkpoint truncated in tensor '" + name + "' at offset " + std::to_string(r.pos()));
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.get<double>("tensor values");
    if (!table.emplace(name, Tensor(std::move(shape), std::move(values))).second) {
      throw FormatError("checkpoint has duplicate tensor '" + name + "'");
    }
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has trailing bytes at offset " + std::to_string(r.pos()));

  auto take = [&](const std::string& name, bool trainable) {
    auto it = table.find(name);
    if (it == table.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    Tensor t = it->second;
    table.erase(it);
    t.set_requires_grad(trainable);
    return t;
  };
  const std::size_t r_ = m.meta.ratio, branches = m.meta.branches;
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const std::string p = "L" + std::to_string(i) + ".";
    if (l.weight_bearing()) {
      ExpandedBlock b;
      for (std::size_t br = 0; br < branches; ++br) {
        std::vector<Tensor> stack;
        const std::size_t depth = br == 0 ? 1 : 2;
        for (std::size_t j = 0; j < depth; ++j)
          stack.push_back(take(p + "branch" + std::to_string(br) + ".w" + std::to_string(j), true));
        b.branches.push_back(std::move(stack));
      }
      if (branches > 1)
        for (std::size_t br = 0; br < branches; ++br) b.scales.push_back(take(p + "scale" + std::to_string(br), true));
      if (l.bias) b.bias = take(p + "bias", true);
      const Shape want{l.teacher_out(r_), l.teacher_in(r_), l.kernel, l.kernel};
      if (b.main_kernel().shape() != want) {
        throw FormatError("checkpoint tensor " + p + "branch0.w0 has shape " + shape_str(b.main_kernel().shape()) +
                          ", layer spec implies " + shape_str(want));
      }
      m.params.emplace_back(std::move(b));
    } else if (l.kind == LayerKind::bn) {
      DualBNState s;
      s.gamma = take(p + "gamma", true);
      s.beta = take(p + "beta", true);
      s.teacher_mean = take(p + "teacher_mean", false);
      s.teacher_var = take(p + "teacher_var", false);
      s.student_mean = take(p + "student_mean", false);
      s.student_var = take(p + "student_var", false);
      s.momentum = bn_consts[i].first;
      s.eps = bn_consts[i].second;
      m.params.emplace_back(std::move(s));
    } else {
      m.params.emplace_back(std::monostate{});
    }
  }
  if (!table.empty()) throw FormatError("checkpoint has unexpected tensor '" + table.begin()->first + "'");
  return m;
}

// Writes to a sibling temporary file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("write to " + tmp.string() + " failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void save(const ModelGraph& m, const std::filesystem::path& path) { write_file_atomic(path, serialize(m)); }

inline ModelGraph load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

}  // namespace gpd
