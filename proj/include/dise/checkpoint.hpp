//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "dise/common.hpp"
#include "dise/denoiser.hpp"

// Binary checkpoint layout (all integers little-endian):
//
//   "DISEKPT1" | u16 version | u32 header length | header text
//   records: u16 name length | name | u8 rank | u32 dims[rank] | f64 payload
//   u32 CRC32 of everything before it
//
// The header is "key=value" lines. Parameters are stored under their layout
// names, optimizer moments under "adam_m/<name>" and "adam_v/<name>".
namespace dise {

inline constexpr std::string_view kCheckpointMagic = "DISEKPT1";
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void *p, std::size_t n) {
    const auto *c = static_cast<const unsigned char *>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
      buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double d) { uint(std::bit_cast<std::uint64_t>(d)); }
  std::vector<unsigned char> &buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char *p, std::size_t n) : p_(p), n_(n) {}
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw TruncatedFile("checkpoint ends prematurely");
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<U>(p_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str(std::size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char *>(p_ + pos_), k);
    pos_ += k;
    return s;
  }
  void skip(std::size_t k) {
    need(k);
    pos_ += k;
  }
  std::size_t pos() const { return pos_; }

 private:
  const unsigned char *p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double parse_double(const std::string &s) {
  try {
    std::size_t used = 0;
    const double d = std::stod(s, &used);
    if (used == s.size()) return d;
  } catch (const std::logic_error &) {
  }
  throw ModelError("bad number '" + s + "' in checkpoint header");
}

struct Record {
  std::string name;
  Mat<double> value;
};

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const TrainState &st) {
  const auto &cfg = st.model.config();
  const auto &layout = st.model.layout();
  std::map<std::string, std::string> h;
  h["preset"] = cfg.preset;
  h["n_layers"] = std::to_string(cfg.n_layers);
  h["n_heads"] = std::to_string(cfg.n_heads);
  h["dx"] = std::to_string(cfg.dx);
  h["de"] = std::to_string(cfg.de);
  h["dy"] = std::to_string(cfg.dy);
  h["ffx"] = std::to_string(cfg.ffx);
  h["ffe"] = std::to_string(cfg.ffe);
  h["ffy"] = std::to_string(cfg.ffy);
  h["k_classes"] = std::to_string(cfg.k_classes);
  h["alphabet"] = cfg.alphabet == AtomAlphabet::Plain ? "plain" : "super";
  h["step"] = std::to_string(st.step);
  h["seed"] = std::to_string(st.seed);
  h["t_max"] = std::to_string(st.t_max);
  h["s"] = detail::fmt_double(st.s);
  h["prior_name"] = st.prior.name();
  std::string probs;
  for (double p : st.prior.probs())
    probs += (probs.empty() ? "" : ",") + detail::fmt_double(p);
  h["prior"] = probs;
  h["modality"] = st.modality;
  h["val_loss"] = detail::fmt_double(st.val_loss);
  h["lr"] = detail::fmt_double(st.optimizer.lr);
  h["weight_decay"] = detail::fmt_double(st.optimizer.weight_decay);
  h["beta1"] = detail::fmt_double(st.optimizer.beta1);
  h["beta2"] = detail::fmt_double(st.optimizer.beta2);
  h["eps"] = detail::fmt_double(st.optimizer.eps);
  h["clip_norm"] = detail::fmt_double(st.optimizer.clip_norm);
  h["records"] = std::to_string(3 * layout.size());
  std::string header;
  for (const auto &[k, v] : h) header += k + "=" + v + "\n";

  detail::ByteWriter w;
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.uint<std::uint16_t>(kCheckpointVersion);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
  w.bytes(header.data(), header.size());
  auto record = [&](const std::string &name, const Mat<double> &m) {
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.uint<std::uint8_t>(2);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
  };
  for (std::size_t i = 0; i < layout.size(); ++i) record(layout[i].name, st.model.params()[i]);
  for (std::size_t i = 0; i < layout.size(); ++i)
    record("adam_m/" + layout[i].name, st.adam_m[i]);
  for (std::size_t i = 0; i < layout.size(); ++i)
    record("adam_v/" + layout[i].name, st.adam_v[i]);
  auto &buf = w.buffer();
  const auto crc = crc32(0L, buf.data(), static_cast<uInt>(buf.size()));
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(crc));
  return std::move(buf);
}

inline TrainState deserialize_checkpoint(const std::vector<unsigned char> &buf) {
  if (buf.size() < kCheckpointMagic.size() ||
      std::memcmp(buf.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
    throw BadMagic("not a checkpoint (bad magic)");
  detail::ByteReader r(buf.data(), buf.size());
  r.skip(kCheckpointMagic.size());
  const auto version = r.uint<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw VersionMismatch("checkpoint version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  const auto header_len = r.uint<std::uint32_t>();
  const std::string header = r.str(header_len);
  std::map<std::string, std::string> h;
  {
    std::istringstream in(header);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      h[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  auto get = [&](const std::string &k) -> const std::string & {
    auto it = h.find(k);
    if (it == h.end()) throw ModelError("checkpoint header lacks '" + k + "'");
    return it->second;
  };
  auto get_int = [&](const std::string &k) {
    try {
      return std::stoll(get(k));
    } catch (const std::logic_error &) {
      throw ModelError("bad integer for '" + k + "' in checkpoint header");
    }
  };

  // Walk the records once without trusting the checksum so that a short
  // file is reported as truncated rather than corrupt.
  const auto n_records = static_cast<std::size_t>(get_int("records"));
  std::vector<detail::Record> records;
  for (std::size_t i = 0; i < n_records; ++i) {
    detail::Record rec;
    rec.name = r.str(r.uint<std::uint16_t>());
    const auto rank = r.uint<std::uint8_t>();
    if (rank != 2) throw ModelError("unsupported tensor rank in " + rec.name);
    const auto rows = r.uint<std::uint32_t>();
    const auto cols = r.uint<std::uint32_t>();
    r.need(static_cast<std::size_t>(rows) * cols * 8);
    rec.value.resize(rows, cols);
    for (Eigen::Index k = 0; k < rec.value.size(); ++k) rec.value.data()[k] = r.f64();
    records.push_back(std::move(rec));
  }
  const std::size_t body = r.pos();
  const auto stored = r.uint<std::uint32_t>();
  if (r.pos() != buf.size()) {
    // trailing garbage changes what the CRC covers
    throw ChecksumMismatch("checkpoint has trailing bytes");
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, buf.data(), static_cast<uInt>(body)));
  if (crc != stored) throw ChecksumMismatch("checkpoint checksum mismatch");

  ModelConfig cfg;
  cfg.preset = get("preset");
  cfg.n_layers = static_cast<int>(get_int("n_layers"));
  cfg.n_heads = static_cast<int>(get_int("n_heads"));
  cfg.dx = static_cast<int>(get_int("dx"));
  cfg.de = static_cast<int>(get_int("de"));
  cfg.dy = static_cast<int>(get_int("dy"));
  cfg.ffx = static_cast<int>(get_int("ffx"));
  cfg.ffe = static_cast<int>(get_int("ffe"));
  cfg.ffy = static_cast<int>(get_int("ffy"));
  cfg.k_classes = static_cast<int>(get_int("k_classes"));
  const auto &alpha = get("alphabet");
  if (alpha != "plain" && alpha != "super") throw ModelError("bad alphabet " + alpha);
  cfg.alphabet = alpha == "plain" ? AtomAlphabet::Plain : AtomAlphabet::SuperAtom;

  const auto layout = param_layout(cfg);
  if (records.size() != 3 * layout.size())
    throw ShapeMismatch("checkpoint record count does not match the config");
  std::vector<Mat<double>> params, m, v;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto &p = records[i];
    const auto &pm = records[layout.size() + i];
    const auto &pv = records[2 * layout.size() + i];
    if (p.name != layout[i].name || pm.name != "adam_m/" + layout[i].name ||
        pv.name != "adam_v/" + layout[i].name)
      throw ShapeMismatch("unexpected checkpoint record " + p.name);
    params.push_back(p.value);
    m.push_back(pm.value);
    v.push_back(pv.value);
  }
  TrainState st;
  st.model = Denoiser(cfg, std::move(params));
  st.adam_m = std::move(m);
  st.adam_v = std::move(v);
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (st.adam_m[i].rows() != layout[i].rows || st.adam_m[i].cols() != layout[i].cols ||
        st.adam_v[i].rows() != layout[i].rows || st.adam_v[i].cols() != layout[i].cols)
      throw ShapeMismatch("optimizer moment shape mismatch");
  st.step = get_int("step");
  try {
    st.seed = std::stoull(get("seed"));
  } catch (const std::logic_error &) {
    throw ModelError("bad seed in checkpoint header");
  }
  st.t_max = static_cast<int>(get_int("t_max"));
  st.s = detail::parse_double(get("s"));
  {
    std::vector<double> probs;
    std::istringstream in(get("prior"));
    std::string tok;
    while (std::getline(in, tok, ',')) probs.push_back(detail::parse_double(tok));
    st.prior = PriorK(std::move(probs), get("prior_name"));
  }
  st.modality = get("modality");
  st.val_loss = detail::parse_double(get("val_loss"));
  st.optimizer.lr = detail::parse_double(get("lr"));
  st.optimizer.weight_decay = detail::parse_double(get("weight_decay"));
  st.optimizer.beta1 = detail::parse_double(get("beta1"));
  st.optimizer.beta2 = detail::parse_double(get("beta2"));
  st.optimizer.eps = detail::parse_double(get("eps"));
  st.optimizer.clip_norm = detail::parse_double(get("clip_norm"));
  return st;
}

inline void save_checkpoint(const TrainState &st, const std::string &path) {
  const auto buf = serialize_checkpoint(st);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ModelError("cannot write checkpoint " + path);
  os.write(reinterpret_cast<const char *>(buf.data()),
           static_cast<std::streamsize>(buf.size()));
  if (!os) throw ModelError("failed writing checkpoint " + path);
}

inline TrainState load_checkpoint(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingModel("cannot open checkpoint " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(is)),
                                 std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf);
}

}  // namespace dise
