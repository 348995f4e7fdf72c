#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "copanet/errors.hpp"
#include "copanet/model.hpp"
#include "copanet/parameters.hpp"
#include "copanet/trainer.hpp"

namespace copanet {

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline constexpr char kCheckpointMagic[4] = {'C', 'P', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
// Optimizer velocity records carry this prefix before the parameter name.
inline constexpr std::string_view kVelocityPrefix = "optim.velocity.";

struct CheckpointRecord {
  std::string name;
  std::uint8_t dtype = 4;  // bytes per value: 4 float, 8 double
  std::vector<std::uint64_t> dims;
  std::vector<unsigned char> raw;  // little-endian values

  std::size_t count() const { return raw.size() / dtype; }

  template <typename T>
  T value(std::size_t i) const {
    if (dtype == 4) return static_cast<T>(decode<float>(i));
    return static_cast<T>(decode<double>(i));
  }

 private:
  template <typename U>
  U decode(std::size_t i) const {
    using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) {
      bits |= static_cast<Bits>(raw[i * sizeof(U) + b]) << (8 * b);
    }
    return std::bit_cast<U>(bits);
  }
};

struct Checkpoint {
  NetworkConfig config;
  std::uint64_t config_digest = 0;
  std::uint64_t epoch = 0;
  std::string rng_state;
  std::uint64_t plan_digest = 0;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records) {
      if (r.name == name) return &r;
    }
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void integer(U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b) {
      bytes_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * b)) & 0xff));
    }
  }
  void text(std::string_view s) {
    integer(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }
  void raw(const void* p, std::size_t n) { bytes_.append(static_cast<const char*>(p), n); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string source)
      : bytes_(bytes), source_(std::move(source)) {}

  template <typename U>
  U integer() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::string text() {
    const auto n = integer<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw DataError(source_ + ": truncated checkpoint at byte " + std::to_string(pos_) +
                      " (needed " + std::to_string(n) + " more, file has " +
                      std::to_string(bytes_.size()) + ")");
    }
  }

  std::string_view bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

template <typename T>
void append_values(std::vector<unsigned char>& raw, std::span<const T> values) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  raw.reserve(values.size() * sizeof(T));
  for (T v : values) {
    const auto bits = std::bit_cast<Bits>(v);
    for (std::size_t b = 0; b < sizeof(T); ++b) {
      raw.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xff));
    }
  }
}

}  // namespace detail

inline std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

inline std::mt19937_64 deserialize_rng(const std::string& state) {
  std::mt19937_64 rng;
  std::istringstream in(state);
  in >> rng;
  if (!in) throw DataError("checkpoint holds an unreadable RNG state");
  return rng;
}

/// Every parameter and BN buffer of `model`, tagged with T's width, plus the
/// optimizer's velocity when one is given.
template <typename T>
Checkpoint make_checkpoint(Model<T>& model, std::uint64_t epoch, const std::mt19937_64& rng,
                           std::uint64_t plan_digest,
                           const SgdOptimizer<T>* optimizer = nullptr) {
  Checkpoint ck;
  ck.config = model.config();
  ck.config_digest = fnv1a64(ck.config.to_text());
  ck.epoch = epoch;
  ck.rng_state = serialize_rng(rng);
  ck.plan_digest = plan_digest;
  auto registry = model.parameters();
  for (const auto& p : registry.parameters()) {
    CheckpointRecord r{p.name, sizeof(T), {}, {}};
    for (auto d : p.tensor.shape()) r.dims.push_back(d);
    detail::append_values<T>(r.raw, p.tensor.data());
    ck.records.push_back(std::move(r));
  }
  for (const auto& b : registry.buffers()) {
    CheckpointRecord r{b.name, sizeof(T), {b.values->size()}, {}};
    detail::append_values<T>(r.raw, std::span<const T>(*b.values));
    ck.records.push_back(std::move(r));
  }
  if (optimizer) {
    const auto& params = registry.parameters();
    const auto& velocity = optimizer->velocity();
    for (std::size_t i = 0; i < params.size(); ++i) {
      CheckpointRecord r{std::string(kVelocityPrefix) + params[i].name, sizeof(T),
                         {velocity[i].size()}, {}};
      detail::append_values<T>(r.raw, std::span<const T>(velocity[i]));
      ck.records.push_back(std::move(r));
    }
  }
  return ck;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.integer(kCheckpointVersion);
  const std::string config_text = ck.config.to_text();
  w.integer(fnv1a64(config_text));
  w.text(config_text);
  w.integer(ck.epoch);
  w.text(ck.rng_state);
  w.integer(ck.plan_digest);
  w.integer(static_cast<std::uint32_t>(ck.records.size()));
  for (const auto& r : ck.records) {
    w.text(r.name);
    w.integer(r.dtype);
    w.integer(static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) w.integer(d);
    w.raw(r.raw.data(), r.raw.size());
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string& source) {
  detail::ByteReader r(bytes, source);
  if (r.take(4) != std::string_view(kCheckpointMagic, 4)) {
    throw DataError(source + ": not a checkpoint (bad magic)");
  }
  const auto version = r.integer<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(source + ": checkpoint version " + std::to_string(version) +
                    " unsupported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.config_digest = r.integer<std::uint64_t>();
  const std::string config_text = r.text();
  if (fnv1a64(config_text) != ck.config_digest) {
    throw DataError(source + ": config digest does not match stored config");
  }
  ck.config = NetworkConfig::from_text(config_text);
  ck.epoch = r.integer<std::uint64_t>();
  ck.rng_state = r.text();
  ck.plan_digest = r.integer<std::uint64_t>();
  const auto count = r.integer<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name = r.text();
    rec.dtype = r.integer<std::uint8_t>();
    if (rec.dtype != 4 && rec.dtype != 8) {
      throw DataError(source + ": record " + rec.name + " has dtype tag " +
                      std::to_string(rec.dtype));
    }
    const auto ndim = r.integer<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      rec.dims.push_back(r.integer<std::uint64_t>());
      n *= rec.dims.back();
    }
    const auto raw = r.take(n * rec.dtype);
    rec.raw.assign(raw.begin(), raw.end());
    ck.records.push_back(std::move(rec));
  }
  if (!r.done()) throw DataError(source + ": trailing bytes after last record");
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(ck);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to checkpoint " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path.string());
}

/// Copies every record into `model`, converting width if the checkpoint was
/// written at the other precision. Missing, extra or misshapen records are
/// errors.
template <typename T>
void restore(Model<T>& model, const Checkpoint& ck) {
  if (!(model.config() == ck.config)) {
    throw DataError("checkpoint config does not match the model:\n" + ck.config.to_text());
  }
  auto registry = model.parameters();
  std::size_t used = 0;
  auto fetch = [&](const std::string& name, std::size_t expected,
                   const std::vector<std::uint64_t>& dims) -> const CheckpointRecord& {
    const auto* rec = ck.find(name);
    if (!rec) throw DataError("checkpoint lacks record " + name);
    if (rec->count() != expected || rec->dims != dims) {
      throw DataError("checkpoint record " + name + " has " + std::to_string(rec->count()) +
                      " values, model expects " + std::to_string(expected));
    }
    ++used;
    return *rec;
  };
  for (auto& p : registry.parameters()) {
    std::vector<std::uint64_t> dims(p.tensor.shape().begin(), p.tensor.shape().end());
    const auto& rec = fetch(p.name, p.tensor.numel(), dims);
    auto values = p.tensor.data();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = rec.template value<T>(i);
  }
  for (auto& b : registry.buffers()) {
    const auto& rec = fetch(b.name, b.values->size(), {b.values->size()});
    for (std::size_t i = 0; i < b.values->size(); ++i) (*b.values)[i] = rec.template value<T>(i);
  }
  std::size_t expected = 0;
  for (const auto& r : ck.records) {
    if (!r.name.starts_with(kVelocityPrefix)) ++expected;
  }
  if (used != expected) {
    throw DataError("checkpoint has " + std::to_string(expected - used) +
                    " records the model does not use");
  }
}

/// Loads velocity records into `optimizer`; false if the checkpoint has none.
template <typename T>
bool restore_optimizer(SgdOptimizer<T>& optimizer, const Checkpoint& ck) {
  const auto& params = optimizer.registry().parameters();
  bool any = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* rec = ck.find(std::string(kVelocityPrefix) + params[i].name);
    if (!rec) {
      if (any) throw DataError("checkpoint lacks velocity for " + params[i].name);
      continue;
    }
    if (i > 0 && !any) throw DataError("checkpoint lacks velocity for " + params[0].name);
    any = true;
    auto& v = optimizer.velocity_mut(i);
    if (rec->count() != v.size()) {
      throw DataError("velocity record for " + params[i].name + " has " +
                      std::to_string(rec->count()) + " values, expected " +
                      std::to_string(v.size()));
    }
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = rec->template value<T>(j);
  }
  return any;
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::filesystem::path& path, std::uint64_t epoch,
                     const std::mt19937_64& rng, std::uint64_t plan_digest,
                     const SgdOptimizer<T>* optimizer = nullptr) {
  write_checkpoint(make_checkpoint(model, epoch, rng, plan_digest, optimizer), path);
}

}  // namespace copanet
