#include "qeebm/checkpoint.hpp"

#include <array>
#include <bit>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "qeebm/rng.hpp"

namespace qeebm {

namespace {

constexpr std::array<char, 8> kMagic{'Q', 'E', 'E', 'B', 'M', 'C', 'K', '1'};

template <typename T>
void put_le(std::vector<unsigned char>& buf, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  void bytes(void* dst, std::size_t n) {
    if (!in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n)))
      throw CheckpointError("checkpoint truncated");
  }

  template <typename T>
  T le() {
    unsigned char b[sizeof(T)];
    bytes(b, sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[i]) << (8 * i));
    return v;
  }

 private:
  std::istream& in_;
};

}  // namespace

void save_checkpoint(std::ostream& out, const ParameterStore& store, ModelKind kind) {
  std::vector<unsigned char> head(kMagic.begin(), kMagic.end());
  put_le<std::uint32_t>(head, kCheckpointVersion);
  put_le<std::uint32_t>(head, static_cast<std::uint32_t>(kind));
  const auto& params = store.parameters();
  put_le<std::uint32_t>(head, static_cast<std::uint32_t>(params.size()));
  std::size_t values = 0;
  for (const auto& p : params) {
    put_le<std::uint32_t>(head, static_cast<std::uint32_t>(p.name.size()));
    head.insert(head.end(), p.name.begin(), p.name.end());
    put_le<std::uint32_t>(head, static_cast<std::uint32_t>(p.shape.size()));
    for (std::size_t d : p.shape) put_le<std::uint64_t>(head, d);
    head.push_back(p.frozen ? 1 : 0);
    values += p.size();
  }
  std::vector<unsigned char> payload;
  payload.reserve(values * 8);
  for (const auto& p : params)
    for (double v : p.value) put_le<std::uint64_t>(payload, std::bit_cast<std::uint64_t>(v));
  put_le<std::uint64_t>(head, payload.size());

  std::vector<unsigned char> tail;
  put_le<std::uint64_t>(tail, fnv1a64(payload));
  for (const auto* buf : {&head, &payload, &tail})
    out.write(reinterpret_cast<const char*>(buf->data()), static_cast<std::streamsize>(buf->size()));
  if (!out) throw CheckpointError("checkpoint write failed");
}

void load_checkpoint(std::istream& in, ParameterStore& store, ModelKind kind) {
  Reader r(in);
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kMagic) throw CheckpointError("not a checkpoint (bad magic)");
  if (const auto v = r.le<std::uint32_t>(); v != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  if (const auto k = r.le<std::uint32_t>(); k != static_cast<std::uint32_t>(kind))
    throw CheckpointError("checkpoint holds model kind " + std::to_string(k) + ", expected " +
                          std::to_string(static_cast<std::uint32_t>(kind)));

  auto& params = store.parameters();
  const auto count = r.le<std::uint32_t>();
  if (count != params.size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " parameters, model has " +
                          std::to_string(params.size()));
  std::vector<bool> frozen(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.le<std::uint32_t>();
    if (len > 4096) throw CheckpointError("implausible parameter name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    const auto rank = r.le<std::uint32_t>();
    if (rank > 8) throw CheckpointError("implausible rank for " + name);
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.le<std::uint64_t>();
    if (name != params[i].name || shape != params[i].shape)
      throw CheckpointError("manifest mismatch at " + std::to_string(i) + ": checkpoint " + name + " " +
                            ad::shape_string(shape) + ", model " + params[i].name + " " +
                            ad::shape_string(params[i].shape));
    unsigned char f = 0;
    r.bytes(&f, 1);
    frozen[i] = f != 0;
  }

  const auto bytes = r.le<std::uint64_t>();
  std::size_t expected = 0;
  for (const auto& p : params) expected += p.size() * 8;
  if (bytes != expected) throw CheckpointError("payload size does not match manifest");
  std::vector<unsigned char> payload(expected);
  r.bytes(payload.data(), payload.size());
  if (r.le<std::uint64_t>() != fnv1a64(payload)) throw CheckpointError("checkpoint checksum mismatch");

  std::size_t at = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    for (double& v : params[i].value) {
      std::uint64_t u = 0;
      for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(payload[at + b]) << (8 * b);
      v = std::bit_cast<double>(u);
      at += 8;
    }
    params[i].frozen = frozen[i];
  }
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, ModelKind kind) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    save_checkpoint(out, store, kind);
  }
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(const std::filesystem::path& path, ParameterStore& store, ModelKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  load_checkpoint(in, store, kind);
}

}  // namespace qeebm
