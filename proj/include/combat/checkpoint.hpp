#pragma once

// Binary parameter checkpoints.
//
// Layout (little-endian):
//   char[4]  magic "CBNN"
//   u32      format version
//   str      kind            (u32 length + bytes; e.g. "policy", "qnet", "dynamics")
//   u32      layer count
//   per layer: u32 in, u32 out, u8 activation, f64 dropout, f64 scale,
//              f64[in*out] weights (row-major), f64[out] bias
//   u32      extra vector count
//   per extra: str name, u32 length, f64[length]
//
// Doubles are stored as raw IEEE-754 bits, so save/load round-trips exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "combat/network.hpp"

namespace combat::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string kind;
  Network network;
  std::map<std::string, RowVector> extras;
};

namespace detail {

template <typename T> void put(std::ostream& out, T v) { out.write(reinterpret_cast<const char*>(&v), sizeof(T)); }

template <typename T> T get(std::istream& in)
{
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("truncated checkpoint");
  return v;
}

inline void put_string(std::ostream& out, const std::string& s)
{
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in)
{
  auto n = get<std::uint32_t>(in);
  if (n > (1u << 20)) throw CheckpointError("implausible string length in checkpoint");
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw CheckpointError("truncated checkpoint");
  return s;
}

} // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ckpt)
{
  out.write("CBNN", 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put_string(out, ckpt.kind);
  const auto& layers = ckpt.network.layers();
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(layers.size()));
  for (const Layer& l : layers) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.in()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.out()));
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(l.activation));
    detail::put<double>(out, l.dropout);
    detail::put<double>(out, l.scale);
    for (Eigen::Index r = 0; r < l.in(); ++r)
      for (Eigen::Index c = 0; c < l.out(); ++c) detail::put<double>(out, l.weights(r, c));
    for (Eigen::Index c = 0; c < l.out(); ++c) detail::put<double>(out, l.bias(c));
  }
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.extras.size()));
  for (const auto& [name, v] : ckpt.extras) {
    detail::put_string(out, name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) detail::put<double>(out, v(i));
  }
  if (!out) throw CheckpointError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& in)
{
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "CBNN", 4) != 0) throw CheckpointError("not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.kind = detail::get_string(in);
  const auto n_layers = detail::get<std::uint32_t>(in);
  std::vector<Layer> layers;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    Layer l;
    const auto rows = detail::get<std::uint32_t>(in);
    const auto cols = detail::get<std::uint32_t>(in);
    if (rows > 100000 || cols > 100000) throw CheckpointError("implausible layer shape in checkpoint");
    const auto act = detail::get<std::uint8_t>(in);
    if (act > static_cast<std::uint8_t>(Activation::ScaledSigmoid)) throw CheckpointError("unknown activation code");
    l.activation = static_cast<Activation>(act);
    l.dropout = detail::get<double>(in);
    l.scale = detail::get<double>(in);
    l.weights.resize(rows, cols);
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = detail::get<double>(in);
    l.bias.resize(cols);
    for (Eigen::Index c = 0; c < l.bias.size(); ++c) l.bias(c) = detail::get<double>(in);
    layers.push_back(std::move(l));
  }
  try {
    ckpt.network = Network(std::move(layers));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid network in checkpoint: ") + e.what());
  }
  const auto n_extras = detail::get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_extras; ++i) {
    std::string name = detail::get_string(in);
    const auto n = detail::get<std::uint32_t>(in);
    RowVector v(n);
    for (std::uint32_t k = 0; k < n; ++k) v(k) = detail::get<double>(in);
    ckpt.extras.emplace(std::move(name), std::move(v));
  }
  return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt)
{
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(out, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

} // namespace combat::nn
