#include "dlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "dlab/error.hpp"

namespace dlab {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("checkpoint truncated");
  return value;
}

}  // namespace

void write_checkpoint(std::ostream& out, const std::vector<NamedTensor>& params) {
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto e : tensor.shape()) put<std::uint64_t>(out, e);
    const auto data = tensor.data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed to write checkpoint");
}

std::vector<NamedTensor> read_checkpoint(std::istream& in) {
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw DataError("not a DLAB1 checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + "); re-save it with this build");
  }
  const auto count = get<std::uint32_t>(in);
  std::vector<NamedTensor> params;
  params.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in);
    if (name_len > (1u << 16)) throw DataError("checkpoint record name too long");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(in);
    if (rank == 0 || rank > 8) throw DataError("checkpoint record '" + name + "' has invalid rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(in));
    std::vector<double> values(shape_numel(shape));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw DataError("checkpoint truncated in record '" + name + "'");
    params.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, params);
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace dlab
