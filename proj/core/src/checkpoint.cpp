#include "ktir/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "ktir/errors.hpp"

namespace ktir {
namespace {

constexpr std::array<char, 5> kMagic = {'K', 'T', 'I', 'R', '1'};

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

template <typename T>
bool get_le(std::istream& in, T& value) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) return false;
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  value = static_cast<T>(v);
  return true;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic.data(), kMagic.size());
  for (const auto& [name, tensor] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) put_le<std::uint64_t>(out, d);
    for (double v : tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<char, 5> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw CheckpointMismatch(path.string() + " is not a KTIR1 checkpoint");

  std::vector<NamedTensor> tensors;
  while (in.peek() != std::char_traits<char>::eof()) {
    std::uint32_t name_len = 0, rank = 0;
    if (!get_le(in, name_len)) break;
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || !get_le(in, rank) || rank > 2) {
      throw CheckpointMismatch("truncated or corrupt entry in " + path.string());
    }
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t dim = 0;
      if (!get_le(in, dim)) throw CheckpointMismatch("truncated dims in " + path.string());
      d = static_cast<std::size_t>(dim);
    }
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) {
      std::uint64_t bits = 0;
      if (!get_le(in, bits)) throw CheckpointMismatch("truncated payload for " + name);
      v = std::bit_cast<double>(bits);
    }
    tensors.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  return tensors;
}

}  // namespace ktir
