#include "utm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace utm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'U', 'T', 'M', 'C', 'K', 'P', 'T', '1'};

template <typename V>
void put(std::ostream& out, V value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(V));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename V>
V get(std::istream& in, const std::filesystem::path& path) {
  V value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(V));
  if (!in) throw std::runtime_error("truncated checkpoint: " + path.string());
  return value;
}

std::string get_string(std::istream& in, const std::filesystem::path& path) {
  const auto n = get<std::uint32_t>(in, path);
  if (n > (1u << 28)) throw std::runtime_error("corrupt checkpoint string length: " + path.string());
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw std::runtime_error("truncated checkpoint: " + path.string());
  return s;
}

}  // namespace

const StoredArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

const StoredArray& Checkpoint::get(const std::string& name) const {
  const auto* a = find(name);
  if (!a) throw std::runtime_error("checkpoint has no array named '" + name + "'");
  return *a;
}

template <typename T>
void Checkpoint::add(const std::string& name, const Tensor<T>& tensor) {
  add(name, tensor.shape(), std::vector<double>(tensor.data().begin(), tensor.data().end()),
      static_cast<std::uint8_t>(sizeof(T)));
}

void Checkpoint::add(const std::string& name, Shape shape, std::vector<double> values,
                     std::uint8_t width) {
  if (static_cast<std::int64_t>(values.size()) != numel(shape)) {
    throw ShapeError("checkpoint array '" + name + "' has " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  if (width != 4 && width != 8) throw std::invalid_argument("element width must be 4 or 8");
  arrays.push_back({name, std::move(shape), width, std::move(values)});
}

template <typename T>
void Checkpoint::load_into(const std::string& name, Tensor<T>& tensor) const {
  const auto& a = get(name);
  if (a.shape != tensor.shape()) {
    throw ShapeError("checkpoint array '" + name + "' has shape " + shape_str(a.shape) +
                     ", expected " + shape_str(tensor.shape()));
  }
  auto dst = tensor.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a.values[i]);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + tmp);
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
    for (const auto& [k, v] : ckpt.metadata) {
      put_string(out, k);
      put_string(out, v);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.arrays.size()));
    for (const auto& a : ckpt.arrays) {
      put_string(out, a.name);
      put<std::uint8_t>(out, a.width);
      put<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
      for (auto d : a.shape) put<std::int64_t>(out, d);
      if (a.width == 8) {
        out.write(reinterpret_cast<const char*>(a.values.data()),
                  static_cast<std::streamsize>(a.values.size() * sizeof(double)));
      } else {
        std::vector<float> narrow(a.values.begin(), a.values.end());
        out.write(reinterpret_cast<const char*>(narrow.data()),
                  static_cast<std::streamsize>(narrow.size() * sizeof(float)));
      }
    }
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  Checkpoint ckpt;
  const auto n_meta = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = get_string(in, path);
    ckpt.metadata[k] = get_string(in, path);
  }
  const auto n_arrays = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    StoredArray a;
    a.name = get_string(in, path);
    a.width = get<std::uint8_t>(in, path);
    if (a.width != 4 && a.width != 8) {
      throw std::runtime_error("bad element width in checkpoint: " + path.string());
    }
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 16) throw std::runtime_error("bad rank in checkpoint: " + path.string());
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(get<std::int64_t>(in, path));
    const auto n = static_cast<std::size_t>(numel(a.shape));
    if (a.width == 8) {
      a.values.resize(n);
      in.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(n * 8));
    } else {
      std::vector<float> narrow(n);
      in.read(reinterpret_cast<char*>(narrow.data()), static_cast<std::streamsize>(n * 4));
      a.values.assign(narrow.begin(), narrow.end());
    }
    if (!in) throw std::runtime_error("truncated checkpoint: " + path.string());
    ckpt.arrays.push_back(std::move(a));
  }
  return ckpt;
}

template void Checkpoint::add(const std::string&, const Tensor<float>&);
template void Checkpoint::add(const std::string&, const Tensor<double>&);
template void Checkpoint::load_into(const std::string&, Tensor<float>&) const;
template void Checkpoint::load_into(const std::string&, Tensor<double>&) const;

}  // namespace utm
