#include "gafield/serialize.hpp"

#include <cstring>
#include <fstream>

#include "gafield/pointcloud.hpp"  // DataError

namespace gafield {

namespace {

constexpr char kMagic[8] = {'G', 'A', 'F', 'A', 'R', 'C', 'H', '1'};

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("archive: truncated file");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto len = get<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw DataError("archive: truncated string");
  return s;
}

template <class T>
void put_payload(std::ostream& os, const std::vector<T>& v) {
  os.write(reinterpret_cast<const char*>(v.data()),
           static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
std::vector<T> get_payload(std::istream& is, std::size_t n) {
  std::vector<T> v(n);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw DataError("archive: truncated payload");
  return v;
}

void put_shape(std::ostream& os, const Shape& s) {
  put<std::uint8_t>(os, static_cast<std::uint8_t>(s.size()));
  for (std::size_t d : s) put<std::uint64_t>(os, d);
}

Shape get_shape(std::istream& is) {
  const auto ndim = get<std::uint8_t>(is);
  Shape s(ndim);
  for (auto& d : s) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  return s;
}

}  // namespace

ArchiveEntry ArchiveEntry::make_text(std::string t) {
  ArchiveEntry e;
  e.kind = Kind::text;
  e.text = std::move(t);
  return e;
}

ArchiveEntry ArchiveEntry::make_f64(const Tensor& t) {
  ArchiveEntry e;
  e.kind = Kind::f64;
  e.shape = t.shape();
  e.f64.assign(t.vec().begin(), t.vec().end());
  return e;
}

ArchiveEntry ArchiveEntry::make_f32(const Tensor& t) {
  ArchiveEntry e;
  e.kind = Kind::f32;
  e.shape = t.shape();
  e.f32.reserve(t.numel());
  for (double v : t.vec()) e.f32.push_back(static_cast<float>(v));
  return e;
}

ArchiveEntry ArchiveEntry::make_i32(Shape shape, std::vector<std::int32_t> v) {
  if (shape_numel(shape) != v.size()) throw ShapeError("archive: i32 shape/payload mismatch");
  ArchiveEntry e;
  e.kind = Kind::i32;
  e.shape = std::move(shape);
  e.i32 = std::move(v);
  return e;
}

Tensor ArchiveEntry::as_tensor() const {
  switch (kind) {
    case Kind::f64:
      return Tensor::from(shape, f64);
    case Kind::f32: {
      std::vector<double> v(f32.begin(), f32.end());
      return Tensor::from(shape, std::move(v));
    }
    case Kind::i32: {
      std::vector<double> v(i32.begin(), i32.end());
      return Tensor::from(shape, std::move(v));
    }
    case Kind::text:
      break;
  }
  throw DataError("archive: entry is not numeric");
}

void write_archive(const std::string& path, const Archive& archive) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("archive: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(archive.size()));
  for (const auto& [name, e] : archive) {
    put_string(os, name);
    put<std::uint8_t>(os, static_cast<std::uint8_t>(e.kind));
    switch (e.kind) {
      case ArchiveEntry::Kind::text:
        put<std::uint64_t>(os, e.text.size());
        os.write(e.text.data(), static_cast<std::streamsize>(e.text.size()));
        break;
      case ArchiveEntry::Kind::f64:
        put_shape(os, e.shape);
        put_payload(os, e.f64);
        break;
      case ArchiveEntry::Kind::f32:
        put_shape(os, e.shape);
        put_payload(os, e.f32);
        break;
      case ArchiveEntry::Kind::i32:
        put_shape(os, e.shape);
        put_payload(os, e.i32);
        break;
    }
  }
  if (!os) throw DataError("archive: write to '" + path + "' failed");
}

Archive read_archive(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("archive: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw DataError("archive: '" + path + "' is not a gafield archive");
  const auto count = get<std::uint32_t>(is);
  Archive archive;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_string(is);
    ArchiveEntry e;
    e.kind = static_cast<ArchiveEntry::Kind>(get<std::uint8_t>(is));
    switch (e.kind) {
      case ArchiveEntry::Kind::text: {
        const auto len = get<std::uint64_t>(is);
        e.text.resize(len);
        is.read(e.text.data(), static_cast<std::streamsize>(len));
        if (!is) throw DataError("archive: truncated text entry");
        break;
      }
      case ArchiveEntry::Kind::f64:
        e.shape = get_shape(is);
        e.f64 = get_payload<double>(is, shape_numel(e.shape));
        break;
      case ArchiveEntry::Kind::f32:
        e.shape = get_shape(is);
        e.f32 = get_payload<float>(is, shape_numel(e.shape));
        break;
      case ArchiveEntry::Kind::i32:
        e.shape = get_shape(is);
        e.i32 = get_payload<std::int32_t>(is, shape_numel(e.shape));
        break;
      default:
        throw DataError("archive: unknown entry kind");
    }
    archive.emplace(name, std::move(e));
  }
  return archive;
}

}  // namespace gafield
