#pragma once

// Binary container for named entries: text blobs and shaped numeric arrays
// with little-endian payloads. Entries are written sorted by name, so equal
// content produces byte-identical files.

#include <bit>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "gafield/tensor.hpp"

namespace gafield {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

struct ArchiveEntry {
  enum class Kind : std::uint8_t { text = 0, f64 = 1, f32 = 2, i32 = 3 };
  Kind kind = Kind::text;
  std::string text;
  Shape shape;
  std::vector<double> f64;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;

  static ArchiveEntry make_text(std::string t);
  static ArchiveEntry make_f64(const Tensor& t);
  static ArchiveEntry make_f32(const Tensor& t);  // stored at float precision
  static ArchiveEntry make_i32(Shape shape, std::vector<std::int32_t> v);

  // Promotes f32 payloads to double.
  Tensor as_tensor() const;
};

using Archive = std::map<std::string, ArchiveEntry>;

void write_archive(const std::string& path, const Archive& archive);
Archive read_archive(const std::string& path);

}  // namespace gafield
