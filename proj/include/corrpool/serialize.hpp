// corrpool/serialize.hpp

// Copyright 2026  The corrpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Binary tensor records ("CPT1"):
//
//   bytes 0-3   magic "CPT1"
//   byte  4     dtype code (1 = f32, 2 = f64)
//   byte  5     rank
//   then        rank x u64 dims, little-endian
//   then        product(dims) raw values, little-endian IEEE-754
//
// Records may be concatenated back to back in one stream.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

#include "corrpool/tensor.hpp"

namespace corrpool {

static_assert(std::endian::native == std::endian::little,
              "CPT1 I/O assumes a little-endian host");

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

template <Real T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

inline constexpr char kTensorMagic[4] = {'C', 'P', 'T', '1'};

template <Real T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 4);
  const auto code = static_cast<std::uint8_t>(dtype_of<T>());
  const auto rank = static_cast<std::uint8_t>(t.rank());
  if (t.rank() > 255) throw ShapeError("CPT1 supports rank <= 255");
  os.put(static_cast<char>(code));
  os.put(static_cast<char>(rank));
  for (std::size_t d : t.shape()) {
    const std::uint64_t v = d;
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw IoError("failed writing CPT1 tensor");
}

/// Reads one record. Values stored in the other precision are converted.
template <Real T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw IoError("unexpected end of stream reading CPT1 magic");
  if (std::memcmp(magic, kTensorMagic, 4) != 0) throw IoError("bad CPT1 magic");
  const int code = is.get();
  const int rank = is.get();
  if (!is) throw IoError("truncated CPT1 header");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) throw IoError("truncated CPT1 dims");
    d = static_cast<std::size_t>(v);
  }
  const std::size_t n = shape_numel(shape);
  auto read_as = [&]<typename S>(S) {
    std::vector<S> raw(n);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(S))))
      throw IoError("truncated CPT1 payload");
    return Tensor<T>(shape, std::vector<T>(raw.begin(), raw.end()));
  };
  if (code == static_cast<int>(DType::kF32)) return read_as(float{});
  if (code == static_cast<int>(DType::kF64)) return read_as(double{});
  throw IoError("unknown CPT1 dtype code " + std::to_string(code));
}

template <Real T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <Real T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is);
}

}  // namespace corrpool
