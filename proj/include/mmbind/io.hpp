#pragma once

// Little-endian flat array files and small JSON helpers shared by every
// on-disk artifact (corpora, checkpoints, pseudo-paired datasets).

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mmbind/nn.hpp"

namespace mmbind::io {

namespace fs = std::filesystem;
using nlohmann::json;

void write_f32(const fs::path& path, const Matrix& m);  // row-major
Matrix read_f32(const fs::path& path, Eigen::Index rows, Eigen::Index cols);

void write_f32(const fs::path& path, const std::vector<double>& values);
std::vector<double> read_f32(const fs::path& path);

void write_i32(const fs::path& path, const std::vector<int>& values);
std::vector<int> read_i32(const fs::path& path);

void write_i64(const fs::path& path, const std::vector<std::int64_t>& values);
std::vector<std::int64_t> read_i64(const fs::path& path);

json read_json(const fs::path& path);
void write_json(const fs::path& path, const json& j);

/// Round a value to the nearest float32, so in-memory data survives a
/// float32 round trip bit-exactly.
inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace mmbind::io
