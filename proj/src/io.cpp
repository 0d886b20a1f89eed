#include "mmbind/io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "mmbind/error.hpp"

namespace mmbind::io {

namespace {

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
}

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    for (T v : values) {
        const T le = to_little(v);
        out.write(reinterpret_cast<const char*>(&le), sizeof(T));
    }
    if (!out) throw FormatError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open for reading: " + path.string());
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (bytes % sizeof(T) != 0) throw FormatError("truncated array file: " + path.string());
    std::vector<T> values(bytes / sizeof(T));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
    for (T& v : values) v = to_little(v);
    return values;
}

}  // namespace

void write_f32(const fs::path& path, const Matrix& m) {
    std::vector<float> flat;
    flat.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(static_cast<float>(m(r, c)));
    write_raw(path, flat);
}

Matrix read_f32(const fs::path& path, Eigen::Index rows, Eigen::Index cols) {
    const auto flat = read_raw<float>(path);
    if (static_cast<Eigen::Index>(flat.size()) != rows * cols)
        throw ShapeError(path.filename().string() + ": expected " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " = " + std::to_string(rows * cols) +
                         " values, found " + std::to_string(flat.size()));
    Matrix m(rows, cols);
    std::size_t at = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat[at++];
    return m;
}

void write_f32(const fs::path& path, const std::vector<double>& values) {
    std::vector<float> flat(values.begin(), values.end());
    write_raw(path, flat);
}

std::vector<double> read_f32(const fs::path& path) {
    const auto flat = read_raw<float>(path);
    return {flat.begin(), flat.end()};
}

void write_i32(const fs::path& path, const std::vector<int>& values) {
    std::vector<std::int32_t> v(values.begin(), values.end());
    write_raw(path, v);
}

std::vector<int> read_i32(const fs::path& path) {
    const auto v = read_raw<std::int32_t>(path);
    return {v.begin(), v.end()};
}

void write_i64(const fs::path& path, const std::vector<std::int64_t>& values) { write_raw(path, values); }

std::vector<std::int64_t> read_i64(const fs::path& path) { return read_raw<std::int64_t>(path); }

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace mmbind::io
