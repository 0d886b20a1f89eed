#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "mmbind/corpus.hpp"
#include "mmbind/rng.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("mmbind-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// Two incomplete datasets (m1, ms) and (m2, ms) over three small modalities.
inline mmbind::CorpusSpec small_spec(int size = 60, std::uint64_t seed = 7) {
    mmbind::CorpusSpec s;
    s.num_classes = 3;
    s.modalities = {{"m1", 6}, {"m2", 5}, {"ms", 4}};
    s.latent_dim = 4;
    s.class_separation = 2.0;
    s.modality_snr = {{"m1", 3.0}, {"m2", 3.0}, {"ms", 5.0}};
    s.datasets = {{"A", {"m1", "ms"}, size, 0.1, std::nullopt, {}}, {"B", {"m2", "ms"}, size, 0.1, std::nullopt, {}}};
    s.finetune_size = 9;
    s.test_size = 30;
    s.seed = seed;
    return s;
}

inline mmbind::Matrix random_matrix(mmbind::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
    mmbind::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
    return m;
}

}  // namespace testing
