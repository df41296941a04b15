// Shared helpers for the unit tests.
#pragma once

#include <unistd.h>

#include <cstdint>
#include <filesystem>
#include <string>

#include "budbreak/rng.hpp"
#include "budbreak/tensorcore.hpp"

namespace testing_support {

inline budbreak::Matrix random_matrix(budbreak::Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                      double scale = 1.0) {
  budbreak::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline budbreak::Tensor2 random_tensor(budbreak::Rng& rng, Eigen::Index rows, Eigen::Index cols,
                                       double scale = 1.0) {
  budbreak::Tensor2 m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

inline budbreak::GruParams random_gru(budbreak::Rng& rng, Eigen::Index in, Eigen::Index hidden,
                                      double scale = 0.5) {
  budbreak::GruParams p;
  p.w_input = random_tensor(rng, 3 * hidden, in, scale);
  p.w_hidden = random_tensor(rng, 3 * hidden, hidden, scale);
  p.b_input = random_tensor(rng, 3 * hidden, 1, scale);
  p.b_hidden_n = random_tensor(rng, hidden, 1, scale);
  return p;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("budbreak_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing_support
