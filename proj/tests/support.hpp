#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "joel/rng.hpp"
#include "joel/taxonomy.hpp"

namespace joel::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("joel-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
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

// k planted fraud concepts c0..c{k-1} followed by the two fallbacks.
inline ConceptTaxonomy small_taxonomy(std::size_t k) {
  std::vector<Concept> cs;
  for (std::size_t i = 0; i < k; ++i) {
    cs.push_back({"c" + std::to_string(i), "C" + std::to_string(i),
                  i % 3 == 2 ? Polarity::legit : Polarity::fraud, ""});
  }
  cs.push_back({"other_fraud", "Other fraud", Polarity::other_fraud, ""});
  cs.push_back({"other_legit", "Other legit", Polarity::other_legit, ""});
  return ConceptTaxonomy(std::move(cs));
}

}  // namespace joel::testing
