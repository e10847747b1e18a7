#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dmtl/corpus.hpp"

namespace fx {

using namespace dmtl;

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "dmtl") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline fs::path data_dir() { return fs::path(DMTL_DATA_DIR); }

inline TaskSpec multiclass(const std::string& name, std::vector<std::string> vocab) {
  TaskSpec t;
  t.name = name;
  t.vocabulary = std::move(vocab);
  return t;
}

inline TaskSpec multilabel(const std::string& name, std::vector<std::string> vocab) {
  TaskSpec t;
  t.name = name;
  t.kind = TaskKind::multilabel;
  t.vocabulary = std::move(vocab);
  t.loss.kind = losses::LossKind::bce;
  return t;
}

// Document with `n` sentences "s0 ... s{n-1}" and no labels.
inline Document plain_doc(const std::string& id, std::size_t n, Split split = Split::train) {
  Document d;
  d.doc_id = id;
  d.split = split;
  for (std::size_t j = 0; j < n; ++j) {
    Sentence s;
    s.index = j;
    s.text = "sentence " + std::to_string(j) + " of " + id;
    d.sentences.push_back(std::move(s));
  }
  return d;
}

}  // namespace fx
