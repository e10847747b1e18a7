#pragma once

// Training-data augmentation through a pluggable round-trip translator.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dmtl/corpus.hpp"
#include "dmtl/encoder.hpp"

namespace dmtl::augment {

class AugmentError : public Error {
 public:
  using Error::Error;
};

// Out-and-back translation of a batch of lines. Deterministic given (lines, seed,
// sample index).
class Augmenter {
 public:
  virtual ~Augmenter() = default;
  virtual std::vector<std::string> translate_out(const std::vector<std::string>& lines, std::size_t sample) = 0;
  virtual std::vector<std::string> translate_back(const std::vector<std::string>& lines, std::size_t sample) = 0;

  std::vector<std::string> paraphrase(const std::vector<std::string>& lines, std::size_t sample) {
    auto pivot = translate_out(lines, sample);
    if (pivot.size() != lines.size())
      throw AugmentError("translator returned " + std::to_string(pivot.size()) + " lines for " +
                         std::to_string(lines.size()));
    auto back = translate_back(pivot, sample);
    if (back.size() != lines.size())
      throw AugmentError("back-translator returned " + std::to_string(back.size()) + " lines for " +
                         std::to_string(lines.size()));
    for (std::size_t i = 0; i < lines.size(); ++i)
      if (!lines[i].empty() && back[i].empty()) throw AugmentError("empty paraphrase for a non-empty line");
    return back;
  }
};

// Seeded synonym-style substitution on the way out, adjacent swaps on the way
// back. Perturbation rates scale with temperature; 0 returns the input.
class MockAugmenter final : public Augmenter {
 public:
  MockAugmenter(std::uint64_t seed, double temperature) : seed_(seed), temperature_(temperature) {
    if (!(temperature >= 0.0)) throw ValidationError("augmenter temperature must be >= 0");
  }

  std::vector<std::string> translate_out(const std::vector<std::string>& lines, std::size_t sample) override {
    std::vector<std::string> out;
    const double p = std::min(1.0, 0.5 * temperature_);
    for (const auto& line : lines) {
      auto rng = stream(line, sample, "out");
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::vector<std::string> toks = encoder::tokenize(line);
      for (auto& t : toks)
        if (u(rng) < p) t += "~" + std::to_string(1 + rng() % 3);
      out.push_back(join(toks, line));
    }
    return out;
  }

  std::vector<std::string> translate_back(const std::vector<std::string>& lines, std::size_t sample) override {
    std::vector<std::string> out;
    const double p = std::min(1.0, 0.25 * temperature_);
    for (const auto& line : lines) {
      auto rng = stream(line, sample, "back");
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::vector<std::string> toks = encoder::tokenize(line);
      for (std::size_t i = 0; i + 1 < toks.size(); ++i)
        if (u(rng) < p) {
          std::swap(toks[i], toks[i + 1]);
          ++i;
        }
      out.push_back(join(toks, line));
    }
    return out;
  }

 private:
  std::mt19937_64 stream(const std::string& line, std::size_t sample, const char* stage) const {
    return std::mt19937_64(mix_seed(derive_seed(seed_, std::string(stage) + ":" + line), sample + 1));
  }

  // Untouched input stays byte-identical (tokenize would lowercase/split it).
  std::string join(const std::vector<std::string>& toks, const std::string& original) const {
    if (temperature_ == 0.0) return original;
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (i) s += ' ';
      s += toks[i];
    }
    return s.empty() ? original : s;
  }

  std::uint64_t seed_;
  double temperature_;
};

// Runs `command` through /bin/sh, feeding lines on stdin and reading the same
// number of lines from stdout. DMTL_SEED, DMTL_TEMPERATURE and DMTL_SAMPLE are
// exported to the child.
inline std::vector<std::string> run_line_filter(const std::string& command, const std::vector<std::string>& lines,
                                                std::uint64_t seed, double temperature, std::size_t sample) {
  int in_pipe[2], out_pipe[2];
  if (pipe(in_pipe) != 0) throw AugmentError(std::string("pipe: ") + std::strerror(errno));
  if (pipe(out_pipe) != 0) {
    close(in_pipe[0]);
    close(in_pipe[1]);
    throw AugmentError(std::string("pipe: ") + std::strerror(errno));
  }
  const std::string seed_s = std::to_string(seed), temp_s = std::to_string(temperature),
                    sample_s = std::to_string(sample);
  const pid_t pid = fork();
  if (pid < 0) throw AugmentError(std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    dup2(in_pipe[0], STDIN_FILENO);
    dup2(out_pipe[1], STDOUT_FILENO);
    close(in_pipe[0]);
    close(in_pipe[1]);
    close(out_pipe[0]);
    close(out_pipe[1]);
    setenv("DMTL_SEED", seed_s.c_str(), 1);
    setenv("DMTL_TEMPERATURE", temp_s.c_str(), 1);
    setenv("DMTL_SAMPLE", sample_s.c_str(), 1);
    execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  close(in_pipe[0]);
  close(out_pipe[1]);
  // Writer runs in the parent; the child may block on output, so write from a
  // forked helper only when the payload is large. Small payloads fit the pipe.
  std::string payload;
  for (const auto& l : lines) {
    if (l.find('\n') != std::string::npos) throw AugmentError("translator input contains a newline");
    payload += l + '\n';
  }
  auto old = signal(SIGPIPE, SIG_IGN);
  pid_t writer = -1;
  if (payload.size() > 32768) {
    writer = fork();
    if (writer == 0) {
      close(out_pipe[0]);
      std::size_t off = 0;
      while (off < payload.size()) {
        const auto w = write(in_pipe[1], payload.data() + off, payload.size() - off);
        if (w <= 0) break;
        off += static_cast<std::size_t>(w);
      }
      _exit(0);
    }
  } else {
    std::size_t off = 0;
    while (off < payload.size()) {
      const auto w = write(in_pipe[1], payload.data() + off, payload.size() - off);
      if (w <= 0) break;
      off += static_cast<std::size_t>(w);
    }
  }
  close(in_pipe[1]);
  std::string output;
  char buf[4096];
  for (;;) {
    const auto r = read(out_pipe[0], buf, sizeof buf);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) break;
    output.append(buf, static_cast<std::size_t>(r));
  }
  close(out_pipe[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  if (writer > 0) waitpid(writer, nullptr, 0);
  signal(SIGPIPE, old);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw AugmentError("translator '" + command + "' failed with status " + std::to_string(status));
  std::vector<std::string> out;
  std::istringstream ss(output);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    out.push_back(line);
  }
  return out;
}

class ProcessAugmenter final : public Augmenter {
 public:
  ProcessAugmenter(std::string out_cmd, std::string back_cmd, std::uint64_t seed, double temperature)
      : out_(std::move(out_cmd)), back_(std::move(back_cmd)), seed_(seed), temperature_(temperature) {
    if (out_.empty() || back_.empty()) throw ValidationError("external augmenter needs both translator commands");
  }

  std::vector<std::string> translate_out(const std::vector<std::string>& lines, std::size_t sample) override {
    return run_line_filter(out_, lines, seed_, temperature_, sample);
  }
  std::vector<std::string> translate_back(const std::vector<std::string>& lines, std::size_t sample) override {
    return run_line_filter(back_, lines, seed_, temperature_, sample);
  }

 private:
  std::string out_, back_;
  std::uint64_t seed_;
  double temperature_;
};

struct SentenceAugmentation {
  std::vector<std::string> paraphrases;
  std::size_t failed = 0;
  bool incomplete() const { return failed > 0; }
};

// n paraphrases of one sentence; failed samples are skipped with a warning.
inline SentenceAugmentation augment_sentence(const std::string& text, Augmenter& aug, std::size_t n) {
  if (n == 0) throw ValidationError("augment_sentence: n must be >= 1");
  SentenceAugmentation r;
  for (std::size_t k = 0; k < n; ++k) {
    try {
      r.paraphrases.push_back(aug.paraphrase({text}, k).at(0));
    } catch (const AugmentError& e) {
      ++r.failed;
      warn(std::string("augmentation sample ") + std::to_string(k) + " skipped: " + e.what());
    }
  }
  return r;
}

struct ExpansionStats {
  std::size_t added_documents = 0;
  std::size_t failed_copies = 0;
};

// Appends n whole-document paraphrase copies of every train document. Labels,
// sentence order and headline presence are preserved; dev/test are untouched.
inline Corpus expand_training_set(const Corpus& corpus, Augmenter& aug, std::size_t n, ExpansionStats* stats = nullptr) {
  Corpus out = corpus;
  ExpansionStats st;
  if (n == 0) {
    if (stats) *stats = st;
    return out;
  }
  for (const auto& d : corpus.documents) {
    if (d.split != Split::train) continue;
    std::vector<std::string> texts;
    for (const auto& s : d.sentences) texts.push_back(s.text);
    for (std::size_t k = 0; k < n; ++k) {
      std::vector<std::string> para;
      try {
        para = aug.paraphrase(texts, k);
      } catch (const AugmentError& e) {
        ++st.failed_copies;
        warn("document '" + d.doc_id + "' copy " + std::to_string(k) + " skipped: " + e.what());
        continue;
      }
      Document c = d;
      c.doc_id = d.doc_id + "#aug" + std::to_string(k);
      for (std::size_t j = 0; j < c.sentences.size(); ++j) c.sentences[j].text = para[j];
      if (d.headline) {
        try {
          c.headline = aug.paraphrase({*d.headline}, k).at(0);
        } catch (const AugmentError&) {
          // keep the original headline
        }
      }
      out.documents.push_back(std::move(c));
      ++st.added_documents;
    }
  }
  if (stats) *stats = st;
  return out;
}

}  // namespace dmtl::augment
