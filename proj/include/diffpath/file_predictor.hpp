#pragma once

// Prediction manifest: plain text, one entry per line,
//
//   <sample_id> TAB <timestep> TAB <tensor file relative to the manifest>
//
// Lines starting with '#' are comments.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>

#include "diffpath/error.hpp"
#include "diffpath/predictor.hpp"
#include "diffpath/tensor.hpp"
#include "diffpath/tensor_io.hpp"

namespace diffpath {

inline constexpr const char* kPredictionManifest = "predictions.tsv";

using PredictionKey = std::pair<std::string, int>;

/// Replays stored predictions keyed by (sample id, timestep).
class FilePredictor final : public NoisePredictor {
 public:
  explicit FilePredictor(const std::filesystem::path& manifest) : manifest_(manifest) {
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open prediction manifest '" + manifest.string() + "'");
    const auto base = manifest.parent_path();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      const auto a = line.find('\t');
      const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
      if (b == std::string::npos) {
        throw InvalidArgument(manifest.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
      }
      int t = 0;
      try {
        t = std::stoi(line.substr(a + 1, b - a - 1));
      } catch (const std::exception&) {
        throw InvalidArgument(manifest.string() + ":" + std::to_string(lineno) + ": bad timestep");
      }
      index_[{line.substr(0, a), t}] = base / line.substr(b + 1);
    }
  }

  Tensor predict(const Tensor& xt, int t, std::string_view sample_id) const override {
    const auto it = index_.find({std::string(sample_id), t});
    if (it == index_.end()) {
      throw LookupError("no stored prediction for sample '" + std::string(sample_id) + "' at t=" + std::to_string(t));
    }
    Tensor out = read_tensor_file(it->second);
    if (out.size() != xt.size()) {
      throw ContractError("stored prediction '" + it->second.string() + "' has " + std::to_string(out.size()) +
                          " elements, input has " + std::to_string(xt.size()));
    }
    return Tensor(xt.dims(), std::vector<float>(out.values().begin(), out.values().end()));
  }

  std::string name() const override { return "files:" + manifest_.string(); }

  std::size_t entries() const noexcept { return index_.size(); }
  bool contains(const std::string& sample_id, int t) const { return index_.count({sample_id, t}) != 0; }

 private:
  std::filesystem::path manifest_;
  std::map<PredictionKey, std::filesystem::path> index_;
};

/// Writes prediction tensors under a directory and maintains its manifest.
class PredictionWriter {
 public:
  explicit PredictionWriter(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  void add(const std::string& sample_id, int t, const Tensor& prediction) {
    std::string stem = sample_id;
    for (char& c : stem) {
      if (c == '/' || c == '\\' || c == ' ' || c == '\t' || c == '#') c = '_';
    }
    const std::string file = stem + "_t" + std::to_string(t) + kTensorExtension;
    write_tensor_file(dir_ / file, prediction);
    entries_[{sample_id, t}] = file;
  }

  /// Writes the manifest; returns its path.
  std::filesystem::path finish() const {
    std::ostringstream os;
    os << "# sample_id\ttimestep\tfile\n";
    for (const auto& [key, file] : entries_) os << key.first << '\t' << key.second << '\t' << file << '\n';
    const auto path = dir_ / kPredictionManifest;
    write_text_file(path, os.str());
    return path;
  }

 private:
  std::filesystem::path dir_;
  std::map<PredictionKey, std::string> entries_;
};

}  // namespace diffpath
