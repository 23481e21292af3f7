#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "branchkit/encoder.hpp"
#include "branchkit/synthetic.hpp"

namespace branchkit::harness {

// Minimal TOML-style reader: [section] headers, `key = value` lines, `#`
// comments. Values are booleans, integers, floats or quoted strings.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text);
  static ConfigFile parse_file(const std::filesystem::path& path);

  bool has(const std::string& section, const std::string& key) const;
  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  // Keys present in the file but never read by the consumer; used to reject
  // typos.
  std::vector<std::string> unconsumed() const;

 private:
  struct Entry {
    std::string value;
    mutable bool consumed = false;
  };
  std::map<std::string, std::map<std::string, Entry>> sections_;
};

struct TrainConfig {
  nn::EncoderConfig model;
  std::int64_t vocab = 10;
  SyntheticTaskSpec task;
  double peak_lr = 2e-3;
  std::int64_t warmup_steps = 75;
  std::int64_t epochs = 10;
  std::int64_t batch_frames = 800;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  double weight_decay = 0.0;
  std::int64_t log_every = 1;
  nn::SpecAugmentConfig specaug;

  static TrainConfig from_string(const std::string& text);
  static TrainConfig from_file(const std::filesystem::path& path);

  // Canonical serialization: stable field order, full precision. Writing the
  // result back through from_string reproduces the config.
  std::string canonical() const;
  std::string digest() const;  // FNV-1a 64 of canonical(), hex
};

}  // namespace branchkit::harness
