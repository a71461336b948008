// SPDX-License-Identifier: Apache-2.0
//
// Flat key/value run configuration shared by every subcommand. Values come
// from built-in defaults, then an optional `key = value` file, then command
// line flags, each layer overriding the previous one.

#pragma once

#include "maskrdt/bench.hpp"
#include "maskrdt/model.hpp"
#include "maskrdt/simulator.hpp"
#include "maskrdt/training.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace maskrdt {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
  bool is_flag = false;  // boolean
};

const std::vector<ConfigKey>& config_keys();

class RunConfig {
 public:
  RunConfig();

  // Rejects unknown keys.
  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  void load_file(const std::filesystem::path& path);
  void print(std::ostream& out) const;

  std::string str(const std::string& key) const { return get(key); }
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::size_t> list(const std::string& key) const;

  SimConfig sim() const;
  ModelConfig model() const;
  TrainConfig train() const;
  BenchConfig bench() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace maskrdt
