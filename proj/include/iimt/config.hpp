#pragma once

// Flat "key = value" configuration text. '#' starts a comment; blank lines are
// ignored; keys are dotted names such as "stage2.alpha".

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace iimt {

class Config {
 public:
  static Config parse(const std::string& text, const std::string& source = "<text>");
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value);
  // Entries of other replace entries of this.
  void merge(const Config& other);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_reals(const std::string& key, const std::vector<double>& fallback) const;

  // Keys present here but absent from known.
  std::vector<std::string> unknown_keys(const Config& known) const;
  // Sorted "key = value" lines.
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

std::string format_real(double v);

}  // namespace iimt
