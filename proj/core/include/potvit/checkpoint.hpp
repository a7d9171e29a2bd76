#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "potvit/model.hpp"
#include "potvit/numerics.hpp"

namespace potvit {

// One row of manifest.json. Integer blobs additionally carry bits/signed.
struct ManifestEntry {
  std::string name;
  Shape shape;
  std::string dtype;  // "f32", "i8" or "i32"
  std::string file;
  std::uint64_t byte_offset = 0;
  std::uint64_t byte_len = 0;
  int bits = 0;
  bool is_signed = true;
};

// Collects tensors in insertion order and writes them as one little-endian
// blob file plus manifest.json.
class BlobWriter {
 public:
  void add(const std::string& name, const Tensor& t);
  // Codes of at most 8 bits are stored as int8 (uint8 for unsigned), wider ones as int32.
  void add(const std::string& name, const IntTensor& t);
  void write(const std::filesystem::path& dir, const std::string& blob_file = "tensors.bin") const;

 private:
  std::vector<ManifestEntry> entries_;
  std::vector<std::uint8_t> bytes_;
};

class BlobReader {
 public:
  // Validates the manifest against the blob files; throws ConfigError on any inconsistency.
  explicit BlobReader(const std::filesystem::path& dir);

  const std::vector<ManifestEntry>& entries() const { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor tensor(const std::string& name) const;
  IntTensor int_tensor(const std::string& name) const;

 private:
  const ManifestEntry& entry(const std::string& name) const;
  std::vector<ManifestEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::vector<std::uint8_t>> files_;
};

// Directory layout: manifest.json, tensors.bin, config.json (ModelConfig).
void save_checkpoint(const FloatModel& model, const std::filesystem::path& dir);
FloatModel load_checkpoint(const std::filesystem::path& dir);

nlohmann::json read_json_file(const std::filesystem::path& path);
// Pretty-printed with a trailing newline so artifacts diff cleanly.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace potvit
